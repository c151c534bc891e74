//! Track extension: each 3D point is projected into every camera not already
//! observing it; where the splat-visibility query passes, the projection
//! lands in-image, and the epipolar distance to every existing observation
//! stays under the gate, the view joins the track as a new observation.
//! Failures of any gate simply skip the candidate view.

use crate::geometry::{self, Pixel};
use crate::parallel;
use crate::splatvis::{composite_visibility, GaussianSet};
use crate::tracks::{ImageId, Observation, PointId, Provenance, SceneModel, Track};

/// Default Sampson-distance gate for extension candidates, in pixels.
pub const DEFAULT_EPI_THRESH: f64 = 4.0;

/// Extends every track. Existing observations are never moved or removed;
/// re-running on the output is a no-op because candidate views are exactly
/// the cameras absent from each track.
pub fn extend_tracks(
    model: &SceneModel,
    set: &GaussianSet,
    eps_v: f64,
    epi_thresh: f64,
) -> SceneModel {
    let items: Vec<(PointId, &Track)> = model.tracks.iter().map(|(&id, t)| (id, t)).collect();
    let additions = parallel::map_ordered(&items, |&(pid, track)| {
        (pid, extension_candidates(model, set, track, eps_v, epi_thresh))
    });

    let mut out = model.clone();
    for (pid, added) in additions {
        let track = out.tracks.get_mut(&pid).expect("track ids are stable");
        for obs in added {
            track.upsert(obs);
        }
    }
    out
}

fn extension_candidates(
    model: &SceneModel,
    set: &GaussianSet,
    track: &Track,
    eps_v: f64,
    epi_thresh: f64,
) -> Vec<Observation> {
    let point = &model.points[&track.point];
    let mut added = Vec::new();
    for (&image, cam) in &model.cameras {
        if track.observes(image) {
            continue;
        }
        match composite_visibility(set, track.point, &cam.pose, &cam.intrinsics, eps_v) {
            Ok(v) if v.visible => {}
            _ => continue,
        }
        let Ok(pixel) = geometry::project(point, &cam.pose, &cam.intrinsics) else {
            continue;
        };
        if !cam.intrinsics.contains(&pixel) {
            continue;
        }
        if passes_epipolar_gate(model, track, image, &pixel, epi_thresh) {
            added.push(Observation { image, pixel, provenance: Provenance::Extended });
        }
    }
    added
}

/// The projected pixel must sit within `epi_thresh` Sampson distance of the
/// epipolar geometry induced with every existing observation's camera.
fn passes_epipolar_gate(
    model: &SceneModel,
    track: &Track,
    candidate: ImageId,
    pixel: &Pixel,
    epi_thresh: f64,
) -> bool {
    let cand = &model.cameras[&candidate];
    track.observations.iter().all(|obs| {
        let cam = &model.cameras[&obs.image];
        match geometry::epipolar_distance(
            pixel,
            &obs.pixel,
            &cand.pose,
            &cand.intrinsics,
            &cam.pose,
            &cam.intrinsics,
        ) {
            Ok(d) => d <= epi_thresh,
            Err(_) => false,
        }
    })
}
