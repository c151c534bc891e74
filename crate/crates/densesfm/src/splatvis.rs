//! 3D Gaussians and per-(point, camera) visibility queries.
//!
//! Scene points become small isotropic "SfM-point" Gaussians with opacity 1;
//! occluder Gaussians come from the synthetic generator or a PLY import. A
//! visibility query casts one ray per pixel of the target's projected
//! footprint, composites the transmittance of every Gaussian strictly nearer
//! than the target along that ray, and takes the maximum over the footprint.
//!
//! Instead of rasterizing screen-space splats, each Gaussian responds to a
//! ray analytically with `alpha * exp(-d^2 / (2 sigma_perp^2))`, where `d`
//! is the ray's closest approach to the mean and `sigma_perp` the Gaussian's
//! standard deviation along the offset direction. The compositing order is
//! mean depth along the ray, ties broken by insertion index.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Point3, Quaternion, Unit, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{self, CameraIntrinsics, CameraPose, MIN_DEPTH};
use crate::ply::{self, PlyError};
use crate::tracks::{PointId, SceneModel};

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("point {0} has no sfm gaussian")]
    UnknownPoint(PointId),
    #[error("target gaussian is behind the camera (depth {depth:e})")]
    BehindCamera { depth: f64 },
    #[error("target gaussian projects outside the image at ({x}, {y})")]
    OutOfImage { x: f64, y: f64 },
    #[error("point {0} has no observation with positive depth")]
    CheiralityFailure(PointId),
    #[error(transparent)]
    Ply(#[from] PlyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaussianKind {
    SfmPoint,
    Occluder,
}

/// One anisotropic 3D Gaussian. `scale` holds per-axis standard deviations in
/// world units; SfM-point Gaussians are isotropic with identity rotation and
/// opacity exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mean: Point3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub kind: GaussianKind,
}

impl Gaussian3D {
    /// Covariance `R diag(scale^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let d = Matrix3::from_diagonal(&self.scale.map(|s| s * s));
        r * d * r.transpose()
    }
}

/// Gaussians partitioned into SfM-point Gaussians (indexed by point id) and
/// occluders. Immutable once the pipeline starts querying it.
#[derive(Debug, Clone, Default)]
pub struct GaussianSet {
    gaussians: Vec<Gaussian3D>,
    sfm_index: BTreeMap<PointId, usize>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn sfm_gaussian(&self, point: PointId) -> Option<&Gaussian3D> {
        self.sfm_index.get(&point).map(|&i| &self.gaussians[i])
    }

    pub fn push_occluder(&mut self, g: Gaussian3D) {
        debug_assert_eq!(g.kind, GaussianKind::Occluder);
        self.gaussians.push(g);
    }

    fn push_sfm(&mut self, point: PointId, g: Gaussian3D) {
        self.sfm_index.insert(point, self.gaussians.len());
        self.gaussians.push(g);
    }

    /// Appends every Gaussian of `other`, re-indexing its SfM points.
    pub fn extend_from(&mut self, other: &GaussianSet) {
        let base = self.gaussians.len();
        self.gaussians.extend_from_slice(&other.gaussians);
        for (&pid, &i) in &other.sfm_index {
            self.sfm_index.insert(pid, base + i);
        }
    }
}

/// Builds one SfM-point Gaussian per scene point: mean at the point, identity
/// rotation, opacity 1, isotropic scale `D_max / f` where `D_max` is the
/// maximum camera-frame depth over the track's views and `f` that view's
/// horizontal focal length (the radius of a one-pixel splat at the farthest
/// view).
pub fn init_gaussians(model: &SceneModel) -> Result<GaussianSet, SplatError> {
    let mut set = GaussianSet::default();
    for (&pid, track) in &model.tracks {
        let point = &model.points[&pid];
        let mut best: Option<(f64, f64)> = None; // (depth, fx)
        for obs in &track.observations {
            let cam = &model.cameras[&obs.image];
            let d = cam.pose.depth(point);
            if d > 0.0 && best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, cam.intrinsics.fx));
            }
        }
        let (d_max, fx) = best.ok_or(SplatError::CheiralityFailure(pid))?;
        let s = d_max / fx;
        set.push_sfm(
            pid,
            Gaussian3D {
                mean: *point,
                rotation: UnitQuaternion::identity(),
                scale: Vector3::new(s, s, s),
                opacity: 1.0,
                kind: GaussianKind::SfmPoint,
            },
        );
    }
    Ok(set)
}

/// Result of a visibility query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visibility {
    pub visible: bool,
    /// Maximum over footprint rays of the target's transmittance-weighted
    /// opacity, in `[0, 1]`.
    pub score: f64,
}

/// Per-ray effective alpha of one Gaussian, and its depth along the ray.
/// Returns `None` when the mean is not strictly in front of the origin.
fn ray_response(g: &Gaussian3D, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let to_mean = g.mean - origin;
    let depth = to_mean.dot(dir);
    if depth <= MIN_DEPTH {
        return None;
    }
    let perp = to_mean - depth * dir;
    let d2 = perp.norm_squared();
    let alpha = if d2 <= 1e-300 {
        g.opacity
    } else {
        // sigma_perp^2 = v_hat^T Sigma v_hat = (v^T Sigma v) / |v|^2.
        let sigma_perp2 = perp.dot(&(g.covariance() * perp)) / d2;
        g.opacity * (-0.5 * d2 / sigma_perp2).exp()
    };
    Some((depth, alpha))
}

/// Answers whether the SfM point's Gaussian is visible from a camera.
///
/// For every integer pixel inside the target's projected 2-sigma footprint
/// (at least the center pixel), the occluder Gaussians strictly nearer than
/// the target along the pixel's ray are composited front to back; the ray's
/// score is the target opacity times the accumulated transmittance. Visible
/// when the maximum ray score exceeds `eps_v`.
///
/// Only occluder-kind Gaussians block: SfM-point Gaussians represent the
/// reconstructed points themselves, and near-duplicate points of the same
/// surface patch would otherwise shadow one another at identical depths.
pub fn composite_visibility(
    set: &GaussianSet,
    point: PointId,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    eps_v: f64,
) -> Result<Visibility, SplatError> {
    let &target_idx = set.sfm_index.get(&point).ok_or(SplatError::UnknownPoint(point))?;
    let target = &set.gaussians[target_idx];

    let cam_point = pose.transform(&target.mean);
    if cam_point.z <= MIN_DEPTH {
        return Err(SplatError::BehindCamera { depth: cam_point.z });
    }
    let center = geometry::project(&target.mean, pose, k).expect("depth already checked");
    if !k.contains(&center) {
        return Err(SplatError::OutOfImage { x: center.x, y: center.y });
    }

    let origin = pose.center();
    let rot_t = pose.rotation_matrix().transpose();

    // Footprint: integer pixels within the projected 2-sigma radius.
    let s_max = target.scale.max();
    let radius = 2.0 * s_max * k.fx.max(k.fy) / cam_point.z;
    let x0 = ((center.x - radius).ceil().max(0.0)) as u32;
    let x1 = ((center.x + radius).floor().min((k.width - 1) as f64)) as u32;
    let y0 = ((center.y - radius).ceil().max(0.0)) as u32;
    let y1 = ((center.y + radius).floor().min((k.height - 1) as f64)) as u32;

    let mut pixels: Vec<(u32, u32)> = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - center.x;
            let dy = y as f64 - center.y;
            if dx * dx + dy * dy <= radius * radius {
                pixels.push((x, y));
            }
        }
    }
    if pixels.is_empty() {
        pixels.push((center.x.round() as u32, center.y.round() as u32));
    }

    let mut score = 0.0f64;
    for (px, py) in pixels {
        let dir_cam = Vector3::new(
            (px as f64 - k.cx) / k.fx,
            (py as f64 - k.cy) / k.fy,
            1.0,
        );
        let dir = (rot_t * dir_cam).normalize();
        let target_depth = (target.mean - origin).dot(&dir);

        let mut blockers: Vec<(f64, usize, f64)> = Vec::new();
        for (i, g) in set.gaussians.iter().enumerate() {
            if i == target_idx || g.kind != GaussianKind::Occluder {
                continue;
            }
            if let Some((depth, alpha)) = ray_response(g, &origin, &dir) {
                if depth < target_depth {
                    blockers.push((depth, i, alpha));
                }
            }
        }
        blockers.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)));
        let mut transmittance = 1.0f64;
        for (_, _, alpha) in &blockers {
            transmittance *= 1.0 - alpha;
        }
        score = score.max(target.opacity * transmittance);
    }

    Ok(Visibility { visible: score > eps_v, score })
}

// --- PLY import/export ------------------------------------------------------

/// Writes the set as binary little-endian PLY: per-vertex `x y z`,
/// `scale_0..2`, `rot_0..3` (unit quaternion, w first), `opacity` as doubles
/// and `kind` as uchar (0 = SfM point, 1 = occluder).
pub fn write_gaussians<W: Write>(set: &GaussianSet, mut w: W) -> Result<(), SplatError> {
    writeln!(w, "ply").map_err(PlyError::from)?;
    writeln!(w, "format binary_little_endian 1.0").map_err(PlyError::from)?;
    writeln!(w, "element vertex {}", set.gaussians.len()).map_err(PlyError::from)?;
    for name in ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]
    {
        writeln!(w, "property double {name}").map_err(PlyError::from)?;
    }
    writeln!(w, "property uchar kind").map_err(PlyError::from)?;
    writeln!(w, "end_header").map_err(PlyError::from)?;
    for g in &set.gaussians {
        let q = g.rotation.quaternion();
        for v in [
            g.mean.x, g.mean.y, g.mean.z, g.scale.x, g.scale.y, g.scale.z, q.w, q.i, q.j, q.k,
            g.opacity,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(PlyError::from)?;
        }
        let kind = match g.kind {
            GaussianKind::SfmPoint => 0u8,
            GaussianKind::Occluder => 1u8,
        };
        w.write_all(&[kind]).map_err(PlyError::from)?;
    }
    Ok(())
}

/// Reads Gaussians written by [`write_gaussians`]. SfM-point entries are not
/// re-associated with point ids; importers carry occluders.
pub fn read_gaussians<R: BufRead>(mut r: R) -> Result<Vec<Gaussian3D>, SplatError> {
    let rows = ply::read_vertices(
        &mut r,
        &["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "kind"],
    )?;
    rows.into_iter()
        .map(|v| {
            let q = Quaternion::new(v[6], v[7], v[8], v[9]);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(PlyError::Malformed(format!("non-unit rotation quaternion (norm {})", q.norm()))
                    .into());
            }
            Ok(Gaussian3D {
                mean: Point3::new(v[0], v[1], v[2]),
                rotation: Unit::new_unchecked(q),
                scale: Vector3::new(v[3], v[4], v[5]),
                opacity: v[10],
                kind: if v[11] == 0.0 { GaussianKind::SfmPoint } else { GaussianKind::Occluder },
            })
        })
        .collect()
}
