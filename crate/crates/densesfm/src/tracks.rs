//! Feature tracks and the scene model: merging pairwise matches into tracks
//! with a union-find over sub-pixel keypoint nodes, the quantized-matching
//! baseline, reference-view selection by median depth, track statistics, and
//! COLMAP-text serialization.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, Quaternion, Unit, Vector3};
use thiserror::Error;

use crate::geometry::{self, CameraIntrinsics, CameraPose, GeometryError, Pixel};
use crate::matchio::{SparseMatch, SparseMatchSet};

pub type ImageId = u32;
pub type PointId = u64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("track {0} references missing point")]
    MissingPoint(PointId),
    #[error("observation in track {track} references missing camera {image}")]
    MissingCamera { track: PointId, image: ImageId },
    #[error("track {track} holds two observations in image {image}")]
    DuplicateImage { track: PointId, image: ImageId },
    #[error("observation ({x}, {y}) in track {track} is outside image {image}")]
    ObservationOutOfImage { track: PointId, image: ImageId, x: f64, y: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file {file}: {message}")]
    Malformed { file: String, message: String },
}

/// How an observation entered its track.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Sampled from verified dense matching.
    Matched,
    /// Added by projecting the 3D point into a view that passed the
    /// splat-visibility and epipolar gates.
    Extended,
    /// Moved by multi-view kernelized refinement.
    Refined,
}

/// One 2D observation of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image: ImageId,
    pub pixel: Pixel,
    pub provenance: Provenance,
}

/// One 3D point's observations across views, at most one per image,
/// kept sorted by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub point: PointId,
    pub observations: Vec<Observation>,
    /// View all query views are refined against, chosen by median depth.
    pub reference: Option<ImageId>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observes(&self, image: ImageId) -> bool {
        self.observations.binary_search_by_key(&image, |o| o.image).is_ok()
    }

    /// Inserts keeping the image-id sort order; replaces an existing
    /// observation of the same image.
    pub fn upsert(&mut self, obs: Observation) {
        match self.observations.binary_search_by_key(&obs.image, |o| o.image) {
            Ok(i) => self.observations[i] = obs,
            Err(i) => self.observations.insert(i, obs),
        }
    }
}

/// A camera: world-to-camera pose plus pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

/// Cameras, 3D points and their feature tracks - the object every pipeline
/// stage transforms. Maps are ordered so iteration, and therefore every
/// downstream computation, is deterministic.
#[derive(Debug, Clone, Default)]
pub struct SceneModel {
    pub cameras: BTreeMap<ImageId, Camera>,
    pub points: BTreeMap<PointId, Point3<f64>>,
    pub tracks: BTreeMap<PointId, Track>,
}

impl SceneModel {
    /// Checks the structural invariants: referential integrity, one
    /// observation per image per track, observations inside their images.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (&pid, track) in &self.tracks {
            if !self.points.contains_key(&pid) {
                return Err(ModelError::MissingPoint(pid));
            }
            let mut last: Option<ImageId> = None;
            for obs in &track.observations {
                if let Some(prev) = last {
                    if prev == obs.image {
                        return Err(ModelError::DuplicateImage { track: pid, image: obs.image });
                    }
                }
                last = Some(obs.image);
                let cam = self.cameras.get(&obs.image).ok_or(ModelError::MissingCamera {
                    track: pid,
                    image: obs.image,
                })?;
                if !cam.intrinsics.contains(&obs.pixel) {
                    return Err(ModelError::ObservationOutOfImage {
                        track: pid,
                        image: obs.image,
                        x: obs.pixel.x,
                        y: obs.pixel.y,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn remove_point(&mut self, id: PointId) {
        self.points.remove(&id);
        self.tracks.remove(&id);
    }

    /// Mean reprojection error over all observations that project; `None`
    /// when nothing projects.
    pub fn mean_reprojection_error(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (pid, track) in &self.tracks {
            let point = &self.points[pid];
            for obs in &track.observations {
                let cam = &self.cameras[&obs.image];
                if let Ok(e) = geometry::reprojection_error(point, &cam.pose, &cam.intrinsics, &obs.pixel)
                {
                    sum += e;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Sub-pixel node key: coordinates rounded to 1e-4 px for hashing, so that
/// targets emitted per source pixel merge only on exact agreement.
fn node_key(image: ImageId, p: &Pixel) -> (ImageId, i64, i64) {
    (image, (p.x * 1e4).round() as i64, (p.y * 1e4).round() as i64)
}

/// Merges pairwise matches into tracks: connected components of the match
/// graph under union-find, where nodes are `(image, sub-pixel)` keypoints.
///
/// An edge whose union would put two distinct pixels of the same image into
/// one component is dropped (the later-joined edge loses). Components of at
/// least two observations become tracks, with point ids assigned in first-
/// appearance order of their earliest node.
pub fn build_tracks(matches: &[SparseMatchSet]) -> Vec<Track> {
    struct Forest {
        parent: Vec<usize>,
        /// Per root: image -> node index present in the component.
        images: Vec<HashMap<ImageId, usize>>,
    }

    impl Forest {
        fn find(&mut self, mut i: usize) -> usize {
            while self.parent[i] != i {
                self.parent[i] = self.parent[self.parent[i]];
                i = self.parent[i];
            }
            i
        }
    }

    let mut nodes: Vec<(ImageId, Pixel)> = Vec::new();
    let mut index: HashMap<(ImageId, i64, i64), usize> = HashMap::new();
    let mut forest = Forest { parent: Vec::new(), images: Vec::new() };

    let mut intern = |image: ImageId, p: &Pixel, forest: &mut Forest, nodes: &mut Vec<(ImageId, Pixel)>| {
        *index.entry(node_key(image, p)).or_insert_with(|| {
            let i = nodes.len();
            nodes.push((image, *p));
            forest.parent.push(i);
            forest.images.push(HashMap::from([(image, i)]));
            i
        })
    };

    for set in matches {
        for m in &set.matches {
            let a = intern(set.image_a, &m.a, &mut forest, &mut nodes);
            let b = intern(set.image_b, &m.b, &mut forest, &mut nodes);
            let ra = forest.find(a);
            let rb = forest.find(b);
            if ra == rb {
                continue;
            }
            // Keep the larger image map as the surviving root.
            let (keep, absorb) =
                if forest.images[ra].len() >= forest.images[rb].len() { (ra, rb) } else { (rb, ra) };
            let conflict = forest.images[absorb].iter().any(|(img, node)| {
                forest.images[keep].get(img).is_some_and(|other| other != node)
            });
            if conflict {
                continue; // drop the later-joined edge
            }
            forest.parent[absorb] = keep;
            let absorbed = std::mem::take(&mut forest.images[absorb]);
            forest.images[keep].extend(absorbed);
        }
    }

    // Group nodes by root in first-node order.
    let mut component_of_root: HashMap<usize, usize> = HashMap::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..nodes.len() {
        let root = forest.find(i);
        let slot = *component_of_root.entry(root).or_insert_with(|| {
            components.push(Vec::new());
            components.len() - 1
        });
        components[slot].push(i);
    }

    let mut tracks = Vec::new();
    let mut next_id: PointId = 1;
    for members in components {
        if members.len() < 2 {
            continue;
        }
        let mut observations: Vec<Observation> = members
            .iter()
            .map(|&i| Observation { image: nodes[i].0, pixel: nodes[i].1, provenance: Provenance::Matched })
            .collect();
        observations.sort_by_key(|o| o.image);
        tracks.push(Track { point: next_id, observations, reference: None });
        next_id += 1;
    }
    tracks
}

/// Triangulates every track against the given cameras, dropping tracks whose
/// triangulation fails. Point ids are kept from the input tracks.
pub fn triangulate_tracks(cameras: &BTreeMap<ImageId, Camera>, tracks: Vec<Track>) -> SceneModel {
    let mut model = SceneModel { cameras: cameras.clone(), ..Default::default() };
    for track in tracks {
        let obs: Vec<(CameraPose, CameraIntrinsics, Pixel)> = track
            .observations
            .iter()
            .filter_map(|o| cameras.get(&o.image).map(|c| (c.pose, c.intrinsics, o.pixel)))
            .collect();
        if obs.len() < 2 {
            continue;
        }
        match geometry::triangulate(&obs) {
            Ok(point) => {
                model.points.insert(track.point, point);
                model.tracks.insert(track.point, track);
            }
            Err(e) => log::debug!("dropping track {}: {e}", track.point),
        }
    }
    model
}

/// Snaps both sides of every match to an `r`-pixel grid (`r * round(c / r)`)
/// and deduplicates grid collisions, keeping the highest confidence.
pub fn quantize_matches(matches: &SparseMatchSet, r: f64) -> SparseMatchSet {
    assert!(r >= 1.0, "quantization radius must be at least one pixel");
    let snap = |p: &Pixel| Pixel::new(r * (p.x / r).round(), r * (p.y / r).round());
    let mut out: Vec<SparseMatch> = Vec::new();
    let mut slot_of: HashMap<(i64, i64, i64, i64), usize> = HashMap::new();
    for m in &matches.matches {
        let a = snap(&m.a);
        let b = snap(&m.b);
        let key = (
            (a.x * 1e4).round() as i64,
            (a.y * 1e4).round() as i64,
            (b.x * 1e4).round() as i64,
            (b.y * 1e4).round() as i64,
        );
        match slot_of.get(&key) {
            Some(&i) => {
                if m.confidence > out[i].confidence {
                    out[i].confidence = m.confidence;
                }
            }
            None => {
                slot_of.insert(key, out.len());
                out.push(SparseMatch { a, b, confidence: m.confidence });
            }
        }
    }
    SparseMatchSet { image_a: matches.image_a, image_b: matches.image_b, matches: out }
}

/// Picks the track's reference view: the observation whose camera-frame
/// depth of the point is the median, taking the lower median for even
/// counts. Fails if any observing view has non-positive depth.
pub fn select_reference_view(track: &Track, model: &SceneModel) -> Result<ImageId, ModelError> {
    let point = model.points.get(&track.point).ok_or(ModelError::MissingPoint(track.point))?;
    let mut depths: Vec<(f64, ImageId)> = Vec::with_capacity(track.observations.len());
    for obs in &track.observations {
        let cam = model
            .cameras
            .get(&obs.image)
            .ok_or(ModelError::MissingCamera { track: track.point, image: obs.image })?;
        let d = cam.pose.depth(point);
        if d <= 0.0 {
            return Err(GeometryError::CheiralityFailure {
                positive: 0,
                views: track.observations.len(),
            }
            .into());
        }
        depths.push((d, obs.image));
    }
    depths.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)));
    Ok(depths[(depths.len() - 1) / 2].1)
}

/// Aggregate track statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackStats {
    pub track_count: usize,
    pub observation_count: usize,
    /// `observation_count / track_count`, 0 for an empty model.
    pub mean_length: f64,
    /// Track length -> number of tracks.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn track_stats(model: &SceneModel) -> TrackStats {
    let track_count = model.tracks.len();
    let mut observation_count = 0;
    let mut histogram = BTreeMap::new();
    for track in model.tracks.values() {
        observation_count += track.len();
        *histogram.entry(track.len()).or_insert(0) += 1;
    }
    let mean_length =
        if track_count == 0 { 0.0 } else { observation_count as f64 / track_count as f64 };
    TrackStats { track_count, observation_count, mean_length, histogram }
}

// --- COLMAP text serialization ---------------------------------------------

/// Writes `cameras.txt`, `images.txt` and `points3D.txt` in COLMAP's text
/// layout (PINHOLE camera model, one camera per image). Floats are printed
/// with the shortest round-trip representation, so a written model reloads
/// bit-for-bit.
pub fn write_colmap_text(model: &SceneModel, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;

    // Per-image 2D point lists, indexed by the tracks referencing them.
    let mut points2d: BTreeMap<ImageId, Vec<(Pixel, PointId)>> = BTreeMap::new();
    let mut obs_index: HashMap<(ImageId, PointId), usize> = HashMap::new();
    for (&pid, track) in &model.tracks {
        for obs in &track.observations {
            let list = points2d.entry(obs.image).or_default();
            obs_index.insert((obs.image, pid), list.len());
            list.push((obs.pixel, pid));
        }
    }

    let mut cameras = String::new();
    writeln!(cameras, "# Camera list with one line of data per camera:").expect("string write");
    writeln!(cameras, "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]").expect("string write");
    writeln!(cameras, "# Number of cameras: {}", model.cameras.len()).expect("string write");
    for (&id, cam) in &model.cameras {
        let k = &cam.intrinsics;
        writeln!(
            cameras,
            "{} PINHOLE {} {} {} {} {} {}",
            id, k.width, k.height, k.fx, k.fy, k.cx, k.cy
        )
        .expect("string write");
    }
    fs::write(dir.join("cameras.txt"), cameras)?;

    let total_obs: usize = model.tracks.values().map(Track::len).sum();
    let mean_obs =
        if model.cameras.is_empty() { 0.0 } else { total_obs as f64 / model.cameras.len() as f64 };
    let mut images = String::new();
    writeln!(images, "# Image list with two lines of data per image:").expect("string write");
    writeln!(images, "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME").expect("string write");
    writeln!(images, "#   POINTS2D[] as (X, Y, POINT3D_ID)").expect("string write");
    writeln!(
        images,
        "# Number of images: {}, mean observations per image: {}",
        model.cameras.len(),
        mean_obs
    )
    .expect("string write");
    for (&id, cam) in &model.cameras {
        let q = cam.pose.rotation().quaternion();
        let t = cam.pose.translation;
        writeln!(
            images,
            "{} {} {} {} {} {} {} {} {} image_{}.png",
            id, q.w, q.i, q.j, q.k, t.x, t.y, t.z, id, id
        )
        .expect("string write");
        let mut line = String::new();
        if let Some(list) = points2d.get(&id) {
            for (i, (px, pid)) in list.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{} {} {}", px.x, px.y, pid).expect("string write");
            }
        }
        writeln!(images, "{line}").expect("string write");
    }
    fs::write(dir.join("images.txt"), images)?;

    let mean_track = if model.tracks.is_empty() {
        0.0
    } else {
        total_obs as f64 / model.tracks.len() as f64
    };
    let mut points = String::new();
    writeln!(points, "# 3D point list with one line of data per point:").expect("string write");
    writeln!(
        points,
        "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"
    )
    .expect("string write");
    writeln!(
        points,
        "# Number of points: {}, mean track length: {}",
        model.points.len(),
        mean_track
    )
    .expect("string write");
    for (&pid, p) in &model.points {
        let error = model.tracks.get(&pid).map_or(-1.0, |track| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for obs in &track.observations {
                let cam = &model.cameras[&obs.image];
                if let Ok(e) =
                    geometry::reprojection_error(p, &cam.pose, &cam.intrinsics, &obs.pixel)
                {
                    sum += e;
                    n += 1;
                }
            }
            if n == 0 {
                -1.0
            } else {
                sum / n as f64
            }
        });
        write!(points, "{} {} {} {} 128 128 128 {}", pid, p.x, p.y, p.z, error).expect("string write");
        if let Some(track) = model.tracks.get(&pid) {
            for obs in &track.observations {
                let idx = obs_index[&(obs.image, pid)];
                write!(points, " {} {}", obs.image, idx).expect("string write");
            }
        }
        writeln!(points).expect("string write");
    }
    fs::write(dir.join("points3D.txt"), points)?;
    Ok(())
}

fn malformed(file: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Malformed { file: file.display().to_string(), message: message.into() }
}

/// Reads a model written by [`write_colmap_text`]. Observation provenance is
/// not representable in the format and comes back as `Matched`.
pub fn read_colmap_text(dir: &Path) -> Result<SceneModel, ModelError> {
    let cameras_path = dir.join("cameras.txt");
    let images_path = dir.join("images.txt");
    let points_path = dir.join("points3D.txt");

    let mut intrinsics: BTreeMap<ImageId, CameraIntrinsics> = BTreeMap::new();
    for line in fs::read_to_string(&cameras_path)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 || f[1] != "PINHOLE" {
            return Err(malformed(&cameras_path, format!("expected PINHOLE camera line, got: {line}")));
        }
        let id: ImageId = f[0].parse().map_err(|_| malformed(&cameras_path, "bad camera id"))?;
        let width: u32 = f[2].parse().map_err(|_| malformed(&cameras_path, "bad width"))?;
        let height: u32 = f[3].parse().map_err(|_| malformed(&cameras_path, "bad height"))?;
        let mut params = [0.0f64; 4];
        for (slot, s) in params.iter_mut().zip(&f[4..8]) {
            *slot = s.parse().map_err(|_| malformed(&cameras_path, "bad camera parameter"))?;
        }
        intrinsics.insert(
            id,
            CameraIntrinsics::new(params[0], params[1], params[2], params[3], width, height),
        );
    }

    let mut cameras: BTreeMap<ImageId, Camera> = BTreeMap::new();
    let mut pixels: BTreeMap<ImageId, Vec<Pixel>> = BTreeMap::new();
    let content = fs::read_to_string(&images_path)?;
    let mut lines = content.lines().filter(|l| !l.trim_start().starts_with('#'));
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() < 10 {
            return Err(malformed(&images_path, format!("short image header: {header}")));
        }
        let id: ImageId = f[0].parse().map_err(|_| malformed(&images_path, "bad image id"))?;
        let mut nums = [0.0f64; 7];
        for (slot, s) in nums.iter_mut().zip(&f[1..8]) {
            *slot = s.parse().map_err(|_| malformed(&images_path, "bad pose number"))?;
        }
        let camera_id: ImageId = f[8].parse().map_err(|_| malformed(&images_path, "bad camera id"))?;
        let k = *intrinsics
            .get(&camera_id)
            .ok_or_else(|| malformed(&images_path, format!("unknown camera {camera_id}")))?;
        // Written values came from a unit quaternion; renormalizing would
        // perturb the round trip.
        let q = Unit::new_unchecked(Quaternion::new(nums[0], nums[1], nums[2], nums[3]));
        let pose = CameraPose::from_parts(q, Vector3::new(nums[4], nums[5], nums[6]));
        cameras.insert(id, Camera { pose, intrinsics: k });

        let points_line = lines
            .next()
            .ok_or_else(|| malformed(&images_path, "missing POINTS2D line"))?;
        let vals: Vec<&str> = points_line.split_whitespace().collect();
        if !vals.len().is_multiple_of(3) {
            return Err(malformed(&images_path, "POINTS2D length not a multiple of three"));
        }
        let mut list = Vec::with_capacity(vals.len() / 3);
        for triple in vals.chunks_exact(3) {
            let x: f64 = triple[0].parse().map_err(|_| malformed(&images_path, "bad 2D x"))?;
            let y: f64 = triple[1].parse().map_err(|_| malformed(&images_path, "bad 2D y"))?;
            list.push(Pixel::new(x, y));
        }
        pixels.insert(id, list);
    }

    let mut model = SceneModel { cameras, ..Default::default() };
    for line in fs::read_to_string(&points_path)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 8 || !(f.len() - 8).is_multiple_of(2) {
            return Err(malformed(&points_path, format!("bad point line: {line}")));
        }
        let pid: PointId = f[0].parse().map_err(|_| malformed(&points_path, "bad point id"))?;
        let mut xyz = [0.0f64; 3];
        for (slot, s) in xyz.iter_mut().zip(&f[1..4]) {
            *slot = s.parse().map_err(|_| malformed(&points_path, "bad coordinate"))?;
        }
        let mut observations = Vec::new();
        for pair in f[8..].chunks_exact(2) {
            let image: ImageId =
                pair[0].parse().map_err(|_| malformed(&points_path, "bad track image id"))?;
            let idx: usize =
                pair[1].parse().map_err(|_| malformed(&points_path, "bad track point index"))?;
            let pixel = *pixels
                .get(&image)
                .and_then(|l| l.get(idx))
                .ok_or_else(|| malformed(&points_path, format!("dangling track element {image} {idx}")))?;
            observations.push(Observation { image, pixel, provenance: Provenance::Matched });
        }
        observations.sort_by_key(|o| o.image);
        model.points.insert(pid, Point3::new(xyz[0], xyz[1], xyz[2]));
        model.tracks.insert(pid, Track { point: pid, observations, reference: None });
    }
    Ok(model)
}
