//! Deterministic synthetic scenes and synthetic dense-matcher output, the
//! oracle source for desk-scale verification.
//!
//! All randomness flows through xoshiro256++ seeded via SplitMix64, with one
//! documented stream per entity (cameras, points, occluders, texture, pose
//! noise, and one per ordered image pair). The random path uses integer
//! arithmetic, IEEE square roots and an Irwin-Hall normal approximation (the
//! sum of twelve uniforms, which has exactly unit variance) - no libm calls -
//! so identical seeds give identical bytes on any platform.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Quaternion, Unit, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{self, CameraIntrinsics, CameraPose, Pixel, MIN_DEPTH};
use crate::matchio::MatchField;
use crate::refine::{FeaturePatch, FeatureProvider, RefineError};
use crate::splatvis::{self, Gaussian3D, GaussianKind, GaussianSet, SplatError};
use crate::tracks::{self, Camera, ImageId, ModelError, Observation, PointId, Provenance, SceneModel, Track};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("camera {0} does not exist")]
    UnknownCamera(ImageId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// --- PRNG -------------------------------------------------------------------

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags; each consumer owns a disjoint stream of the scene seed.
pub const STREAM_CAMERAS: u64 = 1;
pub const STREAM_POINTS: u64 = 2;
pub const STREAM_OCCLUDERS: u64 = 3;
pub const STREAM_TEXTURE: u64 = 4;
pub const STREAM_POSE_NOISE: u64 = 5;

/// Stream tag for the dense matcher on ordered pair `(a, b)`.
pub fn pair_stream(a: ImageId, b: ImageId) -> u64 {
    (1 << 40) | ((a as u64) << 20) | b as u64
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ with SplitMix64 state expansion.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// One generator per (seed, stream) pair: the four state words are
    /// consecutive SplitMix64 outputs of `seed + stream * golden-gamma`.
    pub fn seeded(seed: u64, stream: u64) -> Self {
        let mut sm = seed.wrapping_add(stream.wrapping_mul(GOLDEN_GAMMA));
        let s = [splitmix64(&mut sm), splitmix64(&mut sm), splitmix64(&mut sm), splitmix64(&mut sm)];
        Self { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0].wrapping_add(self.s[3]).rotate_left(23).wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Unbiased integer in `[0, n)` via 128-bit multiply.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal by the Irwin-Hall sum of twelve uniforms. Bounded at
    /// +-6 sigma, exactly unit variance, and free of transcendental calls.
    pub fn normal(&mut self) -> f64 {
        let mut sum = 0.0;
        for _ in 0..12 {
            sum += self.unit();
        }
        sum - 6.0
    }

    /// Uniform direction from three normals; resamples the (measure-zero)
    /// near-singular draws.
    pub fn unit_vector(&mut self) -> Vector3<f64> {
        loop {
            let v = Vector3::new(self.normal(), self.normal(), self.normal());
            let n = v.norm();
            if n > 1e-6 {
                return v / n;
            }
        }
    }

    /// Uniform-ish rotation from a normalized four-normal quaternion.
    pub fn rotation(&mut self) -> UnitQuaternion<f64> {
        loop {
            let q = Quaternion::new(self.normal(), self.normal(), self.normal(), self.normal());
            if q.norm() > 1e-6 {
                return Unit::new_normalize(q);
            }
        }
    }
}

// --- Configuration ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraPlacement {
    /// Evenly spaced on a circle at `camera_height`, all looking at the origin.
    Ring,
    /// Golden-spiral points on a sphere, all looking at the origin.
    Sphere,
}

/// Everything a synthetic scene needs; serializable as a flat key-value file.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub cameras: usize,
    pub placement: CameraPlacement,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub points: usize,
    /// Points are uniform in `[-h, h]^3`.
    pub volume_half_extent: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    pub texture_channels: usize,
    pub texture_components: usize,
    pub texture_frequency: f64,
    pub match_sigma: f64,
    pub outlier_rate: f64,
    /// Pixel radius of the painted flow footprint around each projection.
    pub footprint_radius: f64,
    pub occluder_count: usize,
    pub occluder_alpha_min: f64,
    pub occluder_alpha_max: f64,
    /// Occluder means are uniform in a sphere of this radius.
    pub occluder_radius: f64,
    pub occluder_scale_min: f64,
    pub occluder_scale_max: f64,
    pub pose_rot_noise_deg: f64,
    pub pose_trans_noise_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            cameras: 12,
            placement: CameraPlacement::Ring,
            camera_radius: 4.0,
            camera_height: 1.5,
            points: 300,
            volume_half_extent: 1.0,
            image_width: 192,
            image_height: 144,
            focal: 160.0,
            texture_channels: 8,
            texture_components: 6,
            texture_frequency: 25.0,
            match_sigma: 0.0,
            outlier_rate: 0.0,
            footprint_radius: 3.0,
            occluder_count: 0,
            occluder_alpha_min: 0.6,
            occluder_alpha_max: 0.95,
            occluder_radius: 2.0,
            occluder_scale_min: 0.05,
            occluder_scale_max: 0.25,
            pose_rot_noise_deg: 0.0,
            pose_trans_noise_frac: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.cameras < 2 {
            return Err(SynthError::ConfigInvalid("need at least two cameras".into()));
        }
        if self.points == 0 {
            return Err(SynthError::ConfigInvalid("need at least one point".into()));
        }
        if self.match_sigma < 0.0 {
            return Err(SynthError::ConfigInvalid("match_sigma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(SynthError::ConfigInvalid("outlier_rate must lie in [0, 1)".into()));
        }
        if self.focal <= 0.0 || self.image_width < 2 || self.image_height < 2 {
            return Err(SynthError::ConfigInvalid("bad camera geometry".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.image_width - 1) as f64 / 2.0,
            (self.image_height - 1) as f64 / 2.0,
            self.image_width,
            self.image_height,
        )
    }

    /// Flat `key = value` rendering, one key per line.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("seed", self.seed.to_string());
        put("cameras", self.cameras.to_string());
        put(
            "camera_placement",
            match self.placement {
                CameraPlacement::Ring => "ring".into(),
                CameraPlacement::Sphere => "sphere".into(),
            },
        );
        put("camera_radius", self.camera_radius.to_string());
        put("camera_height", self.camera_height.to_string());
        put("points", self.points.to_string());
        put("volume_half_extent", self.volume_half_extent.to_string());
        put("image_width", self.image_width.to_string());
        put("image_height", self.image_height.to_string());
        put("focal", self.focal.to_string());
        put("texture_channels", self.texture_channels.to_string());
        put("texture_components", self.texture_components.to_string());
        put("texture_frequency", self.texture_frequency.to_string());
        put("match_sigma", self.match_sigma.to_string());
        put("outlier_rate", self.outlier_rate.to_string());
        put("footprint_radius", self.footprint_radius.to_string());
        put("occluder_count", self.occluder_count.to_string());
        put("occluder_alpha_min", self.occluder_alpha_min.to_string());
        put("occluder_alpha_max", self.occluder_alpha_max.to_string());
        put("occluder_radius", self.occluder_radius.to_string());
        put("occluder_scale_min", self.occluder_scale_min.to_string());
        put("occluder_scale_max", self.occluder_scale_max.to_string());
        put("pose_rot_noise_deg", self.pose_rot_noise_deg.to_string());
        put("pose_trans_noise_frac", self.pose_trans_noise_frac.to_string());
        s
    }

    /// Parses `key = value` lines (`#` comments allowed); unknown keys are
    /// rejected so typos cannot silently fall back to defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, SynthError> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv_lines(text).map_err(SynthError::ConfigInvalid)? {
            cfg.set_key(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, SynthError> {
            v.parse::<T>()
                .map_err(|_| SynthError::ConfigInvalid(format!("bad value {v} for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "cameras" => self.cameras = num(key, value)?,
            "camera_placement" => {
                self.placement = match value {
                    "ring" => CameraPlacement::Ring,
                    "sphere" => CameraPlacement::Sphere,
                    other => {
                        return Err(SynthError::ConfigInvalid(format!(
                            "camera_placement must be ring or sphere, got {other}"
                        )))
                    }
                }
            }
            "camera_radius" => self.camera_radius = num(key, value)?,
            "camera_height" => self.camera_height = num(key, value)?,
            "points" => self.points = num(key, value)?,
            "volume_half_extent" => self.volume_half_extent = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "focal" => self.focal = num(key, value)?,
            "texture_channels" => self.texture_channels = num(key, value)?,
            "texture_components" => self.texture_components = num(key, value)?,
            "texture_frequency" => self.texture_frequency = num(key, value)?,
            "match_sigma" => self.match_sigma = num(key, value)?,
            "outlier_rate" => self.outlier_rate = num(key, value)?,
            "footprint_radius" => self.footprint_radius = num(key, value)?,
            "occluder_count" => self.occluder_count = num(key, value)?,
            "occluder_alpha_min" => self.occluder_alpha_min = num(key, value)?,
            "occluder_alpha_max" => self.occluder_alpha_max = num(key, value)?,
            "occluder_radius" => self.occluder_radius = num(key, value)?,
            "occluder_scale_min" => self.occluder_scale_min = num(key, value)?,
            "occluder_scale_max" => self.occluder_scale_max = num(key, value)?,
            "pose_rot_noise_deg" => self.pose_rot_noise_deg = num(key, value)?,
            "pose_trans_noise_frac" => self.pose_trans_noise_frac = num(key, value)?,
            other => return Err(SynthError::ConfigInvalid(format!("unknown key {other}"))),
        }
        Ok(())
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, got {line}", no + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

// --- Scene generation --------------------------------------------------------

fn look_at(center: Point3<f64>, target: Point3<f64>) -> CameraPose {
    let forward = (target - center).normalize();
    let up_hint = if forward.z.abs() > 0.999 {
        Vector3::new(0.0, 1.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let right = forward.cross(&up_hint).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    CameraPose::from_matrix(&r, -r * center.coords).expect("look-at basis is orthonormal")
}

fn camera_centers(cfg: &SynthConfig) -> Vec<Point3<f64>> {
    let n = cfg.cameras;
    match cfg.placement {
        CameraPlacement::Ring => (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                Point3::new(cfg.camera_radius * a.cos(), cfg.camera_radius * a.sin(), cfg.camera_height)
            })
            .collect(),
        CameraPlacement::Sphere => (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let ring = (1.0 - z * z).sqrt();
                let a = std::f64::consts::TAU * i as f64 * 0.6180339887498949;
                Point3::new(
                    cfg.camera_radius * ring * a.cos(),
                    cfg.camera_radius * ring * a.sin(),
                    cfg.camera_radius * z,
                )
            })
            .collect(),
    }
}

/// Generates the ground-truth scene: cameras looking at the origin, points
/// uniform in the volume (resampled until at least two cameras see each),
/// full-covisibility tracks, and the configured occluder Gaussians.
pub fn generate_scene(cfg: &SynthConfig) -> Result<(SceneModel, GaussianSet), SynthError> {
    cfg.validate()?;
    let k = cfg.intrinsics();
    let mut model = SceneModel::default();
    for (i, center) in camera_centers(cfg).into_iter().enumerate() {
        let pose = look_at(center, Point3::origin());
        model.cameras.insert((i + 1) as ImageId, Camera { pose, intrinsics: k });
    }

    let mut rng = Rng::seeded(cfg.seed, STREAM_POINTS);
    let h = cfg.volume_half_extent;
    for pid in 1..=cfg.points as PointId {
        let mut placed = false;
        for _attempt in 0..1000 {
            let p = Point3::new(rng.uniform(-h, h), rng.uniform(-h, h), rng.uniform(-h, h));
            let observations = visible_observations(&model, &p);
            if observations.len() >= 2 {
                model.points.insert(pid, p);
                model.tracks.insert(pid, Track { point: pid, observations, reference: None });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::ConfigInvalid(
                "volume is not covisible: could not place a point seen by two cameras".into(),
            ));
        }
    }

    let mut occluders = GaussianSet::default();
    let mut orng = Rng::seeded(cfg.seed, STREAM_OCCLUDERS);
    for _ in 0..cfg.occluder_count {
        let mean = loop {
            let r = cfg.occluder_radius;
            let p = Point3::new(orng.uniform(-r, r), orng.uniform(-r, r), orng.uniform(-r, r));
            if p.coords.norm() <= r {
                break p;
            }
        };
        occluders.push_occluder(Gaussian3D {
            mean,
            rotation: orng.rotation(),
            scale: Vector3::new(
                orng.uniform(cfg.occluder_scale_min, cfg.occluder_scale_max),
                orng.uniform(cfg.occluder_scale_min, cfg.occluder_scale_max),
                orng.uniform(cfg.occluder_scale_min, cfg.occluder_scale_max),
            ),
            opacity: orng.uniform(cfg.occluder_alpha_min, cfg.occluder_alpha_max),
            kind: GaussianKind::Occluder,
        });
    }

    model.validate()?;
    Ok((model, occluders))
}

/// All cameras that see `p`: positive depth and in-image projection.
fn visible_observations(model: &SceneModel, p: &Point3<f64>) -> Vec<Observation> {
    let mut obs = Vec::new();
    for (&image, cam) in &model.cameras {
        if let Ok(px) = geometry::project(p, &cam.pose, &cam.intrinsics) {
            if cam.intrinsics.contains(&px) {
                obs.push(Observation { image, pixel: px, provenance: Provenance::Matched });
            }
        }
    }
    obs
}

/// Perturbs every pose by a fixed-magnitude random-axis rotation and a
/// translation of `trans_frac * |t|` in a random direction. Points and
/// intrinsics are untouched.
pub fn perturb_poses(model: &SceneModel, rot_deg: f64, trans_frac: f64, seed: u64) -> SceneModel {
    let mut rng = Rng::seeded(seed, STREAM_POSE_NOISE);
    let mut out = model.clone();
    for cam in out.cameras.values_mut() {
        let axis = rng.unit_vector();
        let dir = rng.unit_vector();
        let angle = rot_deg.to_radians();
        let dq = UnitQuaternion::from_scaled_axis(axis * angle);
        let t = cam.pose.translation;
        cam.pose = CameraPose::from_parts(dq * cam.pose.rotation(), t + trans_frac * t.norm() * dir);
    }
    out
}

// --- Synthetic dense matcher --------------------------------------------------

/// Noise and outlier knobs for [`synth_dense_matcher`].
#[derive(Debug, Clone, Copy)]
pub struct MatcherParams {
    pub sigma: f64,
    pub outlier_rate: f64,
    pub footprint_radius: f64,
    pub seed: u64,
}

impl MatcherParams {
    pub fn from_config(cfg: &SynthConfig) -> Self {
        Self {
            sigma: cfg.match_sigma,
            outlier_rate: cfg.outlier_rate,
            footprint_radius: cfg.footprint_radius,
            seed: cfg.seed,
        }
    }
}

/// Dense forward/backward fields for one ordered pair, plus the forward
/// outlier mask (row-major over A's pixel grid).
pub struct SynthMatch {
    pub forward: MatchField,
    pub backward: MatchField,
    pub outlier_mask: Vec<bool>,
}

/// Synthesizes what a two-view dense matcher would emit for the pair:
/// plane-induced flow around every covisible point's projection, Gaussian
/// noise on the forward targets, and uniform-random outlier targets at the
/// configured rate. The backward field is the consistent inverse flow and
/// carries neither noise nor outliers, so the forward mask is the complete
/// account of bad correspondences.
///
/// Points whose footprints would overlap another point's footprint in either
/// image are left unpainted (lowest point id wins); a real matcher reports
/// no confidence where the correspondence is ambiguous, and the skip keeps
/// the two directions exactly inverse for every painted cell.
pub fn synth_dense_matcher(
    scene: &SceneModel,
    image_a: ImageId,
    image_b: ImageId,
    params: &MatcherParams,
) -> Result<SynthMatch, SynthError> {
    let cam_a = scene.cameras.get(&image_a).ok_or(SynthError::UnknownCamera(image_a))?;
    let cam_b = scene.cameras.get(&image_b).ok_or(SynthError::UnknownCamera(image_b))?;

    let paintable = paintable_points(scene, image_a, image_b, params.footprint_radius)?;

    let mut rng = Rng::seeded(params.seed, pair_stream(image_a, image_b));
    let mut forward = MatchField::new(
        image_a,
        image_b,
        cam_a.intrinsics.width,
        cam_a.intrinsics.height,
    );
    let mut outlier_mask =
        vec![false; (cam_a.intrinsics.width * cam_a.intrinsics.height) as usize];
    paint_flow(
        scene,
        cam_a,
        cam_b,
        &paintable,
        &mut forward,
        Some((&mut rng, params.sigma, params.outlier_rate, &mut outlier_mask)),
        params.footprint_radius,
    );

    // The backward footprint is padded so every forward target, including
    // jittered samples near the footprint edge, interpolates painted cells.
    let mut backward = MatchField::new(
        image_b,
        image_a,
        cam_b.intrinsics.width,
        cam_b.intrinsics.height,
    );
    paint_flow(
        scene,
        cam_b,
        cam_a,
        &paintable,
        &mut backward,
        None,
        params.footprint_radius + BACKWARD_PAD,
    );

    Ok(SynthMatch { forward, backward, outlier_mask })
}

/// Extra pixels painted around each backward footprint.
const BACKWARD_PAD: f64 = 2.0;

/// The points the synthetic matcher paints for an ordered pair: covisible
/// points whose projections stay clear of every other point's projection by
/// a bilinear-lookup margin, in both images. Exposed so oracles can
/// associate samples with the generating point.
pub fn paintable_points(
    scene: &SceneModel,
    image_a: ImageId,
    image_b: ImageId,
    footprint_radius: f64,
) -> Result<Vec<PointId>, SynthError> {
    let cam_a = scene.cameras.get(&image_a).ok_or(SynthError::UnknownCamera(image_a))?;
    let cam_b = scene.cameras.get(&image_b).ok_or(SynthError::UnknownCamera(image_b))?;
    let margin = 2.0 * (footprint_radius + BACKWARD_PAD) + 3.0;
    let in_image = |cam: &Camera| -> Vec<(PointId, Pixel)> {
        scene
            .points
            .iter()
            .filter_map(|(&pid, p)| {
                geometry::project(p, &cam.pose, &cam.intrinsics)
                    .ok()
                    .filter(|px| cam.intrinsics.contains(px))
                    .map(|px| (pid, px))
            })
            .collect()
    };
    let proj_a = in_image(cam_a);
    let proj_b = in_image(cam_b);
    let isolated = |list: &[(PointId, Pixel)], pid: PointId, px: &Pixel| {
        list.iter().all(|(other, opx)| *other == pid || px.distance(opx) >= margin)
    };
    let mut kept = Vec::new();
    for (pid, pa) in &proj_a {
        let Some((_, pb)) = proj_b.iter().find(|(other, _)| other == pid) else { continue };
        if isolated(&proj_a, *pid, pa) && isolated(&proj_b, *pid, pb) {
            kept.push(*pid);
        }
    }
    Ok(kept)
}

/// Pair-independent cell ownership for one source camera: each pixel within
/// a point's footprint belongs to the point whose projection is nearest
/// (ties to the lower id). Flow painted from a cell is always induced by its
/// owner's plane, so tracks merged through a shared source pixel across
/// pairs stay geometrically consistent.
fn cell_owners(scene: &SceneModel, src: &Camera, footprint_radius: f64) -> Vec<Option<PointId>> {
    let k = &src.intrinsics;
    let mut owner: Vec<Option<(f64, PointId)>> = vec![None; (k.width * k.height) as usize];
    for (&pid, p) in &scene.points {
        let Ok(proj) = geometry::project(p, &src.pose, k) else { continue };
        if !k.contains(&proj) {
            continue;
        }
        let x0 = ((proj.x - footprint_radius).ceil().max(0.0)) as u32;
        let x1 = ((proj.x + footprint_radius).floor().min((k.width - 1) as f64)) as u32;
        let y0 = ((proj.y - footprint_radius).ceil().max(0.0)) as u32;
        let y1 = ((proj.y + footprint_radius).floor().min((k.height - 1) as f64)) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - proj.x;
                let dy = y as f64 - proj.y;
                let d2 = dx * dx + dy * dy;
                if d2 > footprint_radius * footprint_radius {
                    continue;
                }
                let slot = &mut owner[(y * k.width + x) as usize];
                if slot.is_none_or(|(best, best_pid)| d2 < best || (d2 == best && pid < best_pid)) {
                    *slot = Some((d2, pid));
                }
            }
        }
    }
    owner.into_iter().map(|s| s.map(|(_, pid)| pid)).collect()
}

/// Paints plane-induced flow footprints from `src` to `dst` for the given
/// points, restricted to cells each point owns. `noise` carries the RNG and
/// outlier bookkeeping for the forward direction.
fn paint_flow(
    scene: &SceneModel,
    src: &Camera,
    dst: &Camera,
    points: &[PointId],
    field: &mut MatchField,
    mut noise: Option<(&mut Rng, f64, f64, &mut Vec<bool>)>,
    footprint_radius: f64,
) {
    let k_src = &src.intrinsics;
    let k_dst = &dst.intrinsics;
    let src_rot_inv = src.pose.rotation_matrix().transpose();
    let pad_x = -1.0..=k_dst.width as f64;
    let pad_y = -1.0..=k_dst.height as f64;
    let owners = cell_owners(scene, src, footprint_radius);

    for &pid in points {
        let p = &scene.points[&pid];
        let depth = src.pose.depth(p);
        let proj = geometry::project(p, &src.pose, k_src).expect("visibility established above");
        // Confidence peaks move per pair the way a real matcher's do; a
        // shared peak cell across pairs would pre-merge tracks that should
        // stay fragmentary. Flow targets are unaffected.
        let conf_center = match noise.as_mut() {
            Some((rng, ..)) => {
                Pixel::new(proj.x + rng.uniform(-1.2, 1.2), proj.y + rng.uniform(-1.2, 1.2))
            }
            None => proj,
        };
        let x0 = ((proj.x - footprint_radius).ceil().max(0.0)) as u32;
        let x1 = ((proj.x + footprint_radius).floor().min((k_src.width - 1) as f64)) as u32;
        let y0 = ((proj.y - footprint_radius).ceil().max(0.0)) as u32;
        let y1 = ((proj.y + footprint_radius).floor().min((k_src.height - 1) as f64)) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - proj.x;
                let dy = y as f64 - proj.y;
                let d2 = dx * dx + dy * dy;
                if d2 > footprint_radius * footprint_radius {
                    continue;
                }
                if owners[(y * field.width + x) as usize] != Some(pid) {
                    continue;
                }
                // Back-project the cell at the point's depth plane.
                let ray = Vector3::new(
                    (x as f64 - k_src.cx) / k_src.fx,
                    (y as f64 - k_src.cy) / k_src.fy,
                    1.0,
                );
                let world =
                    Point3::from(src_rot_inv * (ray * depth - src.pose.translation));
                let Ok(mut target) = geometry::project(&world, &dst.pose, k_dst) else {
                    continue;
                };
                if let Some((rng, sigma, outlier_rate, mask)) = noise.as_mut() {
                    // Draw in a fixed order so the stream is stable.
                    let nx = rng.normal() * *sigma;
                    let ny = rng.normal() * *sigma;
                    let u = rng.unit();
                    let is_outlier = u < *outlier_rate;
                    if is_outlier {
                        target = Pixel::new(
                            rng.uniform(0.0, (k_dst.width - 1) as f64),
                            rng.uniform(0.0, (k_dst.height - 1) as f64),
                        );
                    } else {
                        target = Pixel::new(target.x + nx, target.y + ny);
                    }
                    mask[(y * field.width + x) as usize] = is_outlier;
                }
                if !pad_x.contains(&target.x) || !pad_y.contains(&target.y) {
                    continue;
                }
                let cdx = x as f64 - conf_center.x;
                let cdy = y as f64 - conf_center.y;
                let conf = 1.0 / (1.0 + cdx * cdx + cdy * cdy);
                field.set(x, y, target, conf as f32);
            }
        }
    }
}

// --- Analytic world texture and feature provider ------------------------------

/// A smooth multi-channel feature field over world space: each channel is a
/// sum of fixed sinusoids with seeded wave vectors and phases, giving locally
/// unique features without any learned network.
#[derive(Debug, Clone)]
pub struct WorldTexture {
    /// Per channel: (wave vector, phase).
    components: Vec<Vec<(Vector3<f64>, f64)>>,
}

impl WorldTexture {
    pub fn generate(seed: u64, channels: usize, components: usize, frequency: f64) -> Self {
        let mut rng = Rng::seeded(seed, STREAM_TEXTURE);
        let components = (0..channels)
            .map(|_| {
                (0..components)
                    .map(|_| {
                        let dir = rng.unit_vector();
                        let mag = frequency * (0.5 + rng.unit());
                        (dir * mag, rng.uniform(0.0, std::f64::consts::TAU))
                    })
                    .collect()
            })
            .collect();
        Self { components }
    }

    pub fn channels(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, p: &Point3<f64>, out: &mut [f64]) {
        for (ch, comps) in self.components.iter().enumerate() {
            let mut v = 0.0;
            for (k, phase) in comps {
                v += (k.dot(&p.coords) + phase).sin();
            }
            out[ch] = v;
        }
    }
}

/// Serves feature patches by sampling the world texture on a surfel: one
/// fixed plane per ground-truth point, oriented toward the camera rig's
/// centroid. Every view of the same point samples the same 3D surface, so
/// patches of corresponding keypoints agree across views the way patches of
/// a physical surface would.
pub struct SyntheticFeatureProvider {
    scene: SceneModel,
    texture: WorldTexture,
    /// Per point id: unit plane normal.
    normals: BTreeMap<PointId, Vector3<f64>>,
}

impl SyntheticFeatureProvider {
    pub fn new(scene: SceneModel, texture: WorldTexture) -> Self {
        let rig_centroid = if scene.cameras.is_empty() {
            Point3::origin()
        } else {
            let sum: Vector3<f64> =
                scene.cameras.values().map(|c| c.pose.center().coords).sum();
            Point3::from(sum / scene.cameras.len() as f64)
        };
        let normals = scene
            .points
            .iter()
            .map(|(&pid, p)| {
                let towards = rig_centroid - p;
                let n = if towards.norm() > 1e-9 {
                    towards.normalize()
                } else {
                    Vector3::z()
                };
                (pid, n)
            })
            .collect();
        Self { scene, texture, normals }
    }

    pub fn from_config(scene: SceneModel, cfg: &SynthConfig) -> Self {
        let texture = WorldTexture::generate(
            cfg.seed,
            cfg.texture_channels,
            cfg.texture_components,
            cfg.texture_frequency,
        );
        Self::new(scene, texture)
    }
}

impl FeatureProvider for SyntheticFeatureProvider {
    fn patch(
        &self,
        image: ImageId,
        center: Pixel,
        size: usize,
        stride: f64,
    ) -> Result<FeaturePatch, RefineError> {
        let cam = self
            .scene
            .cameras
            .get(&image)
            .ok_or_else(|| RefineError::Provider(format!("unknown image {image}")))?;
        // The surfel nearest the viewing ray in 3D picks the plane. Pixel
        // distance would compress with depth and let far points steal
        // patches from some views of a track but not others.
        let k0 = &cam.intrinsics;
        let cam_origin = cam.pose.center();
        let ray = (cam.pose.rotation_matrix().transpose()
            * Vector3::new((center.x - k0.cx) / k0.fx, (center.y - k0.cy) / k0.fy, 1.0))
        .normalize();
        let mut best: Option<(f64, PointId)> = None;
        for (&pid, p) in &self.scene.points {
            let to_point = p - cam_origin;
            let along = to_point.dot(&ray);
            if along <= MIN_DEPTH {
                continue;
            }
            let dist2 = (to_point - along * ray).norm_squared();
            if best.is_none_or(|(b, _)| dist2 < b) {
                best = Some((dist2, pid));
            }
        }
        let (_, pid) = best.ok_or_else(|| {
            RefineError::Provider(format!("no scene point is in front of image {image}"))
        })?;
        let surfel_point = self.scene.points[&pid];
        let normal = self.normals[&pid];
        let origin = cam.pose.center();
        let fallback_depth = cam.pose.depth(&surfel_point);

        let k = &cam.intrinsics;
        let rot_inv = cam.pose.rotation_matrix().transpose();
        let channels = self.texture.channels();
        let half = (size as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(size * size * channels);
        let mut sample = vec![0.0; channels];
        for row in 0..size {
            for col in 0..size {
                let px = center.x + (col as f64 - half) * stride;
                let py = center.y + (row as f64 - half) * stride;
                let dir = rot_inv * Vector3::new((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
                // Ray-plane intersection; grazing rays fall back to the
                // surfel's depth plane.
                let denom = normal.dot(&dir);
                let t = if denom.abs() > 1e-9 {
                    normal.dot(&(surfel_point - origin)) / denom
                } else {
                    -1.0
                };
                let world = if t > MIN_DEPTH {
                    origin + t * dir
                } else {
                    origin + fallback_depth * dir
                };
                self.texture.eval(&world, &mut sample);
                data.extend_from_slice(&sample);
            }
        }
        FeaturePatch::new(image, size, channels, center, stride, data)
    }
}

// --- Scene bundles ------------------------------------------------------------

/// Writes a scene bundle: `model/` in COLMAP text, `occluders.ply`, and the
/// generating `synth.cfg`.
pub fn write_scene_bundle(
    dir: &Path,
    model: &SceneModel,
    occluders: &GaussianSet,
    cfg: &SynthConfig,
) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    tracks::write_colmap_text(model, &dir.join("model"))?;
    let mut ply = Vec::new();
    splatvis::write_gaussians(occluders, &mut ply)?;
    fs::write(dir.join("occluders.ply"), ply)?;
    fs::write(dir.join("synth.cfg"), cfg.to_kv_string())?;
    Ok(())
}

/// Reads a bundle written by [`write_scene_bundle`].
pub fn read_scene_bundle(dir: &Path) -> Result<(SceneModel, GaussianSet, SynthConfig), SynthError> {
    let model = tracks::read_colmap_text(&dir.join("model"))?;
    let bytes = fs::read(dir.join("occluders.ply"))?;
    let mut occluders = GaussianSet::default();
    for g in splatvis::read_gaussians(&bytes[..])? {
        occluders.push_occluder(Gaussian3D { kind: GaussianKind::Occluder, ..g });
    }
    let cfg = SynthConfig::from_kv_str(&fs::read_to_string(dir.join("synth.cfg"))?)?;
    Ok((model, occluders, cfg))
}
