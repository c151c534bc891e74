//! Pipeline orchestration: ingest -> verify -> triangulate -> init gaussians
//! -> extend -> iterated refine/adjust/filter, plus artifact output. The CLI
//! is a thin wrapper over this module, and every stage is also callable on
//! its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::eval;
use crate::extend::extend_tracks;
use crate::matchio::{mutual_verify, nms_sample, MatchField, SparseMatchSet};
use crate::optimize::{refine_loop, BaConfig, LoopIteration, RobustLoss};
use crate::parallel;
use crate::ply;
use crate::refine::{CorrelationDecoder, Decoder, FeatureProvider, RefineConfig};
use crate::splatvis::{init_gaussians, GaussianSet};
use crate::synth::{
    generate_scene, parse_kv_lines, perturb_poses, synth_dense_matcher, MatcherParams,
    SynthConfig, SyntheticFeatureProvider,
};
use crate::tracks::{
    build_tracks, quantize_matches, track_stats, triangulate_tracks, Camera, ImageId, SceneModel,
    TrackStats,
};

/// A failure attributed to the pipeline stage it happened in.
#[derive(Debug, Error)]
#[error("stage {stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &'static str, message: impl ToString) -> Self {
        Self { stage, message: message.to_string() }
    }
}

/// Which image pairs the matcher covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Every unordered pair.
    All,
    /// Each image with its `k` successors in id order (ring-like coverage).
    Ring(usize),
}

/// All pipeline knobs, preset to the engine's standard defaults.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Non-max-suppression radius in pixels.
    pub nms_radius: u32,
    /// Minimum confidence for a pixel to be sampled at all.
    pub nms_min_confidence: f64,
    /// Mutual-verification cycle gate in pixels.
    pub eps_p: f64,
    pub pairs: PairMode,
    /// When positive, replaces splat extension with grid quantization at
    /// this radius (the comparison baseline).
    pub quantize_radius: f64,
    pub skip_extend: bool,
    /// Splat-visibility threshold.
    pub eps_v: f64,
    /// Sampson gate for extension candidates, in pixels.
    pub epi_thresh: f64,
    /// Refine/adjust/filter passes.
    pub iterations: usize,
    pub refine: RefineConfig,
    pub ba: BaConfig,
    pub threads: Option<usize>,
    /// Distance thresholds for accuracy/completeness, in world units.
    pub eval_dist_thresholds: Vec<f64>,
    /// Pose AUC thresholds in degrees.
    pub eval_angle_thresholds: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nms_radius: 4,
            nms_min_confidence: 0.0,
            eps_p: 3.0,
            pairs: PairMode::All,
            quantize_radius: 0.0,
            skip_extend: false,
            eps_v: 0.5,
            epi_thresh: 4.0,
            iterations: 2,
            refine: RefineConfig::default(),
            ba: BaConfig::default(),
            threads: None,
            eval_dist_thresholds: vec![0.01, 0.02, 0.05],
            eval_angle_thresholds: vec![1.0, 3.0, 5.0],
        }
    }
}

impl PipelineConfig {
    /// Applies one `key = value` override.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
            v.parse::<T>().map_err(|_| {
                PipelineError::new("config", format!("bad value {v} for {key}"))
            })
        }
        match key {
            "nms_radius" => self.nms_radius = num(key, value)?,
            "nms_min_confidence" => self.nms_min_confidence = num(key, value)?,
            "eps_p" => self.eps_p = num(key, value)?,
            "pairs" => {
                self.pairs = if value == "all" {
                    PairMode::All
                } else if let Some(k) = value.strip_prefix("ring:") {
                    PairMode::Ring(num(key, k)?)
                } else {
                    return Err(PipelineError::new(
                        "config",
                        format!("pairs must be all or ring:<k>, got {value}"),
                    ));
                }
            }
            "quantize_radius" => self.quantize_radius = num(key, value)?,
            "skip_extend" => self.skip_extend = num(key, value)?,
            "eps_v" => self.eps_v = num(key, value)?,
            "epi_thresh" => self.epi_thresh = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "patch_size" => self.refine.patch_size = num(key, value)?,
            "patch_stride" => self.refine.patch_stride = num(key, value)?,
            "window" => self.refine.window = num(key, value)?,
            "anchors" => self.refine.anchors = num(key, value)?,
            "anchor_extent" => self.refine.anchor_extent = num(key, value)?,
            "tau" => self.refine.tau = num(key, value)?,
            "kernel_eps" => self.refine.kernel_eps = num(key, value)?,
            "noise_var" => self.refine.noise_var = num(key, value)?,
            "num_freqs" => self.refine.num_freqs = num(key, value)?,
            "sharpness" => self.refine.sharpness = num(key, value)?,
            "alpha" => self.refine.loss_alpha = num(key, value)?,
            "ba_max_iterations" => self.ba.max_iterations = num(key, value)?,
            "ba_function_tolerance" => self.ba.function_tolerance = num(key, value)?,
            "huber_scale" => self.ba.loss = RobustLoss::Huber { scale: num(key, value)? },
            "cauchy_scale" => self.ba.loss = RobustLoss::Cauchy { scale: num(key, value)? },
            "quadratic_loss" => {
                if num::<u8>(key, value)? == 1 {
                    self.ba.loss = RobustLoss::Quadratic;
                }
            }
            "eps_f" => self.ba.outlier_threshold = num(key, value)?,
            "fixed_poses" => self.ba.refine_poses = !num::<bool>(key, value)?,
            "fixed_intrinsics" => self.ba.refine_intrinsics = !num::<bool>(key, value)?,
            "threads" => self.threads = Some(num(key, value)?),
            "eval_dist_thresholds" => {
                self.eval_dist_thresholds = parse_list(key, value)?;
            }
            "eval_angle_thresholds" => {
                self.eval_angle_thresholds = parse_list(key, value)?;
            }
            other => {
                return Err(PipelineError::new("config", format!("unknown key {other}")));
            }
        }
        Ok(())
    }

    /// Parses a flat key-value config; `synth_`-prefixed keys go to the
    /// returned scene config.
    pub fn from_kv_str(text: &str) -> Result<(Self, SynthConfig), PipelineError> {
        let mut cfg = Self::default();
        let mut synth = SynthConfig::default();
        for (k, v) in
            parse_kv_lines(text).map_err(|e| PipelineError::new("config", e))?
        {
            if let Some(sk) = k.strip_prefix("synth_") {
                synth
                    .set_key(sk, &v)
                    .map_err(|e| PipelineError::new("config", e))?;
            } else {
                cfg.set_key(&k, &v)?;
            }
        }
        Ok((cfg, synth))
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, PipelineError> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| PipelineError::new("config", format!("bad list value for {key}: {s}")))
        })
        .collect()
}

/// The unordered pairs the matcher covers, as ordered `(a, b)` with `a < b`.
pub fn select_pairs(ids: &[ImageId], mode: PairMode) -> Vec<(ImageId, ImageId)> {
    let mut pairs = Vec::new();
    match mode {
        PairMode::All => {
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    pairs.push((ids[i], ids[j]));
                }
            }
        }
        PairMode::Ring(k) => {
            let n = ids.len();
            for i in 0..n {
                for d in 1..=k.min(n.saturating_sub(1)) {
                    let j = (i + d) % n;
                    let (a, b) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
                    if !pairs.contains(&(a, b)) {
                        pairs.push((a, b));
                    }
                }
            }
            pairs.sort();
        }
    }
    pairs
}

/// Samples and mutually verifies one forward/backward field pair, applying
/// the quantized-matching baseline when configured.
pub fn verify_pair(
    forward: &MatchField,
    backward: &MatchField,
    cfg: &PipelineConfig,
) -> Result<SparseMatchSet, PipelineError> {
    let samples = nms_sample(forward, cfg.nms_radius, cfg.nms_min_confidence);
    let verified = mutual_verify(forward, backward, &samples, cfg.eps_p)
        .map_err(|e| PipelineError::new("verify", e))?;
    Ok(if cfg.quantize_radius > 0.0 {
        quantize_matches(&verified, cfg.quantize_radius)
    } else {
        verified
    })
}

/// Per-stage bookkeeping of the model shape.
#[derive(Debug, Clone)]
pub struct StageStats {
    pub stage: &'static str,
    pub stats: TrackStats,
    pub mean_reprojection_error: Option<f64>,
}

fn snapshot(stage: &'static str, model: &SceneModel) -> StageStats {
    StageStats { stage, stats: track_stats(model), mean_reprojection_error: model.mean_reprojection_error() }
}

/// Everything a pipeline run produces in memory.
pub struct PipelineResult {
    pub model: SceneModel,
    pub stages: Vec<StageStats>,
    pub loop_iterations: Vec<LoopIteration>,
}

/// Runs stages triangulate -> init gaussians -> extend -> refine loop on
/// verified matches. `occluders` may be empty; the provider and decoder
/// drive refinement.
pub fn run_from_matches(
    cameras: &BTreeMap<ImageId, Camera>,
    matches: &[SparseMatchSet],
    occluders: &GaussianSet,
    provider: &dyn FeatureProvider,
    decoder: &dyn Decoder,
    cfg: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    parallel::with_threads(cfg.threads, || {
        let mut stages = Vec::new();

        let tracks = build_tracks(matches);
        let model = triangulate_tracks(cameras, tracks);
        model.validate().map_err(|e| PipelineError::new("triangulate", e))?;
        stages.push(snapshot("triangulate", &model));

        let model = if cfg.skip_extend || cfg.quantize_radius > 0.0 {
            model
        } else {
            let mut set = init_gaussians(&model).map_err(|e| PipelineError::new("gaussians", e))?;
            set.extend_from(occluders);
            let extended = extend_tracks(&model, &set, cfg.eps_v, cfg.epi_thresh);
            stages.push(snapshot("extend", &extended));
            extended
        };

        let (refined, loop_iterations) =
            refine_loop(&model, provider, decoder, cfg.iterations, &cfg.refine, &cfg.ba)
                .map_err(|e| PipelineError::new("refine", e))?;
        stages.push(snapshot("refine", &refined));
        refined.validate().map_err(|e| PipelineError::new("refine", e))?;

        Ok(PipelineResult { model: refined, stages, loop_iterations })
    })
}

/// A full synthetic run: generated scene, synthetic matcher, perturbed
/// initial poses, and ground truth kept for evaluation.
pub struct SynthRun {
    pub result: PipelineResult,
    pub ground_truth: SceneModel,
    pub occluders: GaussianSet,
    pub verified: Vec<SparseMatchSet>,
}

/// Generates a scene from `synth` and pushes it through the whole pipeline.
pub fn run_synth(synth: &SynthConfig, cfg: &PipelineConfig) -> Result<SynthRun, PipelineError> {
    let (gt, occluders) =
        generate_scene(synth).map_err(|e| PipelineError::new("ingest", e))?;
    let initial = if synth.pose_rot_noise_deg > 0.0 || synth.pose_trans_noise_frac > 0.0 {
        perturb_poses(&gt, synth.pose_rot_noise_deg, synth.pose_trans_noise_frac, synth.seed)
    } else {
        gt.clone()
    };

    let ids: Vec<ImageId> = gt.cameras.keys().copied().collect();
    let params = MatcherParams::from_config(synth);
    let pair_list = select_pairs(&ids, cfg.pairs);
    let verified: Result<Vec<SparseMatchSet>, PipelineError> =
        parallel::with_threads(cfg.threads, || {
            parallel::map_ordered(&pair_list, |&(a, b)| {
                let m = synth_dense_matcher(&gt, a, b, &params)
                    .map_err(|e| PipelineError::new("ingest", e))?;
                verify_pair(&m.forward, &m.backward, cfg)
            })
            .into_iter()
            .collect()
        });
    let verified = verified?;

    let provider = SyntheticFeatureProvider::from_config(gt.clone(), synth);
    let decoder = CorrelationDecoder::new(cfg.refine.sharpness, cfg.refine.anchor_extent);
    let result = run_from_matches(
        &initial.cameras,
        &verified,
        &occluders,
        &provider,
        &decoder,
        cfg,
    )?;
    Ok(SynthRun { result, ground_truth: gt, occluders, verified })
}

// --- Artifact output ----------------------------------------------------------

/// Writes the model (COLMAP text), the point cloud (`cloud.ply`), per-stage
/// track statistics (`stats.txt`) and, when ground truth is supplied, a
/// metrics report (`metrics.txt`).
pub fn write_outputs(
    dir: &Path,
    result: &PipelineResult,
    gt: Option<&SceneModel>,
    cfg: &PipelineConfig,
) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::new("output", e))?;
    crate::tracks::write_colmap_text(&result.model, &dir.join("model"))
        .map_err(|e| PipelineError::new("output", e))?;

    let points: Vec<nalgebra::Point3<f64>> = result.model.points.values().copied().collect();
    let mut cloud = Vec::new();
    ply::write_point_cloud(&points, &mut cloud).map_err(|e| PipelineError::new("output", e))?;
    fs::write(dir.join("cloud.ply"), cloud).map_err(|e| PipelineError::new("output", e))?;

    fs::write(dir.join("stats.txt"), format_stage_stats(result))
        .map_err(|e| PipelineError::new("output", e))?;

    if let Some(gt) = gt {
        let report = metrics_report(&result.model, gt, cfg).map_err(|e| PipelineError::new("eval", e))?;
        fs::write(dir.join("metrics.txt"), report).map_err(|e| PipelineError::new("output", e))?;
    }
    Ok(())
}

pub fn format_stage_stats(result: &PipelineResult) -> String {
    let mut out = String::new();
    for s in &result.stages {
        writeln!(
            out,
            "stage {} tracks {} observations {} mean_length {} mean_reproj {}",
            s.stage,
            s.stats.track_count,
            s.stats.observation_count,
            s.stats.mean_length,
            s.mean_reprojection_error.unwrap_or(-1.0)
        )
        .expect("string write");
    }
    for it in &result.loop_iterations {
        writeln!(
            out,
            "loop_iteration {} tracks {} observations {} mean_reproj {}",
            it.iteration, it.tracks, it.observations, it.mean_reprojection_error
        )
        .expect("string write");
    }
    out
}

/// Flat key-value metrics against ground truth, after similarity alignment
/// of the reconstruction onto the ground-truth poses.
pub fn metrics_report(
    model: &SceneModel,
    gt: &SceneModel,
    cfg: &PipelineConfig,
) -> Result<String, eval::EvalError> {
    let gt_poses: BTreeMap<ImageId, crate::geometry::CameraPose> =
        gt.cameras.iter().map(|(&id, c)| (id, c.pose)).collect();
    let sim = eval::align_models(model, &gt_poses)?;
    let aligned = eval::apply_similarity(model, &sim);

    let pred: Vec<nalgebra::Point3<f64>> = aligned.points.values().copied().collect();
    let truth: Vec<nalgebra::Point3<f64>> = gt.points.values().copied().collect();
    let acc = eval::accuracy_completeness(&pred, &truth, &cfg.eval_dist_thresholds)?;

    let pred_poses: BTreeMap<ImageId, crate::geometry::CameraPose> =
        aligned.cameras.iter().map(|(&id, c)| (id, c.pose)).collect();
    let auc = eval::pose_auc(&pred_poses, &gt_poses, &cfg.eval_angle_thresholds)?;

    let mut out = String::new();
    writeln!(out, "# pose error convention: max(rotation angle, angle between").expect("string write");
    writeln!(out, "# camera translation vectors) in degrees, after least-squares").expect("string write");
    writeln!(out, "# similarity alignment of camera centers onto ground truth").expect("string write");
    writeln!(out, "points = {}", model.points.len()).expect("string write");
    writeln!(
        out,
        "mean_reprojection_error = {}",
        model.mean_reprojection_error().unwrap_or(-1.0)
    )
    .expect("string write");
    for a in &acc {
        writeln!(out, "accuracy_{} = {}", a.threshold, a.accuracy).expect("string write");
        writeln!(out, "completeness_{} = {}", a.threshold, a.completeness).expect("string write");
    }
    for (t, v) in cfg.eval_angle_thresholds.iter().zip(&auc) {
        writeln!(out, "pose_auc_{t} = {v}").expect("string write");
    }
    Ok(out)
}

// --- Match directory ingest -----------------------------------------------------

/// Loads dense pair fields from a directory of `<a>_<b>.dmf` files (both
/// directions required per unordered pair).
pub fn load_dense_fields(
    dir: &Path,
) -> Result<BTreeMap<(ImageId, ImageId), MatchField>, PipelineError> {
    let mut fields = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| PipelineError::new("ingest", e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("dmf"))
        .collect();
    paths.sort();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((a, b)) = stem.split_once('_') else {
            return Err(PipelineError::new(
                "ingest",
                format!("{} is not named <a>_<b>.dmf", path.display()),
            ));
        };
        let parse = |s: &str| {
            s.parse::<ImageId>().map_err(|_| {
                PipelineError::new("ingest", format!("bad image id in {}", path.display()))
            })
        };
        let (a, b) = (parse(a)?, parse(b)?);
        let file = fs::File::open(&path).map_err(|e| PipelineError::new("ingest", e))?;
        let field = crate::matchio::read_dense_field(std::io::BufReader::new(file), a, b)
            .map_err(|e| PipelineError::new("ingest", e))?;
        fields.insert((a, b), field);
    }
    Ok(fields)
}
