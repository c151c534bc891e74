//! Command-line front end: the full pipeline plus every stage standalone on
//! serialized models. `DENSESFM_LOG` selects log verbosity.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use densesfm::extend::extend_tracks;
use densesfm::matchio;
use densesfm::optimize::{bundle_adjust, filter_outliers, write_ba_report};
use densesfm::pipeline::{
    self, load_dense_fields, run_from_matches, run_synth, select_pairs, verify_pair,
    PipelineConfig, PipelineError,
};
use densesfm::refine::{
    refine_tracks, CorrelationDecoder, FeatureProvider, TensorFeatureProvider,
};
use densesfm::splatvis::{self, init_gaussians, GaussianKind, GaussianSet};
use densesfm::synth::{
    self, generate_scene, perturb_poses, read_scene_bundle, synth_dense_matcher, MatcherParams,
    SynthConfig, SyntheticFeatureProvider,
};
use densesfm::tracks::{
    self, build_tracks, track_stats, triangulate_tracks, ImageId, SceneModel,
};

#[derive(Parser)]
#[command(name = "densesfm", version, about = "Dense-matching SfM refinement pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key-value config file; `synth_*` keys configure scene generation.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker cap for parallel stages.
    #[arg(long)]
    threads: Option<usize>,
    /// Scene seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle (model/, occluders.ply, synth.cfg,
    /// and the perturbed initial/ model).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample and mutually verify dense match fields into match files.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Directory of `<a>_<b>.dmf` dense fields (both directions).
        #[arg(long, conflicts_with = "synth")]
        matches: Option<PathBuf>,
        /// Scene bundle directory; fields are synthesized from its config.
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge match files into tracks and triangulate them against a model's
    /// cameras.
    Triangulate {
        #[command(flatten)]
        common: Common,
        /// COLMAP-text model directory providing cameras and poses.
        #[arg(long)]
        model: PathBuf,
        /// Directory of `<a>_<b>.txt` match files.
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend tracks through splat-visibility and epipolar gates.
    Extend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Occluder Gaussians (PLY); omit for an occluder-free scene.
        #[arg(long)]
        gaussians: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One multi-view kernelized refinement pass over all tracks.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Scene bundle directory backing the synthetic feature provider.
        #[arg(long, conflicts_with = "features")]
        scene: Option<PathBuf>,
        /// Directory of `<image_id>.fpt` feature tensors.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Image pixels per feature-map cell for `--features`.
        #[arg(long, default_value_t = 1.0)]
        map_stride: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One bundle-adjustment pass followed by outlier filtering.
    Ba {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fixed_poses: bool,
        #[arg(long)]
        fixed_intrinsics: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy/completeness and pose AUC against a ground-truth model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Ground-truth COLMAP-text model directory.
        #[arg(long)]
        gt: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track statistics of a serialized model.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// The full pipeline: verify, triangulate, extend, iterated refinement.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Synthetic run: key-value config with `synth_*` scene keys.
        #[arg(long, conflicts_with_all = ["model", "matches"])]
        synth: Option<PathBuf>,
        /// Initial model (cameras and poses) for a dense-field run.
        #[arg(long, requires = "matches")]
        model: Option<PathBuf>,
        /// Directory of `<a>_<b>.dmf` dense fields.
        #[arg(long)]
        matches: Option<PathBuf>,
        /// Feature tensors for refinement in a dense-field run.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        map_stride: f64,
        #[arg(long)]
        skip_extend: bool,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        fixed_poses: bool,
        #[arg(long)]
        fixed_intrinsics: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("DENSESFM_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [stage {}]: {}", e.stage, e.message);
            if e.stage == "ingest" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn ingest_err(e: impl ToString) -> PipelineError {
    PipelineError::new("ingest", e)
}

fn output_err(e: impl ToString) -> PipelineError {
    PipelineError::new("output", e)
}

/// Loads the config file (if any) and applies command-line overrides.
fn load_config(common: &Common) -> Result<(PipelineConfig, SynthConfig), PipelineError> {
    let (mut cfg, mut synth) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                ingest_err(format!("config {}: {e}", path.display()))
            })?;
            PipelineConfig::from_kv_str(&text)?
        }
        None => (PipelineConfig::default(), SynthConfig::default()),
    };
    if let Some(threads) = common.threads {
        cfg.threads = Some(threads);
    }
    if let Some(seed) = common.seed {
        synth.seed = seed;
    }
    Ok((cfg, synth))
}

fn read_model(path: &Path) -> Result<SceneModel, PipelineError> {
    if !path.exists() {
        return Err(ingest_err(format!("model directory {} does not exist", path.display())));
    }
    let model = tracks::read_colmap_text(path).map_err(ingest_err)?;
    model.validate().map_err(ingest_err)?;
    Ok(model)
}

fn write_model(model: &SceneModel, out: &Path) -> Result<(), PipelineError> {
    tracks::write_colmap_text(model, &out.join("model")).map_err(output_err)
}

fn read_occluders(path: &Path) -> Result<GaussianSet, PipelineError> {
    let bytes = fs::read(path).map_err(ingest_err)?;
    let mut set = GaussianSet::default();
    for g in splatvis::read_gaussians(&bytes[..]).map_err(ingest_err)? {
        set.push_occluder(splatvis::Gaussian3D { kind: GaussianKind::Occluder, ..g });
    }
    Ok(set)
}

/// Synthesizes and verifies matches for every configured pair of a bundle.
fn verified_from_bundle(
    bundle: &Path,
    cfg: &PipelineConfig,
) -> Result<(SceneModel, Vec<(matchio::SparseMatchSet, u32, u32)>), PipelineError> {
    let (gt, _, synth_cfg) = read_scene_bundle(bundle).map_err(ingest_err)?;
    let ids: Vec<ImageId> = gt.cameras.keys().copied().collect();
    let params = MatcherParams::from_config(&synth_cfg);
    let mut out = Vec::new();
    for (a, b) in select_pairs(&ids, cfg.pairs) {
        let m = synth_dense_matcher(&gt, a, b, &params).map_err(ingest_err)?;
        let set = verify_pair(&m.forward, &m.backward, cfg)?;
        out.push((set, m.forward.width, m.forward.height));
    }
    Ok((gt, out))
}

fn load_match_sets(dir: &Path) -> Result<Vec<matchio::SparseMatchSet>, PipelineError> {
    if !dir.exists() {
        return Err(ingest_err(format!("match directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(ingest_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
        .collect();
    paths.sort();
    let mut sets = Vec::new();
    for path in paths {
        let file = fs::File::open(&path).map_err(ingest_err)?;
        let (set, _, _) = matchio::read_match_set(std::io::BufReader::new(file))
            .map_err(|e| ingest_err(format!("{}: {e}", path.display())))?;
        sets.push(set);
    }
    Ok(sets)
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Synth { common, out } => {
            let (_, synth_cfg) = load_config(&common)?;
            let (model, occluders) = generate_scene(&synth_cfg).map_err(ingest_err)?;
            synth::write_scene_bundle(&out, &model, &occluders, &synth_cfg)
                .map_err(output_err)?;
            // The perturbed initial model seeds downstream staged runs.
            let initial = if synth_cfg.pose_rot_noise_deg > 0.0
                || synth_cfg.pose_trans_noise_frac > 0.0
            {
                perturb_poses(
                    &model,
                    synth_cfg.pose_rot_noise_deg,
                    synth_cfg.pose_trans_noise_frac,
                    synth_cfg.seed,
                )
            } else {
                model.clone()
            };
            let mut empty = initial;
            empty.points.clear();
            empty.tracks.clear();
            tracks::write_colmap_text(&empty, &out.join("initial")).map_err(output_err)?;
            println!("scene bundle written to {}", out.display());
            Ok(())
        }
        Command::Verify { common, matches, synth, out } => {
            let (cfg, _) = load_config(&common)?;
            let sets: Vec<(matchio::SparseMatchSet, u32, u32)> = if let Some(bundle) = synth {
                verified_from_bundle(&bundle, &cfg)?.1
            } else {
                let dir = matches
                    .ok_or_else(|| ingest_err("verify needs --matches or --synth"))?;
                let fields = load_dense_fields(&dir)?;
                let mut sets = Vec::new();
                for (&(a, b), forward) in &fields {
                    if a >= b {
                        continue;
                    }
                    let backward = fields
                        .get(&(b, a))
                        .ok_or_else(|| ingest_err(format!("missing backward field {b}_{a}.dmf")))?;
                    let set = verify_pair(forward, backward, &cfg)?;
                    sets.push((set, forward.width, forward.height));
                }
                sets
            };
            fs::create_dir_all(&out).map_err(output_err)?;
            for (set, w, h) in &sets {
                let path = out.join(format!("{}_{}.txt", set.image_a, set.image_b));
                let mut buf = Vec::new();
                matchio::write_match_set(set, *w, *h, &mut buf).map_err(output_err)?;
                fs::write(&path, buf).map_err(output_err)?;
            }
            println!("verified matches for {} pairs written to {}", sets.len(), out.display());
            Ok(())
        }
        Command::Triangulate { common, model, matches, out } => {
            let (cfg, _) = load_config(&common)?;
            let initial = read_model(&model)?;
            let sets = load_match_sets(&matches)?;
            let sets = if cfg.quantize_radius > 0.0 {
                sets.iter().map(|s| tracks::quantize_matches(s, cfg.quantize_radius)).collect()
            } else {
                sets
            };
            let built = build_tracks(&sets);
            let tri = densesfm::parallel::with_threads(cfg.threads, || {
                triangulate_tracks(&initial.cameras, built)
            });
            tri.validate().map_err(|e| PipelineError::new("triangulate", e))?;
            write_model(&tri, &out)?;
            println!("triangulated {} tracks into {}", tri.tracks.len(), out.display());
            Ok(())
        }
        Command::Extend { common, model, gaussians, out } => {
            let (cfg, _) = load_config(&common)?;
            let model = read_model(&model)?;
            let mut set = init_gaussians(&model).map_err(|e| PipelineError::new("gaussians", e))?;
            if let Some(path) = gaussians {
                set.extend_from(&read_occluders(&path)?);
            }
            let extended = densesfm::parallel::with_threads(cfg.threads, || {
                extend_tracks(&model, &set, cfg.eps_v, cfg.epi_thresh)
            });
            write_model(&extended, &out)?;
            println!(
                "extended mean track length {:.3} -> {:.3}",
                track_stats(&model).mean_length,
                track_stats(&extended).mean_length
            );
            Ok(())
        }
        Command::Refine { common, model, scene, features, map_stride, out } => {
            let (cfg, _) = load_config(&common)?;
            let model = read_model(&model)?;
            let provider: Box<dyn FeatureProvider> = if let Some(bundle) = scene {
                let (gt, _, synth_cfg) = read_scene_bundle(&bundle).map_err(ingest_err)?;
                Box::new(SyntheticFeatureProvider::from_config(gt, &synth_cfg))
            } else if let Some(dir) = features {
                Box::new(TensorFeatureProvider::from_dir(&dir, map_stride).map_err(ingest_err)?)
            } else {
                return Err(ingest_err("refine needs --scene or --features"));
            };
            let decoder = CorrelationDecoder::new(cfg.refine.sharpness, cfg.refine.anchor_extent);
            let (refined, outcome) = densesfm::parallel::with_threads(cfg.threads, || {
                refine_tracks(&model, provider.as_ref(), &decoder, &cfg.refine)
            });
            write_model(&refined, &out)?;
            println!(
                "refined {} tracks ({} skipped)",
                outcome.refined_tracks,
                outcome.skipped.len()
            );
            Ok(())
        }
        Command::Ba { common, model, fixed_poses, fixed_intrinsics, out } => {
            let (mut cfg, _) = load_config(&common)?;
            if fixed_poses {
                cfg.ba.refine_poses = false;
            }
            if fixed_intrinsics {
                cfg.ba.refine_intrinsics = false;
            }
            let model = read_model(&model)?;
            let (adjusted, report) = densesfm::parallel::with_threads(cfg.threads, || {
                bundle_adjust(&model, &cfg.ba)
            })
            .map_err(|e| PipelineError::new("ba", e))?;
            let filtered = filter_outliers(&adjusted, cfg.ba.outlier_threshold);
            write_model(&filtered, &out)?;
            let mut buf = Vec::new();
            write_ba_report(&report, &mut buf).map_err(output_err)?;
            fs::create_dir_all(&out).map_err(output_err)?;
            fs::write(out.join("ba_report.txt"), buf).map_err(output_err)?;
            println!(
                "cost {:.6e} -> {:.6e} in {} iterations; {} tracks survive filtering",
                report.initial_cost,
                report.final_cost,
                report.iterations.len(),
                filtered.tracks.len()
            );
            Ok(())
        }
        Command::Eval { common, model, gt, out } => {
            let (cfg, _) = load_config(&common)?;
            let model = read_model(&model)?;
            let gt = read_model(&gt)?;
            let report = pipeline::metrics_report(&model, &gt, &cfg)
                .map_err(|e| PipelineError::new("eval", e))?;
            match out {
                Some(path) => fs::write(path, report).map_err(output_err)?,
                None => print!("{report}"),
            }
            Ok(())
        }
        Command::Stats { common, model } => {
            let _ = load_config(&common)?;
            let model = read_model(&model)?;
            let stats = track_stats(&model);
            println!("tracks {}", stats.track_count);
            println!("observations {}", stats.observation_count);
            println!("mean_length {}", stats.mean_length);
            for (len, count) in &stats.histogram {
                println!("length_{len} {count}");
            }
            if let Some(e) = model.mean_reprojection_error() {
                println!("mean_reprojection_error {e}");
            }
            Ok(())
        }
        Command::Pipeline {
            common,
            synth,
            model,
            matches,
            features,
            map_stride,
            skip_extend,
            iterations,
            fixed_poses,
            fixed_intrinsics,
            out,
        } => {
            // `--synth <file>` is itself a config file and replaces --config.
            let (mut cfg, mut synth_cfg) = match &synth {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| {
                        ingest_err(format!("synth config {}: {e}", path.display()))
                    })?;
                    let parsed = PipelineConfig::from_kv_str(&text)?;
                    (parsed.0, parsed.1)
                }
                None => load_config(&common)?,
            };
            if let Some(threads) = common.threads {
                cfg.threads = Some(threads);
            }
            if let Some(seed) = common.seed {
                synth_cfg.seed = seed;
            }
            if skip_extend {
                cfg.skip_extend = true;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if fixed_poses {
                cfg.ba.refine_poses = false;
            }
            if fixed_intrinsics {
                cfg.ba.refine_intrinsics = false;
            }

            if synth.is_some() {
                let run = run_synth(&synth_cfg, &cfg)?;
                pipeline::write_outputs(&out, &run.result, Some(&run.ground_truth), &cfg)?;
                println!(
                    "pipeline finished: {} tracks, outputs in {}",
                    run.result.model.tracks.len(),
                    out.display()
                );
                return Ok(());
            }

            let model_dir =
                model.ok_or_else(|| ingest_err("pipeline needs --synth or --model"))?;
            let matches_dir =
                matches.ok_or_else(|| ingest_err("pipeline needs --matches with --model"))?;
            let initial = read_model(&model_dir)?;
            let fields = load_dense_fields(&matches_dir)?;
            let mut verified = Vec::new();
            for (&(a, b), forward) in &fields {
                if a >= b {
                    continue;
                }
                let backward = fields
                    .get(&(b, a))
                    .ok_or_else(|| ingest_err(format!("missing backward field {b}_{a}.dmf")))?;
                verified.push(verify_pair(forward, backward, &cfg)?);
            }
            let provider: Box<dyn FeatureProvider> = match features {
                Some(dir) => {
                    Box::new(TensorFeatureProvider::from_dir(&dir, map_stride).map_err(ingest_err)?)
                }
                None => return Err(ingest_err("pipeline with --matches needs --features")),
            };
            let decoder = CorrelationDecoder::new(cfg.refine.sharpness, cfg.refine.anchor_extent);
            let result = run_from_matches(
                &initial.cameras,
                &verified,
                &GaussianSet::default(),
                provider.as_ref(),
                &decoder,
                &cfg,
            )?;
            pipeline::write_outputs(&out, &result, None, &cfg)?;
            println!(
                "pipeline finished: {} tracks, outputs in {}",
                result.model.tracks.len(),
                out.display()
            );
            Ok(())
        }
    }
}
