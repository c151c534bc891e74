//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line with its headline numbers once every assertion holds.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Point3, UnitQuaternion, Vector2, Vector3};

use densesfm::eval;
use densesfm::geometry::{self, CameraIntrinsics, CameraPose, Pixel, MIN_DEPTH};
use densesfm::matchio::{mutual_verify, nms_sample};
use densesfm::optimize::{
    linearize_observation, refine_loop, BaConfig, COL_INTR, COL_ROT, COL_TRANS,
};
use densesfm::pipeline::{run_synth, PipelineConfig, PipelineResult, SynthRun};
use densesfm::refine::{
    confidence_loss, confidence_loss_gradient, cosine_kernel, gp_posterior_mean, normalized_grid,
    positional_encoding, CorrelationDecoder, FeaturePatch, RefineConfig,
};
use densesfm::splatvis::{
    composite_visibility, init_gaussians, Gaussian3D, GaussianKind, GaussianSet,
};
use densesfm::synth::{
    generate_scene, perturb_poses, synth_dense_matcher, MatcherParams, Rng, SynthConfig,
    SyntheticFeatureProvider,
};
use densesfm::tracks::{self, triangulate_tracks, ImageId, Provenance, SceneModel};

/// Camera dome shared by the scene-level criteria: every pairwise view angle
/// stays moderate, like a capture rig orbiting above a desk.
fn dome(cameras: usize, points: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        cameras,
        points,
        camera_radius: 2.5,
        camera_height: 3.5,
        ..Default::default()
    }
}

// --- 1. GP oracle equivalence ------------------------------------------------

#[test]
fn acceptance_1_gp_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = Rng::seeded(101, 1);
    let (tau, eps, noise_var, num_freqs) = (10.0, 1e-6, 0.1, 8);
    let mut cases = 0;
    let mut max_abs: f64 = 0.0;
    while cases < 50 {
        let p = [1usize, 3, 5, 7][rng.index(4)];
        let c = 2 + rng.index(4);
        // Feature vectors at sane scales (unit-ish norms): the kernel's
        // epsilon regularizer is only meaningful away from the zero vector.
        let make = |rng: &mut Rng| {
            let data: Vec<f64> = (0..p * p)
                .flat_map(|_| {
                    let raw: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                    let scale = rng.uniform(0.5, 2.0) / norm;
                    raw.into_iter().map(move |v| v * scale).collect::<Vec<f64>>()
                })
                .collect();
            FeaturePatch::new(1, p, c, Pixel::new(0.0, 0.0), 1.0, data).unwrap()
        };
        let reference = make(&mut rng);
        let query = make(&mut rng);
        let emb =
            gp_posterior_mean(&reference, &query, noise_var, tau, eps, num_freqs).unwrap();

        // Explicit dense-inverse oracle.
        let n = p * p;
        let e = 4 * num_freqs;
        let coords = normalized_grid(p);
        let mut chi = DMatrix::<f64>::zeros(n, e);
        for (i, &(x, y)) in coords.iter().enumerate() {
            for (j, v) in positional_encoding(x, y, num_freqs).into_iter().enumerate() {
                chi[(i, j)] = v;
            }
        }
        let feat = |patch: &FeaturePatch, i: usize| patch.feature(i / p, i % p).to_vec();
        let mut k_qq = DMatrix::<f64>::zeros(n, n);
        let mut k_rq = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k_qq[(i, j)] = cosine_kernel(&feat(&query, i), &feat(&query, j), tau, eps)
                    + if i == j { noise_var } else { 0.0 };
                k_rq[(i, j)] = cosine_kernel(&feat(&reference, i), &feat(&query, j), tau, eps);
            }
        }
        let oracle = k_rq * k_qq.try_inverse().expect("regularized kernel") * chi;
        for i in 0..n {
            for j in 0..e {
                max_abs = max_abs.max((emb.at(i / p, i % p)[j] - oracle[(i, j)]).abs());
            }
        }
        cases += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(max_abs < 1e-8, "max abs deviation {max_abs:e}");
    assert!(elapsed < 5.0, "runtime {elapsed:.2}s exceeds 5s");
    println!(
        "acceptance 1 (gp oracle equivalence): PASS, max|diff| {max_abs:.2e} over 50 patches in {elapsed:.2}s"
    );
}

// --- 2. Visibility oracle equivalence ----------------------------------------

/// Independent per-ray brute-force compositing oracle.
fn visibility_oracle(
    set: &GaussianSet,
    point: u64,
    pose: &CameraPose,
    k: &CameraIntrinsics,
) -> f64 {
    let target = *set.sfm_gaussian(point).expect("target exists");
    let target_idx = set
        .gaussians()
        .iter()
        .position(|g| g.kind == GaussianKind::SfmPoint && g.mean == target.mean)
        .expect("index of target");
    let center = geometry::project(&target.mean, pose, k).unwrap();
    let z = pose.transform(&target.mean).z;
    let radius = 2.0 * target.scale.max() * k.fx.max(k.fy) / z;
    let origin = pose.center();
    let rt = pose.rotation_matrix().transpose();
    let mut pixels = Vec::new();
    let x0 = ((center.x - radius).ceil().max(0.0)) as u32;
    let x1 = ((center.x + radius).floor().min((k.width - 1) as f64)) as u32;
    let y0 = ((center.y - radius).ceil().max(0.0)) as u32;
    let y1 = ((center.y + radius).floor().min((k.height - 1) as f64)) as u32;
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
    let mut best = 0.0f64;
    for (px, py) in pixels {
        let dir =
            (rt * Vector3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0))
                .normalize();
        let t_depth = (target.mean - origin).dot(&dir);
        let mut entries: Vec<(f64, usize, f64)> = Vec::new();
        for (i, g) in set.gaussians().iter().enumerate() {
            if i == target_idx || g.kind != GaussianKind::Occluder {
                continue;
            }
            let to_mean = g.mean - origin;
            let depth = to_mean.dot(&dir);
            if depth <= MIN_DEPTH || depth >= t_depth {
                continue;
            }
            let perp = to_mean - depth * dir;
            let d2 = perp.norm_squared();
            let alpha = if d2 <= 1e-300 {
                g.opacity
            } else {
                let sp2 = perp.dot(&(g.covariance() * perp)) / d2;
                g.opacity * (-0.5 * d2 / sp2).exp()
            };
            entries.push((depth, i, alpha));
        }
        entries.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)));
        let mut transmittance = 1.0f64;
        for (_, _, alpha) in &entries {
            transmittance *= 1.0 - alpha;
        }
        best = best.max(target.opacity * transmittance);
    }
    best
}

#[test]
fn acceptance_2_visibility_oracle_equivalence() {
    let mut rng = Rng::seeded(202, 2);
    let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64);
    for case in 0..100 {
        // One SfM point straight ahead, random occluders around the ray.
        let depth = 8.0 + rng.uniform(0.0, 4.0);
        let mut model = SceneModel::default();
        let pose = CameraPose::from_parts(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, depth));
        model.cameras.insert(1, tracks::Camera { pose, intrinsics: k });
        model.points.insert(1, Point3::origin());
        model.tracks.insert(
            1,
            tracks::Track {
                point: 1,
                observations: vec![tracks::Observation {
                    image: 1,
                    pixel: Pixel::new(32.0, 32.0),
                    provenance: Provenance::Matched,
                }],
                reference: None,
            },
        );
        let mut set = init_gaussians(&model).unwrap();
        for _ in 0..rng.index(7) {
            set.push_occluder(Gaussian3D {
                mean: Point3::new(
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-8.0, 4.0),
                ),
                rotation: rng.rotation(),
                scale: Vector3::new(
                    0.05 + rng.unit(),
                    0.05 + rng.unit(),
                    0.05 + rng.unit(),
                ),
                opacity: 0.05 + 0.9 * rng.unit(),
                kind: GaussianKind::Occluder,
            });
        }
        let got = composite_visibility(&set, 1, &pose, &k, 0.5).unwrap();
        let want = visibility_oracle(&set, 1, &pose, &k);
        assert_eq!(
            got.score.to_bits(),
            want.to_bits(),
            "case {case}: {} vs oracle {want}",
            got.score
        );
    }

    // Analytic cases, exact.
    let model = {
        let mut m = SceneModel::default();
        let pose = CameraPose::from_parts(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 10.0));
        m.cameras.insert(1, tracks::Camera { pose, intrinsics: k });
        m.points.insert(1, Point3::origin());
        m.tracks.insert(
            1,
            tracks::Track {
                point: 1,
                observations: vec![tracks::Observation {
                    image: 1,
                    pixel: Pixel::new(32.0, 32.0),
                    provenance: Provenance::Matched,
                }],
                reference: None,
            },
        );
        m
    };
    let pose = model.cameras[&1].pose;
    let blanket = |z: f64, alpha: f64| Gaussian3D {
        mean: Point3::new(0.0, 0.0, z),
        rotation: UnitQuaternion::identity(),
        scale: Vector3::new(1e9, 1e9, 1e9),
        opacity: alpha,
        kind: GaussianKind::Occluder,
    };

    let set = init_gaussians(&model).unwrap();
    let v = composite_visibility(&set, 1, &pose, &k, 0.5).unwrap();
    assert_eq!(v.score, 1.0);
    assert!(v.visible);

    let mut set1 = init_gaussians(&model).unwrap();
    set1.push_occluder(blanket(-5.0, 0.8));
    let v = composite_visibility(&set1, 1, &pose, &k, 0.5).unwrap();
    assert_eq!(v.score, 1.0 - 0.8);
    assert!(!v.visible);

    let mut set2 = init_gaussians(&model).unwrap();
    set2.push_occluder(blanket(-5.0, 0.3));
    set2.push_occluder(blanket(-2.0, 0.4));
    let v = composite_visibility(&set2, 1, &pose, &k, 0.5).unwrap();
    assert_eq!(v.score, (1.0 - 0.3) * (1.0 - 0.4));
    assert!((v.score - 0.42).abs() < 1e-12);
    assert!(!v.visible);

    println!("acceptance 2 (visibility oracle equivalence): PASS, 100 configs bit-exact + analytic cases");
}

// --- 3. Loss and Jacobian gradient checks ------------------------------------

#[test]
fn acceptance_3_gradient_checks() {
    // Confidence loss vs central finite differences.
    let mut rng = Rng::seeded(303, 3);
    let alpha = 20.0;
    for _ in 0..100 {
        let preds: Vec<(Pixel, Pixel, f64)> = (0..4)
            .map(|_| {
                (
                    Pixel::new(rng.uniform(0.0, 10.0), rng.uniform(0.0, 10.0)),
                    Pixel::new(rng.uniform(0.0, 10.0), rng.uniform(0.0, 10.0)),
                    0.2 + rng.uniform(0.0, 5.0),
                )
            })
            .collect();
        let grads = confidence_loss_gradient(&preds, alpha).unwrap();
        let h = 1e-6;
        for (i, &(dp, ds)) in grads.iter().enumerate() {
            for axis in 0..2 {
                let mut plus = preds.clone();
                let mut minus = preds.clone();
                if axis == 0 {
                    plus[i].0.x += h;
                    minus[i].0.x -= h;
                } else {
                    plus[i].0.y += h;
                    minus[i].0.y -= h;
                }
                let fd = (confidence_loss(&plus, alpha).unwrap()
                    - confidence_loss(&minus, alpha).unwrap())
                    / (2.0 * h);
                assert!(
                    (dp[axis] - fd).abs() / fd.abs().max(1e-9) < 1e-5,
                    "loss position gradient mismatch"
                );
            }
            let mut plus = preds.clone();
            let mut minus = preds.clone();
            plus[i].2 += h;
            minus[i].2 -= h;
            let fd = (confidence_loss(&plus, alpha).unwrap()
                - confidence_loss(&minus, alpha).unwrap())
                / (2.0 * h);
            assert!((ds - fd).abs() / fd.abs().max(1e-9) < 1e-5, "loss confidence gradient mismatch");
        }
    }

    // Reprojection Jacobians vs central finite differences.
    let mut checked = 0;
    while checked < 100 {
        let k = CameraIntrinsics::new(
            100.0 + rng.unit() * 100.0,
            100.0 + rng.unit() * 100.0,
            60.0 + rng.unit() * 10.0,
            45.0 + rng.unit() * 10.0,
            128,
            96,
        );
        let pose = CameraPose::from_parts(
            UnitQuaternion::from_scaled_axis(rng.unit_vector() * rng.unit()),
            Vector3::new(rng.normal(), rng.normal(), rng.normal()),
        );
        let cam_point = Vector3::new(rng.normal() * 0.5, rng.normal() * 0.5, 1.0 + rng.unit() * 4.0);
        let point = pose.rotation().inverse() * (cam_point - pose.translation);
        let obs = Pixel::new(rng.unit() * 128.0, rng.unit() * 96.0);
        let Some((_, cam, jpoint)) = linearize_observation(&pose, &k, &point, &obs) else {
            continue;
        };
        checked += 1;
        let residual_of = |pose: &CameraPose, k: &CameraIntrinsics, p: &Vector3<f64>| {
            let pc = pose.rotation() * p + pose.translation;
            Vector2::new(k.fx * pc.x / pc.z + k.cx - obs.x, k.fy * pc.y / pc.z + k.cy - obs.y)
        };
        let h = 1e-6;
        // Relative check with an absolute floor: typical entries are tens of
        // pixels per unit, so entries below 1e-2 are numerically zero and
        // the difference stencil carries no significant digits there.
        let check = |got: f64, want: f64| {
            assert!(
                (got - want).abs() / want.abs().max(1e-2) < 1e-5,
                "jacobian mismatch: {got} vs fd {want}"
            );
        };
        for axis in 0..3 {
            let mut dv = Vector3::zeros();
            dv[axis] = h;
            let fp = residual_of(&pose.perturbed(&dv, &Vector3::zeros()), &k, &point);
            let fm = residual_of(&pose.perturbed(&(-dv), &Vector3::zeros()), &k, &point);
            for row in 0..2 {
                check(cam[row][COL_ROT + axis], (fp[row] - fm[row]) / (2.0 * h));
            }
            let fp = residual_of(&pose.perturbed(&Vector3::zeros(), &dv), &k, &point);
            let fm = residual_of(&pose.perturbed(&Vector3::zeros(), &(-dv)), &k, &point);
            for row in 0..2 {
                check(cam[row][COL_TRANS + axis], (fp[row] - fm[row]) / (2.0 * h));
            }
            let fp = residual_of(&pose, &k, &(point + dv));
            let fm = residual_of(&pose, &k, &(point - dv));
            for row in 0..2 {
                check(jpoint[(row, axis)], (fp[row] - fm[row]) / (2.0 * h));
            }
        }
        for slot in 0..4 {
            let mut kp = k;
            let mut km = k;
            match slot {
                0 => {
                    kp.fx += h;
                    km.fx -= h;
                }
                1 => {
                    kp.fy += h;
                    km.fy -= h;
                }
                2 => {
                    kp.cx += h;
                    km.cx -= h;
                }
                _ => {
                    kp.cy += h;
                    km.cy -= h;
                }
            }
            let fp = residual_of(&pose, &kp, &point);
            let fm = residual_of(&pose, &km, &point);
            for row in 0..2 {
                check(cam[row][COL_INTR + slot], (fp[row] - fm[row]) / (2.0 * h));
            }
        }
    }
    println!("acceptance 3 (loss and jacobian gradient checks): PASS, 100 instances each within 1e-5");
}

// --- 4. Track-extension trend --------------------------------------------------

#[test]
fn acceptance_4_track_extension_trend() {
    // Occluder-free: noise-free matcher, pairwise baseline through the full
    // verify/triangulate path, then extension. The camera format gives 300
    // points enough image room to stay isolated under the matcher's
    // footprint rule.
    let synth = SynthConfig {
        image_width: 512,
        image_height: 384,
        focal: 320.0,
        volume_half_extent: 1.6,
        ..dome(12, 300, 7)
    };
    let cfg = PipelineConfig {
        iterations: 0,
        refine: RefineConfig { patch_size: 9, ..Default::default() },
        threads: Some(1),
        ..Default::default()
    };
    let (gt, _) = generate_scene(&synth).unwrap();
    // Full covisibility must cover at least 80% of scene points.
    let full = gt.tracks.values().filter(|t| t.len() == gt.cameras.len()).count();
    assert!(
        full * 5 >= gt.points.len() * 4,
        "only {full} of {} points fully covisible",
        gt.points.len()
    );

    let run = run_synth(&synth, &cfg).unwrap();
    let stages = &run.result.stages;
    let tri = stages.iter().find(|s| s.stage == "triangulate").unwrap();
    let ext = stages.iter().find(|s| s.stage == "extend").unwrap();
    assert!(tri.stats.track_count > 300, "degenerate baseline: {} tracks", tri.stats.track_count);
    assert!(
        tri.stats.mean_length < 3.0,
        "baseline should be fragmentary, got mean length {:.2}",
        tri.stats.mean_length
    );
    assert!(
        ext.stats.mean_length >= 1.8 * tri.stats.mean_length,
        "extension {:.2} not 1.8x baseline {:.2}",
        ext.stats.mean_length,
        tri.stats.mean_length
    );

    // Exhaustive-projection oracle: per final point, the count of cameras
    // with positive depth and in-image projection. Integer totals compare
    // exactly.
    let extended = &run.result.model;
    let mut oracle_total = 0usize;
    for pid in extended.tracks.keys() {
        let p = &extended.points[pid];
        oracle_total += extended
            .cameras
            .values()
            .filter(|cam| {
                geometry::project(p, &cam.pose, &cam.intrinsics)
                    .is_ok_and(|px| cam.intrinsics.contains(&px))
            })
            .count();
    }
    let got_total: usize = extended.tracks.values().map(|t| t.len()).sum();
    assert_eq!(got_total, oracle_total, "extension disagrees with covisibility oracle");

    // With occluders: per-camera exclusions match the visibility oracle.
    let occluded = SynthConfig { occluder_count: 10, ..dome(8, 60, 11) };
    let (gt_occ, occluders) = generate_scene(&occluded).unwrap();
    let mut pairwise = gt_occ.clone();
    for track in pairwise.tracks.values_mut() {
        track.observations.truncate(2);
    }
    let mut set = init_gaussians(&pairwise).unwrap();
    set.extend_from(&occluders);
    let extended = densesfm::extend::extend_tracks(&pairwise, &set, 0.5, 4.0);
    let mut exclusions_checked = 0;
    for (pid, before) in &pairwise.tracks {
        for (&image, cam) in &pairwise.cameras {
            if before.observes(image) {
                continue;
            }
            let joined = extended.tracks[pid].observes(image);
            match composite_visibility(&set, *pid, &cam.pose, &cam.intrinsics, 0.5) {
                Ok(v) => {
                    let oracle = visibility_oracle(&set, *pid, &cam.pose, &cam.intrinsics);
                    assert_eq!(v.score.to_bits(), oracle.to_bits());
                    assert_eq!(joined, v.visible, "track {pid} camera {image}");
                }
                Err(_) => assert!(!joined, "track {pid} joined an invalid camera {image}"),
            }
            exclusions_checked += 1;
        }
    }
    assert!(exclusions_checked > 100);
    println!(
        "acceptance 4 (track extension trend): PASS, mean length {:.2} -> {:.2} (oracle-exact), {} occluded candidates oracle-exact",
        tri.stats.mean_length, ext.stats.mean_length, exclusions_checked
    );
}

// --- 5. End-to-end improvement -------------------------------------------------

/// 3-sigma propagated bound along the surface normal: the scene's surface is
/// the surfel plane through each point facing the rig centroid, and the
/// match-noise covariance of the ideal multi-view triangulation is projected
/// onto that normal. Tangential drift along the surface is consistency-
/// preserving by construction and is not an error against the surface.
fn normal_bound(gt: &SceneModel, pid: u64, sigma: f64, rig: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let point = &gt.points[&pid];
    let mut h = Matrix3::<f64>::zeros();
    for o in &gt.tracks[&pid].observations {
        let cam = &gt.cameras[&o.image];
        let pc = cam.pose.transform(point);
        let r = cam.pose.rotation_matrix();
        let k = &cam.intrinsics;
        let j = Matrix2x3::new(
            k.fx / pc.z,
            0.0,
            -k.fx * pc.x / (pc.z * pc.z),
            0.0,
            k.fy / pc.z,
            -k.fy * pc.y / (pc.z * pc.z),
        ) * r;
        h += j.transpose() * j;
    }
    let cov = h.try_inverse().expect("full-rank multi-view system") * sigma * sigma;
    let n = (rig - point.coords).normalize();
    (n, 3.0 * (n.transpose() * cov * n)[(0, 0)].sqrt())
}

#[test]
fn acceptance_5_end_to_end_improvement() {
    let start = Instant::now();
    let synth = dome(12, 140, 7);
    let sigma = 0.5;
    let outlier_rate = 0.05;
    let (gt, _) = generate_scene(&synth).unwrap();

    // Noisy observations with gross outliers on perturbed poses.
    let perturbed = perturb_poses(&gt, 0.5, 0.01, synth.seed);
    let mut rng = Rng::seeded(synth.seed, 4242);
    let mut noisy = perturbed.clone();
    for track in noisy.tracks.values_mut() {
        for obs in track.observations.iter_mut() {
            if rng.unit() < outlier_rate {
                obs.pixel.x += 20.0 + rng.unit() * 20.0;
                obs.pixel.y += 20.0 + rng.unit() * 20.0;
            } else {
                obs.pixel.x += rng.normal() * sigma;
                obs.pixel.y += rng.normal() * sigma;
            }
            obs.provenance = Provenance::Matched;
            let k = &noisy.cameras[&obs.image].intrinsics;
            obs.pixel.x = obs.pixel.x.clamp(0.0, (k.width - 1) as f64);
            obs.pixel.y = obs.pixel.y.clamp(0.0, (k.height - 1) as f64);
        }
    }
    let built: Vec<_> = noisy.tracks.values().cloned().collect();
    let unrefined = triangulate_tracks(&noisy.cameras, built);
    let unrefined_err = unrefined.mean_reprojection_error().unwrap();

    let provider = SyntheticFeatureProvider::from_config(gt.clone(), &synth);
    let refine_cfg = RefineConfig::default();
    let decoder = CorrelationDecoder::new(refine_cfg.sharpness, refine_cfg.anchor_extent);
    let (refined, stats) = densesfm::parallel::with_threads(Some(1), || {
        refine_loop(&unrefined, &provider, &decoder, 2, &refine_cfg, &BaConfig::default())
    })
    .unwrap();
    let final_err = refined.mean_reprojection_error().unwrap();

    assert!(
        final_err <= 0.5 * unrefined_err,
        "mean reprojection error {final_err:.3} not half of unrefined {unrefined_err:.3}"
    );
    let mut prev = f64::INFINITY;
    for it in &stats {
        assert!(
            it.mean_reprojection_error <= prev,
            "iteration {} error {} above previous {prev}",
            it.iteration,
            it.mean_reprojection_error
        );
        prev = it.mean_reprojection_error;
    }

    // Surviving points within the 3-sigma propagated surface distance.
    let gt_poses: BTreeMap<ImageId, CameraPose> =
        gt.cameras.iter().map(|(&id, c)| (id, c.pose)).collect();
    let sim = eval::align_models(&refined, &gt_poses).unwrap();
    let aligned = eval::apply_similarity(&refined, &sim);
    let rig: Vector3<f64> = gt.cameras.values().map(|c| c.pose.center().coords).sum::<Vector3<f64>>()
        / gt.cameras.len() as f64;
    let mut within = 0;
    let mut total = 0;
    for (pid, est) in &aligned.points {
        let (n, bound) = normal_bound(&gt, *pid, sigma, &rig);
        total += 1;
        if n.dot(&(est - gt.points[pid])).abs() <= bound {
            within += 1;
        }
    }
    assert!(
        within * 20 >= total * 19,
        "only {within}/{total} points within the propagated bound"
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "runtime {elapsed:.1}s exceeds 60s single-threaded");
    println!(
        "acceptance 5 (end-to-end improvement): PASS, reprojection {unrefined_err:.3} -> {final_err:.3} ({:.0}% reduction), {within}/{total} within bound, {elapsed:.1}s",
        100.0 * (1.0 - final_err / unrefined_err)
    );
}

// --- 6. Quantization vs extension ----------------------------------------------

#[test]
fn acceptance_6_quantization_vs_extension_trend() {
    let synth = SynthConfig {
        match_sigma: 0.5,
        outlier_rate: 0.05,
        pose_rot_noise_deg: 0.5,
        pose_trans_noise_frac: 0.01,
        image_width: 512,
        image_height: 384,
        focal: 320.0,
        volume_half_extent: 1.6,
        ..dome(12, 200, 7)
    };
    let cfg = PipelineConfig {
        refine: RefineConfig { patch_size: 9, ..Default::default() },
        threads: Some(2),
        ..Default::default()
    };
    let extension = run_synth(&synth, &cfg).unwrap();
    let quantized =
        run_synth(&synth, &PipelineConfig { quantize_radius: 4.0, ..cfg.clone() }).unwrap();

    let n_ext = extension.result.model.points.len();
    let n_quant = quantized.result.model.points.len();
    assert!(n_ext >= n_quant, "extension kept {n_ext} points, quantized kept {n_quant}");

    // Post-adjustment accuracy: fraction of surviving points within a desk-
    // scale threshold of the ground-truth cloud, after alignment.
    let accuracy = |run: &SynthRun| {
        let gt = &run.ground_truth;
        let gt_poses: BTreeMap<ImageId, CameraPose> =
            gt.cameras.iter().map(|(&id, c)| (id, c.pose)).collect();
        let sim = eval::align_models(&run.result.model, &gt_poses).unwrap();
        let aligned = eval::apply_similarity(&run.result.model, &sim);
        let pred: Vec<Point3<f64>> = aligned.points.values().copied().collect();
        let truth: Vec<Point3<f64>> = gt.points.values().copied().collect();
        eval::accuracy_completeness(&pred, &truth, &[0.02]).unwrap()[0].accuracy
    };
    let acc_ext = accuracy(&extension);
    let acc_quant = accuracy(&quantized);
    assert!(n_ext > 200, "degenerate comparison: only {n_ext} extension points");
    assert!(acc_ext > 0.0, "degenerate comparison: zero extension accuracy");
    assert!(
        acc_ext >= acc_quant,
        "extension accuracy {acc_ext:.2}% below quantized {acc_quant:.2}%"
    );
    println!(
        "acceptance 6 (quantization vs extension): PASS, points {n_ext} vs {n_quant}, accuracy {acc_ext:.1}% vs {acc_quant:.1}%"
    );
}

// --- 7. Mutual verification exactness -------------------------------------------

#[test]
fn acceptance_7_mutual_verification_exactness() {
    let synth = SynthConfig { volume_half_extent: 1.6, ..dome(8, 40, 7) };
    let (gt, _) = generate_scene(&synth).unwrap();
    let params = MatcherParams { sigma: 0.0, outlier_rate: 0.2, footprint_radius: 3.0, seed: 99 };
    let mut pairs_checked = 0;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (a, b) in [(1u32, 2u32), (2, 4), (3, 6), (1, 5), (4, 7), (5, 6), (2, 3), (6, 8), (3, 8), (1, 8)] {
        let m = synth_dense_matcher(&gt, a, b, &params).unwrap();
        let samples = nms_sample(&m.forward, 4, 0.0);
        let kept = mutual_verify(&m.forward, &m.backward, &samples, 3.0).unwrap();
        let is_outlier = |px: &Pixel| {
            m.outlier_mask[(px.y as u32 * m.forward.width + px.x as u32) as usize]
        };
        let kept_set: Vec<_> = kept.matches.iter().map(|s| (s.a.x as u32, s.a.y as u32)).collect();
        for s in &samples.matches {
            let was_kept = kept_set.contains(&(s.a.x as u32, s.a.y as u32));
            match (is_outlier(&s.a), was_kept) {
                (false, true) => tp += 1,
                (false, false) => fn_ += 1,
                (true, true) => fp += 1,
                (true, false) => tn += 1,
            }
        }
        pairs_checked += 1;
    }
    // Both classes must occur for precision/recall to mean anything.
    assert!(tn + fp > 5, "too few injected outliers sampled");
    assert_eq!(fp, 0, "an injected outlier survived verification");
    assert_eq!(fn_, 0, "a clean correspondence was rejected");
    assert!(tp > 50);
    println!(
        "acceptance 7 (mutual verification exactness): PASS, precision = recall = 1.0 over {pairs_checked} pairs ({tp} clean matches)"
    );
}

// --- 8. Metric oracle equivalence -------------------------------------------------

#[test]
fn acceptance_8_metric_oracle_equivalence() {
    let mut rng = Rng::seeded(808, 8);

    // Accuracy/completeness vs the all-pairs oracle, exact.
    for _ in 0..20 {
        let cloud = |rng: &mut Rng, n: usize| -> Vec<Point3<f64>> {
            (0..n)
                .map(|_| {
                    Point3::new(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5))
                })
                .collect()
        };
        let pred = cloud(&mut rng, 150);
        let gt = cloud(&mut rng, 150);
        let thresholds = [0.02, 0.05, 0.1];
        let got = eval::accuracy_completeness(&pred, &gt, &thresholds).unwrap();
        for (g, &t) in got.iter().zip(&thresholds) {
            let acc = pred.iter().filter(|p| gt.iter().any(|q| (*q - **p).norm() <= t)).count()
                as f64
                / pred.len() as f64
                * 100.0;
            let comp = gt.iter().filter(|q| pred.iter().any(|p| (*p - **q).norm() <= t)).count()
                as f64
                / gt.len() as f64
                * 100.0;
            assert_eq!(g.accuracy.to_bits(), acc.to_bits());
            assert_eq!(g.completeness.to_bits(), comp.to_bits());
        }
    }
    // Identity clouds score 100%.
    let cloud: Vec<Point3<f64>> =
        (0..50).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
    for ac in eval::accuracy_completeness(&cloud, &cloud, &[0.01]).unwrap() {
        assert_eq!(ac.accuracy, 100.0);
        assert_eq!(ac.completeness, 100.0);
    }

    // Pose AUC vs a direct trapezoidal oracle within 1e-9, via randomized
    // pose perturbations of a generated scene.
    let scene = dome(10, 10, 3);
    let (model, _) = generate_scene(&scene).unwrap();
    let gt_poses: BTreeMap<ImageId, CameraPose> =
        model.cameras.iter().map(|(&id, c)| (id, c.pose)).collect();
    for case in 0..20 {
        let pred: BTreeMap<ImageId, CameraPose> = gt_poses
            .iter()
            .map(|(&id, p)| {
                let dq = UnitQuaternion::from_scaled_axis(rng.unit_vector() * rng.unit() * 0.05);
                (
                    id,
                    CameraPose::from_parts(
                        dq * p.rotation(),
                        p.translation * (1.0 + 0.03 * rng.normal()),
                    ),
                )
            })
            .collect();
        let thresholds = [1.0, 3.0, 5.0];
        let got = eval::pose_auc(&pred, &gt_poses, &thresholds).unwrap();
        let mut errors = eval::pose_errors_deg(&pred, &gt_poses).unwrap();
        errors.sort_by(f64::total_cmp);
        for (&t, &g) in thresholds.iter().zip(&got) {
            // Trapezoidal integration over the sorted error list.
            let n = errors.len();
            let mut e = vec![0.0];
            let mut r = vec![0.0];
            for (i, &x) in errors.iter().enumerate() {
                if x >= t {
                    break;
                }
                e.push(x);
                r.push((i + 1) as f64 / n as f64);
            }
            e.push(t);
            r.push(r[r.len() - 1]);
            let mut area = 0.0;
            for i in 1..e.len() {
                area += (e[i] - e[i - 1]) * (r[i] + r[i - 1]) / 2.0;
            }
            let want = 100.0 * area / t;
            assert!((g - want).abs() < 1e-9, "case {case}: auc {g} vs oracle {want}");
        }
    }
    // Identity poses give 100% at every threshold.
    for auc in eval::pose_auc(&gt_poses, &gt_poses, &[1.0, 3.0, 5.0]).unwrap() {
        assert!((auc - 100.0).abs() < 1e-9, "identity auc {auc}");
    }
    println!("acceptance 8 (metric oracle equivalence): PASS, 20 instances each, identity inputs at 100%");
}

// --- 9. Determinism ------------------------------------------------------------

#[test]
fn acceptance_9_determinism() {
    let synth = SynthConfig { match_sigma: 0.3, outlier_rate: 0.02, ..dome(6, 50, 7) };
    let mut cfg = PipelineConfig {
        refine: RefineConfig { patch_size: 9, ..Default::default() },
        iterations: 1,
        ..Default::default()
    };

    let render = |run: &PipelineResult, cfg: &PipelineConfig, gt: &SceneModel| {
        let dir = tempfile::tempdir().unwrap();
        densesfm::pipeline::write_outputs(dir.path(), run, Some(gt), cfg).unwrap();
        let mut all = Vec::new();
        for name in
            ["model/cameras.txt", "model/images.txt", "model/points3D.txt", "cloud.ply", "stats.txt", "metrics.txt"]
        {
            all.push((name, std::fs::read(dir.path().join(name)).unwrap()));
        }
        all
    };

    cfg.threads = Some(1);
    let run_a = run_synth(&synth, &cfg).unwrap();
    let files_a = render(&run_a.result, &cfg, &run_a.ground_truth);
    let run_b = run_synth(&synth, &cfg).unwrap();
    let files_b = render(&run_b.result, &cfg, &run_b.ground_truth);
    cfg.threads = Some(4);
    let run_c = run_synth(&synth, &cfg).unwrap();
    let files_c = render(&run_c.result, &cfg, &run_c.ground_truth);

    for ((name, a), ((_, b), (_, c))) in
        files_a.iter().zip(files_b.iter().zip(files_c.iter()))
    {
        assert_eq!(a, b, "{name} differs between identical runs");
        assert_eq!(a, c, "{name} differs between 1 and 4 threads");
    }
    println!("acceptance 9 (determinism): PASS, byte-identical outputs across runs and thread counts 1/4");
}
