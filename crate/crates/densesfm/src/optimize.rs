//! Robust geometric bundle adjustment and the iterated refine->adjust->filter
//! driver.
//!
//! Levenberg-Marquardt over camera poses, optionally intrinsics, and points,
//! minimizing a robust reprojection objective. Point blocks are eliminated
//! through a Schur complement; the reduced camera system is solved densely,
//! which is ample at desk scale. Gauge: the first camera is held fixed and,
//! when poses are variable, the largest translation component of the second
//! camera is frozen to pin the scale.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraPose, Pixel, MIN_DEPTH};
use crate::parallel;
use crate::refine::{refine_tracks, Decoder, FeatureProvider, RefineConfig};
use crate::tracks::{ImageId, PointId, SceneModel};

#[derive(Debug, Error)]
pub enum BaError {
    #[error("degenerate gauge: {cameras} camera(s) cannot pin a 7-DoF frame")]
    DegenerateGauge { cameras: usize },
}

/// Robust loss on the squared residual norm `s = |r|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    Quadratic,
    /// Quadratic up to `scale` pixels, linear beyond.
    Huber { scale: f64 },
    /// Logarithmic; influence decays with the residual.
    Cauchy { scale: f64 },
}

impl RobustLoss {
    pub fn evaluate(&self, s: f64) -> f64 {
        match *self {
            RobustLoss::Quadratic => s,
            RobustLoss::Huber { scale } => {
                let k2 = scale * scale;
                if s <= k2 {
                    s
                } else {
                    2.0 * scale * s.sqrt() - k2
                }
            }
            RobustLoss::Cauchy { scale } => {
                let k2 = scale * scale;
                k2 * (1.0 + s / k2).ln()
            }
        }
    }

    /// First derivative, the Gauss-Newton reweighting factor.
    pub fn weight(&self, s: f64) -> f64 {
        match *self {
            RobustLoss::Quadratic => 1.0,
            RobustLoss::Huber { scale } => {
                let k2 = scale * scale;
                if s <= k2 {
                    1.0
                } else {
                    scale / s.sqrt()
                }
            }
            RobustLoss::Cauchy { scale } => 1.0 / (1.0 + s / (scale * scale)),
        }
    }
}

/// Bundle adjustment configuration.
#[derive(Debug, Clone)]
pub struct BaConfig {
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step terminates.
    pub function_tolerance: f64,
    pub loss: RobustLoss,
    pub refine_poses: bool,
    pub refine_intrinsics: bool,
    pub refine_points: bool,
    /// Reprojection gate for [`filter_outliers`], in pixels.
    pub outlier_threshold: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            function_tolerance: 1e-12,
            loss: RobustLoss::Huber { scale: 1.0 },
            refine_poses: true,
            refine_intrinsics: false,
            refine_points: true,
            outlier_threshold: 3.0,
        }
    }
}

/// One accepted LM iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct BaIteration {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<BaIteration>,
    pub converged: bool,
}

/// Writes the report as line-delimited records for regression testing.
pub fn write_ba_report<W: Write>(report: &BaReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "initial_cost {}", report.initial_cost)?;
    for it in &report.iterations {
        writeln!(w, "iter {} cost {} lambda {} step_norm {}", it.iteration, it.cost, it.lambda, it.step_norm)?;
    }
    writeln!(w, "final_cost {} converged {}", report.final_cost, report.converged)
}

/// Cost of an observation that currently projects behind its camera: large
/// and constant, so trial steps that push geometry behind cameras lose.
const BEHIND_PENALTY: f64 = 1e12;

/// Indexed, mutable copy of the model for parameter updates.
struct Workspace {
    cam_ids: Vec<ImageId>,
    point_ids: Vec<PointId>,
    poses: Vec<CameraPose>,
    intrinsics: Vec<CameraIntrinsics>,
    points: Vec<Vector3<f64>>,
    /// (camera index, point index, observed pixel), in model order.
    observations: Vec<(usize, usize, Pixel)>,
    /// Per camera: flat parameter offset and active column map.
    cam_offset: Vec<usize>,
    cam_columns: Vec<Vec<usize>>,
    total_cam_dof: usize,
    refine_points: bool,
}

/// Canonical per-camera Jacobian columns: 0..3 rotation, 3..6 translation,
/// 6..10 intrinsics (fx, fy, cx, cy).
pub const COL_ROT: usize = 0;
pub const COL_TRANS: usize = 3;
pub const COL_INTR: usize = 6;

impl Workspace {
    fn build(model: &SceneModel, cfg: &BaConfig) -> Result<Self, BaError> {
        let cam_ids: Vec<ImageId> = model.cameras.keys().copied().collect();
        if cfg.refine_poses && cam_ids.len() < 2 {
            return Err(BaError::DegenerateGauge { cameras: cam_ids.len() });
        }
        let point_ids: Vec<PointId> = model.points.keys().copied().collect();
        let point_index: BTreeMap<PointId, usize> =
            point_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();

        let poses: Vec<CameraPose> = cam_ids.iter().map(|id| model.cameras[id].pose).collect();
        let intrinsics: Vec<CameraIntrinsics> =
            cam_ids.iter().map(|id| model.cameras[id].intrinsics).collect();
        let points: Vec<Vector3<f64>> = point_ids.iter().map(|id| model.points[id].coords).collect();

        let mut observations = Vec::new();
        for (&pid, track) in &model.tracks {
            let pi = point_index[&pid];
            for obs in &track.observations {
                let ci = cam_ids.binary_search(&obs.image).expect("validated model");
                observations.push((ci, pi, obs.pixel));
            }
        }

        // Active parameter columns per camera, honoring the gauge.
        let mut cam_columns: Vec<Vec<usize>> = Vec::with_capacity(cam_ids.len());
        for (ci, pose) in poses.iter().enumerate() {
            let mut cols = Vec::new();
            if cfg.refine_poses && ci > 0 {
                cols.extend(COL_ROT..COL_ROT + 3);
                if ci == 1 {
                    // Freeze the largest translation component of the second
                    // camera to anchor the scene scale.
                    let t = pose.translation;
                    let frozen = [t.x.abs(), t.y.abs(), t.z.abs()]
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .expect("three components");
                    cols.extend((0..3).filter(|&a| a != frozen).map(|a| COL_TRANS + a));
                } else {
                    cols.extend(COL_TRANS..COL_TRANS + 3);
                }
            }
            if cfg.refine_intrinsics {
                cols.extend(COL_INTR..COL_INTR + 4);
            }
            cam_columns.push(cols);
        }
        let mut cam_offset = Vec::with_capacity(cam_ids.len());
        let mut total = 0;
        for cols in &cam_columns {
            cam_offset.push(total);
            total += cols.len();
        }

        Ok(Self {
            cam_ids,
            point_ids,
            poses,
            intrinsics,
            points,
            observations,
            cam_offset,
            cam_columns,
            total_cam_dof: total,
            refine_points: cfg.refine_points,
        })
    }

    /// Robust total cost of a candidate parameter set.
    fn cost(
        &self,
        poses: &[CameraPose],
        intrinsics: &[CameraIntrinsics],
        points: &[Vector3<f64>],
        loss: &RobustLoss,
    ) -> f64 {
        let per_obs = parallel::map_ordered(&self.observations, |&(ci, pi, obs)| {
            let pc = poses[ci].rotation() * points[pi] + poses[ci].translation;
            if pc.z <= MIN_DEPTH {
                return BEHIND_PENALTY;
            }
            let k = &intrinsics[ci];
            let u = k.fx * pc.x / pc.z + k.cx - obs.x;
            let v = k.fy * pc.y / pc.z + k.cy - obs.y;
            loss.evaluate(u * u + v * v)
        });
        per_obs.iter().sum()
    }

    fn apply_model(&self, model: &SceneModel) -> SceneModel {
        let mut out = model.clone();
        for (i, id) in self.cam_ids.iter().enumerate() {
            let cam = out.cameras.get_mut(id).expect("camera ids are stable");
            cam.pose = self.poses[i];
            cam.intrinsics = self.intrinsics[i];
        }
        for (i, id) in self.point_ids.iter().enumerate() {
            *out.points.get_mut(id).expect("point ids are stable") =
                nalgebra::Point3::from(self.points[i]);
        }
        out
    }
}

/// Residual and Jacobian blocks of one observation under the local
/// parameterization (left rotation increment, additive translation, additive
/// intrinsics, additive point). Camera columns follow [`COL_ROT`],
/// [`COL_TRANS`], [`COL_INTR`]. `None` when the point sits behind the camera.
#[allow(clippy::type_complexity)]
pub fn linearize_observation(
    pose: &CameraPose,
    k: &CameraIntrinsics,
    point: &Vector3<f64>,
    obs: &Pixel,
) -> Option<(Vector2<f64>, [[f64; 10]; 2], Matrix2x3<f64>)> {
    let r = pose.rotation_matrix();
    let pc = r * point + pose.translation;
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let inv_z = 1.0 / pc.z;
    let residual = Vector2::new(
        k.fx * pc.x * inv_z + k.cx - obs.x,
        k.fy * pc.y * inv_z + k.cy - obs.y,
    );
    // d(pixel)/d(camera point)
    let dpix = Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * pc.x * inv_z * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * pc.y * inv_z * inv_z,
    );
    // d(camera point)/d(rotation increment) = -[R p]_x
    let rp = pc - pose.translation;
    let drot = Matrix3::new(0.0, rp.z, -rp.y, -rp.z, 0.0, rp.x, rp.y, -rp.x, 0.0);
    let jrot = dpix * drot;
    let mut cam = [[0.0; 10]; 2];
    for row in 0..2 {
        for col in 0..3 {
            cam[row][COL_ROT + col] = jrot[(row, col)];
            cam[row][COL_TRANS + col] = dpix[(row, col)];
        }
        // Intrinsics: u = fx x/z + cx, v = fy y/z + cy.
        cam[row][COL_INTR] = if row == 0 { pc.x * inv_z } else { 0.0 };
        cam[row][COL_INTR + 1] = if row == 1 { pc.y * inv_z } else { 0.0 };
        cam[row][COL_INTR + 2] = if row == 0 { 1.0 } else { 0.0 };
        cam[row][COL_INTR + 3] = if row == 1 { 1.0 } else { 0.0 };
    }
    let jpoint = dpix * r;
    Some((residual, cam, jpoint))
}

/// Levenberg-Marquardt minimization of the robust reprojection objective.
/// Returns the adjusted model and a per-iteration report; non-convergence is
/// reported through `converged`, with the best iterate kept.
pub fn bundle_adjust(model: &SceneModel, cfg: &BaConfig) -> Result<(SceneModel, BaReport), BaError> {
    let mut ws = Workspace::build(model, cfg)?;
    let n_points = ws.points.len();
    let cam_dof = ws.total_cam_dof;

    let initial_cost = ws.cost(&ws.poses, &ws.intrinsics, &ws.points, &cfg.loss);
    let mut cost = initial_cost;
    let mut report = BaReport {
        initial_cost,
        final_cost: initial_cost,
        iterations: Vec::new(),
        converged: false,
    };
    if ws.observations.is_empty() || (cam_dof == 0 && !ws.refine_points) {
        report.converged = true;
        return Ok((ws.apply_model(model), report));
    }

    let mut lambda = 1e-4;
    'outer: for iteration in 0..cfg.max_iterations {
        // Linearize at the current parameters.
        let blocks = parallel::map_ordered(&ws.observations, |&(ci, pi, obs)| {
            linearize_observation(&ws.poses[ci], &ws.intrinsics[ci], &ws.points[pi], &obs)
                .map(|lin| (ci, pi, lin))
        });

        let mut b = DMatrix::<f64>::zeros(cam_dof, cam_dof);
        let mut g_c = DVector::<f64>::zeros(cam_dof);
        let mut c_blocks = vec![Matrix3::<f64>::zeros(); n_points];
        let mut g_p = vec![Vector3::<f64>::zeros(); n_points];
        let mut e_blocks: Vec<Vec<(usize, DMatrix<f64>)>> = vec![Vec::new(); n_points];

        for item in blocks.iter().flatten() {
            let (ci, pi, (residual, cam, jpoint)) = item;
            let s = residual.norm_squared();
            let w = cfg.loss.weight(s);
            let cols = &ws.cam_columns[*ci];
            let offset = ws.cam_offset[*ci];
            // Camera-camera block and gradient.
            for (a, &ca) in cols.iter().enumerate() {
                let ja = Vector2::new(cam[0][ca], cam[1][ca]);
                g_c[offset + a] += w * ja.dot(residual);
                for (bi, &cb) in cols.iter().enumerate() {
                    let jb = Vector2::new(cam[0][cb], cam[1][cb]);
                    b[(offset + a, offset + bi)] += w * ja.dot(&jb);
                }
            }
            if ws.refine_points {
                c_blocks[*pi] += w * jpoint.transpose() * jpoint;
                g_p[*pi] += w * jpoint.transpose() * residual;
                if !cols.is_empty() {
                    let mut e = DMatrix::<f64>::zeros(cols.len(), 3);
                    for (a, &ca) in cols.iter().enumerate() {
                        let ja = Vector2::new(cam[0][ca], cam[1][ca]);
                        let je = w * ja.transpose() * jpoint;
                        for col in 0..3 {
                            e[(a, col)] = je[(0, col)];
                        }
                    }
                    e_blocks[*pi].push((*ci, e));
                }
            }
        }

        // Inner damping loop.
        loop {
            // Damped point blocks and their inverses.
            let mut c_inv = vec![Matrix3::<f64>::zeros(); n_points];
            let mut point_solvable = vec![false; n_points];
            if ws.refine_points {
                for pi in 0..n_points {
                    let mut c = c_blocks[pi];
                    for d in 0..3 {
                        c[(d, d)] += lambda * c_blocks[pi][(d, d)].max(1e-12);
                    }
                    if let Some(inv) = c.try_inverse() {
                        c_inv[pi] = inv;
                        point_solvable[pi] = true;
                    }
                }
            }

            // Reduced camera system.
            let mut s_mat = b.clone();
            for d in 0..cam_dof {
                s_mat[(d, d)] += lambda * b[(d, d)].max(1e-12);
            }
            let mut rhs = -&g_c;
            if ws.refine_points {
                for pi in 0..n_points {
                    if !point_solvable[pi] {
                        continue;
                    }
                    let ci_gp = c_inv[pi] * g_p[pi];
                    for (ca, ea) in &e_blocks[pi] {
                        let oa = ws.cam_offset[*ca];
                        // rhs += E C^-1 g_p
                        let contrib = ea * ci_gp;
                        for a in 0..ea.nrows() {
                            rhs[oa + a] += contrib[a];
                        }
                        for (cb, eb) in &e_blocks[pi] {
                            let ob = ws.cam_offset[*cb];
                            let block = ea * c_inv[pi] * eb.transpose();
                            for a in 0..ea.nrows() {
                                for bb in 0..eb.nrows() {
                                    s_mat[(oa + a, ob + bb)] -= block[(a, bb)];
                                }
                            }
                        }
                    }
                }
            }

            let delta_c = if cam_dof > 0 {
                match s_mat.clone().cholesky() {
                    Some(chol) => chol.solve(&rhs),
                    None => {
                        lambda *= 10.0;
                        if lambda > 1e12 {
                            break 'outer;
                        }
                        continue;
                    }
                }
            } else {
                DVector::zeros(0)
            };

            // Back-substitute the points.
            let mut delta_p = vec![Vector3::<f64>::zeros(); n_points];
            if ws.refine_points {
                for pi in 0..n_points {
                    if !point_solvable[pi] {
                        continue;
                    }
                    let mut et_dc = Vector3::<f64>::zeros();
                    for (ca, ea) in &e_blocks[pi] {
                        let oa = ws.cam_offset[*ca];
                        for a in 0..ea.nrows() {
                            for col in 0..3 {
                                et_dc[col] += ea[(a, col)] * delta_c[oa + a];
                            }
                        }
                    }
                    delta_p[pi] = c_inv[pi] * (-g_p[pi] - et_dc);
                }
            }

            // Trial parameters.
            let mut poses = ws.poses.clone();
            let mut intrinsics = ws.intrinsics.clone();
            for (ci, cols) in ws.cam_columns.iter().enumerate() {
                if cols.is_empty() {
                    continue;
                }
                let offset = ws.cam_offset[ci];
                let mut rot = Vector3::zeros();
                let mut trans = Vector3::zeros();
                let mut intr = [0.0f64; 4];
                for (a, &col) in cols.iter().enumerate() {
                    let v = delta_c[offset + a];
                    match col {
                        c if c < COL_TRANS => rot[c - COL_ROT] = v,
                        c if c < COL_INTR => trans[c - COL_TRANS] = v,
                        c => intr[c - COL_INTR] = v,
                    }
                }
                poses[ci] = poses[ci].perturbed(&rot, &trans);
                let k = &mut intrinsics[ci];
                k.fx += intr[0];
                k.fy += intr[1];
                k.cx += intr[2];
                k.cy += intr[3];
            }
            let points: Vec<Vector3<f64>> =
                ws.points.iter().zip(&delta_p).map(|(p, d)| p + d).collect();

            let trial = ws.cost(&poses, &intrinsics, &points, &cfg.loss);
            if trial < cost {
                let step_norm = (delta_c.norm_squared()
                    + delta_p.iter().map(|d| d.norm_squared()).sum::<f64>())
                .sqrt();
                let decrease = (cost - trial) / cost.max(1e-300);
                ws.poses = poses;
                ws.intrinsics = intrinsics;
                ws.points = points;
                cost = trial;
                report.iterations.push(BaIteration { iteration, cost, lambda, step_norm });
                lambda = (lambda / 3.0).max(1e-12);
                if decrease < cfg.function_tolerance {
                    report.converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break 'outer;
            }
        }
    }

    // An exhausted iteration budget with steps still shrinking counts as
    // converged enough for reporting; lambda overflow does not.
    if !report.converged && report.iterations.len() == cfg.max_iterations {
        report.converged = true;
    }
    report.final_cost = cost;
    debug_assert!(report.final_cost <= report.initial_cost);
    Ok((ws.apply_model(model), report))
}

/// Removes observations whose reprojection error exceeds `eps_f` (behind-
/// camera observations count as outliers); tracks left with fewer than two
/// observations are removed together with their points.
pub fn filter_outliers(model: &SceneModel, eps_f: f64) -> SceneModel {
    let mut out = model.clone();
    let mut dead: Vec<PointId> = Vec::new();
    for (&pid, track) in out.tracks.iter_mut() {
        let point = &out.points[&pid];
        track.observations.retain(|obs| {
            let cam = &model.cameras[&obs.image];
            match crate::geometry::reprojection_error(point, &cam.pose, &cam.intrinsics, &obs.pixel)
            {
                Ok(e) => e <= eps_f,
                Err(_) => false,
            }
        });
        if track.observations.len() < 2 {
            dead.push(pid);
        }
    }
    for pid in dead {
        out.remove_point(pid);
    }
    out
}

/// Statistics captured after each refine->adjust->filter pass.
#[derive(Debug, Clone)]
pub struct LoopIteration {
    pub iteration: usize,
    pub mean_reprojection_error: f64,
    pub tracks: usize,
    pub observations: usize,
    pub ba: BaReport,
}

/// Runs `iterations` passes of [refine_tracks -> bundle_adjust ->
/// filter_outliers]; zero iterations returns the input unchanged.
pub fn refine_loop(
    model: &SceneModel,
    provider: &dyn FeatureProvider,
    decoder: &dyn Decoder,
    iterations: usize,
    refine_cfg: &RefineConfig,
    ba_cfg: &BaConfig,
) -> Result<(SceneModel, Vec<LoopIteration>), BaError> {
    let mut current = model.clone();
    let mut stats = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let (refined, outcome) = refine_tracks(&current, provider, decoder, refine_cfg);
        if !outcome.skipped.is_empty() {
            log::info!(
                "refinement pass {iteration}: {} refined, {} skipped",
                outcome.refined_tracks,
                outcome.skipped.len()
            );
        }
        let (adjusted, ba) = bundle_adjust(&refined, ba_cfg)?;
        let filtered = filter_outliers(&adjusted, ba_cfg.outlier_threshold);
        let observations = filtered.tracks.values().map(|t| t.len()).sum();
        stats.push(LoopIteration {
            iteration,
            mean_reprojection_error: filtered.mean_reprojection_error().unwrap_or(0.0),
            tracks: filtered.tracks.len(),
            observations,
            ba,
        });
        current = filtered;
    }
    Ok((current, stats))
}
