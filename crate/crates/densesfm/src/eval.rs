//! Quantitative evaluation: triangulation accuracy/completeness against a
//! ground-truth cloud, multi-view pose-error AUC, and similarity alignment
//! of reconstructions to ground-truth poses.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

use crate::geometry::CameraPose;
use crate::parallel;
use crate::tracks::{ImageId, SceneModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("pose sets disagree: image {0} is missing from one side")]
    PoseMismatch(ImageId),
    #[error("alignment failed: {0}")]
    AlignmentFailure(&'static str),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
}

/// Accuracy and completeness at one distance threshold, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyCompleteness {
    pub threshold: f64,
    /// Percentage of predicted points within `threshold` of ground truth.
    pub accuracy: f64,
    /// Percentage of ground-truth points within `threshold` of a prediction.
    pub completeness: f64,
}

/// Exact nearest-neighbor distance from each query to `targets`, by grid
/// hashing at the cut-off cell size: any neighbor closer than `cutoff` is
/// found exactly; queries with nothing within `cutoff` report infinity,
/// which every threshold at or below `cutoff` classifies identically to the
/// exact answer.
fn nearest_distances(queries: &[Point3<f64>], targets: &[Point3<f64>], cutoff: f64) -> Vec<f64> {
    let cell = cutoff.max(1e-12);
    let key = |p: &Point3<f64>| {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, t) in targets.iter().enumerate() {
        grid.entry(key(t)).or_default().push(i);
    }
    parallel::map_ordered(queries, |q| {
        let (kx, ky, kz) = key(q);
        let mut best = f64::INFINITY;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in bucket {
                            best = best.min((targets[i] - q).norm());
                        }
                    }
                }
            }
        }
        if best <= cutoff {
            best
        } else {
            f64::INFINITY
        }
    })
}

/// Accuracy(t) and completeness(t) per threshold: the fractions of predicted
/// points near ground truth and of ground-truth points near predictions.
pub fn accuracy_completeness(
    pred: &[Point3<f64>],
    gt: &[Point3<f64>],
    thresholds: &[f64],
) -> Result<Vec<AccuracyCompleteness>, EvalError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let cutoff = thresholds.iter().copied().fold(0.0f64, f64::max);
    let pred_to_gt = nearest_distances(pred, gt, cutoff);
    let gt_to_pred = nearest_distances(gt, pred, cutoff);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let acc = pred_to_gt.iter().filter(|&&d| d <= t).count() as f64 / pred.len() as f64;
            let comp = gt_to_pred.iter().filter(|&&d| d <= t).count() as f64 / gt.len() as f64;
            AccuracyCompleteness { threshold: t, accuracy: 100.0 * acc, completeness: 100.0 * comp }
        })
        .collect())
}

/// A similarity transform `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    /// Re-expresses a world-to-camera pose in the transformed frame; camera
    /// centers map through the similarity, rotations compose rigidly.
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        let r_new = pose.rotation_matrix() * self.rotation.transpose();
        let t_new = self.scale * pose.translation - r_new * self.translation;
        CameraPose::from_matrix(&r_new, t_new).expect("orthonormal by construction")
    }
}

/// Least-squares similarity (Umeyama) mapping `src` onto `dst`. Requires at
/// least three non-collinear correspondences.
pub fn umeyama_alignment(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
) -> Result<SimilarityTransform, EvalError> {
    let n = src.len();
    if n != dst.len() || n < 3 {
        return Err(EvalError::DegenerateConfiguration("need at least three correspondences"));
    }
    let mean_src = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n as f64;
    let mean_dst = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n as f64;

    let mut sigma = Matrix3::<f64>::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s.coords - mean_src;
        let dc = d.coords - mean_dst;
        sigma += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    sigma /= n as f64;
    var_src /= n as f64;
    if var_src < 1e-18 {
        return Err(EvalError::DegenerateConfiguration("coincident source points"));
    }

    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or(EvalError::AlignmentFailure("svd failed"))?;
    let v_t = svd.v_t.ok_or(EvalError::AlignmentFailure("svd failed"))?;
    let d = svd.singular_values;
    // Collinear centers leave a rotation about the line unconstrained.
    if d[1] <= 1e-12 * d[0].max(1e-300) {
        return Err(EvalError::DegenerateConfiguration("collinear configuration"));
    }
    let mut s_fix = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_fix[(2, 2)] = -1.0;
    }
    let rotation = u * s_fix * v_t;
    let scale = (d[0] * s_fix[(0, 0)] + d[1] * s_fix[(1, 1)] + d[2] * s_fix[(2, 2)]) / var_src;
    let translation = mean_dst - scale * (rotation * mean_src);
    Ok(SimilarityTransform { scale, rotation, translation })
}

/// Similarity aligning the model's camera centers onto the ground-truth
/// poses' centers, least-squares.
pub fn align_models(
    pred: &SceneModel,
    gt_poses: &BTreeMap<ImageId, CameraPose>,
) -> Result<SimilarityTransform, EvalError> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (id, cam) in &pred.cameras {
        let gt = gt_poses.get(id).ok_or(EvalError::PoseMismatch(*id))?;
        src.push(cam.pose.center());
        dst.push(gt.center());
    }
    umeyama_alignment(&src, &dst)
}

/// Applies a similarity transform to every pose and point of a model.
pub fn apply_similarity(model: &SceneModel, sim: &SimilarityTransform) -> SceneModel {
    let mut out = model.clone();
    for cam in out.cameras.values_mut() {
        cam.pose = sim.apply_pose(&cam.pose);
    }
    for p in out.points.values_mut() {
        *p = sim.apply_point(p);
    }
    out
}

/// Per-pose error in degrees after similarity alignment: the maximum of the
/// rotation angle error and the angle between the camera translation vectors
/// (the position error expressed on the benchmark's angular scale).
pub fn pose_errors_deg(
    pred: &BTreeMap<ImageId, CameraPose>,
    gt: &BTreeMap<ImageId, CameraPose>,
) -> Result<Vec<f64>, EvalError> {
    if pred.len() != gt.len() || pred.keys().zip(gt.keys()).any(|(a, b)| a != b) {
        let missing = pred.keys().find(|id| !gt.contains_key(id)).or_else(|| {
            gt.keys().find(|id| !pred.contains_key(id))
        });
        return Err(EvalError::PoseMismatch(missing.copied().unwrap_or_default()));
    }
    // Align predicted centers to ground truth first.
    let src: Vec<Point3<f64>> = pred.values().map(|p| p.center()).collect();
    let dst: Vec<Point3<f64>> = gt.values().map(|p| p.center()).collect();
    let sim = umeyama_alignment(&src, &dst)?;

    let mut errors = Vec::with_capacity(pred.len());
    for (p, g) in pred.values().zip(gt.values()) {
        let aligned = sim.apply_pose(p);
        let rel = aligned.rotation_matrix() * g.rotation_matrix().transpose();
        // atan2 of the axis-vector norm against the trace keeps full
        // precision for near-zero angles, where acos would floor out.
        let vee = Vector3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        ) * 0.5;
        let rot_deg = vee.norm().atan2((rel.trace() - 1.0) / 2.0).to_degrees();
        let ta = aligned.translation;
        let tb = g.translation;
        let trans_deg = if ta.norm() < 1e-12 || tb.norm() < 1e-12 {
            if (ta.norm() - tb.norm()).abs() < 1e-12 {
                0.0
            } else {
                90.0
            }
        } else {
            ta.cross(&tb).norm().atan2(ta.dot(&tb)).to_degrees()
        };
        errors.push(rot_deg.max(trans_deg));
    }
    Ok(errors)
}

/// AUC of the pose-error recall curve at each threshold (degrees), as a
/// percentage: errors are sorted, recall steps by `1/n` per pose, and the
/// curve is integrated by trapezoids up to the threshold.
pub fn pose_auc(
    pred: &BTreeMap<ImageId, CameraPose>,
    gt: &BTreeMap<ImageId, CameraPose>,
    thresholds_deg: &[f64],
) -> Result<Vec<f64>, EvalError> {
    if pred.len() < 2 {
        return Err(EvalError::DegenerateConfiguration("need at least two poses"));
    }
    let mut errors = pose_errors_deg(pred, gt)?;
    errors.sort_by(f64::total_cmp);
    Ok(thresholds_deg.iter().map(|&t| auc_at(&errors, t)).collect())
}

/// Trapezoidal area under the step recall curve of sorted errors, up to `t`,
/// normalized by `t`.
fn auc_at(sorted_errors: &[f64], t: f64) -> f64 {
    let n = sorted_errors.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (i, &e) in sorted_errors.iter().enumerate() {
        if e >= t {
            break;
        }
        xs.push(e);
        ys.push((i + 1) as f64 / n);
    }
    xs.push(t);
    ys.push(*ys.last().expect("non-empty"));
    let mut area = 0.0;
    for i in 1..xs.len() {
        area += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2.0;
    }
    100.0 * area / t
}
