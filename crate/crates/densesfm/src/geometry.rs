//! Camera models, rigid transforms, projection, multi-view triangulation and
//! epipolar checks. All operations are pure functions on immutable inputs.

use nalgebra::{DMatrix, Matrix3, Point3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-12;

/// Errors from the geometric substrate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    /// The point projects behind the camera plane.
    #[error("point is behind the camera (depth {depth:e})")]
    BehindCamera { depth: f64 },
    /// The configuration admits no unique solution.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    /// Too few views have the point in front of them.
    #[error("cheirality failure: {positive} of {views} views have positive depth")]
    CheiralityFailure { positive: usize, views: usize },
    /// A rotation matrix failed the orthonormality check.
    #[error("matrix is not a rotation (orthonormality residual {residual:e})")]
    NotARotation { residual: f64 },
}

/// A 2D image location with sub-pixel precision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl Pixel {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal lengths in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Image size in pixels.
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0);
        debug_assert!(cx >= 0.0 && cx < width as f64);
        debug_assert!(cy >= 0.0 && cy < height as f64);
        Self { fx, fy, cx, cy, width, height }
    }

    /// True when `p` lies inside the valid pixel coordinate range
    /// `[0, width-1] x [0, height-1]`.
    pub fn contains(&self, p: &Pixel) -> bool {
        p.x >= 0.0 && p.x <= (self.width - 1) as f64 && p.y >= 0.0 && p.y <= (self.height - 1) as f64
    }

    /// Upper-triangular calibration matrix K.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Inverse calibration matrix, exploiting the triangular structure.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// A world-to-camera rigid transform: `x_cam = R * x_world + t`.
///
/// The rotation is stored as a unit quaternion so that poses survive a
/// text-serialization round trip bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a rotation matrix, rejecting matrices that are not
    /// orthonormal with determinant +1 within `1e-9`.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if residual > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation { residual: residual.max((det - 1.0).abs()) });
        }
        let q = UnitQuaternion::from_matrix(rotation);
        Ok(Self { rotation: q, translation })
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Transforms a world point into the camera frame.
    pub fn transform(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.inverse() * self.translation))
    }

    /// Camera-frame depth of a world point.
    pub fn depth(&self, p: &Point3<f64>) -> f64 {
        self.transform(p).z
    }

    /// Left-composes a rotation increment and adds a translation increment,
    /// the local parameterization used by bundle adjustment.
    pub fn perturbed(&self, axis_angle: &Vector3<f64>, delta_t: &Vector3<f64>) -> Self {
        let dq = UnitQuaternion::from_scaled_axis(*axis_angle);
        Self { rotation: dq * self.rotation, translation: self.translation + delta_t }
    }
}

/// Projects a world point through a pose and pinhole intrinsics.
pub fn project(point: &Point3<f64>, pose: &CameraPose, k: &CameraIntrinsics) -> Result<Pixel, GeometryError> {
    let pc = pose.transform(point);
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera { depth: pc.z });
    }
    Ok(Pixel::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

/// Triangulates a point from two or more observations with the homogeneous
/// DLT, solved by SVD on the stacked constraint matrix.
///
/// Pixel measurements are normalized through `K^-1` before stacking so the
/// system is well conditioned regardless of focal length. Cheirality must
/// hold in at least half of the views.
pub fn triangulate(
    observations: &[(CameraPose, CameraIntrinsics, Pixel)],
) -> Result<Point3<f64>, GeometryError> {
    let n = observations.len();
    if n < 2 {
        return Err(GeometryError::DegenerateGeometry("need at least two observations"));
    }
    let mut max_center_gap: f64 = 0.0;
    let first_center = observations[0].0.center();
    for (pose, _, _) in &observations[1..] {
        max_center_gap = max_center_gap.max((pose.center() - first_center).norm());
    }
    if max_center_gap < 1e-12 {
        return Err(GeometryError::DegenerateGeometry("coincident camera centers"));
    }

    let mut a = DMatrix::<f64>::zeros(2 * n, 4);
    for (i, (pose, k, px)) in observations.iter().enumerate() {
        let r = pose.rotation_matrix();
        let t = pose.translation;
        // Normalized image coordinates.
        let xh = (px.x - k.cx) / k.fx;
        let yh = (px.y - k.cy) / k.fy;
        // Rows of [R | t].
        for c in 0..4 {
            let p0 = if c < 3 { r[(0, c)] } else { t.x };
            let p1 = if c < 3 { r[(1, c)] } else { t.y };
            let p2 = if c < 3 { r[(2, c)] } else { t.z };
            a[(2 * i, c)] = xh * p2 - p0;
            a[(2 * i + 1, c)] = yh * p2 - p1;
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(GeometryError::DegenerateGeometry("svd failed"))?;
    let h = v_t.row(v_t.nrows() - 1);
    if h[3].abs() < 1e-14 * h.norm() {
        return Err(GeometryError::DegenerateGeometry("point at infinity"));
    }
    let point = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    let positive = observations.iter().filter(|(pose, _, _)| pose.depth(&point) > 0.0).count();
    if 2 * positive < n {
        return Err(GeometryError::CheiralityFailure { positive, views: n });
    }
    Ok(point)
}

/// Euclidean distance between the projection of `point` and `obs`.
pub fn reprojection_error(
    point: &Point3<f64>,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    obs: &Pixel,
) -> Result<f64, GeometryError> {
    Ok(project(point, pose, k)?.distance(obs))
}

/// Fundamental matrix mapping pixels of camera `a` to epipolar lines in
/// camera `b`, induced by the two calibrated cameras.
pub fn fundamental_matrix(
    pose_a: &CameraPose,
    k_a: &CameraIntrinsics,
    pose_b: &CameraPose,
    k_b: &CameraIntrinsics,
) -> Result<Matrix3<f64>, GeometryError> {
    let r_rel = pose_b.rotation_matrix() * pose_a.rotation_matrix().transpose();
    let t_rel = pose_b.translation - r_rel * pose_a.translation;
    if t_rel.norm() < 1e-12 {
        return Err(GeometryError::DegenerateGeometry("zero baseline"));
    }
    let essential = skew(&t_rel) * r_rel;
    Ok(k_b.inverse_matrix().transpose() * essential * k_a.inverse_matrix())
}

/// First-order (Sampson) epipolar distance in pixels between a correspondence
/// `(pa, pb)` under the fundamental matrix induced by the two cameras.
pub fn epipolar_distance(
    pa: &Pixel,
    pb: &Pixel,
    pose_a: &CameraPose,
    k_a: &CameraIntrinsics,
    pose_b: &CameraPose,
    k_b: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    let f = fundamental_matrix(pose_a, k_a, pose_b, k_b)?;
    let xa = Vector3::new(pa.x, pa.y, 1.0);
    let xb = Vector3::new(pb.x, pb.y, 1.0);
    let fx = f * xa;
    let ftx = f.transpose() * xb;
    let num = xb.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if den < 1e-300 {
        return Err(GeometryError::DegenerateGeometry("epipolar lines vanish"));
    }
    Ok(num.abs() / den.sqrt())
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
