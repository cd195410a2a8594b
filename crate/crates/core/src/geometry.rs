//! Pinhole projection, SE(3)/Sim(3) pose math and camera-script files.
//!
//! Conventions: right-handed frames, +z forward in the camera frame, extrinsics
//! map world points into the camera frame (`X_cam = R * X_world + t`). Pixel
//! `(i, j)` covers the half-open square `[i, i+1) x [j, j+1)`. Depth is the
//! camera-frame z coordinate, not the ray length.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not in SO(3): orthonormality error {orthonormality:.3e}, det {det:.6}")]
    NotRotation { orthonormality: f64, det: f64 },
    #[error("last row of pose matrix must be [0 0 0 1]")]
    NotRigid,
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("point sets differ in length: {src} vs {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("degenerate alignment: {0}")]
    Degenerate(String),
    #[error("camera script: {0}")]
    Script(String),
}

/// Pinhole intrinsics plus the frame size they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr", into = "IntrinsicsRepr")]
pub struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsRepr> for Intrinsics {
    type Error = GeometryError;
    fn try_from(r: IntrinsicsRepr) -> Result<Self, Self::Error> {
        Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<Intrinsics> for IntrinsicsRepr {
    fn from(k: Intrinsics) -> Self {
        IntrinsicsRepr { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!("focal lengths must be positive (fx={fx}, fy={fy})")));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics("frame size must be non-zero".into()));
        }
        if !(0.0..f64::from(width)).contains(&cx) || !(0.0..f64::from(height)).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} frame"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Builds intrinsics from a row-major 3x3 matrix `[fx s cx; 0 fy cy; 0 0 1]`.
    /// Skew must be zero.
    pub fn from_row_major(k: &[f64; 9], width: u32, height: u32) -> Result<Self, GeometryError> {
        let tol = 1e-12;
        if k[1].abs() > tol || k[3].abs() > tol || k[6].abs() > tol || k[7].abs() > tol || (k[8] - 1.0).abs() > tol {
            return Err(GeometryError::InvalidIntrinsics("K must have the form [fx 0 cx; 0 fy cy; 0 0 1]".into()));
        }
        Self::new(k[0], k[4], k[2], k[5], width, height)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.to_row_major())
    }

    /// True if the pixel lies inside `[0, width) x [0, height)`.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < f64::from(self.width) && p.y < f64::from(self.height)
    }

    /// Frame diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        f64::from(self.width).hypot(f64::from(self.height))
    }

    /// Pixel to normalized image-plane coordinates.
    pub fn normalize(&self, p: &Point2) -> Vector2<f64> {
        Vector2::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy)
    }

    /// Normalized image-plane coordinates to pixel.
    pub fn denormalize(&self, q: &Vector2<f64>) -> Point2 {
        Point2::new(self.fx * q.x + self.cx, self.fy * q.y + self.cy)
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 16]", into = "[f64; 16]")]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl TryFrom<[f64; 16]> for Extrinsics {
    type Error = GeometryError;
    fn try_from(m: [f64; 16]) -> Result<Self, Self::Error> {
        Extrinsics::from_row_major(&m)
    }
}

impl From<Extrinsics> for [f64; 16] {
    fn from(e: Extrinsics) -> Self {
        e.to_row_major()
    }
}

fn rotation_defect(r: &Matrix3<f64>) -> (f64, f64) {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    (ortho, r.determinant())
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("extrinsics"));
        }
        let (ortho, det) = rotation_defect(&rotation);
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotRotation { orthonormality: ortho, det });
        }
        Ok(Self { rotation, translation })
    }

    /// Constructs from parts already known to be a rotation (products and
    /// inverses of valid poses).
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Camera placed at `center` with camera-to-world orientation `orientation`.
    pub fn from_camera(orientation: &Rotation3<f64>, center: &Point3) -> Self {
        let r_cw = orientation.inverse().into_inner();
        Self { rotation: r_cw, translation: -(r_cw * center.coords) }
    }

    /// Camera at `eye` looking at `target`, image y-axis roughly along `down`.
    pub fn look_at(eye: &Point3, target: &Point3, down: &Vector3<f64>) -> Result<Self, GeometryError> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| GeometryError::Degenerate("eye equals target".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::Degenerate("down vector parallel to viewing direction".into()))?;
        let y = z.cross(&x);
        let r_wc = Matrix3::from_columns(&[x, y, z]);
        let rot = Rotation3::from_matrix_unchecked(r_wc);
        Ok(Self::from_camera(&rot, eye))
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self, GeometryError> {
        let tol = 1e-9;
        if m[12].abs() > tol || m[13].abs() > tol || m[14].abs() > tol || (m[15] - 1.0).abs() > tol {
            return Err(GeometryError::NotRigid);
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.to_row_major())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Extrinsics) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Optical axis (+z of the camera) expressed in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Geodesic angle between the two camera orientations, radians.
    pub fn rotation_angle_to(&self, other: &Extrinsics) -> f64 {
        rotation_angle(&(self.rotation * other.rotation.transpose()))
    }
}

/// Geodesic angle of a rotation matrix, radians in `[0, pi]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near 0; use the skew part there.
    let s = 0.5
        * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(c)
}

/// Intrinsics and world-to-camera extrinsics for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Point2,
    /// Camera-frame z. Non-positive means the point is behind the camera and
    /// `pixel` is the mirrored (meaningless) image position.
    pub depth: f64,
}

impl Projection {
    pub fn behind_camera(&self) -> bool {
        self.depth <= 0.0
    }

    /// In front of the camera and inside the frame.
    pub fn visible(&self, k: &Intrinsics) -> bool {
        !self.behind_camera() && self.pixel.x.is_finite() && self.pixel.y.is_finite() && k.contains(&self.pixel)
    }
}

/// Projects a camera-frame point.
pub fn project_camera(k: &Intrinsics, pc: &Point3) -> Projection {
    Projection {
        pixel: Point2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        depth: pc.z,
    }
}

/// Perspective projection of a world point.
pub fn project(k: &Intrinsics, e: &Extrinsics, p_world: &Point3) -> Projection {
    project_camera(k, &e.transform_point(p_world))
}

/// Point on the `z = depth` plane of the reference camera along normalized ray `q`.
pub fn lift(q: &Vector2<f64>, depth: f64) -> Result<Point3, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Point3::new(depth * q.x, depth * q.y, depth))
}

/// Inverse of [`project`] at camera-frame depth `depth`.
pub fn back_project(k: &Intrinsics, e: &Extrinsics, p: &Point2, depth: f64) -> Result<Point3, GeometryError> {
    let pc = lift(&k.normalize(p), depth)?;
    Ok(e.inverse().transform_point(&pc))
}

/// `E_t ∘ E_0⁻¹`: maps camera-0 coordinates into camera-t coordinates.
pub fn relative_pose(e_t: &Extrinsics, e_0: &Extrinsics) -> Extrinsics {
    e_t.compose(&e_0.inverse())
}

/// Similarity transform `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Sim3 {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        let e = Extrinsics::new(rotation, translation)?;
        Ok(Self { scale, rotation: e.rotation, translation: e.translation })
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    /// Re-expresses a camera pose after applying this similarity to the world:
    /// the camera center moves with the points, orientation rotates with them.
    pub fn transform_camera(&self, e: &Extrinsics) -> Extrinsics {
        let r_cw = e.rotation * self.rotation.transpose();
        let c = self.apply(&e.center());
        Extrinsics::from_parts(r_cw, -(r_cw * c.coords))
    }
}

/// Least-squares similarity `dst ≈ s R src + t` (Umeyama, with reflection
/// correction).
pub fn umeyama_sim3(src: &[Point3], dst: &[Point3]) -> Result<Sim3, GeometryError> {
    umeyama(src, dst, true)
}

/// Least-squares rigid alignment (`s` fixed to 1).
pub fn umeyama_rigid(src: &[Point3], dst: &[Point3]) -> Result<Sim3, GeometryError> {
    umeyama(src, dst, false)
}

fn centered(points: &[Point3]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    (mean, points.iter().map(|p| p.coords - mean).collect())
}

fn check_spread(points: &[Vector3<f64>], which: &str) -> Result<(), GeometryError> {
    let cov = points.iter().fold(Matrix3::zeros(), |acc, v| acc + v * v.transpose());
    let sv = cov.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= f64::EPSILON || s[1] <= 1e-12 * s[0] {
        return Err(GeometryError::Degenerate(format!("{which} points are collinear or coincident")));
    }
    Ok(())
}

fn umeyama(src: &[Point3], dst: &[Point3], with_scale: bool) -> Result<Sim3, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch { src: src.len(), dst: dst.len() });
    }
    if src.len() < 3 {
        return Err(GeometryError::Degenerate(format!("need at least 3 point pairs, got {}", src.len())));
    }
    if src.iter().chain(dst).any(|p| !p.coords.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::NonFinite("alignment points"));
    }
    let n = src.len() as f64;
    let (mu_s, xs) = centered(src);
    let (mu_d, ys) = centered(dst);
    check_spread(&xs, "source")?;
    check_spread(&ys, "target")?;

    let var_s = xs.iter().map(|v| v.norm_squared()).sum::<f64>() / n;
    let cov = xs.iter().zip(&ys).fold(Matrix3::zeros(), |acc, (x, y)| acc + y * x.transpose()) / n;

    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or_else(|| GeometryError::Degenerate("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| GeometryError::Degenerate("svd failed".into()))?;
    let mut sign = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        // nalgebra orders singular values descending; flip the smallest.
        sign[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&sign) * v_t;
    let scale = if with_scale {
        svd.singular_values.component_mul(&sign).sum() / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(GeometryError::Degenerate("non-positive alignment scale".into()));
    }
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(Sim3 { scale, rotation, translation })
}

/// Similarity of two viewpoints in `[0, 1]`:
/// `max(0, cos θ) · exp(-|c_a - c_b| / sigma_c)` with θ the angle between the
/// optical axes and `c` the camera centers.
///
/// Panics if `sigma_c` is not positive.
pub fn fov_similarity(a: &Extrinsics, b: &Extrinsics, sigma_c: f64) -> f64 {
    assert!(sigma_c > 0.0, "sigma_c must be positive");
    let fa = a.forward();
    let fb = b.forward();
    // sqrt(x*x) == x exactly, so identical axes give cos = 1 without rounding.
    let cos = (fa.dot(&fb) / (fa.dot(&fa) * fb.dot(&fb)).sqrt()).clamp(-1.0, 1.0);
    let dist = (a.center() - b.center()).norm();
    (cos.max(0.0) * (-dist / sigma_c).exp()).min(1.0)
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    frame: usize,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "E")]
    e: [f64; 16],
}

/// Per-frame camera poses, indexed by frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraScript {
    poses: Vec<CameraPose>,
}

impl CameraScript {
    pub fn new(poses: Vec<CameraPose>) -> Result<Self, GeometryError> {
        if poses.is_empty() {
            return Err(GeometryError::Script("empty camera script".into()));
        }
        Ok(Self { poses })
    }

    /// Parses the JSON array `[{frame, K: [9], E: [16]}, ...]`. Frames must be
    /// exactly `0..n` (any order).
    pub fn from_json(text: &str, width: u32, height: u32) -> Result<Self, GeometryError> {
        let mut records: Vec<CameraRecord> =
            serde_json::from_str(text).map_err(|e| GeometryError::Script(e.to_string()))?;
        records.sort_by_key(|r| r.frame);
        let mut poses = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.frame != i {
                return Err(GeometryError::Script(format!("frames must be contiguous from 0; expected {i}, found {}", r.frame)));
            }
            let intrinsics = Intrinsics::from_row_major(&r.k, width, height)
                .map_err(|e| GeometryError::Script(format!("frame {i}: {e}")))?;
            let extrinsics =
                Extrinsics::from_row_major(&r.e).map_err(|e| GeometryError::Script(format!("frame {i}: {e}")))?;
            poses.push(CameraPose { intrinsics, extrinsics });
        }
        Self::new(poses)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<CameraRecord> = self
            .poses
            .iter()
            .enumerate()
            .map(|(frame, p)| CameraRecord { frame, k: p.intrinsics.to_row_major(), e: p.extrinsics.to_row_major() })
            .collect();
        serde_json::to_string_pretty(&records).expect("camera records serialize")
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&CameraPose> {
        self.poses.get(t)
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    /// Largest rotation away from the first frame over the script, degrees.
    pub fn max_rotation_deg(&self) -> f64 {
        let first = self.poses[0].extrinsics;
        self.poses
            .iter()
            .map(|p| p.extrinsics.rotation_angle_to(&first).to_degrees())
            .fold(0.0, f64::max)
    }

    /// Distance between the first and last camera centers.
    pub fn net_translation(&self) -> f64 {
        let a = self.poses[0].extrinsics.center();
        let b = self.poses[self.poses.len() - 1].extrinsics.center();
        (b - a).norm()
    }

    /// Replaces poses from `from` onward with those of `other`.
    pub fn splice_from(&mut self, from: usize, other: &CameraScript) -> Result<(), GeometryError> {
        if other.len() < from {
            return Err(GeometryError::Script(format!("replacement script has {} frames, needs at least {from}", other.len())));
        }
        self.poses.truncate(from);
        self.poses.extend_from_slice(&other.poses[from..]);
        Ok(())
    }
}
