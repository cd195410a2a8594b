//! Trajectory error, Sim(3)-aligned relative pose error, PSNR/SSIM and the
//! motion-regime and rotation-bucket labels used to slice evaluations.

use image::RgbImage;
use nalgebra::{Matrix4, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{self, Extrinsics, GeometryError, Point2, Point3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0} is undefined: no co-visible frames")]
    NoCovisibleFrames(&'static str),
    #[error("inputs differ in {0}")]
    Mismatch(String),
    #[error("need at least {needed} poses for stride {stride}, got {got}")]
    TooShort { needed: usize, stride: usize, got: usize },
    #[error("frames must be strictly increasing")]
    Unordered,
    #[error("image is smaller than the {0}x{0} SSIM window")]
    ImageTooSmall(usize),
    #[error(transparent)]
    Alignment(#[from] GeometryError),
}

/// Mean Euclidean distance over frames where both tracks are present.
pub fn trajectory_error(tracked: &[Option<Point2>], target: &[Option<Point2>]) -> Result<f64, MetricError> {
    if tracked.len() != target.len() {
        return Err(MetricError::Mismatch(format!("track length ({} vs {})", tracked.len(), target.len())));
    }
    let (sum, n) = tracked
        .iter()
        .zip(target)
        .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + (a - b).norm(), n + 1));
    if n == 0 {
        return Err(MetricError::NoCovisibleFrames("trajectory error"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    GroundTruth,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrajectory {
    source: PoseSource,
    poses: Vec<(usize, Extrinsics)>,
}

impl PoseTrajectory {
    pub fn new(source: PoseSource, poses: Vec<(usize, Extrinsics)>) -> Result<Self, MetricError> {
        if poses.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(MetricError::Unordered);
        }
        Ok(Self { source, poses })
    }

    /// Poses indexed `0..n`.
    pub fn from_sequence(source: PoseSource, poses: impl IntoIterator<Item = Extrinsics>) -> Self {
        Self { source, poses: poses.into_iter().enumerate().collect() }
    }

    pub fn source(&self) -> PoseSource {
        self.source
    }

    pub fn poses(&self) -> &[(usize, Extrinsics)] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpeReport {
    /// Mean geodesic angle of the relative-rotation error, radians.
    pub rot: f64,
    /// Mean norm of the relative-translation error, world units.
    pub trans: f64,
    /// Mean Frobenius norm of the 4x4 relative-pose difference.
    pub cam: f64,
}

/// Camera-to-world 4x4 matrix.
fn pose_matrix(e: &Extrinsics) -> Matrix4<f64> {
    e.inverse().matrix()
}

/// Relative pose error after aligning estimated camera centers to ground
/// truth with a least-squares similarity.
pub fn rpe(est: &PoseTrajectory, gt: &PoseTrajectory, stride: usize) -> Result<RpeReport, MetricError> {
    if est.len() != gt.len() {
        return Err(MetricError::Mismatch(format!("trajectory length ({} vs {})", est.len(), gt.len())));
    }
    if est.poses.iter().zip(&gt.poses).any(|(a, b)| a.0 != b.0) {
        return Err(MetricError::Mismatch("frame indices".into()));
    }
    if stride == 0 || est.len() < stride + 1 {
        return Err(MetricError::TooShort { needed: stride.max(1) + 1, stride, got: est.len() });
    }
    let src: Vec<Point3> = est.poses.iter().map(|(_, e)| e.center()).collect();
    let dst: Vec<Point3> = gt.poses.iter().map(|(_, e)| e.center()).collect();
    let sim = geometry::umeyama_sim3(&src, &dst)?;
    rpe_with_alignment(est, gt, stride, &sim)
}

/// Relative pose error after applying a given alignment to the estimate.
/// Useful when centers are too degenerate for [`rpe`] to fit one.
pub fn rpe_with_alignment(est: &PoseTrajectory, gt: &PoseTrajectory, stride: usize, sim: &geometry::Sim3) -> Result<RpeReport, MetricError> {
    if est.len() != gt.len() {
        return Err(MetricError::Mismatch(format!("trajectory length ({} vs {})", est.len(), gt.len())));
    }
    if stride == 0 || est.len() < stride + 1 {
        return Err(MetricError::TooShort { needed: stride.max(1) + 1, stride, got: est.len() });
    }
    let aligned: Vec<Matrix4<f64>> = est.poses.iter().map(|(_, e)| pose_matrix(&sim.transform_camera(e))).collect();
    let truth: Vec<Matrix4<f64>> = gt.poses.iter().map(|(_, e)| pose_matrix(e)).collect();

    let steps = est.len() - stride;
    let (mut rot, mut trans, mut cam) = (0.0, 0.0, 0.0);
    for i in 0..steps {
        let d_est = rigid_inverse(&aligned[i]) * aligned[i + stride];
        let d_gt = rigid_inverse(&truth[i]) * truth[i + stride];
        let r_err = d_est.fixed_view::<3, 3>(0, 0) * d_gt.fixed_view::<3, 3>(0, 0).transpose();
        rot += geometry::rotation_angle(&r_err.into_owned());
        trans += (d_est.fixed_view::<3, 1>(0, 3) - d_gt.fixed_view::<3, 1>(0, 3)).norm();
        cam += (d_est - d_gt).norm();
    }
    let n = steps as f64;
    Ok(RpeReport { rot: rot / n, trans: trans / n, cam: cam / n })
}

fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r = m.fixed_view::<3, 3>(0, 0).transpose();
    let t = -(r * m.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    out
}

/// Synthetic pose-estimation error applied to ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationModel {
    /// Per-pose Gaussian rotation noise (radians, per axis).
    pub rot_noise: f64,
    /// Per-pose Gaussian center noise (world units, per axis).
    pub trans_noise: f64,
    /// Center drift added per frame along world x.
    pub drift_per_frame: f64,
    /// Global similarity applied afterwards (scale, yaw in radians, offset).
    pub global_scale: f64,
    pub global_yaw: f64,
    pub global_offset: [f64; 3],
}

impl Default for PerturbationModel {
    fn default() -> Self {
        Self { rot_noise: 0.0, trans_noise: 0.0, drift_per_frame: 0.0, global_scale: 1.0, global_yaw: 0.0, global_offset: [0.0; 3] }
    }
}

pub fn perturb_poses(gt: &PoseTrajectory, model: &PerturbationModel, seed: u64) -> Result<PoseTrajectory, MetricError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot_n = Normal::new(0.0, model.rot_noise.max(0.0)).map_err(|e| MetricError::Mismatch(e.to_string()))?;
    let trans_n = Normal::new(0.0, model.trans_noise.max(0.0)).map_err(|e| MetricError::Mismatch(e.to_string()))?;
    let global = geometry::Sim3::new(
        model.global_scale,
        Rotation3::from_axis_angle(&Vector3::y_axis(), model.global_yaw).into_inner(),
        Vector3::from(model.global_offset),
    )?;
    let poses = gt
        .poses
        .iter()
        .enumerate()
        .map(|(i, (f, e))| {
            let mut noise = [0.0; 6];
            for v in &mut noise[..3] {
                *v = rot_n.sample(&mut rng);
            }
            for v in &mut noise[3..] {
                *v = trans_n.sample(&mut rng);
            }
            let r_wc = Rotation3::from_matrix_unchecked(e.rotation().transpose())
                * Rotation3::new(Vector3::new(noise[0], noise[1], noise[2]));
            let center = e.center()
                + Vector3::new(noise[3], noise[4], noise[5])
                + Vector3::new(model.drift_per_frame * i as f64, 0.0, 0.0);
            (*f, global.transform_camera(&Extrinsics::from_camera(&r_wc, &center)))
        })
        .collect();
    PoseTrajectory::new(PoseSource::Estimated, poses)
}

/// PSNR over 8-bit RGB with peak 255; `f64::INFINITY` for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let n = a.as_raw().len() as f64;
    let mse = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<(), MetricError> {
    if a.dimensions() != b.dimensions() {
        return Err(MetricError::Mismatch(format!("image size ({:?} vs {:?})", a.dimensions(), b.dimensions())));
    }
    Ok(())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall(SSIM_WINDOW));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.pixels().map(|p| f64::from(p[ch])).collect();
        let y: Vec<f64> = b.pixels().map(|p| f64::from(p[ch])).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// `(psnr, ssim)`; identical images give `(inf, 1.0)` exactly.
pub fn psnr_ssim(a: &RgbImage, b: &RgbImage) -> Result<(f64, f64), MetricError> {
    let p = psnr(a, b)?;
    if p.is_infinite() {
        return Ok((p, 1.0));
    }
    Ok((p, ssim(a, b)?))
}

pub const CAMERA_MOTION_THRESHOLD: f64 = 0.5;
pub const OBJECT_MOTION_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "static-cam/static-obj")]
    StaticCamStaticObj,
    #[serde(rename = "static-cam/moving-obj")]
    StaticCamMovingObj,
    #[serde(rename = "moving-cam/static-obj")]
    MovingCamStaticObj,
    #[serde(rename = "moving-cam/moving-obj")]
    MovingCamMovingObj,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::StaticCamStaticObj,
        Regime::StaticCamMovingObj,
        Regime::MovingCamStaticObj,
        Regime::MovingCamMovingObj,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Regime::StaticCamStaticObj => "static-cam/static-obj",
            Regime::StaticCamMovingObj => "static-cam/moving-obj",
            Regime::MovingCamStaticObj => "moving-cam/static-obj",
            Regime::MovingCamMovingObj => "moving-cam/moving-obj",
        }
    }
}

/// Camera moving iff translation > 0.5 world units; object moving iff its
/// displacement > 10% of the frame diagonal.
pub fn regime_classify(camera_translation: f64, object_displacement: f64) -> Regime {
    match (camera_translation > CAMERA_MOTION_THRESHOLD, object_displacement > OBJECT_MOTION_THRESHOLD) {
        (false, false) => Regime::StaticCamStaticObj,
        (false, true) => Regime::StaticCamMovingObj,
        (true, false) => Regime::MovingCamStaticObj,
        (true, true) => Regime::MovingCamMovingObj,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationBucket {
    Small,
    Mid,
    Large,
}

impl RotationBucket {
    pub const ALL: [RotationBucket; 3] = [RotationBucket::Small, RotationBucket::Mid, RotationBucket::Large];

    pub fn label(&self) -> &'static str {
        match self {
            RotationBucket::Small => "small",
            RotationBucket::Mid => "mid",
            RotationBucket::Large => "large",
        }
    }
}

/// `< 15°` small, `[15°, 45°)` mid, `≥ 45°` large.
pub fn rotation_bucket(degrees: f64) -> RotationBucket {
    if degrees < 15.0 {
        RotationBucket::Small
    } else if degrees < 45.0 {
        RotationBucket::Mid
    } else {
        RotationBucket::Large
    }
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn deserialize_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid psnr value {t:?}"))),
    }
}

/// Per-clip evaluation row. PSNR is `"inf"` in JSON for identical frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_id: String,
    pub te: f64,
    pub rpe_rot: f64,
    pub rpe_trans: f64,
    pub rpe_cam: f64,
    #[serde(serialize_with = "serialize_psnr", deserialize_with = "deserialize_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub regime: Regime,
    pub rot_bucket: RotationBucket,
    pub frames: usize,
    pub covisible_frames: usize,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 9] = ["clip_id", "te", "rpe_rot", "rpe_trans", "rpe_cam", "psnr", "ssim", "regime", "rot_bucket"];

    pub fn csv_record(&self) -> [String; 9] {
        let psnr = if self.psnr.is_infinite() { "inf".to_string() } else { self.psnr.to_string() };
        [
            self.clip_id.clone(),
            self.te.to_string(),
            self.rpe_rot.to_string(),
            self.rpe_trans.to_string(),
            self.rpe_cam.to_string(),
            psnr,
            self.ssim.to_string(),
            self.regime.label().to_string(),
            self.rot_bucket.label().to_string(),
        ]
    }
}
