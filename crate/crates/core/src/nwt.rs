//! Camera-invariant trajectory representation.
//!
//! A sketched screen path is lifted onto a plane in the coordinate frame of an
//! anchor camera. Every later frame re-projects the lifted points through the
//! relative pose, so camera motion is compensated analytically and the path
//! stays defined while the object is off-screen.

use std::fs;
use std::io;
use std::path::Path;

use image::RgbImage;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, CameraPose, Extrinsics, Intrinsics, Point2, Point3};
use crate::raster::DepthMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NwtError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("click ({x:.1}, {y:.1}) is outside the frame")]
    ClickOutside { x: f64, y: f64 },
    #[error("no valid depth at pixel ({x}, {y}) (value {value}); pick a nearby pixel that lies on an object")]
    InvalidDepth { x: u32, y: u32, value: f64 },
    #[error("feature map is empty")]
    EmptyFeatures,
    #[error("track {track} has no visible source position")]
    MissingSource { track: String },
    #[error("{0} and {1} differ in length")]
    LengthMismatch(&'static str, &'static str),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
}

/// A screen-space sketch: the selection click plus timed waypoints. Frames
/// between waypoints are linearly interpolated; the last waypoint is held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UserTrajectoryRepr", into = "UserTrajectoryRepr")]
pub struct UserTrajectory {
    pub track_id: String,
    pub click: Point2,
    pub points: Vec<(usize, Point2)>,
}

#[derive(Serialize, Deserialize)]
struct UserTrajectoryRepr {
    track_id: String,
    click: [f64; 2],
    points: Vec<[f64; 3]>,
}

impl TryFrom<UserTrajectoryRepr> for UserTrajectory {
    type Error = NwtError;
    fn try_from(r: UserTrajectoryRepr) -> Result<Self, NwtError> {
        let mut points = Vec::with_capacity(r.points.len());
        for [t, x, y] in r.points {
            if t < 0.0 || t.fract() != 0.0 || !t.is_finite() {
                return Err(NwtError::InvalidTrajectory(format!("frame index {t} is not a non-negative integer")));
            }
            points.push((t as usize, Point2::new(x, y)));
        }
        Ok(UserTrajectory { track_id: r.track_id, click: Point2::new(r.click[0], r.click[1]), points })
    }
}

impl From<UserTrajectory> for UserTrajectoryRepr {
    fn from(u: UserTrajectory) -> Self {
        UserTrajectoryRepr {
            track_id: u.track_id,
            click: [u.click.x, u.click.y],
            points: u.points.iter().map(|(t, p)| [*t as f64, p.x, p.y]).collect(),
        }
    }
}

impl UserTrajectory {
    /// Sketch starting at the click, with waypoints given as `(frame, pixel)`.
    pub fn new(track_id: impl Into<String>, click: Point2, points: Vec<(usize, Point2)>) -> Self {
        Self { track_id: track_id.into(), click, points }
    }

    pub fn from_json(text: &str) -> Result<Self, NwtError> {
        serde_json::from_str(text).map_err(|e| NwtError::InvalidTrajectory(e.to_string()))
    }

    pub fn start_frame(&self) -> usize {
        self.points.first().map_or(0, |p| p.0)
    }

    pub fn end_frame(&self) -> usize {
        self.points.last().map_or(0, |p| p.0)
    }

    pub fn validate(&self, k: &Intrinsics) -> Result<(), NwtError> {
        if self.points.is_empty() {
            return Err(NwtError::InvalidTrajectory(format!("track {} has no points", self.track_id)));
        }
        if !k.contains(&self.click) {
            return Err(NwtError::ClickOutside { x: self.click.x, y: self.click.y });
        }
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(NwtError::InvalidTrajectory(format!(
                    "track {}: frame indices must be strictly increasing ({} then {})",
                    self.track_id, w[0].0, w[1].0
                )));
            }
        }
        for (t, p) in &self.points {
            if !k.contains(p) {
                return Err(NwtError::InvalidTrajectory(format!(
                    "track {}: point ({:.2}, {:.2}) at frame {t} is outside the frame",
                    self.track_id, p.x, p.y
                )));
            }
        }
        Ok(())
    }

    /// Sketch position at frame `t` (clamped to the first/last waypoint).
    pub fn pixel_at(&self, t: usize) -> Point2 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((t0, p0), (t1, p1)) = (w[0], w[1]);
            if t <= t1 {
                if t == t1 {
                    return p1;
                }
                let a = (t - t0) as f64 / (t1 - t0) as f64;
                return p0 + (p1 - p0) * a;
            }
        }
        pts[pts.len() - 1].1
    }
}

/// Waypoints mapped to normalized image-plane coordinates of `k0`.
pub fn normalize_trajectory(traj: &UserTrajectory, k0: &Intrinsics) -> Vec<(usize, Vector2<f64>)> {
    traj.points.iter().map(|(t, p)| (*t, k0.normalize(p))).collect()
}

/// Depth at the pixel cell containing `click`.
pub fn anchor_depth(depth: &DepthMap, click: &Point2) -> Result<f64, NwtError> {
    let (x, y) = depth.cell_of(click).ok_or(NwtError::ClickOutside { x: click.x, y: click.y })?;
    let value = depth.get(x, y);
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(NwtError::InvalidDepth { x, y, value })
    }
}

/// Sketch lifted onto a plane in the anchor camera's frame.
///
/// The plane is `n · X = depth` with `n` the unit `plane_normal`, both in anchor
/// camera coordinates. A fresh trajectory uses `n = (0, 0, 1)`, i.e. the
/// fronto-parallel plane at the click depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTrajectory {
    pub track_id: String,
    q: Vec<(usize, Vector2<f64>)>,
    depth: f64,
    plane_normal: Vector3<f64>,
    anchor_frame: usize,
    anchor_pose: Extrinsics,
}

/// One re-projected trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchoredPosition {
    pub t: usize,
    pub pixel: Point2,
    pub depth: f64,
    pub visible: bool,
}

impl AnchoredPosition {
    fn from_projection(t: usize, k: &Intrinsics, p: geometry::Projection) -> Self {
        Self { t, pixel: p.pixel, depth: p.depth, visible: p.visible(k) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredTrack {
    pub track_id: String,
    pub positions: Vec<AnchoredPosition>,
}

impl AnchoredTrack {
    pub fn at(&self, t: usize) -> Option<&AnchoredPosition> {
        self.positions.iter().find(|p| p.t == t)
    }
}

impl WorldTrajectory {
    pub fn new(
        track_id: impl Into<String>,
        q: Vec<(usize, Vector2<f64>)>,
        depth: f64,
        anchor_frame: usize,
        anchor_pose: Extrinsics,
    ) -> Result<Self, NwtError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(NwtError::InvalidTrajectory(format!("anchor depth must be positive, got {depth}")));
        }
        if q.is_empty() {
            return Err(NwtError::InvalidTrajectory("empty normalized trajectory".into()));
        }
        if q.iter().any(|(_, v)| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(NwtError::InvalidTrajectory("non-finite normalized coordinate".into()));
        }
        if q.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(NwtError::InvalidTrajectory("frame indices must be strictly increasing".into()));
        }
        Ok(Self { track_id: track_id.into(), q, depth, plane_normal: Vector3::z(), anchor_frame, anchor_pose })
    }

    /// Lifts a validated sketch with the camera and depth of its first frame.
    /// The path is densified to one sample per frame between the first and
    /// last waypoint.
    pub fn from_user(traj: &UserTrajectory, camera: &CameraPose, depth: f64) -> Result<Self, NwtError> {
        traj.validate(&camera.intrinsics)?;
        let q = (traj.start_frame()..=traj.end_frame())
            .map(|t| (t, camera.intrinsics.normalize(&traj.pixel_at(t))))
            .collect();
        Self::new(traj.track_id.clone(), q, depth, traj.start_frame(), camera.extrinsics)
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    pub fn plane_normal(&self) -> &Vector3<f64> {
        &self.plane_normal
    }

    pub fn anchor_frame(&self) -> usize {
        self.anchor_frame
    }

    pub fn anchor_pose(&self) -> &Extrinsics {
        &self.anchor_pose
    }

    pub fn samples(&self) -> &[(usize, Vector2<f64>)] {
        &self.q
    }

    pub fn start_frame(&self) -> usize {
        self.q[0].0
    }

    pub fn end_frame(&self) -> usize {
        self.q[self.q.len() - 1].0
    }

    /// Normalized coordinate at frame `t`, held outside the sampled range and
    /// linearly interpolated between samples.
    pub fn q_at(&self, t: usize) -> Vector2<f64> {
        let idx = self.q.partition_point(|(s, _)| *s <= t);
        if idx == 0 {
            return self.q[0].1;
        }
        let (t0, q0) = self.q[idx - 1];
        if t0 == t || idx == self.q.len() {
            return q0;
        }
        let (t1, q1) = self.q[idx];
        q0 + (q1 - q0) * ((t - t0) as f64 / (t1 - t0) as f64)
    }

    fn lift_q(&self, q: &Vector2<f64>) -> Point3 {
        let ray = Vector3::new(q.x, q.y, 1.0);
        let denom = self.plane_normal.dot(&ray);
        if denom.abs() < 1e-12 {
            return Point3::from(ray * self.depth);
        }
        Point3::from(ray * (self.depth / denom))
    }

    /// Lifted point at frame `t` in anchor-camera coordinates.
    pub fn anchor_point(&self, t: usize) -> Point3 {
        self.lift_q(&self.q_at(t))
    }

    /// Lifted point at frame `t` in world coordinates.
    pub fn world_point(&self, t: usize) -> Point3 {
        self.anchor_pose.inverse().transform_point(&self.anchor_point(t))
    }

    /// Anchored pixel at frame `t` for camera `(k, e)`.
    pub fn reproject(&self, t: usize, k: &Intrinsics, e: &Extrinsics) -> AnchoredPosition {
        let rel = geometry::relative_pose(e, &self.anchor_pose);
        let pc = rel.transform_point(&self.anchor_point(t));
        AnchoredPosition::from_projection(t, k, geometry::project_camera(k, &pc))
    }

    /// Anchored track over `frames`, with `cameras[t]` the pose of frame `t`.
    pub fn reproject_track(&self, cameras: &[CameraPose], frames: std::ops::Range<usize>) -> AnchoredTrack {
        AnchoredTrack {
            track_id: self.track_id.clone(),
            positions: frames
                .map(|t| self.reproject(t, &cameras[t].intrinsics, &cameras[t].extrinsics))
                .collect(),
        }
    }
}

/// Why a refinement kept the previous anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaleReason {
    /// Anchored pixel is behind the camera or outside the frame.
    Offscreen,
    /// Depth map has no positive value at the anchored pixel.
    NoDepth,
    /// Predicted or measured plane offset is not positive.
    DegeneratePlane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub trajectory: WorldTrajectory,
    pub stale: Option<StaleReason>,
}

/// Re-anchors `wt` at `frame` using that frame's depth map.
///
/// The plane offset is blended as `beta * measured + (1 - beta) * predicted`,
/// where the prediction carries the old plane into the new camera. Samples are
/// re-expressed along their rays in the new camera, so the anchored pixel at
/// `frame` is unchanged by the refresh.
pub fn refine_anchor(
    wt: &WorldTrajectory,
    depth: &DepthMap,
    camera: &CameraPose,
    frame: usize,
    beta: f64,
) -> Refinement {
    let stale = |reason| Refinement { trajectory: wt.clone(), stale: Some(reason) };
    let k = &camera.intrinsics;
    let rel = geometry::relative_pose(&camera.extrinsics, &wt.anchor_pose);
    let current = rel.transform_point(&wt.anchor_point(frame));
    let proj = geometry::project_camera(k, &current);
    if !proj.visible(k) {
        return stale(StaleReason::Offscreen);
    }
    let Some((cx, cy)) = depth.cell_of(&proj.pixel) else {
        return stale(StaleReason::Offscreen);
    };
    let z = depth.get(cx, cy);
    if !(z > 0.0) || !z.is_finite() {
        return stale(StaleReason::NoDepth);
    }
    // The depth buffer holds the z of the ray through the cell center.
    let center = Point2::new(f64::from(cx) + 0.5, f64::from(cy) + 0.5);
    let qc = k.normalize(&center);
    let measured_point = Vector3::new(qc.x, qc.y, 1.0) * z;

    let normal = rel.transform_vector(&wt.plane_normal);
    let predicted = wt.depth + normal.dot(rel.translation());
    let measured = normal.dot(&measured_point);
    if !(predicted > 0.0) || !(measured > 0.0) {
        return stale(StaleReason::DegeneratePlane);
    }
    let new_depth = beta * measured + (1.0 - beta) * predicted;

    let mut q = Vec::with_capacity(wt.q.len());
    for (t, qt) in &wt.q {
        let x = rel.transform_point(&wt.lift_q(qt));
        if x.z.abs() < 1e-12 {
            return stale(StaleReason::DegeneratePlane);
        }
        q.push((*t, Vector2::new(x.x / x.z, x.y / x.z)));
    }
    Refinement {
        trajectory: WorldTrajectory {
            track_id: wt.track_id.clone(),
            q,
            depth: new_depth,
            plane_normal: normal,
            anchor_frame: frame,
            anchor_pose: camera.extrinsics,
        },
        stale: None,
    }
}

/// Screen observation of a world-space path through a camera sequence.
pub fn screen_observe(path: &[Point3], cameras: &[CameraPose]) -> Result<Vec<AnchoredPosition>, NwtError> {
    if path.len() != cameras.len() {
        return Err(NwtError::LengthMismatch("path", "camera list"));
    }
    Ok(path
        .iter()
        .zip(cameras)
        .enumerate()
        .map(|(t, (p, cam))| {
            AnchoredPosition::from_projection(t, &cam.intrinsics, geometry::project(&cam.intrinsics, &cam.extrinsics, p))
        })
        .collect())
}

/// Dense `F x H x W` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, NwtError> {
        if channels == 0 || height == 0 || width == 0 || data.is_empty() {
            return Err(NwtError::EmptyFeatures);
        }
        if data.len() != channels * height * width {
            return Err(NwtError::LengthMismatch("feature data", "F*H*W"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// Deterministic stand-in for encoder latents: each cell's mean color
    /// modulated by a fixed per-channel cosine basis, plus a small offset so
    /// that no cell vector is all zeros.
    pub fn from_image(img: &RgbImage, channels: usize, cell_size: u32) -> Result<Self, NwtError> {
        let (gh, gw) = ((img.height() / cell_size) as usize, (img.width() / cell_size) as usize);
        if channels == 0 || gh == 0 || gw == 0 {
            return Err(NwtError::EmptyFeatures);
        }
        let mut data = vec![0f32; channels * gh * gw];
        for h in 0..gh {
            for w in 0..gw {
                let mut mean = [0f64; 3];
                for y in 0..cell_size {
                    for x in 0..cell_size {
                        let p = img.get_pixel(w as u32 * cell_size + x, h as u32 * cell_size + y);
                        for c in 0..3 {
                            mean[c] += f64::from(p[c]);
                        }
                    }
                }
                let n = f64::from(cell_size * cell_size) * 255.0;
                for c in 0..channels {
                    let basis = (0.37 * (c / 3 + 1) as f64 * std::f64::consts::PI).cos();
                    data[(c * gh + h) * gw + w] = (mean[c % 3] / n * basis + 0.01 * (c + 1) as f64) as f32;
                }
            }
        }
        Self::new(channels, gh, gw, data)
    }
}

/// Sparse per-frame conditioning tensor of shape `F x T x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningGrid {
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    features: Vec<f32>,
    occupancy: Vec<Option<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridHeader {
    #[serde(rename = "F")]
    pub channels: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub layout: String,
}

impl ConditioningGrid {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.frames, self.height, self.width)
    }

    fn index(&self, c: usize, t: usize, h: usize, w: usize) -> usize {
        ((c * self.frames + t) * self.height + h) * self.width + w
    }

    pub fn get(&self, c: usize, t: usize, h: usize, w: usize) -> f32 {
        self.features[self.index(c, t, h, w)]
    }

    /// Index of the track that wrote cell `(t, h, w)`.
    pub fn occupant(&self, t: usize, h: usize, w: usize) -> Option<u32> {
        self.occupancy[(t * self.height + h) * self.width + w]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn occupied_cells(&self) -> usize {
        self.occupancy.iter().filter(|o| o.is_some()).count()
    }

    /// Number of `(t, h, w)` cells whose feature vector has a non-zero entry.
    pub fn nonzero_cells(&self) -> usize {
        let mut n = 0;
        for t in 0..self.frames {
            for h in 0..self.height {
                for w in 0..self.width {
                    if (0..self.channels).any(|c| self.get(c, t, h, w) != 0.0) {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    /// Writes `<stem>.bin` (little-endian f32, F-major) and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> io::Result<()> {
        let header = GridHeader {
            channels: self.channels,
            frames: self.frames,
            height: self.height,
            width: self.width,
            layout: "F-major".into(),
        };
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        let bytes: Vec<u8> = self.features.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(stem.with_extension("bin"), bytes)
    }
}

fn grid_cell(p: &Point2, cell_size: u32, height: usize, width: usize) -> Option<(usize, usize)> {
    if !(p.x >= 0.0 && p.y >= 0.0) {
        return None;
    }
    let cs = f64::from(cell_size);
    let (h, w) = ((p.y / cs).floor(), (p.x / cs).floor());
    (h < height as f64 && w < width as f64).then_some((h as usize, w as usize))
}

/// Copies each track's source-cell feature (its first position, on the first
/// frame's features) into the cell it occupies at every frame `t < frames`.
/// Invisible positions are skipped; when two tracks share a cell the later
/// track in `tracks` wins.
pub fn build_conditioning(
    first_frame: &FeatureMap,
    tracks: &[AnchoredTrack],
    frames: usize,
    cell_size: u32,
) -> Result<ConditioningGrid, NwtError> {
    if first_frame.data.is_empty() {
        return Err(NwtError::EmptyFeatures);
    }
    let (fc, gh, gw) = (first_frame.channels, first_frame.height, first_frame.width);
    let mut grid = ConditioningGrid {
        channels: fc,
        frames,
        height: gh,
        width: gw,
        features: vec![0.0; fc * frames * gh * gw],
        occupancy: vec![None; frames * gh * gw],
    };
    for (idx, track) in tracks.iter().enumerate() {
        let source = track
            .positions
            .first()
            .filter(|p| p.visible)
            .and_then(|p| grid_cell(&p.pixel, cell_size, gh, gw))
            .ok_or_else(|| NwtError::MissingSource { track: track.track_id.clone() })?;
        for pos in &track.positions {
            if !pos.visible || pos.t >= frames {
                continue;
            }
            let Some((h, w)) = grid_cell(&pos.pixel, cell_size, gh, gw) else { continue };
            for c in 0..fc {
                let i = grid.index(c, pos.t, h, w);
                grid.features[i] = first_frame.get(c, source.0, source.1);
            }
            grid.occupancy[(pos.t * gh + h) * gw + w] = Some(idx as u32);
        }
    }
    Ok(grid)
}
