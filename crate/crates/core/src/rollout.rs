//! Chunked closed-loop rollout with a view-filtered frame memory.
//!
//! Each chunk re-projects every trajectory into the upcoming cameras, filters
//! the memory bank against off-screen events, generates the chunk with the
//! synthetic world, appends it to memory and finally re-anchors trajectory
//! depth on the chunk's last frame.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, CameraPose, CameraScript, Extrinsics, Point2, Point3};
use crate::nwt::{self, AnchoredPosition, AnchoredTrack, FeatureMap, NwtError, StaleReason, UserTrajectory, WorldTrajectory};
use crate::raster;
use crate::worldsim::{self, CommandTarget, MotionPlane, ObjectCommand, ObjectStates, RenderedFrame, SceneError, SyntheticScene};

/// Side of the square RGB digest stored per memory frame.
pub const SUMMARY_SIZE: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("camera script: {0}")]
    Script(String),
    #[error("no object within {radius} px of click ({x:.1}, {y:.1}){}", nearest_hint(.nearest))]
    NoObjectNearClick { x: f64, y: f64, radius: f64, nearest: Option<(u32, f64)> },
    #[error("object {object_id} is already driven by track {track_id}")]
    ObjectAlreadyCommanded { object_id: u32, track_id: String },
    #[error("track id {0} already exists")]
    DuplicateTrack(String),
    #[error("trajectory starts at frame {start} but only frames before {limit} can be used for selection")]
    TrajectoryStart { start: usize, limit: usize },
    #[error("click ray does not meet the selected object's plane")]
    ClickMissesPlane,
    #[error("rollout already reached its horizon of {0} frames")]
    Finished(usize),
    #[error("memory append out of order: frame {got} after {last}")]
    MemoryOrder { got: usize, last: usize },
    #[error("event for track {0} is still open")]
    OpenEvent(String),
    #[error("track {track} has no anchored position at frame {t}")]
    MissingPosition { track: String, t: usize },
    #[error("frame {0} has not been generated")]
    NoSuchFrame(usize),
    #[error(transparent)]
    Nwt(#[from] NwtError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn nearest_hint(n: &Option<(u32, f64)>) -> String {
    match n {
        Some((id, d)) => format!("; nearest is object {id} at {d:.1} px"),
        None => "; no object is visible".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    #[serde(rename = "BI")]
    Bidirectional,
    #[serde(rename = "AR")]
    Autoregressive,
}

/// How trajectories are turned into per-frame conditioning positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Lifted to the anchor plane and re-projected through each camera.
    World,
    /// Raw sketch pixels used verbatim in every frame.
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryParams {
    pub capacity: usize,
    /// Similarity threshold above which pre-exit frames are masked.
    pub tau: f64,
    /// Frames before an exit that form the pre-exit zone.
    pub k: usize,
    /// Length scale of the camera-center term in the view similarity.
    pub sigma_c: f64,
}

impl Default for MemoryParams {
    fn default() -> Self {
        Self { capacity: 64, tau: 0.9, k: 2, sigma_c: 1.0 }
    }
}

impl MemoryParams {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.capacity == 0 {
            return Err(RolloutError::Config("memory capacity must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(RolloutError::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.sigma_c > 0.0) {
            return Err(RolloutError::Config(format!("sigma_c must be positive, got {}", self.sigma_c)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub chunk_size: usize,
    pub horizon: usize,
    pub tasp_enabled: bool,
    pub refine_depth: bool,
    pub depth_noise_sigma: f64,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    pub memory: MemoryParams,
    /// Weight of the measured depth when re-anchoring.
    pub refine_beta: f64,
    /// Multiplier on the depth read at the click (1 = unbiased).
    pub initial_depth_bias: f64,
    pub representation: Representation,
    pub selection_radius: f64,
    pub feature_channels: usize,
    pub cell_size: u32,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            chunk_size: 16,
            horizon: 97,
            tasp_enabled: true,
            refine_depth: true,
            depth_noise_sigma: 0.0,
            seed: 0,
            attention_mode: AttentionMode::Autoregressive,
            memory: MemoryParams::default(),
            refine_beta: 0.7,
            initial_depth_bias: 1.0,
            representation: Representation::World,
            selection_radius: 12.0,
            feature_channels: 32,
            cell_size: 16,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.chunk_size == 0 {
            return Err(RolloutError::Config("chunk_size must be at least 1".into()));
        }
        if self.horizon < self.chunk_size {
            return Err(RolloutError::Config(format!(
                "horizon ({}) must be at least chunk_size ({})",
                self.horizon, self.chunk_size
            )));
        }
        if !(0.0..=1.0).contains(&self.refine_beta) {
            return Err(RolloutError::Config(format!("refine_beta must lie in [0, 1], got {}", self.refine_beta)));
        }
        if !(self.initial_depth_bias > 0.0) || !self.initial_depth_bias.is_finite() {
            return Err(RolloutError::Config("initial_depth_bias must be positive".into()));
        }
        if !(self.depth_noise_sigma >= 0.0) || !self.depth_noise_sigma.is_finite() {
            return Err(RolloutError::Config("depth_noise_sigma must be non-negative".into()));
        }
        if !(self.selection_radius > 0.0) {
            return Err(RolloutError::Config("selection_radius must be positive".into()));
        }
        if self.feature_channels == 0 || self.cell_size == 0 {
            return Err(RolloutError::Config("feature_channels and cell_size must be positive".into()));
        }
        self.memory.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryFrame {
    pub frame: usize,
    pub view: Extrinsics,
    /// Row-major RGB bytes of a `SUMMARY_SIZE`-square downsample.
    pub summary: Vec<u8>,
    pub retained: bool,
}

impl MemoryFrame {
    pub fn new(frame: usize, view: Extrinsics, summary: Vec<u8>) -> Self {
        Self { frame, view, summary, retained: true }
    }
}

/// Bounded FIFO of past frames with a per-chunk retrieval mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    params: MemoryParams,
    frames: VecDeque<MemoryFrame>,
}

impl MemoryBank {
    pub fn new(params: MemoryParams) -> Result<Self, RolloutError> {
        params.validate()?;
        Ok(Self { params, frames: VecDeque::new() })
    }

    pub fn params(&self) -> &MemoryParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &MemoryFrame> {
        self.frames.iter()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame).collect()
    }

    /// Appends frames in increasing order, evicting the oldest past capacity.
    /// Rejects the whole batch if any index does not follow the current tail.
    pub fn append(&mut self, frames: Vec<MemoryFrame>) -> Result<(), RolloutError> {
        let mut last = self.frames.back().map(|f| f.frame);
        for f in &frames {
            if let Some(l) = last {
                if f.frame <= l {
                    return Err(RolloutError::MemoryOrder { got: f.frame, last: l });
                }
            }
            last = Some(f.frame);
        }
        for mut f in frames {
            f.retained = true;
            self.frames.push_back(f);
            if self.frames.len() > self.params.capacity {
                self.frames.pop_front();
            }
        }
        Ok(())
    }

    pub fn reset_mask(&mut self) {
        for f in &mut self.frames {
            f.retained = true;
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.frames.iter().map(|f| f.retained).collect()
    }
}

/// Maximal off-screen interval of a track: invisible from `t0` until the
/// track becomes visible again at `t1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffscreenEvent {
    pub track_id: String,
    pub t0: usize,
    pub t1: Option<usize>,
}

impl OffscreenEvent {
    /// True if `frame` lies in the `k` frames before the exit.
    pub fn in_pre_exit_zone(&self, frame: usize, k: usize) -> bool {
        frame < self.t0 && frame + k >= self.t0
    }
}

pub fn detect_offscreen(track: &AnchoredTrack) -> Vec<OffscreenEvent> {
    let mut events = Vec::new();
    let mut open: Option<usize> = None;
    for p in &track.positions {
        match (p.visible, open) {
            (false, None) => open = Some(p.t),
            (true, Some(t0)) => {
                events.push(OffscreenEvent { track_id: track.track_id.clone(), t0, t1: Some(p.t) });
                open = None;
            }
            _ => {}
        }
    }
    if let Some(t0) = open {
        events.push(OffscreenEvent { track_id: track.track_id.clone(), t0, t1: None });
    }
    events
}

/// Outcome of one filtering pass, aligned with bank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub similarity: Vec<f64>,
    pub retained: Vec<bool>,
}

/// Masks memory frames that sit in some event's pre-exit zone and whose view
/// is more similar than `tau` to `v_cur`. Only clears retained flags.
pub fn tasp_filter(bank: &mut MemoryBank, v_cur: &Extrinsics, events: &[OffscreenEvent]) -> FilterResult {
    let MemoryParams { tau, k, sigma_c, .. } = bank.params;
    let mut similarity = Vec::with_capacity(bank.frames.len());
    for f in &mut bank.frames {
        let s = geometry::fov_similarity(&f.view, v_cur, sigma_c);
        if s > tau && events.iter().any(|e| e.in_pre_exit_zone(f.frame, k)) {
            f.retained = false;
        }
        similarity.push(s);
    }
    FilterResult { similarity, retained: bank.mask() }
}

/// Anchored position at the re-entry frame of a closed event.
pub fn reentry_position(track: &AnchoredTrack, event: &OffscreenEvent) -> Result<Point2, RolloutError> {
    let t1 = event.t1.ok_or_else(|| RolloutError::OpenEvent(event.track_id.clone()))?;
    track
        .at(t1)
        .map(|p| p.pixel)
        .ok_or_else(|| RolloutError::MissingPosition { track: track.track_id.clone(), t: t1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub user: UserTrajectory,
    pub object_id: u32,
    /// Object center minus the clicked surface point.
    pub body_offset: Vector3<f64>,
    /// Plane of the clicked surface point, facing the selection camera.
    pub plane: MotionPlane,
    /// Current anchor state driving the conditioning.
    pub world: WorldTrajectory,
    /// Lift of the sketch at the exact surface depth: where the user meant
    /// the object to go. Used as the evaluation target.
    pub intended: WorldTrajectory,
    pub click_depth: f64,
    /// Conditioning positions of every generated frame since the start.
    pub anchored: Vec<AnchoredPosition>,
}

impl TrackState {
    pub fn track_id(&self) -> &str {
        &self.user.track_id
    }

    pub fn start_frame(&self) -> usize {
        self.user.start_frame()
    }

    pub fn anchored_track(&self) -> AnchoredTrack {
        AnchoredTrack { track_id: self.user.track_id.clone(), positions: self.anchored.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub camera: CameraPose,
    pub states: ObjectStates,
    /// Screen position of each track's clicked point; `None` when off-screen
    /// or before the track starts.
    pub tracked: BTreeMap<String, Option<Point2>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntryLog {
    pub frame: usize,
    pub similarity: f64,
    pub pre_exit: bool,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaleOverride {
    pub track_id: String,
    pub frame: usize,
    /// Memory frame whose object position was rendered instead.
    pub source_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLog {
    pub track_id: String,
    pub frame: usize,
    pub depth_before: f64,
    pub depth_after: f64,
    pub stale: Option<StaleReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkLog {
    pub chunk: usize,
    pub start: usize,
    pub end: usize,
    pub tasp_enabled: bool,
    pub memory: Vec<MemoryEntryLog>,
    pub excluded: Vec<usize>,
    pub events: Vec<OffscreenEvent>,
    pub conditioning_cells: usize,
    pub anchored: BTreeMap<String, Vec<AnchoredPosition>>,
    pub stale_overrides: Vec<StaleOverride>,
    pub refinements: Vec<RefinementLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub t: usize,
    pub pixel: Option<Point2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub track_id: String,
    pub object_id: u32,
    pub click_depth: f64,
    pub final_depth: f64,
    pub anchored: AnchoredTrack,
    pub target: AnchoredTrack,
    pub tracked: Vec<TrackSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub config: RolloutConfig,
    pub scene: SyntheticScene,
    pub frames: Vec<FrameRecord>,
    pub tracks: Vec<TrackResult>,
    pub memory_log: Vec<ChunkLog>,
    pub events: Vec<OffscreenEvent>,
}

impl RolloutResult {
    pub fn render_frame(&self, t: usize) -> Option<RenderedFrame> {
        self.frames.get(t).map(|r| render_record(&self.scene, r))
    }

    /// Writes `frames/`, `tracks.json`, `memory_log.json`, `events.json`,
    /// `config.json` and `scene.json` under `dir`.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;
        for r in &self.frames {
            let f = render_record(&self.scene, r);
            raster::write_png(&f.image, &frames_dir.join(format!("frame_{:04}.png", r.index)))?;
        }
        let json = |v: &dyn erased::Json, name: &str| fs::write(dir.join(name), v.to_json());
        json(&self.tracks, "tracks.json")?;
        json(&self.memory_log, "memory_log.json")?;
        json(&self.events, "events.json")?;
        json(&self.config, "config.json")?;
        json(&self.frames, "frame_records.json")?;
        fs::write(dir.join("scene.json"), self.scene.to_json())
    }
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> Vec<u8>;
    }
    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> Vec<u8> {
            serde_json::to_vec_pretty(self).expect("rollout logs serialize")
        }
    }
}

fn render_record(scene: &SyntheticScene, r: &FrameRecord) -> RenderedFrame {
    worldsim::render(scene, &r.states, &r.camera.intrinsics, &r.camera.extrinsics, r.index)
}

fn summary_bytes(frame: &RenderedFrame) -> Vec<u8> {
    raster::downsample(&frame.image, SUMMARY_SIZE, SUMMARY_SIZE).into_raw()
}

/// Single-writer rollout state machine; one call to [`step_chunk`] runs one
/// chunk of the loop.
///
/// [`step_chunk`]: RolloutSession::step_chunk
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSession {
    scene: SyntheticScene,
    cameras: CameraScript,
    config: RolloutConfig,
    tracks: Vec<TrackState>,
    frames: Vec<FrameRecord>,
    memory: MemoryBank,
    chunks: Vec<ChunkLog>,
}

impl RolloutSession {
    pub fn new(scene: SyntheticScene, cameras: CameraScript, config: RolloutConfig) -> Result<Self, RolloutError> {
        config.validate()?;
        check_script(&scene, &cameras, config.horizon)?;
        let memory = MemoryBank::new(config.memory)?;
        Ok(Self { scene, cameras, config, tracks: Vec::new(), frames: Vec::new(), memory, chunks: Vec::new() })
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }
    pub fn config(&self) -> &RolloutConfig {
        &self.config
    }
    pub fn cameras(&self) -> &CameraScript {
        &self.cameras
    }
    pub fn tracks(&self) -> &[TrackState] {
        &self.tracks
    }
    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }
    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }
    pub fn chunk_logs(&self) -> &[ChunkLog] {
        &self.chunks
    }

    /// First frame of the next chunk.
    pub fn next_frame(&self) -> usize {
        self.frames.len()
    }

    pub fn is_done(&self) -> bool {
        self.frames.len() >= self.config.horizon
    }

    pub fn num_chunks(&self) -> usize {
        self.config.horizon.div_ceil(self.config.chunk_size)
    }

    /// Replaces camera poses from the next ungenerated frame onward.
    pub fn set_camera(&mut self, script: &CameraScript) -> Result<(), RolloutError> {
        check_script(&self.scene, script, self.config.horizon)?;
        let from = self.frames.len();
        self.cameras.splice_from(from, script).map_err(|e| RolloutError::Script(e.to_string()))
    }

    pub fn events(&self) -> Vec<OffscreenEvent> {
        self.tracks.iter().flat_map(|t| detect_offscreen(&t.anchored_track())).collect()
    }

    /// Renders a generated frame or, for `t == 0` before any chunk ran, the
    /// initial scene.
    pub fn render_frame(&self, t: usize) -> Result<RenderedFrame, RolloutError> {
        if let Some(r) = self.frames.get(t) {
            return Ok(render_record(&self.scene, r));
        }
        if t == 0 {
            let cam = self.camera(0);
            return Ok(worldsim::render(&self.scene, &self.scene.initial_states(), &cam.intrinsics, &cam.extrinsics, 0));
        }
        Err(RolloutError::NoSuchFrame(t))
    }

    fn camera(&self, t: usize) -> CameraPose {
        *self.cameras.get(t).expect("script covers horizon")
    }

    fn states_at(&self, t: usize) -> ObjectStates {
        self.frames.get(t).map_or_else(|| self.scene.initial_states(), |r| r.states.clone())
    }

    /// Selects the object nearest the click on the trajectory's first frame,
    /// reads the anchor depth there and lifts the sketch.
    pub fn add_trajectory(&mut self, user: UserTrajectory) -> Result<&TrackState, RolloutError> {
        let s0 = user.start_frame();
        let limit = self.frames.len().max(1);
        if s0 >= limit || s0 >= self.config.horizon {
            return Err(RolloutError::TrajectoryStart { start: s0, limit });
        }
        if self.tracks.iter().any(|t| t.user.track_id == user.track_id) {
            return Err(RolloutError::DuplicateTrack(user.track_id.clone()));
        }
        let cam = self.camera(s0);
        user.validate(&cam.intrinsics)?;
        let states = self.states_at(s0);
        let frame = worldsim::render(&self.scene, &states, &cam.intrinsics, &cam.extrinsics, s0);

        let mut nearest: Option<(u32, f64)> = None;
        for (id, c) in &frame.centroids {
            if let Some(c) = c {
                let d = (c - user.click).norm();
                if nearest.is_none_or(|(_, nd)| d < nd) {
                    nearest = Some((*id, d));
                }
            }
        }
        let object_id = match nearest {
            Some((id, d)) if d <= self.config.selection_radius => id,
            _ => {
                return Err(RolloutError::NoObjectNearClick {
                    x: user.click.x,
                    y: user.click.y,
                    radius: self.config.selection_radius,
                    nearest,
                })
            }
        };
        if let Some(t) = self.tracks.iter().find(|t| t.object_id == object_id) {
            return Err(RolloutError::ObjectAlreadyCommanded { object_id, track_id: t.user.track_id.clone() });
        }

        // Clicked surface point on the object's own plane.
        let center = states[&object_id];
        let object_plane = MotionPlane { point: center, normal: Vector3::z() };
        let surface = object_plane.intersect_pixel(&cam, &user.click).ok_or(RolloutError::ClickMissesPlane)?;
        let true_depth = cam.extrinsics.transform_point(&surface).z;

        let depth_map = worldsim::depth_oracle(&frame, self.config.depth_noise_sigma, self.config.seed);
        let click_depth = nwt::anchor_depth(&depth_map, &user.click)? * self.config.initial_depth_bias;

        let world = WorldTrajectory::from_user(&user, &cam, click_depth)?;
        let intended = WorldTrajectory::from_user(&user, &cam, true_depth)?;
        self.tracks.push(TrackState {
            object_id,
            body_offset: center - surface,
            plane: MotionPlane { point: surface, normal: cam.extrinsics.forward() },
            world,
            intended,
            click_depth,
            anchored: Vec::new(),
            user,
        });
        Ok(self.tracks.last().expect("just pushed"))
    }

    fn conditioning(&self, track: &TrackState, t: usize) -> (AnchoredPosition, Point3) {
        let cam = self.camera(t);
        match self.config.representation {
            Representation::World => (
                track.world.reproject(t, &cam.intrinsics, &cam.extrinsics),
                track.world.world_point(t),
            ),
            Representation::Pixel => {
                let pixel = track.user.pixel_at(t);
                let through = geometry::back_project(&cam.intrinsics, &cam.extrinsics, &pixel, 1.0)
                    .expect("unit depth is positive");
                let placed = track.plane.intersect_line(&cam.extrinsics.center(), &through).unwrap_or(through);
                let depth = cam.extrinsics.transform_point(&placed).z;
                let visible = depth > 0.0 && cam.intrinsics.contains(&pixel);
                (AnchoredPosition { t, pixel, depth, visible }, through)
            }
        }
    }

    /// Runs the next chunk and returns its log.
    pub fn step_chunk(&mut self) -> Result<&ChunkLog, RolloutError> {
        let horizon = self.config.horizon;
        let start = self.frames.len();
        if start >= horizon {
            return Err(RolloutError::Finished(horizon));
        }
        let end = (start + self.config.chunk_size).min(horizon);
        let chunk = self.chunks.len();

        // Re-project every active trajectory into this chunk's cameras.
        let mut anchored: BTreeMap<String, Vec<AnchoredPosition>> = BTreeMap::new();
        let mut through: BTreeMap<(usize, usize), Point3> = BTreeMap::new();
        for (i, tr) in self.tracks.iter().enumerate() {
            let mut positions = Vec::new();
            for t in start.max(tr.start_frame())..end {
                let (pos, x) = self.conditioning(tr, t);
                positions.push(pos);
                through.insert((i, t), x);
            }
            anchored.insert(tr.user.track_id.clone(), positions);
        }
        for tr in &mut self.tracks {
            tr.anchored.extend(anchored[&tr.user.track_id].iter().copied());
        }
        let events = self.events();

        // Memory retrieval mask for this chunk.
        self.memory.reset_mask();
        let v_cur = self.camera(start).extrinsics;
        let filter = if self.config.tasp_enabled {
            tasp_filter(&mut self.memory, &v_cur, &events)
        } else {
            let sigma_c = self.config.memory.sigma_c;
            FilterResult {
                similarity: self.memory.frames().map(|f| geometry::fov_similarity(&f.view, &v_cur, sigma_c)).collect(),
                retained: self.memory.mask(),
            }
        };
        let k = self.config.memory.k;
        let memory_log: Vec<MemoryEntryLog> = self
            .memory
            .frames()
            .zip(filter.similarity.iter().zip(&filter.retained))
            .map(|(f, (s, r))| MemoryEntryLog {
                frame: f.frame,
                similarity: *s,
                pre_exit: events.iter().any(|e| e.in_pre_exit_zone(f.frame, k)),
                retained: *r,
            })
            .collect();
        let excluded: Vec<usize> = memory_log.iter().filter(|m| !m.retained).map(|m| m.frame).collect();

        let conditioning_cells = self.conditioning_cells(&anchored, start, end)?;

        // Generate the chunk.
        let mut stale_overrides = Vec::new();
        let mut memory_frames = Vec::with_capacity(end - start);
        let mut last_render = None;
        for t in start..end {
            let cam = self.camera(t);
            let mut commands = Vec::new();
            for (i, tr) in self.tracks.iter().enumerate() {
                if t < tr.start_frame() {
                    continue;
                }
                let x = through[&(i, t)];
                let fallback = match self.config.representation {
                    Representation::World => x,
                    Representation::Pixel => tr.intended.world_point(t),
                };
                commands.push(ObjectCommand {
                    object_id: tr.object_id,
                    body_offset: tr.body_offset,
                    target: CommandTarget::Ray { through: x, plane: tr.plane, fallback },
                });
            }
            let mut states = worldsim::step_objects(&self.scene, &commands, &cam)?;
            for tr in &self.tracks {
                if t < tr.start_frame() {
                    continue;
                }
                if let Some(src) = self.stale_source(tr, &events, t, &filter, &memory_log) {
                    states.insert(tr.object_id, self.frames[src].states[&tr.object_id]);
                    stale_overrides.push(StaleOverride { track_id: tr.user.track_id.clone(), frame: t, source_frame: src });
                }
            }
            let mut tracked = BTreeMap::new();
            for tr in &self.tracks {
                let pixel = (t >= tr.start_frame())
                    .then(|| {
                        let p = geometry::project(&cam.intrinsics, &cam.extrinsics, &(states[&tr.object_id] - tr.body_offset));
                        p.visible(&cam.intrinsics).then_some(p.pixel)
                    })
                    .flatten();
                tracked.insert(tr.user.track_id.clone(), pixel);
            }
            let record = FrameRecord { index: t, camera: cam, states, tracked };
            let rendered = render_record(&self.scene, &record);
            memory_frames.push(MemoryFrame::new(t, cam.extrinsics, summary_bytes(&rendered)));
            self.frames.push(record);
            last_render = Some(rendered);
        }
        self.memory.append(memory_frames)?;

        // Re-anchor depth on the chunk's last frame.
        let mut refinements = Vec::new();
        if self.config.refine_depth && self.config.representation == Representation::World {
            let last = last_render.expect("chunk has at least one frame");
            let l = end - 1;
            let depth = worldsim::depth_oracle(&last, self.config.depth_noise_sigma, self.config.seed);
            let cam = self.camera(l);
            for tr in &mut self.tracks {
                if tr.start_frame() > l {
                    continue;
                }
                let before = tr.world.depth();
                let r = nwt::refine_anchor(&tr.world, &depth, &cam, l, self.config.refine_beta);
                refinements.push(RefinementLog {
                    track_id: tr.user.track_id.clone(),
                    frame: l,
                    depth_before: before,
                    depth_after: r.trajectory.depth(),
                    stale: r.stale,
                });
                tr.world = r.trajectory;
            }
        }

        self.chunks.push(ChunkLog {
            chunk,
            start,
            end,
            tasp_enabled: self.config.tasp_enabled,
            memory: memory_log,
            excluded,
            events,
            conditioning_cells,
            anchored,
            stale_overrides,
            refinements,
        });
        Ok(self.chunks.last().expect("just pushed"))
    }

    /// Latest memory frame still visible to retrieval that shows the track's
    /// object just before its most recent exit, if the camera has come back
    /// to a similar view. Its object position is what a generator attending
    /// to that frame would reproduce.
    fn stale_source(
        &self,
        tr: &TrackState,
        events: &[OffscreenEvent],
        t: usize,
        filter: &FilterResult,
        memory_log: &[MemoryEntryLog],
    ) -> Option<usize> {
        let event = events
            .iter()
            .filter(|e| e.track_id == tr.user.track_id && e.t1.is_some_and(|t1| t1 <= t))
            .max_by_key(|e| e.t0)?;
        let (k, tau) = (self.config.memory.k, self.config.memory.tau);
        memory_log
            .iter()
            .zip(&filter.similarity)
            .filter(|(m, s)| m.retained && event.in_pre_exit_zone(m.frame, k) && **s > tau)
            .map(|(m, _)| m.frame)
            .max()
    }

    fn conditioning_cells(
        &self,
        anchored: &BTreeMap<String, Vec<AnchoredPosition>>,
        start: usize,
        end: usize,
    ) -> Result<usize, RolloutError> {
        let tracks: Vec<AnchoredTrack> = self
            .tracks
            .iter()
            .filter_map(|tr| {
                let source = tr.anchored.first().copied()?;
                let mut positions = vec![AnchoredPosition { t: 0, ..source }];
                positions.extend(anchored[&tr.user.track_id].iter().map(|p| AnchoredPosition { t: p.t - start, ..*p }));
                source.visible.then(|| AnchoredTrack { track_id: tr.user.track_id.clone(), positions })
            })
            .collect();
        if tracks.is_empty() {
            return Ok(0);
        }
        let first = self.render_frame(0)?;
        let features = FeatureMap::from_image(&first.image, self.config.feature_channels, self.config.cell_size)?;
        // Source entries sit at local frame 0 too; count only this chunk's cells.
        let grid = nwt::build_conditioning(&features, &tracks, end - start, self.config.cell_size)?;
        Ok(grid.occupied_cells())
    }

    pub fn track_results(&self) -> Vec<TrackResult> {
        self.tracks
            .iter()
            .map(|tr| {
                // Frames generated before the track was added are not scored.
                let s0 = tr.anchored.first().map_or(self.frames.len(), |p| p.t);
                let target = AnchoredTrack {
                    track_id: tr.user.track_id.clone(),
                    positions: (s0..self.frames.len())
                        .map(|t| {
                            let cam = self.camera(t);
                            tr.intended.reproject(t, &cam.intrinsics, &cam.extrinsics)
                        })
                        .collect(),
                };
                let tracked = self.frames[s0.min(self.frames.len())..]
                    .iter()
                    .map(|r| TrackSample { t: r.index, pixel: r.tracked.get(&tr.user.track_id).copied().flatten() })
                    .collect();
                TrackResult {
                    track_id: tr.user.track_id.clone(),
                    object_id: tr.object_id,
                    click_depth: tr.click_depth,
                    final_depth: tr.world.depth(),
                    anchored: tr.anchored_track(),
                    target,
                    tracked,
                }
            })
            .collect()
    }

    pub fn result(&self) -> RolloutResult {
        RolloutResult {
            config: self.config.clone(),
            scene: self.scene.clone(),
            frames: self.frames.clone(),
            tracks: self.track_results(),
            memory_log: self.chunks.clone(),
            events: self.events(),
        }
    }

    pub fn run_to_end(&mut self) -> Result<(), RolloutError> {
        while !self.is_done() {
            self.step_chunk()?;
        }
        Ok(())
    }
}

fn check_script(scene: &SyntheticScene, cameras: &CameraScript, horizon: usize) -> Result<(), RolloutError> {
    if cameras.len() < horizon {
        return Err(RolloutError::Script(format!("script has {} frames, horizon needs {horizon}", cameras.len())));
    }
    if let Some((t, _)) = cameras
        .poses()
        .iter()
        .enumerate()
        .find(|(_, p)| p.intrinsics.width() != scene.width() || p.intrinsics.height() != scene.height())
    {
        return Err(RolloutError::Script(format!("frame {t} intrinsics do not match the {}x{} scene", scene.width(), scene.height())));
    }
    Ok(())
}

/// One-shot rollout of all trajectories (all must start at frame 0).
pub fn run_rollout(
    scene: &SyntheticScene,
    trajectories: &[UserTrajectory],
    cameras: &CameraScript,
    config: &RolloutConfig,
) -> Result<RolloutResult, RolloutError> {
    let mut session = RolloutSession::new(scene.clone(), cameras.clone(), config.clone())?;
    for traj in trajectories {
        session.add_trajectory(traj.clone())?;
    }
    session.run_to_end()?;
    Ok(session.result())
}
