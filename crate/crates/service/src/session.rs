//! Session state and the synchronous operations the HTTP layer wraps.

use anchorloop_core::eval;
use anchorloop_core::geometry::CameraScript;
use anchorloop_core::metrics::MetricReport;
use anchorloop_core::nwt::UserTrajectory;
use anchorloop_core::raster;
use anchorloop_core::rollout::{ChunkLog, MemoryEntryLog, OffscreenEvent, RolloutConfig, RolloutSession, TrackResult};
use anchorloop_core::worldsim::SyntheticScene;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ApiError;

/// Input edit applied after the first chunk; takes effect from `from_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub kind: String,
    pub from_frame: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionData {
    pub id: String,
    pub config: RolloutConfig,
    pub scene: Option<SyntheticScene>,
    pub cameras: Option<CameraScript>,
    /// Accepted trajectories in the order they were added.
    pub trajectories: Vec<UserTrajectory>,
    pub rollout: Option<RolloutSession>,
    pub edits: Vec<EditLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub objects: usize,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraReport {
    pub frames: usize,
    pub applies_from: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub track_id: String,
    pub object_id: u32,
    pub click_depth: f64,
    pub start_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub done: bool,
    /// The request replayed an already-completed chunk.
    pub replayed: bool,
    pub next_chunk: usize,
    pub total_chunks: usize,
    pub chunk: Option<ChunkLog>,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub frame: usize,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMemory {
    pub chunk: usize,
    pub start: usize,
    pub end: usize,
    pub tasp_enabled: bool,
    pub entries: Vec<MemoryEntryLog>,
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub bank: Vec<MemorySlot>,
    pub chunks: Vec<ChunkMemory>,
}

/// Overlays a JSON object of overrides on the serialized defaults. Unknown
/// keys and wrong types are rejected.
pub fn merge_config(defaults: &RolloutConfig, overrides: &Value) -> Result<RolloutConfig, ApiError> {
    let mut base = serde_json::to_value(defaults).expect("config serializes");
    merge_into(&mut base, overrides, "")?;
    let config: RolloutConfig =
        serde_json::from_value(base).map_err(|e| ApiError::bad_request(format!("invalid config: {e}")))?;
    config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(config)
}

fn merge_into(base: &mut Value, overrides: &Value, prefix: &str) -> Result<(), ApiError> {
    let Value::Object(over) = overrides else {
        return Err(ApiError::bad_request(format!("expected an object at {}", if prefix.is_empty() { "top level" } else { prefix })));
    };
    let Value::Object(target) = base else { unreachable!("merge only recurses into objects") };
    for (key, value) in over {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(slot) = target.get_mut(key) else {
            return Err(ApiError::bad_request(format!("unknown config field {path}")).with_field(path));
        };
        if slot.is_object() {
            merge_into(slot, value, &path)?;
        } else {
            *slot = value.clone();
        }
    }
    Ok(())
}

pub fn frame_url(id: &str, t: usize) -> String {
    format!("/sessions/{id}/frames/{t}")
}

impl SessionData {
    pub fn new(id: String, config: RolloutConfig) -> Self {
        Self { id, config, scene: None, cameras: None, trajectories: Vec::new(), rollout: None, edits: Vec::new() }
    }

    fn started(&self) -> bool {
        self.rollout.as_ref().is_some_and(|r| r.next_frame() > 0)
    }

    /// Rebuilds the unstarted rollout from the current inputs.
    fn rebuild(&mut self) -> Result<(), ApiError> {
        let (Some(scene), Some(cameras)) = (&self.scene, &self.cameras) else {
            self.rollout = None;
            return Ok(());
        };
        let mut rollout = RolloutSession::new(scene.clone(), cameras.clone(), self.config.clone()).map_err(ApiError::from_rollout)?;
        for t in &self.trajectories {
            rollout.add_trajectory(t.clone()).map_err(|e| ApiError::unprocessable(format!("trajectory {}: {e}", t.track_id)))?;
        }
        self.rollout = Some(rollout);
        Ok(())
    }

    pub fn set_scene(&mut self, text: &str) -> Result<SceneReport, ApiError> {
        if self.started() {
            return Err(ApiError::conflict("the scene cannot change once the rollout has started"));
        }
        let scene = SyntheticScene::from_json(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let report = SceneReport { objects: scene.objects().len(), width: scene.width(), height: scene.height() };
        self.scene = Some(scene);
        self.rebuild()?;
        Ok(report)
    }

    pub fn set_camera(&mut self, text: &str) -> Result<CameraReport, ApiError> {
        let scene = self.scene.as_ref().ok_or_else(|| ApiError::conflict("set the scene before the camera script"))?;
        let script = CameraScript::from_json(text, scene.width(), scene.height()).map_err(|e| ApiError::bad_request(e.to_string()))?;
        if script.len() < self.config.horizon {
            return Err(ApiError::bad_request(format!(
                "camera script has {} frames but the horizon requires {}",
                script.len(),
                self.config.horizon
            ))
            .with_field("camera"));
        }
        let frames = script.len();
        if self.started() {
            let rollout = self.rollout.as_mut().expect("started implies rollout");
            let from = rollout.next_frame();
            rollout.set_camera(&script).map_err(ApiError::from_rollout)?;
            self.cameras = Some(rollout.cameras().clone());
            self.edits.push(EditLog { kind: "camera".into(), from_frame: from, detail: format!("{frames}-frame script") });
            return Ok(CameraReport { frames, applies_from: from });
        }
        self.cameras = Some(script);
        self.rebuild()?;
        Ok(CameraReport { frames, applies_from: 0 })
    }

    pub fn add_trajectory(&mut self, text: &str) -> Result<TrajectoryReport, ApiError> {
        let traj = UserTrajectory::from_json(text).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let started = self.started();
        let rollout = self
            .rollout
            .as_mut()
            .ok_or_else(|| ApiError::conflict("set the scene and camera script before adding trajectories"))?;
        let from = rollout.next_frame();
        let state = rollout.add_trajectory(traj.clone()).map_err(ApiError::from_rollout)?;
        let report = TrajectoryReport {
            track_id: traj.track_id.clone(),
            object_id: state.object_id,
            click_depth: state.click_depth,
            start_frame: traj.start_frame(),
        };
        if started {
            self.edits.push(EditLog {
                kind: "trajectory".into(),
                from_frame: from,
                detail: format!("track {} on object {}", report.track_id, report.object_id),
            });
        }
        self.trajectories.push(traj);
        Ok(report)
    }

    fn completed_chunks(&self) -> usize {
        self.rollout.as_ref().map_or(0, |r| r.chunk_logs().len())
    }

    fn step_response(&self, chunk: Option<ChunkLog>, replayed: bool) -> StepResponse {
        let rollout = self.rollout.as_ref();
        let frames = chunk.as_ref().map_or_else(Vec::new, |c| (c.start..c.end).map(|t| frame_url(&self.id, t)).collect());
        StepResponse {
            done: rollout.is_some_and(|r| r.is_done()),
            replayed,
            next_chunk: self.completed_chunks(),
            total_chunks: rollout.map_or(0, |r| r.num_chunks()),
            chunk,
            frames,
        }
    }

    /// Read-only part of a step: a replay of an earlier chunk or the done
    /// marker. `None` means the step must execute.
    pub fn step_precheck(&self, token: Option<usize>) -> Result<Option<StepResponse>, ApiError> {
        let rollout = self
            .rollout
            .as_ref()
            .ok_or_else(|| ApiError::conflict("set the scene and camera script before stepping"))?;
        let done = rollout.chunk_logs().len();
        match token {
            Some(k) if k < done => Ok(Some(self.step_response(Some(rollout.chunk_logs()[k].clone()), true))),
            Some(k) if k > done => Err(ApiError::conflict(format!("chunk {k} requested but the next chunk is {done}"))),
            _ if rollout.is_done() => Ok(Some(self.step_response(None, false))),
            _ => Ok(None),
        }
    }

    pub fn step(&mut self) -> Result<StepResponse, ApiError> {
        let rollout = self.rollout.as_mut().expect("checked by step_precheck");
        let log = rollout.step_chunk().map_err(ApiError::from_rollout)?.clone();
        Ok(self.step_response(Some(log), false))
    }

    pub fn memory(&self) -> MemoryView {
        let Some(r) = &self.rollout else {
            return MemoryView { bank: Vec::new(), chunks: Vec::new() };
        };
        MemoryView {
            bank: r.memory().frames().map(|f| MemorySlot { frame: f.frame, retained: f.retained }).collect(),
            chunks: r
                .chunk_logs()
                .iter()
                .map(|c| ChunkMemory {
                    chunk: c.chunk,
                    start: c.start,
                    end: c.end,
                    tasp_enabled: c.tasp_enabled,
                    entries: c.memory.clone(),
                    excluded: c.excluded.clone(),
                })
                .collect(),
        }
    }

    pub fn tracks(&self) -> Vec<TrackResult> {
        self.rollout.as_ref().map_or_else(Vec::new, |r| r.track_results())
    }

    pub fn events(&self) -> Vec<OffscreenEvent> {
        self.rollout.as_ref().map_or_else(Vec::new, |r| r.events())
    }

    pub fn metrics(&self) -> Result<Vec<MetricReport>, ApiError> {
        let rollout = self.rollout.as_ref().ok_or_else(|| ApiError::conflict("no rollout yet"))?;
        eval::metric_reports(&rollout.result(), &self.id).map_err(|e| ApiError::unprocessable(e.to_string()))
    }

    pub fn frame_png(&self, t: usize) -> Result<Vec<u8>, ApiError> {
        let rollout = self.rollout.as_ref().ok_or_else(|| ApiError::not_found(format!("frame {t} has not been generated")))?;
        let frame = rollout.render_frame(t).map_err(|e| ApiError::not_found(e.to_string()))?;
        Ok(raster::encode_png(&frame.image))
    }
}
