//! Ready-made scenes, camera scripts and sketches for demos and evaluation.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, CameraPose, CameraScript, Extrinsics, Intrinsics, Point2, Point3};
use crate::nwt::UserTrajectory;
use crate::rollout::RolloutConfig;
use crate::worldsim::{Background, SceneObject, SyntheticScene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub scene: SyntheticScene,
    pub cameras: CameraScript,
    pub trajectories: Vec<UserTrajectory>,
    pub config: RolloutConfig,
}

pub const FRAME_SIZE: u32 = 256;

/// 256x256 frame with a 90° horizontal field of view.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(128.0, 128.0, 128.0, 128.0, FRAME_SIZE, FRAME_SIZE).expect("valid default intrinsics")
}

/// Camera orbiting about a vertical axis through `(0, 0, pivot_z)`, starting
/// at the origin looking down +z and sweeping linearly to `max_deg`.
pub fn orbit_script(k: &Intrinsics, frames: usize, max_deg: f64, pivot_z: f64) -> CameraScript {
    let pivot = Point3::new(0.0, 0.0, pivot_z);
    let poses = (0..frames)
        .map(|t| {
            let a = if frames > 1 { max_deg.to_radians() * t as f64 / (frames - 1) as f64 } else { 0.0 };
            let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), a);
            let center = pivot + rot * Vector3::new(0.0, 0.0, -pivot_z);
            CameraPose { intrinsics: *k, extrinsics: Extrinsics::from_camera(&rot, &center) }
        })
        .collect();
    CameraScript::new(poses).expect("non-empty script")
}

/// Closed-loop fixture for one rotation bucket: one object dragged 40 px to
/// the right while the camera orbits by `max_deg`.
pub fn orbit_scenario(max_deg: f64) -> Scenario {
    let k = default_intrinsics();
    let object = SceneObject { id: 1, position: Point3::new(0.3, 0.0, 4.0), half_extent: 0.4, texture_seed: 11 };
    let distractor = SceneObject { id: 2, position: Point3::new(-1.2, 0.6, 7.0), half_extent: 0.6, texture_seed: 5 };
    let scene = SyntheticScene::new(k, Background { seed: 3, depth: 10.0 }, vec![object, distractor]).expect("valid scene");
    let config = RolloutConfig::default();
    let cameras = orbit_script(&k, config.horizon, max_deg, 6.0);
    let click = geometry::project(&k, &Extrinsics::identity(), &object.position).pixel;
    let end = click + nalgebra::Vector2::new(40.0, 0.0);
    let traj = UserTrajectory::new("drag", click, vec![(0, click), (config.horizon - 1, end)]);
    Scenario { name: format!("orbit-{max_deg:.0}deg"), scene, cameras, trajectories: vec![traj], config }
}

/// Look-away fixture: the camera holds view A, turns 60° away for one chunk
/// while the object is dragged 40 px to the right, then returns to A.
pub fn look_away_scenario() -> Scenario {
    let k = default_intrinsics();
    let object = SceneObject { id: 1, position: Point3::new(0.0, 0.0, 4.0), half_extent: 0.4, texture_seed: 7 };
    let scene = SyntheticScene::new(k, Background { seed: 1, depth: 10.0 }, vec![object]).expect("valid scene");
    let config = RolloutConfig { chunk_size: 16, horizon: 64, ..RolloutConfig::default() };
    let away = Extrinsics::from_camera(&Rotation3::from_axis_angle(&Vector3::y_axis(), (-60.0f64).to_radians()), &Point3::origin());
    let poses = (0..config.horizon)
        .map(|t| CameraPose { intrinsics: k, extrinsics: if (16..32).contains(&t) { away } else { Extrinsics::identity() } })
        .collect();
    let click = Point2::new(128.0, 128.0);
    let traj = UserTrajectory::new("drag", click, vec![(0, click), (16, click), (31, Point2::new(168.0, 128.0))]);
    Scenario {
        name: "look-away".into(),
        scene,
        cameras: CameraScript::new(poses).expect("non-empty script"),
        trajectories: vec![traj],
        config,
    }
}

/// Randomized scene, gentle camera path and sketches, for determinism checks.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::new(48.0, 48.0, 48.0, 48.0, 96, 96).expect("valid intrinsics");
    let n_objects = rng.random_range(1..=3);
    let objects: Vec<SceneObject> = (0..n_objects)
        .map(|i| SceneObject {
            id: i as u32 + 1,
            position: Point3::new(-1.2 + 1.2 * i as f64 + rng.random_range(-0.1..0.1), rng.random_range(-0.4..0.4), rng.random_range(3.0..6.0)),
            half_extent: rng.random_range(0.25..0.45),
            texture_seed: rng.random(),
        })
        .collect();
    let scene = SyntheticScene::new(k, Background { seed: rng.random(), depth: 10.0 }, objects.clone()).expect("valid scene");
    let chunk_size = rng.random_range(2..=8);
    let horizon = chunk_size * rng.random_range(2..=4) + rng.random_range(0..chunk_size);
    let config = RolloutConfig {
        chunk_size,
        horizon,
        tasp_enabled: rng.random_bool(0.5),
        refine_depth: rng.random_bool(0.7),
        depth_noise_sigma: if rng.random_bool(0.5) { rng.random_range(0.0..0.05) } else { 0.0 },
        seed: rng.random(),
        initial_depth_bias: rng.random_range(0.95..1.1),
        cell_size: 8,
        ..RolloutConfig::default()
    };
    let cameras = orbit_script(&k, horizon, rng.random_range(-20.0..20.0), rng.random_range(4.0..8.0));
    let mut trajectories = Vec::new();
    for o in objects.iter().take(rng.random_range(1..=n_objects)) {
        let click = geometry::project(&k, &Extrinsics::identity(), &o.position).pixel;
        if !k.contains(&click) {
            continue;
        }
        let mid = horizon / 2;
        let step = |rng: &mut ChaCha8Rng, p: Point2| {
            Point2::new((p.x + rng.random_range(-15.0..15.0)).clamp(0.0, 95.0), (p.y + rng.random_range(-15.0..15.0)).clamp(0.0, 95.0))
        };
        let p1 = step(&mut rng, click);
        let p2 = step(&mut rng, p1);
        trajectories.push(UserTrajectory::new(format!("track-{}", o.id), click, vec![(0, click), (mid, p1), (horizon - 1, p2)]));
    }
    Scenario { name: format!("random-{seed}"), scene, cameras, trajectories, config }
}
