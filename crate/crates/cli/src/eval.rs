use std::path::PathBuf;

use anchorloop_core::eval::metric_reports;
use anchorloop_core::geometry::CameraScript;
use anchorloop_core::metrics::{self, MetricReport, PerturbationModel, PoseSource, PoseTrajectory};
use anchorloop_core::nwt::UserTrajectory;
use anchorloop_core::rollout::{run_rollout, Representation, RolloutConfig};
use anchorloop_core::scenarios::{self, Scenario};
use anchorloop_core::worldsim::SyntheticScene;
use anchorloop_service::session::merge_config;
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::run::{Classify, CmdResult, Failure, RunContext};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fixture {
    #[value(name = "orbit-10")]
    Orbit10,
    #[value(name = "orbit-30")]
    Orbit30,
    #[value(name = "orbit-60")]
    Orbit60,
    #[value(name = "look-away")]
    LookAway,
    #[value(name = "static")]
    Static,
}

impl Fixture {
    pub fn scenario(self) -> Scenario {
        match self {
            Fixture::Orbit10 => scenarios::orbit_scenario(10.0),
            Fixture::Orbit30 => scenarios::orbit_scenario(30.0),
            Fixture::Orbit60 => scenarios::orbit_scenario(60.0),
            Fixture::LookAway => scenarios::look_away_scenario(),
            Fixture::Static => scenarios::orbit_scenario(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReprArg {
    World,
    Pixel,
}

#[derive(Debug, Args)]
pub struct EvalTrajArgs {
    /// Scene JSON.
    #[arg(long, required_unless_present = "fixture")]
    pub scene: Option<PathBuf>,
    /// Camera script JSON.
    #[arg(long, required_unless_present = "fixture")]
    pub camera: Option<PathBuf>,
    /// Trajectory JSON; repeat for several tracks.
    #[arg(long, required_unless_present = "fixture")]
    pub trajectory: Vec<PathBuf>,
    /// Built-in scene, camera path and sketch instead of files.
    #[arg(long, value_enum, conflicts_with_all = ["scene", "camera", "trajectory"])]
    pub fixture: Option<Fixture>,
    #[arg(long, value_enum)]
    pub repr: Option<ReprArg>,
    /// Enable the view-similarity memory filter.
    #[arg(long)]
    pub tasp: Option<bool>,
    /// Re-anchor trajectory depth after each chunk.
    #[arg(long)]
    pub refine: Option<bool>,
    /// Multiplier on the click depth (1 = unbiased).
    #[arg(long)]
    pub depth_bias: Option<f64>,
    /// Standard deviation of the multiplicative depth-oracle noise.
    #[arg(long)]
    pub depth_noise: Option<f64>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value = "clip")]
    pub clip_id: String,
    /// Skip writing PNG frames.
    #[arg(long)]
    pub no_frames: bool,
}

fn rollout_config(ctx: &RunContext, args: &EvalTrajArgs, base: RolloutConfig) -> CmdResult<RolloutConfig> {
    let mut config = match &ctx.config_override {
        Some(v) => merge_config(&base, v).map_err(|e| Failure::Input(format!("--config: {}", e.message)))?,
        None => base,
    };
    if let Some(r) = args.repr {
        config.representation = match r {
            ReprArg::World => Representation::World,
            ReprArg::Pixel => Representation::Pixel,
        };
    }
    if let Some(v) = args.tasp {
        config.tasp_enabled = v;
    }
    if let Some(v) = args.refine {
        config.refine_depth = v;
    }
    if let Some(v) = args.depth_bias {
        config.initial_depth_bias = v;
    }
    if let Some(v) = args.depth_noise {
        config.depth_noise_sigma = v;
    }
    if let Some(v) = args.chunk_size {
        config.chunk_size = v;
    }
    if let Some(v) = args.horizon {
        config.horizon = v;
    }
    config.seed = ctx.seed;
    config.validate().input("config")?;
    Ok(config)
}

pub fn eval_traj(ctx: &mut RunContext, args: &EvalTrajArgs) -> CmdResult<()> {
    let (scene, cameras, trajectories, base) = match args.fixture {
        Some(f) => {
            let sc = f.scenario();
            ctx.record_input(&format!("fixture:{}", sc.name), &serde_json::to_vec(&sc).internal("fixture")?);
            (sc.scene, sc.cameras, sc.trajectories, sc.config)
        }
        None => {
            let scene_path = args.scene.as_ref().expect("clap requires --scene");
            let scene = SyntheticScene::from_json(&ctx.read_input(scene_path)?).input("scene")?;
            let cam_path = args.camera.as_ref().expect("clap requires --camera");
            let cameras = CameraScript::from_json(&ctx.read_input(cam_path)?, scene.width(), scene.height()).input("camera script")?;
            let mut trajectories = Vec::new();
            for p in &args.trajectory {
                trajectories.push(UserTrajectory::from_json(&ctx.read_input(p)?).input(&format!("trajectory {}", p.display()))?);
            }
            (scene, cameras, trajectories, RolloutConfig::default())
        }
    };
    let config = rollout_config(ctx, args, base)?;
    ctx.set_config(&config);
    let result = run_rollout(&scene, &trajectories, &cameras, &config).input("rollout")?;
    let rollout_dir = ctx.out.join("rollout");
    if args.no_frames {
        std::fs::create_dir_all(&rollout_dir).input("creating rollout dir")?;
        for (name, value) in [
            ("tracks.json", serde_json::to_vec_pretty(&result.tracks)),
            ("memory_log.json", serde_json::to_vec_pretty(&result.memory_log)),
            ("events.json", serde_json::to_vec_pretty(&result.events)),
            ("config.json", serde_json::to_vec_pretty(&result.config)),
            ("frame_records.json", serde_json::to_vec_pretty(&result.frames)),
        ] {
            std::fs::write(rollout_dir.join(name), value.internal("serializing")?).input("writing rollout")?;
        }
        std::fs::write(rollout_dir.join("scene.json"), result.scene.to_json()).input("writing rollout")?;
    } else {
        result.write_dir(&rollout_dir).input("writing rollout")?;
    }
    ctx.note_output("rollout/");
    let reports = metric_reports(&result, &args.clip_id).metric("trajectory error")?;
    write_reports(ctx, &reports)?;
    for r in &reports {
        println!("{}\tTE {:.4} px\t{}\t{}", r.clip_id, r.te, r.rot_bucket.label(), r.regime.label());
    }
    Ok(())
}

pub fn write_reports(ctx: &mut RunContext, reports: &[MetricReport]) -> CmdResult<()> {
    ctx.write_csv("metrics.csv", &MetricReport::CSV_HEADER, reports.iter().map(|r| r.csv_record().to_vec()))?;
    ctx.write_json("metrics.json", &reports)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalCameraArgs {
    /// Ground-truth camera script JSON.
    #[arg(long, required_unless_present = "fixture")]
    pub gt: Option<PathBuf>,
    /// Use a built-in fixture's camera path as ground truth.
    #[arg(long, value_enum, conflicts_with = "gt")]
    pub fixture: Option<Fixture>,
    /// Estimated camera script; when absent the ground truth is perturbed.
    #[arg(long)]
    pub est: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub width: u32,
    #[arg(long, default_value_t = 256)]
    pub height: u32,
    /// Per-pose rotation noise (radians).
    #[arg(long)]
    pub rot_noise: Option<f64>,
    /// Per-pose center noise (world units).
    #[arg(long)]
    pub trans_noise: Option<f64>,
    /// Center drift per frame along world x.
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Global yaw (radians).
    #[arg(long)]
    pub yaw: Option<f64>,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], allow_negative_numbers = true)]
    pub offset: Option<Vec<f64>>,
    /// Frame strides; repeat for several.
    #[arg(long, default_values_t = [1usize])]
    pub stride: Vec<usize>,
    /// Monte-Carlo repetitions (seeds `seed..seed+trials`).
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
}

#[derive(Debug, Serialize)]
struct RpeRow {
    stride: usize,
    trials: u64,
    rpe_rot: f64,
    rpe_trans: f64,
    rpe_cam: f64,
}

pub const RPE_CSV_HEADER: [&str; 5] = ["stride", "trials", "rpe_rot", "rpe_trans", "rpe_cam"];

pub fn eval_camera(ctx: &mut RunContext, args: &EvalCameraArgs) -> CmdResult<()> {
    let gt_script = match (args.fixture, &args.gt) {
        (Some(f), _) => {
            let sc = f.scenario();
            ctx.record_input(&format!("fixture:{}", sc.name), sc.cameras.to_json().as_bytes());
            sc.cameras
        }
        (None, Some(p)) => CameraScript::from_json(&ctx.read_input(p)?, args.width, args.height).input("ground-truth script")?,
        (None, None) => return Err(Failure::Input("--gt or --fixture is required".into())),
    };
    let gt = PoseTrajectory::from_sequence(PoseSource::GroundTruth, gt_script.poses().iter().map(|p| p.extrinsics));

    let mut model: PerturbationModel = match &ctx.config_override {
        Some(v) => serde_json::from_value(v.clone()).input("--config perturbation model")?,
        None => PerturbationModel::default(),
    };
    if let Some(v) = args.rot_noise {
        model.rot_noise = v;
    }
    if let Some(v) = args.trans_noise {
        model.trans_noise = v;
    }
    if let Some(v) = args.drift {
        model.drift_per_frame = v;
    }
    if let Some(v) = args.scale {
        model.global_scale = v;
    }
    if let Some(v) = args.yaw {
        model.global_yaw = v;
    }
    if let Some(o) = &args.offset {
        model.global_offset = [o[0], o[1], o[2]];
    }
    if args.trials == 0 {
        return Err(Failure::Input("--trials must be at least 1".into()));
    }

    let estimates: Vec<PoseTrajectory> = match &args.est {
        Some(p) => {
            let est = CameraScript::from_json(&ctx.read_input(p)?, args.width, args.height).input("estimated script")?;
            ctx.set_config(serde_json::json!({ "est": p.display().to_string(), "stride": args.stride }));
            vec![PoseTrajectory::from_sequence(PoseSource::Estimated, est.poses().iter().map(|p| p.extrinsics))]
        }
        None => {
            ctx.set_config(serde_json::json!({ "perturbation": model, "stride": args.stride, "trials": args.trials }));
            (0..args.trials)
                .map(|i| metrics::perturb_poses(&gt, &model, ctx.seed.wrapping_add(i)).input("perturbation model"))
                .collect::<CmdResult<_>>()?
        }
    };

    let mut rows = Vec::new();
    for &stride in &args.stride {
        let (mut rot, mut trans, mut cam) = (0.0, 0.0, 0.0);
        for est in &estimates {
            let r = metrics::rpe(est, &gt, stride).metric(&format!("RPE at stride {stride}"))?;
            rot += r.rot;
            trans += r.trans;
            cam += r.cam;
        }
        let n = estimates.len() as f64;
        rows.push(RpeRow { stride, trials: estimates.len() as u64, rpe_rot: rot / n, rpe_trans: trans / n, rpe_cam: cam / n });
    }
    ctx.write_csv(
        "rpe.csv",
        &RPE_CSV_HEADER,
        rows.iter().map(|r| vec![r.stride.to_string(), r.trials.to_string(), r.rpe_rot.to_string(), r.rpe_trans.to_string(), r.rpe_cam.to_string()]),
    )?;
    ctx.write_json("rpe.json", &rows)?;
    for r in &rows {
        println!("stride {}\trot {:.6e}\ttrans {:.6e}\tcam {:.6e}", r.stride, r.rpe_rot, r.rpe_trans, r.rpe_cam);
    }
    Ok(())
}
