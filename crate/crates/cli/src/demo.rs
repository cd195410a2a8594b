use anchorloop_core::rollout::{reentry_position, run_rollout, RolloutResult};
use anchorloop_core::scenarios;
use clap::Args;
use serde::Serialize;

use crate::run::{Classify, CmdResult, Failure, RunContext};

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Skip writing PNG frames.
    #[arg(long)]
    pub no_frames: bool,
}

#[derive(Debug, Serialize)]
struct Variant {
    tasp_enabled: bool,
    tracked_at_reentry: Option<[f64; 2]>,
    reentry_error_px: Option<f64>,
    excluded_frames: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize)]
struct Summary {
    scenario: String,
    exit_frame: usize,
    reentry_frame: usize,
    anchored_at_reentry: [f64; 2],
    commanded_displacement_px: f64,
    tasp_on: Variant,
    tasp_off: Variant,
}

fn variant(result: &RolloutResult, t1: usize, anchored: nalgebra::Point2<f64>) -> Variant {
    let track = &result.tracks[0];
    let tracked = track.tracked.iter().find(|s| s.t == t1).and_then(|s| s.pixel);
    Variant {
        tasp_enabled: result.config.tasp_enabled,
        tracked_at_reentry: tracked.map(|p| [p.x, p.y]),
        reentry_error_px: tracked.map(|p| (p - anchored).norm()),
        excluded_frames: result.memory_log.iter().map(|c| c.excluded.clone()).collect(),
    }
}

/// Look-away scenario: the object is dragged while the camera looks away,
/// then the camera returns. Runs with and without the memory filter.
pub fn demo(ctx: &mut RunContext, args: &DemoArgs) -> CmdResult<()> {
    let sc = scenarios::look_away_scenario();
    ctx.record_input("fixture:look-away", &serde_json::to_vec(&sc).internal("fixture")?);
    ctx.set_config(&sc.config);
    ctx.write("inputs/scene.json", sc.scene.to_json())?;
    ctx.write("inputs/camera.json", sc.cameras.to_json())?;
    ctx.write_json("inputs/trajectory.json", &sc.trajectories[0])?;

    let mut on_cfg = sc.config.clone();
    on_cfg.seed = ctx.seed;
    let off_cfg = anchorloop_core::rollout::RolloutConfig { tasp_enabled: false, ..on_cfg.clone() };
    let on = run_rollout(&sc.scene, &sc.trajectories, &sc.cameras, &on_cfg).input("rollout")?;
    let off = run_rollout(&sc.scene, &sc.trajectories, &sc.cameras, &off_cfg).input("rollout")?;

    let event = on
        .events
        .iter()
        .find(|e| e.t1.is_some())
        .cloned()
        .ok_or_else(|| Failure::MetricUndefined("the track never left and re-entered the view".into()))?;
    let t1 = event.t1.expect("closed event");
    let anchored = reentry_position(&on.tracks[0].anchored, &event).internal("re-entry")?;
    let first = sc.trajectories[0].points.first().expect("non-empty sketch").1;
    let last = sc.trajectories[0].points.last().expect("non-empty sketch").1;

    for (dir, r) in [("tasp_on", &on), ("tasp_off", &off)] {
        if args.no_frames {
            ctx.write_json(&format!("{dir}/tracks.json"), &r.tracks)?;
            ctx.write_json(&format!("{dir}/memory_log.json"), &r.memory_log)?;
            ctx.write_json(&format!("{dir}/events.json"), &r.events)?;
        } else {
            r.write_dir(&ctx.out.join(dir)).input("writing rollout")?;
            ctx.note_output(&format!("{dir}/"));
        }
    }
    let summary = Summary {
        scenario: sc.name.clone(),
        exit_frame: event.t0,
        reentry_frame: t1,
        anchored_at_reentry: [anchored.x, anchored.y],
        commanded_displacement_px: (last - first).norm(),
        tasp_on: variant(&on, t1, anchored),
        tasp_off: variant(&off, t1, anchored),
    };
    ctx.write_json("summary.json", &summary)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |e| format!("{e:.3} px"));
    println!("object leaves view at frame {} and re-enters at frame {t1}", event.t0);
    println!("memory filter on:  re-entry error {}", fmt(summary.tasp_on.reentry_error_px));
    println!("memory filter off: re-entry error {}", fmt(summary.tasp_off.reentry_error_px));
    Ok(())
}
