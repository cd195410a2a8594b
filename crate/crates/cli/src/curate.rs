use std::path::PathBuf;

use anchorloop_core::curation::{self, ClipInput, ClipOutcome, CuratedSample, CurationParams};
use clap::Args;
use rayon::prelude::*;
use serde_json::json;

use crate::run::{Classify, CmdResult, Failure, RunContext};

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Directory of per-clip component/mask JSON files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    /// Minimum net displacement as a fraction of the frame diagonal.
    #[arg(long)]
    pub min_displacement: Option<f64>,
    #[arg(long)]
    pub query_points: Option<usize>,
}

pub const CURATED_CSV_HEADER: [&str; 10] =
    ["clip", "start", "length", "coverage", "net_displacement", "tracklet_id", "score", "regime", "query_points", "insufficient"];

pub fn curate(ctx: &mut RunContext, args: &CurateArgs) -> CmdResult<()> {
    let mut params: CurationParams = match &ctx.config_override {
        Some(v) => serde_json::from_value(v.clone()).input("--config curation params")?,
        None => CurationParams::default(),
    };
    if let Some(v) = args.window {
        params.window = v;
    }
    if let Some(v) = args.min_displacement {
        params.min_displacement = v;
    }
    if let Some(v) = args.query_points {
        params.query_points = v;
    }
    params.seed = ctx.seed;
    ctx.set_config(params);

    let files: Vec<PathBuf> = ctx
        .record_dir(&args.input)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    if files.is_empty() {
        return Err(Failure::Input(format!("no clip JSON files in {}", args.input.display())));
    }
    let clips: Vec<ClipInput> = files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).input(&format!("reading {}", p.display()))?;
            serde_json::from_str(&text).input(&format!("parsing {}", p.display()))
        })
        .collect::<CmdResult<_>>()?;

    let outcomes: Vec<ClipOutcome> = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let p = CurationParams { seed: params.seed.wrapping_add(i as u64), ..params };
            curation::curate_clip(clip, &p).input(&format!("clip {}", clip.clip))
        })
        .collect::<CmdResult<_>>()?;

    let accepted: Vec<&CuratedSample> = outcomes
        .iter()
        .filter_map(|o| match o {
            ClipOutcome::Accepted(s) => Some(s),
            ClipOutcome::Rejected { .. } => None,
        })
        .collect();
    let rejected: Vec<&ClipOutcome> = outcomes.iter().filter(|o| matches!(o, ClipOutcome::Rejected { .. })).collect();

    let camera: std::collections::HashMap<&str, f64> = clips.iter().map(|c| (c.clip.as_str(), c.camera_translation)).collect();
    let stats_input: Vec<(f64, f64)> = accepted.iter().map(|s| (camera[s.clip.as_str()], s.window.net_displacement)).collect();
    let stats = if stats_input.is_empty() { None } else { Some(curation::dataset_stats(&stats_input).internal("dataset stats")?) };

    ctx.write_json("curated.json", &accepted)?;
    ctx.write_json("rejected.json", &rejected)?;
    ctx.write_json("stats.json", &json!({ "clips": clips.len(), "accepted": accepted.len(), "stats": stats }))?;
    ctx.write_csv(
        "curated.csv",
        &CURATED_CSV_HEADER,
        accepted.iter().map(|s| {
            vec![
                s.clip.clone(),
                s.window.start.to_string(),
                s.window.length.to_string(),
                s.window.coverage.to_string(),
                s.window.net_displacement.to_string(),
                s.tracklet_id.to_string(),
                s.score.to_string(),
                s.regime.label().to_string(),
                s.query_points.points.len().to_string(),
                s.query_points.insufficient.to_string(),
            ]
        }),
    )?;
    println!("{} clips, {} accepted, {} rejected", clips.len(), accepted.len(), rejected.len());
    if let Some(s) = &stats {
        for (regime, f) in &s.fractions {
            println!("{}\t{:.4}", regime.label(), f);
        }
    }
    Ok(())
}
