use std::path::PathBuf;

use anchorloop_core::adapter::{self, ToyPathwayNet, DELTA_CSV_HEADER, TOY_BLOCKS, TOY_DIM, TOY_POSE_DIM, TOY_TRAJ_DIM};
use clap::{Args, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::run::{Classify, CmdResult, Failure, RunContext};

#[derive(Debug, Subcommand)]
pub enum AdapterCmd {
    /// Rank parameters by relative Frobenius change between two weight dirs.
    Delta(DeltaArgs),
    /// Per-block cosine between camera effect vectors of the toy network.
    Probe(ProbeArgs),
    /// Principal-angle overlap of camera and trajectory updates per block.
    Overlap(OverlapArgs),
    /// Write a toy base weight set and a planted spatial-pathway fine-tune.
    MakeFixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct DeltaArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub ft: PathBuf,
    /// Rows written to the CSV (0 = all).
    #[arg(long, default_value_t = 30)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Pose-trajectory coupling of the last two blocks (0 = separable).
    #[arg(long, default_value_t = 0.0)]
    pub coupling: f64,
    /// Number of random (A, B, α, β) probe sets.
    #[arg(long, default_value_t = 16)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    #[arg(long, default_value_t = 0.0)]
    pub coupling: f64,
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 8)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Relative change applied to non-spatial parameters.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// How much larger the spatial-pathway change is.
    #[arg(long, default_value_t = 10.0)]
    pub ratio: f64,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
}

pub fn run(ctx: &mut RunContext, cmd: &AdapterCmd) -> CmdResult<()> {
    match cmd {
        AdapterCmd::Delta(a) => delta(ctx, a),
        AdapterCmd::Probe(a) => probe(ctx, a),
        AdapterCmd::Overlap(a) => overlap(ctx, a),
        AdapterCmd::MakeFixture(a) => make_fixture(ctx, a),
    }
}

fn delta(ctx: &mut RunContext, args: &DeltaArgs) -> CmdResult<()> {
    ctx.set_config(json!({ "top": args.top }));
    for dir in [&args.base, &args.ft] {
        ctx.record_dir(dir)?;
    }
    let base = adapter::read_weight_dir(&args.base).input("base weights")?;
    let ft = adapter::read_weight_dir(&args.ft).input("fine-tuned weights")?;
    let report = adapter::delta_rel(&base, &ft);
    let n = if args.top == 0 { report.rows.len() } else { args.top };
    ctx.write_csv("delta.csv", &DELTA_CSV_HEADER, report.csv_records().into_iter().take(n).map(|r| r.to_vec()))?;
    ctx.write_json("delta.json", &report)?;
    for r in report.top(10) {
        println!("{:>3}  {:.6e}  {:<9}  {}", r.rank, r.delta_rel, r.category.label(), r.name);
    }
    if !report.flagged.is_empty() {
        eprintln!("{} parameters flagged and excluded from ranking", report.flagged.len());
    }
    if report.rows.is_empty() {
        return Err(Failure::MetricUndefined("no parameter has a defined relative change".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CosineRow {
    block: usize,
    mean_cosine: Option<f64>,
    min_cosine: Option<f64>,
    defined: usize,
    undefined: usize,
}

fn probe_net(coupling: f64, seed: u64) -> ToyPathwayNet {
    if coupling == 0.0 {
        ToyPathwayNet::separable(seed)
    } else {
        ToyPathwayNet::coupled(coupling, seed)
    }
}

fn probe(ctx: &mut RunContext, args: &ProbeArgs) -> CmdResult<()> {
    ctx.set_config(json!({ "coupling": args.coupling, "pairs": args.pairs, "blocks": TOY_BLOCKS, "dim": TOY_DIM }));
    let net = probe_net(args.coupling, ctx.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.wrapping_add(1));
    let mut per_block: Vec<Vec<Option<f64>>> = vec![Vec::new(); net.num_blocks()];
    for _ in 0..args.pairs {
        let pa = adapter::integer_probe(TOY_POSE_DIM, &mut rng);
        let pb = adapter::integer_probe(TOY_POSE_DIM, &mut rng);
        let ta = adapter::integer_probe(TOY_TRAJ_DIM, &mut rng);
        let tb = adapter::integer_probe(TOY_TRAJ_DIM, &mut rng);
        for (l, c) in adapter::camera_invariance_cosine(&net, &pa, &pb, &ta, &tb).internal("probe")?.into_iter().enumerate() {
            per_block[l].push(c);
        }
    }
    let rows: Vec<CosineRow> = per_block
        .iter()
        .enumerate()
        .map(|(block, cs)| {
            let defined: Vec<f64> = cs.iter().flatten().copied().collect();
            CosineRow {
                block,
                mean_cosine: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                min_cosine: defined.iter().copied().reduce(f64::min),
                defined: defined.len(),
                undefined: cs.len() - defined.len(),
            }
        })
        .collect();
    let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
    ctx.write_csv(
        "cosine.csv",
        &["block", "mean_cosine", "min_cosine", "defined", "undefined"],
        rows.iter().map(|r| vec![r.block.to_string(), opt(r.mean_cosine), opt(r.min_cosine), r.defined.to_string(), r.undefined.to_string()]),
    )?;
    ctx.write_json("cosine.json", &rows)?;
    for r in &rows {
        println!("block {}\tmean {}\tmin {}", r.block, opt(r.mean_cosine), opt(r.min_cosine));
    }
    if rows.iter().all(|r| r.defined == 0) {
        return Err(Failure::MetricUndefined("every camera effect vector was zero".into()));
    }
    Ok(())
}

fn overlap(ctx: &mut RunContext, args: &OverlapArgs) -> CmdResult<()> {
    ctx.set_config(json!({ "coupling": args.coupling, "dims": args.dims, "samples": args.samples }));
    let net = probe_net(args.coupling, ctx.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.wrapping_add(2));
    let poses: Vec<DVector<f64>> = (0..args.samples).map(|_| adapter::integer_probe(TOY_POSE_DIM, &mut rng)).collect();
    let trajs: Vec<DVector<f64>> = (0..args.samples).map(|_| adapter::integer_probe(TOY_TRAJ_DIM, &mut rng)).collect();
    let base = DVector::zeros(TOY_POSE_DIM);
    let null = DVector::zeros(TOY_TRAJ_DIM);
    let mut reports = Vec::new();
    for block in 0..net.num_blocks() {
        let (cam, traj) = adapter::pathway_updates(&net, block, &base, &null, &poses, &trajs).internal("updates")?;
        let r = adapter::subspace_overlap(&cam, &traj, args.dims).metric(&format!("block {block}"))?;
        for w in &r.warnings {
            eprintln!("block {block}: {w}");
        }
        reports.push((block, r));
    }
    ctx.write_csv(
        "overlap.csv",
        &["block", "overlap", "dims_requested", "dims_used"],
        reports.iter().map(|(b, r)| vec![b.to_string(), r.overlap.to_string(), r.dims_requested.to_string(), r.dims_used.to_string()]),
    )?;
    ctx.write_json("overlap.json", &reports.iter().map(|(b, r)| json!({ "block": b, "report": r })).collect::<Vec<_>>())?;
    for (b, r) in &reports {
        println!("block {b}\toverlap {:.6}", r.overlap);
    }
    Ok(())
}

fn make_fixture(ctx: &mut RunContext, args: &FixtureArgs) -> CmdResult<()> {
    ctx.set_config(json!({ "blocks": args.blocks, "dim": args.dim, "noise": args.noise, "ratio": args.ratio, "rank": args.rank }));
    let base = adapter::toy_weight_set(args.blocks, args.dim, ctx.seed);
    let ft = adapter::planted_spatial_finetune(&base, args.rank, args.noise, args.ratio, ctx.seed.wrapping_add(1));
    adapter::write_weight_dir(&ctx.out.join("base"), &base).input("writing base")?;
    adapter::write_weight_dir(&ctx.out.join("ft"), &ft).input("writing ft")?;
    ctx.note_output("base/");
    ctx.note_output("ft/");
    println!("wrote {} parameters to {}", base.len(), ctx.out.display());
    Ok(())
}
