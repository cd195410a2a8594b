mod adapter;
mod curate;
mod demo;
mod eval;
mod run;

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anchorloop_core::rollout::RolloutConfig;
use anchorloop_service::Store;
use clap::{Args, Parser, Subcommand};

use run::{Classify, CmdResult, Failure, RunContext};

#[derive(Debug, Parser)]
#[command(name = "anchorloop", version, about = "Trajectory-controlled rollouts: evaluation, curation, adapter analysis and serving")]
struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON file of parameter overrides for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a rollout and report trajectory error.
    EvalTraj(eval::EvalTrajArgs),
    /// Relative pose error of an estimated or perturbed camera path.
    EvalCamera(eval::EvalCameraArgs),
    /// Select training windows and query points from segmented clips.
    Curate(curate::CurateArgs),
    /// Weight-change ranking and toy pathway probes.
    #[command(subcommand)]
    Adapter(adapter::AdapterCmd),
    /// Serve the session API.
    Serve(ServeArgs),
    /// Look-away scenario with and without the memory filter.
    Demo(demo::DemoArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "ANCHORLOOP_HOST", default_value = "127.0.0.1")]
    host: String,
    /// 0 binds an ephemeral port.
    #[arg(long, env = "ANCHORLOOP_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "ANCHORLOOP_DATA_DIR", default_value = "sessions")]
    data_dir: PathBuf,
    #[arg(long, env = "ANCHORLOOP_CHUNK_SIZE")]
    chunk_size: Option<usize>,
    #[arg(long, env = "ANCHORLOOP_TAU")]
    tau: Option<f64>,
    #[arg(long, env = "ANCHORLOOP_K")]
    k: Option<usize>,
    #[arg(long, env = "ANCHORLOOP_SIGMA_C")]
    sigma_c: Option<f64>,
    #[arg(long, env = "ANCHORLOOP_CELL_SIZE")]
    cell_size: Option<u32>,
}

fn serve(args: &ServeArgs, config: Option<serde_json::Value>, seed: Option<u64>) -> CmdResult<()> {
    let mut defaults = match config {
        Some(v) => anchorloop_service::session::merge_config(&RolloutConfig::default(), &v)
            .map_err(|e| Failure::Input(format!("--config: {}", e.message)))?,
        None => RolloutConfig::default(),
    };
    if let Some(v) = args.chunk_size {
        defaults.chunk_size = v;
    }
    if let Some(v) = args.tau {
        defaults.memory.tau = v;
    }
    if let Some(v) = args.k {
        defaults.memory.k = v;
    }
    if let Some(v) = args.sigma_c {
        defaults.memory.sigma_c = v;
    }
    if let Some(v) = args.cell_size {
        defaults.cell_size = v;
    }
    if let Some(s) = seed {
        defaults.seed = s;
    }
    defaults.validate().input("default config")?;
    let store = Arc::new(Store::open(&args.data_dir, defaults).input("opening data dir")?);
    let runtime = tokio::runtime::Runtime::new().internal("starting runtime")?;
    runtime.block_on(async move {
        let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().input("listen address")?;
        let listener = tokio::net::TcpListener::bind(addr).await.input("binding")?;
        let local = listener.local_addr().internal("local address")?;
        let mut stdout = std::io::stdout();
        writeln!(stdout, "listening on http://{local}").and_then(|_| stdout.flush()).ok();
        anchorloop_service::serve(listener, store, shutdown_signal()).await.internal("serving")?;
        eprintln!("sessions flushed, shutting down");
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        tokio::signal::ctrl_c().await.ok();
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => match std::fs::read_to_string(p).map_err(|e| e.to_string()).and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string())) {
            Ok(v) => Some(v),
            Err(e) => {
                eprintln!("error: --config {}: {e}", p.display());
                return ExitCode::from(2);
            }
        },
        None => None,
    };
    if let Command::Serve(args) = &cli.command {
        return match serve(args, config, cli.seed) {
            Ok(()) => ExitCode::SUCCESS,
            Err(f) => {
                eprintln!("error: {}", f.message());
                ExitCode::from(f.exit_code())
            }
        };
    }

    let name = match &cli.command {
        Command::EvalTraj(_) => "eval-traj",
        Command::EvalCamera(_) => "eval-camera",
        Command::Curate(_) => "curate",
        Command::Adapter(adapter::AdapterCmd::Delta(_)) => "adapter delta",
        Command::Adapter(adapter::AdapterCmd::Probe(_)) => "adapter probe",
        Command::Adapter(adapter::AdapterCmd::Overlap(_)) => "adapter overlap",
        Command::Adapter(adapter::AdapterCmd::MakeFixture(_)) => "adapter make-fixture",
        Command::Demo(_) => "demo",
        Command::Serve(_) => unreachable!("handled above"),
    };
    let mut ctx = RunContext::new(name, cli.out.clone(), cli.seed.unwrap_or(0), config);
    let result = match &cli.command {
        Command::EvalTraj(a) => eval::eval_traj(&mut ctx, a),
        Command::EvalCamera(a) => eval::eval_camera(&mut ctx, a),
        Command::Curate(a) => curate::curate(&mut ctx, a),
        Command::Adapter(c) => adapter::run(&mut ctx, c),
        Command::Demo(a) => demo::demo(&mut ctx, a),
        Command::Serve(_) => unreachable!("handled above"),
    };
    if let Err(e) = ctx.finish(&result) {
        eprintln!("error: writing manifest: {e}");
        return ExitCode::from(3);
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
