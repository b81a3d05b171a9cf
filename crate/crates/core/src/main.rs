use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use vdl_surrogate::io::{read_json, write_json};
use vdl_surrogate::pipeline::{PipelineConfig, Run, Session, RUN_DIR_ENV};
use vdl_surrogate::render::{Camera, TransferFunction};
use vdl_surrogate::service::{serve, AppState};

/// View-dependent latent surrogate pipeline.
#[derive(Parser)]
#[command(name = "vdls", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run directory holding every artifact.
    #[arg(long, global = true, env = RUN_DIR_ENV, default_value = "runs/default")]
    run_dir: PathBuf,
    /// JSON pipeline configuration; replaces the one recorded in the run directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set rae.epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "FIELD=VALUE")]
    overrides: Vec<String>,
    /// Recompute fresh stages and accept artifacts from other configurations.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args, Clone)]
struct Query {
    /// Comma-separated parameter values; defaults to the centre of each range.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    params: Option<Vec<f64>>,
    /// Viewing direction `x,y,z`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    viewpoint: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the synthetic ensemble and assign splits.
    GenEnsemble,
    /// Train one ray autoencoder per axis view.
    TrainRae,
    /// Encode the training members into per-view latent fields.
    EncodeLatents,
    /// Train one latent predictor per axis view.
    TrainPredictor,
    /// Run every training stage that is not already up to date.
    Train,
    /// Predict and fuse a volume; writes it under `infer/`.
    Infer(Query),
    /// Render a predicted volume to PNG.
    Render {
        #[command(flatten)]
        query: Query,
        /// Transfer function JSON; defaults to the built-in high-opacity map.
        #[arg(long)]
        tf: Option<PathBuf>,
        /// Camera JSON; overrides `--viewpoint`.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Compare surrogate predictions and interpolation baselines on the test split.
    Evaluate,
    /// Sensitivity of the view-data L1 norm to one parameter.
    Sensitivity {
        #[command(flatten)]
        query: Query,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Serve the HTTP exploration API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Maximum concurrent inference requests; defaults to the core count.
        #[arg(long)]
        concurrency: Option<usize>,
        /// Directory of static frontend assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn open_run(g: &Global) -> Result<Run> {
    let recorded = g.run_dir.join("config.json");
    let mut config: PipelineConfig = match &g.config {
        Some(p) => read_json(p).with_context(|| format!("reading configuration {}", p.display()))?,
        None if recorded.exists() => read_json(&recorded)?,
        None => PipelineConfig::default(),
    };
    for o in &g.overrides {
        config.set(o)?;
    }
    let mut run = Run::new(&g.run_dir, config).context("invalid configuration")?;
    run.force = g.force;
    Ok(run)
}

fn viewpoint(run: &Run, q: &Query) -> Result<[f64; 3]> {
    match &q.viewpoint {
        Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        Some(v) => bail!("--viewpoint needs three components x,y,z, got {}", v.len()),
        None => Ok(run.config.evaluate.viewpoint),
    }
}

fn params(session: &Session, q: &Query) -> Vec<f64> {
    q.params.clone().unwrap_or_else(|| Run::default_params(session.space()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let run = open_run(&cli.global)?;
    match cli.command {
        Command::GenEnsemble => print_json(&run.gen_ensemble()?)?,
        Command::TrainRae => print_json(&run.train_rae()?)?,
        Command::EncodeLatents => print_json(&run.encode_latents()?)?,
        Command::TrainPredictor => print_json(&run.train_predictor()?)?,
        Command::Train => {
            run.train_all()?;
            print_json(&run.summary(vdl_surrogate::pipeline::Stage::Predictor)?)?;
        }
        Command::Infer(q) => {
            let vp = viewpoint(&run, &q)?;
            let s = Session::load(run)?;
            print_json(&s.infer(&params(&s, &q), vp)?)?;
        }
        Command::Render { query, tf, camera, output } => {
            let tf = match tf {
                Some(p) => read_json(&p).with_context(|| format!("reading transfer function {}", p.display()))?,
                None => TransferFunction::high_opacity(),
            };
            let camera: Camera = match camera {
                Some(p) => read_json(&p).with_context(|| format!("reading camera {}", p.display()))?,
                None => run.camera(viewpoint(&run, &query)?)?,
            };
            let settings = run.render_settings();
            let s = Session::load(run)?;
            let p = params(&s, &query);
            let img = s.render(&p, &camera, &tf, &settings)?;
            let out = output.unwrap_or_else(|| s.run.root.join("render").join("render.png"));
            img.save_png(&out)?;
            print_json(&serde_json::json!({ "image": out, "provenance": s.provenance(&p) }))?;
        }
        Command::Evaluate => {
            let report = run.evaluate()?;
            print_json(&serde_json::json!({
                "report": run.root.join("evaluate").join("report.json"),
                "mean_psnr": report.mean_psnr,
            }))?;
        }
        Command::Sensitivity { query, index, n, output } => {
            let s = Session::load(run)?;
            let p = params(&s, &query);
            let curve = s.sensitivity(&p, index, n)?;
            let out = output.unwrap_or_else(|| s.run.root.join("sensitivity").join(format!("{}.csv", curve.name)));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, curve.to_csv())?;
            write_json(&out.with_extension("json"), &curve)?;
            print_json(&serde_json::json!({ "csv": out, "mean": curve.mean() }))?;
        }
        Command::Serve { addr, concurrency, static_dir } => {
            if let Some(d) = &static_dir {
                if !d.is_dir() {
                    bail!("static directory {} does not exist", d.display());
                }
            }
            let session = Session::load(run).context("cannot start the service")?;
            let n = concurrency.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
            let state = AppState::new(session, n);
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr, static_dir))?;
        }
    }
    Ok(())
}
