use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use boxpose::network::Aggregation;
use boxpose::pipeline::{
    eval, infer, load_dataset, load_model, save_model, train, write_bop_results, RunConfig,
};
use boxpose::selftest::run_selftest;

#[derive(Parser)]
#[command(name = "boxpose", version, about = "Multi-object 6D pose estimation from RGB images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write its checkpoint.
    Train(RunArgs),
    /// Detect objects and estimate poses; writes detections and BOP result rows.
    Infer(RunArgs),
    /// Run inference and score it against the dataset's ground truth.
    Eval(RunArgs),
    /// Gradient checks and geometry roundtrips; exits nonzero on failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default configuration.
    Config,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; also holds the checkpoint unless `--checkpoint` is given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    icp: Option<Toggle>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Pfpn,
    Fpn,
    None,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Pfpn => Aggregation::Pfpn,
            AggregationArg::Fpn => Aggregation::Fpn,
            AggregationArg::None => Aggregation::None,
        }
    }
}

impl RunArgs {
    /// Configuration file with command-line overrides applied.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.checkpoint {
            cfg.paths.checkpoint = p.clone();
        }
        if let Some(o) = &self.out {
            cfg.paths.output = o.clone();
            cfg.paths.train_log = o.join("train_log.jsonl");
            if self.checkpoint.is_none() {
                cfg.paths.checkpoint = o.join("model.ckpt");
            }
        }
        if let Some(t) = self.icp {
            cfg.infer.icp = matches!(t, Toggle::On);
        }
        if let Some(a) = self.aggregation {
            cfg.network.pyramid.aggregation = a.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_train(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let dataset = load_dataset(&cfg.dataset, cfg.seed)?;
    info!("training on {} images of {} objects", dataset.samples.len(), dataset.meshes.len());
    let (net, report) = train::train(&cfg, &dataset, true)?;
    save_model(&cfg.paths.checkpoint, &net)?;
    cfg.save(&cfg.paths.output.join("config.toml"))?;
    train::write_report(&cfg.paths.output.join("train_report.json"), &report)?;
    println!(
        "trained {} steps over {} epochs; final loss {:.6}; checkpoint {}",
        report.steps,
        report.epochs,
        report.final_loss().unwrap_or(f64::NAN),
        cfg.paths.checkpoint.display()
    );
    Ok(())
}

fn load_for_inference(args: &RunArgs) -> Result<(RunConfig, boxpose::pipeline::Dataset, boxpose::PoseNet32)> {
    let cfg = args.config()?;
    let net = load_model(&cfg.paths.checkpoint, Some(&cfg.network))
        .with_context(|| format!("loading checkpoint {}", cfg.paths.checkpoint.display()))?;
    let dataset = load_dataset(&cfg.dataset, cfg.seed)?;
    Ok((cfg, dataset, net))
}

fn run_infer(args: &RunArgs) -> Result<()> {
    let (cfg, dataset, net) = load_for_inference(args)?;
    let detections = infer::infer(&net, &dataset, &dataset.samples, &cfg.infer)?;
    let out = &cfg.paths.output;
    write_bop_results(&out.join("results.csv"), &detections)?;
    let path = out.join("detections.json");
    std::fs::write(&path, serde_json::to_string_pretty(&detections)?).with_context(|| format!("writing {}", path.display()))?;
    let n: usize = detections.iter().map(|d| d.records.len()).sum();
    println!("{n} detections in {} images written to {}", detections.len(), out.display());
    Ok(())
}

fn run_eval(args: &RunArgs) -> Result<()> {
    let (cfg, dataset, net) = load_for_inference(args)?;
    let outcome = eval::evaluate_dataset(&net, &dataset, &cfg.infer, &cfg.eval)?;
    eval::write_outputs(&cfg.paths.output, &outcome)?;
    print!("{}", outcome.report.to_text());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        Command::Selftest { seed } => {
            let report = run_selftest(*seed);
            print!("{}", report.to_text());
            return if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
