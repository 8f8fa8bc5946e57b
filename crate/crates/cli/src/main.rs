//! Command-line driver for the two-stage link-prediction pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kgrerank::config::{ConfigFile, RunConfig, ToggleOverrides};
use kgrerank::eval::RankingMetrics;
use kgrerank::kg::{KgKind, write_dataset};
use kgrerank::pipeline::{self, AblationGrid};
use kgrerank::synthetic::{SyntheticConfig, generate};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "KGRERANK_THREADS";

#[derive(Parser)]
#[command(
    name = "kgrerank",
    version,
    about = "KGE candidate generation with textual re-ranking"
)]
struct Cli {
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a dataset, print its counts.
    Ingest(RunArgs),
    /// Train the first-stage KGE and write kge.ckpt.
    TrainKge(RunArgs),
    /// Build re-ranking samples from the trained KGE.
    BuildSamples(RunArgs),
    /// Train the built-in re-ranker on samples.jsonl.
    TrainRerank(RunArgs),
    /// Evaluate Base and re-ranked metrics on the test split.
    Eval(RunArgs),
    /// Evaluate a grid of configurations against the trained KGE.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// components, lambda, or k.
        #[arg(long, default_value = "components")]
        grid: AblationGrid,
    },
    /// Run every stage end to end.
    Pipeline(RunArgs),
    /// Write a seeded synthetic dataset.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        noise: usize,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    kind: Option<KgKind>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Number of re-ranked candidates.
    #[arg(short = 'k', long = "k")]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k_q: Option<usize>,
    #[arg(long)]
    k_c: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    /// KGE embedding width.
    #[arg(long)]
    d: Option<usize>,
    /// Re-ranker token embedding width.
    #[arg(long)]
    d_r: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    kge_epochs: Option<usize>,
    #[arg(long)]
    kge_batch: Option<usize>,
    #[arg(long)]
    rr_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_kge: Option<f64>,
    #[arg(long)]
    lr_rr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embed_buckets: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    qci: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    cci: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    qp: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    cp: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    cg: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    dp: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    gold_first: Option<bool>,
}

impl RunArgs {
    fn flags(&self) -> ConfigFile {
        let toggles = ToggleOverrides {
            qci: self.qci,
            cci: self.cci,
            qp: self.qp,
            cp: self.cp,
            cg: self.cg,
            dp: self.dp,
            gold_first: self.gold_first,
        };
        ConfigFile {
            dataset_dir: self.dataset_dir.clone(),
            kind: self.kind,
            out_dir: self.out_dir.clone(),
            k: self.k,
            lambda: self.lambda,
            k_q: self.k_q,
            k_c: self.k_c,
            theta: self.theta,
            d: self.d,
            d_r: self.d_r,
            hidden: self.hidden,
            kge_epochs: self.kge_epochs,
            kge_batch: self.kge_batch,
            rr_epochs: self.rr_epochs,
            batch: self.batch,
            lr_kge: self.lr_kge,
            lr_rr: self.lr_rr,
            seed: self.seed,
            embed_buckets: self.embed_buckets,
            toggles: (toggles != ToggleOverrides::default()).then_some(toggles),
            embedder_cmd: None,
            generator_cmd: None,
        }
    }

    fn resolve(&self) -> kgrerank::Result<RunConfig> {
        let file = match &self.config {
            Some(p) => ConfigFile::read(p)?,
            None => ConfigFile::default(),
        };
        file.merge(self.flags()).resolve()
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building thread pool")?;
    }
    Ok(())
}

fn print_metrics_file(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out_dir.join(pipeline::METRICS_TEXT);
    print!(
        "{}",
        std::fs::read_to_string(&path).with_context(|| path.display().to_string())?
    );
    Ok(())
}

fn run(command: Command) -> kgrerank::Result<()> {
    let config = |args: &RunArgs| args.resolve().map_err(|e| e.in_stage("config"));
    match command {
        Command::Ingest(args) => {
            let cfg = config(&args)?;
            let (kg, summary) = pipeline::ingest(&cfg)?;
            let overlap = kg.split_overlap();
            println!("{summary}");
            if overlap > 0 {
                println!("split overlap: {overlap}");
            }
        }
        Command::TrainKge(args) => {
            let cfg = config(&args)?;
            pipeline::write_config(&cfg).map_err(|e| e.in_stage("train-kge"))?;
            let (kg, _) = pipeline::ingest(&cfg)?;
            pipeline::train_kge_stage(&cfg, &kg)?;
            println!("wrote {}", cfg.out_dir.join(pipeline::KGE_CKPT).display());
        }
        Command::BuildSamples(args) => {
            let cfg = config(&args)?;
            let (kg, _) = pipeline::ingest(&cfg)?;
            let stage = |e: kgrerank::Error| e.in_stage("build-samples");
            pipeline::write_config(&cfg).map_err(stage)?;
            let kge = pipeline::load_kge(&cfg, &kg).map_err(stage)?;
            let set = pipeline::build_samples_stage(&cfg, &kg, &kge)?;
            println!(
                "wrote {} samples ({} without gold among candidates)",
                set.samples.len(),
                set.gold_missing
            );
        }
        Command::TrainRerank(args) => {
            let cfg = config(&args)?;
            let (kg, _) = pipeline::ingest(&cfg)?;
            let stage = |e: kgrerank::Error| e.in_stage("train-rerank");
            pipeline::write_config(&cfg).map_err(stage)?;
            let samples = pipeline::load_samples(&cfg).map_err(stage)?;
            pipeline::train_rerank_stage(&cfg, &kg, &samples)?;
            println!(
                "wrote {}",
                cfg.out_dir.join(pipeline::RERANKER_CKPT).display()
            );
        }
        Command::Eval(args) => {
            let cfg = config(&args)?;
            let (kg, _) = pipeline::ingest(&cfg)?;
            let stage = |e: kgrerank::Error| e.in_stage("eval");
            pipeline::write_config(&cfg).map_err(stage)?;
            let kge = pipeline::load_kge(&cfg, &kg).map_err(stage)?;
            let needs_model = pipeline::reranks(&cfg.toggles) && cfg.generator_cmd.is_none();
            let model = if needs_model {
                Some(pipeline::load_reranker(&cfg).map_err(stage)?)
            } else {
                None
            };
            pipeline::eval_stage(&cfg, &kg, &kge, model.as_ref())?;
            print_metrics_file(&cfg)
                .map_err(|e| kgrerank::Error::InvalidArgument(e.to_string()).in_stage("eval"))?;
        }
        Command::Ablate { run, grid } => {
            let cfg = config(&run)?;
            let rows = pipeline::ablate(&cfg, grid)?;
            println!("{}", RankingMetrics::table_header());
            for r in &rows {
                let name = format!("{} k={} λ={}", r.key, r.eval_k, r.lambda);
                println!("{}", r.metrics.table_row(&name));
            }
        }
        Command::Pipeline(args) => {
            let cfg = config(&args)?;
            let summary = pipeline::run_pipeline(&cfg)?;
            print!("{}", pipeline::metrics_text(&summary, &cfg.toggles));
        }
        Command::GenSynthetic { out, seed, noise } => {
            let syn = generate(&SyntheticConfig {
                seed,
                noise_facts: noise,
                ..SyntheticConfig::default()
            })
            .map_err(|e| e.in_stage("gen-synthetic"))?;
            write_dataset(&syn.kg, &out).map_err(|e| e.in_stage("gen-synthetic"))?;
            println!("{}", syn.kg.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| level.into()),
        )
        .init();
    if let Err(e) = init_threads() {
        eprintln!("kgrerank: [setup] {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kgrerank: {e}");
            ExitCode::FAILURE
        }
    }
}
