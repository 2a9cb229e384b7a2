use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use layerpar::metrics::ReportFormat;
use layerpar::partitioner::{dump, partition_with, CostModel};
use layerpar::run::{bench_sweep, load_model, run, write_sweep_csv, RunSpec, StageChoice, SweepSpec, TransportSpec};
use layerpar::trainer::{parse_lr_schedule, Strategy, TrainConfig, TrainError};

/// Layer-parallel, data-parallel and hybrid training of small layer graphs.
///
/// Every flag can also be set through an environment variable named
/// `LAYERPAR_<FLAG>`, e.g. `LAYERPAR_NUM_PARTITIONS=4`.
#[derive(Parser, Debug)]
#[command(name = "layerpar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write per-step metrics.
    Run(RunArgs),
    /// Sweep a grid of strategies and measure img/sec.
    Bench(BenchArgs),
    /// Print how a model is split into partitions and which edges cross.
    Plan(PlanArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Data,
    Model,
    Hybrid,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Data => Strategy::Data,
            StrategyArg::Model => Strategy::Model,
            StrategyArg::Hybrid => Strategy::Hybrid,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransportArg {
    Sim,
    Socket,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CostArg {
    Params,
    Uniform,
}

impl From<CostArg> for CostModel {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::Params => CostModel::ParamsPlusActivations,
            CostArg::Uniform => CostModel::Uniform,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Bundled model name or path to a TOML model config.
    #[arg(long, env = "LAYERPAR_MODEL", default_value = "two_layer_mlp")]
    model: String,
    /// blobs[:n=..,classes=..,dims=..,spread=..] | spiral[:n=..,classes=..,noise=..] |
    /// idx:IMAGES,LABELS[,TEST_IMAGES,TEST_LABELS] | csv:PATH
    #[arg(long, env = "LAYERPAR_DATA", default_value = "blobs")]
    data: String,
    #[arg(long, env = "LAYERPAR_STRATEGY", value_enum, default_value = "model")]
    strategy: StrategyArg,
    #[arg(long, env = "LAYERPAR_NUM_PARTITIONS", default_value_t = 1)]
    num_partitions: usize,
    #[arg(long, env = "LAYERPAR_NUM_REPLICAS", default_value_t = 1)]
    num_replicas: usize,
    #[arg(long, env = "LAYERPAR_PIPELINE_STAGES", default_value_t = 1)]
    pipeline_stages: usize,
    /// Per replica.
    #[arg(long, env = "LAYERPAR_BATCH_SIZE", default_value_t = 32)]
    batch_size: usize,
    #[arg(long, env = "LAYERPAR_EPOCHS", default_value_t = 1)]
    epochs: usize,
    /// Comma-separated EPOCH:LR pairs.
    #[arg(long, env = "LAYERPAR_LR_SCHEDULE", default_value = "0:0.05")]
    lr_schedule: String,
    #[arg(long, env = "LAYERPAR_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "LAYERPAR_TRANSPORT", value_enum, default_value = "sim")]
    transport: TransportArg,
    /// This process's rank (socket transport).
    #[arg(long, env = "LAYERPAR_RANK")]
    rank: Option<usize>,
    /// Number of ranks; must equal partitions × replicas.
    #[arg(long, env = "LAYERPAR_WORLD")]
    world: Option<usize>,
    /// HOST:PORT where rank 0 listens (socket transport).
    #[arg(long, env = "LAYERPAR_RENDEZVOUS")]
    rendezvous: Option<String>,
    /// Metrics file.
    #[arg(long, env = "LAYERPAR_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "LAYERPAR_FORMAT", value_enum, default_value = "csv")]
    format: FormatArg,
    /// Per-peer message buffer of the simulated transport; 0 is rendezvous.
    #[arg(long, env = "LAYERPAR_BUFFER_BOUND", default_value_t = layerpar::comm::DEFAULT_BUFFER_BOUND)]
    buffer_bound: usize,
    #[arg(long, env = "LAYERPAR_TEST_FRACTION", default_value_t = layerpar::data::DEFAULT_TEST_FRACTION)]
    test_fraction: f64,
    /// Limit for each blocking receive and for the rendezvous.
    #[arg(long, env = "LAYERPAR_TIMEOUT_SECS", default_value_t = 120)]
    timeout_secs: u64,
    /// Start replica allreduces while backward is still running.
    #[arg(long, env = "LAYERPAR_OVERLAP_ALLREDUCE")]
    overlap_allreduce: bool,
    #[arg(long, env = "LAYERPAR_COST_MODEL", value_enum, default_value = "params")]
    cost_model: CostArg,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, env = "LAYERPAR_MODEL", default_value = "bench_heavy")]
    model: String,
    #[arg(long, value_delimiter = ',', default_value = "model")]
    strategies: Vec<StrategyArg>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    partitions: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    replicas: Vec<usize>,
    /// Stage counts; `batch` means one stage per sample.
    #[arg(long, value_delimiter = ',', default_value = "1,batch")]
    stages: Vec<StageChoice>,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    batch_sizes: Vec<usize>,
    /// Timed steps per repetition (after one warmup step).
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long, env = "LAYERPAR_SEED", default_value_t = 1)]
    seed: u64,
    /// CSV output; stdout when absent.
    #[arg(long, env = "LAYERPAR_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long, env = "LAYERPAR_MODEL", default_value = "two_layer_mlp")]
    model: String,
    #[arg(long, env = "LAYERPAR_NUM_PARTITIONS", default_value_t = 1)]
    num_partitions: usize,
    #[arg(long, env = "LAYERPAR_NUM_REPLICAS", default_value_t = 1)]
    num_replicas: usize,
    #[arg(long, env = "LAYERPAR_COST_MODEL", value_enum, default_value = "params")]
    cost_model: CostArg,
}

fn run_spec(a: RunArgs) -> Result<RunSpec> {
    let train = TrainConfig {
        strategy: a.strategy.into(),
        num_partitions: a.num_partitions,
        num_replicas: a.num_replicas,
        pipeline_stages: a.pipeline_stages,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr_schedule: parse_lr_schedule(&a.lr_schedule).map_err(anyhow::Error::msg).context("--lr-schedule")?,
        seed: a.seed,
        overlap_allreduce: a.overlap_allreduce,
        cost_model: a.cost_model.into(),
    };
    if let Some(world) = a.world {
        if world != train.world_size() {
            return Err(TrainError::WorldSize {
                expected: train.world_size(),
                got: world,
            }
            .into());
        }
    }
    let transport = match a.transport {
        TransportArg::Sim => TransportSpec::Sim {
            buffer_bound: a.buffer_bound,
        },
        TransportArg::Socket => TransportSpec::Socket {
            rank: a.rank.context("--rank is required with --transport socket")?,
            world: a.world.unwrap_or(train.world_size()),
            rendezvous: a.rendezvous.context("--rendezvous HOST:PORT is required with --transport socket")?,
        },
    };
    let mut spec = RunSpec::new(a.model, a.data, train);
    spec.transport = transport;
    spec.out = a.out;
    spec.format = match a.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Jsonl => ReportFormat::Jsonl,
    };
    spec.test_fraction = a.test_fraction;
    spec.timeout_secs = a.timeout_secs;
    Ok(spec)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let spec = run_spec(a)?;
    spec.validate()?;
    info!("run: {} world {} transport {}", spec.model, spec.train.world_size(), spec.transport);
    let outcome = run(&spec)?;
    for m in &outcome.metrics {
        println!(
            "step {} epoch {} loss {:.17e} img/s {:.1} ms {:.3}",
            m.step, m.epoch, m.loss, m.images_per_sec, m.wall_ms
        );
    }
    if let Some(acc) = outcome.test_accuracy {
        println!("test_accuracy {acc:.6}");
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let spec = SweepSpec {
        model: a.model,
        strategies: a.strategies.into_iter().map(Into::into).collect(),
        partitions: a.partitions,
        replicas: a.replicas,
        stages: a.stages,
        batch_sizes: a.batch_sizes,
        steps: a.steps,
        repetitions: a.repetitions,
        seed: a.seed,
    };
    let rows = bench_sweep(&spec)?;
    match a.out {
        Some(p) => {
            let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
            write_sweep_csv(&rows, BufWriter::new(f))?;
        }
        None => write_sweep_csv(&rows, io::stdout().lock())?,
    }
    if rows.iter().all(|r| !r.ok()) {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let plan = partition_with(&model, a.num_partitions, a.cost_model.into())?.with_replicas(a.num_replicas)?;
    print!("{}", dump(&model, &plan));
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LAYERPAR_LOG", "warn")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Plan(a) => cmd_plan(a),
    };
    if let Err(e) = r {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
