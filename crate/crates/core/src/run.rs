//! Run configuration, the `run` driver and the benchmark sweep.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{SimConfig, SocketConfig, SocketTransport, DEFAULT_BUFFER_BOUND, DEFAULT_TIMEOUT};
use crate::data::{self, DataError, DataSource, Dataset, DatasetStream};
use crate::metrics::{build_id, MetricsError, MetricsLog, ReportFormat, RunHeader};
use crate::model_graph::{ModelError, ModelGraph};
use crate::tensor::Tensor;
use crate::trainer::{fit, fit_rank, FitOptions, StepMetrics, Strategy, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{field}: {detail}")]
    Invalid { field: String, detail: String },
    #[error("model {path}: {source}")]
    Model { path: String, source: ModelError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("rendezvous: {0}")]
    Rendezvous(crate::comm::CommError),
}

fn invalid(field: &str, detail: impl Into<String>) -> RunError {
    RunError::Invalid {
        field: field.into(),
        detail: detail.into(),
    }
}

/// Model configs shipped with the crate, addressable by name.
pub const BUNDLED_MODELS: [(&str, &str); 5] = [
    ("two_layer_mlp", include_str!("../configs/two_layer_mlp.toml")),
    ("resnet_toy", include_str!("../configs/resnet_toy.toml")),
    ("mlp_mnist", include_str!("../configs/mlp_mnist.toml")),
    ("mlp_spiral", include_str!("../configs/mlp_spiral.toml")),
    ("bench_heavy", include_str!("../configs/bench_heavy.toml")),
];

pub fn bundled_model(name: &str) -> Option<&'static str> {
    BUNDLED_MODELS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// A bundled model name or a path to a TOML model config.
pub fn load_model(name_or_path: &str) -> Result<ModelGraph, RunError> {
    let wrap = |source| RunError::Model {
        path: name_or_path.to_string(),
        source,
    };
    let text = match bundled_model(name_or_path) {
        Some(t) => t.to_string(),
        None => std::fs::read_to_string(name_or_path).map_err(|e| invalid("model", format!("{name_or_path}: {e}")))?,
    };
    ModelGraph::from_toml(&text).map_err(wrap)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransportSpec {
    Sim {
        buffer_bound: usize,
    },
    /// One process per rank.
    Socket {
        rank: usize,
        world: usize,
        rendezvous: String,
    },
}

impl fmt::Display for TransportSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportSpec::Sim { .. } => f.write_str("sim"),
            TransportSpec::Socket { .. } => f.write_str("socket"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: String,
    pub data: String,
    pub train: TrainConfig,
    pub transport: TransportSpec,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
    pub test_fraction: f64,
    pub timeout_secs: u64,
}

impl RunSpec {
    pub fn new(model: impl Into<String>, data: impl Into<String>, train: TrainConfig) -> Self {
        Self {
            model: model.into(),
            data: data.into(),
            train,
            transport: TransportSpec::Sim {
                buffer_bound: DEFAULT_BUFFER_BOUND,
            },
            out: None,
            format: ReportFormat::Csv,
            test_fraction: data::DEFAULT_TEST_FRACTION,
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
        }
    }

    /// Checks everything that can be checked without loading data or
    /// starting workers.
    pub fn validate(&self) -> Result<(), RunError> {
        self.train.validate()?;
        DataSource::from_str(&self.data)?;
        if bundled_model(&self.model).is_none() && !Path::new(&self.model).is_file() {
            return Err(invalid("model", format!("`{}` is neither a bundled model nor a file", self.model)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction", format!("{} is not in (0, 1)", self.test_fraction)));
        }
        if let TransportSpec::Socket { rank, world, rendezvous } = &self.transport {
            if *world != self.train.world_size() {
                return Err(TrainError::WorldSize {
                    expected: self.train.world_size(),
                    got: *world,
                }
                .into());
            }
            if rank >= world {
                return Err(invalid("rank", format!("{rank} is not below world size {world}")));
            }
            match rendezvous.rsplit_once(':') {
                Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {}
                _ => return Err(invalid("rendezvous", format!("`{rendezvous}` is not HOST:PORT"))),
            }
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs.max(1))
    }
}

/// Loads the dataset named by `source` and fits its samples to the model's
/// input shape when the feature counts agree.
pub fn load_data_for(model: &ModelGraph, source: &str, seed: u64, test_fraction: f64) -> Result<DatasetStream, RunError> {
    let src = DataSource::from_str(source)?;
    let mut s = data::load_dataset(&src, seed, test_fraction)?;
    if s.train.sample_shape() != model.input_shape() {
        let want: usize = model.input_shape().iter().product();
        let have: usize = s.train.sample_shape().iter().product();
        if want != have {
            return Err(invalid(
                "data",
                format!(
                    "samples have shape {:?} but the model expects {:?}",
                    s.train.sample_shape(),
                    model.input_shape()
                ),
            ));
        }
        s.train = s.train.reshape_samples(model.input_shape())?;
        s.test = s.test.reshape_samples(model.input_shape())?;
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Empty on socket ranks other than 0.
    pub metrics: Vec<StepMetrics>,
    pub test_accuracy: Option<f64>,
    pub model: Option<ModelGraph>,
}

pub fn run(spec: &RunSpec) -> Result<RunOutcome, RunError> {
    spec.validate()?;
    let model = load_model(&spec.model)?;
    let data = load_data_for(&model, &spec.data, spec.train.seed, spec.test_fraction)?;
    let opts = FitOptions {
        record_params: false,
        eval_chunk: Some(256),
    };
    let outcome = match &spec.transport {
        TransportSpec::Sim { buffer_bound } => {
            let sim = SimConfig {
                buffer_bound: *buffer_bound,
                timeout: spec.timeout(),
                trace: false,
            };
            let r = fit(&model, &data, &spec.train, &opts, sim)?;
            RunOutcome {
                metrics: r.metrics,
                test_accuracy: r.test_accuracy,
                model: Some(r.model),
            }
        }
        TransportSpec::Socket { rank, world, rendezvous } => {
            let cfg = SocketConfig {
                rendezvous: rendezvous.clone(),
                timeout: spec.timeout(),
            };
            let t = SocketTransport::connect(*rank, *world, &cfg).map_err(RunError::Rendezvous)?;
            let r = fit_rank(Arc::new(t), &model, &data, &spec.train, &opts)?;
            RunOutcome {
                metrics: r.metrics,
                test_accuracy: r.test_accuracy,
                model: r.model,
            }
        }
    };
    let is_root = !matches!(spec.transport, TransportSpec::Socket { rank, .. } if rank != 0);
    if let (Some(out), true) = (&spec.out, is_root) {
        let log = MetricsLog {
            header: RunHeader {
                run: serde_json::to_value(spec).expect("spec serializes"),
                world_size: spec.train.world_size(),
                build_id: build_id(),
            },
            steps: outcome.metrics.clone(),
        };
        log.write(out, spec.format)?;
    }
    Ok(outcome)
}

/// `Batch` means one stage per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageChoice {
    Fixed(usize),
    Batch,
}

impl StageChoice {
    pub fn resolve(self, batch: usize) -> usize {
        match self {
            StageChoice::Fixed(n) => n,
            StageChoice::Batch => batch,
        }
    }
}

impl FromStr for StageChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "batch" {
            return Ok(StageChoice::Batch);
        }
        s.parse().map(StageChoice::Fixed).map_err(|_| format!("`{s}`: expected a number or `batch`"))
    }
}

impl fmt::Display for StageChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageChoice::Fixed(n) => write!(f, "{n}"),
            StageChoice::Batch => f.write_str("batch"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub model: String,
    pub strategies: Vec<Strategy>,
    pub partitions: Vec<usize>,
    pub replicas: Vec<usize>,
    pub stages: Vec<StageChoice>,
    pub batch_sizes: Vec<usize>,
    /// Timed steps per repetition; one extra warmup step runs first.
    pub steps: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            strategies: vec![Strategy::Model],
            partitions: vec![1],
            replicas: vec![1],
            stages: vec![StageChoice::Fixed(1)],
            batch_sizes: vec![32],
            steps: 4,
            repetitions: 3,
            seed: 1,
        }
    }
}

/// Column order of the sweep CSV.
pub const SWEEP_COLUMNS: [&str; 11] = [
    "strategy",
    "partitions",
    "replicas",
    "stages",
    "batch_size",
    "ebs",
    "img_per_sec",
    "relative",
    "runs",
    "steps",
    "status",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub partitions: usize,
    pub replicas: usize,
    pub stages: usize,
    pub batch_size: usize,
    pub ebs: usize,
    /// Median over repetitions; `NaN` for failed cells.
    pub img_per_sec: f64,
    /// Relative to the first successful row.
    pub relative: f64,
    pub runs: Vec<f64>,
    pub steps: usize,
    /// `ok` or the error.
    pub status: String,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn csv_line(&self) -> String {
        let runs: Vec<String> = self.runs.iter().map(|r| format!("{r:.3}")).collect();
        let status = self.status.replace(['"', '\n'], " ");
        format!(
            "{},{},{},{},{},{},{:.3},{:.4},{},{},\"{}\"",
            self.strategy,
            self.partitions,
            self.replicas,
            self.stages,
            self.batch_size,
            self.ebs,
            self.img_per_sec,
            self.relative,
            runs.join(";"),
            self.steps,
            status
        )
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", SWEEP_COLUMNS.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn bench_data(model: &ModelGraph, rows: usize, seed: u64) -> Result<DatasetStream, RunError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let features: usize = model.input_shape().iter().product();
    let classes = model.num_classes();
    let make = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Result<Dataset, RunError> {
        let mut shape = vec![n];
        shape.extend_from_slice(model.input_shape());
        let x = Tensor::new(shape, (0..n * features).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .map_err(DataError::from)?;
        let y = (0..n).map(|i| i % classes).collect();
        Ok(Dataset::new(x, y, classes)?)
    };
    let train = make(&mut rng, rows)?;
    let test = make(&mut rng, classes)?;
    Ok(DatasetStream::new(train, test, seed))
}

/// Runs every cell of the grid under the simulated transport and measures
/// img/sec, excluding the first (warmup) step of each repetition.
pub fn bench_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, RunError> {
    if spec.steps == 0 || spec.repetitions == 0 {
        return Err(invalid("steps", "steps and repetitions must be positive"));
    }
    let model = load_model(&spec.model)?;
    let mut rows = Vec::new();
    for &strategy in &spec.strategies {
        for &partitions in &spec.partitions {
            for &replicas in &spec.replicas {
                for &stage in &spec.stages {
                    for &batch_size in &spec.batch_sizes {
                        let train = TrainConfig {
                            strategy,
                            num_partitions: partitions,
                            num_replicas: replicas,
                            pipeline_stages: stage.resolve(batch_size),
                            batch_size,
                            epochs: 1,
                            lr_schedule: vec![(0, 1e-3)],
                            seed: spec.seed,
                            overlap_allreduce: true,
                            cost_model: Default::default(),
                        };
                        rows.push(bench_cell(&model, spec, train));
                    }
                }
            }
        }
    }
    let base = rows.iter().find(|r| r.ok()).map(|r| r.img_per_sec);
    for r in &mut rows {
        r.relative = base.map_or(f64::NAN, |b| r.img_per_sec / b);
    }
    Ok(rows)
}

fn bench_cell(model: &ModelGraph, spec: &SweepSpec, train: TrainConfig) -> SweepRow {
    let ebs = train.effective_batch_size();
    let mut row = SweepRow {
        strategy: train.strategy,
        partitions: train.num_partitions,
        replicas: train.num_replicas,
        stages: train.pipeline_stages,
        batch_size: train.batch_size,
        ebs,
        img_per_sec: f64::NAN,
        relative: f64::NAN,
        runs: Vec::new(),
        steps: spec.steps,
        status: "ok".into(),
    };
    let result = (|| -> Result<Vec<f64>, RunError> {
        train.validate()?;
        let data = bench_data(model, ebs * (spec.steps + 1), spec.seed)?;
        let mut runs = Vec::new();
        for _ in 0..spec.repetitions {
            let r = fit(model, &data, &train, &FitOptions::default(), SimConfig::default())?;
            let secs: f64 = r.metrics[1..].iter().map(|m| m.wall_ms / 1e3).sum();
            runs.push((ebs * (r.metrics.len() - 1)) as f64 / secs.max(1e-12));
        }
        Ok(runs)
    })();
    match result {
        Ok(mut runs) => {
            row.runs = runs.clone();
            row.img_per_sec = median(&mut runs);
        }
        Err(e) => row.status = e.to_string(),
    }
    log::info!("bench cell {}: {}", row.csv_line(), row.status);
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_train() -> TrainConfig {
        TrainConfig {
            strategy: Strategy::Model,
            num_partitions: 2,
            num_replicas: 1,
            pipeline_stages: 4,
            batch_size: 8,
            epochs: 1,
            lr_schedule: vec![(0, 0.1)],
            seed: 3,
            overlap_allreduce: false,
            cost_model: Default::default(),
        }
    }

    #[test]
    fn bundled_models_build() {
        for (name, _) in BUNDLED_MODELS {
            let m = load_model(name).unwrap();
            assert!(m.len() >= 4, "{name}");
        }
        let toy = load_model("resnet_toy").unwrap();
        let adds = toy
            .layers()
            .iter()
            .filter(|l| l.kind == crate::model_graph::LayerKind::Add)
            .count();
        let dense = toy.param_layers().count();
        assert_eq!((adds, dense), (2, 8));
    }

    #[test]
    fn run_logs_every_step_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = RunSpec::new("two_layer_mlp", "blobs:n=80,classes=3,dims=4", small_train());
        spec.out = Some(dir.path().join("a.csv"));
        let a = run(&spec).unwrap();
        assert_eq!(a.metrics.len(), 8);
        spec.out = Some(dir.path().join("b.jsonl"));
        spec.format = ReportFormat::Jsonl;
        run(&spec).unwrap();
        let la = MetricsLog::read(&dir.path().join("a.csv")).unwrap();
        let lb = MetricsLog::read(&dir.path().join("b.jsonl")).unwrap();
        let bits = |l: &MetricsLog| l.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&la), bits(&lb));
        assert_eq!(la.header.world_size, 2);
        assert!(la.steps.iter().all(|s| s.loss.is_finite()));
    }

    #[test]
    fn socket_world_mismatch_fails_validation() {
        let mut spec = RunSpec::new("two_layer_mlp", "blobs", TrainConfig {
            strategy: Strategy::Hybrid,
            num_replicas: 2,
            ..small_train()
        });
        spec.transport = TransportSpec::Socket {
            rank: 0,
            world: 3,
            rendezvous: "127.0.0.1:1".into(),
        };
        assert!(matches!(run(&spec), Err(RunError::Train(TrainError::WorldSize { expected: 4, got: 3 }))));
        spec.transport = TransportSpec::Socket {
            rank: 0,
            world: 4,
            rendezvous: "nowhere".into(),
        };
        assert!(matches!(spec.validate(), Err(RunError::Invalid { .. })));
        let bad_model = RunSpec::new("no_such_model", "blobs", small_train());
        assert!(matches!(bad_model.validate(), Err(RunError::Invalid { .. })));
    }

    #[test]
    fn data_is_reshaped_to_the_model_input() {
        let m = load_model("mlp_mnist").unwrap();
        assert!(load_data_for(&m, "blobs:n=20,dims=784", 1, 0.2).is_ok());
        assert!(load_data_for(&m, "blobs:n=20,dims=5", 1, 0.2).is_err());
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let mut spec = SweepSpec::new("two_layer_mlp");
        spec.strategies = vec![Strategy::Data, Strategy::Model];
        spec.partitions = vec![1, 2];
        spec.batch_sizes = vec![4];
        spec.steps = 1;
        spec.repetitions = 3;
        let rows = bench_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(!rows[1].ok(), "data strategy with 2 partitions is invalid");
        assert_eq!(rows.iter().filter(|r| r.ok()).count(), 3);
        assert!(rows.iter().filter(|r| r.ok()).all(|r| r.runs.len() == 3 && r.img_per_sec > 0.0));
        assert_eq!(rows[0].relative, 1.0);
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), SWEEP_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }
}
