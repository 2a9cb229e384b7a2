use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use layerpar::comm::{SimConfig, SocketConfig, SocketTransport};
use layerpar::data::{Dataset, DatasetStream};
use layerpar::metrics::{MetricsLog, ReportFormat};
use layerpar::run::{load_model, run, RunSpec};
use layerpar::testing::{random_batch, random_model_spec};
use layerpar::trainer::{fit, fit_rank, fit_sequential, max_params_rel_diff, FitOptions, Strategy, TrainConfig, TrainError};
use layerpar::{build_model_from_spec, ModelGraph};

fn stream(model: &ModelGraph, n: usize, seed: u64) -> DatasetStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = random_batch(&mut rng, n, model.input_shape(), model.num_classes());
    let (tx, ty) = random_batch(&mut rng, 6, model.input_shape(), model.num_classes());
    DatasetStream::new(
        Dataset::new(x, y, model.num_classes()).unwrap(),
        Dataset::new(tx, ty, model.num_classes()).unwrap(),
        seed,
    )
}

fn hybrid(partitions: usize, replicas: usize, stages: usize) -> TrainConfig {
    TrainConfig {
        strategy: Strategy::Hybrid,
        num_partitions: partitions,
        num_replicas: replicas,
        pipeline_stages: stages,
        batch_size: 4,
        epochs: 2,
        lr_schedule: vec![(0, 0.1), (1, 0.02)],
        seed: 3,
        overlap_allreduce: true,
        cost_model: Default::default(),
    }
}

#[test]
fn rendezvous_sends_never_deadlock() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sim = SimConfig {
        buffer_bound: 0,
        timeout: Duration::from_secs(10),
        trace: false,
    };
    let opts = FitOptions {
        record_params: true,
        eval_chunk: None,
    };
    for case in 0..40 {
        let model = build_model_from_spec(&random_model_spec(&mut rng, 12, 2, 5)).unwrap();
        let cfg = hybrid(rng.gen_range(1..=4usize).min(model.len()), 2, [1, 2, 4][case % 3]);
        let data = stream(&model, 24, case as u64);
        let dist = fit(&model, &data, &cfg, &opts, sim).unwrap_or_else(|e| panic!("case {case}: {e}"));
        let seq = fit_sequential(&model, &data, &cfg, &opts).unwrap();
        for (a, b) in dist.param_history().iter().zip(&seq.param_history) {
            assert!(max_params_rel_diff(a, b) <= 1e-9, "case {case}");
        }
    }
}

#[test]
fn socket_ranks_in_threads_match_sim() {
    let model = load_model("resnet_toy").unwrap();
    let data = stream(&model, 40, 5);
    let cfg = hybrid(2, 2, 2);
    let opts = FitOptions::default();
    let sim = fit(&model, &data, &cfg, &opts, SimConfig::default()).unwrap();

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let sock = SocketConfig::new(format!("127.0.0.1:{port}"));
    let reports: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|rank| {
                let (model, data, cfg, opts, sock) = (&model, &data, &cfg, &opts, &sock);
                s.spawn(move || {
                    let t = SocketTransport::connect(rank, 4, sock).unwrap();
                    fit_rank(Arc::new(t), model, data, cfg, opts).unwrap()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let root = reports.iter().find(|r| r.rank == 0).unwrap();
    let losses: Vec<f64> = root.metrics.iter().map(|m| m.loss).collect();
    assert_eq!(losses, sim.losses());
}

#[test]
fn wrong_world_size_is_rejected_before_training() {
    let model = load_model("two_layer_mlp").unwrap();
    let data = stream(&model, 16, 1);
    let net = layerpar::comm::SimNetwork::new(3, SimConfig::default());
    let err = fit_rank(Arc::new(net.endpoint(0)), &model, &data, &hybrid(2, 2, 1), &FitOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::WorldSize { expected: 4, got: 3 }), "{err}");
}

#[test]
fn run_writes_a_readable_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    for format in [ReportFormat::Csv, ReportFormat::Jsonl] {
        let mut spec = RunSpec::new("two_layer_mlp", "blobs:n=64,classes=3,dims=4", hybrid(2, 1, 2));
        let path = dir.path().join(format!("m.{format:?}"));
        spec.out = Some(path.clone());
        spec.format = format;
        let outcome = run(&spec).unwrap();
        let log = MetricsLog::read(&path).unwrap();
        assert_eq!(log.steps, outcome.metrics);
        assert_eq!(log.header.world_size, 2);
        assert_eq!(log.header.run["train"]["num_partitions"], 2);
    }
}
