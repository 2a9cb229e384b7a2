use std::process::{Command, Output};

fn layerpar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerpar"))
        .args(args)
        .env_remove("LAYERPAR_NUM_PARTITIONS")
        .output()
        .unwrap()
}

#[test]
fn plan_lists_cross_partition_edges() {
    let o = layerpar(&["plan", "--model", "resnet_toy", "--num-partitions", "4"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("edge 5->12 partition 0->2"), "{out}");
}

#[test]
fn world_mismatch_fails_before_training() {
    let o = layerpar(&[
        "run", "--strategy", "hybrid", "--num-partitions", "2", "--num-replicas", "2", "--world", "3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains('4') && err.contains('3'), "{err}");
}

#[test]
fn socket_transport_requires_rendezvous() {
    let o = layerpar(&["run", "--transport", "socket", "--rank", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("--rendezvous"));
}

#[test]
fn env_vars_set_flags() {
    let o = Command::new(env!("CARGO_BIN_EXE_layerpar"))
        .args(["run", "--data", "blobs:n=40,classes=3,dims=4", "--batch-size", "8"])
        .env("LAYERPAR_NUM_PARTITIONS", "2")
        .env("LAYERPAR_PIPELINE_STAGES", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("step ")).count(), 4);
    assert!(out.contains("test_accuracy"));
}

#[test]
fn bench_writes_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    let o = layerpar(&[
        "bench", "--model", "two_layer_mlp", "--partitions", "1,2", "--stages", "1,batch", "--batch-sizes", "4",
        "--steps", "1", "--repetitions", "1", "--out", path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(path).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("strategy,partitions,replicas,stages"));
    assert_eq!(lines.count(), 4);
}
