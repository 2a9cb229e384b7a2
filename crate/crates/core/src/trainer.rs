//! Distributed training over partitions and replicas.
//!
//! Every rank owns one partition of one replica. A training step runs the
//! forward pass of every micro-batch stage, then the backward pass of every
//! stage (fill-drain), exchanging activations and partial errors with
//! neighbouring partitions. Stage gradients are combined weighted by rows,
//! averaged across replicas with an allreduce per parameter, and applied
//! with SGD.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{
    allreduce, barrier, broadcast, AllreduceHandle, CollectiveEngine, CollectiveOp, CommError, Message, MessageKind,
    Rank, RankGroup, ReduceOp, SimConfig, SimNetwork, Tag, Transport,
};
use crate::data::{DataError, Dataset, DatasetStream};
use crate::model_graph::{
    backward_seq, forward_seq, layer_backward, layer_forward, sgd_apply, ActivationMap, DenseParams, GradientSet,
    LayerId, LayerKind, ModelError, ModelGraph, ParamGrad,
};
use crate::partitioner::{
    build_dependency_lists, partition_with, replica_groups, CostModel, DependencyLists, PartitionError, PartitionPlan,
};
use crate::tensor::{softmax_xent, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config.{field}: {detail}")]
    Config { field: &'static str, detail: String },
    #[error("world size {got} does not match num_partitions × num_replicas = {expected}")]
    WorldSize { expected: usize, got: usize },
    #[error("dataset has {samples} training samples, fewer than one effective batch of {ebs}")]
    DataExhausted { samples: usize, ebs: usize },
    #[error("rank {rank} (partition {partition}){}: {source}", context_suffix(*layer, *tag))]
    Comm {
        rank: Rank,
        partition: usize,
        layer: Option<LayerId>,
        tag: Option<Tag>,
        source: CommError,
    },
    #[error("rank {rank}: missing activation of layer {layer} for stage {stage}")]
    MissingStage { rank: Rank, layer: LayerId, stage: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("rank {0} worker panicked")]
    Panic(Rank),
}

fn context_suffix(layer: Option<LayerId>, tag: Option<Tag>) -> String {
    let mut s = String::new();
    if let Some(l) = layer {
        s += &format!(" layer {l}");
    }
    if let Some(t) = tag {
        s += &format!(" tag {t:?}");
    }
    s
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Data,
    Model,
    Hybrid,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "data" => Ok(Strategy::Data),
            "model" => Ok(Strategy::Model),
            "hybrid" => Ok(Strategy::Hybrid),
            _ => Err(format!("unknown strategy `{s}` (expected data, model or hybrid)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Data => "data",
            Strategy::Model => "model",
            Strategy::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub num_partitions: usize,
    pub num_replicas: usize,
    pub pipeline_stages: usize,
    /// Per replica.
    pub batch_size: usize,
    pub epochs: usize,
    /// `(first epoch, learning rate)` pairs, ascending by epoch, starting at 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    /// Start each layer's replica allreduce as soon as its gradient is final.
    #[serde(default)]
    pub overlap_allreduce: bool,
    #[serde(default)]
    pub cost_model: CostModel,
}

impl TrainConfig {
    pub fn sequential(batch_size: usize, epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            strategy: Strategy::Model,
            num_partitions: 1,
            num_replicas: 1,
            pipeline_stages: 1,
            batch_size,
            epochs,
            lr_schedule: vec![(0, lr)],
            seed,
            overlap_allreduce: false,
            cost_model: CostModel::default(),
        }
    }

    pub fn world_size(&self) -> usize {
        self.num_partitions * self.num_replicas
    }

    /// Rows consumed per optimizer step across all replicas.
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size * self.num_replicas
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map_or(0.0, |&(_, lr)| lr)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, detail: String| Err(TrainError::Config { field, detail });
        if self.num_partitions == 0 {
            return bad("num_partitions", "must be at least 1".into());
        }
        if self.num_replicas == 0 {
            return bad("num_replicas", "must be at least 1".into());
        }
        match self.strategy {
            Strategy::Data if self.num_partitions != 1 => {
                return bad("num_partitions", format!("data strategy needs 1 partition, got {}", self.num_partitions))
            }
            Strategy::Model if self.num_replicas != 1 => {
                return bad("num_replicas", format!("model strategy needs 1 replica, got {}", self.num_replicas))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.pipeline_stages == 0 || self.pipeline_stages > self.batch_size {
            return bad(
                "pipeline_stages",
                format!("must be in 1..={} (batch_size), got {}", self.batch_size, self.pipeline_stages),
            );
        }
        if !self.batch_size.is_multiple_of(self.pipeline_stages) {
            return bad(
                "pipeline_stages",
                format!("{} does not divide batch_size {}", self.pipeline_stages, self.batch_size),
            );
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        match self.lr_schedule.first() {
            None => return bad("lr_schedule", "is empty".into()),
            Some(&(e, _)) if e != 0 => return bad("lr_schedule", format!("must start at epoch 0, starts at {e}")),
            _ => {}
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("lr_schedule", "epochs must be strictly increasing".into());
        }
        if let Some(&(e, lr)) = self.lr_schedule.iter().find(|(_, lr)| !lr.is_finite() || *lr < 0.0) {
            return bad("lr_schedule", format!("learning rate {lr} at epoch {e} is not a finite non-negative number"));
        }
        Ok(())
    }
}

/// Parses `"0:0.1,5:0.01"`.
pub fn parse_lr_schedule(s: &str) -> Result<Vec<(usize, f64)>, String> {
    s.split(',')
        .map(|part| {
            let (e, lr) = part
                .split_once(':')
                .ok_or_else(|| format!("`{part}`: expected EPOCH:LR"))?;
            let e = e.trim().parse().map_err(|_| format!("`{part}`: bad epoch"))?;
            let lr = lr.trim().parse().map_err(|_| format!("`{part}`: bad learning rate"))?;
            Ok((e, lr))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub images_per_sec: f64,
    pub wall_ms: f64,
}

/// Contiguous equal micro-batches of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineSchedule {
    pub micro_batches: Vec<Range<usize>>,
}

impl PipelineSchedule {
    pub fn new(batch: usize, stages: usize) -> Result<Self, TrainError> {
        if stages == 0 || stages > batch || !batch.is_multiple_of(stages) {
            return Err(TrainError::Config {
                field: "pipeline_stages",
                detail: format!("{stages} stages cannot split a batch of {batch} evenly"),
            });
        }
        let m = batch / stages;
        Ok(Self {
            micro_batches: (0..stages).map(|s| s * m..(s + 1) * m).collect(),
        })
    }

    pub fn stages(&self) -> usize {
        self.micro_batches.len()
    }
}

const LOSS_KEY: u64 = 1 << 40;
const EVAL_KEY: u64 = LOSS_KEY + 1;
const LOSSES_GATHER_KEY: u64 = LOSS_KEY + 2;

fn accumulate<K: Ord>(map: &mut BTreeMap<K, Tensor>, key: K, t: Tensor) -> Result<(), TrainError> {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&t)?,
        None => {
            map.insert(key, t);
        }
    }
    Ok(())
}

fn weight_key(layer: LayerId) -> u64 {
    2 * layer as u64
}

fn bias_key(layer: LayerId) -> u64 {
    2 * layer as u64 + 1
}

/// One rank's share of the model plus its communication context.
pub struct PartitionState {
    transport: Arc<dyn Transport>,
    plan: PartitionPlan,
    deps: DependencyLists,
    model: ModelGraph,
    replica: usize,
    partition: usize,
    group: RankGroup,
    engine: Option<CollectiveEngine>,
    acts: Vec<Option<ActivationMap>>,
    labels: Vec<Option<Tensor>>,
}

impl PartitionState {
    pub fn new(transport: Arc<dyn Transport>, model: ModelGraph, plan: PartitionPlan) -> Result<Self, TrainError> {
        if transport.world_size() != plan.world_size() {
            return Err(TrainError::WorldSize {
                expected: plan.world_size(),
                got: transport.world_size(),
            });
        }
        let rank = transport.rank();
        let partition = plan.partition_of_rank(rank);
        let deps = build_dependency_lists(&model, &plan).swap_remove(partition);
        let group = replica_groups(&plan).swap_remove(partition);
        Ok(Self {
            replica: plan.replica_of_rank(rank),
            partition,
            deps,
            group,
            plan,
            model,
            transport,
            engine: None,
            acts: Vec::new(),
            labels: Vec::new(),
        })
    }

    pub fn rank(&self) -> Rank {
        self.transport.rank()
    }

    pub fn partition(&self) -> usize {
        self.partition
    }

    pub fn replica(&self) -> usize {
        self.replica
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn deps(&self) -> &DependencyLists {
        &self.deps
    }

    pub fn is_last_partition(&self) -> bool {
        self.partition + 1 == self.plan.num_partitions()
    }

    pub fn local_param_layers(&self) -> Vec<LayerId> {
        self.deps
            .layers
            .clone()
            .filter(|&l| self.model.layer(l).params.is_some())
            .collect()
    }

    pub fn local_params(&self) -> BTreeMap<LayerId, DenseParams> {
        self.local_param_layers()
            .into_iter()
            .map(|l| (l, self.model.params(l).expect("param layer").clone()))
            .collect()
    }

    pub fn param_checksum(&self) -> u64 {
        self.model.param_checksum(self.local_param_layers())
    }

    fn peer(&self, partition: usize) -> Rank {
        self.plan.rank_of(self.replica, partition)
    }

    fn comm_err(&self, layer: Option<LayerId>, tag: Option<Tag>) -> impl Fn(CommError) -> TrainError + '_ {
        move |source| TrainError::Comm {
            rank: self.rank(),
            partition: self.partition,
            layer,
            tag,
            source,
        }
    }

    fn send(&self, kind: MessageKind, tag: Tag, dst: Rank, layer: LayerId, payload: Tensor) -> Result<(), TrainError> {
        self.transport
            .send(Message::new(kind, tag, self.rank(), dst, payload))
            .map_err(self.comm_err(Some(layer), Some(tag)))
    }

    fn recv(&self, src: Rank, tag: Tag, layer: LayerId) -> Result<Tensor, TrainError> {
        self.transport
            .recv(src, tag)
            .and_then(Message::into_payload)
            .map_err(self.comm_err(Some(layer), Some(tag)))
    }

    /// Forward pass of one micro-batch stage over the local layers.
    ///
    /// `x` is read only by the partition holding the input layer, `labels`
    /// only by the one holding the loss; that partition returns the stage's
    /// mean loss when labels are given.
    pub fn distributed_forward(
        &mut self,
        stage: usize,
        x: &Tensor,
        labels: Option<&Tensor>,
    ) -> Result<Option<f64>, TrainError> {
        let mut acts = ActivationMap::new();
        for t in self.deps.inbound() {
            let tag = t.tag(MessageKind::Activation, stage);
            let v = self.recv(self.peer(t.src_partition), tag, t.src_layer)?;
            acts.insert(t.src_layer, v);
        }
        for id in self.deps.layers.clone() {
            let node = self.model.layer(id);
            let out = if node.kind == LayerKind::Input {
                x.clone()
            } else {
                let ins: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|i| acts.get(i).ok_or(ModelError::MissingActivation(*i)))
                    .collect::<Result<_, _>>()?;
                layer_forward(node, &ins)?
            };
            acts.insert(id, out);
        }
        let out = self.model.output_id();
        let loss = match labels {
            Some(y) if self.deps.layers.contains(&out) => Some(softmax_xent(&acts[&out], y)?.0),
            _ => None,
        };
        for t in self.deps.outbound() {
            let tag = t.tag(MessageKind::Activation, stage);
            self.send(MessageKind::Activation, tag, self.peer(t.dst_partition), t.src_layer, acts[&t.src_layer].clone())?;
        }
        if self.acts.len() <= stage {
            self.acts.resize(stage + 1, None);
            self.labels.resize(stage + 1, None);
        }
        self.acts[stage] = Some(acts);
        self.labels[stage] = labels.cloned();
        Ok(loss)
    }

    /// Backward pass of one stage. Parameter gradients of local layers go to
    /// `sink` in descending layer order as soon as each is computed.
    fn backward_stage(
        &mut self,
        stage: usize,
        sink: &mut dyn FnMut(&Self, LayerId, ParamGrad) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let rank = self.rank();
        let acts = self
            .acts
            .get_mut(stage)
            .and_then(Option::take)
            .ok_or(TrainError::MissingStage {
                rank,
                layer: self.deps.layers.start,
                stage,
            })?;

        // Partial errors from consumers on later partitions.
        let mut remote: BTreeMap<LayerId, Vec<(LayerId, Tensor)>> = BTreeMap::new();
        for t in self.deps.backward_recv_order() {
            for &d in &t.dst_layers {
                let tag = Tag::edge(MessageKind::PartialError, stage, t.src_layer, d);
                let e = self.recv(self.peer(t.dst_partition), tag, t.src_layer)?;
                remote.entry(t.src_layer).or_default().push((d, e));
            }
        }
        // Fold highest consumer first, as the sequential pass does.
        let mut errors: BTreeMap<LayerId, Tensor> = BTreeMap::new();
        for (src, mut parts) in remote {
            parts.sort_by_key(|p| std::cmp::Reverse(p.0));
            let mut it = parts.into_iter();
            let mut acc = it.next().expect("non-empty").1;
            for (_, e) in it {
                acc.add_assign(&e)?;
            }
            errors.insert(src, acc);
        }
        let out = self.model.output_id();
        if self.deps.layers.contains(&out) {
            let y = self.labels[stage].as_ref().ok_or(TrainError::MissingStage { rank, layer: out, stage })?;
            errors.insert(out, softmax_xent(&acts[&out], y)?.1);
        }

        let mut outgoing: BTreeMap<(LayerId, LayerId), Tensor> = BTreeMap::new();
        for id in self.deps.layers.clone().rev() {
            let node = self.model.layer(id);
            if node.kind == LayerKind::Input {
                continue;
            }
            let upstream = errors.remove(&id).ok_or(TrainError::MissingStage { rank, layer: id, stage })?;
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| acts.get(i).ok_or(TrainError::MissingStage { rank, layer: *i, stage }))
                .collect::<Result<_, _>>()?;
            let (dxs, pgrad) = layer_backward(node, &ins, &upstream)?;
            let inputs = node.inputs.clone();
            if let Some(g) = pgrad {
                sink(self, id, g)?;
            }
            for (src, dx) in inputs.into_iter().zip(dxs) {
                if self.deps.layers.contains(&src) {
                    accumulate(&mut errors, src, dx)?;
                } else {
                    accumulate(&mut outgoing, (src, id), dx)?;
                }
            }
        }

        for t in self.deps.backward_send_order() {
            for &d in &t.dst_layers {
                let tag = Tag::edge(MessageKind::PartialError, stage, t.src_layer, d);
                let e = outgoing
                    .remove(&(t.src_layer, d))
                    .ok_or(TrainError::MissingStage { rank, layer: d, stage })?;
                self.send(MessageKind::PartialError, tag, self.peer(t.src_partition), d, e)?;
            }
        }
        Ok(())
    }

    /// Backward pass of one stage; returns the local parameter gradients.
    /// The matching [`distributed_forward`](Self::distributed_forward) must
    /// have run with labels on the loss partition.
    pub fn distributed_backward(&mut self, stage: usize) -> Result<GradientSet, TrainError> {
        let mut grads = GradientSet::new();
        self.backward_stage(stage, &mut |_, id, g| {
            grads.insert(id, g);
            Ok(())
        })?;
        Ok(grads)
    }

    /// Forward of every stage, then backward of every stage. Stage gradients
    /// and losses are combined weighted by micro-batch rows.
    pub fn pipeline_step(&mut self, x: &Tensor, labels: &Tensor, stages: usize) -> Result<(GradientSet, Option<f64>), TrainError> {
        let (grads, loss, _) = self.pipeline_step_inner(x, labels, stages, false)?;
        Ok((grads, loss))
    }

    #[allow(clippy::type_complexity)]
    fn pipeline_step_inner(
        &mut self,
        x: &Tensor,
        labels: &Tensor,
        stages: usize,
        overlap: bool,
    ) -> Result<(GradientSet, Option<f64>, Vec<(LayerId, AllreduceHandle, AllreduceHandle)>), TrainError> {
        let schedule = PipelineSchedule::new(x.rows(), stages)?;
        let total = x.rows() as f64;
        let mut loss: Option<f64> = None;
        for (s, r) in schedule.micro_batches.iter().enumerate() {
            let w = r.len() as f64 / total;
            let xs = x.slice_rows(r.start, r.end)?;
            let ys = labels.slice_rows(r.start, r.end)?;
            if let Some(l) = self.distributed_forward(s, &xs, Some(&ys))? {
                let l = l * w;
                loss = Some(loss.map_or(l, |acc| acc + l));
            }
        }
        let mut acc = GradientSet::new();
        let mut handles = Vec::new();
        let last = schedule.stages() - 1;
        for (s, r) in schedule.micro_batches.iter().enumerate() {
            let w = r.len() as f64 / total;
            self.backward_stage(s, &mut |state, id, mut g| {
                match acc.get_mut(id) {
                    Some(a) => a.add_scaled_assign(&g, w)?,
                    None => {
                        g.scale_assign(w);
                        acc.insert(id, g)
                    }
                }
                if overlap && s == last {
                    if let Some(engine) = &state.engine {
                        let g = acc.get(id).expect("just inserted");
                        let hw = engine.start_allreduce(state.group.clone(), g.weight.clone(), ReduceOp::Mean, weight_key(id));
                        let hb = engine.start_allreduce(state.group.clone(), g.bias.clone(), ReduceOp::Mean, bias_key(id));
                        handles.push((id, hw, hb));
                    }
                }
                Ok(())
            })?;
        }
        Ok((acc, loss, handles))
    }

    /// Mean-allreduces every gradient within this partition's replica group.
    pub fn replica_sync(&self, grads: GradientSet) -> Result<GradientSet, TrainError> {
        if self.group.len() == 1 {
            return Ok(grads);
        }
        let t = self.transport.as_ref();
        let mut out = GradientSet::new();
        for (id, g) in grads.iter() {
            let wk = weight_key(id);
            let weight = allreduce(t, &self.group, &g.weight, ReduceOp::Mean, wk)
                .map_err(self.comm_err(Some(id), Some(Tag::collective(CollectiveOp::AllreduceReduce, wk))))?;
            let bk = bias_key(id);
            let bias = allreduce(t, &self.group, &g.bias, ReduceOp::Mean, bk)
                .map_err(self.comm_err(Some(id), Some(Tag::collective(CollectiveOp::AllreduceReduce, bk))))?;
            out.insert(id, ParamGrad { weight, bias });
        }
        Ok(out)
    }

    /// Copies replica 0's parameters to every other replica.
    pub fn broadcast_weights(&mut self) -> Result<(), TrainError> {
        if self.group.len() == 1 {
            return Ok(());
        }
        let root = self.group.members()[0];
        for id in self.local_param_layers() {
            let p = self.model.params(id).expect("param layer").clone();
            let t = self.transport.as_ref();
            let weight = broadcast(t, &self.group, root, &p.weight, weight_key(id)).map_err(self.comm_err(Some(id), None))?;
            let bias = broadcast(t, &self.group, root, &p.bias, bias_key(id)).map_err(self.comm_err(Some(id), None))?;
            self.model.set_params(id, DenseParams { weight, bias })?;
        }
        Ok(())
    }

    /// One optimizer step: pipelined forward/backward, replica averaging, SGD.
    /// Returns the replica-averaged loss on the last partition.
    pub fn train_step(&mut self, x: &Tensor, labels: &Tensor, stages: usize, lr: f64, overlap: bool) -> Result<Option<f64>, TrainError> {
        let overlap = overlap && self.group.len() > 1;
        if overlap && self.engine.is_none() {
            self.engine = Some(CollectiveEngine::new(self.transport.clone()));
        }
        let (grads, loss, handles) = self.pipeline_step_inner(x, labels, stages, overlap)?;
        let synced = if overlap {
            let mut out = GradientSet::new();
            for (id, hw, hb) in handles {
                let weight = hw.wait().map_err(self.comm_err(Some(id), None))?;
                let bias = hb.wait().map_err(self.comm_err(Some(id), None))?;
                out.insert(id, ParamGrad { weight, bias });
            }
            out
        } else {
            self.replica_sync(grads)?
        };
        sgd_apply(&mut self.model, &synced, lr)?;
        match loss {
            Some(l) if self.group.len() > 1 => {
                let avg = allreduce(self.transport.as_ref(), &self.group, &Tensor::scalar(l), ReduceOp::Mean, LOSS_KEY)
                    .map_err(self.comm_err(None, None))?;
                Ok(Some(avg.data()[0]))
            }
            other => Ok(other),
        }
    }

    /// Forward-only accuracy on `test`, run by replica 0 in chunks of `chunk`
    /// rows. The last partition counts correct predictions and reports them
    /// to rank 0, which returns the accuracy; every other rank returns `None`.
    pub fn evaluate(&mut self, test: &Dataset, chunk: usize) -> Result<Option<f64>, TrainError> {
        if self.replica != 0 || test.is_empty() {
            return Ok(None);
        }
        let mut correct = 0usize;
        let mut start = 0;
        while start < test.len() {
            let end = (start + chunk.max(1)).min(test.len());
            self.distributed_forward(0, &test.x.slice_rows(start, end)?, None)?;
            if self.is_last_partition() {
                let acts = self.acts[0].as_ref().expect("just stored");
                let pred = acts[&self.model.output_id()].argmax_rows()?;
                correct += pred.iter().zip(&test.labels[start..end]).filter(|(p, l)| p == l).count();
            }
            start = end;
        }
        self.acts.clear();
        self.labels.clear();
        let last = self.plan.rank_of(0, self.plan.num_partitions() - 1);
        let tag = Tag::collective(CollectiveOp::Gather, EVAL_KEY);
        if last != 0 && self.rank() == last {
            self.transport
                .send(Message::new(MessageKind::GradientContribution, tag, last, 0, Tensor::scalar(correct as f64)))
                .map_err(self.comm_err(None, Some(tag)))?;
        }
        if self.rank() == 0 {
            if last != 0 {
                correct = self.recv(last, tag, self.model.output_id())?.data()[0] as usize;
            }
            return Ok(Some(correct as f64 / test.len() as f64));
        }
        Ok(None)
    }

    /// Collects replica 0's parameters and the loss history onto rank 0.
    /// Rank 0 returns the assembled model and losses.
    pub fn gather_to_root(&self, losses: &[f64]) -> Result<Option<(ModelGraph, Vec<f64>)>, TrainError> {
        let t = self.transport.as_ref();
        let gather = |key| Tag::collective(CollectiveOp::Gather, key);
        let last = self.plan.rank_of(0, self.plan.num_partitions() - 1);
        if self.rank() != 0 {
            if self.replica == 0 {
                for (id, p) in self.local_params() {
                    t.send(Message::new(MessageKind::GradientContribution, gather(weight_key(id)), self.rank(), 0, p.weight))
                        .and_then(|_| {
                            t.send(Message::new(MessageKind::GradientContribution, gather(bias_key(id)), self.rank(), 0, p.bias))
                        })
                        .map_err(self.comm_err(Some(id), None))?;
                }
                if self.rank() == last {
                    t.send(Message::new(
                        MessageKind::GradientContribution,
                        gather(LOSSES_GATHER_KEY),
                        self.rank(),
                        0,
                        Tensor::vector(losses.to_vec())?,
                    ))
                    .map_err(self.comm_err(None, None))?;
                }
            }
            return Ok(None);
        }
        let mut model = self.model.clone();
        for p in 1..self.plan.num_partitions() {
            for id in self.plan.local_layers(p) {
                if model.layer(id).params.is_none() {
                    continue;
                }
                let weight = self.recv(p, gather(weight_key(id)), id)?;
                let bias = self.recv(p, gather(bias_key(id)), id)?;
                model.set_params(id, DenseParams { weight, bias })?;
            }
        }
        let losses = if last == 0 {
            losses.to_vec()
        } else {
            self.recv(last, gather(LOSSES_GATHER_KEY), model.output_id())?.into_data()
        };
        Ok(Some((model, losses)))
    }

    pub fn world_barrier(&self) -> Result<(), TrainError> {
        let world = RankGroup::world(self.transport.world_size());
        barrier(self.transport.as_ref(), &world, 0).map_err(self.comm_err(None, None))
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Keep every rank's local parameters after each step.
    pub record_params: bool,
    /// Rows per evaluation chunk; `None` skips evaluation.
    pub eval_chunk: Option<usize>,
}

/// What one rank saw during [`fit_rank`].
#[derive(Debug, Clone)]
pub struct RankReport {
    pub rank: Rank,
    pub partition: usize,
    pub replica: usize,
    /// Complete on rank 0 only.
    pub metrics: Vec<StepMetrics>,
    /// Replica-averaged per-step losses, on last-partition ranks.
    pub losses: Vec<f64>,
    /// Local parameter checksum after every step.
    pub checksums: Vec<u64>,
    pub param_history: Vec<BTreeMap<LayerId, DenseParams>>,
    /// Rank 0 only.
    pub model: Option<ModelGraph>,
    /// Rank 0 only.
    pub test_accuracy: Option<f64>,
}

fn check_inputs(model: &ModelGraph, data: &DatasetStream, config: &TrainConfig) -> Result<(), TrainError> {
    config.validate()?;
    if data.train.sample_shape() != model.input_shape() {
        return Err(TrainError::Config {
            field: "data",
            detail: format!(
                "sample shape {:?} does not match model input shape {:?}",
                data.train.sample_shape(),
                model.input_shape()
            ),
        });
    }
    if data.train.classes > model.num_classes() {
        return Err(TrainError::Config {
            field: "data",
            detail: format!("{} classes but the model outputs {}", data.train.classes, model.num_classes()),
        });
    }
    let steps = data.steps_per_epoch(config.effective_batch_size());
    if steps == 0 {
        return Err(TrainError::DataExhausted {
            samples: data.train.len(),
            ebs: config.effective_batch_size(),
        });
    }
    Ok(())
}

fn labels_for(model: &ModelGraph, y: Tensor) -> Result<Tensor, TrainError> {
    // Datasets with fewer classes than model outputs pad their one-hot rows.
    let classes = model.num_classes();
    if y.row_len() == classes {
        return Ok(y);
    }
    let rows = y.rows();
    let mut data = vec![0.0; rows * classes];
    for r in 0..rows {
        data[r * classes..r * classes + y.row_len()].copy_from_slice(&y.data()[r * y.row_len()..(r + 1) * y.row_len()]);
    }
    Ok(Tensor::new(vec![rows, classes], data)?)
}

/// Trains on a single rank of a `num_partitions × num_replicas` world. Every
/// rank of the world must call this with the same arguments.
pub fn fit_rank(
    transport: Arc<dyn Transport>,
    model: &ModelGraph,
    data: &DatasetStream,
    config: &TrainConfig,
    opts: &FitOptions,
) -> Result<RankReport, TrainError> {
    check_inputs(model, data, config)?;
    if transport.world_size() != config.world_size() {
        return Err(TrainError::WorldSize {
            expected: config.world_size(),
            got: transport.world_size(),
        });
    }
    let plan = partition_with(model, config.num_partitions, config.cost_model)?.with_replicas(config.num_replicas)?;
    let mut state = PartitionState::new(transport, model.clone(), plan)?;
    state.broadcast_weights()?;

    let ebs = config.effective_batch_size();
    let steps = data.steps_per_epoch(ebs);
    let mut report = RankReport {
        rank: state.rank(),
        partition: state.partition(),
        replica: state.replica(),
        metrics: Vec::new(),
        losses: Vec::new(),
        checksums: Vec::new(),
        param_history: Vec::new(),
        model: None,
        test_accuracy: None,
    };
    let mut timings = Vec::new();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = data.epoch_order(epoch);
        for k in 0..steps {
            let (x, y, _) = data.batch(&order, k, ebs, state.replica() * config.batch_size, config.batch_size)?;
            let y = labels_for(model, y)?;
            let t0 = Instant::now();
            let loss = state.train_step(&x, &y, config.pipeline_stages, lr, config.overlap_allreduce)?;
            timings.push((epoch, t0.elapsed().as_secs_f64()));
            if let Some(l) = loss {
                report.losses.push(l);
            }
            report.checksums.push(state.param_checksum());
            if opts.record_params {
                report.param_history.push(state.local_params());
            }
        }
    }
    if let Some(chunk) = opts.eval_chunk {
        report.test_accuracy = state.evaluate(&data.test, chunk)?;
    }
    if let Some((m, losses)) = state.gather_to_root(&report.losses)? {
        report.metrics = timings
            .iter()
            .zip(&losses)
            .enumerate()
            .map(|(step, (&(epoch, secs), &loss))| StepMetrics {
                step,
                epoch,
                loss,
                images_per_sec: ebs as f64 / secs.max(1e-12),
                wall_ms: secs * 1e3,
            })
            .collect();
        report.model = Some(m);
    }
    state.world_barrier()?;
    Ok(report)
}

/// Result of a whole-world run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub metrics: Vec<StepMetrics>,
    pub model: ModelGraph,
    pub test_accuracy: Option<f64>,
    /// One per rank, in rank order.
    pub ranks: Vec<RankReport>,
}

impl FitReport {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }

    /// Replica 0's parameters after every step, merged across partitions.
    pub fn param_history(&self) -> Vec<BTreeMap<LayerId, DenseParams>> {
        let mut out: Vec<BTreeMap<LayerId, DenseParams>> = Vec::new();
        for r in self.ranks.iter().filter(|r| r.replica == 0) {
            out.resize(r.param_history.len().max(out.len()), BTreeMap::new());
            for (step, params) in r.param_history.iter().enumerate() {
                out[step].extend(params.iter().map(|(k, v)| (*k, v.clone())));
            }
        }
        out
    }
}

/// Runs every rank of the world as a thread over the simulated transport.
pub fn fit(
    model: &ModelGraph,
    data: &DatasetStream,
    config: &TrainConfig,
    opts: &FitOptions,
    sim: SimConfig,
) -> Result<FitReport, TrainError> {
    check_inputs(model, data, config)?;
    let net = SimNetwork::new(config.world_size(), sim);
    let results: Vec<Result<RankReport, TrainError>> = std::thread::scope(|scope| {
        let workers: Vec<_> = net
            .endpoints()
            .into_iter()
            .map(|ep| {
                let ep = Arc::new(ep);
                std::thread::Builder::new()
                    .name(format!("rank-{}", ep.rank()))
                    .spawn_scoped(scope, move || {
                        let r = fit_rank(ep.clone(), model, data, config, opts);
                        if r.is_err() {
                            ep.close();
                        }
                        r
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        workers
            .into_iter()
            .enumerate()
            .map(|(rank, w)| w.join().unwrap_or(Err(TrainError::Panic(rank))))
            .collect()
    });
    let mut ranks = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(rep) => ranks.push(rep),
            Err(e) => {
                let secondary = matches!(
                    e,
                    TrainError::Comm {
                        source: CommError::PeerFailure { .. } | CommError::Closed,
                        ..
                    }
                );
                match (&first_err, secondary) {
                    (None, _) => first_err = Some((e, secondary)),
                    (Some((_, true)), false) => first_err = Some((e, false)),
                    _ => {}
                }
            }
        }
    }
    if let Some((e, _)) = first_err {
        return Err(e);
    }
    let root = &ranks[0];
    Ok(FitReport {
        metrics: root.metrics.clone(),
        model: root.model.clone().expect("rank 0 gathers the model"),
        test_accuracy: root.test_accuracy,
        ranks,
    })
}

/// Plain single-process SGD on the effective batch of every step, with the
/// same data order as [`fit`].
pub fn fit_sequential(
    model: &ModelGraph,
    data: &DatasetStream,
    config: &TrainConfig,
    opts: &FitOptions,
) -> Result<SequentialRun, TrainError> {
    check_inputs(model, data, config)?;
    let mut model = model.clone();
    let ebs = config.effective_batch_size();
    let steps = data.steps_per_epoch(ebs);
    let mut run = SequentialRun {
        metrics: Vec::new(),
        param_history: Vec::new(),
        model: model.clone(),
        test_accuracy: None,
    };
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = data.epoch_order(epoch);
        for k in 0..steps {
            let (x, y, _) = data.batch(&order, k, ebs, 0, ebs)?;
            let y = labels_for(&model, y)?;
            let t0 = Instant::now();
            let (loss, acts) = forward_seq(&model, &x, &y)?;
            let grads = backward_seq(&model, &acts, &y)?;
            sgd_apply(&mut model, &grads, lr)?;
            let secs = t0.elapsed().as_secs_f64();
            run.metrics.push(StepMetrics {
                step: run.metrics.len(),
                epoch,
                loss,
                images_per_sec: ebs as f64 / secs.max(1e-12),
                wall_ms: secs * 1e3,
            });
            if opts.record_params {
                run.param_history.push(
                    model
                        .param_layers()
                        .map(|l| (l, model.params(l).expect("param layer").clone()))
                        .collect(),
                );
            }
        }
    }
    if let Some(chunk) = opts.eval_chunk {
        run.test_accuracy = Some(crate::model_graph::evaluate_seq(&model, &data.test.x, &data.test.labels, chunk)?);
    }
    run.model = model;
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct SequentialRun {
    pub metrics: Vec<StepMetrics>,
    pub param_history: Vec<BTreeMap<LayerId, DenseParams>>,
    pub model: ModelGraph,
    pub test_accuracy: Option<f64>,
}

impl SequentialRun {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }
}

/// Largest relative difference between two parameter snapshots.
pub fn max_params_rel_diff(a: &BTreeMap<LayerId, DenseParams>, b: &BTreeMap<LayerId, DenseParams>) -> f64 {
    if a.keys().ne(b.keys()) {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b.values())
        .map(|((_, p), q)| {
            let w = p.weight.max_rel_diff(&q.weight).unwrap_or(f64::INFINITY);
            let b = p.bias.max_rel_diff(&q.bias).unwrap_or(f64::INFINITY);
            w.max(b)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::SimEndpoint;
    use crate::data::Dataset;
    use crate::model_graph::{backward_seq_full, build_model_from_spec, forward_activations, LayerSpec, ModelSpec};
    use crate::partitioner::partition;
    use crate::testing::{random_batch, random_model_spec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::time::Duration;

    fn chain_model() -> ModelGraph {
        build_model_from_spec(&ModelSpec::new(
            3,
            vec![4],
            vec![LayerSpec::Input { cost: None }, LayerSpec::dense(8), LayerSpec::dense(3), LayerSpec::loss()],
        ))
        .unwrap()
    }

    /// Skip from partition 1 into partition 3 when split four ways.
    fn skip_model() -> ModelGraph {
        build_model_from_spec(&ModelSpec::new(
            5,
            vec![3],
            vec![
                LayerSpec::Input { cost: None },
                LayerSpec::dense(6),
                LayerSpec::dense(6),
                LayerSpec::relu(),
                LayerSpec::dense(6),
                LayerSpec::relu(),
                LayerSpec::add(3, 5),
                LayerSpec::dense(3),
                LayerSpec::loss(),
            ],
        ))
        .unwrap()
    }

    fn skip_plan(replicas: usize) -> PartitionPlan {
        PartitionPlan::from_assignment(vec![0, 0, 1, 1, 2, 2, 3, 3, 3], replicas).unwrap()
    }

    fn run_world<T: Send>(
        model: &ModelGraph,
        plan: &PartitionPlan,
        cfg: SimConfig,
        f: impl Fn(&mut PartitionState) -> T + Sync,
    ) -> (Vec<T>, SimNetwork) {
        let net = SimNetwork::new(plan.world_size(), cfg);
        let out = std::thread::scope(|s| {
            let hs: Vec<_> = net
                .endpoints()
                .into_iter()
                .map(|ep: SimEndpoint| {
                    let f = &f;
                    s.spawn(move || {
                        let mut st = PartitionState::new(Arc::new(ep), model.clone(), plan.clone()).unwrap();
                        f(&mut st)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        (out, net)
    }

    fn stream(model: &ModelGraph, n: usize, seed: u64) -> DatasetStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = random_batch(&mut rng, n, model.input_shape(), model.num_classes());
        let (tx, ty) = random_batch(&mut rng, 8, model.input_shape(), model.num_classes());
        DatasetStream::new(
            Dataset::new(x, y, model.num_classes()).unwrap(),
            Dataset::new(tx, ty, model.num_classes()).unwrap(),
            seed,
        )
    }

    fn config(strategy: Strategy, p: usize, r: usize, stages: usize, bs: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            strategy,
            num_partitions: p,
            num_replicas: r,
            pipeline_stages: stages,
            batch_size: bs,
            epochs,
            lr_schedule: vec![(0, 0.1), (1, 0.05)],
            seed: 11,
            overlap_allreduce: false,
            cost_model: CostModel::Uniform,
        }
    }

    #[test]
    fn config_validation() {
        let ok = config(Strategy::Hybrid, 2, 2, 4, 8, 1);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.effective_batch_size(), 16);
        let field = |c: TrainConfig| match c.validate() {
            Err(TrainError::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(TrainConfig { num_partitions: 2, ..config(Strategy::Data, 1, 2, 1, 8, 1) }), "num_partitions");
        assert_eq!(field(config(Strategy::Model, 2, 2, 1, 8, 1)), "num_replicas");
        assert_eq!(field(config(Strategy::Model, 2, 1, 3, 8, 1)), "pipeline_stages");
        assert_eq!(field(config(Strategy::Model, 2, 1, 16, 8, 1)), "pipeline_stages");
        assert_eq!(field(config(Strategy::Model, 2, 1, 0, 8, 1)), "pipeline_stages");
        assert_eq!(field(TrainConfig { lr_schedule: vec![(1, 0.1)], ..ok.clone() }), "lr_schedule");
        assert_eq!(field(TrainConfig { lr_schedule: vec![(0, 0.1), (0, 0.2)], ..ok.clone() }), "lr_schedule");
        assert_eq!(field(TrainConfig { lr_schedule: vec![(0, f64::NAN)], ..ok.clone() }), "lr_schedule");
        assert_eq!(ok.lr_at(0), 0.1);
        assert_eq!(ok.lr_at(7), 0.05);
        assert_eq!(parse_lr_schedule("0:0.1, 3:0.01").unwrap(), vec![(0, 0.1), (3, 0.01)]);
        assert!(parse_lr_schedule("0-0.1").is_err());
        assert_eq!("hybrid".parse::<Strategy>().unwrap(), Strategy::Hybrid);
    }

    #[test]
    fn world_size_mismatch_is_rejected_before_compute() {
        let m = chain_model();
        let data = stream(&m, 32, 1);
        let net = SimNetwork::new(3, SimConfig::default());
        let r = fit_rank(Arc::new(net.endpoint(0)), &m, &data, &config(Strategy::Hybrid, 2, 2, 1, 4, 1), &FitOptions::default());
        assert!(matches!(r, Err(TrainError::WorldSize { expected: 4, got: 3 })));
        let small = stream(&m, 7, 1);
        assert!(matches!(
            fit(&m, &small, &config(Strategy::Data, 1, 2, 1, 4, 1), &FitOptions::default(), SimConfig::default()),
            Err(TrainError::DataExhausted { samples: 7, ebs: 8 })
        ));
    }

    #[test]
    fn schedule_splits_evenly() {
        let s = PipelineSchedule::new(8, 4).unwrap();
        assert_eq!(s.micro_batches, vec![0..2, 2..4, 4..6, 6..8]);
        assert!(PipelineSchedule::new(8, 3).is_err());
        assert_eq!(PipelineSchedule::new(5, 1).unwrap().micro_batches, vec![0..5]);
    }

    #[test]
    fn single_partition_model_strategy_matches_sequential_bitwise() {
        let m = skip_model();
        let data = stream(&m, 40, 2);
        let cfg = config(Strategy::Model, 1, 1, 1, 8, 2);
        let dist = fit(&m, &data, &cfg, &FitOptions::default(), SimConfig::default()).unwrap();
        let seq = fit_sequential(&m, &data, &cfg, &FitOptions::default()).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(dist.metrics.len(), 10);
        assert_eq!(bits(dist.losses()), bits(seq.losses()));
        assert_eq!(dist.model, seq.model);
    }

    #[test]
    fn two_replicas_follow_the_sequential_trajectory() {
        let m = chain_model();
        let data = stream(&m, 64, 3);
        let cfg = config(Strategy::Data, 1, 2, 1, 8, 2);
        let opts = FitOptions { record_params: true, eval_chunk: None };
        let dist = fit(&m, &data, &cfg, &opts, SimConfig::default()).unwrap();
        let seq = fit_sequential(&m, &data, &cfg, &opts).unwrap();
        let hist = dist.param_history();
        assert_eq!(hist.len(), seq.param_history.len());
        for (a, b) in hist.iter().zip(&seq.param_history) {
            assert!(max_params_rel_diff(a, b) <= 1e-9);
        }
    }

    #[test]
    fn hybrid_skip_model_loss_curve_matches_sequential() {
        let m = skip_model();
        let data = stream(&m, 80, 4);
        for overlap in [false, true] {
            let cfg = TrainConfig {
                overlap_allreduce: overlap,
                ..config(Strategy::Hybrid, 4, 2, 2, 4, 2)
            };
            let dist = fit(&m, &data, &cfg, &FitOptions::default(), SimConfig::default()).unwrap();
            let seq = fit_sequential(&m, &data, &cfg, &FitOptions::default()).unwrap();
            assert_eq!(dist.metrics.len(), 20);
            for (a, b) in dist.losses().iter().zip(seq.losses()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
            assert!(dist.model.max_param_rel_diff(&seq.model).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn boundary_activation_arrives_bitwise() {
        let m = chain_model();
        let plan = PartitionPlan::from_assignment(vec![0, 0, 1, 1], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, _) = random_batch(&mut rng, 6, &[4], 3);
        let cfg = SimConfig { trace: true, ..Default::default() };
        let (_, net) = run_world(&m, &plan, cfg, |st| st.distributed_forward(0, &x, None).unwrap());
        let got = net.trace(1);
        assert_eq!(got.len(), 1);
        let seq = forward_activations(&m, &x).unwrap();
        assert_eq!(got[0].payload.as_ref().unwrap(), &seq[&1]);
    }

    #[test]
    fn skip_partition_receives_in_sender_order_under_bound_one() {
        let m = skip_model();
        let plan = skip_plan(1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, _) = random_batch(&mut rng, 4, &[3], 3);
        let cfg = SimConfig {
            buffer_bound: 1,
            timeout: Duration::from_secs(10),
            trace: true,
        };
        let (_, net) = run_world(&m, &plan, cfg, |st| st.distributed_forward(0, &x, None).unwrap());
        let senders: Vec<Rank> = net.trace(3).iter().map(|msg| msg.src).collect();
        assert_eq!(senders, vec![1, 2]);
    }

    #[test]
    fn zero_loss_gradient_ships_zero_partials() {
        let spec = ModelSpec::new(
            8,
            vec![3],
            vec![LayerSpec::Input { cost: None }, LayerSpec::dense(4), LayerSpec::dense(3), LayerSpec::loss()],
        );
        let mut m = build_model_from_spec(&spec).unwrap();
        m.set_params(2, DenseParams { weight: Tensor::zeros(&[4, 3]).unwrap(), bias: Tensor::zeros(&[3]).unwrap() })
            .unwrap();
        let plan = PartitionPlan::from_assignment(vec![0, 0, 1, 1], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, _) = random_batch(&mut rng, 5, &[3], 3);
        let p = ((0.0f64 - 0.0) - 3f64.ln()).exp();
        let y = Tensor::full(&[5, 3], p).unwrap();
        let cfg = SimConfig { trace: true, ..Default::default() };
        run_world(&m, &plan, cfg, |st| {
            st.distributed_forward(0, &x, Some(&y)).unwrap();
            st.distributed_backward(0).unwrap()
        })
        .1
        .trace(0)
        .iter()
        .for_each(|msg| {
            assert_eq!(msg.kind, MessageKind::PartialError);
            assert!(msg.payload.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        });
    }

    #[test]
    fn skip_partials_sum_on_the_producer() {
        let m = skip_model();
        let plan = skip_plan(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, labels) = random_batch(&mut rng, 6, &[3], 3);
        let y = Tensor::one_hot(&labels, 3).unwrap();
        let (grads, _) = run_world(&m, &plan, SimConfig::default(), |st| {
            st.distributed_forward(0, &x, Some(&y)).unwrap();
            st.distributed_backward(0).unwrap()
        });
        let acts = forward_activations(&m, &x).unwrap();
        let seq = backward_seq(&m, &acts, &y).unwrap();
        let mut merged = GradientSet::new();
        for g in grads {
            for (id, pg) in g.iter() {
                merged.insert(id, pg.clone());
            }
        }
        assert_eq!(merged, seq);
    }

    #[test]
    fn random_models_forward_loss_and_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for case in 0..30 {
            let m = build_model_from_spec(&random_model_spec(&mut rng, 12, 2, 6)).unwrap();
            let parts = 1 + case % 4.min(m.len());
            let plan = partition(&m, parts.min(m.len())).unwrap();
            let (x, labels) = random_batch(&mut rng, 4, m.input_shape(), m.num_classes());
            let y = Tensor::one_hot(&labels, m.num_classes()).unwrap();
            let (out, _) = run_world(&m, &plan, SimConfig::default(), |st| {
                let loss = st.distributed_forward(0, &x, Some(&y)).unwrap();
                (loss, st.distributed_backward(0).unwrap())
            });
            let (seq_loss, acts) = forward_seq(&m, &x, &y).unwrap();
            let (seq_grads, _) = backward_seq_full(&m, &acts, &y).unwrap();
            let loss = out.iter().find_map(|(l, _)| *l).unwrap();
            assert!((loss - seq_loss).abs() <= 1e-12 * seq_loss.abs().max(1.0));
            let mut merged = GradientSet::new();
            for (_, g) in &out {
                for (id, pg) in g.iter() {
                    merged.insert(id, pg.clone());
                }
            }
            assert!(merged.max_rel_diff(&seq_grads).unwrap() <= 1e-12, "case {case}");
        }
    }

    #[test]
    fn replica_sync_of_opposite_gradients_is_zero() {
        let m = chain_model();
        let plan = PartitionPlan::from_assignment(vec![0, 0, 0, 0], 2).unwrap();
        let (out, _) = run_world(&m, &plan, SimConfig::default(), |st| {
            let sign = if st.replica() == 0 { 1.0 } else { -1.0 };
            let mut g = GradientSet::new();
            for id in st.local_param_layers() {
                let p = st.model().params(id).unwrap();
                g.insert(id, ParamGrad { weight: p.weight.scale(sign), bias: Tensor::full(p.bias.shape(), sign).unwrap() });
            }
            st.replica_sync(g).unwrap()
        });
        for g in out {
            for (_, pg) in g.iter() {
                assert!(pg.weight.data().iter().chain(pg.bias.data()).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn distributed_evaluate_matches_sequential() {
        let m = skip_model();
        let data = stream(&m, 40, 12);
        let plan = skip_plan(2);
        let (out, _) = run_world(&m, &plan, SimConfig::default(), |st| st.evaluate(&data.test, 3).unwrap());
        let seq = crate::model_graph::evaluate_seq(&m, &data.test.x, &data.test.labels, 8).unwrap();
        assert_eq!(out[0], Some(seq));
        assert!(out[1..].iter().all(Option::is_none));
    }

    #[test]
    fn constant_predictor_on_balanced_data_scores_half() {
        let mut m = chain_model();
        m.set_params(2, DenseParams { weight: Tensor::zeros(&[8, 3]).unwrap(), bias: Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap() })
            .unwrap();
        let x = Tensor::zeros(&[4, 4]).unwrap();
        let test = Dataset::new(x, vec![0, 1, 0, 1], 3).unwrap();
        let plan = PartitionPlan::from_assignment(vec![0, 0, 1, 1], 1).unwrap();
        let (out, _) = run_world(&m, &plan, SimConfig::default(), |st| st.evaluate(&test, 2).unwrap());
        assert_eq!(out[0], Some(0.5));
    }
}
