//! Splits a model into contiguous partitions, lays partitions and replicas out
//! on ranks, and derives the boundary-transfer dependency lists.
//!
//! Message order is the deadlock-avoidance rule: during a forward stage a
//! partition first receives from lower partitions in ascending partition
//! order, then sends to higher partitions in ascending order. Backward is
//! the mirror image (receive from higher partitions in descending order, then
//! send to lower ones in descending order). Within one pair of partitions,
//! both sides walk transfers by source layer id. Every rank therefore
//! touches pairs in one global order, which is enough for progress even when
//! every send is a rendezvous.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{GroupPurpose, MessageKind, Rank, RankGroup, Tag};
use crate::model_graph::{LayerId, ModelGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("cannot split {layers} layers into {partitions} partitions")]
    Infeasible { layers: usize, partitions: usize },
    #[error("number of replicas must be positive")]
    NoReplicas,
    #[error("assignment must be contiguous and cover partitions 0..{0}")]
    NotContiguous(usize),
    #[error("layer {layer} has invalid cost {cost}")]
    BadCost { layer: LayerId, cost: f64 },
}

/// How per-layer costs are estimated for balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// Parameter count plus per-sample activation size, unless the layer
    /// config sets `cost`.
    #[default]
    ParamsPlusActivations,
    /// Every layer costs 1.
    Uniform,
}

pub fn layer_costs(model: &ModelGraph, cost_model: CostModel) -> Vec<f64> {
    model
        .layers()
        .iter()
        .map(|l| match (cost_model, l.cost) {
            (CostModel::Uniform, _) => 1.0,
            (_, Some(c)) => c,
            _ => (l.param_count() + l.out_features()) as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    num_partitions: usize,
    num_replicas: usize,
    assignment: Vec<usize>,
}

impl PartitionPlan {
    pub fn from_assignment(assignment: Vec<usize>, num_replicas: usize) -> Result<Self, PartitionError> {
        if num_replicas == 0 {
            return Err(PartitionError::NoReplicas);
        }
        let num_partitions = assignment.last().map_or(0, |&p| p + 1);
        let ok = assignment.first() == Some(&0) && assignment.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1);
        if !ok {
            return Err(PartitionError::NotContiguous(num_partitions));
        }
        Ok(Self {
            num_partitions,
            num_replicas,
            assignment,
        })
    }

    pub fn with_replicas(mut self, num_replicas: usize) -> Result<Self, PartitionError> {
        if num_replicas == 0 {
            return Err(PartitionError::NoReplicas);
        }
        self.num_replicas = num_replicas;
        Ok(self)
    }

    pub fn num_partitions(&self) -> usize {
        self.num_partitions
    }

    pub fn num_replicas(&self) -> usize {
        self.num_replicas
    }

    pub fn world_size(&self) -> usize {
        self.num_partitions * self.num_replicas
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn partition_of(&self, layer: LayerId) -> usize {
        self.assignment[layer]
    }

    pub fn rank_of(&self, replica: usize, partition: usize) -> Rank {
        replica * self.num_partitions + partition
    }

    pub fn replica_of_rank(&self, rank: Rank) -> usize {
        rank / self.num_partitions
    }

    pub fn partition_of_rank(&self, rank: Rank) -> usize {
        rank % self.num_partitions
    }

    /// Layer ids held by `partition`.
    pub fn local_layers(&self, partition: usize) -> Range<LayerId> {
        let start = self.assignment.partition_point(|&p| p < partition);
        let end = self.assignment.partition_point(|&p| p <= partition);
        start..end
    }
}

/// Contiguous split that walks layers in topological order, closing a
/// partition once the next layer's midpoint would overshoot the even share of
/// the remaining cost.
pub fn partition_with_costs(costs: &[f64], num_partitions: usize) -> Result<PartitionPlan, PartitionError> {
    let n = costs.len();
    if num_partitions == 0 || num_partitions > n {
        return Err(PartitionError::Infeasible {
            layers: n,
            partitions: num_partitions,
        });
    }
    if let Some((layer, &cost)) = costs.iter().enumerate().find(|(_, c)| !c.is_finite() || **c < 0.0) {
        return Err(PartitionError::BadCost { layer, cost });
    }
    let mut assignment = Vec::with_capacity(n);
    let mut next = 0;
    for part in 0..num_partitions {
        let parts_left = num_partitions - part;
        let remaining: f64 = costs[next..].iter().sum();
        let target = remaining / parts_left as f64;
        // Leave at least one layer for every later partition.
        let last_allowed = n - (parts_left - 1);
        let mut acc = 0.0;
        let mut end = next;
        while end < last_allowed {
            let c = costs[end];
            if parts_left > 1 && end > next && acc + c / 2.0 > target {
                break;
            }
            acc += c;
            end += 1;
        }
        assignment.extend(std::iter::repeat_n(part, end - next));
        next = end;
    }
    debug_assert_eq!(assignment.len(), n);
    PartitionPlan::from_assignment(assignment, 1)
}

pub fn partition(model: &ModelGraph, num_partitions: usize) -> Result<PartitionPlan, PartitionError> {
    partition_with(model, num_partitions, CostModel::default())
}

pub fn partition_with(model: &ModelGraph, num_partitions: usize, cost_model: CostModel) -> Result<PartitionPlan, PartitionError> {
    partition_with_costs(&layer_costs(model, cost_model), num_partitions)
}

/// One activation shipped from `src_layer` on `src_partition` to
/// `dst_partition`, where it feeds `dst_layers`. A layer feeding several
/// layers of the same remote partition is sent once.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Transfer {
    pub src_layer: LayerId,
    pub src_partition: usize,
    pub dst_partition: usize,
    /// Ascending.
    pub dst_layers: Vec<LayerId>,
}

impl Transfer {
    pub fn tag(&self, kind: MessageKind, stage: usize) -> Tag {
        Tag::edge(kind, stage, self.src_layer, self.dst_layers[0])
    }

    pub fn edges(&self) -> impl Iterator<Item = (LayerId, LayerId)> + '_ {
        self.dst_layers.iter().map(|&d| (self.src_layer, d))
    }
}

/// Per-partition forward ("F") and backward ("B") dependency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyLists {
    pub partition: usize,
    pub layers: Range<LayerId>,
    /// For each local layer (indexed from `layers.start`), the transfers it
    /// sends, ascending by destination partition.
    pub forward: Vec<Vec<Transfer>>,
    /// For each local layer, the remote transfers it consumes, ascending by
    /// source partition then source layer. Partial errors flow back along
    /// these.
    pub backward: Vec<Vec<Transfer>>,
    outbound: Vec<Transfer>,
    inbound: Vec<Transfer>,
}

impl DependencyLists {
    /// Transfers this partition sends in the forward pass, in send order.
    pub fn outbound(&self) -> &[Transfer] {
        &self.outbound
    }

    /// Transfers this partition receives in the forward pass, in receive order.
    pub fn inbound(&self) -> &[Transfer] {
        &self.inbound
    }

    /// Partial errors received during backward: mirrored outbound transfers,
    /// highest partition first.
    pub fn backward_recv_order(&self) -> Vec<&Transfer> {
        let mut v: Vec<&Transfer> = self.outbound.iter().collect();
        v.sort_by_key(|t| (std::cmp::Reverse(t.dst_partition), t.src_layer));
        v
    }

    /// Partial errors sent during backward: mirrored inbound transfers,
    /// highest partition first.
    pub fn backward_send_order(&self) -> Vec<&Transfer> {
        let mut v: Vec<&Transfer> = self.inbound.iter().collect();
        v.sort_by_key(|t| (std::cmp::Reverse(t.src_partition), t.src_layer));
        v
    }
}

pub fn build_dependency_lists(model: &ModelGraph, plan: &PartitionPlan) -> Vec<DependencyLists> {
    let mut transfers: BTreeMap<(LayerId, usize), Vec<LayerId>> = BTreeMap::new();
    for node in model.layers() {
        let dst_part = plan.partition_of(node.id);
        for &src in &node.inputs {
            if plan.partition_of(src) != dst_part {
                let dsts = transfers.entry((src, dst_part)).or_default();
                if !dsts.contains(&node.id) {
                    dsts.push(node.id);
                }
            }
        }
    }
    let all: Vec<Transfer> = transfers
        .into_iter()
        .map(|((src_layer, dst_partition), mut dst_layers)| {
            dst_layers.sort_unstable();
            Transfer {
                src_layer,
                src_partition: plan.partition_of(src_layer),
                dst_partition,
                dst_layers,
            }
        })
        .collect();

    (0..plan.num_partitions())
        .map(|p| {
            let layers = plan.local_layers(p);
            let mut outbound: Vec<Transfer> = all.iter().filter(|t| t.src_partition == p).cloned().collect();
            outbound.sort_by_key(|t| (t.dst_partition, t.src_layer));
            let mut inbound: Vec<Transfer> = all.iter().filter(|t| t.dst_partition == p).cloned().collect();
            inbound.sort_by_key(|t| (t.src_partition, t.src_layer));
            let forward = layers
                .clone()
                .map(|l| {
                    let mut v: Vec<Transfer> = outbound.iter().filter(|t| t.src_layer == l).cloned().collect();
                    v.sort_by_key(|t| t.dst_partition);
                    v
                })
                .collect();
            let backward = layers
                .clone()
                .map(|l| inbound.iter().filter(|t| t.dst_layers.contains(&l)).cloned().collect())
                .collect();
            DependencyLists {
                partition: p,
                layers,
                forward,
                backward,
                outbound,
                inbound,
            }
        })
        .collect()
}

/// One allreduce group per partition: the ranks holding that partition in
/// every replica.
pub fn replica_groups(plan: &PartitionPlan) -> Vec<RankGroup> {
    (0..plan.num_partitions())
        .map(|p| {
            let members = (0..plan.num_replicas()).map(|r| plan.rank_of(r, p)).collect();
            RankGroup::new(members, GroupPurpose::AllreducePerPartition).expect("ascending by construction")
        })
        .collect()
}

/// Diagnostic dump: one line per partition, then one line per crossing edge.
pub fn dump(model: &ModelGraph, plan: &PartitionPlan) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "plan partitions={} replicas={} world={}",
        plan.num_partitions(),
        plan.num_replicas(),
        plan.world_size()
    );
    for p in 0..plan.num_partitions() {
        let r = plan.local_layers(p);
        let ranks: Vec<Rank> = (0..plan.num_replicas()).map(|rep| plan.rank_of(rep, p)).collect();
        let _ = writeln!(out, "partition {p} layers={}..{} ranks={ranks:?}", r.start, r.end);
    }
    for deps in build_dependency_lists(model, plan) {
        for t in deps.outbound() {
            for (src, dst) in t.edges() {
                let _ = writeln!(
                    out,
                    "edge {src}->{dst} partition {}->{} tag={}",
                    t.src_partition,
                    t.dst_partition,
                    t.tag(MessageKind::Activation, 0)
                );
            }
        }
    }
    out
}
