use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CommError, Rank};
use crate::model_graph::LayerId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    Activation = 0,
    PartialError = 1,
    GradientContribution = 2,
    ControlBarrier = 3,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => MessageKind::Activation,
            1 => MessageKind::PartialError,
            2 => MessageKind::GradientContribution,
            3 => MessageKind::ControlBarrier,
            _ => return None,
        })
    }
}

/// Message tag.
///
/// Layout, high to low bits:
/// `class:2 | sub:2 | stage:20 | src_layer:20 | dst_layer:20` for edge tags and
/// `class:2 | op:6 | key:56` for collective tags.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tag(pub u64);

const CLASS_EDGE: u64 = 0;
const CLASS_COLLECTIVE: u64 = 1;
const FIELD_20: u64 = (1 << 20) - 1;
pub const MAX_STAGES: usize = 1 << 20;
pub const MAX_LAYERS: usize = 1 << 20;

/// Collective operation families, each with its own tag space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CollectiveOp {
    AllreduceReduce = 1,
    AllreduceBroadcast = 2,
    AllreduceHeader = 3,
    Broadcast = 4,
    Gather = 5,
    Barrier = 6,
    AllreduceVerdict = 7,
}

impl Tag {
    /// Tag of the boundary transfer `src_layer → dst_layer` for a pipeline stage.
    /// Activations and partial errors on the same edge get different tags.
    pub fn edge(kind: MessageKind, stage: usize, src_layer: LayerId, dst_layer: LayerId) -> Tag {
        assert!(stage < MAX_STAGES && src_layer < MAX_LAYERS && dst_layer < MAX_LAYERS);
        let sub = match kind {
            MessageKind::Activation => 0,
            MessageKind::PartialError => 1,
            _ => 2,
        };
        Tag((CLASS_EDGE << 62)
            | (sub << 60)
            | ((stage as u64) << 40)
            | ((src_layer as u64) << 20)
            | dst_layer as u64)
    }

    pub fn collective(op: CollectiveOp, key: u64) -> Tag {
        assert!(key < (1 << 56), "collective key out of range");
        Tag((CLASS_COLLECTIVE << 62) | ((op as u64) << 56) | key)
    }

    pub fn is_edge(&self) -> bool {
        self.0 >> 62 == CLASS_EDGE
    }

    pub fn stage(&self) -> Option<usize> {
        self.is_edge().then_some(((self.0 >> 40) & FIELD_20) as usize)
    }

    pub fn edge_layers(&self) -> Option<(LayerId, LayerId)> {
        self.is_edge()
            .then_some((((self.0 >> 20) & FIELD_20) as usize, (self.0 & FIELD_20) as usize))
    }
}

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.stage(), self.edge_layers()) {
            (Some(s), Some((a, b))) => write!(f, "Tag(edge {a}->{b} stage {s} sub {})", (self.0 >> 60) & 3),
            _ => write!(f, "Tag(coll op {} key {})", (self.0 >> 56) & 0x3f, self.0 & ((1 << 56) - 1)),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub tag: Tag,
    pub src: Rank,
    pub dst: Rank,
    pub payload: Option<Tensor>,
}

impl Message {
    pub fn new(kind: MessageKind, tag: Tag, src: Rank, dst: Rank, payload: Tensor) -> Self {
        Self {
            kind,
            tag,
            src,
            dst,
            payload: Some(payload),
        }
    }

    pub fn barrier(tag: Tag, src: Rank, dst: Rank) -> Self {
        Self {
            kind: MessageKind::ControlBarrier,
            tag,
            src,
            dst,
            payload: None,
        }
    }

    pub fn into_payload(self) -> Result<Tensor, CommError> {
        self.payload.ok_or(CommError::MissingPayload {
            src: self.src,
            tag: self.tag,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupPurpose {
    AllreducePerPartition,
    World,
}

/// A sorted set of ranks taking part in a collective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankGroup {
    members: Vec<Rank>,
    purpose: GroupPurpose,
}

impl RankGroup {
    pub fn new(members: Vec<Rank>, purpose: GroupPurpose) -> Result<Self, CommError> {
        if members.is_empty() || members.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CommError::InvalidGroup(members));
        }
        Ok(Self { members, purpose })
    }

    pub fn world(size: usize) -> Self {
        Self {
            members: (0..size).collect(),
            purpose: GroupPurpose::World,
        }
    }

    pub fn members(&self) -> &[Rank] {
        &self.members
    }

    pub fn purpose(&self) -> GroupPurpose {
        self.purpose
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn index_of(&self, rank: Rank) -> Option<usize> {
        self.members.binary_search(&rank).ok()
    }

    pub fn contains(&self, rank: Rank) -> bool {
        self.index_of(rank).is_some()
    }
}
