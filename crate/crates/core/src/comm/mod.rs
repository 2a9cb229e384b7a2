//! Communication engine: point-to-point send/recv with tag matching, plus
//! broadcast and allreduce over rank groups.
//!
//! Two transports implement [`Transport`]: an in-process simulated network
//! with bounded per-peer buffers ([`sim`]) and a TCP transport with
//! length-prefixed frames ([`socket`]).

mod collective;
mod mailbox;
mod message;
pub mod sim;
pub mod socket;

use std::time::Duration;

use thiserror::Error;

pub use collective::{allreduce, barrier, broadcast, AllreduceHandle, CollectiveEngine, ReduceOp};
pub use message::{CollectiveOp, GroupPurpose, Message, MessageKind, RankGroup, Tag, MAX_LAYERS, MAX_STAGES};
pub use sim::{SimConfig, SimEndpoint, SimNetwork};
pub use socket::{decode_frame, encode_frame, SocketConfig, SocketTransport};

pub type Rank = usize;

pub const DEFAULT_BUFFER_BOUND: usize = 64;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("rank {rank} is outside a world of {world}")]
    UnknownRank { rank: Rank, world: usize },
    #[error("rank {0} cannot send to itself")]
    SelfSend(Rank),
    #[error("message source {claimed} does not match sending rank {actual}")]
    WrongSource { claimed: Rank, actual: Rank },
    #[error("transport closed")]
    Closed,
    #[error("peer {peer} failed or disconnected while {op} tag {tag}")]
    PeerFailure { peer: Rank, op: &'static str, tag: Tag },
    #[error("timed out after {timeout:?} in {op} with peer {peer} on tag {tag:?}")]
    Timeout {
        op: &'static str,
        peer: Rank,
        tag: Tag,
        timeout: Duration,
    },
    #[error("message from {src} with tag {tag:?} has no payload")]
    MissingPayload { src: Rank, tag: Tag },
    #[error("invalid rank group {0:?}: must be non-empty and strictly sorted")]
    InvalidGroup(Vec<Rank>),
    #[error("rank {rank} is not a member of group {members:?}")]
    NotMember { rank: Rank, members: Vec<Rank> },
    #[error("collective shape mismatch: rank {rank} has {got:?}, rank {reference_rank} has {expected:?}")]
    ShapeMismatch {
        rank: Rank,
        got: Vec<usize>,
        reference_rank: Rank,
        expected: Vec<usize>,
    },
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("rendezvous: {0}")]
    Rendezvous(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

impl From<std::io::Error> for CommError {
    fn from(e: std::io::Error) -> Self {
        CommError::Io(e.to_string())
    }
}

/// Matched, tagged point-to-point messaging between ranks.
///
/// Implementations are shared between a rank's main worker and its collective
/// engine thread, so every method takes `&self`.
pub trait Transport: Send + Sync {
    fn rank(&self) -> Rank;
    fn world_size(&self) -> usize;
    /// Enqueues `msg` for `msg.dst`; blocks while the per-peer buffer is full.
    fn send(&self, msg: Message) -> Result<(), CommError>;
    /// Blocks until the message from `src` carrying `tag` arrives. Messages with
    /// equal `(src, tag)` are delivered in send order.
    fn recv(&self, src: Rank, tag: Tag) -> Result<Message, CommError>;
    /// Marks this endpoint as gone; peers waiting on it observe `PeerFailure`.
    fn close(&self);
}

pub(crate) fn check_peer(t: &dyn Transport, peer: Rank) -> Result<(), CommError> {
    if peer >= t.world_size() {
        return Err(CommError::UnknownRank {
            rank: peer,
            world: t.world_size(),
        });
    }
    if peer == t.rank() {
        return Err(CommError::SelfSend(peer));
    }
    Ok(())
}
