//! Group collectives built on point-to-point messages.
//!
//! Allreduce always reduces in ascending group-rank order, so every member
//! gets the same bits as a straight-line `((x0 + x1) + x2) + …` on one
//! machine:
//!
//! * 1 member: identity.
//! * 2 members: direct exchange; both sides compute `x_low + x_high`.
//! * n > 2: the tensor is cut into `n` chunks which are pipelined along the
//!   ring from member 0 to member n-1, each hop adding its own chunk to the
//!   running partial sum; member n-1 then streams the reduced chunks on
//!   around the ring (n-1 → 0 → 1 → … → n-2).
//!
//! A shape header is exchanged first so that mismatched contributions fail on
//! every member instead of hanging.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use super::{CollectiveOp, CommError, Message, MessageKind, Rank, RankGroup, Tag, Transport};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

fn membership(t: &dyn Transport, group: &RankGroup) -> Result<usize, CommError> {
    group.index_of(t.rank()).ok_or_else(|| CommError::NotMember {
        rank: t.rank(),
        members: group.members().to_vec(),
    })
}

fn send_tensor(t: &dyn Transport, dst: Rank, tag: Tag, payload: Tensor) -> Result<(), CommError> {
    t.send(Message::new(MessageKind::GradientContribution, tag, t.rank(), dst, payload))
}

fn recv_tensor(t: &dyn Transport, src: Rank, tag: Tag) -> Result<Tensor, CommError> {
    t.recv(src, tag)?.into_payload()
}

fn encode_shape(shape: &[usize]) -> impl Iterator<Item = f64> + '_ {
    std::iter::once(shape.len() as f64).chain(shape.iter().map(|&d| d as f64))
}

fn decode_shapes(flat: &[f64]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < flat.len() {
        let n = flat[i] as usize;
        out.push(flat[i + 1..i + 1 + n].iter().map(|&d| d as usize).collect());
        i += 1 + n;
    }
    out
}

/// Gathers every member's shape along the ring and broadcasts a verdict back,
/// so all members agree on success or on the first mismatching member.
fn check_shapes(t: &dyn Transport, group: &RankGroup, me: usize, shape: &[usize], key: u64) -> Result<(), CommError> {
    let n = group.len();
    let m = group.members();
    let up = Tag::collective(CollectiveOp::AllreduceHeader, key);
    let down = Tag::collective(CollectiveOp::AllreduceVerdict, key);
    let mut shapes: Vec<f64> = Vec::new();
    if me > 0 {
        shapes = recv_tensor(t, m[me - 1], up)?.into_data();
    }
    shapes.extend(encode_shape(shape));
    let verdict = if me == n - 1 {
        let all = decode_shapes(&shapes);
        let v = all.iter().position(|s| s != &all[0]).map_or(-1.0, |bad| bad as f64);
        send_tensor(t, m[0], down, Tensor::scalar(v))?;
        v
    } else {
        send_tensor(t, m[me + 1], up, Tensor::vector(shapes.clone())?)?;
        let v = recv_tensor(t, m[(me + n - 1) % n], down)?.data()[0];
        if me != n - 2 {
            send_tensor(t, m[me + 1], down, Tensor::scalar(v))?;
        }
        v
    };
    if verdict >= 0.0 {
        let bad = verdict as usize;
        let all = decode_shapes(&shapes);
        return Err(CommError::ShapeMismatch {
            rank: m[bad],
            got: all.get(bad).cloned().unwrap_or_default(),
            reference_rank: m[0],
            expected: all.first().cloned().unwrap_or_else(|| shape.to_vec()),
        });
    }
    Ok(())
}

fn chunk_bounds(len: usize, chunks: usize) -> Vec<(usize, usize)> {
    let base = len / chunks;
    let extra = len % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let size = base + usize::from(c < extra);
        out.push((start, start + size));
        start += size;
    }
    out
}

/// Reduces `payload` across `group`; every member returns bitwise-identical data.
///
/// `key` separates concurrent collectives; all members must pass the same key.
pub fn allreduce(
    t: &dyn Transport,
    group: &RankGroup,
    payload: &Tensor,
    op: ReduceOp,
    key: u64,
) -> Result<Tensor, CommError> {
    let me = membership(t, group)?;
    let n = group.len();
    if n == 1 {
        return Ok(payload.clone());
    }
    check_shapes(t, group, me, payload.shape(), key)?;
    let m = group.members();
    let reduce_tag = Tag::collective(CollectiveOp::AllreduceReduce, key);
    let bcast_tag = Tag::collective(CollectiveOp::AllreduceBroadcast, key);
    let mut summed = if n == 2 {
        let peer = m[1 - me];
        if me == 0 {
            send_tensor(t, peer, reduce_tag, payload.clone())?;
            let other = recv_tensor(t, peer, reduce_tag)?;
            payload.add(&other)?
        } else {
            let other = recv_tensor(t, peer, reduce_tag)?;
            send_tensor(t, peer, reduce_tag, payload.clone())?;
            other.add(payload)?
        }
    } else {
        ring_reduce(t, m, me, payload, reduce_tag, bcast_tag)?
    };
    if op == ReduceOp::Mean {
        let nf = n as f64;
        for x in summed.data_mut() {
            *x /= nf;
        }
    }
    Ok(summed)
}

fn ring_reduce(
    t: &dyn Transport,
    m: &[Rank],
    me: usize,
    payload: &Tensor,
    reduce_tag: Tag,
    bcast_tag: Tag,
) -> Result<Tensor, CommError> {
    let n = m.len();
    let data = payload.data();
    let bounds = chunk_bounds(data.len(), n.min(data.len()));
    let mut result = vec![0.0; data.len()];

    // Reduce phase: partial sums flow 0 → 1 → … → n-1, chunk by chunk.
    for &(lo, hi) in &bounds {
        let own = &data[lo..hi];
        let partial: Vec<f64> = if me == 0 {
            own.to_vec()
        } else {
            let mut acc = recv_tensor(t, m[me - 1], reduce_tag)?.into_data();
            for (a, &x) in acc.iter_mut().zip(own) {
                *a += x;
            }
            acc
        };
        if me < n - 1 {
            send_tensor(t, m[me + 1], reduce_tag, Tensor::vector(partial)?)?;
        } else {
            result[lo..hi].copy_from_slice(&partial);
        }
    }

    // Broadcast phase: reduced chunks flow n-1 → 0 → 1 → … → n-2.
    for &(lo, hi) in &bounds {
        if me != n - 1 {
            let prev = m[(me + n - 1) % n];
            let chunk = recv_tensor(t, prev, bcast_tag)?;
            result[lo..hi].copy_from_slice(chunk.data());
        }
        if me != n - 2 {
            let next = m[(me + 1) % n];
            send_tensor(t, next, bcast_tag, Tensor::vector(result[lo..hi].to_vec())?)?;
        }
    }
    Ok(Tensor::new(payload.shape().to_vec(), result)?)
}

/// Every member returns `root`'s payload; other members' `payload` is ignored.
pub fn broadcast(t: &dyn Transport, group: &RankGroup, root: Rank, payload: &Tensor, key: u64) -> Result<Tensor, CommError> {
    membership(t, group)?;
    if !group.contains(root) {
        return Err(CommError::NotMember {
            rank: root,
            members: group.members().to_vec(),
        });
    }
    let tag = Tag::collective(CollectiveOp::Broadcast, key);
    if t.rank() == root {
        for &r in group.members().iter().filter(|&&r| r != root) {
            send_tensor(t, r, tag, payload.clone())?;
        }
        Ok(payload.clone())
    } else {
        recv_tensor(t, root, tag)
    }
}

/// Returns once every member has entered the barrier.
pub fn barrier(t: &dyn Transport, group: &RankGroup, key: u64) -> Result<(), CommError> {
    membership(t, group)?;
    let root = group.members()[0];
    let tag = Tag::collective(CollectiveOp::Barrier, key);
    if t.rank() == root {
        for &r in &group.members()[1..] {
            t.recv(r, tag)?;
        }
        for &r in &group.members()[1..] {
            t.send(Message::barrier(tag, root, r))?;
        }
    } else {
        t.send(Message::barrier(tag, t.rank(), root))?;
        t.recv(root, tag)?;
    }
    Ok(())
}

struct Job {
    group: RankGroup,
    payload: Tensor,
    op: ReduceOp,
    key: u64,
    reply: mpsc::Sender<Result<Tensor, CommError>>,
}

/// Pending result of [`CollectiveEngine::start_allreduce`].
pub struct AllreduceHandle {
    rx: mpsc::Receiver<Result<Tensor, CommError>>,
}

impl AllreduceHandle {
    pub fn wait(self) -> Result<Tensor, CommError> {
        self.rx.recv().unwrap_or(Err(CommError::Closed))
    }
}

/// Background thread that runs allreduces in submission order, so they can
/// overlap with the caller's computation.
pub struct CollectiveEngine {
    tx: Option<mpsc::Sender<Job>>,
    worker: Option<JoinHandle<()>>,
}

impl CollectiveEngine {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let worker = std::thread::Builder::new()
            .name(format!("collectives-{}", transport.rank()))
            .spawn(move || {
                for job in rx {
                    let r = allreduce(transport.as_ref(), &job.group, &job.payload, job.op, job.key);
                    let _ = job.reply.send(r);
                }
            })
            .expect("spawn collective thread");
        Self {
            tx: Some(tx),
            worker: Some(worker),
        }
    }

    pub fn start_allreduce(&self, group: RankGroup, payload: Tensor, op: ReduceOp, key: u64) -> AllreduceHandle {
        let (reply, rx) = mpsc::channel();
        let job = Job {
            group,
            payload,
            op,
            key,
            reply,
        };
        if let Some(tx) = &self.tx {
            if let Err(mpsc::SendError(job)) = tx.send(job) {
                let _ = job.reply.send(Err(CommError::Closed));
            }
        }
        AllreduceHandle { rx }
    }
}

impl Drop for CollectiveEngine {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
