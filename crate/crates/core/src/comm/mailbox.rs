use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{CommError, Message, Rank, Tag};

/// Inbound message store of one rank, with per-sender flow control.
///
/// A message occupies a buffer slot of its sender from deposit until the
/// receiver matches it with `take`. With `bound == 0` the sender additionally
/// waits until its message has been taken (rendezvous).
pub(crate) struct Mailbox {
    state: Mutex<State>,
    cond: Condvar,
}

struct State {
    queues: HashMap<(Rank, Tag), VecDeque<(u64, Message)>>,
    outstanding: Vec<usize>,
    taken: HashSet<u64>,
    next_id: u64,
    peer_closed: Vec<bool>,
    closed: bool,
    trace: Option<Vec<Message>>,
}

impl Mailbox {
    pub fn new(world: usize, trace: bool) -> Self {
        Self {
            state: Mutex::new(State {
                queues: HashMap::new(),
                outstanding: vec![0; world],
                taken: HashSet::new(),
                next_id: 0,
                peer_closed: vec![false; world],
                closed: false,
                trace: trace.then(Vec::new),
            }),
            cond: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait<'a>(
        &self,
        guard: MutexGuard<'a, State>,
        deadline: Instant,
        timeout_err: impl FnOnce() -> CommError,
    ) -> Result<MutexGuard<'a, State>, CommError> {
        let now = Instant::now();
        if now >= deadline {
            return Err(timeout_err());
        }
        let (g, _) = self
            .cond
            .wait_timeout(guard, deadline - now)
            .unwrap_or_else(|e| e.into_inner());
        Ok(g)
    }

    /// Called on the receiver's mailbox by (or on behalf of) sender `src`.
    pub fn deposit(&self, msg: Message, bound: Option<usize>, timeout: Duration) -> Result<(), CommError> {
        let src = msg.src;
        let tag = msg.tag;
        let deadline = Instant::now() + timeout;
        let timeout_err = || CommError::Timeout {
            op: "send",
            peer: msg.dst,
            tag,
            timeout,
        };
        let mut st = self.lock();
        let slots = bound.map(|b| b.max(1));
        loop {
            if st.closed {
                return Err(CommError::PeerFailure {
                    peer: msg.dst,
                    op: "sending",
                    tag,
                });
            }
            if slots.is_none_or(|s| st.outstanding[src] < s) {
                break;
            }
            st = self.wait(st, deadline, timeout_err)?;
        }
        let id = st.next_id;
        st.next_id += 1;
        st.outstanding[src] += 1;
        let dst = msg.dst;
        st.queues.entry((src, tag)).or_default().push_back((id, msg));
        self.cond.notify_all();
        if bound == Some(0) {
            loop {
                if st.taken.remove(&id) {
                    break;
                }
                if st.closed {
                    return Err(CommError::PeerFailure {
                        peer: dst,
                        op: "sending",
                        tag,
                    });
                }
                st = self.wait(st, deadline, || CommError::Timeout {
                    op: "send",
                    peer: dst,
                    tag,
                    timeout,
                })?;
            }
        }
        Ok(())
    }

    pub fn take(&self, src: Rank, tag: Tag, timeout: Duration, rendezvous: bool) -> Result<Message, CommError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if st.closed {
                return Err(CommError::Closed);
            }
            let hit = st.queues.get_mut(&(src, tag)).and_then(|q| q.pop_front());
            if let Some((id, msg)) = hit {
                if st.queues.get(&(src, tag)).is_some_and(|q| q.is_empty()) {
                    st.queues.remove(&(src, tag));
                }
                st.outstanding[src] -= 1;
                if rendezvous {
                    st.taken.insert(id);
                }
                if let Some(trace) = st.trace.as_mut() {
                    trace.push(msg.clone());
                }
                self.cond.notify_all();
                return Ok(msg);
            }
            if st.peer_closed[src] {
                return Err(CommError::PeerFailure {
                    peer: src,
                    op: "receiving",
                    tag,
                });
            }
            st = self.wait(st, deadline, || CommError::Timeout {
                op: "recv",
                peer: src,
                tag,
                timeout,
            })?;
        }
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.cond.notify_all();
    }

    pub fn mark_peer_closed(&self, peer: Rank) {
        self.lock().peer_closed[peer] = true;
        self.cond.notify_all();
    }

    pub fn trace(&self) -> Vec<Message> {
        self.lock().trace.clone().unwrap_or_default()
    }
}
