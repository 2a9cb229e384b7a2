//! In-process transport: one endpoint per rank, FIFO per `(src, tag)`, with a
//! bounded number of unmatched messages per sender/receiver pair.

use std::sync::Arc;
use std::time::Duration;

use super::mailbox::Mailbox;
use super::{check_peer, CommError, Message, Rank, Tag, Transport, DEFAULT_BUFFER_BOUND, DEFAULT_TIMEOUT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Unmatched messages a sender may have outstanding per receiver before
    /// `send` blocks. `0` makes every send a rendezvous.
    pub buffer_bound: usize,
    pub timeout: Duration,
    /// Record every delivered message (with payload) per receiver.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            buffer_bound: DEFAULT_BUFFER_BOUND,
            timeout: DEFAULT_TIMEOUT,
            trace: false,
        }
    }
}

struct Shared {
    config: SimConfig,
    mailboxes: Vec<Mailbox>,
}

#[derive(Clone)]
pub struct SimNetwork {
    shared: Arc<Shared>,
}

impl SimNetwork {
    pub fn new(world: usize, config: SimConfig) -> Self {
        assert!(world > 0, "world size must be positive");
        Self {
            shared: Arc::new(Shared {
                config,
                mailboxes: (0..world).map(|_| Mailbox::new(world, config.trace)).collect(),
            }),
        }
    }

    pub fn world_size(&self) -> usize {
        self.shared.mailboxes.len()
    }

    pub fn endpoint(&self, rank: Rank) -> SimEndpoint {
        assert!(rank < self.world_size());
        SimEndpoint {
            rank,
            shared: Arc::clone(&self.shared),
        }
    }

    pub fn endpoints(&self) -> Vec<SimEndpoint> {
        (0..self.world_size()).map(|r| self.endpoint(r)).collect()
    }

    /// Messages delivered to `rank`, in the order its receives completed.
    pub fn trace(&self, rank: Rank) -> Vec<Message> {
        self.shared.mailboxes[rank].trace()
    }
}

#[derive(Clone)]
pub struct SimEndpoint {
    rank: Rank,
    shared: Arc<Shared>,
}

impl Transport for SimEndpoint {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.shared.mailboxes.len()
    }

    fn send(&self, msg: Message) -> Result<(), CommError> {
        check_peer(self, msg.dst)?;
        if msg.src != self.rank {
            return Err(CommError::WrongSource {
                claimed: msg.src,
                actual: self.rank,
            });
        }
        let cfg = &self.shared.config;
        self.shared.mailboxes[msg.dst].deposit(msg, Some(cfg.buffer_bound), cfg.timeout)
    }

    fn recv(&self, src: Rank, tag: Tag) -> Result<Message, CommError> {
        check_peer(self, src)?;
        let cfg = &self.shared.config;
        self.shared.mailboxes[self.rank].take(src, tag, cfg.timeout, cfg.buffer_bound == 0)
    }

    fn close(&self) {
        self.shared.mailboxes[self.rank].close();
        for (r, mb) in self.shared.mailboxes.iter().enumerate() {
            if r != self.rank {
                mb.mark_peer_closed(self.rank);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::MessageKind;
    use crate::tensor::Tensor;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::thread;

    fn msg(src: Rank, dst: Rank, tag: u64, v: f64) -> Message {
        Message::new(MessageKind::Activation, Tag(tag), src, dst, Tensor::scalar(v))
    }

    #[test]
    fn send_then_recv_is_bitwise_identical() {
        let net = SimNetwork::new(2, SimConfig::default());
        let [a, b] = [net.endpoint(0), net.endpoint(1)];
        let payload = Tensor::vector(vec![0.1, -3.5e-300, f64::MAX]).unwrap();
        a.send(Message::new(MessageKind::Activation, Tag(9), 0, 1, payload.clone())).unwrap();
        let got = b.recv(0, Tag(9)).unwrap();
        assert_eq!(got.payload.unwrap().checksum(), payload.checksum());
    }

    #[test]
    fn distinct_tags_match_in_any_order() {
        let net = SimNetwork::new(2, SimConfig::default());
        let (a, b) = (net.endpoint(0), net.endpoint(1));
        a.send(msg(0, 1, 1, 1.0)).unwrap();
        a.send(msg(0, 1, 2, 2.0)).unwrap();
        assert_eq!(b.recv(0, Tag(2)).unwrap().payload.unwrap().data(), &[2.0]);
        assert_eq!(b.recv(0, Tag(1)).unwrap().payload.unwrap().data(), &[1.0]);
    }

    #[test]
    fn equal_tags_are_fifo() {
        let net = SimNetwork::new(2, SimConfig::default());
        let (a, b) = (net.endpoint(0), net.endpoint(1));
        for v in 0..5 {
            a.send(msg(0, 1, 7, v as f64)).unwrap();
        }
        for v in 0..5 {
            assert_eq!(b.recv(0, Tag(7)).unwrap().payload.unwrap().data(), &[v as f64]);
        }
    }

    #[test]
    fn bound_one_blocks_second_send_until_received() {
        let net = SimNetwork::new(2, SimConfig { buffer_bound: 1, ..Default::default() });
        let (a, b) = (net.endpoint(0), net.endpoint(1));
        let second_done = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&second_done);
        let sender = thread::spawn(move || {
            a.send(msg(0, 1, 1, 1.0)).unwrap();
            a.send(msg(0, 1, 2, 2.0)).unwrap();
            flag.store(true, Ordering::SeqCst);
        });
        thread::sleep(Duration::from_millis(100));
        assert!(!second_done.load(Ordering::SeqCst), "second send must block while the slot is taken");
        b.recv(0, Tag(1)).unwrap();
        sender.join().unwrap();
        assert!(second_done.load(Ordering::SeqCst));
        b.recv(0, Tag(2)).unwrap();
    }

    #[test]
    fn rendezvous_send_waits_for_matching_recv() {
        let net = SimNetwork::new(2, SimConfig { buffer_bound: 0, ..Default::default() });
        let (a, b) = (net.endpoint(0), net.endpoint(1));
        let done = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&done);
        let sender = thread::spawn(move || {
            a.send(msg(0, 1, 1, 1.0)).unwrap();
            flag.store(true, Ordering::SeqCst);
        });
        thread::sleep(Duration::from_millis(50));
        assert!(!done.load(Ordering::SeqCst));
        b.recv(0, Tag(1)).unwrap();
        sender.join().unwrap();
    }

    #[test]
    fn crossed_rendezvous_sends_time_out() {
        // Both ranks send first: the classic unordered-exchange deadlock.
        let cfg = SimConfig { buffer_bound: 0, timeout: Duration::from_millis(200), trace: false };
        let net = SimNetwork::new(2, cfg);
        let (a, b) = (net.endpoint(0), net.endpoint(1));
        let t = thread::spawn(move || b.send(msg(1, 0, 1, 0.0)));
        let ra = a.send(msg(0, 1, 1, 0.0));
        let rb = t.join().unwrap();
        assert!(matches!(ra, Err(CommError::Timeout { .. })));
        assert!(matches!(rb, Err(CommError::Timeout { .. })));
    }

    #[test]
    fn errors_for_bad_peers_and_closed_endpoints() {
        let net = SimNetwork::new(2, SimConfig { timeout: Duration::from_secs(5), ..Default::default() });
        let (a, b) = (net.endpoint(0), net.endpoint(1));
        assert!(matches!(a.send(msg(0, 0, 1, 0.0)), Err(CommError::SelfSend(0))));
        assert!(matches!(a.send(msg(0, 5, 1, 0.0)), Err(CommError::UnknownRank { rank: 5, .. })));
        assert!(matches!(a.send(msg(1, 1, 1, 0.0)), Err(CommError::WrongSource { .. })));
        let waiter = thread::spawn(move || b.recv(0, Tag(3)));
        thread::sleep(Duration::from_millis(50));
        a.close();
        assert!(matches!(waiter.join().unwrap(), Err(CommError::PeerFailure { peer: 0, .. })));
        assert!(matches!(a.recv(1, Tag(3)), Err(CommError::Closed)));
    }

    #[test]
    fn trace_records_deliveries_per_receiver() {
        let net = SimNetwork::new(2, SimConfig { trace: true, ..Default::default() });
        let (a, b) = (net.endpoint(0), net.endpoint(1));
        a.send(msg(0, 1, 1, 1.0)).unwrap();
        a.send(msg(0, 1, 2, 2.0)).unwrap();
        b.recv(0, Tag(2)).unwrap();
        b.recv(0, Tag(1)).unwrap();
        let tags: Vec<u64> = net.trace(1).iter().map(|m| m.tag.0).collect();
        assert_eq!(tags, vec![2, 1]);
        assert!(net.trace(0).is_empty());
    }
}
