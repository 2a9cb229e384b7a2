//! Multi-process TCP transport.
//!
//! Wire frame (all integers big-endian):
//!
//! ```text
//! u32 length of the rest of the frame
//! u8  message kind
//! u64 tag
//! u32 src rank
//! u32 dst rank
//! u32 number of shape dimensions (0 for payload-free control messages)
//! u64 × ndim  shape
//! f64 × prod(shape)  payload, IEEE-754
//! ```
//!
//! Rendezvous: rank 0 listens on the configured address. Every other rank
//! binds an ephemeral listener, connects to rank 0 and sends its rank header;
//! rank 0 replies with the address table, after which rank `r` connects to
//! every rank `0 < q < r` and accepts connections from every rank above it.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::mailbox::Mailbox;
use super::{check_peer, CommError, Message, MessageKind, Rank, Tag, Transport, DEFAULT_TIMEOUT};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LPAR";
const MAX_FRAME: usize = 1 << 31;

#[derive(Debug, Clone)]
pub struct SocketConfig {
    /// `host:port` where rank 0 listens.
    pub rendezvous: String,
    /// Limit for the whole rendezvous and for each blocking receive.
    pub timeout: Duration,
}

impl SocketConfig {
    pub fn new(rendezvous: impl Into<String>) -> Self {
        Self {
            rendezvous: rendezvous.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let (shape, data): (&[usize], &[f64]) = match &msg.payload {
        Some(t) => (t.shape(), t.data()),
        None => (&[], &[]),
    };
    let body_len = 1 + 8 + 4 + 4 + 4 + 8 * shape.len() + 8 * data.len();
    let mut buf = Vec::with_capacity(4 + body_len);
    buf.extend_from_slice(&(body_len as u32).to_be_bytes());
    buf.push(msg.kind as u8);
    buf.extend_from_slice(&msg.tag.0.to_be_bytes());
    buf.extend_from_slice(&(msg.src as u32).to_be_bytes());
    buf.extend_from_slice(&(msg.dst as u32).to_be_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_be_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_be_bytes());
    }
    for &x in data {
        buf.extend_from_slice(&x.to_be_bytes());
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CommError> {
        if self.buf.len() - self.pos < n {
            return Err(CommError::Frame(format!(
                "truncated {what} at byte {}: need {n} bytes, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CommError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CommError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes one frame body (the bytes after the length prefix).
pub fn decode_frame(body: &[u8]) -> Result<Message, CommError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let kind_byte = c.take(1, "kind")?[0];
    let kind = MessageKind::from_byte(kind_byte)
        .ok_or_else(|| CommError::Frame(format!("unknown message kind {kind_byte}")))?;
    let tag = Tag(c.u64("tag")?);
    let src = c.u32("src")? as Rank;
    let dst = c.u32("dst")? as Rank;
    let ndim = c.u32("ndim")? as usize;
    if ndim > crate::tensor::MAX_RANK {
        return Err(CommError::Frame(format!("shape rank {ndim} exceeds {}", crate::tensor::MAX_RANK)));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(c.u64("shape")? as usize);
    }
    let payload = if ndim == 0 {
        None
    } else {
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| CommError::Frame("payload too large".into()))?, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_be_bytes(b.try_into().unwrap()))
            .collect();
        Some(Tensor::new(shape, data).map_err(|e| CommError::Frame(e.to_string()))?)
    };
    if c.pos != body.len() {
        return Err(CommError::Frame(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(Message {
        kind,
        tag,
        src,
        dst,
        payload,
    })
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
fn read_frame(r: &mut impl Read) -> Result<Option<Message>, CommError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(CommError::Frame(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_frame(&body).map(Some)
}

fn write_hello(s: &mut TcpStream, rank: Rank, world: usize, port: u16) -> io::Result<()> {
    let mut b = Vec::with_capacity(14);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&(rank as u32).to_be_bytes());
    b.extend_from_slice(&(world as u32).to_be_bytes());
    b.extend_from_slice(&port.to_be_bytes());
    s.write_all(&b)
}

fn read_hello(s: &mut TcpStream, world: usize) -> Result<(Rank, u16), CommError> {
    let mut b = [0u8; 14];
    s.read_exact(&mut b)?;
    if &b[..4] != MAGIC {
        return Err(CommError::Rendezvous("bad handshake magic".into()));
    }
    let rank = u32::from_be_bytes(b[4..8].try_into().unwrap()) as Rank;
    let their_world = u32::from_be_bytes(b[8..12].try_into().unwrap()) as usize;
    if their_world != world || rank >= world {
        return Err(CommError::Rendezvous(format!(
            "peer claims rank {rank} of world {their_world}, expected world {world}"
        )));
    }
    Ok((rank, u16::from_be_bytes(b[12..14].try_into().unwrap())))
}

fn accept_before(listener: &TcpListener, deadline: Instant) -> Result<TcpStream, CommError> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(CommError::Rendezvous("timed out waiting for peers to connect".into()));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn connect_before(addr: &SocketAddr, deadline: Instant) -> Result<TcpStream, CommError> {
    loop {
        match TcpStream::connect_timeout(addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(CommError::Rendezvous(format!("could not reach {addr}: {e}")));
                }
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

pub struct SocketTransport {
    rank: Rank,
    world: usize,
    timeout: Duration,
    mailbox: Arc<Mailbox>,
    writers: Vec<Option<Mutex<BufWriter<TcpStream>>>>,
}

impl SocketTransport {
    /// Performs the rendezvous and returns a fully connected endpoint.
    pub fn connect(rank: Rank, world: usize, config: &SocketConfig) -> Result<Self, CommError> {
        if rank >= world {
            return Err(CommError::UnknownRank { rank, world });
        }
        let deadline = Instant::now() + config.timeout;
        let rendezvous = config
            .rendezvous
            .to_socket_addrs()
            .map_err(|e| CommError::Rendezvous(format!("{}: {e}", config.rendezvous)))?
            .next()
            .ok_or_else(|| CommError::Rendezvous(format!("{} resolves to nothing", config.rendezvous)))?;

        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        if rank == 0 {
            let listener = TcpListener::bind(rendezvous)
                .map_err(|e| CommError::Rendezvous(format!("bind {rendezvous}: {e}")))?;
            let mut table: Vec<Option<SocketAddr>> = vec![None; world];
            for _ in 1..world {
                let mut s = accept_before(&listener, deadline)?;
                let (peer, port) = read_hello(&mut s, world)?;
                if peer == 0 || streams[peer].is_some() {
                    return Err(CommError::Rendezvous(format!("duplicate or invalid rank {peer}")));
                }
                table[peer] = Some(SocketAddr::new(s.peer_addr()?.ip(), port));
                streams[peer] = Some(s);
            }
            let mut encoded = Vec::new();
            encoded.extend_from_slice(&(world as u32).to_be_bytes());
            for addr in table.iter().skip(1) {
                let addr = addr.expect("filled above").to_string();
                encoded.extend_from_slice(&(addr.len() as u32).to_be_bytes());
                encoded.extend_from_slice(addr.as_bytes());
            }
            for s in streams.iter_mut().flatten() {
                s.write_all(&encoded)?;
            }
        } else {
            let bind_ip = if rendezvous.ip().is_loopback() {
                rendezvous.ip()
            } else {
                "0.0.0.0".parse().unwrap()
            };
            let listener = TcpListener::bind(SocketAddr::new(bind_ip, 0))?;
            let port = listener.local_addr()?.port();
            let mut root = connect_before(&rendezvous, deadline)?;
            write_hello(&mut root, rank, world, port)?;
            let mut word = [0u8; 4];
            root.read_exact(&mut word)?;
            let n = u32::from_be_bytes(word) as usize;
            let mut table = vec![None; world];
            for slot in table.iter_mut().take(n).skip(1) {
                root.read_exact(&mut word)?;
                let mut addr = vec![0u8; u32::from_be_bytes(word) as usize];
                root.read_exact(&mut addr)?;
                let addr: SocketAddr = String::from_utf8_lossy(&addr)
                    .parse()
                    .map_err(|e| CommError::Rendezvous(format!("bad address table: {e}")))?;
                *slot = Some(addr);
            }
            streams[0] = Some(root);
            for (q, addr) in table.iter().enumerate().take(rank).skip(1) {
                let mut s = connect_before(&addr.expect("filled above"), deadline)?;
                write_hello(&mut s, rank, world, 0)?;
                streams[q] = Some(s);
            }
            for _ in rank + 1..world {
                let mut s = accept_before(&listener, deadline)?;
                let (peer, _) = read_hello(&mut s, world)?;
                if peer <= rank || streams[peer].is_some() {
                    return Err(CommError::Rendezvous(format!("unexpected connection from rank {peer}")));
                }
                streams[peer] = Some(s);
            }
        }

        let mailbox = Arc::new(Mailbox::new(world, false));
        let mut writers = Vec::with_capacity(world);
        for (peer, s) in streams.into_iter().enumerate() {
            let Some(s) = s else {
                writers.push(None);
                continue;
            };
            s.set_nodelay(true)?;
            let reader = s.try_clone()?;
            let mb = Arc::clone(&mailbox);
            let timeout = config.timeout;
            thread::Builder::new()
                .name(format!("frames-{rank}<-{peer}"))
                .spawn(move || {
                    let mut r = BufReader::new(reader);
                    loop {
                        match read_frame(&mut r) {
                            Ok(Some(msg)) if msg.src == peer && msg.dst == rank => {
                                if mb.deposit(msg, None, timeout).is_err() {
                                    break;
                                }
                            }
                            Ok(Some(msg)) => {
                                log::error!("rank {rank}: misaddressed frame {}->{} on link from {peer}", msg.src, msg.dst);
                                break;
                            }
                            Ok(None) => break,
                            Err(e) => {
                                log::debug!("rank {rank}: link from {peer} ended: {e}");
                                break;
                            }
                        }
                    }
                    mb.mark_peer_closed(peer);
                })?;
            writers.push(Some(Mutex::new(BufWriter::new(s))));
        }
        Ok(Self {
            rank,
            world,
            timeout: config.timeout,
            mailbox,
            writers,
        })
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send(&self, msg: Message) -> Result<(), CommError> {
        check_peer(self, msg.dst)?;
        if msg.src != self.rank {
            return Err(CommError::WrongSource {
                claimed: msg.src,
                actual: self.rank,
            });
        }
        let frame = encode_frame(&msg);
        let w = self.writers[msg.dst].as_ref().ok_or(CommError::Closed)?;
        let mut w = w.lock().unwrap_or_else(|e| e.into_inner());
        w.write_all(&frame)
            .and_then(|_| w.flush())
            .map_err(|_| CommError::PeerFailure {
                peer: msg.dst,
                op: "sending",
                tag: msg.tag,
            })
    }

    fn recv(&self, src: Rank, tag: Tag) -> Result<Message, CommError> {
        check_peer(self, src)?;
        self.mailbox.take(src, tag, self.timeout, false)
    }

    fn close(&self) {
        for w in self.writers.iter().flatten() {
            let mut w = w.lock().unwrap_or_else(|e| e.into_inner());
            let _ = w.flush();
            let _ = w.get_ref().shutdown(Shutdown::Write);
        }
        self.mailbox.close();
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for w in self.writers.iter().flatten() {
            let mut w = w.lock().unwrap_or_else(|e| e.into_inner());
            let _ = w.flush();
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
    }
}
