//! Gradient averaging: an in-memory oracle and a ring all-reduce over local
//! stream sockets.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use crate::models::ParamMap;

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CommError {
    #[error("all-reduce needs at least one worker")]
    NoWorkers,
    #[error("worker {worker}: {msg}")]
    Mismatch { worker: usize, msg: String },
    #[error("peer timed out after {0:?}")]
    Timeout(Duration),
    #[error("frame checksum mismatch (sequence {seq})")]
    Checksum { seq: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection error: {0}")]
    Io(#[source] io::Error),
}

impl From<io::Error> for CommError {
    fn from(e: io::Error) -> Self {
        CommError::Io(e)
    }
}

/// Elementwise mean of equally long buffers.
pub fn allreduce_mean_flat(buffers: &[Vec<f64>]) -> Result<Vec<f64>, CommError> {
    let first = buffers.first().ok_or(CommError::NoWorkers)?;
    let mut out = vec![0.0; first.len()];
    for (w, b) in buffers.iter().enumerate() {
        if b.len() != out.len() {
            return Err(CommError::Mismatch {
                worker: w,
                msg: format!("buffer length {} differs from {}", b.len(), out.len()),
            });
        }
        for (o, v) in out.iter_mut().zip(b) {
            *o += v;
        }
    }
    let w = buffers.len() as f64;
    for o in &mut out {
        *o /= w;
    }
    Ok(out)
}

/// Elementwise mean of per-worker gradient maps; every worker receives a
/// copy of the same result.
pub fn allreduce_mean(maps: &[ParamMap]) -> Result<Vec<ParamMap>, CommError> {
    let first = maps.first().ok_or(CommError::NoWorkers)?;
    for (w, m) in maps.iter().enumerate() {
        if !m.names().eq(first.names()) {
            return Err(CommError::Mismatch {
                worker: w,
                msg: "parameter names differ".into(),
            });
        }
        for ((name, a), (_, b)) in m.iter().zip(first.iter()) {
            if a.shape() != b.shape() {
                return Err(CommError::Mismatch {
                    worker: w,
                    msg: format!(
                        "'{name}' has shape {:?}, worker 0 has {:?}",
                        a.shape(),
                        b.shape()
                    ),
                });
            }
        }
    }
    let flat: Vec<Vec<f64>> = maps.iter().map(ParamMap::flatten).collect();
    let mean = allreduce_mean_flat(&flat)?;
    let reduced = first
        .with_values(&mean)
        .map_err(|e| CommError::Protocol(e.to_string()))?;
    Ok(vec![reduced; maps.len()])
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Encodes `{u32 version, u32 seq, u64 payload bytes, payload, u64 FNV-1a}`,
/// all little-endian.
pub fn encode_frame(seq: u32, payload: &[f64]) -> Vec<u8> {
    let mut body = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        body.extend_from_slice(&v.to_le_bytes());
    }
    encode_bytes_frame(seq, &body)
}

fn encode_bytes_frame(seq: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 24);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&fnv1a(body).to_le_bytes());
    out
}

fn map_timeout(e: io::Error, timeout: Duration) -> CommError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => CommError::Timeout(timeout),
        io::ErrorKind::UnexpectedEof => CommError::Protocol("peer closed the connection".into()),
        _ => CommError::Io(e),
    }
}

/// Reads one frame and checks version, sequence number and checksum.
pub fn read_bytes_frame(
    stream: &mut impl Read,
    expected_seq: u32,
    timeout: Duration,
) -> Result<Vec<u8>, CommError> {
    let mut head = [0u8; 16];
    stream
        .read_exact(&mut head)
        .map_err(|e| map_timeout(e, timeout))?;
    let version = u32::from_le_bytes(head[0..4].try_into().unwrap());
    let seq = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap());
    if version != WIRE_VERSION {
        return Err(CommError::Protocol(format!(
            "wire version {version}, expected {WIRE_VERSION}"
        )));
    }
    if seq != expected_seq {
        return Err(CommError::Protocol(format!(
            "sequence {seq}, expected {expected_seq}"
        )));
    }
    let mut body = vec![0u8; len as usize];
    stream
        .read_exact(&mut body)
        .map_err(|e| map_timeout(e, timeout))?;
    let mut sum = [0u8; 8];
    stream
        .read_exact(&mut sum)
        .map_err(|e| map_timeout(e, timeout))?;
    if u64::from_le_bytes(sum) != fnv1a(&body) {
        return Err(CommError::Checksum { seq });
    }
    Ok(body)
}

pub fn decode_payload(body: &[u8]) -> Result<Vec<f64>, CommError> {
    if !body.len().is_multiple_of(8) {
        return Err(CommError::Protocol(format!(
            "payload of {} bytes is not a whole number of floats",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_bytes_frame(stream: &mut impl Write, seq: u32, body: &[u8]) -> Result<(), CommError> {
    stream.write_all(&encode_bytes_frame(seq, body))?;
    stream.flush()?;
    Ok(())
}

/// Range of chunk `c` when `len` values are split into `parts` pieces.
fn chunk_range(len: usize, parts: usize, c: usize) -> std::ops::Range<usize> {
    let base = len / parts;
    let extra = len % parts;
    let start = c * base + c.min(extra);
    start..start + base + usize::from(c < extra)
}

/// One worker's links in a ring: it sends to rank + 1 and receives from
/// rank - 1.
pub struct Ring {
    rank: usize,
    world: usize,
    next: Option<TcpStream>,
    prev: Option<TcpStream>,
    seq: u32,
    timeout: Duration,
    bytes_sent: u64,
}

impl Ring {
    /// A ring of one; all-reduce is the identity.
    pub fn solo() -> Self {
        Ring {
            rank: 0,
            world: 1,
            next: None,
            prev: None,
            seq: 0,
            timeout: Duration::from_secs(30),
            bytes_sent: 0,
        }
    }

    /// Connects to the next rank's listener, then accepts the previous
    /// rank on `listener`.
    pub fn connect(
        rank: usize,
        world: usize,
        listener: &TcpListener,
        ports: &[u16],
        timeout: Duration,
    ) -> Result<Self, CommError> {
        if world == 1 {
            return Ok(Ring {
                timeout,
                ..Ring::solo()
            });
        }
        if ports.len() != world || rank >= world {
            return Err(CommError::Protocol(format!(
                "rank {rank} with {} ports for a world of {world}",
                ports.len()
            )));
        }
        let next_port = ports[(rank + 1) % world];
        let mut next = TcpStream::connect_timeout(
            &std::net::SocketAddr::from(([127, 0, 0, 1], next_port)),
            timeout,
        )?;
        next.set_nodelay(true)?;
        next.set_write_timeout(Some(timeout))?;
        next.write_all(&(rank as u32).to_le_bytes())?;

        let prev = accept_with_timeout(listener, timeout)?;
        prev.set_nodelay(true)?;
        prev.set_read_timeout(Some(timeout))?;
        let mut id = [0u8; 4];
        (&prev)
            .read_exact(&mut id)
            .map_err(|e| map_timeout(e, timeout))?;
        let expected = (rank + world - 1) % world;
        if u32::from_le_bytes(id) as usize != expected {
            return Err(CommError::Protocol(format!(
                "rank {rank} expected its predecessor {expected}, got {}",
                u32::from_le_bytes(id)
            )));
        }
        Ok(Ring {
            rank,
            world,
            next: Some(next),
            prev: Some(prev),
            seq: 0,
            timeout,
            bytes_sent: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world(&self) -> usize {
        self.world
    }

    /// Payload bytes this worker has sent so far.
    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    /// Sends `out` to the next rank while receiving from the previous one.
    fn exchange(&mut self, out: &[f64]) -> Result<Vec<f64>, CommError> {
        let seq = self.seq;
        self.seq = self.seq.wrapping_add(1);
        let frame = encode_frame(seq, out);
        self.bytes_sent += 8 * out.len() as u64;
        let timeout = self.timeout;
        let next = self.next.as_mut().expect("ring of more than one");
        let prev = self.prev.as_mut().expect("ring of more than one");
        std::thread::scope(|s| {
            let sender = s.spawn(move || -> Result<(), CommError> {
                next.write_all(&frame)
                    .map_err(|e| map_timeout(e, timeout))?;
                next.flush()?;
                Ok(())
            });
            let received = read_bytes_frame(prev, seq, timeout).and_then(|b| decode_payload(&b));
            let sent = sender.join().expect("sender thread panicked");
            sent?;
            received
        })
    }

    /// Replaces `data` with its elementwise mean over all ranks
    /// (reduce-scatter followed by all-gather). All ranks end bit-identical.
    pub fn allreduce_mean(&mut self, data: &mut [f64]) -> Result<(), CommError> {
        let w = self.world;
        if w == 1 {
            return Ok(());
        }
        let r = self.rank;
        let len = data.len();
        for s in 0..w - 1 {
            let send_c = (r + w - s) % w;
            let recv_c = (r + 2 * w - s - 1) % w;
            let out = data[chunk_range(len, w, send_c)].to_vec();
            let got = self.exchange(&out)?;
            let range = chunk_range(len, w, recv_c);
            if got.len() != range.len() {
                return Err(CommError::Protocol(format!(
                    "received {} values for a chunk of {}",
                    got.len(),
                    range.len()
                )));
            }
            for (d, g) in data[range].iter_mut().zip(got) {
                *d += g;
            }
        }
        for s in 0..w - 1 {
            let send_c = (r + 1 + w - s) % w;
            let recv_c = (r + w - s) % w;
            let out = data[chunk_range(len, w, send_c)].to_vec();
            let got = self.exchange(&out)?;
            let range = chunk_range(len, w, recv_c);
            if got.len() != range.len() {
                return Err(CommError::Protocol(format!(
                    "received {} values for a chunk of {}",
                    got.len(),
                    range.len()
                )));
            }
            data[range].copy_from_slice(&got);
        }
        for d in data.iter_mut() {
            *d /= w as f64;
        }
        Ok(())
    }

    /// Ring all-reduce of a gradient map.
    pub fn allreduce_map(&mut self, grads: &ParamMap) -> Result<ParamMap, CommError> {
        let mut flat = grads.flatten();
        self.allreduce_mean(&mut flat)?;
        grads
            .with_values(&flat)
            .map_err(|e| CommError::Protocol(e.to_string()))
    }
}

pub(crate) fn accept_with_timeout(
    listener: &TcpListener,
    timeout: Duration,
) -> Result<TcpStream, CommError> {
    listener.set_nonblocking(true)?;
    let deadline = std::time::Instant::now() + timeout;
    let result = loop {
        match listener.accept() {
            Ok((stream, _)) => break Ok(stream),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if std::time::Instant::now() >= deadline {
                    break Err(CommError::Timeout(timeout));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => break Err(CommError::Io(e)),
        }
    };
    listener.set_nonblocking(false)?;
    let stream = result?;
    stream.set_nonblocking(false)?;
    Ok(stream)
}

/// Builds a ring of `world` in-process peers on loopback, one per thread.
pub fn loopback_ring(world: usize, timeout: Duration) -> Result<Vec<Ring>, CommError> {
    let listeners = (0..world)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()?;
    let ports = listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.port()))
        .collect::<Result<Vec<_>, _>>()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = listeners
            .iter()
            .enumerate()
            .map(|(rank, l)| {
                let ports = &ports;
                s.spawn(move || Ring::connect(rank, world, l, ports, timeout))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ring setup thread panicked"))
            .collect()
    })
}

/// Ring all-reduce of `buffers`, one in-process peer thread per buffer.
pub fn ring_allreduce_loopback(
    buffers: &[Vec<f64>],
    timeout: Duration,
) -> Result<Vec<Vec<f64>>, CommError> {
    let rings = loopback_ring(buffers.len(), timeout)?;
    std::thread::scope(|s| {
        let handles: Vec<_> = rings
            .into_iter()
            .zip(buffers)
            .map(|(mut ring, buf)| {
                s.spawn(move || {
                    let mut data = buf.clone();
                    ring.allreduce_mean(&mut data).map(|_| data)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ring worker panicked"))
            .collect()
    })
}
