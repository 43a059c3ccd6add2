//! Loopback TCP transport.
//!
//! Every NIC rail listens on its own port. A slice on pair (l, r) travels over
//! a lazily opened connection from l to r's listener. Write connections carry
//! a header plus payload and get an ack back; read connections send a header
//! and get an ack followed by the payload. Segments are addressed on the wire
//! by the hash of their id.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use crossbeam::channel::{unbounded, Receiver, Sender};
use crossbeam::queue::SegQueue;
use parking_lot::{Mutex, RwLock};
use railspray_core::capability::{BackendCapabilities, BackendId, Direction, MediaPair};
use railspray_core::segment::Segment;
use railspray_core::slice::{CompletionEvent, CompletionStatus, SliceWorkRequest};
use railspray_core::topology::{RailId, RailKind};
use railspray_core::wire::{segment_hash, Ack, FrameHeader, ACK_LEN, FRAME_HEADER_LEN};

use super::{check_requests, Backend, BackendContext, FatalBackendError, PostError};
use crate::memory::MemoryRegion;
use crate::segments::Backing;

const OP_WRITE: u8 = b'W';
const OP_READ: u8 = b'R';

type ConnKey = (RailId, RailId, u8);

struct Job {
    req: SliceWorkRequest,
    /// Source region for writes, destination region for reads.
    region: MemoryRegion,
    posted_at: u64,
}

struct Inner {
    ctx: BackendContext,
    addrs: Vec<Option<SocketAddr>>,
    regions: RwLock<HashMap<[u8; 16], MemoryRegion>>,
    conns: Mutex<HashMap<ConnKey, (u64, Sender<Job>)>>,
    next_conn: AtomicU64,
    done: Vec<SegQueue<CompletionEvent>>,
    stopping: AtomicBool,
}

pub struct TcpBackend {
    caps: BackendCapabilities,
    inner: Arc<Inner>,
    fatal: AtomicBool,
}

impl std::fmt::Debug for TcpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpBackend").field("rails", &self.inner.addrs.len()).finish()
    }
}

impl TcpBackend {
    pub fn start(id: BackendId, media: Vec<MediaPair>, intra_node: bool, ctx: BackendContext) -> io::Result<Self> {
        let mut listeners = Vec::new();
        let mut addrs = Vec::new();
        for rail in ctx.graph.rails() {
            if rail.kind == RailKind::Nic {
                let l = TcpListener::bind("127.0.0.1:0")?;
                addrs.push(Some(l.local_addr()?));
                listeners.push(l);
            } else {
                addrs.push(None);
            }
        }
        let done = (0..addrs.len()).map(|_| SegQueue::new()).collect();
        let inner = Arc::new(Inner {
            ctx,
            addrs,
            regions: RwLock::new(HashMap::new()),
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
            done,
            stopping: AtomicBool::new(false),
        });
        for l in listeners {
            let inner = inner.clone();
            thread::Builder::new()
                .name("tcp-accept".into())
                .spawn(move || accept_loop(l, inner))?;
        }
        Ok(TcpBackend {
            caps: BackendCapabilities {
                id,
                name: "tcp".into(),
                media,
                directions: vec![Direction::Read, Direction::Write],
                rail_kind: RailKind::Nic,
                cross_node: true,
                intra_node,
                max_post_bytes: u64::MAX,
                batched_post: false,
            },
            inner,
            fatal: AtomicBool::new(false),
        })
    }

    fn connection(&self, local: RailId, remote: RailId, op: u8) -> io::Result<Sender<Job>> {
        let mut conns = self.inner.conns.lock();
        let key = (local, remote, op);
        if let Some((_, tx)) = conns.get(&key) {
            return Ok(tx.clone());
        }
        let conn_id = self.inner.next_conn.fetch_add(1, Ordering::Relaxed);
        let addr = self.inner.addrs[remote.index()].ok_or_else(|| io::Error::other("remote rail has no listener"))?;
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let (tx, rx) = unbounded::<Job>();
        let (ptx, prx) = unbounded::<Job>();
        let inner = self.inner.clone();
        thread::Builder::new()
            .name("tcp-writer".into())
            .spawn(move || writer_loop(stream, op, rx, ptx, inner))?;
        let inner = self.inner.clone();
        thread::Builder::new()
            .name("tcp-acks".into())
            .spawn(move || ack_loop(reader, op, prx, inner, key, conn_id))?;
        conns.insert(key, (conn_id, tx.clone()));
        Ok(tx)
    }
}

impl Inner {
    fn complete(&self, job: &Job, status: CompletionStatus) {
        let now = self.ctx.clock.now_ns();
        self.done[job.req.pair.local.index()].push(CompletionEvent {
            work: job.req.work,
            batch: job.req.batch,
            rail: job.req.pair.local,
            status,
            completed_at_ns: now,
            service_ns: now.saturating_sub(job.posted_at),
            bytes: job.req.len,
        });
    }

    fn header(job: &Job, segment: [u8; 16], offset: u64) -> FrameHeader {
        FrameHeader {
            work: job.req.work,
            batch: job.req.batch,
            segment,
            offset,
            len: job.req.len,
        }
    }
}

fn writer_loop(stream: TcpStream, op: u8, rx: Receiver<Job>, pending: Sender<Job>, inner: Arc<Inner>) {
    let shutdown_handle = stream.try_clone().ok();
    let mut w = BufWriter::new(stream);
    let snap_hash = |h| inner.ctx.segments.snapshot().segment(h).map(|s| segment_hash(s.id()));
    let mut run = || -> io::Result<()> {
        w.write_all(&[op])?;
        w.flush()?;
        for job in rx.iter() {
            let remote_seg = if op == OP_WRITE { job.req.dst } else { job.req.src };
            let remote_off = if op == OP_WRITE { job.req.dst_offset } else { job.req.src_offset };
            let Some(hash) = snap_hash(remote_seg) else {
                inner.complete(&job, CompletionStatus::Failed);
                continue;
            };
            w.write_all(&Inner::header(&job, hash, remote_off).encode())?;
            if op == OP_WRITE {
                let len = job.req.len as usize;
                let off = job.req.src_offset as usize;
                if job.region.with_slice(off, len, |b| w.write_all(b)).transpose()?.is_none() {
                    w.write_all(&vec![0u8; len])?;
                }
            }
            w.flush()?;
            if pending.send(job).is_err() {
                return Err(io::Error::other("ack reader gone"));
            }
        }
        Ok(())
    };
    if let Err(e) = run() {
        if !inner.stopping.load(Ordering::Acquire) {
            log::warn!("tcp writer stopped: {e}");
        }
        for job in rx.try_iter() {
            inner.complete(&job, CompletionStatus::Failed);
        }
    }
    drop(pending);
    if let Some(s) = shutdown_handle {
        let _ = s.shutdown(std::net::Shutdown::Write);
    }
}

fn ack_loop(stream: TcpStream, op: u8, pending: Receiver<Job>, inner: Arc<Inner>, key: ConnKey, conn_id: u64) {
    let mut r = BufReader::new(stream);
    let mut buf = [0u8; ACK_LEN];
    let mut payload = Vec::new();
    let mut broken = false;
    for job in pending.iter() {
        if broken {
            inner.complete(&job, CompletionStatus::Failed);
            continue;
        }
        let status = (|| -> io::Result<CompletionStatus> {
            r.read_exact(&mut buf)?;
            let ack = Ack::decode(&buf).map_err(|e| io::Error::other(e.to_string()))?;
            if ack.work != job.req.work {
                return Err(io::Error::other("ack out of order"));
            }
            if op == OP_READ && ack.status == CompletionStatus::Ok {
                payload.resize(job.req.len as usize, 0);
                r.read_exact(&mut payload)?;
                job.region.write(job.req.dst_offset as usize, &payload);
            }
            Ok(ack.status)
        })();
        match status {
            Ok(s) => inner.complete(&job, s),
            Err(e) => {
                if !inner.stopping.load(Ordering::Acquire) {
                    log::warn!("tcp ack reader stopped: {e}");
                }
                broken = true;
                let mut conns = inner.conns.lock();
                if conns.get(&key).is_some_and(|(id, _)| *id == conn_id) {
                    conns.remove(&key);
                }
                drop(conns);
                inner.complete(&job, CompletionStatus::Failed);
            }
        }
    }
}

fn accept_loop(listener: TcpListener, inner: Arc<Inner>) {
    for conn in listener.incoming() {
        if inner.stopping.load(Ordering::Acquire) {
            break;
        }
        let Ok(s) = conn else { continue };
        let inner = inner.clone();
        let _ = thread::Builder::new().name("tcp-serve".into()).spawn(move || {
            if let Err(e) = serve(s, &inner) {
                if e.kind() != io::ErrorKind::UnexpectedEof && !inner.stopping.load(Ordering::Acquire) {
                    log::debug!("tcp connection closed: {e}");
                }
            }
        });
    }
}

fn serve(stream: TcpStream, inner: &Inner) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    let mut op = [0u8; 1];
    r.read_exact(&mut op)?;
    let mut hdr = [0u8; FRAME_HEADER_LEN];
    let mut payload = Vec::new();
    loop {
        r.read_exact(&mut hdr)?;
        let h = FrameHeader::decode(&hdr).map_err(|e| io::Error::other(e.to_string()))?;
        let len = h.len as usize;
        let region = inner.regions.read().get(&h.segment).cloned();
        let in_bounds = region
            .as_ref()
            .is_some_and(|m| h.offset.checked_add(h.len).is_some_and(|e| e <= m.len() as u64));
        let mut ack = Ack {
            work: h.work,
            batch: h.batch,
            status: if in_bounds {
                CompletionStatus::Ok
            } else {
                CompletionStatus::Failed
            },
        };
        match op[0] {
            OP_WRITE => {
                payload.resize(len, 0);
                r.read_exact(&mut payload)?;
                if let (true, Some(m)) = (in_bounds, &region) {
                    m.write(h.offset as usize, &payload);
                }
                w.write_all(&ack.encode())?;
            }
            OP_READ => {
                w.write_all(&ack.encode())?;
                if let (true, Some(m)) = (in_bounds, &region) {
                    if m.with_slice(h.offset as usize, len, |b| w.write_all(b)).transpose()?.is_none() {
                        w.write_all(&vec![0u8; len])?;
                    }
                }
            }
            _ => {
                ack.status = CompletionStatus::Failed;
                w.write_all(&ack.encode())?;
                return Err(io::Error::other("unknown connection type"));
            }
        }
        // Only flush when the client has nothing more queued for us.
        if r.buffer().is_empty() {
            w.flush()?;
        }
    }
}

impl Backend for TcpBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn attach_segment(&self, segment: &Segment, backing: &Backing) -> Option<Vec<u8>> {
        let m = backing.memory()?;
        if !self.caps.serves_medium(segment.medium()) {
            return None;
        }
        let hash = segment_hash(segment.id());
        self.inner.regions.write().insert(hash, m.clone());
        Some(hash.to_vec())
    }

    fn post_slices(&self, reqs: &[SliceWorkRequest]) -> Result<usize, PostError> {
        if self.is_fatal() {
            return Err(FatalBackendError(self.caps.name.clone()).into());
        }
        let snap = self.inner.ctx.segments.snapshot();
        check_requests(&self.caps, &snap, reqs)?;
        let now = self.inner.ctx.clock.now_ns();
        for (i, r) in reqs.iter().enumerate() {
            let op = if r.direction == Direction::Write { OP_WRITE } else { OP_READ };
            let local_seg = if op == OP_WRITE { r.src } else { r.dst };
            let Some(region) = snap.backing(local_seg).and_then(|b| b.memory()).cloned() else {
                return Err(PostError::CapabilityMismatch(i));
            };
            let job = Job {
                req: *r,
                region,
                posted_at: now,
            };
            match self.connection(r.pair.local, r.pair.remote, op) {
                Ok(tx) => {
                    if let Err(e) = tx.send(job) {
                        self.inner.conns.lock().remove(&(r.pair.local, r.pair.remote, op));
                        self.inner.complete(&e.0, CompletionStatus::Failed);
                    }
                }
                Err(e) => {
                    log::warn!("tcp connect failed: {e}");
                    self.inner.complete(&job, CompletionStatus::Failed);
                }
            }
        }
        Ok(reqs.len())
    }

    fn poll(&self, rail: RailId, max: usize, out: &mut Vec<CompletionEvent>) -> usize {
        let Some(q) = self.inner.done.get(rail.index()) else {
            return 0;
        };
        let mut n = 0;
        while n < max {
            let Some(e) = q.pop() else { break };
            out.push(e);
            n += 1;
        }
        n
    }

    fn is_fatal(&self) -> bool {
        self.fatal.load(Ordering::Acquire)
    }

    fn latch_fatal(&self) {
        self.fatal.store(true, Ordering::Release);
    }

    fn shutdown(&self) {
        if self.inner.stopping.swap(true, Ordering::AcqRel) {
            return;
        }
        self.inner.conns.lock().clear();
        for a in self.inner.addrs.iter().flatten() {
            // Wake the accept loop so it observes the flag.
            let _ = TcpStream::connect(a);
        }
    }
}

impl Drop for TcpBackend {
    fn drop(&mut self) {
        self.shutdown();
    }
}

