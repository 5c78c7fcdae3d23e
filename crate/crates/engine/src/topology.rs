//! Worker topology and the in-process transport backing the collectives.
//!
//! Every collective is a full exchange: each worker deposits exactly one
//! message per destination per generation, and receivers drain their mailbox
//! in ascending source rank. That fixed merge order is what makes
//! cross-worker floating-point reductions deterministic. The transport trait
//! is the seam where a socket-based fabric could replace the in-process
//! mailboxes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use grendel_core::project::ProjectedGrads;

/// One projected gaussian shipped to a pixel-partition owner.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjEntry {
    pub view: u32,
    pub src_local: u32,
    pub gid: u64,
    pub mean2d: [f64; 2],
    pub depth: f64,
    pub radius: f64,
    pub conic: [f64; 3],
    pub rgb: [f64; 3],
    pub opacity: f64,
}

/// A pixel value (forward halo) or pixel-gradient contribution (backward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaloPixel {
    pub view: u32,
    pub pixel: u32,
    pub rgb: [f64; 3],
}

/// Attribute gradients returned to the gaussian owner.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrGradEntry {
    pub view: u32,
    pub local: u32,
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub rgb: [f64; 3],
    pub opacity: f64,
}

impl AttrGradEntry {
    pub fn add_into(&self, grads: &mut ProjectedGrads) {
        let i = self.local as usize;
        grads.mean2d[i][0] += self.mean2d[0];
        grads.mean2d[i][1] += self.mean2d[1];
        for a in 0..3 {
            grads.conic[i][a] += self.conic[a];
            grads.rgb[i][a] += self.rgb[a];
        }
        grads.opacity[i] += self.opacity;
    }
}

/// Collective payloads.
#[derive(Debug, Clone, PartialEq)]
pub enum Msg {
    Projected(Vec<ProjEntry>),
    Halo(Vec<HaloPixel>),
    HaloGrad(Vec<HaloPixel>),
    AttrGrads(Vec<AttrGradEntry>),
}

/// Message fabric between workers. Every collective is a full exchange:
/// each worker posts exactly one message per destination, and each receiver
/// later takes exactly one message per source. A worker may already be
/// posting the next collective before a peer has drained the previous one,
/// so each (src, dst) channel is an ordered queue.
pub trait Transport: Send + Sync {
    fn workers(&self) -> usize;
    fn send(&self, src: usize, dst: usize, msg: Msg);
    /// Removes one collective's worth of messages for `dst` (the oldest per
    /// source), ascending by source rank. Panics if a source never posted,
    /// which would mean a worker skipped a collective.
    fn drain(&self, dst: usize) -> Vec<(usize, Msg)>;
}

/// Mutex-guarded FIFO channels, one per (dst, src) pair.
pub struct InProcTransport {
    workers: usize,
    mailboxes: Vec<Mutex<Vec<std::collections::VecDeque<Msg>>>>,
}

impl InProcTransport {
    pub fn new(workers: usize) -> Self {
        InProcTransport {
            workers,
            mailboxes: (0..workers)
                .map(|_| {
                    Mutex::new(
                        (0..workers)
                            .map(|_| std::collections::VecDeque::new())
                            .collect(),
                    )
                })
                .collect(),
        }
    }
}

impl Transport for InProcTransport {
    fn workers(&self) -> usize {
        self.workers
    }

    fn send(&self, src: usize, dst: usize, msg: Msg) {
        let mut slots = self.mailboxes[dst].lock().unwrap();
        assert!(
            slots[src].len() < 4,
            "worker {src} ran more than a full step ahead of {dst}"
        );
        slots[src].push_back(msg);
    }

    fn drain(&self, dst: usize) -> Vec<(usize, Msg)> {
        let mut slots = self.mailboxes[dst].lock().unwrap();
        slots
            .iter_mut()
            .enumerate()
            .map(|(src, queue)| {
                let msg = queue
                    .pop_front()
                    .unwrap_or_else(|| panic!("worker {src} missed a collective toward {dst}"));
                (src, msg)
            })
            .collect()
    }
}

/// Worker count, transport handle, and the barrier generation counter.
pub struct WorkerTopology {
    pub transport: InProcTransport,
    generation: AtomicU64,
}

impl WorkerTopology {
    pub fn new(workers: usize) -> Self {
        WorkerTopology {
            transport: InProcTransport::new(workers),
            generation: AtomicU64::new(0),
        }
    }

    pub fn workers(&self) -> usize {
        self.transport.workers()
    }

    /// Advances the collective generation; called once per barrier.
    pub fn advance_generation(&self) -> u64 {
        self.generation.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drain_orders_by_source_rank() {
        let t = InProcTransport::new(3);
        t.send(2, 0, Msg::Halo(vec![]));
        t.send(0, 0, Msg::Halo(vec![]));
        t.send(1, 0, Msg::Halo(vec![]));
        let got = t.drain(0);
        let ranks: Vec<usize> = got.iter().map(|(s, _)| *s).collect();
        assert_eq!(ranks, vec![0, 1, 2]);
    }

    #[test]
    fn channel_order_is_fifo_per_source() {
        let t = InProcTransport::new(2);
        t.send(0, 1, Msg::Halo(vec![]));
        t.send(0, 1, Msg::HaloGrad(vec![]));
        t.send(1, 1, Msg::Halo(vec![]));
        t.send(1, 1, Msg::HaloGrad(vec![]));
        let first = t.drain(1);
        assert!(matches!(first[0].1, Msg::Halo(_)));
        let second = t.drain(1);
        assert!(matches!(second[0].1, Msg::HaloGrad(_)));
    }

    #[test]
    #[should_panic(expected = "missed a collective")]
    fn missing_sender_is_detected() {
        let t = InProcTransport::new(2);
        t.send(0, 0, Msg::Halo(vec![]));
        let _ = t.drain(0);
    }
}
