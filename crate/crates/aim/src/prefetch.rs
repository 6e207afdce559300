//! Batch generation on a producer thread, ahead of the optimizer.

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use aim_core::toy::{Batch, ToyGenerator};

/// Yields exactly `count` batches in generation order. `depth` bounds how far
/// the producer may run ahead; depth 0 generates inline.
pub struct Prefetch {
    source: Source,
    remaining: usize,
}

enum Source {
    Inline { gen: ToyGenerator, batch: usize },
    Thread { rx: Receiver<Batch>, handle: Option<JoinHandle<()>> },
}

impl Prefetch {
    pub fn new(mut gen: ToyGenerator, batch: usize, count: usize, depth: usize) -> Self {
        let source = if depth == 0 {
            Source::Inline { gen, batch }
        } else {
            let (tx, rx) = sync_channel(depth);
            let handle = std::thread::spawn(move || {
                for _ in 0..count {
                    if tx.send(gen.next_batch(batch)).is_err() {
                        break;
                    }
                }
            });
            Source::Thread {
                rx,
                handle: Some(handle),
            }
        };
        Prefetch {
            source,
            remaining: count,
        }
    }
}

impl Iterator for Prefetch {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        match &mut self.source {
            Source::Inline { gen, batch } => Some(gen.next_batch(*batch)),
            Source::Thread { rx, .. } => rx.recv().ok(),
        }
    }
}

impl Drop for Prefetch {
    fn drop(&mut self) {
        if let Source::Thread { rx, handle } = &mut self.source {
            // unblock a producer waiting on a full channel
            while rx.try_recv().is_ok() {}
            let (_, dead) = sync_channel(0);
            let _ = std::mem::replace(rx, dead);
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}
