//! Bounded multi-producer submission ring consumed by one worker.

use crossbeam::queue::ArrayQueue;

const SPIN_LIMIT: u32 = 64;
const YIELD_LIMIT: u32 = 64;

#[derive(Debug)]
pub struct SubmissionRing<T> {
    q: ArrayQueue<T>,
}

impl<T> SubmissionRing<T> {
    pub fn new(capacity: usize) -> Self {
        SubmissionRing {
            q: ArrayQueue::new(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.q.capacity()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn try_push(&self, item: T) -> Result<(), T> {
        self.q.push(item)
    }

    /// Pushes with bounded spinning, then yielding. When the ring stays full
    /// `on_full` runs (typically draining the ring on the consumer's behalf)
    /// and the cycle repeats.
    pub fn push(&self, mut item: T, mut on_full: impl FnMut()) {
        loop {
            for i in 0..SPIN_LIMIT + YIELD_LIMIT {
                match self.q.push(item) {
                    Ok(()) => return,
                    Err(back) => item = back,
                }
                if i < SPIN_LIMIT {
                    std::hint::spin_loop();
                } else {
                    std::thread::yield_now();
                }
            }
            on_full();
        }
    }

    pub fn pop(&self) -> Option<T> {
        self.q.pop()
    }
}
