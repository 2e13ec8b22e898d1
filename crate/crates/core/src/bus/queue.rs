use std::collections::VecDeque;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

/// Default number of envelopes buffered per subscriber.
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

struct State<T> {
    items: VecDeque<T>,
    dropped: u64,
    closed: bool,
}

/// Bounded FIFO that discards its oldest entry when full, so a slow
/// consumer never blocks a producer. Discards are counted.
pub struct DropQueue<T> {
    state: Mutex<State<T>>,
    ready: Condvar,
    capacity: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Pop<T> {
    Item(T),
    Timeout,
    Closed,
}

impl<T> DropQueue<T> {
    pub fn new(capacity: usize) -> Self {
        DropQueue {
            state: Mutex::new(State { items: VecDeque::new(), dropped: 0, closed: false }),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Returns false once the queue is closed.
    pub fn push(&self, item: T) -> bool {
        let mut st = self.state.lock();
        if st.closed {
            return false;
        }
        if st.items.len() >= self.capacity {
            st.items.pop_front();
            st.dropped += 1;
        }
        st.items.push_back(item);
        drop(st);
        self.ready.notify_one();
        true
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Pop<T> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                return Pop::Item(item);
            }
            if st.closed {
                return Pop::Closed;
            }
            if self.ready.wait_until(&mut st, deadline).timed_out() {
                return match st.items.pop_front() {
                    Some(item) => Pop::Item(item),
                    None if st.closed => Pop::Closed,
                    None => Pop::Timeout,
                };
            }
        }
    }

    /// Wait for at least one item, then take everything queued.
    pub fn drain_timeout(&self, timeout: Duration) -> Result<Vec<T>, Pop<()>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        while st.items.is_empty() {
            if st.closed {
                return Err(Pop::Closed);
            }
            if self.ready.wait_until(&mut st, deadline).timed_out() && st.items.is_empty() {
                return Err(if st.closed { Pop::Closed } else { Pop::Timeout });
            }
        }
        Ok(st.items.drain(..).collect())
    }

    /// Close the queue. Items already queued can still be popped.
    pub fn close(&self) {
        self.state.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_oldest_when_full() {
        let q = DropQueue::new(3);
        for i in 0..5 {
            q.push(i);
        }
        assert_eq!(q.dropped(), 2);
        let got: Vec<_> = (0..3)
            .map(|_| match q.pop_timeout(Duration::ZERO) {
                Pop::Item(v) => v,
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(got, [2, 3, 4]);
    }

    #[test]
    fn close_wakes_waiters() {
        let q = std::sync::Arc::new(DropQueue::<u32>::new(4));
        let q2 = q.clone();
        let t = std::thread::spawn(move || q2.pop_timeout(Duration::from_secs(10)));
        std::thread::sleep(Duration::from_millis(20));
        q.close();
        assert_eq!(t.join().unwrap(), Pop::Closed);
        assert!(!q.push(1));
    }
}
