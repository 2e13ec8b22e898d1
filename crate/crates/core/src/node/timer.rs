use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

/// Longer periods are treated as this; `Instant` arithmetic stays in range.
const MAX_PERIOD: Duration = Duration::from_secs(365 * 24 * 3600);

/// Fixed-rate ticker: deadline k is `start + k * period`. A tick that is
/// more than one period late is skipped rather than fired in a burst.
pub struct Ticker {
    stop: Option<mpsc::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    ticks: Arc<AtomicU64>,
    skipped: Arc<AtomicU64>,
}

impl Ticker {
    pub fn start(name: String, period: Duration, mut tick: impl FnMut() + Send + 'static) -> std::io::Result<Ticker> {
        let (tx, rx) = mpsc::channel::<()>();
        let ticks = Arc::new(AtomicU64::new(0));
        let skipped = Arc::new(AtomicU64::new(0));
        let (t, s) = (ticks.clone(), skipped.clone());
        let period = period.clamp(Duration::from_micros(100), MAX_PERIOD);
        let thread = thread::Builder::new().name(name).spawn(move || {
            let mut next = Instant::now() + period;
            loop {
                let now = Instant::now();
                if next > now {
                    match rx.recv_timeout(next - now) {
                        Err(RecvTimeoutError::Timeout) => {}
                        _ => return,
                    }
                }
                tick();
                t.fetch_add(1, Ordering::Relaxed);
                next += period;
                let now = Instant::now();
                if now > next {
                    let behind = (now - next).as_nanos() / period.as_nanos() + 1;
                    s.fetch_add(behind as u64, Ordering::Relaxed);
                    next += period * behind as u32;
                }
            }
        })?;
        Ok(Ticker { stop: Some(tx), thread: Some(thread), ticks, skipped })
    }

    pub fn ticks(&self) -> u64 {
        self.ticks.load(Ordering::Relaxed)
    }

    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    /// Stop and wait for an in-flight tick to finish.
    pub fn stop(&mut self) {
        self.stop.take();
        if let Some(t) = self.thread.take() {
            if t.thread().id() != thread::current().id() {
                let _ = t.join();
            }
        }
    }
}

impl Drop for Ticker {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use parking_lot::Mutex;

    #[test]
    fn fixed_rate_count_and_stop() {
        let stamps = Arc::new(Mutex::new(Vec::new()));
        let s = stamps.clone();
        let start = Instant::now();
        let mut t = Ticker::start("t".into(), Duration::from_millis(10), move || s.lock().push(Instant::now())).unwrap();
        thread::sleep(Duration::from_millis(505));
        t.stop();
        let n = stamps.lock().len();
        assert!((49..=51).contains(&n), "{n}");
        // Deadlines do not drift: the last tick sits near its nominal time.
        let last = *stamps.lock().last().unwrap() - start;
        assert!(last < Duration::from_millis(n as u64 * 10 + 8), "{last:?}");
        thread::sleep(Duration::from_millis(50));
        assert_eq!(stamps.lock().len(), n);
    }

    #[test]
    fn slow_ticks_are_skipped_not_burst() {
        let count = Arc::new(AtomicU64::new(0));
        let c = count.clone();
        let mut t = Ticker::start("slow".into(), Duration::from_millis(10), move || {
            c.fetch_add(1, Ordering::Relaxed);
            thread::sleep(Duration::from_millis(35));
        })
        .unwrap();
        thread::sleep(Duration::from_millis(400));
        t.stop();
        let n = count.load(Ordering::Relaxed);
        assert!(n <= 12, "{n}");
        assert!(t.skipped() > 0);
    }
}
