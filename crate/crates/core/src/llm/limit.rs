use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding concurrent requests, with a high-water mark.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
    high_water: AtomicUsize,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        InFlightLimit {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
            high_water: AtomicUsize::new(0),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    /// Blocks until a slot is free.
    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut current = self.current.lock().expect("limit mutex poisoned");
        while *current >= self.max {
            current = self.freed.wait(current).expect("limit mutex poisoned");
        }
        *current += 1;
        self.high_water.fetch_max(*current, Ordering::SeqCst);
        InFlightGuard { limit: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("limit mutex poisoned")
    }

    pub fn high_water_mark(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}

pub struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut current = self.limit.current.lock().expect("limit mutex poisoned");
        *current -= 1;
        self.limit.freed.notify_one();
    }
}
