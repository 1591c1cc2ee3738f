use std::sync::{Condvar, Mutex};

/// Counting semaphore used to cap concurrent provider calls and subprocesses.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cond: Condvar,
}

pub(crate) struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cond: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cond.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit { sem: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.sem.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.sem.cond.notify_one();
    }
}
