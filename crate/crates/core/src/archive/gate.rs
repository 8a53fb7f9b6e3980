use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

/// Counting gate bounding the number of simultaneously open files.
#[derive(Debug)]
pub struct FileGate {
    max: usize,
    open: Mutex<usize>,
    cv: Condvar,
    high_water: AtomicUsize,
}

pub struct GateGuard<'a> {
    gate: &'a FileGate,
}

impl FileGate {
    pub fn new(max: usize) -> Self {
        FileGate { max: max.max(1), open: Mutex::new(0), cv: Condvar::new(), high_water: AtomicUsize::new(0) }
    }

    pub fn acquire(&self) -> GateGuard<'_> {
        let mut open = self.open.lock().unwrap();
        while *open >= self.max {
            open = self.cv.wait(open).unwrap();
        }
        *open += 1;
        self.high_water.fetch_max(*open, Ordering::SeqCst);
        GateGuard { gate: self }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn open(&self) -> usize {
        *self.open.lock().unwrap()
    }

    /// Largest number of files open at once since creation.
    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut open = self.gate.open.lock().unwrap();
        *open -= 1;
        self.gate.cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    #[test]
    fn bounded_under_contention() {
        let gate = Arc::new(FileGate::new(4));
        let threads: Vec<_> = (0..32)
            .map(|_| {
                let g = gate.clone();
                std::thread::spawn(move || {
                    for _ in 0..50 {
                        let _guard = g.acquire();
                        std::thread::yield_now();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert!(gate.high_water() <= 4);
        assert_eq!(gate.open(), 0);
    }
}
