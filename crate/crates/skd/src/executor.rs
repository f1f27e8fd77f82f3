use std::num::NonZeroUsize;
use std::thread;

use skd_core::exec::Executor;

/// Scoped worker threads over contiguous item ranges.
#[derive(Debug, Clone, Copy)]
pub struct Threads {
    workers: NonZeroUsize,
}

impl Threads {
    pub fn new(workers: usize) -> Self {
        Self {
            workers: NonZeroUsize::new(workers).unwrap_or(NonZeroUsize::MIN),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers.get()
    }
}

impl Executor for Threads {
    fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync,
    {
        let workers = self.workers.get().min(items.len());
        if workers <= 1 {
            return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
        }
        let chunk = items.len().div_ceil(workers);
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, x)| f(c * chunk + j, x))
                            .collect::<Vec<O>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_worker_count() {
        let items: Vec<u64> = (0..37).collect();
        let one = Threads::new(1).map(&items, |i, &x| x * x + i as u64);
        for w in [2, 3, 8, 64] {
            assert_eq!(Threads::new(w).map(&items, |i, &x| x * x + i as u64), one);
        }
    }
}
