//! Execution of independent per-item work.
//!
//! Implementations may run items concurrently but must return results in
//! item order, so anything computed through an executor is independent of
//! the worker count.

use alloc::vec::Vec;

pub trait Executor: Sync {
    /// `f(i, &items[i])` for every item, results in item order.
    fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync;
}

/// Runs items one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<I, O, F>(&self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(usize, &I) -> O + Sync,
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}
