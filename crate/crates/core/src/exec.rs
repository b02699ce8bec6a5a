//! Execution of independent per-item work.
//!
//! Batch gradients, evaluation and sweep cells all map a pure function over a
//! slice of independent inputs. With the `parallel` feature (the default)
//! [`map_items`] runs on rayon's global pool; without it, it degrades to the
//! sequential loop. [`map_items_seq`] is always sequential and exists so the
//! two paths can be compared directly, e.g. in benchmarks.
//!
//! Both functions return results in input order, so reductions performed on
//! the output are deterministic regardless of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over the items, in parallel when the `parallel` feature is on.
/// `f` receives the item index alongside the item so callers can derive
/// per-item seeds without sharing state.
#[cfg(feature = "parallel")]
pub fn map_items<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_items<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    map_items_seq(items, f)
}

/// Sequential twin of [`map_items`].
pub fn map_items_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
