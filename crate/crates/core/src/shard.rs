//! Shard-and-merge execution over frame ranges.
//!
//! Workers own disjoint frame ranges, fold them into private accumulators and
//! the accumulators are merged. In deterministic mode shard boundaries depend
//! only on the frame count and the merge runs left to right in shard order, so
//! results are bit-identical for any worker count.

use std::ops::Range;

use rayon::prelude::*;

/// Frames per shard in deterministic mode.
pub const DETERMINISTIC_SHARD: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecPolicy {
    pub deterministic: bool,
}

impl Default for ExecPolicy {
    fn default() -> Self {
        Self {
            deterministic: true,
        }
    }
}

impl ExecPolicy {
    pub fn shards(&self, n: usize) -> Vec<Range<usize>> {
        let size = if self.deterministic {
            DETERMINISTIC_SHARD
        } else {
            n.div_ceil(4 * rayon::current_num_threads()).max(256)
        };
        (0..n.div_ceil(size))
            .map(|i| i * size..((i + 1) * size).min(n))
            .collect()
    }

    /// Runs `fold` on every shard in parallel and merges the results.
    pub fn map_reduce<A, F, M>(&self, n: usize, fold: F, merge: M) -> Option<A>
    where
        A: Send,
        F: Fn(Range<usize>) -> A + Sync,
        M: Fn(A, A) -> A + Sync,
    {
        let shards = self.shards(n);
        if self.deterministic {
            let parts: Vec<A> = shards.into_par_iter().map(&fold).collect();
            parts.into_iter().reduce(&merge)
        } else {
            shards.into_par_iter().map(&fold).reduce_with(&merge)
        }
    }
}
