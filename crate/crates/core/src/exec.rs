//! Execution policy for the data-parallel inner loops.
//!
//! Every hot loop (pixel rows, candidate edges, experiment seeds) is written
//! once against [`Exec`]; with the `parallel` feature disabled the parallel
//! variant silently degrades to the sequential one, so results never depend
//! on the policy.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this policy actually fans out across threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Fills `out` in fixed-size chunks, calling `f(chunk_index, chunk)`.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Order-preserving map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }
}
