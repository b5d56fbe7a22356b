//! Fraud detection for blockchain accounts from transaction language, graph structure and their fusion.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numcore;
pub mod rng;
pub mod txcorpus;
pub mod graphbuild;
pub mod labor;
pub mod magae;
pub mod cafn;
pub mod txclm;

/// Index-parallel map. Output order matches input order.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
pub mod harness;
