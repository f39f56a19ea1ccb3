//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in input order, and reductions are always
//! performed sequentially over that ordered output, so both execution modes
//! produce bitwise-identical results.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls back
    /// to sequential execution.
    #[default]
    Parallel,
}

pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// Order-preserving map over a slice.
pub fn map_slice<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Order-preserving map over `0..count`.
pub fn map_indexed<U, F>(mode: ExecMode, count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

/// Adds `src` into `dst` element-wise.
pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums vectors in the given order.
pub fn ordered_sum(len: usize, parts: &[Vec<f64>]) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        add_assign(&mut total, p);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let a = map_slice(ExecMode::Sequential, &xs, |x| x * 1.5);
        let b = map_slice(ExecMode::Parallel, &xs, |x| x * 1.5);
        assert_eq!(a, b);
        let c = map_indexed(ExecMode::Parallel, 10, |i| i * i);
        assert_eq!(c, (0..10).map(|i| i * i).collect::<Vec<_>>());
    }
}
