//! Ordered parallel map over replication indices.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Evaluates `f(0..count)` in parallel and returns results in index order.
/// `threads = None` uses the global pool. The first failing index (in index
/// order) is reported with its replication number.
pub fn map_indexed<T, F>(count: usize, threads: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let run = || -> Vec<Result<T>> { (0..count).into_par_iter().map(&f).collect() };
    let results = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build().map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?.install(run),
        None => run(),
    };
    results.into_iter().enumerate().map(|(i, r)| r.map_err(|e| e.in_replication(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_by_index() {
        let v = map_indexed(100, Some(4), |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        let err = map_indexed(10, Some(2), |i| if i == 6 { Err(Error::Simulation { interval: 3 }) } else { Ok(i) });
        assert!(matches!(err, Err(Error::Replication { replication: 6, .. })));
    }
}
