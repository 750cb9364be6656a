//! Order-preserving map over an index range, parallel when the `parallel`
//! feature is enabled. Results come back in index order, so any reduction the
//! caller performs afterwards is independent of thread scheduling.

#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}
