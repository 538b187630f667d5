//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon when asked for
//! [`Execution::Parallel`]; without it every call runs sequentially. Only
//! element-wise work goes through here: reductions stay sequential so that
//! results are bit-reproducible regardless of thread scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Element-wise work on fewer items than this stays sequential: below it the
/// dispatch overhead outweighs the gain (a 2D 32² grid is 1024 nodes).
pub const MIN_PARALLEL_LEN: usize = 1 << 14;

impl Execution {
    /// Whether this build can actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Whether `len` element-wise items are worth spreading over threads.
    pub fn splits(self, len: usize) -> bool {
        self.is_parallel() && len >= MIN_PARALLEL_LEN && threads() > 1
    }
}

fn threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}

/// Apply `f` to consecutive chunks of `chunk` elements. `data.len()` decides
/// whether to split.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(&mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.splits(data.len()) {
        data.par_chunks_mut(chunk).for_each(f);
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk).for_each(f);
}

/// Map `f` over `items`, preserving order. Meant for coarse work items
/// (whole runs), so it splits whenever parallel execution is requested.
pub fn map<T, R, F>(exec: Execution, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.into_par_iter().map(f).collect();
    }
    let _ = exec;
    items.into_iter().map(f).collect()
}

/// Fill `out[i] = f(i)`.
pub fn fill_indexed<T, F>(exec: Execution, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.splits(out.len()) {
        out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        return;
    }
    let _ = exec;
    for (i, v) in out.iter_mut().enumerate() {
        *v = f(i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let items: Vec<u64> = (0..257).collect();
        let a = map(Execution::Sequential, items.clone(), |x| x * x + 1);
        let b = map(Execution::Parallel, items, |x| x * x + 1);
        assert_eq!(a, b);

        let len = MIN_PARALLEL_LEN + 3;
        let mut s = vec![0.0f64; len];
        let mut p = vec![0.0f64; len];
        fill_indexed(Execution::Sequential, &mut s, |i| (i as f64).sin());
        #[allow(unused_mut)]
        let mut fill = || fill_indexed(Execution::Parallel, &mut p, |i| (i as f64).sin());
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(fill);
        #[cfg(not(feature = "parallel"))]
        fill();
        assert_eq!(s, p);
    }

    #[test]
    fn small_inputs_stay_sequential() {
        assert!(!Execution::Sequential.splits(usize::MAX));
        assert!(!Execution::Parallel.splits(MIN_PARALLEL_LEN - 1));
    }
}
