//! Data-parallel map helpers.
//!
//! Every parallel site in the crate maps over an indexed slice and
//! collects results in input order, so reductions downstream are
//! performed sequentially over a deterministically ordered vector.
//! This makes outputs bit-identical regardless of thread count, and
//! lets the sequential fallback (the `parallel` feature disabled, or
//! `parallel=false` at runtime) produce byte-for-byte the same results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when requested and compiled in.
/// Output order always matches input order.
pub fn maybe_par_map<T, U, F>(items: &[T], parallel: bool, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            return items.par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Indexed variant; `f` receives `(index, item)`.
pub fn maybe_par_map_indexed<T, U, F>(items: &[T], parallel: bool, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            return items
                .par_iter()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect();
        }
    }
    let _ = parallel;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Run `body` inside a thread pool of the requested size. With
/// `threads <= 1` (or without the `parallel` feature) the body runs on
/// the current thread and all `maybe_par_map` calls inside degrade to
/// sequential iteration.
pub fn with_threads<R: Send>(threads: usize, body: impl FnOnce(bool) -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool construction");
            return pool.install(|| body(true));
        }
    }
    let _ = threads;
    body(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let items: Vec<f64> = (0..1000).map(|i| i as f64 * 0.1).collect();
        let f = |x: &f64| (x.sin() * x.cos()).to_bits();
        let seq = maybe_par_map(&items, false, f);
        let par = with_threads(4, |p| maybe_par_map(&items, p, f));
        assert_eq!(seq, par);
    }

    #[test]
    fn order_is_preserved() {
        let items: Vec<usize> = (0..257).collect();
        let out = with_threads(8, |p| maybe_par_map_indexed(&items, p, |i, &x| (i, x)));
        for (i, (j, x)) in out.iter().enumerate() {
            assert_eq!(i, *j);
            assert_eq!(i, *x);
        }
    }
}
