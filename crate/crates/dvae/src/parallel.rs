//! Fixed-order parallel map over independent work items.
//!
//! Training steps are strictly sequential; only embarrassingly parallel
//! sweeps (verification trials, bias-study minibatches, metric votes) go
//! through here. Each item owns its rng substream, so results are identical
//! for any worker count, and outputs are returned in input order.

use std::env;

/// Worker cap: `DVAE_THREADS` if set (minimum 1), else available parallelism.
pub fn thread_limit() -> usize {
    if let Ok(v) = env::var("DVAE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Apply `f` to every index in `0..n`, in parallel, collecting results in
/// index order.
pub fn par_map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let workers = thread_limit().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<R>] = &mut out;
        let mut start = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(start + j));
                }
            });
            start += take;
        }
    });
    out.into_iter().map(|r| r.expect("all indices computed")).collect()
}
