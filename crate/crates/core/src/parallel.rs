//! Order-preserving parallel map over scoped threads.

/// Worker count: the `FIA_THREADS` environment variable when set to a
/// positive integer, otherwise the available hardware parallelism.
pub fn worker_count() -> usize {
    std::env::var("FIA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Applies `f` to every index in `0..n` and returns results in index order.
/// Output does not depend on the worker count.
pub fn par_map<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = worker_count().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                let lo = k * chunk;
                let hi = ((k + 1) * chunk).min(n);
                scope.spawn(move || (lo..hi).map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
