use rayon::prelude::*;

/// Run `f(0..trials)` and return results in trial order. With `jobs > 1`
/// the trials are spread over a dedicated pool of that many threads.
pub fn run_trials<T, F>(trials: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if jobs <= 1 || trials <= 1 {
        return (0..trials).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| (0..trials).into_par_iter().map(&f).collect()),
        Err(_) => (0..trials).map(f).collect(),
    }
}
