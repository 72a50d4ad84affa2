//! Thread-pool plumbing shared by the parallel stages.

/// Runs `f` on a dedicated pool of `threads` workers (0 means one).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("failed to build thread pool");
    pool.install(f)
}
