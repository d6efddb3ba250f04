/// Environment variable capping worker parallelism.
pub const THREADS_ENV: &str = "UNIAVATAR_THREADS";

/// Worker count: the machine's parallelism, capped by `UNIAVATAR_THREADS`
/// when that holds a positive integer.
pub fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    cap_threads(avail, std::env::var(THREADS_ENV).ok().as_deref())
}

pub fn cap_threads(available: usize, cap: Option<&str>) -> usize {
    let cap = cap.and_then(|s| s.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    available.min(cap.unwrap_or(usize::MAX)).max(1)
}
