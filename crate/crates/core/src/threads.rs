//! Worker-count control.
//!
//! Reductions in this crate combine per-block partial results in a fixed
//! order, so the thread count changes speed only, never the results.

use crate::error::{Error, Result};

/// Environment variable capping the worker count (`0` or unset = automatic).
pub const THREADS_ENV: &str = "MAHAKIT_THREADS";

/// Reads [`THREADS_ENV`]; `None` means automatic.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!(
                    "{THREADS_ENV} must be a non-negative integer, got {v:?}"
                ))
            })?;
            Ok((n > 0).then_some(n))
        }
    }
}

/// Installs the global rayon pool. Only the first call in a process has an effect.
pub fn configure_global_pool(threads: Option<usize>) {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    if builder.build_global().is_err() {
        log::debug!("global thread pool already initialized");
    }
}

/// Runs `f` on a dedicated pool with `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}
