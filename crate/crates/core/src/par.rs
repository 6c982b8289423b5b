//! Replica fan-out. With the `parallel` feature replicas run on the rayon
//! pool; without it they run in order on the calling thread. Results are
//! returned in replica order either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(0), …, f(n−1)`.
pub fn map_replicas<T, F>(n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential reference used by benchmarks and determinism tests.
pub fn map_replicas_sequential<T, F>(n: u64, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f` with at most `threads` worker threads (`None` or 0: the default
/// pool).
pub fn with_threads<T, F>(threads: Option<usize>, f: F) -> crate::Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    {
        match threads {
            Some(t) if t > 0 => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
            _ => Ok(f()),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(f())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let a = map_replicas(1000, |i| i * i);
        let b = map_replicas_sequential(1000, |i| i * i);
        assert_eq!(a, b);
        let c = with_threads(Some(2), || map_replicas(10, |i| i + 1)).unwrap();
        assert_eq!(c, (1..=10).collect::<Vec<_>>());
    }
}
