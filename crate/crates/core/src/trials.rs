//! Trial execution.
//!
//! Trials are indexed `0..n`, run independently and returned in index order,
//! so aggregation never depends on scheduling. With the `parallel` feature a
//! rayon pool of the requested width is used; otherwise, or with one worker,
//! the loop is sequential.

use std::panic::{catch_unwind, AssertUnwindSafe};

use crate::error::{Error, Result};

/// Result of one trial, keyed by its index.
#[derive(Debug)]
pub struct TrialOutcome<T> {
    pub trial: usize,
    pub result: Result<T>,
}

fn run_one<T, F>(trial: usize, f: &F) -> TrialOutcome<T>
where
    F: Fn(usize) -> Result<T>,
{
    let result = match catch_unwind(AssertUnwindSafe(|| f(trial))) {
        Ok(r) => r,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            Err(Error::TrialPanicked(msg))
        }
    };
    TrialOutcome { trial, result }
}

/// Run `trials` closures on `threads` workers (`0` means all available
/// cores). A panicking trial is converted into an error outcome.
pub fn run_trials<T, F>(trials: usize, threads: usize, f: F) -> Vec<TrialOutcome<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    #[cfg(feature = "parallel")]
    if threads != 1 && trials > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build();
        if let Ok(pool) = pool {
            return pool.install(|| (0..trials).into_par_iter().map(|k| run_one(k, &f)).collect());
        }
        log::warn!("could not build a {threads}-worker pool; running sequentially");
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    (0..trials).map(|k| run_one(k, &f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_in_index_order() {
        for threads in [1, 4] {
            let out = run_trials(20, threads, |k| Ok(k * k));
            let got: Vec<usize> = out.iter().map(|o| *o.result.as_ref().unwrap()).collect();
            assert_eq!(got, (0..20).map(|k| k * k).collect::<Vec<_>>());
            assert!(out.iter().enumerate().all(|(i, o)| o.trial == i));
        }
    }

    #[test]
    fn panics_are_isolated() {
        let out = run_trials(5, 2, |k| {
            if k == 3 {
                panic!("boom");
            }
            Ok(k)
        });
        assert!(matches!(&out[3].result, Err(Error::TrialPanicked(m)) if m == "boom"));
        assert_eq!(out.iter().filter(|o| o.result.is_ok()).count(), 4);
    }
}
