//! Ordered fan-out of independent jobs on a worker pool.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `job` over `inputs` on `workers` threads (or rayon's default when
/// `None`) and returns the results in input order, so the output does not
/// depend on the worker count.
pub fn ordered_map<I, T, F>(workers: Option<usize>, inputs: &[I], job: F) -> Result<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T> + Sync + Send,
{
    let run = || inputs.par_iter().map(&job).collect::<Result<Vec<T>>>();
    match workers {
        None => run(),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Resource(format!("cannot start worker pool: {e}")))?;
            pool.install(run)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let xs: Vec<u64> = (0..100).collect();
        let one = ordered_map(Some(1), &xs, |x| Ok(x * x)).unwrap();
        let many = ordered_map(Some(8), &xs, |x| Ok(x * x)).unwrap();
        assert_eq!(one, many);
        assert_eq!(one[7], 49);
    }

    #[test]
    fn first_error_propagates() {
        let xs = [1, 2, 3];
        let r = ordered_map(Some(2), &xs, |&x| {
            if x == 2 {
                Err(Error::Numerical("boom".into()))
            } else {
                Ok(x)
            }
        });
        assert!(r.is_err());
    }
}
