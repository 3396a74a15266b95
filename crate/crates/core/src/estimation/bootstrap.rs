use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{EffectEstimate, EstimationError, SeKind, Z_95};
use crate::dataset::StudyFrame;
use crate::linalg;

/// Random stream for replicate `index`: the seed picks the key, the index
/// picks the ChaCha stream, so draws do not depend on scheduling.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn resample(frame: &StudyFrame, rng: &mut ChaCha8Rng) -> StudyFrame {
    let n = frame.n_units();
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    frame.select_rows(&rows)
}

/// Reruns `pipeline` (design and estimate) on `b` resamples of the units.
///
/// The point estimate comes from `pipeline(frame)`; the standard error is the
/// sample SD of the replicate estimates. Failed replicates are excluded and
/// counted; more than 20% failures is an error.
pub fn bootstrap_se<F, E>(frame: &StudyFrame, b: usize, seed: u64, pipeline: F) -> Result<EffectEstimate, EstimationError>
where
    F: Fn(&StudyFrame) -> Result<EffectEstimate, E> + Sync,
    E: std::fmt::Display,
{
    if b < 2 {
        return Err(EstimationError::InvalidArgument(format!("bootstrap needs B >= 2, got {b}")));
    }
    let point = pipeline(frame).map_err(|e| EstimationError::InvalidArgument(format!("point estimate failed: {e}")))?;
    let outcomes: Vec<Result<f64, String>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(seed, i);
            let sample = resample(frame, &mut rng);
            pipeline(&sample).map(|e| e.tau_hat).map_err(|e| format!("replicate {i}: {e}"))
        })
        .collect();
    let mut taus = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(t) => taus.push(t),
            Err(m) => failures.push(m),
        }
    }
    if failures.len() * 5 > b {
        return Err(EstimationError::TooManyFailures { failed: failures.len(), total: b });
    }
    let se = linalg::sample_sd(&taus);
    let mut method = point.method;
    method.se_kind = SeKind::Bootstrap;
    method.bootstrap_reps = Some(b);
    method.bootstrap_failures = Some(failures.len());
    method.failure_messages = failures;
    Ok(EffectEstimate {
        tau_hat: point.tau_hat,
        se,
        ci95: (point.tau_hat - Z_95 * se, point.tau_hat + Z_95 * se),
        estimand: point.estimand,
        method,
        n_effective: point.n_effective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::diff_in_means;
    use crate::Estimand;

    fn frame(y: Vec<f64>) -> StudyFrame {
        let n = y.len();
        let t = (0..n).map(|i| (i % 2) as u8).collect();
        StudyFrame::new(t, vec![], Some(y)).unwrap()
    }

    fn dim(f: &StudyFrame) -> Result<EffectEstimate, EstimationError> {
        diff_in_means(f, &vec![1.0; f.n_units()], Estimand::Ate)
    }

    #[test]
    fn seeded_runs_agree() {
        let f = frame((0..40).map(|i| (i * 7 % 11) as f64).collect());
        let a = bootstrap_se(&f, 50, 9, dim).unwrap();
        let b = bootstrap_se(&f, 50, 9, dim).unwrap();
        assert_eq!(a, b);
        assert!(a.se > 0.0);
        assert_eq!(a.method.se_kind, SeKind::Bootstrap);
        assert_eq!(a.method.bootstrap_reps, Some(50));
    }

    #[test]
    fn single_replicate_rejected() {
        let f = frame(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(bootstrap_se(&f, 1, 0, dim), Err(EstimationError::InvalidArgument(_))));
    }

    #[test]
    fn constant_outcome_has_zero_se() {
        let f = frame(vec![3.0; 30]);
        assert_eq!(bootstrap_se(&f, 40, 1, dim).unwrap().se, 0.0);
    }

    #[test]
    fn frequent_failures_are_an_error() {
        let f = frame((0..20).map(f64::from).collect());
        let flaky = |g: &StudyFrame| {
            if g.outcome.as_ref().unwrap()[0] > 4.0 {
                Err("unlucky draw")
            } else {
                dim(g).map_err(|_| "dim")
            }
        };
        assert!(matches!(
            bootstrap_se(&f, 30, 3, flaky),
            Err(EstimationError::TooManyFailures { .. })
        ));
    }

    #[test]
    fn streams_differ_by_index() {
        let a: u64 = replicate_rng(5, 0).random();
        let b: u64 = replicate_rng(5, 1).random();
        assert_ne!(a, b);
    }
}
