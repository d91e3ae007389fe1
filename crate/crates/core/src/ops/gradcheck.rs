use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `analytic` against central differences of the scalar function
/// `loss` around `point`.
///
/// When `max_coords` is smaller than the number of coordinates, a random
/// subset of that size (seeded by `seed`) is checked instead of all of them.
pub fn grad_check<F>(
    mut loss: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let coords: Vec<usize> = if point.len() <= max_coords {
        (0..point.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, point.len(), max_coords).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut x = point.to_vec();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: coords.len(),
    };
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + step;
        let plus = loss(&x);
        x[i] = orig - step;
        let minus = loss(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let point = [0.5, -1.25, 2.0];
        let analytic: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
        let r = grad_check(|x| x.iter().map(|v| v * v).sum(), &point, &analytic, 1e-5, 200, 0);
        assert!(r.passes(1e-9), "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_reported_not_raised() {
        let r = grad_check(|x| x[0] * 3.0, &[1.0], &[2.0], 1e-5, 200, 0);
        assert!(!r.passes(1e-5));
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn subsamples_large_inputs() {
        let point = vec![1.0; 1000];
        let analytic = vec![1.0; 1000];
        let r = grad_check(|x| x.iter().sum(), &point, &analytic, 1e-5, 200, 7);
        assert_eq!(r.checked, 200);
    }
}
