//! Small statistical helpers for Monte Carlo acceptance checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

/// Sample mean and the standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Wilson score interval for a binomial proportion at `z` standard errors.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Probabilities `P(X = k)` of `Binomial(n, p)` for `k = 0..=n`.
pub fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    let p = p.clamp(0.0, 1.0);
    match Binomial::new(p, n) {
        Ok(b) => (0..=n).map(|k| b.pmf(k)).collect(),
        Err(_) => {
            let mut v = vec![0.0; n as usize + 1];
            v[0] = 1.0;
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub bins: usize,
    pub samples: u64,
}

/// Pearson chi-square goodness of fit of `observed` counts against cell
/// probabilities `probs` (same length). Adjacent cells are pooled left to
/// right until every pooled cell expects at least `min_expected` samples;
/// a short tail is merged into the last pooled cell.
pub fn chi_square_gof(observed: &[u64], probs: &[f64], min_expected: f64) -> GofResult {
    assert_eq!(observed.len(), probs.len());
    let n: u64 = observed.iter().sum();
    let nf = n as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&ob, &p) in observed.iter().zip(probs) {
        o += ob as f64;
        e += p * nf;
        if e >= min_expected {
            cells.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if o > 0.0 || e > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    let statistic: f64 = cells
        .iter()
        .filter(|c| c.1 > 0.0)
        .map(|&(o, e)| (o - e).powi(2) / e)
        .sum();
    // observations in a cell of zero expectation refute the law outright
    let impossible = cells.iter().any(|&(o, e)| e <= 0.0 && o > 0.0);
    let dof = cells.len().saturating_sub(1);
    let p_value = if impossible {
        0.0
    } else if dof == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof as f64).unwrap().cdf(statistic)
    };
    GofResult {
        statistic,
        dof,
        p_value,
        bins: cells.len(),
        samples: n,
    }
}

/// Counts of each value `0..=max` in `xs`.
pub fn histogram(xs: &[u64], max: u64) -> Vec<u64> {
    let mut h = vec![0u64; max as usize + 1];
    for &x in xs {
        h[(x.min(max)) as usize] += 1;
    }
    h
}
