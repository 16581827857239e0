use nalgebra::{DMatrix, DVector};
use tracing::warn;

use crate::error::{Error, Result};

/// Below this many rows the covariance estimate is too noisy to trust.
pub const MIN_STABLE_SAMPLES: usize = 50;

/// Mean and (n−1)-normalized covariance of a feature set.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Empty("feature statistics need at least two rows"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("fid", &[d], &[rows.iter().map(Vec::len).max().unwrap_or(0)]));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fid features".into()));
        }
        if n < MIN_STABLE_SAMPLES {
            warn!(n, "few samples for a stable covariance estimate");
        }
        let x = DMatrix::from_fn(n, d, |r, c| rows[r][c]);
        let mean = x.row_mean().transpose();
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        Ok(FeatureStats { mean, cov })
    }
}

/// Square root of a symmetric PSD matrix with negative eigenvalues clipped
/// to 0. Coordinates with a zero diagonal carry all-zero rows and columns;
/// they are split off before the eigendecomposition, which returns NaN on
/// such matrices, and stay zero in the result.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let support: Vec<usize> = (0..n).filter(|&i| m[(i, i)] != 0.0).collect();
    let mut out = DMatrix::zeros(n, n);
    if support.is_empty() {
        return out;
    }
    let k = support.len();
    let sub = DMatrix::from_fn(k, k, |r, c| 0.5 * (m[(support[r], support[c])] + m[(support[c], support[r])]));
    let eig = sub.symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            out[(i, j)] = s[(r, c)];
        }
    }
    out
}

/// `‖μ₁ − μ₂‖² + Tr(C₁ + C₂ − 2(C₁C₂)^½)`. The trace of `(C₁C₂)^½` is taken
/// from the symmetric `C₁^½ C₂ C₁^½`, which has the same eigenvalues.
pub fn fid_from_stats(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape("fid", &[a.mean.len()], &[b.mean.len()]));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let s1 = psd_sqrt(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let cross: f64 = psd_sqrt(&inner).trace();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite("fid".into()));
    }
    Ok(d.max(0.0))
}

pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    fid_from_stats(&FeatureStats::from_features(a)?, &FeatureStats::from_features(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(seed: u64, n: usize, d: usize, scale: &[f64], shift: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|j| shift + scale[j] * rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_vec(mean),
            cov,
        }
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = random_rows(1, 80, 6, &[1.0, 2.0, 0.5, 1.0, 3.0, 0.1], 0.2);
        assert!(fid(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn one_dimensional_hand_value() {
        let a = stats(vec![0.0], DMatrix::from_element(1, 1, 1.0));
        let b = stats(vec![1.0], DMatrix::from_element(1, 1, 1.0));
        assert!((fid_from_stats(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_closed_form() {
        let c1 = [0.5, 2.0, 1.3, 0.01];
        let c2 = [1.5, 0.2, 1.3, 0.7];
        let a = stats(vec![0.1, 0.2, 0.3, 0.4], DMatrix::from_diagonal(&DVector::from_row_slice(&c1)));
        let b = stats(vec![0.0, 0.5, 0.3, -1.0], DMatrix::from_diagonal(&DVector::from_row_slice(&c2)));
        let expected: f64 = c1.iter().zip(&c2).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>()
            + [0.1f64, -0.3, 0.0, 1.4].iter().map(|d| d * d).sum::<f64>();
        assert!((fid_from_stats(&a, &b).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn symmetric_and_permutation_invariant() {
        let a = random_rows(2, 60, 5, &[1.0; 5], 0.0);
        let b = random_rows(3, 70, 5, &[0.5, 1.0, 2.0, 1.0, 0.3], 0.4);
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-9);
        let mut ra = a.clone();
        ra.reverse();
        let mut rb = b.clone();
        rb.rotate_left(7);
        assert!((ab - fid(&ra, &rb).unwrap()).abs() < 1e-9);
        assert!(ab > 0.1);
    }

    #[test]
    fn dead_feature_columns() {
        // constant columns, as dead rectifier units produce
        let mut a = random_rows(5, 300, 40, &[1.0; 40], 0.0);
        let mut b = random_rows(6, 300, 40, &[2.0; 40], 0.5);
        for r in a.iter_mut().chain(b.iter_mut()) {
            for j in (0..40).step_by(3) {
                r[j] = 0.0;
            }
            r[1] = 0.0;
        }
        let d = fid(&a, &b).unwrap();
        assert!(d.is_finite() && d > 0.0);
        assert!(fid(&a, &a).unwrap() < 1e-6);
        let one = stats(vec![1.0, 0.0], DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 0.0])));
        let two = stats(vec![0.0, 0.0], DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 9.0])));
        assert!((fid_from_stats(&one, &two).unwrap() - (1.0 + 4.0 + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = random_rows(4, 10, 2, &[1.0, 1.0], 0.0);
        a[3][1] = f64::NAN;
        assert!(matches!(fid(&a, &a), Err(Error::NonFinite(_))));
    }
}
