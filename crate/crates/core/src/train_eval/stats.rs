//! Two-sample tests, summary statistics and regression slope.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::metrics::midranks;
use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (n - 1 denominator); 0 for fewer than two values.
pub fn sample_var(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn sample_std(x: &[f64]) -> f64 {
    sample_var(x).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    /// Both samples have zero variance with different means.
    pub degenerate: bool,
}

/// Welch's unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Precondition(
            "Welch's test needs at least 2 values per sample".into(),
        ));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (v1, v2) = (sample_var(a) / n1, sample_var(b) / n2);
    let diff = mean(a) - mean(b);
    let se2 = v1 + v2;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            WelchResult {
                t: 0.0,
                df: n1 + n2 - 2.0,
                p: 1.0,
                degenerate: false,
            }
        } else {
            WelchResult {
                t: diff.signum() * f64::INFINITY,
                df: n1 + n2 - 2.0,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (v1 * v1 / (n1 - 1.0) + v2 * v2 / (n2 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult {
        t,
        df,
        p,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `#(a > b) + ½ #(a = b)` over all pairs.
    pub u: f64,
    pub z: f64,
    /// Two-sided, normal approximation with tie and continuity correction.
    pub p: f64,
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition(
            "Mann-Whitney U needs non-empty samples".into(),
        ));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&all);
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 || n < 2.0 {
        return Ok(MannWhitney { u, z: 0.0, p: 1.0 });
    }
    let dev = u - n1 * n2 / 2.0;
    let z = dev.signum() * (dev.abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * normal.sf(z.abs())).min(1.0);
    Ok(MannWhitney { u, z, p })
}

/// Ordinary least-squares slope of `values` on `months`.
pub fn linreg_slope(values: &[f64], months: &[f64]) -> Result<f64> {
    if values.len() != months.len() || values.len() < 2 {
        return Err(Error::Precondition(
            "slope needs at least 2 paired points".into(),
        ));
    }
    let (mx, my) = (mean(months), mean(values));
    let sxx: f64 = months.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("all months are equal".into()));
    }
    let sxy: f64 = months
        .iter()
        .zip(values)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_identical_and_symmetric() {
        let a = [0.8, 0.9, 1.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let b = [0.5, 0.6, 0.7];
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
        // equal variances and sizes: t = 0.3 / sqrt(2 * 0.01 / 3), df = 4
        assert!((ab.t - 3.674234614174767).abs() < 1e-12);
        assert!((ab.df - 4.0).abs() < 1e-12);
    }

    #[test]
    fn welch_zero_variance() {
        let r = welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.degenerate);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p, 1.0);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mann_whitney_basics() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.z < 0.0);
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.p, 1.0);
        let r = mann_whitney_u(&[5.0, 5.0], &[5.0]).unwrap();
        assert_eq!((r.u, r.p), (1.0, 1.0));
    }

    #[test]
    fn slope() {
        assert_eq!(
            linreg_slope(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap(),
            1.0
        );
        assert_eq!(
            linreg_slope(&[4.0, 4.0, 4.0], &[0.0, 6.0, 18.0]).unwrap(),
            0.0
        );
        assert!(linreg_slope(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
