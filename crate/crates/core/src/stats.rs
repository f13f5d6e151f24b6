//! Small statistics helpers used by losses and evaluation.

use crate::error::{CoreError, Result};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-12;

/// Sample Pearson correlation. Errors on constant input so callers decide
/// their own fallback.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson_with_floor(a, b, DEFAULT_VARIANCE_FLOOR)
}

pub fn pearson_with_floor(a: &[f64], b: &[f64], floor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::shape(format!(
            "pearson: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(CoreError::arg("pearson: need at least 2 points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    va /= n;
    vb /= n;
    cov /= n;
    if va <= floor || vb <= floor {
        return Err(CoreError::arg(format!(
            "pearson: constant input (variances {va:.3e}, {vb:.3e})"
        )));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Ordinary least squares fit y ~ b0 + b1 x.
pub fn linfit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CoreError::arg("linfit: need two equal-length series"));
    }
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if sxx / n <= DEFAULT_VARIANCE_FLOOR {
        return Err(CoreError::arg("linfit: constant regressor"));
    }
    let b1 = sxy / sxx;
    Ok((my - b1 * mx, b1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn exact_linear_relations() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_formula_on_random_vectors() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let a: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            // independent direct evaluation: cov / (sigma_a * sigma_b)
            let n = 8.0;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let sa = (a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n).sqrt();
            let sb = (b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n).sqrt();
            let want = cov / (sa * sb);
            let got = pearson(&a, &b).unwrap();
            assert!((got - want).abs() < 1e-12);
            assert!(got.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn constant_input_errors() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn affine_invariance() {
        let mut rng = Rng::new(9);
        let a: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let r = pearson(&a, &b).unwrap();
        let b2: Vec<f64> = b.iter().map(|y| 3.5 * y - 2.0).collect();
        assert!((pearson(&a, &b2).unwrap() - r).abs() < 1e-10);
    }

    #[test]
    fn linfit_recovers_perfect_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (b0, b1) = linfit(&x, &y).unwrap();
        assert!((b0 - 1.0).abs() < 1e-12 && (b1 - 2.0).abs() < 1e-12);
    }
}
