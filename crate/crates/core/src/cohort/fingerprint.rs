//! Position-matching simulation: per-observer distortion fields split into
//! shared, idiosyncratic, and per-block noise components, with linear fits of
//! the distortion indices and within/between-observer correlations.

use crate::config::FingerprintSection;
use crate::error::Result;
use crate::rng::Rng;
use crate::stats::{linfit, mean, pearson};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FingerprintFit {
    /// self-fit DI ~ beta0 + beta1 * self
    pub beta0: f64,
    pub beta1: f64,
    /// other-fit DI ~ beta0' + beta1' * others
    pub beta0_other: f64,
    pub beta1_other: f64,
    pub r_within: f64,
    pub r_between: f64,
    /// DI vectors indexed [observer][block][location]
    pub di: Vec<Vec<Vec<f64>>>,
}

/// Simulate the distortion-index experiment. The measured DI of observer o in
/// block b at location l is shared(l) + idiosyncratic_o(l) + noise_{o,b}(l).
pub fn run_fingerprint_experiment(cfg: &FingerprintSection, seed: u64) -> Result<FingerprintFit> {
    cfg.validate()?;
    let mut rng = Rng::new(seed).derive("fingerprint");
    let l = cfg.locations;

    let shared: Vec<f64> = (0..l).map(|_| cfg.shared_amp * rng.normal()).collect();
    let mut di = vec![vec![vec![0.0; l]; cfg.blocks]; cfg.observers];
    for (o, obs) in di.iter_mut().enumerate() {
        let mut rng_o = rng.derive(&format!("observer/{o}"));
        let idio: Vec<f64> = (0..l).map(|_| cfg.idiosyncratic_amp * rng_o.normal()).collect();
        for block in obs.iter_mut() {
            for (loc, v) in block.iter_mut().enumerate() {
                *v = shared[loc] + idio[loc] + cfg.noise_amp * rng_o.normal();
            }
        }
    }

    // Within: all same-observer block pairs. Between: all block pairs of
    // distinct observers.
    let mut within = Vec::new();
    let mut between = Vec::new();
    let mut self_x = Vec::new();
    let mut self_y = Vec::new();
    let mut other_x = Vec::new();
    let mut other_y = Vec::new();
    for o in 0..cfg.observers {
        for b1 in 0..cfg.blocks {
            for b2 in (b1 + 1)..cfg.blocks {
                within.push(pearson(&di[o][b1], &di[o][b2])?);
                self_x.extend_from_slice(&di[o][b1]);
                self_y.extend_from_slice(&di[o][b2]);
            }
        }
        for o2 in (o + 1)..cfg.observers {
            for b1 in 0..cfg.blocks {
                for b2 in 0..cfg.blocks {
                    between.push(pearson(&di[o][b1], &di[o2][b2])?);
                    other_x.extend_from_slice(&di[o2][b2]);
                    other_y.extend_from_slice(&di[o][b1]);
                }
            }
        }
    }
    let (beta0, beta1) = linfit(&self_x, &self_y)?;
    let (beta0_other, beta1_other) = linfit(&other_x, &other_y)?;
    Ok(FingerprintFit {
        beta0,
        beta1,
        beta0_other,
        beta1_other,
        r_within: mean(&within),
        r_between: mean(&between),
        di,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_defaults_hit_reference_correlations() {
        let cfg = FingerprintSection::default();
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for seed in 0..5 {
            let fit = run_fingerprint_experiment(&cfg, seed).unwrap();
            ws.push(fit.r_within);
            bs.push(fit.r_between);
        }
        let w = mean(&ws);
        let b = mean(&bs);
        assert!((w - 0.71).abs() < 0.15, "r_within {w}");
        assert!((b - 0.22).abs() < 0.15, "r_between {b}");
    }

    #[test]
    fn no_idiosyncrasy_makes_within_equal_between() {
        let cfg = FingerprintSection {
            idiosyncratic_amp: 0.0,
            ..FingerprintSection::default()
        };
        let mut dw = Vec::new();
        for seed in 0..5 {
            let fit = run_fingerprint_experiment(&cfg, seed).unwrap();
            dw.push(fit.r_within - fit.r_between);
        }
        assert!(mean(&dw).abs() < 0.1, "within ≈ between without fingerprints");
    }

    #[test]
    fn perfectly_repeated_observer_has_unit_slope() {
        let cfg = FingerprintSection {
            noise_amp: 0.0,
            ..FingerprintSection::default()
        };
        let fit = run_fingerprint_experiment(&cfg, 3).unwrap();
        assert!((fit.beta1 - 1.0).abs() < 1e-9, "beta1 {}", fit.beta1);
        assert!((fit.r_within - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_blocks_or_observers_error() {
        let mut cfg = FingerprintSection::default();
        cfg.blocks = 1;
        assert!(run_fingerprint_experiment(&cfg, 0).is_err());
        let mut cfg = FingerprintSection::default();
        cfg.observers = 1;
        assert!(run_fingerprint_experiment(&cfg, 0).is_err());
    }

    #[test]
    fn correlations_stay_in_range() {
        let cfg = FingerprintSection::default();
        let fit = run_fingerprint_experiment(&cfg, 77).unwrap();
        assert!(fit.r_within.abs() <= 1.0 && fit.r_between.abs() <= 1.0);
        assert_eq!(fit.di.len(), cfg.observers);
        assert_eq!(fit.di[0].len(), cfg.blocks);
        assert_eq!(fit.di[0][0].len(), cfg.locations);
    }
}
