//! Training objectives: mixed contrastive (forward + bidirectional), soft
//! contrastive, low-level L1, prior MSE, the skip non-linearity penalty, the
//! pivot image-text loss, and the combined totals.
//!
//! All losses are recorded on the tape so their gradients go through the same
//! reverse pass as the model, and every one of them is validated against
//! central differences in the test suite.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::stats::DEFAULT_VARIANCE_FLOOR;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Loss weights and contrastive settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// weight on the low-level L1 term
    pub alpha_lowlevel: f64,
    /// weight on the contrastive term
    pub alpha_contrastive: f64,
    /// weight on the skip non-linearity term
    pub alpha_skip: f64,
    /// weight on the pivot image-text term
    pub alpha_pivot: f64,
    pub temperature: f64,
    /// shape parameters of the mixing Beta distribution
    pub beta_alpha: f64,
    pub beta_beta: f64,
    /// run the pivot loss in both directions (off by default; the loss is
    /// written single-direction)
    pub bidirectional_pivot: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_lowlevel: 0.5,
            alpha_contrastive: 1.0,
            alpha_skip: 1.5,
            alpha_pivot: 0.5,
            temperature: 0.05,
            beta_alpha: 0.15,
            beta_beta: 0.15,
            bidirectional_pivot: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_lowlevel", self.alpha_lowlevel),
            ("alpha_contrastive", self.alpha_contrastive),
            ("alpha_skip", self.alpha_skip),
            ("alpha_pivot", self.alpha_pivot),
        ] {
            if !(v >= 0.0) {
                return Err(CoreError::InvalidConfig(format!("loss weight {name} must be >= 0")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::InvalidConfig("temperature must be > 0".into()));
        }
        if !(self.beta_alpha > 0.0 && self.beta_beta > 0.0) {
            return Err(CoreError::InvalidConfig("beta shape parameters must be > 0".into()));
        }
        Ok(())
    }
}

/// One batch worth of voxel mixing: factors, partners, and the mixed rows.
#[derive(Debug, Clone)]
pub struct MixPair {
    /// λ_i in (0,1)
    pub lambdas: Vec<f64>,
    /// mixing partner j(i), a permutation with j(i) != i
    pub partner: Vec<usize>,
    /// λ_i·V_i + (1-λ_i)·V_{j(i)}
    pub mixed: Tensor,
}

impl MixPair {
    /// Trivial pair with λ ≡ 1 (used to check the contrastive boundary case).
    pub fn identity(batch: usize) -> Self {
        MixPair {
            lambdas: vec![1.0; batch],
            partner: (0..batch).map(|i| (i + 1) % batch).collect(),
            mixed: Tensor::zeros(vec![batch, 1]),
        }
    }
}

/// Mix a batch of voxel rows with Beta-distributed factors.
pub fn mixco_mix(v_batch: &Tensor, alpha: f64, beta: f64, rng: &mut Rng) -> Result<MixPair> {
    let b = v_batch.rows();
    if b < 2 {
        return Err(CoreError::arg("mixco_mix needs a batch of at least 2"));
    }
    let lambdas: Vec<f64> = (0..b)
        .map(|_| rng.beta(alpha, beta))
        .collect::<Result<_>>()?;
    let partner = rng.derangement(b)?;
    let d = v_batch.cols();
    let mut mixed = vec![0.0; b * d];
    for i in 0..b {
        let vi = v_batch.row(i);
        let vj = v_batch.row(partner[i]);
        let l = lambdas[i];
        for k in 0..d {
            mixed[i * d + k] = l * vi[k] + (1.0 - l) * vj[k];
        }
    }
    Ok(MixPair {
        lambdas,
        partner,
        mixed: Tensor::new(vec![b, d], mixed)?,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(CoreError::arg(format!("temperature must be > 0, got {tau}")))
    }
}

fn check_normalized(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    let (m, n) = (t.rows(), t.cols());
    for i in 0..m {
        let norm: f64 = t.data()[i * n..(i + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(CoreError::arg(format!(
                "{what}: row {i} has norm {norm:.6}, expected L2-normalized embeddings"
            )));
        }
    }
    Ok(())
}

fn check_same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(CoreError::shape(format!(
            "{what}: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

/// Bidirectional mixed contrastive loss. The forward direction weights the
/// cross-entropy of each mixed embedding toward targets i and j(i) by λ and
/// 1-λ; the backward direction applies the transposed weights to the
/// transposed logits; the result is their mean.
pub fn bimixco_loss(
    tape: &mut Tape,
    z_mix: Var,
    targets: Var,
    mix: &MixPair,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape(tape, z_mix, targets, "bimixco_loss")?;
    check_normalized(tape, z_mix, "bimixco_loss: mixed embeddings")?;
    check_normalized(tape, targets, "bimixco_loss: targets")?;
    let b = tape.value(z_mix).rows();
    if mix.lambdas.len() != b || mix.partner.len() != b {
        return Err(CoreError::shape(format!(
            "bimixco_loss: mix pair for batch {} vs embeddings {b}",
            mix.lambdas.len()
        )));
    }

    let mut w = vec![0.0; b * b];
    for i in 0..b {
        w[i * b + i] += mix.lambdas[i];
        w[i * b + mix.partner[i]] += 1.0 - mix.lambdas[i];
    }
    let mut wt = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            wt[j * b + i] = w[i * b + j];
        }
    }
    let w = tape.constant(Tensor::new(vec![b, b], w)?);
    let wt = tape.constant(Tensor::new(vec![b, b], wt)?);

    let sims = tape.matmul_nt(z_mix, targets);
    let logits = tape.mul_scalar(sims, 1.0 / tau);
    let fwd = weighted_nll(tape, logits, w, b);
    let logits_t = tape.transpose(logits);
    let bwd = weighted_nll(tape, logits_t, wt, b);
    let sum = tape.add(fwd, bwd);
    Ok(tape.mul_scalar(sum, 0.5))
}

/// -(1/b)·Σ weights ∘ log_softmax(logits)
fn weighted_nll(tape: &mut Tape, logits: Var, weights: Var, b: usize) -> Var {
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.mul(lsm, weights);
    let total = tape.sum_all(picked);
    tape.mul_scalar(total, -1.0 / b as f64)
}

/// Soft contrastive loss: cross-entropy of prediction-target similarity rows
/// against soft labels from the target-target similarity matrix, both
/// directions averaged.
pub fn softclip_loss(tape: &mut Tape, pred: Var, target: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape(tape, pred, target, "softclip_loss")?;
    check_normalized(tape, pred, "softclip_loss: predictions")?;
    check_normalized(tape, target, "softclip_loss: targets")?;
    let t = tape.value(target).clone();
    let b = t.rows();
    let d = t.cols();

    // Soft labels: row softmax of target-target similarities (no gradient).
    let mut soft = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let dot: f64 = t.row(i).iter().zip(t.row(j)).map(|(x, y)| x * y).sum();
            soft[i * b + j] = dot / tau;
        }
    }
    for i in 0..b {
        let row = &mut soft[i * b..(i + 1) * b];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    let _ = d;
    let soft = tape.constant(Tensor::new(vec![b, b], soft)?);

    let sims = tape.matmul_nt(pred, target);
    let logits = tape.mul_scalar(sims, 1.0 / tau);
    let fwd = weighted_nll(tape, logits, soft, b);
    let logits_t = tape.transpose(logits);
    let bwd = weighted_nll(tape, logits_t, soft, b);
    let sum = tape.add(fwd, bwd);
    Ok(tape.mul_scalar(sum, 0.5))
}

/// Batch-mean absolute error (per element).
pub fn lowlevel_loss(tape: &mut Tape, z_hat: Var, z: Var) -> Result<Var> {
    check_same_shape(tape, z_hat, z, "lowlevel_loss")?;
    let d = tape.sub(z_hat, z);
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// Batch-mean squared error (per element).
pub fn prior_loss(tape: &mut Tape, g_hat: Var, g: Var) -> Result<Var> {
    check_same_shape(tape, g_hat, g, "prior_loss")?;
    let d = tape.sub(g_hat, g);
    let sq = tape.mul(d, d);
    Ok(tape.mean_all(sq))
}

/// Mean |Pearson(linear, skip)| across the feature dimension, per sample,
/// averaged over batch and layers. Zero-variance rows contribute 0 with a
/// logged warning instead of failing mid-training.
pub fn skip_loss(tape: &mut Tape, linears: &[Var], skips: &[Var]) -> Result<Var> {
    if linears.len() != skips.len() {
        return Err(CoreError::shape(format!(
            "skip_loss: {} linear layers vs {} skip layers",
            linears.len(),
            skips.len()
        )));
    }
    if linears.is_empty() {
        return Err(CoreError::arg("skip_loss: no layers"));
    }
    let mut acc: Option<Var> = None;
    for (&lin, &skip) in linears.iter().zip(skips) {
        check_same_shape(tape, lin, skip, "skip_loss layer")?;
        let (b, n) = (tape.value(lin).rows(), tape.value(lin).cols());
        let layer = per_row_abs_pearson(tape, lin, skip, b, n);
        acc = Some(match acc {
            Some(a) => tape.add(a, layer),
            None => layer,
        });
    }
    let total = acc.unwrap();
    Ok(tape.mul_scalar(total, 1.0 / linears.len() as f64))
}

fn per_row_abs_pearson(tape: &mut Tape, x: Var, y: Var, b: usize, n: usize) -> Var {
    let floor = DEFAULT_VARIANCE_FLOOR * n as f64;
    let xm = tape.mean_cols(x);
    let xc = tape.sub_col(x, xm);
    let ym = tape.mean_cols(y);
    let yc = tape.sub_col(y, ym);
    let prod = tape.mul(xc, yc);
    let num = tape.sum_cols(prod);
    let xs = tape.mul(xc, xc);
    let vx = tape.sum_cols(xs);
    let ys = tape.mul(yc, yc);
    let vy = tape.sum_cols(ys);

    // Mask rows whose variance sits at the floor; they contribute zero.
    // Fresh zero-initialized skip blocks hit this on every row, so the
    // expected all-zero case logs quietly and only a non-zero constant row
    // (a genuinely odd state) warns.
    let mut mask = vec![1.0; b];
    for i in 0..b {
        if tape.value(vx).data()[i] <= floor || tape.value(vy).data()[i] <= floor {
            mask[i] = 0.0;
            let all_zero = tape.value(y).row(i).iter().all(|&v| v == 0.0);
            if all_zero {
                log::debug!("skip_loss: zero-init skip row {i}, contributing 0");
            } else {
                log::warn!("skip_loss: constant activation row {i}, contributing 0");
            }
        }
    }
    let mask = tape.constant(Tensor::new(vec![b], mask).unwrap());

    let vx_e = tape.add_scalar(vx, floor.max(1e-300));
    let vy_e = tape.add_scalar(vy, floor.max(1e-300));
    let sx = tape.sqrt(vx_e);
    let sy = tape.sqrt(vy_e);
    let denom = tape.mul(sx, sy);
    let r = tape.div(num, denom);
    let r_masked = tape.mul(r, mask);
    let a = tape.abs(r_masked);
    tape.mean_all(a)
}

/// Single-direction image-text contrastive loss over pivot embeddings; a
/// bidirectional variant is config-gated.
pub fn pivot_loss(
    tape: &mut Tape,
    p: Var,
    t: Var,
    tau: f64,
    bidirectional: bool,
) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape(tape, p, t, "pivot_loss")?;
    check_normalized(tape, p, "pivot_loss: pivot embeddings")?;
    check_normalized(tape, t, "pivot_loss: text embeddings")?;
    let b = tape.value(p).rows();
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let eye = tape.constant(Tensor::new(vec![b, b], eye)?);
    let sims = tape.matmul_nt(p, t);
    let logits = tape.mul_scalar(sims, 1.0 / tau);
    let fwd = weighted_nll(tape, logits, eye, b);
    if !bidirectional {
        return Ok(fwd);
    }
    let logits_t = tape.transpose(logits);
    let bwd = weighted_nll(tape, logits_t, eye, b);
    let sum = tape.add(fwd, bwd);
    Ok(tape.mul_scalar(sum, 0.5))
}

/// Pivot loss under voxel mixing: the λ weights pick out both text partners,
/// mirroring the forward mixed contrastive term.
pub fn pivot_loss_mixed(
    tape: &mut Tape,
    p_mix: Var,
    t: Var,
    mix: &MixPair,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    check_same_shape(tape, p_mix, t, "pivot_loss_mixed")?;
    check_normalized(tape, p_mix, "pivot_loss_mixed: pivot embeddings")?;
    check_normalized(tape, t, "pivot_loss_mixed: text embeddings")?;
    let b = tape.value(p_mix).rows();
    let mut w = vec![0.0; b * b];
    for i in 0..b {
        w[i * b + i] += mix.lambdas[i];
        w[i * b + mix.partner[i]] += 1.0 - mix.lambdas[i];
    }
    let w = tape.constant(Tensor::new(vec![b, b], w)?);
    let sims = tape.matmul_nt(p_mix, t);
    let logits = tape.mul_scalar(sims, 1.0 / tau);
    Ok(weighted_nll(tape, logits, w, b))
}

/// L_multi = prior + α1·lowlevel + α2·contrastive
pub fn total_multi(
    tape: &mut Tape,
    prior: Var,
    lowlevel: Var,
    contrastive: Var,
    cfg: &LossConfig,
) -> Var {
    let low_w = tape.mul_scalar(lowlevel, cfg.alpha_lowlevel);
    let con_w = tape.mul_scalar(contrastive, cfg.alpha_contrastive);
    let s = tape.add(prior, low_w);
    tape.add(s, con_w)
}

/// L_new = L_multi + α3·skip + α4·pivot; either extra term may be absent
/// (ablation arms drop them).
pub fn total_new(
    tape: &mut Tape,
    multi: Var,
    skip: Option<Var>,
    pivot: Option<Var>,
    cfg: &LossConfig,
) -> Var {
    let mut total = multi;
    if let Some(s) = skip {
        let sw = tape.mul_scalar(s, cfg.alpha_skip);
        total = tape.add(total, sw);
    }
    if let Some(p) = pivot {
        let pw = tape.mul_scalar(p, cfg.alpha_pivot);
        total = tape.add(total, pw);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm_rows(t: &mut Tensor) {
        let (m, n) = (t.rows(), t.cols());
        for i in 0..m {
            let norm: f64 = t.data()[i * n..(i + 1) * n]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            for v in &mut t.data_mut()[i * n..(i + 1) * n] {
                *v /= norm;
            }
        }
    }

    #[test]
    fn mixco_boundaries() {
        // λ = 1 keeps V_i, λ = 0 takes the partner; hand arithmetic at 0.5.
        let v = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let mix = MixPair {
            lambdas: vec![1.0, 0.0],
            partner: vec![1, 0],
            mixed: Tensor::zeros(vec![2, 2]),
        };
        let mut mixed = vec![0.0; 4];
        for i in 0..2 {
            for k in 0..2 {
                mixed[i * 2 + k] = mix.lambdas[i] * v.row(i)[k]
                    + (1.0 - mix.lambdas[i]) * v.row(mix.partner[i])[k];
            }
        }
        assert_eq!(&mixed[0..2], v.row(0));
        assert_eq!(&mixed[2..4], v.row(0));
        let half: Vec<f64> = v
            .row(0)
            .iter()
            .zip(v.row(1))
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        assert_eq!(half, vec![1.0, 1.0]);
    }

    #[test]
    fn mixco_mix_contract() {
        let mut rng = Rng::new(51);
        let v = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let mix = mixco_mix(&v, 0.15, 0.15, &mut rng).unwrap();
        assert_eq!(mix.mixed.shape(), &[6, 4]);
        assert!(mix.lambdas.iter().all(|&l| l > 0.0 && l < 1.0));
        assert!(mix.partner.iter().enumerate().all(|(i, &j)| i != j));
        // determinism under the same stream
        let mut rng2 = Rng::new(51);
        let v2 = Tensor::randn(vec![6, 4], 1.0, &mut rng2);
        let mix2 = mixco_mix(&v2, 0.15, 0.15, &mut rng2).unwrap();
        assert_eq!(mix.mixed.data(), mix2.mixed.data());
        // batch of one fails
        let single = Tensor::zeros(vec![1, 4]);
        assert!(mixco_mix(&single, 0.15, 0.15, &mut rng).is_err());
    }

    #[test]
    fn bimixco_identical_embeddings_batch2_gives_log2() {
        // all-equal normalized embeddings -> uniform softmax over 2.
        let row = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
        let e = Tensor::from_rows(&[row.clone(), row.clone()]).unwrap();
        let mix = MixPair {
            lambdas: vec![0.3, 0.8],
            partner: vec![1, 0],
            mixed: Tensor::zeros(vec![2, 2]),
        };
        let mut tape = Tape::new();
        let z = tape.constant(e.clone());
        let t = tape.constant(e);
        let loss = bimixco_loss(&mut tape, z, t, &mix, 0.05).unwrap();
        assert!((tape.scalar_value(loss) - (2.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bimixco_rejects_bad_temperature_and_unnormalized() {
        let mut rng = Rng::new(52);
        let mut e = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        norm_rows(&mut e);
        let mix = MixPair {
            lambdas: vec![0.5; 3],
            partner: vec![1, 2, 0],
            mixed: Tensor::zeros(vec![3, 4]),
        };
        let mut tape = Tape::new();
        let z = tape.constant(e.clone());
        let t = tape.constant(e.clone());
        assert!(bimixco_loss(&mut tape, z, t, &mix, 0.0).is_err());
        let raw = tape.constant(Tensor::randn(vec![3, 4], 3.0, &mut rng));
        assert!(bimixco_loss(&mut tape, raw, t, &mix, 0.05).is_err());
    }

    #[test]
    fn aligned_embeddings_beat_random_ones() {
        let mut rng = Rng::new(53);
        let mut t = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        norm_rows(&mut t);
        let mix = MixPair {
            lambdas: vec![0.9, 0.8, 0.95, 0.85],
            partner: vec![2, 3, 0, 1],
            mixed: Tensor::zeros(vec![4, 8]),
        };
        // Aligned: mixed embedding = normalized λ-weighted target mixture.
        let mut aligned = Tensor::zeros(vec![4, 8]);
        for i in 0..4 {
            for k in 0..8 {
                aligned.data_mut()[i * 8 + k] =
                    mix.lambdas[i] * t.row(i)[k] + (1.0 - mix.lambdas[i]) * t.row(mix.partner[i])[k];
            }
        }
        norm_rows(&mut aligned);
        let mut random = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        norm_rows(&mut random);

        let mut tape = Tape::new();
        let tv = tape.constant(t);
        let av = tape.constant(aligned);
        let rv = tape.constant(random);
        let la = bimixco_loss(&mut tape, av, tv, &mix, 0.05).unwrap();
        let lr = bimixco_loss(&mut tape, rv, tv, &mix, 0.05).unwrap();
        assert!(
            tape.scalar_value(la) < tape.scalar_value(lr),
            "aligned {} vs random {}",
            tape.scalar_value(la),
            tape.scalar_value(lr)
        );
    }

    #[test]
    fn softclip_optimum_at_pred_equals_target() {
        let mut rng = Rng::new(54);
        let mut t = Tensor::randn(vec![5, 6], 1.0, &mut rng);
        norm_rows(&mut t);
        let mut tape = Tape::new();
        let tv = tape.constant(t.clone());
        let base = softclip_loss(&mut tape, tv, tv, 0.1).unwrap();
        let base_val = tape.scalar_value(base);
        for _ in 0..8 {
            let mut pert = t.clone();
            for v in pert.data_mut().iter_mut() {
                *v += 0.05 * rng.normal();
            }
            norm_rows(&mut pert);
            let pv = tape.constant(pert);
            let lp = softclip_loss(&mut tape, pv, tv, 0.1).unwrap();
            assert!(tape.scalar_value(lp) > base_val);
        }
        // at the optimum the loss equals the soft-label entropy
        let tt = &t;
        let b = 5;
        let mut entropy = 0.0;
        for i in 0..b {
            let mut row = vec![0.0; b];
            for j in 0..b {
                row[j] = tt.row(i).iter().zip(tt.row(j)).map(|(x, y)| x * y).sum::<f64>() / 0.1;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..b {
                let p = (row[j] - max).exp() / z;
                entropy -= p * p.ln();
            }
        }
        entropy /= b as f64;
        assert!((base_val - entropy).abs() < 1e-10);
    }

    #[test]
    fn softclip_on_orthonormal_targets_is_infonce() {
        // orthonormal targets -> soft labels ≈ one-hot -> InfoNCE
        let b = 4;
        let mut t = Tensor::zeros(vec![b, b]);
        for i in 0..b {
            t.data_mut()[i * b + i] = 1.0;
        }
        let mut rng = Rng::new(55);
        let mut pred = Tensor::randn(vec![b, b], 1.0, &mut rng);
        norm_rows(&mut pred);
        let tau = 0.05;
        let mut tape = Tape::new();
        let tv = tape.constant(t.clone());
        let pv = tape.constant(pred.clone());
        let sc = softclip_loss(&mut tape, pv, tv, tau).unwrap();
        // independent InfoNCE (symmetric)
        let logits: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                (0..b)
                    .map(|j| pred.row(i).iter().zip(t.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau)
                    .collect()
            })
            .collect();
        let lse = |row: &[f64]| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for i in 0..b {
            fwd -= logits[i][i] - lse(&logits[i]);
            let col: Vec<f64> = (0..b).map(|r| logits[r][i]).collect();
            bwd -= logits[i][i] - lse(&col);
        }
        let want = 0.5 * (fwd + bwd) / b as f64;
        let got = tape.scalar_value(sc);
        // soft labels put weight ~e^{-1/tau} off-diagonal; negligible at tau = 0.05
        assert!((got - want).abs() < 1e-6, "softclip {got} vs infonce {want}");
    }

    #[test]
    fn softclip_is_permutation_equivariant() {
        let mut rng = Rng::new(56);
        let b = 6;
        let mut t = Tensor::randn(vec![b, 8], 1.0, &mut rng);
        let mut p = Tensor::randn(vec![b, 8], 1.0, &mut rng);
        norm_rows(&mut t);
        norm_rows(&mut p);
        let mut tape = Tape::new();
        let tv = tape.constant(t.clone());
        let pv = tape.constant(p.clone());
        let base = softclip_loss(&mut tape, pv, tv, 0.07).unwrap();
        let perm = rng.permutation(b);
        let permute = |x: &Tensor| {
            let mut rows = Vec::new();
            for &i in &perm {
                rows.push(x.row(i).to_vec());
            }
            Tensor::from_rows(&rows).unwrap()
        };
        let tp = tape.constant(permute(&t));
        let pp = tape.constant(permute(&p));
        let shuf = softclip_loss(&mut tape, pp, tp, 0.07).unwrap();
        assert!((tape.scalar_value(base) - tape.scalar_value(shuf)).abs() < 1e-10);
    }

    #[test]
    fn elementwise_losses_trivial_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let same = lowlevel_loss(&mut tape, z, z).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);
        let shifted = tape.add_scalar(z, 1.0);
        let l1 = lowlevel_loss(&mut tape, shifted, z).unwrap();
        assert!((tape.scalar_value(l1) - 1.0).abs() < 1e-12);
        let c = tape.add_scalar(z, -0.5);
        let mse = prior_loss(&mut tape, c, z).unwrap();
        assert!((tape.scalar_value(mse) - 0.25).abs() < 1e-12);
        // shape mismatch
        let bad = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(lowlevel_loss(&mut tape, z, bad).is_err());
        assert!(prior_loss(&mut tape, z, bad).is_err());
    }

    #[test]
    fn skip_loss_perfect_correlation_is_one() {
        let mut rng = Rng::new(57);
        let lin = Tensor::randn(vec![3, 32], 1.0, &mut rng);
        let skipv = {
            let mut s = lin.clone();
            s.scale_in_place(2.5);
            s
        };
        let mut tape = Tape::new();
        let l = tape.constant(lin);
        let s = tape.constant(skipv);
        let loss = skip_loss(&mut tape, &[l], &[s]).unwrap();
        assert!((tape.scalar_value(loss) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn skip_loss_uncorrelated_is_small_and_bounded() {
        let mut rng = Rng::new(58);
        let width = 512;
        let lin = Tensor::randn(vec![8, width], 1.0, &mut rng);
        let skipv = Tensor::randn(vec![8, width], 1.0, &mut rng);
        let mut tape = Tape::new();
        let l = tape.constant(lin);
        let s = tape.constant(skipv);
        let loss = skip_loss(&mut tape, &[l], &[s]).unwrap();
        let v = tape.scalar_value(loss);
        // E|r| ≈ sqrt(2/(π·width)) ≈ 0.035 here
        assert!(v > 0.0 && v < 0.1, "uncorrelated skip loss {v}");
    }

    #[test]
    fn skip_loss_constant_rows_contribute_zero() {
        let lin = Tensor::from_rows(&[vec![1.0; 8], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]])
            .unwrap();
        let skipv = Tensor::from_rows(&[
            vec![0.5, 1.0, 0.2, 0.9, 0.1, 0.7, 0.3, 0.4],
            vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0],
        ])
        .unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(lin);
        let s = tape.constant(skipv);
        let loss = skip_loss(&mut tape, &[l], &[s]).unwrap();
        // row 0 masked (constant linear), row 1 perfectly correlated
        assert!((tape.scalar_value(loss) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pivot_loss_matched_orthonormal_is_near_zero() {
        let b = 4;
        let mut t = Tensor::zeros(vec![b, b]);
        for i in 0..b {
            t.data_mut()[i * b + i] = 1.0;
        }
        let mut tape = Tape::new();
        let tv = tape.constant(t);
        let loss = pivot_loss(&mut tape, tv, tv, 0.05, false).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn pivot_loss_constant_pivot_is_log_batch() {
        let b = 5;
        let mut rng = Rng::new(59);
        let row: Vec<f64> = {
            let mut r = Tensor::randn(vec![1, 6], 1.0, &mut rng);
            norm_rows(&mut r);
            r.data().to_vec()
        };
        let p = Tensor::from_rows(&vec![row; b]).unwrap();
        let mut t = Tensor::randn(vec![b, 6], 1.0, &mut rng);
        norm_rows(&mut t);
        let mut tape = Tape::new();
        let pv = tape.constant(p);
        let tv = tape.constant(t);
        let loss = pivot_loss(&mut tape, pv, tv, 1.0, false).unwrap();
        // constant pivot at τ=1 still has varying logits per row; use a
        // genuinely constant similarity structure instead: p constant AND
        // τ large enough that logits are ~uniform is not exact. Exactness
        // holds when every similarity is equal, e.g. t orthogonal to p.
        let v = tape.scalar_value(loss);
        assert!(v > 0.0);
        // exact uniform case: all logits equal
        let mut t_orth = Tensor::zeros(vec![2, 4]);
        t_orth.data_mut()[0] = 1.0; // e0
        t_orth.data_mut()[4 + 1] = 1.0; // e1
        let p_row = vec![0.0, 0.0, std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];
        let p2 = Tensor::from_rows(&vec![p_row; 2]).unwrap();
        let pv2 = tape.constant(p2);
        let tv2 = tape.constant(t_orth);
        let l2 = pivot_loss(&mut tape, pv2, tv2, 0.05, false).unwrap();
        assert!((tape.scalar_value(l2) - (2.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn pivot_loss_prefers_matched_pairs() {
        let mut rng = Rng::new(60);
        let b = 6;
        let mut t = Tensor::randn(vec![b, 16], 1.0, &mut rng);
        norm_rows(&mut t);
        let mut p = t.clone();
        for v in p.data_mut().iter_mut() {
            *v += 0.2 * rng.normal();
        }
        norm_rows(&mut p);
        let mut tape = Tape::new();
        let tv = tape.constant(t.clone());
        let pv = tape.constant(p.clone());
        let matched = pivot_loss(&mut tape, pv, tv, 0.05, false).unwrap();
        // shuffle text rows
        let mut rows: Vec<Vec<f64>> = (0..b).map(|i| t.row(i).to_vec()).collect();
        rows.rotate_left(1);
        let ts = tape.constant(Tensor::from_rows(&rows).unwrap());
        let shuffled = pivot_loss(&mut tape, pv, ts, 0.05, false).unwrap();
        assert!(tape.scalar_value(matched) < tape.scalar_value(shuffled));
    }

    #[test]
    fn totals_combine_with_weights() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(1.0));
        let l = tape.constant(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let multi = total_multi(&mut tape, p, l, c, &cfg);
        assert!((tape.scalar_value(multi) - 5.0).abs() < 1e-12);
        // all alphas zero -> prior only
        let zero = LossConfig {
            alpha_lowlevel: 0.0,
            alpha_contrastive: 0.0,
            alpha_skip: 0.0,
            alpha_pivot: 0.0,
            ..LossConfig::default()
        };
        let m0 = total_multi(&mut tape, p, l, c, &zero);
        assert_eq!(tape.scalar_value(m0), 1.0);
        let s = tape.constant(Tensor::scalar(0.4));
        let pv = tape.constant(Tensor::scalar(0.6));
        let new = total_new(&mut tape, multi, Some(s), Some(pv), &cfg);
        assert!((tape.scalar_value(new) - (5.0 + 1.5 * 0.4 + 0.5 * 0.6)).abs() < 1e-12);
        let new_none = total_new(&mut tape, multi, None, None, &cfg);
        assert_eq!(tape.scalar_value(new_none), tape.scalar_value(multi));
    }

    #[test]
    fn loss_config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = LossConfig::default();
        cfg2.alpha_skip = -1.0;
        assert!(cfg2.validate().is_err());
    }
}
