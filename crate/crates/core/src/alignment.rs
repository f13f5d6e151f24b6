//! Subject-specific ridge heads mapping raw voxels into the shared latent
//! space, plus a closed-form solver used as oracle and warmstart.
//!
//! Heads are trained end-to-end by gradient descent with the rest of the
//! network; the ridge character is an L2 penalty on the head weights. The
//! closed-form path solves the normal equations directly.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{gemm_tn, Tensor};
use serde::{Deserialize, Serialize};

/// Optional non-linearity appended to a ridge head (the overfitting-prone
/// variant studied in the ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadActivation {
    None,
    Tanh,
}

/// Linear map from one subject's voxel space (d_s) to the shared latent (d_0).
#[derive(Debug, Clone)]
pub struct RidgeHead {
    pub subject_id: usize,
    /// weight: [d_0, d_s]
    pub weight: Tensor,
    /// bias: [d_0]
    pub bias: Tensor,
    pub l2_penalty: f64,
    pub activation: HeadActivation,
}

/// Bound tape handles for a head's parameters.
#[derive(Debug, Clone, Copy)]
pub struct RidgeHeadVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    Zero,
    Random,
    ClosedFormWarmstart,
}

impl HeadInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(HeadInit::Zero),
            "random" => Ok(HeadInit::Random),
            "closed_form_warmstart" => Ok(HeadInit::ClosedFormWarmstart),
            other => Err(CoreError::arg(format!("unknown head init strategy '{other}'"))),
        }
    }
}

/// Data needed by the warmstart strategy: the new subject's voxels paired
/// with ground-truth stimulus latents, plus a latent->shared bridge fitted on
/// the pretraining subjects.
pub struct WarmstartContext<'a> {
    /// [n, d_s] voxels of the new subject's training trials
    pub voxels: &'a Tensor,
    /// [n, latent_dim] matching stimulus latents
    pub latents: &'a Tensor,
    /// [latent_dim, d_0] map from stimulus latents into the shared space
    pub bridge: &'a Tensor,
    pub ridge_lambda: f64,
}

impl RidgeHead {
    pub fn new(subject_id: usize, d_s: usize, d_0: usize, l2_penalty: f64) -> Self {
        RidgeHead {
            subject_id,
            weight: Tensor::zeros(vec![d_0, d_s]),
            bias: Tensor::zeros(vec![d_0]),
            l2_penalty,
            activation: HeadActivation::None,
        }
    }

    pub fn d_s(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_0(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RidgeHeadVars {
        if trainable {
            RidgeHeadVars {
                weight: tape.param(self.weight.clone()),
                bias: tape.param(self.bias.clone()),
            }
        } else {
            RidgeHeadVars {
                weight: tape.constant(self.weight.clone()),
                bias: tape.constant(self.bias.clone()),
            }
        }
    }

    /// M = W·V + b for a batch of voxel rows, on the tape. The optional LoRA
    /// delta is added by the caller (see `adapters`).
    pub fn forward(&self, tape: &mut Tape, vars: RidgeHeadVars, v: Var) -> Result<Var> {
        let got = tape.value(v).cols();
        if got != self.d_s() {
            return Err(CoreError::shape(format!(
                "ridge head subject {}: expected {} voxels, got {}",
                self.subject_id,
                self.d_s(),
                got
            )));
        }
        let m = tape.linear(v, vars.weight, vars.bias);
        Ok(match self.activation {
            HeadActivation::None => m,
            HeadActivation::Tanh => tape.tanh(m),
        })
    }

    /// Plain (non-tape) forward for evaluation.
    pub fn forward_eval(&self, v: &Tensor) -> Result<Tensor> {
        if v.cols() != self.d_s() {
            return Err(CoreError::shape(format!(
                "ridge head subject {}: expected {} voxels, got {}",
                self.subject_id,
                self.d_s(),
                v.cols()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let vv = tape.constant(v.clone());
        let out = self.forward(&mut tape, vars, vv)?;
        Ok(tape.value(out).clone())
    }

    /// L2 penalty term on the weights, on the tape.
    pub fn penalty(&self, tape: &mut Tape, vars: RidgeHeadVars) -> Var {
        let sq = tape.mul(vars.weight, vars.weight);
        let ss = tape.sum_all(sq);
        tape.mul_scalar(ss, self.l2_penalty)
    }
}

/// Construct a head for a new subject.
pub fn init_new_subject_head(
    subject_id: usize,
    d_s_new: usize,
    d_0: usize,
    l2_penalty: f64,
    strategy: HeadInit,
    rng: &mut Rng,
    warmstart: Option<WarmstartContext<'_>>,
) -> Result<RidgeHead> {
    if d_s_new == 0 || d_0 == 0 {
        return Err(CoreError::arg("head dimensions must be positive"));
    }
    let mut head = RidgeHead::new(subject_id, d_s_new, d_0, l2_penalty);
    match strategy {
        HeadInit::Zero => {}
        HeadInit::Random => {
            let std = 1.0 / (d_s_new as f64).sqrt();
            head.weight = Tensor::randn(vec![d_0, d_s_new], std, rng);
        }
        HeadInit::ClosedFormWarmstart => {
            let ctx = warmstart.ok_or_else(|| {
                CoreError::arg("closed_form_warmstart requires a warmstart context")
            })?;
            // V -> u, then lift u into the shared space through the bridge.
            let w_vu = closed_form_ridge(ctx.voxels, ctx.latents, ctx.ridge_lambda)?;
            // weight = (W_vu · bridge)ᵀ : [d_0, d_s]
            let latent = w_vu.shape()[1];
            if ctx.bridge.shape()[0] != latent || ctx.bridge.shape()[1] != d_0 {
                return Err(CoreError::shape(format!(
                    "warmstart bridge shape {:?}, expected [{latent}, {d_0}]",
                    ctx.bridge.shape()
                )));
            }
            let mut composed = vec![0.0; d_s_new * d_0];
            crate::tensor::gemm_nn(
                d_s_new,
                latent,
                d_0,
                w_vu.data(),
                ctx.bridge.data(),
                &mut composed,
            );
            // transpose [d_s, d_0] -> [d_0, d_s]
            let mut wt = vec![0.0; d_0 * d_s_new];
            for i in 0..d_s_new {
                for j in 0..d_0 {
                    wt[j * d_s_new + i] = composed[i * d_0 + j];
                }
            }
            head.weight = Tensor::new(vec![d_0, d_s_new], wt)?;
        }
    }
    Ok(head)
}

/// Solve (XᵀX + λI) W = XᵀY for W [p, q], X [n, p], Y [n, q].
pub fn closed_form_ridge(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(CoreError::arg("ridge lambda must be > 0"));
    }
    let (n, p) = (x.rows(), x.cols());
    let (n2, q) = (y.rows(), y.cols());
    if n != n2 || n == 0 {
        return Err(CoreError::shape(format!(
            "ridge design {n} rows vs targets {n2} rows"
        )));
    }
    x.ensure_finite("ridge design matrix")?;
    y.ensure_finite("ridge target matrix")?;

    // Gram matrix with the penalty on the diagonal.
    let mut gram = vec![0.0; p * p];
    gemm_tn(p, n, p, x.data(), x.data(), &mut gram, false);
    for i in 0..p {
        gram[i * p + i] += lambda;
    }
    let mut xty = vec![0.0; p * q];
    gemm_tn(p, n, q, x.data(), y.data(), &mut xty, false);

    let chol = cholesky(&gram, p)?;
    let mut w = vec![0.0; p * q];
    // Solve column by column: L Lᵀ w_col = rhs_col.
    let mut rhs = vec![0.0; p];
    for col in 0..q {
        for i in 0..p {
            rhs[i] = xty[i * q + col];
        }
        let sol = chol_solve(&chol, p, &rhs);
        for i in 0..p {
            w[i * q + col] = sol[i];
        }
    }
    let w = Tensor::new(vec![p, q], w)?;
    w.ensure_finite("ridge solution")?;
    Ok(w)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &[f64], p: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(CoreError::arg(format!(
                        "matrix not positive definite at pivot {i} ({s:.3e})"
                    )));
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    // forward: L z = b
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    // backward: Lᵀ x = z
    let mut xs = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k * p + i] * xs[k];
        }
        xs[i] = s / l[i * p + i];
    }
    xs
}

/// Relative residual of the normal equations, ‖(XᵀX+λI)W − XᵀY‖ / ‖XᵀY‖.
pub fn ridge_residual(x: &Tensor, y: &Tensor, w: &Tensor, lambda: f64) -> f64 {
    let (n, p) = (x.rows(), x.cols());
    let q = y.cols();
    let mut gram = vec![0.0; p * p];
    gemm_tn(p, n, p, x.data(), x.data(), &mut gram, false);
    for i in 0..p {
        gram[i * p + i] += lambda;
    }
    let mut xty = vec![0.0; p * q];
    gemm_tn(p, n, q, x.data(), y.data(), &mut xty, false);
    let mut lhs = vec![0.0; p * q];
    crate::tensor::gemm_nn(p, p, q, &gram, w.data(), &mut lhs);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p * q {
        let d = lhs[i] - xty[i];
        num += d * d;
        den += xty[i] * xty[i];
    }
    (num / den.max(1e-300)).sqrt()
}

/// Ridge objective ‖XW − Y‖² + λ‖W‖² (sum convention, matching the solver).
pub fn ridge_objective(x: &Tensor, y: &Tensor, w: &Tensor, lambda: f64) -> f64 {
    let (n, p) = (x.rows(), x.cols());
    let q = y.cols();
    let mut pred = vec![0.0; n * q];
    crate::tensor::gemm_nn(n, p, q, x.data(), w.data(), &mut pred);
    let resid: f64 = pred
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let pen: f64 = w.data().iter().map(|v| v * v).sum();
    resid + lambda * pen
}
