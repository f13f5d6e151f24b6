//! Central-difference gradient verification.
//!
//! The finite-difference side never touches the tape's backward pass: it
//! re-evaluates the loss with perturbed constants, so the two routes stay
//! independent.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// entry index where the worst error occurred
    pub worst_entry: usize,
    /// analytic and central-difference values at that entry
    pub worst_analytic: f64,
    pub worst_fd: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

/// Compare tape gradients of `build` against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every entry of every parameter.
///
/// `build` must be deterministic: any sampled quantities (mix factors,
/// permutations) have to be fixed before calling.
pub fn grad_check(
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    params: &[(String, Tensor)],
    eps: f64,
) -> Result<GradCheckReport> {
    if params.is_empty() {
        return Err(CoreError::arg("grad_check: empty parameter list"));
    }
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(CoreError::arg(format!("grad_check: eps {eps} outside (0, 1e-2]")));
    }

    // Tape route.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, p)| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    if !tape.scalar_value(loss).is_finite() {
        return Err(CoreError::NonFinite("grad_check: loss at the base point".into()));
    }
    let grads = tape.backward(loss)?;

    // Finite-difference route.
    let eval = |pi: usize, entry: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, (_, p))| {
                let mut t = p.clone();
                if i == pi {
                    t.data_mut()[entry] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let l = build(&mut tape, &vars);
        let v = tape.scalar_value(l);
        if !v.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "grad_check: loss while perturbing parameter '{}' entry {}",
                params[pi].0, entry
            )));
        }
        Ok(v)
    };

    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, p)) in params.iter().enumerate() {
        let tape_grad = grads.get(vars[pi], p.shape());
        let mut fds = Vec::with_capacity(p.len());
        let mut scale = 1.0_f64;
        for e in 0..p.len() {
            let fd = (eval(pi, e, eps)? - eval(pi, e, -eps)?) / (2.0 * eps);
            scale = scale.max(fd.abs()).max(tape_grad.data()[e].abs());
            fds.push(fd);
        }
        // Near-zero entries are compared in scaled absolute terms: a central
        // difference cannot resolve relative error once the loss change falls
        // under the f64 noise floor of the loss evaluation itself.
        let floor = 1e-3 * scale;
        let mut worst = 0.0_f64;
        let mut worst_entry = 0;
        for (e, fd) in fds.iter().enumerate() {
            let an = tape_grad.data()[e];
            let denom = an.abs().max(fd.abs()).max(floor);
            let rel = ((an - fd) / denom).abs();
            if rel > worst {
                worst = rel;
                worst_entry = e;
            }
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            worst_entry,
            worst_analytic: tape_grad.data()[worst_entry],
            worst_fd: fds[worst_entry],
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
    })
}
