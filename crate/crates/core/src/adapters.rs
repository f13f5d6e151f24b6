//! LoRA and Skip-LoRA blocks, the injection plan over the backbone, and
//! merge utilities.
//!
//! A LoRA block adds scale·B·A·x to a frozen linear layer. A Skip-LoRA feeds
//! raw voxels through tanh(B·A·V) straight into a backbone layer's output,
//! carrying the non-linear part of a subject's response that no linear head
//! can express. A is always zero-initialized so fresh adapters are exact
//! no-ops.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{gemm_nn, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipActivation {
    Tanh,
    Identity,
}

impl SkipActivation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(SkipActivation::Tanh),
            "identity" => Ok(SkipActivation::Identity),
            other => Err(CoreError::arg(format!("unknown skip activation '{other}'"))),
        }
    }
}

/// Low-rank additive adapter: Δy = scale · B·(A·x).
#[derive(Debug, Clone)]
pub struct LoRABlock {
    /// [r, d_in], zero-initialized
    pub a: Tensor,
    /// [d_out, r], random-initialized with std 1/sqrt(r)
    pub b: Tensor,
    pub rank: usize,
    pub scale: f64,
}

impl LoRABlock {
    pub fn new(d_in: usize, d_out: usize, rank: usize, lora_alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(CoreError::arg("LoRA rank must be >= 1"));
        }
        if rank > d_in.min(d_out) / 4 {
            return Err(CoreError::arg(format!(
                "LoRA rank {rank} too large for layer {d_in}x{d_out} (need r <= min/4)"
            )));
        }
        let std = 1.0 / (rank as f64).sqrt();
        Ok(LoRABlock {
            a: Tensor::zeros(vec![rank, d_in]),
            b: Tensor::randn(vec![d_out, rank], std, rng),
            rank,
            scale: lora_alpha / rank as f64,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// The dense update scale·B·A as a [d_out, d_in] matrix.
    pub fn delta_matrix(&self) -> Tensor {
        let (r, d_in, d_out) = (self.rank, self.d_in(), self.d_out());
        let mut m = vec![0.0; d_out * d_in];
        gemm_nn(d_out, r, d_in, self.b.data(), self.a.data(), &mut m);
        let mut t = Tensor::new(vec![d_out, d_in], m).unwrap();
        t.scale_in_place(self.scale);
        t
    }

    /// Δy for a batch x [B, d_in] (plain evaluation).
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.d_in() {
            return Err(CoreError::shape(format!(
                "lora_forward: input width {} vs d_in {}",
                x.cols(),
                self.d_in()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = lora_delta(&mut tape, &vars, xv);
        Ok(tape.value(out).clone())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLora {
        let (a, b) = if trainable {
            (tape.param(self.a.clone()), tape.param(self.b.clone()))
        } else {
            (tape.constant(self.a.clone()), tape.constant(self.b.clone()))
        };
        BoundLora { a, b, scale: self.scale }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLora {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// scale·B·(A·x) on the tape for batch x [B, d_in].
pub fn lora_delta(tape: &mut Tape, lora: &BoundLora, x: Var) -> Var {
    let t1 = tape.matmul_nt(x, lora.a); // [B, r]
    let t2 = tape.matmul_nt(t1, lora.b); // [B, d_out]
    tape.mul_scalar(t2, lora.scale)
}

/// Non-linear low-rank block fed from raw voxels: activation(B·A·V).
#[derive(Debug, Clone)]
pub struct SkipLoRABlock {
    pub lora: LoRABlock,
    pub activation: SkipActivation,
}

impl SkipLoRABlock {
    pub fn new(
        d_s: usize,
        d_out: usize,
        rank: usize,
        activation: SkipActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut lora = LoRABlock::new(d_s, d_out, rank, rank as f64, rng)?;
        // The skip path applies the bare product B·A·V; no alpha/r scaling.
        lora.scale = 1.0;
        Ok(SkipLoRABlock { lora, activation })
    }

    pub fn forward_eval(&self, v: &Tensor) -> Result<Tensor> {
        if v.cols() != self.lora.d_in() {
            return Err(CoreError::shape(format!(
                "skip_lora_forward: voxel width {} vs d_s {}",
                v.cols(),
                self.lora.d_in()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let vv = tape.constant(v.clone());
        let out = skip_delta(&mut tape, &vars, vv);
        Ok(tape.value(out).clone())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundSkip {
        BoundSkip {
            lora: self.lora.bind(tape, trainable),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundSkip {
    pub lora: BoundLora,
    pub activation: SkipActivation,
}

/// activation(B·A·V) on the tape.
pub fn skip_delta(tape: &mut Tape, skip: &BoundSkip, v: Var) -> Var {
    let t1 = tape.matmul_nt(v, skip.lora.a);
    let t2 = tape.matmul_nt(t1, skip.lora.b);
    match skip.activation {
        SkipActivation::Tanh => tape.tanh(t2),
        SkipActivation::Identity => t2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    SkipLora,
}

/// One injection site: where an adapter attaches and what kind it is.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub site: String,
    pub kind: AdapterKind,
    /// d_in for LoRA sites; ignored for skip sites (raw voxel input).
    pub d_in: usize,
    pub d_out: usize,
    /// Skip sites flagged here are left out of the non-linearity loss.
    pub skip_loss_excluded: bool,
}

#[derive(Debug, Clone, Default)]
pub struct InjectionPlan {
    pub entries: Vec<PlanEntry>,
}

impl InjectionPlan {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.site) {
                return Err(CoreError::arg(format!("duplicate adapter site '{}'", e.site)));
            }
            if e.skip_loss_excluded && e.kind != AdapterKind::SkipLora {
                return Err(CoreError::arg(format!(
                    "site '{}': only skip sites carry the loss-exclusion flag",
                    e.site
                )));
            }
        }
        Ok(())
    }
}

/// All adapters for one new subject.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub subject_id: usize,
    pub rank: usize,
    pub lora: BTreeMap<String, LoRABlock>,
    pub skip: BTreeMap<String, SkipLoRABlock>,
    /// skip sites excluded from the non-linearity loss
    pub skip_loss_excluded: Vec<String>,
}

impl AdapterSet {
    /// Create fresh adapters for every site in the plan. Base weights are
    /// untouched; with A = 0 everywhere the forward pass is unchanged.
    pub fn inject(
        subject_id: usize,
        d_s: usize,
        plan: &InjectionPlan,
        rank: usize,
        lora_alpha: f64,
        activation: SkipActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        plan.validate()?;
        if rank == 0 {
            return Err(CoreError::arg("adapter rank must be >= 1"));
        }
        let mut lora = BTreeMap::new();
        let mut skip = BTreeMap::new();
        let mut excluded = Vec::new();
        for e in &plan.entries {
            // per-site derived stream keeps injection order-independent
            let mut site_rng = rng.derive(&format!("adapter/{subject_id}/{}", e.site));
            match e.kind {
                AdapterKind::Lora => {
                    lora.insert(
                        e.site.clone(),
                        LoRABlock::new(e.d_in, e.d_out, rank, lora_alpha, &mut site_rng)?,
                    );
                }
                AdapterKind::SkipLora => {
                    skip.insert(
                        e.site.clone(),
                        SkipLoRABlock::new(d_s, e.d_out, rank, activation, &mut site_rng)?,
                    );
                    if e.skip_loss_excluded {
                        excluded.push(e.site.clone());
                    }
                }
            }
        }
        Ok(AdapterSet {
            subject_id,
            rank,
            lora,
            skip,
            skip_loss_excluded: excluded,
        })
    }

    pub fn param_count(&self) -> usize {
        self.lora.values().map(|l| l.param_count()).sum::<usize>()
            + self.skip.values().map(|s| s.lora.param_count()).sum::<usize>()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapters {
        BoundAdapters {
            lora: self
                .lora
                .iter()
                .map(|(k, v)| (k.clone(), v.bind(tape, trainable)))
                .collect(),
            skip: self
                .skip
                .iter()
                .map(|(k, v)| (k.clone(), v.bind(tape, trainable)))
                .collect(),
        }
    }

    /// Deterministic (name, tensor) listing for optimizers and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (site, l) in &self.lora {
            out.push((format!("adapter/{}/{site}/a", self.subject_id), &l.a));
            out.push((format!("adapter/{}/{site}/b", self.subject_id), &l.b));
        }
        for (site, s) in &self.skip {
            out.push((format!("adapter/{}/{site}/a", self.subject_id), &s.lora.a));
            out.push((format!("adapter/{}/{site}/b", self.subject_id), &s.lora.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let sid = self.subject_id;
        let mut out = Vec::new();
        for (site, l) in self.lora.iter_mut() {
            out.push((format!("adapter/{sid}/{site}/a"), &mut l.a));
            out.push((format!("adapter/{sid}/{site}/b"), &mut l.b));
        }
        for (site, s) in self.skip.iter_mut() {
            out.push((format!("adapter/{sid}/{site}/a"), &mut s.lora.a));
            out.push((format!("adapter/{sid}/{site}/b"), &mut s.lora.b));
        }
        out
    }
}

/// Bound tape handles for a full adapter set.
pub struct BoundAdapters {
    pub lora: BTreeMap<String, BoundLora>,
    pub skip: BTreeMap<String, BoundSkip>,
}

impl BoundAdapters {
    /// Add a site's LoRA delta to y if one is injected there.
    pub fn apply_lora(&self, tape: &mut Tape, site: &str, x: Var, y: Var) -> Var {
        match self.lora.get(site) {
            Some(l) => {
                let d = lora_delta(tape, l, x);
                tape.add(y, d)
            }
            None => y,
        }
    }

    pub fn skip_output(&self, tape: &mut Tape, site: &str, v: Var) -> Option<Var> {
        self.skip.get(site).map(|s| skip_delta(tape, s, v))
    }
}

/// Merge a linear LoRA into its base weight: W' = W + scale·B·A.
pub fn merge_lora(base: &Tensor, block: &LoRABlock) -> Result<Tensor> {
    if base.shape() != [block.d_out(), block.d_in()] {
        return Err(CoreError::shape(format!(
            "merge_lora: base {:?} vs adapter [{}, {}]",
            base.shape(),
            block.d_out(),
            block.d_in()
        )));
    }
    let delta = block.delta_matrix();
    let data = base
        .data()
        .iter()
        .zip(delta.data())
        .map(|(w, d)| w + d)
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Skip-LoRA blocks are non-linear and cannot be folded into a weight matrix.
pub fn merge_skip_lora(_base: &Tensor, _block: &SkipLoRABlock) -> Result<Tensor> {
    Err(CoreError::arg(
        "skip-LoRA blocks are non-linear and cannot be merged into base weights",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_block_outputs_zero() {
        let mut rng = Rng::new(31);
        let block = LoRABlock::new(16, 12, 2, 8.0, &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 16], 1.0, &mut rng);
        let dy = block.forward_eval(&x).unwrap();
        assert!(dy.data().iter().all(|&v| v == 0.0));
        // B·A is exactly zero at construction
        assert!(block.delta_matrix().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_rank_block_can_represent_any_linear_map() {
        // with r = d_in = d_out, set B = target, A = I: Δy = target·x
        let d = 3;
        let mut rng = Rng::new(32);
        let mut block = LoRABlock {
            a: Tensor::zeros(vec![d, d]),
            b: Tensor::randn(vec![d, d], 1.0, &mut rng),
            rank: d,
            scale: 1.0,
        };
        for i in 0..d {
            block.a.data_mut()[i * d + i] = 1.0;
        }
        let target = block.b.clone();
        let x = Tensor::randn(vec![1, d], 1.0, &mut rng);
        let dy = block.forward_eval(&x).unwrap();
        for i in 0..d {
            let want: f64 = (0..d).map(|k| target.data()[i * d + k] * x.data()[k]).sum();
            assert!((dy.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_limit_enforced() {
        let mut rng = Rng::new(33);
        assert!(LoRABlock::new(16, 16, 8, 8.0, &mut rng).is_err());
        assert!(LoRABlock::new(32, 32, 8, 8.0, &mut rng).is_ok());
        assert!(LoRABlock::new(32, 32, 0, 8.0, &mut rng).is_err());
    }

    #[test]
    fn default_scale_is_one_at_rank_8() {
        let mut rng = Rng::new(34);
        let block = LoRABlock::new(64, 64, 8, 8.0, &mut rng).unwrap();
        assert_eq!(block.scale, 1.0);
    }

    #[test]
    fn skip_block_zero_init_and_bounded() {
        let mut rng = Rng::new(35);
        let skip = SkipLoRABlock::new(20, 12, 2, SkipActivation::Tanh, &mut rng).unwrap();
        let v = Tensor::randn(vec![2, 20], 5.0, &mut rng);
        let out = skip.forward_eval(&v).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0), "tanh(0) = 0 at init");
        // after giving A values, outputs stay in (-1, 1)
        let mut skip = skip;
        skip.lora.a = Tensor::randn(vec![2, 20], 2.0, &mut rng);
        let out = skip.forward_eval(&v).unwrap();
        assert!(out.data().iter().all(|&x| x.abs() <= 1.0));
    }

    #[test]
    fn trained_skip_block_is_nonlinear() {
        let mut rng = Rng::new(36);
        let mut skip = SkipLoRABlock::new(16, 8, 2, SkipActivation::Tanh, &mut rng).unwrap();
        skip.lora.a = Tensor::randn(vec![2, 16], 1.0, &mut rng);
        let v = Tensor::randn(vec![1, 16], 1.0, &mut rng);
        let v2 = Tensor::new(vec![1, 16], v.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        let f1 = skip.forward_eval(&v).unwrap();
        let f2 = skip.forward_eval(&v2).unwrap();
        let superposition_violation: f64 = f1
            .data()
            .iter()
            .zip(f2.data())
            .map(|(a, b)| (b - 2.0 * a).abs())
            .sum();
        assert!(superposition_violation > 1e-3, "expected non-linearity");
    }

    #[test]
    fn merge_matches_unmerged_forward() {
        let mut rng = Rng::new(37);
        let mut block = LoRABlock::new(16, 8, 2, 8.0, &mut rng).unwrap();
        block.a = Tensor::randn(vec![2, 16], 0.5, &mut rng);
        let base = Tensor::randn(vec![8, 16], 1.0, &mut rng);
        let merged = merge_lora(&base, &block).unwrap();
        for _ in 0..100 {
            let x = Tensor::randn(vec![1, 16], 1.0, &mut rng);
            let mut direct = vec![0.0; 8];
            gemm_nn(8, 16, 1, merged.data(), x.data(), &mut direct);
            // hand-evaluate W x + lora(x)
            let mut wx = vec![0.0; 8];
            gemm_nn(8, 16, 1, base.data(), x.data(), &mut wx);
            let lx = block.forward_eval(&x).unwrap();
            for i in 0..8 {
                assert!((direct[i] - (wx[i] + lx.data()[i])).abs() < 1e-10);
            }
        }
        // merge then subtract recovers the base
        let delta = block.delta_matrix();
        for i in 0..base.len() {
            assert!((merged.data()[i] - delta.data()[i] - base.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_zero_block_is_identity() {
        let mut rng = Rng::new(38);
        let block = LoRABlock::new(12, 8, 2, 8.0, &mut rng).unwrap();
        let base = Tensor::randn(vec![8, 12], 1.0, &mut rng);
        let merged = merge_lora(&base, &block).unwrap();
        assert_eq!(merged.data(), base.data());
    }

    #[test]
    fn skip_blocks_refuse_to_merge() {
        let mut rng = Rng::new(39);
        let skip = SkipLoRABlock::new(12, 8, 2, SkipActivation::Tanh, &mut rng).unwrap();
        let base = Tensor::zeros(vec![8, 12]);
        assert!(merge_skip_lora(&base, &skip).is_err());
    }

    #[test]
    fn duplicate_site_rejected() {
        let plan = InjectionPlan {
            entries: vec![
                PlanEntry {
                    site: "x".into(),
                    kind: AdapterKind::Lora,
                    d_in: 32,
                    d_out: 32,
                    skip_loss_excluded: false,
                },
                PlanEntry {
                    site: "x".into(),
                    kind: AdapterKind::Lora,
                    d_in: 32,
                    d_out: 32,
                    skip_loss_excluded: false,
                },
            ],
        };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn param_count_linear_in_rank() {
        let mut rng = Rng::new(40);
        let plan = InjectionPlan {
            entries: vec![
                PlanEntry {
                    site: "a".into(),
                    kind: AdapterKind::Lora,
                    d_in: 64,
                    d_out: 64,
                    skip_loss_excluded: false,
                },
                PlanEntry {
                    site: "b".into(),
                    kind: AdapterKind::SkipLora,
                    d_in: 0,
                    d_out: 64,
                    skip_loss_excluded: true,
                },
            ],
        };
        let s4 = AdapterSet::inject(0, 100, &plan, 4, 8.0, SkipActivation::Tanh, &mut rng)
            .unwrap()
            .param_count();
        let s8 = AdapterSet::inject(0, 100, &plan, 8, 8.0, SkipActivation::Tanh, &mut rng)
            .unwrap()
            .param_count();
        assert_eq!(s8, 2 * s4);
    }
}
