//! Shared MLP backbone with residual blocks and tokenization, the retrieval /
//! low-level / prior heads, and the adaptive projector.
//!
//! Layer outputs are exposed per layer so the fine-tuning loss can compare
//! the linear path against the Skip-LoRA path.

use crate::adapters::BoundAdapters;
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const NUM_BLOCKS: usize = 4;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Site names for the skip connections.
pub fn skip_site_input() -> String {
    "skip.input".into()
}
pub fn skip_site_block(h: usize) -> String {
    format!("skip.block{h}")
}
pub fn skip_site_token() -> String {
    "skip.token".into()
}
/// Site name for the LoRA on a new subject's ridge head.
pub fn ridge_site() -> String {
    "ridge".into()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelDims {
    /// shared latent width (ridge head output)
    pub d_0: usize,
    /// residual block width
    pub hidden: usize,
    /// token count T
    pub n_tokens: usize,
    /// per-token dimension D
    pub token_dim: usize,
    /// text embedding dimension
    pub text_dim: usize,
    /// flattened low-level latent size
    pub lowlevel_dim: usize,
    /// retrieval embedding dimension
    pub retrieval_dim: usize,
    /// prior head hidden width
    pub prior_hidden: usize,
}

impl ModelDims {
    pub fn token_flat(&self) -> usize {
        self.n_tokens * self.token_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_0", self.d_0),
            ("hidden", self.hidden),
            ("n_tokens", self.n_tokens),
            ("token_dim", self.token_dim),
            ("text_dim", self.text_dim),
            ("lowlevel_dim", self.lowlevel_dim),
            ("retrieval_dim", self.retrieval_dim),
            ("prior_hidden", self.prior_hidden),
        ] {
            if v == 0 {
                return Err(CoreError::InvalidConfig(format!("model dim {name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// One linear layer with weight [d_out, d_in] and bias [d_out].
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    fn new(d_out: usize, d_in: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Dense {
            w: Tensor::randn(vec![d_out, d_in], std, rng),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[0]
    }
}

/// LayerNorm -> linear -> GELU -> linear, residual add.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl ResBlock {
    fn new(width: usize, rng: &mut Rng) -> Self {
        ResBlock {
            ln_gamma: Tensor::new(vec![width], vec![1.0; width]).unwrap(),
            ln_beta: Tensor::zeros(vec![width]),
            fc1: Dense::new(width, width, rng),
            fc2: Dense::new(width, width, rng),
        }
    }
}

/// Everything shared across subjects: backbone, heads. The adaptive
/// projector is kept separate because fine-tuning trains its own copy.
#[derive(Debug, Clone)]
pub struct BackboneNet {
    pub dims: ModelDims,
    pub input: Dense,
    pub blocks: Vec<ResBlock>,
    pub token: Dense,
    pub retrieval: Dense,
    pub low_up: Dense,
    pub low_fc1: Dense,
    pub low_fc2: Dense,
    pub prior_fc1: Dense,
    pub prior_fc2: Dense,
}

/// Mean-pool over tokens followed by a linear projection into text space.
#[derive(Debug, Clone)]
pub struct Projector {
    /// [text_dim, token_dim]
    pub p: Tensor,
}

impl Projector {
    pub fn new(dims: &ModelDims, rng: &mut Rng) -> Self {
        let std = 1.0 / (dims.token_dim as f64).sqrt();
        Projector {
            p: Tensor::randn(vec![dims.text_dim, dims.token_dim], std, rng),
        }
    }
}

/// Name -> bound var map for one forward pass.
#[derive(Default)]
pub struct Binding {
    map: BTreeMap<String, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.map.insert(name.into(), var);
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }
}

impl BackboneNet {
    pub fn new(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let tf = dims.token_flat();
        Ok(BackboneNet {
            dims,
            input: Dense::new(dims.hidden, dims.d_0, rng),
            blocks: (0..NUM_BLOCKS).map(|_| ResBlock::new(dims.hidden, rng)).collect(),
            token: Dense::new(tf, dims.hidden, rng),
            retrieval: Dense::new(dims.retrieval_dim, dims.token_dim, rng),
            low_up: Dense::new(dims.lowlevel_dim, tf, rng),
            low_fc1: Dense::new(dims.lowlevel_dim, dims.lowlevel_dim, rng),
            low_fc2: Dense::new(dims.lowlevel_dim, dims.lowlevel_dim, rng),
            prior_fc1: Dense::new(dims.prior_hidden, tf, rng),
            prior_fc2: Dense::new(tf, dims.prior_hidden, rng),
        })
    }

    fn dense_list(&self) -> Vec<(String, &Dense)> {
        let mut v: Vec<(String, &Dense)> = vec![("backbone.input".into(), &self.input)];
        for (h, b) in self.blocks.iter().enumerate() {
            v.push((format!("backbone.block{h}.fc1"), &b.fc1));
            v.push((format!("backbone.block{h}.fc2"), &b.fc2));
        }
        v.push(("backbone.token".into(), &self.token));
        v.push(("heads.retrieval".into(), &self.retrieval));
        v.push(("heads.low.up".into(), &self.low_up));
        v.push(("heads.low.fc1".into(), &self.low_fc1));
        v.push(("heads.low.fc2".into(), &self.low_fc2));
        v.push(("heads.prior.fc1".into(), &self.prior_fc1));
        v.push(("heads.prior.fc2".into(), &self.prior_fc2));
        v
    }

    /// (site, d_in, d_out) for every linear layer that accepts a LoRA.
    pub fn lora_sites(&self) -> Vec<(String, usize, usize)> {
        self.dense_list()
            .into_iter()
            .map(|(name, d)| (name, d.d_in(), d.d_out()))
            .collect()
    }

    /// (site, d_out) for every skip connection target.
    pub fn skip_sites(&self) -> Vec<(String, usize)> {
        let mut v = vec![(skip_site_input(), self.dims.hidden)];
        for h in 0..NUM_BLOCKS {
            v.push((skip_site_block(h), self.dims.hidden));
        }
        v.push((skip_site_token(), self.dims.token_flat()));
        v
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, d) in self.dense_list() {
            out.push((format!("{name}.w"), &d.w));
            out.push((format!("{name}.b"), &d.b));
        }
        for (h, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block{h}.ln.gamma"), &b.ln_gamma));
            out.push((format!("backbone.block{h}.ln.beta"), &b.ln_beta));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("backbone.input.w".into(), &mut self.input.w));
        out.push(("backbone.input.b".into(), &mut self.input.b));
        for (h, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("backbone.block{h}.fc1.w"), &mut b.fc1.w));
            out.push((format!("backbone.block{h}.fc1.b"), &mut b.fc1.b));
            out.push((format!("backbone.block{h}.fc2.w"), &mut b.fc2.w));
            out.push((format!("backbone.block{h}.fc2.b"), &mut b.fc2.b));
            out.push((format!("backbone.block{h}.ln.gamma"), &mut b.ln_gamma));
            out.push((format!("backbone.block{h}.ln.beta"), &mut b.ln_beta));
        }
        out.push(("backbone.token.w".into(), &mut self.token.w));
        out.push(("backbone.token.b".into(), &mut self.token.b));
        out.push(("heads.retrieval.w".into(), &mut self.retrieval.w));
        out.push(("heads.retrieval.b".into(), &mut self.retrieval.b));
        out.push(("heads.low.up.w".into(), &mut self.low_up.w));
        out.push(("heads.low.up.b".into(), &mut self.low_up.b));
        out.push(("heads.low.fc1.w".into(), &mut self.low_fc1.w));
        out.push(("heads.low.fc1.b".into(), &mut self.low_fc1.b));
        out.push(("heads.low.fc2.w".into(), &mut self.low_fc2.w));
        out.push(("heads.low.fc2.b".into(), &mut self.low_fc2.b));
        out.push(("heads.prior.fc1.w".into(), &mut self.prior_fc1.w));
        out.push(("heads.prior.fc1.b".into(), &mut self.prior_fc1.b));
        out.push(("heads.prior.fc2.w".into(), &mut self.prior_fc2.w));
        out.push(("heads.prior.fc2.b".into(), &mut self.prior_fc2.b));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let mut map = BTreeMap::new();
        for (name, t) in self.named_params() {
            let var = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            map.insert(name, var);
        }
        Binding { map }
    }

    fn dense_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        site: &str,
        x: Var,
        adapters: Option<&BoundAdapters>,
    ) -> Var {
        let w = bind.var(&format!("{site}.w"));
        let b = bind.var(&format!("{site}.b"));
        let y = tape.linear(x, w, b);
        match adapters {
            Some(ad) => ad.apply_lora(tape, site, x, y),
            None => y,
        }
    }

    /// Run the backbone. With adapters present, each layer output is
    /// linear-path + skip-path and both parts are exposed for the skip loss.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        m: Var,
        adapters: Option<&BoundAdapters>,
        raw_voxels: Option<Var>,
    ) -> Result<BackboneActs> {
        if tape.value(m).cols() != self.dims.d_0 {
            return Err(CoreError::shape(format!(
                "backbone expects d_0 = {}, got {}",
                self.dims.d_0,
                tape.value(m).cols()
            )));
        }
        if adapters.is_some() && raw_voxels.is_none() {
            return Err(CoreError::arg(
                "adapter forward needs raw voxels for the skip connections",
            ));
        }

        let mut layer_linear = Vec::new();
        let mut layer_skip: Vec<Option<Var>> = Vec::new();
        let mut add_skip = |tape: &mut Tape, site: String, linear: Var| -> Var {
            let skip = adapters
                .and_then(|ad| raw_voxels.map(|v| (ad, v)))
                .and_then(|(ad, v)| ad.skip_output(tape, &site, v));
            layer_linear.push(linear);
            layer_skip.push(skip);
            match skip {
                Some(s) => tape.add(linear, s),
                None => linear,
            }
        };

        let lin0 = self.dense_forward(tape, bind, "backbone.input", m, adapters);
        let mut cur = add_skip(tape, skip_site_input(), lin0);

        for h in 0..NUM_BLOCKS {
            let gamma = bind.var(&format!("backbone.block{h}.ln.gamma"));
            let beta = bind.var(&format!("backbone.block{h}.ln.beta"));
            let normed = tape.layer_norm(cur, gamma, beta, LN_EPS);
            let h1 = self.dense_forward(tape, bind, &format!("backbone.block{h}.fc1"), normed, adapters);
            let a1 = tape.gelu(h1);
            let h2 = self.dense_forward(tape, bind, &format!("backbone.block{h}.fc2"), a1, adapters);
            let lin = tape.add(cur, h2);
            cur = add_skip(tape, skip_site_block(h), lin);
        }

        let tok_lin = self.dense_forward(tape, bind, "backbone.token", cur, adapters);
        let tokens = add_skip(tape, skip_site_token(), tok_lin);

        Ok(BackboneActs {
            layer_linear,
            layer_skip,
            tokens,
        })
    }

    /// Retrieval, low-level, and prior head outputs from tokens.
    pub fn heads_forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        tokens: Var,
        adapters: Option<&BoundAdapters>,
    ) -> Result<HeadsOut> {
        let tf = self.dims.token_flat();
        if tape.value(tokens).cols() != tf {
            return Err(CoreError::shape(format!(
                "heads expect {} token values, got {}",
                tf,
                tape.value(tokens).cols()
            )));
        }
        let pooled = tape.mean_tokens(tokens, self.dims.n_tokens, self.dims.token_dim);
        let e_raw = self.dense_forward(tape, bind, "heads.retrieval", pooled, adapters);
        let retrieval = tape.normalize_rows(e_raw, NORM_EPS);

        let up = self.dense_forward(tape, bind, "heads.low.up", tokens, adapters);
        let r1 = self.dense_forward(tape, bind, "heads.low.fc1", up, adapters);
        let a1 = tape.gelu(r1);
        let r2 = self.dense_forward(tape, bind, "heads.low.fc2", a1, adapters);
        let lowlevel = tape.add(up, r2);

        let p1 = self.dense_forward(tape, bind, "heads.prior.fc1", tokens, adapters);
        let pa = tape.gelu(p1);
        let prior = self.dense_forward(tape, bind, "heads.prior.fc2", pa, adapters);

        Ok(HeadsOut {
            retrieval,
            lowlevel,
            prior,
        })
    }
}

/// Per-layer activations and final tokens from a backbone pass.
pub struct BackboneActs {
    /// linear-path output per layer (input, blocks, token layer)
    pub layer_linear: Vec<Var>,
    /// skip-path output per layer, None when no adapter is injected
    pub layer_skip: Vec<Option<Var>>,
    /// final tokens [B, T*D]
    pub tokens: Var,
}

pub struct HeadsOut {
    /// L2-normalized retrieval embedding [B, retrieval_dim]
    pub retrieval: Var,
    /// low-level latent [B, lowlevel_dim]
    pub lowlevel: Var,
    /// predicted token grid [B, T*D]
    pub prior: Var,
}

/// p = projection(mean over tokens); no nonlinearity.
pub fn project_pivot(
    tape: &mut Tape,
    dims: &ModelDims,
    projector: Var,
    g_tokens: Var,
) -> Result<Var> {
    if tape.value(g_tokens).cols() != dims.token_flat() {
        return Err(CoreError::shape(format!(
            "project_pivot: token width {} vs {}",
            tape.value(g_tokens).cols(),
            dims.token_flat()
        )));
    }
    if tape.value(projector).shape() != [dims.text_dim, dims.token_dim] {
        return Err(CoreError::shape(format!(
            "project_pivot: projector shape {:?} vs [{}, {}]",
            tape.value(projector).shape(),
            dims.text_dim,
            dims.token_dim
        )));
    }
    let pooled = tape.mean_tokens(g_tokens, dims.n_tokens, dims.token_dim);
    Ok(tape.matmul_nt(pooled, projector))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterKind, AdapterSet, InjectionPlan, PlanEntry, SkipActivation};

    pub(crate) fn tiny_dims() -> ModelDims {
        ModelDims {
            d_0: 8,
            hidden: 16,
            n_tokens: 4,
            token_dim: 8,
            text_dim: 6,
            lowlevel_dim: 8,
            retrieval_dim: 8,
            prior_hidden: 12,
        }
    }

    pub(crate) fn full_plan(net: &BackboneNet, with_ridge: bool, d_s: usize) -> InjectionPlan {
        let mut entries = Vec::new();
        if with_ridge {
            entries.push(PlanEntry {
                site: ridge_site(),
                kind: AdapterKind::Lora,
                d_in: d_s,
                d_out: net.dims.d_0,
                skip_loss_excluded: false,
            });
        }
        for (site, d_in, d_out) in net.lora_sites() {
            entries.push(PlanEntry {
                site,
                kind: AdapterKind::Lora,
                d_in,
                d_out,
                skip_loss_excluded: false,
            });
        }
        for (site, d_out) in net.skip_sites() {
            let excluded = site == skip_site_token();
            entries.push(PlanEntry {
                site,
                kind: AdapterKind::SkipLora,
                d_in: d_s,
                d_out,
                skip_loss_excluded: excluded,
            });
        }
        InjectionPlan { entries }
    }

    #[test]
    fn shapes_flow_end_to_end() {
        let mut rng = Rng::new(41);
        let dims = tiny_dims();
        let net = BackboneNet::new(dims, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = net.bind(&mut tape, false);
        let m = tape.constant(Tensor::randn(vec![3, dims.d_0], 1.0, &mut rng));
        let acts = net.forward(&mut tape, &bind, m, None, None).unwrap();
        assert_eq!(tape.value(acts.tokens).shape(), &[3, dims.token_flat()]);
        let heads = net.heads_forward(&mut tape, &bind, acts.tokens, None).unwrap();
        assert_eq!(tape.value(heads.retrieval).shape(), &[3, dims.retrieval_dim]);
        assert_eq!(tape.value(heads.lowlevel).shape(), &[3, dims.lowlevel_dim]);
        assert_eq!(tape.value(heads.prior).shape(), &[3, dims.token_flat()]);
        // retrieval rows are unit-normalized
        for i in 0..3 {
            let n: f64 = tape
                .value(heads.retrieval)
                .row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row norm {n}");
        }
    }

    #[test]
    fn zero_input_with_zero_biases_yields_token_bias() {
        let mut rng = Rng::new(42);
        let dims = tiny_dims();
        let mut net = BackboneNet::new(dims, &mut rng).unwrap();
        // Zero every bias except the token layer's, which gets a pattern.
        for (name, t) in net.named_params_mut() {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            if name == "backbone.block0.ln.beta" {
                // already zero
            }
        }
        let pattern: Vec<f64> = (0..dims.token_flat()).map(|i| i as f64 * 0.1 - 1.0).collect();
        net.token.b = Tensor::new(vec![dims.token_flat()], pattern.clone()).unwrap();

        let mut tape = Tape::new();
        let bind = net.bind(&mut tape, false);
        let m = tape.constant(Tensor::zeros(vec![1, dims.d_0]));
        let acts = net.forward(&mut tape, &bind, m, None, None).unwrap();
        for (got, want) in tape.value(acts.tokens).data().iter().zip(&pattern) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(43);
        let dims = tiny_dims();
        let net = BackboneNet::new(dims, &mut rng).unwrap();
        let m = Tensor::randn(vec![2, dims.d_0], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let bind = net.bind(&mut tape, false);
            let mv = tape.constant(m.clone());
            let acts = net.forward(&mut tape, &bind, mv, None, None).unwrap();
            tape.value(acts.tokens).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fresh_adapters_change_nothing() {
        let mut rng = Rng::new(44);
        let dims = tiny_dims();
        let net = BackboneNet::new(dims, &mut rng).unwrap();
        let d_s = 20;
        let plan = full_plan(&net, false, d_s);
        let adapters =
            AdapterSet::inject(0, d_s, &plan, 2, 8.0, SkipActivation::Tanh, &mut rng).unwrap();

        let m = Tensor::randn(vec![3, dims.d_0], 1.0, &mut rng);
        let v = Tensor::randn(vec![3, d_s], 1.0, &mut rng);

        let plain = {
            let mut tape = Tape::new();
            let bind = net.bind(&mut tape, false);
            let mv = tape.constant(m.clone());
            let acts = net.forward(&mut tape, &bind, mv, None, None).unwrap();
            let heads = net.heads_forward(&mut tape, &bind, acts.tokens, None).unwrap();
            (
                tape.value(acts.tokens).data().to_vec(),
                tape.value(heads.retrieval).data().to_vec(),
                tape.value(heads.lowlevel).data().to_vec(),
                tape.value(heads.prior).data().to_vec(),
            )
        };
        let adapted = {
            let mut tape = Tape::new();
            let bind = net.bind(&mut tape, false);
            let mv = tape.constant(m.clone());
            let vv = tape.constant(v.clone());
            let ba = adapters.bind(&mut tape, false);
            let acts = net.forward(&mut tape, &bind, mv, Some(&ba), Some(vv)).unwrap();
            let heads = net
                .heads_forward(&mut tape, &bind, acts.tokens, Some(&ba))
                .unwrap();
            (
                tape.value(acts.tokens).data().to_vec(),
                tape.value(heads.retrieval).data().to_vec(),
                tape.value(heads.lowlevel).data().to_vec(),
                tape.value(heads.prior).data().to_vec(),
            )
        };
        assert_eq!(plain.0, adapted.0, "tokens must match elementwise");
        assert_eq!(plain.1, adapted.1);
        assert_eq!(plain.2, adapted.2);
        assert_eq!(plain.3, adapted.3);
    }

    #[test]
    fn adapter_forward_requires_voxels() {
        let mut rng = Rng::new(45);
        let dims = tiny_dims();
        let net = BackboneNet::new(dims, &mut rng).unwrap();
        let plan = full_plan(&net, false, 20);
        let adapters =
            AdapterSet::inject(0, 20, &plan, 2, 8.0, SkipActivation::Tanh, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = net.bind(&mut tape, false);
        let m = tape.constant(Tensor::zeros(vec![1, dims.d_0]));
        let ba = adapters.bind(&mut tape, false);
        assert!(net.forward(&mut tape, &bind, m, Some(&ba), None).is_err());
    }

    #[test]
    fn pivot_projection_properties() {
        let mut rng = Rng::new(46);
        let dims = tiny_dims();
        let proj = Projector::new(&dims, &mut rng);
        let run = |tokens: &Tensor| {
            let mut tape = Tape::new();
            let pv = tape.constant(proj.p.clone());
            let tv = tape.constant(tokens.clone());
            let p = project_pivot(&mut tape, &dims, pv, tv).unwrap();
            tape.value(p).data().to_vec()
        };
        // all tokens equal v -> p = proj(v)
        let v: Vec<f64> = (0..dims.token_dim).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut rep = Vec::new();
        for _ in 0..dims.n_tokens {
            rep.extend_from_slice(&v);
        }
        let tokens = Tensor::new(vec![1, dims.token_flat()], rep).unwrap();
        let p = run(&tokens);
        for j in 0..dims.text_dim {
            let want: f64 = (0..dims.token_dim)
                .map(|k| proj.p.data()[j * dims.token_dim + k] * v[k])
                .sum();
            assert!((p[j] - want).abs() < 1e-12);
        }
        // zero tokens -> zero
        let z = run(&Tensor::zeros(vec![1, dims.token_flat()]));
        assert!(z.iter().all(|&x| x == 0.0));
        // permuting token order leaves p unchanged
        let mut rng2 = Rng::new(47);
        let grid = Tensor::randn(vec![1, dims.token_flat()], 1.0, &mut rng2);
        let base = run(&grid);
        let perm = rng2.permutation(dims.n_tokens);
        let mut permuted = vec![0.0; dims.token_flat()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * dims.token_dim..(dst + 1) * dims.token_dim]
                .copy_from_slice(&grid.data()[src * dims.token_dim..(src + 1) * dims.token_dim]);
        }
        let p2 = run(&Tensor::new(vec![1, dims.token_flat()], permuted).unwrap());
        for (a, b) in base.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
