//! Multi-subject pretraining and new-subject fine-tuning.
//!
//! Pretraining trains per-subject ridge heads plus the shared backbone and
//! heads jointly, drawing batches per subject round-robin. Fine-tuning
//! freezes everything shared and trains the new head, the adapters, and the
//! projector. Every random draw is derived from (seed, phase, epoch, step),
//! so checkpointed runs resume bit-exactly.

use crate::adapters::{
    AdapterKind, AdapterSet, BoundAdapters, BoundLora, BoundSkip, InjectionPlan, PlanEntry,
    SkipActivation,
};
use crate::alignment::{HeadActivation, HeadInit, RidgeHead, RidgeHeadVars, WarmstartContext};
use crate::backbone::{
    ridge_site, skip_site_token, BackboneNet, Binding, Projector,
};
use crate::cohort::CohortDataset;
use crate::config::ExperimentConfig;
use crate::error::{CoreError, Result};
use crate::losses::{
    self, total_multi, total_new, LossConfig, MixPair,
};
use crate::optim::{clip_global_norm, AdamWConfig, OneCycle, OptimState};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Which contrastive loss a given epoch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveKind {
    BiMixCo,
    SoftClip,
}

/// Voxel mixing plus the hard bidirectional loss for the first phase, the
/// soft loss (no mixing) for the final `switch_frac` of epochs.
pub fn contrastive_schedule(epoch: usize, epochs: usize, switch_frac: f64) -> Result<ContrastiveKind> {
    if epoch >= epochs {
        return Err(CoreError::arg(format!("epoch {epoch} out of range [0, {epochs})")));
    }
    if !(0.0..=1.0).contains(&switch_frac) {
        return Err(CoreError::arg("switch fraction must be in [0,1]"));
    }
    let switch_epoch = ((1.0 - switch_frac) * epochs as f64).round() as usize;
    Ok(if epoch >= switch_epoch {
        ContrastiveKind::SoftClip
    } else {
        ContrastiveKind::BiMixCo
    })
}

/// Fine-tuning arm, from the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneArm {
    /// new ridge head only (the linear-alignment baseline)
    RidgeOnly,
    /// head + LoRA blocks
    LoraOnly,
    /// head + LoRA + Skip-LoRA blocks with the non-linearity loss
    LoraSkip,
    /// everything: adapters, projector, pivot loss
    Full,
    /// the overfitting probe: full model with a tanh on the ridge head
    NonLinearHead,
}

impl FinetuneArm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ridge_only" => Ok(FinetuneArm::RidgeOnly),
            "lora_only" => Ok(FinetuneArm::LoraOnly),
            "lora_skip" => Ok(FinetuneArm::LoraSkip),
            "full" => Ok(FinetuneArm::Full),
            "nonlinear_head" => Ok(FinetuneArm::NonLinearHead),
            other => Err(CoreError::arg(format!("unknown ablation arm '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FinetuneArm::RidgeOnly => "ridge_only",
            FinetuneArm::LoraOnly => "lora_only",
            FinetuneArm::LoraSkip => "lora_skip",
            FinetuneArm::Full => "full",
            FinetuneArm::NonLinearHead => "nonlinear_head",
        }
    }

    pub fn uses_lora(&self) -> bool {
        !matches!(self, FinetuneArm::RidgeOnly)
    }

    pub fn uses_skip(&self) -> bool {
        matches!(self, FinetuneArm::LoraSkip | FinetuneArm::Full | FinetuneArm::NonLinearHead)
    }

    pub fn uses_pivot(&self) -> bool {
        matches!(self, FinetuneArm::Full | FinetuneArm::NonLinearHead)
    }

    pub fn head_activation(&self) -> HeadActivation {
        if matches!(self, FinetuneArm::NonLinearHead) {
            HeadActivation::Tanh
        } else {
            HeadActivation::None
        }
    }
}

/// Shared model produced by pretraining.
#[derive(Debug, Clone)]
pub struct SharedModel {
    pub net: BackboneNet,
    pub heads: BTreeMap<usize, RidgeHead>,
    pub projector: Projector,
    pub pretrain_subjects: Vec<usize>,
    /// mean training loss per epoch
    pub loss_trace: Vec<f64>,
}

/// A new subject's adapted model (shared weights live in `SharedModel`).
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub subject_id: usize,
    pub head: RidgeHead,
    pub adapters: Option<AdapterSet>,
    pub projector: Projector,
    pub arm: FinetuneArm,
    pub loss_trace: Vec<f64>,
}

/// The injection plan for a fine-tuning arm on this backbone.
pub fn build_plan(net: &BackboneNet, d_s: usize, arm: FinetuneArm, ridge_lora: bool) -> InjectionPlan {
    let mut entries = Vec::new();
    if arm.uses_lora() {
        if ridge_lora {
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
    }
    if arm.uses_skip() {
        for (site, d_out) in net.skip_sites() {
            entries.push(PlanEntry {
                skip_loss_excluded: site == skip_site_token(),
                site,
                kind: AdapterKind::SkipLora,
                d_in: d_s,
                d_out,
            });
        }
    }
    InjectionPlan { entries }
}

/// One training batch, gathered from the dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub voxels: Tensor,
    pub tokens: Tensor,
    pub lowlevel: Tensor,
    pub text: Tensor,
    pub retrieval: Tensor,
}

pub fn gather_train_batch(
    ds: &CohortDataset,
    retrieval_targets: &Tensor,
    subject: usize,
    trial_ids: &[usize],
) -> Batch {
    let t = &ds.trials[subject];
    let d_s = t.train_voxels.cols();
    let mut vox = Vec::with_capacity(trial_ids.len() * d_s);
    let mut stim = Vec::with_capacity(trial_ids.len());
    for &tr in trial_ids {
        vox.extend_from_slice(t.train_voxels.row(tr));
        stim.push(t.train_stimuli[tr]);
    }
    Batch {
        voxels: Tensor::new(vec![trial_ids.len(), d_s], vox).unwrap(),
        tokens: ds.stimuli.rows(&ds.stimuli.tokens, &stim),
        lowlevel: ds.stimuli.rows(&ds.stimuli.lowlevel, &stim),
        text: ds.stimuli.rows(&ds.stimuli.text, &stim),
        retrieval: ds.stimuli.rows(retrieval_targets, &stim),
    }
}

/// Everything `build_step_loss` needs to know about the step.
pub struct StepSpec<'a> {
    pub net: &'a BackboneNet,
    pub head: &'a RidgeHead,
    /// binding prefix of the active head's parameters
    pub head_prefix: &'a str,
    pub adapters: Option<&'a AdapterSet>,
    pub use_skip_loss: bool,
    pub use_pivot_loss: bool,
    /// Some(mix) selects the mixed contrastive path
    pub mix: Option<&'a MixPair>,
    pub loss: &'a LossConfig,
}

/// Scalar components of one step's loss (values, not vars).
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub total: f64,
    pub prior: f64,
    pub lowlevel: f64,
    pub contrastive: f64,
    pub skip: f64,
    pub pivot: f64,
}

fn bound_adapters_from(binding: &Binding, set: &AdapterSet) -> BoundAdapters {
    let sid = set.subject_id;
    let lora = set
        .lora
        .iter()
        .map(|(site, block)| {
            (
                site.clone(),
                BoundLora {
                    a: binding.var(&format!("adapter/{sid}/{site}/a")),
                    b: binding.var(&format!("adapter/{sid}/{site}/b")),
                    scale: block.scale,
                },
            )
        })
        .collect();
    let skip = set
        .skip
        .iter()
        .map(|(site, block)| {
            (
                site.clone(),
                BoundSkip {
                    lora: BoundLora {
                        a: binding.var(&format!("adapter/{sid}/{site}/a")),
                        b: binding.var(&format!("adapter/{sid}/{site}/b")),
                        scale: block.lora.scale,
                    },
                    activation: block.activation,
                },
            )
        })
        .collect();
    BoundAdapters { lora, skip }
}

fn mixed_rows(t: &Tensor, mix: &MixPair) -> Tensor {
    let (b, d) = (t.rows(), t.cols());
    let mut out = vec![0.0; b * d];
    for i in 0..b {
        let l = mix.lambdas[i];
        let ti = t.row(i);
        let tj = t.row(mix.partner[i]);
        for k in 0..d {
            out[i * d + k] = l * ti[k] + (1.0 - l) * tj[k];
        }
    }
    Tensor::new(vec![b, d], out).unwrap()
}

/// Build the full loss graph for one step on an already-populated binding.
/// Shared between the trainer and the gradient-check suite.
pub fn build_step_loss(
    tape: &mut Tape,
    binding: &Binding,
    spec: &StepSpec<'_>,
    batch: &Batch,
) -> Result<(Var, LossParts)> {
    let dims = &spec.net.dims;
    let head_vars = RidgeHeadVars {
        weight: binding.var(&format!("{}.w", spec.head_prefix)),
        bias: binding.var(&format!("{}.b", spec.head_prefix)),
    };
    let bound_adapters = spec.adapters.map(|set| bound_adapters_from(binding, set));

    // Inputs: mixed voxels in the hard-contrastive phase, raw otherwise.
    let (voxels_in, tokens_target, low_target) = match spec.mix {
        Some(mix) => (
            mix.mixed.clone(),
            mixed_rows(&batch.tokens, mix),
            mixed_rows(&batch.lowlevel, mix),
        ),
        None => (batch.voxels.clone(), batch.tokens.clone(), batch.lowlevel.clone()),
    };
    let v_var = tape.constant(voxels_in);

    // Ridge head, with its LoRA added to the head output when present (for
    // the activation-appended probe arm the delta lands post-activation).
    let mut m = spec.head.forward(tape, head_vars, v_var)?;
    if let Some(ad) = &bound_adapters {
        m = ad.apply_lora(tape, &ridge_site(), v_var, m);
    }

    let acts = spec.net.forward(tape, binding, m, bound_adapters.as_ref(), Some(v_var))?;
    let heads = spec
        .net
        .heads_forward(tape, binding, acts.tokens, bound_adapters.as_ref())?;

    // Component losses.
    let g_target = tape.constant(tokens_target);
    let z_target = tape.constant(low_target);
    let r_target = tape.constant(batch.retrieval.clone());
    let prior = losses::prior_loss(tape, heads.prior, g_target)?;
    let lowlevel = losses::lowlevel_loss(tape, heads.lowlevel, z_target)?;
    let contrastive = match spec.mix {
        Some(mix) => losses::bimixco_loss(tape, heads.retrieval, r_target, mix, spec.loss.temperature)?,
        None => losses::softclip_loss(tape, heads.retrieval, r_target, spec.loss.temperature)?,
    };
    let multi = total_multi(tape, prior, lowlevel, contrastive, spec.loss);

    let skip = if spec.use_skip_loss {
        let set = spec.adapters.ok_or_else(|| {
            CoreError::arg("skip loss requested without injected adapters")
        })?;
        if set.skip.is_empty() {
            None
        } else {
            let site_names: Vec<String> =
                spec.net.skip_sites().into_iter().map(|(n, _)| n).collect();
            let mut lins = Vec::new();
            let mut skips = Vec::new();
            for (i, s) in acts.layer_skip.iter().enumerate() {
                if let Some(sv) = s {
                    if set.skip_loss_excluded.contains(&site_names[i]) {
                        continue;
                    }
                    lins.push(acts.layer_linear[i]);
                    skips.push(*sv);
                }
            }
            if lins.is_empty() {
                None
            } else {
                Some(losses::skip_loss(tape, &lins, &skips)?)
            }
        }
    } else {
        None
    };

    let pivot = if spec.use_pivot_loss {
        let proj = binding.var("projector.p");
        let p_raw = crate::backbone::project_pivot(tape, dims, proj, heads.prior)?;
        let p_norm = tape.normalize_rows(p_raw, 1e-12);
        let t_var = tape.constant(batch.text.clone());
        Some(match spec.mix {
            Some(mix) => losses::pivot_loss_mixed(tape, p_norm, t_var, mix, spec.loss.temperature)?,
            None => losses::pivot_loss(
                tape,
                p_norm,
                t_var,
                spec.loss.temperature,
                spec.loss.bidirectional_pivot,
            )?,
        })
    } else {
        None
    };

    let mut total = total_new(tape, multi, skip, pivot, spec.loss);

    // Ridge penalty on the active head's weights.
    if spec.head.l2_penalty > 0.0 {
        let pen = spec.head.penalty(tape, head_vars);
        total = tape.add(total, pen);
    }

    let parts = LossParts {
        total: tape.scalar_value(total),
        prior: tape.scalar_value(prior),
        lowlevel: tape.scalar_value(lowlevel),
        contrastive: tape.scalar_value(contrastive),
        skip: skip.map(|v| tape.scalar_value(v)).unwrap_or(0.0),
        pivot: pivot.map(|v| tape.scalar_value(v)).unwrap_or(0.0),
    };
    Ok((total, parts))
}

/// Frozen copies of shared tensors, bound cheaply every step.
struct FrozenCache {
    entries: Vec<(String, Arc<Tensor>)>,
}

impl FrozenCache {
    fn of_net(net: &BackboneNet) -> Self {
        FrozenCache {
            entries: net
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, Arc::new(t.clone())))
                .collect(),
        }
    }

    fn bind_into(&self, tape: &mut Tape, binding: &mut Binding) {
        for (name, t) in &self.entries {
            let var = tape.constant_shared(Arc::clone(t));
            binding.insert(name.clone(), var);
        }
    }
}

/// Bind a list of (name, tensor) pairs as trainable leaves.
fn bind_trainable(
    tape: &mut Tape,
    binding: &mut Binding,
    items: &[(String, &Tensor)],
) -> Vec<(String, Var)> {
    let mut out = Vec::with_capacity(items.len());
    for (name, t) in items {
        let var = tape.param((*t).clone());
        binding.insert(name.clone(), var);
        out.push((name.clone(), var));
    }
    out
}

fn head_params(prefix: &str, head: &RidgeHead) -> Vec<(String, Tensor)> {
    vec![
        (format!("{prefix}.w"), head.weight.clone()),
        (format!("{prefix}.b"), head.bias.clone()),
    ]
}

/// Per-epoch checkpoint hook: (model, optimizer, epochs completed).
pub type SharedEpochHook<'a> = &'a mut dyn FnMut(&SharedModel, &OptimState, usize) -> Result<()>;
pub type AdaptedEpochHook<'a> = &'a mut dyn FnMut(&AdaptedModel, &OptimState, usize) -> Result<()>;

/// Multi-subject pretraining (optionally resuming from a checkpointed
/// state). Returns the shared model with its loss trace plus the optimizer
/// state for resumable checkpoints.
pub fn pretrain(
    ds: &CohortDataset,
    cfg: &ExperimentConfig,
    subjects: &[usize],
    resume: Option<(SharedModel, OptimState, usize)>,
    mut on_epoch: Option<SharedEpochHook<'_>>,
) -> Result<(SharedModel, OptimState)> {
    cfg.validate()?;
    if subjects.len() < 2 {
        return Err(CoreError::arg("pretraining needs at least 2 subjects"));
    }
    for &s in subjects {
        if s >= ds.n_subjects() {
            return Err(CoreError::arg(format!("subject {s} not in dataset")));
        }
        if ds.trials[s].train_stimuli.is_empty() {
            return Err(CoreError::arg(format!("subject {s} has no training trials")));
        }
    }
    let dims = cfg.model.dims();
    let seed = cfg.seed;

    let (mut model, mut opt, start_epoch) = match resume {
        Some((m, o, e)) => (m, o, e),
        None => {
            let mut rng_model = Rng::new(seed).derive("model");
            let net = BackboneNet::new(dims, &mut rng_model)?;
            let projector = Projector::new(&dims, &mut rng_model);
            let mut heads = BTreeMap::new();
            for &s in subjects {
                let d_s = ds.subjects[s].d_s;
                let mut rng_h = Rng::new(seed).derive(&format!("head/{s}"));
                let mut head = RidgeHead::new(s, d_s, dims.d_0, cfg.train.ridge_penalty);
                // small random init keeps early contrastive gradients varied
                head.weight = Tensor::randn(vec![dims.d_0, d_s], 1.0 / (d_s as f64).sqrt(), &mut rng_h);
                heads.insert(s, head);
            }
            let model = SharedModel {
                net,
                heads,
                projector,
                pretrain_subjects: subjects.to_vec(),
                loss_trace: Vec::new(),
            };
            let opt = OptimState::new(AdamWConfig {
                lr: cfg.train.lr,
                weight_decay: cfg.train.weight_decay,
                ..AdamWConfig::default()
            })?;
            (model, opt, 0)
        }
    };

    let epochs = cfg.train.pretrain_epochs;
    let batch = cfg.train.pretrain_batch_size;
    let retrieval_targets = ds.stimuli.retrieval_targets();
    let n_train = ds.trials[subjects[0]].train_stimuli.len();
    let batches_per_subject = n_train / batch;
    if batches_per_subject == 0 {
        return Err(CoreError::arg("batch size exceeds training set"));
    }
    let steps_per_epoch = batches_per_subject * subjects.len();
    let sched = OneCycle {
        max_lr: cfg.train.lr,
        total_steps: (steps_per_epoch * epochs).max(2),
        warmup_frac: cfg.train.warmup_frac,
        start_div: cfg.train.start_div,
        final_div: cfg.train.final_div,
    };

    for epoch in start_epoch..epochs {
        let kind = contrastive_schedule(epoch, epochs, cfg.train.contrastive_switch_frac)?;
        // per-subject shuffled trial order for this epoch
        let orders: Vec<Vec<usize>> = subjects
            .iter()
            .map(|&s| {
                Rng::new(seed)
                    .derive(&format!("pretrain/shuffle/{s}/{epoch}"))
                    .permutation(n_train)
            })
            .collect();
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for bi in 0..batches_per_subject {
            for (si, &s) in subjects.iter().enumerate() {
                let global_step = epoch * steps_per_epoch + bi * subjects.len() + si;
                let trial_ids = &orders[si][bi * batch..(bi + 1) * batch];
                let batch_data = gather_train_batch(ds, &retrieval_targets, s, trial_ids);
                let mix = match kind {
                    ContrastiveKind::BiMixCo => {
                        let mut rng_mix = Rng::new(seed)
                            .derive(&format!("pretrain/mix/{s}/{epoch}/{bi}"));
                        Some(losses::mixco_mix(
                            &batch_data.voxels,
                            cfg.loss.beta_alpha,
                            cfg.loss.beta_beta,
                            &mut rng_mix,
                        )?)
                    }
                    ContrastiveKind::SoftClip => None,
                };

                let mut tape = Tape::new();
                let mut binding = Binding::new();
                // everything trains during pretraining
                let mut trainable = Vec::new();
                let net_params: Vec<(String, Tensor)> = model
                    .net
                    .named_params()
                    .into_iter()
                    .map(|(n, t)| (n, t.clone()))
                    .collect();
                let refs: Vec<(String, &Tensor)> =
                    net_params.iter().map(|(n, t)| (n.clone(), t)).collect();
                trainable.extend(bind_trainable(&mut tape, &mut binding, &refs));
                let head = &model.heads[&s];
                let prefix = format!("head/{s}");
                let hp = head_params(&prefix, head);
                let hrefs: Vec<(String, &Tensor)> =
                    hp.iter().map(|(n, t)| (n.clone(), t)).collect();
                trainable.extend(bind_trainable(&mut tape, &mut binding, &hrefs));

                let spec = StepSpec {
                    net: &model.net,
                    head,
                    head_prefix: &prefix,
                    adapters: None,
                    use_skip_loss: false,
                    use_pivot_loss: false,
                    mix: mix.as_ref(),
                    loss: &cfg.loss,
                };
                let (loss_var, parts) = build_step_loss(&mut tape, &binding, &spec, &batch_data)?;
                let grads_all = tape.backward(loss_var)?;
                let mut grads: Vec<Tensor> = Vec::with_capacity(trainable.len());
                for (name, var) in &trainable {
                    let shape = tape.value(*var).shape().to_vec();
                    let g = grads_all.get(*var, &shape);
                    g.ensure_finite(&format!("gradient of '{name}'"))?;
                    grads.push(g);
                }
                clip_global_norm(&mut grads, cfg.train.clip_grad_norm);
                let lr = sched.lr(global_step.min(sched.total_steps - 1))?;
                apply_updates(&mut model, None, &trainable, &grads, &mut opt, lr)?;
                epoch_loss += parts.total;
                steps += 1;
            }
        }
        model.loss_trace.push(epoch_loss / steps.max(1) as f64);
        if let Some(hook) = on_epoch.as_mut() {
            hook(&model, &opt, epoch + 1)?;
        }
    }
    Ok((model, opt))
}

/// Route gradient updates back into the owning structs by parameter name.
fn apply_updates(
    shared: &mut SharedModel,
    adapted: Option<&mut AdaptedModel>,
    trainable: &[(String, Var)],
    grads: &[Tensor],
    opt: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let mut tensors: BTreeMap<&str, &mut Tensor> = BTreeMap::new();
    for (name, t) in shared.net.named_params_mut() {
        tensors.insert(leak_name(name), t);
    }
    for (s, head) in shared.heads.iter_mut() {
        tensors.insert(leak_name(format!("head/{s}.w")), &mut head.weight);
        tensors.insert(leak_name(format!("head/{s}.b")), &mut head.bias);
    }
    if let Some(adapted) = adapted {
        tensors.insert("ridge_head.w", &mut adapted.head.weight);
        tensors.insert("ridge_head.b", &mut adapted.head.bias);
        tensors.insert("projector.p", &mut adapted.projector.p);
        if let Some(set) = adapted.adapters.as_mut() {
            for (name, t) in set.named_params_mut() {
                tensors.insert(leak_name(name), t);
            }
        }
    }

    let mut items: Vec<(&str, &mut Tensor)> = Vec::with_capacity(trainable.len());
    for (name, _) in trainable {
        let t = tensors
            .remove(name.as_str())
            .ok_or_else(|| CoreError::arg(format!("no parameter storage for '{name}'")))?;
        items.push((name.as_str(), t));
    }
    opt.step(&mut items, grads, lr)
}

// Parameter names repeat every step; interning them sidesteps lifetime
// plumbing in the per-step update map.
fn leak_name(name: String) -> &'static str {
    use std::collections::BTreeSet;
    use std::sync::Mutex;
    static INTERN: Mutex<BTreeSet<&'static str>> = Mutex::new(BTreeSet::new());
    let mut set = INTERN.lock().unwrap();
    if let Some(&existing) = set.get(name.as_str()) {
        return existing;
    }
    let leaked: &'static str = Box::leak(name.into_boxed_str());
    set.insert(leaked);
    leaked
}

/// Fit the latent -> shared-space bridge on the pretraining subjects (used
/// by the warmstart head init).
pub fn fit_latent_bridge(
    shared: &SharedModel,
    ds: &CohortDataset,
    lambda: f64,
) -> Result<Tensor> {
    let latent = ds.stimuli.latent_dim;
    let d_0 = shared.net.dims.d_0;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for &s in &shared.pretrain_subjects {
        let head = &shared.heads[&s];
        let t = &ds.trials[s];
        let m = head.forward_eval(&t.train_voxels)?;
        let u = ds.stimuli.rows(&ds.stimuli.latents, &t.train_stimuli);
        xs.extend_from_slice(u.data());
        ys.extend_from_slice(m.data());
        rows += t.train_stimuli.len();
    }
    let x = Tensor::new(vec![rows, latent], xs)?;
    let y = Tensor::new(vec![rows, d_0], ys)?;
    crate::alignment::closed_form_ridge(&x, &y, lambda)
}

/// New-subject fine-tuning. The shared model is frozen (asserted bit-exact
/// on return); `max_steps` caps the number of optimizer steps (0 = none, for
/// baseline comparisons).
pub fn finetune(
    shared: &SharedModel,
    ds: &CohortDataset,
    subject: usize,
    arm: FinetuneArm,
    cfg: &ExperimentConfig,
    max_steps: Option<usize>,
    resume: Option<(AdaptedModel, OptimState, usize)>,
    mut on_epoch: Option<AdaptedEpochHook<'_>>,
) -> Result<(AdaptedModel, OptimState)> {
    cfg.validate()?;
    if shared.pretrain_subjects.contains(&subject) {
        return Err(CoreError::arg(format!(
            "subject {subject} was in the pretraining cohort (contamination guard)"
        )));
    }
    if subject >= ds.n_subjects() {
        return Err(CoreError::arg(format!("subject {subject} not in dataset")));
    }
    let dims = shared.net.dims;
    let d_s = ds.subjects[subject].d_s;
    let seed = cfg.seed;
    let frozen_before: Vec<Tensor> = shared
        .net
        .named_params()
        .iter()
        .map(|(_, t)| (*t).clone())
        .collect();

    let (mut adapted, mut opt, start_epoch) = match resume {
        Some((a, o, e)) => (a, o, e),
        None => {
            let strategy = HeadInit::parse(&cfg.train.head_init)?;
            let mut rng_head = Rng::new(seed).derive(&format!("finetune/head/{subject}"));
            let mut head = match strategy {
                HeadInit::ClosedFormWarmstart => {
                    let bridge = fit_latent_bridge(shared, ds, 1e-3)?;
                    let t = &ds.trials[subject];
                    let latents = ds.stimuli.rows(&ds.stimuli.latents, &t.train_stimuli);
                    crate::alignment::init_new_subject_head(
                        subject,
                        d_s,
                        dims.d_0,
                        cfg.train.ridge_penalty,
                        strategy,
                        &mut rng_head,
                        Some(WarmstartContext {
                            voxels: &t.train_voxels,
                            latents: &latents,
                            bridge: &bridge,
                            ridge_lambda: 1e-3,
                        }),
                    )?
                }
                _ => crate::alignment::init_new_subject_head(
                    subject,
                    d_s,
                    dims.d_0,
                    cfg.train.ridge_penalty,
                    strategy,
                    &mut rng_head,
                    None,
                )?,
            };
            head.activation = arm.head_activation();
            let adapters = if arm.uses_lora() || arm.uses_skip() {
                let plan = build_plan(&shared.net, d_s, arm, cfg.adapters.ridge_lora);
                let mut rng_ad = Rng::new(seed).derive(&format!("finetune/adapters/{subject}"));
                Some(AdapterSet::inject(
                    subject,
                    d_s,
                    &plan,
                    cfg.adapters.rank,
                    cfg.adapters.lora_alpha,
                    SkipActivation::parse(&cfg.adapters.activation)?,
                    &mut rng_ad,
                )?)
            } else {
                None
            };
            let adapted = AdaptedModel {
                subject_id: subject,
                head,
                adapters,
                projector: shared.projector.clone(),
                arm,
                loss_trace: Vec::new(),
            };
            let opt = OptimState::new(AdamWConfig {
                lr: cfg.train.lr,
                weight_decay: cfg.train.weight_decay,
                ..AdamWConfig::default()
            })?;
            (adapted, opt, 0)
        }
    };

    let epochs = cfg.train.epochs;
    let batch = cfg.train.batch_size;
    let retrieval_targets = ds.stimuli.retrieval_targets();
    let n_train = ds.trials[subject].train_stimuli.len();
    let batches_per_epoch = n_train / batch;
    if batches_per_epoch == 0 {
        return Err(CoreError::arg("batch size exceeds the fine-tuning set"));
    }
    let sched = OneCycle {
        max_lr: cfg.train.lr,
        total_steps: (batches_per_epoch * epochs).max(2),
        warmup_frac: cfg.train.warmup_frac,
        start_div: cfg.train.start_div,
        final_div: cfg.train.final_div,
    };
    let frozen = FrozenCache::of_net(&shared.net);
    let mut steps_done = start_epoch * batches_per_epoch;

    'outer: for epoch in start_epoch..epochs {
        let kind = contrastive_schedule(epoch, epochs, cfg.train.contrastive_switch_frac)?;
        let order = Rng::new(seed)
            .derive(&format!("finetune/shuffle/{subject}/{epoch}"))
            .permutation(n_train);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for bi in 0..batches_per_epoch {
            if let Some(cap) = max_steps {
                if steps_done >= cap {
                    if steps > 0 {
                        adapted.loss_trace.push(epoch_loss / steps as f64);
                    }
                    break 'outer;
                }
            }
            let trial_ids = &order[bi * batch..(bi + 1) * batch];
            let batch_data = gather_train_batch(ds, &retrieval_targets, subject, trial_ids);
            let mix = match kind {
                ContrastiveKind::BiMixCo => {
                    let mut rng_mix = Rng::new(seed)
                        .derive(&format!("finetune/mix/{subject}/{epoch}/{bi}"));
                    Some(losses::mixco_mix(
                        &batch_data.voxels,
                        cfg.loss.beta_alpha,
                        cfg.loss.beta_beta,
                        &mut rng_mix,
                    )?)
                }
                ContrastiveKind::SoftClip => None,
            };

            let mut tape = Tape::new();
            let mut binding = Binding::new();
            frozen.bind_into(&mut tape, &mut binding);
            let mut trainable = Vec::new();
            let hp = head_params("ridge_head", &adapted.head);
            let hrefs: Vec<(String, &Tensor)> = hp.iter().map(|(n, t)| (n.clone(), t)).collect();
            trainable.extend(bind_trainable(&mut tape, &mut binding, &hrefs));
            if let Some(set) = &adapted.adapters {
                let ap: Vec<(String, Tensor)> = set
                    .named_params()
                    .into_iter()
                    .map(|(n, t)| (n, t.clone()))
                    .collect();
                let arefs: Vec<(String, &Tensor)> = ap.iter().map(|(n, t)| (n.clone(), t)).collect();
                trainable.extend(bind_trainable(&mut tape, &mut binding, &arefs));
            }
            if arm.uses_pivot() {
                let pv = tape.param(adapted.projector.p.clone());
                binding.insert("projector.p", pv);
                trainable.push(("projector.p".into(), pv));
            } else {
                let pv = tape.constant(adapted.projector.p.clone());
                binding.insert("projector.p", pv);
            }

            let spec = StepSpec {
                net: &shared.net,
                head: &adapted.head,
                head_prefix: "ridge_head",
                adapters: adapted.adapters.as_ref(),
                use_skip_loss: arm.uses_skip(),
                use_pivot_loss: arm.uses_pivot(),
                mix: mix.as_ref(),
                loss: &cfg.loss,
            };
            let (loss_var, parts) = build_step_loss(&mut tape, &binding, &spec, &batch_data)?;
            let grads_all = tape.backward(loss_var)?;
            let mut grads: Vec<Tensor> = Vec::with_capacity(trainable.len());
            for (name, var) in &trainable {
                let shape = tape.value(*var).shape().to_vec();
                let g = grads_all.get(*var, &shape);
                g.ensure_finite(&format!("gradient of '{name}'"))?;
                grads.push(g);
            }
            clip_global_norm(&mut grads, cfg.train.clip_grad_norm);
            let lr = sched.lr(steps_done.min(sched.total_steps - 1))?;
            // shared stays untouched; clone a mutable shell for the router
            apply_adapted_updates(&mut adapted, &trainable, &grads, &mut opt, lr)?;
            epoch_loss += parts.total;
            steps += 1;
            steps_done += 1;
        }
        if steps > 0 {
            adapted.loss_trace.push(epoch_loss / steps as f64);
        }
        if let Some(hook) = on_epoch.as_mut() {
            hook(&adapted, &opt, epoch + 1)?;
        }
    }

    // Frozen-base guarantee.
    for ((name, after), before) in shared.net.named_params().iter().zip(&frozen_before) {
        if after.data() != before.data() {
            return Err(CoreError::arg(format!(
                "frozen parameter '{name}' changed during fine-tuning"
            )));
        }
    }
    Ok((adapted, opt))
}

fn apply_adapted_updates(
    adapted: &mut AdaptedModel,
    trainable: &[(String, Var)],
    grads: &[Tensor],
    opt: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let mut tensors: BTreeMap<&str, &mut Tensor> = BTreeMap::new();
    tensors.insert("ridge_head.w", &mut adapted.head.weight);
    tensors.insert("ridge_head.b", &mut adapted.head.bias);
    tensors.insert("projector.p", &mut adapted.projector.p);
    if let Some(set) = adapted.adapters.as_mut() {
        for (name, t) in set.named_params_mut() {
            tensors.insert(leak_name(name), t);
        }
    }
    let mut items: Vec<(&str, &mut Tensor)> = Vec::with_capacity(trainable.len());
    for (name, _) in trainable {
        let t = tensors
            .remove(name.as_str())
            .ok_or_else(|| CoreError::arg(format!("no parameter storage for '{name}'")))?;
        items.push((name.as_str(), t));
    }
    opt.step(&mut items, grads, lr)
}
