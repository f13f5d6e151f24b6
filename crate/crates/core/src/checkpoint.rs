//! Checkpoint serialization for shared and adapted models, including
//! optimizer state so interrupted runs resume bit-exactly (tensors are
//! stored as f64).

use crate::adapters::{AdapterKind, AdapterSet, InjectionPlan, LoRABlock, PlanEntry, SkipActivation, SkipLoRABlock};
use crate::alignment::{HeadActivation, RidgeHead};
use crate::backbone::{BackboneNet, ModelDims, Projector};
use crate::container::{self, DType};
use crate::error::{CoreError, Result};
use crate::optim::{AdamWConfig, OptimState, ParamState};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{AdaptedModel, FinetuneArm, SharedModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct OptMeta {
    cfg: AdamWConfig,
    steps: BTreeMap<String, u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SharedMeta {
    phase: String,
    epoch_completed: usize,
    dims: ModelDims,
    pretrain_subjects: Vec<usize>,
    head_subjects: Vec<usize>,
    head_dims: Vec<usize>,
    ridge_penalty: f64,
    loss_trace: Vec<f64>,
    opt: Option<OptMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanEntryMeta {
    site: String,
    kind: String,
    d_in: usize,
    d_out: usize,
    excluded: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdaptedMeta {
    phase: String,
    epoch_completed: usize,
    dims: ModelDims,
    subject_id: usize,
    arm: String,
    rank: usize,
    lora_alpha: f64,
    activation: String,
    head_activation: String,
    ridge_penalty: f64,
    plan: Vec<PlanEntryMeta>,
    pretrain_subjects: Vec<usize>,
    pretrain_hash: String,
    loss_trace: Vec<f64>,
    opt: Option<OptMeta>,
}

fn opt_tensors<'a>(opt: &'a OptimState, tensors: &mut Vec<(String, &'a Tensor, DType)>) {
    for (name, st) in &opt.states {
        tensors.push((format!("opt/{name}/m"), &st.m, DType::F64));
        tensors.push((format!("opt/{name}/v"), &st.v, DType::F64));
    }
}

fn opt_meta(opt: &OptimState) -> OptMeta {
    OptMeta {
        cfg: opt.cfg.clone(),
        steps: opt.states.iter().map(|(n, s)| (n.clone(), s.step)).collect(),
    }
}

fn load_opt(meta: &OptMeta, map: &mut BTreeMap<String, Tensor>) -> Result<OptimState> {
    let mut opt = OptimState::new(meta.cfg.clone())?;
    for (name, &step) in &meta.steps {
        let m = container::take_tensor(map, &format!("opt/{name}/m"))?;
        let v = container::take_tensor(map, &format!("opt/{name}/v"))?;
        opt.states.insert(name.clone(), ParamState { m, v, step });
    }
    Ok(opt)
}

pub fn save_shared(
    dir: &Path,
    model: &SharedModel,
    opt: Option<&OptimState>,
    epoch_completed: usize,
    ridge_penalty: f64,
    config_hash: &str,
    seed: u64,
    overwrite: bool,
) -> Result<()> {
    let meta = SharedMeta {
        phase: "pretrained".into(),
        epoch_completed,
        dims: model.net.dims,
        pretrain_subjects: model.pretrain_subjects.clone(),
        head_subjects: model.heads.keys().cloned().collect(),
        head_dims: model.heads.values().map(|h| h.d_s()).collect(),
        ridge_penalty,
        loss_trace: model.loss_trace.clone(),
        opt: opt.map(opt_meta),
    };
    let mut tensors: Vec<(String, &Tensor, DType)> = Vec::new();
    for (name, t) in model.net.named_params() {
        tensors.push((name, t, DType::F64));
    }
    for (s, head) in &model.heads {
        tensors.push((format!("head/{s}.w"), &head.weight, DType::F64));
        tensors.push((format!("head/{s}.b"), &head.bias, DType::F64));
    }
    tensors.push(("projector.p".into(), &model.projector.p, DType::F64));
    if let Some(o) = opt {
        opt_tensors(o, &mut tensors);
    }
    container::write_container(
        dir,
        "checkpoint",
        seed,
        config_hash,
        serde_json::to_value(&meta)?,
        &tensors,
        overwrite,
    )
}

pub struct LoadedShared {
    pub model: SharedModel,
    pub opt: Option<OptimState>,
    pub epoch_completed: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub fn load_shared(dir: &Path) -> Result<LoadedShared> {
    let (manifest, mut map) = container::read_container(dir)?;
    let meta: SharedMeta = serde_json::from_value(manifest.meta.clone())
        .map_err(|e| CoreError::Container(format!("not a pretrained checkpoint: {e}")))?;
    if meta.phase != "pretrained" {
        return Err(CoreError::Container(format!(
            "expected a pretrained checkpoint, found phase '{}'",
            meta.phase
        )));
    }
    let mut rng = Rng::new(0);
    let mut net = BackboneNet::new(meta.dims, &mut rng)?;
    for (name, t) in net.named_params_mut() {
        *t = container::take_tensor(&mut map, &name)?;
    }
    let mut heads = BTreeMap::new();
    for (&s, &d_s) in meta.head_subjects.iter().zip(&meta.head_dims) {
        let mut head = RidgeHead::new(s, d_s, meta.dims.d_0, meta.ridge_penalty);
        head.weight = container::take_tensor(&mut map, &format!("head/{s}.w"))?;
        head.bias = container::take_tensor(&mut map, &format!("head/{s}.b"))?;
        heads.insert(s, head);
    }
    let projector = Projector {
        p: container::take_tensor(&mut map, "projector.p")?,
    };
    let opt = match &meta.opt {
        Some(om) => Some(load_opt(om, &mut map)?),
        None => None,
    };
    Ok(LoadedShared {
        model: SharedModel {
            net,
            heads,
            projector,
            pretrain_subjects: meta.pretrain_subjects,
            loss_trace: meta.loss_trace,
        },
        opt,
        epoch_completed: meta.epoch_completed,
        config_hash: manifest.config_hash,
        seed: manifest.seed,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn save_adapted(
    dir: &Path,
    shared: &SharedModel,
    model: &AdaptedModel,
    opt: Option<&OptimState>,
    epoch_completed: usize,
    rank: usize,
    lora_alpha: f64,
    activation: &str,
    ridge_penalty: f64,
    pretrain_hash: &str,
    config_hash: &str,
    seed: u64,
    overwrite: bool,
) -> Result<()> {
    let plan: Vec<PlanEntryMeta> = match &model.adapters {
        Some(set) => {
            let mut entries = Vec::new();
            for (site, l) in &set.lora {
                entries.push(PlanEntryMeta {
                    site: site.clone(),
                    kind: "lora".into(),
                    d_in: l.d_in(),
                    d_out: l.d_out(),
                    excluded: false,
                });
            }
            for (site, s) in &set.skip {
                entries.push(PlanEntryMeta {
                    site: site.clone(),
                    kind: "skip".into(),
                    d_in: s.lora.d_in(),
                    d_out: s.lora.d_out(),
                    excluded: set.skip_loss_excluded.contains(site),
                });
            }
            entries
        }
        None => Vec::new(),
    };
    let meta = AdaptedMeta {
        phase: "adapted".into(),
        epoch_completed,
        dims: shared.net.dims,
        subject_id: model.subject_id,
        arm: model.arm.name().into(),
        rank,
        lora_alpha,
        activation: activation.into(),
        head_activation: match model.head.activation {
            HeadActivation::None => "none".into(),
            HeadActivation::Tanh => "tanh".into(),
        },
        ridge_penalty,
        plan,
        pretrain_subjects: shared.pretrain_subjects.clone(),
        pretrain_hash: pretrain_hash.into(),
        loss_trace: model.loss_trace.clone(),
        opt: opt.map(opt_meta),
    };
    let mut tensors: Vec<(String, &Tensor, DType)> = Vec::new();
    for (name, t) in shared.net.named_params() {
        tensors.push((name, t, DType::F64));
    }
    tensors.push(("ridge_head.w".into(), &model.head.weight, DType::F64));
    tensors.push(("ridge_head.b".into(), &model.head.bias, DType::F64));
    tensors.push(("projector.p".into(), &model.projector.p, DType::F64));
    if let Some(set) = &model.adapters {
        for (name, t) in set.named_params() {
            tensors.push((name, t, DType::F64));
        }
    }
    if let Some(o) = opt {
        opt_tensors(o, &mut tensors);
    }
    container::write_container(
        dir,
        "checkpoint",
        seed,
        config_hash,
        serde_json::to_value(&meta)?,
        &tensors,
        overwrite,
    )
}

pub struct LoadedAdapted {
    /// shared weights embedded in the checkpoint (heads are not carried)
    pub shared: SharedModel,
    pub model: AdaptedModel,
    pub opt: Option<OptimState>,
    pub epoch_completed: usize,
    pub config_hash: String,
    pub pretrain_hash: String,
    pub seed: u64,
}

pub fn load_adapted(dir: &Path) -> Result<LoadedAdapted> {
    let (manifest, mut map) = container::read_container(dir)?;
    let meta: AdaptedMeta = serde_json::from_value(manifest.meta.clone())
        .map_err(|e| CoreError::Container(format!("not an adapted checkpoint: {e}")))?;
    if meta.phase != "adapted" {
        return Err(CoreError::Container(format!(
            "expected an adapted checkpoint, found phase '{}'",
            meta.phase
        )));
    }
    let mut rng = Rng::new(0);
    let mut net = BackboneNet::new(meta.dims, &mut rng)?;
    for (name, t) in net.named_params_mut() {
        *t = container::take_tensor(&mut map, &name)?;
    }
    let mut head = RidgeHead::new(
        meta.subject_id,
        0,
        meta.dims.d_0,
        meta.ridge_penalty,
    );
    head.weight = container::take_tensor(&mut map, "ridge_head.w")?;
    head.bias = container::take_tensor(&mut map, "ridge_head.b")?;
    head.activation = match meta.head_activation.as_str() {
        "tanh" => HeadActivation::Tanh,
        _ => HeadActivation::None,
    };
    let projector = Projector {
        p: container::take_tensor(&mut map, "projector.p")?,
    };
    let sid = meta.subject_id;
    let adapters = if meta.plan.is_empty() {
        None
    } else {
        let mut lora = BTreeMap::new();
        let mut skip = BTreeMap::new();
        let mut excluded = Vec::new();
        for e in &meta.plan {
            let a = container::take_tensor(&mut map, &format!("adapter/{sid}/{}/a", e.site))?;
            let b = container::take_tensor(&mut map, &format!("adapter/{sid}/{}/b", e.site))?;
            let block = LoRABlock {
                a,
                b,
                rank: meta.rank,
                scale: if e.kind == "skip" { 1.0 } else { meta.lora_alpha / meta.rank as f64 },
            };
            if e.kind == "skip" {
                skip.insert(
                    e.site.clone(),
                    SkipLoRABlock {
                        lora: block,
                        activation: SkipActivation::parse(&meta.activation)?,
                    },
                );
                if e.excluded {
                    excluded.push(e.site.clone());
                }
            } else {
                lora.insert(e.site.clone(), block);
            }
        }
        Some(AdapterSet {
            subject_id: sid,
            rank: meta.rank,
            lora,
            skip,
            skip_loss_excluded: excluded,
        })
    };
    let opt = match &meta.opt {
        Some(om) => Some(load_opt(om, &mut map)?),
        None => None,
    };
    // Fix the head's recorded voxel width from the loaded weight shape.
    let model = AdaptedModel {
        subject_id: sid,
        head,
        adapters,
        projector,
        arm: FinetuneArm::parse(&meta.arm)?,
        loss_trace: meta.loss_trace,
    };
    Ok(LoadedAdapted {
        shared: SharedModel {
            net,
            heads: BTreeMap::new(),
            projector: model.projector.clone(),
            pretrain_subjects: meta.pretrain_subjects,
            loss_trace: Vec::new(),
        },
        model,
        opt,
        epoch_completed: meta.epoch_completed,
        config_hash: manifest.config_hash,
        pretrain_hash: meta.pretrain_hash,
        seed: manifest.seed,
    })
}

/// Reconstruct an injection plan from an adapter set (used when resuming).
pub fn plan_of(set: &AdapterSet) -> InjectionPlan {
    let mut entries = Vec::new();
    for (site, l) in &set.lora {
        entries.push(PlanEntry {
            site: site.clone(),
            kind: AdapterKind::Lora,
            d_in: l.d_in(),
            d_out: l.d_out(),
            skip_loss_excluded: false,
        });
    }
    for (site, s) in &set.skip {
        entries.push(PlanEntry {
            site: site.clone(),
            kind: AdapterKind::SkipLora,
            d_in: s.lora.d_in(),
            d_out: s.lora.d_out(),
            skip_loss_excluded: set.skip_loss_excluded.contains(site),
        });
    }
    InjectionPlan { entries }
}
