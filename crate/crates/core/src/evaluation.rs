//! Retrieval, identification, correlation, semantic-correction, and
//! voxel-importance metrics over a frozen model.

use crate::adapters::AdapterSet;
use crate::alignment::{closed_form_ridge, RidgeHead};
use crate::backbone::{ridge_site, skip_site_input, BackboneNet, Projector};
use crate::cohort::{CohortDataset, SubjectModel};
use crate::config::EvalSection;
use crate::error::{CoreError, Result};
use crate::stats::{cosine, mean, pearson_with_floor};
use crate::tape::Tape;
use crate::tensor::{gemm_nn, Tensor};
use crate::training::{AdaptedModel, SharedModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Candidate embeddings with their paired queries (pairing is by row index).
pub struct RetrievalPool<'a> {
    pub queries: &'a Tensor,
    pub candidates: &'a Tensor,
}

/// Top-1 retrieval accuracy (fraction in [0,1]). Ties go to the lowest
/// candidate index, deterministically.
pub fn retrieve(pool: &RetrievalPool<'_>) -> Result<f64> {
    let n = pool.queries.rows();
    if pool.candidates.rows() == 0 || n == 0 {
        return Err(CoreError::arg("retrieve: empty pool"));
    }
    if pool.candidates.rows() != n {
        return Err(CoreError::shape(format!(
            "retrieve: {} queries vs {} candidates (pairing is by index)",
            n,
            pool.candidates.rows()
        )));
    }
    let mut correct = 0usize;
    let mut ties = 0usize;
    for i in 0..n {
        let q = pool.queries.row(i);
        let mut best = f64::NEG_INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..n {
            let s = cosine(q, pool.candidates.row(j));
            if s > best {
                best = s;
                best_j = j;
            } else if s == best {
                ties += 1;
            }
        }
        if best_j == i {
            correct += 1;
        }
    }
    if ties > 0 {
        log::debug!("retrieve: {ties} similarity ties broken toward the lowest index");
    }
    Ok(correct as f64 / n as f64)
}

/// Percent of pairwise comparisons where each prediction is closer to its own
/// target than to another sample's target (chance 50).
pub fn two_way_identification(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let n = pred.rows();
    if n < 2 {
        return Err(CoreError::arg("two-way identification needs at least 2 samples"));
    }
    if truth.rows() != n {
        return Err(CoreError::shape("two-way: row mismatch"));
    }
    let mut wins = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        let own = cosine(pred.row(i), truth.row(i));
        for k in 0..n {
            if k == i {
                continue;
            }
            if own > cosine(pred.row(i), truth.row(k)) {
                wins += 1;
            }
            total += 1;
        }
    }
    Ok(100.0 * wins as f64 / total as f64)
}

/// Mean per-sample Pearson correlation between flattened latents. Constant
/// rows contribute zero with a warning.
pub fn pixcorr(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(CoreError::shape("pixcorr: shape mismatch"));
    }
    let n = pred.rows();
    let mut acc = 0.0;
    for i in 0..n {
        match pearson_with_floor(pred.row(i), truth.row(i), 1e-12) {
            Ok(r) => acc += r,
            Err(_) => {
                log::warn!("pixcorr: constant latent in sample {i}, contributing 0");
            }
        }
    }
    Ok(acc / n as f64)
}

/// Argmax cosine similarity over the category bank.
pub fn semantic_correct(p: &[f64], bank: &Tensor) -> Result<usize> {
    if bank.rows() == 0 {
        return Err(CoreError::arg("semantic_correct: empty category bank"));
    }
    if bank.cols() != p.len() {
        return Err(CoreError::shape(format!(
            "semantic_correct: embedding dim {} vs bank dim {}",
            p.len(),
            bank.cols()
        )));
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    for c in 0..bank.rows() {
        let s = cosine(p, bank.row(c));
        if s > best.0 {
            best = (s, c);
        }
    }
    Ok(best.1)
}

/// Weighted average of high- and low-route latents in the low-level space.
pub fn blend_reconstruction(
    high: &Tensor,
    low: &Tensor,
    ratio_high: f64,
    ratio_low: f64,
) -> Result<Tensor> {
    if high.shape() != low.shape() {
        return Err(CoreError::shape("blend: shape mismatch"));
    }
    let denom = ratio_high + ratio_low;
    if !(denom > 0.0) {
        return Err(CoreError::arg("blend: ratios must sum to a positive value"));
    }
    let data = high
        .data()
        .iter()
        .zip(low.data())
        .map(|(h, l)| (ratio_high * h + ratio_low * l) / denom)
        .collect();
    Tensor::new(high.shape().to_vec(), data)
}

/// Pearson correlation between re-encoded reconstructions and observed
/// voxels, per synthetic region.
pub fn brain_correlation(
    recon_latents: &Tensor,
    subject: &SubjectModel,
    observed: &Tensor,
) -> Result<BTreeMap<String, f64>> {
    let re = subject.forward(recon_latents, None)?;
    if re.shape() != observed.shape() {
        return Err(CoreError::shape("brain_correlation: voxel shape mismatch"));
    }
    let n = re.rows();
    let fp: Vec<usize> = subject.fingerprint_voxels.clone();
    let fpset: std::collections::BTreeSet<usize> = fp.iter().cloned().collect();
    let complement: Vec<usize> = (0..subject.d_s).filter(|v| !fpset.contains(v)).collect();
    let all: Vec<usize> = (0..subject.d_s).collect();

    let mut out = BTreeMap::new();
    for (name, region) in [
        ("all_voxels", &all),
        ("fingerprint", &fp),
        ("complement", &complement),
    ] {
        if region.is_empty() {
            log::info!("brain_correlation: region '{name}' is empty, skipped");
            continue;
        }
        let mut acc = Vec::with_capacity(n);
        for i in 0..n {
            let a: Vec<f64> = region.iter().map(|&v| re.row(i)[v]).collect();
            let b: Vec<f64> = region.iter().map(|&v| observed.row(i)[v]).collect();
            match pearson_with_floor(&a, &b, 1e-12) {
                Ok(r) => acc.push(r),
                Err(_) => acc.push(0.0),
            }
        }
        out.insert(name.to_string(), mean(&acc));
    }
    Ok(out)
}

/// Per-voxel importance of the first layer of each module kind, min-max
/// normalized to [0,1]. Constant maps normalize to all-ones.
pub fn voxel_importance(
    head: &RidgeHead,
    adapters: Option<&AdapterSet>,
) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    out.insert("ridge".to_string(), column_importance(&head.weight));
    if let Some(set) = adapters {
        if let Some(lora) = set.lora.get(&ridge_site()) {
            out.insert("lora".to_string(), column_importance(&lora.delta_matrix()));
        }
        if let Some(skip) = set.skip.get(&skip_site_input()) {
            out.insert(
                "skip_lora".to_string(),
                column_importance(&skip.lora.delta_matrix()),
            );
        }
    }
    out
}

fn column_importance(w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut imp = vec![0.0; cols];
    for i in 0..rows {
        for (j, v) in w.row(i).iter().enumerate() {
            imp[j] += v.abs();
        }
    }
    for v in imp.iter_mut() {
        *v /= rows as f64;
    }
    let lo = imp.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = imp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-300 {
        return vec![1.0; imp.len()];
    }
    imp.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Mean importance over a voxel set minus the complement mean: the
/// localization effect used by the importance analyses.
pub fn importance_effect(map: &[f64], voxels: &[usize]) -> f64 {
    let inset: std::collections::BTreeSet<usize> = voxels.iter().cloned().collect();
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (i, &v) in map.iter().enumerate() {
        if inset.contains(&i) {
            inside.push(v);
        } else {
            outside.push(v);
        }
    }
    mean(&inside) - mean(&outside)
}

/// Everything the evaluation suite reports for one adapted (or baseline)
/// model on one subject's test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub subject_id: usize,
    pub arm: String,
    pub pool_size: usize,
    /// percent
    pub chance_retrieval: f64,
    pub image_retrieval: f64,
    pub brain_retrieval: f64,
    pub two_way_retrieval: f64,
    pub two_way_prior: f64,
    pub pixcorr_low: f64,
    pub pixcorr_blend: f64,
    pub semantic_top1: f64,
    pub semantic_chance: f64,
    pub brain_correlation: BTreeMap<String, f64>,
    pub importance: BTreeMap<String, Vec<f64>>,
    pub loss_trace: Vec<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_retrieval", self.image_retrieval),
            ("brain_retrieval", self.brain_retrieval),
            ("two_way_retrieval", self.two_way_retrieval),
            ("two_way_prior", self.two_way_prior),
            ("semantic_top1", self.semantic_top1),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(CoreError::arg(format!("{name} = {v} outside [0, 100]")));
            }
        }
        for (name, v) in self.brain_correlation.iter() {
            if v.abs() > 1.0 + 1e-9 {
                return Err(CoreError::arg(format!("brain_correlation {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Plain forward pass over a frozen model (no gradients kept), chunked to
/// bound tape memory.
pub struct EvalOutputs {
    pub retrieval: Tensor,
    pub lowlevel: Tensor,
    pub prior: Tensor,
    /// normalized pivot embeddings from the prior tokens
    pub pivot: Tensor,
}

pub fn forward_frozen(
    net: &BackboneNet,
    head: &RidgeHead,
    adapters: Option<&AdapterSet>,
    projector: &Projector,
    voxels: &Tensor,
) -> Result<EvalOutputs> {
    let dims = net.dims;
    let n = voxels.rows();
    let mut retrieval = Vec::with_capacity(n * dims.retrieval_dim);
    let mut lowlevel = Vec::with_capacity(n * dims.lowlevel_dim);
    let mut prior = Vec::with_capacity(n * dims.token_flat());
    let mut pivot = Vec::with_capacity(n * dims.text_dim);
    let chunk = 64usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let d_s = voxels.cols();
        let mut vdata = Vec::with_capacity(rows.len() * d_s);
        for &i in &rows {
            vdata.extend_from_slice(voxels.row(i));
        }
        let vbatch = Tensor::new(vec![rows.len(), d_s], vdata)?;

        let mut tape = Tape::new();
        let binding = net.bind(&mut tape, false);
        let head_vars = head.bind(&mut tape, false);
        let bound = adapters.map(|set| set.bind(&mut tape, false));
        let v_var = tape.constant(vbatch);
        let mut m = head.forward(&mut tape, head_vars, v_var)?;
        if let Some(b) = &bound {
            m = b.apply_lora(&mut tape, &ridge_site(), v_var, m);
        }
        let acts = net.forward(&mut tape, &binding, m, bound.as_ref(), Some(v_var))?;
        let heads = net.heads_forward(&mut tape, &binding, acts.tokens, bound.as_ref())?;
        let proj = tape.constant(projector.p.clone());
        let p_raw = crate::backbone::project_pivot(&mut tape, &dims, proj, heads.prior)?;
        let p_norm = tape.normalize_rows(p_raw, 1e-12);

        retrieval.extend_from_slice(tape.value(heads.retrieval).data());
        lowlevel.extend_from_slice(tape.value(heads.lowlevel).data());
        prior.extend_from_slice(tape.value(heads.prior).data());
        pivot.extend_from_slice(tape.value(p_norm).data());
        start = end;
    }
    Ok(EvalOutputs {
        retrieval: Tensor::new(vec![n, dims.retrieval_dim], retrieval)?,
        lowlevel: Tensor::new(vec![n, dims.lowlevel_dim], lowlevel)?,
        prior: Tensor::new(vec![n, dims.token_flat()], prior)?,
        pivot: Tensor::new(vec![n, dims.text_dim], pivot)?,
    })
}

/// Pool-chunked retrieval accuracy in percent, with its chance level.
fn pooled_retrieval(queries: &Tensor, candidates: &Tensor, pool_size: usize) -> Result<(f64, f64)> {
    let n = queries.rows();
    let mut start = 0;
    let mut acc = 0.0;
    let mut chance = 0.0;
    let mut groups = 0.0;
    while start < n {
        let end = (start + pool_size).min(n);
        let ids: Vec<usize> = (start..end).collect();
        let q = slice_rows(queries, &ids);
        let c = slice_rows(candidates, &ids);
        acc += retrieve(&RetrievalPool {
            queries: &q,
            candidates: &c,
        })? * ids.len() as f64;
        chance += 1.0 / ids.len() as f64;
        groups += 1.0;
        start = end;
    }
    Ok((100.0 * acc / n as f64, 100.0 * chance / groups))
}

fn slice_rows(t: &Tensor, ids: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(ids.len() * c);
    for &i in ids {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![ids.len(), c], data).unwrap()
}

/// Decoders fitted on the training split's ground truth (token grid to
/// low-level latent, token grid to stimulus latent).
pub struct TokenDecoders {
    pub to_lowlevel: Tensor,
    pub to_latent: Tensor,
}

pub fn fit_token_decoders(ds: &CohortDataset) -> Result<TokenDecoders> {
    let train_ids: Vec<usize> = (0..ds.n_train).collect();
    let x = ds.stimuli.rows(&ds.stimuli.tokens, &train_ids);
    let z = ds.stimuli.rows(&ds.stimuli.lowlevel, &train_ids);
    let u = ds.stimuli.rows(&ds.stimuli.latents, &train_ids);
    Ok(TokenDecoders {
        to_lowlevel: closed_form_ridge(&x, &z, 1e-3)?,
        to_latent: closed_form_ridge(&x, &u, 1e-3)?,
    })
}

fn apply_decoder(tokens: &Tensor, w: &Tensor) -> Tensor {
    let (n, p) = (tokens.rows(), tokens.cols());
    let q = w.cols();
    let mut out = vec![0.0; n * q];
    gemm_nn(n, p, q, tokens.data(), w.data(), &mut out);
    Tensor::new(vec![n, q], out).unwrap()
}

/// Run the full evaluation suite for one subject's test split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_subject(
    net: &BackboneNet,
    head: &RidgeHead,
    adapters: Option<&AdapterSet>,
    projector: &Projector,
    ds: &CohortDataset,
    subject: usize,
    eval_cfg: &EvalSection,
    config_hash: &str,
    seed: u64,
    arm: &str,
    loss_trace: Vec<f64>,
) -> Result<MetricsReport> {
    if subject >= ds.n_subjects() {
        return Err(CoreError::arg(format!("subject {subject} not in dataset")));
    }
    let trials = &ds.trials[subject];
    let out = forward_frozen(net, head, adapters, projector, &trials.test_voxels)?;

    let test_ids = &trials.test_stimuli;
    let targets_full = ds.stimuli.retrieval_targets();
    let r_true = ds.stimuli.rows(&targets_full, test_ids);
    let g_true = ds.stimuli.rows(&ds.stimuli.tokens, test_ids);
    let z_true = ds.stimuli.rows(&ds.stimuli.lowlevel, test_ids);

    let (image_retrieval, chance) =
        pooled_retrieval(&out.retrieval, &r_true, eval_cfg.pool_size)?;
    let (brain_retrieval, _) = pooled_retrieval(&r_true, &out.retrieval, eval_cfg.pool_size)?;
    let two_way_retrieval = two_way_identification(&out.retrieval, &r_true)?;
    let two_way_prior = two_way_identification(&out.prior, &g_true)?;
    let pixcorr_low = pixcorr(&out.lowlevel, &z_true)?;

    let decoders = fit_token_decoders(ds)?;
    let high_z = apply_decoder(&out.prior, &decoders.to_lowlevel);
    let blended = blend_reconstruction(&high_z, &out.lowlevel, eval_cfg.blend_high, eval_cfg.blend_low)?;
    let pixcorr_blend = pixcorr(&blended, &z_true)?;

    // Semantic correction over the category bank.
    let mut correct = 0usize;
    for (i, &stim) in test_ids.iter().enumerate() {
        let label = semantic_correct(out.pivot.row(i), &ds.stimuli.bank)?;
        if label == ds.stimuli.labels[stim] {
            correct += 1;
        }
    }
    let semantic_top1 = 100.0 * correct as f64 / test_ids.len() as f64;

    // Brain correlation via the known forward model.
    let recon_latents = apply_decoder(&out.prior, &decoders.to_latent);
    let brain_corr = brain_correlation(&recon_latents, &ds.subjects[subject], &trials.test_voxels)?;

    let report = MetricsReport {
        config_hash: config_hash.to_string(),
        seed,
        subject_id: subject,
        arm: arm.to_string(),
        pool_size: eval_cfg.pool_size.min(test_ids.len()),
        chance_retrieval: chance,
        image_retrieval,
        brain_retrieval,
        two_way_retrieval,
        two_way_prior,
        pixcorr_low,
        pixcorr_blend,
        semantic_top1,
        semantic_chance: 100.0 / ds.stimuli.bank.rows() as f64,
        brain_correlation: brain_corr,
        importance: voxel_importance(head, adapters),
        loss_trace,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluate an adapted model against the shared backbone.
pub fn evaluate_adapted(
    shared: &SharedModel,
    adapted: &AdaptedModel,
    ds: &CohortDataset,
    eval_cfg: &EvalSection,
    config_hash: &str,
    seed: u64,
) -> Result<MetricsReport> {
    evaluate_subject(
        &shared.net,
        &adapted.head,
        adapted.adapters.as_ref(),
        &adapted.projector,
        ds,
        adapted.subject_id,
        eval_cfg,
        config_hash,
        seed,
        adapted.arm.name(),
        adapted.loss_trace.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::randn(vec![n, d], 1.0, rng);
        for i in 0..n {
            let norm: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut t.data_mut()[i * d..(i + 1) * d] {
                *v /= norm;
            }
        }
        t
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let mut rng = Rng::new(71);
        let e = unit_rows(40, 8, &mut rng);
        let acc = retrieve(&RetrievalPool {
            queries: &e,
            candidates: &e,
        })
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn random_retrieval_near_chance() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let q = unit_rows(300, 16, &mut rng);
            let c = unit_rows(300, 16, &mut rng);
            total += retrieve(&RetrievalPool {
                queries: &q,
                candidates: &c,
            })
            .unwrap();
        }
        let mean_acc = total / 20.0;
        assert!(
            (mean_acc - 1.0 / 300.0).abs() < 0.005,
            "random pool-300 accuracy {mean_acc}"
        );
    }

    #[test]
    fn duplicate_candidates_resolve_to_lowest_index() {
        // two identical candidates: query 0 ties between 0 and 1, wins at 0
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let acc = retrieve(&RetrievalPool {
            queries: &q,
            candidates: &c,
        })
        .unwrap();
        // query 0 correct (tie -> index 0), query 1 wrong (tie -> index 0)
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn empty_pool_is_error() {
        let q = Tensor::zeros(vec![0, 4]);
        let c = Tensor::zeros(vec![0, 4]);
        assert!(retrieve(&RetrievalPool {
            queries: &q,
            candidates: &c
        })
        .is_err());
    }

    #[test]
    fn two_way_trivial_and_chance() {
        let mut rng = Rng::new(72);
        let t = unit_rows(30, 8, &mut rng);
        assert_eq!(two_way_identification(&t, &t).unwrap(), 100.0);
        // independent predictions hover at 50%
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let p = unit_rows(80, 8, &mut rng);
            let t = unit_rows(80, 8, &mut rng);
            accs.push(two_way_identification(&p, &t).unwrap());
        }
        let m = mean(&accs);
        assert!((m - 50.0).abs() < 3.0, "independent two-way {m}");
        // definitional: 2 samples, pred closer to the other target
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(two_way_identification(&p, &t).unwrap(), 0.0);
        let single = Tensor::zeros(vec![1, 2]);
        assert!(two_way_identification(&single, &single).is_err());
    }

    #[test]
    fn pixcorr_trivial_cases_and_noise_monotonicity() {
        let mut rng = Rng::new(73);
        let z = Tensor::randn(vec![10, 32], 1.0, &mut rng);
        assert!((pixcorr(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        let neg = Tensor::new(vec![10, 32], z.data().iter().map(|v| -v).collect()).unwrap();
        assert!((pixcorr(&neg, &z).unwrap() + 1.0).abs() < 1e-12);
        let mut prev = 1.0;
        for &sigma in &[0.2, 0.8, 2.0] {
            let mut accs = Vec::new();
            for seed in 0..5 {
                let mut nrng = Rng::new(200 + seed);
                let noisy = Tensor::new(
                    vec![10, 32],
                    z.data().iter().map(|v| v + sigma * nrng.normal()).collect(),
                )
                .unwrap();
                accs.push(pixcorr(&noisy, &z).unwrap());
            }
            let m = mean(&accs);
            assert!(m < prev, "pixcorr should fall with noise: {m} !< {prev}");
            prev = m;
        }
    }

    #[test]
    fn semantic_correct_picks_bank_entry() {
        let mut rng = Rng::new(74);
        let bank = unit_rows(80, 16, &mut rng);
        for c in [0usize, 17, 79] {
            assert_eq!(semantic_correct(bank.row(c), &bank).unwrap(), c);
        }
        // scaling invariance
        let scaled: Vec<f64> = bank.row(5).iter().map(|v| 42.0 * v).collect();
        assert_eq!(semantic_correct(&scaled, &bank).unwrap(), 5);
        let empty = Tensor::zeros(vec![0, 16]);
        assert!(semantic_correct(bank.row(0), &empty).is_err());
        // random embeddings hit near 1/C
        let mut hits = 0usize;
        let n = 4000;
        for i in 0..n {
            let mut r = Rng::new(300 + i as u64);
            let p: Vec<f64> = (0..16).map(|_| r.normal()).collect();
            if semantic_correct(&p, &bank).unwrap() == i % 80 {
                hits += 1;
            }
        }
        let rate = hits as f64 / n as f64;
        assert!((rate - 1.0 / 80.0).abs() < 0.01, "chance rate {rate}");
    }

    #[test]
    fn blend_ratios() {
        let h = Tensor::from_rows(&[vec![4.0, 8.0]]).unwrap();
        let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = blend_reconstruction(&h, &l, 3.0, 1.0).unwrap();
        assert_eq!(b.data(), &[3.0, 6.0]);
        let only_high = blend_reconstruction(&h, &l, 1.0, 0.0).unwrap();
        assert_eq!(only_high.data(), h.data());
        let same = blend_reconstruction(&h, &h, 3.0, 1.0).unwrap();
        assert_eq!(same.data(), h.data());
        assert!(blend_reconstruction(&h, &Tensor::zeros(vec![1, 3]), 3.0, 1.0).is_err());
    }

    #[test]
    fn importance_normalization() {
        // constant map -> all ones
        let w = Tensor::new(vec![3, 4], vec![2.0; 12]).unwrap();
        let imp = column_importance(&w);
        assert_eq!(imp, vec![1.0; 4]);
        // varying map spans [0,1]
        let w2 = Tensor::from_rows(&[vec![0.0, 1.0, 3.0]]).unwrap();
        let imp2 = column_importance(&w2);
        assert_eq!(imp2[0], 0.0);
        assert_eq!(imp2[2], 1.0);
        assert!(imp2[1] > 0.0 && imp2[1] < 1.0);
    }

    #[test]
    fn importance_effect_sign() {
        let map = vec![0.9, 0.8, 0.1, 0.2];
        assert!(importance_effect(&map, &[0, 1]) > 0.5);
        assert!(importance_effect(&map, &[2, 3]) < -0.5);
    }

    #[test]
    fn retrieval_invariant_under_rotation() {
        // common rotation of queries and candidates preserves accuracies
        let mut rng = Rng::new(75);
        let q = unit_rows(20, 6, &mut rng);
        let c = unit_rows(20, 6, &mut rng);
        let base = retrieve(&RetrievalPool {
            queries: &q,
            candidates: &c,
        })
        .unwrap();
        let base_two = two_way_identification(&q, &c).unwrap();
        // Build a rotation via Gram-Schmidt
        let mut rot = vec![vec![0.0; 6]; 6];
        for row in rot.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.normal();
            }
        }
        for i in 0..6 {
            for j in 0..i {
                let d: f64 = (0..6).map(|k| rot[i][k] * rot[j][k]).sum();
                for k in 0..6 {
                    rot[i][k] -= d * rot[j][k];
                }
            }
            let n: f64 = rot[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in rot[i].iter_mut() {
                *v /= n;
            }
        }
        let rotate = |t: &Tensor| {
            let mut rows = Vec::new();
            for i in 0..t.rows() {
                let mut r = vec![0.0; 6];
                for (j, rr) in r.iter_mut().enumerate() {
                    *rr = (0..6).map(|k| rot[j][k] * t.row(i)[k]).sum();
                }
                rows.push(r);
            }
            Tensor::from_rows(&rows).unwrap()
        };
        let qr = rotate(&q);
        let cr = rotate(&c);
        let rot_acc = retrieve(&RetrievalPool {
            queries: &qr,
            candidates: &cr,
        })
        .unwrap();
        let rot_two = two_way_identification(&qr, &cr).unwrap();
        assert_eq!(base, rot_acc);
        assert!((base_two - rot_two).abs() < 1e-9);
    }
}
