//! Synthetic multi-subject cohorts with planted visual fingerprints.
//!
//! Each stimulus is a unit latent vector pulled toward one of C category
//! centroids; image tokens, text embeddings, and low-level latents are fixed
//! transforms of that latent. A subject's voxels are a standardized linear
//! readout plus a frozen random tanh network (the fingerprint) confined to a
//! recorded voxel subset, plus Gaussian noise:
//!
//!   V = A_s·u + γ·mask(F_s)·g_s(u) + ε
//!
//! Linear readout and fingerprint are both standardized to unit per-voxel
//! std over the training stimuli, so γ and noise_sigma read directly as
//! power ratios.

mod fingerprint;

pub use fingerprint::{run_fingerprint_experiment, FingerprintFit};

use crate::backbone::ModelDims;
use crate::config::CohortConfig;
use crate::container::{self, DType};
use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_nt, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Shared stimulus bank: latents, token grids, text embeddings, low-level
/// latents, labels, and the category text bank.
#[derive(Debug, Clone)]
pub struct StimulusSpace {
    pub latent_dim: usize,
    /// [N, latent_dim], unit rows
    pub latents: Tensor,
    /// [N, T*D], unit Frobenius norm per grid
    pub tokens: Tensor,
    /// [N, text_dim], unit rows
    pub text: Tensor,
    /// [N, lowlevel_dim]
    pub lowlevel: Tensor,
    /// category label per stimulus
    pub labels: Vec<usize>,
    /// [C, text_dim], unit rows
    pub bank: Tensor,
    pub dims: ModelDims,
}

impl StimulusSpace {
    pub fn n_stimuli(&self) -> usize {
        self.labels.len()
    }

    /// Normalized mean-pooled token grid per stimulus: the retrieval target.
    pub fn retrieval_targets(&self) -> Tensor {
        let n = self.n_stimuli();
        let (t, d) = (self.dims.n_tokens, self.dims.token_dim);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = self.tokens.row(i);
            let dst = &mut out[i * d..(i + 1) * d];
            for tok in 0..t {
                for j in 0..d {
                    dst[j] += row[tok * d + j];
                }
            }
            let norm = dst.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in dst.iter_mut() {
                *v /= norm;
            }
        }
        Tensor::new(vec![n, d], out).unwrap()
    }

    pub fn rows(&self, t: &Tensor, ids: &[usize]) -> Tensor {
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        Tensor::new(vec![ids.len(), c], data).unwrap()
    }
}

/// The generator for one subject: linear map, fingerprint network, noise.
#[derive(Debug, Clone)]
pub struct SubjectModel {
    pub subject_id: usize,
    pub d_s: usize,
    /// [d_s, latent_dim]
    pub linear_map: Tensor,
    /// [h_fp, latent_dim]
    pub fp_w1: Tensor,
    /// [h_fp]
    pub fp_b1: Tensor,
    /// [|F_s|, h_fp]
    pub fp_w2: Tensor,
    /// [|F_s|, latent_dim]; least-squares linear content of the tanh
    /// network, subtracted so the planted fingerprint carries no signal a
    /// linear readout can reach
    pub fp_lin: Tensor,
    /// sorted voxel indices carrying the fingerprint
    pub fingerprint_voxels: Vec<usize>,
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl SubjectModel {
    /// Forward model: V = A_s·u + γ·mask(F_s)·g_s(u) (+ noise unless None).
    pub fn forward(&self, latents: &Tensor, noise: Option<&mut Rng>) -> Result<Tensor> {
        if latents.cols() != self.linear_map.shape()[1] {
            return Err(CoreError::shape(format!(
                "subject {} expects latent dim {}, got {}",
                self.subject_id,
                self.linear_map.shape()[1],
                latents.cols()
            )));
        }
        let n = latents.rows();
        let mut v = vec![0.0; n * self.d_s];
        gemm_nt(
            n,
            latents.cols(),
            self.d_s,
            latents.data(),
            self.linear_map.data(),
            &mut v,
            false,
        );
        if self.gamma != 0.0 && !self.fingerprint_voxels.is_empty() {
            let g = self.fingerprint(latents);
            let k = self.fingerprint_voxels.len();
            for i in 0..n {
                for (fi, &vox) in self.fingerprint_voxels.iter().enumerate() {
                    v[i * self.d_s + vox] += self.gamma * g.data()[i * k + fi];
                }
            }
        }
        if let Some(rng) = noise {
            if self.noise_sigma > 0.0 {
                for val in v.iter_mut() {
                    *val += self.noise_sigma * rng.normal();
                }
            }
        }
        Tensor::new(vec![n, self.d_s], v)
    }

    /// g_s(u) = W2·tanh(W1·u + b1), one row per stimulus, one column per
    /// fingerprint voxel.
    fn fingerprint(&self, latents: &Tensor) -> Tensor {
        let n = latents.rows();
        let h = self.fp_w1.shape()[0];
        let k = self.fp_w2.shape()[0];
        let mut pre = vec![0.0; n * h];
        gemm_nt(
            n,
            latents.cols(),
            h,
            latents.data(),
            self.fp_w1.data(),
            &mut pre,
            false,
        );
        for i in 0..n {
            for j in 0..h {
                pre[i * h + j] = (pre[i * h + j] + self.fp_b1.data()[j]).tanh();
            }
        }
        let mut g = vec![0.0; n * k];
        gemm_nt(n, h, k, &pre, self.fp_w2.data(), &mut g, false);
        // remove the linear content
        let mut lin = vec![0.0; n * k];
        gemm_nt(
            n,
            latents.cols(),
            k,
            latents.data(),
            self.fp_lin.data(),
            &mut lin,
            false,
        );
        for (gv, lv) in g.iter_mut().zip(&lin) {
            *gv -= lv;
        }
        Tensor::new(vec![n, k], g).unwrap()
    }
}

/// One subject's trials within a cohort.
#[derive(Debug, Clone)]
pub struct SubjectTrials {
    /// stimulus id of each training trial, in presentation order
    pub train_stimuli: Vec<usize>,
    /// [n_train, d_s]
    pub train_voxels: Tensor,
    /// test trials follow the canonical test-stimulus order
    pub test_stimuli: Vec<usize>,
    /// [n_test, d_s]
    pub test_voxels: Tensor,
}

/// A single trial view.
#[derive(Debug, Clone, Copy)]
pub struct VoxelSample<'a> {
    pub subject_id: usize,
    pub stimulus_id: usize,
    pub voxels: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct CohortDataset {
    pub stimuli: StimulusSpace,
    pub subjects: Vec<SubjectModel>,
    pub trials: Vec<SubjectTrials>,
    pub session_size: usize,
    pub seed: u64,
    pub gamma: f64,
    /// ids of train stimuli (disjoint from test)
    pub n_train: usize,
    pub n_test: usize,
}

impl CohortDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn train_sample(&self, subject: usize, trial: usize) -> VoxelSample<'_> {
        VoxelSample {
            subject_id: subject,
            stimulus_id: self.trials[subject].train_stimuli[trial],
            voxels: self.trials[subject].train_voxels.row(trial),
        }
    }

    pub fn sessions_available(&self, subject: usize) -> usize {
        self.trials[subject].train_stimuli.len().div_euclid(self.session_size)
    }

    /// Keep only the first `n_sessions`·session_size training trials of one
    /// subject; every other subject and the test split stay untouched.
    pub fn take_sessions(mut self, n_sessions: usize, subject_id: usize) -> Result<Self> {
        let avail = self
            .trials
            .get(subject_id)
            .map(|t| t.train_stimuli.len())
            .ok_or_else(|| CoreError::arg(format!("no subject {subject_id}")))?;
        let max_sessions = avail / self.session_size;
        if n_sessions == 0 || n_sessions > max_sessions {
            return Err(CoreError::arg(format!(
                "n_sessions {n_sessions} out of range [1, {max_sessions}]"
            )));
        }
        let keep = n_sessions * self.session_size;
        let t = &mut self.trials[subject_id];
        t.train_stimuli.truncate(keep);
        let d_s = t.train_voxels.cols();
        let data = t.train_voxels.data()[..keep * d_s].to_vec();
        t.train_voxels = Tensor::new(vec![keep, d_s], data)?;
        Ok(self)
    }
}

fn normalize_rows_in_place(t: &mut Tensor) {
    let (m, n) = (t.rows(), t.cols());
    for i in 0..m {
        let row = &mut t.data_mut()[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

/// Generate the full synthetic cohort. Deterministic in (config, dims, seed).
pub fn generate_cohort(cfg: &CohortConfig, dims: &ModelDims, seed: u64) -> Result<CohortDataset> {
    cfg.validate()?;
    dims.validate()?;
    if cfg.latent_dim != dims.text_dim {
        // Not a hard requirement of the generator, but the text projection
        // below assumes a square rotation; keep them equal in config.
        return Err(CoreError::InvalidConfig(format!(
            "latent_dim ({}) must equal model text_dim ({})",
            cfg.latent_dim, dims.text_dim
        )));
    }
    let root = Rng::new(seed).derive("cohort");
    let n_total = cfg.train_stimuli + cfg.test_stimuli;
    let latent = cfg.latent_dim;

    // Category centroids: random unit latents.
    let mut rng_cat = root.derive("categories");
    let mut centroids = Tensor::randn(vec![cfg.categories, latent], 1.0, &mut rng_cat);
    normalize_rows_in_place(&mut centroids);

    // Stimulus latents: category pull + unique content, renormalized.
    let mut rng_stim = root.derive("stimuli");
    let mut labels = Vec::with_capacity(n_total);
    let mut latents = vec![0.0; n_total * latent];
    let cs = cfg.category_strength;
    let residual = (1.0 - cs * cs).sqrt();
    for i in 0..n_total {
        let c = rng_stim.index(cfg.categories);
        labels.push(c);
        let mut eta: Vec<f64> = (0..latent).map(|_| rng_stim.normal()).collect();
        let en = eta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in eta.iter_mut() {
            *v /= en;
        }
        let row = &mut latents[i * latent..(i + 1) * latent];
        for k in 0..latent {
            row[k] = cs * centroids.row(c)[k] + residual * eta[k];
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let latents = Tensor::new(vec![n_total, latent], latents)?;

    // Token grids: fixed random linear map of the latent, Frobenius-normalized.
    let mut rng_tok = root.derive("tokens");
    let token_map = Tensor::randn(
        vec![dims.token_flat(), latent],
        1.0 / (latent as f64).sqrt(),
        &mut rng_tok,
    );
    let mut tokens = vec![0.0; n_total * dims.token_flat()];
    gemm_nt(
        n_total,
        latent,
        dims.token_flat(),
        latents.data(),
        token_map.data(),
        &mut tokens,
        false,
    );
    let mut tokens = Tensor::new(vec![n_total, dims.token_flat()], tokens)?;
    normalize_rows_in_place(&mut tokens);

    // Text space: a random rotation of latent space defines the bank; each
    // stimulus text embedding is its category centroid plus jitter.
    let mut rng_text = root.derive("text");
    let rot = random_rotation(latent, &mut rng_text);
    let mut bank = vec![0.0; cfg.categories * latent];
    gemm_nt(
        cfg.categories,
        latent,
        latent,
        centroids.data(),
        rot.data(),
        &mut bank,
        false,
    );
    let mut bank = Tensor::new(vec![cfg.categories, latent], bank)?;
    normalize_rows_in_place(&mut bank);
    let jitter_scale = cfg.text_jitter / (latent as f64).sqrt();
    let mut text = vec![0.0; n_total * latent];
    for i in 0..n_total {
        let b = bank.row(labels[i]);
        let row = &mut text[i * latent..(i + 1) * latent];
        for k in 0..latent {
            row[k] = b[k] + jitter_scale * rng_text.normal();
        }
    }
    let mut text = Tensor::new(vec![n_total, latent], text)?;
    normalize_rows_in_place(&mut text);

    // Low-level latents: another fixed random readout of the latent.
    let mut rng_low = root.derive("lowlevel");
    let low_map = Tensor::randn(
        vec![dims.lowlevel_dim, latent],
        1.0 / (latent as f64).sqrt(),
        &mut rng_low,
    );
    let mut lowlevel = vec![0.0; n_total * dims.lowlevel_dim];
    gemm_nt(
        n_total,
        latent,
        dims.lowlevel_dim,
        latents.data(),
        low_map.data(),
        &mut lowlevel,
        false,
    );
    let lowlevel = Tensor::new(vec![n_total, dims.lowlevel_dim], lowlevel)?;

    let stimuli = StimulusSpace {
        latent_dim: latent,
        latents,
        tokens,
        text,
        lowlevel,
        labels,
        bank,
        dims: *dims,
    };

    // Subjects.
    let train_ids: Vec<usize> = (0..cfg.train_stimuli).collect();
    let test_ids: Vec<usize> = (cfg.train_stimuli..n_total).collect();
    let train_latents = stimuli.rows(&stimuli.latents, &train_ids);
    let mut subjects = Vec::with_capacity(cfg.subjects);
    let mut trials = Vec::with_capacity(cfg.subjects);
    for s in 0..cfg.subjects {
        let mut rng_s = root.derive(&format!("subject/{s}"));
        let d_s = rng_s.index(cfg.voxels_max - cfg.voxels_min + 1) + cfg.voxels_min;
        let mut subject = build_subject(s, d_s, cfg, &train_latents, &mut rng_s);
        subject.gamma = cfg.gamma;
        subject.noise_sigma = cfg.noise_sigma;
        // Trial order: seeded shuffle per subject.
        let mut rng_order = root.derive(&format!("order/{s}"));
        let perm = rng_order.permutation(cfg.train_stimuli);
        let train_stimuli: Vec<usize> = perm.into_iter().collect();
        let ordered_latents = stimuli.rows(&stimuli.latents, &train_stimuli);
        let mut rng_noise = root.derive(&format!("noise/{s}"));
        let train_voxels = subject.forward(&ordered_latents, Some(&mut rng_noise))?;
        let test_latents = stimuli.rows(&stimuli.latents, &test_ids);
        let test_voxels = subject.forward(&test_latents, Some(&mut rng_noise))?;
        train_voxels.ensure_finite("train voxels")?;
        test_voxels.ensure_finite("test voxels")?;
        subjects.push(subject);
        trials.push(SubjectTrials {
            train_stimuli,
            train_voxels,
            test_stimuli: test_ids.clone(),
            test_voxels,
        });
    }

    Ok(CohortDataset {
        stimuli,
        subjects,
        trials,
        session_size: cfg.session_size,
        seed,
        gamma: cfg.gamma,
        n_train: cfg.train_stimuli,
        n_test: cfg.test_stimuli,
    })
}

fn build_subject(
    id: usize,
    d_s: usize,
    cfg: &CohortConfig,
    train_latents: &Tensor,
    rng: &mut Rng,
) -> SubjectModel {
    let latent = cfg.latent_dim;
    let n = train_latents.rows();
    // Linear readout, standardized per voxel over the training stimuli.
    let mut a = Tensor::randn(vec![d_s, latent], 1.0, rng);
    let mut lin = vec![0.0; n * d_s];
    gemm_nt(n, latent, d_s, train_latents.data(), a.data(), &mut lin, false);
    for v in 0..d_s {
        let mut mean = 0.0;
        for i in 0..n {
            mean += lin[i * d_s + v];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = lin[i * d_s + v] - mean;
            var += d * d;
        }
        let std = (var / n as f64).sqrt().max(1e-9);
        for k in 0..latent {
            a.data_mut()[v * latent + k] /= std;
        }
    }

    // Fingerprint subset and network.
    let k = ((d_s as f64) * cfg.fingerprint_fraction).round() as usize;
    let mut mask: Vec<usize> = rng.permutation(d_s).into_iter().take(k).collect();
    mask.sort_unstable();
    let h = cfg.fingerprint_hidden;
    let fp_w1 = Tensor::randn(vec![h, latent], cfg.fingerprint_gain, rng);
    let fp_b1 = Tensor::randn(vec![h], 0.5 * cfg.fingerprint_gain, rng);
    let mut fp_w2 = Tensor::randn(vec![k.max(1), h], 1.0 / (h as f64).sqrt(), rng);
    let mut fp_lin = Tensor::zeros(vec![k.max(1), latent]);
    if k > 0 {
        let mut pre = vec![0.0; n * h];
        gemm_nt(n, latent, h, train_latents.data(), fp_w1.data(), &mut pre, false);
        for i in 0..n {
            for j in 0..h {
                pre[i * h + j] = (pre[i * h + j] + fp_b1.data()[j]).tanh();
            }
        }
        let mut g = vec![0.0; n * k];
        gemm_nt(n, h, k, &pre, fp_w2.data(), &mut g, false);
        // A tanh feature keeps a large linear correlation with its input;
        // remove part of it so the planted fingerprint is only partly
        // visible to linear readouts. The retained fraction is configured.
        let keep = cfg.fingerprint_linear_fraction;
        let g_t = Tensor::new(vec![n, k], g.clone()).unwrap();
        let lin_fit = crate::alignment::closed_form_ridge(train_latents, &g_t, 1e-6)
            .expect("fingerprint linear fit");
        let mut lin = vec![0.0; n * k];
        crate::tensor::gemm_nn(n, latent, k, train_latents.data(), lin_fit.data(), &mut lin);
        for (gv, lv) in g.iter_mut().zip(&lin) {
            *gv -= (1.0 - keep) * lv;
        }
        // lin_fit is [latent, k]; store the subtracted part as [k, latent]
        for vkk in 0..k {
            for l in 0..latent {
                fp_lin.data_mut()[vkk * latent + l] = (1.0 - keep) * lin_fit.data()[l * k + vkk];
            }
        }
        // Standardize the purely non-linear residue to unit std per voxel.
        for vkk in 0..k {
            let mut mean = 0.0;
            for i in 0..n {
                mean += g[i * k + vkk];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let d = g[i * k + vkk] - mean;
                var += d * d;
            }
            let std = (var / n as f64).sqrt().max(1e-9);
            for j in 0..h {
                fp_w2.data_mut()[vkk * h + j] /= std;
            }
            for l in 0..latent {
                fp_lin.data_mut()[vkk * latent + l] /= std;
            }
        }
    }
    SubjectModel {
        subject_id: id,
        d_s,
        linear_map: a,
        fp_w1,
        fp_b1,
        fp_w2,
        fp_lin,
        fingerprint_voxels: if k > 0 { mask } else { Vec::new() },
        gamma: cfg.gamma,
        noise_sigma: cfg.noise_sigma,
    }
}

/// Orthonormal matrix from Gram-Schmidt over random Gaussian columns.
fn random_rotation(dim: usize, rng: &mut Rng) -> Tensor {
    let mut q = vec![vec![0.0; dim]; dim];
    for row in q.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.normal();
        }
    }
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = (0..dim).map(|k| q[i][k] * q[j][k]).sum();
            for k in 0..dim {
                q[i][k] -= dot * q[j][k];
            }
        }
        let norm = q[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in q[i].iter_mut() {
            *v /= norm;
        }
    }
    Tensor::from_rows(&q).unwrap()
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectMeta {
    subject_id: usize,
    d_s: usize,
    gamma: f64,
    noise_sigma: f64,
    fingerprint_voxels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    subjects: Vec<SubjectMeta>,
    n_train: usize,
    n_test: usize,
    session_size: usize,
    latent_dim: usize,
    labels: Vec<usize>,
    gamma: f64,
    dims: ModelDims,
    train_orders: Vec<Vec<usize>>,
}

impl CohortDataset {
    /// Serialize into the shared container format (f32 tensors).
    pub fn save(&self, dir: &Path, config_hash: &str, overwrite: bool) -> Result<()> {
        let meta = DatasetMeta {
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectMeta {
                    subject_id: s.subject_id,
                    d_s: s.d_s,
                    gamma: s.gamma,
                    noise_sigma: s.noise_sigma,
                    fingerprint_voxels: s.fingerprint_voxels.clone(),
                })
                .collect(),
            n_train: self.n_train,
            n_test: self.n_test,
            session_size: self.session_size,
            latent_dim: self.stimuli.latent_dim,
            labels: self.stimuli.labels.clone(),
            gamma: self.gamma,
            dims: self.stimuli.dims,
            train_orders: self.trials.iter().map(|t| t.train_stimuli.clone()).collect(),
        };
        let mut tensors: Vec<(String, &Tensor, DType)> = vec![
            ("stimuli/latents".into(), &self.stimuli.latents, DType::F32),
            ("stimuli/tokens".into(), &self.stimuli.tokens, DType::F32),
            ("stimuli/text".into(), &self.stimuli.text, DType::F32),
            ("stimuli/lowlevel".into(), &self.stimuli.lowlevel, DType::F32),
            ("stimuli/bank".into(), &self.stimuli.bank, DType::F32),
        ];
        for (s, t) in self.subjects.iter().zip(&self.trials) {
            let id = s.subject_id;
            tensors.push((format!("subject/{id}/linear_map"), &s.linear_map, DType::F32));
            tensors.push((format!("subject/{id}/fp_w1"), &s.fp_w1, DType::F32));
            tensors.push((format!("subject/{id}/fp_b1"), &s.fp_b1, DType::F32));
            tensors.push((format!("subject/{id}/fp_w2"), &s.fp_w2, DType::F32));
            tensors.push((format!("subject/{id}/fp_lin"), &s.fp_lin, DType::F32));
            tensors.push((format!("subject/{id}/train_voxels"), &t.train_voxels, DType::F32));
            tensors.push((format!("subject/{id}/test_voxels"), &t.test_voxels, DType::F32));
        }
        container::write_container(
            dir,
            "dataset",
            self.seed,
            config_hash,
            serde_json::to_value(&meta)?,
            &tensors,
            overwrite,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, mut map) = container::read_container(dir)?;
        if manifest.kind != "dataset" {
            return Err(CoreError::Container(format!(
                "expected a dataset container, found '{}'",
                manifest.kind
            )));
        }
        let meta: DatasetMeta = serde_json::from_value(manifest.meta.clone())?;
        let stimuli = StimulusSpace {
            latent_dim: meta.latent_dim,
            latents: container::take_tensor(&mut map, "stimuli/latents")?,
            tokens: container::take_tensor(&mut map, "stimuli/tokens")?,
            text: container::take_tensor(&mut map, "stimuli/text")?,
            lowlevel: container::take_tensor(&mut map, "stimuli/lowlevel")?,
            labels: meta.labels,
            bank: container::take_tensor(&mut map, "stimuli/bank")?,
            dims: meta.dims,
        };
        let mut subjects = Vec::new();
        let mut trials = Vec::new();
        let test_ids: Vec<usize> = (meta.n_train..meta.n_train + meta.n_test).collect();
        for (sm, order) in meta.subjects.iter().zip(&meta.train_orders) {
            let id = sm.subject_id;
            subjects.push(SubjectModel {
                subject_id: id,
                d_s: sm.d_s,
                linear_map: container::take_tensor(&mut map, &format!("subject/{id}/linear_map"))?,
                fp_w1: container::take_tensor(&mut map, &format!("subject/{id}/fp_w1"))?,
                fp_b1: container::take_tensor(&mut map, &format!("subject/{id}/fp_b1"))?,
                fp_w2: container::take_tensor(&mut map, &format!("subject/{id}/fp_w2"))?,
                fp_lin: container::take_tensor(&mut map, &format!("subject/{id}/fp_lin"))?,
                fingerprint_voxels: sm.fingerprint_voxels.clone(),
                gamma: sm.gamma,
                noise_sigma: sm.noise_sigma,
            });
            trials.push(SubjectTrials {
                train_stimuli: order.clone(),
                train_voxels: container::take_tensor(
                    &mut map,
                    &format!("subject/{id}/train_voxels"),
                )?,
                test_stimuli: test_ids.clone(),
                test_voxels: container::take_tensor(&mut map, &format!("subject/{id}/test_voxels"))?,
            });
        }
        Ok(CohortDataset {
            stimuli,
            subjects,
            trials,
            session_size: meta.session_size,
            seed: manifest.seed,
            gamma: meta.gamma,
            n_train: meta.n_train,
            n_test: meta.n_test,
        })
    }
}
