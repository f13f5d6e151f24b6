//! Experiment configuration: one TOML file drives cohort generation,
//! model dimensions, training, losses, adapters, and evaluation.

use crate::backbone::ModelDims;
use crate::error::{CoreError, Result};
use crate::losses::LossConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    /// total simulated subjects (the last one is the fine-tuning holdout
    /// unless overridden)
    pub subjects: usize,
    pub latent_dim: usize,
    pub voxels_min: usize,
    pub voxels_max: usize,
    pub train_stimuli: usize,
    pub test_stimuli: usize,
    pub session_size: usize,
    /// number of stimulus categories
    pub categories: usize,
    /// cosine pull of a stimulus latent toward its category centroid, in (0,1)
    pub category_strength: f64,
    /// relative jitter of text embeddings around their category centroid
    pub text_jitter: f64,
    /// fraction of voxels carrying the non-linear fingerprint
    pub fingerprint_fraction: f64,
    pub fingerprint_hidden: usize,
    /// pre-activation scale of the fingerprint tanh layer
    pub fingerprint_gain: f64,
    /// fraction of the tanh network's linear-in-latent component kept in the
    /// planted fingerprint (1 = raw tanh features, 0 = purely non-linear)
    #[serde(default = "default_fp_linear")]
    pub fingerprint_linear_fraction: f64,
    /// fingerprint amplitude relative to the (unit) linear signal
    pub gamma: f64,
    /// per-voxel noise std relative to the unit linear signal
    pub noise_sigma: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            subjects: 8,
            latent_dim: 48,
            voxels_min: 1200,
            voxels_max: 2000,
            train_stimuli: 3000,
            test_stimuli: 300,
            session_size: 750,
            categories: 80,
            category_strength: 0.7,
            text_jitter: 0.25,
            fingerprint_fraction: 0.25,
            fingerprint_hidden: 64,
            fingerprint_gain: 2.0,
            fingerprint_linear_fraction: 0.5,
            gamma: 1.0,
            noise_sigma: 0.25,
        }
    }
}

fn default_fp_linear() -> f64 {
    0.5
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 {
            return Err(CoreError::InvalidConfig("need at least 2 subjects".into()));
        }
        if self.voxels_min < self.latent_dim {
            return Err(CoreError::InvalidConfig(
                "voxel count must be at least latent_dim".into(),
            ));
        }
        if self.voxels_min > self.voxels_max {
            return Err(CoreError::InvalidConfig("voxels_min > voxels_max".into()));
        }
        if self.train_stimuli == 0 || self.test_stimuli == 0 {
            return Err(CoreError::InvalidConfig("stimulus counts must be positive".into()));
        }
        if self.session_size == 0 || self.session_size > self.train_stimuli {
            return Err(CoreError::InvalidConfig(
                "session_size must be in [1, train_stimuli]".into(),
            ));
        }
        if self.categories == 0 {
            return Err(CoreError::InvalidConfig("need at least one category".into()));
        }
        if !(self.category_strength > 0.0 && self.category_strength < 1.0) {
            return Err(CoreError::InvalidConfig("category_strength must be in (0,1)".into()));
        }
        if !(self.fingerprint_fraction >= 0.0 && self.fingerprint_fraction <= 1.0) {
            return Err(CoreError::InvalidConfig(
                "fingerprint_fraction must be in [0,1]".into(),
            ));
        }
        if self.fingerprint_hidden == 0 {
            return Err(CoreError::InvalidConfig("fingerprint_hidden must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fingerprint_linear_fraction) {
            return Err(CoreError::InvalidConfig(
                "fingerprint_linear_fraction must be in [0,1]".into(),
            ));
        }
        if !(self.gamma >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(CoreError::InvalidConfig("gamma and noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub pretrain_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
    pub clip_grad_norm: f64,
    /// final fraction of epochs trained with the soft contrastive loss
    pub contrastive_switch_frac: f64,
    pub ridge_penalty: f64,
    /// zero | random | closed_form_warmstart
    pub head_init: String,
    /// sessions of the new subject used for fine-tuning (0 = all)
    pub sessions: usize,
    /// which subject is held out for fine-tuning (default: the last one)
    #[serde(default)]
    pub holdout_subject: Option<usize>,
    /// fine-tuning arm: ridge_only | lora_only | lora_skip | full | nonlinear_head
    #[serde(default = "default_arm")]
    pub arm: String,
    /// write a resumable checkpoint every N epochs (0 = final only)
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_arm() -> String {
    "full".into()
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 150,
            pretrain_epochs: 150,
            batch_size: 10,
            pretrain_batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_frac: 0.3,
            start_div: 25.0,
            final_div: 1e3,
            clip_grad_norm: 1.0,
            contrastive_switch_frac: 1.0 / 3.0,
            ridge_penalty: 1e-4,
            head_init: "zero".into(),
            sessions: 1,
            holdout_subject: None,
            arm: default_arm(),
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return Err(CoreError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 || self.pretrain_batch_size < 2 {
            return Err(CoreError::InvalidConfig(
                "batch sizes must be >= 2 (contrastive terms need pairs)".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(CoreError::InvalidConfig("lr must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.contrastive_switch_frac) {
            return Err(CoreError::InvalidConfig(
                "contrastive_switch_frac must be in [0,1]".into(),
            ));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(CoreError::InvalidConfig("warmup_frac must be in (0,1)".into()));
        }
        if !(self.ridge_penalty >= 0.0) {
            return Err(CoreError::InvalidConfig("ridge_penalty must be >= 0".into()));
        }
        crate::alignment::HeadInit::parse(&self.head_init)?;
        crate::training::FinetuneArm::parse(&self.arm)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    pub lora_alpha: f64,
    /// tanh | identity
    pub activation: String,
    /// also adapt the new subject's ridge head with a LoRA
    pub ridge_lora: bool,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            rank: 8,
            lora_alpha: 8.0,
            activation: "tanh".into(),
            ridge_lora: true,
        }
    }
}

impl AdapterSection {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(CoreError::InvalidConfig("adapter rank must be >= 1".into()));
        }
        crate::adapters::SkipActivation::parse(&self.activation)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// retrieval pool size; test sets smaller than this use the whole test
    /// set with the chance level adjusted
    pub pool_size: usize,
    /// high:low blend weights
    pub blend_high: f64,
    pub blend_low: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            pool_size: 300,
            blend_high: 3.0,
            blend_low: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerprintSection {
    pub observers: usize,
    pub blocks: usize,
    pub locations: usize,
    /// field amplitudes; the defaults reproduce the reference within/between
    /// correlations (0.71 / 0.22) in expectation
    pub shared_amp: f64,
    pub idiosyncratic_amp: f64,
    pub noise_amp: f64,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        // within = (s²+i²)/(s²+i²+n²) = 0.71, between = s²/total = 0.22
        FingerprintSection {
            observers: 12,
            blocks: 2,
            locations: 100,
            shared_amp: 0.22_f64.sqrt(),
            idiosyncratic_amp: 0.49_f64.sqrt(),
            noise_amp: 0.29_f64.sqrt(),
        }
    }
}

impl FingerprintSection {
    pub fn validate(&self) -> Result<()> {
        if self.observers < 2 {
            return Err(CoreError::InvalidConfig("need at least 2 observers".into()));
        }
        if self.blocks < 2 {
            return Err(CoreError::InvalidConfig(
                "need at least 2 repeated blocks per observer".into(),
            ));
        }
        if self.locations < 3 {
            return Err(CoreError::InvalidConfig("need at least 3 locations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// module on/off arms to run
    pub arms: Vec<String>,
    /// ranks for the rank-robustness cells (run on the full arm)
    pub ranks: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            arms: vec![
                "ridge_only".into(),
                "lora_only".into(),
                "lora_skip".into(),
                "full".into(),
                "nonlinear_head".into(),
            ],
            ranks: vec![4, 8, 16],
        }
    }
}

impl AblateSection {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() && self.ranks.is_empty() {
            return Err(CoreError::InvalidConfig("ablation grid is empty".into()));
        }
        for a in &self.arms {
            crate::training::FinetuneArm::parse(a)?;
        }
        if self.ranks.iter().any(|&r| r == 0) {
            return Err(CoreError::InvalidConfig("ablation rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Model dimension section (mirrors `ModelDims` with config names).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_0: usize,
    pub hidden: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub text_dim: usize,
    pub lowlevel_dim: usize,
    pub retrieval_dim: usize,
    pub prior_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_0: 128,
            hidden: 512,
            tokens: 16,
            token_dim: 64,
            text_dim: 48,
            lowlevel_dim: 256,
            retrieval_dim: 64,
            prior_hidden: 512,
        }
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_0: self.d_0,
            hidden: self.hidden,
            n_tokens: self.tokens,
            token_dim: self.token_dim,
            text_dim: self.text_dim,
            lowlevel_dim: self.lowlevel_dim,
            retrieval_dim: self.retrieval_dim,
            prior_hidden: self.prior_hidden,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub cohort: CohortConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub adapters: AdapterSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub fingerprint: FingerprintSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn default_seed() -> u64 {
    20240
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)
            .map_err(|e| CoreError::InvalidConfig(format!("TOML parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.model.dims().validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.adapters.validate()?;
        self.fingerprint.validate()?;
        self.ablate.validate()?;
        if self.eval.pool_size == 0 {
            return Err(CoreError::InvalidConfig("pool_size must be > 0".into()));
        }
        if !(self.eval.blend_high >= 0.0 && self.eval.blend_low >= 0.0)
            || self.eval.blend_high + self.eval.blend_low == 0.0
        {
            return Err(CoreError::InvalidConfig("invalid blend ratio".into()));
        }
        Ok(())
    }

    /// Stable hash of the full configuration, embedded in every artifact.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            seed = 7
            [cohort]
            subjects = 3
            latent_dim = 16
            voxels_min = 40
            voxels_max = 60
            train_stimuli = 100
            test_stimuli = 20
            session_size = 50
            categories = 10
            category_strength = 0.7
            text_jitter = 0.2
            fingerprint_fraction = 0.25
            fingerprint_hidden = 8
            fingerprint_gain = 2.0
            gamma = 0.5
            noise_sigma = 0.1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.cohort.subjects, 3);
        // defaults fill the rest
        assert_eq!(cfg.train.epochs, 150);
        assert_eq!(cfg.adapters.rank, 8);
        // different config -> different hash
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.cohort.subjects = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.train.contrastive_switch_frac = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.train.head_init = "bogus".into();
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("[cohort]\nnot_a_field = 1").is_err());
    }

    #[test]
    fn paper_scale_defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.train.epochs, 150);
        assert_eq!(cfg.train.batch_size, 10);
        assert_eq!(cfg.train.lr, 3e-4);
        assert_eq!(cfg.adapters.rank, 8);
        assert_eq!(cfg.cohort.categories, 80);
        assert_eq!(cfg.cohort.session_size, 750);
        assert_eq!(cfg.cohort.subjects, 8);
        assert_eq!(cfg.eval.pool_size, 300);
        let l = &cfg.loss;
        assert_eq!(
            (l.alpha_lowlevel, l.alpha_contrastive, l.alpha_skip, l.alpha_pivot),
            (0.5, 1.0, 1.5, 0.5)
        );
        assert!((cfg.train.contrastive_switch_frac - 1.0 / 3.0).abs() < 1e-12);
    }
}
