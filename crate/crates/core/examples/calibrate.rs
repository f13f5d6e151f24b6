//! Calibration driver: times the default-scale pipeline and reports the
//! ablation-arm metrics that the acceptance suite depends on.
//!
//! Usage: cargo run --release -p mindtuner-core --example calibrate -- \
//!     [pretrain_epochs] [finetune_epochs] [gamma] [noise] [seeds] [arms...]

use mindtuner_core::cohort::generate_cohort;
use mindtuner_core::config::ExperimentConfig;
use mindtuner_core::evaluation::{evaluate_adapted, importance_effect};
use mindtuner_core::training::{finetune, pretrain, FinetuneArm};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pretrain_epochs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(8);
    let finetune_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let gamma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let noise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let arms: Vec<FinetuneArm> = if args.len() > 5 {
        args[5..]
            .iter()
            .map(|a| FinetuneArm::parse(a).unwrap())
            .collect()
    } else {
        vec![FinetuneArm::RidgeOnly, FinetuneArm::LoraOnly, FinetuneArm::LoraSkip, FinetuneArm::Full]
    };

    let mut cfg = ExperimentConfig::default();
    cfg.cohort.gamma = gamma;
    cfg.cohort.noise_sigma = noise;
    if let Ok(g) = std::env::var("GAIN") {
        cfg.cohort.fingerprint_gain = g.parse().unwrap();
    }
    if let Ok(k) = std::env::var("FP_LINEAR") {
        cfg.cohort.fingerprint_linear_fraction = k.parse().unwrap();
    }
    if let Ok(lr) = std::env::var("LR") {
        cfg.train.lr = lr.parse().unwrap();
    }
    if let Ok(e) = std::env::var("PRETRAIN_LR") {
        let _ = e; // reserved
    }
    eprintln!("gamma {gamma} noise {noise} gain {} fp_linear {} lr {}", cfg.cohort.fingerprint_gain, cfg.cohort.fingerprint_linear_fraction, cfg.train.lr);
    cfg.train.pretrain_epochs = pretrain_epochs;
    cfg.train.epochs = finetune_epochs;

    let t0 = Instant::now();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    eprintln!("cohort generated in {:.1?}", t0.elapsed());
    let subjects: Vec<usize> = (0..ds.n_subjects() - 1).collect();
    let holdout = ds.n_subjects() - 1;

    let t1 = Instant::now();
    let (shared, _) = pretrain(&ds, &cfg, &subjects, None, None).unwrap();
    eprintln!(
        "pretrain {} epochs in {:.1?}  trace {:?}",
        pretrain_epochs,
        t1.elapsed(),
        shared
            .loss_trace
            .iter()
            .map(|v| (v * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );

    for seed_off in 0..seeds {
        let mut scfg = cfg.clone();
        scfg.seed = cfg.seed + 1000 * (seed_off + 1);
        let ds1 = ds
            .clone()
            .take_sessions(scfg.train.sessions.max(1), holdout)
            .unwrap();
        for &arm in &arms {
            let t2 = Instant::now();
            let (model, _) = finetune(&shared, &ds1, holdout, arm, &scfg, None, None, None).unwrap();
            let report =
                evaluate_adapted(&shared, &model, &ds1, &scfg.eval, "cal", scfg.seed).unwrap();
            let skip_eff = report
                .importance
                .get("skip_lora")
                .map(|m| importance_effect(m, &ds1.subjects[holdout].fingerprint_voxels));
            let ridge_eff = report
                .importance
                .get("ridge")
                .map(|m| importance_effect(m, &ds1.subjects[holdout].fingerprint_voxels));
            println!(
                "seed+{seed_off} {:<14} img {:>6.2} brain {:>6.2} 2way {:>6.2} sem {:>6.2} pix {:>7.4} bc_fp {:+.4} skip_eff {:?} ridge_eff {:?}  [{:.1?}]",
                arm.name(),
                report.image_retrieval,
                report.brain_retrieval,
                report.two_way_retrieval,
                report.semantic_top1,
                report.pixcorr_low,
                report.brain_correlation.get("fingerprint").copied().unwrap_or(0.0),
                skip_eff.map(|v| (v * 1000.0).round() / 1000.0),
                ridge_eff.map(|v| (v * 1000.0).round() / 1000.0),
                t2.elapsed()
            );
        }
    }
}
