//! End-to-end training behavior on a small synthetic cohort: pretraining
//! learns, fine-tuning respects the frozen base and the zero-init adapter
//! guarantee, checkpoints resume bit-exactly, and runs are deterministic.

use mindtuner_core::checkpoint;
use mindtuner_core::cohort::generate_cohort;
use mindtuner_core::config::ExperimentConfig;
use mindtuner_core::evaluation::{evaluate_adapted, evaluate_subject};
use mindtuner_core::training::{
    contrastive_schedule, finetune, pretrain, ContrastiveKind, FinetuneArm,
};

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(
        r#"
        seed = 31415
        [cohort]
        subjects = 3
        latent_dim = 16
        voxels_min = 60
        voxels_max = 90
        train_stimuli = 120
        test_stimuli = 30
        session_size = 60
        categories = 8
        category_strength = 0.7
        text_jitter = 0.25
        fingerprint_fraction = 0.25
        fingerprint_hidden = 16
        fingerprint_gain = 2.0
        gamma = 0.8
        noise_sigma = 0.15
        [model]
        d_0 = 24
        hidden = 48
        tokens = 4
        token_dim = 16
        text_dim = 16
        lowlevel_dim = 24
        retrieval_dim = 16
        prior_hidden = 32
        [train]
        epochs = 4
        pretrain_epochs = 4
        batch_size = 10
        pretrain_batch_size = 20
        lr = 2e-3
        weight_decay = 0.01
        warmup_frac = 0.3
        start_div = 25.0
        final_div = 1000.0
        clip_grad_norm = 1.0
        contrastive_switch_frac = 0.3333333333333333
        ridge_penalty = 1e-4
        head_init = "zero"
        sessions = 1
        [adapters]
        rank = 2
        lora_alpha = 2.0
        activation = "tanh"
        ridge_lora = true
        "#,
    )
    .unwrap()
}

#[test]
fn schedule_switches_in_the_final_third() {
    assert_eq!(
        contrastive_schedule(0, 150, 1.0 / 3.0).unwrap(),
        ContrastiveKind::BiMixCo
    );
    assert_eq!(
        contrastive_schedule(99, 150, 1.0 / 3.0).unwrap(),
        ContrastiveKind::BiMixCo
    );
    assert_eq!(
        contrastive_schedule(100, 150, 1.0 / 3.0).unwrap(),
        ContrastiveKind::SoftClip
    );
    // switch fraction 0: soft loss never used
    for e in 0..150 {
        assert_eq!(
            contrastive_schedule(e, 150, 0.0).unwrap(),
            ContrastiveKind::BiMixCo
        );
    }
    assert!(contrastive_schedule(150, 150, 0.5).is_err());
}

#[test]
fn pretrain_learns_and_finetune_keeps_base_frozen() {
    let cfg = tiny_config();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    let (shared, _) = pretrain(&ds, &cfg, &[0, 1], None, None).unwrap();
    assert_eq!(shared.loss_trace.len(), cfg.train.pretrain_epochs);
    assert!(
        shared.loss_trace.last().unwrap() < shared.loss_trace.first().unwrap(),
        "pretraining loss should fall: {:?}",
        shared.loss_trace
    );

    // fine-tune the held-out subject
    let net_before: Vec<Vec<f64>> = shared
        .net
        .named_params()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    let (adapted, _) = finetune(&shared, &ds, 2, FinetuneArm::Full, &cfg, None, None, None).unwrap();
    // frozen census: shared weights bit-identical
    for ((_, after), before) in shared.net.named_params().iter().zip(&net_before) {
        assert!(after
            .data()
            .iter()
            .zip(before)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    // adapters actually learned something
    let set = adapted.adapters.as_ref().unwrap();
    assert!(set
        .lora
        .values()
        .any(|l| l.a.data().iter().any(|&v| v != 0.0)));
    // evaluation produces a valid report
    let report = evaluate_adapted(&shared, &adapted, &ds, &cfg.eval, "hash", cfg.seed).unwrap();
    report.validate().unwrap();
    assert_eq!(report.subject_id, 2);
    assert_eq!(report.arm, "full");
    assert!(report.importance.contains_key("ridge"));
    assert!(report.importance.contains_key("skip_lora"));
    assert_eq!(
        report.importance["ridge"].len(),
        ds.subjects[2].d_s,
        "importance map length equals the voxel count"
    );
}

#[test]
fn contamination_guard_rejects_pretrain_subject() {
    let cfg = tiny_config();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    let (shared, _) = pretrain(&ds, &cfg, &[0, 1], None, None).unwrap();
    assert!(finetune(&shared, &ds, 0, FinetuneArm::Full, &cfg, None, None, None).is_err());
}

#[test]
fn zero_finetune_steps_equal_fresh_head_baseline() {
    let cfg = tiny_config();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    let (shared, _) = pretrain(&ds, &cfg, &[0, 1], None, None).unwrap();
    let (adapted, _) =
        finetune(&shared, &ds, 2, FinetuneArm::Full, &cfg, Some(0), None, None).unwrap();
    let report = evaluate_adapted(&shared, &adapted, &ds, &cfg.eval, "h", cfg.seed).unwrap();
    // baseline: fresh zero head, fresh (zero-output) adapters are a no-op,
    // shared projector
    let baseline_head = mindtuner_core::alignment::RidgeHead::new(
        2,
        ds.subjects[2].d_s,
        cfg.model.dims().d_0,
        cfg.train.ridge_penalty,
    );
    let baseline = evaluate_subject(
        &shared.net,
        &baseline_head,
        None,
        &shared.projector,
        &ds,
        2,
        &cfg.eval,
        "h",
        cfg.seed,
        "baseline",
        Vec::new(),
    )
    .unwrap();
    assert_eq!(report.image_retrieval, baseline.image_retrieval);
    assert_eq!(report.brain_retrieval, baseline.brain_retrieval);
    assert_eq!(report.pixcorr_low, baseline.pixcorr_low);
    assert_eq!(report.semantic_top1, baseline.semantic_top1);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    let run = || {
        let (shared, _) = pretrain(&ds, &cfg, &[0, 1], None, None).unwrap();
        let (adapted, _) =
            finetune(&shared, &ds, 2, FinetuneArm::LoraSkip, &cfg, None, None, None).unwrap();
        (
            shared.loss_trace.clone(),
            adapted.head.weight.data().to_vec(),
            adapted
                .adapters
                .as_ref()
                .unwrap()
                .named_params()
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect::<Vec<f64>>(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0, "loss traces must match bit-for-bit");
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn pretrain_checkpoint_resume_is_bit_exact() {
    let cfg = tiny_config();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    // one full run, checkpointing at the epoch-2 boundary through the hook
    let dir = tempfile::tempdir().unwrap();
    let dirpath = dir.path().to_path_buf();
    let penalty = cfg.train.ridge_penalty;
    let seed = cfg.seed;
    let mut hook = |m: &mindtuner_core::training::SharedModel,
                    o: &mindtuner_core::optim::OptimState,
                    done: usize|
     -> mindtuner_core::Result<()> {
        if done == 2 {
            checkpoint::save_shared(&dirpath, m, Some(o), done, penalty, "hash", seed, true)?;
        }
        Ok(())
    };
    let (full, _) = pretrain(&ds, &cfg, &[0, 1], None, Some(&mut hook)).unwrap();
    let loaded = checkpoint::load_shared(dir.path()).unwrap();
    assert_eq!(loaded.epoch_completed, 2);
    let (resumed, _) = pretrain(
        &ds,
        &cfg,
        &[0, 1],
        Some((loaded.model, loaded.opt.unwrap(), loaded.epoch_completed)),
        None,
    )
    .unwrap();
    for ((name, a), (_, b)) in full.net.named_params().iter().zip(resumed.net.named_params()) {
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "parameter {name} differs after resume"
        );
    }
    for (s, head) in &full.heads {
        let r = &resumed.heads[s];
        assert!(head
            .weight
            .data()
            .iter()
            .zip(r.weight.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn finetune_checkpoint_resume_is_bit_exact() {
    let cfg = tiny_config();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    let (shared, _) = pretrain(&ds, &cfg, &[0, 1], None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let dirpath = dir.path().to_path_buf();
    let rank = cfg.adapters.rank;
    let alpha = cfg.adapters.lora_alpha;
    let act = cfg.adapters.activation.clone();
    let penalty = cfg.train.ridge_penalty;
    let seed = cfg.seed;
    let shared_ref = &shared;
    let mut hook = |m: &mindtuner_core::training::AdaptedModel,
                    o: &mindtuner_core::optim::OptimState,
                    done: usize|
     -> mindtuner_core::Result<()> {
        if done == 2 {
            checkpoint::save_adapted(
                &dirpath, shared_ref, m, Some(o), done, rank, alpha, &act, penalty, "prehash",
                "hash", seed, true,
            )?;
        }
        Ok(())
    };
    let (full2, _) =
        finetune(&shared, &ds, 2, FinetuneArm::Full, &cfg, None, None, Some(&mut hook)).unwrap();
    let full = full2;
    let loaded = checkpoint::load_adapted(dir.path()).unwrap();
    assert_eq!(loaded.epoch_completed, 2);
    assert_eq!(loaded.model.subject_id, 2);
    let (resumed, _) = finetune(
        &shared,
        &ds,
        2,
        FinetuneArm::Full,
        &cfg,
        None,
        Some((loaded.model, loaded.opt.unwrap(), loaded.epoch_completed)),
        None,
    )
    .unwrap();
    assert!(full
        .head
        .weight
        .data()
        .iter()
        .zip(resumed.head.weight.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    let fa = full.adapters.as_ref().unwrap().named_params();
    let ra = resumed.adapters.as_ref().unwrap().named_params();
    for ((name, a), (_, b)) in fa.iter().zip(&ra) {
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "adapter tensor {name} differs after resume"
        );
    }
    assert!(full
        .projector
        .p
        .data()
        .iter()
        .zip(resumed.projector.p.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn ablation_arms_have_expected_structure() {
    let cfg = tiny_config();
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed).unwrap();
    let (shared, _) = pretrain(&ds, &cfg, &[0, 1], None, None).unwrap();
    let mut fast = cfg.clone();
    fast.train.epochs = 1;

    let (ridge_only, _) =
        finetune(&shared, &ds, 2, FinetuneArm::RidgeOnly, &fast, None, None, None).unwrap();
    assert!(ridge_only.adapters.is_none());

    let (lora_only, _) =
        finetune(&shared, &ds, 2, FinetuneArm::LoraOnly, &fast, None, None, None).unwrap();
    let set = lora_only.adapters.as_ref().unwrap();
    assert!(!set.lora.is_empty());
    assert!(set.skip.is_empty());

    let (lora_skip, _) =
        finetune(&shared, &ds, 2, FinetuneArm::LoraSkip, &fast, None, None, None).unwrap();
    let set = lora_skip.adapters.as_ref().unwrap();
    assert!(!set.skip.is_empty());
    // token-layer skip flagged out of the non-linearity loss
    assert_eq!(set.skip_loss_excluded, vec!["skip.token".to_string()]);

    let (nonlinear, _) =
        finetune(&shared, &ds, 2, FinetuneArm::NonLinearHead, &fast, None, None, None).unwrap();
    assert_eq!(
        nonlinear.head.activation,
        mindtuner_core::alignment::HeadActivation::Tanh
    );
}
