//! Subcommand implementations.

use crate::CommonArgs;
use anyhow::{bail, Context, Result};
use mindtuner_core::checkpoint;
use mindtuner_core::cohort::{generate_cohort, run_fingerprint_experiment, CohortDataset};
use mindtuner_core::config::ExperimentConfig;
use mindtuner_core::evaluation::{self, evaluate_subject, importance_effect, MetricsReport};
use mindtuner_core::training::{self, FinetuneArm, SharedModel};
use std::io::Write;
use std::path::Path;

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn guard_output_file(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        bail!(
            "{} already exists; pass --overwrite to replace it",
            path.display()
        );
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize, overwrite: bool) -> Result<()> {
    guard_output_file(path, overwrite)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn load_dataset(path: &Path, cfg: &ExperimentConfig) -> Result<CohortDataset> {
    let ds = CohortDataset::load(path)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    let dims = cfg.model.dims();
    if ds.stimuli.dims.token_flat() != dims.token_flat()
        || ds.stimuli.dims.text_dim != dims.text_dim
        || ds.stimuli.dims.lowlevel_dim != dims.lowlevel_dim
    {
        bail!(
            "dataset was generated for different model dimensions ({:?} vs {:?})",
            ds.stimuli.dims,
            dims
        );
    }
    Ok(ds)
}

fn holdout_subject(cfg: &ExperimentConfig, ds: &CohortDataset) -> Result<usize> {
    let s = cfg
        .train
        .holdout_subject
        .unwrap_or(ds.n_subjects().saturating_sub(1));
    if s >= ds.n_subjects() {
        bail!("holdout subject {s} not in dataset of {} subjects", ds.n_subjects());
    }
    Ok(s)
}

fn pretrain_subjects(cfg: &ExperimentConfig, ds: &CohortDataset) -> Result<Vec<usize>> {
    let holdout = holdout_subject(cfg, ds)?;
    Ok((0..ds.n_subjects()).filter(|&s| s != holdout).collect())
}

/// Worker-thread cap: MINDTUNER_THREADS, else the machine's parallelism.
fn worker_threads() -> usize {
    std::env::var("MINDTUNER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

pub fn gen_cohort(common: &CommonArgs, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = generate_cohort(&cfg.cohort, &cfg.model.dims(), cfg.seed)?;
    ds.save(out, &cfg.hash(), common.overwrite)?;
    println!(
        "cohort written to {}: {} subjects, {} train + {} test stimuli, gamma {:.2}, seed {}",
        out.display(),
        ds.n_subjects(),
        ds.n_train,
        ds.n_test,
        ds.gamma,
        cfg.seed
    );
    for s in &ds.subjects {
        println!(
            "  subject {}: {} voxels, {} fingerprint voxels",
            s.subject_id,
            s.d_s,
            s.fingerprint_voxels.len()
        );
    }
    Ok(())
}

pub fn pretrain(
    common: &CommonArgs,
    dataset: &Path,
    resume_from: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(dataset, &cfg)?;
    let subjects = pretrain_subjects(&cfg, &ds)?;
    let resume = match resume_from {
        Some(dir) => {
            let loaded = checkpoint::load_shared(dir)?;
            if loaded.config_hash != cfg.hash() {
                log::warn!(
                    "resuming from a checkpoint with a different config hash ({} vs {})",
                    loaded.config_hash,
                    cfg.hash()
                );
            }
            if loaded.epoch_completed >= cfg.train.pretrain_epochs {
                bail!(
                    "checkpoint already completed {} epochs (config asks for {})",
                    loaded.epoch_completed,
                    cfg.train.pretrain_epochs
                );
            }
            println!("resuming pretraining from epoch {}", loaded.epoch_completed);
            Some((
                loaded.model,
                loaded.opt.context("checkpoint has no optimizer state; cannot resume")?,
                loaded.epoch_completed,
            ))
        }
        None => None,
    };

    if !common.overwrite && out.join("manifest.json").exists() {
        bail!("{} already exists; pass --overwrite to replace it", out.display());
    }
    let every = cfg.train.checkpoint_every;
    let hash = cfg.hash();
    let penalty = cfg.train.ridge_penalty;
    let seed = cfg.seed;
    let mut hook = |m: &SharedModel,
                    o: &mindtuner_core::optim::OptimState,
                    done: usize|
     -> mindtuner_core::Result<()> {
        if every > 0 && done % every == 0 {
            checkpoint::save_shared(out, m, Some(o), done, penalty, &hash, seed, true)?;
            log::info!("checkpoint written at epoch {done}");
        }
        Ok(())
    };
    let (model, opt) = training::pretrain(&ds, &cfg, &subjects, resume, Some(&mut hook))?;
    checkpoint::save_shared(
        out,
        &model,
        Some(&opt),
        cfg.train.pretrain_epochs,
        penalty,
        &hash,
        seed,
        true,
    )?;
    println!(
        "pretrained on subjects {:?} for {} epochs; loss {:.4} -> {:.4}; checkpoint at {}",
        subjects,
        cfg.train.pretrain_epochs,
        model.loss_trace.first().copied().unwrap_or(f64::NAN),
        model.loss_trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

pub fn finetune(
    common: &CommonArgs,
    dataset: &Path,
    pretrained: &Path,
    resume_from: Option<&Path>,
    sessions: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(dataset, &cfg)?;
    let loaded = checkpoint::load_shared(pretrained)?;
    let shared = loaded.model;
    let subject = holdout_subject(&cfg, &ds)?;
    let arm = FinetuneArm::parse(&cfg.train.arm)?;

    let n_sessions = sessions.unwrap_or(cfg.train.sessions);
    let ds = if n_sessions > 0 {
        ds.take_sessions(n_sessions, subject)?
    } else {
        ds
    };
    println!(
        "fine-tuning subject {subject} ({} trials, arm {})",
        ds.trials[subject].train_stimuli.len(),
        arm.name()
    );

    let resume = match resume_from {
        Some(dir) => {
            let l = checkpoint::load_adapted(dir)?;
            if l.epoch_completed >= cfg.train.epochs {
                bail!("checkpoint already completed {} epochs", l.epoch_completed);
            }
            println!("resuming fine-tuning from epoch {}", l.epoch_completed);
            Some((
                l.model,
                l.opt.context("checkpoint has no optimizer state; cannot resume")?,
                l.epoch_completed,
            ))
        }
        None => None,
    };

    if !common.overwrite && out.join("manifest.json").exists() {
        bail!("{} already exists; pass --overwrite to replace it", out.display());
    }
    let every = cfg.train.checkpoint_every;
    let hash = cfg.hash();
    let shared_ref = &shared;
    let pre_hash = loaded.config_hash.clone();
    let cfg_ref = &cfg;
    let mut hook = |m: &mindtuner_core::training::AdaptedModel,
                    o: &mindtuner_core::optim::OptimState,
                    done: usize|
     -> mindtuner_core::Result<()> {
        if every > 0 && done % every == 0 {
            checkpoint::save_adapted(
                out,
                shared_ref,
                m,
                Some(o),
                done,
                cfg_ref.adapters.rank,
                cfg_ref.adapters.lora_alpha,
                &cfg_ref.adapters.activation,
                cfg_ref.train.ridge_penalty,
                &pre_hash,
                &hash,
                cfg_ref.seed,
                true,
            )?;
            log::info!("checkpoint written at epoch {done}");
        }
        Ok(())
    };
    let (model, opt) = training::finetune(&shared, &ds, subject, arm, &cfg, None, resume, Some(&mut hook))?;
    checkpoint::save_adapted(
        out,
        &shared,
        &model,
        Some(&opt),
        cfg.train.epochs,
        cfg.adapters.rank,
        cfg.adapters.lora_alpha,
        &cfg.adapters.activation,
        cfg.train.ridge_penalty,
        &loaded.config_hash,
        &cfg.hash(),
        cfg.seed,
        true,
    )?;
    println!(
        "fine-tuned subject {subject} for {} epochs; loss {:.4} -> {:.4}; checkpoint at {}",
        cfg.train.epochs,
        model.loss_trace.first().copied().unwrap_or(f64::NAN),
        model.loss_trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn print_report(report: &MetricsReport) {
    println!("  {:<22} {:>10}", "metric", "value");
    let rows: Vec<(&str, String)> = vec![
        ("image retrieval %", format!("{:.2}", report.image_retrieval)),
        ("brain retrieval %", format!("{:.2}", report.brain_retrieval)),
        ("chance %", format!("{:.2}", report.chance_retrieval)),
        ("two-way retrieval %", format!("{:.2}", report.two_way_retrieval)),
        ("two-way tokens %", format!("{:.2}", report.two_way_prior)),
        ("pixcorr (low)", format!("{:.4}", report.pixcorr_low)),
        ("pixcorr (blend 3:1)", format!("{:.4}", report.pixcorr_blend)),
        ("semantic top-1 %", format!("{:.2}", report.semantic_top1)),
        ("semantic chance %", format!("{:.2}", report.semantic_chance)),
    ];
    for (k, v) in rows {
        println!("  {k:<22} {v:>10}");
    }
    for (region, r) in &report.brain_correlation {
        println!("  brain corr {region:<12} {r:>9.4}");
    }
}

pub fn eval(common: &CommonArgs, dataset: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(dataset, &cfg)?;
    let manifest = mindtuner_core::container::read_manifest(ckpt)?;
    let phase = manifest
        .meta
        .get("phase")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    match phase.as_str() {
        "adapted" => {
            let loaded = checkpoint::load_adapted(ckpt)?;
            let report = evaluate_subject(
                &loaded.shared.net,
                &loaded.model.head,
                loaded.model.adapters.as_ref(),
                &loaded.model.projector,
                &ds,
                loaded.model.subject_id,
                &cfg.eval,
                &cfg.hash(),
                cfg.seed,
                loaded.model.arm.name(),
                loaded.model.loss_trace.clone(),
            )?;
            write_json(out, &report, common.overwrite)?;
            println!(
                "subject {} ({} arm) metrics -> {}",
                report.subject_id,
                report.arm,
                out.display()
            );
            print_report(&report);
        }
        "pretrained" => {
            let loaded = checkpoint::load_shared(ckpt)?;
            let mut reports = Vec::new();
            for (&s, head) in &loaded.model.heads {
                let report = evaluate_subject(
                    &loaded.model.net,
                    head,
                    None,
                    &loaded.model.projector,
                    &ds,
                    s,
                    &cfg.eval,
                    &cfg.hash(),
                    cfg.seed,
                    "pretrained",
                    loaded.model.loss_trace.clone(),
                )?;
                println!("pretrain subject {s}:");
                print_report(&report);
                reports.push(report);
            }
            write_json(out, &reports, common.overwrite)?;
            println!("per-subject metrics -> {}", out.display());
        }
        other => bail!("cannot evaluate checkpoint phase '{other}'"),
    }
    Ok(())
}

pub fn ablate(
    common: &CommonArgs,
    dataset: &Path,
    pretrained: &Path,
    sessions: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.ablate.validate()?;
    let ds = load_dataset(dataset, &cfg)?;
    let loaded = checkpoint::load_shared(pretrained)?;
    let shared = loaded.model;
    let subject = holdout_subject(&cfg, &ds)?;
    let n_sessions = sessions.unwrap_or(cfg.train.sessions);
    let ds = if n_sessions > 0 {
        ds.take_sessions(n_sessions, subject)?
    } else {
        ds
    };

    // grid: named arms at the default rank + rank cells on the full arm
    let mut cells: Vec<(String, FinetuneArm, usize)> = Vec::new();
    for arm in &cfg.ablate.arms {
        cells.push((arm.clone(), FinetuneArm::parse(arm)?, cfg.adapters.rank));
    }
    for &rank in &cfg.ablate.ranks {
        cells.push((format!("rank_{rank}"), FinetuneArm::Full, rank));
    }
    if cells.is_empty() {
        bail!("ablation grid is empty");
    }
    guard_output_file(&out.join("summary.csv"), common.overwrite)?;

    let threads = worker_threads().max(1);
    println!(
        "running {} ablation cells on subject {subject} ({} worker threads)",
        cells.len(),
        threads
    );
    let mut results: Vec<Option<Result<MetricsReport>>> = (0..cells.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results_mx = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (name, arm, rank) = &cells[i];
                let mut cell_cfg = cfg.clone();
                cell_cfg.adapters.rank = *rank;
                let run = || -> Result<MetricsReport> {
                    let (model, _) =
                        training::finetune(&shared, &ds, subject, *arm, &cell_cfg, None, None, None)?;
                    Ok(evaluation::evaluate_adapted(
                        &shared,
                        &model,
                        &ds,
                        &cell_cfg.eval,
                        &cell_cfg.hash(),
                        cell_cfg.seed,
                    )?)
                };
                let report = run();
                results_mx.lock().unwrap()[i] = Some(report.map(|mut r| {
                    r.arm = name.clone();
                    r
                }));
            });
        }
    });

    let mut summary = String::from(
        "cell,image_retrieval,brain_retrieval,two_way_retrieval,two_way_prior,pixcorr_low,pixcorr_blend,semantic_top1\n",
    );
    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}",
        "cell", "img%", "brain%", "2way%", "2wayTok%", "pixcorr", "blend", "sem%"
    );
    for (i, (name, _, _)) in cells.iter().enumerate() {
        let report = results[i]
            .take()
            .unwrap()
            .with_context(|| format!("ablation cell '{name}' failed"))?;
        write_json(
            &out.join(format!("{name}.json")),
            &report,
            common.overwrite,
        )?;
        summary.push_str(&format!(
            "{name},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.4}\n",
            report.image_retrieval,
            report.brain_retrieval,
            report.two_way_retrieval,
            report.two_way_prior,
            report.pixcorr_low,
            report.pixcorr_blend,
            report.semantic_top1
        ));
        println!(
            "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>9.4} {:>9.4} {:>9.2}",
            name,
            report.image_retrieval,
            report.brain_retrieval,
            report.two_way_retrieval,
            report.two_way_prior,
            report.pixcorr_low,
            report.pixcorr_blend,
            report.semantic_top1
        );
    }
    std::fs::write(out.join("summary.csv"), summary)?;
    println!("ablation outputs in {}", out.display());
    Ok(())
}

pub fn fingerprint(common: &CommonArgs, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let fit = run_fingerprint_experiment(&cfg.fingerprint, cfg.seed)?;
    guard_output_file(&out.join("fingerprint.json"), common.overwrite)?;
    let payload = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "r_within": fit.r_within,
        "r_between": fit.r_between,
        "beta0": fit.beta0,
        "beta1": fit.beta1,
        "beta0_other": fit.beta0_other,
        "beta1_other": fit.beta1_other,
    });
    write_json(&out.join("fingerprint.json"), &payload, common.overwrite)?;

    let mut csv = String::from("observer,block");
    for l in 0..cfg.fingerprint.locations {
        csv.push_str(&format!(",di_{l}"));
    }
    csv.push('\n');
    for (o, blocks) in fit.di.iter().enumerate() {
        for (b, dis) in blocks.iter().enumerate() {
            csv.push_str(&format!("{o},{b}"));
            for v in dis {
                csv.push_str(&format!(",{v:.6}"));
            }
            csv.push('\n');
        }
    }
    let csv_path = out.join("di_scatter.csv");
    guard_output_file(&csv_path, common.overwrite)?;
    let mut f = std::fs::File::create(&csv_path)?;
    f.write_all(csv.as_bytes())?;
    println!(
        "distortion-index experiment: r_within {:.3} (target 0.71), r_between {:.3} (target 0.22)",
        fit.r_within, fit.r_between
    );
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn importance(common: &CommonArgs, dataset: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(dataset, &cfg)?;
    let loaded = checkpoint::load_adapted(ckpt)?;
    let maps = evaluation::voxel_importance(&loaded.model.head, loaded.model.adapters.as_ref());
    let subject = &ds.subjects[loaded.model.subject_id];
    let mut effects = serde_json::Map::new();
    for (kind, map) in &maps {
        effects.insert(
            kind.clone(),
            serde_json::json!(importance_effect(map, &subject.fingerprint_voxels)),
        );
    }
    let payload = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "subject_id": loaded.model.subject_id,
        "fingerprint_voxels": subject.fingerprint_voxels,
        "maps": maps,
        "fingerprint_minus_complement": effects,
    });
    write_json(out, &payload, common.overwrite)?;
    println!("importance maps for subject {} -> {}", loaded.model.subject_id, out.display());
    for (kind, map) in &maps {
        println!(
            "  {kind:<10} fingerprint-minus-complement effect {:+.4} ({} voxels)",
            importance_effect(map, &subject.fingerprint_voxels),
            map.len()
        );
    }
    Ok(())
}
