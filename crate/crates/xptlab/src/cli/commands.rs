//! Command implementations behind the CLI surface.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;

use crate::cli::checkpoint_io::{
    load_checkpoint, read_backbone_bytes, save_checkpoint, Checkpoint, RatioInfo,
};
use crate::cli::config::ExperimentConfig;
use crate::cli::dataset_io::{load_dataset, save_dataset, DatasetManifest};
use crate::cli::report::{aggregate, read_report, write_report, write_summary, Row};
use crate::encoder::{EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{alignment, collect_reps, rep_change, transfer_gap, RepMatrix};
use crate::projection::{
    boundary_alignment, emit_scatter, fit_logistic, silhouette, tsne, Boundary, TsneConfig,
};
use crate::prompts::{tuned_param_ratio, DeepPrompt};
use crate::synthlang::{
    build_mlm_corpora, build_pair_task, gen_base_corpus, make_languages, subseed,
    MultilingualDataset, Split,
};
use crate::tuning::{evaluate, pretrain_mlm, train, TuneMode};

fn load_and_check_dataset(
    cfg: &ExperimentConfig,
    data_dir: &Path,
) -> Result<(Vec<crate::synthlang::Sentence>, MultilingualDataset, DatasetManifest)> {
    let (corpus, ds, manifest) = load_dataset(data_dir)?;
    let hash = cfg.config_hash()?;
    if manifest.config_hash != hash {
        return Err(Error::Input(format!(
            "dataset in {} was generated under config {}, current config is {}",
            data_dir.display(),
            manifest.config_hash,
            hash
        )));
    }
    ds.validate(&cfg.model)?;
    Ok((corpus, ds, manifest))
}

fn check_model_match(ckpt: &Checkpoint, cfg: &ModelConfig, path: &Path) -> Result<()> {
    if &ckpt.manifest.config != cfg {
        return Err(Error::Input(format!(
            "checkpoint {} was trained under a different model configuration",
            path.display()
        )));
    }
    Ok(())
}

pub fn cmd_gen(config_path: &Path, out_dir: &Path, force: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.config_hash()?;
    info!("generating benchmark (config {hash}) into {}", out_dir.display());

    let corpus = gen_base_corpus(cfg.data.n_sentences, subseed(cfg.data.seed, 1));
    let languages = make_languages(&cfg.model, &cfg.data)?;
    let ds = build_pair_task(&corpus, &languages, &cfg.data)?;
    ds.validate(&cfg.model)?;
    save_dataset(out_dir, &corpus, &ds, &cfg.data, &hash, force)?;

    for split in Split::ALL {
        let langs: Vec<usize> = (0..ds.n_languages())
            .filter(|&l| !ds.split_lang(split, l).is_empty())
            .collect();
        let n = ds.split_lang(split, langs[0]).len();
        info!("  {split:?}: {n} pairs x {} language(s)", langs.len());
    }
    println!(
        "wrote {} samples over {} languages to {}",
        ds.samples.len(),
        ds.n_languages(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_pretrain(config_path: &Path, data_dir: &Path, out_path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let (corpus, ds, _) = load_and_check_dataset(&cfg, data_dir)?;
    let corpora = build_mlm_corpora(&corpus, &ds.languages, &cfg.data)?;
    let n_sentences: usize = corpora.iter().map(|c| c.len()).sum();
    info!(
        "pretraining on {n_sentences} sentences across {} languages",
        corpora.len()
    );

    let mut params = EncoderParams::init(&cfg.model, subseed(cfg.pretrain.seed, 0x17));
    let losses = pretrain_mlm(&cfg.model, &mut params, &corpora, &cfg.pretrain)?;
    for (epoch, loss) in losses.iter().enumerate() {
        info!("  epoch {epoch}: mlm loss {loss:.4}");
    }
    let ckpt = Checkpoint::pretrained(&cfg.model, params, cfg.pretrain.seed, losses.clone());
    save_checkpoint(out_path, &ckpt)?;
    println!(
        "pretrained for {} epochs (final mlm loss {:.4}); checkpoint at {}",
        losses.len(),
        losses.last().expect("at least one epoch"),
        out_path.display()
    );
    Ok(())
}

pub fn cmd_tune(
    config_path: &Path,
    data_dir: &Path,
    ckpt_path: &Path,
    mode: TuneMode,
    seed: u64,
    out_path: &Path,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let (_, ds, _) = load_and_check_dataset(&cfg, data_dir)?;
    let base = load_checkpoint(ckpt_path)?;
    check_model_match(&base, &cfg.model, ckpt_path)?;
    if base.manifest.kind != "pretrained" {
        return Err(Error::Input(format!(
            "tuning starts from a pretrained checkpoint, {} is '{}'",
            ckpt_path.display(),
            base.manifest.kind
        )));
    }

    let hyper = cfg.tune.for_mode(mode);
    info!("tuning mode={} seed={seed}", mode.tag());
    let out = train(&cfg.model, &base.params, &cfg.prompt, &ds, &hyper, seed)?;

    let (backbone, head) = out.params.param_counts();
    let ratios = match &out.prompts {
        Some(p) => RatioInfo {
            tuned_params: p.param_count() + head,
            backbone_params: backbone,
            prompt_params: Some(p.param_count()),
            prompt_ratio: Some(tuned_param_ratio(p.param_count(), backbone)?),
        },
        None => RatioInfo {
            tuned_params: backbone + head,
            backbone_params: backbone,
            prompt_params: None,
            prompt_ratio: None,
        },
    };

    let history = out.history.clone();
    let prompt_cfg = out.prompts.as_ref().map(|_| &cfg.prompt);
    let ckpt = Checkpoint::tuned(&cfg.model, prompt_cfg, out.params, out.prompts, history, ratios);
    save_checkpoint(out_path, &ckpt)?;

    // The freeze invariant, checked on the serialized artifacts themselves:
    // a prompt run must leave every backbone byte of the pretrain
    // checkpoint in place.
    if mode == TuneMode::PromptTune {
        let before = read_backbone_bytes(ckpt_path)?;
        let after = read_backbone_bytes(out_path)?;
        if before != after {
            return Err(Error::Invariant(
                "prompt tuning modified backbone parameters".into(),
            ));
        }
        info!("freeze check passed: {} backbone bytes identical", before.len());
    }

    let h = &ckpt.manifest.history.as_ref().expect("tuned history");
    println!("mode={} seed={seed} lr={}", mode.tag(), h.lr);
    println!(
        "train acc {:.4}, val acc {:.4}",
        h.final_train_acc,
        h.val_acc.last().expect("epochs ran")
    );
    for (lang, acc) in &h.test_acc {
        println!("test acc lang{lang}: {acc:.4}");
    }
    let gap = transfer_gap(&h.test_acc, 0)?;
    println!("transfer gap (source 0): {:.4}", gap);
    println!("checkpoint at {}", out_path.display());
    Ok(())
}

pub fn cmd_eval(config_path: &Path, data_dir: &Path, ckpt_path: &Path, split: Split) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let (_, ds, _) = load_and_check_dataset(&cfg, data_dir)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    check_model_match(&ckpt, &cfg.model, ckpt_path)?;

    let langs: Vec<usize> = (0..ds.n_languages())
        .filter(|&l| !ds.split_lang(split, l).is_empty())
        .collect();
    if langs.is_empty() {
        return Err(Error::Input(format!("{split:?} split is empty")));
    }
    let accs = evaluate(
        &cfg.model,
        &ckpt.params,
        ckpt.prompts.as_ref(),
        &ds,
        split,
        &langs,
    )?;
    println!("checkpoint {} ({})", ckpt_path.display(), ckpt.manifest.kind);
    for (lang, acc) in &accs {
        println!("{split:?} acc lang{lang}: {acc:.4}");
    }
    if accs.len() > 1 {
        println!("transfer gap (source 0): {:.4}", transfer_gap(&accs, 0)?);
    }
    Ok(())
}

/// The three model conditions the analysis contrasts.
struct Condition<'a> {
    method: &'a str,
    params: &'a EncoderParams,
    prompts: Option<&'a DeepPrompt>,
}

pub fn cmd_analyze(
    config_path: &Path,
    data_dir: &Path,
    pretrain_path: &Path,
    ft_path: &Path,
    pt_path: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.config_hash()?;
    let (_, ds, _) = load_and_check_dataset(&cfg, data_dir)?;
    std::fs::create_dir_all(out_dir)?;

    let pre = load_checkpoint(pretrain_path)?;
    let ft = load_checkpoint(ft_path)?;
    let pt = load_checkpoint(pt_path)?;
    for (ckpt, path, want) in [
        (&pre, pretrain_path, "pretrained"),
        (&ft, ft_path, "ft"),
        (&pt, pt_path, "pt"),
    ] {
        check_model_match(ckpt, &cfg.model, path)?;
        if ckpt.manifest.kind != want {
            return Err(Error::Input(format!(
                "{} is a '{}' checkpoint, expected '{want}'",
                path.display(),
                ckpt.manifest.kind
            )));
        }
    }
    if pt.prompts.is_none() {
        return Err(Error::Input(format!(
            "{} carries no prompts",
            pt_path.display()
        )));
    }

    let conditions = [
        Condition { method: "pretrained", params: &pre.params, prompts: None },
        Condition { method: "ft", params: &ft.params, prompts: None },
        Condition { method: "pt", params: &pt.params, prompts: pt.prompts.as_ref() },
    ];
    let n_langs = ds.n_languages();
    let mut rows: Vec<Row> = Vec::new();

    // Representations for every condition and language, persisted for
    // downstream inspection.
    let mut reps: BTreeMap<(String, usize), RepMatrix> = BTreeMap::new();
    for cond in &conditions {
        for lang in 0..n_langs {
            let m = collect_reps(&cfg.model, cond.params, cond.prompts, &ds, lang, cond.method)?;
            m.save(&out_dir.join(format!("reps_{}_lang{lang}_seed{seed}.json", cond.method)))?;
            reps.insert((cond.method.to_string(), lang), m);
        }
        info!("collected {} representations for {}", n_langs, cond.method);
    }

    // How far each tuned model moved from the pretrained encoder.
    for method in ["ft", "pt"] {
        for lang in 0..n_langs {
            let before = &reps[&("pretrained".to_string(), lang)];
            let after = &reps[&(method.to_string(), lang)];
            let value = rep_change(before, after)?;
            rows.push(Row::new("rep_change", method, &format!("lang{lang}"), seed, value));
        }
    }

    // Translation-pair alignment for every language pair and condition.
    for cond in &conditions {
        for a in 0..n_langs {
            for b in (a + 1)..n_langs {
                let al = alignment(
                    &reps[&(cond.method.to_string(), a)],
                    &reps[&(cond.method.to_string(), b)],
                )?;
                let scope = format!("lang{a}-lang{b}");
                rows.push(Row::new("align_pos", cond.method, &scope, seed, al.pos_avg));
                rows.push(Row::new("align_neg", cond.method, &scope, seed, al.neg_avg));
                if let Some(rd) = al.rel_diff() {
                    rows.push(Row::new("align_rel_diff", cond.method, &scope, seed, rd));
                } else {
                    info!("alignment {}/{} has zero negative average; rel-diff skipped", cond.method, scope);
                }
            }
        }
    }

    // Zero-shot transfer: test accuracy per language and the gap, in
    // percentage points.
    let langs: Vec<usize> = (0..n_langs).collect();
    for (method, ckpt) in [("ft", &ft), ("pt", &pt)] {
        let accs = evaluate(
            &cfg.model,
            &ckpt.params,
            ckpt.prompts.as_ref(),
            &ds,
            Split::Test,
            &langs,
        )?;
        let pct: BTreeMap<usize, f64> = accs.iter().map(|(l, a)| (*l, 100.0 * a)).collect();
        for (lang, acc) in &pct {
            rows.push(Row::new("test_acc", method, &format!("lang{lang}"), seed, *acc));
        }
        rows.push(Row::new(
            "transfer_gap",
            method,
            "source0",
            seed,
            transfer_gap(&pct, 0)?,
        ));
    }

    // Project each condition's pooled representations, fit per-language
    // boundaries in the plane, and score their agreement.
    for cond in &conditions {
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut langs_of: Vec<usize> = Vec::new();
        let mut labels_of: Vec<usize> = Vec::new();
        for lang in 0..n_langs {
            let m = &reps[&(cond.method.to_string(), lang)];
            for (i, r) in m.reps.iter().enumerate() {
                points.push(r.clone());
                langs_of.push(lang);
                labels_of.push(m.labels[i]);
            }
        }
        let tcfg = TsneConfig {
            seed: subseed(seed, 0x75E),
            ..cfg.analysis.tsne.clone()
        };
        let t0 = std::time::Instant::now();
        let proj = tsne(&points, &tcfg)?;
        info!(
            "t-SNE for {} finished in {:.1}s (kl {:.4}, jittered: {})",
            cond.method,
            t0.elapsed().as_secs_f64(),
            proj.kl_history.last().expect("history recorded").1,
            proj.jittered
        );
        let lang_sil = silhouette(&proj.coords, &langs_of)?;
        rows.push(Row::new("tsne_lang_silhouette", cond.method, "all", seed, lang_sil));

        let mut boundaries: Vec<Boundary> = Vec::new();
        let mut data: Vec<(Vec<[f64; 2]>, Vec<usize>)> = Vec::new();
        for lang in 0..n_langs {
            let pts: Vec<[f64; 2]> = proj
                .coords
                .iter()
                .zip(&langs_of)
                .filter(|(_, l)| **l == lang)
                .map(|(c, _)| *c)
                .collect();
            let lbs: Vec<usize> = labels_of
                .iter()
                .zip(&langs_of)
                .filter(|(_, l)| **l == lang)
                .map(|(lab, _)| *lab)
                .collect();
            boundaries.push(fit_logistic(&pts, &lbs, lang)?);
            data.push((pts, lbs));
        }
        let ba = boundary_alignment(&boundaries, &data)?;
        rows.push(Row::new(
            "boundary_mean_angle",
            cond.method,
            "all",
            seed,
            ba.mean_angle_deg,
        ));
        rows.push(Row::new(
            "boundary_self_acc",
            cond.method,
            "all",
            seed,
            ba.mean_self_acc,
        ));
        rows.push(Row::new(
            "boundary_cross_acc",
            cond.method,
            "all",
            seed,
            ba.mean_cross_acc,
        ));
        for (a, b, angle) in &ba.angles {
            rows.push(Row::new(
                "boundary_angle",
                cond.method,
                &format!("lang{a}-lang{b}"),
                seed,
                *angle,
            ));
        }

        emit_scatter(
            &out_dir.join(format!("scatter_{}_seed{seed}.svg", cond.method)),
            &proj.coords,
            &langs_of,
            &labels_of,
            &boundaries,
        )?;
    }

    let report_path = out_dir.join(format!("report_seed{seed}.csv"));
    write_report(&report_path, &hash, &rows)?;
    println!("wrote {} metric rows to {}", rows.len(), report_path.display());
    Ok(())
}

pub fn cmd_report(out_path: &Path, inputs: &[std::path::PathBuf]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Input("report needs at least one input file".into()));
    }
    let mut hash: Option<String> = None;
    let mut rows: Vec<Row> = Vec::new();
    for path in inputs {
        let (h, mut r) = read_report(path)?;
        match &hash {
            None => hash = Some(h),
            Some(existing) if *existing != h => {
                return Err(Error::Input(format!(
                    "{} carries config {h}, earlier inputs carry {existing}",
                    path.display()
                )));
            }
            Some(_) => {}
        }
        rows.append(&mut r);
    }
    let agg = aggregate(&rows);
    write_summary(out_path, hash.as_deref().expect("one input"), &agg)?;
    for r in &agg {
        println!(
            "{:<22} {:<10} {:<14} n={} mean={:.4} std={:.4}",
            r.metric, r.method, r.scope, r.n, r.mean, r.std
        );
    }
    println!("summary at {}", out_path.display());
    Ok(())
}
