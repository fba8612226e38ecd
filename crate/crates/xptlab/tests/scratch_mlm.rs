//! Throwaway calibration probe; not part of the suite.

use std::time::Instant;

use xptlab::cli::checkpoint_io::{save_checkpoint, Checkpoint};
use xptlab::encoder::{EncoderParams, ModelConfig};
use xptlab::prompts::PromptConfig;
use xptlab::synthlang::{
    build_mlm_corpora, build_pair_task, gen_base_corpus, make_languages, subseed, Split,
    SynthConfig,
};
use xptlab::tuning::{evaluate, pretrain_mlm, train, Hyper, PretrainConfig, TuneMode};

#[test]
#[ignore]
fn downstream_probe() {
    let cfg = ModelConfig::desk_default();
    let scfg = SynthConfig::default();
    let corpus = gen_base_corpus(scfg.n_sentences, subseed(scfg.seed, 1));
    let langs = make_languages(&cfg, &scfg).unwrap();
    let ds = build_pair_task(&corpus, &langs, &scfg).unwrap();
    let corpora = build_mlm_corpora(&corpus, &langs, &scfg).unwrap();

    let pcfg = PretrainConfig::default();
    let mut params = EncoderParams::init(&cfg, subseed(pcfg.seed, 0x17));
    let t0 = Instant::now();
    let losses = pretrain_mlm(&cfg, &mut params, &corpora, &pcfg).unwrap();
    for (e, l) in losses.iter().enumerate() {
        if e % 10 == 0 || e + 1 == losses.len() {
            println!("mlm epoch {e}: {l:.4}");
        }
    }
    println!("pretrain took {:.0}s", t0.elapsed().as_secs_f64());
    let ckpt = Checkpoint::pretrained(&cfg, params.clone(), pcfg.seed, losses.clone());
    save_checkpoint(std::path::Path::new("/tmp/probe_pre.ckpt"), &ckpt).unwrap();

    for (tag, mode, plen) in [
        ("pt16", TuneMode::PromptTune, 16),
        ("pt32", TuneMode::PromptTune, 32),
        ("ft", TuneMode::FullFinetune, 16),
    ] {
        let t = Instant::now();
        let hyper = Hyper {
            mode,
            lr: 0.0,
            lr_grid: vec![5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4],
            batch_size: 32,
            epochs: 30,
        };
        let prompt_cfg = PromptConfig { length: plen, ..PromptConfig::default() };
        let out = train(&cfg, &params, &prompt_cfg, &ds, &hyper, 0).unwrap();
        let all: Vec<usize> = (0..ds.n_languages()).collect();
        let train_acc = evaluate(&cfg, &out.params, out.prompts.as_ref(), &ds, Split::Train, &[0])
            .unwrap()[&0];
        let val_acc =
            evaluate(&cfg, &out.params, out.prompts.as_ref(), &ds, Split::Val, &[0]).unwrap()[&0];
        let test = evaluate(&cfg, &out.params, out.prompts.as_ref(), &ds, Split::Test, &all).unwrap();
        let others: Vec<f64> = (1..ds.n_languages()).map(|l| test[&l]).collect();
        let gap = test[&0] - others.iter().sum::<f64>() / others.len() as f64;
        println!(
            "{tag} lr={} train={train_acc:.3} val={val_acc:.3} test[l0={:.3} l1={:.3} l2={:.3} l3={:.3}] gap={gap:.4} ({:.0}s)",
            out.history.lr, test[&0], test[&1], test[&2], test[&3], t.elapsed().as_secs_f64()
        );
    }
}
