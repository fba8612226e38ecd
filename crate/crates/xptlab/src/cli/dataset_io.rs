//! Dataset directory layout.
//!
//! `gen` writes four files into a directory:
//!   - `corpus.jsonl`: base sentences, one JSON object per line
//!   - `samples.jsonl`: task samples, one per line, generation order
//!   - `languages.json`: the language permutation specs
//!   - `manifest.json`: config hash, sizes, and SHA-256 of the others
//!
//! Loads verify every recorded hash, so edited or mixed files are refused.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::hex;
use crate::error::{Error, Result};
use crate::synthlang::{LangSpec, MultilingualDataset, Sentence, SynthConfig, TaskSample};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config_hash: String,
    pub synth: SynthConfig,
    pub n_sentences: usize,
    pub n_samples: usize,
    pub corpus_sha256: String,
    pub samples_sha256: String,
    pub languages_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{what} line {}: {e}", i + 1)))
        })
        .collect()
}

/// Write a dataset directory. An existing non-empty directory is refused
/// unless `force` is set.
pub fn save_dataset(
    dir: &Path,
    corpus: &[Sentence],
    ds: &MultilingualDataset,
    scfg: &SynthConfig,
    config_hash: &str,
    force: bool,
) -> Result<()> {
    if dir.exists() {
        let non_empty = dir.read_dir()?.next().is_some();
        if non_empty && !force {
            return Err(Error::Input(format!(
                "{} already holds files; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;

    let corpus_bytes = jsonl(corpus)?;
    let samples_bytes = jsonl(&ds.samples)?;
    let languages_bytes = serde_json::to_vec_pretty(&ds.languages)?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        config_hash: config_hash.to_string(),
        synth: scfg.clone(),
        n_sentences: corpus.len(),
        n_samples: ds.samples.len(),
        corpus_sha256: sha256_hex(&corpus_bytes),
        samples_sha256: sha256_hex(&samples_bytes),
        languages_sha256: sha256_hex(&languages_bytes),
    };

    fs::write(dir.join("corpus.jsonl"), &corpus_bytes)?;
    fs::write(dir.join("samples.jsonl"), &samples_bytes)?;
    fs::write(dir.join("languages.json"), &languages_bytes)?;
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Load and verify a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sentence>, MultilingualDataset, DatasetManifest)> {
    let manifest_bytes = fs::read(dir.join("manifest.json")).map_err(|e| {
        Error::Input(format!("cannot read {}/manifest.json: {e}", dir.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {} unsupported (expected {DATASET_VERSION})",
            manifest.version
        )));
    }

    let corpus_bytes = fs::read(dir.join("corpus.jsonl"))?;
    let samples_bytes = fs::read(dir.join("samples.jsonl"))?;
    let languages_bytes = fs::read(dir.join("languages.json"))?;
    for (name, bytes, want) in [
        ("corpus.jsonl", &corpus_bytes, &manifest.corpus_sha256),
        ("samples.jsonl", &samples_bytes, &manifest.samples_sha256),
        ("languages.json", &languages_bytes, &manifest.languages_sha256),
    ] {
        if &sha256_hex(bytes) != want {
            return Err(Error::Format(format!(
                "{name} does not match the hash in the dataset manifest"
            )));
        }
    }

    let corpus: Vec<Sentence> = parse_jsonl(&corpus_bytes, "corpus.jsonl")?;
    let samples: Vec<TaskSample> = parse_jsonl(&samples_bytes, "samples.jsonl")?;
    let languages: Vec<LangSpec> = serde_json::from_slice(&languages_bytes)
        .map_err(|e| Error::Format(format!("languages.json: {e}")))?;
    if corpus.len() != manifest.n_sentences || samples.len() != manifest.n_samples {
        return Err(Error::Format("dataset sizes disagree with the manifest".into()));
    }
    Ok((corpus, MultilingualDataset { languages, samples }, manifest))
}
