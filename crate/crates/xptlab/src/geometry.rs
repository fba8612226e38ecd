//! Representation-space analysis: how much tuning moved the encoder's
//! sentence vectors, how well translation pairs line up across languages,
//! and how large the cross-lingual transfer gap is.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{bind, forward, BindMode, EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::prompts::DeepPrompt;
use crate::synthlang::{encode_pair, MultilingualDataset};

/// Compensated running sum; keeps long cosine averages honest.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Cosine similarity. Zero-norm inputs have no direction and are rejected.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Internal(format!(
            "cosine over mismatched lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Internal("cosine of a zero vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Sentence representations for one language under one model condition.
/// Rows follow `pair_ids`, which are sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepMatrix {
    pub lang: usize,
    /// Condition label, e.g. "pretrained", "ft", "pt".
    pub tag: String,
    pub pair_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub reps: Vec<Vec<f64>>,
}

impl RepMatrix {
    pub fn n(&self) -> usize {
        self.reps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps.len() != self.pair_ids.len() || self.reps.len() != self.labels.len() {
            return Err(Error::Format(format!(
                "representation matrix rows ({}), pair ids ({}), labels ({}) disagree",
                self.reps.len(),
                self.pair_ids.len(),
                self.labels.len()
            )));
        }
        if self.reps.is_empty() {
            return Err(Error::Format("representation matrix is empty".into()));
        }
        let d = self.reps[0].len();
        for row in &self.reps {
            if row.len() != d {
                return Err(Error::Format("ragged representation matrix".into()));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format("non-finite representation entry".into()));
            }
        }
        if self.pair_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("pair ids are not strictly increasing".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let f = File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        let m: RepMatrix = serde_json::from_reader(BufReader::new(f))?;
        m.validate()?;
        Ok(m)
    }
}

/// Encode every analysis-split sample of one language and keep the CLS
/// vector, in pair-id order.
pub fn collect_reps(
    cfg: &ModelConfig,
    params: &EncoderParams,
    prompts: Option<&DeepPrompt>,
    ds: &MultilingualDataset,
    lang: usize,
    tag: &str,
) -> Result<RepMatrix> {
    let samples = ds.analysis_sorted(lang);
    if samples.is_empty() {
        return Err(Error::Input(format!(
            "no analysis samples for language {lang}"
        )));
    }
    let past = prompts.map(|p| p.as_past_kv()).transpose()?;
    let reps: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let tokens = encode_pair(s, cfg)?;
            let mut tape = Tape::new();
            let bound = bind(&mut tape, cfg, params, past.as_ref(), BindMode::Inference)?;
            let out = forward(&mut tape, &tokens, &bound)?;
            Ok(out.cls.data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RepMatrix {
        lang,
        tag: tag.to_string(),
        pair_ids: samples.iter().map(|s| s.pair_id).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        reps,
    })
}

use crate::tensor::Tape;

fn check_matched(a: &RepMatrix, b: &RepMatrix, same_lang: bool) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if same_lang && a.lang != b.lang {
        return Err(Error::Input(format!(
            "comparing representations of language {} against language {}",
            a.lang, b.lang
        )));
    }
    if !same_lang && a.lang == b.lang {
        return Err(Error::Input(format!(
            "alignment needs two distinct languages, both are {}",
            a.lang
        )));
    }
    if a.pair_ids != b.pair_ids {
        return Err(Error::Input(
            "representation matrices cover different pair ids".into(),
        ));
    }
    Ok(())
}

/// How similar representations stayed under tuning: the mean cosine between
/// matched rows, times 100. Higher means less change.
pub fn rep_change(before: &RepMatrix, after: &RepMatrix) -> Result<f64> {
    check_matched(before, after, true)?;
    let mut sum = KahanSum::default();
    for (x, y) in before.reps.iter().zip(&after.reps) {
        sum.add(cosine(x, y)?);
    }
    Ok(100.0 * sum.value() / before.n() as f64)
}

/// Cross-lingual alignment between two languages' representations of the
/// same pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Mean cosine over the n matched translation pairs.
    pub pos_avg: f64,
    /// Mean cosine over all n(n-1) ordered non-matching cross pairs.
    pub neg_avg: f64,
}

impl Alignment {
    /// Relative difference (pos - neg) / neg; undefined when the negative
    /// average is exactly zero.
    pub fn rel_diff(&self) -> Option<f64> {
        rel_diff(self.pos_avg, self.neg_avg)
    }
}

pub fn rel_diff(pos: f64, neg: f64) -> Option<f64> {
    (neg != 0.0).then(|| (pos - neg) / neg)
}

/// Compare matched translation pairs against all mismatched cross-language
/// pairs. Matrices must cover the same pair ids in the same order.
pub fn alignment(a: &RepMatrix, b: &RepMatrix) -> Result<Alignment> {
    check_matched(a, b, false)?;
    let n = a.n();
    if n < 2 {
        return Err(Error::Input("alignment needs at least two pairs".into()));
    }
    let mut pos = KahanSum::default();
    let mut neg = KahanSum::default();
    for i in 0..n {
        pos.add(cosine(&a.reps[i], &b.reps[i])?);
        for j in 0..n {
            if i != j {
                neg.add(cosine(&a.reps[i], &b.reps[j])?);
            }
        }
    }
    Ok(Alignment {
        pos_avg: pos.value() / n as f64,
        neg_avg: neg.value() / (n * (n - 1)) as f64,
    })
}

/// Per-language accuracy with the gap between the source language and the
/// mean of the rest. Units follow the input (fractions in, fractions out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub source: usize,
    pub acc: BTreeMap<usize, f64>,
    pub gap: f64,
}

/// Source-language accuracy minus the mean accuracy over all other
/// languages.
pub fn transfer_gap(acc: &BTreeMap<usize, f64>, source: usize) -> Result<f64> {
    let src = acc
        .get(&source)
        .ok_or_else(|| Error::Input(format!("no accuracy entry for source language {source}")))?;
    let others: Vec<f64> = acc
        .iter()
        .filter(|(lang, _)| **lang != source)
        .map(|(_, v)| *v)
        .collect();
    if others.is_empty() {
        return Err(Error::Input("transfer gap needs at least one target language".into()));
    }
    Ok(src - others.iter().sum::<f64>() / others.len() as f64)
}

pub fn gap_report(acc: &BTreeMap<usize, f64>, source: usize) -> Result<GapReport> {
    Ok(GapReport {
        source,
        acc: acc.clone(),
        gap: transfer_gap(acc, source)?,
    })
}
