//! Synthetic multilingual benchmark.
//!
//! All languages share one token id space. Language 0 is the "source";
//! language k is defined by a seeded permutation of the content-token range,
//! applied tokenwise. Because the permutation is a bijection, every language
//! has identical statistics, and cross-lingual transfer can be measured
//! without any confound from language difficulty.
//!
//! Sentences come from a template grammar: a subject, verb, and object plus
//! one to five modifiers, where every word belongs to a synonym class of eight
//! interchangeable members. Classes carry selectional preferences (a subject
//! licenses a few verb classes, a verb a few object classes, and so on), so
//! masked-token prediction has real structure to learn. The paired task asks
//! whether two sentences say the same thing: positives swap class members and
//! may move a modifier, hard negatives either cross class lines within a role
//! or exchange the subject and object, and easy negatives pair unrelated
//! sentences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

/// First content token id; everything below is reserved for specials.
pub const CONTENT_START: usize = 8;
/// Members per synonym class.
pub const CLASS_SIZE: usize = 8;
pub const N_SUBJECT_CLASSES: usize = 20;
pub const N_VERB_CLASSES: usize = 13;
pub const N_OBJECT_CLASSES: usize = 20;
pub const N_MODIFIER_CLASSES: usize = 10;
/// Total synonym classes; together they tile the content range exactly.
pub const N_CLASSES: usize =
    N_SUBJECT_CLASSES + N_VERB_CLASSES + N_OBJECT_CLASSES + N_MODIFIER_CLASSES;

/// Grammatical role of a synonym class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Subject,
    Verb,
    Object,
    Modifier,
}

pub fn role_of_class(class: usize) -> Role {
    if class < N_SUBJECT_CLASSES {
        Role::Subject
    } else if class < N_SUBJECT_CLASSES + N_VERB_CLASSES {
        Role::Verb
    } else if class < N_SUBJECT_CLASSES + N_VERB_CLASSES + N_OBJECT_CLASSES {
        Role::Object
    } else {
        Role::Modifier
    }
}

pub fn class_range(role: Role) -> std::ops::Range<usize> {
    match role {
        Role::Subject => 0..N_SUBJECT_CLASSES,
        Role::Verb => N_SUBJECT_CLASSES..N_SUBJECT_CLASSES + N_VERB_CLASSES,
        Role::Object => {
            N_SUBJECT_CLASSES + N_VERB_CLASSES
                ..N_SUBJECT_CLASSES + N_VERB_CLASSES + N_OBJECT_CLASSES
        }
        Role::Modifier => N_SUBJECT_CLASSES + N_VERB_CLASSES + N_OBJECT_CLASSES..N_CLASSES,
    }
}

/// Synonym class of a content token, or None for specials.
pub fn class_of_token(token: usize) -> Option<usize> {
    if token < CONTENT_START {
        None
    } else {
        let c = (token - CONTENT_START) / CLASS_SIZE;
        (c < N_CLASSES).then_some(c)
    }
}

pub fn tokens_of_class(class: usize) -> std::ops::Range<usize> {
    let start = CONTENT_START + class * CLASS_SIZE;
    start..start + CLASS_SIZE
}

/// The grammar assumes the whole vocabulary above the specials is tiled by
/// synonym classes; check that against a model config.
pub fn check_vocab(cfg: &ModelConfig) -> Result<()> {
    let expected = CONTENT_START + N_CLASSES * CLASS_SIZE;
    if cfg.vocab_size != expected {
        return Err(Error::Input(format!(
            "vocabulary size {} does not match the grammar layout ({expected})",
            cfg.vocab_size
        )));
    }
    for id in [cfg.cls_token_id, cfg.pad_token_id, cfg.mask_token_id] {
        if id >= CONTENT_START {
            return Err(Error::Input(format!(
                "special token id {id} collides with the content range"
            )));
        }
    }
    Ok(())
}

/// A language: a bijection over token ids that fixes the specials and
/// permutes the content range, plus an optional pretraining difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangSpec {
    pub lang_id: usize,
    /// Full-vocabulary mapping; `permutation[t]` is the translation of `t`.
    pub permutation: Vec<usize>,
    /// Fraction of MLM corpus tokens replaced by noise for this language.
    pub difficulty: f64,
}

impl LangSpec {
    fn identity(vocab: usize) -> Self {
        Self {
            lang_id: 0,
            permutation: (0..vocab).collect(),
            difficulty: 0.0,
        }
    }

    pub fn apply(&self, token: usize) -> usize {
        self.permutation[token]
    }

    pub fn translate_tokens(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.apply(t)).collect()
    }

    /// Bijectivity over the vocabulary, identity on specials.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.permutation.len() != vocab {
            return Err(Error::Invariant(format!(
                "language {} permutation covers {} ids, vocabulary has {vocab}",
                self.lang_id,
                self.permutation.len()
            )));
        }
        let mut seen = vec![false; vocab];
        for (from, &to) in self.permutation.iter().enumerate() {
            if to >= vocab || seen[to] {
                return Err(Error::Invariant(format!(
                    "language {} permutation is not a bijection at {from}",
                    self.lang_id
                )));
            }
            seen[to] = true;
            if from < CONTENT_START && to != from {
                return Err(Error::Invariant(format!(
                    "language {} moves special token {from}",
                    self.lang_id
                )));
            }
            if from >= CONTENT_START && to < CONTENT_START {
                return Err(Error::Invariant(format!(
                    "language {} maps content token {from} onto a special id",
                    self.lang_id
                )));
            }
        }
        Ok(())
    }
}

/// Benchmark shape: language count, corpus and split sizes, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_languages: usize,
    /// Base sentences generated in language 0.
    pub n_sentences: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_analysis: usize,
    /// Sentences per language in the MLM pretraining corpus.
    pub mlm_per_lang: usize,
    /// MLM corruption rate.
    pub mask_rate: f64,
    pub negative_mode: NegativeMode,
    /// Per-language MLM noise level in [0, 1]; index matches lang_id.
    pub difficulties: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Negatives alternate between hard (cross-class edits or argument
    /// swaps) and easy (mismatched sentences). The default.
    Noisy,
    /// All negatives are hard.
    Strict,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_languages: 4,
            n_sentences: 4000,
            n_train: 800,
            n_val: 200,
            n_test: 400,
            n_analysis: 400,
            mlm_per_lang: 4000,
            mask_rate: 0.15,
            negative_mode: NegativeMode::Noisy,
            difficulties: vec![0.0; 4],
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_languages < 2 {
            return Err(Error::Input("need at least two languages".into()));
        }
        for n in [self.n_train, self.n_val, self.n_test, self.n_analysis] {
            if n == 0 || n % 2 != 0 {
                return Err(Error::Input(format!(
                    "split sizes must be positive and even for exact label balance, got {n}"
                )));
            }
        }
        let total = self.n_train + self.n_val + self.n_test + self.n_analysis;
        // Bases plus worst-case mismatch partners, with slack.
        let needed = total + total / 2 + 4;
        if self.n_sentences < needed {
            return Err(Error::Input(format!(
                "{} base sentences cannot cover {total} pairs (need at least {needed})",
                self.n_sentences
            )));
        }
        if self.mlm_per_lang > self.n_sentences {
            return Err(Error::Input(format!(
                "mlm_per_lang {} exceeds the base corpus of {}",
                self.mlm_per_lang, self.n_sentences
            )));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Input(format!(
                "mask_rate must lie in (0, 1), got {}",
                self.mask_rate
            )));
        }
        if self.difficulties.len() != self.n_languages {
            return Err(Error::Input(format!(
                "{} difficulty entries for {} languages",
                self.difficulties.len(),
                self.n_languages
            )));
        }
        if self.difficulties.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Input("difficulties must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// SplitMix64 step, used to derive independent stream seeds from a master
/// seed.
pub fn subseed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generated sentence with its argument positions. The subject is always
/// the first token; verb and object positions depend on where the modifiers
/// landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub s_idx: usize,
    pub v_idx: usize,
    pub o_idx: usize,
}

/// Classes licensed per class one step down the affinity chain.
pub const AFFINITY_WIDTH: usize = 3;

/// Selectional preferences: which verb classes each subject licenses, which
/// object classes each verb takes, which modifier classes suit each object.
/// Lists hold absolute class ids. Without these constraints every slot would
/// be independent and class membership would leave no statistical trace, so
/// nothing pretrainable would separate paraphrases from cross-class edits.
struct Grammar {
    verbs_for_subject: Vec<Vec<usize>>,
    objects_for_verb: Vec<Vec<usize>>,
    modifiers_for_object: Vec<Vec<usize>>,
}

impl Grammar {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            verbs_for_subject: deal_affinities(rng, N_SUBJECT_CLASSES, class_range(Role::Verb)),
            objects_for_verb: deal_affinities(rng, N_VERB_CLASSES, class_range(Role::Object)),
            modifiers_for_object: deal_affinities(
                rng,
                N_OBJECT_CLASSES,
                class_range(Role::Modifier),
            ),
        }
    }
}

/// Hand `AFFINITY_WIDTH` distinct classes from `pool` to each of `n` lists,
/// consuming whole shuffled copies of the pool so every class is dealt out
/// before any repeats; this keeps vocabulary coverage uniform.
fn deal_affinities(
    rng: &mut ChaCha8Rng,
    n: usize,
    pool: std::ops::Range<usize>,
) -> Vec<Vec<usize>> {
    let pool: Vec<usize> = pool.collect();
    let mut deck: Vec<usize> = Vec::new();
    let mut lists = Vec::with_capacity(n);
    for _ in 0..n {
        let mut list = Vec::with_capacity(AFFINITY_WIDTH);
        while list.len() < AFFINITY_WIDTH {
            if let Some(pos) = deck.iter().position(|c| !list.contains(c)) {
                list.push(deck.remove(pos));
            } else {
                deck = pool.clone();
                deck.shuffle(rng);
            }
        }
        lists.push(list);
    }
    lists
}

/// Draw `n` sentences in language 0. The seed fixes both the grammar's
/// affinity tables and the sampling stream.
pub fn gen_base_corpus(n: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grammar = Grammar::new(&mut rng);
    (0..n).map(|_| gen_sentence(&grammar, &mut rng)).collect()
}

fn draw_from_class(class: usize, rng: &mut ChaCha8Rng) -> usize {
    let r = tokens_of_class(class);
    rng.gen_range(r.start..r.end)
}

fn gen_sentence(grammar: &Grammar, rng: &mut ChaCha8Rng) -> Sentence {
    let s_class = rng.gen_range(class_range(Role::Subject));
    let v_class = grammar.verbs_for_subject[s_class][rng.gen_range(0..AFFINITY_WIDTH)];
    let o_class = grammar.objects_for_verb[v_class - class_range(Role::Verb).start]
        [rng.gen_range(0..AFFINITY_WIDTH)];
    let mod_classes =
        &grammar.modifiers_for_object[o_class - class_range(Role::Object).start];
    let s = draw_from_class(s_class, rng);
    let v = draw_from_class(v_class, rng);
    let o = draw_from_class(o_class, rng);
    let n_mods = rng.gen_range(1..=5);
    let mut gaps: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..n_mods {
        let gap = rng.gen_range(0..3);
        let class = mod_classes[rng.gen_range(0..AFFINITY_WIDTH)];
        gaps[gap].push(draw_from_class(class, rng));
    }
    let mut tokens = vec![s];
    tokens.extend(&gaps[0]);
    let v_idx = tokens.len();
    tokens.push(v);
    tokens.extend(&gaps[1]);
    let o_idx = tokens.len();
    tokens.push(o);
    tokens.extend(&gaps[2]);
    Sentence { tokens, s_idx: 0, v_idx, o_idx }
}

/// Build the language set: language 0 is the identity, the rest are seeded
/// permutations of the content range.
///
/// Permutations shuffle within each role's token block rather than across
/// the whole range. Roles are a property of the shared grammar, like parts
/// of speech, so every language keeps them; synonym classes and selectional
/// preferences still land on arbitrary tokens per language, which is what
/// keeps cross-lingual transfer nontrivial.
pub fn make_languages(cfg: &ModelConfig, scfg: &SynthConfig) -> Result<Vec<LangSpec>> {
    check_vocab(cfg)?;
    scfg.validate()?;
    let mut langs = vec![LangSpec {
        difficulty: scfg.difficulties[0],
        ..LangSpec::identity(cfg.vocab_size)
    }];
    for lang_id in 1..scfg.n_languages {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(scfg.seed, 100 + lang_id as u64));
        let mut permutation: Vec<usize> = (0..CONTENT_START).collect();
        for role in [Role::Subject, Role::Verb, Role::Object, Role::Modifier] {
            let classes = class_range(role);
            let mut block: Vec<usize> = (tokens_of_class(classes.start).start
                ..tokens_of_class(classes.end - 1).end)
                .collect();
            block.shuffle(&mut rng);
            permutation.extend(block);
        }
        langs.push(LangSpec {
            lang_id,
            permutation,
            difficulty: scfg.difficulties[lang_id],
        });
    }
    for lang in &langs {
        lang.validate(cfg.vocab_size)?;
    }
    Ok(langs)
}

/// Dataset split names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Analysis,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Analysis];
}

/// One paired-sentence example. `tokens_a`/`tokens_b` hold content tokens
/// only; [`encode_pair`] adds the CLS and the pad-token separator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens_a: Vec<usize>,
    pub tokens_b: Vec<usize>,
    pub label: usize,
    pub lang: usize,
    pub pair_id: u64,
    pub split: Split,
}

/// Model input for a pair: `[CLS] a [PAD] b`. The pad token doubles as the
/// sentence separator; it is a real, attendable position here.
pub fn encode_pair(sample: &TaskSample, cfg: &ModelConfig) -> Result<Vec<usize>> {
    let len = 2 + sample.tokens_a.len() + sample.tokens_b.len();
    if len > cfg.max_seq {
        return Err(Error::Input(format!(
            "encoded pair length {len} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.push(cfg.cls_token_id);
    tokens.extend_from_slice(&sample.tokens_a);
    tokens.push(cfg.pad_token_id);
    tokens.extend_from_slice(&sample.tokens_b);
    Ok(tokens)
}

/// Translate a language-0 sample into another language.
pub fn translate(sample: &TaskSample, spec: &LangSpec) -> Result<TaskSample> {
    if sample.lang != 0 {
        return Err(Error::Internal(format!(
            "translate expects a language-0 sample, got language {}",
            sample.lang
        )));
    }
    Ok(TaskSample {
        tokens_a: spec.translate_tokens(&sample.tokens_a),
        tokens_b: spec.translate_tokens(&sample.tokens_b),
        label: sample.label,
        lang: spec.lang_id,
        pair_id: sample.pair_id,
        split: sample.split,
    })
}

/// The full benchmark: language specs plus samples for every split.
///
/// Train and val exist only in language 0 (the zero-shot setting); test and
/// analysis are translated into every language with shared pair ids. Samples
/// are ordered by (split, pair_id, lang).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilingualDataset {
    pub languages: Vec<LangSpec>,
    pub samples: Vec<TaskSample>,
}

impl MultilingualDataset {
    pub fn n_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn split_lang(&self, split: Split, lang: usize) -> Vec<&TaskSample> {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.lang == lang)
            .collect()
    }

    /// Analysis samples for one language, ordered by pair id.
    pub fn analysis_sorted(&self, lang: usize) -> Vec<&TaskSample> {
        let mut v = self.split_lang(Split::Analysis, lang);
        v.sort_by_key(|s| s.pair_id);
        v
    }

    /// Check every dataset invariant: language bijections, zero-shot purity,
    /// exact label balance, pair-id uniqueness, and tokenwise translation
    /// consistency across languages.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        check_vocab(cfg)?;
        if self.languages.len() < 2 {
            return Err(Error::Invariant("dataset has fewer than two languages".into()));
        }
        for (i, lang) in self.languages.iter().enumerate() {
            if lang.lang_id != i {
                return Err(Error::Invariant(format!(
                    "language at index {i} carries id {}",
                    lang.lang_id
                )));
            }
            lang.validate(cfg.vocab_size)?;
        }
        let n_langs = self.languages.len();

        use std::collections::{BTreeMap, BTreeSet};
        let mut balance: BTreeMap<(Split, usize), (usize, usize)> = BTreeMap::new();
        let mut seen: BTreeSet<(Split, usize, u64)> = BTreeSet::new();
        let mut originals: BTreeMap<(Split, u64), &TaskSample> = BTreeMap::new();

        for s in &self.samples {
            if s.lang >= n_langs {
                return Err(Error::Invariant(format!(
                    "sample {} names unknown language {}",
                    s.pair_id, s.lang
                )));
            }
            if s.label > 1 {
                return Err(Error::Invariant(format!(
                    "sample {} has non-binary label {}",
                    s.pair_id, s.label
                )));
            }
            if matches!(s.split, Split::Train | Split::Val) && s.lang != 0 {
                return Err(Error::Invariant(format!(
                    "zero-shot purity violated: {:?} split contains language {}",
                    s.split, s.lang
                )));
            }
            for t in s.tokens_a.iter().chain(&s.tokens_b) {
                if class_of_token(*t).is_none() {
                    return Err(Error::Invariant(format!(
                        "sample {} contains non-content token {t}",
                        s.pair_id
                    )));
                }
            }
            encode_pair(s, cfg)?;
            if !seen.insert((s.split, s.lang, s.pair_id)) {
                return Err(Error::Invariant(format!(
                    "duplicate pair id {} in {:?}/language {}",
                    s.pair_id, s.split, s.lang
                )));
            }
            let e = balance.entry((s.split, s.lang)).or_insert((0, 0));
            if s.label == 1 {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            if s.lang == 0 {
                originals.insert((s.split, s.pair_id), s);
            }
        }

        for ((split, lang), (pos, neg)) in &balance {
            if pos != neg {
                return Err(Error::Invariant(format!(
                    "label imbalance in {split:?}/language {lang}: {pos} positive vs {neg} negative"
                )));
            }
        }

        for s in &self.samples {
            if s.lang == 0 {
                continue;
            }
            let Some(orig) = originals.get(&(s.split, s.pair_id)) else {
                return Err(Error::Invariant(format!(
                    "pair {} in language {} has no language-0 original",
                    s.pair_id, s.lang
                )));
            };
            let spec = &self.languages[s.lang];
            if s.tokens_a != spec.translate_tokens(&orig.tokens_a)
                || s.tokens_b != spec.translate_tokens(&orig.tokens_b)
                || s.label != orig.label
            {
                return Err(Error::Invariant(format!(
                    "pair {} in language {} is not the permutation image of its original",
                    s.pair_id, s.lang
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum PairEdit {
    /// Within-class substitutions; meaning preserved.
    Paraphrase,
    /// Substitutions cross class lines within a role; meaning changed.
    CrossClass,
    /// Within-class substitutions plus a subject/object exchange.
    SwapRoles,
}

/// Positive partner: one to three within-class substitutions, sometimes with
/// a modifier moved to another gap.
fn paraphrase(base: &Sentence, rng: &mut ChaCha8Rng) -> Vec<usize> {
    edit(base, rng, PairEdit::Paraphrase)
}

/// Hard negative: the same edit surface as a positive, but the meaning
/// changes. Flavors alternate between cross-class substitutions and
/// subject/object swaps.
fn hard_negative(base: &Sentence, rng: &mut ChaCha8Rng, flavor: usize) -> Vec<usize> {
    if flavor % 2 == 0 {
        edit(base, rng, PairEdit::CrossClass)
    } else {
        edit(base, rng, PairEdit::SwapRoles)
    }
}

fn edit(base: &Sentence, rng: &mut ChaCha8Rng, kind: PairEdit) -> Vec<usize> {
    let mut tokens = base.tokens.clone();
    let k = rng.gen_range(1..=3.min(tokens.len()));
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    positions.shuffle(rng);
    for &i in positions.iter().take(k) {
        let class = class_of_token(tokens[i]).expect("sentence holds content tokens");
        tokens[i] = match kind {
            PairEdit::CrossClass => {
                // A member of a different class with the same role.
                let role = role_of_class(class);
                let range = class_range(role);
                let mut other = rng.gen_range(range.clone());
                while other == class {
                    other = rng.gen_range(range.clone());
                }
                draw_from_class(other, rng)
            }
            _ => {
                // Another member of the same class.
                let offset = (tokens[i] - tokens_of_class(class).start
                    + rng.gen_range(1..CLASS_SIZE))
                    % CLASS_SIZE;
                tokens_of_class(class).start + offset
            }
        };
    }
    if matches!(kind, PairEdit::SwapRoles) {
        tokens.swap(base.s_idx, base.o_idx);
    }
    // Every pair kind shares the same odds of a modifier move so that word
    // order alone says nothing about the label.
    if rng.gen_bool(0.5) {
        tokens = relocate_modifier(&tokens, base, rng);
    }
    tokens
}

/// Move one modifier to a different gap, leaving the argument tokens and the
/// class multiset alone. Sentences always carry at least one modifier.
fn relocate_modifier(tokens: &[usize], base: &Sentence, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut gaps: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, &t) in tokens.iter().enumerate() {
        if i == base.s_idx || i == base.v_idx || i == base.o_idx {
            continue;
        }
        let g = if i < base.v_idx {
            0
        } else if i < base.o_idx {
            1
        } else {
            2
        };
        gaps[g].push(t);
    }
    let total: usize = gaps.iter().map(Vec::len).sum();
    let mut pick = rng.gen_range(0..total);
    let mut from = 0;
    while pick >= gaps[from].len() {
        pick -= gaps[from].len();
        from += 1;
    }
    let moved = gaps[from].remove(pick);
    let mut to = rng.gen_range(0..2);
    if to >= from {
        to += 1;
    }
    let at = rng.gen_range(0..=gaps[to].len());
    gaps[to].insert(at, moved);
    let mut out = vec![tokens[base.s_idx]];
    out.extend(&gaps[0]);
    out.push(tokens[base.v_idx]);
    out.extend(&gaps[1]);
    out.push(tokens[base.o_idx]);
    out.extend(&gaps[2]);
    out
}

/// Build the paired task from a base corpus.
pub fn build_pair_task(
    corpus: &[Sentence],
    languages: &[LangSpec],
    scfg: &SynthConfig,
) -> Result<MultilingualDataset> {
    scfg.validate()?;
    if languages.len() != scfg.n_languages {
        return Err(Error::Input(format!(
            "{} language specs for n_languages {}",
            languages.len(),
            scfg.n_languages
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(scfg.seed, 2));
    let mut cursor = 0usize;
    let next = |cursor: &mut usize| -> Result<&Sentence> {
        let s = corpus
            .get(*cursor)
            .ok_or_else(|| Error::Input("base corpus exhausted during task generation".into()))?;
        *cursor += 1;
        Ok(s)
    };

    let sizes = [
        (Split::Train, scfg.n_train),
        (Split::Val, scfg.n_val),
        (Split::Test, scfg.n_test),
        (Split::Analysis, scfg.n_analysis),
    ];
    let mut samples = Vec::new();
    let mut pair_id = 0u64;
    for (split, n) in sizes {
        let mut labels = vec![1usize; n / 2];
        labels.extend(vec![0usize; n / 2]);
        labels.shuffle(&mut rng);
        let mut neg_counter = 0usize;
        let mut hard_counter = 0usize;
        for label in labels {
            let base = next(&mut cursor)?.clone();
            let tokens_b = if label == 1 {
                paraphrase(&base, &mut rng)
            } else {
                let hard = match scfg.negative_mode {
                    NegativeMode::Strict => true,
                    NegativeMode::Noisy => neg_counter % 2 == 0,
                };
                neg_counter += 1;
                if hard {
                    hard_counter += 1;
                    hard_negative(&base, &mut rng, hard_counter)
                } else {
                    let mut partner = next(&mut cursor)?;
                    while partner.tokens == base.tokens {
                        partner = next(&mut cursor)?;
                    }
                    partner.tokens.clone()
                }
            };
            let original = TaskSample {
                tokens_a: base.tokens,
                tokens_b,
                label,
                lang: 0,
                pair_id,
                split,
            };
            pair_id += 1;
            if matches!(split, Split::Test | Split::Analysis) {
                for spec in languages {
                    if spec.lang_id == 0 {
                        samples.push(original.clone());
                    } else {
                        samples.push(translate(&original, spec)?);
                    }
                }
            } else {
                samples.push(original);
            }
        }
    }
    Ok(MultilingualDataset {
        languages: languages.to_vec(),
        samples,
    })
}

/// Per-language MLM corpora: the first `mlm_per_lang` base sentences,
/// translated into each language, with per-language difficulty noise.
pub fn build_mlm_corpora(
    corpus: &[Sentence],
    languages: &[LangSpec],
    scfg: &SynthConfig,
) -> Result<Vec<Vec<Vec<usize>>>> {
    if corpus.len() < scfg.mlm_per_lang {
        return Err(Error::Input(format!(
            "corpus of {} sentences cannot fill mlm_per_lang {}",
            corpus.len(),
            scfg.mlm_per_lang
        )));
    }
    let vocab_end = CONTENT_START + N_CLASSES * CLASS_SIZE;
    let mut out = Vec::with_capacity(languages.len());
    for spec in languages {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(scfg.seed, 500 + spec.lang_id as u64));
        let sentences = corpus[..scfg.mlm_per_lang]
            .iter()
            .map(|s| {
                let mut tokens = spec.translate_tokens(&s.tokens);
                if spec.difficulty > 0.0 {
                    for t in tokens.iter_mut() {
                        if rng.gen::<f64>() < spec.difficulty {
                            *t = rng.gen_range(CONTENT_START..vocab_end);
                        }
                    }
                }
                tokens
            })
            .collect();
        out.push(sentences);
    }
    Ok(out)
}

/// One MLM training example: the corrupted model input (CLS included) and
/// the positions to predict with their original tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmExample {
    pub tokens: Vec<usize>,
    /// (position in `tokens`, original token id); only corrupted positions.
    pub targets: Vec<(usize, usize)>,
}

/// Pair up each language's sentences, corrupt them BERT-style, and chunk
/// into batches. Examples use the same `[CLS] a [PAD] b` layout as the
/// downstream task, so the separator and the second-segment positions are
/// trained rather than left at their random initialization. Each selected
/// position is masked with probability 0.8, replaced by a random content
/// token with probability 0.1, and kept with probability 0.1; the loss is
/// taken only at selected positions.
pub fn build_mlm_batches(
    corpora: &[Vec<Vec<usize>>],
    cfg: &ModelConfig,
    mask_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<MlmExample>>> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Input(format!(
            "mask_rate must lie in (0, 1), got {mask_rate}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be positive".into()));
    }
    let vocab_end = CONTENT_START + N_CLASSES * CLASS_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(&Vec<usize>, Option<&Vec<usize>>)> = Vec::new();
    for corpus in corpora {
        let mut i = 0;
        while i < corpus.len() {
            let first = &corpus[i];
            let second = corpus.get(i + 1);
            let fits = second.map_or(false, |s| 2 + first.len() + s.len() <= cfg.max_seq);
            if fits {
                pool.push((first, second));
                i += 2;
            } else {
                pool.push((first, None));
                i += 1;
            }
        }
    }
    pool.shuffle(&mut rng);

    let mut examples = Vec::with_capacity(pool.len());
    for (first, second) in pool {
        let mut tokens = vec![cfg.cls_token_id];
        let mut targets = Vec::new();
        for (i, segment) in [Some(first), second].into_iter().flatten().enumerate() {
            if i > 0 {
                tokens.push(cfg.pad_token_id);
            }
            for &original in segment {
                let pos = tokens.len();
                if rng.gen::<f64>() < mask_rate {
                    let r = rng.gen::<f64>();
                    let corrupted = if r < 0.8 {
                        cfg.mask_token_id
                    } else if r < 0.9 {
                        rng.gen_range(CONTENT_START..vocab_end)
                    } else {
                        original
                    };
                    tokens.push(corrupted);
                    targets.push((pos, original));
                } else {
                    tokens.push(original);
                }
            }
        }
        examples.push(MlmExample { tokens, targets });
    }
    Ok(examples.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small_cfg() -> (ModelConfig, SynthConfig) {
        let cfg = ModelConfig::desk_default();
        let scfg = SynthConfig {
            n_languages: 3,
            n_sentences: 400,
            n_train: 40,
            n_val: 20,
            n_test: 20,
            n_analysis: 20,
            mlm_per_lang: 50,
            difficulties: vec![0.0, 0.0, 0.3],
            ..SynthConfig::default()
        };
        (cfg, scfg)
    }

    #[test]
    fn grammar_tiles_vocabulary() {
        assert_eq!(N_CLASSES, 63);
        assert_eq!(CONTENT_START + N_CLASSES * CLASS_SIZE, 512);
        let mut count = 0;
        for c in 0..N_CLASSES {
            let r = tokens_of_class(c);
            for t in r {
                assert_eq!(class_of_token(t), Some(c));
                count += 1;
            }
        }
        assert_eq!(count, 504);
        assert_eq!(class_of_token(0), None);
        assert_eq!(class_of_token(CONTENT_START - 1), None);
    }

    #[test]
    fn corpus_generation_is_deterministic_and_well_formed() {
        let a = gen_base_corpus(50, 13);
        let b = gen_base_corpus(50, 13);
        assert_eq!(a, b);
        for s in &a {
            assert!(s.tokens.len() >= 4 && s.tokens.len() <= 8);
            assert_eq!(s.s_idx, 0);
            assert!(s.v_idx < s.o_idx);
            let s_class = class_of_token(s.tokens[s.s_idx]).unwrap();
            let v_class = class_of_token(s.tokens[s.v_idx]).unwrap();
            let o_class = class_of_token(s.tokens[s.o_idx]).unwrap();
            assert_eq!(role_of_class(s_class), Role::Subject);
            assert_eq!(role_of_class(v_class), Role::Verb);
            assert_eq!(role_of_class(o_class), Role::Object);
            for (i, &t) in s.tokens.iter().enumerate() {
                if i != s.s_idx && i != s.v_idx && i != s.o_idx {
                    assert_eq!(role_of_class(class_of_token(t).unwrap()), Role::Modifier);
                }
            }
        }
    }

    #[test]
    fn affinity_chains_cover_every_class_and_constrain_sentences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grammar::new(&mut rng);
        for (lists, range) in [
            (&g.verbs_for_subject, class_range(Role::Verb)),
            (&g.objects_for_verb, class_range(Role::Object)),
            (&g.modifiers_for_object, class_range(Role::Modifier)),
        ] {
            let mut seen = vec![false; N_CLASSES];
            for list in lists {
                assert_eq!(list.len(), AFFINITY_WIDTH);
                let mut sorted = list.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), AFFINITY_WIDTH, "duplicate class in a list");
                for &c in list {
                    assert!(range.contains(&c));
                    seen[c] = true;
                }
            }
            assert!(range.clone().all(|c| seen[c]), "a class was never dealt");
        }

        // Sentences drawn under the same seed respect the chain.
        let corpus = gen_base_corpus(300, 5);
        for s in &corpus {
            let s_class = class_of_token(s.tokens[s.s_idx]).unwrap();
            let v_class = class_of_token(s.tokens[s.v_idx]).unwrap();
            let o_class = class_of_token(s.tokens[s.o_idx]).unwrap();
            assert!(g.verbs_for_subject[s_class].contains(&v_class));
            assert!(g.objects_for_verb[v_class - class_range(Role::Verb).start]
                .contains(&o_class));
            let mods = &g.modifiers_for_object[o_class - class_range(Role::Object).start];
            for (i, &t) in s.tokens.iter().enumerate() {
                if i != s.s_idx && i != s.v_idx && i != s.o_idx {
                    assert!(mods.contains(&class_of_token(t).unwrap()));
                }
            }
        }
    }

    #[test]
    fn corpus_covers_most_of_the_vocabulary() {
        let corpus = gen_base_corpus(5000, 7);
        let mut seen = vec![false; CONTENT_START + N_CLASSES * CLASS_SIZE];
        for s in &corpus {
            for &t in &s.tokens {
                seen[t] = true;
            }
        }
        let covered = seen[CONTENT_START..].iter().filter(|&&s| s).count();
        let total = N_CLASSES * CLASS_SIZE;
        assert!(covered * 10 >= total * 8, "covered {covered} of {total}");
    }

    #[test]
    fn languages_are_valid_permutations() {
        let (cfg, scfg) = small_cfg();
        let langs = make_languages(&cfg, &scfg).unwrap();
        assert_eq!(langs.len(), 3);
        assert!(langs[0].permutation.iter().enumerate().all(|(i, &t)| i == t));
        for lang in &langs {
            lang.validate(cfg.vocab_size).unwrap();
        }
        // Different languages are different permutations.
        assert_ne!(langs[1].permutation, langs[2].permutation);
        assert_eq!(langs[2].difficulty, 0.3);
        // Roles survive translation; class membership does not have to.
        for lang in &langs[1..] {
            let mut moved_class = false;
            for t in CONTENT_START..cfg.vocab_size {
                let from = class_of_token(t).unwrap();
                let to = class_of_token(lang.apply(t)).unwrap();
                assert_eq!(role_of_class(from), role_of_class(to));
                moved_class |= from != to;
            }
            assert!(moved_class, "language {} permutes whole classes only", lang.lang_id);
        }
    }

    #[test]
    fn task_passes_validation_and_is_deterministic() {
        let (cfg, scfg) = small_cfg();
        let corpus = gen_base_corpus(scfg.n_sentences, subseed(scfg.seed, 1));
        let langs = make_languages(&cfg, &scfg).unwrap();
        let a = build_pair_task(&corpus, &langs, &scfg).unwrap();
        let b = build_pair_task(&corpus, &langs, &scfg).unwrap();
        assert_eq!(a, b);
        a.validate(&cfg).unwrap();

        // Counts: train and val in language 0 only, test and analysis in all.
        assert_eq!(a.split_lang(Split::Train, 0).len(), 40);
        assert_eq!(a.split_lang(Split::Train, 1).len(), 0);
        assert_eq!(a.split_lang(Split::Test, 2).len(), 20);
        assert_eq!(a.split_lang(Split::Analysis, 1).len(), 20);
    }

    #[test]
    fn positives_preserve_class_multiset_and_hard_negatives_break_it() {
        let (cfg, scfg) = small_cfg();
        let corpus = gen_base_corpus(scfg.n_sentences, subseed(scfg.seed, 1));
        let langs = make_languages(&cfg, &scfg).unwrap();
        let ds = build_pair_task(&corpus, &langs, &scfg).unwrap();

        let class_multiset = |tokens: &[usize]| {
            let mut m = BTreeMap::new();
            for &t in tokens {
                *m.entry(class_of_token(t).unwrap()).or_insert(0usize) += 1;
            }
            m
        };
        let mut cross_negs = 0;
        let mut swap_negs = 0;
        for s in ds.split_lang(Split::Train, 0) {
            if s.label == 1 {
                assert_ne!(s.tokens_a, s.tokens_b, "identical positive pair {}", s.pair_id);
                assert_eq!(
                    class_multiset(&s.tokens_a),
                    class_multiset(&s.tokens_b),
                    "positive pair {} drifted across classes",
                    s.pair_id
                );
            } else if s.tokens_a.len() == s.tokens_b.len() {
                // Hard negatives keep the length; easy ones usually do not.
                // Cross-class flavors change the class multiset, swap flavors
                // keep it and only rearrange.
                if class_multiset(&s.tokens_a) != class_multiset(&s.tokens_b) {
                    cross_negs += 1;
                } else {
                    swap_negs += 1;
                }
            }
        }
        assert!(cross_negs > 0, "no cross-class hard negatives found");
        assert!(swap_negs > 0, "no swap hard negatives found");
    }

    #[test]
    fn translation_consistency_holds_and_tampering_is_caught() {
        let (cfg, scfg) = small_cfg();
        let corpus = gen_base_corpus(scfg.n_sentences, subseed(scfg.seed, 1));
        let langs = make_languages(&cfg, &scfg).unwrap();
        let mut ds = build_pair_task(&corpus, &langs, &scfg).unwrap();
        ds.validate(&cfg).unwrap();

        // Flip one translated token.
        let idx = ds
            .samples
            .iter()
            .position(|s| s.lang == 1 && s.split == Split::Test)
            .unwrap();
        let orig = ds.samples[idx].tokens_a[0];
        ds.samples[idx].tokens_a[0] = if orig == CONTENT_START { orig + 1 } else { CONTENT_START };
        let err = ds.validate(&cfg).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn label_tampering_breaks_balance() {
        let (cfg, scfg) = small_cfg();
        let corpus = gen_base_corpus(scfg.n_sentences, subseed(scfg.seed, 1));
        let langs = make_languages(&cfg, &scfg).unwrap();
        let mut ds = build_pair_task(&corpus, &langs, &scfg).unwrap();
        let idx = ds.samples.iter().position(|s| s.split == Split::Train).unwrap();
        ds.samples[idx].label = 1 - ds.samples[idx].label;
        assert!(ds.validate(&cfg).is_err());
    }

    #[test]
    fn encode_pair_layout() {
        let cfg = ModelConfig::desk_default();
        let sample = TaskSample {
            tokens_a: vec![10, 11],
            tokens_b: vec![20, 21, 22],
            label: 1,
            lang: 0,
            pair_id: 0,
            split: Split::Train,
        };
        let tokens = encode_pair(&sample, &cfg).unwrap();
        assert_eq!(
            tokens,
            vec![cfg.cls_token_id, 10, 11, cfg.pad_token_id, 20, 21, 22]
        );
    }

    #[test]
    fn mlm_batches_corrupt_at_roughly_the_mask_rate() {
        let (cfg, scfg) = small_cfg();
        let corpus = gen_base_corpus(scfg.n_sentences, subseed(scfg.seed, 1));
        let langs = make_languages(&cfg, &scfg).unwrap();
        let corpora = build_mlm_corpora(&corpus, &langs, &scfg).unwrap();
        assert_eq!(corpora.len(), 3);
        assert_eq!(corpora[0].len(), 50);

        let batches = build_mlm_batches(&corpora, &cfg, 0.15, 8, 3).unwrap();
        let again = build_mlm_batches(&corpora, &cfg, 0.15, 8, 3).unwrap();
        assert_eq!(batches, again);

        let mut total_tokens = 0usize;
        let mut total_targets = 0usize;
        let mut masked = 0usize;
        let mut paired = 0usize;
        for ex in batches.iter().flatten() {
            assert_eq!(ex.tokens[0], cfg.cls_token_id);
            let separators = ex.tokens.iter().filter(|&&t| t == cfg.pad_token_id).count();
            assert!(separators <= 1);
            paired += separators;
            total_tokens += ex.tokens.len() - 1 - separators;
            total_targets += ex.targets.len();
            for &(pos, original) in &ex.targets {
                assert!(pos >= 1 && pos < ex.tokens.len());
                assert!(class_of_token(original).is_some());
                if ex.tokens[pos] == cfg.mask_token_id {
                    masked += 1;
                }
            }
        }
        assert!(paired > 0, "no two-segment pretraining examples");
        let rate = total_targets as f64 / total_tokens as f64;
        assert!((0.10..=0.20).contains(&rate), "corruption rate {rate}");
        let mask_share = masked as f64 / total_targets as f64;
        assert!((0.70..=0.90).contains(&mask_share), "mask share {mask_share}");
    }

    #[test]
    fn difficulty_noise_perturbs_the_corpus() {
        let (_, scfg) = small_cfg();
        let cfg = ModelConfig::desk_default();
        let corpus = gen_base_corpus(scfg.n_sentences, subseed(scfg.seed, 1));
        let langs = make_languages(&cfg, &scfg).unwrap();
        let corpora = build_mlm_corpora(&corpus, &langs, &scfg).unwrap();
        // Language 2 has difficulty 0.3: its corpus should no longer be the
        // exact permutation image of the base sentences.
        let clean: usize = corpora[1]
            .iter()
            .zip(&corpus[..scfg.mlm_per_lang])
            .filter(|(got, base)| **got == langs[1].translate_tokens(&base.tokens))
            .count();
        let noisy: usize = corpora[2]
            .iter()
            .zip(&corpus[..scfg.mlm_per_lang])
            .filter(|(got, base)| **got == langs[2].translate_tokens(&base.tokens))
            .count();
        assert_eq!(clean, scfg.mlm_per_lang);
        assert!(noisy < scfg.mlm_per_lang / 2);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut scfg = SynthConfig::default();
        scfg.n_train = 801;
        assert!(scfg.validate().is_err());
        let mut scfg = SynthConfig::default();
        scfg.difficulties = vec![0.0; 3];
        assert!(scfg.validate().is_err());
        let mut scfg = SynthConfig::default();
        scfg.difficulties[0] = 1.5;
        assert!(scfg.validate().is_err());
        let mut scfg = SynthConfig::default();
        scfg.n_sentences = 100;
        assert!(scfg.validate().is_err());
    }

    #[test]
    fn translate_rejects_non_source_samples() {
        let (cfg, scfg) = small_cfg();
        let langs = make_languages(&cfg, &scfg).unwrap();
        let sample = TaskSample {
            tokens_a: vec![10],
            tokens_b: vec![11],
            label: 0,
            lang: 1,
            pair_id: 0,
            split: Split::Test,
        };
        assert!(translate(&sample, &langs[2]).is_err());
    }
}
