//! Dysfluency injection over timed phoneme sequences and corpus assembly.
//!
//! Two rule families are provided. The text-space rules (repetition,
//! missing, block, replacement, prolongation) mirror a TTS-driven pipeline;
//! the acoustic-space word repetition operates on already-timed words with
//! silence padding proportional to the word length. Durations come from a
//! log-normal per-class model standing in for a TTS duration predictor.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{build_alignment, AlignParams, AlignmentMatrix};
use crate::phonology::{
    apply_process, split_words, Lexicon, PhonemeToken, PhonologicalProcess, PhonologyError,
    Stress, SILENCE,
};
use crate::{FRAME_MS, MAX_FRAMES};

/// Pause bounds for inserted silences, in frames (0.5 s and 2.0 s).
pub const PAUSE_MIN_FRAMES: usize = 25;
pub const PAUSE_MAX_FRAMES: usize = 100;

const MAX_RETRIES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("no deletable syllable or final consonant")]
    NoDeletableTarget,
    #[error("need at least two words for a sentence-internal block")]
    TooShort,
    #[error("no phoneme is eligible for a phonological process")]
    NoEligiblePhoneme,
    #[error("sample {index} could not be generated within {MAX_RETRIES} retries")]
    GenerationExhausted { index: usize },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Phonology(#[from] PhonologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DysfluencyType {
    Repetition,
    Block,
    Missing,
    Replacement,
    Prolongation,
}

impl DysfluencyType {
    pub const ALL: [DysfluencyType; 5] = [
        DysfluencyType::Repetition,
        DysfluencyType::Block,
        DysfluencyType::Missing,
        DysfluencyType::Replacement,
        DysfluencyType::Prolongation,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short_name(self) -> &'static str {
        match self {
            DysfluencyType::Repetition => "Rep",
            DysfluencyType::Block => "Block",
            DysfluencyType::Missing => "Miss",
            DysfluencyType::Replacement => "Replace",
            DysfluencyType::Prolongation => "Prolong",
        }
    }
}

impl fmt::Display for DysfluencyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Phoneme,
    Word,
}

/// Ground-truth event over the half-open frame interval `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "type")]
    pub dtype: DysfluencyType,
    pub level: Level,
    #[serde(rename = "start_f")]
    pub start_frame: usize,
    #[serde(rename = "end_f")]
    pub end_frame: usize,
}

impl Annotation {
    pub fn span(&self) -> Range<usize> {
        self.start_frame..self.end_frame
    }

    pub fn midpoint(&self) -> f64 {
        (self.start_frame + self.end_frame) as f64 / 2.0
    }
}

/// A token realized over `[start_frame, end_frame)`.
///
/// `source` is the reference row the token realizes; silences have none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedPhoneme {
    pub token: PhonemeToken,
    pub start_frame: usize,
    pub end_frame: usize,
    pub source: Option<usize>,
}

impl TimedPhoneme {
    pub fn duration(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_silence(&self) -> bool {
        self.token.is_silence()
    }
}

/// Total frame extent of a timed sequence.
pub fn total_frames(seq: &[TimedPhoneme]) -> usize {
    seq.last().map_or(0, |t| t.end_frame)
}

/// True when each token starts where the previous one ended, from frame 0.
pub fn is_contiguous(seq: &[TimedPhoneme]) -> bool {
    let mut at = 0;
    for t in seq {
        if t.start_frame != at || t.end_frame <= t.start_frame {
            return false;
        }
        at = t.end_frame;
    }
    true
}

/// Rebuilds frame bounds from the durations, in order.
fn retime(seq: &mut [TimedPhoneme]) {
    let mut at = 0;
    for t in seq.iter_mut() {
        let d = t.duration();
        t.start_frame = at;
        t.end_frame = at + d;
        at += d;
    }
}

fn with_duration(mut t: TimedPhoneme, frames: usize) -> TimedPhoneme {
    t.start_frame = 0;
    t.end_frame = frames;
    t
}

fn silence(frames: usize, word_index: usize) -> TimedPhoneme {
    TimedPhoneme {
        token: PhonemeToken::silence(word_index),
        start_frame: 0,
        end_frame: frames,
        source: None,
    }
}

/// Mean and standard deviation of a duration class, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub mean: f64,
    pub std: f64,
}

impl DurationStats {
    fn log_normal(&self) -> LogNormal<f64> {
        let var = (1.0 + (self.std / self.mean).powi(2)).ln();
        let mu = self.mean.ln() - var / 2.0;
        LogNormal::new(mu, var.sqrt()).expect("positive duration stats")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationModel {
    pub vowel: DurationStats,
    pub consonant: DurationStats,
    pub silence: DurationStats,
}

impl Default for DurationModel {
    fn default() -> Self {
        Self {
            vowel: DurationStats { mean: 6.0, std: 2.0 },
            consonant: DurationStats { mean: 4.0, std: 1.5 },
            silence: DurationStats { mean: 10.0, std: 4.0 },
        }
    }
}

/// Which family of injection rules a corpus is built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleSet {
    /// Text-space rules; all five types.
    Tts,
    /// Acoustic-space word rules; no replacement, word-level missing only.
    Stutter,
}

/// Relative weights of the five dysfluency types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Proportions {
    #[serde(default = "one")]
    pub repetition: f64,
    #[serde(default = "one")]
    pub block: f64,
    #[serde(default = "one")]
    pub missing: f64,
    #[serde(default = "one")]
    pub replacement: f64,
    #[serde(default = "one")]
    pub prolongation: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Proportions {
    fn default() -> Self {
        Self::from_weights([1.0; 5])
    }
}

impl Proportions {
    /// Weights in class order Rep, Block, Miss, Replace, Prolong.
    pub fn from_weights(w: [f64; 5]) -> Self {
        Self {
            repetition: w[0],
            block: w[1],
            missing: w[2],
            replacement: w[3],
            prolongation: w[4],
        }
    }

    pub fn p1() -> Self {
        Self::from_weights([0.9, 1.0, 1.0, 1.0, 1.0])
    }

    pub fn p2() -> Self {
        Self::from_weights([1.0, 1.0, 1.2, 1.0, 1.0])
    }

    pub fn p3() -> Self {
        Self::from_weights([1.0, 1.0, 1.2, 1.2, 1.0])
    }

    pub fn weights(&self) -> [f64; 5] {
        [
            self.repetition,
            self.block,
            self.missing,
            self.replacement,
            self.prolongation,
        ]
    }

    /// Renormalized probabilities.
    pub fn probabilities(&self) -> Result<[f64; 5], SimulateError> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(SimulateError::InvalidConfig(
                "proportions must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            return Err(SimulateError::InvalidConfig("proportions sum to zero".into()));
        }
        Ok(w.map(|x| x / sum))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_samples: usize,
    #[serde(default)]
    pub proportions: Proportions,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_ms: f64,
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    /// Longest reference (in phoneme tokens) admitted into the corpus.
    #[serde(default = "default_max_ref_tokens")]
    pub max_ref_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rules")]
    pub rules: RuleSet,
    #[serde(default)]
    pub duration_model: DurationModel,
}

fn default_frame_rate() -> f64 {
    FRAME_MS
}
fn default_max_frames() -> usize {
    MAX_FRAMES
}
fn default_max_ref_tokens() -> usize {
    128
}
fn default_rules() -> RuleSet {
    RuleSet::Tts
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            proportions: Proportions::default(),
            frame_rate_ms: FRAME_MS,
            max_frames: MAX_FRAMES,
            max_ref_tokens: default_max_ref_tokens(),
            seed: 0,
            rules: RuleSet::Tts,
            duration_model: DurationModel::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let p = self.proportions.probabilities()?;
        if self.frame_rate_ms != FRAME_MS {
            return Err(SimulateError::InvalidConfig(format!(
                "frame_rate_ms is fixed at {FRAME_MS}"
            )));
        }
        if self.max_frames == 0 || self.max_ref_tokens == 0 {
            return Err(SimulateError::InvalidConfig("limits must be positive".into()));
        }
        if self.rules == RuleSet::Stutter && p[DysfluencyType::Replacement.index()] > 0.0 {
            return Err(SimulateError::InvalidConfig(
                "the stutter rule set has no replacement rule; set replacement = 0".into(),
            ));
        }
        for s in [
            self.duration_model.vowel,
            self.duration_model.consonant,
            self.duration_model.silence,
        ] {
            if !(s.mean > 0.0 && s.std > 0.0) {
                return Err(SimulateError::InvalidConfig(
                    "duration mean and std must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Draws per-token durations from the class log-normals and lays them out
/// contiguously from frame 0. Each token's source row is its own index.
pub fn assign_durations<R: Rng + ?Sized>(
    tokens: &[PhonemeToken],
    model: &DurationModel,
    rng: &mut R,
) -> Vec<TimedPhoneme> {
    let vowel = model.vowel.log_normal();
    let consonant = model.consonant.log_normal();
    let sil = model.silence.log_normal();
    let mut at = 0;
    tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let draw = if tok.is_silence() {
                sil.sample(rng)
            } else if tok.is_vowel() {
                vowel.sample(rng)
            } else {
                consonant.sample(rng)
            };
            let d = (draw.round() as usize).max(1);
            let t = TimedPhoneme {
                token: tok.clone(),
                start_frame: at,
                end_frame: at + d,
                source: (!tok.is_silence()).then_some(i),
            };
            at += d;
            t
        })
        .collect()
}

/// Index ranges of each word's non-silence tokens, in order.
fn word_spans(seq: &[TimedPhoneme]) -> Vec<Range<usize>> {
    let mut spans: Vec<Range<usize>> = Vec::new();
    let mut current: Option<(usize, Range<usize>)> = None;
    for (i, t) in seq.iter().enumerate() {
        if t.is_silence() {
            if let Some((_, r)) = current.take() {
                spans.push(r);
            }
            continue;
        }
        match &mut current {
            Some((w, r)) if *w == t.token.word_index => r.end = i + 1,
            _ => {
                if let Some((_, r)) = current.take() {
                    spans.push(r);
                }
                current = Some((t.token.word_index, i..i + 1));
            }
        }
    }
    if let Some((_, r)) = current {
        spans.push(r);
    }
    spans
}

fn pause_frames<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let seconds: f64 = rng.gen_range(0.5..=2.0);
    let frames = (seconds * 1000.0 / FRAME_MS).round() as usize;
    frames.clamp(PAUSE_MIN_FRAMES, PAUSE_MAX_FRAMES)
}

fn splice(
    seq: &[TimedPhoneme],
    at: usize,
    remove: usize,
    insert: Vec<TimedPhoneme>,
) -> Vec<TimedPhoneme> {
    let mut out = Vec::with_capacity(seq.len() + insert.len());
    out.extend_from_slice(&seq[..at]);
    out.extend(insert);
    out.extend_from_slice(&seq[at + remove..]);
    retime(&mut out);
    out
}

/// Repeats the first phoneme or first syllable (phoneme level) or the whole
/// word (word level) of a random word 2-4 times, each copy followed by a
/// 0.5-2.0 s pause, ahead of the original word.
pub fn inject_repetition<R: Rng + ?Sized>(
    seq: &[TimedPhoneme],
    level: Level,
    rng: &mut R,
) -> Result<(Vec<TimedPhoneme>, Annotation), SimulateError> {
    let words = word_spans(seq);
    let word = words.choose(rng).ok_or(SimulateError::EmptySequence)?.clone();
    let unit = match level {
        Level::Word => word.clone(),
        Level::Phoneme => {
            if rng.gen_bool(0.5) {
                word.start..word.start + 1
            } else {
                let syl = seq[word.start].token.syllable_index;
                let end = (word.start..word.end)
                    .find(|&i| seq[i].token.syllable_index != syl)
                    .unwrap_or(word.end);
                word.start..end
            }
        }
    };
    let copies = rng.gen_range(2..=4);
    let word_index = seq[word.start].token.word_index;
    let start_frame = seq[word.start].start_frame;
    let mut inserted = Vec::new();
    for _ in 0..copies {
        inserted.extend(seq[unit.clone()].iter().cloned());
        inserted.push(silence(pause_frames(rng), word_index));
    }
    let added: usize = inserted.iter().map(TimedPhoneme::duration).sum();
    let out = splice(seq, word.start, 0, inserted);
    let ann = Annotation {
        dtype: DysfluencyType::Repetition,
        level,
        start_frame,
        end_frame: start_frame + added,
    };
    Ok((out, ann))
}

/// The acoustic-space word repetition: 1-4 extra copies of a word, each
/// followed by silence of 70% of the word's duration.
pub fn inject_word_repetition_acoustic<R: Rng + ?Sized>(
    seq: &[TimedPhoneme],
    rng: &mut R,
) -> Result<(Vec<TimedPhoneme>, Annotation), SimulateError> {
    let words = word_spans(seq);
    let word = words.choose(rng).ok_or(SimulateError::EmptySequence)?.clone();
    let copies = rng.gen_range(1..=4);
    let word_frames: usize = seq[word.clone()].iter().map(TimedPhoneme::duration).sum();
    let gap = ((0.7 * word_frames as f64).round() as usize).max(1);
    let word_index = seq[word.start].token.word_index;
    let start_frame = seq[word.start].start_frame;
    let mut inserted = Vec::new();
    for _ in 0..copies {
        inserted.extend(seq[word.clone()].iter().cloned());
        inserted.push(silence(gap, word_index));
    }
    let added: usize = inserted.iter().map(TimedPhoneme::duration).sum();
    let out = splice(seq, word.start, 0, inserted);
    let ann = Annotation {
        dtype: DysfluencyType::Repetition,
        level: Level::Word,
        start_frame,
        end_frame: start_frame + added,
    };
    Ok((out, ann))
}

/// A deletion candidate for phoneme-level missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeletionTarget {
    /// Unstressed syllable of a polysyllabic word (token index range).
    WeakSyllable(Range<usize>),
    /// Word-final consonant (token index).
    FinalConsonant(usize),
}

/// Enumerates weak-syllable and final-consonant deletion candidates.
pub fn deletion_targets(seq: &[TimedPhoneme]) -> (Vec<Range<usize>>, Vec<usize>) {
    let mut weak = Vec::new();
    let mut finals = Vec::new();
    for word in word_spans(seq) {
        let n_syl = seq[word.clone()]
            .iter()
            .map(|t| t.token.syllable_index)
            .max()
            .map_or(0, |m| m + 1);
        if n_syl >= 2 {
            let mut i = word.start;
            while i < word.end {
                let syl = seq[i].token.syllable_index;
                let mut j = i;
                while j < word.end && seq[j].token.syllable_index == syl {
                    j += 1;
                }
                let unstressed = seq[i..j]
                    .iter()
                    .any(|t| t.token.is_vowel() && t.token.stress == Stress::Unstressed);
                if unstressed {
                    weak.push(i..j);
                }
                i = j;
            }
        }
        let last = word.end - 1;
        if word.len() >= 2 && !seq[last].token.is_vowel() {
            finals.push(last);
        }
    }
    (weak, finals)
}

/// Deletes material: an unstressed syllable or word-final consonant
/// (phoneme level), or a whole word replaced by equal-length silence
/// (word level).
pub fn inject_missing<R: Rng + ?Sized>(
    seq: &[TimedPhoneme],
    level: Level,
    rng: &mut R,
) -> Result<(Vec<TimedPhoneme>, Annotation), SimulateError> {
    match level {
        Level::Word => {
            let words = word_spans(seq);
            let word = words.choose(rng).ok_or(SimulateError::NoDeletableTarget)?.clone();
            let frames: usize = seq[word.clone()].iter().map(TimedPhoneme::duration).sum();
            let start_frame = seq[word.start].start_frame;
            let gap = silence(frames, seq[word.start].token.word_index);
            let out = splice(seq, word.start, word.len(), vec![gap]);
            let ann = Annotation {
                dtype: DysfluencyType::Missing,
                level,
                start_frame,
                end_frame: start_frame + frames,
            };
            Ok((out, ann))
        }
        Level::Phoneme => {
            let (weak, finals) = deletion_targets(seq);
            let target = match (weak.is_empty(), finals.is_empty()) {
                (true, true) => return Err(SimulateError::NoDeletableTarget),
                (false, true) => DeletionTarget::WeakSyllable(weak.choose(rng).unwrap().clone()),
                (true, false) => DeletionTarget::FinalConsonant(*finals.choose(rng).unwrap()),
                (false, false) => {
                    if rng.gen_bool(0.5) {
                        DeletionTarget::WeakSyllable(weak.choose(rng).unwrap().clone())
                    } else {
                        DeletionTarget::FinalConsonant(*finals.choose(rng).unwrap())
                    }
                }
            };
            let range = match target {
                DeletionTarget::WeakSyllable(r) => r,
                DeletionTarget::FinalConsonant(i) => i..i + 1,
            };
            let splice_at = seq[range.start].start_frame;
            let out = splice(seq, range.start, range.len(), Vec::new());
            let total = total_frames(&out);
            let (start_frame, end_frame) = splice_window(splice_at, total);
            let ann = Annotation {
                dtype: DysfluencyType::Missing,
                level,
                start_frame,
                end_frame,
            };
            Ok((out, ann))
        }
    }
}

/// Two-frame window centred on a zero-length splice, kept inside `[0, total)`.
fn splice_window(at: usize, total: usize) -> (usize, usize) {
    if total < 2 {
        return (0, total.max(1));
    }
    let start = at.saturating_sub(1).min(total - 2);
    (start, start + 2)
}

/// Inserts a 0.5-2.0 s silence after a random word other than the last.
pub fn inject_block<R: Rng + ?Sized>(
    seq: &[TimedPhoneme],
    rng: &mut R,
) -> Result<(Vec<TimedPhoneme>, Annotation), SimulateError> {
    let words = word_spans(seq);
    if words.len() < 2 {
        return Err(SimulateError::TooShort);
    }
    let after = &words[rng.gen_range(0..words.len() - 1)];
    let frames = pause_frames(rng);
    let start_frame = seq[after.end - 1].end_frame;
    let word_index = seq[after.end - 1].token.word_index;
    let out = splice(seq, after.end, 0, vec![silence(frames, word_index)]);
    let ann = Annotation {
        dtype: DysfluencyType::Block,
        level: Level::Word,
        start_frame,
        end_frame: start_frame + frames,
    };
    Ok((out, ann))
}

/// Replaces one phoneme through a phonological process, chosen uniformly
/// over all (eligible phoneme, applicable process) pairs.
pub fn inject_replacement<R: Rng + ?Sized>(
    seq: &[TimedPhoneme],
    rng: &mut R,
) -> Result<(Vec<TimedPhoneme>, Annotation), SimulateError> {
    let processes = PhonologicalProcess::all();
    let pairs: Vec<(usize, &PhonologicalProcess)> = seq
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_silence())
        .flat_map(|(i, t)| {
            processes
                .iter()
                .filter(move |p| p.applies_to(&t.token.symbol))
                .map(move |p| (i, p))
        })
        .collect();
    let &(i, process) = pairs.choose(rng).ok_or(SimulateError::NoEligiblePhoneme)?;
    let mut out = seq.to_vec();
    out[i].token = apply_process(&seq[i].token, process)?;
    let ann = Annotation {
        dtype: DysfluencyType::Replacement,
        level: Level::Phoneme,
        start_frame: seq[i].start_frame,
        end_frame: seq[i].end_frame,
    };
    Ok((out, ann))
}

/// Stretches a random phoneme by an integer factor in 10..=15.
pub fn inject_prolongation<R: Rng + ?Sized>(
    seq: &[TimedPhoneme],
    rng: &mut R,
) -> Result<(Vec<TimedPhoneme>, Annotation), SimulateError> {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| !seq[i].is_silence()).collect();
    let &i = candidates.choose(rng).ok_or(SimulateError::EmptySequence)?;
    let factor = rng.gen_range(10..=15);
    let stretched = with_duration(seq[i].clone(), seq[i].duration() * factor);
    let out = splice(seq, i, 1, vec![stretched]);
    let ann = Annotation {
        dtype: DysfluencyType::Prolongation,
        level: Level::Phoneme,
        start_frame: out[i].start_frame,
        end_frame: out[i].end_frame,
    };
    Ok((out, ann))
}

/// One annotated utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub seed: u64,
    pub text: String,
    pub ref_tokens: Vec<PhonemeToken>,
    pub dysfluent: Vec<TimedPhoneme>,
    pub annotation: Annotation,
}

impl Sample {
    pub fn total_frames(&self) -> usize {
        total_frames(&self.dysfluent)
    }

    /// Synthetic soft alignment for this sample, with noise drawn from a
    /// stream derived from the sample seed.
    pub fn alignment(&self, params: &AlignParams) -> Result<AlignmentMatrix, crate::align::AlignError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0xA11C));
        build_alignment(&self.ref_tokens, &self.dysfluent, &self.annotation, params, &mut rng)
    }
}

/// SplitMix64 finalizer over a (seed, index) pair.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_type<R: Rng + ?Sized>(probs: &[f64; 5], rng: &mut R) -> DysfluencyType {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return DysfluencyType::ALL[i];
        }
    }
    // rounding slack: last class with positive weight
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(4);
    DysfluencyType::ALL[last]
}

fn inject<R: Rng + ?Sized>(
    dtype: DysfluencyType,
    rules: RuleSet,
    seq: &[TimedPhoneme],
    rng: &mut R,
) -> Result<(Vec<TimedPhoneme>, Annotation), SimulateError> {
    let level = if rng.gen_bool(0.5) { Level::Phoneme } else { Level::Word };
    match (dtype, rules) {
        (DysfluencyType::Repetition, RuleSet::Tts) => inject_repetition(seq, level, rng),
        (DysfluencyType::Repetition, RuleSet::Stutter) => match level {
            Level::Phoneme => inject_repetition(seq, Level::Phoneme, rng),
            Level::Word => inject_word_repetition_acoustic(seq, rng),
        },
        (DysfluencyType::Missing, RuleSet::Tts) => match inject_missing(seq, level, rng) {
            Err(SimulateError::NoDeletableTarget) if level == Level::Phoneme => {
                inject_missing(seq, Level::Word, rng)
            }
            r => r,
        },
        (DysfluencyType::Missing, RuleSet::Stutter) => inject_missing(seq, Level::Word, rng),
        (DysfluencyType::Block, _) => inject_block(seq, rng),
        (DysfluencyType::Replacement, _) => inject_replacement(seq, rng),
        (DysfluencyType::Prolongation, _) => inject_prolongation(seq, rng),
    }
}

/// Phonemized, syllabified texts ready for sampling.
pub struct TextPool {
    entries: Vec<(String, Vec<PhonemeToken>)>,
}

impl TextPool {
    pub fn new<S: AsRef<str>>(lexicon: &Lexicon, texts: &[S]) -> Result<Self, SimulateError> {
        let mut entries = Vec::with_capacity(texts.len());
        for t in texts {
            let t = t.as_ref().trim();
            if t.is_empty() {
                continue;
            }
            let tokens = lexicon.transcribe(t)?;
            if !tokens.is_empty() {
                entries.push((t.to_string(), tokens));
            }
        }
        if entries.is_empty() {
            return Err(SimulateError::InvalidConfig("no usable texts".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The bundled sentence list.
pub fn bundled_texts() -> Vec<String> {
    include_str!("../data/sentences.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Generates sample `index` of a corpus. A pure function of its arguments.
pub fn generate_sample(
    cfg: &GenConfig,
    pool: &TextPool,
    index: usize,
) -> Result<Sample, SimulateError> {
    let probs = cfg.proportions.probabilities()?;
    let seed = mix_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = draw_type(&probs, &mut rng);
    for _ in 0..MAX_RETRIES {
        let (text, tokens) = &pool.entries[rng.gen_range(0..pool.entries.len())];
        if tokens.len() > cfg.max_ref_tokens {
            continue;
        }
        let fluent = assign_durations(tokens, &cfg.duration_model, &mut rng);
        let (dysfluent, annotation) = match inject(dtype, cfg.rules, &fluent, &mut rng) {
            Ok(r) => r,
            Err(SimulateError::Phonology(e)) => return Err(e.into()),
            Err(_) => continue,
        };
        if total_frames(&dysfluent) > cfg.max_frames {
            continue;
        }
        return Ok(Sample {
            id: index,
            seed,
            text: text.clone(),
            ref_tokens: tokens.clone(),
            dysfluent,
            annotation,
        });
    }
    Err(SimulateError::GenerationExhausted { index })
}

/// Generates `cfg.n_samples` samples over `texts`, split over `jobs` worker
/// threads. Output order is sample-index order.
pub fn generate_corpus<S: AsRef<str>>(
    cfg: &GenConfig,
    lexicon: &Lexicon,
    texts: &[S],
    jobs: usize,
) -> Result<Vec<Sample>, SimulateError> {
    cfg.validate()?;
    let pool = TextPool::new(lexicon, texts)?;
    let jobs = jobs.max(1).min(cfg.n_samples.max(1));
    if jobs == 1 {
        return (0..cfg.n_samples).map(|i| generate_sample(cfg, &pool, i)).collect();
    }
    let chunk = cfg.n_samples.div_ceil(jobs);
    let pool = &pool;
    let parts: Vec<Result<Vec<Sample>, SimulateError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                s.spawn(move || {
                    let lo = j * chunk;
                    let hi = ((j + 1) * chunk).min(cfg.n_samples);
                    (lo..hi).map(|i| generate_sample(cfg, pool, i)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(cfg.n_samples);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Empirical type frequencies.
pub fn type_frequencies(samples: &[Sample]) -> BTreeMap<DysfluencyType, f64> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s.annotation.dtype).or_insert(0usize) += 1;
    }
    let n = samples.len().max(1) as f64;
    DysfluencyType::ALL
        .iter()
        .map(|t| (*t, counts.get(t).copied().unwrap_or(0) as f64 / n))
        .collect()
}

/// Convenience: words of a sample's text.
pub fn sample_words(sample: &Sample) -> Vec<String> {
    split_words(&sample.text)
}

impl Sample {
    /// Reference tokens rendered with stress digits.
    pub fn ref_ipa(&self) -> Vec<String> {
        self.ref_tokens.iter().map(PhonemeToken::marked).collect()
    }

    /// Dysfluent symbols in order.
    pub fn dysfluent_ipa(&self) -> Vec<&str> {
        self.dysfluent
            .iter()
            .map(|t| if t.is_silence() { SILENCE } else { t.token.symbol.as_str() })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonology::Lexicon;

    fn timed(text: &str, frames_each: usize) -> Vec<TimedPhoneme> {
        let toks = Lexicon::bundled().transcribe(text).unwrap();
        toks.into_iter()
            .enumerate()
            .map(|(i, t)| TimedPhoneme {
                token: t,
                start_frame: i * frames_each,
                end_frame: (i + 1) * frames_each,
                source: Some(i),
            })
            .collect()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_token_durations_start_at_zero() {
        let toks = Lexicon::bundled().phonemize(&["a"]).unwrap();
        let seq = assign_durations(&toks[..1], &DurationModel::default(), &mut rng(1));
        assert_eq!(seq[0].start_frame, 0);
        assert_eq!(seq[0].end_frame, seq[0].duration());
    }

    #[test]
    fn durations_are_deterministic() {
        let toks = Lexicon::bundled().transcribe("please call stella").unwrap();
        let a = assign_durations(&toks, &DurationModel::default(), &mut rng(9));
        let b = assign_durations(&toks, &DurationModel::default(), &mut rng(9));
        assert_eq!(a, b);
        assert!(is_contiguous(&a));
    }

    #[test]
    fn duration_mean_matches_configured_mean() {
        // ten tokens of one class, 1000 draws; sample mean within 5%
        let toks: Vec<PhonemeToken> = (0..10)
            .map(|_| PhonemeToken::new("t", Stress::None, 0))
            .collect();
        let model = DurationModel {
            consonant: DurationStats { mean: 5.0, std: 1.5 },
            ..DurationModel::default()
        };
        let mut r = rng(3);
        let mut total = 0usize;
        for _ in 0..1000 {
            let seq = assign_durations(&toks, &model, &mut r);
            assert!(seq.iter().all(|t| t.duration() >= 1));
            total += total_frames(&seq);
        }
        let mean = total as f64 / 10_000.0;
        assert!((mean - 5.0).abs() / 5.0 < 0.05, "mean {mean}");
    }

    #[test]
    fn repetition_prefix_layout() {
        let seq = timed("please call", 4);
        for seed in 0..200 {
            let (out, ann) = inject_repetition(&seq, Level::Phoneme, &mut rng(seed)).unwrap();
            assert!(is_contiguous(&out));
            // annotation covers exactly the inserted material
            let added = total_frames(&out) - total_frames(&seq);
            assert_eq!(ann.end_frame - ann.start_frame, added);
            let pauses = out.iter().filter(|t| t.is_silence()).count();
            assert!((2..=4).contains(&pauses));
            let kept: Vec<_> = out
                .iter()
                .filter(|t| t.start_frame < ann.start_frame || t.start_frame >= ann.end_frame)
                .collect();
            assert_eq!(kept.len(), seq.len());
            assert!(kept
                .iter()
                .zip(&seq)
                .all(|(a, b)| a.token == b.token && a.duration() == b.duration()));
        }
    }

    #[test]
    fn repetition_of_please_with_phoneme_unit() {
        let seq = timed("please", 4);
        // find a seed where the single /p/ is repeated twice
        for seed in 0..500 {
            let (out, ann) = inject_repetition(&seq, Level::Phoneme, &mut rng(seed)).unwrap();
            let syms: Vec<&str> = out.iter().map(|t| t.token.symbol.as_str()).collect();
            if syms[..4] == ["p", "sil", "p", "sil"] && syms.len() == 8 {
                assert_eq!(&syms[4..], ["p", "l", "iː", "z"]);
                assert_eq!(ann.start_frame, 0);
                assert_eq!(ann.end_frame, out[3].end_frame);
                return;
            }
        }
        panic!("no k=2 single-phoneme draw found");
    }

    #[test]
    fn word_missing_keeps_length() {
        let seq = timed("please call stella", 5);
        let (out, ann) = inject_missing(&seq, Level::Word, &mut rng(2)).unwrap();
        assert_eq!(total_frames(&out), total_frames(&seq));
        let gap = out.iter().find(|t| t.is_silence()).unwrap();
        assert_eq!((gap.start_frame, gap.end_frame), (ann.start_frame, ann.end_frame));
    }

    #[test]
    fn banana_weak_syllables() {
        let seq = timed("banana", 3);
        let (weak, finals) = deletion_targets(&seq);
        assert_eq!(weak, vec![0..2, 4..6]);
        assert!(finals.is_empty());
        let (out, ann) = inject_missing(&seq, Level::Phoneme, &mut rng(0)).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(ann.end_frame - ann.start_frame, 2);
    }

    #[test]
    fn all_stressed_vowel_final_has_no_target() {
        // "a" is a single stressed-or-unstressed monosyllable ending in a vowel
        let toks = vec![PhonemeToken::parse_marked("iː1", 0).unwrap()];
        let seq = assign_durations(&toks, &DurationModel::default(), &mut rng(0));
        assert_eq!(
            inject_missing(&seq, Level::Phoneme, &mut rng(0)).unwrap_err(),
            SimulateError::NoDeletableTarget
        );
    }

    #[test]
    fn block_between_two_words() {
        let seq = timed("please call", 4);
        let (out, ann) = inject_block(&seq, &mut rng(5)).unwrap();
        assert_eq!(ann.start_frame, 16);
        assert!(out[4].is_silence());
        assert!(inject_block(&timed("please", 4), &mut rng(5)).unwrap_err() == SimulateError::TooShort);
    }

    #[test]
    fn replacement_single_edit_and_no_eligible() {
        let seq = timed("call", 4);
        let (out, ann) = inject_replacement(&seq, &mut rng(1)).unwrap();
        let diffs: Vec<usize> = (0..seq.len())
            .filter(|&i| out[i].token.symbol != seq[i].token.symbol)
            .collect();
        assert_eq!(diffs.len(), 1);
        let i = diffs[0];
        assert_eq!((out[i].start_frame, out[i].end_frame), (ann.start_frame, ann.end_frame));
        let vowels: Vec<TimedPhoneme> = seq.iter().filter(|t| t.token.is_vowel()).cloned().collect();
        assert_eq!(
            inject_replacement(&vowels, &mut rng(1)).unwrap_err(),
            SimulateError::NoEligiblePhoneme
        );
    }

    #[test]
    fn prolongation_growth() {
        let seq = timed("please", 4);
        let (out, ann) = inject_prolongation(&seq, &mut rng(7)).unwrap();
        let factor = (ann.end_frame - ann.start_frame) / 4;
        assert!((10..=15).contains(&factor));
        assert_eq!(total_frames(&out), total_frames(&seq) + (factor - 1) * 4);
    }

    #[test]
    fn acoustic_repetition_inserts_copies_and_gaps() {
        // one word of 40 frames
        let seq = timed("please", 10);
        for seed in 0..100 {
            let (out, ann) = inject_word_repetition_acoustic(&seq, &mut rng(seed)).unwrap();
            let k = out.iter().filter(|t| t.is_silence()).count();
            assert!((1..=4).contains(&k));
            assert_eq!(ann.end_frame - ann.start_frame, k * (40 + 28));
            let p_count = out.iter().filter(|t| t.token.symbol == "p").count();
            assert_eq!(p_count, k + 1);
        }
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(inject_prolongation(&[], &mut rng(0)).unwrap_err(), SimulateError::EmptySequence);
        assert_eq!(
            inject_repetition(&[], Level::Word, &mut rng(0)).unwrap_err(),
            SimulateError::EmptySequence
        );
        assert_eq!(
            inject_word_repetition_acoustic(&[], &mut rng(0)).unwrap_err(),
            SimulateError::EmptySequence
        );
    }

    #[test]
    fn stutter_rules_reject_replacement() {
        let cfg = GenConfig {
            rules: RuleSet::Stutter,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GenConfig {
            rules: RuleSet::Stutter,
            proportions: Proportions::from_weights([1.0, 1.0, 1.0, 0.0, 1.0]),
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn corpus_is_deterministic_and_job_independent() {
        let texts = bundled_texts();
        let cfg = GenConfig {
            n_samples: 40,
            seed: 11,
            ..GenConfig::default()
        };
        let a = generate_corpus(&cfg, Lexicon::bundled(), &texts, 1).unwrap();
        let b = generate_corpus(&cfg, Lexicon::bundled(), &texts, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.total_frames() <= MAX_FRAMES));
    }

    #[test]
    fn exhausted_when_nothing_fits() {
        let cfg = GenConfig {
            n_samples: 1,
            max_frames: 3,
            ..GenConfig::default()
        };
        let err = generate_corpus(&cfg, Lexicon::bundled(), &["please call stella"], 1).unwrap_err();
        assert_eq!(err, SimulateError::GenerationExhausted { index: 0 });
    }
}
