//! IPA phonology: lexicon-based phonemization, maximal-onset syllabification
//! and the substitution tables for the clinical phonological processes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Symbol used for explicit silence tokens in timed sequences.
pub const SILENCE: &str = "sil";

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");

const VOWELS: &[&str] = &[
    "aɪ", "aʊ", "eɪ", "iː", "oʊ", "uː", "æ", "ɑː", "ɔɪ", "ɔː", "ə", "ɚ", "ɛ", "ɝ", "ɪ", "ʊ", "ʌ",
];

const CONSONANTS: &[&str] = &[
    "b", "d", "dʒ", "f", "h", "j", "k", "l", "m", "n", "p", "s", "t", "tʃ", "v", "w", "z", "ð",
    "ŋ", "ɡ", "ɹ", "ʃ", "ʒ", "θ",
];

const ONSETS_2: &[(&str, &str)] = &[
    ("p", "ɹ"), ("t", "ɹ"), ("k", "ɹ"), ("b", "ɹ"), ("d", "ɹ"), ("ɡ", "ɹ"), ("f", "ɹ"),
    ("θ", "ɹ"), ("ʃ", "ɹ"), ("p", "l"), ("k", "l"), ("b", "l"), ("ɡ", "l"), ("f", "l"),
    ("s", "l"), ("k", "w"), ("ɡ", "w"), ("s", "w"), ("t", "w"), ("d", "w"), ("θ", "w"),
    ("s", "p"), ("s", "t"), ("s", "k"), ("s", "m"), ("s", "n"), ("p", "j"), ("b", "j"),
    ("k", "j"), ("f", "j"), ("m", "j"), ("h", "j"), ("v", "j"), ("n", "j"),
];

const ONSETS_3: &[(&str, &str, &str)] = &[
    ("s", "t", "ɹ"), ("s", "p", "ɹ"), ("s", "k", "ɹ"), ("s", "p", "l"), ("s", "k", "w"),
    ("s", "k", "j"), ("s", "p", "j"),
];

pub fn is_vowel(symbol: &str) -> bool {
    VOWELS.contains(&symbol)
}

pub fn is_consonant(symbol: &str) -> bool {
    CONSONANTS.contains(&symbol)
}

/// Membership in the bundled IPA inventory (silence included).
pub fn in_inventory(symbol: &str) -> bool {
    symbol == SILENCE || is_vowel(symbol) || is_consonant(symbol)
}

fn legal_onset(cluster: &[&str]) -> bool {
    match cluster {
        [] => true,
        [c] => is_consonant(c) && *c != "ŋ",
        [a, b] => ONSETS_2.contains(&(*a, *b)),
        [a, b, c] => ONSETS_3.contains(&(*a, *b, *c)),
        _ => false,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PhonologyError {
    #[error("unknown word: {0:?}")]
    UnknownWord(String),
    #[error("word {0} has no vowel nucleus")]
    NoNucleus(usize),
    #[error("{symbol:?} is not in the domain of {process}")]
    NotApplicable { symbol: String, process: ProcessKind },
    #[error("lexicon line {line}: {reason}")]
    BadLexicon { line: usize, reason: String },
    #[error("io error reading lexicon: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stress {
    Primary,
    Secondary,
    Unstressed,
    None,
}

impl Stress {
    fn from_digit(d: char) -> Option<Self> {
        match d {
            '1' => Some(Stress::Primary),
            '2' => Some(Stress::Secondary),
            '0' => Some(Stress::Unstressed),
            _ => None,
        }
    }

    pub fn digit(self) -> Option<char> {
        match self {
            Stress::Primary => Some('1'),
            Stress::Secondary => Some('2'),
            Stress::Unstressed => Some('0'),
            Stress::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyllablePosition {
    Onset,
    Nucleus,
    Coda,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhonemeToken {
    pub symbol: String,
    pub stress: Stress,
    pub word_index: usize,
    pub syllable_index: usize,
    pub position: SyllablePosition,
}

impl PhonemeToken {
    pub fn new(symbol: impl Into<String>, stress: Stress, word_index: usize) -> Self {
        let symbol = symbol.into();
        let position = if is_vowel(&symbol) {
            SyllablePosition::Nucleus
        } else {
            SyllablePosition::Onset
        };
        Self {
            symbol,
            stress,
            word_index,
            syllable_index: 0,
            position,
        }
    }

    pub fn silence(word_index: usize) -> Self {
        Self::new(SILENCE, Stress::None, word_index)
    }

    pub fn is_silence(&self) -> bool {
        self.symbol == SILENCE
    }

    pub fn is_vowel(&self) -> bool {
        is_vowel(&self.symbol)
    }

    /// Symbol with its stress digit appended, as written in the lexicon.
    pub fn marked(&self) -> String {
        match self.stress.digit() {
            Some(d) => format!("{}{}", self.symbol, d),
            None => self.symbol.clone(),
        }
    }

    /// Parses a lexicon-style token (`iː1`, `p`) into symbol and stress.
    pub fn parse_marked(marked: &str, word_index: usize) -> Option<Self> {
        let last = marked.chars().last()?;
        let (symbol, stress) = match Stress::from_digit(last) {
            Some(s) => (&marked[..marked.len() - 1], s),
            None => (marked, Stress::None),
        };
        if !in_inventory(symbol) {
            return None;
        }
        let stress = if is_vowel(symbol) && stress == Stress::None {
            Stress::Unstressed
        } else {
            stress
        };
        Some(Self::new(symbol, stress, word_index))
    }
}

/// Case-folds a raw word and strips punctuation other than inner apostrophes.
pub fn normalize_word(raw: &str) -> String {
    let kept: String = raw
        .chars()
        .filter(|c| c.is_alphanumeric() || *c == '\'')
        .flat_map(char::to_lowercase)
        .collect();
    kept.trim_matches('\'').to_string()
}

/// Splits free text into normalized words, dropping punctuation-only pieces.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

/// Pronouncing lexicon: word → stress-marked IPA tokens.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
}

impl Lexicon {
    /// The lexicon compiled into the binary.
    pub fn bundled() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            Lexicon::parse(BUNDLED_LEXICON.as_bytes()).expect("bundled lexicon is well-formed")
        })
    }

    /// Reads `word<TAB>ipa tokens with stress digits` lines.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, PhonologyError> {
        let mut entries = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| PhonologyError::Io(e.to_string()))?;
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, pron) = line.split_once('\t').ok_or(PhonologyError::BadLexicon {
                line: i + 1,
                reason: "missing tab separator".into(),
            })?;
            let tokens: Vec<String> = pron.split_whitespace().map(str::to_string).collect();
            for t in &tokens {
                if PhonemeToken::parse_marked(t, 0).is_none() {
                    return Err(PhonologyError::BadLexicon {
                        line: i + 1,
                        reason: format!("symbol {t:?} not in inventory"),
                    });
                }
            }
            if tokens.is_empty() {
                return Err(PhonologyError::BadLexicon {
                    line: i + 1,
                    reason: "empty pronunciation".into(),
                });
            }
            entries.entry(word.to_string()).or_insert(tokens);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&normalize_word(word))
    }

    /// Concatenates per-word pronunciations; word indices count input words.
    pub fn phonemize<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<PhonemeToken>, PhonologyError> {
        let mut out = Vec::new();
        for (wi, raw) in words.iter().enumerate() {
            let word = normalize_word(raw.as_ref());
            let pron = self
                .entries
                .get(&word)
                .ok_or_else(|| PhonologyError::UnknownWord(raw.as_ref().to_string()))?;
            for marked in pron {
                // validated at parse time
                out.push(PhonemeToken::parse_marked(marked, wi).expect("validated token"));
            }
        }
        Ok(out)
    }

    /// Phonemizes free text and syllabifies the result.
    pub fn transcribe(&self, text: &str) -> Result<Vec<PhonemeToken>, PhonologyError> {
        syllabify(&self.phonemize(&split_words(text))?)
    }
}

/// Fills syllable indices and positions with the maximal-onset principle.
///
/// Syllable indices restart at 0 in each word. Silence tokens are passed
/// through untouched.
pub fn syllabify(tokens: &[PhonemeToken]) -> Result<Vec<PhonemeToken>, PhonologyError> {
    let mut out = tokens.to_vec();
    let mut start = 0;
    while start < out.len() {
        let word = out[start].word_index;
        let mut end = start;
        while end < out.len() && out[end].word_index == word {
            end += 1;
        }
        let idx: Vec<usize> = (start..end).filter(|&i| !out[i].is_silence()).collect();
        if !idx.is_empty() {
            syllabify_word(&mut out, &idx, word)?;
        }
        start = end;
    }
    Ok(out)
}

fn syllabify_word(
    out: &mut [PhonemeToken],
    idx: &[usize],
    word: usize,
) -> Result<(), PhonologyError> {
    let nuclei: Vec<usize> = (0..idx.len()).filter(|&k| out[idx[k]].is_vowel()).collect();
    if nuclei.is_empty() {
        return Err(PhonologyError::NoNucleus(word));
    }
    for (s, &n) in nuclei.iter().enumerate() {
        let t = &mut out[idx[n]];
        t.syllable_index = s;
        t.position = SyllablePosition::Nucleus;
    }
    for k in 0..nuclei[0] {
        let t = &mut out[idx[k]];
        t.syllable_index = 0;
        t.position = SyllablePosition::Onset;
    }
    let last = nuclei.len() - 1;
    for k in nuclei[last] + 1..idx.len() {
        let t = &mut out[idx[k]];
        t.syllable_index = last;
        t.position = SyllablePosition::Coda;
    }
    for s in 1..nuclei.len() {
        let (a, b) = (nuclei[s - 1] + 1, nuclei[s]);
        let cluster: Vec<&str> = (a..b).map(|k| out[idx[k]].symbol.as_str()).collect();
        // longest legal suffix becomes the onset of the next syllable
        let split = (0..=cluster.len())
            .find(|&cut| legal_onset(&cluster[cut..]))
            .unwrap_or(cluster.len());
        for k in a..b {
            let t = &mut out[idx[k]];
            if k - a < split {
                t.syllable_index = s - 1;
                t.position = SyllablePosition::Coda;
            } else {
                t.syllable_index = s;
                t.position = SyllablePosition::Onset;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Fronting,
    Stopping,
    Gliding,
    Deaffrication,
}

impl ProcessKind {
    pub const ALL: [ProcessKind; 4] = [
        ProcessKind::Fronting,
        ProcessKind::Stopping,
        ProcessKind::Gliding,
        ProcessKind::Deaffrication,
    ];

    fn table(self) -> &'static [(&'static str, &'static str)] {
        match self {
            // velars → alveolars
            ProcessKind::Fronting => &[("k", "t"), ("ɡ", "d"), ("ŋ", "n")],
            // fricatives → homorganic stops
            ProcessKind::Stopping => &[
                ("f", "p"), ("v", "b"), ("θ", "t"), ("ð", "d"), ("s", "t"), ("z", "d"),
                ("ʃ", "t"), ("ʒ", "d"),
            ],
            // liquids → glides
            ProcessKind::Gliding => &[("ɹ", "w"), ("l", "j")],
            // affricates → fricatives
            ProcessKind::Deaffrication => &[("tʃ", "ʃ"), ("dʒ", "ʒ")],
        }
    }
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ProcessKind::Fronting => "fronting",
            ProcessKind::Stopping => "stopping",
            ProcessKind::Gliding => "gliding",
            ProcessKind::Deaffrication => "deaffrication",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonologicalProcess {
    pub name: ProcessKind,
    pub mapping: BTreeMap<String, String>,
}

impl PhonologicalProcess {
    pub fn standard(name: ProcessKind) -> Self {
        let mapping = name
            .table()
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        Self { name, mapping }
    }

    pub fn all() -> Vec<Self> {
        ProcessKind::ALL.iter().map(|&k| Self::standard(k)).collect()
    }

    pub fn applies_to(&self, symbol: &str) -> bool {
        self.mapping.contains_key(symbol)
    }
}

/// Substitutes the token's symbol according to the process table.
pub fn apply_process(
    token: &PhonemeToken,
    process: &PhonologicalProcess,
) -> Result<PhonemeToken, PhonologyError> {
    let target = process
        .mapping
        .get(&token.symbol)
        .ok_or_else(|| PhonologyError::NotApplicable {
            symbol: token.symbol.clone(),
            process: process.name,
        })?;
    Ok(PhonemeToken {
        symbol: target.clone(),
        ..token.clone()
    })
}
