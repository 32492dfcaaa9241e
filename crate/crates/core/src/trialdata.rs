//! Trial lists, score files and the `EMB1` binary embedding store.
//!
//! Trial lists follow the VoxCeleb layout: `label enroll test` (labeled) or
//! `enroll test` (unlabeled), whitespace separated, one trial per line.
//! Identifiers are opaque strings; they may contain `/` but never whitespace.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use thiserror::Error;

/// Magic bytes at the start of an embedding store file.
pub const STORE_MAGIC: &[u8; 4] = b"EMB1";

/// Norm tolerance for the `normalized` flag of an [`EmbeddingStore`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("invalid trial id {0:?}")]
    BadId(String),
    #[error("trial list mixes labeled and unlabeled trials")]
    MixedLabels,
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at offset 0 (expected \"EMB1\")")]
    BadMagic { found: [u8; 4] },
    #[error("truncated {what} at offset {offset}")]
    Truncated { what: &'static str, offset: u64 },
    #[error("duplicate id {id:?} in record at offset {offset}")]
    DuplicateId { id: String, offset: u64 },
    #[error("id at offset {offset} is not valid UTF-8")]
    BadIdEncoding { offset: u64 },
    #[error("invalid store: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.chars().any(char::is_whitespace)
}

/// An (enrollment, test) utterance pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: Option<bool>,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, label: Option<bool>) -> Result<Self, ParseError> {
        let (enroll, test) = (enroll.into(), test.into());
        for id in [&enroll, &test] {
            if !valid_id(id) {
                return Err(ParseError::BadId(id.clone()));
            }
        }
        Ok(Self { enroll, test, label })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialFormat {
    Labeled,
    Unlabeled,
}

/// Ordered trials; either every trial carries a label or none does.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialList {
    trials: Vec<Trial>,
    labeled: bool,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self, ParseError> {
        let labeled = trials.first().is_some_and(|t| t.label.is_some());
        if trials.iter().any(|t| t.label.is_some() != labeled) {
            return Err(ParseError::MixedLabels);
        }
        Ok(Self { trials, labeled })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Labels in trial order, or `None` for an unlabeled list.
    pub fn labels(&self) -> Option<Vec<bool>> {
        self.labeled
            .then(|| self.trials.iter().map(|t| t.label.unwrap_or(false)).collect())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trial> {
        self.trials.iter()
    }
}

/// Parses a trial list. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_trials(text: &str, format: TrialFormat) -> Result<TrialList, ParseError> {
    let mut trials = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let err = |msg: String| ParseError::Line { line, msg };
        let trial = match (format, toks.as_slice()) {
            (TrialFormat::Labeled, [label, enroll, test]) => {
                let label = match *label {
                    "1" => true,
                    "0" => false,
                    other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
                };
                Trial::new(*enroll, *test, Some(label))
            }
            (TrialFormat::Unlabeled, [enroll, test]) => Trial::new(*enroll, *test, None),
            (TrialFormat::Labeled, _) => {
                return Err(err(format!("expected 3 tokens (label enroll test), found {}", toks.len())))
            }
            (TrialFormat::Unlabeled, _) => {
                return Err(err(format!("expected 2 tokens (enroll test), found {}", toks.len())))
            }
        };
        trials.push(trial.map_err(|e| err(e.to_string()))?);
    }
    TrialList::new(trials)
}

/// Parses a trial list, picking the format from the token count of the first
/// non-empty line (3 tokens means labeled).
pub fn parse_trials_auto(text: &str) -> Result<TrialList, ParseError> {
    let first = text.lines().map(str::split_whitespace).find_map(|mut t| t.next().map(|_| t.count() + 1));
    match first {
        Some(3) => parse_trials(text, TrialFormat::Labeled),
        _ => parse_trials(text, TrialFormat::Unlabeled),
    }
}

pub fn serialize_trials(list: &TrialList) -> String {
    let mut out = String::new();
    for t in list.iter() {
        match t.label {
            Some(l) => writeln!(out, "{} {} {}", u8::from(l), t.enroll, t.test),
            None => writeln!(out, "{} {}", t.enroll, t.test),
        }
        .expect("writing to a String cannot fail");
    }
    out
}

/// Per-trial scores aligned 1:1 with a trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    trials: TrialList,
    scores: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreSetError {
    #[error("{scores} scores for {trials} trials")]
    LengthMismatch { trials: usize, scores: usize },
    #[error("non-finite score at trial {0}")]
    NonFinite(usize),
    #[error("trial {index}: score file has ({found_enroll}, {found_test}), trial list has ({enroll}, {test})")]
    IdMismatch {
        index: usize,
        enroll: String,
        test: String,
        found_enroll: String,
        found_test: String,
    },
}

impl ScoreSet {
    pub fn new(trials: TrialList, scores: Vec<f64>) -> Result<Self, ScoreSetError> {
        if trials.len() != scores.len() {
            return Err(ScoreSetError::LengthMismatch { trials: trials.len(), scores: scores.len() });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(ScoreSetError::NonFinite(i));
        }
        Ok(Self { trials, scores })
    }

    pub fn trials(&self) -> &TrialList {
        &self.trials
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Replaces the (usually unlabeled) trial list with `labeled`, checking
    /// that both lists name the same pairs in the same order.
    pub fn with_trials(self, labeled: TrialList) -> Result<Self, ScoreSetError> {
        if labeled.len() != self.scores.len() {
            return Err(ScoreSetError::LengthMismatch { trials: labeled.len(), scores: self.scores.len() });
        }
        for (index, (a, b)) in labeled.iter().zip(self.trials.iter()).enumerate() {
            if a.enroll != b.enroll || a.test != b.test {
                return Err(ScoreSetError::IdMismatch {
                    index,
                    enroll: a.enroll.clone(),
                    test: a.test.clone(),
                    found_enroll: b.enroll.clone(),
                    found_test: b.test.clone(),
                });
            }
        }
        Ok(Self { trials: labeled, scores: self.scores })
    }
}

/// Formats a score with at least 9 significant digits.
pub fn format_score(score: f64) -> String {
    let a = score.abs();
    if a == 0.0 || (0.1..1e15).contains(&a) {
        format!("{score:.9}")
    } else {
        format!("{score:.8e}")
    }
}

/// One `enroll test score` line per trial.
pub fn serialize_scores(set: &ScoreSet) -> String {
    let mut out = String::with_capacity(set.len() * 48);
    for (t, s) in set.trials.iter().zip(&set.scores) {
        writeln!(out, "{} {} {}", t.enroll, t.test, format_score(*s)).expect("writing to a String cannot fail");
    }
    out
}

/// Inverse of [`serialize_scores`]. The returned set has an unlabeled trial list.
pub fn parse_scores(text: &str) -> Result<ScoreSet, ParseError> {
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let err = |msg: String| ParseError::Line { line, msg };
        let [enroll, test, score] = toks.as_slice() else {
            return Err(err(format!("expected 3 tokens (enroll test score), found {}", toks.len())));
        };
        let score: f64 = score.parse().map_err(|_| err(format!("bad score {score:?}")))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score {score}")));
        }
        trials.push(Trial::new(*enroll, *test, None).map_err(|e| err(e.to_string()))?);
        scores.push(score);
    }
    let trials = TrialList::new(trials)?;
    Ok(ScoreSet { trials, scores })
}

/// Identifier-indexed matrix of fixed-dimension embeddings.
///
/// `normalized` is derived from the data at construction: it is set exactly
/// when the store is non-empty and every vector has unit L2 norm within
/// [`UNIT_NORM_TOL`].
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
    normalized: bool,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), data: Vec::new(), index: HashMap::new(), normalized: false }
    }

    pub fn push(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<(), FormatError> {
        let id = id.into();
        if !valid_id(&id) {
            return Err(FormatError::Invalid(format!("invalid id {id:?}")));
        }
        if id.len() > usize::from(u16::MAX) {
            return Err(FormatError::Invalid(format!("id longer than {} bytes", u16::MAX)));
        }
        if vector.len() != self.dim {
            return Err(FormatError::Invalid(format!(
                "vector for {id:?} has {} entries, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::Invalid(format!("non-finite entry in vector for {id:?}")));
        }
        if self.index.contains_key(&id) {
            return Err(FormatError::Invalid(format!("duplicate id {id:?}")));
        }
        let unit = (l2_norm(vector) - 1.0).abs() <= UNIT_NORM_TOL;
        self.normalized = unit && (self.ids.is_empty() || self.normalized);
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vector(i))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.vector(i)))
    }

    /// Writes the `EMB1` layout: magic, `u32` dim, `u64` count, then per
    /// record a `u16` id length, the id bytes and `dim` little-endian `f32`s.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dim = u32::try_from(self.dim).map_err(|_| std::io::Error::other("dim exceeds u32"))?;
        w.write_all(STORE_MAGIC)?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (id, v) in self.iter() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.ids.len() * (self.dim * 4 + 34));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        if &magic != STORE_MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        let dim = u32::from_le_bytes(cur.take(4, "header")?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(cur.take(8, "header")?.try_into().unwrap());
        let mut store = Self::new(dim);
        for _ in 0..count {
            let offset = cur.pos as u64;
            let id_len = u16::from_le_bytes(cur.take(2, "record")?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(cur.take(id_len, "record id")?)
                .map_err(|_| FormatError::BadIdEncoding { offset })?
                .to_owned();
            let raw = cur.take(dim * 4, "record vector")?;
            let vector: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if store.index.contains_key(&id) {
                return Err(FormatError::DuplicateId { id, offset });
            }
            store.push(id, &vector).map_err(|e| match e {
                FormatError::Invalid(msg) => FormatError::Invalid(format!("record at offset {offset}: {msg}")),
                other => other,
            })?;
        }
        if cur.pos != bytes.len() {
            return Err(FormatError::Invalid(format!("trailing bytes at offset {}", cur.pos)));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated { what, offset: self.pos as u64 }),
        }
    }
}
