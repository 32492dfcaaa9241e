//! Trial scoring: raw cosine, adaptive symmetric normalization (AS-Norm)
//! against a top-K imposter cohort, and matrix score averaging (MSA) over
//! per-utterance segment embeddings.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::trialdata::{EmbeddingStore, FormatError, ScoreSet, ScoreSetError, TrialList};

/// Allowed deviation from unit norm for scored embeddings.
pub const SCORE_NORM_TOL: f64 = 1e-4;
pub const DEFAULT_TOP_K: usize = 100;
pub const MSA_SEGMENTS: usize = 5;
pub const MSA_SEGMENT_SECS: f64 = 6.0;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("embedding is not length-normalized (norm {0})")]
    NotNormalized(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cohort has {size} entries, fewer than top-K = {k}")]
    CohortTooSmall { size: usize, k: usize },
    #[error("degenerate cohort: top-{k} scores have standard deviation {std}")]
    DegenerateCohort { k: usize, std: f64 },
    #[error("embedding for {0:?} not found")]
    MissingEmbedding(String),
    #[error("segment sets must be non-empty and equally sized, got {0} and {1}")]
    SegmentCount(usize, usize),
    #[error("utterance length must be positive, got {0}")]
    BadLength(f64),
    #[error(transparent)]
    ScoreSet(#[from] ScoreSetError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn check_unit(v: &[f32]) -> Result<(), ScoreError> {
    let n = dot32(v, v).sqrt();
    if (n - 1.0).abs() > SCORE_NORM_TOL {
        return Err(ScoreError::NotNormalized(n));
    }
    Ok(())
}

/// Dot product of two length-normalized embeddings.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64, ScoreError> {
    if a.len() != b.len() {
        return Err(ScoreError::DimMismatch(a.len(), b.len()));
    }
    check_unit(a)?;
    check_unit(b)?;
    Ok(dot32(a, b))
}

/// Mean and population standard deviation of an utterance's top-K cohort scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

/// Statistics of the `k` largest values in `scores`.
pub fn top_k_stats(scores: &[f64], k: usize) -> Result<CohortStats, ScoreError> {
    if k == 0 || scores.len() < k {
        return Err(ScoreError::CohortTooSmall { size: scores.len(), k });
    }
    let mut buf = scores.to_vec();
    let top = if k < buf.len() {
        let (_, _, upper) = buf.select_nth_unstable_by(scores.len() - k - 1, |a, b| a.total_cmp(b));
        &*upper
    } else {
        &buf[..]
    };
    let mean = top.iter().sum::<f64>() / k as f64;
    let var = top.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    if std < 1e-9 {
        return Err(ScoreError::DegenerateCohort { k, std });
    }
    Ok(CohortStats { mean, std })
}

/// Scores `e` against every cohort vector and summarizes the top `k`.
pub fn cohort_stats(e: &[f32], cohort: &EmbeddingStore, k: usize) -> Result<CohortStats, ScoreError> {
    if cohort.len() < k {
        return Err(ScoreError::CohortTooSmall { size: cohort.len(), k });
    }
    if e.len() != cohort.dim() {
        return Err(ScoreError::DimMismatch(e.len(), cohort.dim()));
    }
    let scores: Vec<f64> = (0..cohort.len()).map(|i| dot32(e, cohort.vector(i))).collect();
    top_k_stats(&scores, k)
}

/// Symmetric z-normalization of a raw score against both sides' cohort statistics.
pub fn asnorm_score(raw: f64, enroll: &CohortStats, test: &CohortStats) -> f64 {
    0.5 * ((raw - enroll.mean) / enroll.std + (raw - test.mean) / test.std)
}

/// Speaker key of a VoxCeleb-style id: everything before the first `/`.
pub fn speaker_of(id: &str) -> &str {
    id.split('/').next().unwrap_or(id)
}

/// Builds a cohort of per-speaker mean embeddings, re-length-normalized.
/// Speakers appear in order of first occurrence.
pub fn speaker_mean_cohort<'a>(
    store: &'a EmbeddingStore,
    speaker: impl Fn(&'a str) -> &'a str,
) -> Result<EmbeddingStore, ScoreError> {
    let dim = store.dim();
    let mut order: Vec<&str> = Vec::new();
    let mut sums: HashMap<&str, Vec<f64>> = HashMap::new();
    for (id, v) in store.iter() {
        let spk = speaker(id);
        let acc = sums.entry(spk).or_insert_with(|| {
            order.push(spk);
            vec![0.0; dim]
        });
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a += f64::from(x));
    }
    let mut out = EmbeddingStore::new(dim);
    for spk in order {
        let s = &sums[spk];
        let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(ScoreError::NotNormalized(n));
        }
        let v: Vec<f32> = s.iter().map(|x| (x / n) as f32).collect();
        out.push(spk, &v)?;
    }
    Ok(out)
}

/// Segment start offsets for MSA.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPlan {
    pub segment_secs: f64,
    /// Utterance length after cyclic padding (at least one segment).
    pub padded_secs: f64,
    pub starts: Vec<f64>,
}

/// Evenly spaced (possibly overlapping) segment starts; shorter utterances are
/// padded to one segment and all segments start at 0.
pub fn segment_plan(utterance_secs: f64, n: usize, segment_secs: f64) -> Result<SegmentPlan, ScoreError> {
    if !(utterance_secs > 0.0) || !utterance_secs.is_finite() {
        return Err(ScoreError::BadLength(utterance_secs));
    }
    if n == 0 || !(segment_secs > 0.0) {
        return Err(ScoreError::SegmentCount(n, n));
    }
    if utterance_secs <= segment_secs || n == 1 {
        return Ok(SegmentPlan { segment_secs, padded_secs: utterance_secs.max(segment_secs), starts: vec![0.0; n] });
    }
    let step = (utterance_secs - segment_secs) / (n - 1) as f64;
    let starts = (0..n).map(|i| i as f64 * step).collect();
    Ok(SegmentPlan { segment_secs, padded_secs: utterance_secs, starts })
}

/// Mean of all pairwise cosine scores between two segment sets.
pub fn msa_score(a: &[&[f32]], b: &[&[f32]]) -> Result<f64, ScoreError> {
    if a.is_empty() || b.is_empty() || a.len() != b.len() {
        return Err(ScoreError::SegmentCount(a.len(), b.len()));
    }
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += cosine_score(x, y)?;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// Id under which segment `i` of utterance `id` is stored.
pub fn segment_id(id: &str, i: usize) -> String {
    format!("{id}#{i}")
}

#[derive(Debug, Clone)]
pub enum ScoringMode<'a> {
    Raw,
    AsNorm { cohort: &'a EmbeddingStore, top_k: usize },
    /// Looks up `n` segment embeddings per utterance via [`segment_id`].
    Msa { segments: usize },
}

fn lookup<'s>(store: &'s EmbeddingStore, id: &str) -> Result<&'s [f32], ScoreError> {
    store.get(id).ok_or_else(|| ScoreError::MissingEmbedding(id.to_owned()))
}

/// Scores every trial. Work is spread over the current rayon pool; results
/// are collected in trial order, so the output equals a sequential run.
pub fn score_trials(trials: &TrialList, store: &EmbeddingStore, mode: &ScoringMode<'_>) -> Result<ScoreSet, ScoreError> {
    let scores: Vec<f64> = match mode {
        ScoringMode::Raw => trials
            .trials()
            .par_iter()
            .map(|t| cosine_score(lookup(store, &t.enroll)?, lookup(store, &t.test)?))
            .collect::<Result<_, _>>()?,
        ScoringMode::AsNorm { cohort, top_k } => {
            let mut ids: Vec<&str> = trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]).collect();
            ids.sort_unstable();
            ids.dedup();
            let stats: HashMap<&str, CohortStats> = ids
                .par_iter()
                .map(|id| Ok((*id, cohort_stats(lookup(store, id)?, cohort, *top_k)?)))
                .collect::<Result<_, ScoreError>>()?;
            trials
                .trials()
                .par_iter()
                .map(|t| {
                    let raw = cosine_score(lookup(store, &t.enroll)?, lookup(store, &t.test)?)?;
                    Ok(asnorm_score(raw, &stats[t.enroll.as_str()], &stats[t.test.as_str()]))
                })
                .collect::<Result<_, ScoreError>>()?
        }
        ScoringMode::Msa { segments } => trials
            .trials()
            .par_iter()
            .map(|t| {
                let seg = |id: &str| (0..*segments).map(|i| lookup(store, &segment_id(id, i))).collect::<Result<Vec<_>, _>>();
                msa_score(&seg(&t.enroll)?, &seg(&t.test)?)
            })
            .collect::<Result<_, _>>()?,
    };
    Ok(ScoreSet::new(trials.clone(), scores)?)
}
