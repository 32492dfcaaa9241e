//! End-to-end pipeline: audio → (augment) → log-Mel + CMN → toy embedding →
//! scoring → metrics, plus the pieces the CLI reuses.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{apply_policy, NoiseBank};
use crate::config::{stage_seed, PipelineConfig, ScoringKind};
use crate::features::{apply_cmn, tile, MelExtractor, Waveform};
use crate::metrics::evaluate;
use crate::model::ToyEmbedder;
use crate::scoring::{score_trials, segment_id, segment_plan, speaker_mean_cohort, speaker_of, ScoringMode};
use crate::synthetic::{random_trials, synth_bank, synth_utterance, utterance_id, Voice};
use crate::trialdata::{serialize_scores, serialize_trials, EmbeddingStore, ScoreSet, TrialList};
use crate::Error;

/// Six significant digits; zero prints as `0.000000`.
pub fn format_metric(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.6}");
    }
    let decimals = (5 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn embed_waveform(w: &Waveform, extractor: &MelExtractor, embedder: &ToyEmbedder) -> Result<Vec<f32>, Error> {
    let f = apply_cmn(extractor.compute(w)?);
    Ok(embedder.embed(&f)?)
}

/// Cuts `n` evenly spaced segments of `secs` seconds; shorter input is first
/// cyclically padded to one segment.
pub fn msa_waveforms(w: &Waveform, n: usize, secs: f64) -> Result<Vec<Waveform>, Error> {
    let plan = segment_plan(w.duration_secs(), n, secs)?;
    let sr = f64::from(w.sample_rate());
    let seg_len = (secs * sr).round() as usize;
    let padded = tile(w.samples(), w.len().max(seg_len));
    Ok(plan
        .starts
        .iter()
        .map(|s| {
            let start = ((s * sr).round() as usize).min(padded.len() - seg_len);
            w.with_samples(padded[start..start + seg_len].to_vec())
        })
        .collect())
}

/// Embeds every utterance in parallel and stores them in input order. With
/// `msa = Some((n, secs))` each utterance yields `n` segment embeddings stored
/// under [`segment_id`].
pub fn embed_all(
    items: &[(String, Waveform)],
    extractor: &MelExtractor,
    embedder: &ToyEmbedder,
    msa: Option<(usize, f64)>,
) -> Result<EmbeddingStore, Error> {
    let vectors: Vec<Vec<(String, Vec<f32>)>> = items
        .par_iter()
        .map(|(id, w)| match msa {
            None => Ok(vec![(id.clone(), embed_waveform(w, extractor, embedder)?)]),
            Some((n, secs)) => msa_waveforms(w, n, secs)?
                .iter()
                .enumerate()
                .map(|(i, seg)| Ok((segment_id(id, i), embed_waveform(seg, extractor, embedder)?)))
                .collect(),
        })
        .collect::<Result<_, Error>>()?;
    let mut store = EmbeddingStore::new(embedder.out_dim());
    for (id, v) in vectors.into_iter().flatten() {
        store.push(id, &v)?;
    }
    Ok(store)
}

/// Everything one pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub embeddings: EmbeddingStore,
    pub trials: TrialList,
    pub scores: ScoreSet,
    pub eer: f64,
    pub min_dcf: f64,
}

impl PipelineRun {
    /// Writes `embeddings.bin`, `trials.txt`, `scores.txt` and `metrics.txt`.
    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |e| Error::Io(p, e)
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let files = [
            ("embeddings.bin", self.embeddings.to_bytes()),
            ("trials.txt", serialize_trials(&self.trials).into_bytes()),
            ("scores.txt", serialize_scores(&self.scores).into_bytes()),
            ("metrics.txt", self.metrics_text().into_bytes()),
        ];
        for (name, bytes) in files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(io(&path))?;
        }
        Ok(())
    }

    pub fn metrics_text(&self) -> String {
        format!("EER(%) {}\nminDCF {}\n", format_metric(self.eer), format_metric(self.min_dcf))
    }
}

fn synth_corpus(cfg: &PipelineConfig, prefix: &str, speakers: usize, utterances: usize) -> Vec<(String, Waveform)> {
    let mut voice_rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, &format!("voices/{prefix}")));
    let voices: Vec<Voice> = (0..speakers).map(|_| Voice::random(&mut voice_rng)).collect();
    let ids: Vec<(usize, usize)> = (0..speakers).flat_map(|s| (0..utterances).map(move |u| (s, u))).collect();
    ids.par_iter()
        .map(|&(s, u)| {
            let id = utterance_id(prefix, s, u);
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, &format!("audio/{id}")));
            let secs = if cfg.synth_min_secs == cfg.synth_max_secs {
                cfg.synth_min_secs
            } else {
                rand::Rng::random_range(&mut rng, cfg.synth_min_secs..cfg.synth_max_secs)
            };
            let w = synth_utterance(&voices[s], secs, cfg.sample_rate, &mut rng);
            (id, w)
        })
        .collect()
}

fn augment_all(cfg: &PipelineConfig, bank: &NoiseBank, items: Vec<(String, Waveform)>) -> Result<Vec<(String, Waveform)>, Error> {
    let policy = cfg.policy();
    items
        .into_par_iter()
        .map(|(id, w)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, &format!("augment/{id}")));
            let (out, _) = apply_policy(&w, &policy, bank, &mut rng)?;
            Ok((id, out))
        })
        .collect()
}

/// Runs the whole pipeline on seeded synthetic audio. Output is a pure
/// function of `cfg`, independent of the thread count.
pub fn run_synthetic(cfg: &PipelineConfig) -> Result<PipelineRun, Error> {
    cfg.validate()?;
    let extractor = MelExtractor::new(cfg.mel())?;
    let embedder = ToyEmbedder::new(cfg.n_mels, cfg.embed_dim, cfg.embed_seed);

    let mut corpus = synth_corpus(cfg, "spk", cfg.synth_speakers, cfg.synth_utterances);
    if cfg.augment {
        let mut bank_rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "bank"));
        let bank = synth_bank(cfg.sample_rate, cfg.babble_speakers[1].max(1), &mut bank_rng);
        corpus = augment_all(cfg, &bank, corpus)?;
    }

    let mut groups: Vec<Vec<String>> = vec![Vec::new(); cfg.synth_speakers];
    for (i, (id, _)) in corpus.iter().enumerate() {
        groups[i / cfg.synth_utterances].push(id.clone());
    }
    let trials = random_trials(&groups, cfg.synth_trials, stage_seed(cfg.seed, "trials"));

    let msa = (cfg.scoring == ScoringKind::Msa).then_some((cfg.msa_segments, cfg.msa_segment_secs));
    let embeddings = embed_all(&corpus, &extractor, &embedder, msa)?;

    let cohort = match (cfg.scoring, &cfg.cohort) {
        (ScoringKind::Asnorm, Some(path)) => Some(load_store(path)?),
        (ScoringKind::Asnorm, None) => {
            let items = synth_corpus(cfg, "coh", cfg.synth_cohort_speakers, 1);
            let store = embed_all(&items, &extractor, &embedder, None)?;
            Some(speaker_mean_cohort(&store, speaker_of)?)
        }
        _ => None,
    };
    let mode = match (&cohort, cfg.scoring) {
        (Some(c), _) => ScoringMode::AsNorm { cohort: c, top_k: cfg.top_k },
        (None, ScoringKind::Msa) => ScoringMode::Msa { segments: cfg.msa_segments },
        _ => ScoringMode::Raw,
    };
    let scores = score_trials(&trials, &embeddings, &mode)?;
    let labels = trials.labels().expect("synthetic trials are labeled");
    let (eer, min_dcf) = evaluate(scores.scores(), &labels, &cfg.dcf())?;
    Ok(PipelineRun { embeddings, trials, scores, eer, min_dcf })
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
    EmbeddingStore::from_bytes(&bytes).map_err(|e| Error::from(e).at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        PipelineConfig {
            synth_speakers: 3,
            synth_utterances: 2,
            synth_min_secs: 0.5,
            synth_max_secs: 0.8,
            synth_trials: 12,
            embed_dim: 32,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn metric_formatting() {
        assert_eq!(format_metric(0.0), "0.000000");
        assert_eq!(format_metric(12.345678), "12.3457");
        assert_eq!(format_metric(0.5), "0.500000");
        assert_eq!(format_metric(0.0123456789), "0.0123457");
        assert_eq!(format_metric(100.0), "100.000");
    }

    #[test]
    fn segments_cover_and_pad() {
        let w = Waveform::new((0..1000).map(|i| i as f64 / 1000.0).collect(), 100).unwrap();
        let segs = msa_waveforms(&w, 5, 2.0).unwrap();
        assert_eq!(segs.len(), 5);
        assert!(segs.iter().all(|s| s.len() == 200));
        assert_eq!(segs[0].samples()[0], 0.0);
        assert_eq!(segs[4].samples()[199], w.samples()[999]);
        let short = Waveform::new(vec![1.0, 2.0, 3.0], 1).unwrap();
        let segs = msa_waveforms(&short, 2, 5.0).unwrap();
        assert_eq!(segs[1].samples(), &[1.0, 2.0, 3.0, 1.0, 2.0]);
    }

    #[test]
    fn pipeline_is_deterministic_across_modes() {
        for scoring in [ScoringKind::Raw, ScoringKind::Msa] {
            let cfg = PipelineConfig { scoring, msa_segment_secs: 0.3, ..small() };
            let a = run_synthetic(&cfg).unwrap();
            let b = run_synthetic(&cfg).unwrap();
            assert_eq!(a.embeddings.to_bytes(), b.embeddings.to_bytes());
            assert_eq!(serialize_scores(&a.scores), serialize_scores(&b.scores));
            assert_eq!(a.scores.len(), 12);
        }
    }

    #[test]
    fn asnorm_with_synthetic_cohort() {
        let cfg = PipelineConfig { scoring: ScoringKind::Asnorm, synth_cohort_speakers: 10, top_k: 5, augment: false, ..small() };
        let run = run_synthetic(&cfg).unwrap();
        assert!(run.scores.scores().iter().all(|s| s.is_finite()));
    }
}
