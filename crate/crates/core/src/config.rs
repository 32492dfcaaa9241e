//! Flat key-value pipeline configuration and per-stage seed derivation.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::augment::AugmentPolicy;
use crate::features::MelConfig;
use crate::metrics::DcfConfig;
use crate::Error;

/// Derives the seed for a named stage from the global seed: FNV-1a hash of
/// the stage name, XOR the global seed, then one SplitMix64 finalization.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global ^ h)
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringKind {
    Raw,
    Asnorm,
    Msa,
}

/// Every field has a default; a config file only lists what it overrides.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub augment: bool,
    pub p_noise: f64,
    pub p_music: f64,
    pub p_babble: f64,
    pub p_reverb: f64,
    pub snr_noise: [f64; 2],
    pub snr_music: [f64; 2],
    pub snr_babble: [f64; 2],
    pub babble_speakers: [usize; 2],
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub scoring: ScoringKind,
    pub cohort: Option<PathBuf>,
    pub top_k: usize,
    pub msa_segments: usize,
    pub msa_segment_secs: f64,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub synth_speakers: usize,
    pub synth_utterances: usize,
    pub synth_cohort_speakers: usize,
    pub synth_min_secs: f64,
    pub synth_max_secs: f64,
    pub synth_trials: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mel = MelConfig::default();
        let policy = AugmentPolicy::default();
        Self {
            seed: 0,
            sample_rate: mel.sample_rate,
            window_ms: mel.window_ms,
            hop_ms: mel.hop_ms,
            n_fft: mel.n_fft,
            n_mels: mel.n_mels,
            augment: true,
            p_noise: policy.p_noise,
            p_music: policy.p_music,
            p_babble: policy.p_babble,
            p_reverb: policy.p_reverb,
            snr_noise: [policy.snr_noise.0, policy.snr_noise.1],
            snr_music: [policy.snr_music.0, policy.snr_music.1],
            snr_babble: [policy.snr_babble.0, policy.snr_babble.1],
            babble_speakers: [*policy.babble_speakers.start(), *policy.babble_speakers.end()],
            embed_dim: 512,
            embed_seed: 0,
            scoring: ScoringKind::Raw,
            cohort: None,
            top_k: crate::scoring::DEFAULT_TOP_K,
            msa_segments: crate::scoring::MSA_SEGMENTS,
            msa_segment_secs: crate::scoring::MSA_SEGMENT_SECS,
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
            synth_speakers: 8,
            synth_utterances: 4,
            synth_cohort_speakers: 120,
            synth_min_secs: 2.0,
            synth_max_secs: 4.0,
            synth_trials: 200,
        }
    }
}

impl PipelineConfig {
    /// Parses and validates. Relative `cohort` paths resolve against `base`.
    pub fn from_text(text: &str, base: &Path) -> Result<Self, Error> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(c) = cfg.cohort.as_mut() {
            if c.is_relative() {
                *c = base.join(&*c);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(path.display().to_string(), e))?;
        Self::from_text(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            sample_rate: self.sample_rate,
            window_ms: self.window_ms,
            hop_ms: self.hop_ms,
            n_fft: self.n_fft,
            n_mels: self.n_mels,
            ..MelConfig::default()
        }
    }

    pub fn policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            p_noise: self.p_noise,
            p_music: self.p_music,
            p_babble: self.p_babble,
            p_reverb: self.p_reverb,
            snr_noise: (self.snr_noise[0], self.snr_noise[1]),
            snr_music: (self.snr_music[0], self.snr_music[1]),
            snr_babble: (self.snr_babble[0], self.snr_babble[1]),
            babble_speakers: self.babble_speakers[0]..=self.babble_speakers[1],
        }
    }

    pub fn dcf(&self) -> DcfConfig {
        DcfConfig { p_target: self.p_target, c_miss: self.c_miss, c_fa: self.c_fa }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        self.mel().validate()?;
        self.policy().validate()?;
        self.dcf().validate()?;
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        if self.msa_segments == 0 || !(self.msa_segment_secs > 0.0) {
            return bad("msa_segments and msa_segment_secs must be positive".into());
        }
        if let Some(c) = &self.cohort {
            if !c.is_file() {
                return bad(format!("cohort file {} does not exist", c.display()));
            }
        }
        if self.synth_speakers < 2 || self.synth_utterances < 2 {
            return bad("need at least 2 synthetic speakers with 2 utterances each".into());
        }
        if !(self.synth_min_secs > 0.0 && self.synth_min_secs <= self.synth_max_secs) {
            return bad("need 0 < synth_min_secs <= synth_max_secs".into());
        }
        if self.synth_trials < 2 {
            return bad("synth_trials must be at least 2".into());
        }
        if self.scoring == ScoringKind::Asnorm && self.cohort.is_none() && self.synth_cohort_speakers < self.top_k {
            return bad(format!("synth_cohort_speakers ({}) must be >= top_k ({})", self.synth_cohort_speakers, self.top_k));
        }
        Ok(())
    }
}
