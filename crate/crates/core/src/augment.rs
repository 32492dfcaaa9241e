//! Offline speed perturbation and online noise / music / babble / reverb
//! augmentation with exact whole-clip SNR mixing.

use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::features::{fit_length, read_wav, tile, FeatureError, Waveform};

/// Speed factors used for offline class expansion.
pub const SPEED_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("speed factor must be positive, got {0}")]
    BadFactor(f64),
    #[error("degenerate SNR: {0} has zero power")]
    DegenerateSnr(&'static str),
    #[error("babble needs {k} speakers but the speech bank has {available}")]
    BankTooSmall { k: usize, available: usize },
    #[error("babble speaker count {k} outside policy range {min}..={max}")]
    SpeakerCount { k: usize, min: usize, max: usize },
    #[error("silent babble: selected speech is all zeros")]
    SilentBabble,
    #[error("silent impulse response")]
    SilentRir,
    #[error("noise bank category {0:?} is empty")]
    EmptyCategory(Category),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("sample rate mismatch: expected {expected} Hz, got {found} Hz")]
    RateMismatch { expected: u32, found: u32 },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Resamples by linear interpolation at rate ratio `factor`; the output has
/// `round(len / factor)` samples and factor 1.0 returns the input unchanged.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform, AugmentError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(AugmentError::BadFactor(factor));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let x = w.samples();
    let out_len = (x.len() as f64 / factor).round() as usize;
    let last = x.len().saturating_sub(1);
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            if j < last {
                x[j] + (x[j + 1] - x[j]) * frac
            } else {
                x[last]
            }
        })
        .collect();
    Ok(w.with_samples(out))
}

/// Number of classes after treating every (speaker, speed factor) pair as its own class.
pub fn relabel_for_speed(n_speakers: usize, factor_count: usize) -> usize {
    n_speakers * factor_count
}

pub fn speed_class_id(speaker: usize, factor_index: usize, factor_count: usize) -> usize {
    speaker * factor_count + factor_index
}

/// Inverse of [`speed_class_id`]: `(speaker, factor_index)`.
pub fn speed_class_parts(class: usize, factor_count: usize) -> (usize, usize) {
    (class / factor_count, class % factor_count)
}

/// Gain that puts `noise` at `snr_db` below `signal`, with powers measured over the full clips.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `signal + g * noise`, where `noise` is first tiled or cropped (from its
/// start) to the signal length and `g` sets the requested SNR exactly.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform, AugmentError> {
    if signal.sample_rate() != noise.sample_rate() {
        return Err(AugmentError::RateMismatch { expected: signal.sample_rate(), found: noise.sample_rate() });
    }
    let ps = signal.power();
    if !(ps > 0.0) {
        return Err(AugmentError::DegenerateSnr("signal"));
    }
    if noise.is_empty() {
        return Err(AugmentError::DegenerateSnr("noise"));
    }
    let n = tile(noise.samples(), signal.len());
    let pn = crate::features::mean_square(&n);
    if !(pn > 0.0) {
        return Err(AugmentError::DegenerateSnr("noise"));
    }
    let g = snr_gain(ps, pn, snr_db);
    let out = signal.samples().iter().zip(&n).map(|(s, v)| s + g * v).collect();
    Ok(signal.with_samples(out))
}

/// Sum of `k` distinct randomly chosen speech clips, each fitted to `len`
/// samples (random crop or cyclic repetition).
pub fn make_babble<R: Rng + ?Sized>(
    bank: &NoiseBank,
    k: usize,
    policy: &AugmentPolicy,
    len: usize,
    rng: &mut R,
) -> Result<Waveform, AugmentError> {
    let (min, max) = (*policy.babble_speakers.start(), *policy.babble_speakers.end());
    if !policy.babble_speakers.contains(&k) {
        return Err(AugmentError::SpeakerCount { k, min, max });
    }
    let speech = &bank.speech;
    if speech.len() < k {
        return Err(AugmentError::BankTooSmall { k, available: speech.len() });
    }
    let picks = index::sample(rng, speech.len(), k);
    let mut sum = vec![0.0; len];
    for i in picks.iter() {
        let clip = fit_length(&speech[i], len, rng)?;
        sum.iter_mut().zip(clip.samples()).for_each(|(a, b)| *a += b);
    }
    let out = Waveform::new(sum, bank.sample_rate)?;
    if !(out.power() > 0.0) {
        return Err(AugmentError::SilentBabble);
    }
    Ok(out)
}

/// Full linear convolution of `x` with `h`, truncated to `x.len()`.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 || h.is_empty() {
        return vec![0.0; n];
    }
    let h = &h[..h.len().min(n)];
    if n.min(h.len()) <= 64 {
        return (0..n)
            .map(|i| h.iter().enumerate().take(i + 1).map(|(j, hj)| hj * x[i - j]).sum())
            .collect();
    }
    let size = (n + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..n].iter().map(|c| c.re * scale).collect()
}

/// Convolves with the impulse response and rescales so the output peak
/// equals the input peak.
pub fn add_reverb(w: &Waveform, rir: &Waveform) -> Result<Waveform, AugmentError> {
    if rir.is_empty() || rir.peak() == 0.0 {
        return Err(AugmentError::SilentRir);
    }
    if w.sample_rate() != rir.sample_rate() {
        return Err(AugmentError::RateMismatch { expected: w.sample_rate(), found: rir.sample_rate() });
    }
    let mut out = convolve_truncated(w.samples(), rir.samples());
    let peak_out = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak_out > 0.0 {
        let g = w.peak() / peak_out;
        out.iter_mut().for_each(|s| *s *= g);
    }
    Ok(w.with_samples(out))
}

/// Per-augmentation probabilities and ranges for online augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub p_noise: f64,
    pub p_music: f64,
    pub p_babble: f64,
    pub p_reverb: f64,
    pub snr_noise: (f64, f64),
    pub snr_music: (f64, f64),
    pub snr_babble: (f64, f64),
    pub babble_speakers: RangeInclusive<usize>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_noise: 0.2,
            p_music: 0.2,
            p_babble: 0.2,
            p_reverb: 0.2,
            snr_noise: (0.0, 15.0),
            snr_music: (5.0, 15.0),
            snr_babble: (13.0, 20.0),
            babble_speakers: 3..=7,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidPolicy(m));
        for (name, p) in [("p_noise", self.p_noise), ("p_music", self.p_music), ("p_babble", self.p_babble), ("p_reverb", self.p_reverb)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        for (name, (lo, hi)) in [("snr_noise", self.snr_noise), ("snr_music", self.snr_music), ("snr_babble", self.snr_babble)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if *self.babble_speakers.start() < 1 || self.babble_speakers.is_empty() {
            return bad(format!("babble speaker range {:?} invalid", self.babble_speakers));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Noise,
    Music,
    Speech,
    Rir,
}

impl std::str::FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "music" => Ok(Self::Music),
            "speech" => Ok(Self::Speech),
            "rir" => Ok(Self::Rir),
            other => Err(format!("unknown category {other:?} (expected noise, music, speech or rir)")),
        }
    }
}

/// Read-only collections of noise, music, speech (for babble) and impulse responses.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub sample_rate: u32,
    pub noise: Vec<Waveform>,
    pub music: Vec<Waveform>,
    pub speech: Vec<Waveform>,
    pub rir: Vec<Waveform>,
}

impl NoiseBank {
    pub fn new(sample_rate: u32) -> Self {
        Self { sample_rate, noise: vec![], music: vec![], speech: vec![], rir: vec![] }
    }

    pub fn add(&mut self, cat: Category, w: Waveform) -> Result<(), AugmentError> {
        if w.sample_rate() != self.sample_rate {
            return Err(AugmentError::RateMismatch { expected: self.sample_rate, found: w.sample_rate() });
        }
        self.category_mut(cat).push(w);
        Ok(())
    }

    pub fn category(&self, cat: Category) -> &[Waveform] {
        match cat {
            Category::Noise => &self.noise,
            Category::Music => &self.music,
            Category::Speech => &self.speech,
            Category::Rir => &self.rir,
        }
    }

    fn category_mut(&mut self, cat: Category) -> &mut Vec<Waveform> {
        match cat {
            Category::Noise => &mut self.noise,
            Category::Music => &mut self.music,
            Category::Speech => &mut self.speech,
            Category::Rir => &mut self.rir,
        }
    }

    fn pick<R: Rng + ?Sized>(&self, cat: Category, rng: &mut R) -> Result<&Waveform, AugmentError> {
        let items = self.category(cat);
        if items.is_empty() {
            return Err(AugmentError::EmptyCategory(cat));
        }
        Ok(&items[rng.random_range(0..items.len())])
    }

    /// Loads a manifest of `category path` lines. Relative paths resolve
    /// against the manifest's directory; `#` starts a comment line.
    pub fn load_manifest(manifest: &Path, sample_rate: u32) -> Result<Self, AugmentError> {
        let text = std::fs::read_to_string(manifest)?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut bank = Self::new(sample_rate);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| AugmentError::Manifest { line: i + 1, msg };
            let (cat, path) = line.split_once(char::is_whitespace).ok_or_else(|| err("expected \"category path\"".into()))?;
            let cat: Category = cat.parse().map_err(err)?;
            let path = base.join(path.trim());
            bank.add(cat, read_wav(&path, sample_rate)?)?;
        }
        Ok(bank)
    }
}

/// Which augmentations fired in one [`apply_policy`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Applied {
    pub noise: bool,
    pub music: bool,
    pub babble: bool,
    pub reverb: bool,
}

impl Applied {
    pub fn any(&self) -> bool {
        self.noise || self.music || self.babble || self.reverb
    }
}

/// Applies noise, music, babble and reverb in that order, each independently
/// with its policy probability. All four Bernoulli draws happen first, so
/// which augmentations fire does not depend on the random numbers consumed by
/// the others.
pub fn apply_policy<R: Rng + ?Sized>(
    w: &Waveform,
    policy: &AugmentPolicy,
    bank: &NoiseBank,
    rng: &mut R,
) -> Result<(Waveform, Applied), AugmentError> {
    policy.validate()?;
    let applied = Applied {
        noise: rng.random::<f64>() < policy.p_noise,
        music: rng.random::<f64>() < policy.p_music,
        babble: rng.random::<f64>() < policy.p_babble,
        reverb: rng.random::<f64>() < policy.p_reverb,
    };
    let mut out = w.clone();
    let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    for (on, cat, range) in [
        (applied.noise, Category::Noise, policy.snr_noise),
        (applied.music, Category::Music, policy.snr_music),
    ] {
        if on {
            let src = bank.pick(cat, rng)?;
            let noise = fit_length(src, out.len(), rng)?;
            let snr = uniform(rng, range);
            out = mix_at_snr(&out, &noise, snr)?;
        }
    }
    if applied.babble {
        let k = rng.random_range(policy.babble_speakers.clone());
        let babble = make_babble(bank, k, policy, out.len(), rng)?;
        let snr = uniform(rng, policy.snr_babble);
        out = mix_at_snr(&out, &babble, snr)?;
    }
    if applied.reverb {
        let rir = bank.pick(Category::Rir, rng)?;
        out = add_reverb(&out, rir)?;
    }
    Ok((out, applied))
}
