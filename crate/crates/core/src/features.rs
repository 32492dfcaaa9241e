//! Log-Mel filterbank features, cepstral mean normalization, fixed-length
//! cropping, and the WAV / `MEL1` file formats.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const MEL_MAGIC: &[u8; 4] = b"MEL1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform too short: {len} samples, need at least {window} for one window")]
    TooShort { len: usize, window: usize },
    #[error("empty waveform")]
    Empty,
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("unsupported wav {path}: {reason}")]
    UnsupportedWav { path: String, reason: String },
    #[error("wav {path}: {source}")]
    Wav { path: String, source: hound::Error },
    #[error("bad MEL1 data: {0}")]
    BadMel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono audio, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate == 0 {
            return Err(FeatureError::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(FeatureError::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean square amplitude over the whole clip.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Same rate, new samples. Samples produced by arithmetic on finite
    /// inputs are assumed finite.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self { samples, sample_rate: self.sample_rate }
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|s| s * s).sum::<f64>() / x.len() as f64
}

/// Frame and filterbank parameters. Defaults: 25 ms Hamming window, 10 ms hop,
/// 512-point FFT, 80 HTK-scale mel bins spanning 0 Hz to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: DEFAULT_SAMPLE_RATE, window_ms: 25.0, hop_ms: 10.0, n_fft: 512, n_mels: 80, floor: 1e-10 }
    }
}

impl MelConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * f64::from(self.sample_rate) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * f64::from(self.sample_rate) / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidConfig(m.into()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return bad("window and hop must span at least one sample");
        }
        if self.window_samples() > self.n_fft {
            return bad("window longer than FFT size");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        if !(self.floor > 0.0) {
            return bad("floor must be positive");
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK mel filters, `n_mels` rows of `n_fft/2 + 1` weights.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let nyquist = f64::from(cfg.sample_rate) / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(cfg.sample_rate) / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - lo) / (center - lo);
                    let down = (hi - f) / (hi - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `n_bins × n_frames` matrix stored row-major (one row per mel bin).
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeatures {
    data: Vec<f64>,
    n_bins: usize,
    n_frames: usize,
    frame_hop: f64,
    cmn_applied: bool,
}

impl MelFeatures {
    pub fn from_rows(data: Vec<f64>, n_bins: usize, n_frames: usize, frame_hop: f64) -> Result<Self, FeatureError> {
        if data.len() != n_bins * n_frames {
            return Err(FeatureError::BadMel(format!("{} values for {n_bins}x{n_frames}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::BadMel("non-finite entry".into()));
        }
        Ok(Self { data, n_bins, n_frames, frame_hop, cmn_applied: false })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_hop(&self) -> f64 {
        self.frame_hop
    }

    pub fn cmn_applied(&self) -> bool {
        self.cmn_applied
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.n_frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        &self.data[bin * self.n_frames..(bin + 1) * self.n_frames]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector of one frame (one value per bin).
    pub fn frame(&self, t: usize) -> Vec<f64> {
        (0..self.n_bins).map(|b| self.get(b, t)).collect()
    }

    /// `MEL1` dump: magic, `u32` rows, `u32` cols, row-major little-endian `f32`.
    pub fn write_mel1<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MEL_MAGIC)?;
        w.write_all(&(self.n_bins as u32).to_le_bytes())?;
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()
    }

    /// Reads a `MEL1` dump. Frame hop and CMN state are not stored; the hop
    /// is taken from the argument and CMN is reported as not applied.
    pub fn read_mel1<R: Read>(mut r: R, frame_hop: f64) -> Result<Self, FeatureError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != MEL_MAGIC {
            return Err(FeatureError::BadMel("missing MEL1 header".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != rows * cols * 4 {
            return Err(FeatureError::BadMel(format!("expected {} data bytes, found {}", rows * cols * 4, body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        Self::from_rows(data, rows, cols, frame_hop)
    }
}

/// Reusable log-Mel extractor (filterbank, window and FFT plan computed once).
pub struct MelExtractor {
    cfg: MelConfig,
    filters: Vec<Vec<f64>>,
    window: Vec<f64>,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let filters = mel_filterbank(&cfg);
        let window = hamming(cfg.window_samples());
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { cfg, filters, window, fft })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// `T = 1 + floor((len - window) / hop)` frames of `ln(max(mel power, floor))`.
    pub fn compute(&self, w: &Waveform) -> Result<MelFeatures, FeatureError> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(FeatureError::InvalidWaveform(format!(
                "sample rate {} does not match feature config {}",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let (win, hop) = (self.cfg.window_samples(), self.cfg.hop_samples());
        if w.len() < win {
            return Err(FeatureError::TooShort { len: w.len(), window: win });
        }
        let n_frames = 1 + (w.len() - win) / hop;
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut data = vec![0.0; self.cfg.n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let frame = &w.samples()[t * hop..t * hop + win];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, (s, h)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                b.re = s * h;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                data[m * n_frames + t] = e.max(self.cfg.floor).ln();
            }
        }
        Ok(MelFeatures {
            data,
            n_bins: self.cfg.n_mels,
            n_frames,
            frame_hop: hop as f64 / f64::from(self.cfg.sample_rate),
            cmn_applied: false,
        })
    }
}

pub fn compute_logmel(w: &Waveform, cfg: &MelConfig) -> Result<MelFeatures, FeatureError> {
    MelExtractor::new(cfg.clone())?.compute(w)
}

/// Subtracts each bin's mean over frames.
pub fn apply_cmn(mut f: MelFeatures) -> MelFeatures {
    let t = f.n_frames;
    if t > 0 {
        for row in f.data.chunks_exact_mut(t) {
            let mean = row.iter().sum::<f64>() / t as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    }
    f.cmn_applied = true;
    f
}

/// Repeats `x` cyclically from its start until `len` samples are produced.
pub(crate) fn tile(x: &[f64], len: usize) -> Vec<f64> {
    x.iter().copied().cycle().take(len).collect()
}

/// Exactly `round(duration * sample_rate)` samples: a random contiguous window
/// of longer input, cyclic repetition of shorter input, identity otherwise.
pub fn crop_or_pad<R: Rng + ?Sized>(w: &Waveform, duration: f64, rng: &mut R) -> Result<Waveform, FeatureError> {
    if !(duration > 0.0) {
        return Err(FeatureError::InvalidConfig(format!("duration must be positive, got {duration}")));
    }
    let target = (duration * f64::from(w.sample_rate())).round() as usize;
    fit_length(w, target, rng)
}

pub(crate) fn fit_length<R: Rng + ?Sized>(w: &Waveform, target: usize, rng: &mut R) -> Result<Waveform, FeatureError> {
    if w.is_empty() {
        return Err(FeatureError::Empty);
    }
    let samples = match w.len().cmp(&target) {
        std::cmp::Ordering::Equal => return Ok(w.clone()),
        std::cmp::Ordering::Greater => {
            let offset = rng.random_range(0..=w.len() - target);
            w.samples()[offset..offset + target].to_vec()
        }
        std::cmp::Ordering::Less => tile(w.samples(), target),
    };
    Ok(w.with_samples(samples))
}

/// Reads a 16-bit PCM mono WAV at `expected_rate`.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform, FeatureError> {
    let p = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|source| FeatureError::Wav { path: p.clone(), source })?;
    let spec = reader.spec();
    let unsupported = |reason: String| FeatureError::UnsupportedWav { path: p.clone(), reason };
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!("need 16-bit PCM, got {:?} {}-bit", spec.sample_format, spec.bits_per_sample)));
    }
    if spec.channels != 1 {
        return Err(unsupported(format!("need mono, got {} channels", spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(unsupported(format!("need {expected_rate} Hz, got {} Hz", spec.sample_rate)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| FeatureError::Wav { path: p.clone(), source })?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), FeatureError> {
    let p = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| FeatureError::Wav { path: p.clone(), source };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in w.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
