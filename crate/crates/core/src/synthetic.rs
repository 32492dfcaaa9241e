//! Seeded synthetic data: speaker embeddings, trial lists, voiced audio and
//! an augmentation bank.

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{Category, NoiseBank};
use crate::features::Waveform;
use crate::trialdata::{EmbeddingStore, Trial, TrialList};

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// `"{prefix}{speaker:03}/{utterance:02}"`, so the speaker key is the part
/// before the slash.
pub fn utterance_id(prefix: &str, speaker: usize, utterance: usize) -> String {
    format!("{prefix}{speaker:03}/{utterance:02}")
}

/// `n_speakers` random unit mean vectors; each utterance is its speaker's
/// mean plus isotropic Gaussian noise of standard deviation `noise_std`,
/// re-normalized. Ids come from [`utterance_id`].
pub fn speaker_embeddings(
    prefix: &str,
    n_speakers: usize,
    utterances: usize,
    dim: usize,
    noise_std: f64,
    seed: u64,
) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = EmbeddingStore::new(dim);
    for s in 0..n_speakers {
        let mean: Vec<f64> = unit(&gaussian(&mut rng, dim)).into_iter().map(f64::from).collect();
        for u in 0..utterances {
            let v: Vec<f64> = mean.iter().zip(gaussian(&mut rng, dim)).map(|(m, z)| m + noise_std * z).collect();
            store.push(utterance_id(prefix, s, u), &unit(&v)).expect("fresh ids and finite unit vectors");
        }
    }
    store
}

/// Labeled trials over utterances grouped by speaker; even indices are
/// target trials, odd indices non-target. Every speaker needs at least two
/// utterances and there must be at least two speakers.
pub fn random_trials(speakers: &[Vec<String>], n_trials: usize, seed: u64) -> TrialList {
    assert!(speakers.len() >= 2 && speakers.iter().all(|u| u.len() >= 2), "need >= 2 speakers with >= 2 utterances");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = (0..n_trials)
        .map(|i| {
            let s = rng.random_range(0..speakers.len());
            if i % 2 == 0 {
                let pair = index::sample(&mut rng, speakers[s].len(), 2);
                Trial::new(&speakers[s][pair.index(0)], &speakers[s][pair.index(1)], Some(true))
            } else {
                let other = (s + rng.random_range(1..speakers.len())) % speakers.len();
                let a = &speakers[s][rng.random_range(0..speakers[s].len())];
                let b = &speakers[other][rng.random_range(0..speakers[other].len())];
                Trial::new(a, b, Some(false))
            }
            .expect("generated ids are valid")
        })
        .collect();
    TrialList::new(trials).expect("all trials labeled")
}

/// Groups store ids by the part before the first `/`, in order of first appearance.
pub fn group_by_speaker(store: &EmbeddingStore) -> Vec<Vec<String>> {
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    for id in store.ids() {
        let spk = crate::scoring::speaker_of(id);
        match groups.iter_mut().find(|(s, _)| s == spk) {
            Some((_, g)) => g.push(id.clone()),
            None => groups.push((spk.to_owned(), vec![id.clone()])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// A voice: fundamental frequency and three formant centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub formants: [f64; 3],
}

impl Voice {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            f0: rng.random_range(90.0..260.0),
            formants: [rng.random_range(300.0..900.0), rng.random_range(900.0..2300.0), rng.random_range(2300.0..3500.0)],
        }
    }

    fn harmonic_gain(&self, f: f64) -> f64 {
        self.formants.iter().map(|&c| 1.0 / (1.0 + ((f - c) / 120.0).powi(2))).sum::<f64>() + 0.02
    }
}

/// Harmonic speech-like signal: the voice's harmonics below 4 kHz shaped by
/// its formants, slow pitch wobble, a syllabic envelope and a little noise.
pub fn synth_utterance(voice: &Voice, secs: f64, sample_rate: u32, rng: &mut impl Rng) -> Waveform {
    let sr = f64::from(sample_rate);
    let n = (secs * sr).round().max(1.0) as usize;
    let syllable_hz = rng.random_range(3.0..5.0);
    let wobble_hz = rng.random_range(0.5..2.0);
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let n_harm = ((4000.0 / voice.f0) as usize).max(1);
    let gains: Vec<f64> = (1..=n_harm).map(|h| voice.harmonic_gain(h as f64 * voice.f0)).collect();
    let total: f64 = gains.iter().sum();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f = voice.f0 * (1.0 + 0.03 * (2.0 * PI * wobble_hz * t).sin());
        phase += 2.0 * PI * f / sr;
        let env = 0.55 + 0.45 * (2.0 * PI * syllable_hz * t + phase0).sin();
        let voiced: f64 = gains.iter().enumerate().map(|(h, g)| g * ((h + 1) as f64 * phase).sin()).sum();
        let z: f64 = StandardNormal.sample(rng);
        out.push(0.3 * env * voiced / total + 0.003 * z);
    }
    Waveform::new(out, sample_rate).expect("finite samples")
}

/// Bank with white noise, tone chords, speech from `speech_voices` extra
/// voices and exponentially decaying impulse responses.
pub fn synth_bank(sample_rate: u32, speech_voices: usize, rng: &mut impl Rng) -> NoiseBank {
    let sr = f64::from(sample_rate);
    let mut bank = NoiseBank::new(sample_rate);
    let add = |bank: &mut NoiseBank, cat, samples: Vec<f64>| {
        bank.add(cat, Waveform::new(samples, sample_rate).expect("finite")).expect("matching rate");
    };
    for _ in 0..3 {
        let level = rng.random_range(0.05..0.3);
        let s = gaussian(rng, (1.5 * sr) as usize).into_iter().map(|z| level * z).collect();
        add(&mut bank, Category::Noise, s);
    }
    for _ in 0..3 {
        let notes: Vec<f64> = (0..3).map(|_| 110.0 * 2f64.powf(rng.random_range(0..36) as f64 / 12.0)).collect();
        let s = (0..(2.0 * sr) as usize)
            .map(|i| notes.iter().map(|f| (2.0 * PI * f * i as f64 / sr).sin()).sum::<f64>() * 0.1)
            .collect();
        add(&mut bank, Category::Music, s);
    }
    for _ in 0..speech_voices {
        let v = Voice::random(rng);
        let w = synth_utterance(&v, 2.0, sample_rate, rng);
        add(&mut bank, Category::Speech, w.into_samples());
    }
    for _ in 0..2 {
        let rt = rng.random_range(0.1..0.4);
        let len = (0.3 * sr) as usize;
        let mut s: Vec<f64> = (0..len)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                0.3 * z * (-6.9 * i as f64 / (rt * sr)).exp()
            })
            .collect();
        s[0] = 1.0;
        add(&mut bank, Category::Rir, s);
    }
    bank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_and_grouped() {
        let store = speaker_embeddings("spk", 4, 3, 16, 0.2, 1);
        assert_eq!(store.len(), 12);
        assert!(store.is_normalized());
        let groups = group_by_speaker(&store);
        assert_eq!(groups.len(), 4);
        assert!(groups.iter().all(|g| g.len() == 3));
    }

    #[test]
    fn trials_are_balanced_and_consistent() {
        let store = speaker_embeddings("s", 5, 4, 8, 0.1, 2);
        let trials = random_trials(&group_by_speaker(&store), 100, 3);
        for t in trials.iter() {
            let same = crate::scoring::speaker_of(&t.enroll) == crate::scoring::speaker_of(&t.test);
            assert_eq!(Some(same), t.label);
            assert_ne!(t.enroll, t.test);
        }
        assert_eq!(trials.labels().unwrap().iter().filter(|&&l| l).count(), 50);
    }

    #[test]
    fn utterances_are_deterministic() {
        let v = Voice { f0: 120.0, formants: [500.0, 1500.0, 2500.0] };
        let a = synth_utterance(&v, 0.5, 16000, &mut ChaCha8Rng::seed_from_u64(9));
        let b = synth_utterance(&v, 0.5, 16000, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 8000);
        assert!(a.peak() < 1.0 && a.power() > 0.0);
    }
}
