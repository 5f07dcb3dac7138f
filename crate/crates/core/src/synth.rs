//! Synthetic speaker-signature corpus.
//!
//! Every speaker owns a smooth spectral envelope (a tilt plus a few formant
//! bumps drawn from the speaker's own seed). An utterance is a run of short
//! "phone" segments, each a band of random-phase noise whose spectrum is the
//! phone band multiplied by the speaker envelope. Speaker identity is thus a
//! stationary property of the long-term spectrum, while phone content varies
//! every few frames.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub speakers: usize,
    pub utterances: usize,
    pub seconds: f64,
    pub phones: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speakers: 16,
            utterances: 10,
            seconds: 5.0,
            phones: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: usize,
    pub index: usize,
    pub wave: Waveform,
}

/// Utterances in speaker-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub speakers: usize,
}

impl Corpus {
    pub fn by_speaker(&self, speaker: usize) -> impl Iterator<Item = (usize, &Utterance)> {
        self.utterances
            .iter()
            .enumerate()
            .filter(move |(_, u)| u.speaker == speaker)
    }
}

const MIN_SEGMENT: f64 = 0.06;
const MAX_SEGMENT: f64 = 0.22;
const RAMP: usize = 64;
const LOW_HZ: f64 = 150.0;
const HIGH_HZ: f64 = 7200.0;

/// Gain in dB of a speaker's envelope as a function of frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    tilt_db_per_octave: f64,
    formants: Vec<(f64, f64, f64)>,
}

impl Envelope {
    pub fn for_speaker(corpus_seed: u64, speaker: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed ^ (0x5eed_0000 + speaker as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let tilt_db_per_octave = rng.gen_range(-6.0..0.0);
        let formants = (0..3)
            .map(|_| {
                let centre = (rng.gen_range(LOW_HZ.ln()..HIGH_HZ.ln())).exp();
                let width_oct = rng.gen_range(0.25..0.6);
                let gain_db = rng.gen_range(8.0..20.0);
                (centre, width_oct, gain_db)
            })
            .collect();
        Self {
            tilt_db_per_octave,
            formants,
        }
    }

    pub fn gain_db(&self, hz: f64) -> f64 {
        let oct = (hz.max(1.0) / 1000.0).log2();
        let mut db = self.tilt_db_per_octave * oct;
        for &(c, w, g) in &self.formants {
            let d = (hz.max(1.0) / c).log2() / w;
            db += g * (-0.5 * d * d).exp();
        }
        db
    }
}

/// Log-spaced phone bands spanning the synthesis range.
fn phone_band(phone: usize, phones: usize) -> (f64, f64) {
    let span = (HIGH_HZ / LOW_HZ).ln();
    let step = span / phones as f64;
    // neighbouring bands overlap by half a step
    let lo = (LOW_HZ.ln() + step * (phone as f64 - 0.25)).exp();
    let hi = (LOW_HZ.ln() + step * (phone as f64 + 1.25)).exp();
    (lo, hi)
}

pub fn synthesize_utterance(cfg: &SynthConfig, speaker: usize, index: usize) -> Result<Waveform> {
    if cfg.phones < 2 || cfg.seconds <= 0.0 {
        return Err(Error::Config("synth needs >= 2 phones and positive duration".into()));
    }
    let env = Envelope::for_speaker(cfg.seed, speaker);
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(((speaker as u64) << 20) | index as u64),
    );
    let total = (cfg.seconds * SAMPLE_RATE as f64).round() as usize;
    let mut samples = Vec::with_capacity(total + SAMPLE_RATE as usize);
    let mut planner = FftPlanner::<f64>::new();
    while samples.len() < total {
        let len = (rng.gen_range(MIN_SEGMENT..MAX_SEGMENT) * SAMPLE_RATE as f64) as usize;
        let phone = rng.gen_range(0..cfg.phones);
        let level_db = rng.gen_range(-4.0..4.0);
        let silent = rng.gen_bool(0.08);
        let seg = if silent {
            vec![0.0; len]
        } else {
            shaped_noise(&mut planner, &mut rng, len, phone_band(phone, cfg.phones), &env, level_db)
        };
        samples.extend(seg);
    }
    samples.truncate(total);
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        samples.iter_mut().for_each(|s| *s *= g);
    }
    Ok(Waveform::new(samples))
}

fn shaped_noise(
    planner: &mut FftPlanner<f64>,
    rng: &mut ChaCha8Rng,
    len: usize,
    band: (f64, f64),
    env: &Envelope,
    level_db: f64,
) -> Vec<f64> {
    let n = len.next_power_of_two();
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    let bin_hz = SAMPLE_RATE as f64 / n as f64;
    for k in 1..n / 2 {
        let f = k as f64 * bin_hz;
        if f < band.0 || f > band.1 {
            continue;
        }
        let amp = 10f64.powf((env.gain_db(f) + level_db) / 20.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        spec[k] = Complex::from_polar(amp, phase);
        spec[n - k] = spec[k].conj();
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let norm = 1.0 / (n as f64).sqrt();
    let ramp = RAMP.min(len / 2);
    (0..len)
        .map(|i| {
            let edge = i.min(len - 1 - i);
            let fade = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
            spec[i].re * norm * fade
        })
        .collect()
}

pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.speakers < 2 || cfg.utterances < 2 {
        return Err(Error::Config("synth needs >= 2 speakers with >= 2 utterances each".into()));
    }
    let mut utterances = Vec::with_capacity(cfg.speakers * cfg.utterances);
    for speaker in 0..cfg.speakers {
        for index in 0..cfg.utterances {
            utterances.push(Utterance {
                speaker,
                index,
                wave: synthesize_utterance(cfg, speaker, index)?,
            });
        }
    }
    Ok(Corpus {
        utterances,
        speakers: cfg.speakers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            speakers: 2,
            utterances: 2,
            seconds: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = synthesize_corpus(&small()).unwrap();
        let b = synthesize_corpus(&small()).unwrap();
        assert_eq!(a, b);
        for u in &a.utterances {
            assert_eq!(u.wave.len(), 8000);
            assert!(u.wave.peak() <= 0.5 + 1e-12);
            assert!(u.wave.power() > 1e-6);
        }
        assert_ne!(a.utterances[0].wave, a.utterances[1].wave);
    }

    #[test]
    fn speakers_have_distinct_envelopes() {
        let e0 = Envelope::for_speaker(0, 0);
        let e1 = Envelope::for_speaker(0, 1);
        let diff: f64 = [300.0, 800.0, 2000.0, 5000.0]
            .iter()
            .map(|&f| (e0.gain_db(f) - e1.gain_db(f)).abs())
            .sum();
        assert!(diff > 1.0);
    }
}
