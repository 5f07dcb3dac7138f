//! Waveform I/O, SNR-controlled mixing, clipping, and the
//! reference–mixture–reference assembly used for context-aware tokenization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mean power below which a signal counts as silent.
pub const SILENCE_POWER: f64 = 1e-10;

/// Mono PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Audio(format!(
            "{}: {}-bit {:?}, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let declared = reader.len() as usize;
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    if samples.len() != declared {
        return Err(Error::Audio(format!(
            "{}: truncated data chunk ({} of {declared} samples)",
            path.display(),
            samples.len()
        )));
    }
    Ok(Waveform::new(samples))
}

/// Writes 16-bit PCM; samples are scaled by 32768, rounded, and saturated.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// A mixture together with the (identically rescaled) clean target.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub mixture: Waveform,
    pub target: Waveform,
    /// Gain applied to the interference before summation.
    pub interference_scale: f64,
    /// Joint gain applied to mixture and target to keep the peak within 1.
    pub peak_gain: f64,
}

/// Rescales `interference` so the target-to-interference power ratio is
/// `snr_db`, then sums. On overflow, mixture and target share one peak gain.
pub fn mix_at_snr(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<Mixed> {
    if target.len() != interference.len() {
        return Err(Error::LengthMismatch(target.len(), interference.len()));
    }
    let pt = target.power();
    let pi = interference.power();
    if pt <= SILENCE_POWER {
        return Err(Error::Silent("target"));
    }
    if pi <= SILENCE_POWER {
        return Err(Error::Silent("interference"));
    }
    let scale = (pt / (pi * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut mixture: Vec<f64> = target
        .samples
        .iter()
        .zip(&interference.samples)
        .map(|(t, i)| t + scale * i)
        .collect();
    let mut clean = target.samples.clone();
    let peak = mixture.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let peak_gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if peak_gain != 1.0 {
        mixture.iter_mut().for_each(|s| *s *= peak_gain);
        clean.iter_mut().for_each(|s| *s *= peak_gain);
    }
    Ok(Mixed {
        mixture: Waveform::new(mixture),
        target: Waveform::new(clean),
        interference_scale: scale,
        peak_gain,
    })
}

/// A fixed-length excerpt and how many of its samples came from the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub wave: Waveform,
    pub valid: usize,
}

/// Takes a seeded random contiguous slice of `seconds`, or zero-pads the tail.
pub fn clip_or_pad(w: &Waveform, seconds: f64, seed: u64) -> Clip {
    let want = (seconds * w.sample_rate as f64).round() as usize;
    if w.len() >= want {
        let start = if w.len() == want {
            0
        } else {
            ChaCha8Rng::seed_from_u64(seed).gen_range(0..=w.len() - want)
        };
        Clip {
            wave: Waveform {
                samples: w.samples[start..start + want].to_vec(),
                sample_rate: w.sample_rate,
            },
            valid: want,
        }
    } else {
        let mut samples = w.samples.clone();
        samples.resize(want, 0.0);
        Clip {
            wave: Waveform {
                samples,
                sample_rate: w.sample_rate,
            },
            valid: w.len(),
        }
    }
}

/// `[s_r, s_m, s_r]`, sample-exact.
pub fn concat_ref_mix_ref(reference: &Waveform, mixture: &Waveform) -> Result<Waveform> {
    if reference.sample_rate != mixture.sample_rate {
        return Err(Error::Audio(format!(
            "sample rate mismatch: {} vs {}",
            reference.sample_rate, mixture.sample_rate
        )));
    }
    if mixture.is_empty() {
        return Err(Error::TooShort("empty mixture".into()));
    }
    let mut samples = Vec::with_capacity(2 * reference.len() + mixture.len());
    samples.extend_from_slice(&reference.samples);
    samples.extend_from_slice(&mixture.samples);
    samples.extend_from_slice(&reference.samples);
    Ok(Waveform {
        samples,
        sample_rate: reference.sample_rate,
    })
}

/// One fully specified training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub reference: Waveform,
    pub target: Waveform,
    pub snr_db: f64,
    pub seed: u64,
    /// Samples of the target clip that are real audio rather than padding.
    pub target_valid: usize,
    /// Samples of the mixture covered by either source.
    pub mixture_valid: usize,
    pub reference_valid: usize,
}

pub const MIXTURE_SECONDS: f64 = 3.0;
pub const REFERENCE_SECONDS: f64 = 4.0;

/// Clips the sources to 3 s / 4 s and mixes at `snr_db`.
pub fn make_mixture_sample(
    target: &Waveform,
    interference: &Waveform,
    reference: &Waveform,
    snr_db: f64,
    seed: u64,
) -> Result<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = clip_or_pad(target, MIXTURE_SECONDS, rng.gen());
    let i = clip_or_pad(interference, MIXTURE_SECONDS, rng.gen());
    let r = clip_or_pad(reference, REFERENCE_SECONDS, rng.gen());
    let mixed = mix_at_snr(&t.wave, &i.wave, snr_db)?;
    Ok(MixtureSample {
        mixture: mixed.mixture,
        reference: r.wave,
        target: mixed.target,
        snr_db,
        seed,
        target_valid: t.valid,
        mixture_valid: t.valid.max(i.valid),
        reference_valid: r.valid,
    })
}
