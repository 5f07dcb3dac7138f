//! Training and evaluation examples: which utterances to mix, and their
//! conversion into model-ready token grids for each run mode.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::frontend::{FeatureStack, Frontend};
use crate::model::MixInput;
use crate::signal::{make_mixture_sample, read_wav, MixtureSample, Waveform};
use crate::synth::Corpus;
use crate::tokenizer::{context_offset, features_with_context, tokenize, Codebook, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Mixture tokenized inside `[reference, mixture, reference]`.
    Standard,
    /// Mixture tokenized on its own.
    Nocat,
    /// Continuous mixture features (with reference context), discrete reference.
    Hybrid,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "nocat" => Ok(Mode::Nocat),
            "hybrid" => Ok(Mode::Hybrid),
            _ => Err(Error::Config(format!("unknown mode {s:?} (standard, nocat, hybrid)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Standard => "standard",
            Mode::Nocat => "nocat",
            Mode::Hybrid => "hybrid",
        })
    }
}

/// Utterances with speaker labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub waves: Vec<Waveform>,
    pub speakers: Vec<usize>,
}

impl Pool {
    pub fn from_corpus(corpus: &Corpus, keep: impl Fn(usize, usize) -> bool) -> Self {
        let (waves, speakers) = corpus
            .utterances
            .iter()
            .filter(|u| keep(u.speaker, u.index))
            .map(|u| (u.wave.clone(), u.speaker))
            .unzip();
        Self { waves, speakers }
    }

    pub fn len(&self) -> usize {
        self.waves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waves.is_empty()
    }
}

/// Indices into a [`Pool`] plus optional fixed SNR and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub target: usize,
    pub interference: usize,
    pub reference: usize,
    pub snr_db: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    /// Fresh target/interference/reference draws for every `(seed, step, slot)`.
    Random,
    /// A fixed list visited in order, `batch` entries per step.
    Fixed(Vec<MixSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub pool: Pool,
    pub sampling: Sampling,
}

/// Per-draw seed from `(seed, step, slot)`.
pub fn slot_seed(seed: u64, step: u64, slot: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update((slot as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl DataSource {
    /// The mixture recipe for one batch slot.
    pub fn draw(&self, seed: u64, step: u64, slot: usize, batch: usize, snr: (f64, f64)) -> Result<MixSpec> {
        let pool = &self.pool;
        if pool.is_empty() {
            return Err(Error::Data("empty utterance pool".into()));
        }
        match &self.sampling {
            Sampling::Fixed(specs) => {
                if specs.is_empty() {
                    return Err(Error::Data("empty mixture list".into()));
                }
                let i = ((step as usize).wrapping_mul(batch).wrapping_add(slot)) % specs.len();
                let mut spec = specs[i].clone();
                let mut rng = ChaCha8Rng::seed_from_u64(slot_seed(seed, u64::MAX, i));
                spec.snr_db.get_or_insert_with(|| rng.gen_range(snr.0..=snr.1));
                spec.seed.get_or_insert_with(|| rng.gen());
                Ok(spec)
            }
            Sampling::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(slot_seed(seed, step, slot));
                let target = rng.gen_range(0..pool.len());
                let spk = pool.speakers[target];
                let same: Vec<usize> = (0..pool.len()).filter(|&j| j != target && pool.speakers[j] == spk).collect();
                let other: Vec<usize> = (0..pool.len()).filter(|&j| pool.speakers[j] != spk).collect();
                if same.is_empty() {
                    return Err(Error::Data(format!("speaker {spk} has no second utterance to use as reference")));
                }
                if other.is_empty() {
                    return Err(Error::Data("pool has a single speaker; no interference available".into()));
                }
                Ok(MixSpec {
                    target,
                    interference: other[rng.gen_range(0..other.len())],
                    reference: same[rng.gen_range(0..same.len())],
                    snr_db: Some(rng.gen_range(snr.0..=snr.1)),
                    seed: Some(rng.gen()),
                })
            }
        }
    }

    pub fn synthesize(&self, spec: &MixSpec) -> Result<MixtureSample> {
        let get = |i: usize| {
            self.pool
                .waves
                .get(i)
                .ok_or_else(|| Error::Data(format!("utterance index {i} outside pool of {}", self.pool.len())))
        };
        make_mixture_sample(
            get(spec.target)?,
            get(spec.interference)?,
            get(spec.reference)?,
            spec.snr_db.unwrap_or(0.0),
            spec.seed.unwrap_or(0),
        )
    }
}

/// A training example in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub mode: Mode,
    pub mix_tokens: Option<TokenGrid>,
    pub mix_features: Option<FeatureStack>,
    pub reference: TokenGrid,
    pub ref_keep: Vec<bool>,
    /// Mixture frames backed by real audio; padding is hidden from attention.
    pub mix_keep: Vec<bool>,
    /// Clean tokens placed on the mixture's frame grid.
    pub target: TokenGrid,
    /// Mixture frames that carry a clean label.
    pub loss_mask: Vec<bool>,
    /// Clean tokens on their own grid.
    pub clean: TokenGrid,
    /// Clean frames backed by real (unpadded) audio.
    pub clean_valid: usize,
    /// Mixture-grid index of clean frame 0.
    pub offset: usize,
}

impl Prepared {
    pub fn mix_input(&self) -> MixInput<'_> {
        match (&self.mix_tokens, &self.mix_features) {
            (Some(t), _) => MixInput::Tokens(t),
            (None, Some(f)) => MixInput::Features(f),
            (None, None) => unreachable!("prepared sample without mixture input"),
        }
    }

    pub fn frames(&self) -> usize {
        self.target.frames
    }

    /// Model output restricted to the clean grid.
    pub fn align_output(&self, output: &TokenGrid) -> Result<TokenGrid> {
        output.slice_frames(self.offset, self.offset + self.clean.frames)
    }
}

/// Model inputs for one mixture and reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioned {
    pub mix_tokens: Option<TokenGrid>,
    pub mix_features: Option<FeatureStack>,
    pub reference: TokenGrid,
    pub ref_keep: Vec<bool>,
    pub mix_keep: Vec<bool>,
    /// Mixture-grid frames seen by the model.
    pub frames: usize,
    /// Model-grid index of the mixture's own frame 0.
    pub offset: usize,
}

impl Conditioned {
    pub fn mix_input(&self) -> MixInput<'_> {
        match (&self.mix_tokens, &self.mix_features) {
            (Some(t), _) => MixInput::Tokens(t),
            (None, Some(f)) => MixInput::Features(f),
            (None, None) => unreachable!("conditioned sample without mixture input"),
        }
    }
}

/// Tokenizes a mixture and its reference for `mode`. Frames past
/// `mixture_valid` and `reference_valid` samples of zero padding are masked.
/// In context modes the mixture grid
/// is the middle slice of the concatenation, whose frame `offset + j` covers
/// frame `j` of the mixture alone.
pub fn condition(
    mixture: &Waveform,
    mixture_valid: usize,
    reference: &Waveform,
    reference_valid: usize,
    mode: Mode,
    fe: &Frontend,
    cb: &Codebook,
) -> Result<Conditioned> {
    let ref_grid = tokenize(&fe.extract(reference)?, cb)?;
    let ref_valid = fe.frame_count(reference_valid).clamp(1, ref_grid.frames);
    let ref_keep = (0..ref_grid.frames).map(|t| t < ref_valid).collect();
    let (mix_tokens, mix_features, frames, offset) = match mode {
        Mode::Nocat => {
            let grid = tokenize(&fe.extract(mixture)?, cb)?;
            let frames = grid.frames;
            (Some(grid), None, frames, 0)
        }
        Mode::Standard | Mode::Hybrid => {
            let ctx = features_with_context(reference, mixture, fe)?;
            let offset = context_offset(reference.len(), fe);
            let frames = ctx.features.frames;
            if mode == Mode::Standard {
                (Some(tokenize(&ctx.features, cb)?), None, frames, offset)
            } else {
                (None, Some(ctx.features), frames, offset)
            }
        }
    };
    let mix_keep = if mixture_valid >= mixture.len() {
        vec![true; frames]
    } else {
        let end = offset + fe.frame_count(mixture_valid).max(1);
        (0..frames).map(|t| t < end).collect()
    };
    Ok(Conditioned {
        mix_tokens,
        mix_features,
        reference: ref_grid,
        ref_keep,
        mix_keep,
        frames,
        offset,
    })
}

/// Tokenizes one mixture sample for `mode`: model inputs from [`condition`]
/// plus the clean grid of the target alone, placed on the model grid.
pub fn prepare(sample: &MixtureSample, mode: Mode, fe: &Frontend, cb: &Codebook) -> Result<Prepared> {
    let clean = tokenize(&fe.extract(&sample.target)?, cb)?;
    let clean_valid = fe.frame_count(sample.target_valid).min(clean.frames);
    let Conditioned {
        mix_tokens,
        mix_features,
        reference,
        ref_keep,
        mix_keep,
        frames,
        offset,
    } = condition(&sample.mixture, sample.mixture_valid, &sample.reference, sample.reference_valid, mode, fe, cb)?;
    if offset + clean.frames > frames {
        return Err(Error::Dim(format!(
            "mixture grid of {frames} frames cannot hold {} clean frames at offset {offset}",
            clean.frames
        )));
    }
    let mut tokens = vec![0u32; clean.layers * frames];
    let mut loss_mask = vec![false; frames];
    for (j, m) in loss_mask.iter_mut().enumerate().skip(offset).take(clean_valid) {
        *m = true;
        for l in 0..clean.layers {
            tokens[l * frames + j] = clean.get(l, j - offset);
        }
    }
    if !loss_mask.iter().any(|&m| m) {
        return Err(Error::Data("target clip has no complete frame of audio".into()));
    }
    let target = TokenGrid::new(clean.layers, frames, clean.k, tokens)?;
    Ok(Prepared {
        mode,
        mix_tokens,
        mix_features,
        reference,
        ref_keep,
        mix_keep,
        target,
        loss_mask,
        clean,
        clean_valid,
        offset,
    })
}

/// Parses a tab-separated mixture manifest: `target, interference, reference
/// [, snr_db [, seed]]` per line, relative paths resolved against `base`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_mixture_manifest(text: &str, base: &Path) -> Result<(Vec<PathBuf>, Vec<MixSpec>)> {
    let mut paths: Vec<PathBuf> = Vec::new();
    let mut index = |p: &str| {
        let p = base.join(p);
        match paths.iter().position(|q| *q == p) {
            Some(i) => i,
            None => {
                paths.push(p);
                paths.len() - 1
            }
        }
    };
    let mut specs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=5).contains(&cols.len()) {
            return Err(Error::Data(format!("manifest line {}: expected 3 to 5 tab-separated fields, got {}", n + 1, cols.len())));
        }
        let bad = |what: &str| Error::Data(format!("manifest line {}: bad {what}", n + 1));
        let snr_db = cols.get(3).map(|s| s.trim().parse::<f64>().map_err(|_| bad("snr_db"))).transpose()?;
        let seed = cols.get(4).map(|s| s.trim().parse::<u64>().map_err(|_| bad("seed"))).transpose()?;
        specs.push(MixSpec {
            target: index(cols[0]),
            interference: index(cols[1]),
            reference: index(cols[2]),
            snr_db,
            seed,
        });
    }
    if specs.is_empty() {
        return Err(Error::Data("manifest lists no mixtures".into()));
    }
    Ok((paths, specs))
}

/// Parses an utterance list: `speaker \t path` per line.
pub fn parse_utterance_list(text: &str, base: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (spk, path) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("utterance list line {}: expected speaker<TAB>path", n + 1)))?;
        out.push((spk.to_string(), base.join(path)));
    }
    if out.is_empty() {
        return Err(Error::Data("utterance list is empty".into()));
    }
    Ok(out)
}

/// Loads a manifest file. Two-column files are utterance lists (random
/// sampling); three to five columns are fixed mixture lists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DataSource> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))?;
    if first.split('\t').count() == 2 {
        let entries = parse_utterance_list(&text, base)?;
        let mut names: Vec<String> = Vec::new();
        let mut waves = Vec::with_capacity(entries.len());
        let mut speakers = Vec::with_capacity(entries.len());
        for (spk, p) in entries {
            let id = match names.iter().position(|n| *n == spk) {
                Some(i) => i,
                None => {
                    names.push(spk);
                    names.len() - 1
                }
            };
            waves.push(read_wav(&p)?);
            speakers.push(id);
        }
        Ok(DataSource {
            pool: Pool { waves, speakers },
            sampling: Sampling::Random,
        })
    } else {
        let (paths, specs) = parse_mixture_manifest(&text, base)?;
        let waves = paths.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
        let speakers = (0..waves.len()).collect();
        Ok(DataSource {
            pool: Pool { waves, speakers },
            sampling: Sampling::Fixed(specs),
        })
    }
}
