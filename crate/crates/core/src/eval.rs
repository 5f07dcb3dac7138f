//! Token-space metrics and evaluation reports.
//!
//! TER is a normalised token edit distance; it stands in for a word error
//! rate and is not one. `feature_mse` compares centroid features and says
//! nothing about perceptual quality.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{condition, prepare, Mode, Prepared};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::signal::{MixtureSample, Waveform};
use crate::tokenizer::{detokenize, tokenize, Codebook, TokenGrid};

/// Unit-cost Levenshtein distance.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance(hyp, reference) / len(reference)`.
pub fn token_error_rate(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("empty reference sequence".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Per-layer TER averaged over layers.
pub fn grid_error_rate(hyp: &TokenGrid, reference: &TokenGrid) -> Result<f64> {
    if hyp.layers != reference.layers || hyp.layers == 0 {
        return Err(Error::Metric(format!("{} vs {} layers", hyp.layers, reference.layers)));
    }
    let mut sum = 0.0;
    for l in 0..hyp.layers {
        sum += token_error_rate(hyp.row(l), reference.row(l))?;
    }
    Ok(sum / hyp.layers as f64)
}

/// Per-layer hit counts on masked frames, plus the number of masked frames.
pub fn masked_accuracy(pred: &TokenGrid, target: &TokenGrid, mask: &[bool]) -> Result<(Vec<usize>, usize)> {
    if pred.layers != target.layers || pred.frames != target.frames || mask.len() != pred.frames {
        return Err(Error::Metric(format!(
            "prediction {}x{} vs target {}x{} with {} mask entries",
            pred.layers,
            pred.frames,
            target.layers,
            target.frames,
            mask.len()
        )));
    }
    let hits = (0..pred.layers)
        .map(|l| {
            pred.row(l)
                .iter()
                .zip(target.row(l))
                .zip(mask)
                .filter(|((a, b), &m)| m && a == b)
                .count()
        })
        .collect();
    Ok((hits, mask.iter().filter(|&&m| m).count()))
}

fn pooled(grid: &TokenGrid, cb: &Codebook) -> Result<Vec<f64>> {
    let fs = detokenize(grid, cb)?;
    let mut v = vec![0.0; fs.dim];
    for row in fs.data.chunks(fs.dim) {
        v.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let n = (fs.layers * fs.frames) as f64;
    v.iter_mut().for_each(|a| *a /= n);
    Ok(v)
}

/// Cosine similarity of time- and layer-pooled centroid features.
pub fn spk_sim_d(output: &TokenGrid, target: &TokenGrid, cb: &Codebook) -> Result<f64> {
    cosine(&pooled(output, cb)?, &pooled(target, cb)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("zero-norm pooled vector".into()));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub ter: f64,
    pub spk_sim_d: f64,
    pub feature_mse: f64,
}

impl Metrics {
    fn mean(rows: &[&Metrics]) -> Metrics {
        let n = rows.len().max(1) as f64;
        let layers = rows.first().map_or(0, |r| r.accuracy.len());
        let avg = |f: &dyn Fn(&Metrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Metrics {
            accuracy: (0..layers).map(|l| avg(&|r| r.accuracy[l])).collect(),
            mean_accuracy: avg(&|r| r.mean_accuracy),
            ter: avg(&|r| r.ter),
            spk_sim_d: avg(&|r| r.spk_sim_d),
            feature_mse: avg(&|r| r.feature_mse),
        }
    }
}

/// Scores `hyp` against `clean` on their first `valid` frames.
pub fn score(hyp: &TokenGrid, clean: &TokenGrid, valid: usize, cb: &Codebook) -> Result<Metrics> {
    if hyp.frames != clean.frames || hyp.layers != clean.layers {
        return Err(Error::Metric(format!(
            "output {}x{} vs clean {}x{}",
            hyp.layers, hyp.frames, clean.layers, clean.frames
        )));
    }
    let valid = valid.min(clean.frames);
    if valid == 0 {
        return Err(Error::Metric("no valid frames to score".into()));
    }
    let hyp = hyp.slice_frames(0, valid)?;
    let clean = clean.slice_frames(0, valid)?;
    let (hits, n) = masked_accuracy(&hyp, &clean, &vec![true; valid])?;
    let accuracy: Vec<f64> = hits.iter().map(|&h| h as f64 / n as f64).collect();
    let mean_accuracy = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
    let (a, b) = (detokenize(&hyp, cb)?, detokenize(&clean, cb)?);
    let feature_mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(Metrics {
        accuracy,
        mean_accuracy,
        ter: grid_error_rate(&hyp, &clean)?,
        spk_sim_d: spk_sim_d(&hyp, &clean, cb)?,
        feature_mse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub index: usize,
    pub model: Metrics,
    pub copy_mixture: Metrics,
    pub oracle: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub config_hash: String,
    pub codebook_hash: String,
    pub utterances: Vec<UtteranceReport>,
    pub model: Metrics,
    pub copy_mixture: Metrics,
    pub oracle: Metrics,
    /// Target-vs-target rows reached accuracy 1, TER 0 and similarity 1 exactly.
    pub oracle_ok: bool,
}

/// Model output and the copy-mixture baseline on the clean grid of one example.
pub fn extract_aligned(ckpt: &Checkpoint, p: &Prepared, cb: &Codebook) -> Result<(TokenGrid, TokenGrid)> {
    let out = ckpt.model.extract_tokens(p.mix_input(), Some(&p.mix_keep), &p.reference, Some(&p.ref_keep))?;
    let copy = match (&p.mix_tokens, &p.mix_features) {
        (Some(t), _) => t.clone(),
        (None, Some(f)) => tokenize(f, cb)?,
        (None, None) => unreachable!("prepared sample without mixture input"),
    };
    Ok((p.align_output(&out)?, p.align_output(&copy)?))
}

/// Refuses a codebook or frontend that differs from the one `ckpt` was
/// trained with.
pub fn check_compatible(ckpt: &Checkpoint, fe: &Frontend, cb: &Codebook) -> Result<()> {
    let hash = cb.hash();
    if ckpt.header.codebook_hash != hash {
        return Err(Error::HashMismatch {
            what: "codebook",
            expected: ckpt.header.codebook_hash.clone(),
            actual: hash,
        });
    }
    if ckpt.header.frontend != *fe.config() {
        return Err(Error::Config("frontend config differs from the one used in training".into()));
    }
    Ok(())
}

/// Target tokens for a raw mixture and reference, on the mixture's own
/// frame grid.
pub fn extract_waves(ckpt: &Checkpoint, mixture: &Waveform, reference: &Waveform, fe: &Frontend, cb: &Codebook) -> Result<TokenGrid> {
    check_compatible(ckpt, fe, cb)?;
    let c = condition(mixture, mixture.len(), reference, reference.len(), ckpt.header.train.mode, fe, cb)?;
    let out = ckpt.model.extract_tokens(c.mix_input(), Some(&c.mix_keep), &c.reference, Some(&c.ref_keep))?;
    let end = (c.offset + fe.frame_count(mixture.len())).min(out.frames);
    out.slice_frames(c.offset, end)
}

/// Scores a checkpoint on `samples`. Refuses a codebook or frontend that
/// differs from the one the checkpoint was trained with.
pub fn evaluate(ckpt: &Checkpoint, samples: &[MixtureSample], fe: &Frontend, cb: &Codebook) -> Result<EvalReport> {
    check_compatible(ckpt, fe, cb)?;
    let hash = cb.hash();
    if samples.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    let mode = ckpt.header.train.mode;
    let mut utterances = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let p = prepare(s, mode, fe, cb)?;
        let (out, copy) = extract_aligned(ckpt, &p, cb)?;
        utterances.push(UtteranceReport {
            index,
            model: score(&out, &p.clean, p.clean_valid, cb)?,
            copy_mixture: score(&copy, &p.clean, p.clean_valid, cb)?,
            oracle: score(&p.clean, &p.clean, p.clean_valid, cb)?,
        });
    }
    let col = |f: fn(&UtteranceReport) -> &Metrics| Metrics::mean(&utterances.iter().map(f).collect::<Vec<_>>());
    let (model, copy_mixture, oracle) = (col(|u| &u.model), col(|u| &u.copy_mixture), col(|u| &u.oracle));
    let oracle_ok = utterances.iter().all(|u| oracle_exact(&u.oracle));
    Ok(EvalReport {
        mode,
        config_hash: ckpt.header.config_hash.clone(),
        codebook_hash: hash,
        utterances,
        model,
        copy_mixture,
        oracle,
        oracle_ok,
    })
}

pub fn oracle_exact(m: &Metrics) -> bool {
    m.accuracy.iter().all(|&a| a == 1.0) && m.mean_accuracy == 1.0 && m.ter == 0.0 && m.spk_sim_d == 1.0 && m.feature_mse == 0.0
}

/// Aligned plain-text summary table.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = format!("mode {}  utterances {}  config {}\n", r.mode, r.utterances.len(), &r.config_hash[..r.config_hash.len().min(12)]);
    s += &format!("{:<14} {:>9} {:>8} {:>10} {:>12}\n", "row", "accuracy", "TER", "spk_sim_d", "feature_mse");
    for (name, m) in [("model", &r.model), ("copy-mixture", &r.copy_mixture), ("target-oracle", &r.oracle)] {
        s += &format!(
            "{:<14} {:>9.4} {:>8.4} {:>10.4} {:>12.6}\n",
            name, m.mean_accuracy, m.ter, m.spk_sim_d, m.feature_mse
        );
    }
    s += &format!("oracle check: {}\n", if r.oracle_ok { "ok" } else { "FAILED" });
    s
}
