//! Multi-layer frame features from waveforms.
//!
//! A fixed, seeded stand-in for a pretrained self-supervised encoder:
//! Hann-windowed frames, DFT magnitude, a triangular mel bank, `log(· + 1e-6)`,
//! then a stack of random `tanh` layers. Every layer also receives a context
//! vector per frame: a softmax-weighted average of the other input frames,
//! weighted by cosine similarity of their log-mel vectors. Like a
//! global-attention encoder, a frame is thereby pulled towards similar frames
//! elsewhere in the input, so what surrounds a segment changes its features.
//! With `context_weight = 0` every frame is independent.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{io_err, Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

const LOG_FLOOR: f64 = 1e-6;
// fixed standardisation of log-mel magnitudes before the first layer
const LOG_CENTER: f64 = -2.0;
const LOG_SPREAD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub layer_count: usize,
    pub feat_dim: usize,
    pub seed: u64,
    pub frame_hop: usize,
    pub frame_win: usize,
    pub n_fft: usize,
    /// Weight of the similarity-pooled context fed to every layer.
    pub context_weight: f64,
    /// Inverse temperature of the cosine-similarity softmax.
    pub context_sharpness: f64,
    /// Frames within this distance of `t` are left out of frame `t`'s context.
    pub context_exclude: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            layer_count: 6,
            feat_dim: 32,
            seed: 0,
            frame_hop: 320,
            frame_win: 400,
            n_fft: 512,
            context_weight: 1.0,
            context_sharpness: 20.0,
            context_exclude: 2,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count < 1 {
            return Err(Error::Config("frontend.layer_count must be >= 1".into()));
        }
        if self.feat_dim < 8 {
            return Err(Error::Config("frontend.feat_dim must be >= 8".into()));
        }
        if self.n_mels < 2 || self.frame_hop == 0 || self.frame_win == 0 {
            return Err(Error::Config("frontend framing parameters must be positive".into()));
        }
        if !(self.context_weight.is_finite() && self.context_sharpness.is_finite() && self.context_sharpness >= 0.0) {
            return Err(Error::Config("frontend context parameters must be finite".into()));
        }
        if self.n_fft < self.frame_win {
            return Err(Error::Config("frontend.n_fft must be >= frame_win".into()));
        }
        Ok(())
    }

    /// Frames produced for `num_samples` input samples (zero if too short).
    pub fn frame_count(&self, num_samples: usize) -> usize {
        if num_samples < self.frame_win {
            0
        } else {
            (num_samples - self.frame_win) / self.frame_hop + 1
        }
    }
}

/// `layers × frames × dim` real features, stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(layers: usize, frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::Dim(format!(
                "feature stack needs positive extents, got {layers}x{frames}x{dim}"
            )));
        }
        if data.len() != layers * frames * dim {
            return Err(Error::Dim(format!(
                "feature stack {layers}x{frames}x{dim} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            layers,
            frames,
            dim,
            data,
        })
    }

    pub fn frame(&self, layer: usize, t: usize) -> &[f64] {
        let off = (layer * self.frames + t) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Contiguous `frames × dim` block of one layer.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let n = self.frames * self.dim;
        &self.data[layer * n..(layer + 1) * n]
    }

    /// Frames `[start, end)` of every layer.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<FeatureStack> {
        if start >= end || end > self.frames {
            return Err(Error::TooShort(format!(
                "frame slice [{start}, {end}) of {} frames",
                self.frames
            )));
        }
        let mut data = Vec::with_capacity(self.layers * (end - start) * self.dim);
        for l in 0..self.layers {
            let base = l * self.frames * self.dim;
            data.extend_from_slice(&self.data[base + start * self.dim..base + end * self.dim]);
        }
        FeatureStack::new(self.layers, end - start, self.dim, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

struct Layer {
    weight: Vec<f64>,  // out × in
    context: Vec<f64>, // out × n_mels
    bias: Vec<f64>,
    in_dim: usize,
    ctx_dim: usize,
}

impl Layer {
    fn random(rng: &mut ChaCha8Rng, in_dim: usize, ctx_dim: usize, out_dim: usize) -> Self {
        let mut draw = |n: usize, fan_in: usize| {
            let s = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-s..s)).collect::<Vec<_>>()
        };
        let weight = draw(out_dim * in_dim, in_dim);
        let context = draw(out_dim * ctx_dim, ctx_dim);
        let bias = (0..out_dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self {
            weight,
            context,
            bias,
            in_dim,
            ctx_dim,
        }
    }

    fn out_dim(&self) -> usize {
        self.bias.len()
    }

    /// `tanh(W x_t + kappa * U c_t + b)` for every frame of a `frames × in` block.
    fn apply(&self, input: &[f64], ctx: &[f64], frames: usize, kappa: f64) -> Vec<f64> {
        use tse_tensor::kernels::dot;
        let (i_dim, c_dim, o_dim) = (self.in_dim, self.ctx_dim, self.out_dim());
        let mut out = vec![0.0; frames * o_dim];
        for t in 0..frames {
            let x = &input[t * i_dim..(t + 1) * i_dim];
            let c = &ctx[t * c_dim..(t + 1) * c_dim];
            for o in 0..o_dim {
                let mut z = dot(&self.weight[o * i_dim..(o + 1) * i_dim], x) + self.bias[o];
                if kappa != 0.0 {
                    z += kappa * dot(&self.context[o * c_dim..(o + 1) * c_dim], c);
                }
                out[t * o_dim + o] = z.tanh();
            }
        }
        out
    }
}

/// Per frame `t`: `Σ_s softmax_s(sharpness · cos(x_t, x_s)) x_s` over frames
/// with `|s - t| > exclude`. Frames with no eligible partner get zeros.
pub fn similarity_context(x: &[f64], frames: usize, dim: usize, sharpness: f64, exclude: usize) -> Vec<f64> {
    use tse_tensor::kernels::dot;
    let norms: Vec<f64> = (0..frames)
        .map(|t| dot(&x[t * dim..(t + 1) * dim], &x[t * dim..(t + 1) * dim]).sqrt().max(1e-12))
        .collect();
    let mut out = vec![0.0; frames * dim];
    let mut w = vec![0.0; frames];
    for t in 0..frames {
        let xt = &x[t * dim..(t + 1) * dim];
        let mut best = f64::NEG_INFINITY;
        for s in 0..frames {
            w[s] = if s.abs_diff(t) > exclude {
                sharpness * dot(xt, &x[s * dim..(s + 1) * dim]) / (norms[t] * norms[s])
            } else {
                f64::NEG_INFINITY
            };
            best = best.max(w[s]);
        }
        if best == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for v in w.iter_mut() {
            *v = (*v - best).exp();
            total += *v;
        }
        let ct = &mut out[t * dim..(t + 1) * dim];
        for (s, &ws) in w.iter().enumerate() {
            if ws > 0.0 {
                let a = ws / total;
                for (c, v) in ct.iter_mut().zip(&x[s * dim..(s + 1) * dim]) {
                    *c += a * v;
                }
            }
        }
    }
    out
}

/// Seeded feature extractor. Weights are drawn once at construction and
/// never change, so extraction is a pure function of `(samples, config)`.
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    mel_bank: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
    layers: Vec<Layer>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangles spanning 0 Hz to Nyquist, as sparse `(bin, weight)` rows.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<(usize, f64)>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let window = (0..cfg.frame_win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.frame_win as f64).cos())
            .collect();
        let mel_bank = mel_filterbank(cfg.n_mels, cfg.n_fft, SAMPLE_RATE);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.layer_count);
        let mut in_dim = cfg.n_mels;
        for _ in 0..cfg.layer_count {
            layers.push(Layer::random(&mut rng, in_dim, cfg.n_mels, cfg.feat_dim));
            in_dim = cfg.feat_dim;
        }
        Ok(Self {
            cfg,
            window,
            mel_bank,
            fft,
            layers,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn frame_count(&self, num_samples: usize) -> usize {
        self.cfg.frame_count(num_samples)
    }

    /// Log-mel magnitudes, `frames × n_mels`.
    pub fn log_mel(&self, w: &Waveform) -> Result<(Vec<f64>, usize)> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!("sample rate {} Hz, expected {SAMPLE_RATE}", w.sample_rate)));
        }
        let frames = self.frame_count(w.len());
        if frames == 0 {
            return Err(Error::TooShort(format!(
                "{} samples, need at least {}",
                w.len(),
                self.cfg.frame_win
            )));
        }
        let (hop, win, n_fft, n_mels) = (self.cfg.frame_hop, self.cfg.frame_win, self.cfg.n_fft, self.cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; n_fft / 2 + 1];
        let mut out = vec![0.0; frames * n_mels];
        for t in 0..frames {
            let seg = &w.samples[t * hop..t * hop + win];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < win {
                    Complex::new(seg[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for (b, tri) in self.mel_bank.iter().enumerate() {
                let e: f64 = tri.iter().map(|&(k, wt)| wt * mag[k]).sum();
                out[t * n_mels + b] = (e + LOG_FLOOR).ln();
            }
        }
        Ok((out, frames))
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureStack> {
        let (mel, frames) = self.log_mel(w)?;
        let mut x: Vec<f64> = mel.iter().map(|v| (v - LOG_CENTER) / LOG_SPREAD).collect();
        let ctx = if self.cfg.context_weight != 0.0 {
            similarity_context(&x, frames, self.cfg.n_mels, self.cfg.context_sharpness, self.cfg.context_exclude)
        } else {
            vec![0.0; x.len()]
        };
        let mut data = Vec::with_capacity(self.layers.len() * frames * self.cfg.feat_dim);
        for layer in &self.layers {
            x = layer.apply(&x, &ctx, frames, self.cfg.context_weight);
            data.extend_from_slice(&x);
        }
        let fs = FeatureStack::new(self.layers.len(), frames, self.cfg.feat_dim, data)?;
        if !fs.is_finite() {
            return Err(Error::Tensor(tse_tensor::TensorError::NonFinite { op: "frontend" }));
        }
        Ok(fs)
    }
}

const FEAT_MAGIC: &[u8; 5] = b"FEAT1";
const FEAT_VERSION: u8 = 1;

/// Serializes to FEAT1 with 4- or 8-byte floats.
pub fn encode_features(fs: &FeatureStack, float_width: u8) -> Result<Vec<u8>> {
    if float_width != 4 && float_width != 8 {
        return Err(Error::Format {
            format: "FEAT1",
            reason: format!("float width must be 4 or 8, got {float_width}"),
        });
    }
    let mut out = Vec::with_capacity(19 + fs.data.len() * float_width as usize);
    out.extend_from_slice(FEAT_MAGIC);
    out.push(FEAT_VERSION);
    out.push(float_width);
    for v in [fs.layers, fs.frames, fs.dim] {
        binio::put_u32(&mut out, v as u32);
    }
    binio::put_floats(&mut out, &fs.data, float_width);
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureStack> {
    let mut r = Reader::new(bytes, "FEAT1");
    r.expect_magic(FEAT_MAGIC)?;
    let version = r.u8()?;
    if version != FEAT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let width = r.u8()?;
    if width != 4 && width != 8 {
        return Err(r.err(format!("unsupported float width {width}")));
    }
    let (n, t, e) = (r.u32()?, r.u32()?, r.u32()?);
    if n == 0 || t == 0 || e == 0 {
        return Err(r.err(format!("empty stack {n}x{t}x{e}")));
    }
    let count = binio::extent(&r, &[n, t, e])?;
    let data = r.floats(count, width)?;
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    let fs = FeatureStack::new(n as usize, t as usize, e as usize, data)?;
    if !fs.is_finite() {
        return Err(r.err("non-finite values"));
    }
    Ok(fs)
}

pub fn export_features(path: impl AsRef<Path>, fs: &FeatureStack, float_width: u8) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(fs, float_width)?).map_err(io_err(path))
}

pub fn import_features(path: impl AsRef<Path>) -> Result<FeatureStack> {
    let path = path.as_ref();
    decode_features(&std::fs::read(path).map_err(io_err(path))?)
}
