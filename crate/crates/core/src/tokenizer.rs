//! Per-layer k-means codebooks and discrete token grids.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{self, Reader};
use crate::error::{io_err, Error, Result};
use crate::frontend::{FeatureStack, Frontend};
use crate::kmeans::{self, nearest, KMeansParams};
use crate::signal::{concat_ref_mix_ref, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub layer_ids: Vec<u32>,
    pub iterations: Vec<usize>,
    pub inertia: Vec<f64>,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub frames: usize,
}

/// One centroid table per feature layer. Centroids are held at `f32`
/// precision so a codebook survives its file format unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// `layers × k × dim`
    pub centroids: Vec<f64>,
    pub meta: TrainMeta,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, mut centroids: Vec<f64>, meta: TrainMeta) -> Result<Self> {
        if k < 2 || dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(k * dim) {
            return Err(Error::Dim(format!(
                "codebook of {} values is not layers x {k} x {dim}",
                centroids.len()
            )));
        }
        for v in &mut centroids {
            if !v.is_finite() {
                return Err(Error::KMeans("non-finite centroid".into()));
            }
            *v = *v as f32 as f64;
        }
        let cb = Self {
            k,
            dim,
            centroids,
            meta,
        };
        for l in 0..cb.layers() {
            let table = cb.layer(l);
            for a in 0..k {
                for b in a + 1..k {
                    let d: f64 = table[a * dim..(a + 1) * dim]
                        .iter()
                        .zip(&table[b * dim..(b + 1) * dim])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    if d <= 1e-12 {
                        return Err(Error::KMeans(format!("layer {l}: centroids {a} and {b} coincide")));
                    }
                }
            }
        }
        Ok(cb)
    }

    pub fn layers(&self) -> usize {
        self.centroids.len() / (self.k * self.dim)
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        let n = self.k * self.dim;
        &self.centroids[l * n..(l + 1) * n]
    }

    pub fn centroid(&self, l: usize, j: usize) -> &[f64] {
        &self.layer(l)[j * self.dim..(j + 1) * self.dim]
    }

    /// Hex SHA-256 of the KMC1 encoding.
    pub fn hash(&self) -> String {
        hex_digest(&encode_codebook(self))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Fits one codebook per layer on clean features.
pub fn fit_codebook(stacks: &[FeatureStack], params: &KMeansParams) -> Result<Codebook> {
    let first = stacks.first().ok_or_else(|| Error::KMeans("no training features".into()))?;
    let (layers, dim) = (first.layers, first.dim);
    if stacks.iter().any(|s| s.layers != layers || s.dim != dim) {
        return Err(Error::Dim("training stacks disagree on layers or dim".into()));
    }
    let frames: usize = stacks.iter().map(|s| s.frames).sum();
    if frames < params.k {
        return Err(Error::KMeans(format!(
            "k = {} is larger than the {frames} available frames",
            params.k
        )));
    }
    let mut centroids = Vec::with_capacity(layers * params.k * dim);
    let mut meta = TrainMeta {
        layer_ids: (1..=layers as u32).collect(),
        iterations: Vec::new(),
        inertia: Vec::new(),
        seed: params.seed,
        max_iter: params.max_iter,
        tol: params.tol,
        frames,
    };
    for l in 0..layers {
        let fit = fit_layer(stacks, l, params)?;
        centroids.extend_from_slice(&fit.centroids);
        meta.iterations.push(fit.iterations);
        meta.inertia.push(fit.inertia);
    }
    Codebook::new(params.k, dim, centroids, meta)
}

/// k-means over every frame of one layer of `stacks`.
pub fn fit_layer(stacks: &[FeatureStack], layer: usize, params: &KMeansParams) -> Result<kmeans::KMeansFit> {
    let mut points = Vec::new();
    for s in stacks {
        if layer >= s.layers {
            return Err(Error::Dim(format!("layer {layer} of a {}-layer stack", s.layers)));
        }
        points.extend_from_slice(s.layer(layer));
    }
    let dim = stacks.first().map_or(0, |s| s.dim);
    kmeans::kmeans(&points, dim, &KMeansParams {
        seed: params.seed.wrapping_add(layer as u64),
        ..params.clone()
    })
}

/// `layers × frames` token ids below `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub layers: usize,
    pub frames: usize,
    pub k: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(layers: usize, frames: usize, k: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != layers * frames {
            return Err(Error::Dim(format!(
                "{} tokens for a {layers}x{frames} grid",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= k) {
            return Err(Error::TokenRange { token: bad, k: k as u32 });
        }
        Ok(Self {
            layers,
            frames,
            k,
            tokens,
        })
    }

    pub fn row(&self, layer: usize) -> &[u32] {
        &self.tokens[layer * self.frames..(layer + 1) * self.frames]
    }

    pub fn get(&self, layer: usize, t: usize) -> u32 {
        self.tokens[layer * self.frames + t]
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Result<TokenGrid> {
        if start > end || end > self.frames {
            return Err(Error::Dim(format!("frame slice [{start}, {end}) of {}", self.frames)));
        }
        let tokens = (0..self.layers)
            .flat_map(|l| self.row(l)[start..end].iter().copied())
            .collect();
        TokenGrid::new(self.layers, end - start, self.k, tokens)
    }
}

/// Nearest centroid per layer and frame (squared Euclidean, lowest index on ties).
pub fn tokenize(fs: &FeatureStack, cb: &Codebook) -> Result<TokenGrid> {
    if fs.dim != cb.dim || fs.layers != cb.layers() {
        return Err(Error::Dim(format!(
            "features {}x{} vs codebook {}x{}",
            fs.layers,
            fs.dim,
            cb.layers(),
            cb.dim
        )));
    }
    let mut tokens = Vec::with_capacity(fs.layers * fs.frames);
    for l in 0..fs.layers {
        let table = cb.layer(l);
        for t in 0..fs.frames {
            tokens.push(nearest(fs.frame(l, t), table, cb.dim).0 as u32);
        }
    }
    TokenGrid::new(fs.layers, fs.frames, cb.k, tokens)
}

/// Replaces every token by its centroid row.
pub fn detokenize(grid: &TokenGrid, cb: &Codebook) -> Result<FeatureStack> {
    if grid.layers != cb.layers() || grid.k != cb.k {
        return Err(Error::Dim(format!(
            "grid {} layers / k {} vs codebook {} layers / k {}",
            grid.layers,
            grid.k,
            cb.layers(),
            cb.k
        )));
    }
    let mut data = Vec::with_capacity(grid.layers * grid.frames * cb.dim);
    for l in 0..grid.layers {
        for &tok in grid.row(l) {
            if tok as usize >= cb.k {
                return Err(Error::TokenRange { token: tok, k: cb.k as u32 });
            }
            data.extend_from_slice(cb.centroid(l, tok as usize));
        }
    }
    FeatureStack::new(grid.layers, grid.frames, cb.dim, data)
}

/// Features of the mixture as seen inside `[s_r, s_m, s_r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSlice {
    pub features: FeatureStack,
    /// Frames of the reference alone.
    pub ref_frames: usize,
    /// Frames of the full concatenation.
    pub total_frames: usize,
}

/// Extracts features over the concatenation and keeps frames
/// `[T_r, T_total - T_r)`, where `T_r` is the frame count of `s_r` alone.
pub fn features_with_context(reference: &Waveform, mixture: &Waveform, fe: &Frontend) -> Result<ContextSlice> {
    let joined = concat_ref_mix_ref(reference, mixture)?;
    let ref_frames = fe.frame_count(reference.len());
    let total = fe.extract(&joined)?;
    let total_frames = total.frames;
    if total_frames <= 2 * ref_frames {
        return Err(Error::TooShort(format!(
            "mixture yields no frames between references ({total_frames} total, {ref_frames} per reference)"
        )));
    }
    Ok(ContextSlice {
        features: total.slice_frames(ref_frames, total_frames - ref_frames)?,
        ref_frames,
        total_frames,
    })
}

pub fn tokenize_mixture_with_context(
    reference: &Waveform,
    mixture: &Waveform,
    fe: &Frontend,
    cb: &Codebook,
) -> Result<TokenGrid> {
    tokenize(&features_with_context(reference, mixture, fe)?.features, cb)
}

/// Position in the context slice of the mixture's own frame 0. Frame `j` of
/// the mixture alone starts at sample `len(s_r) + hop·j` of the
/// concatenation; the slice starts at frame `T_r`.
pub fn context_offset(reference_len: usize, fe: &Frontend) -> usize {
    let hop = fe.config().frame_hop;
    let first = (reference_len + hop / 2) / hop;
    first.saturating_sub(fe.frame_count(reference_len))
}

const KMC_MAGIC: &[u8; 4] = b"KMC1";
const KMC_VERSION: u8 = 1;
const TOK_MAGIC: &[u8; 4] = b"TOK1";

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + cb.centroids.len() * 4);
    out.extend_from_slice(KMC_MAGIC);
    out.push(KMC_VERSION);
    for v in [cb.layers(), cb.k, cb.dim] {
        binio::put_u32(&mut out, v as u32);
    }
    binio::put_floats(&mut out, &cb.centroids, 4);
    let meta = serde_json::to_vec(&cb.meta).expect("meta serializes");
    binio::put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    out
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut r = Reader::new(bytes, "KMC1");
    r.expect_magic(KMC_MAGIC)?;
    let version = r.u8()?;
    if version != KMC_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let (n, k, e) = (r.u32()?, r.u32()?, r.u32()?);
    if n == 0 || k < 2 || e == 0 {
        return Err(r.err(format!("bad header {n}x{k}x{e}")));
    }
    let count = binio::extent(&r, &[n, k, e])?;
    let centroids = r.floats(count, 4)?;
    let len = r.u32()? as usize;
    let meta: TrainMeta = serde_json::from_str(&r.string(len)?)?;
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    Codebook::new(k as usize, e as usize, centroids, meta)
}

pub fn save_codebook(path: impl AsRef<Path>, cb: &Codebook) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_codebook(cb)).map_err(io_err(path))
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    decode_codebook(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn encode_tokens(grid: &TokenGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.tokens.len() * 4);
    out.extend_from_slice(TOK_MAGIC);
    for v in [grid.layers, grid.frames, grid.k] {
        binio::put_u32(&mut out, v as u32);
    }
    for &t in &grid.tokens {
        binio::put_u32(&mut out, t);
    }
    out
}

pub fn decode_tokens(bytes: &[u8]) -> Result<TokenGrid> {
    let mut r = Reader::new(bytes, "TOK1");
    r.expect_magic(TOK_MAGIC)?;
    let (n, t, k) = (r.u32()?, r.u32()?, r.u32()?);
    let count = binio::extent(&r, &[n, t])?;
    if count.checked_mul(4).is_none_or(|b| b > r.remaining()) {
        return Err(r.err("truncated token data"));
    }
    let tokens = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(r.err(format!("{} trailing bytes", r.remaining())));
    }
    TokenGrid::new(n as usize, t as usize, k as usize, tokens)
}

pub fn save_tokens(path: impl AsRef<Path>, grid: &TokenGrid) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tokens(grid)).map_err(io_err(path))
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenGrid> {
    let path = path.as_ref();
    decode_tokens(&std::fs::read(path).map_err(io_err(path))?)
}
