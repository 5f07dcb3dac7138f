//! Token-to-token extraction network.
//!
//! Mixture and reference token grids are embedded with shared per-layer
//! tables and collapsed to one stream each by per-frame attention over layers.
//! A cross-attention stack lets the mixture stream read the reference, FiLM
//! mixes the result back into the mixture embedding, and a bidirectional
//! transformer encoder with one linear head per token layer predicts the clean
//! tokens. In hybrid mode the mixture side is a continuous feature stack,
//! projected per layer into the model dimension instead of embedded.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tse_tensor::nn::{sinusoidal_positions, LayerNorm, Linear, Mlp, MultiHeadAttention};
use tse_tensor::{GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::frontend::FeatureStack;
use crate::tokenizer::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Custom,
    Tiny,
    Desk,
    S,
    M,
    L,
}

impl std::str::FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "custom" => Ok(Self::Custom),
            "tiny" => Ok(Self::Tiny),
            "desk" => Ok(Self::Desk),
            "s" => Ok(Self::S),
            "m" => Ok(Self::M),
            "l" => Ok(Self::L),
            _ => Err(Error::Config(format!("unknown size preset {s:?} (tiny, desk, s, m, l)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub size_preset: SizePreset,
    pub n_layers_in: usize,
    pub k: usize,
    pub d_model: usize,
    pub xattn_blocks: usize,
    pub xattn_heads: usize,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub mlp_hidden: usize,
    /// Width of continuous mixture features; used only when `hybrid`.
    pub feat_dim: usize,
    pub hybrid: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(SizePreset::Desk)
    }
}

impl ModelConfig {
    pub fn preset(p: SizePreset) -> Self {
        let base = Self {
            size_preset: p,
            n_layers_in: 6,
            k: 32,
            d_model: 64,
            xattn_blocks: 2,
            xattn_heads: 4,
            lm_blocks: 2,
            lm_heads: 4,
            mlp_hidden: 128,
            feat_dim: 32,
            hybrid: false,
            seed: 0,
        };
        let big = |d: usize, lm_blocks: usize, lm_heads: usize| Self {
            k: 1000,
            d_model: d,
            xattn_blocks: 4,
            xattn_heads: 16,
            lm_blocks,
            lm_heads,
            mlp_hidden: 2048,
            feat_dim: 1024,
            ..base.clone()
        };
        match p {
            SizePreset::Custom | SizePreset::Desk => base,
            SizePreset::Tiny => Self {
                n_layers_in: 2,
                k: 5,
                d_model: 8,
                xattn_blocks: 1,
                xattn_heads: 2,
                lm_blocks: 1,
                lm_heads: 2,
                mlp_hidden: 12,
                feat_dim: 6,
                ..base
            },
            SizePreset::S => big(256, 6, 4),
            SizePreset::M => big(512, 8, 8),
            SizePreset::L => big(768, 12, 16),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers_in", self.n_layers_in),
            ("d_model", self.d_model),
            ("xattn_blocks", self.xattn_blocks),
            ("lm_blocks", self.lm_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("feat_dim", self.feat_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.k < 2 {
            return Err(Error::Config("model.k must be >= 2".into()));
        }
        for (name, heads) in [("xattn_heads", self.xattn_heads), ("lm_heads", self.lm_heads)] {
            if heads == 0 || !self.d_model.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "model.d_model = {} is not divisible by model.{name} = {heads}",
                    self.d_model
                )));
            }
        }
        Ok(())
    }
}

/// Mixture-side input: discrete tokens, or continuous features in hybrid mode.
#[derive(Debug, Clone, Copy)]
pub enum MixInput<'a> {
    Tokens(&'a TokenGrid),
    Features(&'a FeatureStack),
}

impl MixInput<'_> {
    pub fn frames(&self) -> usize {
        match self {
            MixInput::Tokens(g) => g.frames,
            MixInput::Features(f) => f.frames,
        }
    }
}

/// Post-norm transformer block; attention queries come from the running
/// stream, keys and values from `kv` (the stream itself for self-attention).
#[derive(Debug, Clone)]
struct Block {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    mlp: Mlp,
    norm2: LayerNorm,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d_model, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model),
            mlp: Mlp::new(store, &format!("{name}.mlp"), cfg.d_model, cfg.mlp_hidden, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model),
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, kv: Option<Var>, keep: Option<&[bool]>) -> Result<Var> {
        let a = self.attn.forward(g, store, x, kv.unwrap_or(x), keep)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, x)?;
        let x = g.add(x, m)?;
        Ok(self.norm2.forward(g, store, x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    embed: Vec<ParamId>,
    input_proj: Vec<Linear>,
    agg_score: Vec<ParamId>,
    agg_bias: ParamId,
    xattn: Vec<Block>,
    gamma: ParamId,
    beta: ParamId,
    film_norm: LayerNorm,
    lm: Vec<Block>,
    heads: Vec<Linear>,
}

/// Per-frame layer weights produced by the aggregator, `T × n`.
pub struct Aggregated {
    pub stream: Var,
    pub alpha: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (n, d) = (cfg.n_layers_in, cfg.d_model);
        let embed = (0..n)
            .map(|i| store.add_uniform(format!("embed.{i}"), &[cfg.k, d], 1.0, &mut rng, true))
            .collect();
        let input_proj = if cfg.hybrid {
            (0..n)
                .map(|i| Linear::new(&mut store, &format!("input_proj.{i}"), cfg.feat_dim, d, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let score_scale = 1.0 / (d as f64).sqrt();
        let agg_score = (0..n)
            .map(|i| store.add_uniform(format!("aggregate.score.{i}"), &[d, 1], score_scale, &mut rng, true))
            .collect();
        let agg_bias = store.add("aggregate.bias", Tensor::zeros(&[n]), false);
        let xattn = (0..cfg.xattn_blocks)
            .map(|b| Block::new(&mut store, &format!("xattn.{b}"), &cfg, cfg.xattn_heads, &mut rng))
            .collect::<Result<_>>()?;
        let gamma = store.add("film.gamma", Tensor::full(&[d], 1.0), false);
        let beta = store.add("film.beta", Tensor::zeros(&[d]), false);
        let film_norm = LayerNorm::new(&mut store, "film.norm", d);
        let lm = (0..cfg.lm_blocks)
            .map(|b| Block::new(&mut store, &format!("lm.{b}"), &cfg, cfg.lm_heads, &mut rng))
            .collect::<Result<_>>()?;
        let heads = (0..n)
            .map(|i| Linear::new(&mut store, &format!("head.{i}"), d, cfg.k, &mut rng))
            .collect();
        store.round_to_f32();
        Ok(Self {
            cfg,
            store,
            embed,
            input_proj,
            agg_score,
            agg_bias,
            xattn,
            gamma,
            beta,
            film_norm,
            lm,
            heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_tokens(&self, grid: &TokenGrid, what: &str) -> Result<()> {
        if grid.k != self.cfg.k || grid.layers != self.cfg.n_layers_in {
            return Err(Error::Dim(format!(
                "{what} grid has {} layers over K = {}, model expects {} over K = {}",
                grid.layers, grid.k, self.cfg.n_layers_in, self.cfg.k
            )));
        }
        if grid.frames == 0 {
            return Err(Error::Dim(format!("{what} grid has no frames")));
        }
        Ok(())
    }

    /// Per-layer `T × d` streams before aggregation.
    fn layer_streams(&self, g: &mut Graph, input: MixInput<'_>) -> Result<Vec<Var>> {
        let n = self.cfg.n_layers_in;
        match input {
            MixInput::Tokens(grid) => {
                self.check_tokens(grid, "token")?;
                (0..n)
                    .map(|i| {
                        let table = g.param(&self.store, self.embed[i]);
                        let idx: Vec<usize> = grid.row(i).iter().map(|&t| t as usize).collect();
                        Ok(g.embedding(table, &idx)?)
                    })
                    .collect()
            }
            MixInput::Features(fs) => {
                if !self.cfg.hybrid {
                    return Err(Error::Config("continuous mixture input needs model.hybrid".into()));
                }
                if fs.layers != n || fs.dim != self.cfg.feat_dim || fs.frames == 0 {
                    return Err(Error::Dim(format!(
                        "feature stack {}x{}x{}, model expects {n} layers of width {}",
                        fs.layers, fs.frames, fs.dim, self.cfg.feat_dim
                    )));
                }
                (0..n)
                    .map(|i| {
                        let x = g.constant(Tensor::new(&[fs.frames, fs.dim], fs.layer(i).to_vec())?);
                        Ok(self.input_proj[i].forward(g, &self.store, x)?)
                    })
                    .collect()
            }
        }
    }

    /// Per frame: `α(t) = softmax_i(w_i · E_i[t] + b_i)`, output `Σ_i α_i(t) E_i[t]`.
    pub fn embed_and_aggregate(&self, g: &mut Graph, input: MixInput<'_>) -> Result<Aggregated> {
        let streams = self.layer_streams(g, input)?;
        let scores = streams
            .iter()
            .zip(&self.agg_score)
            .map(|(&e, &w)| {
                let w = g.param(&self.store, w);
                g.matmul(e, w)
            })
            .collect::<tse_tensor::Result<Vec<_>>>()?;
        let scores = if scores.len() == 1 { scores[0] } else { g.concat_cols(&scores)? };
        let bias = g.param(&self.store, self.agg_bias);
        let scores = g.add_row(scores, bias)?;
        let alpha = g.softmax_rows(scores, None)?;
        let mut acc: Option<Var> = None;
        for (i, &e) in streams.iter().enumerate() {
            let a = g.slice_cols(alpha, i, 1)?;
            let term = g.mul_col(e, a)?;
            acc = Some(match acc {
                Some(s) => g.add(s, term)?,
                None => term,
            });
        }
        Ok(Aggregated {
            stream: acc.expect("n_layers_in >= 1"),
            alpha,
        })
    }

    /// Cross-attention stack over the reference, then FiLM and layer norm.
    pub fn cross_attend(&self, g: &mut Graph, e_m: Var, e_r: Var, ref_keep: Option<&[bool]>) -> Result<Var> {
        let d = self.cfg.d_model;
        let (tr, dr) = g.value(e_r).dims2("reference stream")?;
        let (_, dm) = g.value(e_m).dims2("mixture stream")?;
        if dr != d || dm != d {
            return Err(Error::Dim(format!("streams of width {dm} and {dr}, model width {d}")));
        }
        if tr == 0 {
            return Err(Error::Dim("empty reference".into()));
        }
        let mut x = e_m;
        for block in &self.xattn {
            x = block.forward(g, &self.store, x, Some(e_r), ref_keep)?;
        }
        let f = self.film(g, x, e_m)?;
        Ok(self.film_norm.forward(g, &self.store, f)?)
    }

    /// `(γ ⊙ E_spk) ⊙ E_m + β ⊙ E_spk`, before normalisation.
    pub fn film(&self, g: &mut Graph, e_spk: Var, e_m: Var) -> Result<Var> {
        let gamma = g.param(&self.store, self.gamma);
        let beta = g.param(&self.store, self.beta);
        let scaled = g.mul_row(e_spk, gamma)?;
        let scaled = g.mul(scaled, e_m)?;
        let shift = g.mul_row(e_spk, beta)?;
        Ok(g.add(scaled, shift)?)
    }

    /// Positional encoding, bidirectional encoder, one `T × K` logit block per layer.
    pub fn lm_forward(&self, g: &mut Graph, e_f: Var, keep: Option<&[bool]>) -> Result<Vec<Var>> {
        let (t, d) = g.value(e_f).dims2("lm input")?;
        if t == 0 {
            return Err(Error::Dim("empty mixture stream".into()));
        }
        let mut x = g.add_const(e_f, &sinusoidal_positions(t, d))?;
        for block in &self.lm {
            x = block.forward(g, &self.store, x, None, keep)?;
        }
        let logits = self
            .heads
            .iter()
            .map(|h| h.forward(g, &self.store, x))
            .collect::<tse_tensor::Result<Vec<_>>>()?;
        if logits.iter().any(|&l| !g.value(l).is_finite()) {
            return Err(Error::Tensor(tse_tensor::TensorError::NonFinite { op: "lm_forward" }));
        }
        Ok(logits)
    }

    /// Full forward pass. `mix_keep` and `ref_keep` mark real (non-padding)
    /// frames; padded frames are never attended to.
    pub fn logits(
        &self,
        g: &mut Graph,
        mix: MixInput<'_>,
        mix_keep: Option<&[bool]>,
        reference: &TokenGrid,
        ref_keep: Option<&[bool]>,
    ) -> Result<Vec<Var>> {
        self.check_tokens(reference, "reference")?;
        if let MixInput::Tokens(_) = mix {
            if self.cfg.hybrid {
                return Err(Error::Config("hybrid model needs continuous mixture features".into()));
            }
        }
        check_keep(mix_keep, mix.frames(), "mixture")?;
        check_keep(ref_keep, reference.frames, "reference")?;
        let e_m = self.embed_and_aggregate(g, mix)?.stream;
        let e_r = self.embed_and_aggregate(g, MixInput::Tokens(reference))?.stream;
        let e_f = self.cross_attend(g, e_m, e_r, ref_keep)?;
        self.lm_forward(g, e_f, mix_keep)
    }

    /// Argmax decoding, lowest token index on ties.
    pub fn extract_tokens(
        &self,
        mix: MixInput<'_>,
        mix_keep: Option<&[bool]>,
        reference: &TokenGrid,
        ref_keep: Option<&[bool]>,
    ) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, mix, mix_keep, reference, ref_keep)?;
        let mut tokens = Vec::with_capacity(logits.len() * mix.frames());
        for &l in &logits {
            let v = g.value(l);
            tokens.extend((0..mix.frames()).map(|t| tse_tensor::ops::argmax(v.row(t)) as u32));
        }
        TokenGrid::new(self.cfg.n_layers_in, mix.frames(), self.cfg.k, tokens)
    }
}

fn check_keep(keep: Option<&[bool]>, frames: usize, what: &str) -> Result<()> {
    match keep {
        Some(k) if k.len() != frames => Err(Error::Dim(format!("{what} mask has {} entries for {frames} frames", k.len()))),
        Some(k) if !k.iter().any(|&b| b) => Err(Error::Dim(format!("{what} mask hides every frame"))),
        _ => Ok(()),
    }
}

/// Step ladder for [`model_grad_check`].
pub const GRAD_CHECK_STEPS: &[f64] = &[1e-3, 1e-4, 1e-5];

/// Central-difference check of the training loss gradient for every
/// parameter of a freshly initialised `cfg` model, on seeded random inputs
/// of `frames` mixture and `ref_frames` reference frames. The last frame of
/// each side is masked out when there is more than one. Each element is
/// scored against the best of the central-difference `steps`.
pub fn model_grad_check(cfg: &ModelConfig, frames: usize, ref_frames: usize, seed: u64, steps: &[f64]) -> Result<GradCheckReport> {
    use rand::Rng;
    let model = Model::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_layers_in;
    let mut grid = |t: usize| {
        let tokens = (0..n * t).map(|_| rng.gen_range(0..cfg.k as u32)).collect();
        TokenGrid::new(n, t, cfg.k, tokens)
    };
    let reference = grid(ref_frames)?;
    let clean = grid(frames)?;
    let mix_tokens = grid(frames)?;
    let mix_features = FeatureStack::new(
        n,
        frames,
        cfg.feat_dim,
        (0..n * frames * cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let keep = |t: usize| (0..t).map(|i| t == 1 || i + 1 < t).collect::<Vec<_>>();
    let (mask, ref_keep) = (keep(frames), keep(ref_frames));
    let mix = if cfg.hybrid {
        MixInput::Features(&mix_features)
    } else {
        MixInput::Tokens(&mix_tokens)
    };
    let report = tse_tensor::grad_check_ladder(&model.store, steps, |g, store| {
        let mut m = model.clone();
        m.store = store.clone();
        let run = |g: &mut Graph| -> Result<Var> {
            let logits = m.logits(g, mix, Some(&mask), &reference, Some(&ref_keep))?;
            token_loss(g, &logits, &clean, &mask)
        };
        run(g).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => tse_tensor::TensorError::Invalid(other.to_string()),
        })
    })?;
    Ok(report)
}

/// Mean over layers of the masked per-layer cross-entropy against `clean`.
pub fn token_loss(g: &mut Graph, logits: &[Var], clean: &TokenGrid, mask: &[bool]) -> Result<Var> {
    if logits.len() != clean.layers {
        return Err(Error::Dim(format!("{} logit layers vs {} clean layers", logits.len(), clean.layers)));
    }
    let mut total: Option<Var> = None;
    for (l, &lg) in logits.iter().enumerate() {
        let targets: Vec<usize> = clean.row(l).iter().map(|&t| t as usize).collect();
        let ce = g.cross_entropy(lg, &targets, mask)?;
        total = Some(match total {
            Some(s) => g.add(s, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or_else(|| Error::Dim("no layers".into()))?;
    Ok(g.scale(total, 1.0 / logits.len() as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(ModelConfig::preset(SizePreset::Tiny)).unwrap()
    }

    fn grid(layers: usize, frames: usize, k: usize, salt: u32) -> TokenGrid {
        let tokens = (0..layers * frames).map(|i| (i as u32 * 7 + salt) % k as u32).collect();
        TokenGrid::new(layers, frames, k, tokens).unwrap()
    }

    #[test]
    fn presets_divide_heads() {
        for p in [SizePreset::Tiny, SizePreset::Desk, SizePreset::S, SizePreset::M, SizePreset::L] {
            ModelConfig::preset(p).validate().unwrap();
        }
        let s = ModelConfig::preset(SizePreset::S);
        assert_eq!((s.d_model, s.lm_blocks, s.lm_heads), (256, 6, 4));
        let l = ModelConfig::preset(SizePreset::L);
        assert_eq!((l.d_model, l.lm_blocks, l.lm_heads, l.xattn_blocks, l.xattn_heads), (768, 12, 16, 4, 16));
        let bad = ModelConfig {
            lm_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = tiny();
        let (mix, r) = (grid(2, 4, 5, 1), grid(2, 3, 5, 2));
        let a = m.extract_tokens(MixInput::Tokens(&mix), None, &r, None).unwrap();
        let b = m.extract_tokens(MixInput::Tokens(&mix), None, &r, None).unwrap();
        assert_eq!((a.layers, a.frames, a.k), (2, 4, 5));
        assert_eq!(a, b);
    }

    #[test]
    fn identical_layer_embeddings_pass_through() {
        let mut m = tiny();
        let t0 = m.store.value(m.embed[0]).clone();
        *m.store.value_mut(m.embed[1]) = t0.clone();
        let mix = TokenGrid::new(2, 3, 5, vec![4, 0, 2, 4, 0, 2]).unwrap();
        let mut g = Graph::new();
        let agg = m.embed_and_aggregate(&mut g, MixInput::Tokens(&mix)).unwrap();
        for (t, &tok) in [4usize, 0, 2].iter().enumerate() {
            for (a, b) in g.value(agg.stream).row(t).iter().zip(t0.row(tok)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_scores_average_layers() {
        let mut m = tiny();
        for &w in &m.agg_score.clone() {
            *m.store.value_mut(w) = Tensor::zeros(&[8, 1]);
        }
        let mix = grid(2, 3, 5, 3);
        let mut g = Graph::new();
        let agg = m.embed_and_aggregate(&mut g, MixInput::Tokens(&mix)).unwrap();
        for t in 0..3 {
            let e0 = m.store.value(m.embed[0]).row(mix.get(0, t) as usize).to_vec();
            let e1 = m.store.value(m.embed[1]).row(mix.get(1, t) as usize).to_vec();
            for (j, v) in g.value(agg.stream).row(t).iter().enumerate() {
                assert!((v - 0.5 * (e0[j] + e1[j])).abs() < 1e-12);
            }
            let s: f64 = g.value(agg.alpha).row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn film_parameter_identities() {
        let mut m = tiny();
        let spk = Tensor::new(&[2, 8], (0..16).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let em = Tensor::new(&[2, 8], (0..16).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut g = Graph::new();
        let (s, e) = (g.constant(spk.clone()), g.constant(em.clone()));
        let f = m.film(&mut g, s, e).unwrap();
        for ((v, a), b) in g.value(f).data().iter().zip(spk.data()).zip(em.data()) {
            assert_eq!(*v, a * b);
        }
        *m.store.value_mut(m.gamma) = Tensor::zeros(&[8]);
        *m.store.value_mut(m.beta) = Tensor::full(&[8], 1.0);
        let mut g = Graph::new();
        let (s, e) = (g.constant(spk.clone()), g.constant(em));
        let f = m.film(&mut g, s, e).unwrap();
        assert_eq!(g.value(f).data(), spk.data());
    }

    #[test]
    fn lm_is_bidirectional() {
        let m = tiny();
        let r = grid(2, 3, 5, 2);
        let a = grid(2, 4, 5, 1);
        let mut b = a.clone();
        b.tokens[3] = (b.tokens[3] + 1) % 5;
        b.tokens[7] = (b.tokens[7] + 2) % 5;
        let first_row = |mix: &TokenGrid| {
            let mut g = Graph::new();
            let l = m.logits(&mut g, MixInput::Tokens(mix), None, &r, None).unwrap();
            g.value(l[0]).row(0).to_vec()
        };
        let (ra, rb) = (first_row(&a), first_row(&b));
        assert!(ra.iter().zip(&rb).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn errors_are_typed() {
        let m = tiny();
        let r = grid(2, 3, 5, 2);
        let wrong_k = grid(2, 4, 6, 1);
        assert!(matches!(
            m.extract_tokens(MixInput::Tokens(&wrong_k), None, &r, None),
            Err(Error::Dim(_))
        ));
        let fs = FeatureStack::new(2, 4, 6, vec![0.1; 48]).unwrap();
        assert!(matches!(
            m.extract_tokens(MixInput::Features(&fs), None, &r, None),
            Err(Error::Config(_))
        ));
        let mix = grid(2, 4, 5, 1);
        assert!(m.extract_tokens(MixInput::Tokens(&mix), Some(&[false; 4]), &r, None).is_err());
    }

    #[test]
    fn tiny_gradients_match_finite_differences() {
        for hybrid in [false, true] {
            let cfg = ModelConfig {
                hybrid,
                ..ModelConfig::preset(SizePreset::Tiny)
            };
            let r = model_grad_check(&cfg, 4, 3, 7, GRAD_CHECK_STEPS).unwrap();
            for p in &r.params {
                assert!(p.max_rel_err <= 1e-4, "hybrid={hybrid} {}: {}", p.name, p.max_rel_err);
            }
        }
    }

    #[test]
    fn loss_values() {
        let clean = TokenGrid::new(2, 3, 5, vec![0, 1, 2, 3, 4, 0]).unwrap();
        let mut g = Graph::new();
        let uniform: Vec<Var> = (0..2).map(|_| g.constant(Tensor::zeros(&[3, 5]))).collect();
        let l = token_loss(&mut g, &uniform, &clean, &[true; 3]).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-4);
        let onehot: Vec<Var> = (0..2)
            .map(|layer| {
                let mut t = Tensor::full(&[3, 5], -50.0);
                for f in 0..3 {
                    t.data_mut()[f * 5 + clean.get(layer, f) as usize] = 50.0;
                }
                g.constant(t)
            })
            .collect();
        let l = token_loss(&mut g, &onehot, &clean, &[true; 3]).unwrap();
        assert!(g.value(l).item() < 1e-6);
        assert!(token_loss(&mut g, &onehot, &clean, &[false; 3]).is_err());
    }
}
