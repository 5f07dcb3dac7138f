//! Neural building blocks expressed on the autodiff [`Graph`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/√in`, bias zero.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], scale, rng, true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), false);
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], scale, rng, true);
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Scaled dot-product attention split over `heads`, with scale `1/√(d/heads)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Intermediate values of one attention call, kept for inspection.
pub struct AttentionTrace {
    pub output: Var,
    /// Per head: attention weights `Tq×Tk`.
    pub weights: Vec<Var>,
    /// Per head: projected values `Tk×(d/heads)`.
    pub values: Vec<Var>,
    /// Per head: weighted value rows before the output projection.
    pub mixed: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Invalid(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            // a key bias shifts every score of a query equally, so softmax ignores it
            key: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Attention of `q_in` over `kv_in`, which serves as both key and value.
    /// `keep` marks which key rows may be attended to.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        Ok(self.trace(g, store, q_in, kv_in, kv_in, keep)?.output)
    }

    pub fn trace(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        keep: Option<&[bool]>,
    ) -> Result<AttentionTrace> {
        let (_, dq) = g.value(q_in).dims2("attention query")?;
        let (tk, dk) = g.value(k_in).dims2("attention key")?;
        if dq != self.dim || dk != self.dim || g.value(k_in).shape() != g.value(v_in).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: g.value(q_in).shape().to_vec(),
                rhs: g.value(k_in).shape().to_vec(),
            });
        }
        if tk == 0 {
            return Err(TensorError::Invalid("attention over zero keys".into()));
        }
        let q = self.query.forward(g, store, q_in)?;
        let k = self.key.forward(g, store, k_in)?;
        let v = self.value.forward(g, store, v_in)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut values = Vec::with_capacity(self.heads);
        let mut mixed = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s, keep)?;
            let o = g.matmul(a, vh)?;
            weights.push(a);
            values.push(vh);
            mixed.push(o);
        }
        let cat = if mixed.len() == 1 { mixed[0] } else { g.concat_cols(&mixed)? };
        let output = self.output.forward(g, store, cat)?;
        Ok(AttentionTrace {
            output,
            weights,
            values,
            mixed,
        })
    }

    /// Gradient-free evaluation on plain `Tq×d`, `Tk×d`, `Tk×d` tensors.
    pub fn apply(&self, store: &ParamStore, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = self.trace(&mut g, store, qv, kv, vv, None)?.output;
        Ok(g.value(out).clone())
    }
}

/// Standard sinusoidal table: `PE(t, 2i) = sin(t / 10000^(2i/d))`,
/// `PE(t, 2i+1) = cos(t / 10000^(2i/d))`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for j in 0..dim {
            let i2 = (j - j % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / dim as f64);
            data[t * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, dim], data).expect("shape")
}
