//! Parameterized building blocks. Each block registers its parameters in a
//! [`ParamStore`] under a name prefix and runs either on a [`Tape`] or, for
//! forward-only oracles, directly on [`Mat`] values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::biased_attention;
use super::mat::{self, Mat};
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Xavier-normal scaled by the given gain.
    Xavier(f64),
    Normal(f64),
    Zeros,
}

fn init_mat<R: Rng + ?Sized>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Mat {
    match init {
        Init::Xavier(gain) => Mat::randn(rows, cols, gain * (2.0 / (rows + cols) as f64).sqrt(), rng),
        Init::Normal(std) => Mat::randn(rows, cols, std, rng),
        Init::Zeros => Mat::zeros(rows, cols),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_mat(d_in, d_out, init, rng), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, d_out), true));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn forward_plain(&self, store: &ParamStore, x: &Mat) -> Mat {
        mat::linear(x, store.value(self.w), self.b.map(|b| store.value(b)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0), true);
        let beta = store.add(format!("{name}.beta"), Mat::zeros(1, dim), true);
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b, LN_EPS)
    }

    pub fn forward_plain(&self, store: &ParamStore, x: &Mat) -> Mat {
        mat::layer_norm(x, store.value(self.gamma), store.value(self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, Init::Xavier(1.0), true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, Init::Xavier(1.0), true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.gelu(h);
        self.down.forward(t, h)
    }

    pub fn forward_plain(&self, store: &ParamStore, x: &Mat) -> Mat {
        let h = self.up.forward_plain(store, x).map(mat::gelu);
        self.down.forward_plain(store, &h)
    }
}

/// Multi-head attention; query and key/value inputs may have different widths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output rows plus the post-softmax map of every head.
pub struct MhaOutput {
    pub out: Var,
    pub head_weights: Vec<Var>,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_kv: usize,
        dim: usize,
        heads: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention width must split evenly across heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_query, dim, Init::Xavier(1.0), true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, dim, Init::Xavier(1.0), true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, dim, Init::Xavier(1.0), true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, d_query, out_init, true, rng),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `bias` is shared by all heads.
    pub fn forward(&self, t: &mut Tape, xq: Var, xkv: Var, bias: Option<Var>) -> Result<MhaOutput> {
        let q = self.q.forward(t, xq);
        let k = self.k.forward(t, xkv);
        let v = self.v.forward(t, xkv);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (t.slice_cols(q, h * hd, hd), t.slice_cols(k, h * hd, hd), t.slice_cols(v, h * hd, hd))
            };
            let w = t.attn_probs(qh, kh, bias, scale)?;
            outs.push(t.matmul(w, vh));
            head_weights.push(w);
        }
        let cat = t.concat_cols(&outs);
        Ok(MhaOutput { out: self.o.forward(t, cat), head_weights })
    }

    /// Forward-only path through [`biased_attention`], one call per head.
    pub fn forward_plain(&self, store: &ParamStore, xq: &Mat, xkv: &Mat, bias: &Mat) -> Result<Mat> {
        let q = self.q.forward_plain(store, xq);
        let k = self.k.forward_plain(store, xkv);
        let v = self.v.forward_plain(store, xkv);
        let hd = self.head_dim();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let r = biased_attention(&q.slice_cols(h * hd, hd), &k.slice_cols(h * hd, hd), &v.slice_cols(h * hd, hd), bias)?;
            outs.push(r.outputs);
        }
        let refs: Vec<&Mat> = outs.iter().collect();
        Ok(self.o.forward_plain(store, &Mat::concat_cols(&refs)))
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, dim, heads, Init::Xavier(1.0), rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, bias: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let h = self.ln1.forward(t, x);
        let a = self.attn.forward(t, h, h, bias)?;
        let x = t.add(x, a.out);
        let h = self.ln2.forward(t, x);
        let f = self.ffn.forward(t, h);
        Ok((t.add(x, f), a.head_weights))
    }

    /// Forward-only update of the rows `xq` attending over `xkv`.
    pub fn forward_plain(&self, store: &ParamStore, xq: &Mat, xkv: &Mat, bias: &Mat) -> Result<Mat> {
        let hq = self.ln1.forward_plain(store, xq);
        let hkv = self.ln1.forward_plain(store, xkv);
        let mut x = xq.clone();
        x.add_assign(&self.attn.forward_plain(store, &hq, &hkv, bias)?);
        let h = self.ln2.forward_plain(store, &x);
        x.add_assign(&self.ffn.forward_plain(store, &h));
        Ok(x)
    }
}

/// Decoder block: self-attention over queries, cross-attention onto a memory,
/// feed-forward. Returns the cross-attention maps per head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, dim, dim, heads, Init::Xavier(1.0), rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, dim, dim, heads, Init::Xavier(1.0), rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
        }
    }

    /// `memory_keys` carries positional information for the keys; values use
    /// the raw memory.
    pub fn forward(&self, t: &mut Tape, x: Var, memory_keys: Var, memory: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.ln_self.forward(t, x);
        let a = self.self_attn.forward(t, h, h, None)?;
        let x = t.add(x, a.out);
        let h = self.ln_cross.forward(t, x);
        let c = cross_attend(&self.cross_attn, t, h, memory_keys, memory)?;
        let x = t.add(x, c.out);
        let h = self.ln_ffn.forward(t, x);
        let f = self.ffn.forward(t, h);
        Ok((t.add(x, f), c.head_weights))
    }
}

/// Cross-attention whose keys and values come from different inputs.
fn cross_attend(mha: &MultiHeadAttention, t: &mut Tape, xq: Var, keys: Var, values: Var) -> Result<MhaOutput> {
    let q = mha.q.forward(t, xq);
    let k = mha.k.forward(t, keys);
    let v = mha.v.forward(t, values);
    let hd = mha.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(mha.heads);
    let mut head_weights = Vec::with_capacity(mha.heads);
    for h in 0..mha.heads {
        let qh = t.slice_cols(q, h * hd, hd);
        let kh = t.slice_cols(k, h * hd, hd);
        let vh = t.slice_cols(v, h * hd, hd);
        let w = t.attn_probs(qh, kh, None, scale)?;
        outs.push(t.matmul(w, vh));
        head_weights.push(w);
    }
    let cat = t.concat_cols(&outs);
    Ok(MhaOutput { out: mha.o.forward(t, cat), head_weights })
}

/// Two-layer perceptron head used for box regression.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], Init::Xavier(1.0), true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, t: &mut Tape, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(t, x);
            if i + 1 < n {
                x = t.gelu(x);
            }
        }
        x
    }
}
