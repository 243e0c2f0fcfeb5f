//! Set encoder applied to the (node + neighbors) sequence inside an
//! aggregator: either a pass-through (`Identity`) or a stack of pre-norm
//! transformer blocks (`Attention`) with multi-head self-attention and a
//! position-wise feed-forward, residual connections around both, and no
//! causal mask.
//!
//! Block structure per layer:
//!
//! ```text
//! x <- x + MultiHeadAttention(LayerNorm(x))
//! x <- x + FeedForward(LayerNorm(x))        FeedForward = W2 gelu(W1 h + b1) + b2
//! ```
//!
//! Backward passes are hand-derived per operation; gradients are validated
//! against central finite differences in the tests.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{GqeError, Result};
use crate::math;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    Identity,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub variant: EncoderVariant,
}

impl EncoderConfig {
    pub fn identity(dim: usize) -> Self {
        EncoderConfig { dim, heads: 0, layers: 0, ff_dim: 0, variant: EncoderVariant::Identity }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(GqeError::InvalidInput("encoder dim must be positive".into()));
        }
        if self.variant == EncoderVariant::Attention {
            if self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
                return Err(GqeError::InvalidInput(
                    "attention encoder needs heads, layers and ff_dim >= 1".into(),
                ));
            }
            if self.dim % self.heads != 0 {
                return Err(GqeError::InvalidInput(format!(
                    "encoder dim {} must be divisible by heads {}",
                    self.dim, self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer parameters. Attention projections carry no bias; the
/// feed-forward does; both normalizations have gain and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_ff1: Vec<f64>,
    pub b_ff1: Vec<f64>,
    pub w_ff2: Vec<f64>,
    pub b_ff2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncoderWeights {
    pub layers: Vec<LayerWeights>,
}

/// Draw a gaussian snapped to f32 precision, so freshly initialized
/// parameters survive the 32-bit parameter file format bit-for-bit.
fn draw(rng: &mut ChaCha20Rng, scale: f64) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    (g * scale) as f32 as f64
}

impl LayerWeights {
    fn init(dim: usize, ff_dim: usize, scale: f64, rng: &mut ChaCha20Rng) -> Self {
        let mat = |r: usize, c: usize, rng: &mut ChaCha20Rng| -> Vec<f64> {
            (0..r * c).map(|_| draw(rng, scale)).collect()
        };
        LayerWeights {
            ln1_gain: vec![1.0; dim],
            ln1_bias: vec![0.0; dim],
            w_q: mat(dim, dim, rng),
            w_k: mat(dim, dim, rng),
            w_v: mat(dim, dim, rng),
            w_o: mat(dim, dim, rng),
            ln2_gain: vec![1.0; dim],
            ln2_bias: vec![0.0; dim],
            w_ff1: mat(dim, ff_dim, rng),
            b_ff1: vec![0.0; ff_dim],
            w_ff2: mat(ff_dim, dim, rng),
            b_ff2: vec![0.0; dim],
        }
    }

    fn zeros(dim: usize, ff_dim: usize) -> Self {
        LayerWeights {
            ln1_gain: vec![0.0; dim],
            ln1_bias: vec![0.0; dim],
            w_q: vec![0.0; dim * dim],
            w_k: vec![0.0; dim * dim],
            w_v: vec![0.0; dim * dim],
            w_o: vec![0.0; dim * dim],
            ln2_gain: vec![0.0; dim],
            ln2_bias: vec![0.0; dim],
            w_ff1: vec![0.0; dim * ff_dim],
            b_ff1: vec![0.0; ff_dim],
            w_ff2: vec![0.0; ff_dim * dim],
            b_ff2: vec![0.0; dim],
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Vec<f64>)> {
        vec![
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
        ]
    }

    /// Tensor shapes in declaration order, given the owning config.
    fn shapes(config: &EncoderConfig) -> Vec<(&'static str, Vec<usize>)> {
        let d = config.dim;
        let f = config.ff_dim;
        vec![
            ("ln1_gain", vec![d]),
            ("ln1_bias", vec![d]),
            ("w_q", vec![d, d]),
            ("w_k", vec![d, d]),
            ("w_v", vec![d, d]),
            ("w_o", vec![d, d]),
            ("ln2_gain", vec![d]),
            ("ln2_bias", vec![d]),
            ("w_ff1", vec![d, f]),
            ("b_ff1", vec![f]),
            ("w_ff2", vec![f, d]),
            ("b_ff2", vec![d]),
        ]
    }
}

impl EncoderWeights {
    /// Initialize per config: projection and feed-forward weights from a
    /// zero-mean gaussian with the given scale, biases zero, gains one.
    pub fn init(config: &EncoderConfig, scale: f64, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        match config.variant {
            EncoderVariant::Identity => Ok(EncoderWeights { layers: vec![] }),
            EncoderVariant::Attention => Ok(EncoderWeights {
                layers: (0..config.layers)
                    .map(|_| LayerWeights::init(config.dim, config.ff_dim, scale, rng))
                    .collect(),
            }),
        }
    }

    pub fn zeros_like(config: &EncoderConfig) -> Self {
        match config.variant {
            EncoderVariant::Identity => EncoderWeights { layers: vec![] },
            EncoderVariant::Attention => EncoderWeights {
                layers: (0..config.layers)
                    .map(|_| LayerWeights::zeros(config.dim, config.ff_dim))
                    .collect(),
            },
        }
    }

    /// Named tensors in a fixed declaration order (serialization, optimizer
    /// state and gradient structs all share this order).
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors_mut().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t))
            })
            .collect()
    }

    /// Expected (name, shape) list for a config, independent of an instance.
    pub fn shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        match config.variant {
            EncoderVariant::Identity => vec![],
            EncoderVariant::Attention => (0..config.layers)
                .flat_map(|i| {
                    LayerWeights::shapes(config)
                        .into_iter()
                        .map(move |(n, s)| (format!("layer{i}.{n}"), s))
                })
                .collect(),
        }
    }
}

/// Gradients have exactly the parameter layout.
pub type EncoderGrads = EncoderWeights;

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

struct LnTape {
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
}

struct LayerTape {
    x_in: Vec<Vec<f64>>,
    ln1: LnTape,
    h1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per head: n x n attention weights after softmax.
    attn: Vec<Vec<Vec<f64>>>,
    /// Concatenated head outputs before the output projection.
    o: Vec<Vec<f64>>,
    ln2: LnTape,
    h2: Vec<Vec<f64>>,
    ff_pre: Vec<Vec<f64>>,
    ff_act: Vec<Vec<f64>>,
}

pub struct EncoderTape {
    layers: Vec<LayerTape>,
}

impl EncoderTape {
    /// Tape of an encoder that was never run (identity/pass-through paths).
    pub fn empty() -> Self {
        EncoderTape { layers: vec![] }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn layer_norm(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> (Vec<Vec<f64>>, LnTape) {
    let dim = gain.len();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat_rows = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len());
    for row in x {
        let mean: f64 = row.iter().sum::<f64>() / dim as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * istd).collect();
        out.push(xhat.iter().zip(gain.iter().zip(bias)).map(|(h, (g, b))| g * h + b).collect());
        xhat_rows.push(xhat);
        inv_std.push(istd);
    }
    (out, LnTape { xhat: xhat_rows, inv_std })
}

fn layer_norm_backward(
    tape: &LnTape,
    gain: &[f64],
    d_out: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let dim = gain.len();
    let mut d_gain = vec![0.0; dim];
    let mut d_bias = vec![0.0; dim];
    let mut d_x = Vec::with_capacity(d_out.len());
    for (r, dy) in d_out.iter().enumerate() {
        let xhat = &tape.xhat[r];
        let istd = tape.inv_std[r];
        for i in 0..dim {
            d_gain[i] += dy[i] * xhat[i];
            d_bias[i] += dy[i];
        }
        let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / dim as f64;
        let mean_dxhat_xhat: f64 =
            dxhat.iter().zip(xhat).map(|(d, h)| d * h).sum::<f64>() / dim as f64;
        d_x.push(
            (0..dim)
                .map(|i| istd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat))
                .collect(),
        );
    }
    (d_gain, d_bias, d_x)
}

fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// a^T . b for sequences a (n x k) and b (n x m); result is k x m row-major.
fn seq_outer(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let k = a[0].len();
    let m = b[0].len();
    let mut out = vec![0.0; k * m];
    for (ar, br) in a.iter().zip(b) {
        for (i, &av) in ar.iter().enumerate() {
            if av != 0.0 {
                let row = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in row.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// x . w^T for x (n x m) and w (k x m row-major); result n x k.
fn seq_mul_wt(x: &[Vec<f64>], w: &[f64], k: usize, m: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..k)
                .map(|i| {
                    let wrow = &w[i * m..(i + 1) * m];
                    row.iter().zip(wrow).map(|(a, b)| a * b).sum()
                })
                .collect()
        })
        .collect()
}

fn attention_forward(
    h: &[Vec<f64>],
    lw: &LayerWeights,
    config: &EncoderConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Vec<Vec<f64>>)
{
    let n = h.len();
    let dim = config.dim;
    let heads = config.heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = math::matmul(h, &lw.w_q, dim, dim);
    let k = math::matmul(h, &lw.w_k, dim, dim);
    let v = math::matmul(h, &lw.w_v, dim, dim);

    let mut attn = Vec::with_capacity(heads);
    let mut o = vec![vec![0.0; dim]; n];
    for head in 0..heads {
        let cols = head * dh..(head + 1) * dh;
        let mut a_rows = Vec::with_capacity(n);
        for t in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|s| {
                    let mut acc = 0.0;
                    for c in cols.clone() {
                        acc += q[t][c] * k[s][c];
                    }
                    acc * scale
                })
                .collect();
            let a = math::softmax(&scores);
            for (s, &w) in a.iter().enumerate() {
                for c in cols.clone() {
                    o[t][c] += w * v[s][c];
                }
            }
            a_rows.push(a);
        }
        attn.push(a_rows);
    }
    let out = math::matmul(&o, &lw.w_o, dim, dim);
    (q, k, v, attn, o, out)
}

/// Run the encoder over a sequence of `dim`-vectors, returning outputs and
/// the tape needed for the backward pass.
pub fn encoder_forward_tape(
    config: &EncoderConfig,
    weights: &EncoderWeights,
    input: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, EncoderTape)> {
    config.validate()?;
    for row in input {
        if row.len() != config.dim {
            return Err(GqeError::DimensionMismatch { expected: config.dim, found: row.len() });
        }
    }
    if config.variant == EncoderVariant::Identity {
        return Ok((input.to_vec(), EncoderTape { layers: vec![] }));
    }
    if weights.layers.len() != config.layers {
        return Err(GqeError::InvalidInput(format!(
            "encoder has {} layers of weights, config declares {}",
            weights.layers.len(),
            config.layers
        )));
    }

    let mut x = input.to_vec();
    let mut tapes = Vec::with_capacity(config.layers);
    for lw in &weights.layers {
        let x_in = x.clone();
        let (h1, ln1) = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let (q, k, v, attn, o, attn_out) = attention_forward(&h1, lw, config);
        let x_mid = add_rows(&x, &attn_out);

        let (h2, ln2) = layer_norm(&x_mid, &lw.ln2_gain, &lw.ln2_bias);
        let pre = {
            let mut p = math::matmul(&h2, &lw.w_ff1, config.dim, config.ff_dim);
            for row in p.iter_mut() {
                for (v, b) in row.iter_mut().zip(&lw.b_ff1) {
                    *v += b;
                }
            }
            p
        };
        let act: Vec<Vec<f64>> =
            pre.iter().map(|row| row.iter().map(|&v| gelu(v)).collect()).collect();
        let ff_out = {
            let mut f = math::matmul(&act, &lw.w_ff2, config.ff_dim, config.dim);
            for row in f.iter_mut() {
                for (v, b) in row.iter_mut().zip(&lw.b_ff2) {
                    *v += b;
                }
            }
            f
        };
        x = add_rows(&x_mid, &ff_out);

        tapes.push(LayerTape {
            x_in,
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            o,
            ln2,
            h2,
            ff_pre: pre,
            ff_act: act,
        });
    }
    Ok((x, EncoderTape { layers: tapes }))
}

/// Encoder output without keeping the tape.
pub fn encoder_forward(
    config: &EncoderConfig,
    weights: &EncoderWeights,
    input: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    encoder_forward_tape(config, weights, input).map(|(out, _)| out)
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Backpropagate `d_out` through a taped forward pass. Returns the gradient
/// at the inputs and accumulates parameter gradients into `grads`.
pub fn encoder_backward(
    config: &EncoderConfig,
    weights: &EncoderWeights,
    tape: &EncoderTape,
    d_out: &[Vec<f64>],
    grads: &mut EncoderGrads,
) -> Vec<Vec<f64>> {
    if config.variant == EncoderVariant::Identity {
        return d_out.to_vec();
    }
    let dim = config.dim;
    let heads = config.heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut d_x = d_out.to_vec();
    for (lw, (tape, lg)) in weights
        .layers
        .iter()
        .zip(tape.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        let n = tape.x_in.len();

        // ---- feed-forward block: x = x_mid + W2 gelu(W1 h2 + b1) + b2
        let d_ff_out = &d_x;
        for row in d_ff_out.iter() {
            for (g, d) in lg.b_ff2.iter_mut().zip(row) {
                *g += d;
            }
        }
        for (g, v) in lg.w_ff2.iter_mut().zip(seq_outer(&tape.ff_act, d_ff_out)) {
            *g += v;
        }
        let d_act = seq_mul_wt(d_ff_out, &lw.w_ff2, config.ff_dim, dim);
        let d_pre: Vec<Vec<f64>> = d_act
            .iter()
            .zip(&tape.ff_pre)
            .map(|(da, pre)| da.iter().zip(pre).map(|(d, &p)| d * gelu_prime(p)).collect())
            .collect();
        for row in &d_pre {
            for (g, d) in lg.b_ff1.iter_mut().zip(row) {
                *g += d;
            }
        }
        for (g, v) in lg.w_ff1.iter_mut().zip(seq_outer(&tape.h2, &d_pre)) {
            *g += v;
        }
        let d_h2 = seq_mul_wt(&d_pre, &lw.w_ff1, dim, config.ff_dim);
        let (d_g2, d_b2, d_x_mid_ln) = layer_norm_backward(&tape.ln2, &lw.ln2_gain, &d_h2);
        for (g, v) in lg.ln2_gain.iter_mut().zip(d_g2) {
            *g += v;
        }
        for (g, v) in lg.ln2_bias.iter_mut().zip(d_b2) {
            *g += v;
        }
        // residual: d_x flows through both the identity and the ff branch
        let d_x_mid = add_rows(&d_x, &d_x_mid_ln);

        // ---- attention block: x_mid = x_in + (attention over h1) W_o
        for (g, v) in lg.w_o.iter_mut().zip(seq_outer(&tape.o, &d_x_mid)) {
            *g += v;
        }
        let d_o = seq_mul_wt(&d_x_mid, &lw.w_o, dim, dim);

        let mut d_q = vec![vec![0.0; dim]; n];
        let mut d_k = vec![vec![0.0; dim]; n];
        let mut d_v = vec![vec![0.0; dim]; n];
        for head in 0..heads {
            let cols: Vec<usize> = (head * dh..(head + 1) * dh).collect();
            let a = &tape.attn[head];
            for t in 0..n {
                // d_v: o[t] = sum_s a[t][s] v[s]
                for s in 0..n {
                    let w = a[t][s];
                    if w != 0.0 {
                        for &c in &cols {
                            d_v[s][c] += w * d_o[t][c];
                        }
                    }
                }
                // d_a then d_scores via softmax backward
                let d_a: Vec<f64> = (0..n)
                    .map(|s| cols.iter().map(|&c| d_o[t][c] * tape.v[s][c]).sum())
                    .collect();
                let d_scores = math::softmax_backward(&a[t], &d_a);
                for (s, &ds) in d_scores.iter().enumerate() {
                    if ds != 0.0 {
                        for &c in &cols {
                            d_q[t][c] += ds * scale * tape.k[s][c];
                            d_k[s][c] += ds * scale * tape.q[t][c];
                        }
                    }
                }
            }
        }

        for (g, v) in lg.w_q.iter_mut().zip(seq_outer(&tape.h1, &d_q)) {
            *g += v;
        }
        for (g, v) in lg.w_k.iter_mut().zip(seq_outer(&tape.h1, &d_k)) {
            *g += v;
        }
        for (g, v) in lg.w_v.iter_mut().zip(seq_outer(&tape.h1, &d_v)) {
            *g += v;
        }
        let mut d_h1 = seq_mul_wt(&d_q, &lw.w_q, dim, dim);
        for (acc, row) in d_h1.iter_mut().zip(seq_mul_wt(&d_k, &lw.w_k, dim, dim)) {
            for (a, b) in acc.iter_mut().zip(row) {
                *a += b;
            }
        }
        for (acc, row) in d_h1.iter_mut().zip(seq_mul_wt(&d_v, &lw.w_v, dim, dim)) {
            for (a, b) in acc.iter_mut().zip(row) {
                *a += b;
            }
        }
        let (d_g1, d_b1, d_x_in_ln) = layer_norm_backward(&tape.ln1, &lw.ln1_gain, &d_h1);
        for (g, v) in lg.ln1_gain.iter_mut().zip(d_g1) {
            *g += v;
        }
        for (g, v) in lg.ln1_bias.iter_mut().zip(d_b1) {
            *g += v;
        }
        d_x = add_rows(&d_x_mid, &d_x_in_ln);
    }
    d_x
}
