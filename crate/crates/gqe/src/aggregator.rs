//! Trainable aggregation of a node with its ranked nearest neighbors.
//!
//! The forward pass:
//!
//! 1. add learned positional embeddings (row 0 to the node, row `i` to the
//!    i-th neighbor),
//! 2. run the set encoder over the shifted sequence,
//! 3. take cosine similarities between the encoded node and each encoded
//!    neighbor, with the node's own similarity pinned to 1,
//! 4. optionally sharpen or flatten those similarities with a tempered
//!    softmax (`softmax(sims / T)`),
//! 5. weight the *original, un-shifted* embeddings by the resulting
//!    coefficients, sum, and renormalize.
//!
//! A very large temperature flattens the weights toward a plain average; a
//! very small one concentrates on the node itself, returning it unchanged.
//! The positional shift only influences the weights through the encoder; the
//! output stays a combination of the original inputs, which is what makes
//! per-item weight attribution possible downstream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::encoder::{
    encoder_backward, encoder_forward_tape, EncoderConfig, EncoderGrads, EncoderTape,
    EncoderVariant, EncoderWeights,
};
use crate::error::{GqeError, Result};
use crate::io;
use crate::math;

const MAGIC: &[u8; 4] = b"AGG1";
const VERSION: u32 = 1;
const FLAG_TEMPERATURE: u8 = 1;
const FLAG_PASSTHROUGH: u8 = 2;
const INIT_SCALE: f64 = 0.02;

/// Parameters of one aggregator: positional embeddings sized for up to `k`
/// neighbors plus the node, encoder weights, an optional softmax temperature
/// and a pass-through switch (used by collapsed models, where a level is
/// forced to return its node unchanged).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub config: EncoderConfig,
    pub k: usize,
    /// (k + 1) x dim, row-major; row 0 belongs to the node.
    pub positional: Vec<f64>,
    pub encoder: EncoderWeights,
    pub temperature: Option<f64>,
    pub passthrough: bool,
}

/// Applied combination weights and the pre-normalization norm of one
/// aggregation; `sum(sims[p] * input[p]) / norm` reproduces the output.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTrace {
    pub sims: Vec<f64>,
    pub norm: f64,
}

impl AggregatorParams {
    /// Fresh trainable parameters: gaussian positional rows and encoder
    /// projections (scale 0.02, values snapped to f32 so they survive the
    /// 32-bit parameter file exactly), unit gains, zero biases.
    pub fn init(config: EncoderConfig, k: usize, seed: u64) -> Result<Self> {
        Self::init_with_rng(config, k, &mut ChaCha20Rng::seed_from_u64(seed))
    }

    /// As [`init`](Self::init) but drawing from a caller-owned stream, so a
    /// multi-level model can derive every level from one seed.
    pub fn init_with_rng(config: EncoderConfig, k: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        config.validate()?;
        if k == 0 {
            return Err(GqeError::InvalidInput("aggregator k must be positive".into()));
        }
        use rand::Rng;
        let positional: Vec<f64> = (0..(k + 1) * config.dim)
            .map(|_| {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                (g * INIT_SCALE) as f32 as f64
            })
            .collect();
        let encoder = EncoderWeights::init(&config, INIT_SCALE, rng)?;
        Ok(AggregatorParams {
            config,
            k,
            positional,
            encoder,
            temperature: None,
            passthrough: false,
        })
    }

    /// Aggregator that weights original embeddings by raw cosine
    /// similarities: identity encoder, zero positional rows, no temperature.
    pub fn identity(dim: usize, k: usize) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(GqeError::InvalidInput("identity aggregator needs dim, k >= 1".into()));
        }
        Ok(AggregatorParams {
            config: EncoderConfig::identity(dim),
            k,
            positional: vec![0.0; (k + 1) * dim],
            encoder: EncoderWeights::default(),
            temperature: None,
            passthrough: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.k == 0 {
            return Err(GqeError::InvalidInput("aggregator k must be positive".into()));
        }
        if self.positional.len() != (self.k + 1) * self.config.dim {
            return Err(GqeError::InvalidInput(format!(
                "positional table has {} values, expected {}",
                self.positional.len(),
                (self.k + 1) * self.config.dim
            )));
        }
        if let Some(t) = self.temperature {
            if !t.is_finite() || t <= 0.0 {
                return Err(GqeError::InvalidInput("temperature must be finite and > 0".into()));
            }
        }
        let expected_layers = match self.config.variant {
            EncoderVariant::Identity => 0,
            EncoderVariant::Attention => self.config.layers,
        };
        if self.encoder.layers.len() != expected_layers {
            return Err(GqeError::InvalidInput(format!(
                "encoder carries {} layers, config declares {expected_layers}",
                self.encoder.layers.len()
            )));
        }
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(GqeError::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    pub fn positional_row(&self, p: usize) -> &[f64] {
        let d = self.config.dim;
        &self.positional[p * d..(p + 1) * d]
    }

    /// Named parameter tensors in serialization order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![("positional".to_string(), &self.positional)];
        out.extend(self.encoder.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = vec![("positional".to_string(), &mut self.positional)];
        out.extend(self.encoder.tensors_mut());
        out
    }

    fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(
            "positional".to_string(),
            vec![self.k + 1, self.config.dim],
        )];
        out.extend(EncoderWeights::shapes(&self.config));
        out
    }

    /// Serialized form; also the basis of the parameter digest.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        io::write_u32(&mut w, VERSION)?;
        io::write_u32(&mut w, self.config.dim as u32)?;
        io::write_u32(&mut w, self.config.heads as u32)?;
        io::write_u32(&mut w, self.config.layers as u32)?;
        io::write_u32(&mut w, self.config.ff_dim as u32)?;
        w.push(match self.config.variant {
            EncoderVariant::Identity => 0,
            EncoderVariant::Attention => 1,
        });
        let mut flags = 0u8;
        if self.temperature.is_some() {
            flags |= FLAG_TEMPERATURE;
        }
        if self.passthrough {
            flags |= FLAG_PASSTHROUGH;
        }
        w.push(flags);
        io::write_u32(&mut w, self.k as u32)?;
        if let Some(t) = self.temperature {
            io::write_f64(&mut w, t)?;
        }
        for ((_, tensor), (_, shape)) in self.tensors().iter().zip(self.tensor_shapes()) {
            io::write_u32(&mut w, shape.len() as u32)?;
            for d in &shape {
                io::write_u32(&mut w, *d as u32)?;
            }
            for v in tensor.iter() {
                io::write_f32(&mut w, *v as f32)?;
            }
        }
        Ok(w)
    }

    pub fn from_reader<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, MAGIC, "aggregator params")?;
        let version = io::read_u32(r)?;
        if version != VERSION {
            return Err(GqeError::Format(format!(
                "aggregator params version {version}, this build reads {VERSION}"
            )));
        }
        let dim = io::read_u32(r)? as usize;
        let heads = io::read_u32(r)? as usize;
        let layers = io::read_u32(r)? as usize;
        let ff_dim = io::read_u32(r)? as usize;
        let mut b = [0u8; 2];
        r.read_exact(&mut b)?;
        let variant = match b[0] {
            0 => EncoderVariant::Identity,
            1 => EncoderVariant::Attention,
            v => return Err(GqeError::Format(format!("unknown encoder variant byte {v}"))),
        };
        let flags = b[1];
        let k = io::read_u32(r)? as usize;
        let temperature =
            if flags & FLAG_TEMPERATURE != 0 { Some(io::read_f64(r)?) } else { None };
        let config = EncoderConfig { dim, heads, layers, ff_dim, variant };
        config.validate()?;

        let mut params = AggregatorParams {
            config,
            k,
            positional: vec![],
            encoder: EncoderWeights::zeros_like(&config),
            temperature,
            passthrough: flags & FLAG_PASSTHROUGH != 0,
        };
        let shapes = params.tensor_shapes();
        let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let rank = io::read_u32(r)? as usize;
            if rank != shape.len() {
                return Err(GqeError::Format(format!(
                    "tensor {name}: rank {rank} in file, expected {}",
                    shape.len()
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(io::read_u32(r)? as usize);
            }
            if &dims != shape {
                return Err(GqeError::Format(format!(
                    "tensor {name}: shape {dims:?} in file, expected {shape:?}"
                )));
            }
            let len = dims.iter().product();
            let data = io::read_f32_vec(r, len)?;
            tensors.push(data.into_iter().map(|v| v as f64).collect());
        }
        for ((_, slot), data) in params.tensors_mut().into_iter().zip(tensors) {
            *slot = data;
        }
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let params = Self::from_reader(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(GqeError::Format("aggregator params file has trailing bytes".into()));
        }
        Ok(params)
    }
}

/// Gradients, shaped exactly like [`AggregatorParams`]' tensors.
#[derive(Debug, Clone)]
pub struct AggregatorGrads {
    pub positional: Vec<f64>,
    pub encoder: EncoderGrads,
}

impl AggregatorGrads {
    pub fn zeros_like(params: &AggregatorParams) -> Self {
        AggregatorGrads {
            positional: vec![0.0; params.positional.len()],
            encoder: EncoderGrads::zeros_like(&params.config),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![("positional".to_string(), &self.positional)];
        out.extend(self.encoder.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = vec![("positional".to_string(), &mut self.positional)];
        out.extend(self.encoder.tensors_mut());
        out
    }

    pub fn add_scaled(&mut self, other: &AggregatorGrads, c: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }
}

/// Everything the backward pass needs from one aggregation.
pub(crate) struct AggTape {
    node: Vec<f64>,
    neighbors: Vec<Vec<f64>>,
    enc_tape: EncoderTape,
    enc_out: Vec<Vec<f64>>,
    /// Cosine similarities before any temperature (index 0 pinned to 1).
    sims_raw: Vec<f64>,
    /// Weights actually applied to the inputs.
    weights: Vec<f64>,
    norm: f64,
    out: Vec<f64>,
    passthrough: bool,
}

impl AggTape {
    pub(crate) fn output(&self) -> &[f64] {
        &self.out
    }

    pub(crate) fn trace(&self) -> AggregationTrace {
        AggregationTrace { sims: self.weights.clone(), norm: self.norm }
    }
}

fn check_agg_inputs(params: &AggregatorParams, node: &[f64], neighbors: &[&[f64]]) -> Result<()> {
    let dim = params.config.dim;
    if node.len() != dim {
        return Err(GqeError::DimensionMismatch { expected: dim, found: node.len() });
    }
    if neighbors.is_empty() {
        return Err(GqeError::InvalidInput("aggregation needs at least one neighbor".into()));
    }
    if neighbors.len() > params.k {
        return Err(GqeError::InvalidInput(format!(
            "{} neighbors exceed the aggregator's positional capacity k={}",
            neighbors.len(),
            params.k
        )));
    }
    for nb in neighbors {
        if nb.len() != dim {
            return Err(GqeError::DimensionMismatch { expected: dim, found: nb.len() });
        }
    }
    Ok(())
}

/// Forward pass keeping the tape; [`aggregate`] is the plain variant.
pub(crate) fn aggregate_tape(
    params: &AggregatorParams,
    node: &[f64],
    neighbors: &[&[f64]],
) -> Result<AggTape> {
    check_agg_inputs(params, node, neighbors)?;
    let m = neighbors.len();

    if params.passthrough {
        // Collapsed level: hand the node through untouched. The trace still
        // satisfies the reconstruction identity with weights (1, 0, ..., 0).
        let mut weights = vec![0.0; m + 1];
        weights[0] = 1.0;
        return Ok(AggTape {
            node: node.to_vec(),
            neighbors: neighbors.iter().map(|n| n.to_vec()).collect(),
            enc_tape: EncoderTape::empty(),
            enc_out: vec![],
            sims_raw: weights.clone(),
            weights,
            norm: 1.0,
            out: node.to_vec(),
            passthrough: true,
        });
    }

    // positional shift feeds the encoder only
    let mut work = Vec::with_capacity(m + 1);
    let shift = |v: &[f64], row: &[f64]| -> Vec<f64> {
        v.iter().zip(row).map(|(a, b)| a + b).collect()
    };
    work.push(shift(node, params.positional_row(0)));
    for (i, nb) in neighbors.iter().enumerate() {
        work.push(shift(nb, params.positional_row(i + 1)));
    }

    let (enc_out, enc_tape) = encoder_forward_tape(&params.config, &params.encoder, &work)?;
    if enc_out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GqeError::NonFinite("encoder output".into()));
    }

    let mut sims_raw = Vec::with_capacity(m + 1);
    sims_raw.push(1.0);
    for i in 1..=m {
        sims_raw.push(math::cosine(&enc_out[0], &enc_out[i]));
    }

    let weights = match params.temperature {
        Some(t) => {
            let z: Vec<f64> = sims_raw.iter().map(|s| s / t).collect();
            math::softmax(&z)
        }
        None => sims_raw.clone(),
    };

    let dim = params.config.dim;
    let mut s = vec![0.0; dim];
    math::axpy(&mut s, weights[0], node);
    for (i, nb) in neighbors.iter().enumerate() {
        math::axpy(&mut s, weights[i + 1], nb);
    }
    let norm = math::norm(&s);
    if !norm.is_finite() || norm < 1e-12 {
        return Err(GqeError::NonFinite(
            "aggregation output (weighted sum cancelled to zero norm)".into(),
        ));
    }
    let out: Vec<f64> = s.iter().map(|v| v / norm).collect();

    Ok(AggTape {
        node: node.to_vec(),
        neighbors: neighbors.iter().map(|n| n.to_vec()).collect(),
        enc_tape,
        enc_out,
        sims_raw,
        weights,
        norm,
        out,
        passthrough: false,
    })
}

/// Aggregate a node with its ranked neighbors into one unit vector, plus the
/// applied weights and pre-normalization norm.
pub fn aggregate(
    params: &AggregatorParams,
    node: &[f64],
    neighbors: &[&[f64]],
) -> Result<(Vec<f64>, AggregationTrace)> {
    let tape = aggregate_tape(params, node, neighbors)?;
    let trace = tape.trace();
    Ok((tape.out, trace))
}

/// Backward pass of one aggregation: given the loss gradient at the output,
/// accumulate parameter gradients into `grads` and return the gradients at
/// the node and neighbor inputs.
pub(crate) fn aggregate_backward(
    params: &AggregatorParams,
    tape: &AggTape,
    d_out: &[f64],
    grads: &mut AggregatorGrads,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = tape.neighbors.len();
    if tape.passthrough {
        return (d_out.to_vec(), vec![vec![0.0; params.config.dim]; m]);
    }
    let dim = params.config.dim;

    // out = s / |s|  =>  d_s = (d_out - out (out . d_out)) / |s|
    let proj = math::dot(&tape.out, d_out);
    let d_s: Vec<f64> =
        d_out.iter().zip(&tape.out).map(|(d, o)| (d - o * proj) / tape.norm).collect();

    // s = sum_p weights[p] * input[p]
    let mut d_weights = Vec::with_capacity(m + 1);
    d_weights.push(math::dot(&d_s, &tape.node));
    for nb in &tape.neighbors {
        d_weights.push(math::dot(&d_s, nb));
    }
    let mut d_node: Vec<f64> = d_s.iter().map(|d| d * tape.weights[0]).collect();
    let mut d_neighbors: Vec<Vec<f64>> = tape
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, _)| d_s.iter().map(|d| d * tape.weights[i + 1]).collect())
        .collect();

    // through the optional tempered softmax; index 0 is a constant either way
    let d_sims: Vec<f64> = match params.temperature {
        Some(t) => math::softmax_backward(&tape.weights, &d_weights)
            .into_iter()
            .map(|d| d / t)
            .collect(),
        None => d_weights,
    };

    // cosine similarities against the encoded node
    let n = m + 1;
    let mut d_enc = vec![vec![0.0; dim]; n];
    let e0 = &tape.enc_out[0];
    let n0 = math::norm(e0);
    for i in 1..n {
        let ds = d_sims[i];
        if ds == 0.0 {
            continue;
        }
        let ei = &tape.enc_out[i];
        let ni = math::norm(ei);
        let c = tape.sims_raw[i];
        for j in 0..dim {
            d_enc[0][j] += ds * (ei[j] / (n0 * ni) - c * e0[j] / (n0 * n0));
            d_enc[i][j] += ds * (e0[j] / (n0 * ni) - c * ei[j] / (ni * ni));
        }
    }

    let d_work =
        encoder_backward(&params.config, &params.encoder, &tape.enc_tape, &d_enc, &mut grads.encoder);

    // positional rows and the sum path into the original inputs
    for (p, dw) in d_work.iter().enumerate() {
        let row = &mut grads.positional[p * dim..(p + 1) * dim];
        for (g, d) in row.iter_mut().zip(dw) {
            *g += d;
        }
    }
    for (a, b) in d_node.iter_mut().zip(&d_work[0]) {
        *a += b;
    }
    for (i, dn) in d_neighbors.iter_mut().enumerate() {
        for (a, b) in dn.iter_mut().zip(&d_work[i + 1]) {
            *a += b;
        }
    }
    (d_node, d_neighbors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn attn_params(seed: u64) -> AggregatorParams {
        AggregatorParams::init(
            EncoderConfig {
                dim: 6,
                heads: 2,
                layers: 1,
                ff_dim: 8,
                variant: EncoderVariant::Attention,
            },
            4,
            seed,
        )
        .unwrap()
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        math::normalized(v).unwrap()
    }

    fn random_units(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                unit(&(0..dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect::<Vec<f64>>())
            })
            .collect()
    }

    #[test]
    fn identity_aggregator_worked_example() {
        let params = AggregatorParams::identity(2, 2).unwrap();
        let node = [1.0, 0.0];
        let n1 = [0.0, 1.0];
        let n2 = [0.6, 0.8];
        let (out, trace) = aggregate(&params, &node, &[&n1, &n2]).unwrap();
        assert!((trace.sims[0] - 1.0).abs() < 1e-12);
        assert!((trace.sims[1] - 0.0).abs() < 1e-12);
        assert!((trace.sims[2] - 0.6).abs() < 1e-12);
        assert!((out[0] - 0.9430).abs() < 1e-4, "got {out:?}");
        assert!((out[1] - 0.3328).abs() < 1e-4, "got {out:?}");
        assert!((trace.norm - 2.08f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn output_is_unit_and_trace_reconstructs() {
        let params = attn_params(3);
        let vs = random_units(5, 6, 10);
        let nbrs: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();
        let (out, trace) = aggregate(&params, &vs[0], &nbrs).unwrap();
        assert!((math::norm(&out) - 1.0).abs() < 1e-10);

        let mut recon = vec![0.0; 6];
        math::axpy(&mut recon, trace.sims[0] / trace.norm, &vs[0]);
        for (i, nb) in nbrs.iter().enumerate() {
            math::axpy(&mut recon, trace.sims[i + 1] / trace.norm, nb);
        }
        for (a, b) in recon.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6, "trace must reconstruct the output");
        }
    }

    #[test]
    fn tempered_weights_sum_to_one() {
        let mut params = attn_params(4);
        params.temperature = Some(0.25);
        let vs = random_units(4, 6, 11);
        let nbrs: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();
        let (_, trace) = aggregate(&params, &vs[0], &nbrs).unwrap();
        let sum: f64 = trace.sims.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(trace.sims.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn huge_temperature_flattens_to_plain_average() {
        let mut params = attn_params(5);
        params.temperature = Some(1e6);
        let vs = random_units(5, 6, 12);
        let nbrs: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();
        let (out, _) = aggregate(&params, &vs[0], &nbrs).unwrap();
        let mut mean = vec![0.0; 6];
        for v in &vs {
            math::axpy(&mut mean, 1.0, v);
        }
        let mean = unit(&mean);
        for (a, b) in out.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-4, "T -> inf must recover the average");
        }
    }

    #[test]
    fn tiny_temperature_returns_the_node() {
        let mut params = attn_params(6);
        params.temperature = Some(1e-6);
        let vs = random_units(4, 6, 13);
        let nbrs: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();
        let (out, _) = aggregate(&params, &vs[0], &nbrs).unwrap();
        for (a, b) in out.iter().zip(&vs[0]) {
            assert!((a - b).abs() < 1e-4, "T -> 0 must return the node unchanged");
        }
    }

    #[test]
    fn passthrough_returns_node_with_consistent_trace() {
        let mut params = attn_params(7);
        params.passthrough = true;
        let vs = random_units(3, 6, 14);
        let nbrs: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();
        let (out, trace) = aggregate(&params, &vs[0], &nbrs).unwrap();
        assert_eq!(out, vs[0]);
        assert_eq!(trace.sims, vec![1.0, 0.0, 0.0]);
        assert_eq!(trace.norm, 1.0);
    }

    #[test]
    fn neighbor_permutation_permutes_sims() {
        let params = AggregatorParams::identity(6, 3).unwrap();
        let vs = random_units(4, 6, 15);
        let (out_a, tr_a) =
            aggregate(&params, &vs[0], &[&vs[1], &vs[2], &vs[3]]).unwrap();
        let (out_b, tr_b) =
            aggregate(&params, &vs[0], &[&vs[3], &vs[1], &vs[2]]).unwrap();
        assert_eq!(tr_a.sims[1], tr_b.sims[2]);
        assert_eq!(tr_a.sims[2], tr_b.sims[3]);
        assert_eq!(tr_a.sims[3], tr_b.sims[1]);
        for (a, b) in out_a.iter().zip(&out_b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_and_dimension_errors() {
        let params = AggregatorParams::identity(4, 2).unwrap();
        let vs = random_units(4, 4, 16);
        let too_many: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();
        assert!(aggregate(&params, &vs[0], &too_many).is_err());
        assert!(aggregate(&params, &[1.0, 0.0], &[&vs[1]]).is_err());
        assert!(aggregate(&params, &vs[0], &[]).is_err());
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("agg.params");
        let mut params = attn_params(42);
        params.temperature = Some(0.5);
        params.save(&p).unwrap();
        let loaded = AggregatorParams::load(&p).unwrap();
        assert_eq!(params, loaded, "freshly initialized params are f32-snapped, so the 32-bit file must round-trip them exactly");

        // For arbitrary (post-training) params the file itself is the fixed
        // point: save(load(file)) reproduces identical bytes.
        params.positional[0] = 0.1234567890123; // not f32-representable
        params.save(&p).unwrap();
        let bytes_a = std::fs::read(&p).unwrap();
        AggregatorParams::load(&p).unwrap().save(&p).unwrap();
        let bytes_b = std::fs::read(&p).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let params = AggregatorParams::identity(3, 2).unwrap();
        let mut bytes = params.to_bytes().unwrap();
        bytes[4] = 99; // version field
        let err = AggregatorParams::from_reader(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"), "got: {err}");
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        // Floor the denominator at 1e-6: below that scale a central difference
        // is dominated by floating-point cancellation, not by the derivative.
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    // Central finite differences over inputs and every parameter tensor for
    // loss = r . aggregate(...), both with and without temperature.
    #[test]
    fn backward_matches_finite_differences() {
        for temp in [None, Some(0.7)] {
            let mut params = attn_params(31);
            params.temperature = temp;
            let vs = random_units(4, 6, 32);
            let r = random_units(1, 6, 33).pop().unwrap();
            let nbrs: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();

            let loss = |p: &AggregatorParams, node: &[f64], nbrs: &[&[f64]]| -> f64 {
                let (out, _) = aggregate(p, node, nbrs).unwrap();
                math::dot(&out, &r)
            };

            let tape = aggregate_tape(&params, &vs[0], &nbrs).unwrap();
            let mut grads = AggregatorGrads::zeros_like(&params);
            let (d_node, d_nbrs) = aggregate_backward(&params, &tape, &r, &mut grads);

            let h = 1e-5;
            for i in 0..6 {
                let mut np = vs[0].clone();
                np[i] += h;
                let mut nm = vs[0].clone();
                nm[i] -= h;
                let num = (loss(&params, &np, &nbrs) - loss(&params, &nm, &nbrs)) / (2.0 * h);
                assert!(
                    relative_error(num, d_node[i]) < 1e-4,
                    "temp {temp:?} node[{i}]: {num} vs {}",
                    d_node[i]
                );
            }
            for (ni, nb) in vs[1..].iter().enumerate() {
                for i in 0..6 {
                    let mut np = nb.clone();
                    np[i] += h;
                    let mut nm = nb.clone();
                    nm[i] -= h;
                    let mut nbrs_p = nbrs.clone();
                    nbrs_p[ni] = &np;
                    let mut nbrs_m = nbrs.clone();
                    nbrs_m[ni] = &nm;
                    let num =
                        (loss(&params, &vs[0], &nbrs_p) - loss(&params, &vs[0], &nbrs_m)) / (2.0 * h);
                    assert!(
                        relative_error(num, d_nbrs[ni][i]) < 1e-4,
                        "temp {temp:?} neighbor {ni}[{i}]: {num} vs {}",
                        d_nbrs[ni][i]
                    );
                }
            }
            for ti in 0..grads.tensors().len() {
                let name = grads.tensors()[ti].0.clone();
                let len = grads.tensors()[ti].1.len();
                for j in (0..len).step_by(5) {
                    let mut pp = params.clone();
                    pp.tensors_mut()[ti].1[j] += h;
                    let mut pm = params.clone();
                    pm.tensors_mut()[ti].1[j] -= h;
                    let num = (loss(&pp, &vs[0], &nbrs) - loss(&pm, &vs[0], &nbrs)) / (2.0 * h);
                    let ana = grads.tensors()[ti].1[j];
                    assert!(
                        relative_error(num, ana) < 1e-4,
                        "temp {temp:?} {name}[{j}]: {num} vs {ana}"
                    );
                }
            }
        }
    }

    proptest! {
        // The aggregator always emits a unit vector whose trace reconstructs it.
        #[test]
        fn prop_unit_output_and_reconstruction(seed in 0u64..200) {
            let params = attn_params(seed);
            let vs = random_units(4, 6, seed.wrapping_add(1000));
            let nbrs: Vec<&[f64]> = vs[1..].iter().map(|v| v.as_slice()).collect();
            let (out, trace) = aggregate(&params, &vs[0], &nbrs).unwrap();
            prop_assert!((math::norm(&out) - 1.0).abs() < 1e-8);
            let mut recon = vec![0.0; 6];
            math::axpy(&mut recon, trace.sims[0] / trace.norm, &vs[0]);
            for (i, nb) in nbrs.iter().enumerate() {
                math::axpy(&mut recon, trace.sims[i + 1] / trace.norm, nb);
            }
            for (a, b) in recon.iter().zip(&out) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
