//! Supervised training of hierarchical expansion models: tuple construction
//! with hard-negative mining against the expanded query, a contrastive loss
//! on unit-vector distances, hand-derived analytic gradients through the
//! whole expansion, and adaptive-moment updates with decoupled weight decay.
//!
//! Training is a pure function of (initial model, data, config): batches are
//! processed in a fixed order, per-tuple gradients are computed in parallel
//! but reduced in tuple order, and all randomness flows from the config seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GqeError, Result};
use crate::eval::{evaluate, MethodSpec};
use crate::graph::KnnGraph;
use crate::hierarchy::{expand_with_tapes, expansion_backward, GqeModel, ModelGrads, QueryRef};
use crate::math;
use crate::store::{stream_rng, EmbeddingStore};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Seed streams reserved by the trainer (disjoint from the synthetic-data
/// streams, which use the same seed space only by coincidence of type).
const STREAM_POOL: u64 = 64;
const STREAM_TUPLES: u64 = 65;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Margin of the negative loss term; distances between unit vectors
    /// live in [0, 2].
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub pool_size: usize,
    /// The negative pool is re-sampled every this many optimizer steps.
    pub pool_refresh_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 5e-4,
            weight_decay: 1.5e-6,
            margin: 0.71,
            negatives_per_positive: 5,
            pool_size: 512,
            pool_refresh_interval: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(GqeError::InvalidInput("epochs and batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(GqeError::InvalidInput("learning_rate must be finite and >= 0".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(GqeError::InvalidInput("weight_decay must be finite and >= 0".into()));
        }
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return Err(GqeError::InvalidInput(format!(
                "margin {} outside (0, 2), the distance range of unit vectors",
                self.margin
            )));
        }
        if self.negatives_per_positive == 0 {
            return Err(GqeError::InvalidInput("negatives_per_positive must be >= 1".into()));
        }
        if self.pool_size == 0 || self.pool_refresh_interval == 0 {
            return Err(GqeError::InvalidInput(
                "pool_size and pool_refresh_interval must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Apply one `key=value` override, as read from a config file or flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                GqeError::InvalidInput(format!("bad value {value:?} for {key}"))
            })
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "negatives_per_positive" => self.negatives_per_positive = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "pool_refresh_interval" => self.pool_refresh_interval = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => {
                return Err(GqeError::InvalidInput(format!("unknown training key {other:?}")))
            }
        }
        Ok(())
    }
}

/// One training example: a query, a same-label positive, and mined
/// different-label negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub query: u32,
    pub positive: u32,
    pub negatives: Vec<u32>,
}

impl TrainingTuple {
    pub fn validate(&self, store: &EmbeddingStore) -> Result<()> {
        let label = |id: u32| {
            store.label(id).ok_or_else(|| {
                GqeError::InvalidInput(format!("item {id} has no label"))
            })
        };
        let q = label(self.query)?;
        if label(self.positive)? != q {
            return Err(GqeError::InvalidInput(format!(
                "positive {} does not share the query's label",
                self.positive
            )));
        }
        for &n in &self.negatives {
            if label(n)? == q {
                return Err(GqeError::InvalidInput(format!(
                    "negative {n} shares the query's label"
                )));
            }
        }
        Ok(())
    }
}

/// Contrastive loss on unit vectors: `d^2` for a positive pair,
/// `max(0, margin - d)^2` for a negative pair, `d` the Euclidean distance.
pub fn contrastive_loss(qe: &[f64], other: &[f64], is_positive: bool, margin: f64) -> f64 {
    let d2: f64 = qe.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum();
    if is_positive {
        d2
    } else {
        let gap = margin - d2.sqrt();
        if gap > 0.0 {
            gap * gap
        } else {
            0.0
        }
    }
}

/// Expand `query` with the current model and pick the `count` pool items
/// most similar to the expanded query whose labels differ from the query's.
pub fn mine_negatives(
    model: &GqeModel,
    query: u32,
    pool: &[u32],
    count: usize,
    store: &EmbeddingStore,
    graph: &KnnGraph,
) -> Result<Vec<u32>> {
    let query_label = store
        .label(query)
        .ok_or_else(|| GqeError::InvalidInput(format!("item {query} has no label")))?;
    let tapes = expand_with_tapes(model, QueryRef::Db(query), store, graph)?;
    let qe = tapes.output();
    let mut scored: Vec<(f64, u32)> = pool
        .iter()
        .filter(|&&id| store.label(id) != Some(query_label))
        .map(|&id| (math::dot(qe, &store.row_f64(id)), id))
        .collect();
    if scored.len() < count {
        return Err(GqeError::InvalidInput(format!(
            "negative pool exhausted: {} different-label candidates, {count} needed",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(count).map(|(_, id)| id).collect())
}

/// Loss and analytic parameter gradients of one tuple: the sum of its
/// `1 + negatives` contrastive terms, differentiated through the full
/// hierarchical expansion with within-level parameter sharing.
pub fn loss_gradients(
    model: &GqeModel,
    tuple: &TrainingTuple,
    store: &EmbeddingStore,
    graph: &KnnGraph,
    margin: f64,
) -> Result<(f64, ModelGrads)> {
    tuple.validate(store)?;
    let tapes = expand_with_tapes(model, QueryRef::Db(tuple.query), store, graph)?;
    let qe = tapes.output();

    let mut loss = 0.0;
    let mut d_qe = vec![0.0; qe.len()];

    let positive = store.row_f64(tuple.positive);
    loss += contrastive_loss(qe, &positive, true, margin);
    for (g, (a, b)) in d_qe.iter_mut().zip(qe.iter().zip(&positive)) {
        *g += 2.0 * (a - b);
    }

    for &nid in &tuple.negatives {
        let negative = store.row_f64(nid);
        loss += contrastive_loss(qe, &negative, false, margin);
        let d: f64 = qe
            .iter()
            .zip(&negative)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d < margin && d > 1e-12 {
            let scale = -2.0 * (margin - d) / d;
            for (g, (a, b)) in d_qe.iter_mut().zip(qe.iter().zip(&negative)) {
                *g += scale * (a - b);
            }
        }
    }

    let grads = expansion_backward(model, &tapes, &d_qe);
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Adaptive-moment optimizer state (momentum 0.9, variance 0.999, epsilon
/// 1e-8) with decoupled weight decay applied directly to the parameters.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(model: &GqeModel) -> Self {
        let shapes: Vec<usize> = model
            .params()
            .iter()
            .flat_map(|p| p.tensors().into_iter().map(|(_, t)| t.len()))
            .collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut GqeModel, grads: &ModelGrads, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut slot = 0;
        for (level, g) in grads.levels.iter().enumerate() {
            let mut tensors = model.levels[level].tensors_mut();
            for ((_, param), (_, grad)) in tensors.iter_mut().zip(g.tensors()) {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..param.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                    param[i] -= lr * (update + weight_decay * param[i]);
                }
                slot += 1;
            }
        }
    }
}

/// Per-epoch training statistics, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_map: Option<f64>,
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GqeModel,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were kept: the best validation mAP when a
    /// validation store was given, otherwise the last epoch.
    pub best_epoch: usize,
}

/// Train a model on a labeled store. Queries are the store's own items
/// (expanded through their cached neighbor lists); positives are drawn
/// uniformly among same-label items; negatives are hard-mined from a
/// periodically refreshed pool. When `validation` queries are given, the
/// returned model is the epoch snapshot with the best validation mAP.
///
/// The tuple schedule (shuffle order, positive draws, pool refreshes) is
/// rebuilt from the seed at the start of every epoch, so it replays
/// identically across epochs; only the model changes between them. With a
/// zero learning rate the loss history is therefore exactly flat.
pub fn train(
    model: &GqeModel,
    store: &EmbeddingStore,
    graph: &KnnGraph,
    config: &TrainConfig,
    validation: Option<&EmbeddingStore>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let labels = store
        .labels()
        .ok_or_else(|| GqeError::InvalidInput("training needs a labeled store".into()))?;
    let distinct: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(GqeError::InvalidInput(
            "training needs at least 2 distinct labels".into(),
        ));
    }

    // ids grouped by label; a query is eligible if another item shares its
    // label (otherwise it has no positive)
    let mut by_label: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
    for (id, &label) in labels.iter().enumerate() {
        by_label.entry(label).or_default().push(id as u32);
    }
    let eligible: Vec<u32> = (0..store.count() as u32)
        .filter(|&id| by_label[&labels[id as usize]].len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(GqeError::InvalidInput(
            "no label has two or more items; nothing to train on".into(),
        ));
    }

    let mut current = model.clone();
    let mut adam = Adam::new(&current);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, GqeModel)> = None;
    let terms = (1 + config.negatives_per_positive) as f64;

    for epoch in 0..config.epochs {
        // fresh streams per epoch: the schedule replays exactly
        let mut pool_rng = stream_rng(config.seed, STREAM_POOL);
        let mut tuple_rng = stream_rng(config.seed, STREAM_TUPLES);
        let mut pool = sample_pool(store.count(), config.pool_size, &mut pool_rng);

        let mut order = eligible.clone();
        order.shuffle(&mut tuple_rng);

        let mut loss_sum = 0.0;
        let mut tuple_count = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if step > 0 && step % config.pool_refresh_interval == 0 {
                pool = sample_pool(store.count(), config.pool_size, &mut pool_rng);
            }

            // sequential phase: everything that consumes randomness
            let positives: Vec<u32> = chunk
                .iter()
                .map(|&q| {
                    let mates = &by_label[&labels[q as usize]];
                    loop {
                        let p = mates[tuple_rng.gen_range(0..mates.len())];
                        if p != q {
                            return p;
                        }
                    }
                })
                .collect();

            // parallel phase: mining and gradients, reduced in tuple order
            let results: Vec<(f64, ModelGrads)> = chunk
                .par_iter()
                .zip(&positives)
                .map(|(&q, &p)| {
                    let negatives = mine_negatives(
                        &current,
                        q,
                        &pool,
                        config.negatives_per_positive,
                        store,
                        graph,
                    )?;
                    let tuple = TrainingTuple { query: q, positive: p, negatives };
                    loss_gradients(&current, &tuple, store, graph, config.margin)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut batch = ModelGrads::zeros_like(&current);
            let scale = 1.0 / (chunk.len() as f64 * terms);
            for (loss, grads) in &results {
                loss_sum += loss / terms;
                batch.add_scaled(grads, scale);
            }
            tuple_count += chunk.len();
            adam.step(&mut current, &batch, config.learning_rate, config.weight_decay);
        }

        let mean_loss = loss_sum / tuple_count as f64;
        let validation_map = match validation {
            Some(queries) => {
                let report =
                    evaluate(&MethodSpec::Gqe, queries, store, Some(graph), Some(&current), None)?;
                Some(report.map)
            }
            None => None,
        };
        if let Some(map) = validation_map {
            let better = best.as_ref().map(|(_, b, _)| map > *b).unwrap_or(true);
            if better {
                best = Some((epoch, map, current.clone()));
            }
        }
        history.push(EpochStats { epoch, mean_loss, validation_map });
        log::info!(
            "epoch {epoch}: mean loss {mean_loss:.6}{}",
            validation_map.map(|m| format!(", validation mAP {m:.4}")).unwrap_or_default()
        );
    }

    let (model, best_epoch) = match best {
        Some((epoch, _, m)) => (m, epoch),
        None => (current, config.epochs - 1),
    };
    Ok(TrainOutcome { model, history, best_epoch })
}

/// Uniform sample of `size` ids without replacement (everything when the
/// store is smaller), ascending for a stable mining iteration order.
fn sample_pool(n: usize, size: usize, rng: &mut impl Rng) -> Vec<u32> {
    if size >= n {
        return (0..n as u32).collect();
    }
    let mut ids: Vec<u32> = rand::seq::index::sample(rng, n, size)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    ids
}
