//! Hand-crafted query expansion baselines.
//!
//! All three methods combine the query with its top-K database neighbors and
//! renormalize:
//!
//! * `aqe`    — plain average of query and neighbors.
//! * `aqewd`  — rank-decayed weights `(K-i)/K` for the i-th neighbor
//!              (1-indexed), so the K-th neighbor drops out.
//! * `alpha_qe` — neighbors weighted by `cos(q, d)^alpha`; negative
//!              similarities are clamped to zero before exponentiation, and
//!              `alpha = 0` recovers `aqe`.
//!
//! Methods depend only on the query's direction: the query is renormalized
//! before use. If the weighted sum cancels to (near) zero the original query
//! is returned unchanged and a warning is logged.

use crate::error::{GqeError, Result};
use crate::graph::QueryNeighbors;
use crate::math;
use crate::store::EmbeddingStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassicMethod {
    Aqe,
    Aqewd,
    AlphaQe,
}

/// Method selector with its hyper-parameters, as used by the evaluation
/// harness and the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicQEConfig {
    pub method: ClassicMethod,
    pub k: usize,
    pub alpha: Option<f64>,
}

impl ClassicQEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(GqeError::InvalidInput("expansion k must be positive".into()));
        }
        match (self.method, self.alpha) {
            (ClassicMethod::AlphaQe, None) => {
                Err(GqeError::InvalidInput("alpha-qe requires --alpha".into()))
            }
            (ClassicMethod::AlphaQe, Some(a)) if !a.is_finite() || a < 0.0 => {
                Err(GqeError::InvalidInput("alpha must be finite and >= 0".into()))
            }
            (ClassicMethod::Aqe | ClassicMethod::Aqewd, Some(_)) => Err(GqeError::InvalidInput(
                "alpha is only meaningful for alpha-qe".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn expand(
        &self,
        q: &[f64],
        neighbors: &QueryNeighbors,
        store: &EmbeddingStore,
    ) -> Result<Vec<f64>> {
        self.validate()?;
        match self.method {
            ClassicMethod::Aqe => aqe(q, neighbors, store),
            ClassicMethod::Aqewd => aqewd(q, neighbors, store),
            ClassicMethod::AlphaQe => alpha_qe(q, neighbors, store, self.alpha.unwrap()),
        }
    }
}

fn check_inputs(q: &[f64], neighbors: &QueryNeighbors, store: &EmbeddingStore) -> Result<Vec<f64>> {
    if q.len() != store.dim() {
        return Err(GqeError::DimensionMismatch { expected: store.dim(), found: q.len() });
    }
    if neighbors.is_empty() {
        return Err(GqeError::InvalidInput("expansion needs a non-empty neighbor list".into()));
    }
    math::normalized(q)
}

/// Combine with per-neighbor weights and renormalize, falling back to the
/// query itself when the sum degenerates.
fn weighted_expand(
    q: &[f64],
    neighbors: &QueryNeighbors,
    store: &EmbeddingStore,
    weight: impl Fn(usize, f64) -> f64,
) -> Result<Vec<f64>> {
    let q = check_inputs(q, neighbors, store)?;
    let mut sum = q.clone();
    for (rank, &(id, sim)) in neighbors.entries().iter().enumerate() {
        math::axpy(&mut sum, weight(rank + 1, sim), &store.row_f64(id));
    }
    match math::normalized(&sum) {
        Ok(v) => Ok(v),
        Err(GqeError::ZeroVector(_)) => {
            log::warn!("expansion sum cancelled to zero; returning the query unchanged");
            Ok(q)
        }
        Err(e) => Err(e),
    }
}

/// Average query expansion: unit-scaled mean of the query and its neighbors.
pub fn aqe(q: &[f64], neighbors: &QueryNeighbors, store: &EmbeddingStore) -> Result<Vec<f64>> {
    weighted_expand(q, neighbors, store, |_, _| 1.0)
}

/// Average with rank decay: the i-th of K neighbors (1-indexed) gets weight
/// `(K - i) / K`.
pub fn aqewd(q: &[f64], neighbors: &QueryNeighbors, store: &EmbeddingStore) -> Result<Vec<f64>> {
    let k = neighbors.len() as f64;
    weighted_expand(q, neighbors, store, |rank, _| (k - rank as f64) / k)
}

/// Similarity-weighted expansion: neighbor weight `max(0, cos(q, d))^alpha`.
pub fn alpha_qe(
    q: &[f64],
    neighbors: &QueryNeighbors,
    store: &EmbeddingStore,
    alpha: f64,
) -> Result<Vec<f64>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(GqeError::InvalidInput("alpha must be finite and >= 0".into()));
    }
    weighted_expand(q, neighbors, store, |_, sim| sim.max(0.0).powf(alpha))
}
