//! Retrieval evaluation: mean average precision over ranked databases, plus
//! the attribution-level agreement and diversity metrics.
//!
//! Relevance defaults to exact label match between a query and a database
//! item; a relevance file (one line per query, space-separated database ids)
//! can override it for externally supplied ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::classic::{ClassicMethod, ClassicQEConfig};
use crate::error::{GqeError, Result};
use crate::graph::{query_neighbors, KnnGraph};
use crate::hierarchy::{expand_naive, GqeModel, QueryRef, WeightAttribution};
use crate::math;
use crate::store::EmbeddingStore;

/// How to expand queries before ranking.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    /// Rank with the raw query.
    NoExpansion,
    Aqe { k: usize },
    Aqewd { k: usize },
    AlphaQe { k: usize, alpha: f64 },
    /// Hierarchical expansion with a trained or identity model.
    Gqe,
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::NoExpansion => "none",
            MethodSpec::Aqe { .. } => "aqe",
            MethodSpec::Aqewd { .. } => "aqewd",
            MethodSpec::AlphaQe { .. } => "alphaqe",
            MethodSpec::Gqe => "gqe",
        }
    }

    fn params_json(&self, model: Option<&GqeModel>) -> BTreeMap<String, serde_json::Value> {
        let mut p = BTreeMap::new();
        match self {
            MethodSpec::NoExpansion => {}
            MethodSpec::Aqe { k } | MethodSpec::Aqewd { k } => {
                p.insert("k".into(), (*k).into());
            }
            MethodSpec::AlphaQe { k, alpha } => {
                p.insert("k".into(), (*k).into());
                p.insert("alpha".into(), (*alpha).into());
            }
            MethodSpec::Gqe => {
                if let Some(m) = model {
                    p.insert("k".into(), m.k().into());
                    p.insert("levels".into(), m.level_count().into());
                }
            }
        }
        p
    }
}

/// Average precision of one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryAp {
    pub id: u32,
    pub ap: f64,
}

/// Machine-readable evaluation result; serializes deterministically
/// (queries ascending, parameters alphabetical).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub map: f64,
    pub per_query: Vec<QueryAp>,
}

/// Standard average precision: the mean, over the relevant items, of the
/// precision at each rank where a relevant item appears. Relevant items
/// missing from the ranking contribute zero.
pub fn average_precision(ranking: &[u32], relevant: &BTreeSet<u32>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(GqeError::InvalidInput("relevant set is empty".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// All database ids by descending cosine similarity to `v`, ties by
/// ascending id.
pub fn rank_database(db: &EmbeddingStore, v: &[f64]) -> Result<Vec<u32>> {
    if v.len() != db.dim() {
        return Err(GqeError::DimensionMismatch { expected: db.dim(), found: v.len() });
    }
    let mut scored: Vec<(f64, u32)> = (0..db.count() as u32)
        .map(|id| (math::cosine(v, &db.row_f64(id)), id))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Expand every query per `method`, rank the full database, and report mAP.
///
/// Relevance for query `i` is `relevance[i]` when a relevance map is given,
/// otherwise the database items sharing the query's label (both stores must
/// then carry labels).
pub fn evaluate(
    method: &MethodSpec,
    queries: &EmbeddingStore,
    db: &EmbeddingStore,
    graph: Option<&KnnGraph>,
    model: Option<&GqeModel>,
    relevance: Option<&BTreeMap<u32, BTreeSet<u32>>>,
) -> Result<EvalReport> {
    if queries.dim() != db.dim() {
        return Err(GqeError::DimensionMismatch { expected: db.dim(), found: queries.dim() });
    }
    if relevance.is_none() && (queries.labels().is_none() || db.labels().is_none()) {
        return Err(GqeError::InvalidInput(
            "label-based relevance needs labels on both the queries and the database \
             (or pass a relevance file)"
                .into(),
        ));
    }
    if let MethodSpec::Gqe = method {
        if model.is_none() || graph.is_none() {
            return Err(GqeError::InvalidInput(
                "the hierarchical method needs a model and a graph".into(),
            ));
        }
    }

    // label -> database ids, for label-based relevance
    let mut by_label: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    if relevance.is_none() {
        for (id, &label) in db.labels().unwrap().iter().enumerate() {
            by_label.entry(label).or_default().insert(id as u32);
        }
    }

    let per_query: Vec<QueryAp> = (0..queries.count() as u32)
        .into_par_iter()
        .map(|qid| {
            let q = queries.row_f64(qid);
            let expanded = expand_for_ranking(method, &q, db, graph, model)?;
            let ranking = rank_database(db, &expanded)?;
            let relevant: BTreeSet<u32> = match relevance {
                Some(map) => map.get(&qid).cloned().ok_or_else(|| {
                    GqeError::InvalidInput(format!("no relevance entry for query {qid}"))
                })?,
                None => {
                    let label = queries.label(qid).unwrap();
                    by_label.get(&label).cloned().unwrap_or_default()
                }
            };
            if relevant.is_empty() {
                return Err(GqeError::InvalidInput(format!(
                    "query {qid} has no relevant database items"
                )));
            }
            Ok(QueryAp { id: qid, ap: average_precision(&ranking, &relevant)? })
        })
        .collect::<Result<Vec<_>>>()?;

    let map = per_query.iter().map(|r| r.ap).sum::<f64>() / per_query.len().max(1) as f64;
    Ok(EvalReport {
        method: method.name().to_string(),
        params: method.params_json(model),
        map,
        per_query,
    })
}

fn expand_for_ranking(
    method: &MethodSpec,
    q: &[f64],
    db: &EmbeddingStore,
    graph: Option<&KnnGraph>,
    model: Option<&GqeModel>,
) -> Result<Vec<f64>> {
    match method {
        MethodSpec::NoExpansion => math::normalized(q),
        MethodSpec::Aqe { k } | MethodSpec::Aqewd { k } | MethodSpec::AlphaQe { k, .. } => {
            let config = match method {
                MethodSpec::Aqe { k } => {
                    ClassicQEConfig { method: ClassicMethod::Aqe, k: *k, alpha: None }
                }
                MethodSpec::Aqewd { k } => {
                    ClassicQEConfig { method: ClassicMethod::Aqewd, k: *k, alpha: None }
                }
                MethodSpec::AlphaQe { k, alpha } => {
                    ClassicQEConfig { method: ClassicMethod::AlphaQe, k: *k, alpha: Some(*alpha) }
                }
                _ => unreachable!(),
            };
            config.validate()?;
            let qn = math::normalized(q)?;
            let neighbors = query_neighbors(db, *k, &qn)?;
            config.expand(q, &neighbors, db)
        }
        MethodSpec::Gqe => {
            let (qe, _) =
                expand_naive(model.unwrap(), QueryRef::External(q), db, graph.unwrap())?;
            Ok(qe)
        }
    }
}

// ---------------------------------------------------------------------------
// attribution metrics
// ---------------------------------------------------------------------------

/// Negative composed weights carry no mass in the metrics.
fn clamped_db_weights(attr: &WeightAttribution) -> impl Iterator<Item = (u32, f64)> + '_ {
    attr.weights.iter().map(|(&id, &w)| (id, w.max(0.0)))
}

/// Fraction of the total (clamped) attribution weight landing on database
/// items that share the query's label. The query's own weight is not a
/// database item and takes part in neither sum.
pub fn agreement(attr: &WeightAttribution, labels: &[u32], query_label: u32) -> Result<f64> {
    let mut same = 0.0;
    let mut total = 0.0;
    for (id, w) in clamped_db_weights(attr) {
        let label = *labels.get(id as usize).ok_or_else(|| {
            GqeError::InvalidInput(format!("no label for database item {id}"))
        })?;
        total += w;
        if label == query_label {
            same += w;
        }
    }
    if total <= 0.0 {
        return Err(GqeError::InvalidInput("total attribution weight is zero".into()));
    }
    Ok(same / total)
}

/// Entropy (natural log) of the distribution obtained by normalizing the
/// (clamped) weights of same-label database items. A single supporting item
/// gives 0; `m` equally weighted items give `ln m`.
pub fn diversity(attr: &WeightAttribution, labels: &[u32], query_label: u32) -> Result<f64> {
    let mut same: Vec<f64> = Vec::new();
    for (id, w) in clamped_db_weights(attr) {
        let label = *labels.get(id as usize).ok_or_else(|| {
            GqeError::InvalidInput(format!("no label for database item {id}"))
        })?;
        if label == query_label && w > 0.0 {
            same.push(w);
        }
    }
    let total: f64 = same.iter().sum();
    if same.is_empty() || total <= 0.0 {
        return Err(GqeError::InvalidInput(
            "no positive weight on items sharing the query's label".into(),
        ));
    }
    Ok(same
        .iter()
        .map(|w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum())
}

/// Relevance file: line `i` lists the relevant database ids of query `i`,
/// space-separated; blank lines mean an empty set is an error at use.
pub fn read_relevance_file(path: &Path) -> Result<BTreeMap<u32, BTreeSet<u32>>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let ids = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| {
                    GqeError::Format(format!("relevance line {}: bad id {tok:?}", i + 1))
                })
            })
            .collect::<Result<BTreeSet<u32>>>()?;
        map.insert(i as u32, ids);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::store::{generate_queries, generate_synthetic, SynthSpec};

    fn attr(entries: &[(u32, f64)]) -> WeightAttribution {
        WeightAttribution {
            query_weight: 0.7,
            weights: entries.iter().copied().collect(),
            final_norm: 1.0,
        }
    }

    #[test]
    fn average_precision_worked_cases() {
        let relevant: BTreeSet<u32> = [10, 30].into_iter().collect();
        let ranking = vec![10, 99, 30, 98];
        let ap = average_precision(&ranking, &relevant).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9, "ranks 1 and 3 give {ap}");

        let single: BTreeSet<u32> = [7].into_iter().collect();
        let ap = average_precision(&[1, 2, 3, 7, 8], &single).unwrap();
        assert!((ap - 0.25).abs() < 1e-12, "rank 4 gives {ap}");

        let perfect: BTreeSet<u32> = [1, 2].into_iter().collect();
        assert_eq!(average_precision(&[1, 2, 3], &perfect).unwrap(), 1.0);

        assert!(average_precision(&[1, 2], &BTreeSet::new()).is_err());
    }

    #[test]
    fn average_precision_matches_exhaustive_oracle() {
        // every subset of a 6-item ranking, checked against a from-scratch
        // accumulation

        let ranking: Vec<u32> = vec![4, 0, 5, 2, 1, 3];
        for mask in 1u32..(1 << 6) {
            let relevant: BTreeSet<u32> = (0..6).filter(|i| mask & (1 << i) != 0).collect();
            let got = average_precision(&ranking, &relevant).unwrap();
            let mut hits = 0.0;
            let mut acc = 0.0;
            for (idx, id) in ranking.iter().enumerate() {
                if relevant.contains(id) {
                    hits += 1.0;
                    acc += hits / (idx as f64 + 1.0);
                }
            }
            let want = acc / relevant.len() as f64;
            assert_eq!(got, want, "mask {mask:b}");
        }
    }

    #[test]
    fn agreement_worked_cases() {
        let labels = vec![1, 1, 2];
        let a = agreement(&attr(&[(0, 0.6), (1, 0.2), (2, 0.2)]), &labels, 1).unwrap();
        assert!((a - 0.8).abs() < 1e-12, "got {a}");
        let all_same = agreement(&attr(&[(0, 0.4), (1, 0.1)]), &labels, 1).unwrap();
        assert_eq!(all_same, 1.0);
        let none = agreement(&attr(&[(2, 0.5)]), &labels, 1).unwrap();
        assert_eq!(none, 0.0);
        // scaling every weight leaves the ratio alone
        let scaled = agreement(&attr(&[(0, 6.0), (1, 2.0), (2, 2.0)]), &labels, 1).unwrap();
        assert!((scaled - 0.8).abs() < 1e-12);
        // negative weights carry no mass
        let clamped =
            agreement(&attr(&[(0, 0.6), (1, 0.2), (2, 0.2), (3, -5.0)]), &[1, 1, 2, 2], 1)
                .unwrap();
        assert!((clamped - 0.8).abs() < 1e-12);
        assert!(agreement(&attr(&[(0, -1.0)]), &labels, 1).is_err(), "zero total weight");
    }

    #[test]
    fn diversity_worked_cases() {
        let labels = vec![1, 1, 1, 2];
        let d = diversity(&attr(&[(0, 0.6), (1, 0.2), (2, 0.2), (3, 9.0)]), &labels, 1).unwrap();
        let want = -(0.6f64 * 0.6f64.ln() + 2.0 * 0.2 * 0.2f64.ln());
        assert!((d - want).abs() < 1e-12);
        assert!((d - 0.9502705392332346).abs() < 1e-9, "entropy(0.6,0.2,0.2) = {d}");

        let two = diversity(&attr(&[(0, 0.3), (1, 0.3)]), &labels, 1).unwrap();
        assert!((two - std::f64::consts::LN_2).abs() < 1e-12, "uniform pair = ln 2, got {two}");

        let one = diversity(&attr(&[(0, 0.4)]), &labels, 1).unwrap();
        assert_eq!(one, 0.0, "a point mass has zero entropy");

        assert!(diversity(&attr(&[(3, 0.5)]), &labels, 1).is_err(), "no same-label weight");
    }

    #[test]
    fn no_expansion_matches_brute_force_ranking_oracle() {
        let spec = SynthSpec { clusters: 4, points_per_cluster: 12, dim: 8, noise_sigma: 0.4, seed: 3 };
        let db = generate_synthetic(&spec).unwrap();
        let queries = generate_queries(&spec, 3, 2).unwrap();
        let report = evaluate(&MethodSpec::NoExpansion, &queries, &db, None, None, None).unwrap();

        // independent oracle: full cosine sort and AP accumulation from
        // first principles
        let mut aps = Vec::new();
        for qid in 0..queries.count() as u32 {
            let q = queries.row_f64(qid);
            let qn: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut scored: Vec<(f64, u32)> = (0..db.count() as u32)
                .map(|id| {
                    let d = db.row_f64(id);
                    let dot: f64 = q.iter().zip(&d).map(|(a, b)| a * b).sum();
                    let dn: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    (dot / (qn * dn), id)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let label = queries.label(qid).unwrap();
            let mut hits = 0.0;
            let mut acc = 0.0;
            let mut total = 0usize;
            for (rank, (_, id)) in scored.iter().enumerate() {
                if db.label(*id) == Some(label) {
                    hits += 1.0;
                    acc += hits / (rank as f64 + 1.0);
                    total += 1;
                }
            }
            aps.push(acc / total as f64);
        }
        let oracle_map = aps.iter().sum::<f64>() / aps.len() as f64;
        assert_eq!(report.map, oracle_map, "library mAP diverges from the oracle");
        for (r, want) in report.per_query.iter().zip(&aps) {
            assert_eq!(r.ap, *want, "query {}", r.id);
        }
    }

    #[test]
    fn identical_expansions_give_identical_reports() {
        let spec = SynthSpec { clusters: 3, points_per_cluster: 10, dim: 8, noise_sigma: 0.3, seed: 8 };
        let db = generate_synthetic(&spec).unwrap();
        let queries = generate_queries(&spec, 2, 2).unwrap();
        let a = evaluate(&MethodSpec::Aqe { k: 4 }, &queries, &db, None, None, None).unwrap();
        let b =
            evaluate(&MethodSpec::AlphaQe { k: 4, alpha: 0.0 }, &queries, &db, None, None, None)
                .unwrap();
        // alpha = 0 weights every neighbor 1, which is a plain average
        for (x, y) in a.per_query.iter().zip(&b.per_query) {
            assert!((x.ap - y.ap).abs() < 1e-12, "query {}: {} vs {}", x.id, x.ap, y.ap);
        }
        assert!((a.map - b.map).abs() < 1e-12);
    }

    #[test]
    fn gqe_method_and_validation_errors() {
        let spec = small();
        let db = generate_synthetic(&spec).unwrap();
        let queries = generate_queries(&spec, 2, 2).unwrap();
        let graph = build_graph(&db, 3).unwrap();
        let model = GqeModel::identity(2, 3, 8).unwrap();

        let report =
            evaluate(&MethodSpec::Gqe, &queries, &db, Some(&graph), Some(&model), None).unwrap();
        assert_eq!(report.method, "gqe");
        assert_eq!(report.params["levels"], 2);
        assert!(report.map > 0.0 && report.map <= 1.0);

        assert!(evaluate(&MethodSpec::Gqe, &queries, &db, None, None, None).is_err());
        let unlabeled = EmbeddingStore::from_rows(
            (0..db.count() as u32).map(|i| db.row(i).to_vec()).collect(),
            None,
        )
        .unwrap();
        assert!(matches!(
            evaluate(&MethodSpec::NoExpansion, &queries, &unlabeled, None, None, None),
            Err(GqeError::InvalidInput(_))
        ));
    }

    fn small() -> SynthSpec {
        SynthSpec { clusters: 3, points_per_cluster: 10, dim: 8, noise_sigma: 0.3, seed: 8 }
    }

    #[test]
    fn relevance_file_overrides_labels() {
        let spec = small();
        let db = generate_synthetic(&spec).unwrap();
        let queries = generate_queries(&spec, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relevance.txt");
        std::fs::write(&path, "0 1 2\n3 4\n5\n").unwrap();
        let relevance = read_relevance_file(&path).unwrap();
        assert_eq!(relevance.len(), 3);
        assert_eq!(relevance[&1], [3, 4].into_iter().collect());

        let report = evaluate(
            &MethodSpec::NoExpansion,
            &queries,
            &db,
            None,
            None,
            Some(&relevance),
        )
        .unwrap();
        assert_eq!(report.per_query.len(), queries.count());

        std::fs::write(&path, "0 x\n").unwrap();
        assert!(matches!(read_relevance_file(&path), Err(GqeError::Format(_))));
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let spec = small();
        let db = generate_synthetic(&spec).unwrap();
        let queries = generate_queries(&spec, 2, 2).unwrap();
        let a = evaluate(&MethodSpec::Aqe { k: 3 }, &queries, &db, None, None, None).unwrap();
        let b = evaluate(&MethodSpec::Aqe { k: 3 }, &queries, &db, None, None, None).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        assert!(ja.contains("\"method\":\"aqe\""));
        for pair in a.per_query.windows(2) {
            assert!(pair[0].id < pair[1].id, "queries must be reported in ascending order");
        }
    }
}
