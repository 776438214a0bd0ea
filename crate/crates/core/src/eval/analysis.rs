//! Representation-space analyses: mean-pooled encoder outputs, top-1
//! cross-set retrieval by cosine similarity, and a deterministic 2-D PCA
//! export.

use std::fmt::Write as _;

use serde::Serialize;

use crate::compose::encode_source;
use crate::corpus::SourceData;
use crate::error::{Error, Result};
use crate::nn::{bind_store, ForwardMode};
use crate::registry::{ModuleConfig, ModuleKey, Registry};
use crate::speech::speech_encoder_forward_staged;
use crate::tensor::Tape;

/// Which stage of the encoder the fixed representation is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprStage {
    PreAdapter,
    PostAdapter,
    Text,
}

impl ReprStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReprStage::PreAdapter => "pre_adapter",
            ReprStage::PostAdapter => "post_adapter",
            ReprStage::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre_adapter" => Ok(ReprStage::PreAdapter),
            "post_adapter" => Ok(ReprStage::PostAdapter),
            "text" => Ok(ReprStage::Text),
            other => Err(Error::config(format!("unknown representation stage '{other}'"))),
        }
    }
}

/// Labelled set of per-utterance fixed vectors (mean over time of the
/// encoder output).
#[derive(Clone, Debug, Serialize)]
pub struct RepresentationSet {
    pub label: String,
    pub items: Vec<(String, Vec<f32>)>,
}

impl RepresentationSet {
    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |(_, v)| v.len())
    }
}

/// Runs the encoder per utterance and mean-pools over time into one
/// d_model-vector per id.
pub fn extract_representations(
    registry: &Registry,
    key: &ModuleKey,
    stage: ReprStage,
    examples: &[(String, SourceData)],
    label: &str,
) -> Result<RepresentationSet> {
    let module = registry.get(key)?;
    match (&module.config, stage) {
        (ModuleConfig::SpeechEncoder(cfg), ReprStage::PostAdapter) if cfg.adapter.is_none() => {
            return Err(Error::config(format!(
                "stage post_adapter requested but '{key}' has no adapter"
            )));
        }
        (ModuleConfig::SpeechEncoder(_), ReprStage::PreAdapter | ReprStage::PostAdapter) => {}
        (ModuleConfig::TextEncoder(_), ReprStage::Text) => {}
        (config, stage) => {
            return Err(Error::config(format!(
                "stage {} does not apply to '{key}' ({})",
                stage.as_str(),
                match config {
                    ModuleConfig::TextEncoder(_) => "text encoder",
                    ModuleConfig::TextDecoder(_) => "text decoder",
                    ModuleConfig::SpeechEncoder(_) => "speech encoder",
                }
            )));
        }
    }

    let mut items = Vec::with_capacity(examples.len());
    let mut seen = std::collections::HashSet::with_capacity(examples.len());
    for (id, source) in examples {
        if !seen.insert(id.clone()) {
            return Err(Error::data(format!("duplicate utterance id '{id}' in extraction set")));
        }
        let mut tape: Tape<f32> = Tape::new();
        let binding = bind_store(&mut tape, &module.params, false);
        let mut mode = ForwardMode::Eval;
        let encoded = match (&module.config, source) {
            (ModuleConfig::SpeechEncoder(cfg), SourceData::Speech(features)) => {
                let leaf = tape.constant(features.frames().cast());
                speech_encoder_forward_staged(
                    &mut tape,
                    &binding,
                    cfg,
                    leaf,
                    &mut mode,
                    stage == ReprStage::PostAdapter,
                )?
            }
            _ => encode_source(&mut tape, module, &binding, source, &mut mode)?,
        };
        let pooled = tape.mean_rows(encoded)?;
        items.push((id.clone(), tape.value(pooled).data().to_vec()));
    }
    Ok(RepresentationSet { label: label.to_string(), items })
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub n_queries: usize,
    pub skipped: usize,
    /// (query id, nearest key id) pairs in query order.
    pub nearest: Vec<(String, String)>,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// For each query vector, the nearest key vector by cosine similarity;
/// accuracy is the fraction whose nearest key shares the query's id.
/// Zero-norm vectors are skipped and counted. Requires matching id
/// universes.
pub fn retrieval_top1(
    queries: &RepresentationSet,
    keys: &RepresentationSet,
) -> Result<RetrievalReport> {
    let query_ids: std::collections::BTreeSet<&String> =
        queries.items.iter().map(|(id, _)| id).collect();
    let key_ids: std::collections::BTreeSet<&String> = keys.items.iter().map(|(id, _)| id).collect();
    if query_ids != key_ids {
        return Err(Error::data(format!(
            "retrieval id universes differ: {} queries vs {} keys",
            query_ids.len(),
            key_ids.len()
        )));
    }
    if queries.dim() != keys.dim() {
        return Err(Error::dim(format!(
            "representation dims differ: {} vs {}",
            queries.dim(),
            keys.dim()
        )));
    }
    let mut skipped = 0usize;
    let usable_keys: Vec<&(String, Vec<f32>)> = keys
        .items
        .iter()
        .filter(|(_, v)| {
            let ok = v.iter().any(|&x| x != 0.0);
            if !ok {
                skipped += 1;
            }
            ok
        })
        .collect();
    if usable_keys.is_empty() {
        return Err(Error::data("all key vectors are zero"));
    }
    let mut nearest = Vec::new();
    let mut hits = 0usize;
    let mut n_queries = 0usize;
    for (qid, qv) in &queries.items {
        if qv.iter().all(|&x| x == 0.0) {
            skipped += 1;
            continue;
        }
        n_queries += 1;
        let mut best = (f64::NEG_INFINITY, "");
        for (kid, kv) in &usable_keys {
            let sim = cosine(qv, kv);
            if sim > best.0 {
                best = (sim, kid.as_str());
            }
        }
        if best.1 == qid {
            hits += 1;
        }
        nearest.push((qid.clone(), best.1.to_string()));
    }
    if n_queries == 0 {
        return Err(Error::data("all query vectors are zero"));
    }
    Ok(RetrievalReport {
        accuracy: hits as f64 / n_queries as f64,
        n_queries,
        skipped,
        nearest,
    })
}

/// One projected point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Projection2d {
    pub label: String,
    pub id: String,
    pub x: f64,
    pub y: f64,
}

/// PCA onto the top-2 components of the union of all sets. Deterministic:
/// cyclic Jacobi eigensolver, components ordered by eigenvalue, sign fixed
/// so the largest-magnitude loading is positive.
pub fn project_2d(sets: &[RepresentationSet]) -> Result<Vec<Projection2d>> {
    let mut rows: Vec<(&str, &str, &[f32])> = Vec::new();
    for set in sets {
        for (id, v) in &set.items {
            rows.push((&set.label, id, v));
        }
    }
    if rows.len() < 2 {
        return Err(Error::data("projection needs at least two vectors"));
    }
    let d = rows[0].2.len();
    if rows.iter().any(|(_, _, v)| v.len() != d) {
        return Err(Error::dim("projection sets mix vector dimensions".to_string()));
    }

    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for (_, _, v) in &rows {
        for (m, &x) in mean.iter_mut().zip(*v) {
            *m += x as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, _, v)| v.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect();

    let mut cov = vec![0.0f64; d * d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total_variance <= 1e-18 {
        return Err(Error::data(
            "projection is degenerate: all vectors are identical (zero variance)",
        ));
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let mut components = Vec::with_capacity(2);
    for &idx in order.iter().take(2) {
        let mut component: Vec<f64> = (0..d).map(|r| eigenvectors[r * d + idx]).collect();
        // largest-magnitude loading positive; earliest index wins ties
        let mut lead = 0usize;
        for (i, c) in component.iter().enumerate() {
            if c.abs() > component[lead].abs() {
                lead = i;
            }
        }
        if component[lead] < 0.0 {
            for c in component.iter_mut() {
                *c = -*c;
            }
        }
        components.push(component);
    }

    let mut out = Vec::with_capacity(rows.len());
    for ((label, id, _), row) in rows.iter().zip(&centered) {
        let x: f64 = row.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
        let y: f64 = row.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
        out.push(Projection2d {
            label: label.to_string(),
            id: id.to_string(),
            x: super::round6(x),
            y: super::round6(y),
        });
    }
    Ok(out)
}

/// CSV export with the column order `label,id,x,y` and 6-decimal floats.
pub fn projection_csv(points: &[Projection2d]) -> String {
    let mut s = String::from("label,id,x,y\n");
    for p in points {
        writeln!(s, "{},{},{:.6},{:.6}", p.label, p.id, p.x, p.y).expect("string write");
    }
    s
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eigenvalues, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(label: &str, items: Vec<(&str, Vec<f32>)>) -> RepresentationSet {
        RepresentationSet {
            label: label.into(),
            items: items.into_iter().map(|(id, v)| (id.to_string(), v)).collect(),
        }
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let a = set("a", vec![("x", vec![1.0, 0.2]), ("y", vec![-0.5, 1.0]), ("z", vec![0.3, -0.9])]);
        let report = retrieval_top1(&a, &a).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.n_queries, 3);
    }

    #[test]
    fn cosine_hand_case() {
        // query (1,0): key A (0.9,0.1) has cos 0.994, key B (0,1) has cos 0
        let queries = set("q", vec![("A", vec![1.0, 0.0]), ("B", vec![0.6, 0.8])]);
        let keys = set("k", vec![("A", vec![0.9, 0.1]), ("B", vec![0.0, 1.0])]);
        let report = retrieval_top1(&queries, &keys).unwrap();
        assert_eq!(report.nearest[0], ("A".to_string(), "A".to_string()));
        let sim = cosine(&[1.0, 0.0], &[0.9, 0.1]);
        assert!((sim - 0.9938).abs() < 1e-3, "{sim}");
    }

    #[test]
    fn zero_vectors_are_skipped_and_counted() {
        let queries = set("q", vec![("A", vec![1.0, 0.0]), ("B", vec![0.0, 0.0])]);
        let keys = set("k", vec![("A", vec![1.0, 0.1]), ("B", vec![0.4, 1.0])]);
        let report = retrieval_top1(&queries, &keys).unwrap();
        assert_eq!(report.n_queries, 1);
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn retrieval_invariant_under_global_scaling() {
        let queries = set(
            "q",
            vec![("A", vec![0.3, -1.0, 0.4]), ("B", vec![1.0, 0.1, 0.0]), ("C", vec![-0.2, 0.5, 0.9])],
        );
        let keys = set(
            "k",
            vec![("A", vec![0.25, -0.9, 0.5]), ("B", vec![0.9, 0.2, 0.1]), ("C", vec![-0.1, 0.4, 1.0])],
        );
        let base = retrieval_top1(&queries, &keys).unwrap();
        let scaled_keys = RepresentationSet {
            label: "k".into(),
            items: keys
                .items
                .iter()
                .map(|(id, v)| (id.clone(), v.iter().map(|x| x * 37.5).collect()))
                .collect(),
        };
        let scaled = retrieval_top1(&queries, &scaled_keys).unwrap();
        assert_eq!(base.accuracy, scaled.accuracy);
        assert_eq!(base.nearest, scaled.nearest);
    }

    #[test]
    fn mismatched_id_universes_rejected() {
        let a = set("a", vec![("x", vec![1.0])]);
        let b = set("b", vec![("y", vec![1.0])]);
        assert!(retrieval_top1(&a, &b).is_err());
    }

    #[test]
    fn pca_separates_two_offset_clusters_along_x() {
        let mut items_a = Vec::new();
        let mut items_b = Vec::new();
        for i in 0..10 {
            let jitter = (i as f32) * 0.01;
            items_a.push((format!("a{i}"), vec![10.0 + jitter, 0.3 - jitter, jitter]));
            items_b.push((format!("b{i}"), vec![-10.0 - jitter, -0.2 + jitter, -jitter]));
        }
        let sets = vec![
            RepresentationSet { label: "A".into(), items: items_a },
            RepresentationSet { label: "B".into(), items: items_b },
        ];
        let points = project_2d(&sets).unwrap();
        for p in &points {
            if p.label == "A" {
                assert!(p.x > 0.0, "cluster A not separated: {p:?}");
            } else {
                assert!(p.x < 0.0, "cluster B not separated: {p:?}");
            }
        }
        // component ordering: x carries at least as much variance as y
        let var = |f: &dyn Fn(&Projection2d) -> f64| {
            let m: f64 = points.iter().map(|p| f(p)).sum::<f64>() / points.len() as f64;
            points.iter().map(|p| (f(p) - m).powi(2)).sum::<f64>() / points.len() as f64
        };
        assert!(var(&|p| p.x) >= var(&|p| p.y));
    }

    #[test]
    fn projection_is_deterministic() {
        let sets = vec![set(
            "s",
            vec![
                ("a", vec![1.0, 2.0, 0.5]),
                ("b", vec![-1.0, 0.3, 0.1]),
                ("c", vec![0.2, -0.7, 2.0]),
                ("d", vec![0.9, 0.9, -1.0]),
            ],
        )];
        let a = projection_csv(&project_2d(&sets).unwrap());
        let b = projection_csv(&project_2d(&sets).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn identical_vectors_are_degenerate() {
        let sets = vec![set("s", vec![("a", vec![1.0, 1.0]), ("b", vec![1.0, 1.0])])];
        assert!(project_2d(&sets).is_err());
    }

    #[test]
    fn jacobi_recovers_known_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1
        let (vals, _) = jacobi_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((sorted[0] - 3.0).abs() < 1e-12);
        assert!((sorted[1] - 1.0).abs() < 1e-12);
    }
}
