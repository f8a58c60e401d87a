//! Offline retrieval evaluation over a query/corpus split.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{LabeledDataset, QuerySplit};
use crate::embfile::EmbeddingSet;
use crate::error::{Error, Result};
use crate::metrics::{avg_precision_at_20, hit_at_k, mean, precision_at_k};
use crate::model::MultiTaskModel;
use crate::retrieval::BinaryIndex;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    PrecisionAt(usize),
    AvgPrecisionAt20,
    RecallAt(usize),
}

pub const VALID_METRICS: &str = "p<k>, r<k>, avgp20 (k >= 1)";

impl Metric {
    fn depth(self) -> usize {
        match self {
            Metric::PrecisionAt(k) | Metric::RecallAt(k) => k,
            Metric::AvgPrecisionAt20 => 20,
        }
    }

    fn score(self, relevant: &[bool]) -> f64 {
        match self {
            Metric::PrecisionAt(k) => precision_at_k(relevant, k),
            Metric::AvgPrecisionAt20 => avg_precision_at_20(relevant),
            Metric::RecallAt(k) => hit_at_k(relevant, k),
        }
    }

    /// Parses a comma-separated list such as `p1,avgp20,r1,r10`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',').map(|m| m.trim().parse()).collect()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::PrecisionAt(k) => write!(f, "p{k}"),
            Metric::AvgPrecisionAt20 => f.write_str("avgp20"),
            Metric::RecallAt(k) => write!(f, "r{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown metric {s:?}; valid metrics: {VALID_METRICS}"));
        if s == "avgp20" {
            return Ok(Metric::AvgPrecisionAt20);
        }
        let (ctor, rest): (fn(usize) -> Metric, &str) = if let Some(r) = s.strip_prefix('p') {
            (Metric::PrecisionAt, r)
        } else if let Some(r) = s.strip_prefix('r') {
            (Metric::RecallAt, r)
        } else {
            return Err(bad());
        };
        match rest.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(ctor(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Rank by descending dot product.
    Float,
    /// Rank by ascending Hamming distance of sign codes.
    Binary,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Float => "float",
            Mode::Binary => "binary",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Mode::Float),
            "binary" => Ok(Mode::Binary),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected float or binary"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub mode: Mode,
    pub values: Vec<(Metric, f64)>,
    pub num_queries: usize,
    pub corpus_size: usize,
}

impl EvalReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.iter().find(|(m, _)| *m == metric).map(|&(_, v)| v)
    }

    /// `metric<TAB>task<TAB>value` lines with four decimals.
    pub fn to_tsv(&self) -> String {
        self.values
            .iter()
            .map(|(m, v)| format!("{m}\t{}\t{v:.4}\n", self.task))
            .collect()
    }
}

/// Float embeddings of every record of `dataset`, dropout disabled.
pub fn embed_dataset<T: Scalar>(model: &MultiTaskModel<T>, dataset: &LabeledDataset) -> Result<EmbeddingSet> {
    const CHUNK: usize = 512;
    let dim = model.config().embed_dim;
    let mut values = Vec::with_capacity(dataset.len() * dim);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let x = dataset.feature_matrix::<T>(chunk)?;
        let e = model.embed(&x)?;
        values.extend(e.data().iter().map(|v| v.as_f32()));
    }
    Ok(EmbeddingSet::Float {
        dim,
        ids: dataset.records.iter().map(|r| r.id).collect(),
        values,
    })
}

/// Ranks the corpus for every query and averages the requested metrics.
/// A corpus item is relevant when it shares the query's label under `task`;
/// an item with the query's own id is never ranked.
pub fn evaluate(
    embeddings: &EmbeddingSet,
    dataset: &LabeledDataset,
    split: &QuerySplit,
    task: &str,
    metrics: &[Metric],
    mode: Mode,
) -> Result<EvalReport> {
    if metrics.is_empty() {
        return Err(Error::Config(format!("no metrics requested; valid metrics: {VALID_METRICS}")));
    }
    if split.queries.is_empty() || split.corpus.is_empty() {
        return Err(Error::Eval("empty query set or corpus".into()));
    }
    if dataset.task_index(task).is_none() {
        return Err(Error::Eval(format!("dataset {} has no labels for {task}", dataset.name)));
    }
    let unlabeled: Vec<u64> = split
        .queries
        .iter()
        .chain(&split.corpus)
        .filter(|&&i| dataset.label(i, task).is_none())
        .map(|&i| dataset.records[i].id)
        .collect();
    if !unlabeled.is_empty() {
        let shown: Vec<String> = unlabeled.iter().take(10).map(ToString::to_string).collect();
        return Err(Error::Eval(format!(
            "{} records lack a {task} label (ids {}{})",
            unlabeled.len(),
            shown.join(", "),
            if unlabeled.len() > 10 { ", ..." } else { "" }
        )));
    }
    let row_of: HashMap<u64, usize> = embeddings.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let locate = |i: usize| -> Result<usize> {
        let id = dataset.records[i].id;
        row_of
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Eval(format!("no embedding for id {id}")))
    };
    let query_rows: Vec<usize> = split.queries.iter().map(|&i| locate(i)).collect::<Result<_>>()?;
    let corpus_rows: Vec<usize> = split.corpus.iter().map(|&i| locate(i)).collect::<Result<_>>()?;
    let depth = metrics.iter().map(|m| m.depth()).max().unwrap_or(1);

    let label_of_id: HashMap<u64, usize> = split
        .queries
        .iter()
        .chain(&split.corpus)
        .map(|&i| (dataset.records[i].id, dataset.label(i, task).expect("checked above")))
        .collect();
    let ids = embeddings.ids();

    let rankings: Vec<Vec<u64>> = match mode {
        Mode::Binary => {
            let binary = embeddings.to_binary()?;
            let EmbeddingSet::Binary { dim_bits, codes, .. } = &binary else {
                unreachable!("to_binary returns binary codes")
            };
            let index = BinaryIndex::build(*dim_bits, corpus_rows.iter().map(|&r| (ids[r], codes[r].clone())))?;
            query_rows
                .par_iter()
                .map(|&q| {
                    index
                        .knn_excluding(&codes[q], depth, Some(ids[q]))
                        .map(|r| r.neighbors.into_iter().map(|n| n.id).collect())
                })
                .collect::<Result<_>>()?
        }
        Mode::Float => {
            let EmbeddingSet::Float { dim, values, .. } = embeddings else {
                return Err(Error::Eval("float evaluation needs float embeddings".into()));
            };
            let dim = *dim;
            let row = |r: usize| &values[r * dim..(r + 1) * dim];
            query_rows
                .par_iter()
                .map(|&q| {
                    let qv = row(q);
                    let mut scored: Vec<(f64, u64)> = corpus_rows
                        .iter()
                        .filter(|&&c| ids[c] != ids[q])
                        .map(|&c| {
                            let dot: f64 = qv.iter().zip(row(c)).map(|(&a, &b)| a as f64 * b as f64).sum();
                            (-dot, ids[c])
                        })
                        .collect();
                    let cmp = |a: &(f64, u64), b: &(f64, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                    if depth < scored.len() {
                        scored.select_nth_unstable_by(depth, cmp);
                        scored.truncate(depth);
                    }
                    scored.sort_unstable_by(cmp);
                    scored.into_iter().map(|(_, id)| id).collect()
                })
                .collect()
        }
    };

    let mut per_metric = vec![Vec::with_capacity(rankings.len()); metrics.len()];
    for (&q, ranked) in query_rows.iter().zip(&rankings) {
        let want = label_of_id[&ids[q]];
        let flags: Vec<bool> = ranked.iter().map(|id| label_of_id[id] == want).collect();
        for (m, scores) in metrics.iter().zip(per_metric.iter_mut()) {
            scores.push(m.score(&flags));
        }
    }
    Ok(EvalReport {
        task: task.to_string(),
        mode,
        values: metrics.iter().copied().zip(per_metric.iter().map(|s| mean(s))).collect(),
        num_queries: query_rows.len(),
        corpus_size: corpus_rows.len(),
    })
}

/// Embeds `dataset` with `model` and runs [`evaluate`].
pub fn evaluate_model<T: Scalar>(
    model: &MultiTaskModel<T>,
    dataset: &LabeledDataset,
    split: &QuerySplit,
    task: &str,
    metrics: &[Metric],
    mode: Mode,
) -> Result<EvalReport> {
    let set = embed_dataset(model, dataset)?;
    evaluate(&set, dataset, split, task, metrics, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_parsing() {
        assert_eq!(
            Metric::parse_list("p1,avgp20,r1,r10").unwrap(),
            vec![
                Metric::PrecisionAt(1),
                Metric::AvgPrecisionAt20,
                Metric::RecallAt(1),
                Metric::RecallAt(10)
            ]
        );
        let err = "q5".parse::<Metric>().unwrap_err().to_string();
        assert!(err.contains("avgp20"), "{err}");
        assert!("p0".parse::<Metric>().is_err());
        assert_eq!(Metric::RecallAt(10).to_string(), "r10");
    }
}
