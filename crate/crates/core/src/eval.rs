//! P@K and MRR@K over next-item examples, plus a popularity baseline.

use rayon::prelude::*;
use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::data::{DatasetBundle, TrainExample};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::model::{item_representations, score_examples, Hyperparams, ModelParams};

/// 1-based rank of `target`: one plus the number of items scoring strictly
/// higher, plus the number of equal-scoring items with a smaller index.
pub fn rank_target(scores: &[f64], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > st || (s == st && i < target))
        .count()
}

pub fn precision_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / r as f64 } else { 0.0 })
        .sum();
    Ok(total / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![10, 20] }
    }
}

impl EvalConfig {
    pub fn new(ks: Vec<usize>) -> Result<Self> {
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config(format!("every K must be at least 1, got {ks:?}")));
        }
        Ok(Self { ks })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricAtK {
    pub k: usize,
    pub precision: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    pub metrics: Vec<MetricAtK>,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], config: &EvalConfig) -> Result<Self> {
        let metrics = config
            .ks
            .iter()
            .map(|&k| {
                Ok(MetricAtK {
                    k,
                    precision: precision_at_k(ranks, k)?,
                    mrr: mrr_at_k(ranks, k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            examples: ranks.len(),
            metrics,
        })
    }

    pub fn precision(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.precision)
    }

    pub fn mrr(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.mrr)
    }
}

/// `{"P@10": .., "MRR@10": .., "P@20": .., "MRR@20": .., "examples": ..}`
impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(2 * self.metrics.len() + 1))?;
        for m in &self.metrics {
            map.serialize_entry(&format!("P@{}", m.k), &m.precision)?;
            map.serialize_entry(&format!("MRR@{}", m.k), &m.mrr)?;
        }
        map.serialize_entry("examples", &self.examples)?;
        map.end()
    }
}

const EVAL_CHUNK: usize = 256;

/// Target ranks for each example under the trained model. Chunks are
/// scored in parallel; ranks come back in example order.
pub fn model_ranks(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    examples: &[TrainExample],
    hyper: &Hyperparams,
) -> Result<Vec<usize>> {
    let table = item_representations(params, adj, hyper)?;
    let chunks: Vec<Vec<usize>> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let scores = score_examples(params, &table, chunk, hyper)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, ex)| rank_target(scores.row(r), ex.target))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate(
    params: &ModelParams,
    adj: &NormalizedAdjacency,
    examples: &[TrainExample],
    hyper: &Hyperparams,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let ranks = model_ranks(params, adj, examples, hyper)?;
    EvalReport::from_ranks(&ranks, config)
}

/// Ranks every test target against training-set item frequency.
pub fn popularity_baseline(bundle: &DatasetBundle, config: &EvalConfig) -> Result<EvalReport> {
    popularity_ranks(bundle, &bundle.test).and_then(|r| EvalReport::from_ranks(&r, config))
}

pub fn popularity_ranks(bundle: &DatasetBundle, examples: &[TrainExample]) -> Result<Vec<usize>> {
    if bundle.sessions_train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores: Vec<f64> = bundle
        .train_item_counts()
        .into_iter()
        .map(|c| c as f64)
        .collect();
    Ok(examples
        .iter()
        .map(|ex| rank_target(&scores, ex.target))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_target(&[0.1, 5.0, 0.2], 1), 1);
        assert_eq!(rank_target(&[3.0, 2.0, 1.0], 2), 3);
        assert_eq!(rank_target(&[0.5; 8], 4), 5);
    }

    #[test]
    fn metric_hand_values() {
        let ranks = [1, 3, 25];
        assert!((precision_at_k(&ranks, 20).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let mrr = mrr_at_k(&ranks, 20).unwrap();
        assert!((mrr - (1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((mrr - 0.4444).abs() < 1e-4);
    }

    #[test]
    fn extremes() {
        assert_eq!(precision_at_k(&[1, 1, 1], 10).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&[1, 1, 1], 10).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[11, 30], 10).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&[11, 30], 10).unwrap(), 0.0);
        assert!(precision_at_k(&[], 10).is_err());
    }

    #[test]
    fn k_must_be_positive() {
        assert!(EvalConfig::new(vec![10, 0]).is_err());
        assert!(EvalConfig::new(vec![]).is_err());
    }

    #[test]
    fn report_json_column_order() {
        let report = EvalReport::from_ranks(&[1, 3, 25], &EvalConfig::default()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let p10 = json.find("\"P@10\"").unwrap();
        let m10 = json.find("\"MRR@10\"").unwrap();
        let p20 = json.find("\"P@20\"").unwrap();
        assert!(p10 < m10 && m10 < p20);
        assert_eq!(report.precision(20), Some(2.0 / 3.0));
    }
}
