//! Partition comparison and end-to-end pipeline evaluation.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{assignment_map, ClusterId};
use crate::config::PipelineParams;
use crate::corpus::SyntheticCorpus;
use crate::embedding::ImageId;
use crate::error::{Error, Result};
use crate::lsh::LshConfig;
use crate::neighbors::pairs_within_distance;
use crate::pipeline::{run_full, StageTiming};
use crate::scorer::PairScorer;
use crate::search::{recall_against, RecallAtDistance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    /// Pairs co-clustered in both partitions.
    pub both: u64,
    /// Pairs co-clustered in the predicted partition.
    pub predicted: u64,
    /// Pairs co-clustered in the reference partition.
    pub reference: u64,
    pub total: u64,
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pair counts from the contingency table of two labelings over the same
/// images.
pub fn pair_counts<A, B>(predicted: &HashMap<ImageId, A>, reference: &HashMap<ImageId, B>) -> Result<PairCounts>
where
    A: Eq + Hash + Copy,
    B: Eq + Hash + Copy,
{
    if predicted.len() != reference.len() {
        return Err(Error::Data(format!(
            "partitions cover {} and {} images",
            predicted.len(),
            reference.len()
        )));
    }
    let mut cells: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (image, &p) in predicted {
        let r = *reference
            .get(image)
            .ok_or_else(|| Error::Data(format!("image {image} missing from reference")))?;
        *cells.entry((p, r)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(r).or_default() += 1;
    }
    Ok(PairCounts {
        both: cells.values().map(|&n| choose2(n)).sum(),
        predicted: rows.values().map(|&n| choose2(n)).sum(),
        reference: cols.values().map(|&n| choose2(n)).sum(),
        total: choose2(predicted.len() as u64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseScores {
    /// Share of predicted co-clustered pairs that are co-clustered in the
    /// reference; 1 when nothing is co-clustered.
    pub precision: f64,
    pub recall: f64,
    pub rand_index: f64,
    pub counts: PairCounts,
}

impl PairCounts {
    pub fn scores(&self) -> PairwiseScores {
        let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let agree = self.total + 2 * self.both - self.predicted - self.reference;
        PairwiseScores {
            precision: ratio(self.both, self.predicted),
            recall: ratio(self.both, self.reference),
            rand_index: ratio(agree, self.total),
            counts: *self,
        }
    }
}

pub fn pairwise_scores<A, B>(predicted: &HashMap<ImageId, A>, reference: &HashMap<ImageId, B>) -> Result<PairwiseScores>
where
    A: Eq + Hash + Copy,
    B: Eq + Hash + Copy,
{
    Ok(pair_counts(predicted, reference)?.scores())
}

/// Share of images whose cluster's majority reference label is their own.
pub fn purity<A, B>(predicted: &HashMap<ImageId, A>, reference: &HashMap<ImageId, B>) -> Result<f64>
where
    A: Eq + Hash + Copy,
    B: Eq + Hash + Copy,
{
    let mut cells: HashMap<A, HashMap<B, u64>> = HashMap::new();
    for (image, &p) in predicted {
        let r = *reference
            .get(image)
            .ok_or_else(|| Error::Data(format!("image {image} missing from reference")))?;
        *cells.entry(p).or_default().entry(r).or_default() += 1;
    }
    if predicted.is_empty() {
        return Ok(1.0);
    }
    let majority: u64 = cells.values().map(|row| row.values().max().copied().unwrap_or(0)).sum();
    Ok(majority as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub distance: u32,
    pub ground_truth_pairs: usize,
    pub retrieved: usize,
    pub recall: f64,
}

impl RecallReport {
    fn new(distance: u32, r: RecallAtDistance) -> Self {
        RecallReport {
            distance,
            ground_truth_pairs: r.ground_truth_pairs,
            retrieved: r.retrieved,
            recall: r.recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub clusters: usize,
    pub reference_groups: usize,
    pub pairwise: PairwiseScores,
    pub purity: f64,
    pub candidate_recall: RecallReport,
    /// Cluster size → number of clusters.
    pub cluster_sizes: BTreeMap<usize, usize>,
    pub timings: Vec<StageTiming>,
}

/// Runs the static pipeline on a corpus and scores it against ground truth.
/// `recall_distance` bounds the hamming radius for candidate recall.
pub fn evaluate_pipeline<S: PairScorer + ?Sized>(
    corpus: &SyntheticCorpus,
    lsh: &LshConfig,
    scorer: &S,
    params: &PipelineParams,
    recall_distance: u32,
) -> Result<EvalReport> {
    let out = run_full(&corpus.embeddings, lsh, scorer, params)?;
    let mut timings = out.timings;

    let start = Instant::now();
    let near = pairs_within_distance(corpus.embeddings.as_slice(), recall_distance)?;
    let recall = recall_against(&near, &out.hits);
    timings.push(StageTiming {
        stage: "recall-oracle".into(),
        items: near.len(),
        seconds: start.elapsed().as_secs_f64(),
    });

    let predicted: HashMap<ImageId, ClusterId> = assignment_map(&out.clusters);
    let reference = corpus.truth.labels();
    let mut cluster_sizes = BTreeMap::new();
    for c in &out.clusters {
        *cluster_sizes.entry(c.len()).or_default() += 1;
    }
    Ok(EvalReport {
        images: corpus.embeddings.len(),
        clusters: out.clusters.len(),
        reference_groups: corpus.truth.group_count(),
        pairwise: pairwise_scores(&predicted, reference)?,
        purity: purity(&predicted, reference)?,
        candidate_recall: RecallReport::new(recall_distance, recall),
        cluster_sizes,
        timings,
    })
}
