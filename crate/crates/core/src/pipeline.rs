//! The static pipeline: index every image, search all against all, verify
//! hits, and cluster the verified edges.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::candidates::{verify_hits, VerifiedMatch};
use crate::clustering::{elect_heads, k_cut, transitive_closure, NearDupeCluster};
use crate::config::PipelineParams;
use crate::embedding::{Embeddings, ImageId};
use crate::error::Result;
use crate::index::build_index;
use crate::lsh::{derive_all, LshConfig};
use crate::scorer::PairScorer;
use crate::search::{batch_search, SearchResultBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub items: usize,
    pub seconds: f64,
}

/// Runs named stages, logging and recording their wall-clock time, and tags
/// failures with the stage name.
#[derive(Debug, Default)]
pub struct StageTimer {
    pub timings: Vec<StageTiming>,
}

impl StageTimer {
    pub fn run<T>(
        &mut self,
        stage: &'static str,
        items: impl FnOnce(&T) -> usize,
        f: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        let seconds = start.elapsed().as_secs_f64();
        let n = items(&out);
        log::info!("stage={stage} items={n} elapsed={seconds:.3}s");
        self.timings.push(StageTiming { stage: stage.to_string(), items: n, seconds });
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub clusters: Vec<NearDupeCluster>,
    pub hits: SearchResultBatch,
    pub matches: Vec<VerifiedMatch>,
    pub timings: Vec<StageTiming>,
}

/// Transitive closure over verified edges, k-cut, head election, then a
/// singleton cluster for every image without an edge. Clusters come back in id
/// order.
pub fn cluster_matches<S: PairScorer + ?Sized>(
    matches: &[VerifiedMatch],
    embeddings: &Embeddings,
    scorer: &S,
    params: &PipelineParams,
    timer: &mut StageTimer,
) -> Result<Vec<NearDupeCluster>> {
    let edges: Vec<(ImageId, ImageId)> = matches.iter().map(|m| (m.query, m.matched_via)).collect();
    let groups = timer.run("transitive-closure", Vec::len, || {
        Ok(transitive_closure(&edges).into_iter().map(|g| g.members).collect::<Vec<_>>())
    })?;
    let cut = timer.run("k-cut", Vec::len, || {
        k_cut(&groups, scorer, embeddings, params.kcut_threshold, params.seed)
    })?;
    let mut clusters = timer.run("head-selection", Vec::len, || {
        elect_heads(&cut, scorer, embeddings, params.kcut_threshold)
    })?;
    let grouped: HashSet<ImageId> = groups.iter().flatten().copied().collect();
    clusters.extend(
        embeddings
            .ids()
            .filter(|i| !grouped.contains(i))
            .map(NearDupeCluster::singleton),
    );
    clusters.sort_by_key(|c| c.id);
    Ok(clusters)
}

pub fn run_full<S: PairScorer + ?Sized>(
    embeddings: &Embeddings,
    lsh: &LshConfig,
    scorer: &S,
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    let mut timer = StageTimer::default();
    let sets = timer.run("lsh-terms", Vec::len, || derive_all(embeddings.as_slice(), lsh))?;
    let index = timer.run("build-index", |i: &crate::index::PostingIndex| i.image_count(), || build_index(&sets, lsh, false))?;
    let hits = timer.run("search", SearchResultBatch::total_hits, || {
        batch_search(&sets, &index, params.k, params.min_overlap)
    })?;
    let matches = timer.run("select", Vec::len, || {
        verify_hits(&hits, scorer, embeddings, params.threshold)
    })?;
    let clusters = cluster_matches(&matches, embeddings, scorer, params, &mut timer)?;
    Ok(PipelineOutput { clusters, hits, matches, timings: timer.timings })
}
