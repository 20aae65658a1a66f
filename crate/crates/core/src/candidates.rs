//! Candidate selection: verifying search hits with a pair scorer, optionally
//! expanding each hit cluster with its augmentation members.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::clustering::{ClusterId, NearDupeCluster};
use crate::embedding::{Embeddings, ImageId};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::labels::{LabeledPair, PairSource};
use crate::scorer::PairScorer;
use crate::search::SearchResultBatch;

pub const DEFAULT_K_AUG: usize = 3;

/// An indexed cluster head and the members tried after it, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHeadEntry {
    pub cluster: ClusterId,
    pub head: ImageId,
    pub augmentation: Vec<(ImageId, f64)>,
}

impl ClusterHeadEntry {
    pub fn from_cluster(cluster: &NearDupeCluster, k_aug: usize) -> Self {
        ClusterHeadEntry {
            cluster: cluster.id,
            head: cluster.head,
            augmentation: cluster.top_members(k_aug),
        }
    }
}

/// Head table keyed by head image id.
pub fn head_table(clusters: &[NearDupeCluster], k_aug: usize) -> HashMap<ImageId, ClusterHeadEntry> {
    clusters
        .iter()
        .map(|c| (c.head, ClusterHeadEntry::from_cluster(c, k_aug)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifiedMatch {
    pub query: ImageId,
    pub cluster: ClusterId,
    pub matched_via: ImageId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    depth: usize,
    found: VerifiedMatch,
}

/// Picks at most one cluster per query. Each hit's cluster is tried head first,
/// then through up to `k_aug` augmentation members in order; the first image
/// scoring at least `t` is the cluster's match. Across clusters the winner is
/// the match found at the shallowest position (head before augmentation), then
/// the highest score, then the smallest cluster id. Ranking by position first
/// keeps every match found with fewer augmentation members when more are
/// allowed.
pub fn select_candidates<S: PairScorer + ?Sized>(
    hits: &SearchResultBatch,
    heads: &HashMap<ImageId, ClusterHeadEntry>,
    scorer: &S,
    embeddings: &Embeddings,
    t: f64,
    k_aug: usize,
) -> Result<Vec<VerifiedMatch>> {
    let queries: Vec<(ImageId, &[crate::search::SearchHit])> = hits.iter().collect();
    let picked = queries
        .par_iter()
        .map(|&(q, hits)| {
            let qe = embeddings.require(q)?;
            let mut best: Option<Candidate> = None;
            for hit in hits {
                let entry = heads.get(&hit.index_image).ok_or_else(|| {
                    Error::Data(format!("hit {} is not a known cluster head", hit.index_image))
                })?;
                let tries = std::iter::once(entry.head)
                    .chain(entry.augmentation.iter().take(k_aug).map(|a| a.0));
                for (depth, via) in tries.enumerate() {
                    if via == q {
                        continue;
                    }
                    let score = scorer.score(qe, embeddings.require(via)?);
                    if score >= t {
                        let c = Candidate {
                            depth,
                            found: VerifiedMatch { query: q, cluster: entry.cluster, matched_via: via, score },
                        };
                        if best.is_none_or(|b| better(&c, &b)) {
                            best = Some(c);
                        }
                        break;
                    }
                }
            }
            Ok(best.map(|b| b.found))
        })
        .collect::<Result<Vec<_>>>()?;
    let out: Vec<VerifiedMatch> = picked.into_iter().flatten().collect();
    debug_assert!(out.iter().all(|m| m.score >= t));
    Ok(out)
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    a.depth
        .cmp(&b.depth)
        .then(b.found.score.total_cmp(&a.found.score))
        .then(a.found.cluster.cmp(&b.found.cluster))
        .is_lt()
}

/// Every hit that scores at least `t`, as an edge labeled by the indexed image.
/// Used when the index holds all images rather than cluster heads.
pub fn verify_hits<S: PairScorer + ?Sized>(
    hits: &SearchResultBatch,
    scorer: &S,
    embeddings: &Embeddings,
    t: f64,
) -> Result<Vec<VerifiedMatch>> {
    let queries: Vec<(ImageId, &[crate::search::SearchHit])> = hits.iter().collect();
    let per_query = queries
        .par_iter()
        .map(|&(q, hits)| {
            let qe = embeddings.require(q)?;
            let mut out = Vec::new();
            for h in hits {
                let score = scorer.score(qe, embeddings.require(h.index_image)?);
                if score >= t {
                    out.push(VerifiedMatch {
                        query: q,
                        cluster: ClusterId(h.index_image.get()),
                        matched_via: h.index_image,
                        score,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

/// Positive `(query, head)` pairs for matches that only succeeded through an
/// augmentation member: examples the scorer got wrong on the head pair.
pub fn emit_augmentation_labels(
    matches: &[VerifiedMatch],
    heads: &HashMap<ImageId, ClusterHeadEntry>,
) -> Result<Vec<LabeledPair>> {
    let by_cluster: HashMap<ClusterId, ImageId> = heads.values().map(|e| (e.cluster, e.head)).collect();
    let mut out = Vec::new();
    for m in matches {
        let head = *by_cluster
            .get(&m.cluster)
            .ok_or_else(|| Error::Data(format!("match to unknown cluster {}", m.cluster)))?;
        if m.matched_via != head {
            out.push(LabeledPair::new(m.query, head, true, PairSource::Augmentation)?);
        }
    }
    Ok(out)
}

/// Rows `query_id, cluster_id, matched_via_id, score`.
pub fn write_matches_tsv<W: Write>(w: &mut W, matches: &[VerifiedMatch]) -> Result<()> {
    for m in matches {
        writeln!(w, "{}\t{}\t{}\t{}", m.query, m.cluster, m.matched_via, m.score)?;
    }
    Ok(())
}

pub fn read_matches_tsv<R: BufRead>(r: R) -> Result<Vec<VerifiedMatch>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format("matches tsv", format!("line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(VerifiedMatch {
            query: f[0].parse().map_err(|_| bad())?,
            cluster: f[1].parse().map_err(|_| bad())?,
            matched_via: f[2].parse().map_err(|_| bad())?,
            score: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn save_matches(path: &Path, matches: &[VerifiedMatch]) -> Result<()> {
    atomic_write(path, |w| write_matches_tsv(w, matches))
}

pub fn load_matches(path: &Path) -> Result<Vec<VerifiedMatch>> {
    read_matches_tsv(std::io::BufReader::new(std::fs::File::open(path)?))
}
