//! Batch top-K overlap search of many queries against a [`PostingIndex`].
//!
//! Queries are processed in partitions. Within a partition the query term sets
//! are inverted (term → query positions) and merge-joined against the index's
//! term-sorted posting lists, so every posting list is decoded at most once per
//! partition. Each query then counts how often every indexed image was seen.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::embedding::{BinaryEmbedding, ImageId};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::index::{build_index, PostingIndex};
use crate::lsh::{derive_all, jaccard_from_overlap, LshConfig, LshTermSet};
use crate::neighbors::pairs_within_distance;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_MIN_OVERLAP: usize = 2;
const PARTITION: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub index_image: ImageId,
    pub overlap: u32,
    pub jaccard: f64,
}

/// Per-query hit lists ordered by `(overlap desc, index_image asc)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchResultBatch {
    results: BTreeMap<ImageId, Vec<SearchHit>>,
}

impl SearchResultBatch {
    pub fn get(&self, query: ImageId) -> Option<&[SearchHit]> {
        self.results.get(&query).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &[SearchHit])> {
        self.results.iter().map(|(q, h)| (*q, h.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn total_hits(&self) -> usize {
        self.results.values().map(Vec::len).sum()
    }

    pub fn insert(&mut self, query: ImageId, hits: Vec<SearchHit>) {
        self.results.insert(query, hits);
    }

    /// Unordered `(min, max)` id pairs over all hits.
    pub fn pair_set(&self) -> HashSet<(ImageId, ImageId)> {
        self.iter()
            .flat_map(|(q, hits)| {
                hits.iter().map(move |h| {
                    let i = h.index_image;
                    if q < i {
                        (q, i)
                    } else {
                        (i, q)
                    }
                })
            })
            .collect()
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for (q, hits) in self.iter() {
            for h in hits {
                writeln!(w, "{}\t{}\t{}\t{}", q, h.index_image, h.overlap, h.jaccard)?;
            }
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| self.write_tsv(w))
    }

    /// Reads hits back; queries without hits are not represented in the TSV.
    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut batch = SearchResultBatch::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::format("hits tsv", format!("line {}: expected 4 fields", n + 1)));
            }
            let bad = |_| Error::format("hits tsv", format!("line {}", n + 1));
            let hit = SearchHit {
                index_image: f[1].parse()?,
                overlap: f[2].parse().map_err(bad)?,
                jaccard: f[3].parse().map_err(|_| Error::format("hits tsv", format!("line {}", n + 1)))?,
            };
            batch.results.entry(f[0].parse()?).or_default().push(hit);
        }
        Ok(batch)
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        Self::read_tsv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub fn batch_search(
    queries: &[LshTermSet],
    index: &PostingIndex,
    k: usize,
    min_overlap: usize,
) -> Result<SearchResultBatch> {
    if k == 0 || min_overlap == 0 {
        return Err(Error::Data("k and min_overlap must be at least 1".into()));
    }
    let fp = index.config().fingerprint();
    if queries.iter().any(|q| q.config_fingerprint() != fp) {
        return Err(Error::Incompatible);
    }
    let term_count = index.config().term_count();
    let parts = queries
        .par_chunks(PARTITION)
        .map(|chunk| search_partition(chunk, index, k, min_overlap, term_count))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = SearchResultBatch::default();
    for (q, hits) in parts.into_iter().flatten() {
        if batch.results.insert(q, hits).is_some() {
            return Err(Error::Data(format!("query {q} appears twice")));
        }
    }
    Ok(batch)
}

fn search_partition(
    chunk: &[LshTermSet],
    index: &PostingIndex,
    k: usize,
    min_overlap: usize,
    term_count: usize,
) -> Result<Vec<(ImageId, Vec<SearchHit>)>> {
    // query-side inverted index: (term, query position)
    let mut query_terms: Vec<(u32, u32)> = chunk
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| q.terms().iter().map(move |&t| (t, qi as u32)))
        .collect();
    query_terms.sort_unstable();

    // join with the index postings; each query collects List[List[dense id]]
    let mut seen: Vec<Vec<u32>> = vec![Vec::new(); chunk.len()];
    let postings = index.postings();
    let mut scratch = Vec::new();
    let (mut qi, mut pi) = (0, 0);
    while qi < query_terms.len() && pi < postings.len() {
        let term = query_terms[qi].0;
        match postings[pi].term.cmp(&term) {
            std::cmp::Ordering::Less => {
                pi += postings[pi..].partition_point(|p| p.term < term);
            }
            std::cmp::Ordering::Greater => {
                qi += query_terms[qi..].partition_point(|&(t, _)| t < postings[pi].term);
            }
            std::cmp::Ordering::Equal => {
                scratch.clear();
                postings[pi].decode_into(&mut scratch)?;
                while qi < query_terms.len() && query_terms[qi].0 == term {
                    seen[query_terms[qi].1 as usize].extend_from_slice(&scratch);
                    qi += 1;
                }
                pi += 1;
            }
        }
    }

    // merge List[List[id]] into TopK(id, overlap)
    let dict = index.dictionary();
    Ok(chunk
        .iter()
        .zip(seen)
        .map(|(q, mut ids)| {
            let own = dict.to_dense(q.image_id);
            ids.sort_unstable();
            let mut hits = Vec::new();
            let mut i = 0;
            while i < ids.len() {
                let id = ids[i];
                let run = ids[i..].partition_point(|&x| x == id);
                i += run;
                if run >= min_overlap && Some(id) != own {
                    hits.push(SearchHit {
                        index_image: dict.to_external(id),
                        overlap: run as u32,
                        jaccard: jaccard_from_overlap(run, term_count),
                    });
                }
            }
            rank_hits(&mut hits, k);
            (q.image_id, hits)
        })
        .collect())
}

pub(crate) fn rank_hits(hits: &mut Vec<SearchHit>, k: usize) {
    hits.sort_by(|a, b| {
        b.overlap
            .cmp(&a.overlap)
            .then(a.index_image.cmp(&b.index_image))
    });
    hits.truncate(k);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallAtDistance {
    pub ground_truth_pairs: usize,
    pub retrieved: usize,
    pub recall: f64,
}

/// Fraction of image pairs within `distance` hamming bits (over all `d` bits)
/// that an all-vs-all batch search retrieves in either direction. A corpus with
/// no such pairs has recall 1.
pub fn recall_at_distance(
    corpus: &[BinaryEmbedding],
    config: &LshConfig,
    k: usize,
    min_overlap: usize,
    distance: u32,
) -> Result<RecallAtDistance> {
    let truth = pairs_within_distance(corpus, distance)?;
    let sets = derive_all(corpus, config)?;
    let index = build_index(&sets, config, false)?;
    let hits = batch_search(&sets, &index, k, min_overlap)?;
    Ok(recall_against(&truth, &hits))
}

pub fn recall_against(truth: &[(ImageId, ImageId)], hits: &SearchResultBatch) -> RecallAtDistance {
    let found = hits.pair_set();
    let retrieved = truth
        .iter()
        .filter(|&&(a, b)| found.contains(&if a < b { (a, b) } else { (b, a) }))
        .count();
    RecallAtDistance {
        ground_truth_pairs: truth.len(),
        retrieved,
        recall: if truth.is_empty() {
            1.0
        } else {
            retrieved as f64 / truth.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::BitVector;
    use crate::lsh::{derive_terms, jaccard_overlap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_corpus(n: usize, seed: u64, d: usize) -> Vec<BinaryEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let bits: Vec<bool> = (0..d).map(|_| rng.gen()).collect();
                BinaryEmbedding::new(ImageId::new(i as u64), BitVector::from_bools(&bits))
            })
            .collect()
    }

    #[test]
    fn identical_query_ranks_first() {
        let cfg = LshConfig::default();
        let corpus = random_corpus(50, 1, 256);
        let sets = derive_all(&corpus, &cfg).unwrap();
        let idx = build_index(&sets, &cfg, false).unwrap();
        let mut q = corpus[17].clone();
        q.image_id = ImageId::new(1000);
        let qs = vec![derive_terms(&q, &cfg).unwrap()];
        let res = batch_search(&qs, &idx, 5, 2).unwrap();
        let top = res.get(ImageId::new(1000)).unwrap()[0];
        assert_eq!(top.index_image, ImageId::new(17));
        assert_eq!(top.overlap, 12);
        assert_eq!(top.jaccard, 1.0);
    }

    #[test]
    fn disjoint_query_gets_empty_list() {
        let cfg = LshConfig::leading_bits(8, 8, 4).unwrap();
        let a = BinaryEmbedding::new(ImageId::new(1), BitVector::from_bit_str("00000000").unwrap());
        let b = BinaryEmbedding::new(ImageId::new(2), BitVector::from_bit_str("11111111").unwrap());
        let idx = build_index(&[derive_terms(&a, &cfg).unwrap()], &cfg, false).unwrap();
        let res = batch_search(&[derive_terms(&b, &cfg).unwrap()], &idx, 3, 1).unwrap();
        assert_eq!(res.get(ImageId::new(2)), Some(&[][..]));
    }

    #[test]
    fn self_is_excluded() {
        let cfg = LshConfig::default();
        let corpus = random_corpus(20, 2, 256);
        let sets = derive_all(&corpus, &cfg).unwrap();
        let idx = build_index(&sets, &cfg, false).unwrap();
        let res = batch_search(&sets, &idx, 20, 1).unwrap();
        for (q, hits) in res.iter() {
            assert!(hits.iter().all(|h| h.index_image != q));
        }
    }

    #[test]
    fn rejects_bad_parameters_and_configs() {
        let cfg = LshConfig::default();
        let sets = derive_all(&random_corpus(3, 3, 256), &cfg).unwrap();
        let idx = build_index(&sets, &cfg, false).unwrap();
        assert!(batch_search(&sets, &idx, 0, 1).is_err());
        let other = LshConfig::leading_bits(256, 144, 8).unwrap();
        let foreign = derive_all(&random_corpus(3, 3, 256), &other).unwrap();
        assert!(matches!(batch_search(&foreign, &idx, 3, 1), Err(Error::Incompatible)));
    }

    /// O(Q·N) pairwise oracle, untruncated.
    fn brute_force(
        queries: &[LshTermSet],
        indexed: &[LshTermSet],
        min_overlap: usize,
    ) -> BTreeMap<ImageId, Vec<(ImageId, u32)>> {
        queries
            .iter()
            .map(|q| {
                let mut hits: Vec<(ImageId, u32)> = indexed
                    .iter()
                    .filter(|i| i.image_id != q.image_id)
                    .filter_map(|i| {
                        let o = jaccard_overlap(q, i).unwrap().count;
                        (o >= min_overlap).then_some((i.image_id, o as u32))
                    })
                    .collect();
                hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                (q.image_id, hits)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_with_truncation() {
        // small groups so that overlaps span the whole range
        let cfg = LshConfig::leading_bits(64, 48, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut corpus = random_corpus(2000, 4, 64);
        for e in corpus.iter_mut().skip(1000) {
            for _ in 0..rng.gen_range(0..6) {
                e.bits.flip(rng.gen_range(0..64));
            }
        }
        for i in 1000..2000 {
            let src = corpus[i - 1000].bits.clone();
            let mut b = src;
            for _ in 0..rng.gen_range(0..10) {
                b.flip(rng.gen_range(0..64));
            }
            corpus[i].bits = b;
        }
        let sets = derive_all(&corpus, &cfg).unwrap();
        let idx = build_index(&sets[..1500], &cfg, false).unwrap();
        let queries = &sets[900..];
        let oracle = brute_force(queries, &sets[..1500], 2);
        let res = batch_search(queries, &idx, 7, 2).unwrap();
        assert_eq!(res.len(), queries.len());
        for (q, expected) in &oracle {
            let got: Vec<(ImageId, u32)> = res
                .get(*q)
                .unwrap()
                .iter()
                .map(|h| (h.index_image, h.overlap))
                .collect();
            let want: Vec<_> = expected.iter().take(7).copied().collect();
            assert_eq!(got, want, "query {q}");
        }
    }

    #[test]
    fn raising_min_overlap_never_adds_hits() {
        let cfg = LshConfig::leading_bits(32, 32, 2).unwrap();
        let corpus = random_corpus(300, 5, 32);
        let sets = derive_all(&corpus, &cfg).unwrap();
        let idx = build_index(&sets, &cfg, false).unwrap();
        let mut prev = batch_search(&sets, &idx, usize::MAX, 1).unwrap().pair_set();
        for m in 2..=16 {
            let cur = batch_search(&sets, &idx, usize::MAX, m).unwrap().pair_set();
            assert!(cur.is_subset(&prev));
            prev = cur;
        }
    }

    #[test]
    fn tsv_round_trip() {
        let cfg = LshConfig::default();
        let corpus = random_corpus(200, 6, 256);
        let sets = derive_all(&corpus, &cfg).unwrap();
        let idx = build_index(&sets, &cfg, false).unwrap();
        let res = batch_search(&sets, &idx, 5, 1).unwrap();
        let mut buf = Vec::new();
        res.write_tsv(&mut buf).unwrap();
        let back = SearchResultBatch::read_tsv(buf.as_slice()).unwrap();
        let nonempty: Vec<_> = res.iter().filter(|(_, h)| !h.is_empty()).collect();
        assert_eq!(back.iter().collect::<Vec<_>>(), nonempty);
    }

    #[test]
    fn recall_at_zero_distance_is_one() {
        let mut corpus = random_corpus(100, 8, 256);
        for i in 0..20 {
            let mut copy = corpus[i].clone();
            copy.image_id = ImageId::new(1000 + i as u64);
            corpus.push(copy);
        }
        let r = recall_at_distance(&corpus, &LshConfig::default(), 20, 2, 0).unwrap();
        assert_eq!(r.ground_truth_pairs, 20);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn recall_at_full_distance_counts_any_shared_term() {
        let cfg = LshConfig::leading_bits(16, 16, 2).unwrap();
        let corpus = random_corpus(60, 10, 16);
        let r = recall_at_distance(&corpus, &cfg, usize::MAX, 1, 16).unwrap();
        let sets = derive_all(&corpus, &cfg).unwrap();
        let mut sharing = 0;
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                if jaccard_overlap(&sets[i], &sets[j]).unwrap().count >= 1 {
                    sharing += 1;
                }
            }
        }
        assert_eq!(r.ground_truth_pairs, 60 * 59 / 2);
        assert_eq!(r.retrieved, sharing);
    }
}
