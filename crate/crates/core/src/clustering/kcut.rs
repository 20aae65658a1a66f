use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ClusterId, NearDupeCluster};
use crate::embedding::{BinaryEmbedding, Embeddings, ImageId};
use crate::error::{Error, Result};
use crate::scorer::PairScorer;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Data(format!("threshold {t} not in (0, 1)")))
    }
}

fn embeddings_of<'a>(ids: &[ImageId], embeddings: &'a Embeddings) -> Result<Vec<&'a BinaryEmbedding>> {
    ids.iter().map(|&i| embeddings.require(i)).collect()
}

/// Splits each group by repeatedly drawing a random pivot and finalizing the
/// pivot together with every remaining member that scores at least `t` against
/// it. The residual goes back to the work set until nothing is left, so the
/// output partitions the input and every member passes against its head (the
/// pivot). Each group draws from its own generator keyed by `seed` and the
/// group's smallest id, so the result does not depend on scheduling.
pub fn k_cut<S: PairScorer + ?Sized>(
    groups: &[Vec<ImageId>],
    scorer: &S,
    embeddings: &Embeddings,
    t: f64,
    seed: u64,
) -> Result<Vec<NearDupeCluster>> {
    check_threshold(t)?;
    let per_group = groups
        .par_iter()
        .map(|g| cut_group(g, scorer, embeddings, t, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<NearDupeCluster> = per_group.into_iter().flatten().collect();
    out.sort_by_key(|c| c.id);
    Ok(out)
}

fn cut_group<S: PairScorer + ?Sized>(
    group: &[ImageId],
    scorer: &S,
    embeddings: &Embeddings,
    t: f64,
    seed: u64,
) -> Result<Vec<NearDupeCluster>> {
    let mut work: Vec<ImageId> = group.to_vec();
    work.sort_unstable();
    work.dedup();
    let Some(&first) = work.first() else {
        return Ok(Vec::new());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(first.get())));
    let mut out = Vec::new();
    while !work.is_empty() {
        let h = work[rng.gen_range(0..work.len())];
        let head = embeddings.require(h)?;
        let mut members = Vec::new();
        let mut residual = Vec::new();
        for &m in &work {
            if m == h {
                continue;
            }
            let s = scorer.score(head, embeddings.require(m)?);
            if s >= t {
                members.push((m, s));
            } else {
                residual.push(m);
            }
        }
        let min = members.iter().map(|m| m.0).chain([h]).min().expect("non-empty");
        out.push(NearDupeCluster { id: ClusterId(min.get()), head: h, members });
        work = residual;
    }
    Ok(out)
}

fn score_matrix<S: PairScorer + ?Sized>(embs: &[&BinaryEmbedding], scorer: &S) -> Vec<Vec<f64>> {
    let n = embs.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = scorer.score(embs[i], embs[j]);
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

/// Position of the largest row sum among `candidates`, ties to the earliest.
fn medoid(matrix: &[Vec<f64>], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let sum: f64 = (0..matrix.len()).filter(|&j| j != i).map(|j| matrix[i][j]).sum();
        if best.is_none_or(|(_, b)| sum > b) {
            best = Some((i, sum));
        }
    }
    best.map(|b| b.0)
}

/// The member maximizing the sum of scores to all other members; ties go to
/// the smallest id.
pub fn choose_head<S: PairScorer + ?Sized>(
    members: &[ImageId],
    scorer: &S,
    embeddings: &Embeddings,
) -> Result<ImageId> {
    let mut ids = members.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Data("cannot choose a head for an empty cluster".into()));
    }
    let matrix = score_matrix(&embeddings_of(&ids, embeddings)?, scorer);
    Ok(ids[medoid(&matrix, 0..ids.len()).expect("non-empty")])
}

/// Re-elects the head as the medoid among members that score at least `t`
/// against every other member, then rescores members against it. Restricting
/// the choice keeps every stored score at or above `t`; a cluster with no such
/// member keeps its head.
pub fn elect_head<S: PairScorer + ?Sized>(
    cluster: &NearDupeCluster,
    scorer: &S,
    embeddings: &Embeddings,
    t: f64,
) -> Result<NearDupeCluster> {
    if cluster.members.is_empty() {
        return Ok(cluster.clone());
    }
    let mut ids: Vec<ImageId> = cluster.images().collect();
    ids.sort_unstable();
    let embs = embeddings_of(&ids, embeddings)?;
    let matrix = score_matrix(&embs, scorer);
    let n = ids.len();
    let eligible = (0..n).filter(|&i| (0..n).all(|j| j == i || matrix[i][j] >= t));
    let Some(h) = medoid(&matrix, eligible) else {
        return Ok(cluster.clone());
    };
    let members = (0..n).filter(|&j| j != h).map(|j| (ids[j], matrix[h][j])).collect();
    Ok(NearDupeCluster { id: cluster.id, head: ids[h], members })
}

pub fn elect_heads<S: PairScorer + ?Sized>(
    clusters: &[NearDupeCluster],
    scorer: &S,
    embeddings: &Embeddings,
    t: f64,
) -> Result<Vec<NearDupeCluster>> {
    clusters
        .par_iter()
        .map(|c| elect_head(c, scorer, embeddings, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::check_partition;
    use crate::embedding::BitVector;
    use crate::scorer::{FnScorer, HammingScorer};
    use proptest::prelude::*;
    use rand::Rng;

    fn id(v: u64) -> ImageId {
        ImageId::new(v)
    }

    /// Embeddings whose hamming distance is |i - j| * step: a path where only
    /// near neighbours are similar.
    fn path(n: usize, step: usize) -> Embeddings {
        let d = 64.max(n * step + 8);
        let mut set = Embeddings::new(d);
        for i in 0..n {
            let mut b = BitVector::zeros(d);
            for k in 0..i * step {
                b.set(k, true);
            }
            set.push(BinaryEmbedding::new(id(i as u64 + 1), b)).unwrap();
        }
        set
    }

    fn verify(clusters: &[NearDupeCluster], input: &[ImageId], scorer: &impl PairScorer, e: &Embeddings, t: f64) {
        check_partition(clusters).unwrap();
        let mut all: Vec<ImageId> = clusters.iter().flat_map(|c| c.images()).collect();
        all.sort_unstable();
        let mut want = input.to_vec();
        want.sort_unstable();
        assert_eq!(all, want);
        for c in clusters {
            for &(m, s) in &c.members {
                let fresh = scorer.score_ids(e, c.head, m).unwrap();
                assert_eq!(fresh, s);
                assert!(fresh >= t);
            }
        }
    }

    #[test]
    fn coherent_group_stays_whole() {
        let e = path(5, 1);
        let ids: Vec<ImageId> = e.ids().collect();
        let scorer = HammingScorer::new(10.0, 1.0);
        let out = k_cut(&[ids.clone()], &scorer, &e, 0.5, 3).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 5);
        assert_eq!(out[0].id, ClusterId(1));
    }

    #[test]
    fn chain_endpoints_are_separated() {
        // adjacent items at distance 2 pass, anything at distance >= 4 fails
        let e = path(12, 2);
        let ids: Vec<ImageId> = e.ids().collect();
        let scorer = HammingScorer::new(3.0, 4.0);
        for seed in 0..20 {
            let out = k_cut(&[ids.clone()], &scorer, &e, 0.5, seed).unwrap();
            verify(&out, &ids, &scorer, &e, 0.5);
            assert!(out.len() >= 4);
            for c in &out {
                let imgs: Vec<ImageId> = c.images().collect();
                assert!(!(imgs.contains(&id(1)) && imgs.contains(&id(12))));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let e = path(30, 1);
        let ids: Vec<ImageId> = e.ids().collect();
        let scorer = HammingScorer::new(4.0, 2.0);
        let a = k_cut(&[ids.clone()], &scorer, &e, 0.5, 9).unwrap();
        let b = k_cut(&[ids.clone()], &scorer, &e, 0.5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_threshold() {
        let e = path(2, 1);
        let s = HammingScorer::new(1.0, 1.0);
        assert!(k_cut(&[], &s, &e, 0.0, 1).is_err());
        assert!(k_cut(&[], &s, &e, 1.0, 1).is_err());
    }

    #[test]
    fn head_choice() {
        let e = path(10, 1);
        let scorer = HammingScorer::new(4.0, 1.0);
        assert_eq!(choose_head(&[id(7)], &scorer, &e).unwrap(), id(7));
        assert!(choose_head(&[], &scorer, &e).is_err());
        let ids: Vec<ImageId> = e.ids().collect();
        // brute-force argmax of score sums
        let mut best = (id(0), f64::MIN);
        for &a in &ids {
            let s: f64 = ids.iter().filter(|&&b| b != a).map(|&b| scorer.score_ids(&e, a, b).unwrap()).sum();
            if s > best.1 {
                best = (a, s);
            }
        }
        assert_eq!(choose_head(&ids, &scorer, &e).unwrap(), best.0);

        let same = FnScorer(|_: &BinaryEmbedding, _: &BinaryEmbedding| 0.9);
        assert_eq!(choose_head(&[id(5), id(3), id(8)], &same, &e).unwrap(), id(3));
    }

    #[test]
    fn elected_head_keeps_scores_above_threshold() {
        let e = path(9, 1);
        let ids: Vec<ImageId> = e.ids().collect();
        let scorer = HammingScorer::new(5.0, 1.0);
        let t = 0.6;
        for seed in 0..10 {
            let cut = k_cut(&[ids.clone()], &scorer, &e, t, seed).unwrap();
            let elected = elect_heads(&cut, &scorer, &e, t).unwrap();
            verify(&elected, &ids, &scorer, &e, t);
            for (a, b) in cut.iter().zip(&elected) {
                assert_eq!(a.id, b.id);
            }
        }
    }

    proptest! {
        #[test]
        fn planted_blocks_satisfy_postconditions(
            seed in any::<u64>(),
            sizes in proptest::collection::vec(1usize..12, 1..6),
            t in 0.05f64..0.95,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 64;
            let mut set = Embeddings::new(d);
            let mut group = Vec::new();
            let mut next = 1u64;
            for &size in &sizes {
                let base: Vec<bool> = (0..d).map(|_| rng.gen()).collect();
                for _ in 0..size {
                    let mut b = BitVector::from_bools(&base);
                    for _ in 0..rng.gen_range(0..6) {
                        b.flip(rng.gen_range(0..d));
                    }
                    set.push(BinaryEmbedding::new(id(next), b)).unwrap();
                    group.push(id(next));
                    next += 1;
                }
            }
            let scorer = HammingScorer::new(8.0, 0.7);
            let out = k_cut(&[group.clone()], &scorer, &set, t, seed).unwrap();
            verify(&out, &group, &scorer, &set, t);
        }
    }
}
