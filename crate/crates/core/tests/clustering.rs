use std::collections::{BTreeMap, HashMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neardup::clustering::{check_partition, choose_head, k_cut, transitive_closure, NearDupeCluster};
use neardup::corpus::{generate_corpus, SyntheticCorpusSpec};
use neardup::scorer::{FnScorer, HammingScorer, PairScorer};
use neardup::{BinaryEmbedding, BitVector, Embeddings, ImageId};

fn union_find_components(edges: &[(u64, u64)]) -> BTreeMap<u64, Vec<u64>> {
    let mut parent: HashMap<u64, u64> = HashMap::new();
    fn find(parent: &mut HashMap<u64, u64>, x: u64) -> u64 {
        let p = *parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let r = find(parent, p);
        parent.insert(x, r);
        r
    }
    for &(a, b) in edges.iter().filter(|e| e.0 != e.1) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent.insert(ra.max(rb), ra.min(rb));
    }
    let nodes: Vec<u64> = parent.keys().copied().collect();
    let mut groups: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for n in nodes {
        let r = find(&mut parent, n);
        groups.entry(r).or_default().push(n);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            (g[0], g)
        })
        .collect()
}

fn closure_by_min(edges: &[(u64, u64)]) -> BTreeMap<u64, Vec<u64>> {
    let ids: Vec<(ImageId, ImageId)> = edges.iter().map(|&(a, b)| (ImageId::new(a), ImageId::new(b))).collect();
    transitive_closure(&ids)
        .into_iter()
        .map(|g| (g.min_image().get(), g.members.iter().map(|m| m.get()).collect()))
        .collect()
}

#[test]
fn random_graph_matches_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(397);
    let nodes: Vec<u64> = (0..10_000).map(|_| rng.gen_range(0..1u64 << 40)).collect();
    let edges: Vec<(u64, u64)> = (0..30_000)
        .map(|_| (nodes[rng.gen_range(0..nodes.len())], nodes[rng.gen_range(0..nodes.len())]))
        .collect();
    assert_eq!(closure_by_min(&edges), union_find_components(&edges));
}

fn random_embeddings(seed: u64, n: usize) -> Embeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<bool> = (0..64).map(|_| rng.gen()).collect();
    let items = (0..n)
        .map(|i| {
            let mut bits = base.clone();
            for _ in 0..rng.gen_range(0..20) {
                let j = rng.gen_range(0..64);
                bits[j] = !bits[j];
            }
            BinaryEmbedding::new(ImageId::new(10 + 7 * i as u64), BitVector::from_bools(&bits))
        })
        .collect();
    Embeddings::from_vec(64, items).unwrap()
}

#[test]
fn ten_member_head_is_the_brute_force_medoid() {
    let scorer = HammingScorer::new(8.0, 0.5);
    for seed in 0..20 {
        let emb = random_embeddings(seed, 10);
        let ids: Vec<ImageId> = emb.ids().collect();
        let mut best: Option<(f64, ImageId)> = None;
        for &i in &ids {
            let total: f64 = ids
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| scorer.score(emb.get(i).unwrap(), emb.get(j).unwrap()))
                .sum();
            if best.is_none_or(|(b, _)| total > b) {
                best = Some((total, i));
            }
        }
        assert_eq!(choose_head(&ids, &scorer, &emb).unwrap(), best.unwrap().1);
    }
}

#[test]
fn kcut_on_corpus_groups_keeps_every_member_above_threshold() {
    let corpus = generate_corpus(&SyntheticCorpusSpec {
        seed: 406,
        n_base: 300,
        flip_max: 24,
        chain_fraction: 0.8,
        ..Default::default()
    })
    .unwrap();
    let scorer = HammingScorer::new(20.0, 0.5);
    let groups: Vec<Vec<ImageId>> = corpus.truth.groups().map(|g| g.to_vec()).collect();
    let clusters = k_cut(&groups, &scorer, &corpus.embeddings, 0.5, 3).unwrap();
    check_partition(&clusters).unwrap();
    assert!(clusters.len() > groups.len(), "long chains should be cut");
    for c in &clusters {
        let head = corpus.embeddings.get(c.head).unwrap();
        for &(m, s) in &c.members {
            assert!(scorer.score(head, corpus.embeddings.get(m).unwrap()) >= 0.5);
            assert!(s >= 0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closure_matches_union_find(edges in proptest::collection::vec((0u64..60, 0u64..60), 0..120)) {
        prop_assert_eq!(closure_by_min(&edges), union_find_components(&edges));
    }

    #[test]
    fn kcut_partitions_each_group(
        seed in any::<u64>(),
        sizes in proptest::collection::vec(1usize..25, 1..6),
        t in 0.05f64..0.95,
    ) {
        let total: usize = sizes.iter().sum();
        let emb = random_embeddings(seed, total);
        let ids: Vec<ImageId> = emb.ids().collect();
        let mut groups = Vec::new();
        let mut rest = &ids[..];
        for s in sizes {
            groups.push(rest[..s].to_vec());
            rest = &rest[s..];
        }
        // arbitrary symmetric scores, not tied to the embeddings
        let scorer = FnScorer(move |a: &BinaryEmbedding, b: &BinaryEmbedding| {
            let (x, y) = (a.image_id.get().min(b.image_id.get()), a.image_id.get().max(b.image_id.get()));
            let h = x.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ y.wrapping_mul(0xc2b2_ae3d_27d4_eb4f) ^ seed;
            (h % 1000) as f64 / 1000.0
        });
        let clusters = k_cut(&groups, &scorer, &emb, t, seed).unwrap();
        check_partition(&clusters).unwrap();
        let all: HashSet<ImageId> = clusters.iter().flat_map(NearDupeCluster::images).collect();
        prop_assert_eq!(all.len(), total);
        for c in &clusters {
            let group = groups.iter().find(|g| g.contains(&c.head)).unwrap();
            for &(m, s) in &c.members {
                prop_assert!(group.contains(&m));
                prop_assert!(s >= t);
                prop_assert_eq!(s, scorer.score(emb.get(c.head).unwrap(), emb.get(m).unwrap()));
            }
        }
        // same seed, same answer
        prop_assert_eq!(k_cut(&groups, &scorer, &emb, t, seed).unwrap(), clusters);
    }
}
