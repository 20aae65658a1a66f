//! Bit selection and LSH term derivation.
//!
//! A configured subset of embedding bits is read in order and cut into groups of
//! `term_bits` bits. Each group becomes one 32-bit term `(group_index << g) | value`,
//! so two images share a term exactly when they agree on every bit of that group.
//! The Jaccard overlap of two term sets tracks the hamming distance of the
//! selected bits.

use serde::{Deserialize, Serialize};

use crate::embedding::{BinaryEmbedding, ImageId};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_SELECTED: usize = 144;
pub const DEFAULT_TERM_BITS: u8 = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLshConfig", into = "RawLshConfig")]
pub struct LshConfig {
    d: usize,
    selected_bits: Vec<usize>,
    term_bits: u8,
    fingerprint: u64,
}

#[derive(Serialize, Deserialize)]
struct RawLshConfig {
    d: usize,
    selected_bits: Vec<usize>,
    term_bits: u8,
}

impl TryFrom<RawLshConfig> for LshConfig {
    type Error = Error;

    fn try_from(raw: RawLshConfig) -> Result<Self> {
        LshConfig::new(raw.d, raw.selected_bits, raw.term_bits)
    }
}

impl From<LshConfig> for RawLshConfig {
    fn from(c: LshConfig) -> Self {
        RawLshConfig {
            d: c.d,
            selected_bits: c.selected_bits,
            term_bits: c.term_bits,
        }
    }
}

impl LshConfig {
    pub fn new(d: usize, selected_bits: Vec<usize>, term_bits: u8) -> Result<Self> {
        let m = selected_bits.len();
        if d == 0 {
            return Err(Error::InvalidConfig("embedding width must be positive".into()));
        }
        if !(1..=24).contains(&term_bits) {
            return Err(Error::InvalidConfig(format!(
                "term_bits {term_bits} outside 1..=24"
            )));
        }
        let g = term_bits as usize;
        if m == 0 || m % g != 0 {
            return Err(Error::InvalidConfig(format!(
                "{m} selected bits do not split into groups of {g}"
            )));
        }
        if m > d {
            return Err(Error::InvalidConfig(format!("{m} selected bits exceed width {d}")));
        }
        let term_count = m / g;
        if (term_count as u64 - 1) >> (32 - g) != 0 {
            return Err(Error::InvalidConfig(format!(
                "{term_count} groups do not fit a 32-bit term with {g} value bits"
            )));
        }
        let mut seen = vec![false; d];
        for &b in &selected_bits {
            if b >= d {
                return Err(Error::InvalidConfig(format!("bit index {b} >= width {d}")));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(Error::InvalidConfig(format!("bit index {b} selected twice")));
            }
        }
        let fingerprint = fingerprint(d, &selected_bits, term_bits);
        Ok(LshConfig {
            d,
            selected_bits,
            term_bits,
            fingerprint,
        })
    }

    /// Selects bits `0..m` in order.
    pub fn leading_bits(d: usize, m: usize, term_bits: u8) -> Result<Self> {
        Self::new(d, (0..m).collect(), term_bits)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn selected_bits(&self) -> &[usize] {
        &self.selected_bits
    }

    pub fn term_bits(&self) -> u8 {
        self.term_bits
    }

    pub fn term_count(&self) -> usize {
        self.selected_bits.len() / self.term_bits as usize
    }

    /// Identity of the configuration; term sets built with different fingerprints
    /// are not comparable.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

impl Default for LshConfig {
    fn default() -> Self {
        Self::leading_bits(DEFAULT_DIM, DEFAULT_SELECTED, DEFAULT_TERM_BITS)
            .expect("default LSH configuration is valid")
    }
}

fn fingerprint(d: usize, bits: &[usize], g: u8) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(d as u64);
    feed(g as u64);
    feed(bits.len() as u64);
    for &b in bits {
        feed(b as u64);
    }
    h
}

/// Returns `m` bit indices ranked by descending empirical variance over `sample`,
/// lower index first on ties.
pub fn select_bits(sample: &[BinaryEmbedding], d: usize, m: usize) -> Result<Vec<usize>> {
    if sample.is_empty() {
        return Err(Error::Selection("empty sample".into()));
    }
    if m > d {
        return Err(Error::Selection(format!("cannot select {m} of {d} bits")));
    }
    let mut ones = vec![0u64; d];
    for e in sample {
        if e.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: e.dim(),
            });
        }
        for i in e.bits.ones() {
            ones[i] += 1;
        }
    }
    let n = sample.len() as u64;
    // Bernoulli variance is c(n-c)/n^2; the integer numerator ranks exactly.
    let mut ranked: Vec<(u128, usize)> = ones
        .iter()
        .enumerate()
        .map(|(i, &c)| (c as u128 * (n - c) as u128, i))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(m).map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LshTermSet {
    pub image_id: ImageId,
    config: u64,
    terms: Vec<u32>,
}

impl LshTermSet {
    /// Sorted terms, one per group.
    pub fn terms(&self) -> &[u32] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn config_fingerprint(&self) -> u64 {
        self.config
    }
}

pub fn derive_terms(embedding: &BinaryEmbedding, config: &LshConfig) -> Result<LshTermSet> {
    if embedding.dim() != config.d {
        return Err(Error::Dimension {
            expected: config.d,
            actual: embedding.dim(),
        });
    }
    let g = config.term_bits as usize;
    let terms = config
        .selected_bits
        .chunks_exact(g)
        .enumerate()
        .map(|(group, bits)| {
            let value = bits
                .iter()
                .fold(0u32, |acc, &b| (acc << 1) | embedding.bits.get(b) as u32);
            ((group as u32) << g) | value
        })
        .collect();
    Ok(LshTermSet {
        image_id: embedding.image_id,
        config: config.fingerprint,
        terms,
    })
}

pub fn derive_all(embeddings: &[BinaryEmbedding], config: &LshConfig) -> Result<Vec<LshTermSet>> {
    use rayon::prelude::*;
    embeddings
        .par_iter()
        .map(|e| derive_terms(e, config))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub count: usize,
    pub jaccard: f64,
}

pub fn jaccard_overlap(a: &LshTermSet, b: &LshTermSet) -> Result<Overlap> {
    if a.config != b.config {
        return Err(Error::Incompatible);
    }
    let count = sorted_intersection_len(&a.terms, &b.terms);
    let union = a.terms.len() + b.terms.len() - count;
    let jaccard = if union == 0 {
        0.0
    } else {
        count as f64 / union as f64
    };
    Ok(Overlap { count, jaccard })
}

pub(crate) fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Jaccard of two full term sets that share `overlap` terms.
pub fn jaccard_from_overlap(overlap: usize, term_count: usize) -> f64 {
    overlap as f64 / (2 * term_count - overlap) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::BitVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(id: u64, bits: &str) -> BinaryEmbedding {
        BinaryEmbedding::new(ImageId::new(id), BitVector::from_bit_str(bits).unwrap())
    }

    fn random_emb(rng: &mut ChaCha8Rng, id: u64, d: usize) -> BinaryEmbedding {
        let bits: Vec<bool> = (0..d).map(|_| rng.gen()).collect();
        BinaryEmbedding::new(ImageId::new(id), BitVector::from_bools(&bits))
    }

    #[test]
    fn config_validation() {
        assert!(LshConfig::new(16, vec![0, 1, 2], 2).is_err());
        assert!(LshConfig::new(16, vec![0, 16], 2).is_err());
        assert!(LshConfig::new(16, vec![3, 3], 2).is_err());
        assert!(LshConfig::new(16, vec![0, 1], 0).is_err());
        assert!(LshConfig::new(64, (0..50).collect(), 25).is_err());
        assert!(LshConfig::new(16, vec![0, 1], 2).is_ok());
        let c = LshConfig::default();
        assert_eq!((c.dim(), c.selected_bits().len(), c.term_count()), (256, 144, 12));
    }

    #[test]
    fn json_uses_flat_fields() {
        let c = LshConfig::new(8, vec![7, 0], 1).unwrap();
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json, serde_json::json!({"d": 8, "selected_bits": [7, 0], "term_bits": 1}));
        let back: LshConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, c);
        let bad = serde_json::json!({"d": 8, "selected_bits": [9], "term_bits": 1});
        assert!(serde_json::from_value::<LshConfig>(bad).is_err());
    }

    #[test]
    fn select_excludes_constant_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample: Vec<_> = (0..200)
            .map(|i| {
                let mut e = random_emb(&mut rng, i, 16);
                e.bits.set(3, true);
                e
            })
            .collect();
        let picked = select_bits(&sample, 16, 15).unwrap();
        assert_eq!(picked.len(), 15);
        assert!(!picked.contains(&3));
    }

    #[test]
    fn select_ties_prefer_lower_index() {
        let sample = vec![emb(1, "10110010"), emb(2, "10110010")];
        assert_eq!(select_bits(&sample, 8, 5).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn select_errors() {
        assert!(matches!(select_bits(&[], 8, 4), Err(Error::Selection(_))));
        assert!(select_bits(&[emb(1, "00000000")], 8, 9).is_err());
    }

    #[test]
    fn select_matches_two_pass_variance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Skew bit probabilities so variances differ.
        let probs: Vec<f64> = (0..256).map(|_| rng.gen_range(0.02..0.98)).collect();
        let sample: Vec<_> = (0..1000)
            .map(|i| {
                let bits: Vec<bool> = probs.iter().map(|&p| rng.gen_bool(p)).collect();
                BinaryEmbedding::new(ImageId::new(i), BitVector::from_bools(&bits))
            })
            .collect();
        let n = sample.len() as f64;
        let mut oracle: Vec<(i64, usize)> = (0..256)
            .map(|b| {
                let xs: Vec<f64> = sample.iter().map(|e| e.bits.get(b) as u8 as f64).collect();
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                ((var * 1e9).round() as i64, b)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = oracle.iter().take(144).map(|&(_, b)| b).collect();
        assert_eq!(select_bits(&sample, 256, 144).unwrap(), expected);
    }

    #[test]
    fn derive_terms_examples() {
        let cfg = LshConfig::leading_bits(8, 8, 4).unwrap();
        let zeros = derive_terms(&emb(1, "0000 0000"), &cfg).unwrap();
        assert_eq!(zeros.terms(), &[0, 16]);
        let ones = derive_terms(&emb(1, "1111 1111"), &cfg).unwrap();
        assert_eq!(ones.terms(), &[15, 31]);

        let cfg = LshConfig::leading_bits(12, 12, 4).unwrap();
        let t = derive_terms(&emb(1, "1010 0001 1100"), &cfg).unwrap();
        // hand chunking: 1010=10, 0001=1, 1100=12; tags 0,1,2 shifted by 4
        assert_eq!(t.terms(), &[10, 16 + 1, 32 + 12]);
    }

    #[test]
    fn derive_terms_follows_selection_order() {
        let cfg = LshConfig::new(4, vec![3, 0], 2).unwrap();
        let t = derive_terms(&emb(1, "0001"), &cfg).unwrap();
        assert_eq!(t.terms(), &[0b10]);
    }

    #[test]
    fn derive_rejects_width_mismatch() {
        let cfg = LshConfig::leading_bits(16, 8, 4).unwrap();
        assert!(derive_terms(&emb(1, "0000 0000"), &cfg).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let cfg = LshConfig::leading_bits(48, 48, 4).unwrap();
        let a = derive_terms(&emb(1, &"0".repeat(48)), &cfg).unwrap();
        assert_eq!(jaccard_overlap(&a, &a).unwrap(), Overlap { count: 12, jaccard: 1.0 });
        let b = derive_terms(&emb(2, &"1".repeat(48)), &cfg).unwrap();
        assert_eq!(jaccard_overlap(&a, &b).unwrap(), Overlap { count: 0, jaccard: 0.0 });
        let half = format!("{}{}", "0".repeat(24), "1".repeat(24));
        let c = derive_terms(&emb(3, &half), &cfg).unwrap();
        let o = jaccard_overlap(&a, &c).unwrap();
        // set-intersection oracle
        let shared = a.terms().iter().filter(|t| c.terms().contains(t)).count();
        assert_eq!(o.count, shared);
        assert_eq!(o.count, 6);
        assert!((o.jaccard - 6.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn jaccard_rejects_mixed_configs() {
        let c1 = LshConfig::leading_bits(8, 8, 4).unwrap();
        let c2 = LshConfig::leading_bits(8, 8, 2).unwrap();
        let e = emb(1, "00000000");
        let a = derive_terms(&e, &c1).unwrap();
        let b = derive_terms(&e, &c2).unwrap();
        assert!(matches!(jaccard_overlap(&a, &b), Err(Error::Incompatible)));
    }

    fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                let avg = (i + j) as f64 / 2.0 + 1.0;
                for k in i..=j {
                    r[idx[k]] = avg;
                }
                i = j + 1;
            }
            r
        }
        let (rx, ry) = (ranks(xs), ranks(ys));
        let n = xs.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn jaccard_tracks_hamming_similarity() {
        let cfg = LshConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sim = Vec::new();
        let mut jac = Vec::new();
        for i in 0..10_000u64 {
            let a = random_emb(&mut rng, 2 * i, 256);
            let mut b = a.clone();
            b.image_id = ImageId::new(2 * i + 1);
            // spread distances over the whole range
            let flips = rng.gen_range(0..=128);
            for _ in 0..flips {
                b.bits.flip(rng.gen_range(0..256));
            }
            let h = cfg
                .selected_bits()
                .iter()
                .filter(|&&s| a.bits.get(s) != b.bits.get(s))
                .count();
            sim.push(1.0 - h as f64 / 144.0);
            let o = jaccard_overlap(&derive_terms(&a, &cfg).unwrap(), &derive_terms(&b, &cfg).unwrap()).unwrap();
            jac.push(o.jaccard);
        }
        let rho = spearman(&sim, &jac);
        assert!(rho > 0.8, "spearman {rho}");
    }

    proptest! {
        #[test]
        fn flipping_one_selected_bit_changes_one_term(seed in any::<u64>(), pick in 0usize..144) {
            let cfg = LshConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_emb(&mut rng, 1, 256);
            let mut b = a.clone();
            b.bits.flip(cfg.selected_bits()[pick]);
            let ta = derive_terms(&a, &cfg).unwrap();
            let tb = derive_terms(&b, &cfg).unwrap();
            prop_assert_eq!(jaccard_overlap(&ta, &tb).unwrap().count, cfg.term_count() - 1);
            prop_assert_eq!(derive_terms(&a, &cfg).unwrap(), ta);
        }

        #[test]
        fn groups_never_collide(seed in any::<u64>(), g in 1u8..=8) {
            let cfg = LshConfig::leading_bits(64, 8 * g as usize, g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = derive_terms(&random_emb(&mut rng, 1, 64), &cfg).unwrap();
            let groups: Vec<u32> = t.terms().iter().map(|x| x >> g).collect();
            prop_assert_eq!(groups, (0..8).collect::<Vec<u32>>());
        }
    }
}
