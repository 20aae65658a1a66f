//! Synthetic corpora with planted near-duplicates and known ground truth.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{read_embeddings, write_embeddings, BinaryEmbedding, BitVector, Embeddings};
use crate::embedding::ImageId;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

/// Number of duplicates planted per base image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DupesDistribution {
    Fixed { count: usize },
    /// `P(k) ∝ (k + 1)^-exponent` for `k` in `0..=max`.
    PowerLaw { exponent: f64, max: usize },
}

impl Default for DupesDistribution {
    fn default() -> Self {
        DupesDistribution::PowerLaw { exponent: 2.0, max: 20 }
    }
}

impl DupesDistribution {
    /// Probability of each duplicate count, indexed by count.
    pub fn pmf(&self) -> Vec<f64> {
        match *self {
            DupesDistribution::Fixed { count } => {
                let mut p = vec![0.0; count + 1];
                p[count] = 1.0;
                p
            }
            DupesDistribution::PowerLaw { exponent, max } => {
                let w: Vec<f64> = (0..=max).map(|k| ((k + 1) as f64).powf(-exponent)).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.pmf().iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub n_base: usize,
    pub d: usize,
    pub dupes: DupesDistribution,
    /// Each duplicate differs from its source in `flip_min..=flip_max` distinct bits.
    pub flip_min: usize,
    pub flip_max: usize,
    /// Probability that a duplicate is derived from an earlier duplicate of the
    /// same base rather than from the base itself.
    pub chain_fraction: f64,
    /// Bases per family. Bases of one family are derived from a shared root by
    /// `family_spread` flips each: similar images that are not duplicates.
    pub family_size: usize,
    pub family_spread: usize,
    /// Smallest assigned image id.
    pub first_id: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            seed: 42,
            n_base: 1000,
            d: 256,
            dupes: DupesDistribution::default(),
            flip_min: 1,
            flip_max: 12,
            chain_fraction: 0.0,
            family_size: 1,
            family_spread: 0,
            first_id: 1,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("corpus spec: {m}")));
        if self.d == 0 || self.d > u16::MAX as usize {
            return bad(format!("dimension {} out of range", self.d));
        }
        if self.flip_min > self.flip_max {
            return bad(format!("flip_min {} > flip_max {}", self.flip_min, self.flip_max));
        }
        // random pairs sit near d/2; duplicates must stay well clear of that
        if self.flip_max > self.d / 4 {
            return bad(format!("flip_max {} exceeds d/4", self.flip_max));
        }
        if self.family_size == 0 {
            return bad("family_size must be positive".into());
        }
        if self.family_spread > self.d / 4 {
            return bad(format!("family_spread {} exceeds d/4", self.family_spread));
        }
        if !(0.0..=1.0).contains(&self.chain_fraction) {
            return bad(format!("chain_fraction {} not in [0, 1]", self.chain_fraction));
        }
        if let DupesDistribution::PowerLaw { exponent, .. } = self.dupes {
            if !exponent.is_finite() {
                return bad("non-finite exponent".into());
            }
        }
        Ok(())
    }

    /// Base count that yields roughly `images` images in expectation.
    pub fn n_base_for(&self, images: usize) -> usize {
        ((images as f64) / (1.0 + self.dupes.mean())).round().max(1.0) as usize
    }
}

/// Partition of a corpus into near-duplicate groups, labeled by the smallest
/// member id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    group_of: HashMap<ImageId, u64>,
    groups: BTreeMap<u64, Vec<ImageId>>,
}

impl GroundTruth {
    pub fn from_groups<I>(groups: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<ImageId>>,
    {
        let mut gt = GroundTruth::default();
        for mut members in groups {
            if members.is_empty() {
                continue;
            }
            members.sort_unstable();
            members.dedup();
            let label = members[0].get();
            for &m in &members {
                if gt.group_of.insert(m, label).is_some() {
                    return Err(Error::Data(format!("image {m} appears in two groups")));
                }
            }
            gt.groups.insert(label, members);
        }
        Ok(gt)
    }

    pub fn from_labels(labels: impl IntoIterator<Item = (ImageId, u64)>) -> Result<Self> {
        let mut by_label: BTreeMap<u64, Vec<ImageId>> = BTreeMap::new();
        for (id, label) in labels {
            by_label.entry(label).or_default().push(id);
        }
        Self::from_groups(by_label.into_values())
    }

    pub fn group_of(&self, id: ImageId) -> Option<u64> {
        self.group_of.get(&id).copied()
    }

    pub fn same_group(&self, a: ImageId, b: ImageId) -> bool {
        matches!((self.group_of(a), self.group_of(b)), (Some(x), Some(y)) if x == y)
    }

    pub fn groups(&self) -> impl Iterator<Item = &[ImageId]> {
        self.groups.values().map(Vec::as_slice)
    }

    pub fn labels(&self) -> &HashMap<ImageId, u64> {
        &self.group_of
    }

    pub fn image_count(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Every unordered within-group pair as `(smaller, larger)`, sorted.
    pub fn positive_pairs(&self) -> Vec<(ImageId, ImageId)> {
        let mut out = Vec::new();
        for g in self.groups.values() {
            for (i, &a) in g.iter().enumerate() {
                for &b in &g[i + 1..] {
                    out.push((a, b));
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn positive_pair_count(&self) -> u64 {
        self.groups
            .values()
            .map(|g| (g.len() as u64) * (g.len() as u64 - 1) / 2)
            .sum()
    }

    /// Restricts the partition to the given images.
    pub fn restrict(&self, keep: impl Fn(ImageId) -> bool) -> GroundTruth {
        let groups = self
            .groups
            .values()
            .map(|g| g.iter().copied().filter(|&id| keep(id)).collect::<Vec<_>>());
        GroundTruth::from_groups(groups).expect("subset of a valid partition")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub embeddings: Embeddings,
    pub truth: GroundTruth,
    /// Source image of every planted duplicate.
    pub sources: BTreeMap<ImageId, ImageId>,
}

impl SyntheticCorpus {
    /// Images that are not derived from another duplicate: bases and their
    /// direct duplicates.
    pub fn is_first_generation(&self, id: ImageId) -> bool {
        match self.sources.get(&id) {
            None => true,
            Some(src) => !self.sources.contains_key(src),
        }
    }
}

fn random_bits(rng: &mut ChaCha8Rng, d: usize) -> BitVector {
    let bools: Vec<bool> = (0..d).map(|_| rng.gen()).collect();
    BitVector::from_bools(&bools)
}

/// Generates bases uniformly over bit vectors and plants duplicates by flipping
/// distinct random bits. Image ids are assigned in shuffled order, so group
/// members are not adjacent in id space.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pmf = spec.dupes.pmf();
    let counts = WeightedIndex::new(&pmf).map_err(|e| Error::Data(format!("dupes distribution: {e}")))?;

    // (group, source position or none, bits)
    let mut drafts: Vec<(usize, Option<usize>, BitVector)> = Vec::new();
    let mut root = BitVector::zeros(spec.d);
    for g in 0..spec.n_base {
        let base = if spec.family_size == 1 {
            random_bits(&mut rng, spec.d)
        } else {
            if g % spec.family_size == 0 {
                root = random_bits(&mut rng, spec.d);
            }
            let mut b = root.clone();
            for i in rand::seq::index::sample(&mut rng, spec.d, spec.family_spread) {
                b.flip(i);
            }
            b
        };
        let base_pos = drafts.len();
        drafts.push((g, None, base));
        let n_dupes = counts.sample(&mut rng);
        for j in 0..n_dupes {
            let src = if j > 0 && rng.gen_bool(spec.chain_fraction) {
                base_pos + 1 + rng.gen_range(0..j)
            } else {
                base_pos
            };
            let mut bits = drafts[src].2.clone();
            let k = rng.gen_range(spec.flip_min..=spec.flip_max);
            for i in rand::seq::index::sample(&mut rng, spec.d, k) {
                bits.flip(i);
            }
            drafts.push((g, Some(src), bits));
        }
    }

    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.shuffle(&mut rng);
    let mut id_of = vec![ImageId::new(0); drafts.len()];
    for (rank, &pos) in order.iter().enumerate() {
        id_of[pos] = ImageId::try_from(spec.first_id + rank as u64)?;
    }

    let mut items: Vec<BinaryEmbedding> = Vec::with_capacity(drafts.len());
    let mut groups: Vec<Vec<ImageId>> = vec![Vec::new(); spec.n_base];
    let mut sources = BTreeMap::new();
    for (pos, (g, src, bits)) in drafts.into_iter().enumerate() {
        groups[g].push(id_of[pos]);
        if let Some(s) = src {
            sources.insert(id_of[pos], id_of[s]);
        }
        items.push(BinaryEmbedding::new(id_of[pos], bits));
    }
    items.sort_by_key(|e| e.image_id);
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        embeddings: Embeddings::from_vec(spec.d, items)?,
        truth: GroundTruth::from_groups(groups)?,
        sources,
    })
}

pub const EMBEDDINGS_FILE: &str = "embeddings.ndem";
pub const GROUPS_FILE: &str = "groups.tsv";
pub const SPEC_FILE: &str = "spec.json";

/// Writes `image_id, group_id, source_id` rows; `source_id` is empty for bases.
pub fn write_groups<W: Write>(
    w: &mut W,
    truth: &GroundTruth,
    sources: &BTreeMap<ImageId, ImageId>,
) -> Result<()> {
    let mut rows: Vec<(ImageId, u64)> = truth.labels().iter().map(|(&i, &g)| (i, g)).collect();
    rows.sort_unstable();
    for (id, g) in rows {
        match sources.get(&id) {
            Some(s) => writeln!(w, "{id}\t{g}\t{s}")?,
            None => writeln!(w, "{id}\t{g}\t")?,
        }
    }
    Ok(())
}

pub fn read_groups<R: BufRead>(r: R) -> Result<(GroundTruth, BTreeMap<ImageId, ImageId>)> {
    let mut labels = Vec::new();
    let mut sources = BTreeMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::format("groups file", format!("line {}: {line:?}", n + 1));
        let mut f = line.split('\t');
        let id: ImageId = f.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let g: u64 = f.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if let Some(s) = f.next().filter(|s| !s.is_empty()) {
            sources.insert(id, s.parse().map_err(|_| bad())?);
        }
        labels.push((id, g));
    }
    Ok((GroundTruth::from_labels(labels)?, sources))
}

pub fn save_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_embeddings(&dir.join(EMBEDDINGS_FILE), &corpus.embeddings)?;
    atomic_write(&dir.join(GROUPS_FILE), |w| {
        write_groups(w, &corpus.truth, &corpus.sources)
    })?;
    atomic_write(&dir.join(SPEC_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &corpus.spec)?;
        Ok(writeln!(w)?)
    })
}

/// Loads a corpus directory; the spec file is optional for hand-made corpora.
pub fn load_corpus(dir: &Path) -> Result<SyntheticCorpus> {
    let embeddings = read_embeddings(&dir.join(EMBEDDINGS_FILE))?;
    let (truth, sources) = read_groups(BufReader::new(File::open(dir.join(GROUPS_FILE))?))?;
    for e in &embeddings {
        if truth.group_of(e.image_id).is_none() {
            return Err(Error::Data(format!("image {} has no group", e.image_id)));
        }
    }
    if truth.image_count() != embeddings.len() {
        return Err(Error::Data("groups file lists images without embeddings".into()));
    }
    let spec_path = dir.join(SPEC_FILE);
    let spec = if spec_path.exists() {
        serde_json::from_reader(BufReader::new(File::open(spec_path)?))?
    } else {
        SyntheticCorpusSpec { d: embeddings.dim(), ..Default::default() }
    };
    Ok(SyntheticCorpus { spec, embeddings, truth, sources })
}
