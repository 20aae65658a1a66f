//! Daily-batch updates of a persistent cluster store.
//!
//! New images are matched against existing cluster heads (NvO) and clustered
//! among themselves (NvN). The merge prefers NvO matches: an NvN cluster with
//! any NvO-matched member is folded into an existing cluster, and only
//! unmatched NvN clusters become new clusters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::candidates::{select_candidates, ClusterHeadEntry, VerifiedMatch};
use crate::clustering::{read_clusters_tsv, write_clusters_tsv, ClusterId, NearDupeCluster};
use crate::config::PipelineParams;
use crate::embedding::{read_embeddings, write_embeddings, Embeddings, ImageId};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::index::{build_index, PostingIndex};
use crate::lsh::{derive_all, LshConfig};
use crate::pipeline::run_full;
use crate::scorer::PairScorer;
use crate::search::batch_search;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Matched an existing cluster directly.
    NvO,
    /// Clustered with a new image that matched an existing cluster.
    NvNMapped,
    /// Part of a cluster created by this batch.
    NvNNew,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::NvO => "nvo",
            Provenance::NvNMapped => "nvn-mapped",
            Provenance::NvNNew => "nvn-new",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nvo" => Ok(Provenance::NvO),
            "nvn-mapped" => Ok(Provenance::NvNMapped),
            "nvn-new" => Ok(Provenance::NvNNew),
            _ => Err(Error::format("provenance", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub image: ImageId,
    pub cluster: ClusterId,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalBatch {
    /// Store version after the batch.
    pub batch_id: u64,
    /// One assignment per batch image, ordered by image id.
    pub assignments: Vec<Assignment>,
    pub new_clusters: usize,
}

impl IncrementalBatch {
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for a in &self.assignments {
            writeln!(w, "{}\t{}\t{}", a.image, a.cluster, a.provenance)?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| self.write_tsv(w))
    }
}

#[derive(Debug, Clone)]
pub struct ClusterStore {
    version: u64,
    lsh: LshConfig,
    embeddings: Embeddings,
    clusters: BTreeMap<ClusterId, NearDupeCluster>,
    image_cluster: HashMap<ImageId, ClusterId>,
    /// Members tried after the head, fixed when the cluster is created.
    augmentation: BTreeMap<ClusterId, Vec<(ImageId, f64)>>,
    head_index: PostingIndex,
    index_version: u64,
}

impl ClusterStore {
    pub fn new(lsh: LshConfig) -> Result<Self> {
        let head_index = build_index(&[], &lsh, true)?;
        Ok(ClusterStore {
            version: 0,
            embeddings: Embeddings::new(lsh.dim()),
            lsh,
            clusters: BTreeMap::new(),
            image_cluster: HashMap::new(),
            augmentation: BTreeMap::new(),
            head_index,
            index_version: 0,
        })
    }

    /// Seeds a store from an existing clustering, e.g. a static run.
    pub fn from_clusters(
        lsh: LshConfig,
        clusters: Vec<NearDupeCluster>,
        embeddings: Embeddings,
        k_aug: usize,
    ) -> Result<Self> {
        let mut store = ClusterStore::new(lsh)?;
        if embeddings.dim() != store.lsh.dim() {
            return Err(Error::Dimension { expected: store.lsh.dim(), actual: embeddings.dim() });
        }
        store.embeddings = embeddings;
        for c in clusters {
            store.insert_cluster(c, k_aug)?;
        }
        store.version = 1;
        store.rebuild_index()?;
        store.check()?;
        Ok(store)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn lsh(&self) -> &LshConfig {
        &self.lsh
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    pub fn clusters(&self) -> impl Iterator<Item = &NearDupeCluster> {
        self.clusters.values()
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&NearDupeCluster> {
        self.clusters.get(&id)
    }

    pub fn cluster_of(&self, image: ImageId) -> Option<ClusterId> {
        self.image_cluster.get(&image).copied()
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn image_count(&self) -> usize {
        self.image_cluster.len()
    }

    pub fn augmentation(&self, id: ClusterId) -> &[(ImageId, f64)] {
        self.augmentation.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn head_index(&self) -> &PostingIndex {
        &self.head_index
    }

    /// Image → cluster labels for every stored image.
    pub fn assignment_map(&self) -> HashMap<ImageId, ClusterId> {
        self.image_cluster.clone()
    }

    pub fn head_table(&self) -> HashMap<ImageId, ClusterHeadEntry> {
        self.clusters
            .values()
            .map(|c| {
                let entry = ClusterHeadEntry {
                    cluster: c.id,
                    head: c.head,
                    augmentation: self.augmentation(c.id).to_vec(),
                };
                (c.head, entry)
            })
            .collect()
    }

    fn insert_cluster(&mut self, mut cluster: NearDupeCluster, k_aug: usize) -> Result<()> {
        if self.clusters.contains_key(&cluster.id) {
            return Err(Error::Consistency(format!("cluster {} already exists", cluster.id)));
        }
        for image in cluster.images() {
            if !self.embeddings.contains(image) {
                return Err(Error::Consistency(format!("image {image} has no embedding")));
            }
            if let Some(c) = self.image_cluster.insert(image, cluster.id) {
                return Err(Error::Consistency(format!("image {image} already in cluster {c}")));
            }
        }
        cluster.normalize();
        self.augmentation.insert(cluster.id, cluster.top_members(k_aug));
        self.clusters.insert(cluster.id, cluster);
        Ok(())
    }

    fn rebuild_index(&mut self) -> Result<()> {
        let heads: Vec<_> = self
            .clusters
            .values()
            .map(|c| self.embeddings.require(c.head).cloned())
            .collect::<Result<_>>()?;
        let sets = derive_all(&heads, &self.lsh)?;
        self.head_index = build_index(&sets, &self.lsh, true)?;
        self.index_version = self.version;
        Ok(())
    }

    /// Verifies the reverse index, head index, and embedding coverage.
    pub fn check(&self) -> Result<()> {
        let mut count = 0;
        for c in self.clusters.values() {
            for image in c.images() {
                count += 1;
                if self.image_cluster.get(&image) != Some(&c.id) {
                    return Err(Error::Consistency(format!("reverse index disagrees for {image}")));
                }
                if !self.embeddings.contains(image) {
                    return Err(Error::Consistency(format!("image {image} has no embedding")));
                }
            }
        }
        if count != self.image_cluster.len() {
            return Err(Error::Consistency("reverse index has stale entries".into()));
        }
        if self.index_version != self.version {
            return Err(Error::Consistency(format!(
                "head index is at version {}, store at {}",
                self.index_version, self.version
            )));
        }
        let mut indexed = self.head_index.dictionary().external_ids().to_vec();
        indexed.sort_unstable();
        let mut heads: Vec<ImageId> = self.clusters.values().map(|c| c.head).collect();
        heads.sort_unstable();
        if indexed != heads {
            return Err(Error::Consistency("head index does not match cluster heads".into()));
        }
        Ok(())
    }
}

/// Splits a batch into images the store already holds and fresh ones. A known
/// id must carry the stored embedding.
fn split_known(new: &Embeddings, store: &ClusterStore) -> Result<(Vec<ImageId>, Embeddings)> {
    if !new.is_empty() && new.dim() != store.lsh.dim() {
        return Err(Error::Dimension { expected: store.lsh.dim(), actual: new.dim() });
    }
    let mut known = Vec::new();
    let mut fresh = Embeddings::new(store.lsh.dim());
    for e in new {
        match store.embeddings.get(e.image_id) {
            Some(old) if old.bits != e.bits => {
                return Err(Error::Data(format!(
                    "image {} is already stored with a different embedding",
                    e.image_id
                )))
            }
            Some(_) if store.image_cluster.contains_key(&e.image_id) => known.push(e.image_id),
            _ => fresh.push(e.clone())?,
        }
    }
    Ok((known, fresh))
}

/// New images against existing cluster heads, with candidate augmentation.
/// Images already in the store match their own cluster as exact duplicates of
/// themselves.
pub fn run_nvo<S: PairScorer + ?Sized>(
    new: &Embeddings,
    store: &ClusterStore,
    scorer: &S,
    params: &PipelineParams,
) -> Result<Vec<VerifiedMatch>> {
    if store.index_version != store.version {
        return Err(Error::Consistency(format!(
            "head index is at version {}, store at {}",
            store.index_version, store.version
        )));
    }
    let (known, fresh) = split_known(new, store)?;
    let mut out: Vec<VerifiedMatch> = known
        .iter()
        .map(|&id| {
            let e = store.embeddings.require(id)?;
            Ok(VerifiedMatch {
                query: id,
                cluster: store.image_cluster[&id],
                matched_via: id,
                score: scorer.score(e, e),
            })
        })
        .collect::<Result<_>>()?;
    if fresh.is_empty() || store.clusters.is_empty() {
        out.sort_by_key(|m| m.query);
        return Ok(out);
    }
    let sets = derive_all(fresh.as_slice(), &store.lsh)?;
    let hits = batch_search(&sets, &store.head_index, params.k, params.min_overlap)?;
    let mut lookup = store.embeddings.clone();
    for e in &fresh {
        lookup.push(e.clone())?;
    }
    out.extend(select_candidates(
        &hits,
        &store.head_table(),
        scorer,
        &lookup,
        params.threshold,
        params.k_aug,
    )?);
    out.sort_by_key(|m| m.query);
    Ok(out)
}

/// The static pipeline over the batch alone.
pub fn run_nvn<S: PairScorer + ?Sized>(
    new: &Embeddings,
    lsh: &LshConfig,
    scorer: &S,
    params: &PipelineParams,
) -> Result<Vec<NearDupeCluster>> {
    Ok(run_full(new, lsh, scorer, params)?.clusters)
}

/// Applies one batch. Everything is computed against a copy of the store,
/// which replaces the original only if the whole batch succeeds.
pub fn merge<S: PairScorer + ?Sized>(
    store: &mut ClusterStore,
    new: &Embeddings,
    nvo: &[VerifiedMatch],
    nvn: &[NearDupeCluster],
    scorer: &S,
    params: &PipelineParams,
) -> Result<IncrementalBatch> {
    let (known, fresh) = split_known(new, store)?;
    let mut next = store.clone();
    let mut nvo_of: HashMap<ImageId, &VerifiedMatch> = HashMap::new();
    for m in nvo {
        if !new.contains(m.query) {
            return Err(Error::Data(format!("NvO match for {} outside the batch", m.query)));
        }
        if !store.clusters.contains_key(&m.cluster) {
            return Err(Error::Data(format!("NvO match to unknown cluster {}", m.cluster)));
        }
        if nvo_of.insert(m.query, m).is_some() {
            return Err(Error::Data(format!("two NvO matches for {}", m.query)));
        }
    }
    let mut covered = 0usize;
    for c in nvn {
        for image in c.images() {
            if !fresh.contains(image) {
                return Err(Error::Data(format!("NvN image {image} is not a new batch image")));
            }
            covered += 1;
        }
    }
    if covered != fresh.len() {
        return Err(Error::Data("NvN clusters must partition the new images".into()));
    }

    for e in &fresh {
        next.embeddings.push(e.clone())?;
    }
    let mut assignments: Vec<Assignment> = known
        .iter()
        .map(|&image| Assignment { image, cluster: store.image_cluster[&image], provenance: Provenance::NvO })
        .collect();
    let mut new_clusters = 0;
    for c in nvn {
        let target = c
            .images()
            .filter_map(|i| nvo_of.get(&i))
            .min_by(|a, b| b.score.total_cmp(&a.score).then(a.cluster.cmp(&b.cluster)))
            .map(|m| m.cluster);
        match target {
            Some(target) => {
                for image in c.images() {
                    let (cluster, provenance) = match nvo_of.get(&image) {
                        Some(m) => (m.cluster, Provenance::NvO),
                        None => (target, Provenance::NvNMapped),
                    };
                    next.join(cluster, image, scorer)?;
                    assignments.push(Assignment { image, cluster, provenance });
                }
            }
            None => {
                next.insert_cluster(c.clone(), params.k_aug)?;
                new_clusters += 1;
                assignments.extend(c.images().map(|image| Assignment {
                    image,
                    cluster: c.id,
                    provenance: Provenance::NvNNew,
                }));
            }
        }
    }
    next.version += 1;
    if new_clusters > 0 || store.index_version != store.version {
        next.rebuild_index()?;
    } else {
        next.index_version = next.version;
    }
    assignments.sort_by_key(|a| a.image);
    *store = next;
    Ok(IncrementalBatch { batch_id: store.version, assignments, new_clusters })
}

impl ClusterStore {
    fn join<S: PairScorer + ?Sized>(&mut self, cluster: ClusterId, image: ImageId, scorer: &S) -> Result<()> {
        let c = self
            .clusters
            .get_mut(&cluster)
            .ok_or_else(|| Error::Consistency(format!("no cluster {cluster}")))?;
        let score = scorer.score(self.embeddings.require(image)?, self.embeddings.require(c.head)?);
        c.members.push((image, score));
        c.normalize();
        if let Some(prev) = self.image_cluster.insert(image, cluster) {
            return Err(Error::Consistency(format!("image {image} already in cluster {prev}")));
        }
        Ok(())
    }
}

/// NvO and NvN over one batch followed by the merge. An empty batch leaves the
/// store untouched.
pub fn run_incremental<S: PairScorer + ?Sized>(
    store: &mut ClusterStore,
    new: &Embeddings,
    scorer: &S,
    params: &PipelineParams,
) -> Result<IncrementalBatch> {
    if new.is_empty() {
        return Ok(IncrementalBatch { batch_id: store.version, assignments: Vec::new(), new_clusters: 0 });
    }
    let (_, fresh) = split_known(new, store)?;
    let (nvo, nvn) = rayon::join(
        || run_nvo(new, store, scorer, params).map_err(|e| e.in_stage("nvo")),
        || run_nvn(&fresh, &store.lsh, scorer, params).map_err(|e| e.in_stage("nvn")),
    );
    let (nvo, nvn) = (nvo?, nvn?);
    merge(store, new, &nvo, &nvn, scorer, params).map_err(|e| e.in_stage("merge"))
}

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u64,
    clusters: String,
    augmentation: String,
    heads: String,
    embeddings: String,
}

impl Manifest {
    fn for_version(v: u64) -> Self {
        Manifest {
            version: v,
            clusters: format!("clusters-{v}.tsv"),
            augmentation: format!("augmentation-{v}.tsv"),
            heads: format!("heads-{v}.ndix"),
            embeddings: format!("embeddings-{v}.ndem"),
        }
    }

    fn files(&self) -> [&str; 4] {
        [&self.clusters, &self.augmentation, &self.heads, &self.embeddings]
    }
}

fn versioned(name: &str) -> bool {
    ["clusters-", "augmentation-", "heads-", "embeddings-"]
        .iter()
        .any(|p| name.starts_with(p))
}

impl ClusterStore {
    pub fn exists(dir: &Path) -> bool {
        dir.join(MANIFEST).is_file()
    }

    /// Writes the versioned files, then switches the manifest over to them in
    /// one rename. Files of earlier versions are removed afterwards.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.index_version != self.version {
            return Err(Error::Consistency("refusing to save a store with a stale head index".into()));
        }
        fs::create_dir_all(dir)?;
        let m = Manifest::for_version(self.version);
        let clusters: Vec<NearDupeCluster> = self.clusters.values().cloned().collect();
        atomic_write(&dir.join(&m.clusters), |w| write_clusters_tsv(w, &clusters))?;
        atomic_write(&dir.join(&m.augmentation), |w| {
            for (id, aug) in &self.augmentation {
                for (image, score) in aug {
                    writeln!(w, "{id}\t{image}\t{score}")?;
                }
            }
            Ok(())
        })?;
        self.head_index.save(&dir.join(&m.heads))?;
        write_embeddings(&dir.join(&m.embeddings), &self.embeddings)?;
        atomic_write(&dir.join(MANIFEST), |w| {
            serde_json::to_writer_pretty(&mut *w, &m)?;
            Ok(writeln!(w)?)
        })?;
        let keep = m.files();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if versioned(&name) && !keep.contains(&name.as_str()) {
                let _ = fs::remove_file(dir.join(&name));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
        let expected = Manifest::for_version(m.version);
        if m.files() != expected.files() {
            return Err(Error::Consistency("manifest names files of another version".into()));
        }
        let path = |name: &str| -> PathBuf { dir.join(name) };
        let clusters = read_clusters_tsv(BufReader::new(File::open(path(&m.clusters))?))?;
        let head_index = PostingIndex::load(&path(&m.heads))?;
        let embeddings = read_embeddings(&path(&m.embeddings))?;
        let mut augmentation: BTreeMap<ClusterId, Vec<(ImageId, f64)>> = BTreeMap::new();
        for (n, line) in BufReader::new(File::open(path(&m.augmentation))?).lines().enumerate() {
            let line = line?;
            let bad = || Error::format("augmentation tsv", format!("line {}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let id: ClusterId = f[0].parse()?;
            let image: ImageId = f[1].parse()?;
            let score: f64 = f[2].parse().map_err(|_| bad())?;
            augmentation.entry(id).or_default().push((image, score));
        }

        let lsh = head_index.config().clone();
        let mut store = ClusterStore::new(lsh)?;
        if embeddings.dim() != store.lsh.dim() {
            return Err(Error::Consistency("embedding width differs from the head index".into()));
        }
        store.embeddings = embeddings;
        for c in clusters {
            store.insert_cluster(c, 0)?;
        }
        for (id, aug) in augmentation {
            let c = store
                .clusters
                .get(&id)
                .ok_or_else(|| Error::Consistency(format!("augmentation for unknown cluster {id}")))?;
            if aug.iter().any(|(i, _)| !c.members.iter().any(|m| m.0 == *i)) {
                return Err(Error::Consistency(format!("augmentation of {id} lists a non-member")));
            }
            store.augmentation.insert(id, aug);
        }
        store.version = m.version;
        store.head_index = head_index;
        store.index_version = m.version;
        store.check()?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{BinaryEmbedding, BitVector};
    use crate::scorer::HammingScorer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id(v: u64) -> ImageId {
        ImageId::new(v)
    }

    fn scorer() -> HammingScorer {
        HammingScorer::new(16.0, 0.5)
    }

    fn params() -> PipelineParams {
        PipelineParams::with_threshold(0.5)
    }

    fn random_bits(rng: &mut ChaCha8Rng) -> BitVector {
        let b: Vec<bool> = (0..256).map(|_| rng.gen()).collect();
        BitVector::from_bools(&b)
    }

    fn flipped(b: &BitVector, positions: &[usize]) -> BitVector {
        let mut b = b.clone();
        for &p in positions {
            b.flip(p);
        }
        b
    }

    fn set(items: Vec<(u64, BitVector)>) -> Embeddings {
        let mut e = Embeddings::new(256);
        for (i, b) in items {
            e.push(BinaryEmbedding::new(id(i), b)).unwrap();
        }
        e
    }

    /// Store with clusters {1 (head), 2} and {3}.
    fn seeded() -> (ClusterStore, BitVector, BitVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_bits(&mut rng);
        let b = random_bits(&mut rng);
        let e = set(vec![(1, a.clone()), (2, flipped(&a, &[0, 1])), (3, b.clone())]);
        let clusters = vec![
            NearDupeCluster { id: ClusterId(1), head: id(1), members: vec![(id(2), 0.99)] },
            NearDupeCluster::singleton(id(3)),
        ];
        let store = ClusterStore::from_clusters(LshConfig::default(), clusters, e, 3).unwrap();
        (store, a, b)
    }

    #[test]
    fn nvo_matches_identical_head_and_skips_distant_images() {
        let (store, a, _) = seeded();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let new = set(vec![(10, a.clone()), (11, random_bits(&mut rng))]);
        let m = run_nvo(&new, &store, &scorer(), &params()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].query, m[0].cluster, m[0].matched_via), (id(10), ClusterId(1), id(1)));
    }

    #[test]
    fn stale_index_is_rejected() {
        let (mut store, a, _) = seeded();
        store.index_version = 0;
        let new = set(vec![(10, a)]);
        assert!(matches!(run_nvo(&new, &store, &scorer(), &params()), Err(Error::Consistency(_))));
        assert!(store.check().is_err());
    }

    #[test]
    fn nvn_cluster_follows_member_match() {
        let (mut store, a, _) = seeded();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_bits(&mut rng);
        // Y matches head 1; X is close to Y but not to 1
        let y = flipped(&a, &[10, 11, 12]);
        let xs: Vec<usize> = (100..112).collect();
        let x_bits = flipped(&y, &xs);
        let new = set(vec![(20, x_bits), (21, y), (22, x)]);
        let nvo = vec![VerifiedMatch { query: id(21), cluster: ClusterId(1), matched_via: id(1), score: 0.9 }];
        let nvn = vec![
            NearDupeCluster { id: ClusterId(20), head: id(20), members: vec![(id(21), 0.8)] },
            NearDupeCluster::singleton(id(22)),
        ];
        let batch = merge(&mut store, &new, &nvo, &nvn, &scorer(), &params()).unwrap();
        let got: Vec<(u64, u64, Provenance)> =
            batch.assignments.iter().map(|a| (a.image.get(), a.cluster.0, a.provenance)).collect();
        assert_eq!(
            got,
            vec![(20, 1, Provenance::NvNMapped), (21, 1, Provenance::NvO), (22, 22, Provenance::NvNNew)]
        );
        assert_eq!(batch.new_clusters, 1);
        assert_eq!(store.cluster(ClusterId(1)).unwrap().len(), 4);
        assert_eq!(store.version(), 2);
        store.check().unwrap();
    }

    #[test]
    fn conflicting_matches_pick_highest_score_and_keep_own() {
        let (mut store, a, b) = seeded();
        let new = set(vec![(30, flipped(&a, &[5])), (31, flipped(&b, &[5])), (32, flipped(&b, &[6, 7]))]);
        let nvo = vec![
            VerifiedMatch { query: id(30), cluster: ClusterId(1), matched_via: id(1), score: 0.7 },
            VerifiedMatch { query: id(31), cluster: ClusterId(3), matched_via: id(3), score: 0.9 },
        ];
        let nvn = vec![NearDupeCluster {
            id: ClusterId(30),
            head: id(30),
            members: vec![(id(31), 0.6), (id(32), 0.6)],
        }];
        let batch = merge(&mut store, &new, &nvo, &nvn, &scorer(), &params()).unwrap();
        let cl: Vec<u64> = batch.assignments.iter().map(|a| a.cluster.0).collect();
        assert_eq!(cl, vec![1, 3, 3]);
        assert_eq!(batch.new_clusters, 0);
    }

    #[test]
    fn failed_merge_leaves_store_untouched() {
        let (mut store, a, _) = seeded();
        let before = store.clone();
        let new = set(vec![(40, a.clone()), (41, flipped(&a, &[3]))]);
        // NvN does not cover image 41
        let nvn = vec![NearDupeCluster::singleton(id(40))];
        assert!(merge(&mut store, &new, &[], &nvn, &scorer(), &params()).is_err());
        assert_eq!(store.version(), before.version());
        assert_eq!(store.image_count(), before.image_count());
        assert!(store.embeddings().get(id(40)).is_none());
    }

    #[test]
    fn reingestion_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_bits(&mut rng);
        let other = random_bits(&mut rng);
        let new = set(vec![
            (1, base.clone()),
            (2, flipped(&base, &[1, 2])),
            (3, other),
            (4, flipped(&base, &[9])),
        ]);
        let mut store = ClusterStore::new(LshConfig::default()).unwrap();
        let first = run_incremental(&mut store, &new, &scorer(), &params()).unwrap();
        assert!(first.new_clusters >= 2);
        let clusters_before = store.cluster_count();
        let again = run_incremental(&mut store, &new, &scorer(), &params()).unwrap();
        assert_eq!(again.new_clusters, 0);
        assert_eq!(store.cluster_count(), clusters_before);
        for (a, b) in first.assignments.iter().zip(&again.assignments) {
            assert_eq!(a.cluster, b.cluster);
            assert_eq!(b.provenance, Provenance::NvO);
        }
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let (mut store, _, _) = seeded();
        let b = run_incremental(&mut store, &Embeddings::new(256), &scorer(), &params()).unwrap();
        assert!(b.assignments.is_empty());
        assert_eq!(store.version(), 1);
    }

    #[test]
    fn reused_id_with_new_embedding_is_rejected() {
        let (mut store, _, b) = seeded();
        let new = set(vec![(1, b)]);
        assert!(run_incremental(&mut store, &new, &scorer(), &params()).is_err());
    }

    #[test]
    fn store_round_trip_and_version_cleanup() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, a, _) = seeded();
        store.save(dir.path()).unwrap();
        let new = set(vec![(50, flipped(&a, &[4])), (51, flipped(&a, &[200, 201]))]);
        run_incremental(&mut store, &new, &scorer(), &params()).unwrap();
        store.save(dir.path()).unwrap();
        let back = ClusterStore::load(dir.path()).unwrap();
        assert_eq!(back.version(), store.version());
        assert_eq!(back.assignment_map(), store.assignment_map());
        assert_eq!(
            back.clusters().cloned().collect::<Vec<_>>(),
            store.clusters().cloned().collect::<Vec<_>>()
        );
        assert_eq!(back.augmentation(ClusterId(1)), store.augmentation(ClusterId(1)));
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert!(names.iter().all(|n| !n.contains("-1.")), "{names:?}");
    }

    #[test]
    fn manifest_pointing_at_missing_version_fails() {
        let dir = tempfile::tempdir().unwrap();
        let (store, _, _) = seeded();
        store.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("heads-1.ndix")).unwrap();
        assert!(ClusterStore::load(dir.path()).is_err());
    }
}
