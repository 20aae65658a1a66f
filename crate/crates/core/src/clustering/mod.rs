//! Near-duplicate clusters: transitive closure over verified edges, greedy
//! k-cut repair, and head election.

mod closure;
mod kcut;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::ImageId;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub use closure::{transitive_closure, ClosureGroup};
pub use kcut::{choose_head, elect_head, elect_heads, k_cut};

/// Cluster label: the smallest image id in the cluster when it was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u64);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for ClusterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(ClusterId).map_err(|_| Error::format("cluster id", s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearDupeCluster {
    pub id: ClusterId,
    pub head: ImageId,
    /// Non-head members with their score against the head, ordered by id.
    pub members: Vec<(ImageId, f64)>,
}

impl NearDupeCluster {
    pub fn singleton(image: ImageId) -> Self {
        NearDupeCluster { id: ClusterId(image.get()), head: image, members: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.members.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn images(&self) -> impl Iterator<Item = ImageId> + '_ {
        std::iter::once(self.head).chain(self.members.iter().map(|m| m.0))
    }

    /// Up to `k` members closest to the head, by score descending then id.
    pub fn top_members(&self, k: usize) -> Vec<(ImageId, f64)> {
        let mut v = self.members.clone();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }

    pub(crate) fn normalize(&mut self) {
        self.members.sort_by_key(|m| m.0);
    }
}

/// Maps every clustered image to its cluster id.
pub fn assignment_map(clusters: &[NearDupeCluster]) -> HashMap<ImageId, ClusterId> {
    clusters
        .iter()
        .flat_map(|c| c.images().map(move |i| (i, c.id)))
        .collect()
}

/// Checks that no image appears twice and that heads are not listed as members.
pub fn check_partition(clusters: &[NearDupeCluster]) -> Result<()> {
    let mut seen = HashMap::new();
    for c in clusters {
        for i in c.images() {
            if let Some(other) = seen.insert(i, c.id) {
                return Err(Error::Consistency(format!(
                    "image {i} in clusters {other} and {}",
                    c.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Head,
    Member,
}

/// Rows `image_id, cluster_id, role, score_vs_head`, clusters in id order with
/// the head first.
pub fn write_clusters_tsv<W: Write>(w: &mut W, clusters: &[NearDupeCluster]) -> Result<()> {
    let mut sorted: Vec<&NearDupeCluster> = clusters.iter().collect();
    sorted.sort_by_key(|c| c.id);
    for c in sorted {
        writeln!(w, "{}\t{}\thead\t", c.head, c.id)?;
        let mut members = c.members.clone();
        members.sort_by_key(|m| m.0);
        for (m, s) in members {
            writeln!(w, "{m}\t{}\tmember\t{s}", c.id)?;
        }
    }
    Ok(())
}

pub fn read_clusters_tsv<R: BufRead>(r: R) -> Result<Vec<NearDupeCluster>> {
    let mut heads: BTreeMap<ClusterId, ImageId> = BTreeMap::new();
    let mut members: BTreeMap<ClusterId, Vec<(ImageId, f64)>> = BTreeMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format("cluster tsv", format!("line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let image: ImageId = f[0].parse().map_err(|_| bad())?;
        let cid: ClusterId = f[1].parse().map_err(|_| bad())?;
        match f[2] {
            "head" => {
                if !f[3].is_empty() || heads.insert(cid, image).is_some() {
                    return Err(bad());
                }
            }
            "member" => {
                let s: f64 = f[3].parse().map_err(|_| bad())?;
                members.entry(cid).or_default().push((image, s));
            }
            _ => return Err(bad()),
        }
    }
    if let Some(cid) = members.keys().find(|c| !heads.contains_key(c)) {
        return Err(Error::format("cluster tsv", format!("cluster {cid} has no head")));
    }
    let clusters: Vec<NearDupeCluster> = heads
        .into_iter()
        .map(|(id, head)| {
            let mut c = NearDupeCluster { id, head, members: members.remove(&id).unwrap_or_default() };
            c.normalize();
            c
        })
        .collect();
    check_partition(&clusters)?;
    Ok(clusters)
}

pub fn save_clusters(path: &Path, clusters: &[NearDupeCluster]) -> Result<()> {
    atomic_write(path, |w| write_clusters_tsv(w, clusters))
}

pub fn load_clusters(path: &Path) -> Result<Vec<NearDupeCluster>> {
    read_clusters_tsv(std::io::BufReader::new(std::fs::File::open(path)?))
}
