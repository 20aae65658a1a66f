//! Compressed term → image inverted index.
//!
//! External image ids are dictionary-encoded into contiguous dense `u32` ids in
//! first-seen order. Each posting list holds the dense ids carrying one term,
//! delta + variable-byte encoded.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::embedding::{read_u16, read_u32, read_u64, ImageId};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::lsh::{LshConfig, LshTermSet};
use crate::varbyte;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdDictionary {
    to_dense: HashMap<ImageId, u32>,
    to_external: Vec<ImageId>,
}

impl IdDictionary {
    /// Assigns the next dense id, or errors if `id` is already present.
    pub fn insert(&mut self, id: ImageId) -> Result<u32> {
        let dense = u32::try_from(self.to_external.len())
            .map_err(|_| Error::Build("dictionary exceeds u32 ids".into()))?;
        if self.to_dense.insert(id, dense).is_some() {
            return Err(Error::Build(format!("duplicate image id {id}")));
        }
        self.to_external.push(id);
        Ok(dense)
    }

    pub fn to_dense(&self, id: ImageId) -> Option<u32> {
        self.to_dense.get(&id).copied()
    }

    pub fn to_external(&self, dense: u32) -> ImageId {
        self.to_external[dense as usize]
    }

    pub fn len(&self) -> usize {
        self.to_external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_external.is_empty()
    }

    pub fn external_ids(&self) -> &[ImageId] {
        &self.to_external
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostingList {
    pub term: u32,
    pub count: u32,
    pub encoded: Vec<u8>,
}

impl PostingList {
    pub fn encode(term: u32, dense_ids: &[u32]) -> Result<Self> {
        Ok(PostingList {
            term,
            count: dense_ids.len() as u32,
            encoded: varbyte::encode_sorted(dense_ids)?,
        })
    }

    pub fn decode(&self) -> Result<Vec<u32>> {
        varbyte::decode_sorted(&self.encoded, self.count as usize)
    }

    pub fn decode_into(&self, out: &mut Vec<u32>) -> Result<()> {
        varbyte::decode_sorted_into(&self.encoded, self.count as usize, out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostingIndex {
    config: LshConfig,
    dictionary: IdDictionary,
    postings: Vec<PostingList>,
    head_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexSize {
    /// Full serialized size in bytes.
    pub compressed: u64,
    /// Posting payload bytes only.
    pub payload: u64,
    /// Eight bytes per posting (raw 64-bit ids).
    pub baseline: u64,
}

impl IndexSize {
    pub fn payload_ratio(&self) -> f64 {
        self.payload as f64 / self.baseline as f64
    }

    pub fn total_ratio(&self) -> f64 {
        self.compressed as f64 / self.baseline as f64
    }
}

pub fn build_index(
    term_sets: &[LshTermSet],
    config: &LshConfig,
    head_only: bool,
) -> Result<PostingIndex> {
    let mut dictionary = IdDictionary::default();
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(term_sets.len() * config.term_count());
    for ts in term_sets {
        if ts.config_fingerprint() != config.fingerprint() {
            return Err(Error::Incompatible);
        }
        let dense = dictionary.insert(ts.image_id)?;
        pairs.extend(ts.terms().iter().map(|&t| (t, dense)));
    }
    // Dense ids are assigned in input order, so sorting by term keeps each list sorted.
    pairs.par_sort_unstable();
    let mut groups: Vec<&[(u32, u32)]> = Vec::new();
    let mut rest = pairs.as_slice();
    while let Some(&(term, _)) = rest.first() {
        let end = rest.partition_point(|&(t, _)| t == term);
        let (head, tail) = rest.split_at(end);
        groups.push(head);
        rest = tail;
    }
    let postings = groups
        .par_iter()
        .map(|g| {
            let ids: Vec<u32> = g.iter().map(|&(_, d)| d).collect();
            PostingList::encode(g[0].0, &ids)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PostingIndex {
        config: config.clone(),
        dictionary,
        postings,
        head_only,
    })
}

impl PostingIndex {
    pub fn config(&self) -> &LshConfig {
        &self.config
    }

    pub fn dictionary(&self) -> &IdDictionary {
        &self.dictionary
    }

    pub fn postings(&self) -> &[PostingList] {
        &self.postings
    }

    pub fn head_only(&self) -> bool {
        self.head_only
    }

    pub fn image_count(&self) -> usize {
        self.dictionary.len()
    }

    pub fn total_postings(&self) -> u64 {
        self.postings.iter().map(|p| p.count as u64).sum()
    }

    pub fn posting(&self, term: u32) -> Option<&PostingList> {
        self.postings
            .binary_search_by_key(&term, |p| p.term)
            .ok()
            .map(|i| &self.postings[i])
    }

    /// Every `(term, image)` pair in the index.
    pub fn pairs(&self) -> Result<Vec<(u32, ImageId)>> {
        let mut out = Vec::with_capacity(self.total_postings() as usize);
        for p in &self.postings {
            for d in p.decode()? {
                out.push((p.term, self.dictionary.to_external(d)));
            }
        }
        Ok(out)
    }

    fn header_len(&self) -> u64 {
        // magic, version, d, term_bits, head_only, m, selected bits
        4 + 2 + 2 + 1 + 1 + 4 + 2 * self.config.selected_bits().len() as u64
    }

    pub fn size_bytes(&self) -> IndexSize {
        let payload: u64 = self.postings.iter().map(|p| p.encoded.len() as u64).sum();
        let dictionary = 8 + 8 * self.dictionary.len() as u64;
        let lists = 8 + 12 * self.postings.len() as u64;
        IndexSize {
            compressed: self.header_len() + dictionary + lists + payload,
            payload,
            baseline: 8 * self.total_postings(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let d = u16::try_from(self.config.dim())
            .map_err(|_| Error::format("index file", "dimension exceeds u16"))?;
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        w.write_all(&[self.config.term_bits(), self.head_only as u8])?;
        w.write_all(&(self.config.selected_bits().len() as u32).to_le_bytes())?;
        for &b in self.config.selected_bits() {
            w.write_all(&(b as u16).to_le_bytes())?;
        }
        w.write_all(&(self.dictionary.len() as u64).to_le_bytes())?;
        for id in self.dictionary.external_ids() {
            w.write_all(&id.get().to_le_bytes())?;
        }
        w.write_all(&(self.postings.len() as u64).to_le_bytes())?;
        for p in &self.postings {
            w.write_all(&p.term.to_le_bytes())?;
            w.write_all(&p.count.to_le_bytes())?;
            w.write_all(&(p.encoded.len() as u32).to_le_bytes())?;
            w.write_all(&p.encoded)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::format("index file", "bad magic"));
        }
        let version = read_u16(r)?;
        if version != INDEX_VERSION {
            return Err(Error::format("index file", format!("unsupported version {version}")));
        }
        let d = read_u16(r)? as usize;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let m = read_u32(r)? as usize;
        let bits = (0..m)
            .map(|_| read_u16(r).map(|b| b as usize))
            .collect::<Result<Vec<_>>>()?;
        let config = LshConfig::new(d, bits, flags[0])?;
        let mut dictionary = IdDictionary::default();
        for _ in 0..read_u64(r)? {
            dictionary
                .insert(ImageId::try_from(read_u64(r)?)?)
                .map_err(|e| Error::format("index file", e.to_string()))?;
        }
        let n_lists = read_u64(r)?;
        let mut postings = Vec::with_capacity(n_lists.min(1 << 20) as usize);
        let mut scratch = Vec::new();
        for _ in 0..n_lists {
            let term = read_u32(r)?;
            let count = read_u32(r)?;
            let len = read_u32(r)? as usize;
            let mut encoded = vec![0u8; len];
            r.read_exact(&mut encoded)?;
            if let Some(prev) = postings.last().map(|p: &PostingList| p.term) {
                if term <= prev {
                    return Err(Error::format("index file", "terms not strictly increasing"));
                }
            }
            let list = PostingList {
                term,
                count,
                encoded,
            };
            scratch.clear();
            list.decode_into(&mut scratch)?;
            if scratch.last().is_some_and(|&x| x as usize >= dictionary.len()) {
                return Err(Error::format("index file", "dense id outside dictionary"));
            }
            postings.push(list);
        }
        Ok(PostingIndex {
            config,
            dictionary,
            postings,
            head_only: flags[1] != 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

const INDEX_MAGIC: &[u8; 4] = b"NDIX";
const INDEX_VERSION: u16 = 1;

pub fn index_size_bytes(index: &PostingIndex) -> IndexSize {
    index.size_bytes()
}
