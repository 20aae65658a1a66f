//! Exact enumeration of image pairs within a hamming radius.
//!
//! Splitting the `d` bits into `r + 1` disjoint chunks, any pair at distance
//! `<= r` agrees on at least one whole chunk (pigeonhole). Pairs are bucketed by
//! chunk value and verified with a full hamming comparison; a pair is reported
//! only from the first chunk it agrees on.

use std::collections::HashMap;

use crate::embedding::{BinaryEmbedding, ImageId};
use crate::error::{Error, Result};

const MIN_CHUNK_BITS: usize = 8;

/// All unordered pairs `(a, b)` with `a < b` and `hamming(a, b) <= radius`, sorted.
pub fn pairs_within_distance(
    corpus: &[BinaryEmbedding],
    radius: u32,
) -> Result<Vec<(ImageId, ImageId)>> {
    let Some(first) = corpus.first() else {
        return Ok(Vec::new());
    };
    let d = first.dim();
    if let Some(e) = corpus.iter().find(|e| e.dim() != d) {
        return Err(Error::Dimension {
            expected: d,
            actual: e.dim(),
        });
    }
    let chunks = radius as usize + 1;
    let mut out = if d / chunks < MIN_CHUNK_BITS {
        brute_force(corpus, radius)
    } else {
        pigeonhole(corpus, radius, d, chunks)
    };
    out.sort_unstable();
    Ok(out)
}

fn brute_force(corpus: &[BinaryEmbedding], radius: u32) -> Vec<(ImageId, ImageId)> {
    let mut out = Vec::new();
    for (i, a) in corpus.iter().enumerate() {
        for b in &corpus[i + 1..] {
            if a.hamming(b) <= radius {
                out.push(ordered(a.image_id, b.image_id));
            }
        }
    }
    out
}

fn chunk_key(e: &BinaryEmbedding, start: usize, end: usize) -> u64 {
    // chunks are at most 64 bits wide when d <= 64 * chunks
    (start..end).fold(0u64, |acc, i| (acc << 1) | e.bits.get(i) as u64)
}

fn pigeonhole(
    corpus: &[BinaryEmbedding],
    radius: u32,
    d: usize,
    chunks: usize,
) -> Vec<(ImageId, ImageId)> {
    let bounds: Vec<(usize, usize)> = (0..chunks)
        .map(|c| (c * d / chunks, (c + 1) * d / chunks))
        .collect();
    if bounds.iter().any(|(s, e)| e - s > 64) {
        return brute_force(corpus, radius);
    }
    let keys: Vec<Vec<u64>> = corpus
        .iter()
        .map(|e| bounds.iter().map(|&(s, t)| chunk_key(e, s, t)).collect())
        .collect();
    let mut out = Vec::new();
    for c in 0..chunks {
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            buckets.entry(k[c]).or_default().push(i);
        }
        for members in buckets.values().filter(|m| m.len() > 1) {
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    if (0..c).any(|p| keys[i][p] == keys[j][p]) {
                        continue;
                    }
                    if corpus[i].hamming(&corpus[j]) <= radius {
                        out.push(ordered(corpus[i].image_id, corpus[j].image_id));
                    }
                }
            }
        }
    }
    out
}

fn ordered(a: ImageId, b: ImageId) -> (ImageId, ImageId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}
