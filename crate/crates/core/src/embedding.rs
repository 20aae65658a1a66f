//! Binary image embeddings and the `NDEM` embedding file.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

/// External image identifier. `u64::MAX` is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct ImageId(u64);

impl ImageId {
    pub const SENTINEL: u64 = u64::MAX;

    /// Panics on the reserved sentinel; use `TryFrom` for untrusted input.
    pub const fn new(value: u64) -> Self {
        assert!(value != Self::SENTINEL, "ImageId u64::MAX is reserved");
        ImageId(value)
    }

    pub const fn get(self) -> u64 {
        self.0
    }
}

impl TryFrom<u64> for ImageId {
    type Error = Error;

    fn try_from(value: u64) -> Result<Self> {
        if value == Self::SENTINEL {
            Err(Error::Data("image id u64::MAX is reserved".into()))
        } else {
            Ok(ImageId(value))
        }
    }
}

impl From<ImageId> for u64 {
    fn from(id: ImageId) -> u64 {
        id.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::str::FromStr for ImageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::format("image id", s.to_string()))?;
        ImageId::try_from(v)
    }
}

/// Fixed-width bit vector. Bit `i` lives in word `i / 64` at position `63 - i % 64`,
/// so the big-endian bytes of the words are the on-disk MSB-first layout.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitVector {
    len: usize,
    words: Box<[u64]>,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        BitVector {
            len,
            words: vec![0u64; len.div_ceil(64)].into_boxed_slice(),
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            v.set(i, b);
        }
        v
    }

    /// Parses a string of `0`/`1` characters; whitespace and `_` are ignored.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::format("bit string", format!("unexpected {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_bools(&bits))
    }

    pub fn from_msb_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Dimension {
                expected: len.div_ceil(8),
                actual: bytes.len(),
            });
        }
        let mut v = Self::zeros(len);
        for (w, chunk) in v.words.iter_mut().zip(bytes.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            *w = u64::from_be_bytes(buf);
        }
        v.clear_padding();
        Ok(v)
    }

    pub fn to_msb_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_be_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    fn clear_padding(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= !0u64 << (64 - rem);
            }
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (63 - i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let mask = 1u64 << (63 - i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] ^= 1u64 << (63 - i % 64);
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn xor(&self, other: &BitVector) -> Result<BitVector> {
        if self.len != other.len {
            return Err(Error::Dimension {
                expected: self.len,
                actual: other.len,
            });
        }
        let words = self
            .words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| a ^ b)
            .collect();
        Ok(BitVector {
            len: self.len,
            words,
        })
    }

    /// Hamming distance; panics on width mismatch.
    #[inline]
    pub fn hamming(&self, other: &BitVector) -> u32 {
        assert_eq!(self.len, other.len, "hamming on different widths");
        self.words
            .iter()
            .zip(other.words.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Indices of set bits in increasing order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let lz = rest.leading_zeros() as usize;
                rest &= !(1u64 << (63 - lz));
                Some(wi * 64 + lz)
            })
        })
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.len)
            .map(|i| if self.get(i) { '1' } else { '0' })
            .collect();
        write!(f, "BitVector({s})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryEmbedding {
    pub image_id: ImageId,
    pub bits: BitVector,
}

impl BinaryEmbedding {
    pub fn new(image_id: ImageId, bits: BitVector) -> Self {
        BinaryEmbedding { image_id, bits }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn hamming(&self, other: &BinaryEmbedding) -> u32 {
        self.bits.hamming(&other.bits)
    }
}

/// Sign binarization: bit `i` is set iff `values[i] >= 0`.
pub fn binarize(image_id: ImageId, values: &[f32], d: usize) -> Result<BinaryEmbedding> {
    if values.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: values.len(),
        });
    }
    let mut bits = BitVector::zeros(d);
    for (i, &v) in values.iter().enumerate() {
        if v >= 0.0 {
            bits.set(i, true);
        }
    }
    Ok(BinaryEmbedding { image_id, bits })
}

/// An id-addressable set of embeddings sharing one width.
#[derive(Debug, Clone, Default)]
pub struct Embeddings {
    dim: usize,
    items: Vec<BinaryEmbedding>,
    by_id: HashMap<ImageId, usize>,
}

impl Embeddings {
    pub fn new(dim: usize) -> Self {
        Embeddings {
            dim,
            items: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn from_vec(dim: usize, items: Vec<BinaryEmbedding>) -> Result<Self> {
        let mut set = Embeddings::new(dim);
        set.items.reserve(items.len());
        for e in items {
            set.push(e)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, e: BinaryEmbedding) -> Result<()> {
        if e.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: e.dim(),
            });
        }
        if self.by_id.contains_key(&e.image_id) {
            return Err(Error::Data(format!("duplicate image id {}", e.image_id)));
        }
        self.by_id.insert(e.image_id, self.items.len());
        self.items.push(e);
        Ok(())
    }

    /// Adds `e` unless its id is already present.
    pub fn upsert(&mut self, e: BinaryEmbedding) -> Result<()> {
        if self.by_id.contains_key(&e.image_id) {
            return Ok(());
        }
        self.push(e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ImageId) -> Option<&BinaryEmbedding> {
        self.by_id.get(&id).map(|&i| &self.items[i])
    }

    pub fn require(&self, id: ImageId) -> Result<&BinaryEmbedding> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("no embedding for image {id}")))
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BinaryEmbedding> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[BinaryEmbedding] {
        &self.items
    }

    pub fn ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.items.iter().map(|e| e.image_id)
    }

    pub fn into_vec(self) -> Vec<BinaryEmbedding> {
        self.items
    }
}

impl<'a> IntoIterator for &'a Embeddings {
    type Item = &'a BinaryEmbedding;
    type IntoIter = std::slice::Iter<'a, BinaryEmbedding>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

const EMBEDDING_MAGIC: &[u8; 4] = b"NDEM";
const EMBEDDING_VERSION: u16 = 1;

pub fn write_embeddings_to<W: Write>(w: &mut W, set: &Embeddings) -> Result<()> {
    let d = u16::try_from(set.dim())
        .map_err(|_| Error::format("embedding file", "dimension exceeds u16"))?;
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    for e in set {
        w.write_all(&e.image_id.get().to_le_bytes())?;
        w.write_all(&e.bits.to_msb_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings_from<R: Read>(r: &mut R) -> Result<Embeddings> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::format("embedding file", "bad magic"));
    }
    let version = read_u16(r)?;
    if version != EMBEDDING_VERSION {
        return Err(Error::format(
            "embedding file",
            format!("unsupported version {version}"),
        ));
    }
    let d = read_u16(r)? as usize;
    if d == 0 {
        return Err(Error::format("embedding file", "zero dimension"));
    }
    let count = read_u64(r)?;
    let mut set = Embeddings::new(d);
    let mut buf = vec![0u8; d.div_ceil(8)];
    for _ in 0..count {
        let id = ImageId::try_from(read_u64(r)?)?;
        r.read_exact(&mut buf)?;
        set.push(BinaryEmbedding::new(id, BitVector::from_msb_bytes(d, &buf)?))?;
    }
    Ok(set)
}

pub fn write_embeddings(path: &Path, set: &Embeddings) -> Result<()> {
    atomic_write(path, |w| write_embeddings_to(w, set))
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let mut r = BufReader::new(File::open(path)?);
    read_embeddings_from(&mut r)
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
