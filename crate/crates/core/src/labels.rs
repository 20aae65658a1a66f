//! Labeled image pairs: CSV ingestion and bootstrapped generation from ground truth.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::GroundTruth;
use crate::embedding::{Embeddings, ImageId};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::index::build_index;
use crate::lsh::{derive_all, LshConfig};
use crate::search::{batch_search, DEFAULT_K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Gold,
    Synthetic,
    Augmentation,
}

impl fmt::Display for PairSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairSource::Gold => "gold",
            PairSource::Synthetic => "synthetic",
            PairSource::Augmentation => "augmentation",
        })
    }
}

impl FromStr for PairSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(PairSource::Gold),
            "synthetic" => Ok(PairSource::Synthetic),
            "augmentation" => Ok(PairSource::Augmentation),
            _ => Err(Error::format("pair source", s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub id_a: ImageId,
    pub id_b: ImageId,
    pub label: bool,
    pub source: PairSource,
    /// Image URLs, as shipped with externally adjudicated pair sets.
    pub urls: Option<(String, String)>,
}

impl LabeledPair {
    pub fn new(id_a: ImageId, id_b: ImageId, label: bool, source: PairSource) -> Result<Self> {
        if id_a == id_b {
            return Err(Error::Data(format!("pair of image {id_a} with itself")));
        }
        Ok(LabeledPair { id_a, id_b, label, source, urls: None })
    }

    pub fn with_urls(mut self, url_a: String, url_b: String) -> Self {
        self.urls = Some((url_a, url_b));
        self
    }

    pub fn ids(&self) -> (ImageId, ImageId) {
        (self.id_a, self.id_b)
    }
}

/// Reads `id_a,id_b,label[,source[,url_a,url_b]]` rows; a header row is
/// optional and the source defaults to `gold`.
pub fn read_pairs_csv<R: Read>(r: R) -> Result<Vec<LabeledPair>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).map(str::trim);
        if n == 0 && field(0) == Some("id_a") {
            continue;
        }
        let bad = |what: &str| Error::format("pairs csv", format!("row {}: {what}", n + 1));
        if !(3..=6).contains(&rec.len()) || rec.len() == 5 {
            return Err(bad("expected 3, 4 or 6 fields"));
        }
        let id_a: ImageId = rec[0].trim().parse().map_err(|_| bad("id_a"))?;
        let id_b: ImageId = rec[1].trim().parse().map_err(|_| bad("id_b"))?;
        let label = match rec[2].trim() {
            "0" => false,
            "1" => true,
            _ => return Err(bad("label must be 0 or 1")),
        };
        let source = match field(3) {
            Some(s) if !s.is_empty() => s.parse()?,
            _ => PairSource::Gold,
        };
        let mut pair = LabeledPair::new(id_a, id_b, label, source)?;
        if rec.len() == 6 && !(rec[4].is_empty() && rec[5].is_empty()) {
            pair = pair.with_urls(rec[4].to_string(), rec[5].to_string());
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pairs_csv<W: Write>(w: W, pairs: &[LabeledPair]) -> Result<()> {
    let with_urls = pairs.iter().any(|p| p.urls.is_some());
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(w);
    if with_urls {
        wtr.write_record(["id_a", "id_b", "label", "source", "url_a", "url_b"])?;
    } else {
        wtr.write_record(["id_a", "id_b", "label", "source"])?;
    }
    for p in pairs {
        let mut row = vec![
            p.id_a.to_string(),
            p.id_b.to_string(),
            u8::from(p.label).to_string(),
            p.source.to_string(),
        ];
        if with_urls {
            let (a, b) = p.urls.clone().unwrap_or_default();
            row.push(a);
            row.push(b);
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<LabeledPair>> {
    read_pairs_csv(std::fs::File::open(path)?)
}

pub fn save_pairs(path: &Path, pairs: &[LabeledPair]) -> Result<()> {
    atomic_write(path, |w| write_pairs_csv(w, pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSpec {
    pub n_pairs: usize,
    pub positive_fraction: f64,
    /// Probability of flipping each emitted label.
    pub noise_rate: f64,
    /// Draw negatives from cross-group LSH candidates before falling back to
    /// uniform random pairs.
    pub hard_negatives: bool,
    pub seed: u64,
}

impl Default for LabelSpec {
    fn default() -> Self {
        LabelSpec {
            n_pairs: 10_000,
            positive_fraction: 0.14,
            noise_rate: 0.0,
            hard_negatives: true,
            seed: 7,
        }
    }
}

fn canonical(a: ImageId, b: ImageId) -> (ImageId, ImageId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Cross-group pairs that an all-vs-all search returns as candidates.
fn candidate_negatives(
    embeddings: &Embeddings,
    truth: &GroundTruth,
    lsh: &LshConfig,
) -> Result<Vec<(ImageId, ImageId)>> {
    let sets = derive_all(embeddings.as_slice(), lsh)?;
    let index = build_index(&sets, lsh, false)?;
    let hits = batch_search(&sets, &index, DEFAULT_K, 1)?;
    let mut pairs: Vec<_> = hits
        .pair_set()
        .into_iter()
        .filter(|&(a, b)| !truth.same_group(a, b))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Samples positives within ground-truth groups and negatives across groups.
/// Pairs are distinct, randomly oriented, and shuffled.
pub fn generate_labels(
    embeddings: &Embeddings,
    truth: &GroundTruth,
    lsh: Option<&LshConfig>,
    spec: &LabelSpec,
) -> Result<Vec<LabeledPair>> {
    if !(0.0..=1.0).contains(&spec.positive_fraction) || !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::Sampling("fractions must lie in [0, 1]".into()));
    }
    let n_pos = (spec.n_pairs as f64 * spec.positive_fraction).round() as usize;
    let n_neg = spec.n_pairs - n_pos;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let positives = truth.positive_pairs();
    if positives.is_empty() {
        return Err(Error::Sampling("ground truth has no multi-image groups".into()));
    }
    if positives.len() < n_pos {
        return Err(Error::Sampling(format!(
            "{n_pos} positives requested, {} available",
            positives.len()
        )));
    }
    let mut chosen: Vec<((ImageId, ImageId), bool)> = positives
        .choose_multiple(&mut rng, n_pos)
        .map(|&p| (p, true))
        .collect();

    let mut seen: HashSet<(ImageId, ImageId)> = HashSet::new();
    if spec.hard_negatives && n_neg > 0 {
        if let Some(cfg) = lsh {
            let pool = candidate_negatives(embeddings, truth, cfg)?;
            for &p in pool.choose_multiple(&mut rng, n_neg) {
                seen.insert(p);
            }
        }
    }
    let mut ids: Vec<ImageId> = truth.labels().keys().copied().collect();
    ids.sort_unstable();
    if seen.len() < n_neg && truth.group_count() < 2 {
        return Err(Error::Sampling("negatives need at least two groups".into()));
    }
    let mut tries = 0usize;
    let budget = 100 * n_neg + 1000;
    let mut hard: Vec<(ImageId, ImageId)> = seen.iter().copied().collect();
    hard.sort_unstable();
    let mut negatives = hard;
    while negatives.len() < n_neg {
        tries += 1;
        if tries > budget {
            return Err(Error::Sampling(format!("could not draw {n_neg} distinct negatives")));
        }
        let a = *ids.choose(&mut rng).expect("non-empty");
        let b = *ids.choose(&mut rng).expect("non-empty");
        if a == b || truth.same_group(a, b) {
            continue;
        }
        let p = canonical(a, b);
        if seen.insert(p) {
            negatives.push(p);
        }
    }
    chosen.extend(negatives.into_iter().map(|p| (p, false)));
    chosen.shuffle(&mut rng);

    chosen
        .into_iter()
        .map(|((a, b), label)| {
            let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            let label = if spec.noise_rate > 0.0 && rng.gen_bool(spec.noise_rate) {
                !label
            } else {
                label
            };
            LabeledPair::new(a, b, label, PairSource::Synthetic)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, DupesDistribution, SyntheticCorpusSpec};
    use proptest::prelude::*;

    fn id(v: u64) -> ImageId {
        ImageId::new(v)
    }

    #[test]
    fn rejects_self_pairs() {
        assert!(LabeledPair::new(id(3), id(3), true, PairSource::Gold).is_err());
    }

    #[test]
    fn parses_minimal_and_full_rows() {
        let text = "id_a,id_b,label\n1, 2, 1\n3,4,0\n";
        let pairs = read_pairs_csv(text.as_bytes()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].source, PairSource::Gold);
        assert!(pairs[0].label && !pairs[1].label);

        let text = "5,6,1,augmentation,http://a/x.jpg,http://b/y.jpg\n";
        let pairs = read_pairs_csv(text.as_bytes()).unwrap();
        assert_eq!(pairs[0].source, PairSource::Augmentation);
        assert_eq!(pairs[0].urls.as_ref().unwrap().1, "http://b/y.jpg");
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(read_pairs_csv("1,2,2\n".as_bytes()).is_err());
        assert!(read_pairs_csv("1,1,1\n".as_bytes()).is_err());
        assert!(read_pairs_csv("1,x,1\n".as_bytes()).is_err());
        assert!(read_pairs_csv("1,2,1,bogus\n".as_bytes()).is_err());
        assert!(read_pairs_csv("1,2,1,gold,only-one-url\n".as_bytes()).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = LabeledPair> {
        (0u64..1000, 1u64..1000, any::<bool>(), 0usize..3, proptest::option::of(("[a-z:/.,\" ]{0,12}", "[a-z:/.]{1,12}")))
            .prop_map(|(a, off, label, s, urls)| {
                let source = [PairSource::Gold, PairSource::Synthetic, PairSource::Augmentation][s];
                let p = LabeledPair::new(id(a), id(a + off), label, source).unwrap();
                match urls {
                    Some((x, y)) => p.with_urls(x, y),
                    None => p,
                }
            })
    }

    proptest! {
        #[test]
        fn csv_round_trip(pairs in proptest::collection::vec(arb_pair(), 0..40)) {
            let mut buf = Vec::new();
            write_pairs_csv(&mut buf, &pairs).unwrap();
            let back = read_pairs_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &pairs);
            let mut again = Vec::new();
            write_pairs_csv(&mut again, &back).unwrap();
            prop_assert_eq!(again, buf);
        }
    }

    fn corpus() -> crate::corpus::SyntheticCorpus {
        generate_corpus(&SyntheticCorpusSpec { n_base: 800, seed: 11, ..Default::default() }).unwrap()
    }

    #[test]
    fn class_ratio_and_membership() {
        let c = corpus();
        let lsh = LshConfig::default();
        let spec = LabelSpec { n_pairs: 2000, ..Default::default() };
        let pairs = generate_labels(&c.embeddings, &c.truth, Some(&lsh), &spec).unwrap();
        assert_eq!(pairs.len(), 2000);
        let pos = pairs.iter().filter(|p| p.label).count();
        assert_eq!(pos, 280);
        for p in &pairs {
            assert_eq!(p.label, c.truth.same_group(p.id_a, p.id_b));
        }
        let distinct: HashSet<_> = pairs.iter().map(|p| canonical(p.id_a, p.id_b)).collect();
        assert_eq!(distinct.len(), pairs.len());
        let again = generate_labels(&c.embeddings, &c.truth, Some(&lsh), &spec).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn hard_negatives_are_closer_than_random_ones() {
        let c = corpus();
        let lsh = LshConfig::default();
        let spec = LabelSpec { n_pairs: 1000, positive_fraction: 0.1, ..Default::default() };
        let mean_neg = |pairs: &[LabeledPair]| {
            let neg: Vec<u32> = pairs
                .iter()
                .filter(|p| !p.label)
                .map(|p| c.embeddings.get(p.id_a).unwrap().hamming(c.embeddings.get(p.id_b).unwrap()))
                .collect();
            neg.iter().sum::<u32>() as f64 / neg.len() as f64
        };
        let hard = generate_labels(&c.embeddings, &c.truth, Some(&lsh), &spec).unwrap();
        let easy = generate_labels(&c.embeddings, &c.truth, None, &spec).unwrap();
        assert!(mean_neg(&hard) < mean_neg(&easy));
    }

    #[test]
    fn noise_flips_some_labels() {
        let c = corpus();
        let spec = LabelSpec { n_pairs: 2000, noise_rate: 0.1, ..Default::default() };
        let pairs = generate_labels(&c.embeddings, &c.truth, None, &spec).unwrap();
        let wrong = pairs.iter().filter(|p| p.label != c.truth.same_group(p.id_a, p.id_b)).count();
        assert!((100..300).contains(&wrong), "{wrong}");
    }

    #[test]
    fn singleton_truth_has_no_positives() {
        let c = generate_corpus(&SyntheticCorpusSpec {
            n_base: 50,
            dupes: DupesDistribution::Fixed { count: 0 },
            ..Default::default()
        })
        .unwrap();
        let err = generate_labels(&c.embeddings, &c.truth, None, &LabelSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }
}
