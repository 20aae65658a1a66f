//! Pipeline configuration with full defaulting.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{load_model, TrainConfig};
use crate::embedding::Embeddings;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::lsh::{select_bits, LshConfig, DEFAULT_DIM, DEFAULT_SELECTED, DEFAULT_TERM_BITS};
use crate::scorer::{HammingScorer, PairScorer};
use crate::search::{DEFAULT_K, DEFAULT_MIN_OVERLAP};
use crate::{Mlp, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshSection {
    pub d: usize,
    pub m: usize,
    pub term_bits: u8,
    /// Explicit bit selection; when absent the highest-variance bits of the
    /// first `sample_size` embeddings are used.
    pub selected_bits: Option<Vec<usize>>,
    pub sample_size: usize,
}

impl Default for LshSection {
    fn default() -> Self {
        LshSection {
            d: DEFAULT_DIM,
            m: DEFAULT_SELECTED,
            term_bits: DEFAULT_TERM_BITS,
            selected_bits: None,
            sample_size: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub k: usize,
    pub min_overlap: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { k: DEFAULT_K, min_overlap: DEFAULT_MIN_OVERLAP }
    }
}

/// Logistic hamming scorer used when no model is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HammingFallback {
    pub midpoint: f64,
    pub slope: f64,
}

impl Default for HammingFallback {
    fn default() -> Self {
        HammingFallback { midpoint: 16.0, slope: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub model: Option<PathBuf>,
    /// Overrides the threshold stored in the model file.
    pub threshold: Option<f64>,
    pub train: TrainConfig,
    pub fallback: HammingFallback,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            model: None,
            threshold: None,
            train: TrainConfig::default(),
            fallback: HammingFallback::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KcutSection {
    /// Defaults to the classifier threshold.
    pub threshold: Option<f64>,
    pub seed: u64,
}

impl Default for KcutSection {
    fn default() -> Self {
        KcutSection { threshold: None, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub k_aug: usize,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        AugmentationSection { k_aug: crate::candidates::DEFAULT_K_AUG }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub store: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub lsh: LshSection,
    pub search: SearchSection,
    pub classifier: ClassifierSection,
    pub kcut: KcutSection,
    pub augmentation: AugmentationSection,
    pub paths: PathsSection,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lsh: LshSection::default(),
            search: SearchSection::default(),
            classifier: ClassifierSection::default(),
            kcut: KcutSection::default(),
            augmentation: AugmentationSection::default(),
            paths: PathsSection::default(),
            seed: 42,
            threads: None,
        }
    }
}

const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_unit(name: &str, t: Option<f64>) -> Result<()> {
    match t {
        Some(t) if !(t > 0.0 && t < 1.0) => {
            Err(Error::Data(format!("config: {name} {t} not in (0, 1)")))
        }
        _ => Ok(()),
    }
}

/// Values every stage needs once the scorer is resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    pub k: usize,
    pub min_overlap: usize,
    pub threshold: f64,
    pub kcut_threshold: f64,
    pub k_aug: usize,
    pub seed: u64,
}

impl PipelineParams {
    pub fn with_threshold(t: f64) -> Self {
        PipelineParams {
            k: DEFAULT_K,
            min_overlap: DEFAULT_MIN_OVERLAP,
            threshold: t,
            kcut_threshold: t,
            k_aug: crate::candidates::DEFAULT_K_AUG,
            seed: 42,
        }
    }
}

pub struct ResolvedScorer {
    pub scorer: Box<dyn PairScorer + Send>,
    /// Threshold stored with the model, if any.
    pub model_threshold: Option<f64>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("classifier.threshold", self.classifier.threshold)?;
        check_unit("kcut.threshold", self.kcut.threshold)?;
        if self.search.k == 0 || self.search.min_overlap == 0 {
            return Err(Error::Data("config: search.k and search.min_overlap must be positive".into()));
        }
        if self.lsh.selected_bits.is_none() && self.lsh.sample_size == 0 {
            return Err(Error::Data("config: lsh.sample_size must be positive".into()));
        }
        if let Some(bits) = &self.lsh.selected_bits {
            LshConfig::new(self.lsh.d, bits.clone(), self.lsh.term_bits)?;
        } else {
            LshConfig::leading_bits(self.lsh.d, self.lsh.m, self.lsh.term_bits)?;
        }
        if let Some(model) = &self.classifier.model {
            if !model.is_file() {
                return Err(Error::Data(format!("config: model {} does not exist", model.display())));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Data("config: threads must be positive".into()));
        }
        self.classifier.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            Ok(writeln!(w)?)
        })
    }

    /// LSH configuration for a corpus: the explicit selection when configured,
    /// otherwise variance-ranked bits of a leading sample.
    pub fn lsh_config(&self, embeddings: &Embeddings) -> Result<LshConfig> {
        if !embeddings.is_empty() && embeddings.dim() != self.lsh.d {
            return Err(Error::Dimension { expected: self.lsh.d, actual: embeddings.dim() });
        }
        if let Some(bits) = &self.lsh.selected_bits {
            return LshConfig::new(self.lsh.d, bits.clone(), self.lsh.term_bits);
        }
        if embeddings.is_empty() {
            return LshConfig::leading_bits(self.lsh.d, self.lsh.m, self.lsh.term_bits);
        }
        let n = self.lsh.sample_size.min(embeddings.len());
        let bits = select_bits(&embeddings.as_slice()[..n], self.lsh.d, self.lsh.m)?;
        LshConfig::new(self.lsh.d, bits, self.lsh.term_bits)
    }

    pub fn scorer(&self) -> Result<ResolvedScorer> {
        match &self.classifier.model {
            Some(path) => {
                let model: Mlp = load_model::<Real>(path)?;
                if model.input_dim() != self.lsh.d {
                    return Err(Error::Dimension { expected: self.lsh.d, actual: model.input_dim() });
                }
                // widened exactly, like the scores it is compared against
                let t = f64::from(model.threshold());
                Ok(ResolvedScorer { scorer: Box::new(model), model_threshold: Some(t) })
            }
            None => {
                log::warn!(
                    "no classifier model configured; scoring pairs by hamming distance (midpoint {}, slope {})",
                    self.classifier.fallback.midpoint,
                    self.classifier.fallback.slope
                );
                let f = &self.classifier.fallback;
                Ok(ResolvedScorer { scorer: Box::new(HammingScorer::new(f.midpoint, f.slope)), model_threshold: None })
            }
        }
    }

    pub fn params(&self, model_threshold: Option<f64>) -> PipelineParams {
        let t = self.classifier.threshold.or(model_threshold).unwrap_or(DEFAULT_THRESHOLD);
        PipelineParams {
            k: self.search.k,
            min_overlap: self.search.min_overlap,
            threshold: t,
            kcut_threshold: self.kcut.threshold.unwrap_or(t),
            k_aug: self.augmentation.k_aug,
            seed: self.kcut.seed,
        }
    }
}
