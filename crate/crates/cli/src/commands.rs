use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use neardup::candidates::{
    emit_augmentation_labels, head_table, save_matches, select_candidates, verify_hits, load_matches,
};
use neardup::classifier::{load_model, predict_pairs, save_model, train};
use neardup::clustering::{load_clusters, save_clusters};
use neardup::config::{PipelineConfig, PipelineParams, ResolvedScorer};
use neardup::corpus::{generate_corpus, load_corpus, save_corpus, SyntheticCorpusSpec};
use neardup::embedding::{read_embeddings, Embeddings};
use neardup::eval::evaluate_pipeline;
use neardup::fsutil::atomic_write;
use neardup::incremental::{run_incremental, ClusterStore};
use neardup::index::{build_index, PostingIndex};
use neardup::labels::{generate_labels, load_pairs, save_pairs, LabelSpec};
use neardup::lsh::{derive_all, DEFAULT_DIM};
use neardup::metrics::{pr_auc, roc_auc};
use neardup::pipeline::{cluster_matches, run_full, StageTimer};
use neardup::search::{batch_search, SearchResultBatch};
use neardup::Real;

use crate::{Command, ScorerArgs};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        Ok(writeln!(w)?)
    })?;
    Ok(())
}

fn embeddings(path: &Path) -> Result<Embeddings> {
    read_embeddings(path).with_context(|| format!("reading embeddings {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let config = match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(n) = config.threads {
        // only takes effect when neither --threads nor NEARDUP_THREADS sized the pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(config)
}

struct Scoring {
    config: PipelineConfig,
    scorer: ResolvedScorer,
    params: PipelineParams,
}

impl ScorerArgs {
    fn resolve(&self) -> Result<Scoring> {
        let mut config = load_config(self.config.as_deref())?;
        if let Some(m) = &self.model {
            config.classifier.model = Some(m.clone());
        }
        if let Some(t) = self.threshold {
            config.classifier.threshold = Some(t);
        }
        config.validate()?;
        let scorer = config.scorer()?;
        let params = config.params(scorer.model_threshold);
        log::info!("decision threshold {} (k-cut {})", params.threshold, params.kcut_threshold);
        Ok(Scoring { config, scorer, params })
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { spec, out, pairs, label_spec } => gen_corpus(spec, &out, pairs, label_spec),
        Command::BuildIndex { embeddings: e, config, out, heads } => {
            let config = load_config(config.as_deref())?;
            let set = embeddings(&e)?;
            let (items, head_only) = match heads {
                Some(path) => {
                    let clusters = load_clusters(&path)?;
                    let items = clusters
                        .iter()
                        .map(|c| set.require(c.head).cloned())
                        .collect::<neardup::Result<Vec<_>>>()?;
                    (items, true)
                }
                None => (set.as_slice().to_vec(), false),
            };
            let lsh = config.lsh_config(&set)?;
            let sets = derive_all(&items, &lsh)?;
            let index = build_index(&sets, &lsh, head_only)?;
            index.save(&out)?;
            let size = index.size_bytes();
            log::info!(
                "indexed {} images, {} postings; payload {:.4} and file {:.4} of 8 bytes per posting",
                index.image_count(),
                index.total_postings(),
                size.payload_ratio(),
                size.total_ratio()
            );
            Ok(())
        }
        Command::Search { index, queries, k, min_overlap, out } => {
            let index = PostingIndex::load(&index).context("loading index")?;
            let queries = embeddings(&queries)?;
            let sets = derive_all(queries.as_slice(), index.config())?;
            let hits = batch_search(&sets, &index, k, min_overlap)?;
            log::info!("{} queries, {} hits", queries.len(), hits.total_hits());
            hits.save_tsv(&out)?;
            Ok(())
        }
        Command::TrainClassifier { pairs, embeddings: e, config, out } => {
            let config = load_config(config.as_deref())?;
            let pairs = load_pairs(&pairs).context("reading pairs")?;
            let set = embeddings(&e)?;
            let report = train::<Real>(&pairs, &set, &config.classifier.train)?;
            if let Some(choice) = &report.threshold {
                log::info!(
                    "threshold {:.6}: validation precision {:.4}, recall {:.4}",
                    choice.threshold,
                    choice.precision,
                    choice.recall
                );
            } else {
                log::warn!("no threshold met the recall floor; keeping {}", report.model.threshold());
            }
            log::info!("epoch losses {:?}", report.epoch_losses);
            save_model(&out, &report.model)?;
            Ok(())
        }
        Command::Classify { model, pairs, embeddings: e, out } => {
            let model = load_model::<Real>(&model).context("loading model")?;
            let pairs = load_pairs(&pairs).context("reading pairs")?;
            let set = embeddings(&e)?;
            let ids: Vec<_> = pairs.iter().map(|p| p.ids()).collect();
            let scores = predict_pairs(&model, &ids, &set)?;
            let t = model.threshold();
            atomic_write(&out, |w| {
                for (p, s) in pairs.iter().zip(&scores) {
                    writeln!(w, "{}\t{}\t{}\t{}", p.id_a, p.id_b, s, u8::from(*s >= t))?;
                }
                Ok(())
            })?;
            let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
            match (roc_auc(&scores, &labels), pr_auc(&scores, &labels)) {
                (Ok(roc), Ok(pr)) => log::info!("PR AUC {pr:.4}, ROC AUC {roc:.4}"),
                _ => log::info!("labels hold a single class; AUCs not reported"),
            }
            Ok(())
        }
        Command::Select { hits, clusters, embeddings: e, k_aug, out, augmentation_labels, scorer } => {
            let s = scorer.resolve()?;
            let hits = SearchResultBatch::load_tsv(&hits).context("reading hits")?;
            let set = embeddings(&e)?;
            let k_aug = k_aug.unwrap_or(s.params.k_aug);
            let scorer = &*s.scorer.scorer;
            let matches = match &clusters {
                Some(path) => {
                    let heads = head_table(&load_clusters(path)?, k_aug);
                    let matches = select_candidates(&hits, &heads, scorer, &set, s.params.threshold, k_aug)?;
                    if let Some(path) = &augmentation_labels {
                        save_pairs(path, &emit_augmentation_labels(&matches, &heads)?)?;
                    }
                    matches
                }
                None => {
                    if augmentation_labels.is_some() {
                        bail!("--augmentation-labels needs --clusters");
                    }
                    verify_hits(&hits, scorer, &set, s.params.threshold)?
                }
            };
            log::info!("{} verified matches", matches.len());
            save_matches(&out, &matches)?;
            Ok(())
        }
        Command::Cluster { matches, embeddings: e, seed, out, scorer } => {
            let mut s = scorer.resolve()?;
            if let Some(seed) = seed {
                s.params.seed = seed;
            }
            let matches = load_matches(&matches).context("reading matches")?;
            let set = embeddings(&e)?;
            let mut timer = StageTimer::default();
            let clusters = cluster_matches(&matches, &set, &*s.scorer.scorer, &s.params, &mut timer)?;
            save_clusters(&out, &clusters)?;
            Ok(())
        }
        Command::Run { embeddings: e, out, report, scorer } => {
            let s = scorer.resolve()?;
            let set = embeddings(&e)?;
            let lsh = s.config.lsh_config(&set)?;
            let result = run_full(&set, &lsh, &*s.scorer.scorer, &s.params)?;
            save_clusters(&out, &result.clusters)?;
            if let Some(path) = report {
                let multi = result.clusters.iter().filter(|c| c.len() > 1).count();
                write_json(
                    &path,
                    &json!({
                        "images": set.len(),
                        "clusters": result.clusters.len(),
                        "near_dupe_clusters": multi,
                        "hits": result.hits.total_hits(),
                        "verified_matches": result.matches.len(),
                        "threshold": s.params.threshold,
                        "kcut_threshold": s.params.kcut_threshold,
                        "timings": result.timings,
                    }),
                )?;
            }
            Ok(())
        }
        Command::Incremental { store, new, out, scorer } => {
            let s = scorer.resolve()?;
            let batch = embeddings(&new)?;
            let mut cs = if ClusterStore::exists(&store) {
                ClusterStore::load(&store).context("loading store")?
            } else {
                log::info!("creating store at {}", store.display());
                ClusterStore::new(s.config.lsh_config(&batch)?)?
            };
            let result = run_incremental(&mut cs, &batch, &*s.scorer.scorer, &s.params)?;
            if batch.is_empty() {
                log::info!("empty batch; store unchanged");
                return Ok(());
            }
            cs.save(&store).context("saving store")?;
            let out = out.unwrap_or_else(|| store.join(format!("assignments-{}.tsv", result.batch_id)));
            result.save_tsv(&out)?;
            log::info!(
                "batch {}: {} images, {} new clusters, {} clusters stored",
                result.batch_id,
                result.assignments.len(),
                result.new_clusters,
                cs.cluster_count()
            );
            Ok(())
        }
        Command::Evaluate { corpus, report, distance, scorer } => {
            let s = scorer.resolve()?;
            let corpus = load_corpus(&corpus).context("loading corpus")?;
            let lsh = s.config.lsh_config(&corpus.embeddings)?;
            let r = evaluate_pipeline(&corpus, &lsh, &*s.scorer.scorer, &s.params, distance)?;
            log::info!(
                "pairwise precision {:.4}, recall {:.4}; candidate recall@{} {:.4}",
                r.pairwise.precision,
                r.pairwise.recall,
                distance,
                r.candidate_recall.recall
            );
            write_json(&report, &r)
        }
    }
}

fn gen_corpus(spec: Option<PathBuf>, out: &Path, pairs: Option<usize>, label_spec: Option<PathBuf>) -> Result<()> {
    let spec: SyntheticCorpusSpec = match spec {
        Some(p) => read_json(&p)?,
        None => SyntheticCorpusSpec::default(),
    };
    let corpus = generate_corpus(&spec)?;
    save_corpus(out, &corpus)?;
    log::info!(
        "{} images in {} groups written to {}",
        corpus.embeddings.len(),
        corpus.truth.group_count(),
        out.display()
    );
    if let Some(n) = pairs {
        let mut ls: LabelSpec = match label_spec {
            Some(p) => read_json(&p)?,
            None => LabelSpec::default(),
        };
        ls.n_pairs = n;
        let lsh = if spec.d == DEFAULT_DIM {
            Some(PipelineConfig::default().lsh_config(&corpus.embeddings)?)
        } else {
            log::info!("non-default width; drawing negatives uniformly");
            None
        };
        let labels = generate_labels(&corpus.embeddings, &corpus.truth, lsh.as_ref(), &ls)?;
        save_pairs(&out.join("pairs.csv"), &labels)?;
    }
    Ok(())
}

