//! Glue shared by the command line and the HTTP service: dataset manifests,
//! model loading, align-then-embed, and cross-validated evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::align::{align_face, AlignError, LandmarkSet, LandmarkTemplate, SimilarityParams};
use crate::embedding::Embedding;
use crate::eval::{
    self, aggregate_report, closed_set_rank1, derive_seed, kfold_split, open_set_dir, tar_at_far,
    template_size_sweep, verification_scores, EvalError, EvalReport, FoldMetrics, LabeledEmbedding, ScoreRecord,
    Subject, SweepPoint, FAR_01, FAR_1,
};
use crate::gallery::Species;
use crate::model::{build_primnet, load_weights, train, ModelError, PrimNet, PrimNetConfig, TrainingSample};

const FOLD_TRIAL_STREAM: u64 = 10;
const FOLD_TRAIN_STREAM: u64 = 11;
const FOLD_SWEEP_STREAM: u64 = 12;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{image} is {w}x{h}; images without landmarks must already be {expected_w}x{expected_h} crops")]
    NotACrop {
        image: String,
        w: u32,
        h: u32,
        expected_w: u32,
        expected_h: u32,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Landmarks in the flat wire layout used by CSV rows and JSON payloads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub lx: f64,
    pub ly: f64,
    pub rx: f64,
    pub ry: f64,
    pub mx: f64,
    pub my: f64,
}

impl Landmarks {
    pub fn to_set(&self, image_ref: &str) -> Result<LandmarkSet, AlignError> {
        LandmarkSet::new(image_ref, [self.lx, self.ly], [self.rx, self.ry], [self.mx, self.my])
    }

    pub fn from_set(lm: &LandmarkSet) -> Self {
        Self {
            lx: lm.left_eye[0],
            ly: lm.left_eye[1],
            rx: lm.right_eye[0],
            ry: lm.right_eye[1],
            mx: lm.mouth[0],
            my: lm.mouth[1],
        }
    }
}

/// One image of a dataset manifest. Images without landmarks must already
/// be aligned crops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Landmarks>,
    pub individual: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub species: Species,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Directory that relative image paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    /// Reads a JSON array of entries; image paths are relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let entries: Vec<DatasetEntry> = serde_json::from_str(&text).map_err(|e| PipelineError::Manifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.entries).expect("entries serialize");
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn image_path(&self, entry: &DatasetEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn filter_species(&self, species: Option<Species>) -> Self {
        Self {
            root: self.root.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| species.is_none_or(|s| e.species == s))
                .cloned()
                .collect(),
        }
    }

    /// Landmark sets of every annotated entry.
    pub fn landmark_sets(&self) -> Result<Vec<LandmarkSet>> {
        self.entries
            .iter()
            .filter_map(|e| e.landmarks.map(|l| l.to_set(&e.image)))
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    }

    /// Aligned crops for every entry, in manifest order.
    pub fn crops(&self, template: &LandmarkTemplate) -> Result<Vec<CropSample>> {
        self.entries
            .iter()
            .map(|e| {
                let img = read_rgb(self.image_path(e))?;
                let lm = e.landmarks.map(|l| l.to_set(&e.image)).transpose()?;
                let (crop, _) = crop_face(&img, lm.as_ref(), template, &e.image)?;
                Ok(CropSample {
                    individual: e.individual.clone(),
                    image_ref: e.image.clone(),
                    crop,
                })
            })
            .collect()
    }
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    image::open(path).map(|i| i.to_rgb8()).map_err(|source| PipelineError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Aligns `img` with its landmarks, or checks that an unannotated image is
/// already a crop of the template's canvas size.
pub fn crop_face(
    img: &RgbImage,
    landmarks: Option<&LandmarkSet>,
    template: &LandmarkTemplate,
    image_ref: &str,
) -> Result<(RgbImage, Option<SimilarityParams>)> {
    match landmarks {
        Some(lm) => {
            let (crop, params) = align_face(img, lm, template)?;
            Ok((crop, Some(params)))
        }
        None => {
            let [w, h] = template.canvas;
            if img.dimensions() != (w, h) {
                return Err(PipelineError::NotACrop {
                    image: image_ref.to_string(),
                    w: img.width(),
                    h: img.height(),
                    expected_w: w,
                    expected_h: h,
                });
            }
            Ok((img.clone(), None))
        }
    }
}

pub fn load_model_config(path: impl AsRef<Path>) -> Result<PrimNetConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let cfg: PrimNetConfig = serde_json::from_str(&text).map_err(|e| PipelineError::Manifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads weights for `cfg` (the default architecture when `None`).
pub fn load_model(weights: impl AsRef<Path>, cfg: Option<&PrimNetConfig>) -> Result<PrimNet> {
    let default = PrimNetConfig::default();
    let cfg = cfg.unwrap_or(&default);
    let w = load_weights(weights)?;
    Ok(PrimNet::from_weights(cfg, &w)?)
}

/// A loaded model paired with the landmark template its crops are aligned to.
#[derive(Clone, Debug)]
pub struct Recognizer {
    model: PrimNet,
    template: LandmarkTemplate,
}

impl Recognizer {
    pub fn new(model: PrimNet, template: LandmarkTemplate) -> Self {
        Self { model, template }
    }

    pub fn model(&self) -> &PrimNet {
        &self.model
    }

    pub fn template(&self) -> &LandmarkTemplate {
        &self.template
    }

    pub fn crop(
        &self,
        img: &RgbImage,
        landmarks: Option<&LandmarkSet>,
        image_ref: &str,
    ) -> Result<(RgbImage, Option<SimilarityParams>)> {
        crop_face(img, landmarks, &self.template, image_ref)
    }

    pub fn embed_crop(&self, crop: &RgbImage) -> Result<Embedding> {
        Ok(self.model.forward_embed(crop)?)
    }

    pub fn embed(&self, img: &RgbImage, landmarks: Option<&LandmarkSet>, image_ref: &str) -> Result<Embedding> {
        let (crop, _) = self.crop(img, landmarks, image_ref)?;
        self.embed_crop(&crop)
    }
}

#[derive(Clone, Debug)]
pub struct CropSample {
    pub individual: String,
    pub image_ref: String,
    pub crop: RgbImage,
}

/// Embeds samples and groups them by individual, sorted by id.
pub fn embed_subjects<'a>(
    model: &PrimNet,
    samples: impl IntoIterator<Item = &'a CropSample>,
) -> Result<Vec<Subject>> {
    let mut by_id: BTreeMap<&str, Vec<LabeledEmbedding>> = BTreeMap::new();
    for s in samples {
        by_id.entry(&s.individual).or_default().push(LabeledEmbedding {
            image_ref: s.image_ref.clone(),
            embedding: model.forward_embed(&s.crop)?,
        });
    }
    Ok(by_id
        .into_iter()
        .map(|(id, images)| Subject {
            id: id.to_string(),
            images,
        })
        .collect())
}

/// Where evaluation embeddings come from.
#[derive(Clone, Copy, Debug)]
pub enum EmbeddingSource<'a> {
    /// One fixed model for every fold.
    Pretrained(&'a PrimNet),
    /// A fresh model trained on each fold's training individuals.
    TrainPerFold(&'a PrimNetConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub seed: u64,
    pub trials: usize,
    /// Template sizes for the sweep; `None` sweeps 1 up to the largest size
    /// every fold supports.
    pub sweep_sizes: Option<Vec<usize>>,
    pub sweep_repeats: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            trials: 100,
            sweep_sizes: None,
            sweep_repeats: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub scores: Vec<ScoreRecord>,
    /// Sweep TAR averaged over folds.
    pub sweep: Vec<SweepPoint>,
}

fn optional<T>(r: Result<T, EvalError>) -> Result<Option<T>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::SampleSize { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metrics for one fold's embedded test individuals.
pub fn fold_metrics(
    fold: usize,
    test: &[Subject],
    distractors: &[Subject],
    trials: usize,
    seed: u64,
) -> Result<(FoldMetrics, Vec<ScoreRecord>), EvalError> {
    let run = verification_scores(test)?;
    let trial_seed = derive_seed(seed, FOLD_TRIAL_STREAM, fold as u64);
    let rank1 = closed_set_rank1(test, trials, trial_seed)?;
    let dir = optional(open_set_dir(test, distractors, FAR_1, trials, trial_seed))?;
    let distractor_probes = distractors.iter().map(|d| d.images.len()).sum();
    let metrics = FoldMetrics {
        fold,
        test_individuals: test.len() - run.skipped.len(),
        genuine: run.scores.genuine.len(),
        impostor: run.scores.impostor.len(),
        distractor_probes,
        tar_far1: optional(tar_at_far(&run.scores, FAR_1))?.map(|r| r.tar),
        tar_far01: optional(tar_at_far(&run.scores, FAR_01))?.map(|r| r.tar),
        rank1: Some(rank1.mean),
        dir_far1: dir.map(|d| d.dir.mean),
    };
    Ok((metrics, run.records))
}

/// K-fold evaluation split by individual. Open-set distractors come from
/// `distractors` when given, otherwise from the fold's training individuals.
pub fn evaluate(
    samples: &[CropSample],
    distractors: Option<&[CropSample]>,
    source: EmbeddingSource,
    opts: &EvalOptions,
) -> Result<EvalOutput> {
    let mut ids: Vec<&str> = samples.iter().map(|s| s.individual.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let folds = kfold_split(&ids, opts.k, opts.seed)?;

    let shared = match source {
        EmbeddingSource::Pretrained(model) => Some(embed_subjects(model, samples)?),
        EmbeddingSource::TrainPerFold(_) => None,
    };
    let external = match (source, distractors) {
        (EmbeddingSource::Pretrained(model), Some(d)) => Some(embed_subjects(model, d)?),
        _ => None,
    };

    let mut metrics = Vec::with_capacity(folds.len());
    let mut scores = Vec::new();
    let mut fold_sweeps = Vec::with_capacity(folds.len());
    for split in &folds {
        let in_test = |id: &str| split.test.binary_search_by(|t| t.as_str().cmp(id)).is_ok();
        let (test, fold_distractors) = match (source, &shared) {
            (EmbeddingSource::Pretrained(_), Some(all)) => {
                let (test, train): (Vec<Subject>, Vec<Subject>) = all.iter().cloned().partition(|s| in_test(&s.id));
                (test, external.clone().unwrap_or(train))
            }
            (EmbeddingSource::TrainPerFold(cfg), _) => {
                let mut cfg = cfg.clone();
                cfg.train.seed = derive_seed(opts.seed, FOLD_TRAIN_STREAM, split.fold as u64);
                let train_set: Vec<TrainingSample> = samples
                    .iter()
                    .filter(|s| !in_test(&s.individual))
                    .map(|s| TrainingSample {
                        crop: s.crop.clone(),
                        label: s.individual.clone(),
                    })
                    .collect();
                info!(fold = split.fold, images = train_set.len(), "training fold model");
                let mut model = build_primnet(&cfg)?;
                train(&mut model, &train_set, &cfg.train)?;
                let test = embed_subjects(&model, samples.iter().filter(|s| in_test(&s.individual)))?;
                let d = match distractors {
                    Some(d) => embed_subjects(&model, d)?,
                    None => embed_subjects(&model, samples.iter().filter(|s| !in_test(&s.individual)))?,
                };
                (test, d)
            }
            _ => unreachable!("pretrained embeddings are computed up front"),
        };
        let (m, records) = fold_metrics(split.fold, &test, &fold_distractors, opts.trials, opts.seed)?;
        info!(fold = split.fold, ?m, "fold evaluated");
        metrics.push(m);
        scores.extend(records);

        let max_size = test.iter().map(|s| s.images.len()).max().unwrap_or(1).saturating_sub(1);
        let sizes = opts.sweep_sizes.clone().unwrap_or_else(|| (1..=max_size).collect());
        let sweep_seed = derive_seed(opts.seed, FOLD_SWEEP_STREAM, split.fold as u64);
        fold_sweeps.push(optional(template_size_sweep(&test, &sizes, FAR_1, opts.sweep_repeats, sweep_seed))?);
    }

    let mut report = aggregate_report(metrics, opts.k, opts.seed)?;
    report.notes.push(match (source, distractors) {
        (_, Some(d)) => format!("open-set distractor probes: {} images from a separate distractor set", d.len()),
        (_, None) => "open-set distractor probes: images of each fold's training individuals".to_string(),
    });
    let sweep = merge_sweeps(fold_sweeps.into_iter().flatten().collect());
    Ok(EvalOutput { report, scores, sweep })
}

/// Averages per-fold sweep points over the folds that reached each size.
fn merge_sweeps(folds: Vec<Vec<SweepPoint>>) -> Vec<SweepPoint> {
    let mut by_size: BTreeMap<usize, Vec<&SweepPoint>> = BTreeMap::new();
    for p in folds.iter().flatten() {
        by_size.entry(p.size).or_default().push(p);
    }
    by_size
        .into_iter()
        .map(|(size, pts)| SweepPoint {
            size,
            tar: pts.iter().map(|p| p.tar).sum::<f64>() / pts.len() as f64,
            repeats: pts.iter().map(|p| p.repeats).sum(),
            genuine: pts.iter().map(|p| p.genuine).sum(),
            impostor: pts.iter().map(|p| p.impostor).sum(),
        })
        .collect()
}

/// Spearman correlation between template size and TAR across a sweep.
pub fn sweep_trend(points: &[SweepPoint]) -> Option<f64> {
    let sizes: Vec<f64> = points.iter().map(|p| p.size as f64).collect();
    let tars: Vec<f64> = points.iter().map(|p| p.tar).collect();
    eval::spearman(&sizes, &tars)
}
