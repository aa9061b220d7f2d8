//! Biometric evaluation: fold construction, genuine/impostor scoring,
//! TAR at a fixed FAR, closed-set rank-1, open-set DIR, template-size sweeps
//! and fold-aggregated reports.
//!
//! All protocols consume precomputed embeddings. Scores are computed with
//! [`cosine_similarity`] and fused with a max, so every number here is
//! bit-identical to what [`crate::matcher`] reports for the same inputs.
//! Thresholds are inclusive (`score >= t`).

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::embedding::Embedding;
use crate::matcher::{cosine_similarity, rank_order, MatchError};

pub const FAR_1: f64 = 0.01;
pub const FAR_01: f64 = 0.001;
pub const REPORT_FORMAT: u32 = 1;

const FOLD_STREAM: u64 = 1;
const TRIAL_STREAM: u64 = 2;
const SWEEP_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split error: {0}")]
    Split(String),
    #[error("FAR {far} needs at least {needed} negative scores, got {got}")]
    SampleSize { far: f64, needed: usize, got: usize },
    #[error("no genuine scores")]
    NoGenuine,
    #[error("FAR target {0} outside (0, 1)")]
    InvalidFar(f64),
    #[error("score {0} outside [-1, 1]")]
    InvalidScore(f32),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `counter`-th draw of an independent random stream.
pub fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ counter)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Shuffles individuals with a seeded PRNG and deals them into `k` test sets
/// whose sizes differ by at most one. The first `n % k` folds get the
/// larger size. Input order does not matter.
pub fn kfold_split<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(EvalError::Split(format!("k must be at least 2, got {k}")));
    }
    let mut sorted: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvalError::Split(format!("duplicate individual {}", w[0])));
    }
    if k > sorted.len() {
        return Err(EvalError::Split(format!("k = {k} exceeds {} individuals", sorted.len())));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, FOLD_STREAM, 0));
    sorted.shuffle(&mut rng);
    let (base, extra) = (sorted.len() / k, sorted.len() % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let len = base + usize::from(fold < extra);
        let mut test = sorted[start..start + len].to_vec();
        let mut train: Vec<String> = sorted[..start].iter().chain(&sorted[start + len..]).cloned().collect();
        test.sort();
        train.sort();
        folds.push(FoldSplit { fold, train, test, seed });
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub image_ref: String,
    pub embedding: Embedding,
}

/// One individual's embedded test images.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub images: Vec<LabeledEmbedding>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f32>,
    pub impostor: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreLabel {
    Genuine,
    Impostor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub probe_image: String,
    pub subject_id: String,
    pub candidate_id: String,
    pub score: f32,
    pub label: ScoreLabel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationRun {
    pub scores: ScoreSet,
    pub records: Vec<ScoreRecord>,
    /// Individuals left out because they have a single image.
    pub skipped: Vec<String>,
}

/// Eligible subjects flattened into one index space with their pairwise
/// similarity matrix.
struct Prepared<'a> {
    subjects: Vec<&'a Subject>,
    offsets: Vec<usize>,
    images: Vec<&'a Embedding>,
    sim: Vec<f32>,
    skipped: Vec<String>,
}

impl<'a> Prepared<'a> {
    fn new(test: &'a [Subject]) -> Result<Self> {
        let mut ids: Vec<&str> = test.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(EvalError::Protocol(format!("duplicate individual {}", w[0])));
        }
        let mut subjects = Vec::new();
        let mut skipped = Vec::new();
        for s in test {
            if s.images.len() < 2 {
                warn!(individual = %s.id, images = s.images.len(), "skipping individual with fewer than two images");
                skipped.push(s.id.clone());
            } else {
                subjects.push(s);
            }
        }
        let mut offsets = vec![0];
        let mut images = Vec::new();
        for s in &subjects {
            images.extend(s.images.iter().map(|i| &i.embedding));
            offsets.push(images.len());
        }
        let n = images.len();
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = cosine_similarity(images[i], images[j])?;
                sim[i * n + j] = v;
                sim[j * n + i] = v;
            }
        }
        Ok(Self {
            subjects,
            offsets,
            images,
            sim,
            skipped,
        })
    }

    fn n(&self) -> usize {
        self.images.len()
    }

    fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    fn sizes(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.images.len()).collect()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.sim[i * self.n()..(i + 1) * self.n()]
    }

    fn image_ref(&self, s: usize, global: usize) -> &str {
        &self.subjects[s].images[global - self.offsets[s]].image_ref
    }

    fn require_subjects(&self) -> Result<()> {
        if self.subjects.is_empty() {
            Err(EvalError::Protocol("no individual has at least two images".into()))
        } else {
            Ok(())
        }
    }
}

fn max_over(row: &[f32], idx: impl Iterator<Item = usize>) -> Option<f32> {
    idx.map(|j| row[j]).reduce(f32::max)
}

/// Leave-one-out verification scores. Every image of every individual is a
/// query once: its genuine score is against the individual's remaining
/// images, and it gets one impostor score per other individual's full
/// template. Individuals with one image are skipped with a warning.
pub fn verification_scores(test: &[Subject]) -> Result<VerificationRun> {
    let p = Prepared::new(test)?;
    let mut run = VerificationRun {
        skipped: p.skipped.clone(),
        ..Default::default()
    };
    for s in 0..p.subjects.len() {
        let sid = &p.subjects[s].id;
        for q in p.range(s) {
            let row = p.row(q);
            let probe = p.image_ref(s, q);
            let g = max_over(row, p.range(s).filter(|&j| j != q)).expect("at least two images");
            run.scores.genuine.push(g);
            run.records.push(ScoreRecord {
                probe_image: probe.to_string(),
                subject_id: sid.clone(),
                candidate_id: sid.clone(),
                score: g,
                label: ScoreLabel::Genuine,
            });
            for t in (0..p.subjects.len()).filter(|&t| t != s) {
                let v = max_over(row, p.range(t)).expect("non-empty template");
                run.scores.impostor.push(v);
                run.records.push(ScoreRecord {
                    probe_image: probe.to_string(),
                    subject_id: sid.clone(),
                    candidate_id: p.subjects[t].id.clone(),
                    score: v,
                    label: ScoreLabel::Impostor,
                });
            }
        }
    }
    Ok(run)
}

fn check_scores(scores: &[f32]) -> Result<()> {
    match scores.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
        Some(&s) => Err(EvalError::InvalidScore(s)),
        None => Ok(()),
    }
}

/// Smallest threshold at which at most `far` of the negative scores are
/// accepted. Candidates are the observed scores of both lists; if every
/// observed score admits too many negatives, the next float above the
/// offending negative is returned.
pub fn far_threshold(negatives: &[f32], positives: &[f32], far: f64) -> Result<f32> {
    if !(far > 0.0 && far < 1.0) {
        return Err(EvalError::InvalidFar(far));
    }
    check_scores(negatives)?;
    check_scores(positives)?;
    let n = negatives.len();
    let allowed = (far * n as f64 + 1e-9).floor() as usize;
    if allowed < 1 {
        return Err(EvalError::SampleSize {
            far,
            needed: (1.0 / far - 1e-9).ceil() as usize,
            got: n,
        });
    }
    let all = negatives.iter().chain(positives);
    if allowed >= n {
        return Ok(all.copied().reduce(f32::min).expect("non-empty"));
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let pivot = sorted[allowed];
    Ok(all.copied().filter(|&s| s > pivot).reduce(f32::min).unwrap_or(pivot.next_up()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub tar: f64,
    pub threshold: f32,
}

pub fn tar_at_far(scores: &ScoreSet, far: f64) -> Result<TarAtFar> {
    if scores.genuine.is_empty() {
        return Err(EvalError::NoGenuine);
    }
    let threshold = far_threshold(&scores.impostor, &scores.genuine, far)?;
    let hits = scores.genuine.iter().filter(|&&g| g >= threshold).count();
    Ok(TarAtFar {
        tar: hits as f64 / scores.genuine.len() as f64,
        threshold,
    })
}

/// Probe index for each individual in trial `trial`; `sizes` are image counts.
pub fn trial_probes(seed: u64, trial: usize, sizes: &[usize]) -> Vec<usize> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, TRIAL_STREAM, trial as u64));
    sizes.iter().map(|&n| rng.random_range(0..n)).collect()
}

/// Top-1 `(subject, score)` for a probe row against the trial gallery, which
/// holds every eligible image except the trial's probes.
fn top1(p: &Prepared, row: &[f32], probes: &[usize]) -> (usize, f32) {
    let mut best: Option<(usize, f32)> = None;
    for (t, &probe) in probes.iter().enumerate().take(p.subjects.len()) {
        let held_out = p.offsets[t] + probe;
        let s = max_over(row, p.range(t).filter(|&j| j != held_out)).expect("at least two images");
        let better = best.is_none_or(|(b, bs)| {
            rank_order((&p.subjects[t].id, s), (&p.subjects[b].id, bs)).is_lt()
        });
        if better {
            best = Some((t, s));
        }
    }
    best.expect("non-empty gallery")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub mean: f64,
    pub per_trial: Vec<f64>,
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        Err(EvalError::Protocol("trials must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Mean rank-1 accuracy over `trials` random probe/gallery splits. Each
/// trial draws one probe per individual (see [`trial_probes`], applied to
/// the individuals with at least two images in input order) and searches
/// the remaining images.
pub fn closed_set_rank1(test: &[Subject], trials: usize, seed: u64) -> Result<TrialSummary> {
    check_trials(trials)?;
    let p = Prepared::new(test)?;
    p.require_subjects()?;
    let sizes = p.sizes();
    let per_trial: Vec<f64> = (0..trials)
        .map(|trial| {
            let probes = trial_probes(seed, trial, &sizes);
            let correct = (0..p.subjects.len())
                .filter(|&s| top1(&p, p.row(p.offsets[s] + probes[s]), &probes).0 == s)
                .count();
            correct as f64 / p.subjects.len() as f64
        })
        .collect();
    Ok(summarize(per_trial))
}

fn summarize(per_trial: Vec<f64>) -> TrialSummary {
    TrialSummary {
        mean: per_trial.iter().sum::<f64>() / per_trial.len() as f64,
        per_trial,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetSummary {
    pub dir: TrialSummary,
    pub thresholds: Vec<f32>,
    pub distractor_probes: usize,
}

/// Open-set rank-1 detection and identification rate. Per trial the gallery
/// is built as in [`closed_set_rank1`]; the threshold is calibrated on the
/// top-1 scores of the distractor probes, and a mated probe counts when it
/// is ranked first on its own identity with a score at or above it.
pub fn open_set_dir(
    test: &[Subject],
    distractors: &[Subject],
    far: f64,
    trials: usize,
    seed: u64,
) -> Result<OpenSetSummary> {
    check_trials(trials)?;
    let p = Prepared::new(test)?;
    p.require_subjects()?;
    let distractor_images: Vec<&Embedding> =
        distractors.iter().flat_map(|d| d.images.iter().map(|i| &i.embedding)).collect();
    if distractor_images.is_empty() {
        return Err(EvalError::Protocol("open-set evaluation needs distractor probes".into()));
    }
    if let Some(d) = distractors.iter().find(|d| test.iter().any(|s| s.id == d.id)) {
        return Err(EvalError::Protocol(format!("distractor {} is also in the gallery", d.id)));
    }
    let n = p.n();
    let mut dsim = Vec::with_capacity(distractor_images.len() * n);
    for d in &distractor_images {
        for g in &p.images {
            dsim.push(cosine_similarity(d, g)?);
        }
    }
    let sizes = p.sizes();
    let mut per_trial = Vec::with_capacity(trials);
    let mut thresholds = Vec::with_capacity(trials);
    for trial in 0..trials {
        let probes = trial_probes(seed, trial, &sizes);
        let mated: Vec<(bool, f32)> = (0..p.subjects.len())
            .map(|s| {
                let (who, score) = top1(&p, p.row(p.offsets[s] + probes[s]), &probes);
                (who == s, score)
            })
            .collect();
        let negatives: Vec<f32> = dsim.chunks_exact(n).map(|row| top1(&p, row, &probes).1).collect();
        let positives: Vec<f32> = mated.iter().map(|m| m.1).collect();
        let threshold = far_threshold(&negatives, &positives, far)?;
        let hits = mated.iter().filter(|&&(ok, s)| ok && s >= threshold).count();
        per_trial.push(hits as f64 / mated.len() as f64);
        thresholds.push(threshold);
    }
    Ok(OpenSetSummary {
        dir: summarize(per_trial),
        thresholds,
        distractor_probes: distractor_images.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    /// Mean TAR over repeats.
    pub tar: f64,
    pub repeats: usize,
    pub genuine: usize,
    pub impostor: usize,
}

/// Verification TAR at `far` with every template truncated to `size`
/// randomly chosen entries (fewer when an individual has fewer images).
/// Sizes larger than any individual's leave-one-out template are skipped
/// with a warning.
pub fn template_size_sweep(
    test: &[Subject],
    sizes: &[usize],
    far: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if repeats == 0 {
        return Err(EvalError::Protocol("repeats must be at least 1".into()));
    }
    let p = Prepared::new(test)?;
    p.require_subjects()?;
    let available = p.sizes().into_iter().max().unwrap_or(0) - 1;
    let mut points = Vec::new();
    for &size in sizes {
        if size == 0 || size > available {
            warn!(size, available, "skipping template size");
            continue;
        }
        let mut total = 0.0;
        let mut scores = ScoreSet::default();
        for r in 0..repeats {
            let mut rng =
                Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, SWEEP_STREAM, ((size as u64) << 32) | r as u64));
            let orders: Vec<Vec<usize>> = (0..p.subjects.len())
                .map(|s| {
                    let mut idx: Vec<usize> = p.range(s).collect();
                    idx.shuffle(&mut rng);
                    idx
                })
                .collect();
            scores = ScoreSet::default();
            for s in 0..p.subjects.len() {
                for q in p.range(s) {
                    let row = p.row(q);
                    let own = orders[s].iter().copied().filter(|&j| j != q).take(size);
                    scores.genuine.push(max_over(row, own).expect("non-empty"));
                    for t in (0..p.subjects.len()).filter(|&t| t != s) {
                        let other = orders[t].iter().copied().take(size);
                        scores.impostor.push(max_over(row, other).expect("non-empty"));
                    }
                }
            }
            total += tar_at_far(&scores, far)?.tar;
        }
        points.push(SweepPoint {
            size,
            tar: total / repeats as f64,
            repeats,
            genuine: scores.genuine.len(),
            impostor: scores.impostor.len(),
        });
    }
    Ok(points)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when the
/// inputs differ in length, have fewer than two points, or either is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Rates for one fold as fractions in `[0, 1]`. A metric is `None` when the
/// fold is too small to estimate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub test_individuals: usize,
    pub genuine: usize,
    pub impostor: usize,
    pub distractor_probes: usize,
    pub tar_far1: Option<f64>,
    pub tar_far01: Option<f64>,
    pub rank1: Option<f64>,
    pub dir_far1: Option<f64>,
}

impl FoldMetrics {
    fn rates(&self) -> [Option<f64>; 4] {
        [self.tar_far1, self.tar_far01, self.rank1, self.dir_far1]
    }

    fn map_rates(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            tar_far1: self.tar_far1.map(&f),
            tar_far01: self.tar_far01.map(&f),
            rank1: self.rank1.map(&f),
            dir_far1: self.dir_far1.map(&f),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; a single value has zero spread.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(MeanStd { mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub tar_far1: Option<MeanStd>,
    pub tar_far01: Option<MeanStd>,
    pub rank1: Option<MeanStd>,
    pub dir_far1: Option<MeanStd>,
}

/// Fold-aggregated evaluation report. Rates are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_format: u32,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldMetrics>,
    pub summary: ReportSummary,
    pub notes: Vec<String>,
}

const METRIC_NAMES: [&str; 4] = ["TAR@1%FAR", "TAR@0.1%FAR", "Rank-1", "DIR@1%FAR"];

/// Combines exactly `k` folds (indices `0..k`, any order) into a report.
/// A summary entry is `None` unless the metric is available in every fold.
pub fn aggregate_report(mut folds: Vec<FoldMetrics>, k: usize, seed: u64) -> Result<EvalReport> {
    folds.sort_by_key(|f| f.fold);
    if folds.len() != k || folds.iter().enumerate().any(|(i, f)| f.fold != i) {
        let have: Vec<usize> = folds.iter().map(|f| f.fold).collect();
        return Err(EvalError::Report(format!("expected folds 0..{k}, got {have:?}")));
    }
    for f in &folds {
        if let Some(v) = f.rates().into_iter().flatten().find(|v| !(0.0..=1.0).contains(v)) {
            return Err(EvalError::Report(format!("fold {} has rate {v} outside [0, 1]", f.fold)));
        }
    }
    let folds: Vec<FoldMetrics> = folds.iter().map(|f| f.map_rates(|v| v * 100.0)).collect();
    let column = |i: usize| -> Option<MeanStd> {
        let vals: Option<Vec<f64>> = folds.iter().map(|f| f.rates()[i]).collect();
        vals.and_then(|v| mean_std(&v))
    };
    let summary = ReportSummary {
        tar_far1: column(0),
        tar_far01: column(1),
        rank1: column(2),
        dir_far1: column(3),
    };
    let mut notes = vec![
        "impostor comparisons pair each query with the template of every other test individual, \
         giving queries x (individuals - 1) scores per fold; counting the query's own individual \
         as well would give queries x individuals"
            .to_string(),
    ];
    for f in &folds {
        for (name, v) in METRIC_NAMES.iter().zip(f.rates()) {
            if v.is_none() {
                notes.push(format!("{name} unavailable in fold {}: too few scores for the FAR target", f.fold));
            }
        }
    }
    Ok(EvalReport {
        report_format: REPORT_FORMAT,
        k,
        seed,
        folds,
        summary,
        notes,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

fn cell_ms(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}±{:.2}", v.mean, v.std))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table: one row per fold and a mean±std row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 5]> = vec![
            ["".into(), "Verification".into(), "".into(), "Closed-set".into(), "Open-set".into()],
            [
                "Fold".into(),
                "TAR@1%FAR".into(),
                "TAR@0.1%FAR".into(),
                "Rank-1".into(),
                "Rank-1 DIR@1%FAR".into(),
            ],
        ];
        for f in &self.folds {
            let [a, b, c, d] = f.rates().map(cell);
            rows.push([f.fold.to_string(), a, b, c, d]);
        }
        let s = &self.summary;
        rows.push([
            "mean±std".into(),
            cell_ms(s.tar_far1),
            cell_ms(s.tar_far01),
            cell_ms(s.rank1),
            cell_ms(s.dir_far1),
        ]);
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(v, &w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// Score dump with columns `probe_image,subject_id,candidate_id,score,label`.
pub fn write_scores_csv<W: Write>(w: W, records: &[ScoreRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(w: W, points: &[SweepPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["size", "tar_far1", "repeats", "genuine", "impostor"])?;
    for p in points {
        out.write_record([
            p.size.to_string(),
            p.tar.to_string(),
            p.repeats.to_string(),
            p.genuine.to_string(),
            p.impostor.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
