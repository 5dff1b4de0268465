//! End-to-end diarization and the k-fold experiment driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::{
    ahc, spectral_cluster, tune_thresholds, AhcConfig, Backend, SpectralConfig, TuneResult, TuningItem,
};
use crate::domain::{Annotation, EmbeddingSequence, SimilarityMatrix};
use crate::enhance::enhance;
use crate::error::{Error, Result, StageExt};
use crate::eval::{der, duration_stratified_ttest, kfold_split, labels_to_annotation, DerReport, TTestResult, DEFAULT_COLLAR};
use crate::neural::{train_with, EpochLog, PairSeqModel, TrainConfig, TrainingItem, DEFAULT_MAX_BLOCK};
use crate::par;
use crate::scoring::{fuse, plda_fit, similarity_matrix, PldaModel, ScorerKind, ScoringModels};
use crate::segmentation::segment_label;
use crate::synth::Conversation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scorer: ScorerKind,
    #[serde(default = "yes")]
    pub enhance: bool,
    pub backend: Backend,
    /// β for spectral clustering, α for AHC.
    pub threshold: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_block")]
    pub max_block: usize,
}

fn yes() -> bool {
    true
}

fn default_block() -> usize {
    DEFAULT_MAX_BLOCK
}

/// Trained models available to the scorers.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub plda: Option<PldaModel>,
    pub neural: Option<PairSeqModel>,
}

impl Models {
    fn scoring(&self, max_block: usize) -> ScoringModels<'_> {
        ScoringModels {
            plda: self.plda.as_ref(),
            neural: self.neural.as_ref(),
            max_block,
        }
    }
}

/// Scores a recording and optionally enhances the matrix.
pub fn score_recording(
    seq: &EmbeddingSequence,
    scorer: ScorerKind,
    do_enhance: bool,
    models: &Models,
    max_block: usize,
) -> Result<SimilarityMatrix> {
    let s = similarity_matrix(seq, scorer, &models.scoring(max_block)).stage("scoring")?;
    if do_enhance {
        enhance(&s).stage("enhancement")
    } else {
        Ok(s)
    }
}

pub fn cluster_matrix(s: &SimilarityMatrix, backend: Backend, threshold: f64, seed: u64) -> Result<Vec<usize>> {
    match backend {
        Backend::Spectral => spectral_cluster(s, &SpectralConfig::new(threshold, seed)),
        Backend::Ahc => ahc(s, &AhcConfig::new(threshold)),
    }
    .stage("clustering")
}

/// Similarity matrix, optional enhancement, clustering, hypothesis.
pub fn diarize(seq: &EmbeddingSequence, cfg: &PipelineConfig, models: &Models) -> Result<Annotation> {
    let s = score_recording(seq, cfg.scorer, cfg.enhance, models, cfg.max_block)?;
    let labels = cluster_matrix(&s, cfg.backend, cfg.threshold, cfg.seed)?;
    labels_to_annotation(&seq.recording_id, &seq.segments, &labels).stage("hypothesis")
}

/// A recording with its reference annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub seq: EmbeddingSequence,
    pub reference: Annotation,
}

impl Recording {
    pub fn duration(&self) -> f64 {
        self.seq.extent().end
    }

    /// Reference speaker of each segment, `None` where no one talks in the
    /// segment's central region.
    pub fn segment_labels(&self) -> Vec<Option<String>> {
        self.seq.segments.iter().map(|s| segment_label(s, &self.reference)).collect()
    }
}

impl From<Conversation> for Recording {
    fn from(c: Conversation) -> Self {
        Recording {
            seq: c.seq,
            reference: c.reference,
        }
    }
}

/// Pairs embedding sequences with references by recording id.
pub fn join_corpus(seqs: Vec<EmbeddingSequence>, refs: Vec<Annotation>) -> Result<Vec<Recording>> {
    let mut by_id: BTreeMap<String, Annotation> = refs.into_iter().map(|a| (a.recording_id.clone(), a)).collect();
    seqs.into_iter()
        .map(|seq| {
            let reference = by_id
                .remove(&seq.recording_id)
                .ok_or_else(|| Error::Config(format!("no reference for recording {}", seq.recording_id)))?;
            Ok(Recording { seq, reference })
        })
        .collect()
}

/// PLDA trained on every labelled segment. Speaker identities are scoped
/// to their recording.
pub fn fit_plda(train: &[&Recording]) -> Result<PldaModel> {
    let mut data = Vec::new();
    for rec in train {
        for (v, l) in rec.seq.vectors.iter().zip(rec.segment_labels()) {
            if let Some(l) = l {
                data.push((v.clone(), format!("{}/{}", rec.seq.recording_id, l)));
            }
        }
    }
    plda_fit(&data).stage("plda training")
}

/// Training items with unlabelled segments dropped.
pub fn training_items(train: &[&Recording]) -> Result<Vec<TrainingItem>> {
    let mut items = Vec::new();
    for rec in train {
        let labels = rec.segment_labels();
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        if keep.is_empty() {
            continue;
        }
        let seq = EmbeddingSequence::new(
            rec.seq.recording_id.clone(),
            rec.seq.dim,
            keep.iter().map(|&i| rec.seq.segments[i]).collect(),
            keep.iter().map(|&i| rec.seq.vectors[i].clone()).collect(),
        )?;
        let labels = keep.iter().map(|&i| labels[i].clone().expect("kept")).collect();
        items.push(TrainingItem { seq, labels });
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub scorer: ScorerKind,
    pub backend: Backend,
    #[serde(default = "yes")]
    pub enhance: bool,
}

impl SystemSpec {
    pub fn new(scorer: ScorerKind, backend: Backend) -> Self {
        SystemSpec {
            name: format!("{scorer}+{backend}"),
            scorer,
            backend,
            enhance: true,
        }
    }
}

/// Weighted sum of several scorers' matrices, clustered as one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub name: String,
    pub scorers: Vec<ScorerKind>,
    pub weights: Vec<f64>,
    pub backend: Backend,
}

/// Every field has a default, so a config file only needs the fields it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub folds: usize,
    /// Evaluate only these folds (all when empty).
    #[serde(default)]
    pub only_folds: Vec<usize>,
    pub seed: u64,
    pub systems: Vec<SystemSpec>,
    #[serde(default)]
    pub fusions: Vec<FusionSpec>,
    pub beta_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub lstm: TrainConfig,
    /// Block size for Bi-LSTM inference.
    pub max_block: usize,
    /// When false, fusion sums raw matrices and enhances the sum instead of
    /// summing enhanced matrices.
    #[serde(default = "yes")]
    pub fuse_after_enhance: bool,
    /// Two system names to compare per duration group.
    #[serde(default)]
    pub ttest: Option<(String, String)>,
}

/// Evenly spaced grid `lo, lo+step, ..` up to `hi`, rounded to 1e-9.
pub fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            folds: 5,
            only_folds: Vec::new(),
            seed: 0,
            systems: vec![
                SystemSpec::new(ScorerKind::Plda, Backend::Ahc),
                SystemSpec::new(ScorerKind::Plda, Backend::Spectral),
                SystemSpec::new(ScorerKind::Neural, Backend::Spectral),
            ],
            fusions: Vec::new(),
            beta_grid: grid(0.02, 1.0, 0.02),
            alpha_grid: grid(0.02, 0.98, 0.02),
            lstm: TrainConfig::default(),
            max_block: DEFAULT_MAX_BLOCK,
            fuse_after_enhance: true,
            ttest: None,
        }
    }
}

impl ExperimentConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.folds < 2 || self.folds > n {
            return Err(Error::Config(format!("cannot run {} folds on {n} recordings", self.folds)));
        }
        if self.only_folds.iter().any(|&f| f >= self.folds) {
            return Err(Error::Config("fold index out of range".into()));
        }
        if self.beta_grid.is_empty() || self.alpha_grid.is_empty() {
            return Err(Error::Config("threshold grids must not be empty".into()));
        }
        let mut names: Vec<&str> = self
            .systems
            .iter()
            .map(|s| s.name.as_str())
            .chain(self.fusions.iter().map(|f| f.name.as_str()))
            .collect();
        if names.is_empty() {
            return Err(Error::Config("no systems to evaluate".into()));
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("system names must be unique".into()));
        }
        for f in &self.fusions {
            if f.scorers.len() != f.weights.len() || f.scorers.len() < 2 {
                return Err(Error::Config(format!("fusion {} needs matching scorers and weights", f.name)));
            }
        }
        if let Some((a, b)) = &self.ttest {
            for s in [a, b] {
                if names.binary_search(&s.as_str()).is_err() {
                    return Err(Error::Config(format!("t-test names unknown system {s}")));
                }
            }
        }
        Ok(())
    }

    fn grid_for(&self, backend: Backend) -> &[f64] {
        match backend {
            Backend::Spectral => &self.beta_grid,
            Backend::Ahc => &self.alpha_grid,
        }
    }

    fn needs(&self, scorer: ScorerKind) -> bool {
        self.systems.iter().any(|s| s.scorer == scorer) || self.fusions.iter().any(|f| f.scorers.contains(&scorer))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Tuned threshold and training-fold DER grid per system.
    pub tuning: BTreeMap<String, TuneResult>,
    /// Pooled test DER per system.
    pub der: BTreeMap<String, DerReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lstm_history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub name: String,
    pub der_percent: f64,
    pub totals: DerReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingRow {
    pub recording_id: String,
    pub fold: usize,
    pub duration: f64,
    /// DER percentage per system.
    pub der_percent: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestReport {
    pub system_a: String,
    pub system_b: String,
    pub groups: Vec<TTestResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub folds: Vec<FoldReport>,
    pub systems: Vec<SystemRow>,
    pub recordings: Vec<RecordingRow>,
    pub ttest: Option<TTestReport>,
}

impl ExperimentReport {
    pub fn system(&self, name: &str) -> Option<&SystemRow> {
        self.systems.iter().find(|s| s.name == name)
    }

    /// Human-readable DER table, plus the t-test table when present.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let width = self.systems.iter().map(|s| s.name.len()).max().unwrap_or(6).max(6);
        writeln!(out, "{:<width$}  {:>8}  {:>10}  {:>10}", "system", "DER (%)", "scored (s)", "confused").unwrap();
        for s in &self.systems {
            writeln!(
                out,
                "{:<width$}  {:>8.2}  {:>10.1}  {:>10.1}",
                s.name, s.der_percent, s.totals.scored_time, s.totals.confusion
            )
            .unwrap();
        }
        if let Some(t) = &self.ttest {
            writeln!(out).unwrap();
            writeln!(out, "{:>6}  {:>10}  {:>10}  {:>8}  H0", "group", t.system_a, t.system_b, "t").unwrap();
            for (g, r) in t.groups.iter().enumerate() {
                writeln!(
                    out,
                    "{:>6}  {:>10.2}  {:>10.2}  {:>8.2}  {}",
                    g + 1,
                    r.mean_a,
                    r.mean_b,
                    r.t_value,
                    if r.h0_accepted { "accepted" } else { "rejected" }
                )
                .unwrap();
            }
        }
        out
    }
}

/// Runs every configured system through k-fold cross-validation.
///
/// Per fold, models are fitted on the training folds, thresholds are tuned
/// on the training recordings' own outputs, and the held-out fold is scored
/// with the tuned thresholds. DER is pooled over all test recordings.
pub fn run_experiment(corpus: &[Recording], cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(corpus, cfg, &mut |_, _| {})
}

/// As [`run_experiment`], reporting Bi-LSTM epochs through `progress`.
pub fn run_experiment_with(
    corpus: &[Recording],
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(usize, &EpochLog),
) -> Result<ExperimentReport> {
    cfg.validate(corpus.len())?;
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let folds = kfold_split(&ids, cfg.folds, cfg.seed)?;
    let names: Vec<String> = cfg
        .systems
        .iter()
        .map(|s| s.name.clone())
        .chain(cfg.fusions.iter().map(|f| f.name.clone()))
        .collect();

    let mut fold_reports = Vec::new();
    let mut per_recording: BTreeMap<usize, (usize, BTreeMap<String, DerReport>)> = BTreeMap::new();
    for (f, test) in folds.iter().enumerate() {
        if !cfg.only_folds.is_empty() && !cfg.only_folds.contains(&f) {
            continue;
        }
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        if train.iter().any(|i| test.contains(i)) {
            return Err(Error::Config("a test recording leaked into training".into()));
        }
        let (report, recs) = run_fold(corpus, cfg, f, &train, test, &mut |e| progress(f, e))?;
        for (i, ders) in recs {
            per_recording.insert(i, (f, ders));
        }
        fold_reports.push(report);
    }

    let systems = names
        .iter()
        .map(|name| {
            let totals = DerReport::aggregate(per_recording.values().map(|(_, d)| &d[name]));
            SystemRow {
                name: name.clone(),
                der_percent: 100.0 * totals.der,
                totals,
            }
        })
        .collect();
    let recordings: Vec<RecordingRow> = per_recording
        .iter()
        .map(|(&i, (fold, ders))| RecordingRow {
            recording_id: corpus[i].seq.recording_id.clone(),
            fold: *fold,
            duration: corpus[i].duration(),
            der_percent: ders.iter().map(|(k, d)| (k.clone(), 100.0 * d.der)).collect(),
        })
        .collect();
    let ttest = match &cfg.ttest {
        Some((a, b)) => {
            let pick = |name: &str| -> Vec<(f64, f64)> { recordings.iter().map(|r| (r.duration, r.der_percent[name])).collect() };
            Some(TTestReport {
                system_a: a.clone(),
                system_b: b.clone(),
                groups: duration_stratified_ttest(&pick(a), &pick(b)).stage("t-test")?,
            })
        }
        None => None,
    };
    Ok(ExperimentReport {
        config: cfg.clone(),
        folds: fold_reports,
        systems,
        recordings,
        ttest,
    })
}

type MatrixKey = (ScorerKind, bool);

fn run_fold(
    corpus: &[Recording],
    cfg: &ExperimentConfig,
    fold: usize,
    train: &[usize],
    test: &[usize],
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(FoldReport, Vec<(usize, BTreeMap<String, DerReport>)>)> {
    let train_recs: Vec<&Recording> = train.iter().map(|&i| &corpus[i]).collect();
    let mut models = Models::default();
    if cfg.needs(ScorerKind::Plda) {
        models.plda = Some(fit_plda(&train_recs)?);
    }
    let mut lstm_history = Vec::new();
    if cfg.needs(ScorerKind::Neural) {
        let items = training_items(&train_recs)?;
        let lstm_cfg = TrainConfig {
            seed: cfg.lstm.seed ^ (fold as u64),
            ..cfg.lstm.clone()
        };
        let outcome = train_with(&items, &lstm_cfg, |e| progress(e)).stage("bi-lstm training")?;
        lstm_history = outcome.history;
        models.neural = Some(outcome.model);
    }

    // every (scorer, enhanced?) matrix any system needs, for train and test
    let mut keys: Vec<MatrixKey> = cfg.systems.iter().map(|s| (s.scorer, s.enhance)).collect();
    for fu in &cfg.fusions {
        keys.extend(fu.scorers.iter().map(|&s| (s, cfg.fuse_after_enhance)));
    }
    keys.sort_by_key(|(s, e)| (s.to_string(), *e));
    keys.dedup();
    let all: Vec<usize> = train.iter().chain(test).copied().collect();
    let mut matrices: BTreeMap<(String, bool), Vec<SimilarityMatrix>> = BTreeMap::new();
    for &(scorer, enh) in &keys {
        let ms = par::map(&all, |&i| score_recording(&corpus[i].seq, scorer, enh, &models, cfg.max_block));
        matrices.insert((scorer.to_string(), enh), ms.into_iter().collect::<Result<_>>()?);
    }
    let get = |scorer: ScorerKind, enh: bool| &matrices[&(scorer.to_string(), enh)];

    // (name, backend, matrices over `all`)
    let mut evaluated: Vec<(String, Backend, Vec<SimilarityMatrix>)> = Vec::new();
    for s in &cfg.systems {
        evaluated.push((s.name.clone(), s.backend, get(s.scorer, s.enhance).clone()));
    }
    for fu in &cfg.fusions {
        let fused = (0..all.len())
            .map(|r| {
                let parts: Vec<SimilarityMatrix> = fu.scorers.iter().map(|&s| get(s, cfg.fuse_after_enhance)[r].clone()).collect();
                let m = fuse(&parts, &fu.weights).stage("fusion")?;
                if cfg.fuse_after_enhance {
                    Ok(m)
                } else {
                    enhance(&m).stage("enhancement")
                }
            })
            .collect::<Result<Vec<_>>>()?;
        evaluated.push((fu.name.clone(), fu.backend, fused));
    }

    let mut tuning = BTreeMap::new();
    let mut fold_der = BTreeMap::new();
    let mut rec_der: Vec<(usize, BTreeMap<String, DerReport>)> = test.iter().map(|&i| (i, BTreeMap::new())).collect();
    let seed = cfg.seed;
    for (name, backend, ms) in evaluated {
        let items: Vec<TuningItem<'_>> = train
            .iter()
            .enumerate()
            .map(|(k, &i)| TuningItem {
                matrix: &ms[k],
                reference: &corpus[i].reference,
                seq: &corpus[i].seq,
            })
            .collect();
        let tuned = tune_thresholds(&items, cfg.grid_for(backend), backend, seed).stage("threshold tuning")?;
        let offset = train.len();
        let reports = par::map(&(0..test.len()).collect::<Vec<_>>(), |&k| -> Result<DerReport> {
            let rec = &corpus[test[k]];
            let labels = cluster_matrix(&ms[offset + k], backend, tuned.best, seed)?;
            let hyp = labels_to_annotation(&rec.seq.recording_id, &rec.seq.segments, &labels)?;
            Ok(der(&rec.reference, &hyp, DEFAULT_COLLAR, true))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        fold_der.insert(name.clone(), DerReport::aggregate(&reports));
        for (slot, r) in rec_der.iter_mut().zip(reports) {
            slot.1.insert(name.clone(), r);
        }
        tuning.insert(name, tuned);
    }

    let report = FoldReport {
        fold,
        train_ids: train.iter().map(|&i| corpus[i].seq.recording_id.clone()).collect(),
        test_ids: test.iter().map(|&i| corpus[i].seq.recording_id.clone()).collect(),
        tuning,
        der: fold_der,
        lstm_history,
    };
    Ok((report, rec_der))
}
