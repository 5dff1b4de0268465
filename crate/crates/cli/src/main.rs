//! `simdiar` command-line tool.
//!
//! Every subcommand writes into `--out` and leaves a `manifest.json` there
//! with the exact arguments it ran with.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use simdiar::cluster::Backend;
use simdiar::enhance::enhance;
use simdiar::eval::{der, labels_to_annotation, DerReport, DEFAULT_COLLAR};
use simdiar::io::{
    load_pair_seq, load_plda, read_corpus, read_embeddings, read_rttm, save_model, write_corpus, write_rttm,
    Checkpoint, Model,
};
use simdiar::neural::{train_with, TrainConfig, DEFAULT_MAX_BLOCK};
use simdiar::pipeline::{
    cluster_matrix, diarize, fit_plda, run_experiment_with, score_recording, training_items, ExperimentConfig,
    Models, PipelineConfig, Recording,
};
use simdiar::scoring::{fuse, ScorerKind};
use simdiar::synth::{gen_corpus, CorpusConfig};
use simdiar::{Annotation, Error, Result};

#[derive(Parser)]
#[command(name = "simdiar", version, about = "Speaker diarization backend on precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (embeddings + reference RTTM).
    Gen(GenArgs),
    /// Fit a PLDA model on a corpus.
    TrainPlda(TrainPldaArgs),
    /// Train the Bi-LSTM similarity scorer on a corpus.
    TrainLstm(TrainLstmArgs),
    /// Diarize every recording of an embedding archive.
    Diarize(DiarizeArgs),
    /// Score a hypothesis RTTM against a reference RTTM.
    Eval(EvalArgs),
    /// Run the k-fold experiment on a corpus.
    Experiment(ExperimentArgs),
    /// Diarize with a weighted sum of several scorers' matrices.
    Fuse(FuseArgs),
}

#[derive(Args, Serialize)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    recordings: usize,
    #[arg(long, default_value_t = 3)]
    min_speakers: usize,
    #[arg(long, default_value_t = 5)]
    max_speakers: usize,
    /// Shortest recording, whole seconds.
    #[arg(long, default_value_t = 60)]
    min_duration: u32,
    #[arg(long, default_value_t = 600)]
    max_duration: u32,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Probability of keeping the current speaker at each one-second step.
    #[arg(long, default_value_t = 0.9)]
    hold: f64,
    #[arg(long, default_value_t = 0.5)]
    within: f64,
    #[arg(long, default_value_t = 1.0)]
    between: f64,
}

#[derive(Args, Serialize)]
struct TrainPldaArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory as written by `gen`.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainLstmArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    fc_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_block: Option<usize>,
    #[arg(long)]
    blocks_per_recording: Option<usize>,
    /// Randomly rotate each recording's embeddings every epoch.
    #[arg(long)]
    rotate_embeddings: bool,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// PLDA checkpoint, required by the plda scorer.
    #[arg(long)]
    plda: Option<PathBuf>,
    /// Bi-LSTM checkpoint, required by the lstm scorer.
    #[arg(long)]
    lstm: Option<PathBuf>,
    /// Block size for Bi-LSTM inference.
    #[arg(long, default_value_t = DEFAULT_MAX_BLOCK)]
    max_block: usize,
}

#[derive(Args, Serialize)]
struct DiarizeArgs {
    #[command(flatten)]
    common: Common,
    /// Embedding archive.
    #[arg(long)]
    embeddings: PathBuf,
    /// cosine, plda or lstm.
    #[arg(long, default_value = "cosine")]
    scorer: String,
    /// sc (spectral) or ahc.
    #[arg(long, default_value = "sc")]
    backend: String,
    /// β for spectral clustering, α for AHC.
    #[arg(long)]
    threshold: f64,
    /// Cluster the raw similarity matrix.
    #[arg(long)]
    no_enhance: bool,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    hypothesis: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COLLAR)]
    collar: f64,
    /// Score overlapped speech too.
    #[arg(long)]
    keep_overlap: bool,
}

#[derive(Args, Serialize)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON experiment config; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    /// Fuse raw matrices and enhance the sum, instead of fusing enhanced
    /// matrices.
    #[arg(long)]
    refuse_enhance_order: bool,
}

#[derive(Args, Serialize)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    embeddings: PathBuf,
    /// Comma-separated scorers, e.g. `plda,lstm`.
    #[arg(long, value_delimiter = ',')]
    scorers: Vec<String>,
    /// One weight per scorer.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value = "sc")]
    backend: String,
    #[arg(long)]
    threshold: f64,
    #[arg(long)]
    refuse_enhance_order: bool,
    #[command(flatten)]
    models: ModelArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::TrainPlda(a) => train_plda(a),
        Command::TrainLstm(a) => train_lstm(a),
        Command::Diarize(a) => diarize_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Experiment(a) => experiment(a),
        Command::Fuse(a) => fuse_cmd(a),
    }
}

trait Stage<T> {
    fn at(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.into().in_stage(stage))
    }
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    /// Fully resolved configuration, defaults included.
    config: C,
    outputs: Vec<String>,
}

fn write_manifest<A: Serialize, C: Serialize>(out: &Path, command: &str, args: &A, config: C, outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args,
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n").at("writing manifest")
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).at("creating output directory")
}

fn gen(a: GenArgs) -> Result<()> {
    prepare(&a.common.out)?;
    let cfg = CorpusConfig {
        n_recordings: a.recordings,
        min_speakers: a.min_speakers,
        max_speakers: a.max_speakers,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        embedding_dim: a.dim,
        turn_hold_prob: a.hold,
        within_spread: a.within,
        between_spread: a.between,
        seed: a.common.seed,
    };
    let corpus: Vec<Recording> = gen_corpus(&cfg).at("generation")?.into_iter().map(Recording::from).collect();
    write_corpus(&a.common.out, &corpus).at("writing corpus")?;
    println!("wrote {} recordings to {}", corpus.len(), a.common.out.display());
    write_manifest(&a.common.out, "gen", &a, &cfg, &["embeddings.emb", "reference.rttm"])
}

fn load_corpus(dir: &Path) -> Result<Vec<Recording>> {
    read_corpus(dir).at("reading corpus")
}

fn train_plda(a: TrainPldaArgs) -> Result<()> {
    prepare(&a.common.out)?;
    let corpus = load_corpus(&a.corpus)?;
    let refs: Vec<&Recording> = corpus.iter().collect();
    let model = fit_plda(&refs).at("plda training")?;
    let ckpt = Checkpoint {
        model: Model::Plda(model),
        config: Some(serde_json::json!({ "recordings": corpus.len() })),
    };
    save_model(a.common.out.join("plda.ckpt"), &ckpt).at("saving model")?;
    println!("PLDA fitted on {} recordings", corpus.len());
    write_manifest(&a.common.out, "train-plda", &a, (), &["plda.ckpt"])
}

fn train_lstm(a: TrainLstmArgs) -> Result<()> {
    prepare(&a.common.out)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p).at("reading config")?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.common.seed;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
    cfg.fc_dim = a.fc_dim.unwrap_or(cfg.fc_dim);
    cfg.lr0 = a.lr.unwrap_or(cfg.lr0);
    cfg.max_block = a.max_block.unwrap_or(cfg.max_block);
    if a.blocks_per_recording.is_some() {
        cfg.blocks_per_recording = a.blocks_per_recording;
    }
    cfg.rotate_embeddings |= a.rotate_embeddings;
    let corpus = load_corpus(&a.corpus)?;
    let refs: Vec<&Recording> = corpus.iter().collect();
    let items = training_items(&refs).at("preparing training data")?;
    let mut log = String::new();
    let outcome = train_with(&items, &cfg, |e| {
        let line = format!("{} {} {:.6}", e.epoch, e.lr, e.mean_loss);
        println!("epoch {line}");
        log.push_str(&line);
        log.push('\n');
    })
    .at("bi-lstm training")?;
    fs::write(a.common.out.join("train.log"), log).at("writing log")?;
    let ckpt = Checkpoint {
        model: Model::PairSeq(outcome.model),
        config: Some(serde_json::to_value(&cfg)?),
    };
    save_model(a.common.out.join("lstm.ckpt"), &ckpt).at("saving model")?;
    write_manifest(&a.common.out, "train-lstm", &a, &cfg, &["lstm.ckpt", "train.log"])
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_models(m: &ModelArgs, scorers: &[ScorerKind]) -> Result<Models> {
    let mut models = Models::default();
    for s in scorers {
        match s {
            ScorerKind::Plda if models.plda.is_none() => {
                let p = m.plda.as_ref().ok_or_else(|| Error::Config("the plda scorer needs --plda".into()))?;
                models.plda = Some(load_plda(p)?);
            }
            ScorerKind::Neural if models.neural.is_none() => {
                let p = m.lstm.as_ref().ok_or_else(|| Error::Config("the lstm scorer needs --lstm".into()))?;
                models.neural = Some(load_pair_seq(p)?);
            }
            _ => {}
        }
    }
    Ok(models)
}

fn diarize_cmd(a: DiarizeArgs) -> Result<()> {
    prepare(&a.common.out)?;
    let cfg = PipelineConfig {
        scorer: a.scorer.parse().at("parsing arguments")?,
        enhance: !a.no_enhance,
        backend: a.backend.parse().at("parsing arguments")?,
        threshold: a.threshold,
        seed: a.common.seed,
        max_block: a.models.max_block,
    };
    let models = load_models(&a.models, &[cfg.scorer]).at("loading models")?;
    let seqs = read_embeddings(&a.embeddings).at("reading embeddings")?;
    let hyps = seqs.iter().map(|s| diarize(s, &cfg, &models)).collect::<Result<Vec<Annotation>>>()?;
    write_rttm(a.common.out.join("hypothesis.rttm"), &hyps).at("writing hypothesis")?;
    println!("diarized {} recordings", hyps.len());
    write_manifest(&a.common.out, "diarize", &a, &cfg, &["hypothesis.rttm"])
}

#[derive(Serialize)]
struct EvalReport {
    total: DerReport,
    recordings: BTreeMap<String, DerReport>,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    prepare(&a.common.out)?;
    let refs = read_rttm(&a.reference).at("reading reference")?;
    let hyps: BTreeMap<String, Annotation> = read_rttm(&a.hypothesis)
        .at("reading hypothesis")?
        .into_iter()
        .map(|h| (h.recording_id.clone(), h))
        .collect();
    let mut recordings = BTreeMap::new();
    for r in &refs {
        // a recording with no hypothesis lines is all missed speech
        let empty = Annotation::new(r.recording_id.clone());
        let h = hyps.get(&r.recording_id).unwrap_or(&empty);
        recordings.insert(r.recording_id.clone(), der(r, h, a.collar, !a.keep_overlap));
    }
    let total = DerReport::aggregate(recordings.values());
    println!(
        "DER {:.3}% (scored {:.3} s, confusion {:.3} s, missed {:.3} s, false alarm {:.3} s)",
        100.0 * total.der,
        total.scored_time,
        total.confusion,
        total.missed,
        total.false_alarm
    );
    let report = EvalReport { total, recordings };
    fs::write(a.common.out.join("der.json"), serde_json::to_string_pretty(&report)? + "\n")
        .at("writing report")?;
    write_manifest(&a.common.out, "eval", &a, (), &["der.json"])
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    prepare(&a.common.out)?;
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => read_json(p).at("reading config")?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = a.common.seed;
    cfg.folds = a.folds.unwrap_or(cfg.folds);
    if a.refuse_enhance_order {
        cfg.fuse_after_enhance = false;
    }
    let corpus = load_corpus(&a.corpus)?;
    let report = run_experiment_with(&corpus, &cfg, &mut |fold, e| {
        eprintln!("fold {fold} epoch {} lr {} loss {:.6}", e.epoch, e.lr, e.mean_loss);
    })
    .at("experiment")?;
    let summary = report.summary();
    print!("{summary}");
    fs::write(a.common.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")
        .at("writing report")?;
    fs::write(a.common.out.join("summary.txt"), summary).at("writing report")?;
    write_manifest(&a.common.out, "experiment", &a, &cfg, &["report.json", "summary.txt"])
}

fn fuse_cmd(a: FuseArgs) -> Result<()> {
    prepare(&a.common.out)?;
    let scorers = a
        .scorers
        .iter()
        .map(|s| s.parse::<ScorerKind>())
        .collect::<Result<Vec<_>>>()
        .at("parsing arguments")?;
    let backend: Backend = a.backend.parse().at("parsing arguments")?;
    let models = load_models(&a.models, &scorers).at("loading models")?;
    let after = !a.refuse_enhance_order;
    let seqs = read_embeddings(&a.embeddings).at("reading embeddings")?;
    let mut hyps = Vec::new();
    for seq in &seqs {
        let parts = scorers
            .iter()
            .map(|&s| score_recording(seq, s, after, &models, a.models.max_block))
            .collect::<Result<Vec<_>>>()?;
        let mut s = fuse(&parts, &a.weights).at("fusion")?;
        if !after {
            s = enhance(&s).at("enhancement")?;
        }
        let labels = cluster_matrix(&s, backend, a.threshold, a.common.seed)?;
        hyps.push(labels_to_annotation(&seq.recording_id, &seq.segments, &labels).at("hypothesis")?);
    }
    write_rttm(a.common.out.join("hypothesis.rttm"), &hyps).at("writing hypothesis")?;
    println!("diarized {} recordings with {} fused scorers", hyps.len(), scorers.len());
    let config = serde_json::json!({
        "scorers": scorers,
        "weights": a.weights,
        "backend": backend,
        "threshold": a.threshold,
        "fuse_after_enhance": after,
    });
    write_manifest(&a.common.out, "fuse", &a, config, &["hypothesis.rttm"])
}
