//! Synthetic conversations with known speaker turns.
//!
//! Each speaker gets a centroid drawn from `N(0, between² I)`. Turns follow a
//! first-order Markov chain with one switch opportunity per second, at
//! `k + 0.125` s; the timeline is then cut into the usual 1.5 s / 0.75 s
//! windows, each window is labelled by its central region, and its
//! embedding is the labelled speaker's centroid plus `N(0, within² I)`
//! noise. The 0.125 s offset keeps every true turn change within 0.25 s of
//! where a perfect clustering would put it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Annotation, EmbeddingSequence, Segment};
use crate::error::{Error, Result};
use crate::par;
use crate::segmentation::{segment_label, uniform_segment, DEFAULT_STEP, DEFAULT_WINDOW};

pub const MIN_SPEAKERS: usize = 2;
pub const MAX_SPEAKERS: usize = 7;
const MAX_ATTEMPTS: usize = 100;
const SWITCH_OFFSET: f64 = 0.125;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub recording_id: String,
    pub num_speakers: usize,
    /// Whole seconds.
    pub duration: u32,
    pub embedding_dim: usize,
    /// Probability of keeping the current speaker at each switch opportunity.
    pub turn_hold_prob: f64,
    pub within_spread: f64,
    pub between_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            recording_id: "synth".into(),
            num_speakers: 3,
            duration: 300,
            embedding_dim: 16,
            turn_hold_prob: 0.9,
            within_spread: 0.5,
            between_spread: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_SPEAKERS..=MAX_SPEAKERS).contains(&self.num_speakers) {
            return Err(Error::Config(format!(
                "num_speakers must be in [{MIN_SPEAKERS}, {MAX_SPEAKERS}], got {}",
                self.num_speakers
            )));
        }
        if self.duration == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("duration and embedding_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.turn_hold_prob) {
            return Err(Error::Config("turn_hold_prob must be a probability".into()));
        }
        // zero within-speaker spread is the noiseless limit and is allowed
        if !(self.within_spread >= 0.0) || !self.within_spread.is_finite() {
            return Err(Error::Config("within_spread must be nonnegative".into()));
        }
        if !(self.between_spread > 0.0) || !self.between_spread.is_finite() {
            return Err(Error::Config("between_spread must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub seq: EmbeddingSequence,
    pub reference: Annotation,
    /// Speaker of each segment, as used to draw its embedding.
    pub labels: Vec<String>,
}

impl Conversation {
    pub fn duration(&self) -> f64 {
        self.seq.extent().end
    }
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i}")
}

pub fn gen_conversation(cfg: &SynthConfig) -> Result<Conversation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let between = Normal::new(0.0, cfg.between_spread).map_err(|e| Error::Config(e.to_string()))?;
    let within = Normal::new(0.0, cfg.within_spread).map_err(|e| Error::Config(e.to_string()))?;
    let centroids: Vec<Vec<f64>> = (0..cfg.num_speakers)
        .map(|_| (0..cfg.embedding_dim).map(|_| between.sample(&mut rng)).collect())
        .collect();
    let total = f64::from(cfg.duration);
    let segments = uniform_segment(&[Segment::new(0.0, total)?], DEFAULT_WINDOW, DEFAULT_STEP)?;

    for _ in 0..MAX_ATTEMPTS {
        let reference = markov_turns(cfg, &mut rng);
        let labels: Option<Vec<String>> = segments.iter().map(|s| segment_label(s, &reference)).collect();
        let Some(labels) = labels else { continue };
        let mut seen = labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != cfg.num_speakers || reference.speakers().len() != cfg.num_speakers {
            continue;
        }
        let vectors = labels
            .iter()
            .map(|l| {
                let c = &centroids[speaker_index(l)];
                c.iter().map(|m| m + within.sample(&mut rng)).collect()
            })
            .collect();
        let seq = EmbeddingSequence::new(cfg.recording_id.clone(), cfg.embedding_dim, segments, vectors)?;
        return Ok(Conversation { seq, reference, labels });
    }
    Err(Error::Generation(format!(
        "{} s is too short to fit {} speakers after {MAX_ATTEMPTS} attempts",
        cfg.duration, cfg.num_speakers
    )))
}

fn speaker_index(name: &str) -> usize {
    name.trim_start_matches("spk").parse().expect("generated speaker name")
}

fn markov_turns(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Annotation {
    let total = f64::from(cfg.duration);
    let mut ann = Annotation::new(cfg.recording_id.clone());
    let mut speaker = rng.random_range(0..cfg.num_speakers);
    let mut start = 0.0;
    for k in 1..cfg.duration {
        let t = f64::from(k) + SWITCH_OFFSET;
        if t >= total {
            break;
        }
        if rng.random::<f64>() >= cfg.turn_hold_prob {
            let mut next = rng.random_range(0..cfg.num_speakers - 1);
            if next >= speaker {
                next += 1;
            }
            ann.push(Segment { start, end: t }, speaker_name(speaker));
            speaker = next;
            start = t;
        }
    }
    ann.push(Segment { start, end: total }, speaker_name(speaker));
    ann
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_recordings: usize,
    pub min_speakers: usize,
    pub max_speakers: usize,
    pub min_duration: u32,
    pub max_duration: u32,
    pub embedding_dim: usize,
    pub turn_hold_prob: f64,
    pub within_spread: f64,
    pub between_spread: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let c = SynthConfig::default();
        CorpusConfig {
            n_recordings: 100,
            min_speakers: 3,
            max_speakers: 5,
            min_duration: 60,
            max_duration: 600,
            embedding_dim: c.embedding_dim,
            turn_hold_prob: c.turn_hold_prob,
            within_spread: c.within_spread,
            between_spread: c.between_spread,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Per-recording configs, drawn from one master generator.
    pub fn recordings(&self) -> Result<Vec<SynthConfig>> {
        if self.n_recordings == 0 {
            return Err(Error::Config("corpus needs at least one recording".into()));
        }
        if self.min_speakers > self.max_speakers || self.min_duration > self.max_duration {
            return Err(Error::Config("empty speaker or duration range".into()));
        }
        let mut master = ChaCha8Rng::seed_from_u64(self.seed);
        let width = (self.n_recordings - 1).to_string().len();
        Ok((0..self.n_recordings)
            .map(|i| SynthConfig {
                recording_id: format!("rec{i:0width$}"),
                num_speakers: master.random_range(self.min_speakers..=self.max_speakers),
                duration: master.random_range(self.min_duration..=self.max_duration),
                embedding_dim: self.embedding_dim,
                turn_hold_prob: self.turn_hold_prob,
                within_spread: self.within_spread,
                between_spread: self.between_spread,
                seed: master.random(),
            })
            .collect())
    }
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Vec<Conversation>> {
    let configs = cfg.recordings()?;
    par::map(&configs, gen_conversation).into_iter().collect()
}
