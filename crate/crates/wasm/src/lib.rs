//! Browser bindings for a small interactive diarization demo.
//!
//! A [`Demo`] holds one generated conversation, its cosine similarity matrix,
//! the enhanced matrix and the spectral embedding of whichever matrix is
//! active. Moving the β slider only re-runs k-means on the cached
//! eigenvectors, so it stays interactive for a few hundred segments.

use wasm_bindgen::prelude::*;

use simdiar::cluster::{cluster_embedding, estimate_k, spectral_embedding, SpectralConfig, SpectralEmbedding};
use simdiar::enhance::enhance;
use simdiar::eval::{der, labels_to_annotation, DEFAULT_COLLAR};
use simdiar::scoring::{similarity_matrix, ScorerKind, ScoringModels};
use simdiar::synth::{gen_conversation, Conversation, SynthConfig};
use simdiar::{Result, SimilarityMatrix};

#[wasm_bindgen]
pub struct Demo {
    conv: Conversation,
    raw: SimilarityMatrix,
    enhanced: SimilarityMatrix,
    use_enhanced: bool,
    embedding: SpectralEmbedding,
    seed: u64,
}

#[wasm_bindgen]
impl Demo {
    /// Generates a conversation and scores it with cosine similarity.
    #[wasm_bindgen(constructor)]
    pub fn new(speakers: usize, duration: u32, within: f64, between: f64, seed: u64) -> std::result::Result<Demo, String> {
        Demo::build(speakers, duration, within, between, seed).map_err(|e| e.to_string())
    }

    /// Number of segments.
    pub fn n(&self) -> usize {
        self.raw.n()
    }

    /// Raw cosine similarities, row-major.
    pub fn raw_matrix(&self) -> Vec<f64> {
        flat(&self.raw)
    }

    /// The enhanced matrix, row-major.
    pub fn enhanced_matrix(&self) -> Vec<f64> {
        flat(&self.enhanced)
    }

    /// Chooses which matrix spectral clustering works on.
    pub fn set_enhanced(&mut self, on: bool) -> std::result::Result<(), String> {
        if on != self.use_enhanced {
            self.use_enhanced = on;
            self.embedding = spectral_embedding(self.active()).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Ascending Laplacian eigenvalues of the active matrix.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.embedding.eigenvalues.clone()
    }

    pub fn estimate_k(&self, beta: f64) -> usize {
        estimate_k(&self.embedding.eigenvalues, beta)
    }

    /// Spectral cluster label of every segment at threshold `beta`.
    pub fn cluster(&self, beta: f64) -> Vec<u32> {
        let cfg = SpectralConfig::new(beta, self.seed);
        cluster_embedding(&self.embedding, &cfg).into_iter().map(|l| l as u32).collect()
    }

    /// Reference speaker index of every segment.
    pub fn reference_labels(&self) -> Vec<u32> {
        let mut names: Vec<&String> = self.conv.labels.iter().collect();
        names.sort();
        names.dedup();
        self.conv
            .labels
            .iter()
            .map(|l| names.iter().position(|n| *n == l).unwrap_or(0) as u32)
            .collect()
    }

    /// DER of the clustering at `beta`, in percent.
    pub fn der_percent(&self, beta: f64) -> std::result::Result<f64, String> {
        let labels: Vec<usize> = self.cluster(beta).into_iter().map(|l| l as usize).collect();
        let hyp = labels_to_annotation(&self.conv.seq.recording_id, &self.conv.seq.segments, &labels)
            .map_err(|e| e.to_string())?;
        Ok(100.0 * der(&self.conv.reference, &hyp, DEFAULT_COLLAR, true).der)
    }
}

impl Demo {
    fn build(speakers: usize, duration: u32, within: f64, between: f64, seed: u64) -> Result<Demo> {
        let conv = gen_conversation(&SynthConfig {
            recording_id: "demo".into(),
            num_speakers: speakers,
            duration,
            within_spread: within,
            between_spread: between,
            seed,
            ..SynthConfig::default()
        })?;
        let raw = similarity_matrix(&conv.seq, ScorerKind::Cosine, &ScoringModels::default())?;
        let enhanced = enhance(&raw)?;
        let embedding = spectral_embedding(&enhanced)?;
        Ok(Demo {
            conv,
            raw,
            enhanced,
            use_enhanced: true,
            embedding,
            seed,
        })
    }

    fn active(&self) -> &SimilarityMatrix {
        if self.use_enhanced {
            &self.enhanced
        } else {
            &self.raw
        }
    }
}

fn flat(s: &SimilarityMatrix) -> Vec<f64> {
    s.values().iter().copied().collect()
}
