//! Domain types shared by every stage of the toolkit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for every equality comparison on times (seconds).
pub const TIME_EPS: f64 = 1e-9;

/// A time extent in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::param(format!("non-finite segment [{start}, {end}]")));
        }
        if start < 0.0 {
            return Err(Error::param(format!("segment starts before 0: {start}")));
        }
        if end - start <= 0.0 {
            return Err(Error::param(format!("empty segment [{start}, {end}]")));
        }
        Ok(Segment { start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Length of the intersection with `other` (0 when disjoint).
    pub fn overlap(&self, other: &Segment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }
}

/// Per-segment speaker embeddings of one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence {
    pub recording_id: String,
    pub dim: usize,
    pub segments: Vec<Segment>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingSequence {
    pub fn new(
        recording_id: impl Into<String>,
        dim: usize,
        segments: Vec<Segment>,
        vectors: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let seq = EmbeddingSequence {
            recording_id: recording_id.into(),
            dim,
            segments,
            vectors,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::param("embedding dimension must be positive"));
        }
        if self.segments.is_empty() {
            return Err(Error::param(format!(
                "recording {} has no segments",
                self.recording_id
            )));
        }
        if self.segments.len() != self.vectors.len() {
            return Err(Error::param(format!(
                "{} segments but {} vectors",
                self.segments.len(),
                self.vectors.len()
            )));
        }
        for (i, v) in self.vectors.iter().enumerate() {
            if v.len() != self.dim {
                return Err(Error::param(format!(
                    "vector {i} has length {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::param(format!("vector {i} has non-finite entries")));
            }
        }
        for w in self.segments.windows(2) {
            if w[1].start + TIME_EPS < w[0].start {
                return Err(Error::param("segments are not in start order"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Embeddings as an `n x dim` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.dim));
        for (mut row, v) in m.rows_mut().into_iter().zip(&self.vectors) {
            for (dst, src) in row.iter_mut().zip(v) {
                *dst = *src;
            }
        }
        m
    }

    /// Time span from the first segment start to the last segment end.
    pub fn extent(&self) -> Segment {
        let start = self.segments.first().map_or(0.0, |s| s.start);
        let end = self
            .segments
            .iter()
            .map(|s| s.end)
            .fold(start, f64::max);
        Segment { start, end }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub segment: Segment,
    pub speaker: String,
}

/// Speaker-labelled regions for one recording. Used for both reference and
/// hypothesis; reference regions may overlap.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub recording_id: String,
    pub regions: Vec<Region>,
}

impl Annotation {
    pub fn new(recording_id: impl Into<String>) -> Self {
        Annotation {
            recording_id: recording_id.into(),
            regions: Vec::new(),
        }
    }

    pub fn push(&mut self, segment: Segment, speaker: impl Into<String>) {
        self.regions.push(Region {
            segment,
            speaker: speaker.into(),
        });
    }

    /// Distinct speaker labels in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.regions.iter().map(|r| r.speaker.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Sum of region durations (overlapping speech counted once per speaker).
    pub fn total_duration(&self) -> f64 {
        self.regions.iter().map(|r| r.segment.duration()).sum()
    }

    pub fn sort(&mut self) {
        self.regions.sort_by(|a, b| {
            a.segment
                .start
                .total_cmp(&b.segment.start)
                .then(a.segment.end.total_cmp(&b.segment.end))
                .then_with(|| a.speaker.cmp(&b.speaker))
        });
    }
}

/// Square matrix of pairwise segment scores, indexed in embedding order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::param(format!("similarity matrix is {r}x{c}")));
        }
        if r == 0 {
            return Err(Error::param("similarity matrix is empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("similarity matrix has non-finite entries".into()));
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if flat.len() != n * n {
            return Err(Error::param("rows do not form a square matrix"));
        }
        Self::new(Array2::from_shape_vec((n, n), flat).expect("checked shape"))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.n();
        (0..n).all(|i| (i + 1..n).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &SimilarityMatrix) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `P S P^T` for the permutation that sends index `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SimilarityMatrix {
        let n = self.n();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                out[[perm[i], perm[j]]] = self.values[[i, j]];
            }
        }
        SimilarityMatrix { values: out }
    }
}
