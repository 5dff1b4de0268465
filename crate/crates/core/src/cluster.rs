//! Spectral clustering with eigenvalue-threshold cluster counting, k-means,
//! agglomerative clustering, and threshold tuning against DER.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Annotation, EmbeddingSequence, SimilarityMatrix};
use crate::enhance::symmetrize;
use crate::error::{Error, Result};
use crate::eval::{der, labels_to_annotation, DerReport, DEFAULT_COLLAR};
use crate::par;

pub const DEFAULT_KMEANS_RESTARTS: usize = 10;
pub const DEFAULT_KMEANS_MAX_ITER: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    /// Eigenvalues strictly below this count as clusters.
    pub beta: f64,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub seed: u64,
    pub k_override: Option<usize>,
}

impl SpectralConfig {
    pub fn new(beta: f64, seed: u64) -> Self {
        SpectralConfig {
            beta,
            kmeans_restarts: DEFAULT_KMEANS_RESTARTS,
            kmeans_max_iter: DEFAULT_KMEANS_MAX_ITER,
            seed,
            k_override: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.kmeans_restarts == 0 || self.kmeans_max_iter == 0 {
            return Err(Error::Config("k-means restarts and iterations must be positive".into()));
        }
        if self.k_override == Some(0) {
            return Err(Error::Config("k override must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Average,
    Single,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AhcConfig {
    /// Merging stops once no pair of clusters is at least this similar.
    pub alpha: f64,
    pub linkage: Linkage,
}

impl AhcConfig {
    pub fn new(alpha: f64) -> Self {
        AhcConfig {
            alpha,
            linkage: Linkage::Average,
        }
    }
}

fn check_nonnegative(s: &SimilarityMatrix) -> Result<()> {
    if s.values().iter().any(|v| *v < 0.0) {
        return Err(Error::param("clustering needs nonnegative similarities"));
    }
    Ok(())
}

/// Random-walk Laplacian `D⁻¹(D − S)` of `S` with its diagonal zeroed, plus
/// the degree vector. Zero-degree rows stay zero, so an isolated node
/// contributes a zero eigenvalue and ends up in a cluster of its own.
pub fn laplacian(s: &SimilarityMatrix) -> Result<(Array2<f64>, Array1<f64>)> {
    check_nonnegative(s)?;
    let mut a = s.values().clone();
    a.diag_mut().fill(0.0);
    let degrees = a.sum_axis(ndarray::Axis(1));
    let n = a.nrows();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        let d = degrees[i];
        if d <= 0.0 {
            continue;
        }
        for j in 0..n {
            l[[i, j]] = if i == j { 1.0 } else { -a[[i, j]] / d };
        }
    }
    Ok((l, degrees))
}

/// Number of eigenvalues below `beta`, never less than 1.
pub fn estimate_k(eigenvalues: &[f64], beta: f64) -> usize {
    eigenvalues.iter().filter(|&&l| l < beta).count().max(1)
}

/// Eigenpairs of the normalised Laplacian, eigenvalues ascending. Vectors
/// (columns) are eigenvectors of `D⁻¹L`.
#[derive(Clone, Debug)]
pub struct SpectralEmbedding {
    pub eigenvalues: Vec<f64>,
    pub vectors: Array2<f64>,
}

impl SpectralEmbedding {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Rows of the first `k` eigenvectors.
    pub fn rows(&self, k: usize) -> ArrayView2<'_, f64> {
        self.vectors.slice(ndarray::s![.., ..k])
    }
}

/// Solves the symmetric problem `I − D^{-1/2} S D^{-1/2}`, which has the same
/// spectrum as `D⁻¹L`, and maps vectors back through `D^{-1/2}`.
pub fn spectral_embedding(s: &SimilarityMatrix) -> Result<SpectralEmbedding> {
    check_nonnegative(s)?;
    let mut a = s.values().clone();
    a.diag_mut().fill(0.0);
    let a = symmetrize(&a);
    let n = a.nrows();
    let degrees = a.sum_axis(ndarray::Axis(1));
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let sym = DMatrix::from_fn(n, n, |i, j| {
        if degrees[i] <= 0.0 || degrees[j] <= 0.0 {
            0.0
        } else if i == j {
            1.0 - a[[i, j]] * inv_sqrt[i] * inv_sqrt[j]
        } else {
            -a[[i, j]] * inv_sqrt[i] * inv_sqrt[j]
        }
    });
    let eig = SymmetricEigen::try_new(sym, 1e-14, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let eigenvalues = order.iter().map(|&c| eig.eigenvalues[c]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &c) in order.iter().enumerate() {
        for i in 0..n {
            let scale = if degrees[i] > 0.0 { inv_sqrt[i] } else { 1.0 };
            vectors[[i, col]] = eig.eigenvectors[(i, c)] * scale;
        }
    }
    Ok(SpectralEmbedding { eigenvalues, vectors })
}

pub fn spectral_cluster(s: &SimilarityMatrix, cfg: &SpectralConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let emb = spectral_embedding(s)?;
    Ok(cluster_embedding(&emb, cfg))
}

/// Steps after the eigendecomposition: pick k, then k-means on the rows.
pub fn cluster_embedding(emb: &SpectralEmbedding, cfg: &SpectralConfig) -> Vec<usize> {
    let k = cfg
        .k_override
        .unwrap_or_else(|| estimate_k(&emb.eigenvalues, cfg.beta))
        .min(emb.n());
    cluster_rows(emb, k, cfg)
}

fn cluster_rows(emb: &SpectralEmbedding, k: usize, cfg: &SpectralConfig) -> Vec<usize> {
    if k == 1 {
        return vec![0; emb.n()];
    }
    kmeans(emb.rows(k), k, cfg.kmeans_restarts, cfg.kmeans_max_iter, cfg.seed).labels
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Objective after each assignment step of the winning restart.
    pub history: Vec<f64>,
    pub restart: usize,
}

/// Lloyd's algorithm from k-means++ seeds; the restart with the lowest
/// inertia wins, earlier restarts winning ties. Labels are renumbered by
/// first appearance.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, restarts: usize, max_iter: usize, seed: u64) -> KMeans {
    let k = k.clamp(1, points.nrows().max(1));
    let runs: Vec<usize> = (0..restarts.max(1)).collect();
    let results = par::map(&runs, |&r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        lloyd(points, k, max_iter, &mut rng, r)
    });
    let mut best = results
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("at least one restart");
    relabel_by_appearance(&mut best.labels);
    best
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn assign(points: ArrayView2<'_, f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> (f64, bool) {
    let mut inertia = 0.0;
    let mut changed = false;
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..centroids.nrows() {
            let d = sq_dist(points.row(i), centroids.row(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        if *label != best.1 {
            changed = true;
            *label = best.1;
        }
        inertia += best.0;
    }
    (inertia, changed)
}

fn lloyd(points: ArrayView2<'_, f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng, restart: usize) -> KMeans {
    let n = points.nrows();
    let mut centroids = plus_plus(points, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let (inertia, changed) = assign(points, &centroids, &mut labels);
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &points.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
            // an empty cluster keeps its old centroid
        }
    }
    let inertia = *history.last().unwrap_or(&0.0);
    KMeans {
        labels,
        centroids,
        inertia,
        history,
        restart,
    }
}

pub(crate) fn relabel_by_appearance(labels: &mut [usize]) {
    let mut map = HashMap::new();
    for l in labels.iter_mut() {
        let next = map.len();
        *l = *map.entry(*l).or_insert(next);
    }
}

/// One merge of the agglomerative tree: clusters named by their smallest
/// member index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

/// Complete merge history of agglomerative clustering down to one cluster.
#[derive(Clone, Debug)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn build(s: &SimilarityMatrix, linkage: Linkage) -> Result<Self> {
        check_nonnegative(s)?;
        let mut sim = symmetrize(s.values());
        let n = sim.nrows();
        let mut size = vec![1usize; n];
        let mut active = vec![true; n];
        let mut merges = Vec::with_capacity(n.saturating_sub(1));
        for _ in 1..n {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for i in 0..n {
                if !active[i] {
                    continue;
                }
                let row = sim.row(i);
                for j in (i + 1)..n {
                    if active[j] && row[j] > best.0 {
                        best = (row[j], i, j);
                    }
                }
            }
            let (similarity, a, b) = best;
            merges.push(Merge { a, b, similarity });
            let (na, nb) = (size[a] as f64, size[b] as f64);
            for c in 0..n {
                if !active[c] || c == a || c == b {
                    continue;
                }
                let (sa, sb) = (sim[[a, c]], sim[[b, c]]);
                let v = match linkage {
                    Linkage::Average => (na * sa + nb * sb) / (na + nb),
                    Linkage::Single => sa.max(sb),
                    Linkage::Complete => sa.min(sb),
                };
                sim[[a, c]] = v;
                sim[[c, a]] = v;
            }
            size[a] += size[b];
            active[b] = false;
        }
        Ok(Dendrogram { n, merges })
    }

    /// Labels after replaying merges until the next one falls below `alpha`.
    pub fn cut(&self, alpha: f64) -> Vec<usize> {
        let applied = self.merges.iter().take_while(|m| m.similarity >= alpha).count();
        self.cut_after(applied)
    }

    pub fn cut_after(&self, merges: usize) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn root(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for m in &self.merges[..merges] {
            let (ra, rb) = (root(&mut parent, m.a), root(&mut parent, m.b));
            parent[rb] = ra;
        }
        let mut labels: Vec<usize> = (0..self.n).map(|i| root(&mut parent, i)).collect();
        relabel_by_appearance(&mut labels);
        labels
    }
}

pub fn ahc(s: &SimilarityMatrix, cfg: &AhcConfig) -> Result<Vec<usize>> {
    if !cfg.alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be finite, got {}", cfg.alpha)));
    }
    Ok(Dendrogram::build(s, cfg.linkage)?.cut(cfg.alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Spectral,
    Ahc,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Spectral => "sc",
            Backend::Ahc => "ahc",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" | "spectral" => Ok(Backend::Spectral),
            "ahc" => Ok(Backend::Ahc),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// A training recording as seen by threshold tuning.
pub struct TuningItem<'a> {
    pub matrix: &'a SimilarityMatrix,
    pub reference: &'a Annotation,
    pub seq: &'a EmbeddingSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: f64,
    /// Aggregate DER for every grid point, in grid order.
    pub grid_der: Vec<(f64, f64)>,
}

/// Picks the grid threshold with the lowest aggregate DER on `items`.
/// When several grid points tie, the longest run of consecutive tied points
/// wins (the first such run) and the threshold in its middle is taken, so
/// the choice keeps as much margin as the training data allows.
pub fn tune_thresholds(
    items: &[TuningItem<'_>],
    grid: &[f64],
    backend: Backend,
    seed: u64,
) -> Result<TuneResult> {
    if items.is_empty() || grid.is_empty() {
        return Err(Error::param("threshold tuning needs recordings and a nonempty grid"));
    }
    let reports: Vec<Result<Vec<DerReport>>> = par::map(items, |item| match backend {
        Backend::Spectral => {
            let emb = spectral_embedding(item.matrix)?;
            spectral_sweep(&emb, grid, seed)
                .into_iter()
                .map(|labels| score_labels(item, &labels))
                .collect()
        }
        Backend::Ahc => {
            let tree = Dendrogram::build(item.matrix, Linkage::Average)?;
            grid.iter().map(|&a| score_labels(item, &tree.cut(a))).collect()
        }
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let grid_der: Vec<(f64, f64)> = grid
        .iter()
        .enumerate()
        .map(|(g, &t)| (t, DerReport::aggregate(reports.iter().map(|r| &r[g])).der))
        .collect();
    let lowest = grid_der.iter().map(|&(_, d)| d).fold(f64::INFINITY, f64::min);
    let mut run: (usize, usize) = (0, 0);
    let mut start = None;
    for (g, &(_, d)) in grid_der.iter().enumerate() {
        match (d == lowest, start) {
            (true, None) => start = Some(g),
            (false, Some(s)) => {
                if g - s > run.1 - run.0 {
                    run = (s, g);
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if grid_der.len() - s > run.1 - run.0 {
            run = (s, grid_der.len());
        }
    }
    Ok(TuneResult {
        best: grid_der[(run.0 + run.1 - 1) / 2].0,
        grid_der,
    })
}

/// Spectral labels for each β in `grid`, reusing one eigendecomposition and
/// one k-means run per distinct k.
pub fn spectral_sweep(emb: &SpectralEmbedding, grid: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut by_k: HashMap<usize, Vec<usize>> = HashMap::new();
    grid.iter()
        .map(|&beta| {
            let cfg = SpectralConfig::new(beta, seed);
            let k = estimate_k(&emb.eigenvalues, beta).min(emb.n());
            by_k.entry(k).or_insert_with(|| cluster_rows(emb, k, &cfg)).clone()
        })
        .collect()
}

fn score_labels(item: &TuningItem<'_>, labels: &[usize]) -> Result<DerReport> {
    let hyp = labels_to_annotation(&item.seq.recording_id, &item.seq.segments, labels)?;
    Ok(der(item.reference, &hyp, DEFAULT_COLLAR, true))
}
