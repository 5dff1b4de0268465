//! Baseline pair scorers (cosine, two-covariance PLDA), logistic score
//! normalisation, full-matrix construction and matrix-level fusion.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingSequence, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::neural::{self, PairSeqModel};

/// Diagonal loading added to both PLDA covariances.
pub const PLDA_EPSILON: f64 = 1e-6;

/// Slope of the logistic that maps PLDA log-likelihood ratios into (0, 1).
const LOGISTIC_SLOPE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Cosine,
    Plda,
    Neural,
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::Cosine => "cosine",
            ScorerKind::Plda => "plda",
            ScorerKind::Neural => "lstm",
        })
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(ScorerKind::Cosine),
            "plda" => Ok(ScorerKind::Plda),
            "neural" | "lstm" => Ok(ScorerKind::Neural),
            other => Err(Error::Config(format!("unknown scorer '{other}'"))),
        }
    }
}

/// `1 / (1 + exp(-5x))`.
pub fn logistic_normalize(x: f64) -> f64 {
    1.0 / (1.0 + (-LOGISTIC_SLOPE * x).exp())
}

/// Cosine similarity mapped affinely onto [0, 1].
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::param("cosine score of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(0.5 * (1.0 + cos))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Between- and within-speaker scatter of labelled vectors.
///
/// Between is the covariance of the per-speaker means around their unweighted
/// average; within is the pooled scatter of every vector around its speaker
/// mean. Neither is regularised.
pub fn two_covariance(vectors: &[Vec<f64>], labels: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
    if vectors.len() != labels.len() || vectors.is_empty() {
        return Err(Error::param("two_covariance needs one label per vector"));
    }
    let d = vectors[0].len();
    let n_spk = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = Array2::<f64>::zeros((n_spk, d));
    let mut counts = vec![0usize; n_spk];
    for (v, &l) in vectors.iter().zip(labels) {
        counts[l] += 1;
        for (k, x) in v.iter().enumerate() {
            sums[[l, k]] += x;
        }
    }
    let present: Vec<usize> = (0..n_spk).filter(|&s| counts[s] > 0).collect();
    let mut means = Array2::<f64>::zeros((present.len(), d));
    for (row, &s) in present.iter().enumerate() {
        for k in 0..d {
            means[[row, k]] = sums[[s, k]] / counts[s] as f64;
        }
    }
    let grand = means.mean_axis(Axis(0)).expect("non-empty");
    let centred = &means - &grand;
    let between = centred.t().dot(&centred) / present.len() as f64;

    let mut within = Array2::<f64>::zeros((d, d));
    let index_of = |s: usize| present.iter().position(|&p| p == s).expect("present");
    for (v, &l) in vectors.iter().zip(labels) {
        let m = means.row(index_of(l));
        let diff: Vec<f64> = v.iter().zip(m.iter()).map(|(x, mu)| x - mu).collect();
        for a in 0..d {
            for b in 0..d {
                within[[a, b]] += diff[a] * diff[b];
            }
        }
    }
    within /= vectors.len() as f64;
    Ok((between, within))
}

/// Two-covariance PLDA with whitening and length normalisation in front.
#[derive(Clone, Debug)]
pub struct PldaModel {
    /// Global mean of the raw training vectors.
    pub mean: Vec<f64>,
    /// `r x d` projection onto unit-variance principal axes.
    pub whitening: Array2<f64>,
    /// Mean of the whitened, length-normalised training vectors.
    pub norm_mean: Vec<f64>,
    pub between: Array2<f64>,
    pub within: Array2<f64>,
    pub length_normalize: bool,
    scoring: PldaScoring,
}

#[derive(Clone, Debug)]
struct PldaScoring {
    quad: Array2<f64>,
    cross: Array2<f64>,
    constant: f64,
}

impl PldaModel {
    /// Assembles a model from its parts and precomputes the scoring terms.
    pub fn from_parts(
        mean: Vec<f64>,
        whitening: Array2<f64>,
        norm_mean: Vec<f64>,
        between: Array2<f64>,
        within: Array2<f64>,
        length_normalize: bool,
    ) -> Result<Self> {
        let r = whitening.nrows();
        if whitening.ncols() != mean.len() {
            return Err(Error::param("whitening columns must match the input dimension"));
        }
        if norm_mean.len() != r || between.dim() != (r, r) || within.dim() != (r, r) {
            return Err(Error::param("PLDA parameter shapes are inconsistent"));
        }
        let scoring = PldaScoring::new(&between, &within)?;
        Ok(PldaModel {
            mean,
            whitening,
            norm_mean,
            between,
            within,
            length_normalize,
            scoring,
        })
    }

    /// A model working directly on raw vectors: no centring, whitening or
    /// length normalisation.
    pub fn from_covariances(between: Array2<f64>, within: Array2<f64>) -> Result<Self> {
        let d = between.nrows();
        Self::from_parts(
            vec![0.0; d],
            Array2::eye(d),
            vec![0.0; d],
            between,
            within,
            false,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Dimension after whitening (the data rank seen at fit time).
    pub fn effective_dim(&self) -> usize {
        self.whitening.nrows()
    }

    /// Maps a raw vector into the space where the two covariances live.
    pub fn transform(&self, x: &[f64]) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::param(format!(
                "vector has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let centred: Array1<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut u = self.whitening.dot(&centred);
        if self.length_normalize {
            let n = u.dot(&u).sqrt();
            if n > 0.0 {
                u /= n;
            }
        }
        for (v, m) in u.iter_mut().zip(&self.norm_mean) {
            *v -= m;
        }
        Ok(u)
    }

    fn score_transformed(&self, ui: &Array1<f64>, uj: &Array1<f64>) -> f64 {
        let s = &self.scoring;
        0.5 * ui.dot(&s.quad.dot(ui)) + 0.5 * uj.dot(&s.quad.dot(uj)) + ui.dot(&s.cross.dot(uj)) + s.constant
    }
}

impl PldaScoring {
    fn new(between: &Array2<f64>, within: &Array2<f64>) -> Result<Self> {
        let r = between.nrows();
        let total = between + within;
        let t = to_dmatrix(&total);
        let b = to_dmatrix(between);
        let t_chol = t
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("total covariance is not positive definite".into()))?;
        let t_inv = t_chol.inverse();
        let log_det_t: f64 = 2.0 * t_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

        let mut same = DMatrix::<f64>::zeros(2 * r, 2 * r);
        same.view_mut((0, 0), (r, r)).copy_from(&t);
        same.view_mut((r, r), (r, r)).copy_from(&t);
        same.view_mut((0, r), (r, r)).copy_from(&b);
        same.view_mut((r, 0), (r, r)).copy_from(&b);
        let same_chol = same.cholesky().ok_or_else(|| {
            Error::Numerical("same-speaker covariance is not positive definite".into())
        })?;
        let log_det_same: f64 = 2.0 * same_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let same_inv = same_chol.inverse();

        let quad = Array2::from_shape_fn((r, r), |(i, j)| t_inv[(i, j)] - same_inv[(i, j)]);
        let cross = Array2::from_shape_fn((r, r), |(i, j)| {
            -0.5 * (same_inv[(i, r + j)] + same_inv[(j, r + i)])
        });
        Ok(PldaScoring {
            quad,
            cross,
            constant: log_det_t - 0.5 * log_det_same,
        })
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Fits whitening, length normalisation and the two covariances on labelled
/// training vectors.
pub fn plda_fit(train: &[(Vec<f64>, String)]) -> Result<PldaModel> {
    let mut names: Vec<&str> = train.iter().map(|(_, s)| s.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() < 2 {
        return Err(Error::Training(format!(
            "PLDA needs at least 2 speakers, got {}",
            names.len()
        )));
    }
    let labels: Vec<usize> = train
        .iter()
        .map(|(_, s)| names.binary_search(&s.as_str()).expect("collected"))
        .collect();
    let mut counts = vec![0usize; names.len()];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.iter().all(|&c| c < 2) {
        return Err(Error::Training(
            "PLDA needs at least one speaker with two or more vectors".into(),
        ));
    }
    let d = train[0].0.len();
    if d == 0 || train.iter().any(|(v, _)| v.len() != d) {
        return Err(Error::param("training vectors must share a positive dimension"));
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for (v, _) in train {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (v, _) in train {
        let c = DVector::from_iterator(d, v.iter().zip(&mean).map(|(x, m)| x - m));
        cov += &c * c.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&k| {
            let l = eig.eigenvalues[k];
            l > 1e-12 && l > 1e-10 * top
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Training(
            "training data has rank 0 (all vectors equal)".into(),
        ));
    }
    let r = kept.len();
    let whitening = Array2::from_shape_fn((r, d), |(row, col)| {
        let k = kept[row];
        eig.eigenvectors[(col, k)] / eig.eigenvalues[k].sqrt()
    });

    let provisional = PldaModel {
        mean: mean.clone(),
        whitening: whitening.clone(),
        norm_mean: vec![0.0; r],
        between: Array2::eye(r),
        within: Array2::eye(r),
        length_normalize: true,
        scoring: PldaScoring::new(&Array2::eye(r), &Array2::eye(r))?,
    };
    let mut projected = Vec::with_capacity(train.len());
    for (v, _) in train {
        projected.push(provisional.transform(v)?.to_vec());
    }
    let mut norm_mean = vec![0.0; r];
    for u in &projected {
        for (m, x) in norm_mean.iter_mut().zip(u) {
            *m += x / n;
        }
    }
    for u in &mut projected {
        for (x, m) in u.iter_mut().zip(&norm_mean) {
            *x -= m;
        }
    }
    let (mut between, mut within) = two_covariance(&projected, &labels)?;
    for k in 0..r {
        between[[k, k]] += PLDA_EPSILON;
        within[[k, k]] += PLDA_EPSILON;
    }
    PldaModel::from_parts(mean, whitening, norm_mean, between, within, true)
}

/// Same-speaker versus different-speaker log-likelihood ratio.
pub fn plda_score(model: &PldaModel, xi: &[f64], xj: &[f64]) -> Result<f64> {
    let ui = model.transform(xi)?;
    let uj = model.transform(xj)?;
    Ok(model.score_transformed(&ui, &uj))
}

/// Models a scorer may need; which ones must be present depends on the kind.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScoringModels<'a> {
    pub plda: Option<&'a PldaModel>,
    pub neural: Option<&'a PairSeqModel>,
    /// Block size for neural inference.
    pub max_block: usize,
}

/// Scores every ordered segment pair. All scorers return values in [0, 1];
/// PLDA log-likelihood ratios go through [`logistic_normalize`].
pub fn similarity_matrix(
    seq: &EmbeddingSequence,
    scorer: ScorerKind,
    models: &ScoringModels<'_>,
) -> Result<SimilarityMatrix> {
    match scorer {
        ScorerKind::Cosine => cosine_matrix(seq),
        ScorerKind::Plda => {
            let model = models
                .plda
                .ok_or_else(|| Error::Config("plda scorer requires a PLDA model".into()))?;
            plda_matrix(model, seq)
        }
        ScorerKind::Neural => {
            let model = models
                .neural
                .ok_or_else(|| Error::Config("neural scorer requires a Bi-LSTM model".into()))?;
            let max_block = if models.max_block == 0 {
                neural::DEFAULT_MAX_BLOCK
            } else {
                models.max_block
            };
            neural::predict_matrix(model, seq, max_block)
        }
    }
}

fn cosine_matrix(seq: &EmbeddingSequence) -> Result<SimilarityMatrix> {
    let mut x = seq.to_matrix();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::param(format!("segment {i} has a zero-norm embedding")));
        }
        row /= n;
    }
    let mut s = x.dot(&x.t());
    s.mapv_inplace(|c| 0.5 * (1.0 + c.clamp(-1.0, 1.0)));
    SimilarityMatrix::new(s)
}

fn plda_matrix(model: &PldaModel, seq: &EmbeddingSequence) -> Result<SimilarityMatrix> {
    let n = seq.len();
    let r = model.effective_dim();
    let mut u = Array2::<f64>::zeros((n, r));
    for (i, v) in seq.vectors.iter().enumerate() {
        u.row_mut(i).assign(&model.transform(v)?);
    }
    let sc = &model.scoring;
    let uq = u.dot(&sc.quad);
    let half_quad: Vec<f64> = (0..n).map(|i| 0.5 * uq.row(i).dot(&u.row(i))).collect();
    let mut s = u.dot(&sc.cross).dot(&u.t());
    for i in 0..n {
        for j in 0..n {
            let llr = s[[i, j]] + half_quad[i] + half_quad[j] + sc.constant;
            s[[i, j]] = logistic_normalize(llr);
        }
    }
    SimilarityMatrix::new(s)
}

/// Elementwise weighted sum; weights are renormalised to sum to one.
pub fn fuse(matrices: &[SimilarityMatrix], weights: &[f64]) -> Result<SimilarityMatrix> {
    if matrices.len() < 2 {
        return Err(Error::param("fusion needs at least two matrices"));
    }
    if weights.len() != matrices.len() {
        return Err(Error::param(format!(
            "{} weights for {} matrices",
            weights.len(),
            matrices.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::param("fusion weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::param("fusion weights must have a positive sum"));
    }
    let n = matrices[0].n();
    if matrices.iter().any(|m| m.n() != n) {
        return Err(Error::param("fused matrices differ in size"));
    }
    let mut out = Array2::<f64>::zeros((n, n));
    for (m, w) in matrices.iter().zip(weights) {
        out.scaled_add(w / total, m.values());
    }
    SimilarityMatrix::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Segment;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn seq_of(vectors: Vec<Vec<f64>>) -> EmbeddingSequence {
        let dim = vectors[0].len();
        let segs = (0..vectors.len())
            .map(|i| Segment::new(i as f64, i as f64 + 1.5).unwrap())
            .collect();
        EmbeddingSequence::new("t", dim, segs, vectors).unwrap()
    }

    /// Two speakers, `per` vectors each, centroids far apart.
    fn two_speakers(per: usize, seed: u64) -> Vec<(Vec<f64>, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centres = [[3.0, 0.0, 1.0], [-2.0, 2.5, -1.0]];
        let mut out = Vec::new();
        for i in 0..per {
            for (s, c) in centres.iter().enumerate() {
                let v = c.iter().map(|x| x + noise.sample(&mut rng)).collect();
                out.push((v, format!("s{s}")));
                let _ = i;
            }
        }
        out
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic_normalize(0.0), 0.5);
        assert!((logistic_normalize(1.0) - 0.993307).abs() < 1e-6);
        for x in [0.1, 0.7, 3.0, -2.2] {
            assert!((logistic_normalize(x) + logistic_normalize(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.5);
        assert!(cosine_score(&[1.0, -2.0], &[-1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_score(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_matrix_example() {
        let s = similarity_matrix(
            &seq_of(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]),
            ScorerKind::Cosine,
            &ScoringModels::default(),
        )
        .unwrap();
        assert_eq!(
            s.to_rows(),
            vec![vec![1.0, 0.5, 1.0], vec![0.5, 1.0, 0.5], vec![1.0, 0.5, 1.0]]
        );
        let single = similarity_matrix(&seq_of(vec![vec![2.0, 1.0]]), ScorerKind::Cosine, &ScoringModels::default()).unwrap();
        assert!((single.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_models_are_config_errors() {
        let seq = seq_of(vec![vec![1.0, 0.0]]);
        for kind in [ScorerKind::Plda, ScorerKind::Neural] {
            match similarity_matrix(&seq, kind, &ScoringModels::default()) {
                Err(Error::Config(_)) => {}
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn plda_hand_case_isotropic_1d() {
        let model = PldaModel::from_covariances(Array2::eye(1), Array2::eye(1)).unwrap();
        let same = plda_score(&model, &[0.0], &[0.0]).unwrap();
        let far = plda_score(&model, &[0.0], &[3.0]).unwrap();
        // log 2 - 0.5 log 3 and -3 + 2.25 + (log 2 - 0.5 log 3)
        let c = 2f64.ln() - 0.5 * 3f64.ln();
        assert!((same - c).abs() < 1e-12);
        assert!((far - (-0.75 + c)).abs() < 1e-12);
        assert!(same > far);
    }

    #[test]
    fn plda_rejects_degenerate_training() {
        let one = vec![(vec![1.0, 2.0], "a".to_string()), (vec![1.0, 2.0], "a".to_string())];
        assert!(matches!(plda_fit(&one), Err(Error::Training(_))));
        let same = vec![
            (vec![1.0, 2.0], "a".to_string()),
            (vec![1.0, 2.0], "a".to_string()),
            (vec![1.0, 2.0], "b".to_string()),
        ];
        assert!(matches!(plda_fit(&same), Err(Error::Training(_))));
        let singletons = vec![(vec![1.0], "a".to_string()), (vec![2.0], "b".to_string())];
        assert!(plda_fit(&singletons).is_err());
    }

    #[test]
    fn plda_point_masses() {
        let mut train = Vec::new();
        for _ in 0..5 {
            train.push((vec![1.0, 1.0], "a".to_string()));
            train.push((vec![4.0, -2.0], "b".to_string()));
        }
        let m = plda_fit(&train).unwrap();
        assert_eq!(m.effective_dim(), 1);
        assert!((m.within[[0, 0]] - PLDA_EPSILON).abs() < 1e-12);
        assert!(m.between[[0, 0]] > 0.5);
    }

    #[test]
    fn plda_orders_same_above_different() {
        let train = two_speakers(40, 3);
        let m = plda_fit(&train).unwrap();
        let a = &train[0].0;
        let b = &train[1].0;
        assert!(plda_score(&m, a, a).unwrap() > plda_score(&m, a, b).unwrap());
    }

    #[test]
    fn plda_shift_invariance() {
        let train = two_speakers(30, 5);
        let shift = [10.0, -7.0, 3.5];
        let shifted: Vec<(Vec<f64>, String)> = train
            .iter()
            .map(|(v, s)| (v.iter().zip(&shift).map(|(x, c)| x + c).collect(), s.clone()))
            .collect();
        let m0 = plda_fit(&train).unwrap();
        let m1 = plda_fit(&shifted).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let a = plda_score(&m0, &train[i].0, &train[j].0).unwrap();
                let b = plda_score(&m1, &shifted[i].0, &shifted[j].0).unwrap();
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn two_covariance_recovers_truth() {
        // between = [[2, 0.5], [0.5, 1]], within = [[0.5, -0.1], [-0.1, 0.3]]
        let lb = [[2f64.sqrt(), 0.0], [0.5 / 2f64.sqrt(), (1.0 - 0.125f64).sqrt()]];
        let lw00 = 0.5f64.sqrt();
        let lw10 = -0.1 / lw00;
        let lw = [[lw00, 0.0], [lw10, (0.3 - lw10 * lw10).sqrt()]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Normal::new(0.0, 1.0).unwrap();
        let (speakers, per) = (2000, 200);
        let mut vectors = Vec::with_capacity(speakers * per);
        let mut labels = Vec::with_capacity(speakers * per);
        for s in 0..speakers {
            let (a, b) = (z.sample(&mut rng), z.sample(&mut rng));
            let centre = [lb[0][0] * a, lb[1][0] * a + lb[1][1] * b];
            for _ in 0..per {
                let (e, f) = (z.sample(&mut rng), z.sample(&mut rng));
                vectors.push(vec![centre[0] + lw[0][0] * e, centre[1] + lw[1][0] * e + lw[1][1] * f]);
                labels.push(s);
            }
        }
        let (between, within) = two_covariance(&vectors, &labels).unwrap();
        let truth_b = ndarray::arr2(&[[2.0, 0.5], [0.5, 1.0]]);
        let truth_w = ndarray::arr2(&[[0.5, -0.1], [-0.1, 0.3]]);
        let rel = |est: &Array2<f64>, truth: &Array2<f64>| {
            let diff = est - truth;
            (diff.mapv(|v| v * v).sum() / truth.mapv(|v| v * v).sum()).sqrt()
        };
        assert!(rel(&between, &truth_b) < 0.10, "between {between:?}");
        assert!(rel(&within, &truth_w) < 0.10, "within {within:?}");
    }

    #[test]
    fn plda_matrix_in_unit_interval_and_symmetric() {
        let train = two_speakers(20, 9);
        let m = plda_fit(&train).unwrap();
        let seq = seq_of(train.iter().take(12).map(|(v, _)| v.clone()).collect());
        let models = ScoringModels { plda: Some(&m), ..Default::default() };
        let s = similarity_matrix(&seq, ScorerKind::Plda, &models).unwrap();
        assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.is_symmetric(1e-9));
        // element (i, j) agrees with the pairwise scorer
        let llr = plda_score(&m, &seq.vectors[2], &seq.vectors[5]).unwrap();
        assert!((s.get(2, 5) - logistic_normalize(llr)).abs() < 1e-9);
    }

    #[test]
    fn fuse_examples() {
        let a = SimilarityMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = SimilarityMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(fuse(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap(), a);
        assert_eq!(fuse(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(
            fuse(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap().to_rows(),
            vec![vec![1.0, 0.5], vec![0.5, 1.0]]
        );
        let c = SimilarityMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(fuse(&[a.clone(), c], &[0.5, 0.5]).is_err());
        assert!(fuse(&[a.clone()], &[1.0]).is_err());
        assert!(fuse(&[a.clone(), b.clone()], &[0.0, 0.0]).is_err());
        assert!(fuse(&[a, b], &[-1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn logistic_is_monotone(x in -20.0f64..20.0, dx in 1e-3f64..5.0) {
            prop_assert!(logistic_normalize(x) <= logistic_normalize(x + dx));
            if x.abs() < 5.0 {
                prop_assert!(logistic_normalize(x) < logistic_normalize(x + dx));
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
            k in 0.1f64..10.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let s = cosine_score(&a, &b).unwrap();
            prop_assert!((s - cosine_score(&b, &a).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
            prop_assert!((s - cosine_score(&scaled, &b).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn plda_symmetric(i in 0usize..60, j in 0usize..60) {
            let train = two_speakers(30, 21);
            let m = plda_fit(&train).unwrap();
            let a = plda_score(&m, &train[i].0, &train[j].0).unwrap();
            let b = plda_score(&m, &train[j].0, &train[i].0).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
