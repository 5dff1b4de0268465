//! Hypothesis construction, DER scoring, speaker mapping, fold splitting and
//! the duration-stratified t-test.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Annotation, Segment, TIME_EPS};
use crate::error::{Error, Result};

/// Half-width of the no-score zone around reference boundaries (seconds).
pub const DEFAULT_COLLAR: f64 = 0.25;
/// Two-sided acceptance bound on the t statistic.
pub const T_CRITICAL: f64 = 1.96;
pub const DURATION_GROUPS: usize = 5;

/// Turns per-segment cluster labels into a non-overlapping annotation.
///
/// Every point of the timeline covered by some segment goes to the covering
/// segment whose midpoint is closest, earlier segments winning ties. With
/// equal-length windows this puts the boundary between two differently
/// labelled windows at the midpoint of their overlap. Touching runs of the
/// same label are merged.
pub fn labels_to_annotation<L: ToString>(
    recording_id: &str,
    segments: &[Segment],
    labels: &[L],
) -> Result<Annotation> {
    if segments.len() != labels.len() {
        return Err(Error::param(format!(
            "{} segments but {} labels",
            segments.len(),
            labels.len()
        )));
    }
    let names: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| segments[a].start.total_cmp(&segments[b].start).then(a.cmp(&b)));

    let mut cuts: Vec<f64> = segments.iter().flat_map(|s| [s.start, s.end]).collect();
    for (p, &i) in order.iter().enumerate() {
        for &j in &order[p + 1..] {
            if segments[j].start >= segments[i].end {
                break;
            }
            cuts.push(0.5 * (segments[i].midpoint() + segments[j].midpoint()));
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);

    let mut ann = Annotation::new(recording_id);
    let mut current: Option<(f64, f64, usize)> = None;
    let mut first = 0usize;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = 0.5 * (lo + hi);
        while first < order.len() && segments[order[first]].end <= mid {
            first += 1;
        }
        let mut owner: Option<(f64, usize)> = None;
        for &i in &order[first..] {
            let s = &segments[i];
            if s.start > mid {
                break;
            }
            if s.end <= mid {
                continue;
            }
            let d = (s.midpoint() - mid).abs();
            if owner.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                owner = Some((d, i));
            }
        }
        let Some((_, seg)) = owner else {
            if let Some((s, e, l)) = current.take() {
                ann.push(Segment { start: s, end: e }, names[l].clone());
            }
            continue;
        };
        current = match current {
            Some((s, e, l)) if names[l] == names[seg] && (e - lo).abs() <= TIME_EPS => Some((s, hi, l)),
            Some((s, e, l)) => {
                ann.push(Segment { start: s, end: e }, names[l].clone());
                Some((lo, hi, seg))
            }
            None => Some((lo, hi, seg)),
        };
    }
    if let Some((s, e, l)) = current {
        ann.push(Segment { start: s, end: e }, names[l].clone());
    }
    Ok(ann)
}

/// Maximum-weight one-to-one assignment of rows to columns of a
/// nonnegative weight matrix (Hungarian method). Returns the column for each
/// row, `None` where a row is left unmatched.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let top = weights.iter().flatten().cloned().fold(0.0, f64::max);
    // minimisation form on a square, zero-padded matrix; 1-based potentials
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            top - weights[i][j]
        } else {
            top
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Hypothesis-to-reference speaker map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMapping {
    pub map: BTreeMap<String, String>,
    /// Overlap (seconds) captured by the mapping.
    pub total: f64,
}

impl SpeakerMapping {
    pub fn get(&self, hyp: &str) -> Option<&str> {
        self.map.get(hyp).map(String::as_str)
    }
}

fn mapping_from_overlaps(ref_labels: &[String], hyp_labels: &[String], overlap: &[Vec<f64>]) -> SpeakerMapping {
    // rows are hypothesis speakers so unmatched hypotheses come out as None
    let by_hyp: Vec<Vec<f64>> = (0..hyp_labels.len())
        .map(|h| (0..ref_labels.len()).map(|r| overlap[r][h]).collect())
        .collect();
    let assignment = max_weight_assignment(&by_hyp);
    let mut out = SpeakerMapping::default();
    for (h, r) in assignment.into_iter().enumerate() {
        if let Some(r) = r {
            if by_hyp[h][r] > 0.0 {
                out.map.insert(hyp_labels[h].clone(), ref_labels[r].clone());
                out.total += by_hyp[h][r];
            }
        }
    }
    out
}

/// One-to-one map maximising total overlap between hypothesis and reference
/// speakers over the whole timeline. Hypothesis speakers with no partner
/// are absent.
pub fn optimal_mapping(reference: &Annotation, hypothesis: &Annotation) -> SpeakerMapping {
    let refs = reference.speakers();
    let hyps = hypothesis.speakers();
    let mut overlap = vec![vec![0.0; hyps.len()]; refs.len()];
    for r in &reference.regions {
        let ri = refs.binary_search(&r.speaker).expect("listed speaker");
        for h in &hypothesis.regions {
            let hi = hyps.binary_search(&h.speaker).expect("listed speaker");
            overlap[ri][hi] += r.segment.overlap(&h.segment);
        }
    }
    mapping_from_overlaps(&refs, &hyps, &overlap)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerReport {
    pub scored_time: f64,
    pub false_alarm: f64,
    pub missed: f64,
    pub confusion: f64,
    /// Confusion over scored time.
    pub der: f64,
    /// Set when nothing was scored, in which case `der` is 0.
    pub no_scored_time: bool,
}

impl DerReport {
    fn finish(mut self) -> Self {
        if self.scored_time > 0.0 {
            self.der = self.confusion / self.scored_time;
        } else {
            self.der = 0.0;
            self.no_scored_time = true;
        }
        self
    }

    /// Pools times over recordings (in iteration order) and recomputes DER.
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a DerReport>) -> DerReport {
        let mut total = DerReport::default();
        for r in reports {
            total.scored_time += r.scored_time;
            total.false_alarm += r.false_alarm;
            total.missed += r.missed;
            total.confusion += r.confusion;
        }
        total.finish()
    }
}

/// Diarization error rate of `hypothesis` against `reference`.
///
/// Collars of `collar` seconds on both sides of each reference region
/// boundary are not scored, except at the very start and end of the
/// reference speech, which are not turn changes. With `exclude_overlap`,
/// stretches where two or more reference speakers talk are dropped as well.
/// Missed speech and false alarm are tallied but only confusion enters
/// `der`.
pub fn der(reference: &Annotation, hypothesis: &Annotation, collar: f64, exclude_overlap: bool) -> DerReport {
    let refs = reference.speakers();
    let hyps = hypothesis.speakers();
    let ref_regions: Vec<(Segment, usize)> = reference
        .regions
        .iter()
        .map(|r| (r.segment, refs.binary_search(&r.speaker).expect("listed speaker")))
        .collect();
    let hyp_regions: Vec<(Segment, usize)> = hypothesis
        .regions
        .iter()
        .map(|r| (r.segment, hyps.binary_search(&r.speaker).expect("listed speaker")))
        .collect();

    let extent = ref_regions.iter().fold(None, |acc: Option<(f64, f64)>, (s, _)| {
        Some(acc.map_or((s.start, s.end), |(a, b)| (a.min(s.start), b.max(s.end))))
    });
    let mut collars: Vec<(f64, f64)> = Vec::new();
    if let Some((lo, hi)) = extent {
        for (s, _) in &ref_regions {
            for b in [s.start, s.end] {
                if (b - lo).abs() > TIME_EPS && (b - hi).abs() > TIME_EPS && collar > 0.0 {
                    collars.push((b - collar, b + collar));
                }
            }
        }
    }

    let mut cuts: Vec<f64> = ref_regions
        .iter()
        .chain(&hyp_regions)
        .flat_map(|(s, _)| [s.start, s.end])
        .chain(collars.iter().flat_map(|&(a, b)| [a, b]))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    // elementary intervals that count, with who is talking in each
    let mut pieces: Vec<(f64, Vec<usize>, Vec<usize>)> = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let len = hi - lo;
        if len <= 0.0 {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        if collars.iter().any(|&(a, b)| a <= mid && mid < b) {
            continue;
        }
        let mut active_ref: Vec<usize> = ref_regions.iter().filter(|(s, _)| s.contains(mid)).map(|(_, k)| *k).collect();
        active_ref.sort_unstable();
        active_ref.dedup();
        if exclude_overlap && active_ref.len() >= 2 {
            continue;
        }
        let mut active_hyp: Vec<usize> = hyp_regions.iter().filter(|(s, _)| s.contains(mid)).map(|(_, k)| *k).collect();
        active_hyp.sort_unstable();
        active_hyp.dedup();
        if active_ref.is_empty() && active_hyp.is_empty() {
            continue;
        }
        pieces.push((len, active_ref, active_hyp));
    }

    let mut overlap = vec![vec![0.0; hyps.len()]; refs.len()];
    for (len, r, h) in &pieces {
        for &ri in r {
            for &hi in h {
                overlap[ri][hi] += len;
            }
        }
    }
    let mapping = mapping_from_overlaps(&refs, &hyps, &overlap);
    let mapped: Vec<Option<usize>> = hyps
        .iter()
        .map(|h| mapping.get(h).map(|r| refs.binary_search(&r.to_string()).expect("listed speaker")))
        .collect();

    let mut report = DerReport::default();
    for (len, r, h) in &pieces {
        let (nr, nh) = (r.len(), h.len());
        report.scored_time += len * nr as f64;
        report.missed += len * nr.saturating_sub(nh) as f64;
        report.false_alarm += len * nh.saturating_sub(nr) as f64;
        let correct = h.iter().filter(|&&hi| mapped[hi].is_some_and(|ri| r.contains(&ri))).count();
        report.confusion += len * (nr.min(nh) - correct.min(nr.min(nh))) as f64;
    }
    report.finish()
}

/// Splits `ids` into `k` folds: seeded shuffle, then round-robin.
pub fn kfold_split<T: Clone>(ids: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if k == 0 || k > ids.len() {
        return Err(Error::param(format!("cannot split {} recordings into {k} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % k].push(ids[i].clone());
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `(mean_b − mean_a) / (s_p √(2/n))`; negative when b is lower.
    pub t_value: f64,
    pub h0_accepted: bool,
    /// Pooled variance was zero.
    pub degenerate: bool,
}

/// Two-sample Student's t with pooled variance.
pub fn student_t(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::param("t-test needs at least two samples per side"));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ss = |x: &[f64], m: f64| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (ss(a, ma) + ss(b, mb)) / (na + nb - 2.0);
    let diff = mb - ma;
    let (t, degenerate) = if pooled > 0.0 {
        (diff / (pooled.sqrt() * (1.0 / na + 1.0 / nb).sqrt()), false)
    } else if diff == 0.0 {
        (0.0, true)
    } else {
        (diff.signum() * f64::INFINITY, true)
    };
    Ok(TTestResult {
        n: a.len(),
        mean_a: ma,
        mean_b: mb,
        t_value: t,
        h0_accepted: t.abs() < T_CRITICAL,
        degenerate,
    })
}

/// Sorts recordings by duration, splits them into five near-equal groups
/// and t-tests system `a` against system `b` within each. Inputs are
/// `(duration, der)` per recording, aligned by index.
pub fn duration_stratified_ttest(results_a: &[(f64, f64)], results_b: &[(f64, f64)]) -> Result<Vec<TTestResult>> {
    if results_a.len() != results_b.len() {
        return Err(Error::param("both systems must be scored on the same recordings"));
    }
    if results_a
        .iter()
        .zip(results_b)
        .any(|(a, b)| (a.0 - b.0).abs() > TIME_EPS)
    {
        return Err(Error::param("recording durations differ between systems"));
    }
    let n = results_a.len();
    if n < 2 * DURATION_GROUPS {
        return Err(Error::param(format!("need at least {} recordings", 2 * DURATION_GROUPS)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| results_a[x].0.total_cmp(&results_a[y].0).then(x.cmp(&y)));
    (0..DURATION_GROUPS)
        .map(|g| {
            let idx = &order[g * n / DURATION_GROUPS..(g + 1) * n / DURATION_GROUPS];
            let a: Vec<f64> = idx.iter().map(|&i| results_a[i].1).collect();
            let b: Vec<f64> = idx.iter().map(|&i| results_b[i].1).collect();
            student_t(&a, &b)
        })
        .collect()
}
