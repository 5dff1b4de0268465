//! Uniform sliding-window segmentation, segment labelling against a reference
//! and ideal (0/1) similarity matrices.

use ndarray::Array2;

use crate::domain::{Annotation, Segment, SimilarityMatrix, TIME_EPS};
use crate::error::{Error, Result};

/// Window length used throughout the toolkit (seconds).
pub const DEFAULT_WINDOW: f64 = 1.5;
/// Hop between consecutive windows (seconds), i.e. 750 ms overlap.
pub const DEFAULT_STEP: f64 = 0.75;

/// Tiles each speech region with fixed-length windows.
///
/// Windows start at `region.start + k * step` while they fit inside the
/// region. A region shorter than `window` becomes a single segment. When the
/// regular windows stop short of the region end, one more window is placed
/// flush against the end so no trailing speech is dropped.
pub fn uniform_segment(regions: &[Segment], window: f64, step: f64) -> Result<Vec<Segment>> {
    if !(window > 0.0) || !window.is_finite() {
        return Err(Error::param(format!("window must be positive, got {window}")));
    }
    if !(step > 0.0) || step > window + TIME_EPS {
        return Err(Error::param(format!(
            "step must be in (0, window], got {step} with window {window}"
        )));
    }
    for w in regions.windows(2) {
        if w[1].start + TIME_EPS < w[0].end {
            return Err(Error::param("speech regions must be sorted and non-overlapping"));
        }
    }

    let mut out = Vec::new();
    for region in regions {
        if region.duration() < window - TIME_EPS {
            out.push(*region);
            continue;
        }
        let mut last_end = region.start;
        let mut k = 0usize;
        loop {
            let start = region.start + k as f64 * step;
            let end = start + window;
            if end > region.end + TIME_EPS {
                break;
            }
            out.push(Segment { start, end: end.min(region.end) });
            last_end = end;
            k += 1;
        }
        if region.end - last_end > TIME_EPS {
            out.push(Segment {
                start: region.end - window,
                end: region.end,
            });
        }
    }
    Ok(out)
}

/// Central half of a segment: a 750 ms region for a 1.5 s window.
pub fn central_region(segment: &Segment) -> Segment {
    let quarter = 0.25 * segment.duration();
    Segment {
        start: segment.start + quarter,
        end: segment.end - quarter,
    }
}

/// The speaker who talks most inside the central region of `segment`.
///
/// Ties go to the lexicographically smallest label; `None` when no reference
/// speech touches the central region.
pub fn segment_label(segment: &Segment, reference: &Annotation) -> Option<String> {
    let centre = central_region(segment);
    let mut totals: Vec<(&str, f64)> = Vec::new();
    for region in &reference.regions {
        let ov = region.segment.overlap(&centre);
        if ov <= 0.0 {
            continue;
        }
        match totals.iter_mut().find(|(s, _)| *s == region.speaker) {
            Some((_, t)) => *t += ov,
            None => totals.push((&region.speaker, ov)),
        }
    }
    let mut best: Option<(&str, f64)> = None;
    for (speaker, total) in totals {
        if total <= TIME_EPS {
            continue;
        }
        best = match best {
            None => Some((speaker, total)),
            Some((bs, bt)) => {
                if total > bt + TIME_EPS || ((total - bt).abs() <= TIME_EPS && speaker < bs) {
                    Some((speaker, total))
                } else {
                    Some((bs, bt))
                }
            }
        };
    }
    best.map(|(s, _)| s.to_string())
}

/// Ideal similarity matrix: 1 where two segments share a speaker, else 0.
pub fn reference_matrix<L: PartialEq>(labels: &[L]) -> Result<SimilarityMatrix> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::param("reference_matrix needs at least one label"));
    }
    let m = Array2::from_shape_fn((n, n), |(i, j)| {
        if labels[i] == labels[j] {
            1.0
        } else {
            0.0
        }
    });
    SimilarityMatrix::new(m)
}
