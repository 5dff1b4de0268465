//! Single-pass similarity-matrix enhancement: symmetrise by elementwise max,
//! diffuse with `Y·Yᵀ`, then divide each row by its maximum.

use ndarray::{Array2, Zip};

use crate::domain::SimilarityMatrix;
use crate::error::{Error, Result};

/// Enhanced matrix plus the indices of rows that were all zero after
/// diffusion and therefore left as zeros.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub matrix: SimilarityMatrix,
    pub zero_rows: Vec<usize>,
}

pub fn enhance(s: &SimilarityMatrix) -> Result<SimilarityMatrix> {
    enhance_flagged(s).map(|e| e.matrix)
}

pub fn enhance_flagged(s: &SimilarityMatrix) -> Result<Enhanced> {
    let v = s.values();
    if let Some(bad) = v.iter().find(|x| **x < 0.0) {
        return Err(Error::param(format!(
            "enhancement needs nonnegative similarities, found {bad}"
        )));
    }
    let y = symmetrize(v);
    let mut d = y.dot(&y.t());
    // YYᵀ is symmetric in exact arithmetic; make it so in floating point too
    let n = d.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (d[[i, j]] + d[[j, i]]);
            d[[i, j]] = m;
            d[[j, i]] = m;
        }
    }
    let mut zero_rows = Vec::new();
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            row.mapv_inplace(|x| x / max);
        } else {
            zero_rows.push(i);
        }
    }
    Ok(Enhanced {
        matrix: SimilarityMatrix::new(d)?,
        zero_rows,
    })
}

pub(crate) fn symmetrize(v: &Array2<f64>) -> Array2<f64> {
    let mut y = v.clone();
    Zip::from(&mut y).and(&v.t()).for_each(|a, &b| *a = a.max(b));
    y
}
