//! Batched forward pass and backpropagation through time.
//!
//! Every recurrent tensor is stored time-major as `(T, R, width)`: `T`
//! positions (block columns) by `R` sequences (block rows). Rows are
//! independent, so a block is processed in row chunks to bound memory; the
//! per-chunk gradients simply add up.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use super::{bce_term, LstmDirection, PairBatch, PairSeqModel, BCE_CLAMP};
use crate::error::{Error, Result};

/// Upper bound on cached activations per chunk, in f64 values (~64 MiB).
const TRACE_BUDGET: usize = 1 << 23;

pub(crate) struct LayerTrace {
    /// Activated gates `i, f, g, o` per direction; overwritten by their
    /// pre-activation gradients during the backward pass.
    pub gates: [Array3<f64>; 2],
    pub cell: [Array3<f64>; 2],
    /// Hidden states, forward direction in `[..h]`, backward in `[h..]`.
    pub out: Array3<f64>,
}

pub(crate) struct Trace {
    pub layers: [LayerTrace; 2],
    /// `(T * R, fc)` pre-ReLU activations.
    pub fc_pre: Array2<f64>,
    /// `(T, R)` output probabilities.
    pub prob: Array2<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through a single `exp`; libm's `tanh` is several times slower
/// and dominates the recurrence at small hidden sizes.
#[inline]
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn rows_per_chunk(model: &PairSeqModel, cols: usize) -> usize {
    let h = model.dims.hidden;
    let per_element = 28 * h + 2 * model.dims.fc_dim + 2;
    (TRACE_BUDGET / (per_element * cols).max(1)).max(1)
}

fn row_chunks(rows: usize, per: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..rows.div_ceil(per)).map(move |k| k * per..((k + 1) * per).min(rows))
}

/// Runs one direction over pre-filled input terms in `gates`.
fn run_direction(
    p: &LstmDirection,
    gates: &mut Array3<f64>,
    cell: &mut Array3<f64>,
    out: &mut Array3<f64>,
    offset: usize,
    reverse: bool,
) {
    let (t_len, r, g4) = gates.dim();
    let h = g4 / 4;
    let w_hh_t = p.w_hh.t();
    let mut h_prev = Array2::<f64>::zeros((r, h));
    let mut c_prev = Array2::<f64>::zeros((r, h));
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let mut z = gates.index_axis_mut(Axis(0), t);
        if step > 0 {
            general_mat_mul(1.0, &h_prev, &w_hh_t, 1.0, &mut z);
        }
        let zs = z.as_slice_mut().expect("contiguous gate slab");
        let mut cs = cell.index_axis_mut(Axis(0), t);
        let cs = cs.as_slice_mut().expect("contiguous cell slab");
        let mut os = out.index_axis_mut(Axis(0), t);
        let hp = h_prev.as_slice_mut().expect("contiguous");
        let cp = c_prev.as_slice_mut().expect("contiguous");
        for row in 0..r {
            let zr = &mut zs[row * g4..(row + 1) * g4];
            for k in 0..h {
                let i = sigmoid(zr[k]);
                let f = sigmoid(zr[h + k]);
                let g = tanh(zr[2 * h + k]);
                let o = sigmoid(zr[3 * h + k]);
                zr[k] = i;
                zr[h + k] = f;
                zr[2 * h + k] = g;
                zr[3 * h + k] = o;
                let c = f * cp[row * h + k] + i * g;
                let hv = o * tanh(c);
                cs[row * h + k] = c;
                cp[row * h + k] = c;
                hp[row * h + k] = hv;
                os[[row, offset + k]] = hv;
            }
        }
    }
}

fn forward_trace(model: &PairSeqModel, rows: ArrayView2<f64>, cols: ArrayView2<f64>) -> Result<Trace> {
    let h = model.dims.hidden;
    let d = model.dims.embed_dim;
    let r = rows.nrows();
    let t_len = cols.nrows();
    let fc = model.dims.fc_dim;

    // Layer 1: the input projection splits into a row term and a column term.
    let mut gates1: [Array3<f64>; 2] = [Array3::zeros((t_len, r, 4 * h)), Array3::zeros((t_len, r, 4 * h))];
    for (dir, g) in gates1.iter_mut().enumerate() {
        let p = &model.layers[0][dir];
        let row_term = rows.dot(&p.w_ih.slice(s![.., ..d]).t());
        let mut col_term = cols.dot(&p.w_ih.slice(s![.., d..]).t());
        col_term += &p.bias;
        for t in 0..t_len {
            let mut slab = g.index_axis_mut(Axis(0), t);
            slab.assign(&row_term);
            slab += &col_term.row(t);
        }
    }
    let mut layer1 = LayerTrace {
        gates: gates1,
        cell: [Array3::zeros((t_len, r, h)), Array3::zeros((t_len, r, h))],
        out: Array3::zeros((t_len, r, 2 * h)),
    };
    for dir in 0..2 {
        let LayerTrace { gates, cell, out } = &mut layer1;
        run_direction(&model.layers[0][dir], &mut gates[dir], &mut cell[dir], out, dir * h, dir == 1);
    }
    check_finite(&layer1.out, "layer 1 hidden state")?;

    // Layer 2 consumes the concatenated layer-1 states.
    let l1_flat = layer1
        .out
        .view()
        .into_shape_with_order((t_len * r, 2 * h))
        .expect("standard layout");
    let mut gates2: [Array3<f64>; 2] = [Array3::zeros((t_len, r, 4 * h)), Array3::zeros((t_len, r, 4 * h))];
    for (dir, g) in gates2.iter_mut().enumerate() {
        let p = &model.layers[1][dir];
        let mut flat = g.view_mut().into_shape_with_order((t_len * r, 4 * h)).expect("standard layout");
        general_mat_mul(1.0, &l1_flat, &p.w_ih.t(), 0.0, &mut flat);
        flat += &p.bias;
    }
    let mut layer2 = LayerTrace {
        gates: gates2,
        cell: [Array3::zeros((t_len, r, h)), Array3::zeros((t_len, r, h))],
        out: Array3::zeros((t_len, r, 2 * h)),
    };
    for dir in 0..2 {
        let LayerTrace { gates, cell, out } = &mut layer2;
        run_direction(&model.layers[1][dir], &mut gates[dir], &mut cell[dir], out, dir * h, dir == 1);
    }
    check_finite(&layer2.out, "layer 2 hidden state")?;

    let l2_flat = layer2
        .out
        .view()
        .into_shape_with_order((t_len * r, 2 * h))
        .expect("standard layout");
    let mut fc_pre = Array2::<f64>::zeros((t_len * r, fc));
    general_mat_mul(1.0, &l2_flat, &model.fc1_w.t(), 0.0, &mut fc_pre);
    fc_pre += &model.fc1_b;
    let act = fc_pre.mapv(|v| v.max(0.0));
    let b2 = model.fc2_b[0];
    let logits = act.dot(&model.fc2_w);
    let prob = logits
        .mapv(|z| sigmoid(z + b2))
        .into_shape_with_order((t_len, r))
        .expect("standard layout");
    if let Some(bad) = prob.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite output at position {} of row {}",
            bad / r,
            bad % r
        )));
    }
    Ok(Trace {
        layers: [layer1, layer2],
        fc_pre,
        prob,
    })
}

fn check_finite(a: &Array3<f64>, what: &str) -> Result<()> {
    if let Some(idx) = a.iter().position(|v| !v.is_finite()) {
        let (_, r, w) = a.dim();
        return Err(Error::Numerical(format!(
            "non-finite {what} at position {}, row {}, unit {}",
            idx / (r * w),
            (idx / w) % r,
            idx % w
        )));
    }
    Ok(())
}

pub(crate) fn predict(model: &PairSeqModel, batch: &PairBatch) -> Result<Array2<f64>> {
    let r_total = batch.n_rows();
    let mut out = Array2::<f64>::zeros((r_total, batch.n_cols()));
    for chunk in row_chunks(r_total, rows_per_chunk(model, batch.n_cols())) {
        let tr = forward_trace(model, batch.rows.slice(s![chunk.clone(), ..]), batch.cols.view())?;
        out.slice_mut(s![chunk, ..]).assign(&tr.prob.t());
    }
    Ok(out)
}

/// Adds the gradient of the mean BCE over the whole batch into `grad` and
/// returns the loss.
pub(crate) fn accumulate_gradient(
    model: &PairSeqModel,
    batch: &PairBatch,
    targets: &Array2<f64>,
    grad: &mut PairSeqModel,
) -> Result<f64> {
    let r_total = batch.n_rows();
    let count = (r_total * batch.n_cols()) as f64;
    let mut loss = 0.0;
    for chunk in row_chunks(r_total, rows_per_chunk(model, batch.n_cols())) {
        let rows = batch.rows.slice(s![chunk.clone(), ..]);
        let tr = forward_trace(model, rows, batch.cols.view())?;
        let tgt = targets.slice(s![chunk, ..]);
        loss += backward(model, tr, rows, batch.cols.view(), tgt, count, grad);
    }
    Ok(loss / count)
}

/// Backpropagates one chunk; returns its summed (not averaged) loss.
fn backward(
    model: &PairSeqModel,
    mut tr: Trace,
    rows: ArrayView2<f64>,
    cols: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    count: f64,
    grad: &mut PairSeqModel,
) -> f64 {
    let h = model.dims.hidden;
    let d = model.dims.embed_dim;
    let (t_len, r) = tr.prob.dim();

    // Output layer. Position (t, row) scores element (row, t).
    let mut loss = 0.0;
    let mut dlogit = Array1::<f64>::zeros(t_len * r);
    for t in 0..t_len {
        for row in 0..r {
            let p = tr.prob[[t, row]];
            let y = targets[[row, t]];
            loss += bce_term(p, y);
            // the clamp is flat outside its range
            if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                dlogit[t * r + row] = (p - y) / count;
            }
        }
    }
    let act = tr.fc_pre.mapv(|v| v.max(0.0));
    grad.fc2_w += &act.t().dot(&dlogit);
    grad.fc2_b[0] += dlogit.sum();
    let mut dpre = Array2::<f64>::zeros(tr.fc_pre.dim());
    for (idx, mut row) in dpre.rows_mut().into_iter().enumerate() {
        let dl = dlogit[idx];
        for (k, v) in row.iter_mut().enumerate() {
            if tr.fc_pre[[idx, k]] > 0.0 {
                *v = dl * model.fc2_w[k];
            }
        }
    }
    {
        let l2_flat = tr.layers[1]
            .out
            .view()
            .into_shape_with_order((t_len * r, 2 * h))
            .expect("standard layout");
        general_mat_mul(1.0, &dpre.t(), &l2_flat, 1.0, &mut grad.fc1_w);
    }
    grad.fc1_b += &dpre.sum_axis(Axis(0));
    let d_l2 = dpre
        .dot(&model.fc1_w)
        .into_shape_with_order((t_len, r, 2 * h))
        .expect("standard layout");
    drop(dpre);

    // Layer 2.
    let [layer1, layer2] = &mut tr.layers;
    for dir in 0..2 {
        backprop_direction(
            &model.layers[1][dir],
            &mut grad.layers[1][dir],
            &mut layer2.gates[dir],
            &layer2.cell[dir],
            &layer2.out,
            &d_l2,
            dir * h,
            dir == 1,
        );
    }
    drop(d_l2);
    let l1_flat = layer1
        .out
        .view()
        .into_shape_with_order((t_len * r, 2 * h))
        .expect("standard layout");
    let mut d_l1 = Array2::<f64>::zeros((t_len * r, 2 * h));
    for dir in 0..2 {
        let dz = layer2.gates[dir]
            .view()
            .into_shape_with_order((t_len * r, 4 * h))
            .expect("standard layout");
        general_mat_mul(1.0, &dz.t(), &l1_flat, 1.0, &mut grad.layers[1][dir].w_ih);
        general_mat_mul(1.0, &dz, &model.layers[1][dir].w_ih, 1.0, &mut d_l1);
    }
    let d_l1 = d_l1.into_shape_with_order((t_len, r, 2 * h)).expect("standard layout");

    // Layer 1, with the factored input projection.
    for dir in 0..2 {
        backprop_direction(
            &model.layers[0][dir],
            &mut grad.layers[0][dir],
            &mut layer1.gates[dir],
            &layer1.cell[dir],
            &layer1.out,
            &d_l1,
            dir * h,
            dir == 1,
        );
        let dz = &layer1.gates[dir];
        let per_row = dz.sum_axis(Axis(0)); // (R, 4h)
        let per_col = dz.sum_axis(Axis(1)); // (T, 4h)
        let g = &mut grad.layers[0][dir].w_ih;
        let mut g_row = g.slice_mut(s![.., ..d]);
        general_mat_mul(1.0, &per_row.t(), &rows, 1.0, &mut g_row);
        let mut g_col = g.slice_mut(s![.., d..]);
        general_mat_mul(1.0, &per_col.t(), &cols, 1.0, &mut g_col);
    }
    loss
}

/// BPTT for one direction. On return `gates` holds the gradient with respect
/// to the gate pre-activations; recurrent weight and bias gradients are added
/// into `grad`.
#[allow(clippy::too_many_arguments)]
fn backprop_direction(
    p: &LstmDirection,
    grad: &mut LstmDirection,
    gates: &mut Array3<f64>,
    cell: &Array3<f64>,
    out: &Array3<f64>,
    d_out: &Array3<f64>,
    offset: usize,
    reverse: bool,
) {
    let (t_len, r, g4) = gates.dim();
    let h = g4 / 4;
    let mut dh_rec = Array2::<f64>::zeros((r, h));
    let mut dc_rec = Array2::<f64>::zeros((r, h));
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let t_prev = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        {
            let mut z = gates.index_axis_mut(Axis(0), t);
            let zs = z.as_slice_mut().expect("contiguous gate slab");
            let cs = cell.index_axis(Axis(0), t);
            let cs = cs.as_slice().expect("contiguous cell slab");
            let cps = t_prev.map(|tp| cell.index_axis(Axis(0), tp));
            let douts = d_out.index_axis(Axis(0), t);
            let dhr = dh_rec.as_slice().expect("contiguous");
            let dcr = dc_rec.as_slice_mut().expect("contiguous");
            for row in 0..r {
                let zr = &mut zs[row * g4..(row + 1) * g4];
                for k in 0..h {
                    let i = zr[k];
                    let f = zr[h + k];
                    let g = zr[2 * h + k];
                    let o = zr[3 * h + k];
                    let c = cs[row * h + k];
                    let c_prev = cps.as_ref().map_or(0.0, |cp| cp[[row, k]]);
                    let tc = tanh(c);
                    let dh = douts[[row, offset + k]] + dhr[row * h + k];
                    let d_o = dh * tc;
                    let dc = dh * o * (1.0 - tc * tc) + dcr[row * h + k];
                    dcr[row * h + k] = dc * f;
                    zr[k] = dc * g * i * (1.0 - i);
                    zr[h + k] = dc * c_prev * f * (1.0 - f);
                    zr[2 * h + k] = dc * i * (1.0 - g * g);
                    zr[3 * h + k] = d_o * o * (1.0 - o);
                }
            }
        }
        let dz = gates.index_axis(Axis(0), t);
        grad.bias += &dz.sum_axis(Axis(0));
        if let Some(tp) = t_prev {
            let h_prev = out.slice(s![tp, .., offset..offset + h]);
            general_mat_mul(1.0, &dz.t(), &h_prev, 1.0, &mut grad.w_hh);
            general_mat_mul(1.0, &dz, &p.w_hh, 0.0, &mut dh_rec);
        }
    }
}
