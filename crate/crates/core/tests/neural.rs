//! Checks the batched network against a naive per-sequence implementation
//! and its gradients against finite differences.

use ndarray::Array2;
use simdiar::neural::{forward, LstmDirection, ModelDims, PairBatch, PairSeqModel};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows()).map(|r| (0..w.ncols()).map(|c| w[[r, c]] * x[c]).sum()).collect()
}

/// One direction over a whole sequence, returning hidden states in input order.
fn naive_direction(p: &LstmDirection, xs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
    let h = p.w_hh.ncols();
    let mut hs = vec![vec![0.0; h]; xs.len()];
    let mut hp = vec![0.0; h];
    let mut cp = vec![0.0; h];
    let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
    for t in order {
        let a = matvec(&p.w_ih, &xs[t]);
        let b = matvec(&p.w_hh, &hp);
        let z: Vec<f64> = (0..4 * h).map(|k| a[k] + b[k] + p.bias[k]).collect();
        for k in 0..h {
            let i = sig(z[k]);
            let f = sig(z[h + k]);
            let g = z[2 * h + k].tanh();
            let o = sig(z[3 * h + k]);
            cp[k] = f * cp[k] + i * g;
            hp[k] = o * cp[k].tanh();
        }
        hs[t] = hp.clone();
    }
    hs
}

fn naive_layer(dirs: &[LstmDirection; 2], xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let f = naive_direction(&dirs[0], xs, false);
    let b = naive_direction(&dirs[1], xs, true);
    f.into_iter().zip(b).map(|(mut a, b)| {
        a.extend(b);
        a
    })
    .collect()
}

fn naive_forward(m: &PairSeqModel, rows: &Array2<f64>, cols: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((rows.nrows(), cols.nrows()));
    for i in 0..rows.nrows() {
        let xs: Vec<Vec<f64>> = (0..cols.nrows())
            .map(|j| rows.row(i).iter().chain(cols.row(j).iter()).copied().collect())
            .collect();
        let l1 = naive_layer(&m.layers[0], &xs);
        let l2 = naive_layer(&m.layers[1], &l1);
        for (j, hv) in l2.iter().enumerate() {
            let a: Vec<f64> = matvec(&m.fc1_w, hv).iter().zip(&m.fc1_b).map(|(v, b)| (v + b).max(0.0)).collect();
            let z: f64 = a.iter().zip(&m.fc2_w).map(|(x, w)| x * w).sum::<f64>() + m.fc2_b[0];
            out[[i, j]] = sig(z);
        }
    }
    out
}

fn tiny_model(seed: u64) -> PairSeqModel {
    let mut m = PairSeqModel::init(ModelDims { embed_dim: 2, hidden: 3, fc_dim: 4 }, seed);
    // larger output weights so the loss surface is not flat
    m.fc2_w.mapv_inplace(|w| 3.0 * w);
    m
}

fn tiny_batch(n: usize) -> PairBatch {
    let rows = Array2::from_shape_fn((n, 2), |(i, k)| 2.0 * ((i * 7 + k * 3) as f64 * 0.37).sin());
    let targets = Array2::from_shape_fn((n, n), |(i, j)| if i % 2 == j % 2 { 1.0 } else { 0.0 });
    PairBatch {
        cols: rows.clone(),
        rows,
        targets: Some(targets),
    }
}

#[test]
fn batched_forward_matches_naive_reference() {
    let m = tiny_model(3);
    let b = tiny_batch(3);
    let fast = forward(&m, &b).unwrap();
    let slow = naive_forward(&m, &b.rows, &b.cols);
    for (a, e) in fast.iter().zip(&slow) {
        assert!((a - e).abs() < 1e-10, "{a} vs {e}");
    }

    // rectangular block with distinct row and column embeddings
    let mut b = tiny_batch(5);
    b.rows = b.rows.slice(ndarray::s![1..3, ..]).to_owned();
    b.targets = None;
    let fast = forward(&m, &b).unwrap();
    let slow = naive_forward(&m, &b.rows, &b.cols);
    assert_eq!(fast.dim(), (2, 5));
    for (a, e) in fast.iter().zip(&slow) {
        assert!((a - e).abs() < 1e-10, "{a} vs {e}");
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let step = 1e-5;
    for seed in 1u64..=10 {
        let m = tiny_model(seed);
        let b = tiny_batch(4);
        let (_, grad) = m.loss_and_grad(&b).unwrap();
        let analytic = grad.to_flat();
        let theta = m.to_flat();
        assert_eq!(theta.len(), m.num_params());
        let mut probe = m.clone();
        let mut worst = 0.0f64;
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] = theta[k] + step;
            probe.set_flat(&t).unwrap();
            let up = probe.loss(&b).unwrap();
            t[k] = theta[k] - step;
            probe.set_flat(&t).unwrap();
            let down = probe.loss(&b).unwrap();
            let numeric = (up - down) / (2.0 * step);
            let scale = analytic[k].abs().max(numeric.abs()).max(1e-7);
            worst = worst.max((analytic[k] - numeric).abs() / scale);
        }
        assert!(worst < 1e-4, "seed {seed}: max relative error {worst:e}");
    }
}

/// Swapping the two directions of every layer (and the matching halves of
/// each consumer's weights) and reversing the columns must mirror the output.
#[test]
fn directions_are_mirror_images() {
    let m = tiny_model(9);
    let h = m.dims.hidden;
    let mut swapped = m.clone();
    for l in 0..2 {
        swapped.layers[l].swap(0, 1);
    }
    let swap_halves = |w: &Array2<f64>, offset: usize| {
        let mut out = w.clone();
        for r in 0..w.nrows() {
            for k in 0..h {
                out[[r, offset + k]] = w[[r, offset + h + k]];
                out[[r, offset + h + k]] = w[[r, offset + k]];
            }
        }
        out
    };
    for dir in 0..2 {
        let p = &mut swapped.layers[1][dir];
        p.w_ih = swap_halves(&p.w_ih, 0);
    }
    swapped.fc1_w = swap_halves(&m.fc1_w, 0);

    let b = tiny_batch(6);
    let mut rev = b.clone();
    rev.cols = Array2::from_shape_fn(b.cols.dim(), |(j, k)| b.cols[[b.cols.nrows() - 1 - j, k]]);
    let out = forward(&m, &b).unwrap();
    let mirrored = forward(&swapped, &rev).unwrap();
    let n = out.ncols();
    for i in 0..out.nrows() {
        for j in 0..n {
            assert!((out[[i, j]] - mirrored[[i, n - 1 - j]]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_model_sits_at_ln2_with_balanced_targets() {
    let m = PairSeqModel::zeros(ModelDims { embed_dim: 2, hidden: 3, fc_dim: 4 });
    let b = tiny_batch(4);
    let (loss, g) = m.loss_and_grad(&b).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    // d/db = mean(p - t) = 0 with p = 0.5 and half the targets set
    assert!(g.fc2_b[0].abs() < 1e-12);
    // fc2 weights are zero, so nothing flows further back
    assert!(g.fc1_w.iter().all(|&v| v == 0.0));
}
