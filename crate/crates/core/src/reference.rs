//! Naive loop implementation of the GBST forward pass.
//!
//! Shares no code with the tape path: every block is enumerated explicitly per
//! position with plain nested loops over `Vec<Vec<f64>>`. Used as the oracle in
//! equivalence tests and by the `oracle-test` command.

use crate::gbst::GbstConfig;

pub type Matrix = Vec<Vec<f64>>;

/// Plain-value GBST weights. `conv` is indexed `[tap][in][out]`.
#[derive(Clone, Debug)]
pub struct ReferenceWeights {
    pub conv: Option<(Vec<Matrix>, Vec<f64>)>,
    pub scorer: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReferenceOutput {
    pub raw: Matrix,
    pub weights: Matrix,
    pub calibrated: Option<Matrix>,
    pub latent: Matrix,
    pub downsampled: Matrix,
}

pub fn conv1d_same(x: &Matrix, taps: &[Matrix], bias: &[f64]) -> Matrix {
    let len = x.len();
    let k = taps.len();
    let pad = (k as isize - 1) / 2;
    let dout = bias.len();
    let mut out = vec![bias.to_vec(); len];
    for (i, row) in out.iter_mut().enumerate() {
        for (t, tap) in taps.iter().enumerate() {
            let src = i as isize + t as isize - pad;
            if src < 0 || src >= len as isize {
                continue;
            }
            let xr = &x[src as usize];
            for (o, acc) in row.iter_mut().enumerate().take(dout) {
                for (c, xv) in xr.iter().enumerate() {
                    *acc += xv * tap[c][o];
                }
            }
        }
    }
    out
}

/// The block of stream `(b, o)` that covers position `i`: mean of the shifted
/// rows `jb..jb+b` with `j = floor(i/b)`, where rows past the end are zero.
pub fn block_at(x: &Matrix, b: usize, o: usize, i: usize) -> Vec<f64> {
    let d = x[0].len();
    let start = (i / b) * b;
    let mut acc = vec![0.0; d];
    for p in start..start + b {
        if let Some(row) = x.get(p + o) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    acc.iter().map(|v| v / b as f64).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn calibrate(p: &Matrix) -> Matrix {
    let len = p.len();
    let c = p[0].len();
    let mut out = vec![vec![0.0; c]; len];
    for i in 0..len {
        let affinity: Vec<f64> = (0..len)
            .map(|j| (0..c).map(|s| p[i][s] * p[j][s]).sum())
            .collect();
        let a = softmax(&affinity);
        for (j, aj) in a.iter().enumerate() {
            for s in 0..c {
                out[i][s] += aj * p[j][s];
            }
        }
    }
    out
}

pub fn mean_pool(x: &Matrix, window: usize, stride: usize) -> Matrix {
    let d = x[0].len();
    let n = (x.len() - window) / stride + 1;
    (0..n)
        .map(|j| {
            let mut acc = vec![0.0; d];
            for r in 0..window {
                for (a, v) in acc.iter_mut().zip(&x[j * stride + r]) {
                    *a += v;
                }
            }
            acc.iter().map(|v| v / window as f64).collect()
        })
        .collect()
}

pub fn gbst_forward(x: &Matrix, cfg: &GbstConfig, w: &ReferenceWeights) -> ReferenceOutput {
    let len = x.len();
    let d = x[0].len();
    let smoothed = match &w.conv {
        Some((taps, bias)) => conv1d_same(x, taps, bias),
        None => x.clone(),
    };
    let streams = cfg.streams();
    let mut raw = vec![vec![0.0; streams.len()]; len];
    let mut blocks = vec![vec![vec![0.0; d]; streams.len()]; len];
    for i in 0..len {
        for (s, spec) in streams.iter().enumerate() {
            let blk = block_at(&smoothed, spec.block_size, spec.offset, i);
            raw[i][s] = blk.iter().zip(&w.scorer).map(|(a, b)| a * b).sum();
            blocks[i][s] = blk;
        }
    }
    let weights: Matrix = raw.iter().map(|r| softmax(r)).collect();
    let calibrated = cfg.enable_calibration.then(|| calibrate(&weights));
    let mix = calibrated.as_ref().unwrap_or(&weights);
    let mut latent = vec![vec![0.0; d]; len];
    for i in 0..len {
        for s in 0..streams.len() {
            for j in 0..d {
                latent[i][j] += mix[i][s] * blocks[i][s][j];
            }
        }
    }
    let downsampled = mean_pool(&latent, cfg.downsample_rate, cfg.downsample_rate);
    ReferenceOutput { raw, weights, calibrated, latent, downsampled }
}
