//! Randomized equivalence between the tape GBST forward pass and the loop
//! reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gbst::{gbst_forward, GbstConfig, GbstParams, ScorerInit};
use crate::reference::{self, Matrix, ReferenceWeights};
use crate::tensor::{ParamStore, Tape, Tensor};

/// Worst max-abs difference for one {conv, offsets, calibration} setting.
#[derive(Clone, Debug, PartialEq)]
pub struct ComboResult {
    pub conv: bool,
    pub offsets: bool,
    pub calibration: bool,
    pub instances: usize,
    pub max_abs_diff: f64,
}

impl ComboResult {
    pub fn label(&self) -> String {
        let flag = |on: bool| if on { "on" } else { "off" };
        format!("conv={} offsets={} calibration={}", flag(self.conv), flag(self.offsets), flag(self.calibration))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub combos: Vec<ComboResult>,
}

impl OracleReport {
    pub fn max_abs_diff(&self) -> f64 {
        self.combos.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max)
    }

    pub fn instances(&self) -> usize {
        self.combos.iter().map(|c| c.instances).sum()
    }
}

/// Converts tape parameters to the reference layout.
pub fn reference_weights(store: &ParamStore, p: &GbstParams) -> ReferenceWeights {
    let conv = p.conv_weight.zip(p.conv_bias).map(|(w, b)| {
        let w = &store.get(w).value;
        let (k, din, dout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let taps = (0..k)
            .map(|t| (0..din).map(|i| (0..dout).map(|o| w.data()[(t * din + i) * dout + o]).collect()).collect())
            .collect();
        (taps, store.get(b).value.data().to_vec())
    });
    ReferenceWeights { conv, scorer: store.get(p.scorer).value.data().to_vec() }
}

fn max_abs_diff(a: &Tensor, b: &Matrix) -> f64 {
    a.data().iter().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compares raw scores, softmax weights, calibrated weights, latent and
/// downsampled output on `n` random instances with `L ≤ 16`, `d ≤ 4`,
/// `M ≤ 4`, cycling through all eight feature combinations.
pub fn run(n: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<ComboResult> = (0..8)
        .map(|c| ComboResult { conv: c & 4 != 0, offsets: c & 2 != 0, calibration: c & 1 != 0, instances: 0, max_abs_diff: 0.0 })
        .collect();
    for i in 0..n {
        let combo = &mut combos[i % 8];
        let len = rng.random_range(1..=16);
        let cfg = GbstConfig {
            max_block_size: rng.random_range(1..=4),
            downsample_rate: rng.random_range(1..=4.min(len)),
            conv_kernel_size: combo.conv.then(|| [1, 3, 5][rng.random_range(0..3)]),
            enable_offsets: combo.offsets,
            enable_calibration: combo.calibration,
            embedding_dim: rng.random_range(1..=4),
            ..GbstConfig::default()
        };
        let mut store = ParamStore::new();
        let params = GbstParams::init(&mut store, &cfg, ScorerInit::Normal, &mut rng)?;
        let x = Tensor::randn(&[len, cfg.embedding_dim], 1.0, &mut rng)?;

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let out = gbst_forward(&mut tape, &store, xv, &cfg, &params)?;
        let want = reference::gbst_forward(&x.to_rows(), &cfg, &reference_weights(&store, &params));

        let mut diff = max_abs_diff(tape.value(out.scores.raw), &want.raw)
            .max(max_abs_diff(tape.value(out.scores.weights), &want.weights))
            .max(max_abs_diff(tape.value(out.latent), &want.latent))
            .max(max_abs_diff(tape.value(out.downsampled), &want.downsampled));
        if let (Some(c), Some(w)) = (out.scores.calibrated, &want.calibrated) {
            diff = diff.max(max_abs_diff(tape.value(c), w));
        }
        combo.instances += 1;
        combo.max_abs_diff = combo.max_abs_diff.max(diff);
    }
    Ok(OracleReport { combos })
}
