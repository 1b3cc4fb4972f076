//! Analytic FLOP counts and measured training-step throughput.
//!
//! Convention: a multiply-add is 2 FLOPs; softmax and layer norm cost 5 FLOPs
//! per element. With `d` the model width, `e = heads · d_kv`, `L` input bytes,
//! `L'` encoder length, `T` target length and `C` candidate streams:
//!
//! | component                 | FLOPs                                  |
//! |---------------------------|----------------------------------------|
//! | gbst.conv                 | 2·L·k·d²                               |
//! | gbst.pool                 | C·L·d                                  |
//! | gbst.score                | 2·C·L·d                                |
//! | gbst.softmax              | 5·L·C                                  |
//! | gbst.mix                  | 2·L·C·d                                |
//! | gbst.calibration          | 4·L²·C + 5·L²                          |
//! | gbst.downsample           | L'·d_s·d (when d_s > 1)                |
//! | encoder.attn_proj         | per layer 8·L'·d·e                     |
//! | encoder.attn_scores       | per layer 4·L'²·e + 5·heads·L'²        |
//! | encoder.ffn               | per layer 4·L'·d·d_ff                  |
//! | encoder.norm              | 5·L'·d per norm (2 per layer + final)  |
//! | decoder.self_attn_proj    | per layer 8·T·d·e                      |
//! | decoder.self_attn_scores  | per layer 4·T²·e + 5·heads·T²          |
//! | decoder.cross_attn_proj   | per layer 4·T·d·e + 4·L'·d·e           |
//! | decoder.cross_attn_scores | per layer 4·T·L'·e + 5·heads·T·L'      |
//! | decoder.ffn               | per layer 4·T·d·d_ff                   |
//! | decoder.norm              | 5·T·d per norm (3 per layer + final)   |
//! | output.logits             | 2·T·d·256                              |
//! | output.softmax            | 5·T·256                                |
//!
//! The identity frontend has no GBST rows and `L' = L`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{self, ByteSequence, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::training::{Optimizer, TrainConfig};
use crate::transformer::{Frontend, Model, ModelConfig, Seq2SeqExample};

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub params: usize,
    /// Analytic forward FLOPs per example.
    pub flops_forward: u64,
    /// Measured; zero for purely analytic reports.
    pub steps_per_second: f64,
    /// Peak heap use during measurement; zero unless [`CountingAlloc`] is the
    /// global allocator.
    pub peak_alloc_bytes: usize,
    pub breakdown: Vec<(String, u64)>,
}

impl CostReport {
    pub fn component(&self, name: &str) -> u64 {
        self.breakdown.iter().filter(|(n, _)| n == name).map(|(_, f)| f).sum()
    }

    /// Sum over components whose name starts with `prefix`.
    pub fn prefix_total(&self, prefix: &str) -> u64 {
        self.breakdown.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, f)| f).sum()
    }

    /// `component<TAB>flops` lines.
    pub fn to_records(&self) -> String {
        self.breakdown.iter().map(|(n, f)| format!("{n}\t{f}\n")).collect()
    }
}

/// Target length of a span-corruption example over `len` bytes with the
/// default corruption settings.
pub fn expected_target_len(len: usize, corruption_rate: f64, mean_span: f64) -> usize {
    let noise = ((corruption_rate * len as f64).round() as usize).clamp(1, len.max(1));
    let spans = ((noise as f64 / mean_span).round() as usize).clamp(1, bytes::NUM_SENTINELS - 1);
    noise + spans + 1
}

/// Closed-form parameter count for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let s = &cfg.stack;
    let (d, e) = (s.d_model, s.heads * s.d_kv);
    let attn = 4 * d * e;
    let ffn = 2 * d * s.d_ff + s.d_ff + d;
    let norm = 2 * d;
    let gbst = match s.frontend {
        Frontend::Gbst => cfg.gbst.conv_kernel_size.map_or(0, |k| k * d * d + d) + d,
        Frontend::Identity => 0,
    };
    VOCAB_SIZE * d
        + gbst
        + s.max_source_len * d
        + s.encoder_layers * (attn + ffn + 2 * norm)
        + norm
        + s.max_target_len * d
        + s.decoder_layers * (2 * attn + ffn + 3 * norm)
        + norm
        + d * VOCAB_SIZE
}

pub fn count_flops(cfg: &ModelConfig, len: usize, target_len: usize) -> Result<CostReport> {
    cfg.validate()?;
    let s = &cfg.stack;
    let u = |x: usize| x as u64;
    let (d, e, h, ff) = (u(s.d_model), u(s.heads * s.d_kv), u(s.heads), u(s.d_ff));
    let (l, t) = (u(len), u(target_len));
    let mut rows: Vec<(String, u64)> = Vec::new();
    let mut push = |name: &str, f: u64| rows.push((name.to_string(), f));

    let src = match s.frontend {
        Frontend::Gbst => {
            let g = &cfg.gbst;
            if len < g.downsample_rate {
                return Err(Error::EmptyOutput {
                    op: "count_flops",
                    detail: format!("length {len} is shorter than the downsampling rate {}", g.downsample_rate),
                });
            }
            let c = u(g.num_streams());
            let src = u(g.output_len(len));
            push("gbst.conv", g.conv_kernel_size.map_or(0, |k| 2 * l * u(k) * d * d));
            push("gbst.pool", c * l * d);
            push("gbst.score", 2 * c * l * d);
            push("gbst.softmax", 5 * l * c);
            push("gbst.mix", 2 * l * c * d);
            push("gbst.calibration", if g.enable_calibration { 4 * l * l * c + 5 * l * l } else { 0 });
            push("gbst.downsample", if g.downsample_rate > 1 { src * u(g.downsample_rate) * d } else { 0 });
            src
        }
        Frontend::Identity => l,
    };

    let el = u(s.encoder_layers);
    push("encoder.attn_proj", el * 8 * src * d * e);
    push("encoder.attn_scores", el * (4 * src * src * e + 5 * h * src * src));
    push("encoder.ffn", el * 4 * src * d * ff);
    push("encoder.norm", if el > 0 { (2 * el + 1) * 5 * src * d } else { 0 });

    let dl = u(s.decoder_layers);
    push("decoder.self_attn_proj", dl * 8 * t * d * e);
    push("decoder.self_attn_scores", dl * (4 * t * t * e + 5 * h * t * t));
    push("decoder.cross_attn_proj", dl * (4 * t * d * e + 4 * src * d * e));
    push("decoder.cross_attn_scores", dl * (4 * t * src * e + 5 * h * t * src));
    push("decoder.ffn", dl * 4 * t * d * ff);
    push("decoder.norm", if dl > 0 { (3 * dl + 1) * 5 * t * d } else { 0 });

    push("output.logits", 2 * t * d * u(VOCAB_SIZE));
    push("output.softmax", 5 * t * u(VOCAB_SIZE));

    let flops_forward = rows.iter().map(|(_, f)| f).sum();
    Ok(CostReport {
        params: count_params(cfg),
        flops_forward,
        steps_per_second: 0.0,
        peak_alloc_bytes: 0,
        breakdown: rows,
    })
}

/// Deterministic span-corruption batch over random printable bytes.
pub fn synthetic_batch(cfg: &TrainConfig, len: usize, seed: u64) -> Result<Vec<Seq2SeqExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.batch_size)
        .map(|_| {
            let ids: Vec<u8> = (0..len).map(|_| rng.random_range(32u8..127)).collect();
            let ex = bytes::corrupt_spans(&ByteSequence::from_ids(ids), cfg.corruption_rate, cfg.mean_span, rng.random())?;
            Ok(Seq2SeqExample::from(&ex))
        })
        .collect()
}

pub const WARMUP_STEPS: usize = 3;

/// Times `n_steps` training steps at input length `len` after discarding
/// [`WARMUP_STEPS`]; reports the median rate. Results are only comparable
/// when the process has the CPU to itself.
pub fn benchmark_steps(model: &mut Model, cfg: &TrainConfig, n_steps: usize, len: usize) -> Result<CostReport> {
    if n_steps < 10 {
        return Err(Error::Precondition(format!("benchmark needs at least 10 steps, got {n_steps}")));
    }
    let batch = synthetic_batch(cfg, len, cfg.seed)?;
    let target_len = batch.iter().map(|ex| ex.target.len()).max().unwrap_or(1);
    let mut report = count_flops(model.config(), len, target_len)?;
    let mut opt = Optimizer::new(cfg.optimizer, model);
    let mut times = Vec::with_capacity(n_steps);
    CountingAlloc::reset_peak();
    for i in 0..WARMUP_STEPS + n_steps {
        let start = Instant::now();
        crate::training::train_step(model, &mut opt, &batch, cfg)?;
        if i >= WARMUP_STEPS {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 0 { 0.5 * (times[mid - 1] + times[mid]) } else { times[mid] };
    report.steps_per_second = 1.0 / median;
    report.peak_alloc_bytes = CountingAlloc::peak();
    report.params = model.num_parameters();
    Ok(report)
}

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator wrapper that tracks live and peak heap bytes. Install with
/// `#[global_allocator]` to populate [`CostReport::peak_alloc_bytes`].
pub struct CountingAlloc;

impl CountingAlloc {
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub fn peak() -> usize {
        PEAK.load(Ordering::Relaxed)
    }
}

// SAFETY: defers to `System` for every allocation; only counters are added.
unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}
