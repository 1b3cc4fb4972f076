//! Gradient-based subword tokenization.
//!
//! The layer turns a byte-embedding sequence `x[L×d]` into a shorter sequence
//! of soft "latent subwords":
//!
//! 1. optionally smooth `x` with a length-preserving 1-D convolution;
//! 2. for every block size `b ≤ M` (and, with offsets, every shift `o < b`)
//!    mean-pool non-overlapping blocks of `b` rows, then replicate each block
//!    `b` times so the stream is realigned to length `L`;
//! 3. score each block with a bias-free linear map and softmax the scores
//!    across streams at every position;
//! 4. optionally calibrate the score matrix with projection-free attention
//!    over positions, `softmax(P Pᵀ) P`;
//! 5. mix the realigned streams with the per-position weights;
//! 6. mean-pool the mixture with window and stride `d_s`.
//!
//! Trailing positions of a partially covered block see zero padding, which
//! also contributes a zero score for wholly padded blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbstConfig {
    pub max_block_size: usize,
    pub downsample_rate: usize,
    pub conv_kernel_size: Option<usize>,
    pub enable_offsets: bool,
    pub enable_calibration: bool,
    pub pooling: Pooling,
    pub embedding_dim: usize,
}

impl Default for GbstConfig {
    fn default() -> Self {
        Self {
            max_block_size: 4,
            downsample_rate: 2,
            conv_kernel_size: Some(5),
            enable_offsets: false,
            enable_calibration: false,
            pooling: Pooling::Mean,
            embedding_dim: 64,
        }
    }
}

impl GbstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_block_size == 0 {
            return Err(Error::Config("max_block_size must be ≥ 1".into()));
        }
        if self.downsample_rate == 0 {
            return Err(Error::Config("downsample_rate must be ≥ 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be ≥ 1".into()));
        }
        if let Some(k) = self.conv_kernel_size {
            if k % 2 == 0 {
                return Err(Error::Config(format!("conv_kernel_size must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// Candidate streams in mixing order: block sizes ascending, offsets
    /// ascending within each size.
    pub fn streams(&self) -> Vec<StreamSpec> {
        (1..=self.max_block_size)
            .flat_map(|b| {
                let offsets = if self.enable_offsets { b } else { 1 };
                (0..offsets).map(move |o| StreamSpec { block_size: b, offset: o })
            })
            .collect()
    }

    pub fn num_streams(&self) -> usize {
        if self.enable_offsets {
            self.max_block_size * (self.max_block_size + 1) / 2
        } else {
            self.max_block_size
        }
    }

    /// `floor(L / d_s)`.
    pub fn output_len(&self, len: usize) -> usize {
        len / self.downsample_rate
    }
}

/// One candidate stream: a block size and a left shift of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSpec {
    pub block_size: usize,
    pub offset: usize,
}

impl StreamSpec {
    pub fn label(&self) -> String {
        if self.offset == 0 {
            format!("b={}", self.block_size)
        } else {
            format!("b={},o={}", self.block_size, self.offset)
        }
    }
}

/// Initial value of the block scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScorerInit {
    #[default]
    Normal,
    Zeros,
}

#[derive(Clone, Copy, Debug)]
pub struct GbstParams {
    pub conv_weight: Option<ParamId>,
    pub conv_bias: Option<ParamId>,
    pub scorer: ParamId,
}

pub const PARAM_PREFIX: &str = "gbst.";

impl GbstParams {
    pub fn init(store: &mut ParamStore, cfg: &GbstConfig, scorer_init: ScorerInit, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embedding_dim;
        let (conv_weight, conv_bias) = match cfg.conv_kernel_size {
            Some(k) => {
                let std = 1.0 / ((k * d) as f64).sqrt();
                let w = store.add("gbst.conv.weight", Tensor::randn(&[k, d, d], std, rng)?)?;
                let b = store.add("gbst.conv.bias", Tensor::zeros(&[d])?)?;
                (Some(w), Some(b))
            }
            None => (None, None),
        };
        let scorer = match scorer_init {
            ScorerInit::Normal => Tensor::randn(&[d, 1], 1.0 / (d as f64).sqrt(), rng)?,
            ScorerInit::Zeros => Tensor::zeros(&[d, 1])?,
        };
        let scorer = store.add("gbst.scorer", scorer)?;
        Ok(Self { conv_weight, conv_bias, scorer })
    }

    /// Looks the parameters up by name in a restored store.
    pub fn from_store(store: &ParamStore, cfg: &GbstConfig) -> Result<Self> {
        let find = |name: &str| store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")));
        let (conv_weight, conv_bias) = if cfg.conv_kernel_size.is_some() {
            (Some(find("gbst.conv.weight")?), Some(find("gbst.conv.bias")?))
        } else {
            (None, None)
        };
        Ok(Self { conv_weight, conv_bias, scorer: find("gbst.scorer")? })
    }
}

/// Pooled blocks of one stream and their realignment to the input length.
#[derive(Clone, Copy, Debug)]
pub struct CandidateStream {
    pub spec: StreamSpec,
    /// `ceil(L/b) × d`
    pub pooled: Var,
    /// `L × d`
    pub realigned: Var,
}

/// Tape handles for the block scores of every stream at every position.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMatrix {
    /// Pre-softmax scores, `L × C`.
    pub raw: Var,
    /// Softmax over streams, `L × C`.
    pub weights: Var,
    /// Calibrated weights, when enabled.
    pub calibrated: Option<Var>,
}

impl ScoreMatrix {
    /// The weights actually used for mixing.
    pub fn mixing(&self) -> Var {
        self.calibrated.unwrap_or(self.weights)
    }
}

#[derive(Clone, Debug)]
pub struct GbstOutput {
    /// `L × d`
    pub latent: Var,
    /// `floor(L/d_s) × d`
    pub downsampled: Var,
    pub scores: ScoreMatrix,
    pub streams: Vec<StreamSpec>,
}

/// Zero-pads rows up to the next multiple of `b`.
pub fn pad_to_multiple(tape: &mut Tape, x: Var, b: usize) -> Result<Var> {
    if b == 0 {
        return Err(Error::Config("block size must be ≥ 1".into()));
    }
    let len = tape.value(x).rows();
    tape.pad_rows(x, len.next_multiple_of(b) - len)
}

/// Drops the first `offset` rows and zero-fills the tail so the length is kept.
fn shift_left(tape: &mut Tape, x: Var, offset: usize) -> Result<Var> {
    if offset == 0 {
        return Ok(x);
    }
    let (len, d) = (tape.value(x).rows(), tape.value(x).cols());
    if offset >= len {
        return tape.constant(Tensor::zeros(&[len, d])?);
    }
    let tail = tape.slice_rows(x, offset, len)?;
    tape.pad_rows(tail, offset)
}

/// Replicates each row `b` times, zero-pads if that falls short of `len`, and
/// cuts back to `len` rows.
fn realign(tape: &mut Tape, pooled: Var, b: usize, len: usize) -> Result<Var> {
    let up = tape.repeat_upsample(pooled, b)?;
    let up_len = tape.value(up).rows();
    let up = if up_len < len { tape.pad_rows(up, len - up_len)? } else { up };
    tape.slice_rows(up, 0, len)
}

/// Every candidate stream of `x`, in [`GbstConfig::streams`] order.
pub fn enumerate_blocks(tape: &mut Tape, x: Var, cfg: &GbstConfig) -> Result<Vec<CandidateStream>> {
    cfg.validate()?;
    let len = tape.value(x).rows();
    cfg.streams()
        .into_iter()
        .map(|spec| {
            let shifted = shift_left(tape, x, spec.offset)?;
            let padded = pad_to_multiple(tape, shifted, spec.block_size)?;
            let pooled = tape.mean_pool_1d(padded, spec.block_size, spec.block_size)?;
            let realigned = realign(tape, pooled, spec.block_size, len)?;
            Ok(CandidateStream { spec, pooled, realigned })
        })
        .collect()
}

/// Scores each pooled block with `scorer[d×1]`, replicates the scores like the
/// blocks, and softmaxes across streams per position.
pub fn score_blocks(tape: &mut Tape, candidates: &[CandidateStream], scorer: Var) -> Result<ScoreMatrix> {
    let Some(first) = candidates.first() else {
        return Err(Error::Dimension { op: "score_blocks", detail: "no candidate streams".into() });
    };
    let d = tape.value(first.pooled).cols();
    if tape.value(scorer).shape() != [d, 1] {
        return Err(Error::Dimension {
            op: "score_blocks",
            detail: format!("scorer has shape {:?}, expected [{d}, 1]", tape.value(scorer).shape()),
        });
    }
    let len = tape.value(first.realigned).rows();
    let mut columns = Vec::with_capacity(candidates.len());
    for c in candidates {
        if tape.value(c.realigned).rows() != len {
            return Err(Error::Dimension { op: "score_blocks", detail: "streams differ in length".into() });
        }
        let block_scores = tape.matmul(c.pooled, scorer)?;
        columns.push(realign(tape, block_scores, c.spec.block_size, len)?);
    }
    let raw = tape.concat_last_axis(&columns)?;
    let weights = tape.softmax_last_axis(raw)?;
    Ok(ScoreMatrix { raw, weights, calibrated: None })
}

/// `softmax(P Pᵀ) P`: every position's block distribution becomes a convex
/// combination of all positions' distributions.
pub fn calibrate_scores(tape: &mut Tape, p: Var) -> Result<Var> {
    let pt = tape.transpose_2d(p)?;
    let affinity = tape.matmul(p, pt)?;
    let attn = tape.softmax_last_axis(affinity)?;
    tape.matmul(attn, p)
}

/// `X̂_i = Σ_c weights[i][c] · realigned_c[i]`.
pub fn form_latent(tape: &mut Tape, candidates: &[CandidateStream], weights: Var) -> Result<Var> {
    let c = tape.value(weights).cols();
    if c != candidates.len() {
        return Err(Error::Dimension {
            op: "form_latent",
            detail: format!("{c} weight columns for {} streams", candidates.len()),
        });
    }
    let mut acc: Option<Var> = None;
    for (j, cand) in candidates.iter().enumerate() {
        let w = tape.slice_cols(weights, j, j + 1)?;
        let term = tape.scale_rows(cand.realigned, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one stream"))
}

/// Mean pooling with window = stride = `rate`; remainder rows are dropped.
pub fn downsample(tape: &mut Tape, latent: Var, rate: usize) -> Result<Var> {
    let len = tape.value(latent).rows();
    if rate == 0 {
        return Err(Error::Config("downsample_rate must be ≥ 1".into()));
    }
    if len < rate {
        return Err(Error::EmptyOutput {
            op: "downsample",
            detail: format!("length {len} is shorter than the downsampling rate {rate}"),
        });
    }
    if rate == 1 {
        return Ok(latent);
    }
    tape.mean_pool_1d(latent, rate, rate)
}

/// Conv, block enumeration, scoring and optional calibration. Unlike
/// [`gbst_forward`] this places no lower bound on the input length.
pub fn gbst_scores(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &GbstConfig,
    params: &GbstParams,
) -> Result<(Vec<CandidateStream>, ScoreMatrix)> {
    cfg.validate()?;
    let smoothed = match (params.conv_weight, params.conv_bias) {
        (Some(w), Some(b)) => {
            let w = tape.param(store, w)?;
            let b = tape.param(store, b)?;
            tape.conv1d_same(x, w, b)?
        }
        _ => x,
    };
    let candidates = enumerate_blocks(tape, smoothed, cfg)?;
    let scorer = tape.param(store, params.scorer)?;
    let mut scores = score_blocks(tape, &candidates, scorer)?;
    if cfg.enable_calibration {
        scores.calibrated = Some(calibrate_scores(tape, scores.weights)?);
    }
    Ok((candidates, scores))
}

pub fn gbst_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &GbstConfig,
    params: &GbstParams,
) -> Result<GbstOutput> {
    let len = tape.value(x).rows();
    if len < cfg.downsample_rate {
        return Err(Error::EmptyOutput {
            op: "gbst_forward",
            detail: format!("length {len} is shorter than the downsampling rate {}", cfg.downsample_rate),
        });
    }
    let (candidates, scores) = gbst_scores(tape, store, x, cfg, params)?;
    let latent = form_latent(tape, &candidates, scores.mixing())?;
    let downsampled = downsample(tape, latent, cfg.downsample_rate)?;
    Ok(GbstOutput { latent, downsampled, scores, streams: cfg.streams() })
}

/// Materialized score matrix with stream labels, for export.
#[derive(Clone, Debug)]
pub struct ScoreTable {
    pub labels: Vec<String>,
    /// `L × C` softmax weights.
    pub weights: Tensor,
    pub calibrated: Option<Tensor>,
}

impl ScoreTable {
    pub fn from_output(tape: &Tape, out: &GbstOutput) -> Self {
        Self::new(tape, &out.scores, &out.streams)
    }

    pub fn new(tape: &Tape, scores: &ScoreMatrix, streams: &[StreamSpec]) -> Self {
        Self {
            labels: streams.iter().map(StreamSpec::label).collect(),
            weights: tape.value(scores.weights).clone(),
            calibrated: scores.calibrated.map(|v| tape.value(v).clone()),
        }
    }

    /// Tab-separated, one row per stream (label first), one column per
    /// position, six decimals.
    pub fn to_tsv(matrix: &Tensor, labels: &[String]) -> String {
        let (len, c) = (matrix.rows(), matrix.cols());
        let mut out = String::new();
        for (s, label) in labels.iter().enumerate().take(c) {
            out.push_str(label);
            for i in 0..len {
                out.push('\t');
                out.push_str(&format!("{:.6}", matrix.get(i, s)));
            }
            out.push('\n');
        }
        out
    }

    /// One character per cell, shaded by weight decile.
    pub fn ascii_heatmap(matrix: &Tensor, labels: &[String], text: &[u8]) -> String {
        const SHADES: &[u8; 10] = b" .:-=+*#%@";
        let width = labels.iter().map(String::len).max().unwrap_or(0);
        let mut out = format!("{:width$} |", "");
        for &b in text.iter().take(matrix.rows()) {
            out.push(if b.is_ascii_graphic() { b as char } else { '_' });
        }
        out.push('\n');
        for (s, label) in labels.iter().enumerate() {
            out.push_str(&format!("{label:width$} |"));
            for i in 0..matrix.rows() {
                let decile = ((matrix.get(i, s) * 10.0).floor() as usize).min(9);
                out.push(SHADES[decile] as char);
            }
            out.push('\n');
        }
        out
    }
}
