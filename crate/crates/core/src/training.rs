//! Optimization loop for span-corruption pre-training and fine-tuning.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{self, ByteSequence, SpanCorruptionExample, DEFAULT_CORRUPTION_RATE, DEFAULT_MEAN_SPAN};
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::transformer::{Model, Seq2SeqExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    Constant,
    #[default]
    InverseSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Base rate; with `InverseSqrt` the effective rate is
    /// `base / sqrt(max(step, warmup_steps))`.
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub seed: u64,
    pub freeze_gbst: bool,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Bytes per pre-training window.
    pub input_length: usize,
    pub corruption_rate: f64,
    pub mean_span: f64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 500,
            learning_rate: 0.03,
            schedule: Schedule::InverseSqrt,
            warmup_steps: 100,
            seed: 0,
            freeze_gbst: false,
            optimizer: OptimizerKind::Adam,
            clip_norm: Some(1.0),
            input_length: 96,
            corruption_rate: DEFAULT_CORRUPTION_RATE,
            mean_span: DEFAULT_MEAN_SPAN,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Constant 1e-3 with the GBST layer frozen.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 1e-3,
            schedule: Schedule::Constant,
            freeze_gbst: true,
            steps: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and ≥ 0", self.learning_rate)));
        }
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(Error::Config(format!("corruption_rate {} must lie in (0, 1)", self.corruption_rate)));
        }
        if self.mean_span.is_nan() || self.mean_span < 1.0 {
            return Err(Error::Config(format!("mean_span {} must be ≥ 1", self.mean_span)));
        }
        if self.input_length == 0 {
            return Err(Error::Config("input_length must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Effective rate for 1-based `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::InverseSqrt => self.learning_rate / (step.max(self.warmup_steps as u64).max(1) as f64).sqrt(),
        }
    }
}

/// Optimizer state, one slot per parameter in store order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { kind, second: zeros.clone(), first: zeros, t: 0 }
    }

    /// Applies the stored gradients; frozen parameters are skipped.
    pub fn update(&mut self, model: &mut Model, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, p) in model.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean per-token cross-entropy over the batch, in nats.
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

fn describe_batch(batch: &[Seq2SeqExample]) -> String {
    batch
        .iter()
        .enumerate()
        .map(|(i, ex)| format!("example {i}: input [{}] target [{}]", ex.input.to_decimal(), ex.target.to_decimal()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One optimizer step on `batch`.
///
/// Each example runs on its own tape; parameter gradients are summed in batch
/// order, scaled so the objective is the mean cross-entropy per target token.
pub fn train_step(model: &mut Model, opt: &mut Optimizer, batch: &[Seq2SeqExample], cfg: &TrainConfig) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    model.set_gbst_frozen(cfg.freeze_gbst);
    model.params.zero_grad();
    let total_tokens: usize = batch.iter().map(|ex| ex.target.len()).sum();
    let scale = 1.0 / total_tokens as f64;
    let abort = |e: Error| match e {
        Error::NonFinite(op) => Error::NumericalAbort(format!("non-finite value in {op}\n{}", describe_batch(batch))),
        other => other,
    };
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new();
        let (ce, _) = model.loss(&mut tape, ex).map_err(abort)?;
        total += tape.value(ce).data()[0];
        let scaled = tape.scale(ce, scale).map_err(abort)?;
        tape.backward(scaled)?.accumulate_into(&mut model.params);
    }
    let loss = total * scale;
    let grad_norm = model.params.grad_norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NumericalAbort(format!("loss {loss}, gradient norm {grad_norm}\n{}", describe_batch(batch))));
    }
    if let Some(max) = cfg.clip_norm {
        if grad_norm > max {
            let f = max / grad_norm;
            for p in model.params.iter_mut() {
                p.grad.iter_mut().for_each(|g| *g *= f);
            }
        }
    }
    model.step += 1;
    let lr = cfg.learning_rate_at(model.step);
    opt.update(model, lr);
    Ok(StepStats { loss, lr, grad_norm })
}

/// Pre-training text as one byte stream of newline-joined documents.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        let docs = bytes::split_documents(text);
        if docs.is_empty() {
            return Err(Error::Precondition("corpus has no documents".into()));
        }
        Ok(Self { bytes: docs.join("\n").into_bytes() })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// A window of at most `len` bytes at a uniformly random start.
    pub fn window(&self, len: usize, rng: &mut impl Rng) -> ByteSequence {
        let len = len.min(self.bytes.len());
        let start = rng.random_range(0..=self.bytes.len() - len);
        ByteSequence::from_ids(self.bytes[start..start + len].to_vec())
    }

    /// The span-corruption batch for `step`; a pure function of the seed and
    /// the step number.
    pub fn batch(&self, cfg: &TrainConfig, step: u64) -> Result<Vec<SpanCorruptionExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step);
        (0..cfg.batch_size)
            .map(|_| {
                let window = self.window(cfg.input_length, &mut rng);
                bytes::corrupt_spans(&window, cfg.corruption_rate, cfg.mean_span, rng.next_u64())
            })
            .collect()
    }
}

/// Exponential moving average seeded with the first observation.
#[derive(Clone, Copy, Debug)]
pub struct Ema {
    beta: f64,
    value: Option<f64>,
}

impl Ema {
    /// `window` steps of memory: `beta = 1 - 1/window`.
    pub fn with_window(window: usize) -> Self {
        Self { beta: 1.0 - 1.0 / window as f64, value: None }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            Some(v) => self.beta * v + (1.0 - self.beta) * x,
            None => x,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    /// `step<TAB>loss<TAB>lr`
    pub fn to_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6e}", self.step, self.loss, self.lr)
    }
}

/// Runs `cfg.steps` optimizer steps, drawing batch `t` from `batches(t)`.
pub fn train_loop(
    model: &mut Model,
    cfg: &TrainConfig,
    mut batches: impl FnMut(u64) -> Result<Vec<Seq2SeqExample>>,
    mut on_step: impl FnMut(&Model, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer, model);
    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = batches(model.step + 1)?;
        let stats = train_step(model, &mut opt, &batch, cfg)?;
        let rec = StepRecord { step: model.step, loss: stats.loss, lr: stats.lr };
        on_step(model, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Span-corruption pre-training on `corpus`.
pub fn pretrain(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_step: impl FnMut(&Model, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    train_loop(
        model,
        cfg,
        |step| Ok(corpus.batch(cfg, step)?.iter().map(Seq2SeqExample::from).collect()),
        on_step,
    )
}

/// Parses `text<TAB>label` lines into examples whose target is the label
/// followed by the terminal symbol.
pub fn parse_labelled(text: &str) -> Result<Vec<Seq2SeqExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (input, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected `text<TAB>label`".into() })?;
        if input.is_empty() || label.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty text or label".into() });
        }
        let mut target = bytes::encode(label);
        target.ids.push(bytes::BOS_ID);
        out.push(Seq2SeqExample { input: bytes::encode(input), target: ByteSequence::from_ids(target.ids) });
    }
    if out.is_empty() {
        return Err(Error::Precondition("no labelled examples".into()));
    }
    Ok(out)
}

/// Fine-tuning on labelled examples with seeded sampling.
pub fn finetune(
    model: &mut Model,
    data: &[Seq2SeqExample],
    cfg: &TrainConfig,
    on_step: impl FnMut(&Model, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::Precondition("no fine-tuning data".into()));
    }
    train_loop(
        model,
        cfg,
        |step| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step);
            Ok((0..cfg.batch_size).map(|_| data[rng.random_range(0..data.len())].clone()).collect())
        },
        on_step,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Teacher-forced cross-entropy per target byte.
    pub nats_per_byte: f64,
    /// Fraction of examples whose greedy decode equals the target exactly.
    pub exact_span_match_rate: f64,
}

pub fn evaluate(model: &Model, dataset: &[Seq2SeqExample]) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Precondition("cannot evaluate on an empty dataset".into()));
    }
    let mut nats = 0.0;
    let mut tokens = 0;
    let mut exact = 0;
    for ex in dataset {
        let mut tape = Tape::new();
        let (ce, n) = model.loss(&mut tape, ex)?;
        nats += tape.value(ce).data()[0];
        tokens += n;
        let decoded = model.greedy_decode(&ex.input, ex.target.len(), ex.terminal())?;
        if decoded.ids == ex.target.ids {
            exact += 1;
        }
    }
    Ok(Metrics {
        nats_per_byte: nats / tokens as f64,
        exact_span_match_rate: exact as f64 / dataset.len() as f64,
    })
}
