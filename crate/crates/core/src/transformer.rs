//! Byte-level encoder-decoder.
//!
//! The encoder consumes either GBST latent subwords or raw byte embeddings
//! (the identity frontend). Both stacks are pre-norm with learned absolute
//! position embeddings; the decoder predicts bytes with teacher forcing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bytes::{self, ByteSequence, SpanCorruptionExample, BOS_ID, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::gbst::{self, GbstConfig, GbstOutput, GbstParams, ScoreTable, ScorerInit};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Frontend {
    #[default]
    Gbst,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    pub frontend: Frontend,
    /// Rows of the encoder position table (byte length for the identity
    /// frontend, downsampled length for GBST).
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            heads: 4,
            d_kv: 16,
            d_ff: 256,
            frontend: Frontend::Gbst,
            max_source_len: 1024,
            max_target_len: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub stack: StackConfig,
    pub gbst: GbstConfig,
    pub scorer_init: ScorerInit,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.stack;
        if s.d_model == 0 || s.heads == 0 || s.d_kv == 0 || s.d_ff == 0 {
            return Err(Error::Config("d_model, heads, d_kv and d_ff must be ≥ 1".into()));
        }
        if s.max_source_len == 0 || s.max_target_len == 0 {
            return Err(Error::Config("maximum lengths must be ≥ 1".into()));
        }
        if s.frontend == Frontend::Gbst {
            self.gbst.validate()?;
            if self.gbst.embedding_dim != s.d_model {
                return Err(Error::Config(format!(
                    "GBST embedding dim {} must equal d_model {}",
                    self.gbst.embedding_dim, s.d_model
                )));
            }
        }
        Ok(())
    }

    /// Encoder length for a byte input of length `len`.
    pub fn source_len(&self, len: usize) -> usize {
        match self.stack.frontend {
            Frontend::Gbst => self.gbst.output_len(len),
            Frontend::Identity => len,
        }
    }

    /// Longest byte input the position table accepts.
    pub fn max_input_bytes(&self) -> usize {
        match self.stack.frontend {
            Frontend::Gbst => self.stack.max_source_len * self.gbst.downsample_rate + self.gbst.downsample_rate - 1,
            Frontend::Identity => self.stack.max_source_len,
        }
    }
}

/// An input/target byte pair for teacher-forced training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqExample {
    pub input: ByteSequence,
    /// Ends with the terminal symbol that stops greedy decoding.
    pub target: ByteSequence,
}

impl Seq2SeqExample {
    pub fn terminal(&self) -> u8 {
        *self.target.ids.last().expect("non-empty target")
    }
}

impl From<&SpanCorruptionExample> for Seq2SeqExample {
    fn from(ex: &SpanCorruptionExample) -> Self {
        Self { input: ex.encoder_input.clone(), target: ex.decoder_target.clone() }
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttentionParams {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnParams {
    w_in: ParamId,
    b_in: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln_attn: LayerNormParams,
    attn: AttentionParams,
    ln_ffn: LayerNormParams,
    ffn: FfnParams,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    ln_self: LayerNormParams,
    self_attn: AttentionParams,
    ln_cross: LayerNormParams,
    cross_attn: AttentionParams,
    ln_ffn: LayerNormParams,
    ffn: FfnParams,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    gbst: Option<GbstParams>,
    enc_pos: ParamId,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: LayerNormParams,
    dec_pos: ParamId,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: LayerNormParams,
    lm_head: ParamId,
}

/// Parameters, configuration and step counter of one model.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
    layout: Layout,
}

pub struct FrontendOutput {
    /// Encoder input, `L' × d`.
    pub source: Var,
    pub gbst: Option<GbstOutput>,
}

pub struct EncoderOutput {
    pub memory: Var,
    /// Per layer, per head attention probabilities.
    pub attention: Vec<Vec<Var>>,
}

pub struct DecoderOutput {
    /// `T × 256`
    pub logits: Var,
    pub self_attention: Vec<Vec<Var>>,
    pub cross_attention: Vec<Vec<Var>>,
}

/// Parameter group used for gradient-check reporting.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("embed.") {
        "embedding"
    } else if name.starts_with("gbst.conv") {
        "conv"
    } else if name.starts_with("gbst.scorer") {
        "scorer"
    } else if name.contains(".ln_") || name.contains("final_ln") {
        "norm"
    } else if name.contains("attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.ends_with(".pos") {
        "position"
    } else {
        "output"
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng)?;
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value)?)
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.constant(format!("{prefix}.gain"), &[d], 1.0)?,
            bias: self.constant(format!("{prefix}.bias"), &[d], 0.0)?,
        })
    }

    fn attention(&mut self, prefix: &str, s: &StackConfig) -> Result<AttentionParams> {
        let inner = s.heads * s.d_kv;
        Ok(AttentionParams {
            q: self.normal(format!("{prefix}.q"), &[s.d_model, inner], INIT_STD)?,
            k: self.normal(format!("{prefix}.k"), &[s.d_model, inner], INIT_STD)?,
            v: self.normal(format!("{prefix}.v"), &[s.d_model, inner], INIT_STD)?,
            o: self.normal(format!("{prefix}.o"), &[inner, s.d_model], INIT_STD)?,
        })
    }

    fn ffn(&mut self, prefix: &str, s: &StackConfig) -> Result<FfnParams> {
        Ok(FfnParams {
            w_in: self.normal(format!("{prefix}.w_in"), &[s.d_model, s.d_ff], INIT_STD)?,
            b_in: self.constant(format!("{prefix}.b_in"), &[s.d_ff], 0.0)?,
            w_out: self.normal(format!("{prefix}.w_out"), &[s.d_ff, s.d_model], INIT_STD)?,
            b_out: self.constant(format!("{prefix}.b_out"), &[s.d_model], 0.0)?,
        })
    }
}

impl Model {
    /// Fresh model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = config.stack.clone();
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let embedding = b.normal("embed.bytes".into(), &[VOCAB_SIZE, s.d_model], 1.0)?;
        let gbst = match s.frontend {
            Frontend::Gbst => Some(GbstParams::init(b.store, &config.gbst, config.scorer_init, b.rng)?),
            Frontend::Identity => None,
        };
        let enc_pos = b.normal("enc.pos".into(), &[s.max_source_len, s.d_model], INIT_STD)?;
        let enc_layers = (0..s.encoder_layers)
            .map(|i| {
                Ok(EncoderLayer {
                    ln_attn: b.layer_norm(&format!("enc.{i}.ln_attn"), s.d_model)?,
                    attn: b.attention(&format!("enc.{i}.attn"), &s)?,
                    ln_ffn: b.layer_norm(&format!("enc.{i}.ln_ffn"), s.d_model)?,
                    ffn: b.ffn(&format!("enc.{i}.ffn"), &s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = b.layer_norm("enc.final_ln", s.d_model)?;
        let dec_pos = b.normal("dec.pos".into(), &[s.max_target_len, s.d_model], INIT_STD)?;
        let dec_layers = (0..s.decoder_layers)
            .map(|i| {
                Ok(DecoderLayer {
                    ln_self: b.layer_norm(&format!("dec.{i}.ln_self"), s.d_model)?,
                    self_attn: b.attention(&format!("dec.{i}.self_attn"), &s)?,
                    ln_cross: b.layer_norm(&format!("dec.{i}.ln_cross"), s.d_model)?,
                    cross_attn: b.attention(&format!("dec.{i}.cross_attn"), &s)?,
                    ln_ffn: b.layer_norm(&format!("dec.{i}.ln_ffn"), s.d_model)?,
                    ffn: b.ffn(&format!("dec.{i}.ffn"), &s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = b.layer_norm("dec.final_ln", s.d_model)?;
        let lm_head = b.normal("lm_head".into(), &[s.d_model, VOCAB_SIZE], INIT_STD)?;
        let layout = Layout { embedding, gbst, enc_pos, enc_layers, enc_norm, dec_pos, dec_layers, dec_norm, lm_head };
        Ok(Self { config, params: store, step: 0, layout })
    }

    /// Rebuilds a model from restored parameters, checking names and shapes
    /// against a fresh layout for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore, step: u64) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (_, p) in params.iter() {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
            let slot = model.params.get_mut(id);
            if slot.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = p.value.clone();
            slot.frozen = p.frozen;
        }
        model.step = step;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn gbst_params(&self) -> Option<&GbstParams> {
        self.layout.gbst.as_ref()
    }

    /// Freezes or unfreezes every GBST parameter.
    pub fn set_gbst_frozen(&mut self, frozen: bool) {
        self.params.set_frozen_prefix(gbst::PARAM_PREFIX, frozen);
    }

    /// Byte embeddings, then GBST downsampling unless the frontend is identity.
    pub fn frontend(&self, tape: &mut Tape, input: &ByteSequence) -> Result<FrontendOutput> {
        if input.is_empty() {
            return Err(Error::Precondition("empty encoder input".into()));
        }
        let table = tape.param(&self.params, self.layout.embedding)?;
        let x = bytes::embed(tape, input, table)?;
        match &self.layout.gbst {
            Some(p) => {
                let out = gbst::gbst_forward(tape, &self.params, x, &self.config.gbst, p)?;
                Ok(FrontendOutput { source: out.downsampled, gbst: Some(out) })
            }
            None => Ok(FrontendOutput { source: x, gbst: None }),
        }
    }

    /// GBST block scores for `input`, which may be shorter than the
    /// downsampling rate. `None` for the identity frontend.
    pub fn block_scores(&self, input: &ByteSequence) -> Result<Option<ScoreTable>> {
        let Some(p) = &self.layout.gbst else { return Ok(None) };
        if input.is_empty() {
            return Err(Error::Precondition("empty input".into()));
        }
        let mut tape = Tape::new();
        let table = tape.param(&self.params, self.layout.embedding)?;
        let x = bytes::embed(&mut tape, input, table)?;
        let (_, scores) = gbst::gbst_scores(&mut tape, &self.params, x, &self.config.gbst, p)?;
        Ok(Some(ScoreTable::new(&tape, &scores, &self.config.gbst.streams())))
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, p: LayerNormParams) -> Result<Var> {
        let g = tape.param(&self.params, p.gain)?;
        let b = tape.param(&self.params, p.bias)?;
        tape.layer_norm(x, g, b)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, p: FfnParams) -> Result<Var> {
        let w_in = tape.param(&self.params, p.w_in)?;
        let b_in = tape.param(&self.params, p.b_in)?;
        let w_out = tape.param(&self.params, p.w_out)?;
        let b_out = tape.param(&self.params, p.b_out)?;
        let h = tape.matmul(x, w_in)?;
        let h = tape.add_bias(h, b_in)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, w_out)?;
        tape.add_bias(y, b_out)
    }

    /// Multi-head scaled dot-product attention. Returns the output and each
    /// head's probability matrix.
    fn attention(&self, tape: &mut Tape, queries: Var, keys: Var, p: AttentionParams, causal: bool) -> Result<(Var, Vec<Var>)> {
        let s = &self.config.stack;
        let wq = tape.param(&self.params, p.q)?;
        let wk = tape.param(&self.params, p.k)?;
        let wv = tape.param(&self.params, p.v)?;
        let wo = tape.param(&self.params, p.o)?;
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys, wk)?;
        let v = tape.matmul(keys, wv)?;
        let kt = tape.transpose_2d(k)?;
        let (tq, tk) = (tape.value(q).rows(), tape.value(k).rows());
        let mask = if causal {
            let mut m = vec![0.0; tq * tk];
            for i in 0..tq {
                for j in (i + 1)..tk {
                    m[i * tk + j] = MASKED;
                }
            }
            Some(tape.constant(Tensor::new(vec![tq, tk], m)?)?)
        } else {
            None
        };
        let scale = 1.0 / (s.d_kv as f64).sqrt();
        let mut heads = Vec::with_capacity(s.heads);
        let mut probs = Vec::with_capacity(s.heads);
        for h in 0..s.heads {
            let (lo, hi) = (h * s.d_kv, (h + 1) * s.d_kv);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kth = tape.slice_rows(kt, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul(qh, kth)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let a = tape.softmax_last_axis(scores)?;
            heads.push(tape.matmul(a, vh)?);
            probs.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_last_axis(&heads)? };
        Ok((tape.matmul(cat, wo)?, probs))
    }

    fn add_positions(&self, tape: &mut Tape, x: Var, table: ParamId, limit: usize, what: &str) -> Result<Var> {
        let len = tape.value(x).rows();
        if len > limit {
            return Err(Error::Precondition(format!("{what} length {len} exceeds the position table ({limit})")));
        }
        let pos = tape.param(&self.params, table)?;
        let pos = tape.slice_rows(pos, 0, len)?;
        tape.add(x, pos)
    }

    /// Runs the encoder stack. Zero layers means positions are added and
    /// nothing else (the final norm belongs to the layer stack).
    pub fn encode(&self, tape: &mut Tape, source: Var) -> Result<EncoderOutput> {
        let l = &self.layout;
        let mut x = self.add_positions(tape, source, l.enc_pos, self.config.stack.max_source_len, "encoder")?;
        let mut attention = Vec::with_capacity(l.enc_layers.len());
        for layer in &l.enc_layers {
            let h = self.layer_norm(tape, x, layer.ln_attn)?;
            let (a, probs) = self.attention(tape, h, h, layer.attn, false)?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, x, layer.ln_ffn)?;
            let f = self.ffn(tape, h, layer.ffn)?;
            x = tape.add(x, f)?;
            attention.push(probs);
        }
        if !l.enc_layers.is_empty() {
            x = self.layer_norm(tape, x, l.enc_norm)?;
        }
        Ok(EncoderOutput { memory: x, attention })
    }

    /// Logits for every position of `prefix`; position `j` sees only
    /// `prefix[..=j]` and the encoder memory.
    pub fn decode(&self, tape: &mut Tape, memory: Var, prefix: &[u8]) -> Result<DecoderOutput> {
        if prefix.is_empty() {
            return Err(Error::Precondition("decoder prefix must start with the BOS symbol".into()));
        }
        let l = &self.layout;
        let table = tape.param(&self.params, l.embedding)?;
        let ids: Vec<usize> = prefix.iter().map(|&b| b as usize).collect();
        let x = tape.embedding_gather(table, &ids)?;
        let mut x = self.add_positions(tape, x, l.dec_pos, self.config.stack.max_target_len, "decoder")?;
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for layer in &l.dec_layers {
            let h = self.layer_norm(tape, x, layer.ln_self)?;
            let (a, p) = self.attention(tape, h, h, layer.self_attn, true)?;
            x = tape.add(x, a)?;
            self_attention.push(p);
            let h = self.layer_norm(tape, x, layer.ln_cross)?;
            let (a, p) = self.attention(tape, h, memory, layer.cross_attn, false)?;
            x = tape.add(x, a)?;
            cross_attention.push(p);
            let h = self.layer_norm(tape, x, layer.ln_ffn)?;
            let f = self.ffn(tape, h, layer.ffn)?;
            x = tape.add(x, f)?;
        }
        if !l.dec_layers.is_empty() {
            x = self.layer_norm(tape, x, l.dec_norm)?;
        }
        let head = tape.param(&self.params, l.lm_head)?;
        let logits = tape.matmul(x, head)?;
        Ok(DecoderOutput { logits, self_attention, cross_attention })
    }

    /// Summed teacher-forced cross-entropy and the number of target tokens.
    pub fn loss(&self, tape: &mut Tape, example: &Seq2SeqExample) -> Result<(Var, usize)> {
        if example.target.is_empty() {
            return Err(Error::Precondition("empty decoder target".into()));
        }
        let src = self.frontend(tape, &example.input)?;
        let enc = self.encode(tape, src.source)?;
        let mut prefix = Vec::with_capacity(example.target.len());
        prefix.push(BOS_ID);
        prefix.extend_from_slice(&example.target.ids[..example.target.len() - 1]);
        let dec = self.decode(tape, enc.memory, &prefix)?;
        let targets = example.target.as_usize();
        Ok((tape.cross_entropy_with_logits(dec.logits, &targets)?, targets.len()))
    }

    /// Argmax decoding from BOS until `terminal` is emitted or `max_len`
    /// symbols have been produced. The BOS symbol is not part of the output.
    pub fn greedy_decode_from(&self, tape: &mut Tape, memory: Var, max_len: usize, terminal: u8) -> Result<ByteSequence> {
        if max_len == 0 {
            return Err(Error::Precondition("max_len must be ≥ 1".into()));
        }
        let limit = max_len.min(self.config.stack.max_target_len);
        let mut prefix = vec![BOS_ID];
        while prefix.len() <= limit {
            let dec = self.decode(tape, memory, &prefix)?;
            let logits = tape.value(dec.logits);
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last) as u8;
            prefix.push(next);
            if next == terminal {
                break;
            }
        }
        Ok(ByteSequence::from_ids(prefix[1..].to_vec()))
    }

    pub fn greedy_decode(&self, input: &ByteSequence, max_len: usize, terminal: u8) -> Result<ByteSequence> {
        let mut tape = Tape::new();
        let src = self.frontend(&mut tape, input)?;
        let enc = self.encode(&mut tape, src.source)?;
        self.greedy_decode_from(&mut tape, enc.memory, max_len, terminal)
    }
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
