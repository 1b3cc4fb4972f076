//! Byte vocabulary, embedding lookup and span corruption.
//!
//! IDs are raw UTF-8 byte values. The top 100 IDs double as sentinels: sentinel
//! `k` is ID `255 - k`. Ordinary encoding leaves bytes in that range untouched,
//! so they are only interpreted as sentinels inside corruption examples; text
//! containing non-ASCII characters can therefore collide with sentinels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const VOCAB_SIZE: usize = 256;
pub const NUM_SENTINELS: usize = 100;
pub const FIRST_SENTINEL_ID: u8 = 156;
pub const PAD_ID: u8 = 0;
/// Decoder start symbol; the same ID as sentinel 0.
pub const BOS_ID: u8 = 255;

pub const DEFAULT_CORRUPTION_RATE: f64 = 0.15;
pub const DEFAULT_MEAN_SPAN: f64 = 20.0;

pub fn sentinel(k: usize) -> u8 {
    assert!(k < NUM_SENTINELS, "sentinel index {k} out of range");
    (255 - k) as u8
}

pub fn is_sentinel(id: u8) -> bool {
    id >= FIRST_SENTINEL_ID
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ByteSequence {
    pub ids: Vec<u8>,
    /// Character index of the code point each byte belongs to.
    pub text_offset_map: Option<Vec<usize>>,
}

impl ByteSequence {
    pub fn from_ids(ids: Vec<u8>) -> Self {
        Self { ids, text_offset_map: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&b| b as usize).collect()
    }

    /// Space-separated decimal IDs.
    pub fn to_decimal(&self) -> String {
        self.ids.iter().map(u8::to_string).collect::<Vec<_>>().join(" ")
    }
}

pub fn encode(text: &str) -> ByteSequence {
    let mut map = Vec::with_capacity(text.len());
    for (ci, ch) in text.chars().enumerate() {
        map.extend(std::iter::repeat_n(ci, ch.len_utf8()));
    }
    ByteSequence { ids: text.as_bytes().to_vec(), text_offset_map: Some(map) }
}

/// Validates raw bytes as UTF-8 before encoding.
pub fn encode_bytes(raw: &[u8]) -> Result<ByteSequence> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::InvalidUtf8(e.valid_up_to()))?;
    Ok(encode(text))
}

pub fn decode(seq: &ByteSequence) -> Result<String> {
    String::from_utf8(seq.ids.clone()).map_err(|e| Error::InvalidUtf8(e.utf8_error().valid_up_to()))
}

/// Looks up one table row per ID; `table` must be `256 × d`.
pub fn embed(tape: &mut Tape, seq: &ByteSequence, table: Var) -> Result<Var> {
    tape.embedding_gather(table, &seq.as_usize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanCorruptionExample {
    pub encoder_input: ByteSequence,
    pub decoder_target: ByteSequence,
    pub mean_span_length: f64,
}

impl SpanCorruptionExample {
    pub fn num_spans(&self) -> usize {
        self.decoder_target.ids.iter().filter(|&&b| is_sentinel(b)).count().saturating_sub(1)
    }

    /// The sentinel that closes the target.
    pub fn terminal_sentinel(&self) -> u8 {
        *self.decoder_target.ids.last().expect("targets always end with a sentinel")
    }

    /// `input_ids<TAB>target_ids`
    pub fn to_record(&self) -> String {
        format!("{}\t{}", self.encoder_input.to_decimal(), self.decoder_target.to_decimal())
    }
}

/// Splits `total` into `parts` positive lengths uniformly at random.
fn random_partition(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    let mut cuts = rand::seq::index::sample(rng, total - 1, parts - 1).into_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c + 1 - prev);
        prev = c + 1;
    }
    out.push(total - prev);
    out
}

/// Moves length from spans above `cap` onto the shortest spans below it.
fn clip_lengths(lengths: &mut [usize], cap: usize) {
    loop {
        let Some(hi) = (0..lengths.len()).find(|&i| lengths[i] > cap) else { return };
        let lo = (0..lengths.len())
            .filter(|&i| lengths[i] < cap)
            .min_by_key(|&i| lengths[i])
            .expect("total never exceeds cap × spans");
        let moved = (lengths[hi] - cap).min(cap - lengths[lo]);
        lengths[hi] -= moved;
        lengths[lo] += moved;
    }
}

/// Replaces random spans with descending sentinels.
///
/// The number of corrupted bytes is `max(1, round(rate · len))`, split into
/// `round(noise / mean_span)` spans (at least one, at most 99) whose lengths are
/// a uniform random partition clipped to `[1, 2·mean_span]`. Unmasked bytes
/// between spans are a random partition with at least one byte between
/// consecutive spans. The target is `s0 span0 s1 span1 … s_k`.
pub fn corrupt_spans(seq: &ByteSequence, corruption_rate: f64, mean_span: f64, rng_seed: u64) -> Result<SpanCorruptionExample> {
    if !(corruption_rate > 0.0 && corruption_rate < 1.0) {
        return Err(Error::Precondition(format!("corruption rate {corruption_rate} must lie in (0, 1)")));
    }
    if mean_span.is_nan() || mean_span < 1.0 {
        return Err(Error::Precondition(format!("mean span {mean_span} must be ≥ 1")));
    }
    let n = seq.len();
    if n == 0 {
        return Err(Error::Precondition("cannot corrupt an empty sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = ((corruption_rate * n as f64).round() as usize).clamp(1, n);
    let keep = n - noise;
    let mut spans = ((noise as f64 / mean_span).round() as usize).clamp(1, NUM_SENTINELS - 1);
    // Spans need a kept byte between neighbours.
    spans = spans.min(keep + 1).min(noise);

    let mut span_lengths = random_partition(noise, spans, &mut rng);
    clip_lengths(&mut span_lengths, ((2.0 * mean_span).floor() as usize).max(noise.div_ceil(spans)));

    // Gaps: spans+1 slots, interior ones ≥ 1, the two ends ≥ 0.
    let free = keep - (spans - 1);
    let mut gaps = random_partition(free + spans + 1, spans + 1, &mut rng);
    for g in &mut gaps {
        *g -= 1;
    }
    for g in gaps.iter_mut().take(spans).skip(1) {
        *g += 1;
    }

    let mut input = Vec::with_capacity(keep + spans);
    let mut target = Vec::with_capacity(noise + spans + 1);
    let mut pos = 0;
    for (k, &len) in span_lengths.iter().enumerate() {
        input.extend_from_slice(&seq.ids[pos..pos + gaps[k]]);
        pos += gaps[k];
        input.push(sentinel(k));
        target.push(sentinel(k));
        target.extend_from_slice(&seq.ids[pos..pos + len]);
        pos += len;
    }
    input.extend_from_slice(&seq.ids[pos..]);
    target.push(sentinel(spans));
    debug_assert_eq!(pos + gaps[spans], n);

    Ok(SpanCorruptionExample {
        encoder_input: ByteSequence::from_ids(input),
        decoder_target: ByteSequence::from_ids(target),
        mean_span_length: mean_span,
    })
}

/// Inverts [`corrupt_spans`] by splicing each target span back in place of its
/// sentinel. Sentinels are matched in their expected order, so literal bytes in
/// the sentinel range are only misread when they equal the next sentinel.
pub fn reconstruct(example: &SpanCorruptionExample) -> Result<ByteSequence> {
    let target = &example.decoder_target.ids;
    let mut spans: Vec<&[u8]> = Vec::new();
    let mut k = 0;
    let mut start = None;
    for (i, &id) in target.iter().enumerate() {
        if k < NUM_SENTINELS && id == sentinel(k) {
            if let Some(s) = start {
                spans.push(&target[s..i]);
            }
            start = Some(i + 1);
            k += 1;
        }
    }
    if spans.is_empty() && k < 2 {
        return Err(Error::Precondition("target holds no complete span".into()));
    }
    let mut out = Vec::new();
    let mut next = 0;
    for &id in &example.encoder_input.ids {
        if next < spans.len() && id == sentinel(next) {
            out.extend_from_slice(spans[next]);
            next += 1;
        } else {
            out.push(id);
        }
    }
    if next != spans.len() {
        return Err(Error::Precondition(format!("input references {next} of {} spans", spans.len())));
    }
    Ok(ByteSequence::from_ids(out))
}

/// Newline-delimited documents, blank lines skipped.
pub fn split_documents(corpus: &str) -> Vec<&str> {
    corpus.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect()
}
