use gbst_core::bytes::{
    corrupt_spans, decode, encode, encode_bytes, is_sentinel, reconstruct, sentinel, split_documents, ByteSequence, BOS_ID,
    FIRST_SENTINEL_ID, NUM_SENTINELS,
};
use gbst_core::{Error, TOY_CORPUS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus_bytes(n: usize) -> ByteSequence {
    let text: Vec<u8> = TOY_CORPUS.bytes().cycle().take(n).collect();
    ByteSequence::from_ids(text)
}

#[test]
fn figure_string_has_23_bytes() {
    let seq = encode("on subword tokenization");
    assert_eq!(seq.len(), 23);
    assert_eq!(decode(&seq).unwrap(), "on subword tokenization");
}

#[test]
fn sentinel_range_is_the_top_hundred_ids() {
    let all: Vec<u8> = (0..NUM_SENTINELS).map(sentinel).collect();
    assert_eq!(all[0], 255);
    assert_eq!(*all.last().unwrap() as usize, FIRST_SENTINEL_ID as usize);
    assert_eq!(BOS_ID, sentinel(0));
    assert_eq!((0..=255u8).filter(|&b| is_sentinel(b)).count(), 100);
}

#[test]
fn high_bytes_in_text_are_kept() {
    let seq = encode("é€");
    assert_eq!(seq.ids, "é€".as_bytes());
    assert!(seq.ids.iter().any(|&b| is_sentinel(b)));
    assert!(matches!(encode_bytes(&[0xff, 0xfe]), Err(Error::InvalidUtf8(_))));
}

#[test]
fn corpus_is_about_fifty_kilobytes() {
    assert!((45_000..=55_000).contains(&TOY_CORPUS.len()), "{}", TOY_CORPUS.len());
    assert!(TOY_CORPUS.is_ascii());
    assert!(split_documents(TOY_CORPUS).len() > 100);
}

#[test]
fn corruption_statistics_on_ten_thousand_bytes() {
    let seq = corpus_bytes(10_000);
    let (mut masked, mut spans) = (0usize, 0usize);
    for seed in 0..50 {
        let ex = corrupt_spans(&seq, 0.15, 20.0, seed).unwrap();
        spans += ex.num_spans();
        masked += ex.decoder_target.len() - ex.num_spans() - 1;
    }
    let mean_span = masked as f64 / spans as f64;
    let fraction = masked as f64 / (50.0 * 10_000.0);
    assert!((mean_span - 20.0).abs() <= 2.0, "{mean_span}");
    assert!((fraction - 0.15).abs() <= 0.015, "{fraction}");
}

#[test]
fn span_lengths_stay_within_twice_the_mean() {
    let seq = corpus_bytes(4_000);
    for seed in 0..20 {
        let ex = corrupt_spans(&seq, 0.15, 20.0, seed).unwrap();
        let mut len = 0;
        for &b in &ex.decoder_target.ids[1..] {
            if is_sentinel(b) {
                assert!((1..=40).contains(&len), "span of {len}");
                len = 0;
            } else {
                len += 1;
            }
        }
    }
}

#[test]
fn reconstruction_is_lossless_for_a_thousand_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..1000u64 {
        let len = rng.random_range(1..400);
        let start = rng.random_range(0..TOY_CORPUS.len() - len);
        let seq = ByteSequence::from_ids(TOY_CORPUS.as_bytes()[start..start + len].to_vec());
        let rate = rng.random_range(0.05..0.5);
        let ex = corrupt_spans(&seq, rate, rng.random_range(1.0..30.0), seed).unwrap();
        assert_eq!(reconstruct(&ex).unwrap(), seq, "seed {seed}");
    }
}

#[test]
fn export_record_is_decimal_ids() {
    let ex = corrupt_spans(&encode("abcdefghij"), 0.1, 20.0, 3).unwrap();
    let (input, target) = ex.to_record().split_once('\t').map(|(a, b)| (a.to_string(), b.to_string())).unwrap();
    let parse = |s: &str| s.split(' ').map(|t| t.parse::<u8>().unwrap()).collect::<Vec<_>>();
    assert_eq!(parse(&input), ex.encoder_input.ids);
    assert_eq!(parse(&target), ex.decoder_target.ids);
    assert_eq!(ex.decoder_target.len(), 3);
}

fn descending(ids: &[u8]) -> bool {
    let s: Vec<u8> = ids.iter().copied().filter(|&b| is_sentinel(b)).collect();
    s.windows(2).all(|w| w[0] > w[1])
}

proptest! {
    #[test]
    fn utf8_round_trip(s in "[^\u{80}-\u{10FFFF}]*|\\PC*") {
        prop_assert_eq!(decode(&encode(&s)).unwrap(), s);
    }

    #[test]
    fn corruption_invariants(len in 1usize..600, rate in 0.01f64..0.9, mean in 1.0f64..40.0, seed in any::<u64>()) {
        let ids: Vec<u8> = TOY_CORPUS.as_bytes().iter().copied().take(len).collect();
        let seq = ByteSequence::from_ids(ids);
        let ex = corrupt_spans(&seq, rate, mean, seed).unwrap();
        prop_assert!(descending(&ex.encoder_input.ids));
        prop_assert!(descending(&ex.decoder_target.ids));
        let noise = ((rate * len as f64).round() as usize).clamp(1, len);
        prop_assert_eq!(ex.decoder_target.len(), noise + ex.num_spans() + 1);
        prop_assert_eq!(ex.encoder_input.len(), len - noise + ex.num_spans());
        prop_assert_eq!(reconstruct(&ex).unwrap(), seq.clone());
        prop_assert_eq!(corrupt_spans(&seq, rate, mean, seed).unwrap(), ex);
    }
}
