use gbst_core::bytes::{corrupt_spans, encode, ByteSequence, BOS_ID};
use gbst_core::checkpoint;
use gbst_core::config::RunConfig;
use gbst_core::gradcheck::GROUPS;
use gbst_core::profiler::count_params;
use gbst_core::tensor::Tape;
use gbst_core::training::{evaluate, train_step, Corpus, Optimizer, OptimizerKind, Schedule, TrainConfig};
use gbst_core::transformer::{param_group, Frontend, Model, ModelConfig, Seq2SeqExample};
use gbst_core::{Error, TOY_CORPUS};

fn identity_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.stack.frontend = Frontend::Identity;
    cfg
}

fn logits(model: &Model, input: &ByteSequence, prefix: &[u8]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let src = model.frontend(&mut tape, input).unwrap();
    let enc = model.encode(&mut tape, src.source).unwrap();
    let dec = model.decode(&mut tape, enc.memory, prefix).unwrap();
    tape.value(dec.logits).to_rows()
}

#[test]
fn decoder_is_causal() {
    for cfg in [ModelConfig::default(), identity_config()] {
        let model = Model::new(cfg, 3).unwrap();
        let input = encode("the quick brown fox jumps");
        let a = [BOS_ID, b'h', b'e', b'l', b'l', b'o'];
        let b = [BOS_ID, b'h', b'e', b'X', b'Y', b'Z'];
        let (la, lb) = (logits(&model, &input, &a), logits(&model, &input, &b));
        for j in 0..3 {
            assert_eq!(la[j], lb[j], "position {j}");
        }
        assert_ne!(la[3], lb[3]);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let src = model.frontend(&mut tape, &encode("attention rows must sum to one")).unwrap();
    let enc = model.encode(&mut tape, src.source).unwrap();
    let dec = model.decode(&mut tape, enc.memory, &[BOS_ID, 1, 2, 3]).unwrap();
    let all = enc.attention.iter().chain(&dec.self_attention).chain(&dec.cross_attention);
    let mut count = 0;
    for layer in all {
        assert_eq!(layer.len(), 4);
        for &p in layer {
            for row in tape.value(p).to_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
            count += 1;
        }
    }
    assert_eq!(count, 4 * 6);
    let probs = tape.value(dec.self_attention[0][0]).to_rows();
    for (i, row) in probs.iter().enumerate() {
        assert!(row[i + 1..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn zero_layer_encoder_adds_positions_only() {
    let mut cfg = identity_config();
    cfg.stack.encoder_layers = 0;
    let model = Model::new(cfg, 5).unwrap();
    let input = encode("abcd");
    let mut tape = Tape::new();
    let src = model.frontend(&mut tape, &input).unwrap();
    let enc = model.encode(&mut tape, src.source).unwrap();
    let table = &model.params.by_name("embed.bytes").expect("byte table").value;
    let pos = &model.params.by_name("enc.pos").expect("position table").value;
    let memory = tape.value(enc.memory);
    for (i, &b) in input.ids.iter().enumerate() {
        for c in 0..64 {
            assert_eq!(memory.get(i, c), table.get(b as usize, c) + pos.get(i, c));
        }
    }
    assert!(enc.attention.is_empty());
}

#[test]
fn untrained_model_is_near_uniform() {
    let corpus = Corpus::from_text(TOY_CORPUS).unwrap();
    let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };
    let data: Vec<Seq2SeqExample> = corpus.batch(&cfg, 1).unwrap().iter().map(Seq2SeqExample::from).collect();
    for seed in 0..3 {
        let model = Model::new(ModelConfig::default(), seed).unwrap();
        let m = evaluate(&model, &data).unwrap();
        assert!((m.nats_per_byte - 256f64.ln()).abs() < 0.2, "{}", m.nats_per_byte);
    }
}

#[test]
fn memorizes_a_fifty_byte_sequence() {
    let text = encode("Fifty bytes of text that the model must memorize!!");
    assert_eq!(text.len(), 50);
    let mut target = text.ids.clone();
    target.push(BOS_ID);
    let ex = Seq2SeqExample { input: text.clone(), target: ByteSequence::from_ids(target) };
    let mut model = Model::new(ModelConfig::default(), 0).unwrap();
    let cfg = TrainConfig { learning_rate: 3e-3, schedule: Schedule::Constant, ..TrainConfig::default() };
    let mut opt = Optimizer::new(OptimizerKind::Adam, &model);
    let batch = [ex.clone()];
    let mut loss = f64::INFINITY;
    for _ in 0..600 {
        loss = train_step(&mut model, &mut opt, &batch, &cfg).unwrap().loss;
        if loss < 2e-3 {
            break;
        }
    }
    let m = evaluate(&model, &batch).unwrap();
    assert!(m.nats_per_byte < 0.01, "loss {loss}, eval {}", m.nats_per_byte);
    assert_eq!(m.exact_span_match_rate, 1.0);
    let decoded = model.greedy_decode(&text, 64, BOS_ID).unwrap();
    assert_eq!(&decoded.ids[..50], &text.ids[..]);
}

#[test]
fn greedy_decode_limits_and_determinism() {
    let model = Model::new(ModelConfig::default(), 2).unwrap();
    let input = encode("some input text");
    let one = model.greedy_decode(&input, 1, BOS_ID).unwrap();
    assert_eq!(one.len(), 1);
    let a = model.greedy_decode(&input, 20, BOS_ID).unwrap();
    let b = model.greedy_decode(&input, 20, BOS_ID).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 20);
    assert!(matches!(model.greedy_decode(&input, 0, BOS_ID), Err(Error::Precondition(_))));
    assert!(matches!(model.greedy_decode(&ByteSequence::from_ids(vec![]), 5, BOS_ID), Err(Error::Precondition(_))));
}

#[test]
fn closed_form_parameter_count_matches_the_store() {
    let mut cfgs = vec![ModelConfig::default(), identity_config()];
    let mut c = ModelConfig::default();
    c.gbst.enable_offsets = true;
    c.gbst.enable_calibration = true;
    c.gbst.max_block_size = 3;
    c.stack.encoder_layers = 0;
    cfgs.push(c);
    for cfg in cfgs {
        let model = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(count_params(&cfg), model.num_parameters());
    }
}

#[test]
fn every_parameter_has_a_known_group() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let mut seen: Vec<&str> = model.params.iter().map(|(_, p)| param_group(&p.name)).collect();
    seen.sort();
    seen.dedup();
    let mut expected = GROUPS.to_vec();
    expected.sort();
    assert_eq!(seen, expected);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let run = RunConfig::default();
    let model = Model::new(run.model.clone(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gbst");
    checkpoint::save(&path, &model, &run).unwrap();
    let (run2, loaded) = checkpoint::load(&path).unwrap();
    assert_eq!(run2, run);
    let ex = corrupt_spans(&encode("round trip through the checkpoint format"), 0.15, 3.0, 1).unwrap();
    let mut prefix = vec![BOS_ID];
    prefix.extend_from_slice(&ex.decoder_target.ids);
    assert_eq!(logits(&model, &ex.encoder_input, &prefix), logits(&loaded, &ex.encoder_input, &prefix));

    let mut bytes = checkpoint::to_bytes(&model, &run).unwrap();
    bytes[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    let good = checkpoint::to_bytes(&model, &run).unwrap();
    assert!(checkpoint::from_bytes(&good[..good.len() - 3]).is_err());
}

#[test]
fn block_scores_for_a_single_byte() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let table = model.block_scores(&encode("a")).unwrap().unwrap();
    assert_eq!(table.weights.shape(), &[1, 4]);
    assert_eq!(table.labels, ["b=1", "b=2", "b=3", "b=4"]);
    assert!((table.weights.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(Model::new(identity_config(), 0).unwrap().block_scores(&encode("a")).unwrap().is_none());
}

#[test]
fn source_longer_than_position_table_is_rejected() {
    let mut cfg = identity_config();
    cfg.stack.max_source_len = 8;
    let model = Model::new(cfg, 0).unwrap();
    let mut tape = Tape::new();
    let src = model.frontend(&mut tape, &encode("nine byte")).unwrap();
    assert!(matches!(model.encode(&mut tape, src.source), Err(Error::Precondition(_))));
}
