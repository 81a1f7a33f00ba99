use prosody_tts::gradcheck::{toy_config, ToySizes};
use prosody_tts::model::{AttentionState, Example, ProsodySource, PHONE_ENCODER, PROSODY_ENCODER};
use prosody_tts::{AttentionMode, BiasMode, Model, ModelConfig, SynthesisOptions, Tensor, TtsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> Model {
    let sizes = ToySizes { batch: 2, input: 6, hidden: 5, seq_len: 6, n_mels: 4 };
    Model::new(toy_config(&sizes, 4)).unwrap()
}

fn example(rng: &mut ChaCha8Rng, phones: usize, frames: usize, n_mels: usize) -> Example {
    Example {
        phone_ids: (0..phones).map(|_| rng.gen_range(0..6)).collect(),
        mel: Tensor::new(frames, n_mels, (0..frames * n_mels).map(|_| rng.gen_range(0.0..1.0)).collect()),
        prosody: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
    }
}

#[test]
fn phone_encoder_shape_with_default_config() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let out = model.phone_encoder_forward(&[0, 3, 5, 1, 7, 2, 0]).unwrap();
    assert_eq!(out.shape(), (7, 256));
}

#[test]
fn phone_encoder_contracts() {
    let mut model = small();
    assert!(matches!(model.phone_encoder_forward(&[1, 6]), Err(TtsError::OutOfVocabulary { id: 6, vocab_size: 6 })));
    assert!(matches!(model.phone_encoder_forward(&[]), Err(TtsError::EmptySequence)));
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        model.params_mut().get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let out = model.phone_encoder_forward(&[1, 2, 3]).unwrap();
    assert!(out.data.iter().all(|&v| v == 0.0));
}

#[test]
fn prosody_encoder_range_and_zero_projection() {
    let mut model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for len in 1..8 {
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..6)).collect();
        let p = model.prosody_encoder_forward(&ids).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|v| v.abs() < 1.0));
    }
    let proj: Vec<_> = model.params().with_prefix(&format!("{PROSODY_ENCODER}projection")).collect();
    for id in proj {
        model.params_mut().get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    assert_eq!(model.prosody_encoder_forward(&[1, 2, 3]).unwrap(), [0.0; 5]);
    assert!(matches!(model.prosody_encoder_forward(&[]), Err(TtsError::EmptySequence)));
}

#[test]
fn single_input_position_takes_all_attention() {
    let model = small();
    let memory = model.encode(&[3]).unwrap();
    let mut state = AttentionState::initial(1);
    let h = vec![0.3; model.config().decoder_hidden];
    for mode in [AttentionMode::Soft, AttentionMode::Hard] {
        for _ in 0..4 {
            let (_, next) = model.attention_step(&memory, &h, &state, mode).unwrap();
            assert_eq!(next.alpha, vec![1.0]);
            state = next;
        }
    }
}

#[test]
fn attention_weights_sum_to_one_and_advance() {
    let model = small();
    let memory = model.encode(&[1, 2, 3, 4, 5]).unwrap();
    let mut state = AttentionState::initial(5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut expected_prev = 0.0;
    for _ in 0..20 {
        let h: Vec<f64> = (0..model.config().decoder_hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ctx, next) = model.attention_step(&memory, &h, &state, AttentionMode::Soft).unwrap();
        assert_eq!(ctx.len(), model.config().encoder_dim());
        let s: f64 = next.alpha.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
        assert!(next.alpha.iter().all(|&a| a >= 0.0));
        let expected: f64 = next.alpha.iter().enumerate().map(|(j, a)| j as f64 * a).sum();
        assert!(expected >= expected_prev - 1e-12, "{expected} < {expected_prev}");
        expected_prev = expected;
        state = next;
    }
}

#[test]
fn decoder_step_contracts_and_determinism() {
    let model = small();
    let memory = model.encode(&[1, 2, 3]).unwrap();
    let state = model.initial_decoder_state(&memory);
    let frame = vec![0.2; 4];
    let err = model.decoder_step(&memory, &frame, &[0.0; 4], &state, AttentionMode::Hard, None).unwrap_err();
    assert!(matches!(err, TtsError::ProsodyLength(4)));
    let err = model.decoder_step(&memory, &frame, &[0.0, 1.5, 0.0, 0.0, 0.0], &state, AttentionMode::Hard, None).unwrap_err();
    assert!(matches!(err, TtsError::ProsodyRange { index: 1, .. }));
    let err = model.decoder_step(&memory, &[0.0; 3], &[0.0; 5], &state, AttentionMode::Hard, None).unwrap_err();
    assert!(matches!(err, TtsError::MelShape { expected: 4, found: 3 }));

    let p = [0.1, -0.2, 0.3, 0.0, 0.5];
    let a = model.decoder_step(&memory, &frame, &p, &state, AttentionMode::Soft, None).unwrap();
    let b = model.decoder_step(&memory, &frame, &p, &state, AttentionMode::Soft, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.frames.len(), model.config().frames_per_step);
    assert!(a.0.frames.iter().all(|f| f.len() == 4));
}

#[test]
fn synthesis_bias_modes() {
    let model = small();
    let ids = [0, 1, 2, 3, 0];
    let opts = SynthesisOptions { max_frames: 20, ..SynthesisOptions::default() };
    let abs = model.synthesize(&ids, &[0.0; 5], &opts).unwrap();
    assert_eq!(abs.applied.to_array(), [0.0; 5]);
    let add = model.synthesize(&ids, &[0.0; 5], &SynthesisOptions { mode: BiasMode::Additive, ..opts }).unwrap();
    assert_eq!(add.applied.to_array(), add.predicted.to_array());
    let big = model.synthesize(&ids, &[1.0; 5], &SynthesisOptions { mode: BiasMode::Additive, ..opts }).unwrap();
    for (a, p) in big.applied.to_array().iter().zip(big.predicted.to_array()) {
        assert_eq!(*a, (p + 1.0).min(1.0));
    }
    assert!(matches!(model.synthesize(&ids, &[0.0, 0.0, 2.0, 0.0, 0.0], &opts), Err(TtsError::ProsodyRange { index: 2, .. })));
    assert!(matches!(model.synthesize(&ids, &[0.0; 3], &opts), Err(TtsError::ProsodyLength(3))));
}

#[test]
fn synthesis_respects_max_frames_and_is_deterministic() {
    let mut model = small();
    // Push the stop logit far negative so the stop token never fires.
    let out = model.params().find("decoder.output.b").unwrap();
    let nm = model.config().step_width();
    model.params_mut().get_mut(out).data[nm] = -50.0;
    let opts = SynthesisOptions { max_frames: 9, ..SynthesisOptions::default() };
    let s = model.synthesize(&[0, 1, 2, 0], &[0.0; 5], &opts).unwrap();
    assert!(s.truncated);
    assert_eq!(s.mel.n_frames(), 9);
    assert!(s.path_is_monotonic());
    assert_eq!(s.mel.config, model.config().analysis);
    let again = model.synthesize(&[0, 1, 2, 0], &[0.0; 5], &opts).unwrap();
    assert_eq!(s, again);
}

#[test]
fn stop_token_ends_synthesis() {
    let mut model = small();
    let out = model.params().find("decoder.output.b").unwrap();
    let nm = model.config().step_width();
    model.params_mut().get_mut(out).data[nm] = 50.0;
    let s = model.synthesize(&[0, 1, 2, 0], &[0.0; 5], &SynthesisOptions::default()).unwrap();
    assert!(!s.truncated);
    assert_eq!(s.mel.n_frames(), model.config().frames_per_step);
    assert_eq!(s.alignments.len(), 1);
}

#[test]
fn hard_attention_paths_are_monotonic() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let ids: Vec<usize> = (0..rng.gen_range(1..9)).map(|_| rng.gen_range(0..6)).collect();
        let bias: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = model.synthesize(&ids, &bias, &SynthesisOptions { max_frames: 40, ..Default::default() }).unwrap();
        assert!(s.path_is_monotonic(), "{:?}", s.attention_path);
        for a in &s.alignments {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn training_graph_contracts() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = example(&mut rng, 4, 7, 5);
    assert!(matches!(model.training_graph(&[bad.clone()], &mut rng, ProsodySource::GroundTruth), Err(TtsError::MelShape { expected: 4, found: 5 })));
    bad.mel = Tensor::zeros(7, 4);
    bad.prosody[0] = 1.2;
    assert!(matches!(model.training_graph(&[bad], &mut rng, ProsodySource::GroundTruth), Err(TtsError::ProsodyRange { .. })));
    assert!(matches!(model.training_graph(&[], &mut rng, ProsodySource::GroundTruth), Err(TtsError::EmptySequence)));
}

#[test]
fn stop_gradient_blocks_prosody_loss_from_phone_encoder() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batch: Vec<Example> = (0..3).map(|i| example(&mut rng, 3 + i, 5 + 2 * i, 4)).collect();
    let tg = model.training_graph(&batch, &mut rng, ProsodySource::GroundTruth).unwrap();
    let grads = tg.graph.backward(tg.prosody_mse).unwrap();
    for id in model.params().with_prefix(PHONE_ENCODER) {
        if let Some(g) = grads.param(id) {
            assert!(g.iter().all(|&v| v == 0.0), "{}", model.params().name(id));
        }
    }
    // The prosody encoder itself does learn from the loss.
    let reached: f64 = model.params().with_prefix(PROSODY_ENCODER).filter_map(|id| grads.param(id)).flatten().map(|v| v.abs()).sum();
    assert!(reached > 0.0);
}

#[test]
fn teacher_forcing_decoder_reads_ground_truth() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let batch: Vec<Example> = (0..2).map(|_| example(&mut rng, 4, 6, 4)).collect();
    let tg = model.training_graph(&batch, &mut rng, ProsodySource::GroundTruth).unwrap();
    assert_eq!(tg.decoder_prosody_source, ProsodySource::GroundTruth);
    assert_ne!(tg.decoder_prosody, tg.predicted_prosody);
    let consumed = tg.graph.value(tg.decoder_prosody);
    for (b, ex) in batch.iter().enumerate() {
        assert_eq!(consumed.row_slice(b), &ex.prosody);
    }
    // Decoder losses send nothing into the prosody encoder: its gradient
    // under the total loss equals its gradient under the prosody loss alone.
    let total = tg.graph.backward(tg.loss).unwrap();
    let only = tg.graph.backward(tg.prosody_mse).unwrap();
    for id in model.params().with_prefix(PROSODY_ENCODER) {
        assert_eq!(total.param(id), only.param(id), "{}", model.params().name(id));
    }
}

#[test]
fn attention_weights_in_training_sum_to_one() {
    let model = small();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let batch = vec![example(&mut rng, 5, 9, 4), example(&mut rng, 2, 4, 4)];
    let tg = model.training_graph(&batch, &mut rng, ProsodySource::GroundTruth).unwrap();
    for &a in &tg.alignments {
        let v = tg.graph.value(a);
        for r in 0..v.rows {
            let s: f64 = v.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(v.row_slice(r).iter().all(|&x| x >= 0.0));
        }
        // Positions past the second sequence's length stay empty.
        assert!(v.row_slice(1)[2..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    c.n_mels = 80;
    assert!(matches!(Model::new(c), Err(TtsError::Config(_))));
    assert!(Model::new(ModelConfig::full_band()).is_ok());
    let c = ModelConfig { prosody_out_dim: 4, ..ModelConfig::default() };
    assert!(matches!(Model::new(c), Err(TtsError::Config(_))));
    let c = ModelConfig { location_width: 14, ..ModelConfig::default() };
    assert!(matches!(Model::new(c), Err(TtsError::Config(_))));
    let d = ModelConfig::default();
    assert_eq!((d.prosody_lstm_layers, d.prosody_hidden, d.embedding_dim, d.decoder_hidden), (3, 128, 64, 256));
    assert_eq!((d.frames_per_step, d.location_filters, d.location_width), (2, 8, 15));
}

#[test]
fn model_units_round_trip() {
    let c = ModelConfig::default();
    let floor = c.analysis.log_floor.ln();
    assert_eq!(c.to_model_units(floor), 0.0);
    assert!((c.from_model_units(c.to_model_units(-3.25)) + 3.25).abs() < 1e-12);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn synthesis_invariants(
        ids in proptest::collection::vec(0usize..6, 1..9),
        bias in proptest::array::uniform5(-1.0f64..=1.0),
        additive in proptest::bool::ANY,
        soft in proptest::bool::ANY,
    ) {
        let model = small();
        let mode = if additive { BiasMode::Additive } else { BiasMode::Absolute };
        let attention = if soft { AttentionMode::Soft } else { AttentionMode::Hard };
        let opts = SynthesisOptions { mode, attention, max_frames: 30 };
        let s = model.synthesize(&ids, &bias, &opts).unwrap();
        proptest::prop_assert!(s.path_is_monotonic(), "{:?}", s.attention_path);
        proptest::prop_assert!(s.mel.n_frames() <= 30 + model.config().frames_per_step);
        proptest::prop_assert!(s.applied.to_array().iter().all(|v| (-1.0..=1.0).contains(v)));
        let expected: Vec<f64> = if additive {
            s.predicted.to_array().iter().zip(&bias).map(|(p, b)| (p + b).clamp(-1.0, 1.0)).collect()
        } else {
            bias.to_vec()
        };
        proptest::prop_assert_eq!(s.applied.to_array().to_vec(), expected);
        for a in &s.alignments {
            proptest::prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
