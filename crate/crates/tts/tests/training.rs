use std::sync::OnceLock;

use prosody_core::corpus::{generate_corpus, CorpusConfig};
use prosody_core::features::ExtractConfig;
use prosody_tts::gradcheck::{toy_config, ToySizes};
use prosody_tts::model::{Example, ProsodySource};
use prosody_tts::train::{Dataset, StepLog, TrainConfig, Trainer};
use prosody_tts::{Model, ModelConfig, Tensor, TtsError};

fn config() -> ModelConfig {
    let sizes = ToySizes { batch: 2, input: 8, hidden: 8, seq_len: 6, n_mels: 6 };
    ModelConfig { vocab_size: 20, ..toy_config(&sizes, 3) }
}

fn data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&CorpusConfig { size: 10, seed: 3, ..CorpusConfig::default() }, dir.path(), 1).unwrap();
        Dataset::from_corpus(&manifest, &config(), &ExtractConfig::default(), 2).unwrap()
    })
}

fn trainer(seed: u64, steps: u64) -> Trainer {
    let mut model = Model::new(config()).unwrap();
    model.set_output_bias(&data().mean_frame()).unwrap();
    Trainer::new(model, TrainConfig { steps, seed, batch_size: 4, ..TrainConfig::default() })
}

#[test]
fn dataset_is_normalized_and_in_model_units() {
    let d = data();
    assert_eq!(d.len(), 10);
    for ex in &d.examples {
        assert_eq!(ex.mel.cols, 6);
        assert!(ex.mel.data.iter().all(|v| (0.0..=1.5).contains(v)));
        assert!(ex.prosody.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(ex.phone_ids.iter().all(|&id| id < 20));
    }
    let threaded = {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&CorpusConfig { size: 10, seed: 3, ..CorpusConfig::default() }, dir.path(), 1).unwrap();
        Dataset::from_corpus(&manifest, &config(), &ExtractConfig::default(), 1).unwrap()
    };
    assert_eq!(&threaded, d);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let mut logs = Vec::new();
    for _ in 0..2 {
        let mut buf = Vec::new();
        let mut t = trainer(5, 6);
        t.run(data(), Some(&mut buf), None).unwrap();
        logs.push(String::from_utf8(buf).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let lines: Vec<StepLog> = logs[0].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines.iter().map(|l| l.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    let mut other = Vec::new();
    trainer(6, 6).run(data(), Some(&mut other), None).unwrap();
    assert_ne!(logs[0], String::from_utf8(other).unwrap());
}

#[test]
fn stop_gradient_audit_stays_zero() {
    let mut t = trainer(8, 10);
    t.config.audit_stop_gradient = true;
    for r in t.run(data(), None, None).unwrap() {
        assert_eq!(r.phone_encoder_prosody_grad, Some(0.0));
        assert_eq!(r.decoder_prosody_source, ProsodySource::GroundTruth);
    }
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let mut t = trainer(2, 50);
    let batch: Vec<Example> = data().examples[..3].to_vec();
    let losses: Vec<f64> = (0..50).map(|_| t.train_step(&batch).unwrap().loss).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
    assert!(mean(&losses[40..]) < mean(&losses[..10]), "{losses:?}");
}

#[test]
fn wrong_mel_width_is_rejected_before_updating() {
    let mut t = trainer(2, 1);
    let before = t.model.clone();
    let mut ex = data().examples[0].clone();
    ex.mel = Tensor::zeros(ex.mel.rows, 7);
    assert!(matches!(t.train_step(&[ex]), Err(TtsError::MelShape { expected: 6, found: 7 })));
    assert_eq!(t.model, before);
    assert_eq!(t.step(), 0);
}

#[test]
fn batches_cover_each_epoch_once() {
    let mut t = trainer(4, 0);
    let mut seen: Vec<usize> = (0..3).flat_map(|_| t.next_batch(data())).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}

#[test]
fn resuming_reproduces_the_batch_stream() {
    let mut a = trainer(4, 0);
    for _ in 0..4 {
        a.next_batch(data());
    }
    let (seed, pos) = a.rng_state();
    let mut b = trainer(4, 0);
    b.restore(4, seed, pos);
    assert_eq!(b.step(), 4);
    // Both start a new epoch from the same stream position.
    let mut a2 = trainer(4, 0);
    a2.restore(0, seed, pos);
    assert_eq!(a2.next_batch(data()), b.next_batch(data()));
}

#[test]
fn deadline_stops_training() {
    let mut t = trainer(1, 1000);
    let reports = t.run(data(), None, Some(std::time::Instant::now())).unwrap();
    assert!(reports.is_empty());
    assert_eq!(t.step(), 0);
}
