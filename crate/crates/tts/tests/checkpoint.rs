use prosody_tts::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint_for, CheckpointMeta, MAGIC};
use prosody_tts::gradcheck::{toy_config, ToySizes};
use prosody_tts::{load_checkpoint, save_checkpoint, Model, SynthesisOptions, TtsError};

fn model(seed: u64) -> Model {
    Model::new(toy_config(&ToySizes::default(), seed)).unwrap()
}

fn meta() -> CheckpointMeta {
    CheckpointMeta { step: 42, stats_digest: Some("abc".into()), ..CheckpointMeta::default() }.with_rng([7; 32], 1234)
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(5);
    save_checkpoint(&path, &m, &meta()).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.meta, meta());
    assert_eq!(back.meta.rng().unwrap(), ([7; 32], 1234));
    assert_eq!(back.model.config(), m.config());
    for (a, b) in m.params().ids().zip(back.model.params().ids()) {
        assert_eq!(m.params().name(a), back.model.params().name(b));
        let (x, y) = (m.params().get(a), back.model.params().get(b));
        assert_eq!(x.shape(), y.shape());
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let opts = SynthesisOptions { max_frames: 12, ..Default::default() };
    let bias = [0.3, -0.1, 0.0, 0.5, -0.7];
    assert_eq!(m.synthesize(&[0, 1, 2, 0], &bias, &opts).unwrap(), back.model.synthesize(&[0, 1, 2, 0], &bias, &opts).unwrap());
}

#[test]
fn encoding_is_deterministic() {
    let m = model(5);
    assert_eq!(encode_checkpoint(&m, &meta()).unwrap(), encode_checkpoint(&m, &meta()).unwrap());
    assert_ne!(encode_checkpoint(&m, &meta()).unwrap(), encode_checkpoint(&model(6), &meta()).unwrap());
}

#[test]
fn truncated_or_corrupted_files_fail_the_checksum() {
    let bytes = encode_checkpoint(&model(1), &meta()).unwrap();
    for cut in [12, 44, 60, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(TtsError::Checksum)), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    assert!(matches!(decode_checkpoint(&flipped), Err(TtsError::Checksum)));
}

#[test]
fn wrong_magic_and_version() {
    let bytes = encode_checkpoint(&model(1), &meta()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(TtsError::BadMagic)));
    assert!(matches!(decode_checkpoint(b"NOTACKPT-----"), Err(TtsError::BadMagic)));
    assert!(matches!(decode_checkpoint(b"PRS"), Err(TtsError::Checksum)));
    assert_eq!(&bytes[..8], MAGIC);
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&newer), Err(TtsError::Version { found: 9, .. })));
}

#[test]
fn config_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model(1), &meta()).unwrap();
    let mut other = toy_config(&ToySizes { n_mels: 5, ..ToySizes::default() }, 1);
    match load_checkpoint_for(&path, &other) {
        Err(TtsError::ConfigMismatch(msg)) => assert!(msg.contains("n_mels"), "{msg}"),
        other => panic!("{other:?}"),
    }
    // The seed only matters at initialization.
    other = toy_config(&ToySizes::default(), 99);
    assert!(load_checkpoint_for(&path, &other).is_ok());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path().join("none.ckpt")), Err(TtsError::Io { .. })));
}
