use std::fs;

use prosody_core::corpus::{generate_corpus, CorpusConfig, CorpusManifest};
use prosody_core::features::{extract_prosody_files, fit_norm_stats, parse_alignment, ExtractConfig};
use prosody_core::wav::read_wav;

fn small(size: usize) -> CorpusConfig {
    CorpusConfig { size, ..CorpusConfig::default() }
}

#[test]
fn same_seed_gives_identical_manifests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_corpus(&small(100), a.path(), 4).unwrap();
    let mb = generate_corpus(&small(100), b.path(), 3).unwrap();
    assert_eq!(ma.entries, mb.entries);
    assert_eq!(
        fs::read(a.path().join("manifest.jsonl")).unwrap(),
        fs::read(b.path().join("manifest.jsonl")).unwrap()
    );
    assert_eq!(fs::read(ma.wav_path(&ma.entries[17])).unwrap(), fs::read(mb.wav_path(&mb.entries[17])).unwrap());
}

#[test]
fn manifest_references_existing_files_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&small(12), dir.path(), 2).unwrap();
    for e in &m.entries {
        assert!(m.wav_path(e).is_file());
        assert!(m.alignment_path(e).is_file());
        assert!(e.ground_truth.is_finite());
        assert_eq!(e.phone_ids.first(), Some(&0));
        assert_eq!(e.phone_ids.last(), Some(&0));
        let audio = read_wav(m.wav_path(e)).unwrap();
        let al = parse_alignment(m.alignment_path(e)).unwrap();
        assert!((al.total_duration() - audio.duration_sec()).abs() <= 0.01);
    }
    let loaded = CorpusManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(loaded.vocabulary().unwrap().len(), 20);
}

#[test]
fn default_distributions_give_positive_sigmas() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&small(24), dir.path(), 4).unwrap();
    let cfg = ExtractConfig::default();
    let vectors: Vec<_> = m
        .entries
        .iter()
        .map(|e| extract_prosody_files(m.wav_path(e), m.alignment_path(e), &cfg).unwrap())
        .collect();
    let stats = fit_norm_stats(&vectors, &cfg.config_hash()).unwrap();
    assert!(stats.features().iter().all(|f| f.sigma > 0.0));
}
