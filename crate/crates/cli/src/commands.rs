use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Serialize;

use prosody_core::corpus::{generate_corpus, CorpusConfig, CorpusManifest, RendererConfig, Vocabulary};
use prosody_core::features::{extract_prosody_files, fit_norm_stats, normalize, ExtractConfig, FeatureDump, N_FEATURES};
use prosody_core::vocoder::MelInverter;
use prosody_core::wav::write_wav;
use prosody_core::{NormStats, ProsodyVector};
use prosody_eval::measure::{measure_sweep, vocode, MeasureConfig};
use prosody_eval::report::{parse_report, render_report, ReportFormat};
use prosody_eval::sweep::{bias_sweep, default_grid, evaluation_sentences, parallel_map, SweepConfig};
use prosody_tts::checkpoint::{load_checkpoint_for, CheckpointMeta};
use prosody_tts::{load_checkpoint, save_checkpoint, Checkpoint, Dataset, Model, ModelConfig, SynthesisOptions, TrainConfig, Trainer};

use crate::args::{Command, ExtractArgs, FitStatsArgs, GenCorpusArgs, ModelArgs, ReportArgs, ServeArgs, SweepArgs, SynthArgs, TrainArgs};
use crate::server::{self, AppState};
use crate::UsageError;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract(a) => extract(&a),
        Command::FitStats(a) => fit_stats(&a),
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::Train(a) => train(&a),
        Command::Synth(a) => synth(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Report(a) => report(&a),
        Command::Serve(a) => serve(&a),
    }
}

/// `<path><suffix>`, e.g. `m.bin.stats.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

pub const STATS_SUFFIX: &str = ".stats.json";
pub const VOCAB_SUFFIX: &str = ".vocab.txt";

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

pub fn load_model(args: &ModelArgs) -> Result<(Checkpoint, Vocabulary)> {
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let size = ckpt.model.config().vocab_size;
    let default_vocab = sidecar(&args.ckpt, VOCAB_SUFFIX);
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p)?,
        None if default_vocab.exists() => Vocabulary::load(&default_vocab)?,
        None => Vocabulary::synthetic(size)?,
    };
    if vocab.len() != size {
        bail!("vocabulary has {} labels but the model was trained with {size}", vocab.len());
    }
    Ok((ckpt, vocab))
}

pub fn load_stats(args: &ModelArgs, meta: &CheckpointMeta) -> Result<NormStats> {
    let path = args.stats.clone().unwrap_or_else(|| sidecar(&args.ckpt, STATS_SUFFIX));
    let stats = NormStats::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(d) = &meta.stats_digest {
        if *d != stats.digest() {
            warn!("{} is not the statistics the checkpoint was trained with", path.display());
        }
    }
    Ok(stats)
}

/// Adds `sil` at either end of the sequence when it is not already there.
pub fn frame_with_silence(mut ids: Vec<usize>) -> Vec<usize> {
    if ids.first() != Some(&0) {
        ids.insert(0, 0);
    }
    if ids.len() == 1 || ids.last() != Some(&0) {
        ids.push(0);
    }
    ids
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let raw = extract_prosody_files(&a.wav, &a.align, &ExtractConfig::default())?;
    let normalized = match &a.stats {
        Some(p) => Some(normalize(&raw, &NormStats::load(p)?)),
        None => None,
    };
    let utt_id = a.wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_output(None, &serde_json::to_string_pretty(&FeatureDump { utt_id, raw, normalized })?)
}

fn fit_stats(a: &FitStatsArgs) -> Result<()> {
    let manifest = CorpusManifest::load(&a.corpus)?;
    let config = ExtractConfig::default();
    let vectors = parallel_map(manifest.entries.len(), a.threads, |i| {
        let e = &manifest.entries[i];
        extract_prosody_files(manifest.wav_path(e), manifest.alignment_path(e), &config).with_context(|| e.utt_id.clone())
    })
    .into_iter()
    .collect::<Result<Vec<ProsodyVector>>>()?;
    let stats = fit_norm_stats(&vectors, &config.config_hash())?;
    info!("fitted statistics over {} utterances", vectors.len());
    write_output(a.out.as_deref(), &stats.to_json())
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let config = CorpusConfig {
        size: a.size,
        seed: a.seed,
        renderer: RendererConfig { vocab_size: a.vocab_size, ..RendererConfig::default() },
        ..CorpusConfig::default()
    };
    let t = Instant::now();
    let manifest = generate_corpus(&config, &a.out, a.threads)?;
    info!("wrote {} utterances to {} in {:.1?}", manifest.entries.len(), a.out.display(), t.elapsed());
    Ok(())
}

fn save(trainer: &Trainer, path: &Path, digest: &str) -> Result<()> {
    let (seed, pos) = trainer.rng_state();
    let meta = CheckpointMeta { step: trainer.step(), stats_digest: Some(digest.to_string()), ..CheckpointMeta::default() }.with_rng(seed, pos);
    save_checkpoint(path, &trainer.model, &meta).with_context(|| format!("writing {}", path.display()))
}

fn train(a: &TrainArgs) -> Result<()> {
    if a.batch_size == 0 {
        return Err(UsageError("--batch-size must be at least 1".into()).into());
    }
    let manifest = CorpusManifest::load(&a.corpus)?;
    let vocab = manifest.vocabulary()?;
    let base = if a.n_mels == 80 { ModelConfig::full_band() } else { ModelConfig::default() };
    let config = ModelConfig { vocab_size: vocab.len(), seed: a.model_seed, ..base };
    config.validate()?;
    let t = Instant::now();
    let data = Dataset::from_corpus(&manifest, &config, &ExtractConfig::default(), a.threads)?;
    info!("loaded {} utterances in {:.1?}", data.len(), t.elapsed());
    let digest = data.stats.digest();
    let train_config =
        TrainConfig { steps: a.steps, seed: a.seed, batch_size: a.batch_size, learning_rate: a.learning_rate, ..TrainConfig::default() };
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint_for(p, &config)?;
            if ck.meta.stats_digest.as_deref() != Some(digest.as_str()) {
                bail!("{} was trained on different normalization statistics", p.display());
            }
            let (seed, pos) = ck.meta.rng()?;
            let mut t = Trainer::new(ck.model, train_config);
            t.restore(ck.meta.step, seed, pos);
            info!("resuming at step {}", t.step());
            t
        }
        None => {
            let mut model = Model::new(config)?;
            model.set_output_bias(&data.mean_frame())?;
            Trainer::new(model, train_config)
        }
    };
    data.stats.save(sidecar(&a.out, STATS_SUFFIX))?;
    fs::write(sidecar(&a.out, VOCAB_SUFFIX), vocab.to_text())?;
    let mut log = match &a.log {
        Some(p) => {
            let f = if a.resume.is_some() { OpenOptions::new().create(true).append(true).open(p) } else { File::create(p) };
            Some(BufWriter::new(f.with_context(|| format!("opening {}", p.display()))?))
        }
        None => None,
    };
    let deadline = a.minutes.map(|m| Instant::now() + Duration::from_secs_f64(m.max(0.0) * 60.0));
    let started = Instant::now();
    while trainer.step() < a.steps {
        let before = trainer.step();
        trainer.config.steps = (before + 50).min(a.steps);
        let reports = trainer.run(&data, log.as_mut().map(|w| w as &mut dyn Write), deadline)?;
        let Some(last) = reports.last() else { break };
        let l = &last.log;
        info!(
            "step {} loss {:.4} (mel {:.4}, stop {:.4}, prosody {:.4}, attention {:.4}) {:.0?}",
            l.step, last.loss, l.mel_l1, l.stop_bce, l.prosody_mse, l.attention_guide, started.elapsed()
        );
        if let Some(k) = a.save_every.filter(|&k| k > 0) {
            if before / k != trainer.step() / k {
                save(&trainer, &a.out, &digest)?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if trainer.step() < a.steps {
        warn!("time budget reached at step {} of {}", trainer.step(), a.steps);
    }
    save(&trainer, &a.out, &digest)?;
    info!("wrote {} at step {}", a.out.display(), trainer.step());
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary<'a> {
    phone_ids: &'a [usize],
    frames: usize,
    truncated: bool,
    predicted: ProsodyVector,
    applied: ProsodyVector,
    attention_path: &'a [usize],
    wav: &'a Path,
}

fn bias_vector(pairs: &[(usize, f64)]) -> Result<[f64; N_FEATURES]> {
    let mut bias = [0.0; N_FEATURES];
    let mut seen = [false; N_FEATURES];
    for &(d, v) in pairs {
        if std::mem::replace(&mut seen[d], true) {
            return Err(UsageError(format!("--bias {} given twice", prosody_core::features::FEATURE_NAMES[d])).into());
        }
        bias[d] = v;
    }
    Ok(bias)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let bias = bias_vector(&a.bias)?;
    let (ck, vocab) = load_model(&a.model)?;
    let labels: Vec<&str> = a.phones.split_whitespace().collect();
    let ids = vocab.encode(&labels).map_err(|unknown| anyhow::anyhow!("unknown phone labels: {}", unknown.join(" ")))?;
    let ids = frame_with_silence(ids);
    let options = SynthesisOptions { mode: a.mode.into(), attention: a.attention.into(), max_frames: a.max_frames };
    let s = ck.model.synthesize(&ids, &bias, &options)?;
    if s.truncated {
        warn!("stop token did not fire within {} frames", a.max_frames);
    }
    let audio = vocode(&s, &MelInverter::new(&s.mel.config)?, &MeasureConfig::default())?;
    write_wav(&a.out, &audio)?;
    if let Some(p) = &a.mel_out {
        fs::write(p, serde_json::to_string(&s.mel.frames)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let summary = SynthSummary {
        phone_ids: &ids,
        frames: s.mel.n_frames(),
        truncated: s.truncated,
        predicted: s.predicted,
        applied: s.applied,
        attention_path: &s.attention_path,
        wav: &a.out,
    };
    write_output(None, &serde_json::to_string_pretty(&summary)?)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let (ck, vocab) = load_model(&a.model)?;
    let stats = load_stats(&a.model, &ck.meta)?;
    let sentences = evaluation_sentences(a.sentences, a.seed)?;
    let config = SweepConfig {
        grid: if a.grid.is_empty() { default_grid() } else { a.grid.clone() },
        dims: if a.dims.is_empty() { (0..N_FEATURES).collect() } else { a.dims.clone() },
        synthesis: SynthesisOptions { max_frames: a.max_frames, ..SynthesisOptions::default() },
        threads: a.threads,
    };
    let t = Instant::now();
    let set = bias_sweep(&ck.model, &sentences, &config)?;
    info!("synthesized {} utterances in {:.1?}", set.outputs.len(), t.elapsed());
    if let Some(w) = &set.warning {
        warn!("{w}");
    }
    let measure = MeasureConfig { threads: a.threads, failure_limit: a.failure_limit, ..MeasureConfig::default() };
    let report = measure_sweep(&set, &stats, &vocab, &measure)?;
    for f in &report.features {
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        info!("{:<12} pearson {} spearman {}", f.feature, show(f.pearson_r), show(f.spearman_rho));
    }
    write_output(a.out.as_deref(), &render_report(&report, ReportFormat::Json)?)
}

fn report(a: &ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    write_output(a.out.as_deref(), &render_report(&parse_report(&text)?, format)?)
}

fn serve(a: &ServeArgs) -> Result<()> {
    let (ck, vocab) = load_model(&a.model)?;
    let stats = load_stats(&a.model, &ck.meta)?;
    let state = Arc::new(AppState::new(ck.model, ck.meta.step, stats, vocab)?);
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(server::serve(state, &a.bind))
}
