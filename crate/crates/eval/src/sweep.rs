use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use prosody_core::corpus::CorpusConfig;
use prosody_core::features::N_FEATURES;
use prosody_tts::{Model, Synthesis, SynthesisOptions};

use crate::error::EvalError;

/// Nine values from -1 to 1 in steps of 0.25.
pub fn default_grid() -> Vec<f64> {
    (0..9).map(|i| -1.0 + 0.25 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    /// Feature indices to vary, in vector order.
    pub dims: Vec<usize>,
    pub synthesis: SynthesisOptions,
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { grid: default_grid(), dims: (0..N_FEATURES).collect(), synthesis: SynthesisOptions::default(), threads: 1 }
    }
}

/// Unique utterances of a sweep over `dims` dimensions × `values` grid values
/// × `sentences` × `systems`, plus `baseline` extra utterances. When the grid
/// contains 0 the all-zero point is shared by every dimension, so `dims - 1`
/// copies of it per sentence and system are not synthesized.
pub fn sweep_utterance_count(dims: usize, values: usize, sentences: usize, systems: usize, baseline: usize, grid_has_zero: bool) -> usize {
    let all = dims * values * sentences * systems + baseline;
    if grid_has_zero && dims > 0 {
        all - (dims - 1) * systems * sentences
    } else {
        all
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepJob {
    pub sentence: usize,
    pub bias: [f64; N_FEATURES],
}

/// One (dimension, grid value) cell and the jobs that realize it, one per sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub dim: usize,
    pub target: f64,
    pub jobs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub jobs: Vec<SweepJob>,
    pub points: Vec<SweepPoint>,
}

/// Enumerates the sweep with shared all-zero jobs. The grid is sorted ascending.
pub fn plan_sweep(sentences: usize, grid: &[f64], dims: &[usize]) -> Result<SweepPlan, EvalError> {
    if sentences == 0 {
        return Err(EvalError::Empty("sentences"));
    }
    if grid.is_empty() {
        return Err(EvalError::Empty("grid"));
    }
    if dims.is_empty() {
        return Err(EvalError::Empty("dims"));
    }
    if let Some(&g) = grid.iter().find(|g| !(-1.0..=1.0).contains(*g)) {
        return Err(EvalError::GridRange(g));
    }
    if let Some(&d) = dims.iter().find(|&&d| d >= N_FEATURES) {
        return Err(EvalError::Dimension(d));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut jobs = Vec::new();
    let mut index: HashMap<(usize, [u64; N_FEATURES]), usize> = HashMap::new();
    let mut points = Vec::new();
    for &dim in dims {
        for &g in &grid {
            // -0.0 and 0.0 are the same point.
            let g = if g == 0.0 { 0.0 } else { g };
            let mut bias = [0.0; N_FEATURES];
            bias[dim] = g;
            let ids = (0..sentences)
                .map(|sentence| {
                    *index.entry((sentence, bias.map(f64::to_bits))).or_insert_with(|| {
                        jobs.push(SweepJob { sentence, bias });
                        jobs.len() - 1
                    })
                })
                .collect();
            points.push(SweepPoint { dim, target: g, jobs: ids });
        }
    }
    Ok(SweepPlan { jobs, points })
}

/// Phone sequences for evaluation, drawn like corpus sentences but from
/// their own seed and framed by silence (id 0).
pub fn evaluation_sentences(count: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    let config = CorpusConfig { size: count, seed, ..CorpusConfig::default() };
    Ok(config
        .specs()?
        .into_iter()
        .map(|s| {
            let mut ids = vec![0];
            ids.extend(s.phone_ids);
            ids.push(0);
            ids
        })
        .collect())
}

pub struct SynthesizedSet {
    pub plan: SweepPlan,
    pub sentences: Vec<Vec<usize>>,
    pub config: SweepConfig,
    /// One entry per job; synthesis errors are kept as messages.
    pub outputs: Vec<Result<Synthesis, String>>,
    pub truncated: usize,
    /// Set when more than 10% of the syntheses hit `max_frames`.
    pub warning: Option<String>,
}

impl SynthesizedSet {
    pub fn truncation_rate(&self) -> f64 {
        self.truncated as f64 / self.outputs.len().max(1) as f64
    }
}

/// Runs `f` over `0..n` on `threads` workers and returns results in order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let threads = threads.clamp(1, n);
    let chunk = n.div_ceil(threads);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (c, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + i));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Synthesizes every sentence at every grid value of every dimension, with
/// the other dimensions at 0.
pub fn bias_sweep(model: &Model, sentences: &[Vec<usize>], config: &SweepConfig) -> Result<SynthesizedSet, EvalError> {
    let plan = plan_sweep(sentences.len(), &config.grid, &config.dims)?;
    for s in sentences {
        model.check_ids(s)?;
    }
    let outputs = parallel_map(plan.jobs.len(), config.threads, |j| {
        let job = &plan.jobs[j];
        model.synthesize(&sentences[job.sentence], &job.bias, &config.synthesis).map_err(|e| e.to_string())
    });
    let truncated = outputs.iter().filter(|o| matches!(o, Ok(s) if s.truncated)).count();
    let rate = truncated as f64 / outputs.len() as f64;
    let warning = (rate > 0.10).then(|| format!("{truncated} of {} syntheses reached max_frames ({:.1}%)", outputs.len(), 100.0 * rate));
    Ok(SynthesizedSet { plan, sentences: sentences.to_vec(), config: config.clone(), outputs, truncated, warning })
}
