//! Wall-clock decoding benchmark: batch size 1, sequential, warm-up excluded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::decode::{self, DecodeConfig, DecodeTiming};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::tensor::Array;

pub const DEFAULT_RUNS: usize = 5;

/// One timed configuration: a model and how to decode with it.
#[derive(Clone, Copy)]
pub struct BenchTarget<'a> {
    pub label: &'a str,
    pub params: &'a ModelParams,
    pub cfg: &'a DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds per utterance for each timed run (encoder included).
    pub runs: Vec<f64>,
    pub mean: f64,
    pub stdev: f64,
    /// Mean per-utterance search and rescoring time across runs.
    pub search_mean: f64,
    pub rescore_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub algorithm: String,
    pub n_utterances: usize,
    pub timing: Timing,
    pub baseline_label: String,
    pub baseline: Timing,
    /// `baseline.mean / timing.mean`
    pub speedup: f64,
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn one_pass(t: &BenchTarget<'_>, inputs: &[(Array, usize)]) -> Result<(f64, DecodeTiming)> {
    let mut parts = DecodeTiming::default();
    let start = Instant::now();
    for (frames, u) in inputs {
        let enc = model::encode_frames(t.params, frames, &[*u])?;
        let out = decode::decode(t.params, &enc, t.cfg)?;
        parts.search += out.timing.search;
        parts.rescore += out.timing.rescore;
    }
    Ok((start.elapsed().as_secs_f64(), parts))
}

/// Decodes every sample once untimed, then `runs` more times, timing each
/// full pass.
pub fn time_decode(t: &BenchTarget<'_>, samples: &[Sample], runs: usize) -> Result<Timing> {
    if samples.is_empty() || runs == 0 {
        return Err(Error::Usage("benchmark needs at least one sample and one run".into()));
    }
    t.cfg.validate()?;
    let inputs = samples
        .iter()
        .map(|s| {
            let (u, f) = (s.num_frames(), s.frames.shape()[1]);
            Ok((s.frames.clone().reshape(&[1, u, f])?, u))
        })
        .collect::<Result<Vec<_>>>()?;
    one_pass(t, &inputs)?;
    let n = samples.len() as f64;
    let (mut per_run, mut search, mut rescore) = (Vec::with_capacity(runs), 0.0, 0.0);
    for _ in 0..runs {
        let (wall, parts) = one_pass(t, &inputs)?;
        per_run.push(wall / n);
        search += parts.search / n;
        rescore += parts.rescore / n;
    }
    let (mean, stdev) = mean_stdev(&per_run);
    Ok(Timing {
        runs: per_run,
        mean,
        stdev,
        search_mean: search / runs as f64,
        rescore_mean: rescore / runs as f64,
    })
}

pub fn bench_decode(target: BenchTarget<'_>, baseline: BenchTarget<'_>, samples: &[Sample], runs: usize) -> Result<BenchReport> {
    let timing = time_decode(&target, samples, runs)?;
    let base = time_decode(&baseline, samples, runs)?;
    Ok(BenchReport {
        label: target.label.into(),
        algorithm: target.cfg.algorithm.name().into(),
        n_utterances: samples.len(),
        speedup: base.mean / timing.mean,
        baseline_label: baseline.label.into(),
        baseline: base,
        timing,
    })
}
