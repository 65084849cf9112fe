//! Adam with a Noam schedule, the epoch loop with per-epoch checkpoints,
//! sequence-level distillation and checkpoint averaging.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pad_batch, Batch, Sample};
use crate::decode::{ar_beam, trim};
use crate::error::{Error, Result};
use crate::losses::{total_loss, Components, LossWeights, Objective};
use crate::model::{encode_frames, subsampled_len, ModelParams, Session};
use crate::tensor::Array;

const STREAM_SHUFFLE: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Utterances per update.
    pub batch_size: usize,
    pub lr_constant: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Best checkpoints (by validation loss) averaged into the final model.
    pub n_avg: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            // peak lr 1/(8·20) = 6.25e-3 at d_model 64; 2.0 is unstable at desk scale
            lr_constant: 1.0,
            warmup_steps: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 5.0,
            seed: 1,
            objective: Objective::OrthrosCmlm,
            n_avg: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.batch_size == 0 || self.n_avg == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs, batch_size, warmup_steps and n_avg must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.lr_constant <= 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("lr_constant must be positive and clip_norm nonnegative".into()));
        }
        Ok(())
    }
}

/// `c · d^-0.5 · min(s^-0.5, s · w^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, constant: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage("learning-rate step counts from 1".into()));
    }
    let s = step as f64;
    Ok(constant * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

/// One step's record in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_components: Components,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale(c));
    }
    norm
}

/// One Adam update on `batch`. Parameters the objective does not touch are
/// left alone.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &Batch,
    cfg: &TrainConfig,
    w: &LossWeights,
) -> Result<(f64, Components)> {
    let step = opt.step + 1;
    let seed = step_seed(cfg.seed, step);
    let (components, mut grads) = {
        let mut s = Session::training(params, seed);
        let (loss, components) = total_loss(&mut s, cfg.objective, batch, w, seed)?;
        (components, s.backward(loss)?)
    };
    if grads.values().any(|g| g.data().iter().any(|x| !x.is_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient; components {components:?}")));
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    let lr = noam_lr(step, params.config.d_model, cfg.warmup_steps, cfg.lr_constant)?;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (name, g) in grads {
        let p = params.tensors.get_mut(&name).expect("gradient for a known parameter");
        let m = opt.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
        let v = opt.v.entry(name).or_insert_with(|| Array::zeros(g.shape()));
        for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        }
    }
    opt.step = step;
    Ok((lr, components))
}

/// Mean validation loss of `objective` with dropout off and fixed masks.
pub fn validation_loss(params: &ModelParams, data: &[Sample], cfg: &TrainConfig, w: &LossWeights) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let pad = params.config.vocab().pad;
    let mut total = 0.0;
    for (i, chunk) in data.chunks(cfg.batch_size).enumerate() {
        let batch = pad_batch(&chunk.iter().collect::<Vec<_>>(), pad)?;
        let mut s = Session::inference(params);
        let (_, c) = total_loss(&mut s, cfg.objective, &batch, w, step_seed(cfg.seed ^ 0xDEAD_BEEF, i))?;
        total += c["total"] * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Sidecar written next to every epoch checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub step: usize,
    pub valid_loss: f64,
    /// Checkpoint file name, relative to the output directory.
    pub file: String,
}

/// Indices of the `n` lowest validation losses; ties go to the earlier epoch.
pub fn best_checkpoints(infos: &[CheckpointInfo], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..infos.len()).collect();
    idx.sort_by(|&a, &b| {
        infos[a]
            .valid_loss
            .total_cmp(&infos[b].valid_loss)
            .then(infos[a].epoch.cmp(&infos[b].epoch))
    });
    idx.truncate(n);
    idx
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Average of the best `n_avg` epoch checkpoints.
    pub params: ModelParams,
    pub checkpoints: Vec<CheckpointInfo>,
    pub steps: usize,
}

/// Trains for `cfg.epochs` epochs, writing `epoch_{k}.ckpt` (+ `.json`),
/// `train_log.jsonl` and the averaged `model.ckpt` into `out_dir`.
pub fn train(
    mut params: ModelParams,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
    w: &LossWeights,
    out_dir: &Path,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut log = BufWriter::new(File::create(out_dir.join("train_log.jsonl"))?);
    let pad = params.config.vocab().pad;
    let mut opt = OptimizerState::default();
    let mut infos = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        rng.set_stream(STREAM_SHUFFLE);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = pad_batch(&samples, pad)?;
            let (lr, components) = train_step(&mut params, &mut opt, &batch, cfg, w)?;
            let rec = StepLog {
                step: opt.step,
                epoch,
                lr,
                loss_total: components["total"],
                loss_components: components,
            };
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            on_step(&rec);
        }
        let valid_loss = validation_loss(&params, valid_set, cfg, w)?;
        let file = format!("epoch_{epoch}.ckpt");
        let path = out_dir.join(&file);
        params.save(&path)?;
        let info = CheckpointInfo {
            epoch,
            step: opt.step,
            valid_loss,
            file,
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&info)?)?;
        log::info!("epoch {epoch}: step {} valid loss {valid_loss:.4}", opt.step);
        infos.push(info);
    }
    log.flush()?;
    let best: Vec<PathBuf> = best_checkpoints(&infos, cfg.n_avg)
        .into_iter()
        .map(|i| out_dir.join(&infos[i].file))
        .collect();
    let averaged = average_checkpoints(&best)?;
    averaged.save(&out_dir.join("model.ckpt"))?;
    Ok(TrainOutcome {
        params: averaged,
        checkpoints: infos,
        steps: opt.step,
    })
}

/// Element-wise mean of models sharing one name/shape table.
pub fn average_params(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| Error::Usage("no checkpoints to average".into()))?;
    for m in &models[1..] {
        let bad = first.mismatched_names(m);
        if !bad.is_empty() {
            return Err(Error::Incompatible(bad.join(", ")));
        }
    }
    if models.len() == 1 {
        return Ok(first.clone());
    }
    // first + mean offset, so averaging identical models is exact
    let mut out = first.clone();
    let k = models.len() as f64;
    for (name, t) in out.tensors.iter_mut() {
        let base = &first.tensors[name];
        let mut offset = Array::zeros(base.shape());
        for m in &models[1..] {
            for ((o, x), b) in offset.data_mut().iter_mut().zip(m.tensors[name].data()).zip(base.data()) {
                *o += x - b;
            }
        }
        offset.scale(1.0 / k);
        t.add_assign(&offset);
    }
    Ok(out)
}

pub fn average_checkpoints(paths: &[PathBuf]) -> Result<ModelParams> {
    let models: Vec<ModelParams> = paths.iter().map(|p| ModelParams::load(p)).collect::<Result<_>>()?;
    average_params(&models)
}

/// Replaces each target with the AR teacher's beam output. Targets stay
/// unchanged when the teacher emits nothing or a sequence the utterance is
/// too short to carry; the second value counts those.
pub fn seqkd_distill(teacher: &ModelParams, data: &[Sample], beam: usize) -> Result<(Vec<Sample>, usize)> {
    let pad = teacher.config.vocab().pad;
    let mut kept = 0;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(16) {
        let batch = pad_batch(&chunk.iter().collect::<Vec<_>>(), pad)?;
        let enc = encode_frames(teacher, &batch.frames, &batch.frame_lens)?;
        for (i, sample) in chunk.iter().enumerate() {
            let one = trim(&enc.select(&[i])?);
            let r = ar_beam(teacher, &one, beam, teacher.config.max_target_len)?;
            let y = r.hyp.tokens;
            let mut s = sample.clone();
            // CTC students need one frame per label plus one per adjacent repeat
            let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
            if y.is_empty() || !r.finished || y.len() + repeats > subsampled_len(sample.num_frames()) {
                kept += 1;
            } else {
                s.tgt = y;
            }
            out.push(s);
        }
    }
    if kept > 0 {
        log::warn!("kept {kept} original targets during distillation");
    }
    Ok((out, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, save_dataset, load_dataset, CorpusConfig};
    use crate::model::ModelConfig;

    fn corpus(n: usize, seed: u64) -> Vec<Sample> {
        gen_corpus(&CorpusConfig {
            seed,
            n_samples: n,
            vocab_size: 10,
            len_range: (2, 4),
            repeat_range: (2, 3),
            noise_std: 0.05,
            frame_dim: 4,
        })
        .unwrap()
    }

    fn tiny() -> ModelParams {
        ModelParams::init(&ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn noam_schedule() {
        let (d, w, c) = (256, 25_000, 5.0);
        let peak = noam_lr(w, d, w, c).unwrap();
        let closed = c / 16.0 / (w as f64).sqrt();
        assert!((peak - closed).abs() < 1e-15);
        // both branches agree at the peak
        let s = w as f64;
        assert!((s.powf(-0.5) - s * s.powf(-1.5)).abs() < 1e-18);
        for step in [1, 10, 1000, 24_999] {
            assert!(noam_lr(step, d, w, c).unwrap() < noam_lr(step + 1, d, w, c).unwrap());
        }
        for step in [25_000, 30_000, 100_000] {
            assert!(noam_lr(step, d, w, c).unwrap() > noam_lr(step + 1, d, w, c).unwrap());
        }
        let want = 5.0 / 16.0 * (100_000f64).powf(-0.5);
        assert_eq!(noam_lr(100_000, d, w, c).unwrap(), want);
        assert!(matches!(noam_lr(0, d, w, c), Err(Error::Usage(_))));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Array::new(vec![2], vec![3.0, 4.0]).unwrap());
        g.insert("b".to_string(), Array::new(vec![1], vec![12.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 5.0), 13.0);
        let after: f64 = g.values().flat_map(|a| a.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), after);
    }

    #[test]
    fn adam_step_matches_hand_computation() {
        let p0 = tiny();
        let batch = pad_batch(&corpus(2, 1).iter().collect::<Vec<_>>(), 1).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Ar,
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        let w = LossWeights::default();
        let grads = {
            let mut s = Session::training(&p0, step_seed(cfg.seed, 1));
            let (l, _) = total_loss(&mut s, cfg.objective, &batch, &w, step_seed(cfg.seed, 1)).unwrap();
            s.backward(l).unwrap()
        };
        let mut p = p0.clone();
        let mut opt = OptimizerState::default();
        let (lr, _) = train_step(&mut p, &mut opt, &batch, &cfg, &w).unwrap();
        // first Adam step: m̂ = g, v̂ = g², update = lr · g / (|g| + eps)
        for (name, g) in &grads {
            for i in 0..g.len() {
                let gi = g.data()[i];
                let want = p0.tensors[name].data()[i] - lr * gi / (gi.abs() + cfg.adam_eps);
                assert!((p.tensors[name].data()[i] - want).abs() < 1e-12, "{name}");
            }
        }
        assert!(!grads.contains_key("cmlm.out.w"));
        assert_eq!(p.tensors["cmlm.out.w"], p0.tensors["cmlm.out.w"]);
    }

    #[test]
    fn training_is_deterministic_and_logs_components() {
        let data = corpus(12, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            n_avg: 2,
            ..TrainConfig::default()
        };
        let w = LossWeights::default();
        let run = |dir: &Path| {
            let mut logs = Vec::new();
            let out = train(tiny(), &data, &data[..4], &cfg, &w, dir, &mut |r| logs.push(r.clone())).unwrap();
            (out, logs)
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ra, la) = run(a.path());
        let (rb, lb) = run(b.path());
        assert_eq!(ra.params, rb.params);
        assert_eq!(la, lb);
        assert_eq!(ra.steps, 6);
        for r in &la {
            let c = &r.loss_components;
            let sum = c["cmlm"] + 0.1 * c["lp"] + 0.3 * c["ar"] + 0.3 * c["mt"];
            assert!((sum - r.loss_total).abs() < 1e-12);
        }
        let text = std::fs::read_to_string(a.path().join("train_log.jsonl")).unwrap();
        assert_eq!(text, std::fs::read_to_string(b.path().join("train_log.jsonl")).unwrap());
        let first: StepLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, la[0]);
        for e in 1..=2 {
            let info: CheckpointInfo =
                serde_json::from_str(&std::fs::read_to_string(a.path().join(format!("epoch_{e}.json"))).unwrap()).unwrap();
            assert_eq!(info.epoch, e);
            assert!(info.valid_loss.is_finite());
        }
        assert_eq!(ModelParams::load(&a.path().join("model.ckpt")).unwrap(), ra.params);
    }

    #[test]
    fn ar_objective_overfits_a_small_set() {
        let data = corpus(16, 4);
        let cfg = ModelConfig {
            d_model: 32,
            d_ff: 64,
            n_heads: 4,
            ..ModelConfig::tiny()
        };
        let mut p = ModelParams::init(&cfg, 3).unwrap();
        let mut opt = OptimizerState::default();
        let cfg = TrainConfig {
            objective: Objective::Ar,
            warmup_steps: 100,
            lr_constant: 2.0,
            ..TrainConfig::default()
        };
        let w = LossWeights {
            label_smoothing: 0.0,
            ..LossWeights::default()
        };
        let batch = pad_batch(&data.iter().collect::<Vec<_>>(), 1).unwrap();
        let mut last = f64::INFINITY;
        let mut first = None;
        for _ in 0..400 {
            let (_, c) = train_step(&mut p, &mut opt, &batch, &cfg, &w).unwrap();
            first.get_or_insert(c["total"]);
            last = c["total"];
        }
        assert!(last < 0.1, "loss {} -> {last}", first.unwrap());
    }

    #[test]
    fn nan_loss_aborts_with_components() {
        let mut p = tiny();
        p.tensors.get_mut("ar.out.b").unwrap().data_mut()[5] = f64::NAN;
        let batch = pad_batch(&corpus(2, 1).iter().collect::<Vec<_>>(), 1).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Ar,
            ..TrainConfig::default()
        };
        let err = train_step(&mut p, &mut OptimizerState::default(), &batch, &cfg, &LossWeights::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn checkpoint_selection_prefers_earlier_ties() {
        let info = |epoch, valid_loss| CheckpointInfo {
            epoch,
            step: epoch * 10,
            valid_loss,
            file: String::new(),
        };
        let infos = vec![info(1, 2.0), info(2, 1.0), info(3, 1.5), info(4, 1.0)];
        assert_eq!(best_checkpoints(&infos, 3), vec![1, 3, 2]);
        assert_eq!(best_checkpoints(&infos, 9).len(), 4);
    }

    #[test]
    fn averaging() {
        let a = tiny();
        let mut b = a.clone();
        b.tensors.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x += 2.0));
        let avg = average_params(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(avg, a);
        let mid = average_params(&[a.clone(), b]).unwrap();
        for (n, t) in &mid.tensors {
            assert!(t.data().iter().zip(a.tensors[n].data()).all(|(m, x)| (m - x - 1.0).abs() < 1e-12));
        }
        let mut cfg = ModelConfig::tiny();
        cfg.d_ff = 5;
        let other = ModelParams::init(&cfg, 0).unwrap();
        match average_params(&[a.clone(), other]) {
            Err(Error::Incompatible(names)) => assert!(names.contains("ffn.w1")),
            r => panic!("{r:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("{i}.ckpt"))).collect();
        paths.iter().for_each(|p| a.save(p).unwrap());
        let loaded = average_checkpoints(&paths).unwrap();
        assert_eq!(loaded, a);
        let enc = encode_frames(&loaded, &Array::full(&[1, 8, 4], 0.1), &[8]).unwrap();
        crate::decode::mask_predict(&loaded, &enc, &crate::decode::DecodeConfig::default()).unwrap();
    }

    #[test]
    fn distillation_keeps_frames_and_round_trips() {
        let data = corpus(4, 6);
        let (out, kept) = seqkd_distill(&tiny(), &data, 5).unwrap();
        assert_eq!(out.len(), 4);
        assert!(kept <= 4);
        for (a, b) in data.iter().zip(&out) {
            assert_eq!((a.id, &a.frames, &a.src), (b.id, &b.frames, &b.src));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kd.jsonl");
        save_dataset(&out, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), out);
    }
}
