//! Training objectives and their weighted totals.
//!
//! Token-level losses reduce as a mean over the contributing positions of
//! each sample, then a mean over the batch. Sequence-level losses (CTC,
//! length) are a mean over the batch.

pub mod ctc;

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{self, EncoderOutput, Encoded, ModelParams, Session};

/// Per-component losses for one step, plus `"total"`.
pub type Components = BTreeMap<String, f64>;

// independent RNG streams for the mask draws of one step
const STREAM_SPEECH_MASK: u64 = 3;
const STREAM_TEXT_MASK: u64 = 4;
const STREAM_SMART: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_lp: f64,
    pub lambda_ar: f64,
    pub lambda_mt: f64,
    pub lambda_ctc: f64,
    /// Forward passes with independent masks per step.
    pub m: usize,
    pub label_smoothing: f64,
    /// Decode-time confidence threshold carried with the recipe; unused here.
    pub p_thres: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_lp: 0.1,
            lambda_ar: 0.3,
            lambda_mt: 0.3,
            lambda_ctc: 0.3,
            m: 2,
            label_smoothing: 0.1,
            p_thres: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_lp, self.lambda_ar, self.lambda_mt, self.lambda_ctc];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {ls:?}")));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..=1.0).contains(&self.p_thres) {
            return Err(Error::Config(format!("p_thres {} outside [0, 1]", self.p_thres)));
        }
        Ok(())
    }
}

/// Which total a model is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Teacher-forced AR cross entropy only.
    Ar,
    /// `L_CMLM + λ_lp L_lp`.
    Cmlm,
    /// `L_CTC`.
    Ctc,
    /// `L_CMLM + λ_lp L_lp + λ_AR L_AR + λ_MT L_MT`.
    OrthrosCmlm,
    /// `L_CTC + λ_AR L_AR`.
    OrthrosCtc,
    /// `(1 − λ_CTC) L_CMLM + λ_CTC L_CTC`.
    CtcCmlm,
    /// Two-pass CMLM training on the model's own predictions, plus `λ_lp L_lp`.
    Smart,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Usage(format!("unknown objective {s:?}")))
    }
}

/// Number and positions of masked target tokens for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskDraw {
    pub n_mask: usize,
    /// Sorted, distinct, within `[0, N)`.
    pub positions: Vec<usize>,
}

impl MaskDraw {
    /// `n_mask ~ U(1, N)`, then `n_mask` positions without replacement.
    pub fn sample(n: usize, rng: &mut impl Rng) -> Result<MaskDraw> {
        if n == 0 {
            return Err(Error::Usage("cannot mask an empty target".into()));
        }
        let n_mask = rng.gen_range(1..=n);
        let mut positions = sample_indices(rng, n, n_mask).into_vec();
        positions.sort_unstable();
        Ok(MaskDraw { n_mask, positions })
    }

    /// Every position masked.
    pub fn full(n: usize) -> MaskDraw {
        MaskDraw {
            n_mask: n,
            positions: (0..n).collect(),
        }
    }

    /// `y` with the drawn positions replaced by `mask_id`.
    pub fn apply(&self, y: &[usize], mask_id: usize) -> Vec<usize> {
        let mut out = y.to_vec();
        for &p in &self.positions {
            out[p] = mask_id;
        }
        out
    }
}

/// Target rows padded to a common width, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub tokens: Vec<usize>,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl Padded {
    pub fn from_rows(rows: &[Vec<usize>], pad: usize) -> Padded {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(rows.len() * width);
        for r in rows {
            tokens.extend_from_slice(r);
            tokens.extend(std::iter::repeat_n(pad, width - r.len()));
        }
        Padded {
            tokens,
            width,
            lens: rows.iter().map(Vec::len).collect(),
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.width..b * self.width + self.lens[b]]
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }
}

/// Label-smoothed CE over masked positions of `logits[B, n, V]`, averaged per
/// row then over rows. `draws[b]` indexes row `b` of `targets`.
pub fn masked_ce(g: &mut Graph<'_>, logits: Var, targets: &Padded, draws: &[MaskDraw], eps: f64) -> Result<Var> {
    let b = targets.rows();
    if draws.len() != b {
        return Err(Error::shape("masked_ce", &[draws.len()], &[b]));
    }
    let mut weights = vec![0.0; targets.tokens.len()];
    for (row, d) in draws.iter().enumerate() {
        if d.positions.is_empty() {
            return Err(Error::Usage("mask set is empty".into()));
        }
        if d.positions.iter().any(|&p| p >= targets.lens[row]) {
            return Err(Error::Usage(format!("mask position outside target of length {}", targets.lens[row])));
        }
        for &p in &d.positions {
            weights[row * targets.width + p] = 1.0 / (b * d.positions.len()) as f64;
        }
    }
    g.cross_entropy(logits, &targets.tokens, &weights, eps)
}

/// Label-smoothed CE over every non-pad position of `logits[B, n, V]`.
pub fn full_ce(g: &mut Graph<'_>, logits: Var, targets: &Padded, eps: f64) -> Result<Var> {
    let b = targets.rows();
    let mut weights = vec![0.0; targets.tokens.len()];
    for (row, &l) in targets.lens.iter().enumerate() {
        if l == 0 {
            return Err(Error::Usage("empty target row".into()));
        }
        weights[row * targets.width..row * targets.width + l].fill(1.0 / (b * l) as f64);
    }
    g.cross_entropy(logits, &targets.tokens, &weights, eps)
}

/// AR teacher-forcing CE; `targets` rows already end with EOS.
pub fn ar_ce(g: &mut Graph<'_>, logits: Var, targets: &Padded, eps: f64) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 3 || s[0] != targets.rows() || s[1] != targets.width {
        return Err(Error::shape("ar_ce", s, &[targets.rows(), targets.width]));
    }
    full_ce(g, logits, targets, eps)
}

/// Batch-mean CTC negative log-likelihood over `logits[B, U', V]`.
pub fn ctc_loss(g: &mut Graph<'_>, logits: Var, frame_lens: &[usize], targets: &[Vec<usize>], blank: usize) -> Result<Var> {
    let w = vec![1.0 / targets.len().max(1) as f64; targets.len()];
    g.ctc_loss(logits, frame_lens, targets, &w, blank)
}

/// Batch-mean CE of `logits[B, L_max+1]` against the true lengths.
pub fn length_loss(g: &mut Graph<'_>, logits: Var, lens: &[usize]) -> Result<Var> {
    let classes = g.value(logits).last_dim();
    if let Some(&n) = lens.iter().find(|&&n| n >= classes) {
        return Err(Error::Length(format!("target length {n} exceeds max_target_len {}", classes - 1)));
    }
    let w = vec![1.0 / lens.len().max(1) as f64; lens.len()];
    g.cross_entropy(logits, lens, &w, 0.0)
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

fn targets(batch: &Batch) -> Padded {
    Padded {
        tokens: batch.tgt.clone(),
        width: batch.tgt_max,
        lens: batch.tgt_lens.clone(),
    }
}

/// `[BOS] + y` inputs and `y + [EOS]` targets for the AR decoder.
pub fn ar_io(y: &Padded, bos: usize, eos: usize, pad: usize) -> (Padded, Padded) {
    let rows = |f: &dyn Fn(&[usize]) -> Vec<usize>| -> Vec<Vec<usize>> { (0..y.rows()).map(|b| f(y.row(b))).collect() };
    let inputs = rows(&|r| std::iter::once(bos).chain(r.iter().copied()).collect());
    let outputs = rows(&|r| r.iter().copied().chain(std::iter::once(eos)).collect());
    (Padded::from_rows(&inputs, pad), Padded::from_rows(&outputs, pad))
}

/// Replicates each encoder row `m` times (draw-major) inside the graph.
fn repeat_encoder(s: &mut Session<'_>, enc: &Encoded, m: usize) -> Result<Encoded> {
    if m == 1 {
        return Ok(enc.clone());
    }
    let b = enc.lens.len();
    let idx: Vec<usize> = (0..m).flat_map(|_| 0..b).collect();
    Ok(Encoded {
        states: s.g.select_rows(enc.states, &idx)?,
        lens: idx.iter().map(|&i| enc.lens[i]).collect(),
    })
}

fn repeat_rows(y: &Padded, m: usize) -> Padded {
    Padded {
        tokens: y.tokens.repeat(m),
        width: y.width,
        lens: y.lens.repeat(m),
    }
}

/// Masked CE averaged over `m` independent mask draws per row; the draws run
/// as one stacked decoder pass. Returns the loss and the draws used.
pub fn mmt_loss(
    s: &mut Session<'_>,
    enc: &Encoded,
    y: &Padded,
    m: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<MaskDraw>)> {
    if m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    let mask = s.config().vocab().mask;
    let pad = s.config().vocab().pad;
    let b = y.rows();
    let mut draws = Vec::with_capacity(m * b);
    for _ in 0..m {
        for row in 0..b {
            draws.push(MaskDraw::sample(y.lens[row], rng)?);
        }
    }
    let stacked = repeat_rows(y, m);
    let inputs: Vec<Vec<usize>> = (0..m * b).map(|i| draws[i].apply(stacked.row(i), mask)).collect();
    let inputs = Padded::from_rows(&inputs, pad);
    let enc_m = repeat_encoder(s, enc, m)?;
    let logits = model::cmlm_forward(s, &padded_to(&inputs, y.width, pad), y.width, &stacked.lens, &enc_m)?;
    // the per-row 1/(m·b) weights make this the mean of the m draw losses
    let loss = masked_ce(&mut s.g, logits, &stacked, &draws, eps)?;
    Ok((loss, draws))
}

fn padded_to(p: &Padded, width: usize, pad: usize) -> Vec<usize> {
    if p.width == width {
        return p.tokens.clone();
    }
    let rows: Vec<Vec<usize>> = (0..p.rows()).map(|b| p.row(b).to_vec()).collect();
    let mut out = Vec::with_capacity(rows.len() * width);
    for r in rows {
        out.extend(r.iter().copied().chain(std::iter::repeat(pad)).take(width));
    }
    out
}

/// CMLM loss conditioned on the source transcription through the text
/// encoder. Uses `rng`, which callers keep separate from the speech masks.
pub fn nar_mt_loss(s: &mut Session<'_>, batch: &Batch, m: usize, eps: f64, rng: &mut impl Rng) -> Result<Var> {
    let text = model::encode_text(s, &batch.src, batch.src_max, &batch.src_lens)?;
    Ok(mmt_loss(s, &text, &targets(batch), m, eps, rng)?.0)
}

/// Argmax CMLM predictions at every position for masked inputs, computed in
/// a separate graph so nothing flows back through them.
pub fn cmlm_predictions(params: &ModelParams, enc: &EncoderOutput, inputs: &Padded) -> Result<Vec<Vec<usize>>> {
    let mut s = Session::inference(params);
    let e = enc.bind(&mut s);
    let logits = model::cmlm_forward(&mut s, &inputs.tokens, inputs.width, &inputs.lens, &e)?;
    let v = s.g.value(logits).last_dim();
    let data = s.g.value(logits).data();
    Ok((0..inputs.rows())
        .map(|b| {
            (0..inputs.lens[b])
                .map(|i| argmax(&data[(b * inputs.width + i) * v..(b * inputs.width + i + 1) * v]))
                .collect()
        })
        .collect())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Two-pass training loss: mask the gold target and predict every position
/// (no gradient), re-mask the prediction with a fresh draw, then score all
/// non-pad positions against the gold target.
pub fn smart_loss(s: &mut Session<'_>, enc: &Encoded, y: &Padded, eps: f64, rng: &mut impl Rng) -> Result<Var> {
    let vocab = s.config().vocab();
    let b = y.rows();
    let first: Vec<Vec<usize>> = (0..b)
        .map(|row| Ok(MaskDraw::sample(y.lens[row], rng)?.apply(y.row(row), vocab.mask)))
        .collect::<Result<_>>()?;
    let detached = enc.to_output(s);
    let preds = cmlm_predictions(s.params(), &detached, &Padded::from_rows(&first, vocab.pad))?;
    smart_second_pass(s, enc, &preds, y, eps, rng)
}

/// Second SMART pass from given first-pass predictions.
pub fn smart_second_pass(
    s: &mut Session<'_>,
    enc: &Encoded,
    preds: &[Vec<usize>],
    y: &Padded,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    let vocab = s.config().vocab();
    let second: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| Ok(MaskDraw::sample(p.len(), rng)?.apply(p, vocab.mask)))
        .collect::<Result<_>>()?;
    let inputs = Padded::from_rows(&second, vocab.pad);
    let logits = model::cmlm_forward(s, &padded_to(&inputs, y.width, vocab.pad), y.width, &y.lens, enc)?;
    full_ce(&mut s.g, logits, y, eps)
}

fn ar_loss(s: &mut Session<'_>, enc: &Encoded, y: &Padded, eps: f64) -> Result<Var> {
    let v = s.config().vocab();
    let (inputs, outputs) = ar_io(y, v.bos, v.eos, v.pad);
    let logits = model::ar_forward(s, &inputs.tokens, inputs.width, &inputs.lens, enc)?;
    ar_ce(&mut s.g, logits, &outputs, eps)
}

fn require(enabled: bool, weight: f64, what: &str) -> Result<()> {
    if weight > 0.0 && !enabled {
        return Err(Error::Config(format!("{what} weight is {weight} but the model has no {what} component")));
    }
    Ok(())
}

/// Accumulates weighted scalar terms and their logged values.
struct Terms {
    terms: Vec<(Var, f64)>,
    parts: Components,
}

impl Terms {
    fn new() -> Self {
        Terms {
            terms: Vec::new(),
            parts: Components::new(),
        }
    }

    fn push(&mut self, s: &Session<'_>, name: &str, v: Var, weight: f64) {
        self.parts.insert(name.into(), s.g.value(v).item());
        self.terms.push((v, weight));
    }

    fn finish(mut self, s: &mut Session<'_>) -> Result<(Var, Components)> {
        let total = s.g.weighted_sum(&self.terms)?;
        let t = s.g.value(total).item();
        if !t.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss; components {:?}", self.parts)));
        }
        self.parts.insert("total".into(), t);
        Ok((total, self.parts))
    }
}

/// `L_CMLM + λ_lp L_lp + λ_AR L_AR + λ_MT L_MT`. Zero-weight terms are not
/// computed. `L_CMLM` is the `m`-draw average.
pub fn total_orthros_cmlm(s: &mut Session<'_>, batch: &Batch, w: &LossWeights, seed: u64) -> Result<(Var, Components)> {
    w.validate()?;
    let cfg = s.config();
    if !cfg.has_cmlm() {
        return Err(Error::Config("model has no CMLM decoder".into()));
    }
    require(cfg.use_length_predictor, w.lambda_lp, "length predictor")?;
    require(cfg.has_ar(), w.lambda_ar, "AR decoder")?;
    require(cfg.use_text_encoder, w.lambda_mt, "text encoder")?;
    let y = targets(batch);
    let enc = model::encode_batch(s, batch)?;
    let mut t = Terms::new();
    let (cmlm, _) = mmt_loss(s, &enc, &y, w.m, w.label_smoothing, &mut stream(seed, STREAM_SPEECH_MASK))?;
    t.push(s, "cmlm", cmlm, 1.0);
    if w.lambda_lp > 0.0 {
        let logits = model::predict_length(s, &enc)?;
        let lp = length_loss(&mut s.g, logits, &y.lens)?;
        t.push(s, "lp", lp, w.lambda_lp);
    }
    if w.lambda_ar > 0.0 {
        let ar = ar_loss(s, &enc, &y, w.label_smoothing)?;
        t.push(s, "ar", ar, w.lambda_ar);
    }
    if w.lambda_mt > 0.0 {
        let mt = nar_mt_loss(s, batch, w.m, w.label_smoothing, &mut stream(seed, STREAM_TEXT_MASK))?;
        t.push(s, "mt", mt, w.lambda_mt);
    }
    t.finish(s)
}

fn ctc_term(s: &mut Session<'_>, enc: &Encoded, y: &Padded) -> Result<Var> {
    let logits = model::ctc_logits(s, enc)?;
    let rows: Vec<Vec<usize>> = (0..y.rows()).map(|b| y.row(b).to_vec()).collect();
    let blank = s.config().vocab().blank;
    ctc_loss(&mut s.g, logits, &enc.lens, &rows, blank)
}

/// `L_CTC + λ_AR L_AR`.
pub fn total_orthros_ctc(s: &mut Session<'_>, batch: &Batch, w: &LossWeights) -> Result<(Var, Components)> {
    w.validate()?;
    let cfg = s.config();
    if !cfg.use_ctc_head {
        return Err(Error::Config("model has no CTC head".into()));
    }
    require(cfg.has_ar(), w.lambda_ar, "AR decoder")?;
    let y = targets(batch);
    let enc = model::encode_batch(s, batch)?;
    let mut t = Terms::new();
    let ctc = ctc_term(s, &enc, &y)?;
    t.push(s, "ctc", ctc, 1.0);
    if w.lambda_ar > 0.0 {
        let ar = ar_loss(s, &enc, &y, w.label_smoothing)?;
        t.push(s, "ar", ar, w.lambda_ar);
    }
    t.finish(s)
}

/// `(1 − λ_CTC) L_CMLM + λ_CTC L_CTC`.
pub fn ctc_cmlm_total(s: &mut Session<'_>, batch: &Batch, w: &LossWeights, seed: u64) -> Result<(Var, Components)> {
    w.validate()?;
    let lambda = w.lambda_ctc;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda_ctc {lambda} outside [0, 1]")));
    }
    let cfg = s.config();
    if !cfg.use_ctc_head || !cfg.has_cmlm() {
        return Err(Error::Config("CTC-CMLM needs both a CTC head and a CMLM decoder".into()));
    }
    let y = targets(batch);
    let enc = model::encode_batch(s, batch)?;
    let mut t = Terms::new();
    let (cmlm, _) = mmt_loss(s, &enc, &y, w.m, w.label_smoothing, &mut stream(seed, STREAM_SPEECH_MASK))?;
    t.push(s, "cmlm", cmlm, 1.0 - lambda);
    let ctc = ctc_term(s, &enc, &y)?;
    t.push(s, "ctc", ctc, lambda);
    t.finish(s)
}

/// AR decoder alone.
pub fn total_ar(s: &mut Session<'_>, batch: &Batch, w: &LossWeights) -> Result<(Var, Components)> {
    w.validate()?;
    let y = targets(batch);
    let enc = model::encode_batch(s, batch)?;
    let mut t = Terms::new();
    let ar = ar_loss(s, &enc, &y, w.label_smoothing)?;
    t.push(s, "ar", ar, 1.0);
    t.finish(s)
}

/// SMART with the length loss.
pub fn total_smart(s: &mut Session<'_>, batch: &Batch, w: &LossWeights, seed: u64) -> Result<(Var, Components)> {
    w.validate()?;
    require(s.config().use_length_predictor, w.lambda_lp, "length predictor")?;
    let y = targets(batch);
    let enc = model::encode_batch(s, batch)?;
    let mut t = Terms::new();
    let sm = smart_loss(s, &enc, &y, w.label_smoothing, &mut stream(seed, STREAM_SMART))?;
    t.push(s, "smart", sm, 1.0);
    if w.lambda_lp > 0.0 {
        let logits = model::predict_length(s, &enc)?;
        let lp = length_loss(&mut s.g, logits, &y.lens)?;
        t.push(s, "lp", lp, w.lambda_lp);
    }
    t.finish(s)
}

/// Dispatches to the total for `objective`. `seed` fixes every mask draw.
pub fn total_loss(
    s: &mut Session<'_>,
    objective: Objective,
    batch: &Batch,
    w: &LossWeights,
    seed: u64,
) -> Result<(Var, Components)> {
    match objective {
        Objective::Ar => total_ar(s, batch, w),
        Objective::Cmlm => {
            let w = LossWeights {
                lambda_ar: 0.0,
                lambda_mt: 0.0,
                ..w.clone()
            };
            total_orthros_cmlm(s, batch, &w, seed)
        }
        Objective::Ctc => {
            let w = LossWeights {
                lambda_ar: 0.0,
                ..w.clone()
            };
            total_orthros_ctc(s, batch, &w)
        }
        Objective::OrthrosCmlm => total_orthros_cmlm(s, batch, w, seed),
        Objective::OrthrosCtc => total_orthros_ctc(s, batch, w),
        Objective::CtcCmlm => ctc_cmlm_total(s, batch, w, seed),
        Objective::Smart => total_smart(s, batch, w, seed),
    }
}
