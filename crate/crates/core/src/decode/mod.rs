//! Inference: Mask-Predict with length beams, CTC-initialised Mask-Predict,
//! CTC greedy and prefix beam search, AR beam search, and rescoring of NAR
//! candidates with the AR decoder in a single teacher-forced pass.

mod ctc;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use ctc::{best_path_logprob, ctc_greedy, ctc_greedy_confidence, ctc_prefix_beam};

use crate::autograd::log_softmax_rows;
use crate::data::{pad_batch, Sample};
use crate::error::{Error, Result};
use crate::losses::{ar_io, Padded};
use crate::model::{self, EncoderOutput, ModelParams, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ArBeam,
    CtcGreedy,
    CtcBeam,
    MaskPredict,
    CtcCmlm,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ArBeam => "ar_beam",
            Algorithm::CtcGreedy => "ctc_greedy",
            Algorithm::CtcBeam => "ctc_beam",
            Algorithm::MaskPredict => "mask_predict",
            Algorithm::CtcCmlm => "ctc_cmlm",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Algorithm::ArBeam,
            Algorithm::CtcGreedy,
            Algorithm::CtcBeam,
            Algorithm::MaskPredict,
            Algorithm::CtcCmlm,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::Usage(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub algorithm: Algorithm,
    /// Refinement iterations `T`.
    pub iterations: usize,
    /// Candidates per utterance: length beam for Mask-Predict, prefix beam
    /// for CTC beam search.
    pub length_beam: usize,
    /// AR beam width.
    pub beam_width: usize,
    /// Tokens from greedy CTC below this probability start masked.
    pub p_thres: f64,
    /// Collapse adjacent repeats in CMLM outputs.
    pub dedup: bool,
    /// Re-predict every position each iteration, not only masked ones.
    pub update_all: bool,
    /// Select among candidates with the AR decoder.
    pub rescore: bool,
    /// AR beam length limit; defaults to the model's `max_target_len`.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            algorithm: Algorithm::MaskPredict,
            iterations: 10,
            length_beam: 5,
            beam_width: 4,
            p_thres: 0.9,
            dedup: false,
            update_all: false,
            rescore: false,
            max_len: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.length_beam == 0 || self.beam_width == 0 {
            return Err(Error::Config("iterations, length_beam and beam_width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_thres) {
            return Err(Error::Config(format!("p_thres {} outside [0, 1]", self.p_thres)));
        }
        Ok(())
    }
}

/// Refinement state of one Mask-Predict candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub tokens: Vec<usize>,
    /// Log-probability of each token when it was last predicted; `-inf`
    /// while masked.
    pub scores: Vec<f64>,
    pub masked: Vec<bool>,
    pub t: usize,
}

impl MaskState {
    pub fn all_masked(n: usize, mask_id: usize) -> MaskState {
        MaskState {
            tokens: vec![mask_id; n],
            scores: vec![f64::NEG_INFINITY; n],
            masked: vec![true; n],
            t: 0,
        }
    }

    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    fn nar_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.tokens.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Length-normalised log-probability under the decoder that produced
    /// the hypothesis.
    pub nar_score: f64,
    /// Mean token log-probability under the AR decoder; set by rescoring.
    pub ar_score: Option<f64>,
    /// Length the hypothesis was generated at (before de-duplication).
    pub source_length: usize,
}

/// Number of positions re-masked after iteration `t` of `T`:
/// `⌊N̂·(T − t)/T⌋`, decaying linearly to zero.
pub fn mask_schedule(n: usize, t_total: usize, t: usize) -> Result<usize> {
    if t == 0 || t > t_total {
        return Err(Error::Usage(format!("iteration {t} outside 1..={t_total}")));
    }
    Ok(n * (t_total - t) / t_total)
}

/// Collapses adjacent repeated tokens.
pub fn dedup(tokens: &[usize]) -> Vec<usize> {
    let mut out = tokens.to_vec();
    out.dedup();
    out
}

/// Positions of the `k` lowest scores; ties go to the lower index.
fn lowest(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Log-probabilities `[n_i, V]` per candidate for the given token rows.
pub type Predictor<'a> = dyn FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>> + 'a;

/// Runs iterations `1..=T` on `states`. `cap[i]` bounds how many positions
/// of candidate `i` may be re-masked (the restricted schedule).
pub fn refine(
    states: &mut [MaskState],
    t_total: usize,
    update_all: bool,
    cap: Option<&[usize]>,
    vocab: usize,
    mask_id: usize,
    predict: &mut Predictor<'_>,
) -> Result<()> {
    for t in 1..=t_total {
        let rows: Vec<Vec<usize>> = states.iter().map(|s| s.tokens.clone()).collect();
        let logp = predict(&rows)?;
        for (i, st) in states.iter_mut().enumerate() {
            for pos in 0..st.tokens.len() {
                if !(st.masked[pos] || update_all) {
                    continue;
                }
                let row = &logp[i][pos * vocab..(pos + 1) * vocab];
                let (best, lp) = argmax_excluding(row, mask_id);
                st.tokens[pos] = best;
                st.scores[pos] = lp;
            }
            st.masked.iter_mut().for_each(|m| *m = false);
            st.t = t;
            if t < t_total {
                let mut k = mask_schedule(st.tokens.len(), t_total, t)?;
                if let Some(c) = cap {
                    k = k.min(c[i]);
                }
                for pos in lowest(&st.scores, k) {
                    st.tokens[pos] = mask_id;
                    st.scores[pos] = f64::NEG_INFINITY;
                    st.masked[pos] = true;
                }
            }
        }
    }
    Ok(())
}

/// Argmax over a log-probability row, never choosing `mask_id`.
fn argmax_excluding(row: &[f64], mask_id: usize) -> (usize, f64) {
    let mut best = usize::MAX;
    for (c, &x) in row.iter().enumerate() {
        if c != mask_id && (best == usize::MAX || x > row[best]) {
            best = c;
        }
    }
    (best, row[best])
}

fn single(enc: &EncoderOutput) -> Result<()> {
    if enc.batch_size() != 1 {
        return Err(Error::Usage(format!("decoding expects one utterance, got {}", enc.batch_size())));
    }
    Ok(())
}

/// CMLM predictor over copies of one utterance's encoder output.
fn cmlm_predictor<'a>(params: &'a ModelParams, enc: &'a EncoderOutput) -> Box<Predictor<'a>> {
    let v = params.config.vocab_size;
    let pad = params.config.vocab().pad;
    Box::new(move |rows: &[Vec<usize>]| {
        let p = Padded::from_rows(rows, pad);
        let encs = enc.select(&vec![0; rows.len()])?;
        let mut s = Session::inference(params);
        let e = encs.bind(&mut s);
        let logits = model::cmlm_forward(&mut s, &p.tokens, p.width, &p.lens, &e)?;
        let lp = log_softmax_rows(s.g.value(logits).data(), v)?;
        Ok((0..rows.len())
            .map(|b| lp[b * p.width * v..(b * p.width + p.lens[b]) * v].to_vec())
            .collect())
    })
}

/// Mask-Predict from the top-`l` predicted lengths, all candidates refined
/// together. Returns one hypothesis per nonzero length, best length first.
pub fn mask_predict(params: &ModelParams, enc: &EncoderOutput, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    single(enc)?;
    let mut s = Session::inference(params);
    let e = enc.bind(&mut s);
    let len_logits = model::predict_length(&mut s, &e)?;
    let lengths: Vec<usize> = model::top_lengths(s.g.value(len_logits).data(), usize::MAX)
        .into_iter()
        .filter(|&n| n > 0)
        .take(cfg.length_beam)
        .collect();
    if lengths.is_empty() {
        return Err(Error::EmptyHypothesis("every candidate length is zero".into()));
    }
    mask_predict_lengths(params, enc, &lengths, cfg)
}

/// Mask-Predict at the given lengths.
pub fn mask_predict_lengths(
    params: &ModelParams,
    enc: &EncoderOutput,
    lengths: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    let mask = params.config.vocab().mask;
    let mut states: Vec<MaskState> = lengths.iter().map(|&n| MaskState::all_masked(n, mask)).collect();
    let mut predict = cmlm_predictor(params, enc);
    refine(
        &mut states,
        cfg.iterations,
        cfg.update_all,
        None,
        params.config.vocab_size,
        mask,
        &mut *predict,
    )?;
    Ok(finish(states, cfg.dedup))
}

fn finish(states: Vec<MaskState>, dedup_tokens: bool) -> Vec<Hypothesis> {
    states
        .into_iter()
        .map(|st| Hypothesis {
            nar_score: st.nar_score(),
            source_length: st.tokens.len(),
            tokens: if dedup_tokens { dedup(&st.tokens) } else { st.tokens },
            ar_score: None,
        })
        .collect()
}

/// Per-frame CTC log-probabilities `[U', V]` for one utterance.
pub fn ctc_log_probs(params: &ModelParams, enc: &EncoderOutput) -> Result<Vec<f64>> {
    single(enc)?;
    let mut s = Session::inference(params);
    let e = enc.bind(&mut s);
    let logits = model::ctc_logits(&mut s, &e)?;
    let v = params.config.vocab_size;
    let lp = log_softmax_rows(s.g.value(logits).data(), v)?;
    Ok(lp[..enc.lens[0] * v].to_vec())
}

/// Greedy CTC output refined by the CMLM decoder: low-confidence tokens
/// start masked and at most that many positions are ever re-masked.
pub fn ctc_cmlm_decode(params: &ModelParams, enc: &EncoderOutput, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let v = params.config.vocab_size;
    let vocab = params.config.vocab();
    let lp = ctc_log_probs(params, enc)?;
    let init = ctc_greedy_confidence(&lp, v, vocab.blank);
    if init.is_empty() {
        return Err(Error::EmptyHypothesis("greedy CTC output is empty".into()));
    }
    if !params.config.has_cmlm() {
        return Err(Error::Config("model has no CMLM decoder".into()));
    }
    let mut st = MaskState {
        tokens: init.iter().map(|&(t, _)| t).collect(),
        scores: init.iter().map(|&(_, p)| p.ln()).collect(),
        masked: vec![false; init.len()],
        t: 0,
    };
    // the CMLM decoder takes at most max_target_len positions; a longer CTC
    // output is returned unrefined
    let refinable = init.len() <= params.config.max_target_len;
    if !refinable {
        log::warn!("CTC output of {} tokens exceeds max_target_len; left unrefined", init.len());
    }
    for (i, &(_, p)) in init.iter().enumerate() {
        if refinable && (p < cfg.p_thres || cfg.p_thres >= 1.0) {
            st.tokens[i] = vocab.mask;
            st.scores[i] = f64::NEG_INFINITY;
            st.masked[i] = true;
        }
    }
    let m0 = st.n_masked();
    let mut states = vec![st];
    if m0 > 0 {
        let mut predict = cmlm_predictor(params, enc);
        refine(&mut states, cfg.iterations, cfg.update_all, Some(&[m0]), v, vocab.mask, &mut *predict)?;
    }
    Ok(finish(states, cfg.dedup).remove(0))
}

/// Mean AR log-probability per token (EOS included) of each sequence,
/// teacher-forced in one batched pass.
pub fn ar_scores(params: &ModelParams, enc: &EncoderOutput, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
    single(enc)?;
    if seqs.is_empty() {
        return Err(Error::Usage("no candidates to score".into()));
    }
    let vocab = params.config.vocab();
    let v = vocab.len();
    let (inputs, targets) = ar_io(&Padded::from_rows(seqs, vocab.pad), vocab.bos, vocab.eos, vocab.pad);
    let encs = enc.select(&vec![0; seqs.len()])?;
    let mut s = Session::inference(params);
    let e = encs.bind(&mut s);
    let logits = model::ar_forward(&mut s, &inputs.tokens, inputs.width, &inputs.lens, &e)?;
    let lp = log_softmax_rows(s.g.value(logits).data(), v)?;
    Ok((0..seqs.len())
        .map(|b| {
            let row = targets.row(b);
            let sum: f64 = row
                .iter()
                .enumerate()
                .map(|(i, &tok)| lp[(b * targets.width + i) * v + tok])
                .sum();
            sum / row.len() as f64
        })
        .collect())
}

/// Index of the best hypothesis under `key`; ties go to the shorter one,
/// then the lower index.
pub fn select_best(hyps: &[Hypothesis], key: impl Fn(&Hypothesis) -> f64) -> Result<usize> {
    if hyps.is_empty() {
        return Err(Error::Usage("no candidates to select from".into()));
    }
    let mut best = 0;
    for i in 1..hyps.len() {
        let (a, b) = (key(&hyps[i]), key(&hyps[best]));
        if a > b || (a == b && hyps[i].tokens.len() < hyps[best].tokens.len()) {
            best = i;
        }
    }
    Ok(best)
}

/// Scores every candidate with the AR decoder and picks the best by AR
/// score alone.
///
/// Candidates longer than `max_target_len` do not fit the AR decoder: they
/// keep `ar_score: None` and lose to any scored candidate. If none fits,
/// the NAR score decides.
pub fn parallel_rescore(
    params: &ModelParams,
    enc: &EncoderOutput,
    hyps: &[Hypothesis],
) -> Result<(usize, Vec<Hypothesis>)> {
    let max = params.config.max_target_len;
    let fits: Vec<usize> = (0..hyps.len()).filter(|&i| hyps[i].tokens.len() <= max).collect();
    if fits.is_empty() {
        if hyps.is_empty() {
            return Err(Error::Usage("no candidates to rescore".into()));
        }
        log::warn!("no candidate fits the AR decoder (max_target_len {max}); selecting by NAR score");
        return Ok((select_best(hyps, |h| h.nar_score)?, hyps.to_vec()));
    }
    let seqs: Vec<Vec<usize>> = fits.iter().map(|&i| hyps[i].tokens.clone()).collect();
    let scores = ar_scores(params, enc, &seqs)?;
    let mut scored = hyps.to_vec();
    for (&i, s) in fits.iter().zip(scores) {
        scored[i].ar_score = Some(s);
    }
    let best = select_best(&scored, |h| h.ar_score.unwrap_or(f64::NEG_INFINITY))?;
    Ok((best, scored))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArBeamResult {
    pub hyp: Hypothesis,
    /// False when no beam emitted EOS within the length limit.
    pub finished: bool,
}

/// Length-normalised beam search with the AR decoder. Each step re-runs the
/// decoder over the full prefixes of all live beams.
pub fn ar_beam(params: &ModelParams, enc: &EncoderOutput, beam: usize, max_len: usize) -> Result<ArBeamResult> {
    single(enc)?;
    if beam == 0 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    let vocab = params.config.vocab();
    let v = vocab.len();
    let max_len = max_len.min(params.config.max_target_len);
    let allowed: Vec<usize> = vocab.content_ids().into_iter().chain([vocab.eos]).collect();
    // (tokens after BOS, summed log-prob)
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
    for step in 0..=max_len {
        let n = step + 1;
        let inputs: Vec<usize> = live
            .iter()
            .flat_map(|(t, _)| std::iter::once(vocab.bos).chain(t.iter().copied()))
            .collect();
        let encs = enc.select(&vec![0; live.len()])?;
        let mut s = Session::inference(params);
        let e = encs.bind(&mut s);
        let logits = model::ar_forward(&mut s, &inputs, n, &vec![n; live.len()], &e)?;
        let data = s.g.value(logits).data();
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (_, score)) in live.iter().enumerate() {
            let at = (b * n + n - 1) * v;
            let lp = log_softmax_rows(&data[at..at + v], v)?;
            for &c in &allowed {
                cands.push((b, c, score + lp[c]));
            }
        }
        // stable sort: ties keep (beam, token) order
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next = Vec::new();
        for (b, c, score) in cands.into_iter().take(beam) {
            if c == vocab.eos {
                done.push((live[b].0.clone(), score));
            } else if step < max_len {
                let mut t = live[b].0.clone();
                t.push(c);
                next.push((t, score));
            }
        }
        if done.len() >= beam || next.is_empty() {
            break;
        }
        live = next;
    }
    let finished = !done.is_empty();
    let pool = if finished { done } else { live };
    let hyps: Vec<Hypothesis> = pool
        .into_iter()
        .map(|(tokens, score)| {
            let steps = tokens.len() + usize::from(finished);
            Hypothesis {
                nar_score: score / steps.max(1) as f64,
                source_length: tokens.len(),
                tokens,
                ar_score: None,
            }
        })
        .collect();
    let best = select_best(&hyps, |h| h.nar_score)?;
    if !finished {
        log::warn!("AR beam search reached {max_len} tokens without EOS");
    }
    Ok(ArBeamResult {
        hyp: hyps[best].clone(),
        finished,
    })
}

/// Wall-clock breakdown of one decode, in seconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTiming {
    pub search: f64,
    pub rescore: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub best: Hypothesis,
    pub candidates: Vec<Hypothesis>,
    pub finished: bool,
    pub timing: DecodeTiming,
}

/// Decodes one encoded utterance with `cfg.algorithm`.
pub fn decode(params: &ModelParams, enc: &EncoderOutput, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut finished = true;
    let candidates = match cfg.algorithm {
        Algorithm::ArBeam => {
            let r = ar_beam(params, enc, cfg.beam_width, cfg.max_len.unwrap_or(params.config.max_target_len))?;
            finished = r.finished;
            vec![r.hyp]
        }
        Algorithm::CtcGreedy => {
            let lp = ctc_log_probs(params, enc)?;
            let v = params.config.vocab_size;
            let tokens = ctc_greedy(&lp, v, params.config.vocab().blank);
            vec![Hypothesis {
                nar_score: best_path_logprob(&lp, v) / tokens.len().max(1) as f64,
                source_length: tokens.len(),
                tokens,
                ar_score: None,
            }]
        }
        Algorithm::CtcBeam => {
            let lp = ctc_log_probs(params, enc)?;
            ctc_prefix_beam(&lp, params.config.vocab_size, cfg.length_beam, params.config.vocab().blank)
        }
        Algorithm::MaskPredict => mask_predict(params, enc, cfg)?,
        Algorithm::CtcCmlm => vec![ctc_cmlm_decode(params, enc, cfg)?],
    };
    let search = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (best, candidates) = if cfg.rescore && cfg.algorithm != Algorithm::ArBeam {
        parallel_rescore(params, enc, &candidates)?
    } else {
        (select_best(&candidates, |h| h.nar_score)?, candidates)
    };
    let rescore = if cfg.rescore { start.elapsed().as_secs_f64() } else { 0.0 };
    Ok(DecodeOutput {
        best: candidates[best].clone(),
        candidates,
        finished,
        timing: DecodeTiming { search, rescore },
    })
}

/// One line of a decode output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: u64,
    pub hyp: Vec<usize>,
    pub nar_score: f64,
    pub ar_score: Option<f64>,
    pub n_candidates: usize,
    pub algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Hypothesis>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unfinished: bool,
}

/// Decodes every sample. The encoder runs in padded batches of
/// `encode_batch`, which does not change any output.
pub fn decode_dataset(
    params: &ModelParams,
    samples: &[Sample],
    cfg: &DecodeConfig,
    keep_candidates: bool,
    encode_batch: usize,
) -> Result<Vec<DecodeRecord>> {
    cfg.validate()?;
    let pad = params.config.vocab().pad;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(encode_batch.max(1)) {
        let batch = pad_batch(&chunk.iter().collect::<Vec<_>>(), pad)?;
        let enc = model::encode_frames(params, &batch.frames, &batch.frame_lens)?;
        for (i, sample) in chunk.iter().enumerate() {
            let one = trim(&enc.select(&[i])?);
            let r = decode(params, &one, cfg)?;
            out.push(DecodeRecord {
                id: sample.id,
                hyp: r.best.tokens.clone(),
                nar_score: r.best.nar_score,
                ar_score: r.best.ar_score,
                n_candidates: r.candidates.len(),
                algorithm: cfg.algorithm.name().into(),
                candidates: keep_candidates.then_some(r.candidates),
                unfinished: !r.finished,
            });
        }
    }
    Ok(out)
}

/// Drops padded frames from a single-utterance encoder output.
pub fn trim(enc: &EncoderOutput) -> EncoderOutput {
    let s = enc.states.shape();
    let (u, d) = (enc.lens[0], s[2]);
    if u == s[1] {
        return enc.clone();
    }
    EncoderOutput {
        states: crate::tensor::Array::new(vec![1, u, d], enc.states.data()[..u * d].to_vec()).expect("trimmed shape"),
        lens: enc.lens.clone(),
    }
}

pub fn write_records(records: &[DecodeRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<DecodeRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
