//! Shared speech encoder with CMLM, AR, CTC and length-prediction heads.

mod config;
mod layers;
mod params;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{EncoderKind, ModelConfig};
pub use params::ModelParams;

use crate::autograd::{Gradients, Graph, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::Array;

/// One forward (and optionally backward) pass over a model.
///
/// Parameters are bound lazily into the graph by name, so only the
/// components a pass actually touches receive gradients.
pub struct Session<'p> {
    pub g: Graph<'p>,
    params: &'p ModelParams,
    bound: HashMap<&'p str, Var>,
    requires_grad: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'p> Session<'p> {
    /// Evaluation pass: no dropout, no gradient tracking.
    pub fn inference(params: &'p ModelParams) -> Self {
        Session {
            g: Graph::new(),
            params,
            bound: HashMap::new(),
            requires_grad: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training pass with the configured dropout, seeded for reproducibility.
    pub fn training(params: &'p ModelParams, seed: u64) -> Self {
        Session {
            g: Graph::new(),
            params,
            bound: HashMap::new(),
            requires_grad: true,
            dropout: params.config.dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Gradient-tracking pass with dropout disabled; for gradient checks.
    pub fn differentiable(params: &'p ModelParams) -> Self {
        Session {
            requires_grad: true,
            ..Self::inference(params)
        }
    }

    pub fn config(&self) -> &'p ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, value) = self
            .params
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name:?}")))?;
        let v = self.g.borrowed(value, self.requires_grad);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub(crate) fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.dropout;
        self.g.dropout(x, rate, &mut self.rng)
    }

    /// Back-propagates from `loss` and returns gradients keyed by parameter
    /// name for every parameter the pass used.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Array>> {
        let mut grads: Gradients = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.to_string(), g)))
            .collect())
    }
}

/// Encoder states as plain arrays, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[B, U', d_model]`, zero at padded frames.
    pub states: Array,
    /// Valid subsampled frames per batch row.
    pub lens: Vec<usize>,
}

impl EncoderOutput {
    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    /// Rows `idx` of the batch (repetition allowed).
    pub fn select(&self, idx: &[usize]) -> Result<EncoderOutput> {
        let s = self.states.shape();
        let inner = s[1] * s[2];
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= s[0] {
                return Err(Error::shape("EncoderOutput::select", s, idx));
            }
            data.extend_from_slice(&self.states.data()[i * inner..(i + 1) * inner]);
        }
        Ok(EncoderOutput {
            states: Array::new(vec![idx.len(), s[1], s[2]], data)?,
            lens: idx.iter().map(|&i| self.lens[i]).collect(),
        })
    }

    pub fn bind(&self, s: &mut Session<'_>) -> Encoded {
        Encoded {
            states: s.g.constant(self.states.clone()),
            lens: self.lens.clone(),
        }
    }
}

/// Encoder states inside a session graph.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    pub lens: Vec<usize>,
}

impl Encoded {
    pub fn key_valid(&self, s: &Session<'_>) -> Vec<Vec<bool>> {
        let m = s.g.shape(self.states)[1];
        self.lens.iter().map(|&l| (0..m).map(|j| j < l).collect()).collect()
    }

    pub fn to_output(&self, s: &Session<'_>) -> EncoderOutput {
        EncoderOutput {
            states: s.g.value(self.states).clone(),
            lens: self.lens.clone(),
        }
    }
}

/// Valid length after one stride-2 convolution stage.
fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Valid encoder length for `frames` input frames (four-fold reduction).
pub fn subsampled_len(frames: usize) -> usize {
    halve(halve(frames))
}

fn time_mask(b: usize, u: usize, d: usize, lens: &[usize]) -> Array {
    Array::from_fn(&[b, u, d], |i| {
        let row = i / (u * d);
        let t = (i / d) % u;
        if t < lens[row] {
            1.0
        } else {
            0.0
        }
    })
}

/// Sinusoidal encoding for positions `positions`, `[len, d]`.
pub(crate) fn sinusoid(positions: impl Iterator<Item = f64>, d: usize) -> Array {
    let rows: Vec<f64> = positions
        .flat_map(|p| {
            (0..d).map(move |j| {
                let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                if j % 2 == 0 {
                    (p * freq).sin()
                } else {
                    (p * freq).cos()
                }
            })
        })
        .collect();
    let n = rows.len() / d.max(1);
    Array::new(vec![n, d], rows).expect("sinusoid shape")
}

fn tiled_positions(b: usize, n: usize, d: usize) -> Array {
    let pe = sinusoid((0..n).map(|p| p as f64), d);
    let mut data = Vec::with_capacity(b * n * d);
    for _ in 0..b {
        data.extend_from_slice(pe.data());
    }
    Array::new(vec![b, n, d], data).expect("pe shape")
}

/// Two stride-2 convolution stages, `[B,U,F] -> [B,U',d]`, masked at padding.
pub fn subsample(s: &mut Session<'_>, frames: &Array, frame_lens: &[usize]) -> Result<Encoded> {
    let cfg = s.config();
    let fs = frames.shape();
    if fs.len() != 3 || fs[0] != frame_lens.len() || fs[2] != cfg.frame_dim {
        return Err(Error::shape("encode_speech", fs, &[frame_lens.len(), cfg.frame_dim]));
    }
    if fs[1] == 0 || frame_lens.contains(&0) {
        return Err(Error::InputTooShort("utterance has no frames".into()));
    }
    let (b, d) = (fs[0], cfg.d_model);
    let x = s.g.constant(frames.clone());
    let mut h = x;
    let mut lens = frame_lens.to_vec();
    for stage in ["conv1", "conv2"] {
        let u = s.g.unfold_time(h, 3, 2)?;
        let w = s.param(&format!("enc.sub.{stage}.w"))?;
        let bias = s.param(&format!("enc.sub.{stage}.b"))?;
        let y = s.g.affine(u, w, bias)?;
        let y = s.g.silu(y);
        lens.iter_mut().for_each(|l| *l = halve(*l));
        let un = s.g.shape(y)[1];
        h = s.g.mul_const(y, &time_mask(b, un, d, &lens))?;
    }
    Ok(Encoded { states: h, lens })
}

/// Speech encoder: subsampling frontend, Transformer or Conformer blocks,
/// final layer norm; output zeroed at padded frames.
pub fn encode_speech(s: &mut Session<'_>, frames: &Array, frame_lens: &[usize]) -> Result<Encoded> {
    let cfg = s.config();
    let sub = subsample(s, frames, frame_lens)?;
    let lens = sub.lens;
    let mut h = sub.states;
    let (b, u, d) = {
        let sh = s.g.shape(h);
        (sh[0], sh[1], sh[2])
    };
    let enc = Encoded {
        states: h,
        lens: lens.clone(),
    };
    let key_valid = enc.key_valid(s);
    let mask = time_mask(b, u, d, &lens);
    if cfg.encoder_kind == EncoderKind::Transformer {
        let pe = s.g.constant(tiled_positions(b, u, d));
        h = s.g.add(h, pe)?;
    }
    h = s.dropout(h)?;
    for i in 0..cfg.n_enc_blocks {
        let p = format!("enc.{i}");
        h = match cfg.encoder_kind {
            EncoderKind::Transformer => layers::transformer_block(s, &p, h, &key_valid)?,
            EncoderKind::Conformer => layers::conformer_block(s, &p, h, &key_valid, &mask)?,
        };
    }
    let h = layers::layer_norm(s, "enc.ln_out", h)?;
    let states = s.g.mul_const(h, &mask)?;
    Ok(Encoded { states, lens })
}

pub fn encode_batch(s: &mut Session<'_>, batch: &Batch) -> Result<Encoded> {
    encode_speech(s, &batch.frames, &batch.frame_lens)
}

/// Text encoder over source transcriptions `tokens[B, n]` (row-major).
pub fn encode_text(s: &mut Session<'_>, tokens: &[usize], n: usize, lens: &[usize]) -> Result<Encoded> {
    let cfg = s.config();
    if !cfg.use_text_encoder {
        return Err(Error::Config("text encoder is disabled".into()));
    }
    let b = lens.len();
    if tokens.len() != b * n || lens.iter().any(|&l| l == 0 || l > n) {
        return Err(Error::shape("encode_text", &[tokens.len()], &[b, n]));
    }
    let d = cfg.d_model;
    let table = s.param("text.embed")?;
    let e = s.g.embedding(table, tokens, &[b, n])?;
    let e = s.g.scale(e, (d as f64).sqrt());
    let pe = s.g.constant(tiled_positions(b, n, d));
    let mut h = s.g.add(e, pe)?;
    h = s.dropout(h)?;
    let key_valid: Vec<Vec<bool>> = lens.iter().map(|&l| (0..n).map(|j| j < l).collect()).collect();
    for i in 0..cfg.n_text_blocks {
        h = layers::transformer_block(s, &format!("text.{i}"), h, &key_valid)?;
    }
    let h = layers::layer_norm(s, "text.ln_out", h)?;
    let states = s.g.mul_const(h, &time_mask(b, n, d, lens))?;
    Ok(Encoded {
        states,
        lens: lens.to_vec(),
    })
}

/// CMLM decoder logits `[B, n, V]` for `tokens[B, n]` that may contain the
/// mask id anywhere. Self-attention is bidirectional over valid positions.
pub fn cmlm_forward(
    s: &mut Session<'_>,
    tokens: &[usize],
    n: usize,
    lens: &[usize],
    enc: &Encoded,
) -> Result<Var> {
    let cfg = s.config();
    if !cfg.has_cmlm() {
        return Err(Error::Config("model has no CMLM decoder".into()));
    }
    if n > cfg.max_target_len {
        return Err(Error::Length(format!("decoder length {n} exceeds max_target_len {}", cfg.max_target_len)));
    }
    layers::decoder(s, "cmlm", "dec.embed", cfg.n_dec_blocks, tokens, n, lens, enc, false)
}

/// AR decoder logits `[B, n, V]` under teacher forcing. Each row of `inputs`
/// starts with the BOS id; position `i` only sees inputs `<= i`.
pub fn ar_forward(
    s: &mut Session<'_>,
    inputs: &[usize],
    n: usize,
    lens: &[usize],
    enc: &Encoded,
) -> Result<Var> {
    let cfg = s.config();
    if !cfg.has_ar() {
        return Err(Error::Config("model has no AR decoder".into()));
    }
    let bos = cfg.vocab().bos;
    if n == 0 || inputs.chunks(n).any(|row| row[0] != bos) {
        return Err(Error::Usage("AR decoder input must begin with BOS".into()));
    }
    if n > cfg.max_target_len + 1 {
        return Err(Error::Length(format!("AR input length {n} exceeds max_target_len + 1")));
    }
    let table = if cfg.has_cmlm() && !cfg.share_embeddings {
        "ar.embed"
    } else {
        "dec.embed"
    };
    layers::decoder(s, "ar", table, cfg.n_ar_blocks, inputs, n, lens, enc, true)
}

/// Linear CTC projection `[B, U', V]`; class 0 is the blank.
pub fn ctc_logits(s: &mut Session<'_>, enc: &Encoded) -> Result<Var> {
    if !s.config().use_ctc_head {
        return Err(Error::Config("CTC head is disabled".into()));
    }
    let w = s.param("ctc.w")?;
    let b = s.param("ctc.b")?;
    s.g.affine(enc.states, w, b)
}

/// Length classifier over time-averaged valid encoder states, `[B, L_max+1]`.
pub fn predict_length(s: &mut Session<'_>, enc: &Encoded) -> Result<Var> {
    if !s.config().use_length_predictor {
        return Err(Error::Config("length predictor is disabled".into()));
    }
    let mean = s.g.masked_mean_time(enc.states, &enc.lens)?;
    let w = s.param("len.w")?;
    let b = s.param("len.b")?;
    s.g.affine(mean, w, b)
}

/// The `l` highest-scoring length classes, best first; ties go to the
/// smaller length.
pub fn top_lengths(logits: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(l);
    idx
}

/// Runs the encoder alone and detaches the result.
pub fn encode_frames(params: &ModelParams, frames: &Array, frame_lens: &[usize]) -> Result<EncoderOutput> {
    let mut s = Session::inference(params);
    let enc = encode_speech(&mut s, frames, frame_lens)?;
    Ok(enc.to_output(&s))
}
