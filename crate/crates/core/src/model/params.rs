//! Named parameter storage, initialization and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ORTHCKPT"
//! version    u32      1
//! header_len u64
//! header     JSON     {"params": [{"name", "shape"}...], "model": ModelConfig}
//! payload    f64 × Σ numel, in header order
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{EncoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Array;

const MAGIC: &[u8; 8] = b"ORTHCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Array>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    model: ModelConfig,
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Bert,
    Zeros,
    Ones,
}

fn attention_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, init: Init) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{p}.w"), vec![d, d], init));
        out.push((format!("{prefix}.{p}.b"), vec![d], Init::Zeros));
    }
}

fn ln_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}.b"), vec![d], Init::Zeros));
}

fn ffn_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, dff: usize, init: Init) {
    out.push((format!("{prefix}.w1"), vec![d, dff], init));
    out.push((format!("{prefix}.b1"), vec![dff], Init::Zeros));
    out.push((format!("{prefix}.w2"), vec![dff, d], init));
    out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
}

fn transformer_block_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, cfg: &ModelConfig, init: Init) {
    let d = cfg.d_model;
    ln_shapes(out, &format!("{p}.ln_att"), d);
    attention_shapes(out, &format!("{p}.att"), d, init);
    ln_shapes(out, &format!("{p}.ln_ffn"), d);
    ffn_shapes(out, &format!("{p}.ffn"), d, cfg.d_ff, init);
}

fn decoder_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, blocks: usize, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for i in 0..blocks {
        let b = format!("{p}.{i}");
        ln_shapes(out, &format!("{b}.ln_self"), d);
        attention_shapes(out, &format!("{b}.self"), d, Init::Bert);
        ln_shapes(out, &format!("{b}.ln_cross"), d);
        attention_shapes(out, &format!("{b}.cross"), d, Init::Bert);
        ln_shapes(out, &format!("{b}.ln_ffn"), d);
        ffn_shapes(out, &format!("{b}.ffn"), d, cfg.d_ff, Init::Bert);
    }
    ln_shapes(out, &format!("{p}.ln_out"), d);
    out.push((format!("{p}.out.w"), vec![d, cfg.vocab_size], Init::Bert));
    out.push((format!("{p}.out.b"), vec![cfg.vocab_size], Init::Zeros));
}

/// Every parameter name, shape and initializer implied by `cfg`.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut out = Vec::new();
    out.push(("enc.sub.conv1.w".into(), vec![3 * cfg.frame_dim, d], Init::Xavier));
    out.push(("enc.sub.conv1.b".into(), vec![d], Init::Zeros));
    out.push(("enc.sub.conv2.w".into(), vec![3 * d, d], Init::Xavier));
    out.push(("enc.sub.conv2.b".into(), vec![d], Init::Zeros));
    for i in 0..cfg.n_enc_blocks {
        let p = format!("enc.{i}");
        match cfg.encoder_kind {
            EncoderKind::Transformer => transformer_block_shapes(&mut out, &p, cfg, Init::Xavier),
            EncoderKind::Conformer => {
                let h = cfg.n_heads;
                let dh = d / h;
                ln_shapes(&mut out, &format!("{p}.ln_ffn1"), d);
                ffn_shapes(&mut out, &format!("{p}.ffn1"), d, cfg.d_ff, Init::Xavier);
                ln_shapes(&mut out, &format!("{p}.ln_att"), d);
                attention_shapes(&mut out, &format!("{p}.att"), d, Init::Xavier);
                out.push((format!("{p}.att.pos.w"), vec![d, d], Init::Xavier));
                out.push((format!("{p}.att.pos_u"), vec![h, dh], Init::Bert));
                out.push((format!("{p}.att.pos_v"), vec![h, dh], Init::Bert));
                ln_shapes(&mut out, &format!("{p}.ln_conv"), d);
                out.push((format!("{p}.conv.pw1.w"), vec![d, 2 * d], Init::Xavier));
                out.push((format!("{p}.conv.pw1.b"), vec![2 * d], Init::Zeros));
                out.push((format!("{p}.conv.dw.k"), vec![cfg.conv_kernel, d], Init::Xavier));
                out.push((format!("{p}.conv.dw.b"), vec![d], Init::Zeros));
                ln_shapes(&mut out, &format!("{p}.conv.ln"), d);
                out.push((format!("{p}.conv.pw2.w"), vec![d, d], Init::Xavier));
                out.push((format!("{p}.conv.pw2.b"), vec![d], Init::Zeros));
                ln_shapes(&mut out, &format!("{p}.ln_ffn2"), d);
                ffn_shapes(&mut out, &format!("{p}.ffn2"), d, cfg.d_ff, Init::Xavier);
                ln_shapes(&mut out, &format!("{p}.ln_out"), d);
            }
        }
    }
    ln_shapes(&mut out, "enc.ln_out", d);
    if cfg.use_text_encoder {
        out.push(("text.embed".into(), vec![v, d], Init::Bert));
        for i in 0..cfg.n_text_blocks {
            transformer_block_shapes(&mut out, &format!("text.{i}"), cfg, Init::Xavier);
        }
        ln_shapes(&mut out, "text.ln_out", d);
    }
    if cfg.has_cmlm() || cfg.has_ar() {
        out.push(("dec.embed".into(), vec![v, d], Init::Bert));
    }
    if cfg.has_cmlm() {
        decoder_shapes(&mut out, "cmlm", cfg.n_dec_blocks, cfg);
    }
    if cfg.has_ar() {
        if cfg.has_cmlm() && !cfg.share_embeddings {
            out.push(("ar.embed".into(), vec![v, d], Init::Bert));
        }
        decoder_shapes(&mut out, "ar", cfg.n_ar_blocks, cfg);
    }
    if cfg.use_ctc_head {
        out.push(("ctc.w".into(), vec![d, v], Init::Xavier));
        out.push(("ctc.b".into(), vec![v], Init::Zeros));
    }
    if cfg.use_length_predictor {
        out.push(("len.w".into(), vec![d, cfg.max_target_len + 1], Init::Xavier));
        out.push(("len.b".into(), vec![cfg.max_target_len + 1], Init::Zeros));
    }
    out
}

impl ModelParams {
    /// Fresh parameters: Xavier-uniform for encoder-side projections,
    /// `N(0, 0.02)` for decoder weights and embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bert = Normal::new(0.0, 0.02).expect("valid normal");
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let arr = match init {
                    Init::Zeros => Array::zeros(&shape),
                    Init::Ones => Array::full(&shape, 1.0),
                    Init::Bert => Array::from_fn(&shape, |_| bert.sample(&mut rng)),
                    Init::Xavier => {
                        let fan_in = shape[0] as f64;
                        let fan_out = shape[1] as f64;
                        let a = (6.0 / (fan_in + fan_out)).sqrt();
                        Array::from_fn(&shape, |_| rng.gen_range(-a..a))
                    }
                };
                (name, arr)
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name:?}")))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|a| a.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            params: self
                .tensors
                .iter()
                .map(|(n, a)| ParamEntry {
                    name: n.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
            model: self.config.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for a in self.tensors.values() {
            for v in a.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: format!("{}: {msg}", path.display()),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(&e.to_string()))?;
        let mut off = hend;
        let mut tensors = BTreeMap::new();
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let end = off + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated payload"));
            }
            let data = bytes[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(entry.name, Array::new(entry.shape, data)?);
            off = end;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(ModelParams {
            config: header.model,
            tensors,
        })
    }

    /// Names whose shapes differ from `other`, plus names present in only one.
    pub fn mismatched_names(&self, other: &ModelParams) -> Vec<String> {
        let mut out: Vec<String> = self
            .tensors
            .iter()
            .filter(|(n, a)| other.tensors.get(*n).map(|b| b.shape() != a.shape()).unwrap_or(true))
            .map(|(n, _)| n.clone())
            .collect();
        out.extend(other.tensors.keys().filter(|n| !self.tensors.contains_key(*n)).cloned());
        out.sort();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent closed-form count for the desk-style layouts.
    fn closed_form_count(c: &ModelConfig) -> usize {
        let (d, f, v, k, dff, h) = (c.d_model, c.frame_dim, c.vocab_size, c.conv_kernel, c.d_ff, c.n_heads);
        let ln = 2 * d;
        let att = 4 * (d * d + d);
        let ffn = 2 * d * dff + dff + d;
        let frontend = 3 * f * d + d + 3 * d * d + d;
        let enc_block = match c.encoder_kind {
            EncoderKind::Transformer => 2 * ln + att + ffn,
            EncoderKind::Conformer => {
                5 * ln + 2 * ffn + att + d * d + 2 * d // rel-pos projection and biases (h * d/h = d)
                    + (2 * d * d + 2 * d) + (k * d + d) + ln + (d * d + d)
            }
        };
        let _ = h;
        let dec_block = 3 * ln + 2 * att + ffn;
        let dec = |n: usize| n * dec_block + ln + d * v + v;
        let mut total = frontend + c.n_enc_blocks * enc_block + ln;
        if c.use_text_encoder {
            total += v * d + c.n_text_blocks * (2 * ln + att + ffn) + ln;
        }
        if c.has_cmlm() || c.has_ar() {
            total += v * d;
        }
        if c.has_cmlm() {
            total += dec(c.n_dec_blocks);
        }
        if c.has_ar() {
            total += dec(c.n_ar_blocks);
            if c.has_cmlm() && !c.share_embeddings {
                total += v * d;
            }
        }
        if c.use_ctc_head {
            total += d * v + v;
        }
        if c.use_length_predictor {
            total += (d + 1) * (c.max_target_len + 1);
        }
        total
    }

    #[test]
    fn param_count_matches_closed_form() {
        for preset in ["ar_desk", "cmlm_desk", "ctc_desk", "orthros_cmlm_desk", "orthros_ctc_desk"] {
            let cfg = ModelConfig::preset(preset).unwrap();
            let p = ModelParams::init(&cfg, 0).unwrap();
            assert_eq!(p.num_params(), closed_form_count(&cfg), "{preset}");
        }
        let mut cfg = ModelConfig::preset("orthros_cmlm_desk").unwrap();
        cfg.encoder_kind = EncoderKind::Transformer;
        cfg.share_embeddings = false;
        let p = ModelParams::init(&cfg, 0).unwrap();
        assert_eq!(p.num_params(), closed_form_count(&cfg));
    }

    #[test]
    fn init_follows_scheme() {
        let cfg = ModelConfig::preset("orthros_cmlm_desk").unwrap();
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert!(p.get("cmlm.0.ln_self.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("cmlm.0.self.q.b").unwrap().data().iter().all(|&v| v == 0.0));
        let w = p.get("cmlm.0.ffn.w1").unwrap();
        let std = (w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 9).unwrap();
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(ModelParams::load(&path).is_err());
    }
}
