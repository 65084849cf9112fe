//! Synthetic frame-to-token translation corpus, dataset files and batching.
//!
//! Every source token owns a fixed random frame embedding. An utterance is
//! the source sentence rendered as frames (each token held for a random
//! number of frames, plus Gaussian noise) followed by trailing silence. The
//! target is a deterministic "translation": each token is mapped through a
//! fixed permutation, then adjacent pairs are swapped.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) with independent streams for
//! embeddings, the permutation and the samples, so a seed fully determines a
//! corpus on every platform.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;
use crate::vocab::Vocabulary;

pub const DEFAULT_FRAME_DIM: usize = 16;

const STREAM_EMBED: u64 = 0;
const STREAM_PERM: u64 = 1;
const STREAM_SAMPLES: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[U, F]`
    pub frames: Array,
    pub tgt: Vec<usize>,
    pub src: Vec<usize>,
}

impl Sample {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub vocab_size: usize,
    /// Inclusive source/target length range.
    pub len_range: (usize, usize),
    /// Inclusive range of frames per source token.
    pub repeat_range: (usize, usize),
    pub noise_std: f64,
    pub frame_dim: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            n_samples: 2000,
            vocab_size: 32,
            len_range: (3, 12),
            // wider ranges make the decoders' alignment too slow to learn in 10 epochs
            repeat_range: (10, 11),
            noise_std: 0.3,
            frame_dim: DEFAULT_FRAME_DIM,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size {} < 8", self.vocab_size)));
        }
        let (lo, hi) = self.len_range;
        if lo < 1 || hi > 64 || lo > hi {
            return Err(Error::Config(format!("len_range {lo}..={hi} outside [1, 64]")));
        }
        let (rlo, rhi) = self.repeat_range;
        if rlo < 1 || rlo > rhi {
            return Err(Error::Config(format!("repeat_range {rlo}..={rhi} needs min >= 1")));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || self.frame_dim == 0 {
            return Err(Error::Config("noise_std must be >= 0 and frame_dim > 0".into()));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Per-token frame embeddings `[vocab_size, frame_dim]`, standard normal.
pub fn token_embeddings(seed: u64, vocab_size: usize, frame_dim: usize) -> Array {
    let mut rng = stream(seed, STREAM_EMBED);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    Array::from_fn(&[vocab_size, frame_dim], |_| normal.sample(&mut rng))
}

/// Source-to-target token substitution table; special ids map to themselves.
pub fn target_permutation(seed: u64, vocab: &Vocabulary) -> Vec<usize> {
    let mut rng = stream(seed, STREAM_PERM);
    let content = vocab.content_ids();
    let mut shuffled = content.clone();
    shuffled.shuffle(&mut rng);
    let mut map: Vec<usize> = (0..vocab.len()).collect();
    for (&from, &to) in content.iter().zip(&shuffled) {
        map[from] = to;
    }
    map
}

/// Substitutes every token, then swaps each adjacent pair. A trailing
/// unpaired token is substituted but stays in place.
pub fn translate(src: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = src.iter().map(|&t| perm[t]).collect();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

fn adjacent_repeats(tokens: &[usize]) -> usize {
    tokens.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum frame count so the 4x-subsampled encoder still has room for a
/// CTC alignment of `tgt` (labels plus separating blanks for repeats).
pub fn min_frames(tgt: &[usize]) -> usize {
    4 * (tgt.len() + adjacent_repeats(tgt)) + 4
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let vocab = Vocabulary::with_size(cfg.vocab_size)?;
    let emb = token_embeddings(cfg.seed, cfg.vocab_size, cfg.frame_dim);
    let perm = target_permutation(cfg.seed, &vocab);
    let content = vocab.content_ids();
    let mut rng = stream(cfg.seed, STREAM_SAMPLES);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let f = cfg.frame_dim;

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for id in 0..cfg.n_samples {
        let n = rng.gen_range(cfg.len_range.0..=cfg.len_range.1);
        let src: Vec<usize> = (0..n).map(|_| content[rng.gen_range(0..content.len())]).collect();
        let tgt = translate(&src, &perm);
        let mut rows: Vec<f64> = Vec::new();
        for &tok in &src {
            let r = rng.gen_range(cfg.repeat_range.0..=cfg.repeat_range.1);
            for _ in 0..r {
                rows.extend_from_slice(emb.row(tok));
            }
        }
        let spoken = rows.len() / f;
        let total = spoken.max(min_frames(&tgt));
        rows.resize(total * f, 0.0);
        if cfg.noise_std > 0.0 {
            rows.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        samples.push(Sample {
            id: id as u64,
            frames: Array::new(vec![total, f], rows)?,
            tgt,
            src,
        });
    }
    Ok(samples)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: u64,
    frames: Vec<Vec<f64>>,
    tgt: Vec<usize>,
    src: Vec<usize>,
}

/// Writes one JSON object per line: `{"id", "frames", "tgt", "src"}`.
pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let frames = (0..s.num_frames()).map(|t| s.frames.row(t).to_vec()).collect();
        let rec = SampleRecord {
            id: s.id,
            frames,
            tgt: s.tgt.clone(),
            src: s.src.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let width = rec.frames.first().map_or(0, |r| r.len());
        if rec.frames.iter().any(|r| r.len() != width) {
            return Err(Error::Parse {
                line: lineno,
                msg: "ragged frame rows".into(),
            });
        }
        let u = rec.frames.len();
        let frames = Array::new(vec![u, width], rec.frames.into_iter().flatten().collect())?;
        out.push(Sample {
            id: rec.id,
            frames,
            tgt: rec.tgt,
            src: rec.src,
        });
    }
    Ok(out)
}

/// Padded mini-batch. Token matrices are row-major `[B, max_len]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<u64>,
    /// `[B, U_max, F]`, zero padded.
    pub frames: Array,
    pub frame_lens: Vec<usize>,
    pub tgt: Vec<usize>,
    pub tgt_max: usize,
    pub tgt_lens: Vec<usize>,
    pub src: Vec<usize>,
    pub src_max: usize,
    pub src_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frame_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_lens.is_empty()
    }

    pub fn tgt_row(&self, b: usize) -> &[usize] {
        &self.tgt[b * self.tgt_max..b * self.tgt_max + self.tgt_lens[b]]
    }

    pub fn src_row(&self, b: usize) -> &[usize] {
        &self.src[b * self.src_max..b * self.src_max + self.src_lens[b]]
    }
}

fn pad_tokens(rows: &[&[usize]], pad: usize) -> (Vec<usize>, usize, Vec<usize>) {
    let max = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(rows.len() * max);
    for r in rows {
        flat.extend_from_slice(r);
        flat.extend(std::iter::repeat_n(pad, max - r.len()));
    }
    (flat, max, rows.iter().map(|r| r.len()).collect())
}

pub fn pad_batch(samples: &[&Sample], pad_id: usize) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("cannot batch an empty sample list".into()))?;
    let f = first.frames.shape()[1];
    if let Some(bad) = samples.iter().find(|s| s.frames.shape()[1] != f) {
        return Err(Error::shape("pad_batch", first.frames.shape(), bad.frames.shape()));
    }
    let u_max = samples.iter().map(|s| s.num_frames()).max().unwrap_or(0);
    let mut frames = vec![0.0; samples.len() * u_max * f];
    for (b, s) in samples.iter().enumerate() {
        let off = b * u_max * f;
        frames[off..off + s.frames.len()].copy_from_slice(s.frames.data());
    }
    let tgt_rows: Vec<&[usize]> = samples.iter().map(|s| s.tgt.as_slice()).collect();
    let src_rows: Vec<&[usize]> = samples.iter().map(|s| s.src.as_slice()).collect();
    let (tgt, tgt_max, tgt_lens) = pad_tokens(&tgt_rows, pad_id);
    let (src, src_max, src_lens) = pad_tokens(&src_rows, pad_id);
    Ok(Batch {
        ids: samples.iter().map(|s| s.id).collect(),
        frames: Array::new(vec![samples.len(), u_max, f], frames)?,
        frame_lens: samples.iter().map(|s| s.num_frames()).collect(),
        tgt,
        tgt_max,
        tgt_lens,
        src,
        src_max,
        src_lens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            seed: 3,
            n_samples: 40,
            vocab_size: 12,
            len_range: (1, 9),
            repeat_range: (1, 3),
            noise_std: 0.2,
            frame_dim: 4,
        }
    }

    #[test]
    fn translate_substitutes_then_swaps_pairs() {
        let mut perm: Vec<usize> = (0..10).collect();
        perm[5] = 8; // a -> alpha
        perm[6] = 9; // b -> beta
        assert_eq!(translate(&[5, 6], &perm), vec![9, 8]);
        assert_eq!(translate(&[5, 6, 5], &perm), vec![9, 8, 8]);
        assert_eq!(translate(&[], &perm), Vec::<usize>::new());
    }

    #[test]
    fn noiseless_single_repeat_frames_are_embeddings() {
        let cfg = CorpusConfig {
            noise_std: 0.0,
            repeat_range: (1, 1),
            ..small_cfg()
        };
        let emb = token_embeddings(cfg.seed, cfg.vocab_size, cfg.frame_dim);
        for s in gen_corpus(&cfg).unwrap() {
            for (t, &tok) in s.src.iter().enumerate() {
                assert_eq!(s.frames.row(t), emb.row(tok));
            }
            // the rest is silence that only pads up to the CTC-safe minimum
            for t in s.src.len()..s.num_frames() {
                assert!(s.frames.row(t).iter().all(|&v| v == 0.0));
            }
            assert_eq!(s.num_frames(), min_frames(&s.tgt));
        }
    }

    #[test]
    fn generation_is_deterministic_and_respects_frame_margin() {
        let a = gen_corpus(&small_cfg()).unwrap();
        let b = gen_corpus(&small_cfg()).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.num_frames() >= 4 * s.tgt.len() + 4);
            assert_eq!(s.src.len(), s.tgt.len());
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = small_cfg();
        c.repeat_range = (0, 2);
        assert!(matches!(gen_corpus(&c), Err(Error::Config(_))));
        let mut c = small_cfg();
        c.vocab_size = 7;
        assert!(gen_corpus(&c).is_err());
        let mut c = small_cfg();
        c.len_range = (1, 65);
        assert!(gen_corpus(&c).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let samples = gen_corpus(&small_cfg()).unwrap();
        save_dataset(&samples, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), samples);

        save_dataset(&[], &p).unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());

        save_dataset(&samples[..3], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, &text[..text.len() - 40]).unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn padding() {
        let samples = gen_corpus(&small_cfg()).unwrap();
        let one = pad_batch(&[&samples[0]], 1).unwrap();
        assert_eq!(one.tgt, samples[0].tgt);
        assert_eq!(one.frames.data(), samples[0].frames.data());

        let mut a = samples[0].clone();
        a.tgt = vec![5, 6];
        let mut b = samples[1].clone();
        b.tgt = vec![5, 6, 7, 8, 9];
        let batch = pad_batch(&[&a, &b], 1).unwrap();
        assert_eq!(batch.tgt_max, 5);
        assert_eq!(&batch.tgt[..5], &[5, 6, 1, 1, 1]);
        assert_eq!(batch.tgt_row(0), &[5, 6]);
        assert_eq!(batch.tgt_lens, vec![2, 5]);
        assert!(matches!(pad_batch(&[], 1), Err(Error::Usage(_))));
    }
}
