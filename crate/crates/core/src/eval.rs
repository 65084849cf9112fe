//! BLEU over token-id sequences, exact match, and oracle selection.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::DecodeRecord;
use crate::error::{Error, Result};

const MAX_N: usize = 4;
/// Stand-in for a zero n-gram precision in sentence BLEU.
pub const SENTENCE_EPS: f64 = 1e-9;

/// Matched and total n-gram counts for orders 1..=4, plus lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_N],
    pub totals: [usize; MAX_N],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of(hyp: &[usize], reference: &[usize]) -> BleuStats {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..BleuStats::default()
        };
        for n in 1..=MAX_N {
            let mut counts: HashMap<&[usize], usize> = HashMap::new();
            for g in reference.windows(n) {
                *counts.entry(g).or_default() += 1;
            }
            for g in hyp.windows(n) {
                if let Some(c) = counts.get_mut(g) {
                    if *c > 0 {
                        *c -= 1;
                        s.matches[n - 1] += 1;
                    }
                }
            }
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_N {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU in `[0, 100]`. With `eps`, zero-match orders count as `eps`
    /// instead of zeroing the score.
    pub fn score(&self, eps: Option<f64>) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_p = 0.0;
        for n in 0..MAX_N {
            let p = if self.matches[n] == 0 {
                match eps {
                    Some(e) => e,
                    None => return 0.0,
                }
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_p += p.ln() / MAX_N as f64;
        }
        let bp = if self.hyp_len >= self.ref_len {
            0.0
        } else {
            1.0 - self.ref_len as f64 / self.hyp_len as f64
        };
        100.0 * (bp + log_p).exp()
    }
}

fn check_refs(refs: &[Vec<usize>]) -> Result<()> {
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::Usage("empty reference".into()));
    }
    Ok(())
}

/// Corpus BLEU (n ≤ 4, unsmoothed) with the brevity penalty over summed
/// lengths.
pub fn bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() != refs.len() || refs.is_empty() {
        return Err(Error::Usage(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    check_refs(refs)?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::of(h, r));
    }
    Ok(total.score(None))
}

/// Sentence BLEU with zero precisions replaced by [`SENTENCE_EPS`].
pub fn sentence_bleu(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    check_refs(std::slice::from_ref(&reference.to_vec()))?;
    Ok(BleuStats::of(hyp, reference).score(Some(SENTENCE_EPS)))
}

pub fn exact_match(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    hits as f64 / refs.len().max(1) as f64
}

/// Per sentence, the candidate with the highest sentence BLEU against the
/// reference (ties to the lower index); returns the picks and their corpus
/// BLEU.
pub fn oracle_select(candidates: &[Vec<Vec<usize>>], refs: &[Vec<usize>]) -> Result<(Vec<usize>, f64)> {
    if candidates.len() != refs.len() {
        return Err(Error::Usage("candidate lists and references differ in number".into()));
    }
    let mut picks = Vec::with_capacity(refs.len());
    for (cands, r) in candidates.iter().zip(refs) {
        if cands.is_empty() {
            return Err(Error::Usage("empty candidate list".into()));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in cands.iter().enumerate() {
            let s = sentence_bleu(c, r)?;
            if s > best.1 {
                best = (i, s);
            }
        }
        picks.push(best.0);
    }
    let chosen: Vec<Vec<usize>> = picks.iter().zip(candidates).map(|(&i, c)| c[i].clone()).collect();
    let score = bleu(&chosen, refs)?;
    Ok((picks, score))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: u64,
    pub hyp: Vec<usize>,
    #[serde(rename = "ref")]
    pub reference: Vec<usize>,
    pub sentence_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_bleu: f64,
    pub exact_match: f64,
    /// Present when the decode output kept its candidate lists.
    pub oracle_bleu: Option<f64>,
    pub sentences: Vec<SentenceRecord>,
}

/// Scores decode records against references keyed by sample id.
pub fn evaluate(records: &[DecodeRecord], refs: &BTreeMap<u64, Vec<usize>>) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Usage("no hypotheses to evaluate".into()));
    }
    let gold: Vec<Vec<usize>> = records
        .iter()
        .map(|r| {
            refs.get(&r.id)
                .cloned()
                .ok_or_else(|| Error::Usage(format!("no reference for id {}", r.id)))
        })
        .collect::<Result<_>>()?;
    let hyps: Vec<Vec<usize>> = records.iter().map(|r| r.hyp.clone()).collect();
    let corpus_bleu = bleu(&hyps, &gold)?;
    let oracle_bleu = if records.iter().all(|r| r.candidates.is_some()) {
        let cands: Vec<Vec<Vec<usize>>> = records
            .iter()
            .map(|r| r.candidates.as_ref().expect("checked").iter().map(|h| h.tokens.clone()).collect())
            .collect();
        Some(oracle_select(&cands, &gold)?.1)
    } else {
        None
    };
    let sentences = records
        .iter()
        .zip(&gold)
        .map(|(r, g)| {
            Ok(SentenceRecord {
                id: r.id,
                hyp: r.hyp.clone(),
                reference: g.clone(),
                sentence_bleu: sentence_bleu(&r.hyp, g)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        corpus_bleu,
        exact_match: exact_match(&hyps, &gold),
        oracle_bleu,
        sentences,
    })
}

fn join(t: &[usize]) -> String {
    t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `id,hyp,ref,sentence_bleu` with space-separated token ids.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,hyp,ref,sentence_bleu")?;
        for s in &self.sentences {
            writeln!(f, "{},{},{},{}", s.id, join(&s.hyp), join(&s.reference), s.sentence_bleu)?;
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![vec![5, 6, 7, 8], vec![9, 9, 5, 6, 7]];
        assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
        assert!((sentence_bleu(&refs[0], &refs[0]).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_overlap_scores_zero() {
        assert_eq!(bleu(&[vec![1, 2, 3, 4]], &[vec![5, 6, 7, 8]]).unwrap(), 0.0);
        assert!(sentence_bleu(&[1, 2, 3, 4], &[5, 6, 7, 8]).unwrap() < 1e-6);
        assert_eq!(bleu(&[vec![]], &[vec![5]]).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_example() {
        // unigram 3/3, bigram 2/2, trigram 1/1, no 4-grams; BP = e^(1 - 4/3)
        let s = BleuStats::of(&[1, 2, 3], &[1, 2, 3, 4]);
        assert_eq!(s.matches, [3, 2, 1, 0]);
        assert_eq!(s.totals, [3, 2, 1, 0]);
        let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp() * SENTENCE_EPS.powf(0.25);
        assert!((sentence_bleu(&[1, 2, 3], &[1, 2, 3, 4]).unwrap() - want).abs() < 1e-12);
        assert_eq!(bleu(&[vec![1, 2, 3]], &[vec![1, 2, 3, 4]]).unwrap(), 0.0);
    }

    #[test]
    fn clipped_counts() {
        // "the the the the" vs "the cat": unigram matches clip to 1
        let s = BleuStats::of(&[7, 7, 7, 7], &[7, 8]);
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.totals[0], 4);
    }

    #[test]
    fn brevity_penalty_from_corpus_lengths() {
        let refs = vec![vec![1, 2, 3, 4, 5, 6], vec![1, 2, 3, 4, 5, 6]];
        let hyps = vec![vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5, 6]];
        let p: [f64; 4] = [11.0 / 11.0, 9.0 / 9.0, 7.0 / 7.0, 5.0 / 5.0];
        let want = 100.0 * (1.0 - 12.0 / 11.0f64).exp() * p.iter().product::<f64>();
        assert!((bleu(&hyps, &refs).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(bleu(&[vec![1]], &[vec![]]), Err(Error::Usage(_))));
        assert!(matches!(bleu(&[vec![1]], &[]), Err(Error::Usage(_))));
        assert!(matches!(sentence_bleu(&[1], &[]), Err(Error::Usage(_))));
        assert!(matches!(oracle_select(&[vec![]], &[vec![1]]), Err(Error::Usage(_))));
    }

    fn seqs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
        use rand::Rng;
        (0..n)
            .map(|_| (0..rng.gen_range(1..10)).map(|_| rng.gen_range(5..9)).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn corpus_bleu_is_order_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs = seqs(&mut rng, 6);
            let hyps = seqs(&mut rng, 6);
            let mut idx: Vec<usize> = (0..6).collect();
            idx.shuffle(&mut rng);
            let (h2, r2): (Vec<_>, Vec<_>) = idx.iter().map(|&i| (hyps[i].clone(), refs[i].clone())).unzip();
            let (a, b) = (bleu(&hyps, &refs).unwrap(), bleu(&h2, &r2).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
        }

        #[test]
        fn oracle_is_monotone(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs = seqs(&mut rng, 4);
            let base: Vec<Vec<Vec<usize>>> = (0..4).map(|_| seqs(&mut rng, 2)).collect();
            let extra: Vec<Vec<Vec<usize>>> = base.iter().map(|c| {
                let mut c = c.clone();
                c.extend(seqs(&mut rng, 2));
                c
            }).collect();
            let (p1, _) = oracle_select(&base, &refs).unwrap();
            let (p2, _) = oracle_select(&extra, &refs).unwrap();
            for i in 0..4 {
                let s1 = sentence_bleu(&base[i][p1[i]], &refs[i]).unwrap();
                let s2 = sentence_bleu(&extra[i][p2[i]], &refs[i]).unwrap();
                prop_assert!(s2 >= s1);
            }
        }
    }

    #[test]
    fn single_candidate_oracle_is_corpus_bleu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs = seqs(&mut rng, 5);
        let hyps = seqs(&mut rng, 5);
        let cands: Vec<Vec<Vec<usize>>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        assert_eq!(oracle_select(&cands, &refs).unwrap().1, bleu(&hyps, &refs).unwrap());
    }

    #[test]
    fn report_files() {
        use crate::decode::{DecodeRecord, Hypothesis};
        let rec = |id, hyp: Vec<usize>, alt: Vec<usize>| DecodeRecord {
            id,
            hyp: hyp.clone(),
            nar_score: -0.1,
            ar_score: None,
            n_candidates: 2,
            algorithm: "mask_predict".into(),
            candidates: Some(
                [hyp, alt]
                    .into_iter()
                    .map(|t| Hypothesis {
                        source_length: t.len(),
                        tokens: t,
                        nar_score: 0.0,
                        ar_score: None,
                    })
                    .collect(),
            ),
            unfinished: false,
        };
        let records = vec![rec(1, vec![5, 6, 7, 8], vec![5, 6, 7, 9]), rec(2, vec![5, 5], vec![6, 7, 8, 9])];
        let refs: BTreeMap<u64, Vec<usize>> = [(1, vec![5, 6, 7, 9]), (2, vec![6, 7, 8, 9])].into();
        let r = evaluate(&records, &refs).unwrap();
        assert_eq!(r.exact_match, 0.0);
        assert_eq!(r.oracle_bleu, Some(100.0));
        assert!(r.corpus_bleu < 100.0);
        let dir = tempfile::tempdir().unwrap();
        r.save_json(&dir.path().join("r.json")).unwrap();
        let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        r.save_csv(&dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("1,5 6 7 8,5 6 7 9,"));
        assert!(matches!(evaluate(&records, &BTreeMap::new()), Err(Error::Usage(_))));
    }
}
