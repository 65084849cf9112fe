use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{gen_corpus, CorpusConfig};
use crate::model::ModelConfig;
use crate::tensor::Array;

fn tiny() -> ModelParams {
    ModelParams::init(&ModelConfig::tiny(), 21).unwrap()
}

fn samples() -> Vec<Sample> {
    gen_corpus(&CorpusConfig {
        seed: 5,
        n_samples: 3,
        vocab_size: 10,
        len_range: (3, 6),
        repeat_range: (2, 4),
        noise_std: 0.1,
        frame_dim: 4,
    })
    .unwrap()
}

fn encoded(p: &ModelParams, s: &Sample) -> EncoderOutput {
    let b = pad_batch(&[s], 1).unwrap();
    model::encode_frames(p, &b.frames, &b.frame_lens).unwrap()
}

fn ln_rows(probs: &[&[f64]]) -> Vec<f64> {
    probs.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect()
}

#[test]
fn schedule_examples() {
    assert_eq!(mask_schedule(10, 10, 1).unwrap(), 9);
    assert_eq!(mask_schedule(10, 10, 5).unwrap(), 5);
    assert_eq!(mask_schedule(10, 10, 10).unwrap(), 0);
    assert_eq!(mask_schedule(7, 1, 1).unwrap(), 0);
    assert!((1..=4).all(|t| mask_schedule(0, 4, t).unwrap() == 0));
    assert!(matches!(mask_schedule(3, 4, 0), Err(Error::Usage(_))));
    assert!(matches!(mask_schedule(3, 4, 5), Err(Error::Usage(_))));
}

#[test]
fn dedup_examples() {
    assert_eq!(dedup(&[7, 7, 3, 3, 3, 9]), vec![7, 3, 9]);
    assert_eq!(dedup(&[]), Vec::<usize>::new());
}

proptest! {
    #[test]
    fn dedup_is_idempotent(x in proptest::collection::vec(0usize..4, 0..20)) {
        let once = dedup(&x);
        prop_assert_eq!(dedup(&once), once.clone());
        prop_assert!(once.windows(2).all(|w| w[0] != w[1]));
    }
}

#[test]
fn refine_matches_manual_trace() {
    // vocab {0, 1, 2, mask=3}; the table depends on whether position 1 is observed
    let first: &[&[f64]] = &[&[0.7, 0.2, 0.1, 0.0], &[0.1, 0.5, 0.4, 0.0], &[0.05, 0.05, 0.9, 0.0]];
    let second: &[&[f64]] = &[&[0.7, 0.2, 0.1, 0.0], &[0.1, 0.3, 0.6, 0.0], &[0.05, 0.05, 0.9, 0.0]];
    let mut calls = Vec::new();
    let mut predict = |rows: &[Vec<usize>]| -> Result<Vec<Vec<f64>>> {
        calls.push(rows[0].clone());
        let t = if calls.len() == 1 { first } else { second };
        Ok(vec![ln_rows(t)])
    };
    let mut st = vec![MaskState::all_masked(3, 3)];
    refine(&mut st, 2, false, None, 4, 3, &mut predict).unwrap();
    // t=1: predict [0, 1, 2] with scores (.7, .5, .9); k(1) = ⌊3·1/2⌋ = 1 masks position 1
    // t=2: position 1 re-predicted as 2 with score .6
    assert_eq!(calls, vec![vec![3, 3, 3], vec![0, 3, 2]]);
    assert_eq!(st[0].tokens, vec![0, 2, 2]);
    let want = [0.7f64.ln(), 0.6f64.ln(), 0.9f64.ln()];
    assert!(st[0].scores.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
    assert_eq!(st[0].t, 2);
}

#[test]
fn refine_masks_exactly_the_schedule() {
    let v = 6;
    let mask = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table: Vec<f64> = (0..12 * v).map(|_| rng.gen_range(-3.0..0.0)).collect();
    let mut masked_counts = Vec::new();
    let mut predict = |rows: &[Vec<usize>]| -> Result<Vec<Vec<f64>>> {
        masked_counts.push(rows.iter().map(|r| r.iter().filter(|&&t| t == mask).count()).collect::<Vec<_>>());
        // depend on the input so successive iterations differ
        let shift: usize = rows[0].iter().sum();
        Ok(rows.iter().map(|r| table[..r.len() * v].iter().map(|x| x - (shift % 3) as f64 * 0.01).collect()).collect())
    };
    let lens = [12, 7, 1];
    let mut st: Vec<MaskState> = lens.iter().map(|&n| MaskState::all_masked(n, mask)).collect();
    refine(&mut st, 5, false, None, v, mask, &mut predict).unwrap();
    assert_eq!(masked_counts[0], lens.to_vec());
    for t in 1..5 {
        let want: Vec<usize> = lens.iter().map(|&n| mask_schedule(n, 5, t).unwrap()).collect();
        assert_eq!(masked_counts[t], want, "iteration {}", t + 1);
    }
    assert!(st.iter().all(|s| !s.tokens.contains(&mask) && s.n_masked() == 0));
}

#[test]
fn mask_predict_single_pass_is_argmax() {
    let p = tiny();
    let s = &samples()[0];
    let enc = encoded(&p, s);
    let cfg = DecodeConfig {
        iterations: 1,
        length_beam: 1,
        ..DecodeConfig::default()
    };
    let hyps = mask_predict(&p, &enc, &cfg).unwrap();
    assert_eq!(hyps.len(), 1);

    let mut sess = Session::inference(&p);
    let e = enc.bind(&mut sess);
    let ll = model::predict_length(&mut sess, &e).unwrap();
    let n = model::top_lengths(sess.g.value(ll).data(), 9).into_iter().find(|&n| n > 0).unwrap();
    let logits = model::cmlm_forward(&mut sess, &vec![2; n], n, &[n], &e).unwrap();
    let out = sess.g.value(logits);
    let want: Vec<usize> = (0..n).map(|i| crate::losses::argmax(&out.data()[i * 10..(i + 1) * 10])).collect();
    assert_eq!(hyps[0].tokens, want);
    assert_eq!(hyps[0].source_length, n);
}

#[test]
fn length_beam_gives_distinct_lengths() {
    let p = tiny();
    let enc = encoded(&p, &samples()[1]);
    let cfg = DecodeConfig {
        length_beam: 3,
        iterations: 4,
        ..DecodeConfig::default()
    };
    let hyps = mask_predict(&p, &enc, &cfg).unwrap();
    assert_eq!(hyps.len(), 3);
    let mut lens: Vec<usize> = hyps.iter().map(|h| h.tokens.len()).collect();
    lens.sort();
    lens.dedup();
    assert_eq!(lens.len(), 3);
    assert!(hyps.iter().all(|h| !h.tokens.contains(&2) && h.ar_score.is_none()));
}

#[test]
fn zero_only_lengths_are_an_error() {
    let mut p = tiny();
    let b = p.tensors.get_mut("len.b").unwrap();
    b.data_mut().iter_mut().for_each(|x| *x = -1e6);
    b.data_mut()[0] = 1e6;
    let enc = encoded(&p, &samples()[0]);
    // the top length is zero and skipped; the next ones remain
    let hyps = mask_predict(&p, &enc, &DecodeConfig::default()).unwrap();
    assert!(hyps.iter().all(|h| h.source_length > 0));

    let mut cfg = ModelConfig::tiny();
    cfg.max_target_len = 0;
    let q = ModelParams::init(&cfg, 0).unwrap();
    let enc = encoded(&q, &samples()[0]);
    assert!(matches!(mask_predict(&q, &enc, &DecodeConfig::default()), Err(Error::EmptyHypothesis(_))));
}

#[test]
fn ctc_greedy_collapse_rules() {
    let one_hot = |ids: &[usize]| -> Vec<f64> {
        ids.iter()
            .flat_map(|&c| (0..3).map(move |j| if j == c { 0.0 } else { -20.0 }))
            .collect()
    };
    assert_eq!(ctc_greedy(&one_hot(&[0, 1, 1, 0, 2]), 3, 0), vec![1, 2]);
    assert_eq!(ctc_greedy(&one_hot(&[0, 0, 0]), 3, 0), Vec::<usize>::new());
    assert_eq!(ctc_greedy(&one_hot(&[1, 0, 1]), 3, 0), vec![1, 1]);
}

#[test]
fn greedy_confidence_is_max_over_collapsed_frames() {
    // frames: a(.6) a(.8) blank(.7) b(.55)
    let rows: &[&[f64]] = &[&[0.2, 0.6, 0.2], &[0.1, 0.8, 0.1], &[0.7, 0.2, 0.1], &[0.25, 0.2, 0.55]];
    let got = ctc_greedy_confidence(&ln_rows(rows), 3, 0);
    assert_eq!(got.len(), 2);
    assert_eq!((got[0].0, got[1].0), (1, 2));
    assert!((got[0].1 - 0.8).abs() < 1e-12 && (got[1].1 - 0.55).abs() < 1e-12);
}

/// Every labelling's probability by enumerating all frame paths.
fn labelling_probs(logp: &[f64], u: usize, v: usize) -> BTreeMap<Vec<usize>, f64> {
    let mut out = BTreeMap::new();
    for code in 0..v.pow(u as u32) {
        let mut path = Vec::with_capacity(u);
        let mut c = code;
        for _ in 0..u {
            path.push(c % v);
            c /= v;
        }
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp[t * v + k]).sum();
        let mut lab = path.clone();
        lab.dedup();
        lab.retain(|&k| k != 0);
        *out.entry(lab).or_insert(0.0) += lp.exp();
    }
    out
}

fn random_logp(u: usize, v: usize, rng: &mut impl Rng, peak: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..u * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut logits = logits;
    for t in 0..u {
        let k = rng.gen_range(0..v);
        logits[t * v + k] += peak;
    }
    log_softmax_rows(&logits, v).unwrap()
}

#[test]
fn prefix_beam_top1_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..60 {
        let u = rng.gen_range(1..=5);
        let v = rng.gen_range(2..=4);
        let logp = random_logp(u, v, &mut rng, 0.0);
        let probs = labelling_probs(&logp, u, v);
        let best = probs.values().cloned().fold(0.0, f64::max);
        let hyps = ctc_prefix_beam(&logp, v, 10_000, 0);
        let top = hyps[0].nar_score * hyps[0].tokens.len().max(1) as f64;
        assert!((top.exp() - best).abs() < 1e-9, "{} vs {best}", top.exp());
        // every returned beam carries its exact labelling probability
        for h in &hyps {
            let lp = h.nar_score * h.tokens.len().max(1) as f64;
            assert!((lp.exp() - probs[&h.tokens]).abs() < 1e-9);
        }
        let mut seqs: Vec<&Vec<usize>> = hyps.iter().map(|h| &h.tokens).collect();
        seqs.dedup();
        assert_eq!(seqs.len(), hyps.len());
        assert!(hyps.iter().all(|h| !h.tokens.contains(&0)));
    }
}

#[test]
fn prefix_beam_width_one_is_greedy_on_peaked_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let u = rng.gen_range(1..=12);
        let v = rng.gen_range(2..=6);
        let logp = random_logp(u, v, &mut rng, 8.0);
        assert!(logp.chunks(v).all(|r| r.iter().cloned().fold(f64::MIN, f64::max).exp() > 0.9));
        let hyps = ctc_prefix_beam(&logp, v, 1, 0);
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].tokens, ctc_greedy(&logp, v, 0));
    }
}

#[test]
fn ctc_cmlm_thresholds() {
    let p = tiny();
    for s in samples() {
        let enc = encoded(&p, &s);
        let lp = ctc_log_probs(&p, &enc).unwrap();
        let greedy = ctc_greedy(&lp, 10, 0);
        if greedy.is_empty() {
            continue;
        }
        let cfg = DecodeConfig {
            p_thres: 0.0,
            ..DecodeConfig::default()
        };
        assert_eq!(ctc_cmlm_decode(&p, &enc, &cfg).unwrap().tokens, greedy);
        let cfg = DecodeConfig {
            p_thres: 1.0,
            iterations: 4,
            ..DecodeConfig::default()
        };
        let h = ctc_cmlm_decode(&p, &enc, &cfg).unwrap();
        assert_eq!(h.tokens.len(), greedy.len());
        assert!(!h.tokens.contains(&2));
    }
}

#[test]
fn ctc_cmlm_leaves_over_length_output_unrefined() {
    let mut p = tiny();
    for s in samples() {
        let enc = encoded(&p, &s);
        let greedy = ctc_greedy(&ctc_log_probs(&p, &enc).unwrap(), 10, 0);
        if greedy.len() < 2 {
            continue;
        }
        p.config.max_target_len = greedy.len() - 1;
        let cfg = DecodeConfig { p_thres: 1.0, ..DecodeConfig::default() };
        assert_eq!(ctc_cmlm_decode(&p, &enc, &cfg).unwrap().tokens, greedy);
        return;
    }
    panic!("no sample with a CTC output of two or more tokens");
}

#[test]
fn restricted_schedule_never_exceeds_initial_masks() {
    let v = 5;
    let mask = 4;
    let mut counts = Vec::new();
    let mut predict = |rows: &[Vec<usize>]| -> Result<Vec<Vec<f64>>> {
        counts.push(rows[0].iter().filter(|&&t| t == mask).count());
        Ok(vec![ln_rows(&vec![&[0.1, 0.2, 0.3, 0.4, 0.0][..]; rows[0].len()])])
    };
    let mut st = vec![MaskState {
        tokens: vec![1, mask, 2, 3, mask, 1, 1, 2],
        scores: vec![-0.01, f64::NEG_INFINITY, -0.02, -0.01, f64::NEG_INFINITY, -0.03, -0.01, -0.05],
        masked: vec![false, true, false, false, true, false, false, false],
        t: 0,
    }];
    refine(&mut st, 6, false, Some(&[2]), v, mask, &mut predict).unwrap();
    assert_eq!(counts[0], 2);
    assert!(counts.iter().all(|&c| c <= 2));
}

#[test]
fn rescoring_matches_incremental_scoring() {
    let p = tiny();
    let enc = encoded(&p, &samples()[2]);
    let seqs = vec![vec![5, 6, 7], vec![8], vec![9, 9, 5, 6, 7, 8], vec![]];
    let got = ar_scores(&p, &enc, &seqs).unwrap();
    for (seq, score) in seqs.iter().zip(got) {
        // one decoder call per prefix, reading only its last position
        let mut total = 0.0;
        let targets: Vec<usize> = seq.iter().copied().chain([4]).collect();
        for (i, &tok) in targets.iter().enumerate() {
            let prefix: Vec<usize> = std::iter::once(3).chain(seq[..i].iter().copied()).collect();
            let mut s = Session::inference(&p);
            let e = enc.bind(&mut s);
            let n = prefix.len();
            let y = model::ar_forward(&mut s, &prefix, n, &[n], &e).unwrap();
            let lp = log_softmax_rows(&s.g.value(y).data()[(n - 1) * 10..n * 10], 10).unwrap();
            total += lp[tok];
        }
        assert!((score - total / targets.len() as f64).abs() < 1e-9);
    }
}

fn hyp(tokens: &[usize], nar: f64, ar: Option<f64>) -> Hypothesis {
    Hypothesis {
        tokens: tokens.to_vec(),
        nar_score: nar,
        ar_score: ar,
        source_length: tokens.len(),
    }
}

#[test]
fn selection_rules() {
    let hyps = vec![
        hyp(&[5, 6, 7], -0.1, Some(-0.9)),
        hyp(&[5, 6], -0.5, Some(-0.2)),
        hyp(&[5], -0.3, Some(-0.2)),
    ];
    assert_eq!(select_best(&hyps, |h| h.nar_score).unwrap(), 0);
    assert_eq!(select_best(&hyps, |h| h.ar_score.unwrap()).unwrap(), 2);
    let tied = vec![hyp(&[5, 6], -0.2, None), hyp(&[7, 8], -0.2, None)];
    assert_eq!(select_best(&tied, |h| h.nar_score).unwrap(), 0);
    assert!(select_best(&[], |h| h.nar_score).is_err());

    let p = tiny();
    let enc = encoded(&p, &samples()[0]);
    let one = vec![hyp(&[5, 6], -0.4, None)];
    let (best, scored) = parallel_rescore(&p, &enc, &one).unwrap();
    assert_eq!(best, 0);
    assert_eq!(scored[0].tokens, one[0].tokens);
    assert!(scored[0].ar_score.is_some());
    assert!(matches!(parallel_rescore(&p, &enc, &[]), Err(Error::Usage(_))));

    // over-length candidates are never scored and never beat a scored one
    let long = vec![5; p.config.max_target_len + 1];
    let mixed = vec![hyp(&long, 0.0, None), hyp(&[5, 6], -9.0, None)];
    let (best, scored) = parallel_rescore(&p, &enc, &mixed).unwrap();
    assert_eq!(best, 1);
    assert!(scored[0].ar_score.is_none() && scored[1].ar_score.is_some());
    let longer = vec![6; p.config.max_target_len + 2];
    let only_long = vec![hyp(&long, -2.0, None), hyp(&longer, -1.0, None)];
    let (best, scored) = parallel_rescore(&p, &enc, &only_long).unwrap();
    assert_eq!(best, 1);
    assert!(scored.iter().all(|h| h.ar_score.is_none()));
}

#[test]
fn ar_beam_width_one_is_greedy() {
    let p = tiny();
    let enc = encoded(&p, &samples()[0]);
    let r = ar_beam(&p, &enc, 1, 8).unwrap();
    let mut prefix = vec![3];
    let mut score = 0.0;
    loop {
        let mut s = Session::inference(&p);
        let e = enc.bind(&mut s);
        let n = prefix.len();
        let y = model::ar_forward(&mut s, &prefix, n, &[n], &e).unwrap();
        let lp = log_softmax_rows(&s.g.value(y).data()[(n - 1) * 10..n * 10], 10).unwrap();
        let allowed = [4, 5, 6, 7, 8, 9];
        let best = allowed.iter().copied().fold(4, |b, c| if lp[c] > lp[b] { c } else { b });
        score += lp[best];
        if best == 4 || n == 9 {
            break;
        }
        prefix.push(best);
    }
    assert_eq!(r.hyp.tokens, prefix[1..].to_vec());
    if r.finished {
        assert!((r.hyp.nar_score - score / (prefix.len()) as f64).abs() < 1e-12);
    }
    assert_eq!(ar_beam(&p, &enc, 1, 8).unwrap(), r);
}

#[test]
fn ar_beam_reports_unfinished_output() {
    let mut p = tiny();
    p.tensors.get_mut("ar.out.b").unwrap().data_mut()[4] = -1e3;
    let enc = encoded(&p, &samples()[0]);
    let r = ar_beam(&p, &enc, 3, 5).unwrap();
    assert!(!r.finished);
    assert_eq!(r.hyp.tokens.len(), 5);
}

#[test]
fn decode_dispatch_and_records() {
    let p = tiny();
    let data = samples();
    let dir = tempfile::tempdir().unwrap();
    for algorithm in [
        Algorithm::ArBeam,
        Algorithm::CtcGreedy,
        Algorithm::CtcBeam,
        Algorithm::MaskPredict,
        Algorithm::CtcCmlm,
    ] {
        let cfg = DecodeConfig {
            algorithm,
            iterations: 3,
            rescore: matches!(algorithm, Algorithm::MaskPredict | Algorithm::CtcBeam),
            p_thres: 0.99,
            ..DecodeConfig::default()
        };
        let recs = match decode_dataset(&p, &data, &cfg, true, 2) {
            Ok(r) => r,
            // an untrained CTC head may emit nothing to refine
            Err(Error::EmptyHypothesis(_)) if algorithm == Algorithm::CtcCmlm => continue,
            Err(e) => panic!("{algorithm:?}: {e}"),
        };
        assert_eq!(recs.len(), 3);
        // another encoder batching changes scores only at rounding level
        for (a, b) in recs.iter().zip(decode_dataset(&p, &data, &cfg, true, 3).unwrap()) {
            assert_eq!(a.hyp, b.hyp);
            assert!((a.nar_score - b.nar_score).abs() < 1e-9);
        }
        assert_eq!(recs, decode_dataset(&p, &data, &cfg, true, 2).unwrap());
        for r in &recs {
            assert_eq!(r.algorithm, algorithm.name());
            assert_eq!(r.ar_score.is_some(), cfg.rescore);
            assert_eq!(r.candidates.as_ref().unwrap().len(), r.n_candidates);
        }
        let path = dir.path().join("out.jsonl");
        write_records(&recs, &path).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
    }
    assert_eq!("ctc_beam".parse::<Algorithm>().unwrap(), Algorithm::CtcBeam);
    assert!("beam".parse::<Algorithm>().is_err());
}

#[test]
fn trim_drops_padding() {
    let enc = EncoderOutput {
        states: Array::from_fn(&[1, 3, 2], |i| i as f64),
        lens: vec![2],
    };
    assert_eq!(trim(&enc).states.data(), &[0.0, 1.0, 2.0, 3.0]);
}
