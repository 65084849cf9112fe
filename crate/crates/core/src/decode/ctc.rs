//! CTC search over per-frame log-probabilities `[U', V]`.

use std::collections::BTreeMap;

use super::Hypothesis;
use crate::losses::ctc::lse2;

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

/// Per-frame argmax, adjacent repeats collapsed, blanks dropped.
pub fn ctc_greedy(logp: &[f64], v: usize, blank: usize) -> Vec<usize> {
    ctc_greedy_confidence(logp, v, blank).into_iter().map(|(t, _)| t).collect()
}

/// Greedy collapse with a confidence per emitted token: the highest frame
/// probability among the frames that collapsed into it.
pub fn ctc_greedy_confidence(logp: &[f64], v: usize, blank: usize) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut prev = None;
    for row in logp.chunks(v) {
        let (c, lp) = argmax(row);
        let p = lp.exp();
        if c != blank {
            if prev == Some(c) {
                let last = out.last_mut().expect("repeat follows an emission");
                last.1 = last.1.max(p);
            } else {
                out.push((c, p));
            }
        }
        prev = Some(c);
    }
    out
}

/// Log-probability of the single best frame path.
pub fn best_path_logprob(logp: &[f64], v: usize) -> f64 {
    logp.chunks(v).map(|row| argmax(row).1).sum()
}

#[derive(Clone, Copy)]
struct Beam {
    blank: f64,
    label: f64,
}

impl Beam {
    const EMPTY: Beam = Beam {
        blank: f64::NEG_INFINITY,
        label: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        lse2(self.blank, self.label)
    }
}

fn ranked(beams: BTreeMap<Vec<usize>, Beam>) -> Vec<(Vec<usize>, Beam)> {
    let mut v: Vec<_> = beams.into_iter().filter(|(_, b)| b.total() > f64::NEG_INFINITY).collect();
    // stable: equal totals keep lexicographic prefix order
    v.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()));
    v
}

/// Prefix beam search keeping separate blank-ending and label-ending
/// probabilities per prefix. Returns up to `l` distinct label sequences,
/// best first; `nar_score` is the log-probability divided by the length.
pub fn ctc_prefix_beam(logp: &[f64], v: usize, l: usize, blank: usize) -> Vec<Hypothesis> {
    let l = l.max(1);
    let mut beams = BTreeMap::new();
    beams.insert(
        Vec::new(),
        Beam {
            blank: 0.0,
            label: f64::NEG_INFINITY,
        },
    );
    for row in logp.chunks(v) {
        let mut next: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
        for (prefix, beam) in &beams {
            let total = beam.total();
            let e = next.entry(prefix.clone()).or_insert(Beam::EMPTY);
            e.blank = lse2(e.blank, total + row[blank]);
            for (c, &p) in row.iter().enumerate() {
                if c == blank {
                    continue;
                }
                let mut ext = prefix.clone();
                ext.push(c);
                if prefix.last() == Some(&c) {
                    // a repeat only extends the prefix after a blank
                    let e = next.entry(ext).or_insert(Beam::EMPTY);
                    e.label = lse2(e.label, beam.blank + p);
                    let same = next.entry(prefix.clone()).or_insert(Beam::EMPTY);
                    same.label = lse2(same.label, beam.label + p);
                } else {
                    let e = next.entry(ext).or_insert(Beam::EMPTY);
                    e.label = lse2(e.label, total + p);
                }
            }
        }
        beams = ranked(next).into_iter().take(l).collect();
    }
    ranked(beams)
        .into_iter()
        .take(l)
        .map(|(tokens, beam)| {
            let lp = beam.total();
            Hypothesis {
                nar_score: lp / tokens.len().max(1) as f64,
                source_length: tokens.len(),
                tokens,
                ar_score: None,
            }
        })
        .collect()
}
