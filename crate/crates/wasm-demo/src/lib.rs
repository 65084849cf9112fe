//! Browser bindings for a few model-free pieces of the decoder: CTC search
//! over an editable probability table, the mask-predict re-masking
//! schedule, and sentence BLEU.

use std::collections::HashMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use orthros::decode::{ctc_greedy, ctc_prefix_beam, mask_schedule};
use orthros::eval::sentence_bleu;

const BLANK: usize = 0;

#[derive(Serialize)]
struct Candidate {
    labels: Vec<usize>,
    /// Length-normalized log probability.
    score: f64,
}

#[derive(Serialize)]
struct CtcResult {
    greedy: Vec<usize>,
    beam: Vec<Candidate>,
}

/// Parses a whitespace/comma separated `frames × labels` table and
/// normalizes each row into log probabilities. Column 0 is the blank.
fn log_table(table: &str, labels: usize) -> Result<Vec<f64>, String> {
    if labels < 2 {
        return Err("need the blank plus at least one label".into());
    }
    let vals: Vec<f64> = table
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<_, _>>()?;
    if vals.is_empty() || !vals.len().is_multiple_of(labels) {
        return Err(format!("{} values do not fill rows of {labels}", vals.len()));
    }
    if vals.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let mut out = Vec::with_capacity(vals.len());
    for row in vals.chunks(labels) {
        let z: f64 = row.iter().sum();
        if z <= 0.0 {
            return Err("a frame has zero total probability".into());
        }
        out.extend(row.iter().map(|p| (p / z).ln()));
    }
    Ok(out)
}

fn ctc_search_impl(table: &str, labels: usize, beam: usize) -> Result<String, String> {
    let logp = log_table(table, labels)?;
    let res = CtcResult {
        greedy: ctc_greedy(&logp, labels, BLANK),
        beam: ctc_prefix_beam(&logp, labels, beam.max(1), BLANK)
            .into_iter()
            .map(|h| Candidate { labels: h.tokens, score: h.nar_score })
            .collect(),
    };
    serde_json::to_string(&res).map_err(|e| e.to_string())
}

/// Greedy and prefix-beam CTC decoding of a probability table. Returns
/// `{"greedy": [...], "beam": [{"labels", "score"}, ...]}` as JSON.
#[wasm_bindgen]
pub fn ctc_search(table: &str, labels: usize, beam: usize) -> Result<String, JsValue> {
    ctc_search_impl(table, labels, beam).map_err(|e| JsValue::from_str(&e))
}

/// Number of tokens re-masked after each iteration `t = 1..=T`.
#[wasm_bindgen]
pub fn schedule(n: usize, iterations: usize) -> Result<Vec<u32>, JsValue> {
    (1..=iterations)
        .map(|t| mask_schedule(n, iterations, t).map(|k| k as u32))
        .collect::<Result<_, _>>()
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

fn word_ids<'a>(s: &'a str, ids: &mut HashMap<&'a str, usize>) -> Vec<usize> {
    s.split_whitespace()
        .map(|w| {
            let next = ids.len();
            *ids.entry(w).or_insert(next)
        })
        .collect()
}

fn bleu_impl(hyp: &str, reference: &str) -> Result<f64, String> {
    let mut ids = HashMap::new();
    let r = word_ids(reference, &mut ids);
    let h = word_ids(hyp, &mut ids);
    sentence_bleu(&h, &r).map_err(|e| e.to_string())
}

/// Smoothed sentence BLEU between two whitespace-tokenized strings.
#[wasm_bindgen]
pub fn bleu(hyp: &str, reference: &str) -> Result<f64, JsValue> {
    bleu_impl(hyp, reference).map_err(|e| JsValue::from_str(&e))
}
