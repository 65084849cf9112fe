//! CTC forward-backward over the blank-augmented label lattice, in log space.

use crate::autograd::log_softmax_rows;
use crate::error::{Error, Result};

pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood `−ln P(labels | logits)` for one sequence.
///
/// `logits` is `[frames, vocab]` row-major and unnormalized. With
/// `want_grad` the gradient w.r.t. the logits is returned as well.
pub fn ctc_nll(
    logits: &[f64],
    frames: usize,
    vocab: usize,
    labels: &[usize],
    blank: usize,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = labels.len();
    if logits.len() != frames * vocab {
        return Err(Error::shape("ctc_nll", &[logits.len()], &[frames, vocab]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l == blank || l >= vocab) {
        return Err(Error::Usage(format!("invalid CTC label {l}")));
    }
    if frames < n {
        return Err(Error::InfeasibleAlignment {
            frames,
            labels: n,
        });
    }
    if frames == 0 {
        return Ok((0.0, want_grad.then(Vec::new)));
    }
    let logp = log_softmax_rows(logits, vocab)?;
    let s_len = 2 * n + 1;
    let ext = |s: usize| if s.is_multiple_of(2) { blank } else { labels[s / 2] };
    let skip_ok = |s: usize| s >= 2 && ext(s) != blank && ext(s) != ext(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = logp[blank];
    if n > 0 {
        alpha[1] = logp[labels[0]];
    }
    for t in 1..frames {
        let lp = &logp[t * vocab..(t + 1) * vocab];
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[ext(s)];
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = if n > 0 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(Error::InfeasibleAlignment {
            frames,
            labels: n,
        });
    }
    if !want_grad {
        return Ok((-log_p, None));
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if n > 0 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let lp = &logp[(t + 1) * vocab..(t + 2) * vocab];
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s] + lp[ext(s)];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1] + lp[ext(s + 1)]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, next[s + 2] + lp[ext(s + 2)]);
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        for (gk, &lp) in g.iter_mut().zip(&logp[t * vocab..(t + 1) * vocab]) {
            *gk = lp.exp();
        }
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                g[ext(s)] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sums path probabilities over every frame labelling that collapses to
    /// `labels`.
    fn brute_force(probs: &[f64], frames: usize, vocab: usize, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        let count = vocab.pow(frames as u32);
        for code in 0..count {
            let mut c = code;
            let mut path = Vec::with_capacity(frames);
            for _ in 0..frames {
                path.push(c % vocab);
                c /= vocab;
            }
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &k in &path {
                if Some(k) != prev && k != 0 {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
            if collapsed == labels {
                total += path.iter().enumerate().map(|(t, &k)| probs[t * vocab + k]).product::<f64>();
            }
        }
        total
    }

    #[test]
    fn two_frames_one_label_uniform() {
        let (nll, _) = ctc_nll(&[0.0; 4], 2, 2, &[1], 0, false).unwrap();
        assert!((nll + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_single_path_is_zero() {
        let logits = [-1e3, 0.0, -1e3, 0.0];
        let (nll, _) = ctc_nll(&logits, 2, 2, &[1], 0, false).unwrap();
        assert!(nll.abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_invalid_inputs() {
        assert!(matches!(
            ctc_nll(&[0.0; 2], 1, 2, &[1, 1], 0, false),
            Err(Error::InfeasibleAlignment { .. })
        ));
        // repeated label needs a separating blank
        assert!(matches!(
            ctc_nll(&[0.0; 4], 2, 2, &[1, 1], 0, false),
            Err(Error::InfeasibleAlignment { .. })
        ));
        assert!(matches!(ctc_nll(&[0.0; 4], 2, 2, &[0], 0, false), Err(Error::Usage(_))));
    }

    #[test]
    fn matches_enumeration_on_fixed_case() {
        let logits = [0.3, -0.2, 1.1, 0.5, 0.0, -0.7, -1.0, 0.4, 0.9, 0.2, 0.2, -0.3];
        let probs = crate::autograd::softmax_rows(&logits, 3).unwrap();
        let (nll, _) = ctc_nll(&logits, 4, 3, &[2, 1], 0, false).unwrap();
        let p = brute_force(&probs, 4, 3, &[2, 1]);
        assert!((nll + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits: Vec<f64> = (0..15).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let labels = [1, 2, 2];
        let (_, g) = ctc_nll(&logits, 5, 3, &labels, 0, true).unwrap();
        let g = g.unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            up[i] += eps;
            let mut dn = logits.clone();
            dn[i] -= eps;
            let fd = (ctc_nll(&up, 5, 3, &labels, 0, false).unwrap().0
                - ctc_nll(&dn, 5, 3, &labels, 0, false).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", g[i]);
        }
    }
}
