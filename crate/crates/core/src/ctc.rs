//! Connectionist temporal classification.
//!
//! All functions take a `[T × C]` matrix of per-frame log-probabilities in
//! which class 0 is the blank; labels are class ids in `1..C`. The model
//! maps token `k` to class `k + 1`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{log_add, log_sum_exp};
use crate::tensor::{Graph, Tensor, Var};

pub const BLANK: usize = 0;

/// Largest path count [`enumeration_loss`] will visit.
pub const MAX_ENUMERATION: u128 = 1_000_000;

/// Adjacent equal labels, each of which forces an extra blank frame.
pub fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether some alignment of `labels` fits in `frames` frames.
pub fn feasible(labels: &[usize], frames: usize) -> bool {
    labels.len() + repeats(labels) <= frames
}

fn validate(post: &Tensor, labels: &[usize]) -> Result<()> {
    let c = post.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= c) {
        return Err(Error::invalid(format!("CTC label {bad} is blank or outside {c} classes")));
    }
    let t = post.rows();
    if !feasible(labels, t) {
        return Err(Error::CtcInfeasible {
            labels: labels.len(),
            repeats: repeats(labels),
            frames: t,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `labels` and its gradient with respect to
/// every entry of `post`, by the forward–backward recursions in log space.
pub fn ctc_loss_with_grad(post: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    validate(post, labels)?;
    let (t_len, c) = (post.rows(), post.cols());
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, k: usize| post.data()[t * c + k];
    let skip_ok = |s: usize| ext[s] != BLANK && s >= 2 && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }

    let end = &alpha[last..];
    let log_p = if s_len > 1 {
        log_add(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if log_p == ninf {
        return Err(Error::CtcInfeasible {
            labels: labels.len(),
            repeats: repeats(labels),
            frames: t_len,
        });
    }

    // d(-log p)/d lp[t,k] = -Σ_{s: ext[s]=k} exp(α + β − lp − log p)
    let mut grad = Tensor::zeros(&[t_len, c]);
    let gd = grad.data_mut();
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            let k = ext[s];
            gd[t * c + k] -= (ab - lp(t, k) - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss_value(post: &Tensor, labels: &[usize]) -> Result<f64> {
    ctc_loss_with_grad(post, labels).map(|(l, _)| l)
}

/// CTC loss as a graph node over a log-probability matrix.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc_loss_with_grad(g.value(log_probs), labels)?;
    g.fused_scalar(log_probs, loss, grad.into_data())
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// `−log P(labels)` by summing every frame-level path that collapses to
/// `labels`. Exponential in `T`; a reference for small instances.
pub fn enumeration_loss(post: &Tensor, labels: &[usize]) -> Result<f64> {
    let (t_len, c) = (post.rows(), post.cols());
    let count = (c as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if count > MAX_ENUMERATION {
        return Err(Error::TooLarge(count));
    }
    let mut path = vec![0usize; t_len];
    let mut terms = Vec::new();
    loop {
        if collapse(&path) == labels {
            terms.push(path.iter().enumerate().map(|(t, &k)| post.at(t, k)).sum::<f64>());
        }
        // odometer increment
        let mut i = t_len;
        loop {
            if i == 0 {
                let log_p = log_sum_exp(&terms);
                if log_p == f64::NEG_INFINITY {
                    return Err(Error::CtcInfeasible {
                        labels: labels.len(),
                        repeats: repeats(labels),
                        frames: t_len,
                    });
                }
                return Ok(-log_p);
            }
            i -= 1;
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Per-frame argmax (lowest class on ties), collapsed.
pub fn greedy_decode(post: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..post.rows())
        .map(|t| {
            post.row(t)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect();
    collapse(&path)
}

/// A decoded label sequence with its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub ctc_score: f64,
    pub aed_score: f64,
    pub combined: f64,
}

impl Hypothesis {
    pub fn from_ctc(tokens: Vec<usize>, ctc_score: f64) -> Self {
        Hypothesis {
            tokens,
            ctc_score,
            aed_score: 0.0,
            combined: ctc_score,
        }
    }
}

fn by_score_then_prefix(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search. Each prefix carries the log-probabilities of
/// ending in blank and in a non-blank; after every frame the `beam` best
/// prefixes by their sum survive. Returns up to `nbest` distinct prefixes,
/// best first, with `ctc_score` their total log-probability.
pub fn prefix_beam_search(post: &Tensor, beam: usize, nbest: usize) -> Result<Vec<Hypothesis>> {
    if nbest == 0 || beam < nbest {
        return Err(Error::invalid(format!("need beam ≥ nbest ≥ 1, got beam {beam}, nbest {nbest}")));
    }
    let ninf = f64::NEG_INFINITY;
    let mut beams: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beams.insert(Vec::new(), (0.0, ninf));
    for t in 0..post.rows() {
        let lp = post.row(t);
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, &(pb, pnb)) in &beams {
            let total = log_add(pb, pnb);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = log_add(e.0, total + lp[BLANK]);
            for (k, &p) in lp.iter().enumerate().skip(1) {
                if prefix.last() == Some(&k) {
                    let same = next.get_mut(prefix).expect("inserted above");
                    same.1 = log_add(same.1, pnb + p);
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pb + p);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, total + p);
                }
            }
        }
        // zero-probability prefixes (no alignment fits yet) never recover
        let mut ranked: Vec<(Vec<usize>, f64)> = next
            .iter()
            .map(|(k, &(b, nb))| (k.clone(), log_add(b, nb)))
            .filter(|(_, score)| *score > ninf)
            .collect();
        ranked.sort_by(by_score_then_prefix);
        ranked.truncate(beam);
        beams = ranked
            .into_iter()
            .map(|(k, _)| {
                let v = next[&k];
                (k, v)
            })
            .collect();
    }
    let mut ranked: Vec<(Vec<usize>, f64)> = beams.iter().map(|(k, &(b, nb))| (k.clone(), log_add(b, nb))).collect();
    ranked.sort_by(by_score_then_prefix);
    Ok(ranked
        .into_iter()
        .take(nbest)
        .map(|(tokens, score)| Hypothesis::from_ctc(tokens, score))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(rows: &[Vec<f64>]) -> Tensor {
        let t = Tensor::from_rows(rows);
        Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|p| p.ln()).collect()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let p = post(&[vec![0.3, 0.6, 0.1]]);
        let l = ctc_loss_value(&p, &[1]).unwrap();
        assert!((l + 0.6f64.ln()).abs() < 1e-12);
        assert!((l - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn two_frames_three_paths() {
        let p = post(&[vec![0.2, 0.5, 0.3], vec![0.4, 0.1, 0.5]]);
        // (a,a), (∅,a), (a,∅)
        let want = 0.5 * 0.1 + 0.2 * 0.1 + 0.5 * 0.4;
        let l = ctc_loss_value(&p, &[1]).unwrap();
        assert!((l + f64::ln(want)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_an_error() {
        let p = post(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(ctc_loss_value(&p, &[1, 1]), Err(Error::CtcInfeasible { .. })));
        assert!(matches!(enumeration_loss(&p, &[1, 1]), Err(Error::CtcInfeasible { .. })));
        assert!(ctc_loss_value(&p, &[0]).is_err());
    }

    #[test]
    fn blank_only_empty_labels() {
        let p = post(&[vec![0.7, 0.3], vec![0.7, 0.3], vec![0.7, 0.3]]);
        let want = -3.0 * 0.7f64.ln();
        assert!((enumeration_loss(&p, &[]).unwrap() - want).abs() < 1e-12);
        assert!((ctc_loss_value(&p, &[]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn greedy_collapses() {
        let hot = |k: usize| {
            let mut r = vec![0.01; 3];
            r[k] = 0.98;
            r
        };
        let p = post(&[hot(0), hot(1), hot(1), hot(0), hot(2)]);
        assert_eq!(greedy_decode(&p), vec![1, 2]);
        let p = post(&[hot(0), hot(0)]);
        assert!(greedy_decode(&p).is_empty());
    }

    #[test]
    fn enumeration_refuses_large_instances() {
        let p = Tensor::zeros(&[13, 3]);
        assert!(matches!(enumeration_loss(&p, &[1]), Err(Error::TooLarge(_))));
    }

    #[test]
    fn blank_dominated_beam() {
        let p = post(&[vec![0.9, 0.05, 0.05], vec![0.9, 0.05, 0.05]]);
        let hyps = prefix_beam_search(&p, 4, 3).unwrap();
        assert!(hyps[0].tokens.is_empty());
        // P([]) is exactly the all-blank path
        assert!((hyps[0].ctc_score - 2.0 * 0.9f64.ln()).abs() < 1e-12);
        for w in hyps.windows(2) {
            assert!(w[0].ctc_score >= w[1].ctc_score);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
    }
}
