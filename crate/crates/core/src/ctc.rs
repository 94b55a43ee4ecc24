//! Connectionist temporal classification: loss, greedy decoding and an
//! enumeration oracle.
//!
//! Log-probability matrices are `T × (V + 1)` with the blank in column 0;
//! label `k` of the text vocabulary occupies column `k + 1`.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Graph, Tensor, Var};

pub const BLANK: usize = 0;

/// Column of a text token in the CTC output space.
pub fn class_of(token: usize) -> usize {
    token + 1
}

/// Number of adjacent equal pairs, each of which forces a blank between the
/// two emissions.
pub fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_feasible(frames: usize, labels: &[usize]) -> Result<()> {
    let r = repeats(labels);
    if frames < labels.len() + r {
        return Err(Error::Feasibility {
            frames,
            labels: labels.len(),
            repeats: r,
        });
    }
    Ok(())
}

struct Recursion {
    /// Blank-augmented label columns.
    ext: Vec<usize>,
    /// `alpha[t][s]`, log domain.
    alpha: Vec<Vec<f64>>,
    /// Log-sum-exp over predecessors of `(t, s)`, before adding the emission.
    pre: Vec<Vec<f64>>,
    nll: f64,
}

fn predecessors(ext: &[usize], s: usize) -> impl Iterator<Item = usize> + '_ {
    let skip = s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    [Some(s), s.checked_sub(1), skip.then(|| s - 2)].into_iter().flatten()
}

fn forward(log_probs: &Tensor, labels: &[usize]) -> Result<Recursion> {
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    if let Some(&l) = labels.iter().find(|&&l| class_of(l) >= classes) {
        return Err(Error::Vocab {
            id: l,
            size: classes - 1,
        });
    }
    if t_len == 0 {
        return Err(Error::Feasibility {
            frames: 0,
            labels: labels.len(),
            repeats: repeats(labels),
        });
    }
    check_feasible(t_len, labels)?;
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(class_of(l));
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    let mut pre = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = log_probs.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = log_probs.get(0, ext[1]);
    }
    let mut buf = Vec::with_capacity(3);
    for t in 1..t_len {
        for s in 0..s_len {
            buf.clear();
            buf.extend(predecessors(&ext, s).map(|p| alpha[t - 1][p]));
            let lse = log_sum_exp(&buf);
            pre[t][s] = lse;
            alpha[t][s] = lse + log_probs.get(t, ext[s]);
        }
    }
    let last = &alpha[t_len - 1];
    let tail: Vec<f64> = if s_len > 1 {
        vec![last[s_len - 1], last[s_len - 2]]
    } else {
        vec![last[0]]
    };
    let nll = -log_sum_exp(&tail);
    Ok(Recursion {
        ext,
        alpha,
        pre,
        nll,
    })
}

/// Negative log-likelihood of `labels` under per-frame log-probabilities,
/// summed over every blank-augmented monotonic alignment.
pub fn ctc_nll(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(forward(log_probs, labels)?.nll)
}

/// [`ctc_nll`] as a graph operation. The gradient is obtained by reverse
/// accumulation through the same log-sum-exp recursion.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let rec = forward(g.value(log_probs), labels)?;
    let nll = rec.nll;
    Ok(g.custom(
        &[log_probs],
        Tensor::scalar(nll),
        Box::new(move |c| {
            let lp = c.inputs[0];
            let upstream = c.grad.item();
            let (t_len, s_len) = (rec.alpha.len(), rec.ext.len());
            let mut d_lp = Tensor::zeros(lp.shape());
            let mut d_alpha = vec![vec![0.0; s_len]; t_len];
            let total = -nll;
            let last = t_len - 1;
            for (d, &a) in d_alpha[last].iter_mut().zip(&rec.alpha[last]).skip(s_len.saturating_sub(2)) {
                if a.is_finite() {
                    *d = -upstream * (a - total).exp();
                }
            }
            for t in (0..t_len).rev() {
                for s in 0..s_len {
                    let da = d_alpha[t][s];
                    if da == 0.0 || !rec.alpha[t][s].is_finite() {
                        continue;
                    }
                    let col = rec.ext[s];
                    let cur = d_lp.get(t, col);
                    d_lp.set(t, col, cur + da);
                    if t == 0 {
                        continue;
                    }
                    let pre = rec.pre[t][s];
                    for p in predecessors(&rec.ext, s) {
                        let a = rec.alpha[t - 1][p];
                        if a.is_finite() {
                            d_alpha[t - 1][p] += da * (a - pre).exp();
                        }
                    }
                }
            }
            vec![Some(d_lp)]
        }),
    ))
}

/// Collapses a frame-level class path: merge adjacent repeats, then drop
/// blanks. Returns text token ids.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != BLANK {
            out.push(c - 1);
        }
        prev = Some(c);
    }
    out
}

/// Per-frame argmax (ties toward the lower class), then [`collapse`].
pub fn ctc_greedy(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
pub const BRUTE_FORCE_MAX_LABELS: usize = 4;

/// Enumerates every frame path and log-sums those that collapse to
/// `labels`. Returns `+∞` when no path does. Test oracle only.
pub fn ctc_brute_force(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (t_len, classes) = (log_probs.rows(), log_probs.cols());
    if t_len > BRUTE_FORCE_MAX_FRAMES || classes - 1 > BRUTE_FORCE_MAX_LABELS {
        return Err(Error::OracleSize(format!(
            "{t_len} frames × {classes} classes exceeds {BRUTE_FORCE_MAX_FRAMES} × {}",
            BRUTE_FORCE_MAX_LABELS + 1
        )));
    }
    let mut path = vec![0usize; t_len];
    let mut terms = Vec::new();
    loop {
        if collapse(&path) == labels {
            terms.push(path.iter().enumerate().map(|(t, &c)| log_probs.get(t, c)).sum::<f64>());
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(-log_sum_exp(&terms));
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_softmax_rows;

    fn probs(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap().map(f64::ln)
    }

    #[test]
    fn single_frame_single_label() {
        let lp = probs(&[vec![0.2, 0.5, 0.3]]);
        assert!((ctc_nll(&lp, &[0]).unwrap() + 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frames_three_paths() {
        let lp = probs(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]);
        let expected = -(0.5 * 0.1 + 0.5 * 0.6 + 0.2 * 0.1f64).ln();
        assert!((ctc_nll(&lp, &[0]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_labels_is_all_blank() {
        let lp = probs(&[vec![0.7, 0.3], vec![0.4, 0.6]]);
        let expected = -(0.7f64.ln() + 0.4f64.ln());
        assert!((ctc_nll(&lp, &[]).unwrap() - expected).abs() < 1e-14);
        assert!((ctc_brute_force(&lp, &[]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn infeasible_is_error_and_oracle_infinite() {
        let lp = log_softmax_rows(&Tensor::zeros(&[2, 3])).unwrap();
        match ctc_nll(&lp, &[1, 1]) {
            Err(Error::Feasibility {
                frames: 2,
                labels: 2,
                repeats: 1,
            }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(ctc_brute_force(&lp, &[1, 1]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn oracle_size_bound() {
        let lp = log_softmax_rows(&Tensor::zeros(&[9, 3])).unwrap();
        assert!(matches!(ctc_brute_force(&lp, &[0]), Err(Error::OracleSize(_))));
    }

    #[test]
    fn greedy_collapse_rule() {
        // classes: blank=0, a=1
        let path = [1, 1, 0, 1];
        assert_eq!(collapse(&path), vec![0, 0]);
        assert!(collapse(&[0, 0, 0]).is_empty());
    }

    #[test]
    fn greedy_ties_go_low() {
        let lp = Tensor::from_rows(&[vec![0.0, 0.0, -1.0]]).unwrap();
        assert!(ctc_greedy(&lp).is_empty());
    }
}
