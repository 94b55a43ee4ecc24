//! Levenshtein alignment with substitution/deletion/insertion counts.

use serde::{Deserialize, Serialize};

use crate::data::HomophoneVocab;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> Result<f64> {
        wer(self)
    }
}

impl std::ops::Add for EditCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl std::iter::Sum for EditCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// `(S + D + I) / N`. May exceed 1 when insertions dominate.
pub fn wer(c: &EditCounts) -> Result<f64> {
    if c.ref_len == 0 {
        return Err(Error::Contract("WER undefined for an empty reference".into()));
    }
    Ok(c.errors() as f64 / c.ref_len as f64)
}

/// Reference length implied by reported counts and a WER given as a
/// fraction: `N = (S + D + I) / WER`.
pub fn implied_ref_len(s: usize, d: usize, i: usize, wer: f64) -> f64 {
    (s + d + i) as f64 / wer
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Sub,
    Del,
    Ins,
}

/// One alignment step. `ref_pos` / `hyp_pos` index the consumed tokens;
/// the one an op does not consume is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignStep {
    pub op: EditOp,
    pub ref_pos: Option<usize>,
    pub hyp_pos: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub steps: Vec<AlignStep>,
}

impl AlignmentPath {
    /// Counts recomputed from the steps.
    pub fn counts(&self, ref_len: usize) -> EditCounts {
        let mut c = EditCounts {
            ref_len,
            ..Default::default()
        };
        for s in &self.steps {
            match s.op {
                EditOp::Match => {}
                EditOp::Sub => c.substitutions += 1,
                EditOp::Del => c.deletions += 1,
                EditOp::Ins => c.insertions += 1,
            }
        }
        c
    }
}

/// Minimum-cost alignment with unit substitution, deletion and insertion
/// costs. Traceback from the end prefers match, then substitution, then
/// deletion, then insertion, so the S/D/I split is deterministic.
pub fn align_edit(reference: &[usize], hyp: &[usize]) -> (EditCounts, AlignmentPath) {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for (j, c) in cost.iter_mut().enumerate().take(w) {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut steps = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let diag = cost[(i - 1) * w + j - 1];
            if reference[i - 1] == hyp[j - 1] && diag == here {
                steps.push(AlignStep {
                    op: EditOp::Match,
                    ref_pos: Some(i - 1),
                    hyp_pos: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
            if reference[i - 1] != hyp[j - 1] && diag + 1 == here {
                steps.push(AlignStep {
                    op: EditOp::Sub,
                    ref_pos: Some(i - 1),
                    hyp_pos: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            steps.push(AlignStep {
                op: EditOp::Del,
                ref_pos: Some(i - 1),
                hyp_pos: None,
            });
            i -= 1;
        } else {
            steps.push(AlignStep {
                op: EditOp::Ins,
                ref_pos: None,
                hyp_pos: Some(j - 1),
            });
            j -= 1;
        }
    }
    steps.reverse();
    let path = AlignmentPath { steps };
    (path.counts(n), path)
}

/// An alignment together with the sequences it indexes into.
#[derive(Clone, Debug)]
pub struct AlignedPair<'a> {
    pub reference: &'a [usize],
    pub hyp: &'a [usize],
    pub path: &'a AlignmentPath,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    /// Substitutions between two tokens of one homophone group.
    pub homophone_substitutions: usize,
    pub other_substitutions: usize,
    /// Insertions of a background (OCR-only) token.
    pub distractor_insertions: usize,
    pub other_insertions: usize,
}

impl std::ops::Add for ErrorBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            homophone_substitutions: self.homophone_substitutions + o.homophone_substitutions,
            other_substitutions: self.other_substitutions + o.other_substitutions,
            distractor_insertions: self.distractor_insertions + o.distractor_insertions,
            other_insertions: self.other_insertions + o.other_insertions,
        }
    }
}

pub fn error_breakdown<'a>(
    pairs: impl IntoIterator<Item = AlignedPair<'a>>,
    vocab: &HomophoneVocab,
) -> ErrorBreakdown {
    let mut out = ErrorBreakdown::default();
    for pair in pairs {
        for step in &pair.path.steps {
            match (step.op, step.ref_pos, step.hyp_pos) {
                (EditOp::Sub, Some(r), Some(h)) => {
                    if vocab.same_group(pair.reference[r], pair.hyp[h]) {
                        out.homophone_substitutions += 1;
                    } else {
                        out.other_substitutions += 1;
                    }
                }
                (EditOp::Ins, _, Some(h)) => {
                    if vocab.is_background(pair.hyp[h]) {
                        out.distractor_insertions += 1;
                    } else {
                        out.other_insertions += 1;
                    }
                }
                _ => {}
            }
        }
    }
    out
}
