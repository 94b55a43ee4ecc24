//! Hypothesis files and evaluation reports.
//!
//! A hypotheses file is JSON lines `{"id", "tokens", "log_prob"}`, one per
//! utterance in corpus order. Token ids exclude BOS and EOS.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{decode_split, HomophoneVocab, Utterance, FORMAT_NAME};
use crate::error::{Error, PathContext, Result};
use crate::metrics::{align_edit, error_breakdown, AlignedPair, EditCounts, ErrorBreakdown};
use crate::model::{Model, Modality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypRecord {
    pub id: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

pub fn decode_all(model: &Model, utts: &[Utterance], modality: Modality, beam: usize) -> Result<Vec<HypRecord>> {
    let eos = model.config.decoder.eos();
    utts.iter()
        .map(|u| {
            let h = model.decode(u, modality, beam, None)?;
            Ok(HypRecord {
                id: u.id.clone(),
                tokens: h.content(eos).to_vec(),
                log_prob: h.log_prob,
            })
        })
        .collect()
}

pub fn encode_hyps(hyps: &[HypRecord]) -> Result<String> {
    let mut out = String::new();
    for h in hyps {
        out.push_str(&serde_json::to_string(h).map_err(|e| Error::Input(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_hyps(text: &str) -> Result<Vec<HypRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                record: k,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// `(id, tokens)` pairs from either a corpus split (reference tokens) or a
/// hypotheses file, told apart by the corpus header.
pub fn read_token_file(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = fs::read_to_string(path).at(path)?;
    let first = text.lines().next().unwrap_or("");
    let is_corpus = serde_json::from_str::<serde_json::Value>(first)
        .ok()
        .and_then(|v| v.get("format").and_then(|f| f.as_str()).map(|f| f == FORMAT_NAME))
        .unwrap_or(false);
    if is_corpus {
        let (_, utts) = decode_split(&text)?;
        Ok(utts.into_iter().map(|u| (u.id, u.ref_tokens)).collect())
    } else {
        Ok(decode_hyps(&text)?.into_iter().map(|h| (h.id, h.tokens)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub wer: f64,
}

impl ScoredCounts {
    fn new(c: EditCounts) -> Result<Self> {
        Ok(Self {
            substitutions: c.substitutions,
            deletions: c.deletions,
            insertions: c.insertions,
            ref_len: c.ref_len,
            wer: c.wer()?,
        })
    }

    pub fn counts(&self) -> EditCounts {
        EditCounts {
            substitutions: self.substitutions,
            deletions: self.deletions,
            insertions: self.insertions,
            ref_len: self.ref_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    #[serde(flatten)]
    pub counts: ScoredCounts,
    pub breakdown: ErrorBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: ScoredCounts,
    pub breakdown: ErrorBreakdown,
    pub utterances: Vec<UtteranceScore>,
}

/// Scores hypotheses against references matched by id, in reference order.
/// Every reference needs exactly one hypothesis.
pub fn evaluate_pairs(
    refs: &[(String, Vec<usize>)],
    hyps: &[(String, Vec<usize>)],
    vocab: &HomophoneVocab,
) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &[usize]> = HashMap::with_capacity(hyps.len());
    for (id, toks) in hyps {
        if by_id.insert(id.as_str(), toks).is_some() {
            return Err(Error::Input(format!("duplicate hypothesis id `{id}`")));
        }
    }
    if by_id.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            by_id.len(),
            refs.len()
        )));
    }
    for (_, toks) in refs.iter().chain(hyps) {
        if let Some(&id) = toks.iter().find(|&&t| t >= vocab.size) {
            return Err(Error::Vocab { id, size: vocab.size });
        }
    }
    let mut total = EditCounts::default();
    let mut breakdown = ErrorBreakdown::default();
    let mut utterances = Vec::with_capacity(refs.len());
    for (id, reference) in refs {
        let hyp = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Input(format!("no hypothesis for `{id}`")))?;
        let (c, path) = align_edit(reference, hyp);
        let b = error_breakdown(
            [AlignedPair {
                reference,
                hyp,
                path: &path,
            }],
            vocab,
        );
        total = total + c;
        breakdown = breakdown + b;
        utterances.push(UtteranceScore {
            id: id.clone(),
            counts: ScoredCounts::new(c)?,
            breakdown: b,
        });
    }
    Ok(EvalReport {
        total: ScoredCounts::new(total)?,
        breakdown,
        utterances,
    })
}
