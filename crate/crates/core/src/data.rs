//! Synthetic homophone/subtitle corpus and its on-disk format.
//!
//! Every spoken token emits frames drawn around an acoustic prototype.
//! Tokens inside one homophone group share a prototype, so audio alone
//! cannot tell them apart. The OCR stream carries the reference tokens
//! through a lossy channel (drops, synonym paraphrases) and appends
//! background tokens that never occur in speech.
//!
//! Token id layout for a vocabulary of size `V`:
//!
//! ```text
//! [0, n_groups * group_size)            homophone groups, contiguous
//! [n_groups * group_size, V - n_bg)     plain spoken tokens
//! [V - n_bg, V)                         background (OCR-only) tokens
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result};
use crate::numerics::{round_f32, Tensor};
use crate::visual_encoder::OcrTokenSequence;

pub const FORMAT_NAME: &str = "msr-corpus";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub n_groups: usize,
    pub group_size: usize,
    pub n_background: usize,
    pub d_in: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    pub prototype_margin: f64,
    pub p_ocr_drop: f64,
    pub p_ocr_paraphrase: f64,
    pub n_distractors: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            n_groups: 8,
            group_size: 3,
            n_background: 8,
            d_in: 16,
            min_duration: 2,
            max_duration: 4,
            noise_sigma: 0.3,
            prototype_margin: 2.0,
            p_ocr_drop: 0.2,
            p_ocr_paraphrase: 0.1,
            n_distractors: 3,
            min_sentence_len: 4,
            max_sentence_len: 8,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            seed: 20251015,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [("p_ocr_drop", self.p_ocr_drop), ("p_ocr_paraphrase", self.p_ocr_paraphrase)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.n_groups > 0 && self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.homophone_end() + self.n_background >= self.vocab_size {
            return bad(format!(
                "vocab_size {} leaves no plain tokens after {} homophone and {} background ids",
                self.vocab_size,
                self.homophone_end(),
                self.n_background
            ));
        }
        if self.n_distractors > 0 && self.n_background == 0 {
            return bad("distractors need a non-empty background range".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!("duration range [{}, {}] invalid", self.min_duration, self.max_duration));
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return bad(format!(
                "sentence length range [{}, {}] invalid",
                self.min_sentence_len, self.max_sentence_len
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} invalid", self.noise_sigma));
        }
        if self.d_in == 0 {
            return bad("d_in must be positive".into());
        }
        Ok(())
    }

    fn homophone_end(&self) -> usize {
        self.n_groups * self.group_size
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    /// Sentence-hash buckets (out of ten) owned by the split.
    fn owns_bucket(self, bucket: u64) -> bool {
        match self {
            Split::Train => bucket < 8,
            Split::Valid => bucket == 8,
            Split::Test => bucket == 9,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomophoneVocab {
    pub size: usize,
    pub groups: Vec<Vec<usize>>,
    /// Prototype row index for every token.
    pub sound_of: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub background_start: usize,
    /// Paraphrase target for each token; never in the token's own group.
    pub synonyms: Vec<Option<usize>>,
}

impl HomophoneVocab {
    pub fn build(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX, 0));
        let v = cfg.vocab_size;
        let h_end = cfg.homophone_end();
        let background_start = v - cfg.n_background;

        let groups: Vec<Vec<usize>> = (0..cfg.n_groups)
            .map(|g| (g * cfg.group_size..(g + 1) * cfg.group_size).collect())
            .collect();
        let mut sound_of = Vec::with_capacity(v);
        for t in 0..v {
            sound_of.push(if t < h_end { t / cfg.group_size } else { cfg.n_groups + (t - h_end) });
        }
        let n_sounds = cfg.n_groups + (v - h_end);
        let prototypes = sample_prototypes(n_sounds, cfg.d_in, cfg.prototype_margin, &mut rng)?;

        let plain: Vec<usize> = (h_end..background_start).collect();
        let synonyms = (0..v)
            .map(|t| {
                if t >= background_start {
                    return None;
                }
                let choices: Vec<usize> = plain.iter().copied().filter(|&p| p != t).collect();
                choices.choose(&mut rng).copied()
            })
            .collect();
        Ok(Self {
            size: v,
            groups,
            sound_of,
            prototypes,
            background_start,
            synonyms,
        })
    }

    pub fn same_group(&self, a: usize, b: usize) -> bool {
        a != b && self.group_of(a).is_some() && self.group_of(a) == self.group_of(b)
    }

    pub fn group_of(&self, t: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&t))
    }

    pub fn is_homophone(&self, t: usize) -> bool {
        self.group_of(t).is_some()
    }

    pub fn is_background(&self, t: usize) -> bool {
        t >= self.background_start && t < self.size
    }

    pub fn spoken_range(&self) -> std::ops::Range<usize> {
        0..self.background_start
    }

    pub fn prototype(&self, t: usize) -> &[f64] {
        &self.prototypes[self.sound_of[t]]
    }

    pub fn d_in(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }
}

fn sample_prototypes(n: usize, d: usize, margin: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::Config(format!(
                "could not place {n} prototypes in {d} dimensions at margin {margin}"
            )));
        }
        let p: Vec<f64> = (0..d).map(|_| round_f32(normal.sample(rng))).collect();
        let far = out.iter().all(|q| {
            let dist: f64 = q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist >= margin
        });
        if far {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub ref_tokens: Vec<usize>,
    pub durations: Vec<usize>,
    /// `Σ durations × d_in`, values on the `f32` grid.
    pub audio: Tensor,
    pub ocr: OcrTokenSequence,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-utterance seed from `(master, split, index)`.
pub fn derive_seed(master: u64, split: u64, index: u64) -> u64 {
    mix(mix(mix(master) ^ split) ^ index)
}

fn sentence_bucket(tokens: &[usize]) -> u64 {
    let h = tokens.iter().fold(0x243F_6A88_85A3_08D3u64, |h, &t| mix(h ^ t as u64));
    h % 10
}

/// Emits each token's prototype `duration` times with i.i.d. Gaussian
/// noise of standard deviation `sigma`, rounded to `f32`.
pub fn featurize(
    tokens: &[usize],
    vocab: &HomophoneVocab,
    durations: &[usize],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if tokens.len() != durations.len() {
        return Err(Error::Input(format!(
            "{} tokens but {} durations",
            tokens.len(),
            durations.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size) {
        return Err(Error::Vocab {
            id: bad,
            size: vocab.size,
        });
    }
    let d = vocab.d_in();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let raw_len: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(raw_len * d);
    for (&t, &dur) in tokens.iter().zip(durations) {
        if dur == 0 {
            return Err(Error::Input("token duration must be at least 1".into()));
        }
        let proto = vocab.prototype(t);
        for _ in 0..dur {
            for &p in proto {
                data.push(round_f32(p + noise.sample(rng)));
            }
        }
    }
    Tensor::new(vec![raw_len, d], data)
}

/// OCR channel: each reference token is dropped with `p_ocr_drop`, else
/// replaced by its synonym with `p_ocr_paraphrase`, else kept; order is
/// preserved. `n_distractors` background tokens are appended.
pub fn corrupt_to_ocr(
    ref_tokens: &[usize],
    cfg: &CorpusConfig,
    vocab: &HomophoneVocab,
    rng: &mut impl Rng,
) -> OcrTokenSequence {
    let mut out = Vec::with_capacity(ref_tokens.len() + cfg.n_distractors);
    for &t in ref_tokens {
        if rng.gen_bool(cfg.p_ocr_drop) {
            continue;
        }
        if rng.gen_bool(cfg.p_ocr_paraphrase) {
            if let Some(s) = vocab.synonyms[t] {
                out.push(s);
                continue;
            }
        }
        out.push(t);
    }
    for _ in 0..cfg.n_distractors {
        out.push(rng.gen_range(vocab.background_start..vocab.size));
    }
    OcrTokenSequence::new(out)
}

/// Generates utterance `index` of `split` from its own derived seed.
pub fn gen_utterance(cfg: &CorpusConfig, vocab: &HomophoneVocab, split: Split, index: usize) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, split.index(), index as u64));
    let spoken = vocab.spoken_range();
    let tokens = loop {
        let len = rng.gen_range(cfg.min_sentence_len..=cfg.max_sentence_len);
        let mut tokens: Vec<usize> = Vec::with_capacity(len);
        while tokens.len() < len {
            let t = rng.gen_range(spoken.clone());
            // No adjacent repeats: keeps every sentence CTC-feasible at
            // subsampling factors up to min_duration.
            if tokens.last() != Some(&t) {
                tokens.push(t);
            }
        }
        if split.owns_bucket(sentence_bucket(&tokens)) {
            break tokens;
        }
    };
    let durations: Vec<usize> = tokens
        .iter()
        .map(|_| rng.gen_range(cfg.min_duration..=cfg.max_duration))
        .collect();
    let audio = featurize(&tokens, vocab, &durations, cfg.noise_sigma, &mut rng)?;
    let ocr = corrupt_to_ocr(&tokens, cfg, vocab, &mut rng);
    Ok(Utterance {
        id: format!("{}-{index:05}", split.name()),
        ref_tokens: tokens,
        durations,
        audio,
        ocr,
    })
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<(HomophoneVocab, Corpus)> {
    let vocab = HomophoneVocab::build(cfg)?;
    let gen = |s: Split| -> Result<Vec<Utterance>> {
        (0..cfg.split_size(s)).map(|i| gen_utterance(cfg, &vocab, s, i)).collect()
    };
    let corpus = Corpus {
        train: gen(Split::Train)?,
        valid: gen(Split::Valid)?,
        test: gen(Split::Test)?,
    };
    Ok((vocab, corpus))
}

// ---- file format --------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    d_in: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(rename = "ref")]
    ref_tokens: Vec<usize>,
    ocr: Vec<usize>,
    durations: Vec<usize>,
    n_frames: usize,
    /// Base64 of little-endian `f32`, row-major `n_frames × d_in`.
    frames: String,
}

/// Serializes one split: a header line, then one JSON record per utterance.
pub fn encode_split(utts: &[Utterance], d_in: usize) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        count: utts.len(),
        d_in,
    })
    .map_err(|e| Error::Input(e.to_string()))?;
    out.push('\n');
    for u in utts {
        if u.audio.cols() != d_in && !u.audio.is_empty() {
            return Err(Error::dim("encode_split", u.audio.shape(), &[d_in]));
        }
        let mut bytes = Vec::with_capacity(u.audio.len() * 4);
        for &v in u.audio.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let rec = Record {
            id: u.id.clone(),
            ref_tokens: u.ref_tokens.clone(),
            ocr: u.ocr.tokens.clone(),
            durations: u.durations.clone(),
            n_frames: u.audio.rows(),
            frames: B64.encode(bytes),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Input(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses one split. Record index 0 is the header; errors name the record.
pub fn decode_split(text: &str) -> Result<(usize, Vec<Utterance>)> {
    let mut lines = text.lines();
    let perr = |record: usize, msg: String| Error::Parse { record, msg };
    let header: Header = lines
        .next()
        .ok_or_else(|| perr(0, "missing header".into()))
        .and_then(|l| serde_json::from_str(l).map_err(|e| perr(0, e.to_string())))?;
    if header.format != FORMAT_NAME {
        return Err(perr(0, format!("format `{}` is not `{FORMAT_NAME}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(perr(0, format!("unsupported version {}", header.version)));
    }
    let d_in = header.d_in;
    let mut utts = Vec::with_capacity(header.count.min(1 << 20));
    for (k, line) in lines.enumerate() {
        let idx = k + 1;
        if idx > header.count {
            return Err(perr(idx, format!("more records than the declared {}", header.count)));
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| perr(idx, e.to_string()))?;
        if rec.ref_tokens.is_empty() {
            return Err(perr(idx, "empty reference".into()));
        }
        if rec.durations.len() != rec.ref_tokens.len() || rec.durations.contains(&0) {
            return Err(perr(idx, "durations must be positive, one per reference token".into()));
        }
        let total = rec.durations.iter().try_fold(0usize, |a, &d| a.checked_add(d));
        if total != Some(rec.n_frames) {
            return Err(perr(idx, format!("n_frames {} does not match durations", rec.n_frames)));
        }
        let bytes = B64.decode(rec.frames.as_bytes()).map_err(|e| perr(idx, e.to_string()))?;
        let expect = rec.n_frames.checked_mul(d_in).and_then(|n| n.checked_mul(4));
        if expect != Some(bytes.len()) {
            return Err(perr(idx, format!("frame block has {} bytes, expected {} × {d_in} × 4", bytes.len(), rec.n_frames)));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let audio = Tensor::new(vec![rec.n_frames, d_in], data).map_err(|e| perr(idx, e.to_string()))?;
        utts.push(Utterance {
            id: rec.id,
            ref_tokens: rec.ref_tokens,
            durations: rec.durations,
            audio,
            ocr: OcrTokenSequence::new(rec.ocr),
        });
    }
    if utts.len() != header.count {
        return Err(perr(utts.len() + 1, format!("header declares {} records, found {}", header.count, utts.len())));
    }
    Ok((d_in, utts))
}

pub fn write_corpus(path: &Path, utts: &[Utterance], d_in: usize) -> Result<()> {
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(encode_split(utts, d_in)?.as_bytes()).at(path)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    Ok(decode_split(&fs::read_to_string(path).at(path)?)?.1)
}

pub const VOCAB_FILE: &str = "vocab.json";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `vocab.json`.
pub fn write_corpus_dir(dir: &Path, vocab: &HomophoneVocab, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for s in Split::ALL {
        write_corpus(&dir.join(split_file(s)), corpus.split(s), vocab.d_in())?;
    }
    write_vocab(&dir.join(VOCAB_FILE), vocab)
}

pub fn write_vocab(path: &Path, vocab: &HomophoneVocab) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab).map_err(|e| Error::Input(e.to_string()))?;
    fs::write(path, text + "\n").at(path)?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<HomophoneVocab> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: 0,
        msg: e.to_string(),
    })
}

pub fn read_corpus_dir(dir: &Path) -> Result<(HomophoneVocab, Corpus)> {
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
    let corpus = Corpus {
        train: read_corpus(&dir.join(split_file(Split::Train)))?,
        valid: read_corpus(&dir.join(split_file(Split::Valid)))?,
        test: read_corpus(&dir.join(split_file(Split::Test)))?,
    };
    Ok((vocab, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_train: 5,
            n_valid: 2,
            n_test: 2,
            ..Default::default()
        }
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = CorpusConfig {
            p_ocr_drop: 1.5,
            ..small()
        };
        assert!(matches!(gen_corpus(&cfg), Err(Error::Config(_))));
        let cfg = CorpusConfig {
            group_size: 1,
            ..small()
        };
        assert!(matches!(gen_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_layout() {
        let v = HomophoneVocab::build(&small()).unwrap();
        assert_eq!(v.groups.len(), 8);
        assert!(v.same_group(0, 2));
        assert!(!v.same_group(2, 3));
        assert!(!v.same_group(0, 0));
        assert!(v.is_background(59) && !v.is_background(51));
        for (t, s) in v.synonyms.iter().enumerate() {
            if let Some(s) = s {
                assert!(!v.is_homophone(*s) && !v.is_background(*s) && *s != t);
            }
        }
        for (i, p) in v.prototypes.iter().enumerate() {
            for q in &v.prototypes[i + 1..] {
                let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 2.0);
            }
        }
    }

    #[test]
    fn utterance_invariants() {
        let cfg = small();
        let (vocab, corpus) = gen_corpus(&cfg).unwrap();
        for s in Split::ALL {
            for u in corpus.split(s) {
                assert!(!u.ref_tokens.is_empty());
                assert_eq!(u.audio.rows(), u.durations.iter().sum::<usize>());
                assert!(u.ref_tokens.iter().all(|&t| !vocab.is_background(t)));
                assert!(s.owns_bucket(sentence_bucket(&u.ref_tokens)));
            }
        }
    }

    #[test]
    fn header_count_mismatch_is_parse_error() {
        let (vocab, corpus) = gen_corpus(&small()).unwrap();
        let text = encode_split(&corpus.train, vocab.d_in()).unwrap();
        let broken = text.replacen("\"count\":5", "\"count\":7", 1);
        assert!(matches!(decode_split(&broken), Err(Error::Parse { .. })));
        let broken = text.replacen("\"count\":5", "\"count\":2", 1);
        assert!(matches!(decode_split(&broken), Err(Error::Parse { record: 3, .. })));
    }
}
