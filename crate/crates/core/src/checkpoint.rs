//! Binary checkpoints: model parameters, optimizer moments, step and RNG.
//!
//! Layout: `MSRCKPT\0`, u32 LE version, u32 LE header length, JSON header,
//! then for each manifest entry in order its value, first and second moment
//! as LE f32. Values are kept on the f32 grid so the round trip is exact.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, PathContext, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::train::{Moments, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"MSRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// u128 word position, as a decimal string.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    fusion: bool,
    train: TrainConfig,
    step: u64,
    skipped: usize,
    rng: RngState,
    params: Vec<Entry>,
}

fn push_f32(out: &mut Vec<u8>, t: &Tensor) {
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let header = Header {
        model: t.model.config.clone(),
        fusion: t.model.fusion,
        train: t.cfg.clone(),
        step: t.step,
        skipped: t.skipped,
        rng: RngState {
            seed: t.rng.get_seed(),
            stream: t.rng.get_stream(),
            word_pos: t.rng.get_word_pos().to_string(),
        },
        params: t
            .model
            .params
            .iter()
            .map(|(name, v)| Entry {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 12 * t.model.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, v) in t.model.params.iter() {
        let (m, s) = t
            .moments
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no optimizer moments for `{name}`")))?;
        push_f32(&mut out, v);
        push_f32(&mut out, m);
        push_f32(&mut out, s);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> std::result::Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        let b = self.take(4 * n, what)?;
        let data = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor::new(shape.to_vec(), data).expect("length matches shape"))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    r.pos = MAGIC.len();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    header.model.validate()?;
    let expected = Model::expected_shapes(&header.model, header.fusion)?;
    let listed: Vec<&String> = header.params.iter().map(|e| &e.name).collect();
    if listed != expected.keys().collect::<Vec<_>>() {
        return Err(CheckpointError::Header("parameter manifest does not match the model config".into()).into());
    }
    let mut params = ParamStore::new();
    let mut moments = Moments::new();
    for e in &header.params {
        let want = &expected[&e.name];
        if &e.shape != want {
            return Err(CheckpointError::Shape {
                name: e.name.clone(),
                found: e.shape.clone(),
                expected: want.clone(),
            }
            .into());
        }
        let v = r.tensor(&e.shape, &e.name)?;
        let m = r.tensor(&e.shape, &e.name)?;
        let s = r.tensor(&e.shape, &e.name)?;
        params.insert(e.name.clone(), v);
        moments.insert(e.name.clone(), (m, s));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", buf.len() - r.pos)).into());
    }
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| CheckpointError::Header(format!("bad rng word_pos `{}`", header.rng.word_pos)))?;
    let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    let model = Model {
        config: header.model,
        fusion: header.fusion,
        params,
    };
    let mut t = Trainer::new(model, header.train)?;
    t.step = header.step;
    t.skipped = header.skipped;
    t.moments = moments;
    t.rng = rng;
    Ok(t)
}

pub fn save(path: &Path, t: &Trainer) -> Result<()> {
    fs::write(path, to_bytes(t)?).at(path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&fs::read(path).at(path)?)
}
