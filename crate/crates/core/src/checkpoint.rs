//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GNCK" | version u32 | entry count u32 | entries...
//! entry: name len u32 | name utf-8 | dtype u8 | rank u32 | dims u32 * rank | payload
//! ```
//!
//! Payloads: dtype 0 is `f32` values, dtype 1 is `ceil(n/64)` `u64` words
//! (bit `i` of the flattened tensor, 1 for +1) followed by a `valid_bits`
//! `u32` for the last word, dtype 2 is `i8` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::groupnet::{Model, ModelSpec, Stage};
use crate::nn::layers::BatchNorm2d;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GNCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bits { words: Vec<u64>, valid_bits: u32 },
    I8(Vec<i8>),
}

impl Payload {
    pub fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::Bits { .. } => 1,
            Payload::I8(_) => 2,
        }
    }

    /// Packs `sign(x)` (with `sign(0) = +1`) into one flat bit lane.
    pub fn bits_from_signs(x: &[f64]) -> Self {
        let mut words = vec![0u64; x.len().div_ceil(64)];
        for (i, &v) in x.iter().enumerate() {
            if v >= 0.0 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        let valid_bits = match x.len() % 64 {
            0 if x.is_empty() => 0,
            0 => 64,
            r => r as u32,
        };
        Payload::Bits { words, valid_bits }
    }

    /// Payload size in bytes as stored.
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::F32(v) => 4 * v.len(),
            Payload::Bits { words, .. } => 8 * words.len() + 4,
            Payload::I8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn f32(name: impl Into<String>, dims: &[usize], values: &[f64]) -> Self {
        Entry {
            name: name.into(),
            dims: dims.to_vec(),
            payload: Payload::F32(values.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn bits(name: impl Into<String>, dims: &[usize], values: &[f64]) -> Self {
        Entry {
            name: name.into(),
            dims: dims.to_vec(),
            payload: Payload::bits_from_signs(values),
        }
    }

    pub fn i8(name: impl Into<String>, dims: &[usize], values: Vec<i8>) -> Self {
        Entry {
            name: name.into(),
            dims: dims.to_vec(),
            payload: Payload::I8(values),
        }
    }

    /// Values as `f64`: floats widened, bits decoded to ±1, int8 widened.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::I8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::Bits { words, .. } => (0..self.numel())
                .map(|i| if words[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated at byte {} reading {what} ({n} bytes needed, {} left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, e: Entry) {
        self.entries.push(e);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Looks up `name` and checks its dimensions.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&Entry> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing entry {name:?}")))?;
        if e.dims != dims {
            return Err(Error::shape(format!("layer {name}"), dims, &e.dims));
        }
        Ok(e)
    }

    /// Embeds UTF-8 text as an int8 entry.
    pub fn push_text(&mut self, name: &str, text: &str) {
        let bytes: Vec<i8> = text.bytes().map(|b| b as i8).collect();
        self.push(Entry::i8(name, &[bytes.len()], bytes));
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing entry {name:?}")))?;
        match &e.payload {
            Payload::I8(v) => String::from_utf8(v.iter().map(|&b| b as u8).collect())
                .map_err(|_| Error::Format(format!("{name} is not utf-8"))),
            _ => Err(Error::Format(format!("{name} is not a text entry"))),
        }
    }

    /// Total payload bytes of entries whose name satisfies `keep`.
    pub fn payload_bytes(&self, keep: impl Fn(&Entry) -> bool) -> usize {
        self.entries.iter().filter(|e| keep(e)).map(|e| e.payload.byte_len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let expected = match &e.payload {
                Payload::F32(v) => v.len(),
                Payload::I8(v) => v.len(),
                Payload::Bits { words, valid_bits } => {
                    let n = e.numel();
                    let ok_bits = if n == 0 { 0 } else { (n - 1) % 64 + 1 };
                    if words.len() != n.div_ceil(64) || *valid_bits as usize != ok_bits {
                        return Err(Error::Format(format!("{}: bit payload does not match dims", e.name)));
                    }
                    n
                }
            };
            if expected != e.numel() {
                return Err(Error::shape(format!("entry {}", e.name), &e.dims, &[expected]));
            }
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.dtype());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
                Payload::Bits { words, valid_bits } => {
                    words.iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
                    out.extend_from_slice(&valid_bits.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version > VERSION || version == 0 {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("entry name at byte {} is not utf-8", r.pos)))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.u32("rank")? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let payload = match dtype {
                0 => Payload::F32(
                    r.take(4 * n, "f32 payload")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => {
                    let words = r
                        .take(8 * n.div_ceil(64), "bit payload")?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let valid_bits = r.u32("valid bits")?;
                    let ok_bits = if n == 0 { 0 } else { (n - 1) % 64 + 1 };
                    if valid_bits as usize != ok_bits {
                        return Err(Error::Format(format!(
                            "{name}: valid_bits {valid_bits} inconsistent with {n} elements"
                        )));
                    }
                    Payload::Bits { words, valid_bits }
                }
                2 => Payload::I8(r.take(n, "i8 payload")?.iter().map(|&b| b as i8).collect()),
                d => return Err(Error::UnknownDtype(d)),
            };
            entries.push(Entry { name, dims, payload });
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after last entry", buf.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    /// Writes to a temporary sibling and renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub const CONFIG_ENTRY: &str = "__config__";
pub const STAGE_ENTRY: &str = "__stage__";
pub const EXPORT_ENTRY: &str = "__export__";

fn running_names(bn: &BatchNorm2d) -> (String, String) {
    let base = bn.gamma.name.strip_suffix(".gamma").unwrap_or(&bn.gamma.name);
    (format!("{base}.running_mean"), format!("{base}.running_var"))
}

/// Serializes a training model: latent weights and every other parameter
/// as `f32`, batch-norm running statistics, the sign bits of each binary
/// layer, the spec text and the training stage.
///
/// Values are stored at `f32` precision; models whose state was rounded
/// with [`Model::round_to_f32`] round-trip bit-exactly.
pub fn model_to_checkpoint(model: &Model) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.push_text(CONFIG_ENTRY, &model.spec.to_text());
    let stage = match model.stage() {
        Stage::One => 1,
        Stage::Two => 2,
    };
    c.push(Entry::i8(STAGE_ENTRY, &[1], vec![stage]));
    for p in model.params() {
        c.push(Entry::f32(p.name.clone(), p.shape(), p.data()));
    }
    for bn in model.batch_norms() {
        let (m, v) = running_names(bn);
        c.push(Entry::f32(m, &[bn.channels()], &bn.running_mean));
        c.push(Entry::f32(v, &[bn.channels()], &bn.running_var));
    }
    for conv in model.convs() {
        if conv.is_binary() {
            c.push(Entry::bits(format!("{}.bits", conv.name()), &conv.shape(), conv.weight.data()));
        }
    }
    c
}

/// Rebuilds a training model; shape mismatches name the offending layer.
pub fn model_from_checkpoint(c: &Checkpoint) -> Result<Model> {
    if c.get(EXPORT_ENTRY).is_some() {
        return Err(Error::Format("exported artifact has no latent weights to train or reload".into()));
    }
    let spec = ModelSpec::from_text(&c.text(CONFIG_ENTRY)?)?;
    let mut model = Model::new(spec)?;
    let stage = match c.require(STAGE_ENTRY, &[1])?.to_f64()[0] as i64 {
        1 => Stage::One,
        2 => Stage::Two,
        s => return Err(Error::Format(format!("unknown training stage {s}"))),
    };
    model.set_stage(stage);
    for p in model.params_mut() {
        let shape = p.shape().to_vec();
        p.value.data = c.require(&p.name, &shape)?.to_f64();
    }
    for bn in model.batch_norms_mut() {
        let (m, v) = running_names(bn);
        let ch = [bn.channels()];
        bn.running_mean = c.require(&m, &ch)?.to_f64();
        bn.running_var = c.require(&v, &ch)?.to_f64();
    }
    Ok(model)
}
