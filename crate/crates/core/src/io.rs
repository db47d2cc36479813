//! Binary artifacts: `LFTM` parameter checkpoints and `LFTD` latent dumps.
//! All integers and floats are little-endian.
//!
//! `LFTM`: magic, `u32` version (1), `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `u64` byte offset
//! into the blob section; the blob section (raw `f64` values) follows the
//! manifest.
//!
//! `LFTD`: magic, `u32` version (1), `u32` dtype (0 = `f32`), `u32` slice
//! count, `u32` token count, `u32` width, then one row-major
//! `[tokens, width]` block per slice.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::Parameters;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFTM";
pub const DUMP_MAGIC: &[u8; 4] = b"LFTD";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.what, reason)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.err(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }
}

fn to_u32(what: &'static str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(what, format!("{v} does not fit in u32")))
}

/// Named tensors, kept sorted by name so encoding is canonical.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_model<P: Parameters + ?Sized>(prefix: &str, model: &P) -> Self {
        let mut c = Self::new();
        c.insert_model(prefix, model);
        c
    }

    /// Adds every parameter of `model` under `prefix.`.
    pub fn insert_model<P: Parameters + ?Sized>(&mut self, prefix: &str, model: &P) {
        for (name, entry) in model.state_dict() {
            self.entries.insert(format!("{prefix}.{name}"), entry);
        }
    }

    /// Loads the parameters stored under `prefix.` into `model`.
    pub fn load_model<P: Parameters + ?Sized>(&self, prefix: &str, model: &mut P) -> Result<()> {
        let head = format!("{prefix}.");
        let state = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&head).map(|k| (k.to_string(), v.clone())))
            .collect();
        model.load_state(&state)
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        self.entries.insert(name.to_string(), (shape, values));
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, vec![1], vec![value]);
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::input(format!("checkpoint lacks entry {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.get(name)? {
            (_, v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::input(format!("checkpoint entry {name} is not a scalar"))),
        }
    }

    /// A scalar entry that must hold a non-negative integer.
    pub fn count(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v >= 0.0 && v.fract() == 0.0 && v <= 2f64.powi(53) {
            Ok(v as usize)
        } else {
            Err(Error::input(format!("checkpoint entry {name} = {v} is not a count")))
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, values) = self.get(name)?;
        Tensor::new(values.clone(), shape)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        const WHAT: &str = "checkpoint";
        let mut head = Vec::new();
        head.extend_from_slice(CHECKPOINT_MAGIC);
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        head.extend_from_slice(&to_u32(WHAT, self.entries.len())?.to_le_bytes());
        let mut blob = Vec::new();
        for (name, (shape, values)) in &self.entries {
            if shape.iter().product::<usize>() != values.len() {
                return Err(Error::dim(format!("checkpoint entry {name}: shape {shape:?} vs {} values", values.len())));
            }
            head.extend_from_slice(&to_u32(WHAT, name.len())?.to_le_bytes());
            head.extend_from_slice(name.as_bytes());
            head.extend_from_slice(&to_u32(WHAT, shape.len())?.to_le_bytes());
            for &d in shape {
                head.extend_from_slice(&to_u32(WHAT, d)?.to_le_bytes());
            }
            head.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        head.extend_from_slice(&blob);
        Ok(head)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let n = r.u32()? as usize;
        // every manifest entry occupies at least 16 bytes
        if n > r.remaining() / 16 {
            return Err(r.err(format!("{n} entries cannot fit in {} bytes", r.remaining())));
        }
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(r.err(format!("entry {name}: rank {rank} outside 1..={MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(r.err(format!("entry {name}: zero-length axis")));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| r.err(format!("entry {name}: element count overflows")))?;
                shape.push(d);
            }
            let offset = r.u64()?;
            manifest.push((name, shape, numel, offset));
        }
        let blob = &bytes[r.pos..];
        let mut entries = BTreeMap::new();
        for (name, shape, numel, offset) in manifest {
            let start = usize::try_from(offset).ok().filter(|&o| o <= blob.len());
            let bytes_needed = numel.checked_mul(8);
            let span = match (start, bytes_needed) {
                (Some(s), Some(b)) if b <= blob.len() - s => &blob[s..s + b],
                _ => return Err(r.err(format!("entry {name}: data outside the blob section"))),
            };
            let values: Vec<f64> = span
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(r.err(format!("entry {name}: non-finite value")));
            }
            if entries.insert(name.clone(), (shape, values)).is_some() {
                return Err(r.err(format!("duplicate entry {name}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Per-layer latents of a token stream. `slices[l]` is `[n_tokens, d_model]`
/// row-major; values are stored as `f32` on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub n_tokens: usize,
    pub d_model: usize,
    pub slices: Vec<Vec<f64>>,
}

impl LatentDump {
    pub fn new(n_tokens: usize, d_model: usize, slices: Vec<Vec<f64>>) -> Result<Self> {
        if n_tokens == 0 || d_model == 0 || slices.is_empty() {
            return Err(Error::input("latent dump needs tokens, width and at least one slice"));
        }
        if let Some(bad) = slices.iter().find(|s| s.len() != n_tokens * d_model) {
            return Err(Error::dim(format!(
                "latent slice has {} values, expected {}",
                bad.len(),
                n_tokens * d_model
            )));
        }
        Ok(Self {
            n_tokens,
            d_model,
            slices,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    /// Rows `tokens` of slice `l` as a `[tokens.len(), d_model]` tensor.
    pub fn rows(&self, l: usize, tokens: &[usize]) -> Result<Tensor> {
        let slice = self
            .slices
            .get(l)
            .ok_or_else(|| Error::input(format!("dump has no slice {l}")))?;
        let d = self.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.n_tokens {
                return Err(Error::input(format!("token {t} beyond dump of {}", self.n_tokens)));
            }
            data.extend_from_slice(&slice[t * d..(t + 1) * d]);
        }
        Tensor::new(data, &[tokens.len(), d])
    }

    /// Values rounded through `f32`, as they would read back from disk.
    pub fn quantized(&self) -> Self {
        let slices = self
            .slices
            .iter()
            .map(|s| s.iter().map(|&v| v as f32 as f64).collect())
            .collect();
        Self {
            slices,
            ..self.clone()
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        const WHAT: &str = "latent dump";
        let mut out = Vec::with_capacity(24 + 4 * self.n_slices() * self.n_tokens * self.d_model);
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in [self.n_slices(), self.n_tokens, self.d_model] {
            out.extend_from_slice(&to_u32(WHAT, v)?.to_le_bytes());
        }
        for s in &self.slices {
            for &v in s {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "latent dump");
        r.magic(DUMP_MAGIC)?;
        let dtype = r.u32()?;
        if dtype != 0 {
            return Err(r.err(format!("unsupported dtype {dtype}")));
        }
        let slices = r.u32()? as usize;
        let tokens = r.u32()? as usize;
        let width = r.u32()? as usize;
        if slices == 0 || tokens == 0 || width == 0 {
            return Err(r.err("zero-sized dimension"));
        }
        let per_slice = tokens
            .checked_mul(width)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| r.err("dimensions overflow"))?;
        let total = per_slice
            .checked_mul(slices)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.err("dimensions overflow"))?;
        if total != r.remaining() {
            return Err(r.err(format!("expected {total} payload bytes, found {}", r.remaining())));
        }
        let mut out = Vec::with_capacity(slices);
        for _ in 0..slices {
            let block = r.take(per_slice * 4)?;
            let values: Vec<f64> = block
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(r.err("non-finite latent value"));
            }
            out.push(values);
        }
        Self::new(tokens, width, out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
