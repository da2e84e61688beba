//! Bit-exact frozen-model container and the packed binary-weight runtime.
//!
//! Container layout (all integers little-endian):
//! `"SBT1"` magic · format version `u16` · config length `u32` + canonical
//! JSON config · module count `u32` · module records · trailing CRC32 (IEEE)
//! over every preceding byte. A module record is a length-prefixed name, a
//! kind byte (0 = binarized, 1 = FP32, 2 = bit mask), rank + dims, then the
//! payload: binarized modules store one FP32 gain, a packed survival-mask
//! bitstream, and a packed sign bitstream (bit = 1 encodes +1); FP32 blocks
//! store a count and raw values; bit masks store a packed bitstream. Bit `e`
//! of a row-major element index lives in byte `e/8` at position `e%8`,
//! least-significant bit first.
//!
//! The runtime rebuilds a frozen transformer from a container and runs it in
//! FP32 with FP64 accumulators. Two paths exist deliberately: a reference
//! path over materialized `{−α, 0, +α}` weights and full masked-softmax
//! attention, and a packed path that accumulates kept inputs by sign
//! (`α·(Σ x₊ − Σ x₋)`) and short-circuits single-step attention to the
//! copy rows plus one mixed row. A counted variant of the packed path tallies
//! multiply-adds where both operands are nonzero, bucketed to match the
//! closed-form cost components.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::Serialize;

use crate::attention::{identity_mask, magnitude_mask, step_t_mask, AttentionVariant};
use crate::biprop::FrozenBinarized;
use crate::costmodel::FlopCounter;
use crate::error::{Error, Result};
use crate::model::{
    key_valid_from_lens, mean_weights_from_lens, FrozenEntry, ModelConfig, PositionalKind, Task,
    WeightMode, NORM_EPS,
};
use crate::ops::sinusoidal_encoding;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SBT1";
pub const FORMAT_VERSION: u16 = 1;

fn crc_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (n, slot) in table.iter_mut().enumerate() {
            let mut c = n as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

/// CRC32 (IEEE 802.3 polynomial, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// Pack 0/1 bytes into an LSB-first bitstream.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (e, &bit) in bits.iter().enumerate() {
        if bit != 0 {
            out[e / 8] |= 1 << (e % 8);
        }
    }
    out
}

/// Expand an LSB-first bitstream back to `n` 0/1 bytes.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<u8>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::data(format!(
            "bitstream holds {} bytes, {} elements need {}",
            bytes.len(),
            n,
            n.div_ceil(8)
        )));
    }
    Ok((0..n).map(|e| (bytes[e / 8] >> (e % 8)) & 1).collect())
}

/// A decoded (or about-to-be-encoded) model container.
#[derive(Debug, Clone)]
pub struct PackedModel {
    pub config: ModelConfig,
    pub entries: Vec<FrozenEntry>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

const KIND_BINARIZED: u8 = 0;
const KIND_FP32: u8 = 1;
const KIND_BITMASK: u8 = 2;

fn push_name_and_dims(buf: &mut Vec<u8>, name: &str, kind: u8, dims: &[usize]) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::data(format!("module name '{name}' too long")));
    }
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(kind);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    Ok(())
}

impl PackedModel {
    pub fn new(config: ModelConfig, entries: Vec<FrozenEntry>) -> Self {
        PackedModel { config, entries }
    }

    /// Serialize to container bytes.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::data(format!("encoding config: {e}")))?;
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for entry in &self.entries {
            match entry {
                FrozenEntry::Binarized(b) => {
                    let n: usize = b.dims.iter().product();
                    if b.mask.len() != n || b.signs.len() != n {
                        return Err(Error::data(format!(
                            "module '{}': {} elements but {} mask / {} sign entries",
                            b.name,
                            n,
                            b.mask.len(),
                            b.signs.len()
                        )));
                    }
                    push_name_and_dims(&mut buf, &b.name, KIND_BINARIZED, &b.dims)?;
                    buf.extend_from_slice(&b.alpha.to_le_bytes());
                    buf.extend_from_slice(&pack_bits(&b.mask));
                    buf.extend_from_slice(&pack_bits(&b.signs));
                }
                FrozenEntry::Fp32 { name, dims, values } => {
                    if values.len() != dims.iter().product::<usize>() {
                        return Err(Error::data(format!(
                            "module '{name}': {} values for dims {dims:?}",
                            values.len()
                        )));
                    }
                    push_name_and_dims(&mut buf, name, KIND_FP32, dims)?;
                    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
                    for v in values {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                FrozenEntry::BitMask { name, dims, bits } => {
                    if bits.len() != dims.iter().product::<usize>() {
                        return Err(Error::data(format!(
                            "module '{name}': {} bits for dims {dims:?}",
                            bits.len()
                        )));
                    }
                    push_name_and_dims(&mut buf, name, KIND_BITMASK, dims)?;
                    buf.extend_from_slice(&pack_bits(bits));
                }
            }
        }
        let crc = crc32(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    /// Parse container bytes. Validation order: magic, version, CRC over the
    /// whole preceding stream, then the module table.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 {
            return Err(Error::Truncated(bytes.len()));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::CrcMismatch { stored, computed });
        }

        let mut cur = Cursor { buf: body, pos: 6 };
        let config_len = cur.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)
            .map_err(|e| Error::data(format!("container config: {e}")))?;
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::data("module name is not UTF-8"))?;
            let kind = cur.u8()?;
            let rank = cur.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let packed_len = n.div_ceil(8);
            entries.push(match kind {
                KIND_BINARIZED => {
                    let alpha = cur.f32()?;
                    let mask = unpack_bits(cur.take(packed_len)?, n)?;
                    let signs = unpack_bits(cur.take(packed_len)?, n)?;
                    FrozenEntry::Binarized(FrozenBinarized {
                        name,
                        dims,
                        mask,
                        signs,
                        alpha,
                    })
                }
                KIND_FP32 => {
                    let count = cur.u32()? as usize;
                    if count != n {
                        return Err(Error::data(format!(
                            "module '{name}': {count} values for dims {dims:?}"
                        )));
                    }
                    let raw = cur.take(4 * count)?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    FrozenEntry::Fp32 { name, dims, values }
                }
                KIND_BITMASK => {
                    let bits = unpack_bits(cur.take(packed_len)?, n)?;
                    FrozenEntry::BitMask { name, dims, bits }
                }
                other => {
                    return Err(Error::data(format!(
                        "module '{name}': unknown kind byte {other}"
                    )))
                }
            });
        }
        if cur.pos != body.len() {
            return Err(Error::data(format!(
                "{} trailing bytes after module table",
                body.len() - cur.pos
            )));
        }
        Ok(PackedModel { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)
            .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::data(format!("reading {}: {e}", path.display())))?;
        PackedModel::decode(&bytes)
    }

    /// Per-module payload accounting, reconciled against the analytic size
    /// model: a binarized module stores `elements` mask bits, `elements`
    /// sign bits, and one 32-bit gain; everything else is 32-bit payload or
    /// raw mask bits.
    pub fn report(&self) -> ContainerReport {
        let mut modules = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let row = match entry {
                FrozenEntry::Binarized(b) => {
                    let n = b.dims.iter().product::<usize>() as u64;
                    ModuleBits {
                        name: b.name.clone(),
                        mask_bits: n,
                        sign_bits: n,
                        alpha_bits: 32,
                        fp32_bits: 0,
                    }
                }
                FrozenEntry::Fp32 { name, values, .. } => ModuleBits {
                    name: name.clone(),
                    mask_bits: 0,
                    sign_bits: 0,
                    alpha_bits: 0,
                    fp32_bits: 32 * values.len() as u64,
                },
                FrozenEntry::BitMask { name, bits, .. } => ModuleBits {
                    name: name.clone(),
                    mask_bits: bits.len() as u64,
                    sign_bits: 0,
                    alpha_bits: 0,
                    fp32_bits: 0,
                },
            };
            modules.push(row);
        }
        let information_bits = modules
            .iter()
            .filter(|m| m.alpha_bits > 0)
            .map(|m| m.mask_bits + m.alpha_bits)
            .sum();
        let payload_bits = modules
            .iter()
            .map(|m| m.mask_bits + m.sign_bits + m.alpha_bits + m.fp32_bits)
            .sum();
        ContainerReport {
            modules,
            information_bits,
            payload_bits,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleBits {
    pub name: String,
    pub mask_bits: u64,
    pub sign_bits: u64,
    pub alpha_bits: u64,
    pub fp32_bits: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContainerReport {
    pub modules: Vec<ModuleBits>,
    /// 1 bit per binarized latent weight + 32 per gain (the published size
    /// metric).
    pub information_bits: u64,
    /// Everything the container actually stores, excluding header and CRC.
    pub payload_bits: u64,
}

/// Which inference path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Materialized `{−α, 0, +α}` weights, full masked-softmax attention.
    Reference,
    /// Sign-bucketed bit kernel and the single-step attention fast path.
    Packed,
}

enum FrozenLinear {
    Dense {
        weight: Tensor<f32>,
        bias: Vec<f32>,
    },
    Binary {
        alpha: f64,
        inp: usize,
        /// Kept input indices per output unit, split by sign.
        pos: Vec<Vec<u32>>,
        neg: Vec<Vec<u32>>,
        materialized: Tensor<f32>,
    },
}

impl FrozenLinear {
    fn from_binarized(b: &FrozenBinarized) -> Result<Self> {
        if b.dims.len() != 2 {
            return Err(Error::data(format!(
                "module '{}': expected a matrix, got dims {:?}",
                b.name, b.dims
            )));
        }
        let (out, inp) = (b.dims[0], b.dims[1]);
        let mut pos = vec![Vec::new(); out];
        let mut neg = vec![Vec::new(); out];
        for o in 0..out {
            for i in 0..inp {
                let e = o * inp + i;
                if b.mask[e] != 0 {
                    if b.signs[e] != 0 {
                        pos[o].push(i as u32);
                    } else {
                        neg[o].push(i as u32);
                    }
                }
            }
        }
        Ok(FrozenLinear::Binary {
            alpha: b.alpha as f64,
            inp,
            pos,
            neg,
            materialized: b.materialize::<f32>()?,
        })
    }

    fn dense(weight: Tensor<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.rank() != 2 || weight.dim(0) != bias.len() {
            return Err(Error::shape("frozen linear", weight.dims(), &[bias.len(), 0]));
        }
        Ok(FrozenLinear::Dense { weight, bias })
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            FrozenLinear::Dense { weight, .. } => (weight.dim(0), weight.dim(1)),
            FrozenLinear::Binary {
                inp, materialized, ..
            } => (materialized.dim(0), *inp),
        }
    }

    /// Apply to every row of `x` (last axis = input features), keeping the
    /// leading axes. The packed path uses sign-bucketed accumulation for
    /// binary weights; both paths accumulate in FP64.
    fn apply(
        &self,
        x: &Tensor<f32>,
        mode: InferMode,
        mut counted: Option<(&mut FlopCounter, &str)>,
    ) -> Result<Tensor<f32>> {
        let (out, inp) = self.shape();
        let rank = x.rank();
        if x.dim(rank - 1) != inp {
            return Err(Error::shape("frozen linear", x.dims(), &[out, inp]));
        }
        let rows = x.numel() / inp;
        let mut dims = x.dims().to_vec();
        *dims.last_mut().unwrap() = out;
        let mut y = Tensor::zeros(&dims);
        for r in 0..rows {
            let row = &x.data()[r * inp..(r + 1) * inp];
            let out_row = &mut y.data_mut()[r * out..(r + 1) * out];
            match self {
                FrozenLinear::Dense { weight, bias } => {
                    for o in 0..out {
                        let w_row = &weight.data()[o * inp..(o + 1) * inp];
                        let mut acc = 0.0f64;
                        let mut macs = 0u64;
                        for i in 0..inp {
                            let w = w_row[i];
                            let v = row[i];
                            acc += w as f64 * v as f64;
                            if counted.is_some() && w != 0.0 && v != 0.0 {
                                macs += 1;
                            }
                        }
                        if let Some((counter, bucket)) = counted.as_mut() {
                            counter.record(bucket, macs);
                        }
                        out_row[o] = (acc + bias[o] as f64) as f32;
                    }
                }
                FrozenLinear::Binary {
                    alpha,
                    pos,
                    neg,
                    materialized,
                    ..
                } => match mode {
                    InferMode::Reference => {
                        for o in 0..out {
                            let w_row = &materialized.data()[o * inp..(o + 1) * inp];
                            let mut acc = 0.0f64;
                            for i in 0..inp {
                                acc += w_row[i] as f64 * row[i] as f64;
                            }
                            out_row[o] = acc as f32;
                        }
                    }
                    InferMode::Packed => {
                        for o in 0..out {
                            let mut acc = 0.0f64;
                            let mut macs = 0u64;
                            for &i in &pos[o] {
                                let v = row[i as usize];
                                acc += v as f64;
                                if counted.is_some() && v != 0.0 {
                                    macs += 1;
                                }
                            }
                            for &i in &neg[o] {
                                let v = row[i as usize];
                                acc -= v as f64;
                                if counted.is_some() && v != 0.0 {
                                    macs += 1;
                                }
                            }
                            if let Some((counter, bucket)) = counted.as_mut() {
                                counter.record(bucket, macs);
                            }
                            out_row[o] = (alpha * acc) as f32;
                        }
                    }
                },
            }
        }
        Ok(y)
    }
}

enum FrozenNorm {
    None,
    /// Layer norm; binarized gains arrive already materialized, without a
    /// shift term.
    Layer { gain: Vec<f32>, bias: Option<Vec<f32>> },
    Batch {
        scale: Vec<f32>,
        shift: Vec<f32>,
    },
}

impl FrozenNorm {
    fn apply(&self, x: &mut Tensor<f32>) {
        let d = *x.dims().last().unwrap();
        let rows = x.numel() / d;
        match self {
            FrozenNorm::None => {}
            FrozenNorm::Layer { gain, bias } => {
                for r in 0..rows {
                    let row = &mut x.data_mut()[r * d..(r + 1) * d];
                    let mut mean = 0.0f64;
                    for &v in row.iter() {
                        mean += v as f64;
                    }
                    mean /= d as f64;
                    let mut var = 0.0f64;
                    for &v in row.iter() {
                        let dm = v as f64 - mean;
                        var += dm * dm;
                    }
                    var /= d as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    for (c, v) in row.iter_mut().enumerate() {
                        let xhat = (*v as f64 - mean) * inv;
                        let mut y = xhat * gain[c] as f64;
                        if let Some(bias) = bias {
                            y += bias[c] as f64;
                        }
                        *v = y as f32;
                    }
                }
            }
            FrozenNorm::Batch { scale, shift } => {
                for r in 0..rows {
                    let row = &mut x.data_mut()[r * d..(r + 1) * d];
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = (*v as f64 * scale[c] as f64 + shift[c] as f64) as f32;
                    }
                }
            }
        }
    }
}

struct FrozenLayer {
    wq: FrozenLinear,
    wk: FrozenLinear,
    wv: FrozenLinear,
    wo: FrozenLinear,
    ff1: FrozenLinear,
    ff2: FrozenLinear,
    qkv_masks: Option<[Tensor<f32>; 3]>,
    norm1: FrozenNorm,
    norm2: FrozenNorm,
}

/// A frozen transformer rebuilt from a container, ready for inference.
pub struct FrozenTransformer {
    config: ModelConfig,
    input_proj: FrozenLinear,
    positional: Option<Tensor<f32>>,
    layers: Vec<FrozenLayer>,
    decoder: FrozenLinear,
}

struct EntryMap<'a> {
    by_name: BTreeMap<&'a str, &'a FrozenEntry>,
}

impl<'a> EntryMap<'a> {
    fn new(entries: &'a [FrozenEntry]) -> Self {
        EntryMap {
            by_name: entries.iter().map(|e| (e.name(), e)).collect(),
        }
    }

    fn get(&self, name: &str) -> Result<&'a FrozenEntry> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::data(format!("container is missing module '{name}'")))
    }

    fn binarized(&self, name: &str, dims: &[usize]) -> Result<&'a FrozenBinarized> {
        match self.get(name)? {
            FrozenEntry::Binarized(b) if b.dims == dims => Ok(b),
            FrozenEntry::Binarized(b) => Err(Error::data(format!(
                "module '{name}': dims {:?}, expected {dims:?}",
                b.dims
            ))),
            _ => Err(Error::data(format!("module '{name}' is not binarized"))),
        }
    }

    fn fp32(&self, name: &str, len: usize) -> Result<&'a [f32]> {
        match self.get(name)? {
            FrozenEntry::Fp32 { values, .. } if values.len() == len => Ok(values),
            FrozenEntry::Fp32 { values, .. } => Err(Error::data(format!(
                "module '{name}': {} values, expected {len}",
                values.len()
            ))),
            _ => Err(Error::data(format!("module '{name}' is not an FP32 block"))),
        }
    }

    fn bitmask(&self, name: &str, dims: &[usize]) -> Result<Tensor<f32>> {
        match self.get(name)? {
            FrozenEntry::BitMask { bits, dims: d, .. } if d == dims => Tensor::from_vec(
                dims,
                bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
            ),
            FrozenEntry::BitMask { dims: d, .. } => Err(Error::data(format!(
                "module '{name}': dims {d:?}, expected {dims:?}"
            ))),
            _ => Err(Error::data(format!("module '{name}' is not a bit mask"))),
        }
    }

    fn linear(&self, name: &str, out: usize, inp: usize, mode: WeightMode) -> Result<FrozenLinear> {
        match mode {
            WeightMode::Sbt => FrozenLinear::from_binarized(self.binarized(name, &[out, inp])?),
            WeightMode::Dense => {
                let weight = Tensor::from_vec(
                    &[out, inp],
                    self.fp32(&format!("{name}.weight"), out * inp)?.to_vec(),
                )?;
                let bias = self.fp32(&format!("{name}.bias"), out)?.to_vec();
                FrozenLinear::dense(weight, bias)
            }
        }
    }

    fn norm(&self, name: &str, d: usize, cfg: &ModelConfig) -> Result<FrozenNorm> {
        use crate::model::NormPolicy;
        Ok(match cfg.norm_policy() {
            NormPolicy::None => FrozenNorm::None,
            NormPolicy::Layer => match cfg.mode {
                WeightMode::Sbt => {
                    let b = self.binarized(name, &[d])?;
                    let gain: Tensor<f32> = b.materialize()?;
                    FrozenNorm::Layer {
                        gain: gain.data().to_vec(),
                        bias: None,
                    }
                }
                WeightMode::Dense => FrozenNorm::Layer {
                    gain: self.fp32(&format!("{name}.gain"), d)?.to_vec(),
                    bias: Some(self.fp32(&format!("{name}.bias"), d)?.to_vec()),
                },
            },
            NormPolicy::Batch => {
                let gain = self.fp32(&format!("{name}.gain"), d)?;
                let bias = self.fp32(&format!("{name}.bias"), d)?;
                let mean = self.fp32(&format!("{name}.running_mean"), d)?;
                let var = self.fp32(&format!("{name}.running_var"), d)?;
                let mut scale = vec![0.0f32; d];
                let mut shift = vec![0.0f32; d];
                for c in 0..d {
                    let s = gain[c] as f64 / (var[c] as f64 + NORM_EPS).sqrt();
                    scale[c] = s as f32;
                    shift[c] = (bias[c] as f64 - mean[c] as f64 * s) as f32;
                }
                FrozenNorm::Batch { scale, shift }
            }
        })
    }
}

impl FrozenTransformer {
    pub fn from_packed(packed: &PackedModel) -> Result<Self> {
        let cfg = &packed.config;
        cfg.validate()?;
        let map = EntryMap::new(&packed.entries);
        let (d, m, w, ff) = (cfg.d, cfg.m, cfg.w, cfg.ff);

        let input_proj = map.linear("input_proj", d, m, cfg.mode)?;
        let positional = match cfg.positional_kind() {
            PositionalKind::Sinusoidal => Some(sinusoidal_encoding::<f32>(w, d)),
            PositionalKind::Learnable => Some(Tensor::from_vec(
                &[w, d],
                map.fp32("pos_table", w * d)?.to_vec(),
            )?),
        };

        let variant = cfg.attention_variant();
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let lp = format!("layer{i}");
            let qkv_masks = if variant == AttentionVariant::QkvRandom {
                Some([
                    map.bitmask(&format!("{lp}.attn.mask_q"), &[w, d])?,
                    map.bitmask(&format!("{lp}.attn.mask_k"), &[w, d])?,
                    map.bitmask(&format!("{lp}.attn.mask_v"), &[w, d])?,
                ])
            } else {
                None
            };
            layers.push(FrozenLayer {
                wq: map.linear(&format!("{lp}.attn.wq"), d, d, cfg.mode)?,
                wk: map.linear(&format!("{lp}.attn.wk"), d, d, cfg.mode)?,
                wv: map.linear(&format!("{lp}.attn.wv"), d, d, cfg.mode)?,
                wo: map.linear(&format!("{lp}.attn.wo"), d, d, cfg.mode)?,
                ff1: map.linear(&format!("{lp}.ff1"), ff, d, cfg.mode)?,
                ff2: map.linear(&format!("{lp}.ff2"), d, ff, cfg.mode)?,
                qkv_masks,
                norm1: map.norm(&format!("{lp}.norm1"), d, cfg)?,
                norm2: map.norm(&format!("{lp}.norm2"), d, cfg)?,
            });
        }
        let decoder = map.linear("decoder", cfg.decoder_out(), d, cfg.mode)?;
        Ok(FrozenTransformer {
            config: packed.config.clone(),
            input_proj,
            positional,
            layers,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Run a `(batch, w, m)` window stack; classification returns `(batch,
    /// classes)` logits, reconstruction tasks `(batch, w, m)`.
    pub fn infer(
        &self,
        x: &Tensor<f32>,
        lens: Option<&[usize]>,
        mode: InferMode,
    ) -> Result<Tensor<f32>> {
        self.forward(x, lens, mode, None)
    }

    /// Packed-path forward that tallies non-zero multiply-adds per
    /// component bucket.
    pub fn infer_counted(
        &self,
        x: &Tensor<f32>,
        lens: Option<&[usize]>,
        counter: &mut FlopCounter,
    ) -> Result<Tensor<f32>> {
        self.forward(x, lens, InferMode::Packed, Some(counter))
    }

    fn forward(
        &self,
        x: &Tensor<f32>,
        lens: Option<&[usize]>,
        mode: InferMode,
        mut counter: Option<&mut FlopCounter>,
    ) -> Result<Tensor<f32>> {
        let cfg = &self.config;
        if x.rank() != 3 || x.dim(1) != cfg.w || x.dim(2) != cfg.m {
            return Err(Error::shape("infer", x.dims(), &[0, cfg.w, cfg.m]));
        }
        let batch = x.dim(0);
        let key_valid = match lens {
            Some(lens) => {
                if lens.len() != batch {
                    return Err(Error::data(format!(
                        "{} lengths for a batch of {batch}",
                        lens.len()
                    )));
                }
                Some(key_valid_from_lens::<f32>(lens, cfg.w)?)
            }
            None => None,
        };

        let mut z = self
            .input_proj
            .apply(x, mode, counter.as_deref_mut().map(|c| (c, "input_proj")))?;
        if let Some(pe) = &self.positional {
            add_table(&mut z, pe);
        }

        for (i, layer) in self.layers.iter().enumerate() {
            let lp = format!("layer{i}");
            let qkv_bucket = format!("{lp}.attn.proj_qkv");
            let mut q = layer
                .wq
                .apply(&z, mode, counter.as_deref_mut().map(|c| (c, qkv_bucket.as_str())))?;
            let mut k = layer
                .wk
                .apply(&z, mode, counter.as_deref_mut().map(|c| (c, qkv_bucket.as_str())))?;
            let mut v = layer
                .wv
                .apply(&z, mode, counter.as_deref_mut().map(|c| (c, qkv_bucket.as_str())))?;
            match (&layer.qkv_masks, cfg.attention_variant()) {
                (Some(masks), _) => {
                    mul_table(&mut q, &masks[0]);
                    mul_table(&mut k, &masks[1]);
                    mul_table(&mut v, &masks[2]);
                }
                (None, AttentionVariant::QkvMagnitude) => {
                    let mq = magnitude_mask(&q, cfg.p_a())?;
                    let mk = magnitude_mask(&k, cfg.p_a())?;
                    let mv = magnitude_mask(&v, cfg.p_a())?;
                    mul_tensor(&mut q, &mq);
                    mul_tensor(&mut k, &mk);
                    mul_tensor(&mut v, &mv);
                }
                _ => {}
            }
            let attn = self.attend(
                &q,
                &k,
                &v,
                key_valid.as_ref(),
                mode,
                counter.as_deref_mut().map(|c| (c, lp.as_str())),
            )?;
            let out_bucket = format!("{lp}.attn.proj_out");
            let proj = layer.wo.apply(
                &attn,
                mode,
                counter.as_deref_mut().map(|c| (c, out_bucket.as_str())),
            )?;
            add_into(&mut z, &proj)?;
            layer.norm1.apply(&mut z);

            let ff_bucket = format!("{lp}.ff");
            let h = layer
                .ff1
                .apply(&z, mode, counter.as_deref_mut().map(|c| (c, ff_bucket.as_str())))?;
            let h = relu(h);
            let h = layer
                .ff2
                .apply(&h, mode, counter.as_deref_mut().map(|c| (c, ff_bucket.as_str())))?;
            add_into(&mut z, &h)?;
            layer.norm2.apply(&mut z);
        }

        match cfg.task {
            Task::Classification => {
                let weights = match lens {
                    Some(lens) => mean_weights_from_lens::<f32>(lens, cfg.w)?,
                    None => Tensor::filled(&[batch, cfg.w], 1.0 / cfg.w as f32),
                };
                if cfg.pool_before_decode {
                    let pooled = weighted_mean_time(&z, &weights);
                    self.decoder
                        .apply(&pooled, mode, counter.as_deref_mut().map(|c| (c, "decoder")))
                } else {
                    let logits = self.decoder.apply(
                        &z,
                        mode,
                        counter.as_deref_mut().map(|c| (c, "decoder")),
                    )?;
                    Ok(weighted_mean_time(&logits, &weights))
                }
            }
            Task::Anomaly | Task::Forecasting => {
                self.decoder
                    .apply(&z, mode, counter.as_deref_mut().map(|c| (c, "decoder")))
            }
        }
    }

    /// Multi-head attention over projected Q/K/V. The packed path runs the
    /// single-step fast path (copy rows + one mixed row); the reference path
    /// materializes the full masked score matrix.
    fn attend(
        &self,
        q: &Tensor<f32>,
        k: &Tensor<f32>,
        v: &Tensor<f32>,
        key_valid: Option<&Tensor<f32>>,
        mode: InferMode,
        mut counted: Option<(&mut FlopCounter, &str)>,
    ) -> Result<Tensor<f32>> {
        let cfg = &self.config;
        let (batch, w, d) = (q.dim(0), q.dim(1), q.dim(2));
        let heads = cfg.heads;
        let dp = d / heads;
        let denom = if cfg.scale_by_full_d { d } else { dp };
        let scale = 1.0 / (denom as f64).sqrt();
        let variant = cfg.attention_variant();
        let fast_step = variant == AttentionVariant::StepT && mode == InferMode::Packed;
        let row_mask: Option<Tensor<f32>> = match variant {
            AttentionVariant::StepT if !fast_step => Some(step_t_mask(w)?),
            AttentionVariant::Identity => Some(identity_mask(w)),
            _ => None,
        };

        let mut out = Tensor::zeros(&[batch, w, d]);
        let at = |t: &Tensor<f32>, b: usize, r: usize, off: usize, i: usize| {
            t.data()[(b * w + r) * d + off + i]
        };
        for b in 0..batch {
            for head in 0..heads {
                let off = head * dp;
                if fast_step {
                    // Rows 0..w−2 are exact copies of V (softmax over a
                    // single unmasked score is identically one).
                    let mut macs = 0u64;
                    for t in 0..w - 1 {
                        for i in 0..dp {
                            let value = at(v, b, t, off, i);
                            out.data_mut()[(b * w + t) * d + off + i] = value;
                            if counted.is_some() && value != 0.0 {
                                macs += 1;
                            }
                        }
                    }
                    // Final row: scores against every past step, softmax,
                    // weighted value sum.
                    let mut scores = vec![0.0f64; w - 1];
                    let mut qk_macs = 0u64;
                    for (s, score) in scores.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for i in 0..dp {
                            let qi = at(q, b, w - 1, off, i);
                            let ki = at(k, b, s, off, i);
                            acc += qi as f64 * ki as f64;
                            if counted.is_some() && qi != 0.0 && ki != 0.0 {
                                qk_macs += 1;
                            }
                        }
                        *score = acc * scale;
                    }
                    let weights = softmax(&scores);
                    for i in 0..dp {
                        let mut acc = 0.0f64;
                        for (s, &a) in weights.iter().enumerate() {
                            let value = at(v, b, s, off, i);
                            acc += a * value as f64;
                            if counted.is_some() && a != 0.0 && value != 0.0 {
                                macs += 1;
                            }
                        }
                        out.data_mut()[(b * w + w - 1) * d + off + i] = acc as f32;
                    }
                    if let Some((counter, lp)) = counted.as_mut() {
                        counter.record(&format!("{lp}.attn.qk_t"), qk_macs);
                        counter.record(&format!("{lp}.attn.av"), macs);
                    }
                } else {
                    let mut qk_macs = 0u64;
                    let mut av_macs = 0u64;
                    for t in 0..w {
                        // Raw scores with additive row mask and key-validity
                        // handling, mirroring the training softmax.
                        let mut logits = vec![f64::NEG_INFINITY; w];
                        for s in 0..w {
                            let mut acc = 0.0f64;
                            for i in 0..dp {
                                let qi = at(q, b, t, off, i);
                                let ki = at(k, b, s, off, i);
                                acc += qi as f64 * ki as f64;
                                if counted.is_some() && qi != 0.0 && ki != 0.0 {
                                    qk_macs += 1;
                                }
                            }
                            let mut logit = acc * scale;
                            if let Some(mask) = &row_mask {
                                logit += mask.at2(t, s) as f64;
                            }
                            if let Some(kv) = key_valid {
                                if kv.at2(b, s) == 0.0 {
                                    logit = f64::NEG_INFINITY;
                                }
                            }
                            logits[s] = logit;
                        }
                        let weights = softmax(&logits);
                        for i in 0..dp {
                            let mut acc = 0.0f64;
                            for (s, &a) in weights.iter().enumerate() {
                                if a == 0.0 {
                                    continue;
                                }
                                let value = at(v, b, s, off, i);
                                acc += a * value as f64;
                                if counted.is_some() && value != 0.0 {
                                    av_macs += 1;
                                }
                            }
                            out.data_mut()[(b * w + t) * d + off + i] = acc as f32;
                        }
                    }
                    if let Some((counter, lp)) = counted.as_mut() {
                        counter.record(&format!("{lp}.attn.qk_t"), qk_macs);
                        counter.record(&format!("{lp}.attn.av"), av_macs);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Max-subtracted softmax over FP64 logits; `−∞` entries map to exact
/// zeros, and a fully masked row stays all-zero.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        if v > f64::NEG_INFINITY {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn add_table(x: &mut Tensor<f32>, table: &Tensor<f32>) {
    let n = table.numel();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += table.data()[i % n];
    }
}

fn mul_table(x: &mut Tensor<f32>, table: &Tensor<f32>) {
    let n = table.numel();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v *= table.data()[i % n];
    }
}

fn mul_tensor(x: &mut Tensor<f32>, mask: &Tensor<f32>) {
    for (v, &m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

fn add_into(x: &mut Tensor<f32>, y: &Tensor<f32>) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape("residual add", x.dims(), y.dims()));
    }
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
    Ok(())
}

fn relu(mut x: Tensor<f32>) -> Tensor<f32> {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

/// Weighted mean over the time axis: `(B, w, c) × (B, w) → (B, c)`.
fn weighted_mean_time(x: &Tensor<f32>, weights: &Tensor<f32>) -> Tensor<f32> {
    let (b, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[b, c]);
    for i in 0..b {
        for t in 0..w {
            let wt = weights.at2(i, t) as f64;
            if wt == 0.0 {
                continue;
            }
            for j in 0..c {
                let cur = out.at2(i, j) as f64;
                out.set2(i, j, (cur + wt * x.at3(i, t, j) as f64) as f32);
            }
        }
    }
    out
}

/// Per-window reconstruction scores (mean squared error over features at
/// the final step) from the packed runtime, processed in chunks.
pub fn packed_scores(
    model: &FrozenTransformer,
    x: &Tensor<f32>,
    targets: &Tensor<f32>,
    chunk: usize,
) -> Result<Vec<f64>> {
    let (n, w, m) = (x.dim(0), x.dim(1), x.dim(2));
    let mut scores = Vec::with_capacity(n);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + chunk).min(n);
        let mut part = Tensor::zeros(&[hi - lo, w, m]);
        part.data_mut()
            .copy_from_slice(&x.data()[lo * w * m..hi * w * m]);
        let pred = model.infer(&part, None, InferMode::Packed)?;
        for i in 0..(hi - lo) {
            let mut acc = 0.0f64;
            for j in 0..m {
                let d = pred.at3(i, w - 1, j) as f64 - targets.at2(lo + i, j) as f64;
                acc += d * d;
            }
            scores.push(acc / m as f64);
        }
        lo = hi;
    }
    Ok(scores)
}

/// Argmax class predictions from the packed runtime, processed in chunks.
pub fn packed_classify(
    model: &FrozenTransformer,
    x: &Tensor<f32>,
    lens: &[usize],
    chunk: usize,
) -> Result<Vec<usize>> {
    let (n, w, m) = (x.dim(0), x.dim(1), x.dim(2));
    let classes = model.config.classes;
    let mut out = Vec::with_capacity(n);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + chunk).min(n);
        let mut part = Tensor::zeros(&[hi - lo, w, m]);
        part.data_mut()
            .copy_from_slice(&x.data()[lo * w * m..hi * w * m]);
        let logits = model.infer(&part, Some(&lens[lo..hi]), InferMode::Packed)?;
        for i in 0..(hi - lo) {
            let mut best = 0;
            for c in 1..classes {
                if logits.at2(i, c) > logits.at2(i, best) {
                    best = c;
                }
            }
            out.push(best);
        }
        lo = hi;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerModel;
    use crate::optim::ParamStore;
    use proptest::prelude::*;

    #[test]
    fn crc32_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn bit_packing_defined_example() {
        assert_eq!(pack_bits(&[1, 0, 1, 1, 0, 0, 0, 1]), vec![0x8D]);
        assert_eq!(unpack_bits(&[0x8D], 8).unwrap(), vec![1, 0, 1, 1, 0, 0, 0, 1]);
        assert!(unpack_bits(&[0x8D], 9).is_err());
    }

    proptest! {
        #[test]
        fn bit_packing_roundtrips(bits in proptest::collection::vec(0u8..=1, 0..64)) {
            let packed = pack_bits(&bits);
            prop_assert_eq!(packed.len(), bits.len().div_ceil(8));
            prop_assert_eq!(unpack_bits(&packed, bits.len()).unwrap(), bits);
        }
    }

    fn build_frozen(task: Task, mode: WeightMode) -> (PackedModel, TransformerModel<f64>, ParamStore<f64>) {
        let mut cfg = ModelConfig::new(task, mode, 3, 6, 8);
        cfg.ff = 16;
        if task == Task::Classification {
            cfg.classes = 4;
        }
        cfg.seed = 41;
        let mut store = ParamStore::new();
        let model = TransformerModel::build(cfg.clone(), &mut store).unwrap();
        let entries = model.freeze(&store).unwrap();
        (PackedModel::new(cfg, entries), model, store)
    }

    #[test]
    fn container_roundtrip_is_byte_identical() {
        for (task, mode) in [
            (Task::Classification, WeightMode::Sbt),
            (Task::Classification, WeightMode::Dense),
            (Task::Anomaly, WeightMode::Sbt),
            (Task::Forecasting, WeightMode::Sbt),
            (Task::Forecasting, WeightMode::Dense),
        ] {
            let (packed, _, _) = build_frozen(task, mode);
            let bytes = packed.encode().unwrap();
            let decoded = PackedModel::decode(&bytes).unwrap();
            assert_eq!(decoded.entries, packed.entries);
            let re_encoded = decoded.encode().unwrap();
            assert_eq!(bytes, re_encoded, "{task:?}/{mode:?} not byte-stable");
        }
    }

    #[test]
    fn corruption_and_version_checks() {
        let (packed, _, _) = build_frozen(Task::Anomaly, WeightMode::Sbt);
        let bytes = packed.encode().unwrap();

        let mut corrupt = bytes.clone();
        corrupt[20] ^= 0xFF;
        assert!(matches!(
            PackedModel::decode(&corrupt),
            Err(Error::CrcMismatch { .. })
        ));

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(PackedModel::decode(&wrong_magic), Err(Error::BadMagic)));

        let mut future = bytes.clone();
        future[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            PackedModel::decode(&future),
            Err(Error::UnsupportedVersion(2))
        ));

        assert!(matches!(
            PackedModel::decode(&bytes[..4]),
            Err(Error::Truncated(_))
        ));

        // Internal overrun: a config length far past the buffer, CRC valid.
        let mut overrun = Vec::new();
        overrun.extend_from_slice(&MAGIC);
        overrun.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        overrun.extend_from_slice(&u32::MAX.to_le_bytes());
        let crc = crc32(&overrun);
        overrun.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            PackedModel::decode(&overrun),
            Err(Error::Truncated(_))
        ));
    }

    fn max_relative_gap(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let denom = (y.abs() as f64).max(1e-6);
                (x as f64 - y as f64).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    fn window_batch(b: usize, w: usize, m: usize, seed: u64) -> Tensor<f32> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let data = (0..b * w * m)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0) as f32
            })
            .collect();
        Tensor::from_vec(&[b, w, m], data).unwrap()
    }

    #[test]
    fn packed_path_matches_reference_path() {
        for (task, mode) in [
            (Task::Classification, WeightMode::Sbt),
            (Task::Classification, WeightMode::Dense),
            (Task::Anomaly, WeightMode::Sbt),
            (Task::Forecasting, WeightMode::Sbt),
        ] {
            let (packed, _, _) = build_frozen(task, mode);
            let runtime = FrozenTransformer::from_packed(&packed).unwrap();
            let lens = vec![6, 4, 5];
            let lens = (task == Task::Classification).then_some(&lens[..]);
            for seed in 0..5 {
                let x = window_batch(3, 6, 3, seed);
                let reference = runtime.infer(&x, lens, InferMode::Reference).unwrap();
                let fast = runtime.infer(&x, lens, InferMode::Packed).unwrap();
                let gap = max_relative_gap(&fast, &reference);
                assert!(gap <= 1e-5, "{task:?}/{mode:?} seed {seed}: gap {gap}");
            }
        }
    }

    #[test]
    fn decoded_container_runs_identically() {
        let (packed, _, _) = build_frozen(Task::Forecasting, WeightMode::Sbt);
        let bytes = packed.encode().unwrap();
        let decoded = PackedModel::decode(&bytes).unwrap();
        let before = FrozenTransformer::from_packed(&packed).unwrap();
        let after = FrozenTransformer::from_packed(&decoded).unwrap();
        let x = window_batch(2, 6, 3, 99);
        let a = before.infer(&x, None, InferMode::Packed).unwrap();
        let b = after.infer(&x, None, InferMode::Packed).unwrap();
        assert_eq!(a.data(), b.data());
    }

    fn all_positive_binary(name: &str, out: usize, inp: usize, keep_every: usize, alpha: f32) -> FrozenEntry {
        let n = out * inp;
        let mask: Vec<u8> = (0..n).map(|e| u8::from(e % keep_every == 0)).collect();
        FrozenEntry::Binarized(FrozenBinarized {
            name: name.into(),
            dims: vec![out, inp],
            mask,
            signs: vec![1; n],
            alpha,
        })
    }

    #[test]
    fn all_positive_signs_reduce_to_masked_row_sums() {
        let entry = all_positive_binary("t", 2, 4, 2, 0.5);
        let FrozenEntry::Binarized(b) = &entry else { unreachable!() };
        let lin = FrozenLinear::from_binarized(b).unwrap();
        let x = Tensor::from_vec(&[1, 4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = lin.apply(&x, InferMode::Packed, None).unwrap();
        // Kept indices 0, 2 per the stripe pattern: rows sum x[0]+x[2].
        assert_eq!(y.data(), &[0.5 * (1.0 + 3.0), 0.5 * (1.0 + 3.0)]);
    }

    #[test]
    fn dense_counting_examples() {
        let weight = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let lin = FrozenLinear::dense(weight, vec![0.0, 0.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0f32, 1.0]).unwrap();
        let mut counter = FlopCounter::new();
        lin.apply(&x, InferMode::Packed, Some((&mut counter, "lin"))).unwrap();
        assert_eq!(counter.bucket("lin"), 4);

        let half = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 0.0, 4.0]).unwrap();
        let lin = FrozenLinear::dense(half, vec![0.0, 0.0]).unwrap();
        let mut counter = FlopCounter::new();
        lin.apply(&x, InferMode::Packed, Some((&mut counter, "lin"))).unwrap();
        assert_eq!(counter.bucket("lin"), 2);
    }

    #[test]
    fn report_reconciles_with_information_bits() {
        let (packed, model, _) = build_frozen(Task::Classification, WeightMode::Sbt);
        let report = packed.report();
        let census = model.census();
        let expected = crate::costmodel::sbt_info_bits(&census);
        assert_eq!(report.information_bits as f64, expected);
        assert!(report.payload_bits > report.information_bits);
    }

    #[test]
    fn save_and_load_via_files() {
        let (packed, _, _) = build_frozen(Task::Anomaly, WeightMode::Sbt);
        let dir = std::env::temp_dir().join(format!("sbt-artifact-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.sbt");
        packed.save(&path).unwrap();
        let loaded = PackedModel::load(&path).unwrap();
        assert_eq!(loaded.entries, packed.entries);
    }
}
