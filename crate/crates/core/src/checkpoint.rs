//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LWCK" | u32 version | u32 len + kind | u32 len + JSON meta | u32 sections
//! section: u32 len + name | u32 ndim | u32 dims.. | f32 data..
//! u32 crc32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, WatermarkDecoder};
use crate::decoder::{AdapterSet, DecoderConfig, ToyDecoder};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LWCK";
pub const VERSION: u32 = 1;

pub const KIND_DECODER: &str = "decoder";
pub const KIND_CODEC: &str = "codec";
pub const KIND_ADAPTERS: &str = "adapters";

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub sections: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint { kind: kind.to_string(), meta, sections: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.sections.insert(name.into(), t);
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.sections.remove(name).ok_or_else(|| ckpt_err(format!("missing section `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(ckpt_err(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.kind.as_bytes())?;
        put_bytes(&mut out, serde_json::to_string(&self.meta)?.as_bytes())?;
        put_u32(&mut out, self.sections.len())?;
        for (name, t) in &self.sections {
            put_bytes(&mut out, name.as_bytes())?;
            put_u32(&mut out, t.ndim())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(ckpt_err("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(ckpt_err("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let meta = serde_json::from_str(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ckpt_err("shape overflow"))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| ckpt_err("shape overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            if sections.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(ckpt_err(format!("duplicate section `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(ckpt_err("trailing bytes before checksum"));
        }
        Ok(Checkpoint { kind, meta, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ckpt_err("value exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| ckpt_err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("invalid UTF-8"))
    }
}

fn meta_of<M: for<'de> Deserialize<'de>>(ck: &Checkpoint) -> Result<M> {
    serde_json::from_value(ck.meta.clone()).map_err(|e| ckpt_err(format!("bad metadata: {e}")))
}

pub fn decoder_to_checkpoint(dec: &ToyDecoder<f32>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(KIND_DECODER, serde_json::to_value(&dec.config)?);
    for s in &dec.stages {
        ck.insert(format!("{}.weight", s.id), s.kernel.clone());
        ck.insert(format!("{}.bias", s.id), s.bias.clone());
    }
    Ok(ck)
}

pub fn decoder_from_checkpoint(mut ck: Checkpoint) -> Result<ToyDecoder<f32>> {
    ck.expect_kind(KIND_DECODER)?;
    let cfg: DecoderConfig = meta_of(&ck)?;
    let mut dec = ToyDecoder::<f32>::new(cfg, &mut Rng::new(0))?;
    for s in &mut dec.stages {
        let k = ck.take(&format!("{}.weight", s.id))?;
        let b = ck.take(&format!("{}.bias", s.id))?;
        k.ensure_shape(s.kernel.shape(), "decoder kernel")?;
        b.ensure_shape(s.bias.shape(), "decoder bias")?;
        s.kernel = k;
        s.bias = b;
    }
    no_leftovers(&ck)?;
    Ok(dec)
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    config: CodecConfig,
    frozen: bool,
}

pub fn codec_to_checkpoint(codec: &WatermarkDecoder<f32>) -> Result<Checkpoint> {
    let meta = CodecMeta { config: codec.config.clone(), frozen: codec.is_frozen() };
    let mut ck = Checkpoint::new(KIND_CODEC, serde_json::to_value(&meta)?);
    for (i, (k, b)) in codec.convs.iter().enumerate() {
        ck.insert(format!("conv.{i}.weight"), k.clone());
        ck.insert(format!("conv.{i}.bias"), b.clone());
    }
    ck.insert("head.weight", codec.head_weight.clone());
    ck.insert("head.bias", codec.head_bias.clone());
    Ok(ck)
}

pub fn codec_from_checkpoint(mut ck: Checkpoint) -> Result<WatermarkDecoder<f32>> {
    ck.expect_kind(KIND_CODEC)?;
    let meta: CodecMeta = meta_of(&ck)?;
    let n_convs = ck.sections.keys().filter(|k| k.starts_with("conv.") && k.ends_with(".weight")).count();
    let convs = (0..n_convs)
        .map(|i| Ok((ck.take(&format!("conv.{i}.weight"))?, ck.take(&format!("conv.{i}.bias"))?)))
        .collect::<Result<Vec<_>>>()?;
    let hw = ck.take("head.weight")?;
    let hb = ck.take("head.bias")?;
    no_leftovers(&ck)?;
    WatermarkDecoder::from_parts(meta.config, convs, hw, hb, meta.frozen)
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    target_id: String,
    spec: LoraSpec,
}

#[derive(Serialize, Deserialize)]
struct AdaptersMeta {
    adapters: Vec<AdapterMeta>,
    /// Fingerprint of the base decoder the adapters were trained against.
    base_fingerprint: Option<u64>,
    payload: Option<String>,
}

/// Stored adapters plus what they were trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredAdapters {
    pub adapters: AdapterSet<f32>,
    pub base_fingerprint: Option<u64>,
    pub payload: Option<String>,
}

pub fn adapters_to_checkpoint(stored: &StoredAdapters) -> Result<Checkpoint> {
    let meta = AdaptersMeta {
        adapters: stored
            .adapters
            .adapters
            .iter()
            .map(|a| AdapterMeta { target_id: a.target_id.clone(), spec: a.spec })
            .collect(),
        base_fingerprint: stored.base_fingerprint,
        payload: stored.payload.clone(),
    };
    let mut ck = Checkpoint::new(KIND_ADAPTERS, serde_json::to_value(&meta)?);
    for a in &stored.adapters.adapters {
        let id = &a.target_id;
        ck.insert(format!("{id}.a"), a.a.clone());
        ck.insert(format!("{id}.b"), a.b.clone());
        for (suffix, t) in [("a2", &a.a2), ("b2", &a.b2), ("residual", &a.residual_base)] {
            if let Some(t) = t {
                ck.insert(format!("{id}.{suffix}"), t.clone());
            }
        }
    }
    Ok(ck)
}

pub fn adapters_from_checkpoint(mut ck: Checkpoint) -> Result<StoredAdapters> {
    ck.expect_kind(KIND_ADAPTERS)?;
    let meta: AdaptersMeta = meta_of(&ck)?;
    let mut adapters = Vec::new();
    for m in meta.adapters {
        let id = &m.target_id;
        let mut opt = |s: &str| ck.sections.remove(&format!("{id}.{s}"));
        let (a2, b2, residual_base) = (opt("a2"), opt("b2"), opt("residual"));
        let adapter = LoraAdapter {
            a: ck.take(&format!("{id}.a"))?,
            b: ck.take(&format!("{id}.b"))?,
            a2,
            b2,
            residual_base,
            target_id: m.target_id,
            spec: m.spec,
        };
        adapter.validate()?;
        adapters.push(adapter);
    }
    no_leftovers(&ck)?;
    Ok(StoredAdapters {
        adapters: AdapterSet::new(adapters),
        base_fingerprint: meta.base_fingerprint,
        payload: meta.payload,
    })
}

fn no_leftovers(ck: &Checkpoint) -> Result<()> {
    match ck.sections.keys().next() {
        Some(k) => Err(ckpt_err(format!("unexpected section `{k}`"))),
        None => Ok(()),
    }
}

pub fn save_decoder(dec: &ToyDecoder<f32>, path: &Path) -> Result<()> {
    decoder_to_checkpoint(dec)?.save(path)
}

pub fn load_decoder(path: &Path) -> Result<ToyDecoder<f32>> {
    decoder_from_checkpoint(Checkpoint::load(path)?)
}

pub fn save_codec(codec: &WatermarkDecoder<f32>, path: &Path) -> Result<()> {
    codec_to_checkpoint(codec)?.save(path)
}

pub fn load_codec(path: &Path) -> Result<WatermarkDecoder<f32>> {
    codec_from_checkpoint(Checkpoint::load(path)?)
}

pub fn save_adapters(stored: &StoredAdapters, path: &Path) -> Result<()> {
    adapters_to_checkpoint(stored)?.save(path)
}

pub fn load_adapters(path: &Path) -> Result<StoredAdapters> {
    adapters_from_checkpoint(Checkpoint::load(path)?)
}
