//! STCK checkpoints.
//!
//! Layout: `b"STCK"`, version `u16`, header length `u32`, a JSON header, then
//! one STTF record per tensor. Offsets in the header are relative to the
//! first byte after the header. Values are stored as `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::norm::EmbeddingNorm;
use super::pipeline::{TrainedEncoders, TrainedModel};
use crate::attention::StactConfig;
use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::model::{Decoder, Variant};
use crate::params::Parameterized;
use crate::tensor::{decode_sttf, encode_sttf, Tensor};

pub const STCK_MAGIC: &[u8; 4] = b"STCK";
pub const STCK_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    variant: Variant,
    config: StactConfig,
    side: usize,
    has_image_encoder: bool,
    tensors: Vec<TensorEntry>,
}

/// A decoder and its frozen encoders as named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub config: StactConfig,
    pub side: usize,
    pub decoder: Decoder,
    pub encoders: TrainedEncoders,
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel) -> Self {
        Self {
            variant: model.decoder.variant(),
            config: model.decoder.config(),
            side: model.encoders.side,
            decoder: model.decoder.clone(),
            encoders: model.encoders.clone(),
        }
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        fn add<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a dyn Parameterized) {
            for (n, t) in p.param_names().into_iter().zip(p.params()) {
                out.push((format!("{prefix}{n}"), t));
            }
        }
        let mut out = Vec::new();
        add(&mut out, "decoder.", &self.decoder);
        add(&mut out, "seg.", &self.encoders.seg);
        if let Some(img) = &self.encoders.image {
            add(&mut out, "image.", img);
        }
        add(&mut out, "norm.", &self.encoders.norm);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.named() {
            let rec = encode_sttf(t);
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: body.len() as u64,
                bytes: rec.len() as u64,
            });
            body.extend(rec);
        }
        let header = Header {
            variant: self.variant,
            config: self.config,
            side: self.side,
            has_image_encoder: self.encoders.image.is_some(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + body.len());
        out.extend_from_slice(STCK_MAGIC);
        out.extend_from_slice(&STCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend(json);
        out.extend(body);
        out
    }

    pub fn from_bytes(buf: &[u8], origin: &str) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: origin.to_string(),
            detail,
        };
        if buf.len() < 10 {
            return Err(fmt(format!("truncated checkpoint: {} bytes", buf.len())));
        }
        if &buf[..4] != STCK_MAGIC {
            return Err(fmt(format!("bad magic {:?}", &buf[..4])));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != STCK_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}, expected {STCK_VERSION}")));
        }
        let hlen = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let body_start = 10usize
            .checked_add(hlen)
            .filter(|&e| e <= buf.len())
            .ok_or_else(|| fmt("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(&buf[10..body_start]).map_err(|e| fmt(format!("invalid header: {e}")))?;
        let body = &buf[body_start..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.offset != expected_offset {
                return Err(fmt(format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let end = e.offset.checked_add(e.bytes).filter(|&x| x <= body.len() as u64);
            let end = end.ok_or_else(|| fmt(format!("truncated tensor {}", e.name)))? as usize;
            let (t, used) = decode_sttf(&body[e.offset as usize..end], origin)?;
            if used as u64 != e.bytes || t.shape() != e.shape.as_slice() {
                return Err(fmt(format!("tensor {} does not match its directory entry", e.name)));
            }
            tensors.push((e.name.clone(), t));
            expected_offset = end as u64;
        }
        if expected_offset != body.len() as u64 {
            return Err(fmt(format!("{} trailing bytes after tensors", body.len() as u64 - expected_offset)));
        }

        let decoder = Decoder::from_named(header.variant, header.config, &tensors, "decoder.")?;
        let seg = EncoderParams::from_named(&tensors, "seg.")?;
        let image = if header.has_image_encoder {
            Some(EncoderParams::from_named(&tensors, "image.")?)
        } else {
            None
        };
        Ok(Self {
            variant: header.variant,
            config: header.config,
            side: header.side,
            decoder,
            encoders: TrainedEncoders {
                side: header.side,
                seg,
                image,
                norm: EmbeddingNorm::from_named(&tensors, "norm.")?,
            },
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&buf, &path.display().to_string())
}
