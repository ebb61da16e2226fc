//! Binary checkpoint: magic, version, config, named tensors, CRC32.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MECM" | version u32 | payload | crc32(payload) u32
//! payload = config | tensor count u32 | tensors...
//! config  = in_channels u32 | num_classes u32
//!         | stage count u32 | widths u32... | blocks_per_stage u32
//!         | exit count u32 | exit stages u32... | input_size u32
//! tensor  = name len u32 | name utf-8 | dtype u8 (0 = f32) | rank u8
//!         | dims u32... | data f32-le...
//! ```

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MECM";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_bytes(model: &Model) -> Vec<u8> {
    let config = model.config();
    let mut payload = Vec::new();
    put_u32(&mut payload, config.in_channels as u32);
    put_u32(&mut payload, config.num_classes as u32);
    put_u32(&mut payload, config.stage_widths.len() as u32);
    for &w in &config.stage_widths {
        put_u32(&mut payload, w as u32);
    }
    put_u32(&mut payload, config.blocks_per_stage as u32);
    put_u32(&mut payload, config.exit_stages.len() as u32);
    for &s in &config.exit_stages {
        put_u32(&mut payload, s as u32);
    }
    put_u32(&mut payload, config.input_size as u32);

    let tensors = model.named_tensors();
    put_u32(&mut payload, tensors.len() as u32);
    for (name, t) in &tensors {
        put_u32(&mut payload, name.len() as u32);
        payload.extend_from_slice(name.as_bytes());
        payload.push(DTYPE_F32);
        payload.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(&mut payload, d as u32);
        }
        for v in t.data().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let crc = crc32(&payload);
    out.extend_from_slice(&payload);
    put_u32(&mut out, crc);
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, save_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(what));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(Error::CheckpointTruncated("magic"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::CheckpointTruncated("version"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointBadVersion(version));
    }
    if bytes.len() < 12 {
        return Err(Error::CheckpointTruncated("crc"));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes([
        bytes[bytes.len() - 4],
        bytes[bytes.len() - 3],
        bytes[bytes.len() - 2],
        bytes[bytes.len() - 1],
    ]);
    let computed = crc32(payload);
    if stored != computed {
        return Err(Error::CheckpointCrcMismatch { stored, computed });
    }

    let mut r = Reader { bytes: payload, pos: 0 };
    let in_channels = r.u32("in_channels")? as usize;
    let num_classes = r.u32("num_classes")? as usize;
    let n_stages = r.u32("stage count")? as usize;
    let mut stage_widths = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stage_widths.push(r.u32("stage width")? as usize);
    }
    let blocks_per_stage = r.u32("blocks_per_stage")? as usize;
    let n_exits = r.u32("exit count")? as usize;
    let mut exit_stages = Vec::with_capacity(n_exits);
    for _ in 0..n_exits {
        exit_stages.push(r.u32("exit stage")? as usize);
    }
    let input_size = r.u32("input_size")? as usize;
    let config = ModelConfig {
        in_channels,
        num_classes,
        stage_widths,
        blocks_per_stage,
        exit_stages,
        input_size,
    };

    let model = Model::build(config, 0)?;
    let expected: std::collections::HashMap<String, crate::tensor::Tensor> =
        model.named_tensors().into_iter().collect();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::invalid(
            "checkpoint",
            format!("{count} tensors in file, model has {}", expected.len()),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::invalid("checkpoint", "tensor name is not utf-8"))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::invalid(
                "checkpoint",
                format!("unsupported dtype code {dtype}"),
            ));
        }
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let target = expected.get(&name).ok_or_else(|| {
            Error::invalid("checkpoint", format!("unknown tensor {name:?}"))
        })?;
        if target.shape() != dims.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                lhs: dims,
                rhs: target.shape().to_vec(),
            });
        }
        target.set_data(data)?;
        if !seen.insert(name.clone()) {
            return Err(Error::invalid(
                "checkpoint",
                format!("duplicate tensor {name:?}"),
            ));
        }
    }
    if !r.done() {
        return Err(Error::invalid("checkpoint", "trailing bytes in payload"));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_bytes(&bytes)
}
