//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | field            | encoding                                          |
//! |------------------|---------------------------------------------------|
//! | magic            | 8 bytes `HCONCKPT`                                |
//! | version          | u32                                               |
//! | input_dim … projector_out | 5 × u32                                  |
//! | activation       | u8 (0 = relu, 1 = identity)                       |
//! | head count       | u8, then one u8 per head (0 = id, 1 = species, 2 = taxon) |
//! | parameter count  | u64, total number of scalars that follow          |
//! | parameters       | f64 each, adapter W1 b1 W2 b2 then per head V1 c1 V2 c2 |
//! | checksum         | u32 CRC-32 (IEEE) of every preceding byte         |
//!
//! Weight matrices are stored row-major with shape `in × out`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, ArchConfig, EncoderParams, NetworkError};
use crate::taxonomy::Level;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HCONCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut out: W) -> Result<(), NetworkError> {
    let arch = &params.arch;
    let mut buf = Vec::with_capacity(64 + 8 * params.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [
        arch.input_dim,
        arch.adapter_hidden,
        arch.shared_dim,
        arch.projector_hidden,
        arch.projector_out,
    ] {
        let dim = u32::try_from(dim).map_err(|_| NetworkError::InvalidConfig(format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    buf.push(match arch.activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    });
    buf.push(arch.heads.len() as u8);
    for level in &arch.heads {
        buf.push(level.index() as u8);
    }
    buf.extend_from_slice(&(params.num_params() as u64).to_le_bytes());
    for tensor in params.tensors() {
        for x in tensor {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NetworkError::CorruptCheckpoint(format!("truncated at byte {}", self.pos))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, NetworkError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NetworkError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(EncoderParams, ArchConfig), NetworkError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 4 {
        return Err(NetworkError::CorruptCheckpoint("file too short".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NetworkError::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(NetworkError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(NetworkError::CorruptCheckpoint("checksum mismatch".into()));
    }

    let mut cur = Cursor { bytes: body, pos: 12 };
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = cur.u32()? as usize;
    }
    let activation = match cur.u8()? {
        0 => Activation::Relu,
        1 => Activation::Identity,
        other => return Err(NetworkError::CorruptCheckpoint(format!("unknown activation tag {other}"))),
    };
    let head_count = cur.u8()? as usize;
    let mut heads = Vec::with_capacity(head_count);
    for _ in 0..head_count {
        let tag = cur.u8()? as usize;
        heads.push(
            Level::from_index(tag)
                .ok_or_else(|| NetworkError::CorruptCheckpoint(format!("unknown level tag {tag}")))?,
        );
    }
    let arch = ArchConfig {
        input_dim: dims[0],
        adapter_hidden: dims[1],
        shared_dim: dims[2],
        projector_hidden: dims[3],
        projector_out: dims[4],
        activation,
        heads,
    };
    arch.validate()
        .map_err(|e| NetworkError::CorruptCheckpoint(format!("invalid architecture: {e}")))?;

    let mut params = EncoderParams::zeros(&arch);
    let count = cur.u64()?;
    if count != params.num_params() as u64 {
        return Err(NetworkError::CorruptCheckpoint(format!(
            "parameter count {count} does not match architecture ({})",
            params.num_params()
        )));
    }
    for tensor in params.tensors_mut() {
        for x in tensor.iter_mut() {
            *x = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if cur.pos != body.len() {
        return Err(NetworkError::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok((params, arch))
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<(), NetworkError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, ArchConfig), NetworkError> {
    read_checkpoint(fs::File::open(path)?)
}
