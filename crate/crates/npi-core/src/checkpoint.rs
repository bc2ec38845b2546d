//! Parameter checkpoint file format and weight digests.
//!
//! Layout: magic `NPIW`, u32 version=1, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, a u8 rank, u64 dims, and a little-endian
//! f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NPIW";
const VERSION: u32 = 1;

pub type NamedParams = Vec<(String, Tensor<f32>)>;

pub fn to_bytes(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format("tensor rank exceeds u8".into()));
        }
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<NamedParams> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut cursor)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut cursor)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut cursor)? as usize;
        let mut name_buf = vec![0u8; name_len];
        cursor
            .read_exact(&mut name_buf)
            .map_err(|_| Error::Format("checkpoint truncated in name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank_buf = [0u8; 1];
        cursor
            .read_exact(&mut rank_buf)
            .map_err(|_| Error::Format("checkpoint truncated in rank".into()))?;
        let rank = rank_buf[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut cursor)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        cursor
            .read_exact(&mut payload)
            .map_err(|_| Error::Format("checkpoint truncated in payload".into()))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = to_bytes(entries)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NamedParams> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

/// SHA-256 over the serialized weights; used for the frozen-model contract.
pub fn digest(entries: &[(String, Tensor<f32>)]) -> Result<[u8; 32]> {
    let bytes = to_bytes(entries)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().into())
}

pub fn digest_hex(entries: &[(String, Tensor<f32>)]) -> Result<String> {
    let d = digest(entries)?;
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}
