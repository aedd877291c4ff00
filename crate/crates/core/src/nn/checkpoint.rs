//! Bit-exact model checkpoint format.
//!
//! Layout (all integers unsigned 32-bit little-endian):
//! magic `FLFT`, format version, six architecture fields (layers,
//! width, heads, FFN multiplier, vocabulary, context), tensor count,
//! then per tensor: name length, UTF-8 name bytes, rank, one dimension
//! per rank, and the raw IEEE-754 single-precision little-endian data.

use std::fs;
use std::io::{self, Read as _, Write as _};
use std::path::Path;

use crate::arch::ArchitectureDescriptor;
use crate::error::{Error, Result};
use crate::nn::model::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLFT";
const VERSION: u32 = 1;

/// Serializes `params` with its architecture header. The write is
/// atomic: data lands in a sibling temporary file that is renamed over
/// the destination.
pub fn save(path: &Path, arch: &ArchitectureDescriptor, params: &ParamStore<f32>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, VERSION);
    for field in [
        arch.layers,
        arch.embed_dim,
        arch.heads,
        arch.ffn_mult,
        arch.vocab,
        arch.context,
    ] {
        write_u32(&mut buf, u32::try_from(field).map_err(io_overflow)?);
    }
    write_u32(&mut buf, u32::try_from(params.len()).map_err(io_overflow)?);
    for (name, tensor) in params.iter() {
        write_u32(&mut buf, u32::try_from(name.len()).map_err(io_overflow)?);
        buf.extend_from_slice(name.as_bytes());
        write_u32(&mut buf, u32::try_from(tensor.shape().len()).map_err(io_overflow)?);
        for &dim in tensor.shape() {
            write_u32(&mut buf, u32::try_from(dim).map_err(io_overflow)?);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp-write");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ArchitectureDescriptor, ParamStore<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = io::Cursor::new(bytes.as_slice());

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("not a model checkpoint (bad magic bytes)"));
    }
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let layers = read_u32(&mut cur)? as usize;
    let embed_dim = read_u32(&mut cur)? as usize;
    let heads = read_u32(&mut cur)? as usize;
    let ffn_mult = read_u32(&mut cur)? as usize;
    let vocab = read_u32(&mut cur)? as usize;
    let context = read_u32(&mut cur)? as usize;
    let arch = ArchitectureDescriptor::new(layers, embed_dim, heads, ffn_mult, vocab, context)?;

    let count = read_u32(&mut cur)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut cur)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("tensor name is not valid UTF-8"))?;
        let rank = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut scalar = [0u8; 4];
        for _ in 0..len {
            cur.read_exact(&mut scalar)?;
            data.push(f32::from_le_bytes(scalar));
        }
        params.insert(name, Tensor::new(shape, data));
    }
    if cur.position() != bytes.len() as u64 {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok((arch, params))
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(cur: &mut io::Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn io_overflow<E>(_: E) -> Error {
    Error::format("value exceeds the 32-bit checkpoint field range")
}
