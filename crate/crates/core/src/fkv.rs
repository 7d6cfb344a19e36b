//! On-disk formats.
//!
//! `FKV1` holds a full dump: a fixed 36-byte header, one modality byte per
//! position, then per layer the K and V tensors row-major
//! `[head][position][channel]`. `FKC1` holds a compressed cache: the same
//! header shape (seq_len field = original sequence length), a u64 retained
//! count per layer, then per layer the retained positions as u64 followed
//! by the K and V rows. All integers are little-endian; payload elements
//! are f32 or IEEE binary16 per the header dtype byte.

use std::fs;
use std::path::Path;

use half::f16;

use crate::cache::CompressedCache;
use crate::dump::{DType, DumpMeta, KvDump, TokenTag};
use crate::error::{Error, Result};
use crate::eval::QueryMatrix;
use crate::tensor::{LayerKv, Tensor3};

pub const FKV_MAGIC: [u8; 4] = *b"FKV1";
pub const FKC_MAGIC: [u8; 4] = *b"FKC1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 36;
const RESERVED: [u8; 7] = [0; 7];

/// Serializes a dump to `FKV1` at the dump's storage dtype.
pub fn write_dump(path: &Path, dump: &KvDump) -> Result<()> {
    let meta = dump.meta();
    let mut buf = Vec::with_capacity(HEADER_LEN + meta.seq_len + dump.kv_bytes() as usize);
    push_header(&mut buf, FKV_MAGIC, &meta, meta.seq_len as u64);
    buf.extend(dump.token_tags().iter().map(|t| t.code()));
    for layer in dump.layers() {
        push_tensor(&mut buf, &layer.keys, meta.dtype);
        push_tensor(&mut buf, &layer.values, meta.dtype);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads an `FKV1` dump, widening f16 payloads to f32 in memory.
pub fn read_dump(path: &Path) -> Result<KvDump> {
    let buf = fs::read(path)?;
    let header = parse_header(path, &buf, FKV_MAGIC)?;
    let (layers, heads, dim) = (header.num_layers, header.kv_heads, header.head_dim);
    let seq = header.seq_len;
    let tensor_len = (heads as u128) * (seq as u128) * (dim as u128);
    let payload = 2 * (layers as u128) * tensor_len * header.dtype.bytes() as u128;
    expect_len(path, &buf, HEADER_LEN as u128 + seq as u128 + payload)?;

    let mut off = HEADER_LEN;
    let mut tags = Vec::with_capacity(seq);
    for &b in &buf[off..off + seq] {
        tags.push(TokenTag::from_code(b).ok_or(Error::InvalidByte {
            path: path.to_owned(),
            field: "token_tag",
            value: b,
        })?);
    }
    off += seq;

    let mut kv_layers = Vec::with_capacity(layers);
    for i in 0..layers {
        let keys = read_tensor(&buf, &mut off, heads, seq, dim, header.dtype);
        let values = read_tensor(&buf, &mut off, heads, seq, dim, header.dtype);
        kv_layers.push(LayerKv::new(i, keys, values)?);
    }
    let dump = KvDump::new(kv_layers, tags, header.dtype)?;
    dump.validate_finite()?;
    Ok(dump)
}

/// Serializes a compressed cache to `FKC1`.
pub fn write_cache(path: &Path, cache: &CompressedCache) -> Result<()> {
    let layers = cache.layers();
    let first = &layers[0].keys;
    let meta = DumpMeta {
        num_layers: layers.len(),
        kv_heads: first.heads(),
        head_dim: first.dim(),
        seq_len: cache.original_seq_len(),
        dtype: cache.dtype(),
    };
    let mut buf = Vec::new();
    push_header(&mut buf, FKC_MAGIC, &meta, cache.original_seq_len() as u64);
    for map in cache.position_maps() {
        buf.extend((map.len() as u64).to_le_bytes());
    }
    for (layer, map) in layers.iter().zip(cache.position_maps()) {
        for &p in map {
            buf.extend((p as u64).to_le_bytes());
        }
        push_tensor(&mut buf, &layer.keys, meta.dtype);
        push_tensor(&mut buf, &layer.values, meta.dtype);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads an `FKC1` compressed cache.
pub fn read_cache(path: &Path) -> Result<CompressedCache> {
    let buf = fs::read(path)?;
    let header = parse_header(path, &buf, FKC_MAGIC)?;
    let (layers, heads, dim) = (header.num_layers, header.kv_heads, header.head_dim);

    let counts_end = HEADER_LEN as u128 + 8 * layers as u128;
    if (buf.len() as u128) < counts_end {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: counts_end as u64,
            actual: buf.len() as u64,
        });
    }
    let mut off = HEADER_LEN;
    let mut counts = Vec::with_capacity(layers);
    for _ in 0..layers {
        counts.push(read_u64(&buf, &mut off) as usize);
    }
    let total_rows: u128 = counts.iter().map(|&c| c as u128).sum();
    let row = (heads as u128) * (dim as u128) * header.dtype.bytes() as u128;
    expect_len(path, &buf, counts_end + total_rows * (8 + 2 * row))?;

    let mut kv_layers = Vec::with_capacity(layers);
    let mut maps = Vec::with_capacity(layers);
    for (i, &count) in counts.iter().enumerate() {
        let mut map = Vec::with_capacity(count);
        for _ in 0..count {
            map.push(read_u64(&buf, &mut off) as usize);
        }
        let keys = read_tensor(&buf, &mut off, heads, count, dim, header.dtype);
        let values = read_tensor(&buf, &mut off, heads, count, dim, header.dtype);
        kv_layers.push(LayerKv::new(i, keys, values)?);
        maps.push(map);
    }
    let cache = CompressedCache::new(header.seq_len, header.dtype, kv_layers, maps)?;
    for layer in cache.layers() {
        layer.validate_finite()?;
    }
    Ok(cache)
}

/// Reads probe queries: a raw little-endian f32 matrix with `width` values
/// per row.
pub fn read_queries(path: &Path, width: usize) -> Result<QueryMatrix> {
    let buf = fs::read(path)?;
    let row_bytes = width.max(1) * 4;
    if buf.is_empty() || buf.len() % row_bytes != 0 {
        // Round up to the next whole row so the message names the shortfall.
        let expected = buf.len().div_ceil(row_bytes).max(1) * row_bytes;
        return Err(Error::SizeMismatch {
            path: path.to_owned(),
            expected: expected as u64,
            actual: buf.len() as u64,
        });
    }
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    QueryMatrix::new(width, data)
}

/// Writes raw little-endian f32 query rows.
pub fn write_queries(path: &Path, queries: &QueryMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(queries.data().len() * 4);
    for &x in queries.data() {
        buf.extend(x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Parses any JSON value this crate serializes.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

struct Header {
    num_layers: usize,
    kv_heads: usize,
    head_dim: usize,
    seq_len: usize,
    dtype: DType,
}

fn push_header(buf: &mut Vec<u8>, magic: [u8; 4], meta: &DumpMeta, seq_len: u64) {
    buf.extend(magic);
    buf.extend(FORMAT_VERSION.to_le_bytes());
    buf.extend((meta.num_layers as u32).to_le_bytes());
    buf.extend((meta.kv_heads as u32).to_le_bytes());
    buf.extend((meta.head_dim as u32).to_le_bytes());
    buf.extend(seq_len.to_le_bytes());
    buf.push(meta.dtype.code());
    buf.extend(RESERVED);
}

fn parse_header(path: &Path, buf: &[u8], magic: [u8; 4]) -> Result<Header> {
    if buf.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: HEADER_LEN as u64,
            actual: buf.len() as u64,
        });
    }
    let found: [u8; 4] = buf[0..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: magic,
            found,
        });
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_owned(),
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let dtype_byte = buf[28];
    let dtype = DType::from_code(dtype_byte).ok_or(Error::InvalidByte {
        path: path.to_owned(),
        field: "dtype",
        value: dtype_byte,
    })?;
    if let Some(&b) = buf[29..HEADER_LEN].iter().find(|&&b| b != 0) {
        return Err(Error::InvalidByte {
            path: path.to_owned(),
            field: "reserved",
            value: b,
        });
    }
    Ok(Header {
        num_layers: u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize,
        kv_heads: u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")) as usize,
        head_dim: u32::from_le_bytes(buf[16..20].try_into().expect("4 bytes")) as usize,
        seq_len: u64::from_le_bytes(buf[20..28].try_into().expect("8 bytes")) as usize,
        dtype,
    })
}

/// Shorter files are truncations, longer ones carry trailing garbage; the
/// two get distinct errors because they have different likely causes.
fn expect_len(path: &Path, buf: &[u8], expected: u128) -> Result<()> {
    let actual = buf.len() as u128;
    if actual < expected {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected: expected.min(u64::MAX as u128) as u64,
            actual: actual as u64,
        });
    }
    if actual > expected {
        return Err(Error::SizeMismatch {
            path: path.to_owned(),
            expected: expected as u64,
            actual: actual as u64,
        });
    }
    Ok(())
}

fn push_tensor(buf: &mut Vec<u8>, tensor: &Tensor3, dtype: DType) {
    match dtype {
        DType::F32 => {
            for &x in tensor.data() {
                buf.extend(x.to_le_bytes());
            }
        }
        DType::F16 => {
            for &x in tensor.data() {
                buf.extend(f16::from_f32(x).to_bits().to_le_bytes());
            }
        }
    }
}

/// Bounds are guaranteed by the caller's `expect_len` check.
fn read_tensor(
    buf: &[u8],
    off: &mut usize,
    heads: usize,
    seq: usize,
    dim: usize,
    dtype: DType,
) -> Tensor3 {
    let count = heads * seq * dim;
    let data: Vec<f32> = match dtype {
        DType::F32 => buf[*off..*off + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect(),
        DType::F16 => buf[*off..*off + 2 * count]
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().expect("chunk of 2"))).to_f32())
            .collect(),
    };
    *off += count * dtype.bytes();
    Tensor3::new(heads, seq, dim, data).expect("length computed from shape")
}

fn read_u64(buf: &[u8], off: &mut usize) -> u64 {
    let v = u64::from_le_bytes(buf[*off..*off + 8].try_into().expect("8 bytes"));
    *off += 8;
    v
}
