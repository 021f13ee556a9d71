//! One binary tensor-record container shared by encoder packs, dataset
//! blobs and checkpoints; only the 8-byte magic differs per kind.
//!
//! Layout, all little-endian:
//!   magic[8] | header_len u32 | header bytes | record_count u32 |
//!   records... | crc32 u32
//! Each record: name_len u32 | name utf8 | rank u32 | dims u32 x rank |
//! values f64 x numel. The trailing CRC32 covers every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PACK_MAGIC: &[u8; 8] = b"DFOPACK1";
pub const BLOB_MAGIC: &[u8; 8] = b"DFODATA1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFOCKPT1";

/// Tensor in on-disk form: shape plus f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        RawTensor {
            shape: t.shape().to_vec(),
            values: t.values_f64(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64_values(self.shape.clone(), &self.values)
    }
}

/// Serializes into bytes (without writing to disk).
pub fn encode(magic: &[u8; 8], header: &[u8], records: &[(String, RawTensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write_file(
    path: &Path,
    magic: &[u8; 8],
    header: &[u8],
    records: &[(String, RawTensor)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    fs::write(path, encode(magic, header, records))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt {
                path: self.path.to_string(),
                reason: format!("truncated: needed {} bytes at offset {}", n, self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses bytes previously produced by [`encode`], verifying magic and CRC.
pub fn decode(
    bytes: &[u8],
    magic: &[u8; 8],
    path: &str,
) -> Result<(Vec<u8>, Vec<(String, RawTensor)>)> {
    if bytes.len() < 8 + 4 + 4 + 4 {
        return Err(Error::Corrupt {
            path: path.to_string(),
            reason: "file too short".into(),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum {
            path: path.to_string(),
        });
    }
    if &body[..8] != magic {
        return Err(Error::FormatMismatch {
            path: path.to_string(),
            found: String::from_utf8_lossy(&body[..8]).into_owned(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
        path,
    };
    let header_len = r.u32()? as usize;
    let header = r.take(header_len)?.to_vec();
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Corrupt {
            path: path.to_string(),
            reason: "record name is not UTF-8".into(),
        })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        records.push((name, RawTensor { shape, values }));
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt {
            path: path.to_string(),
            reason: format!("{} trailing bytes", body.len() - r.pos),
        });
    }
    Ok((header, records))
}

pub fn read_file(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<(String, RawTensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, magic, &path.display().to_string())
}

/// Little-endian struct-style header builder/parser used by the formats
/// that share this container.
#[derive(Default)]
pub struct HeaderWriter {
    buf: Vec<u8>,
}

impl HeaderWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct HeaderReader<'a> {
    inner: Reader<'a>,
}

impl<'a> HeaderReader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a str) -> Self {
        HeaderReader {
            inner: Reader {
                bytes,
                pos: 0,
                path,
            },
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.inner.u32()
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.inner.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.inner.take(16)?.try_into().unwrap(),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.inner.f64()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.inner.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.inner.u32()? as usize;
        String::from_utf8(self.inner.take(len)?.to_vec()).map_err(|_| Error::Corrupt {
            path: self.inner.path.to_string(),
            reason: "header string is not UTF-8".into(),
        })
    }

    pub fn done(&self) -> bool {
        self.inner.pos == self.inner.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<(String, RawTensor)> {
        vec![
            (
                "alpha".to_string(),
                RawTensor {
                    shape: vec![2, 2],
                    values: vec![1.0, -2.5, 3.25, 0.0],
                },
            ),
            (
                "beta".to_string(),
                RawTensor {
                    shape: vec![3],
                    values: vec![f64::MIN_POSITIVE, 1e300, -0.0],
                },
            ),
        ]
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let records = sample_records();
        let bytes = encode(PACK_MAGIC, b"hdr", &records);
        let (header, back) = decode(&bytes, PACK_MAGIC, "mem").unwrap();
        assert_eq!(header, b"hdr");
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in records.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let bits1: Vec<u64> = t1.values.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode(BLOB_MAGIC, b"", &sample_records());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode(&bytes, BLOB_MAGIC, "mem"),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode(BLOB_MAGIC, b"", &sample_records());
        let cut = &bytes[..bytes.len() - 9];
        assert!(decode(cut, BLOB_MAGIC, "mem").is_err());
    }

    #[test]
    fn wrong_magic_reports_format_mismatch() {
        let bytes = encode(BLOB_MAGIC, b"", &sample_records());
        assert!(matches!(
            decode(&bytes, PACK_MAGIC, "mem"),
            Err(Error::FormatMismatch { .. })
        ));
    }

    #[test]
    fn header_writer_reader_roundtrip() {
        let mut w = HeaderWriter::new();
        w.u32(7).u64(1 << 40).f64(-0.125).str("hello").u128(99);
        let buf = w.finish();
        let mut r = HeaderReader::new(&buf, "mem");
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.u64().unwrap(), 1 << 40);
        assert_eq!(r.f64().unwrap(), -0.125);
        assert_eq!(r.str().unwrap(), "hello");
        assert_eq!(r.u128().unwrap(), 99);
        assert!(r.done());
    }
}
