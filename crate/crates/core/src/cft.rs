//! On-disk tensor formats.
//!
//! CFT1 is the raw tensor file: magic `CFT1`, u8 rank, rank little-endian
//! u32 extents, then element-count little-endian IEEE-754 float32 values.
//! Round-trips are bit-exact.
//!
//! [`NamedTensors`] is the container used for checkpoints and external
//! backbone weights: magic `CFNT`, a version byte, a small UTF-8
//! `key=value` header, then a u32 entry count followed by (u16 name length,
//! name bytes, CFT1 tensor) records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CfilError, Result};
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const CFT1_MAGIC: &[u8; 4] = b"CFT1";
pub const CONTAINER_MAGIC: &[u8; 4] = b"CFNT";
pub const CONTAINER_VERSION: u8 = 1;

fn read_bytes<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| CfilError::Malformed(format!("truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_bytes(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let b = read_bytes(r, 2, what)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

/// Serialize one f32 tensor in CFT1 framing.
pub fn write_cft1<W: Write>(w: &mut W, tensor: &Tensor<f32>) -> Result<()> {
    let dims = tensor.shape().dims();
    if dims.len() > u8::MAX as usize {
        return Err(CfilError::Capacity(format!(
            "CFT1 rank limit is {}, got {}",
            u8::MAX,
            dims.len()
        )));
    }
    let io_err = |e| CfilError::Malformed(format!("write failed: {e}"));
    w.write_all(CFT1_MAGIC).map_err(io_err)?;
    w.write_all(&[dims.len() as u8]).map_err(io_err)?;
    for &d in dims {
        let d32 = u32::try_from(d)
            .map_err(|_| CfilError::Capacity(format!("extent {d} exceeds u32 in CFT1")))?;
        w.write_all(&d32.to_le_bytes()).map_err(io_err)?;
    }
    for v in tensor.values() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

/// Parse one CFT1 tensor from a stream.
pub fn read_cft1<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let magic = read_bytes(r, 4, "CFT1 magic")?;
    if magic != CFT1_MAGIC {
        return Err(CfilError::Incompatible(format!(
            "not a CFT1 tensor (magic {magic:02x?})"
        )));
    }
    let rank = read_bytes(r, 1, "CFT1 rank")?[0] as usize;
    if rank == 0 {
        return Err(CfilError::Malformed("CFT1 rank 0".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = read_u32(r, &format!("CFT1 extent {i}"))?;
        dims.push(d as usize);
    }
    let shape = Shape::new(dims)
        .map_err(|e| CfilError::Malformed(format!("CFT1 shape invalid: {e}")))?;
    let count = shape.len();
    let raw = read_bytes(r, count * 4, "CFT1 values")?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, values)
}

pub fn save_cft1(path: impl AsRef<Path>, tensor: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CfilError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_cft1(&mut w, tensor)?;
    w.flush().map_err(|e| CfilError::io(path, e))
}

pub fn load_cft1(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CfilError::io(path, e))?;
    read_cft1(&mut BufReader::new(file))
}

/// Ordered named tensors plus an ordered `key=value` header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    header: Vec<(String, String)>,
    entries: Vec<(String, Tensor<f32>)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_header(&mut self, key: &str, value: impl ToString) {
        assert!(
            !key.contains('=') && !key.contains('\n'),
            "header key must not contain '=' or newline"
        );
        let value = value.to_string();
        assert!(!value.contains('\n'), "header value must not contain newline");
        self.header.push((key.to_string(), value));
    }

    pub fn header(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn header_entries(&self) -> &[(String, String)] {
        &self.header
    }

    pub fn require_header(&self, key: &str) -> Result<&str> {
        self.header(key)
            .ok_or_else(|| CfilError::Malformed(format!("container header missing '{key}'")))
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<f32>) {
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| CfilError::Incompatible(format!("container missing tensor '{name}'")))
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io_err = |e| CfilError::Malformed(format!("write failed: {e}"));
        w.write_all(CONTAINER_MAGIC).map_err(io_err)?;
        w.write_all(&[CONTAINER_VERSION]).map_err(io_err)?;
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let hb = header.as_bytes();
        let hlen = u32::try_from(hb.len())
            .map_err(|_| CfilError::Capacity("container header too large".into()))?;
        w.write_all(&hlen.to_le_bytes()).map_err(io_err)?;
        w.write_all(hb).map_err(io_err)?;
        let count = u32::try_from(self.entries.len())
            .map_err(|_| CfilError::Capacity("too many container entries".into()))?;
        w.write_all(&count.to_le_bytes()).map_err(io_err)?;
        for (name, tensor) in &self.entries {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len())
                .map_err(|_| CfilError::Capacity(format!("tensor name '{name}' too long")))?;
            w.write_all(&nlen.to_le_bytes()).map_err(io_err)?;
            w.write_all(nb).map_err(io_err)?;
            write_cft1(w, tensor)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_bytes(r, 4, "container magic")?;
        if magic != CONTAINER_MAGIC {
            return Err(CfilError::Incompatible(format!(
                "not a named-tensor container (magic {magic:02x?})"
            )));
        }
        let version = read_bytes(r, 1, "container version")?[0];
        if version != CONTAINER_VERSION {
            return Err(CfilError::Incompatible(format!(
                "container version {version} unsupported (this build reads {CONTAINER_VERSION})"
            )));
        }
        let hlen = read_u32(r, "header length")? as usize;
        let hraw = read_bytes(r, hlen, "header")?;
        let htext = String::from_utf8(hraw)
            .map_err(|_| CfilError::Malformed("container header is not UTF-8".into()))?;
        let mut header = Vec::new();
        for line in htext.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CfilError::Malformed(format!("header line '{line}' lacks '='")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = read_u32(r, "entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let nlen = read_u16(r, &format!("name length of entry {i}"))? as usize;
            let nraw = read_bytes(r, nlen, &format!("name of entry {i}"))?;
            let name = String::from_utf8(nraw)
                .map_err(|_| CfilError::Malformed(format!("entry {i} name is not UTF-8")))?;
            let tensor = read_cft1(r)?;
            entries.push((name, tensor));
        }
        Ok(NamedTensors { header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| CfilError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| CfilError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| CfilError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Bitwise equality of two f32 tensors (NaN-safe, unlike `==`).
pub fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape()
        && a.values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn cft1_roundtrip_bit_exact() {
        let mut rng = SeededRng::new(99);
        let t = Tensor::<f32>::uniform(Shape::of(&[3, 4, 5]), -10.0, 10.0, &mut rng);
        let mut buf = Vec::new();
        write_cft1(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 3 * 4 + 60 * 4);
        let back = read_cft1(&mut buf.as_slice()).unwrap();
        assert!(bits_equal(&t, &back));
    }

    #[test]
    fn cft1_framing_bytes() {
        let t = Tensor::<f32>::new(Shape::of(&[2]), vec![1.0, -1.0]).unwrap();
        let mut buf = Vec::new();
        write_cft1(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"CFT1");
        assert_eq!(buf[4], 1); // rank
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        assert_eq!(&buf[9..13], &1.0f32.to_le_bytes());
        assert_eq!(&buf[13..17], &(-1.0f32).to_le_bytes());
    }

    #[test]
    fn cft1_truncated_is_clean_error() {
        let t = Tensor::<f32>::zeros(Shape::of(&[4, 4]));
        let mut buf = Vec::new();
        write_cft1(&mut buf, &t).unwrap();
        for cut in [0, 3, 5, 9, buf.len() - 1] {
            let err = read_cft1(&mut &buf[..cut]).unwrap_err();
            assert!(
                matches!(err, CfilError::Malformed(_) | CfilError::Incompatible(_)),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn cft1_bad_magic() {
        let buf = b"NOPE\x01\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(matches!(
            read_cft1(&mut buf.as_slice()),
            Err(CfilError::Incompatible(_))
        ));
    }

    #[test]
    fn container_roundtrip() {
        let mut rng = SeededRng::new(7);
        let mut c = NamedTensors::new();
        c.set_header("seed", 42u64);
        c.set_header("width_scale", "1/4");
        c.push(
            "conv0.weight",
            Tensor::<f32>::uniform(Shape::of(&[4, 6, 3, 3]), -1.0, 1.0, &mut rng),
        );
        c.push("conv0.bias", Tensor::<f32>::zeros(Shape::of(&[4])));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = NamedTensors::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.header("seed"), Some("42"));
        assert_eq!(back.header("width_scale"), Some("1/4"));
        assert_eq!(back.len(), 2);
        assert!(bits_equal(
            back.get("conv0.weight").unwrap(),
            c.get("conv0.weight").unwrap()
        ));

        // Re-serialization is byte-identical.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn container_version_checked() {
        let mut c = NamedTensors::new();
        c.push("t", Tensor::<f32>::zeros(Shape::of(&[1])));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf[4] = 9; // forge a future version
        assert!(matches!(
            NamedTensors::read_from(&mut buf.as_slice()),
            Err(CfilError::Incompatible(_))
        ));
    }

    #[test]
    fn container_truncation() {
        let mut c = NamedTensors::new();
        c.set_header("k", "v");
        c.push("t", Tensor::<f32>::zeros(Shape::of(&[8])));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        for cut in [2, 6, 10, buf.len() / 2, buf.len() - 2] {
            assert!(
                NamedTensors::read_from(&mut &buf[..cut]).is_err(),
                "cut {cut} should fail"
            );
        }
    }
}
