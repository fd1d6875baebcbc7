//! Binary tensor (`.trt`) and checkpoint (`.trm`) containers.
//!
//! `.trt`: `"TRT1"`, `u8` dtype tag (0 = f64), `u8` ndim, `ndim` x `u64` LE
//! dims, then the row-major f64 LE payload.
//!
//! `.trm`: `"TRM1"`, `u32` LE record count, then per record a `u16` LE name
//! length, the UTF-8 name and a complete `.trt` record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const TRT_MAGIC: &[u8; 4] = b"TRT1";
pub const TRM_MAGIC: &[u8; 4] = b"TRM1";
const DTYPE_F64: u8 = 0;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated {what}: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn encode_trt(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.ndim() + 8 * t.len());
    write_trt_into(t, &mut out);
    out
}

fn write_trt_into(t: &DenseTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TRT_MAGIC);
    out.push(DTYPE_F64);
    out.push(u8::try_from(t.ndim()).expect("at most 255 modes"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_trt(r: &mut Reader<'_>) -> Result<DenseTensor> {
    let magic = r.take(4, "tensor magic")?;
    if magic != TRT_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let ndim = r.u8("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = r.u64("dims")?;
        let d = usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        if d == 0 {
            return Err(Error::Format("zero-sized mode".into()));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        shape.push(d);
    }
    let bytes = count
        .checked_mul(8)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = r.take(bytes, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseTensor::new(shape, data)
}

/// Decodes exactly one `.trt` record; trailing bytes are an error.
pub fn decode_trt(bytes: &[u8]) -> Result<DenseTensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = read_trt(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn save_trt(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    fs::write(path, encode_trt(t))?;
    Ok(())
}

pub fn load_trt(path: impl AsRef<Path>) -> Result<DenseTensor> {
    decode_trt(&fs::read(path)?)
}

/// Named tensors in the order they were written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, DenseTensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: DenseTensor) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(TRM_MAGIC);
        let count = u32::try_from(self.records.len()).map_err(|_| Error::invalid("too many records"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.records {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("record name too long: {} bytes", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_trt_into(t, &mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "checkpoint magic")?;
        if magic != TRM_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let count = r.u32("record count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| Error::Format(format!("record name is not UTF-8: {e}")))?
                .to_owned();
            let t = read_trt(&mut r)?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trt_layout_is_exact() {
        let t = DenseTensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let bytes = encode_trt(&t);
        let mut want = b"TRT1".to_vec();
        want.extend([0u8, 2]);
        want.extend(2u64.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        want.extend((-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_trt(dir.path().join("t.trt"), &t).unwrap();
        assert_eq!(load_trt(dir.path().join("t.trt")).unwrap(), t);
        let mut ck = Checkpoint::default();
        ck.push("w", t);
        ck.save(dir.path().join("m.trm")).unwrap();
        assert_eq!(Checkpoint::load(dir.path().join("m.trm")).unwrap(), ck);
        assert!(load_trt(dir.path().join("missing.trt")).is_err());
    }

    #[test]
    fn trt_rejects_corruption() {
        let t = DenseTensor::zeros(&[3]).unwrap();
        let good = encode_trt(&t);
        assert!(decode_trt(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_trt(&extra).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode_trt(&magic).is_err());
        let mut dtype = good.clone();
        dtype[4] = 1;
        assert!(decode_trt(&dtype).is_err());
        // absurd dims must not allocate
        let mut huge = b"TRT1".to_vec();
        huge.extend([0u8, 2]);
        huge.extend(u64::MAX.to_le_bytes());
        huge.extend(u64::MAX.to_le_bytes());
        assert!(decode_trt(&huge).is_err());
    }

    #[test]
    fn checkpoint_names_and_order() {
        let mut ck = Checkpoint::default();
        ck.push("layer0.core0", DenseTensor::filled(&[2, 3, 2], 0.5).unwrap());
        ck.push("scalar", DenseTensor::scalar(3.0));
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..4], b"TRM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("scalar").unwrap().data(), &[3.0]);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn trt_roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = DenseTensor::new(shape, data).unwrap();
            let back = decode_trt(&encode_trt(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_trt(&bytes);
            let _ = Checkpoint::decode(&bytes);
        }
    }
}
