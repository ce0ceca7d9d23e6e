//! `AIRVOL1` volume files.
//!
//! ```text
//! magic   8 bytes  "AIRVOL1\0"
//! ndim    u32 LE
//! dims    ndim x u32 LE
//! data    product(dims) x f32 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"AIRVOL1\0";

pub fn encode_volume(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little cursor that reports the byte offset of whatever it failed to read.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Format {
                offset: self.pos,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// `ndim`, dims and data of one tensor.
    pub(crate) fn tensor(&mut self) -> Result<Tensor, DataError> {
        let ndim_at = self.offset();
        let ndim = self.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(DataError::Format {
                offset: ndim_at,
                detail: format!("implausible ndim {ndim}"),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32("dim")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.checked_mul(4).is_some())
            .ok_or_else(|| DataError::Format {
                offset: ndim_at,
                detail: format!("dims {dims:?} overflow"),
            })?;
        let raw = self.take(count * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(dims, data).expect("element count checked"))
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor, DataError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(DataError::Format {
            offset: 0,
            detail: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let t = r.tensor()?;
    if !r.rest().is_empty() {
        return Err(DataError::Format {
            offset: r.offset(),
            detail: format!("{} trailing bytes", r.rest().len()),
        });
    }
    Ok(t)
}

pub fn save_volume(t: &Tensor, path: &Path) -> Result<(), DataError> {
    if t.ndim() != 3 {
        return Err(DataError::Invalid(format!(
            "volumes are [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&encode_volume(t))
        .map_err(|e| DataError::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_volume(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f32);
        let bytes = encode_volume(&t);
        assert_eq!(&bytes[..8], b"AIRVOL1\0");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 4 + 12 + 24 * 4);
        assert_eq!(&bytes[24..28], &0f32.to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = encode_volume(&Tensor::zeros([1, 2, 2]));
        bytes[3] = b'X';
        match decode_volume(&bytes) {
            Err(DataError::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_volume(&Tensor::zeros([1, 2, 2]));
        let cut = &bytes[..bytes.len() - 3];
        match decode_volume(cut) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode_volume(&bytes[..5]),
            Err(DataError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn save_rejects_non_volume() {
        let dir = tempfile::tempdir().unwrap();
        let err = save_volume(&Tensor::zeros([4, 4]), &dir.path().join("x.airvol"));
        assert!(matches!(err, Err(DataError::Invalid(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(c in 1usize..3, h in 1usize..6, w in 1usize..6,
                                 vals in proptest::collection::vec(any::<f32>(), 36)) {
            let t = Tensor::from_fn([c, h, w], |i| vals[i % vals.len()]);
            let back = decode_volume(&encode_volume(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.airvol");
        let t = Tensor::from_fn([2, 5, 3], |i| (i as f32).sqrt());
        save_volume(&t, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap(), t);
    }
}
