//! Little-endian helpers shared by the VFLD, TRAJ and DMAP codecs.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    pub fn error(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.error(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32()?;
        if v != supported {
            return Err(self.error(format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(LittleEndian::read_f32(self.take(4)?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.error("size overflow"))?,
        )?;
        let mut out = vec![0f32; n];
        LittleEndian::read_f32_into(raw, &mut out);
        Ok(out)
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.error("size overflow"))?,
        )?;
        let mut out = vec![0f64; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

// Writes into a Vec never fail.
pub(crate) trait PutLe {
    fn put_u32(&mut self, v: u32);
    fn put_f32(&mut self, v: f32);
    fn put_f64(&mut self, v: f64);
}

impl PutLe for Vec<u8> {
    fn put_u32(&mut self, v: u32) {
        self.write_u32::<LittleEndian>(v).expect("vec write");
    }
    fn put_f32(&mut self, v: f32) {
        self.write_f32::<LittleEndian>(v).expect("vec write");
    }
    fn put_f64(&mut self, v: f64) {
        self.write_f64::<LittleEndian>(v).expect("vec write");
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn checked_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Data(format!("{what} = {n} does not fit in u32")))
}

/// Nearest f32 whose magnitude does not exceed `x`.
///
/// Used for stored probability maps so quantization never increases total mass.
pub(crate) fn f32_toward_zero(x: f64) -> f32 {
    let y = x as f32;
    if y.is_finite() && (y as f64).abs() > x.abs() {
        f32::from_bits(y.to_bits() - 1)
    } else {
        y
    }
}

/// Nearest f32 that stays in the same unit cell as `x` (`floor` is preserved).
pub(crate) fn f32_same_cell(x: f64) -> f32 {
    let y = x as f32;
    if y.is_finite() && (y as f64).floor() > x.floor() {
        // rounding crossed an integer upward; step one ulp toward -inf
        if y > 0.0 {
            f32::from_bits(y.to_bits() - 1)
        } else {
            f32::from_bits(y.to_bits() + 1)
        }
    } else {
        y
    }
}
