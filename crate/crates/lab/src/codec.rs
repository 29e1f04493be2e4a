//! Little-endian binary framing with a trailing SHA-256 checksum.

use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Encoder { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let d = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&d);
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    /// Verifies magic, version and checksum before any field is read.
    pub fn new(bytes: &'a [u8], magic: &[u8; 4], version: u32, what: &'static str) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(LabError::Format(format!("{what}: file truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(LabError::Format(format!("{what}: bad magic")));
        }
        let v = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if v != version {
            return Err(LabError::Format(format!("{what}: format version {v}, expected {version}")));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(LabError::Checksum(what.to_string()));
        }
        Ok(Decoder { buf: body, pos: 8, what })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LabError::Format(format!("{}: unexpected end of data", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(LabError::Format(format!("{}: length {n} exceeds remaining data", self.what)));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| LabError::Format(format!("{}: {e}", self.what)))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(LabError::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut e = Encoder::new(b"TEST", 1);
        e.u64(42);
        e.str("abc");
        e.f64s(&[1.5, -2.0]);
        let mut bytes = e.finish();
        let mut d = Decoder::new(&bytes, b"TEST", 1, "test").unwrap();
        assert_eq!(d.u64().unwrap(), 42);
        assert_eq!(d.str().unwrap(), "abc");
        assert_eq!(d.f64s().unwrap(), vec![1.5, -2.0]);
        d.finish().unwrap();
        assert!(matches!(Decoder::new(&bytes, b"TEST", 2, "test"), Err(LabError::Format(_))));
        bytes[10] ^= 1;
        assert!(matches!(Decoder::new(&bytes, b"TEST", 1, "test"), Err(LabError::Checksum(_))));
        assert!(Decoder::new(&bytes[..20], b"TEST", 1, "test").is_err());
    }
}
