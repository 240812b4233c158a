//! Little-endian byte cursor shared by the four file formats.

use crate::error::{ParseError, ParseErrorKind};

pub(crate) struct Reader<'a> {
    format: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(format: &'static str, buf: &'a [u8]) -> Self {
        Reader {
            format,
            buf,
            pos: 0,
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error_at(&self, offset: u64, kind: ParseErrorKind) -> ParseError {
        ParseError {
            format: self.format,
            offset,
            kind,
        }
    }

    pub fn error(&self, kind: ParseErrorKind) -> ParseError {
        self.error_at(self.offset(), kind)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(self.error(ParseErrorKind::Truncated {
                needed: n,
                available,
            }));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Checks the 4-byte magic and the u16 version (must be 1).
    pub fn header(&mut self, magic: &[u8; 4]) -> Result<(), ParseError> {
        let found = self.take(4)?;
        if found != magic {
            let mut f = [0u8; 4];
            f.copy_from_slice(found);
            return Err(self.error_at(0, ParseErrorKind::BadMagic { found: f }));
        }
        let at = self.offset();
        let v = self.u16()?;
        if v != 1 {
            return Err(self.error_at(at, ParseErrorKind::BadVersion(v)));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, ParseError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ParseError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, ParseError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads `n` f32 values widened to f64, rejecting NaN and infinities.
    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>, ParseError> {
        let at = self.offset();
        let bytes = self.take(n.saturating_mul(4))?;
        let out: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(self.error_at(at, ParseErrorKind::NonFinite));
        }
        Ok(out)
    }

    pub fn string(&mut self) -> Result<String, ParseError> {
        let len = self.u32()? as usize;
        let at = self.offset();
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.error_at(at, ParseErrorKind::BadUtf8))
    }

    pub fn finish(&self) -> Result<(), ParseError> {
        let rest = self.buf.len() - self.pos;
        if rest != 0 {
            return Err(self.error(ParseErrorKind::TrailingBytes(rest)));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn header(&mut self, magic: &[u8; 4]) {
        self.buf.extend_from_slice(magic);
        self.u16(1);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

/// Rounds through f32, the precision every file format stores.
pub(crate) fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| *x as f32 as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut w = Writer::default();
        w.header(b"TEST");
        w.u16(7);
        let mut r = Reader::new("test", &w.buf);
        r.header(b"TEST").unwrap();
        let err = r.u32().unwrap_err();
        assert_eq!(err.offset, 6);
        assert!(matches!(
            err.kind,
            ParseErrorKind::Truncated {
                needed: 4,
                available: 2
            }
        ));
    }

    #[test]
    fn wrong_magic_at_zero() {
        let mut r = Reader::new("test", b"NOPE\x01\x00");
        let err = r.header(b"TEST").unwrap_err();
        assert_eq!(err.offset, 0);
    }

    #[test]
    fn wrong_version_at_four() {
        let mut r = Reader::new("test", b"TEST\x02\x00");
        let err = r.header(b"TEST").unwrap_err();
        assert_eq!((err.offset, err.kind), (4, ParseErrorKind::BadVersion(2)));
    }
}
