//! Little-endian framing helpers shared by the on-disk formats.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn cstr(&mut self, s: &str) {
        self.buf.extend_from_slice(s.as_bytes());
        self.buf.push(0);
    }

    /// u32 length followed by the bytes.
    pub fn prefixed(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor after the header.
    pub fn open(
        buf: &'a [u8],
        path: &Path,
        magic: &'static [u8; 4],
        magic_name: &'static str,
        version: u32,
    ) -> Result<Self> {
        let mut r = Reader {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        };
        if buf.len() < 4 || &buf[..4] != magic {
            if buf.len() < 4 && magic.starts_with(buf) {
                return Err(r.truncated());
            }
            return Err(Error::BadMagic {
                path: r.path,
                expected: magic_name,
            });
        }
        r.pos = 4;
        let found = r.u32()?;
        if found != version {
            return Err(Error::Version {
                path: r.path,
                found,
                expected: version,
            });
        }
        Ok(r)
    }

    fn truncated(&self) -> Error {
        Error::Truncated {
            path: self.path.clone(),
        }
    }

    pub fn format(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.truncated());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn cstr(&mut self) -> Result<String> {
        let rest = &self.buf[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == 0) else {
            return Err(self.truncated());
        };
        let s = std::str::from_utf8(&rest[..end])
            .map_err(|_| self.format("class name is not valid UTF-8"))?
            .to_string();
        self.pos += end + 1;
        Ok(s)
    }

    pub fn prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn prefixed_str(&mut self) -> Result<String> {
        let b = self.prefixed()?;
        std::str::from_utf8(b)
            .map(str::to_string)
            .map_err(|_| self.format("string record is not valid UTF-8"))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.format(format!("{} unexpected trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in u32")))
}
