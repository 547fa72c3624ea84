//! Shared layout of the binary files: a magic line, `key value` header
//! lines, an `end` line, zero padding to a 32-byte boundary, then
//! little-endian `f64` values.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Payload alignment in bytes.
pub const ALIGN: usize = 32;

const END: &str = "end";

/// Accumulates header lines for one file.
#[derive(Debug)]
pub struct HeaderWriter {
    text: String,
}

impl HeaderWriter {
    pub fn new(magic: &str) -> Self {
        HeaderWriter {
            text: format!("{magic}\n"),
        }
    }

    /// Appends `key v1 v2 ...`. Floats use the shortest round-trip form.
    pub fn line<I, T>(&mut self, key: &str, values: I) -> &mut Self
    where
        I: IntoIterator<Item = T>,
        T: Display,
    {
        self.text.push_str(key);
        for v in values {
            self.text.push(' ');
            self.text.push_str(&v.to_string());
        }
        self.text.push('\n');
        self
    }

    pub fn field(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.line(key, [value])
    }

    /// Serializes header and payload to bytes.
    pub fn finish(&self, payload: &[f64]) -> Vec<u8> {
        let mut bytes = self.text.clone().into_bytes();
        bytes.extend_from_slice(END.as_bytes());
        bytes.push(b'\n');
        bytes.resize(bytes.len().next_multiple_of(ALIGN), 0);
        bytes.reserve(payload.len() * 8);
        for v in payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }
}

/// Sequential reader over a parsed header.
#[derive(Debug)]
pub struct HeaderReader {
    path: PathBuf,
    lines: Vec<String>,
    pos: usize,
    payload: Vec<f64>,
    cursor: usize,
}

impl HeaderReader {
    /// Splits `bytes` into header lines and payload, checking the magic line.
    pub fn parse(path: &Path, magic: &str, bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Error::format(path, m);
        let first = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
        if &bytes[..first] != magic.as_bytes() {
            let seen = String::from_utf8_lossy(&bytes[..first.min(16)]).into_owned();
            return Err(fail(format!("expected magic {magic:?}, found {seen:?}")));
        }
        let mut lines = Vec::new();
        let mut start = first + 1;
        let header_end = loop {
            let rel = bytes
                .get(start..)
                .and_then(|rest| rest.iter().position(|&b| b == b'\n'))
                .ok_or_else(|| fail("header is not terminated by an `end` line".into()))?;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|_| fail("header is not valid UTF-8".into()))?;
            start += rel + 1;
            if line == END {
                break start;
            }
            lines.push(line.to_string());
        };
        let offset = header_end.next_multiple_of(ALIGN);
        if offset > bytes.len() || bytes[header_end..offset].iter().any(|&b| b != 0) {
            return Err(fail("malformed padding after header".into()));
        }
        let body = &bytes[offset..];
        if body.len() % 8 != 0 {
            return Err(fail(format!("payload of {} bytes is not a whole number of f64 values", body.len())));
        }
        let payload = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(HeaderReader {
            path: path.to_path_buf(),
            lines,
            pos: 0,
            payload,
            cursor: 0,
        })
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::format(&self.path, message)
    }

    /// Values of the next line, which must start with `key`.
    pub fn line(&mut self, key: &str) -> Result<Vec<String>> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| self.error(format!("header ends before `{key}`")))?;
        let mut parts = line.split(' ');
        if parts.next() != Some(key) {
            return Err(self.error(format!("expected header key `{key}`, found {line:?}")));
        }
        let values = parts.map(str::to_string).collect();
        self.pos += 1;
        Ok(values)
    }

    /// Parses the next line as `count` values of `T`.
    pub fn values<T: FromStr>(&mut self, key: &str, count: usize) -> Result<Vec<T>> {
        let raw = self.line(key)?;
        if raw.len() != count {
            return Err(self.error(format!("`{key}` needs {count} values, found {}", raw.len())));
        }
        raw.iter()
            .map(|s| s.parse().map_err(|_| self.error(format!("`{key}`: cannot parse {s:?}"))))
            .collect()
    }

    pub fn field<T: FromStr>(&mut self, key: &str) -> Result<T> {
        Ok(self.values(key, 1)?.pop().expect("one value"))
    }

    /// Remainder of the next line after `key`, unsplit.
    pub fn text(&mut self, key: &str) -> Result<String> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| self.error(format!("header ends before `{key}`")))?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.error(format!("expected header key `{key}`, found {line:?}")))?
            .to_string();
        self.pos += 1;
        Ok(rest)
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let v: u32 = self.field("version")?;
        if v != supported {
            return Err(self.error(format!("unsupported version {v}, expected {supported}")));
        }
        Ok(())
    }

    /// Takes the next `n` payload values.
    pub fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.cursor + n;
        if end > self.payload.len() {
            return Err(self.error(format!(
                "payload holds {} values, header describes at least {end}",
                self.payload.len()
            )));
        }
        let out = self.payload[self.cursor..end].to_vec();
        self.cursor = end;
        Ok(out)
    }

    /// Checks that the header and payload were consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.lines.len() {
            return Err(self.error(format!("unexpected header line {:?}", self.lines[self.pos])));
        }
        if self.cursor != self.payload.len() {
            return Err(self.error(format!(
                "payload holds {} values, header describes {}",
                self.payload.len(),
                self.cursor
            )));
        }
        Ok(())
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let mut h = HeaderWriter::new("TEST");
        h.field("version", 1).line("xs", [0.1, -2.5e-300]).field("name", "a b");
        let payload = [1.0, f64::MIN_POSITIVE, -0.0, f64::INFINITY];
        let bytes = h.finish(&payload);
        let offset = bytes.len() - 32;
        assert_eq!(offset % ALIGN, 0);
        let mut r = HeaderReader::parse(Path::new("t"), "TEST", &bytes).unwrap();
        r.version(1).unwrap();
        assert_eq!(r.values::<f64>("xs", 2).unwrap(), vec![0.1, -2.5e-300]);
        assert_eq!(r.text("name").unwrap(), "a b");
        let back = r.take(4).unwrap();
        assert!(back.iter().zip(&payload).all(|(a, b)| a.to_bits() == b.to_bits()));
        r.finish().unwrap();
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = HeaderWriter::new("AAAA").finish(&[1.0, 2.0]);
        assert!(HeaderReader::parse(Path::new("t"), "BBBB", &bytes).is_err());
        assert!(HeaderReader::parse(Path::new("t"), "AAAA", &bytes[..bytes.len() - 3]).is_err());
        let mut r = HeaderReader::parse(Path::new("t"), "AAAA", &bytes).unwrap();
        assert!(r.take(3).is_err());
        r.take(1).unwrap();
        assert!(r.finish().is_err());
    }
}
