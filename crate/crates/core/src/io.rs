//! Framing shared by every persisted artifact.
//!
//! Text artifacts are UTF-8, one tab-separated record per line:
//!
//! ```text
//! #persearch <kind> v<version>
//! <record>\t<field>\t...
//! #crc32 <8 hex digits> <record count>
//! ```
//!
//! The trailer checksum covers every byte before the trailer line, so a
//! truncated file is detected by the missing trailer and a damaged one by the
//! checksum. Binary artifacts use a 4-byte magic, a little-endian `u32`
//! version and end with a little-endian CRC-32 of all preceding bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub struct TextWriter {
    buf: String,
    records: usize,
}

impl TextWriter {
    pub fn new(kind: &str, version: u32) -> Self {
        TextWriter {
            buf: format!("#persearch {kind} v{version}\n"),
            records: 0,
        }
    }

    pub fn record<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for field in fields {
            if !first {
                self.buf.push('\t');
            }
            first = false;
            self.buf.push_str(field.as_ref());
        }
        self.buf.push('\n');
        self.records += 1;
    }

    pub fn finish(mut self) -> String {
        let crc = crc32fast::hash(self.buf.as_bytes());
        let _ = writeln!(self.buf, "#crc32 {crc:08x} {}", self.records);
        self.buf
    }
}

/// A validated text artifact: header, checksum and record count have been
/// checked; `records` yields `(line_number, fields)`.
pub struct TextArtifact<'a> {
    body: &'a str,
}

impl<'a> TextArtifact<'a> {
    pub fn open(text: &'a str, kind: &str, version: u32) -> Result<Self> {
        let header = format!("#persearch {kind} v{version}");
        let first = text.lines().next().unwrap_or("");
        if first != header {
            if first.starts_with(&format!("#persearch {kind} v")) {
                return Err(Error::format(1, format!("version mismatch: `{first}`, expected `{header}`")));
            }
            return Err(Error::format(1, format!("bad header `{first}`, expected `{header}`")));
        }
        let trimmed = text.strip_suffix('\n').ok_or_else(|| {
            Error::format(text.lines().count(), "truncated: missing final newline")
        })?;
        let split = trimmed.rfind('\n').ok_or_else(|| Error::format(1, "truncated: no trailer"))?;
        let body = &text[..split + 1];
        let trailer = &trimmed[split + 1..];
        let trailer_line = body.lines().count() + 1;
        let mut parts = trailer.split(' ');
        if parts.next() != Some("#crc32") {
            return Err(Error::format(trailer_line, "truncated: missing checksum trailer"));
        }
        let crc = parts
            .next()
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or_else(|| Error::format(trailer_line, "malformed checksum trailer"))?;
        let count: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::format(trailer_line, "malformed record count"))?;
        if crc32fast::hash(body.as_bytes()) != crc {
            return Err(Error::format(trailer_line, "checksum mismatch"));
        }
        let actual = body.lines().count() - 1;
        if actual != count {
            return Err(Error::format(trailer_line, format!("expected {count} records, found {actual}")));
        }
        Ok(TextArtifact { body })
    }

    pub fn records(&self) -> impl Iterator<Item = (usize, Vec<&'a str>)> + 'a {
        self.body
            .lines()
            .enumerate()
            .skip(1)
            .map(|(i, line)| (i + 1, line.split('\t').collect()))
    }
}

pub fn field<T: std::str::FromStr>(fields: &[&str], idx: usize, line: usize, what: &str) -> Result<T> {
    let raw = fields
        .get(idx)
        .ok_or_else(|| Error::format(line, format!("missing field `{what}`")))?;
    raw.parse()
        .map_err(|_| Error::format(line, format!("cannot parse `{raw}` as {what}")))
}

pub fn join<T: ToString>(values: &[T], sep: &str) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

pub fn split_list<T: std::str::FromStr>(raw: &str, sep: char, line: usize, what: &str) -> Result<Vec<T>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(sep)
        .map(|p| {
            p.parse()
                .map_err(|_| Error::format(line, format!("cannot parse `{p}` in {what}")))
        })
        .collect()
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Default)]
pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = BinWriter { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
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
    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    /// Verifies magic, version and the trailing checksum before handing out
    /// a cursor positioned after the version field.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len(), "truncated: shorter than header + checksum"));
        }
        if &bytes[..4] != magic {
            return Err(Error::format(0, "bad magic"));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if found != version {
            return Err(Error::format(4, format!("version mismatch: {found}, expected {version}")));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(Error::format(body_len, "checksum mismatch (truncated or corrupt)"));
        }
        Ok(BinReader {
            data: &bytes[..body_len],
            pos: 8,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(self.pos, format!("truncated: need {n} bytes")));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    pub fn position(&self) -> usize {
        self.pos
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    pub fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "invalid UTF-8"))
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::format(self.pos, "trailing bytes"));
        }
        Ok(())
    }
}
