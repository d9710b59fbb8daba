//! Versioned on-disk container shared by datasets and checkpoints.
//!
//! Layout (all text lines are compact JSON terminated by `\n`):
//!
//! ```text
//! {"format":"dreamland","kind":<kind>,"version":<u32>, ...header fields}
//! {"block":<name>,"len":<n>, ...block metadata}
//! <n little-endian f64 values>\n
//! ... more blocks ...
//! {"end":true,"blocks":<count>,"sha256":<hex digest of every preceding byte>}
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const FORMAT: &str = "dreamland";

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub meta: Map<String, Value>,
    pub data: Vec<f64>,
}

impl Block {
    pub fn new(name: impl Into<String>, data: Vec<f64>) -> Self {
        Block {
            name: name.into(),
            meta: Map::new(),
            data,
        }
    }

    pub fn with_meta(mut self, key: &str, value: Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Map<String, Value>,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing block `{name}`")))
    }

    pub fn header_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("missing header field `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

pub fn to_bytes(kind: &str, version: u32, header: &Map<String, Value>, blocks: &[Block]) -> Vec<u8> {
    let mut head = Map::new();
    head.insert("format".into(), json!(FORMAT));
    head.insert("kind".into(), json!(kind));
    head.insert("version".into(), json!(version));
    for (k, v) in header {
        head.insert(k.clone(), v.clone());
    }
    let mut out = Vec::new();
    out.extend(serde_json::to_vec(&Value::Object(head)).expect("header serializes"));
    out.push(b'\n');
    for b in blocks {
        let mut line = Map::new();
        line.insert("block".into(), json!(b.name));
        line.insert("len".into(), json!(b.data.len()));
        for (k, v) in &b.meta {
            line.insert(k.clone(), v.clone());
        }
        out.extend(serde_json::to_vec(&Value::Object(line)).expect("block header serializes"));
        out.push(b'\n');
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    let digest = hex::encode(Sha256::digest(&out));
    let footer = json!({"end": true, "blocks": blocks.len(), "sha256": digest});
    out.extend(serde_json::to_vec(&footer).expect("footer serializes"));
    out.push(b'\n');
    out
}

pub fn write(
    path: &Path,
    kind: &str,
    version: u32,
    header: &Map<String, Value>,
    blocks: &[Block],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, to_bytes(kind, version, header, blocks))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Corrupt("unexpected end of file".into()))?;
        self.pos += end + 1;
        Ok(&rest[..end])
    }

    fn json_line(&mut self) -> Result<Map<String, Value>> {
        let line = self.line()?;
        match serde_json::from_slice::<Value>(line) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(Error::Corrupt("expected a JSON object line".into())),
            Err(e) => Err(Error::Corrupt(format!("malformed record: {e}"))),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt("truncated data block".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn from_bytes(bytes: &[u8], kind: &str, version: u32) -> Result<Container> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut header = cur.json_line()?;
    if header.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err(Error::Corrupt("not a dreamland file".into()));
    }
    let found_kind = header.get("kind").and_then(Value::as_str).unwrap_or("");
    if found_kind != kind {
        return Err(Error::Corrupt(format!("expected a `{kind}` file, found `{found_kind}`")));
    }
    let found_version = header
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Corrupt("missing version".into()))? as u32;
    if found_version != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found: found_version,
        });
    }
    for k in ["format", "kind", "version"] {
        header.remove(k);
    }

    let mut blocks = Vec::new();
    loop {
        let body_end = cur.pos;
        let mut line = cur.json_line()?;
        if line.get("end").and_then(Value::as_bool) == Some(true) {
            let count = line.get("blocks").and_then(Value::as_u64);
            if count != Some(blocks.len() as u64) {
                return Err(Error::Corrupt("block count mismatch".into()));
            }
            let digest = hex::encode(Sha256::digest(&bytes[..body_end]));
            if line.get("sha256").and_then(Value::as_str) != Some(digest.as_str()) {
                return Err(Error::Corrupt("checksum mismatch".into()));
            }
            if cur.pos != bytes.len() {
                return Err(Error::Corrupt("trailing bytes after footer".into()));
            }
            break;
        }
        let name = match line.remove("block") {
            Some(Value::String(s)) => s,
            _ => return Err(Error::Corrupt("block record without a name".into())),
        };
        let len = line
            .remove("len")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt(format!("block `{name}` without a length")))?
            as usize;
        let raw = cur.take(len.checked_mul(8).ok_or_else(|| Error::Corrupt("oversized block".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if cur.take(1)? != b"\n" {
            return Err(Error::Corrupt(format!("block `{name}` not newline-terminated")));
        }
        blocks.push(Block {
            name,
            meta: line,
            data,
        });
    }
    Ok(Container { header, blocks })
}

pub fn read(path: &Path, kind: &str, version: u32) -> Result<Container> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, kind, version)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Map<String, Value>, Vec<Block>) {
        let mut header = Map::new();
        header.insert("note".into(), json!("x"));
        let blocks = vec![
            Block::new("a", vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).with_meta("tag", json!(3)),
            Block::new("empty", vec![]),
        ];
        (header, blocks)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (header, blocks) = sample();
        let bytes = to_bytes("test", 2, &header, &blocks);
        let c = from_bytes(&bytes, "test", 2).unwrap();
        assert_eq!(c.header, header);
        assert_eq!(c.blocks.len(), 2);
        let back: Vec<u64> = c.blocks[0].data.iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = blocks[0].data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(back, orig);
        assert_eq!(c.blocks[0].meta.get("tag"), Some(&json!(3)));
    }

    #[test]
    fn rejects_version_and_kind() {
        let (header, blocks) = sample();
        let bytes = to_bytes("test", 2, &header, &blocks);
        assert!(matches!(
            from_bytes(&bytes, "test", 3),
            Err(Error::VersionMismatch { expected: 3, found: 2 })
        ));
        assert!(matches!(from_bytes(&bytes, "other", 2), Err(Error::Corrupt(_))));
    }

    #[test]
    fn detects_truncation_and_tampering() {
        let (header, blocks) = sample();
        let bytes = to_bytes("test", 1, &header, &blocks);
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            assert!(matches!(from_bytes(&bytes[..cut], "test", 1), Err(Error::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        let pos = flipped.iter().position(|&b| b == b'\n').unwrap() + 40;
        flipped[pos] ^= 0x01;
        assert!(from_bytes(&flipped, "test", 1).is_err());
    }
}
