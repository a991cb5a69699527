//! Checkpoint container.
//!
//! ```text
//! ndtensor-checkpoint 1
//! meta <key> <escaped value>
//! tensor <name> f32 <d0>x<d1>x...
//! end
//! <little-endian f32 payloads, concatenated in manifest order>
//! ```
//!
//! Meta values escape `\` as `\\` and newlines as `\n`. Rank-0 tensors are
//! written with the shape `scalar`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Result, Tensor, TensorError};

const MAGIC: &str = "ndtensor-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointFile {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<CheckpointEntry>,
}

impl CheckpointFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            tensor,
        });
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}")?;
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            writeln!(out, "meta {k} {}", escape(v))?;
        }
        for e in &self.entries {
            check_token("tensor name", &e.name)?;
            let shape = if e.tensor.rank() == 0 {
                "scalar".to_string()
            } else {
                e.tensor
                    .shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            writeln!(out, "tensor {} f32 {shape}", e.name)?;
        }
        writeln!(out, "end")?;
        for e in &self.entries {
            for &v in e.tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| TensorError::Checkpoint(m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8".into()))
        };
        let magic = next_line()?;
        if magic != MAGIC {
            return Err(bad(format!("unsupported header {magic:?}")));
        }
        let mut file = CheckpointFile::default();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => {
                    file.meta.push((k.to_string(), unescape(v.unwrap_or(""))));
                }
                (Some("tensor"), Some(name), Some(rest)) => {
                    let (dtype, dims) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("malformed tensor line {line:?}")))?;
                    if dtype != "f32" {
                        return Err(bad(format!("{name}: unsupported dtype {dtype}")));
                    }
                    let shape: Vec<usize> = if dims == "scalar" {
                        Vec::new()
                    } else {
                        dims.split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(format!("{name}: malformed shape {dims:?}")))?
                    };
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(bad(format!("malformed manifest line {line:?}"))),
            }
        }
        let mut payload = &bytes[pos..];
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(bad(format!("{name}: payload truncated")));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            payload = &payload[4 * n..];
            let tensor = if shape.is_empty() {
                Tensor::from_parts(shape, data)
            } else {
                Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?
            };
            file.entries.push(CheckpointEntry { name, tensor });
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        Ok(file)
    }
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(TensorError::Checkpoint(format!(
            "{what} {s:?} must be non-empty without whitespace"
        )));
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, file: &CheckpointFile) -> Result<()> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path)?;
    CheckpointFile::from_bytes(&bytes)
        .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> CheckpointFile {
        let mut f = CheckpointFile::default();
        f.meta.push(("epoch".into(), "3".into()));
        f.meta.push(("config".into(), "[train]\nseed = 7\npath = \"a\\b\"".into()));
        f.push("gen.conv.w", Tensor::from_fn(&[2, 3, 3, 3], |i| i as f64 * 0.1));
        f.push("step", Tensor::scalar(12.0));
        f
    }

    #[test]
    fn manifest_is_plain_text() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("ndtensor-checkpoint 1\nmeta epoch 3\n"));
        assert!(text.contains("tensor gen.conv.w f32 2x3x3x3\ntensor step f32 scalar\nend\n"));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let loaded = CheckpointFile::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.meta, sample().meta);
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.pop();
        assert!(CheckpointFile::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_f32_payloads_round_trip(values in prop::collection::vec(any::<f32>(), 1..64)) {
            let mut f = CheckpointFile::default();
            let n = values.len();
            f.push("t", Tensor::new(&[n], values.iter().map(|&v| v as f64).collect()).unwrap());
            let bytes = f.to_bytes().unwrap();
            let again = CheckpointFile::from_bytes(&bytes).unwrap().to_bytes().unwrap();
            prop_assert_eq!(again, bytes);
        }
    }
}
