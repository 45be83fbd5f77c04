//! `NLCK` checkpoint container.
//!
//! Layout: magic `N L C K`, a `u16` entry count, then per entry a `u16`
//! name length, the UTF-8 name and one NLT1 block. Integers are
//! little-endian. Metadata travels in entry names of the form
//! `#key=value`, each carrying a one-element placeholder tensor. Entries
//! are written in name order so identical states give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{decode_nlt1, encode_nlt1};
use crate::tensor::Tensor;

pub const NLCK_MAGIC: &[u8; 4] = b"NLCK";
const META_MARK: &str = "#";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let have = bytes.len().saturating_sub(*pos);
    if have < n {
        return Err(Error::Format {
            offset: *pos,
            message: format!("truncated {what}: expected {n} bytes, found {have}"),
        });
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

impl Checkpoint {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("checkpoint lacks `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::config(format!("checkpoint field `{key}` has bad value `{raw}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(move |(k, v)| (&k[prefix.len()..], v))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut names: Vec<(String, Option<&Tensor<f32>>)> = Vec::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::contract(format!("metadata entry `{k}` is not a single line")));
            }
            names.push((format!("{META_MARK}{k}={v}"), None));
        }
        for (k, t) in &self.tensors {
            if k.starts_with(META_MARK) {
                return Err(Error::contract(format!("tensor name `{k}` clashes with metadata")));
            }
            names.push((k.clone(), Some(t)));
        }
        let count = u16::try_from(names.len()).map_err(|_| Error::contract("more than 65535 checkpoint entries"))?;
        let placeholder = Tensor::zeros(&[1]);
        let mut out = Vec::new();
        out.extend_from_slice(NLCK_MAGIC);
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in names {
            let n = u16::try_from(name.len()).map_err(|_| Error::contract("entry name too long"))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_nlt1(t.unwrap_or(&placeholder), &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if take(bytes, &mut pos, 4, "checkpoint magic")? != NLCK_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected \"NLCK\"".into(),
            });
        }
        let count = u16::from_le_bytes(take(bytes, &mut pos, 2, "entry count")?.try_into().expect("2"));
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let n = u16::from_le_bytes(take(bytes, &mut pos, 2, "name length")?.try_into().expect("2")) as usize;
            let nstart = pos;
            let name = std::str::from_utf8(take(bytes, &mut pos, n, "entry name")?)
                .map_err(|_| Error::Format {
                    offset: nstart,
                    message: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let (t, used) = decode_nlt1(&bytes[pos..], pos)?;
            pos += used;
            match name.strip_prefix(META_MARK) {
                Some(kv) => {
                    let (k, v) = kv.split_once('=').ok_or_else(|| Error::Format {
                        offset: nstart,
                        message: format!("metadata entry `{name}` lacks `=`"),
                    })?;
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                None => {
                    ck.tensors.insert(name, t);
                }
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                offset: pos,
                message: format!("{} trailing bytes after checkpoint", bytes.len() - pos),
            });
        }
        Ok(ck)
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces a good checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.set_meta("variant", "M3");
        c.set_meta("iteration", 12);
        c.tensors.insert("g/a.w".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1));
        c.tensors.insert("g/b.b".into(), Tensor::full(&[1], -2.5f32));
        c.tensors.insert("d/x".into(), Tensor::full(&[4], 1.0f32));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
        assert_eq!(c.encode().unwrap(), bytes);
        assert_eq!(c.meta_parse::<u64>("iteration").unwrap(), 12);
        let g: Vec<_> = c.with_prefix("g/").map(|(k, _)| k.to_string()).collect();
        assert_eq!(g, vec!["a.w", "b.b"]);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..6], b"NLCK\x05\x00");
        for cut in [2, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }
}
