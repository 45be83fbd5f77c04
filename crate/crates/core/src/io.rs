//! Binary tensor files (`NLT1`) and 8-bit PGM export.
//!
//! `NLT1` layout: the magic `N L T 1`, a `u8` rank, `rank` little-endian
//! `u32` dims, then the `f32` little-endian row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NLT1_MAGIC: &[u8; 4] = b"NLT1";

pub fn encode_nlt1(t: &Tensor<f32>, out: &mut Vec<u8>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::dim("rank does not fit in a byte"))?;
    out.extend_from_slice(NLT1_MAGIC);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::dim(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn truncated(offset: usize, what: &str, expected: usize, actual: usize) -> Error {
    Error::Format {
        offset,
        message: format!("truncated {what}: expected {expected} bytes, found {actual}"),
    }
}

/// Decodes one tensor starting at `bytes[0]`; `base` is the absolute offset
/// of that byte for error messages. Returns the tensor and bytes consumed.
pub fn decode_nlt1(bytes: &[u8], base: usize) -> Result<(Tensor<f32>, usize)> {
    if bytes.len() < 5 {
        return Err(truncated(base, "NLT1 header", 5, bytes.len()));
    }
    if &bytes[..4] != NLT1_MAGIC {
        return Err(Error::Format {
            offset: base,
            message: format!("bad magic {:?}, expected \"NLT1\"", String::from_utf8_lossy(&bytes[..4])),
        });
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(Error::Format {
            offset: base + 4,
            message: "rank must be at least 1".into(),
        });
    }
    let mut pos = 5;
    let dims_len = 4 * rank;
    if bytes.len() < pos + dims_len {
        return Err(truncated(base + pos, "NLT1 dims", dims_len, bytes.len() - pos));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: base + pos,
                message: format!("dimension {i} is zero"),
            });
        }
        shape.push(d);
        pos += 4;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: base + 5,
            message: "element count overflows".into(),
        })?;
    let payload = count * 4;
    if bytes.len() < pos + payload {
        return Err(truncated(base + pos, "NLT1 payload", payload, bytes.len() - pos));
    }
    let data = bytes[pos..pos + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    pos += payload;
    Ok((Tensor::new(&shape, data)?, pos))
}

pub fn write_nlt1(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    encode_nlt1(t, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_nlt1(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_nlt1(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            offset: used,
            message: format!("{} trailing bytes after tensor", bytes.len() - used),
        });
    }
    Ok(t)
}

/// Binary PGM of the first `H × W` plane; pixels are `round(255·v)` of
/// values clamped to `[0, 1]`.
pub fn encode_pgm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::dim("PGM export needs at least two dimensions"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data()[..h * w].iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes = encode_pgm(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary 8-bit PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                message: "truncated PGM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    if fields[0].1 != "P5" {
        return Err(Error::Format {
            offset: 0,
            message: format!("unsupported PGM magic {}", fields[0].1),
        });
    }
    let num = |i: usize| {
        fields[i].1.parse::<usize>().map_err(|_| Error::Format {
            offset: fields[i].0,
            message: format!("bad PGM header field `{}`", fields[i].1),
        })
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::Format {
            offset: fields[3].0,
            message: format!("only 8-bit PGM is supported, maxval {maxval}"),
        });
    }
    let need = w * h;
    let have = bytes.len().saturating_sub(pos);
    if have < need {
        return Err(truncated(pos, "PGM raster", need, have));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Reads a PGM mask: any non-zero pixel is set.
pub fn read_pgm_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, px) = decode_pgm(&bytes)?;
    Ok((w, h, px.into_iter().map(|v| v != 0).collect()))
}
