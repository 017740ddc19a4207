//! Named-tensor checkpoint format.
//!
//! ```text
//! MPCC1\n
//! <name> <rank> <d0> <d1> ...\n      one line per tensor
//! \n                                 empty line ends the header
//! <payload>                          little-endian f64, header order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "MPCC1";

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (name, t) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Usage(format!("invalid tensor name `{name}`")));
        }
        let mut line = format!("{name} {}", t.rank());
        for d in t.shape() {
            line.push_str(&format!(" {d}"));
        }
        line.push('\n');
        out.extend_from_slice(line.as_bytes());
    }
    out.push(b'\n');
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Vec<(String, Tensor)>> {
    let err = |msg: String| Error::Parse {
        path: origin.to_string(),
        msg,
    };
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("unterminated header".into()))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| err("header is not ASCII".into()))
    };
    let magic = next_line()?;
    if magic != MAGIC {
        return Err(Error::Version(format!(
            "{origin}: expected `{MAGIC}` header, found `{magic}`"
        )));
    }
    let mut specs = Vec::new();
    loop {
        let line = next_line()?;
        if line.is_empty() {
            break;
        }
        let mut fields = line.split(' ');
        let name = fields.next().unwrap_or_default().to_string();
        let rank: usize = fields
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| err(format!("bad rank in `{line}`")))?;
        let shape: Vec<usize> = fields
            .map(|d| {
                d.parse()
                    .map_err(|_| err(format!("bad dimension in `{line}`")))
            })
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(err(format!(
                "rank {rank} but {} dimensions in `{line}`",
                shape.len()
            )));
        }
        specs.push((name, shape));
    }
    let mut out = Vec::with_capacity(specs.len());
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let need = n * 8;
        if bytes.len() < pos + need {
            return Err(err(format!("payload truncated in tensor `{name}`")));
        }
        let data = bytes[pos..pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += need;
        out.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(err(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
