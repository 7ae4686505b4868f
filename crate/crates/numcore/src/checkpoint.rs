//! Checkpoint container.
//!
//! Layout: a UTF-8 manifest followed by a raw little-endian `f32` payload.
//!
//! ```text
//! DXFCKPT 1
//! config <byte length>
//! <config text>
//! tensors <count>
//! <name> <dim>x<dim>... <byte offset> <element count>
//! ...
//! payload <byte length>
//! <raw bytes>
//! ```
//!
//! Tensor names may not contain whitespace. Payload values are stored as
//! `f32`, so writing, reading and writing again is bit-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::{NumError, ParamStore, Result, Tensor};

const MAGIC: &str = "DXFCKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore,
}

pub fn encode(config: &str, params: &ParamStore) -> Result<Vec<u8>> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("config {}\n", config.len()));
    manifest.push_str(config);
    manifest.push('\n');
    manifest.push_str(&format!("tensors {}\n", params.len()));
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(NumError::Format(format!(
                "tensor name `{name}` is empty or has whitespace"
            )));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {} {offset} {}\n", dims.join("x"), t.len()));
        offset += t.len() * 4;
    }
    manifest.push_str(&format!("payload {offset}\n"));
    let mut out = manifest.into_bytes();
    out.reserve(offset);
    for (_, t) in params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take_line<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &buf[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NumError::Format("unexpected end of manifest".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|e| NumError::Format(e.to_string()))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| NumError::Format(format!("bad {what}: `{s}`")))
}

fn keyed<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| NumError::Format(format!("expected `{key}` line, got `{line}`")))
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take_line(buf, &mut pos)? != MAGIC {
        return Err(NumError::Format("bad magic".into()));
    }
    let clen = parse_usize(keyed(take_line(buf, &mut pos)?, "config")?, "config length")?;
    if pos + clen + 1 > buf.len() || buf[pos + clen] != b'\n' {
        return Err(NumError::Format("truncated config block".into()));
    }
    let config = std::str::from_utf8(&buf[pos..pos + clen])
        .map_err(|e| NumError::Format(e.to_string()))?
        .to_string();
    pos += clen + 1;
    let count = parse_usize(keyed(take_line(buf, &mut pos)?, "tensors")?, "tensor count")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = take_line(buf, &mut pos)?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 4 {
            return Err(NumError::Format(format!("bad tensor entry `{line}`")));
        }
        let shape = fields[1]
            .split('x')
            .map(|d| parse_usize(d, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let offset = parse_usize(fields[2], "offset")?;
        let n = parse_usize(fields[3], "element count")?;
        entries.push((fields[0].to_string(), shape, offset, n));
    }
    let plen = parse_usize(
        keyed(take_line(buf, &mut pos)?, "payload")?,
        "payload length",
    )?;
    let payload = &buf[pos..];
    if payload.len() != plen {
        return Err(NumError::Format(format!(
            "payload is {} bytes, manifest says {plen}",
            payload.len()
        )));
    }
    let mut params = ParamStore::new();
    for (name, shape, offset, n) in entries {
        let end = offset + n * 4;
        if end > payload.len() {
            return Err(NumError::Format(format!(
                "tensor `{name}` runs past payload"
            )));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(Checkpoint { config, params })
}

pub fn write_checkpoint(path: &Path, config: &str, params: &ParamStore) -> Result<()> {
    let bytes = encode(config, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "enc.w",
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1e-8, 5.5, -7.25]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::from_vec(vec![1.0 / 3.0])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = "{\"kind\":\"gru\"}\nsecond line";
        let bytes = encode(cfg, &sample()).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.params.names(), sample().names());
        assert_eq!(encode(&ck.config, &ck.params).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode("x", &sample()).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        assert!(decode(b"NOPE\n").is_err());
    }

    #[test]
    fn rejects_whitespace_names() {
        let mut s = ParamStore::new();
        s.insert("a b", Tensor::scalar(1.0)).unwrap();
        assert!(encode("", &s).is_err());
    }
}
