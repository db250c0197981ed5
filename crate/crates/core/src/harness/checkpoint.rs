//! Checkpoint files for the backbone and the trained library/selector.
//!
//! Layout (byte-exact description in `docs/checkpoint.md`):
//!
//! ```text
//! METASOFT-CKPT 1\n
//! kind <backbone|metalib>\n
//! config <single-line JSON>\n
//! tensor <name> <rows> <cols>\n      (one per tensor, in data order)
//! end\n
//! <f64 little-endian, row-major, tensors concatenated>
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::error::{Error, Result};
use crate::metalib::{MetaLibrary, SelectorParams};
use crate::numerics::Matrix;

pub const MAGIC: &str = "METASOFT-CKPT 1";

fn encode(kind: &str, config_json: &str, tensors: &[(String, &Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "kind {kind}").unwrap();
    writeln!(out, "config {config_json}").unwrap();
    for (name, m) in tensors {
        writeln!(out, "tensor {name} {} {}", m.rows(), m.cols()).unwrap();
    }
    writeln!(out, "end").unwrap();
    for (_, m) in tensors {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Decoded {
    kind: String,
    config: String,
    tensors: Vec<(String, Matrix)>,
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("truncated header".into()))?;
    *pos += n + 1;
    std::str::from_utf8(&rest[..n]).map_err(|_| Error::Format("header is not UTF-8".into()))
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut pos = 0;
    if next_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::Format("missing checkpoint magic line".into()));
    }
    let kind = next_line(bytes, &mut pos)?
        .strip_prefix("kind ")
        .ok_or_else(|| Error::Format("expected `kind` line".into()))?
        .to_string();
    let config = next_line(bytes, &mut pos)?
        .strip_prefix("config ")
        .ok_or_else(|| Error::Format("expected `config` line".into()))?
        .to_string();
    let mut shapes = Vec::new();
    loop {
        let line = next_line(bytes, &mut pos)?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["tensor", name, r, c] => {
                let r: usize = r.parse().map_err(|_| Error::Format(format!("bad row count in `{line}`")))?;
                let c: usize = c.parse().map_err(|_| Error::Format(format!("bad column count in `{line}`")))?;
                shapes.push((name.to_string(), r, c));
            }
            _ => return Err(Error::Format(format!("unexpected header line `{line}`"))),
        }
    }
    let need: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
    if bytes.len() - pos != need {
        return Err(Error::Format(format!("payload is {} bytes, header declares {need}", bytes.len() - pos)));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, r, c) in shapes {
        let data: Vec<f64> = bytes[pos..pos + r * c * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        pos += r * c * 8;
        tensors.push((name, Matrix::from_vec(r, c, data)?));
    }
    Ok(Decoded { kind, config, tensors })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_backbone(w: &BackboneWeights) -> Vec<u8> {
    let cfg = serde_json::to_string(&w.config).expect("config serializes");
    encode("backbone", &cfg, &w.tensors())
}

pub fn decode_backbone(bytes: &[u8]) -> Result<BackboneWeights> {
    let d = decode(bytes)?;
    if d.kind != "backbone" {
        return Err(Error::Format(format!("expected a backbone checkpoint, found `{}`", d.kind)));
    }
    let cfg: BackboneConfig = serde_json::from_str(&d.config).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    cfg.validate()?;
    BackboneWeights::from_tensors(&cfg, d.tensors)
}

pub fn save_backbone(path: &Path, w: &BackboneWeights) -> Result<()> {
    write_file(path, &encode_backbone(w))
}

pub fn load_backbone(path: &Path) -> Result<BackboneWeights> {
    decode_backbone(&read_file(path)?)
}

/// Everything inference needs from training.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaCheckpoint {
    pub library: MetaLibrary,
    pub selector: SelectorParams,
    /// Temperature for deterministic selection at inference.
    pub temperature: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaEcho {
    d_model: usize,
    size: usize,
    k: usize,
    hidden: usize,
    temperature: f64,
}

pub fn encode_meta(c: &MetaCheckpoint) -> Vec<u8> {
    let echo = MetaEcho {
        d_model: c.library.dim(),
        size: c.library.size(),
        k: c.selector.k,
        hidden: c.selector.hidden(),
        temperature: c.temperature,
    };
    let mut tensors = vec![("library.basis".to_string(), &c.library.basis)];
    tensors.extend(c.selector.tensors().map(|(n, m)| (n.to_string(), m)));
    encode("metalib", &serde_json::to_string(&echo).expect("echo serializes"), &tensors)
}

pub fn decode_meta(bytes: &[u8]) -> Result<MetaCheckpoint> {
    let d = decode(bytes)?;
    if d.kind != "metalib" {
        return Err(Error::Format(format!("expected a metalib checkpoint, found `{}`", d.kind)));
    }
    let echo: MetaEcho = serde_json::from_str(&d.config).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let want = [
        ("library.basis", echo.size, echo.d_model),
        ("selector.w1", echo.d_model, echo.hidden),
        ("selector.b1", 1, echo.hidden),
        ("selector.w2", echo.hidden, echo.k * echo.size),
        ("selector.b2", 1, echo.k * echo.size),
    ];
    if d.tensors.len() != want.len() {
        return Err(Error::Format(format!("metalib checkpoint has {} tensors, expected 5", d.tensors.len())));
    }
    for ((name, m), (wn, r, c)) in d.tensors.iter().zip(want) {
        if name != wn || m.shape() != (r, c) {
            return Err(Error::Format(format!("tensor `{name}` {:?} where `{wn}` ({r}, {c}) was expected", m.shape())));
        }
    }
    let mut it = d.tensors.into_iter().map(|(_, m)| m);
    let basis = it.next().unwrap();
    let (w1, b1, w2, b2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(MetaCheckpoint {
        library: MetaLibrary { basis },
        selector: SelectorParams { w1, b1, w2, b2, k: echo.k, m: echo.size },
        temperature: echo.temperature,
    })
}

pub fn save_meta(path: &Path, c: &MetaCheckpoint) -> Result<()> {
    write_file(path, &encode_meta(c))
}

pub fn load_meta(path: &Path) -> Result<MetaCheckpoint> {
    decode_meta(&read_file(path)?)
}
