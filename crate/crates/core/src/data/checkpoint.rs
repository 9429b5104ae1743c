//! Checkpoint files.
//!
//! Layout: the line `PMCR1`, then `key=value` header lines ending with the
//! line `end`, then a little-endian `f32` payload. Tensor records list name,
//! shape, byte offset into the payload and element count, in parameter
//! order. Optimizer moments follow the parameters in the payload.
//!
//! ```text
//! PMCR1
//! config.hidden_width=288
//! ...
//! epoch=3
//! step=120
//! tensor name=encoder.block1.conv1.weight shape=48x3x3x3 offset=0 count=1296
//! ...
//! payload_bytes=...
//! end
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pmcrnet};
use crate::tensor::{Shape, Tensor};
use crate::train::OptimizerState;

pub const MAGIC: &str = "PMCR1";
const END: &str = "end";

/// Everything restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Pmcrnet<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

struct Record {
    kind: &'static str,
    name: String,
    shape: Shape,
    offset: usize,
}

fn shape_str(s: Shape) -> String {
    s.to_string()
}

fn parse_shape(text: &str) -> Option<Shape> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|d| d.parse().ok())
        .collect::<Option<_>>()?;
    let arr: [usize; 4] = dims.try_into().ok()?;
    Some(Shape(arr))
}

/// Serializes to bytes. Identical inputs give identical bytes.
pub fn encode_checkpoint(
    model: &Pmcrnet<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    epoch: usize,
    step: usize,
) -> Vec<u8> {
    let cfg = model.config();
    let mut header = String::new();
    let mut line = |s: String| {
        header.push_str(&s);
        header.push('\n');
    };
    line(MAGIC.to_string());
    line(format!("config.hidden_width={}", cfg.hidden_width));
    line(format!("config.groups={}", cfg.groups));
    line(format!("config.ablate_pmr={}", cfg.ablate_pmr));
    line(format!("config.ablate_pcr={}", cfg.ablate_pcr));
    line(format!("config.ablate_csm={}", cfg.ablate_csm));
    line(format!("config.conv_bias={}", cfg.conv_bias));
    line(format!("epoch={epoch}"));
    line(format!("step={step}"));

    let mut tensors: Vec<(&'static str, &str, &Tensor<f32>)> = model
        .parameters()
        .iter()
        .map(|(n, t)| ("tensor", n, t))
        .collect();
    if let Some(opt) = optimizer {
        line(format!("optimizer.step={}", opt.step));
        let names = model.parameters().names();
        tensors.extend(
            names
                .iter()
                .zip(&opt.m)
                .map(|(n, t)| ("moment1", n.as_str(), t)),
        );
        tensors.extend(
            names
                .iter()
                .zip(&opt.v)
                .map(|(n, t)| ("moment2", n.as_str(), t)),
        );
    }
    let mut offset = 0;
    for (kind, name, t) in &tensors {
        line(format!(
            "{kind} name={name} shape={} offset={offset} count={}",
            shape_str(t.shape()),
            t.numel()
        ));
        offset += 4 * t.numel();
    }
    line(format!("payload_bytes={offset}"));
    line(END.to_string());

    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, _, t) in &tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Writes a checkpoint through a temporary file and a rename, so readers
/// never observe a partial file.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Pmcrnet<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    epoch: usize,
    step: usize,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, optimizer, epoch, step);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint using the configuration stored in it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load_checkpoint_with(path, None)
}

/// Loads a checkpoint, optionally checking it against `expected` instead of
/// the stored configuration. Shape mismatches name the first offending
/// tensor.
pub fn load_checkpoint_with(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected).map_err(|e| match e {
        Decode::Format(reason) => Error::format(path, reason),
        Decode::Truncated(reason) => {
            Error::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, reason))
        }
        Decode::Invalid(err) => err,
    })
}

enum Decode {
    Format(String),
    Truncated(String),
    Invalid(Error),
}

fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> std::result::Result<Checkpoint, Decode> {
    let fmt = |s: &str| Decode::Format(s.to_string());
    if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
        return Err(fmt("not a PMCR checkpoint"));
    }
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(Decode::Truncated("checkpoint header is truncated".into()));
        };
        let text = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| fmt("header is not valid UTF-8"))?;
        pos += nl + 1;
        if text == END {
            break;
        }
        lines.push(text.to_string());
    }
    let payload = &bytes[pos..];

    let mut fields = HashMap::new();
    let mut records = Vec::new();
    for l in &lines[1..] {
        if let Some((kind, rest)) = l.split_once(' ') {
            let kv: HashMap<&str, &str> =
                rest.split(' ').filter_map(|p| p.split_once('=')).collect();
            let kind = match kind {
                "tensor" => "tensor",
                "moment1" => "moment1",
                "moment2" => "moment2",
                other => return Err(Decode::Format(format!("unknown record kind '{other}'"))),
            };
            let name = kv.get("name").ok_or_else(|| fmt("record without name"))?;
            let shape = kv
                .get("shape")
                .and_then(|s| parse_shape(s))
                .ok_or_else(|| Decode::Format(format!("bad shape for {name}")))?;
            let offset = kv
                .get("offset")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Decode::Format(format!("bad offset for {name}")))?;
            records.push(Record {
                kind,
                name: name.to_string(),
                shape,
                offset,
            });
        } else if let Some((k, v)) = l.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        } else {
            return Err(Decode::Format(format!("unrecognized header line '{l}'")));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| Decode::Format(format!("header is missing {k}")))
    };
    let num = |k: &str| -> std::result::Result<usize, Decode> {
        get(k)?
            .parse()
            .map_err(|_| Decode::Format(format!("bad value for {k}")))
    };
    let flag = |k: &str| -> std::result::Result<bool, Decode> {
        get(k)?
            .parse()
            .map_err(|_| Decode::Format(format!("bad value for {k}")))
    };
    let stored = ModelConfig {
        hidden_width: num("config.hidden_width")?,
        groups: num("config.groups")?,
        ablate_pmr: flag("config.ablate_pmr")?,
        ablate_pcr: flag("config.ablate_pcr")?,
        ablate_csm: flag("config.ablate_csm")?,
        conv_bias: flag("config.conv_bias")?,
    };
    let declared = num("payload_bytes")?;
    if payload.len() < declared {
        return Err(Decode::Truncated(format!(
            "payload has {} bytes, header declares {declared}",
            payload.len()
        )));
    }

    let read = |r: &Record| -> std::result::Result<Tensor<f32>, Decode> {
        let end = r.offset + 4 * r.shape.numel();
        if end > payload.len() {
            return Err(Decode::Truncated(format!(
                "tensor {} extends past the payload",
                r.name
            )));
        }
        let data = payload[r.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(r.shape, data).map_err(Decode::Invalid)
    };
    let of_kind = |kind: &str| -> std::result::Result<Vec<(String, Tensor<f32>)>, Decode> {
        records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| Ok((r.name.clone(), read(r)?)))
            .collect()
    };
    let config = expected.cloned().unwrap_or(stored);
    let model = Pmcrnet::from_parameters(config, of_kind("tensor")?).map_err(Decode::Invalid)?;
    let optimizer = match fields.get("optimizer.step") {
        None => None,
        Some(s) => {
            let step = s.parse().map_err(|_| fmt("bad optimizer step"))?;
            let m: Vec<Tensor<f32>> = of_kind("moment1")?.into_iter().map(|(_, t)| t).collect();
            let v: Vec<Tensor<f32>> = of_kind("moment2")?.into_iter().map(|(_, t)| t).collect();
            let shapes: Vec<Shape> = model
                .parameters()
                .tensors()
                .iter()
                .map(Tensor::shape)
                .collect();
            let ok = |ts: &[Tensor<f32>]| {
                ts.len() == shapes.len() && ts.iter().zip(&shapes).all(|(t, s)| t.shape() == *s)
            };
            if !ok(&m) || !ok(&v) {
                return Err(fmt("optimizer moments do not match the parameters"));
            }
            Some(OptimizerState { step, m, v })
        }
    };
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: num("epoch")?,
        step: num("step")?,
    })
}
