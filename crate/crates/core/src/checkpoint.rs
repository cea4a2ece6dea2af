//! Plain-text model checkpoints shared by the autoencoder and the classifier.
//!
//! ```text
//! sos-checkpoint 1 <kind>
//! config <json>
//! param <name> <rank> <dim>...
//! <values, space separated>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::numeric::{Params, Tensor};

const MAGIC: &str = "sos-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("checkpoint kind `{found}`, expected `{expected}`")]
    Kind { expected: String, found: String },
    #[error("parameter `{0}` missing or mismatched")]
    Param(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode<C: Serialize>(kind: &str, config: &C, params: &Params) -> Result<String, CheckpointError> {
    let mut out = format!("{MAGIC} {kind}\nconfig {}\n", serde_json::to_string(config)?);
    for (_, name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "param {name} {} {}", t.rank(), dims.join(" ")).expect("string write");
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn format_err(line: usize, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format { line, message: message.into() }
}

pub fn decode<C: DeserializeOwned>(kind: &str, text: &str) -> Result<(C, Vec<(String, Tensor)>), CheckpointError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, head) = lines.next().ok_or_else(|| format_err(1, "empty checkpoint"))?;
    let found = head
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| format_err(1, "bad magic"))?;
    if found != kind {
        return Err(CheckpointError::Kind { expected: kind.into(), found: found.into() });
    }
    let (n, cfg_line) = lines.next().ok_or_else(|| format_err(2, "missing config"))?;
    let json = cfg_line.strip_prefix("config ").ok_or_else(|| format_err(n, "expected config"))?;
    let config = serde_json::from_str(json)?;
    let mut tensors = Vec::new();
    while let Some((n, header)) = lines.next() {
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "param" {
            return Err(format_err(n, "expected param header"));
        }
        let rank: usize = fields[2].parse().map_err(|_| format_err(n, "bad rank"))?;
        if fields.len() != 3 + rank {
            return Err(format_err(n, "rank does not match dims"));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| format_err(n, "bad dim"))?;
        let (vn, values) = lines.next().ok_or_else(|| format_err(n + 1, "missing values"))?;
        let data = values
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| format_err(vn, "bad value"))?;
        let t = Tensor::new(shape, data).map_err(|e| format_err(vn, e.to_string()))?;
        tensors.push((fields[1].to_string(), t));
    }
    Ok((config, tensors))
}

/// Copy decoded tensors into a freshly built parameter store with matching names and shapes.
pub fn restore(params: &mut Params, tensors: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
    if tensors.len() != params.len() {
        return Err(CheckpointError::Param(format!("{} tensors for {} parameters", tensors.len(), params.len())));
    }
    for (name, t) in tensors {
        let id = params.find(&name).ok_or_else(|| CheckpointError::Param(name.clone()))?;
        if params.get(id).shape() != t.shape() {
            return Err(CheckpointError::Param(name));
        }
        *params.get_mut(id) = t;
    }
    Ok(())
}

pub fn save<C: Serialize>(path: impl AsRef<Path>, kind: &str, config: &C, params: &Params) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(kind, config, params)?)?;
    Ok(())
}

pub fn load<C: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<(C, Vec<(String, Tensor)>), CheckpointError> {
    decode(kind, &std::fs::read_to_string(path)?)
}
