//! Versioned text container for model weights.
//!
//! ```text
//! skd-checkpoint 1
//! kind <kind>
//! meta <key> <value>            (zero or more)
//! tensor <name> <rows> <cols>   (zero or more, each followed by `rows` lines)
//! <cols IEEE-754 bit patterns as 16 hex digits, space separated>
//! end
//! ```
//!
//! Values are stored as raw `f64` bit patterns, so a save/load round trip is
//! bit-exact. Tensors are row-major and keep their insertion order.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Dense;

pub const MAGIC: &str = "skd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    kind: String,
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(bad(format!("{what} {s:?} must be a non-empty token")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing meta key {key}")))
    }

    pub fn meta_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| bad(format!("meta key {key}: cannot parse {raw:?}")))
    }

    pub fn put(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(rows * cols, data.len(), "tensor {name} shape");
        let t = Tensor { rows, cols, data };
        match self.tensors.iter_mut().find(|(k, _)| k == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name.to_string(), t)),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(k, _)| k.as_str())
    }

    /// Stores a dense layer as `<name>.weight` (`outputs × inputs`) and `<name>.bias`.
    pub fn put_dense(&mut self, name: &str, layer: &Dense) {
        self.put(&format!("{name}.weight"), layer.outputs, layer.inputs, layer.weight.clone());
        self.put(&format!("{name}.bias"), 1, layer.outputs, layer.bias.clone());
    }

    pub fn dense(&self, name: &str, inputs: usize, outputs: usize) -> Result<Dense> {
        let w = self.tensor(&format!("{name}.weight"))?;
        let b = self.tensor(&format!("{name}.bias"))?;
        if w.rows != outputs || w.cols != inputs || b.rows != 1 || b.cols != outputs {
            return Err(bad(format!(
                "layer {name}: expected {outputs}×{inputs}, found {}×{} / bias {}×{}",
                w.rows, w.cols, b.rows, b.cols
            )));
        }
        Ok(Dense {
            inputs,
            outputs,
            weight: w.data.clone(),
            bias: b.data.clone(),
        })
    }

    /// Reads a dense layer whose input width is taken from the stored tensor.
    pub fn dense_any_input(&self, name: &str, outputs: usize) -> Result<Dense> {
        let inputs = self.tensor(&format!("{name}.weight"))?.cols;
        self.dense(name, inputs, outputs)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC} {VERSION}").unwrap();
        writeln!(s, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            writeln!(s, "tensor {name} {} {}", t.rows, t.cols).unwrap();
            for r in 0..t.rows {
                let row = &t.data[r * t.cols..(r + 1) * t.cols];
                let line: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                writeln!(s, "{}", line.join(" ")).unwrap();
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad("missing magic header"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind_line = lines.next().ok_or_else(|| bad("missing kind"))?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| bad("missing kind"))?
            .trim();
        check_token(kind, "kind")?;
        let mut ck = Checkpoint::new(kind);
        loop {
            let line = lines.next().ok_or_else(|| bad("missing end marker"))?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(bad(format!("bad tensor line {line:?}")));
                }
                let rows: usize = f[1].parse().map_err(|_| bad("bad row count"))?;
                let cols: usize = f[2].parse().map_err(|_| bad("bad column count"))?;
                let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
                for _ in 0..rows {
                    let row = lines.next().ok_or_else(|| bad(format!("tensor {} truncated", f[0])))?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        let bits = u64::from_str_radix(tok, 16).map_err(|_| bad(format!("bad value {tok:?}")))?;
                        data.push(f64::from_bits(bits));
                    }
                    if data.len() - before != cols {
                        return Err(bad(format!("tensor {}: row width mismatch", f[0])));
                    }
                }
                ck.tensors.push((f[0].to_string(), Tensor { rows, cols, data }));
            } else {
                return Err(bad(format!("unexpected line {line:?}")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
