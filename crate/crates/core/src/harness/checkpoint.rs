//! Plain-text model checkpoints.
//!
//! ```text
//! vicatda-checkpoint 1
//! config <model config as JSON>
//! meta <method, eval head and standardizer as JSON>
//! params <count>
//! param <name> <group> <rows> <cols>
//! <one line of space-separated values per row>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::model::{Head, JointModel, ModelConfig};
use crate::numcore::Group;
use crate::{Error, Result};

use super::config::Method;

pub const CHECKPOINT_MAGIC: &str = "vicatda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights that evaluation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: Option<Method>,
    pub eval_head: Head,
    pub standardizer: Option<Standardizer>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            method: None,
            eval_head: Head::Target,
            standardizer: None,
        }
    }
}

pub fn write_checkpoint<W: Write>(m: &JointModel, meta: &CheckpointMeta, mut out: W) -> Result<()> {
    let io = |e| Error::io("checkpoint", e);
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").map_err(io)?;
    writeln!(out, "config {}", serde_json::to_string(m.config())?).map_err(io)?;
    writeln!(out, "meta {}", serde_json::to_string(meta)?).map_err(io)?;
    writeln!(out, "params {}", m.params.len()).map_err(io)?;
    for (_, p) in m.params.iter() {
        let (rows, cols) = p.value.shape();
        writeln!(out, "param {} {} {rows} {cols}", p.name, p.group.as_str()).map_err(io)?;
        for r in 0..rows {
            let line: Vec<String> = p.value.row(r).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(" ")).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn save_checkpoint(m: &JointModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(m, meta, std::io::BufWriter::new(file))
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    line: u64,
}

impl<R: Read> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(Error::io("checkpoint", e)),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn tagged(&mut self, tag: &str) -> Result<String> {
        let s = self.next()?;
        match s.split_once(' ') {
            Some((t, rest)) if t == tag => Ok(rest.to_string()),
            _ => Err(self.err(format!("expected `{tag}`"))),
        }
    }

    fn number<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("bad number {s:?}")))
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(JointModel, CheckpointMeta)> {
    let mut lines = Lines {
        inner: BufReader::new(input).lines(),
        line: 0,
    };
    let header = lines.next()?;
    let version = match header.split_once(' ') {
        Some((magic, v)) if magic == CHECKPOINT_MAGIC => lines.number::<u32>(v)?,
        _ => return Err(lines.err("not a checkpoint")),
    };
    if version != CHECKPOINT_VERSION {
        return Err(lines.err(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(&lines.tagged("config")?).map_err(|e| lines.err(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&lines.tagged("meta")?).map_err(|e| lines.err(e.to_string()))?;
    let mut model = JointModel::new(config, 0)?;
    let count_field = lines.tagged("params")?;
    let count: usize = lines.number(&count_field)?;
    if count != model.params.len() {
        return Err(Error::Schema(format!(
            "checkpoint holds {count} parameters, the configured model has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let head = lines.tagged("param")?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(lines.err("expected `param <name> <group> <rows> <cols>`"));
        }
        let id = model
            .params
            .find(fields[0])
            .ok_or_else(|| Error::Schema(format!("unknown parameter {}", fields[0])))?;
        let group = Group::parse(fields[1]).ok_or_else(|| lines.err(format!("unknown group {}", fields[1])))?;
        let (rows, cols): (usize, usize) = (lines.number(fields[2])?, lines.number(fields[3])?);
        let target = model.params.get(id);
        if target.group != group || target.value.shape() != (rows, cols) {
            return Err(Error::Schema(format!(
                "parameter {} is {:?} {:?} in the model, {group:?} ({rows}, {cols}) in the checkpoint",
                fields[0],
                target.group,
                target.value.shape()
            )));
        }
        for r in 0..rows {
            let line = lines.next()?;
            let values = line
                .split_whitespace()
                .map(|s| lines.number::<f64>(s))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != cols {
                return Err(lines.err(format!("expected {cols} values, found {}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(lines.err("non-finite parameter value"));
            }
            model.params.value_mut(id).row_mut(r).copy_from_slice(&values);
        }
    }
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(JointModel, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AuxHeadsConfig;

    fn model() -> JointModel {
        let mut cfg = ModelConfig::new(3, vec![5, 4], 3);
        cfg.aux = AuxHeadsConfig {
            task: true,
            domain: true,
            category_domain: false,
        };
        JointModel::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let meta = CheckpointMeta {
            method: Some(Method::Dann),
            eval_head: Head::Task,
            standardizer: None,
        };
        let mut buf = Vec::new();
        write_checkpoint(&m, &meta, &mut buf).unwrap();
        let (back, back_meta) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_meta, meta);
    }

    #[test]
    fn corrupt_input_is_reported() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &CheckpointMeta::default(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(matches!(read_checkpoint("hello\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        let truncated: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(truncated.as_bytes()).is_err());
        let garbled = text.replacen("param ", "param x", 1);
        assert!(matches!(read_checkpoint(garbled.as_bytes()), Err(Error::Schema(_))));
        let future = text.replacen(" 1\n", " 9\n", 1);
        assert!(read_checkpoint(future.as_bytes()).is_err());
    }
}
