//! Line-oriented parameter checkpoints.
//!
//! Layout: a JSON header line carrying `"schema":"visaff-ckpt/1"`, then for
//! each parameter a name line, a JSON shape line (`[rows,cols]`) and a line
//! of base64-encoded little-endian f64 data.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{Map, Value};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "visaff-ckpt/1";

/// Writes `store` with `extra` merged into the header object.
pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, extra: Map<String, Value>) -> Result<()> {
    let mut header = Map::new();
    header.insert("schema".into(), Value::String(CHECKPOINT_SCHEMA.into()));
    header.extend(extra);
    writeln!(w, "{}", Value::Object(header))?;
    for p in store.iter() {
        writeln!(w, "{}", p.name)?;
        writeln!(w, "[{},{}]", p.value.rows(), p.value.cols())?;
        let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        writeln!(w, "{}", STANDARD.encode(bytes))?;
    }
    Ok(())
}

/// Reads a checkpoint, returning the header object and the parameters.
pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(Map<String, Value>, ParamStore)> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            }),
        }
    };
    let (_, head) = next("header")?;
    let header: Map<String, Value> = serde_json::from_str(&head).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.get("schema").and_then(Value::as_str) != Some(CHECKPOINT_SCHEMA) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected schema {CHECKPOINT_SCHEMA}"),
        });
    }

    let mut store = ParamStore::new();
    loop {
        let name = match next("parameter name") {
            Ok((_, n)) if n.is_empty() => break,
            Ok((_, n)) => n,
            Err(_) => break,
        };
        let (ln, shape) = next("shape")?;
        let dims: [usize; 2] = serde_json::from_str(&shape).map_err(|e| Error::Parse {
            line: ln,
            message: format!("bad shape line: {e}"),
        })?;
        let (ln, b64) = next("data")?;
        let bytes = STANDARD.decode(b64.trim()).map_err(|e| Error::Parse {
            line: ln,
            message: e.to_string(),
        })?;
        if bytes.len() != dims[0] * dims[1] * 8 {
            return Err(Error::Parse {
                line: ln,
                message: format!("{} bytes for shape {dims:?}", bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(dims[0], dims[1], data)?)?;
    }
    Ok((header, store))
}
