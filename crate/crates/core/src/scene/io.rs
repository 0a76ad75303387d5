//! JSONL persistence with fixed-precision reals.
//!
//! The first line of every file is a header object carrying `schema`,
//! `version` and `count`; each following line is one record. Reals are
//! written with nine significant digits, enough to round-trip any `f32`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use super::Dataset;
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "corrloop.dataset";
const VERSION: u64 = 1;

struct FixedFormatter;

impl serde_json::ser::Formatter for FixedFormatter {
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.8e}")
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
}

/// Serializes to a single JSON line using the fixed real encoding.
pub fn to_fixed_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Writes `header` (augmented with `schema`, `version`, `count`) and one line per item.
pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, mut header: Value, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let obj = header.as_object_mut().ok_or_else(|| Error::invalid("header must be an object"))?;
    obj.insert("schema".into(), json!(schema));
    obj.insert("version".into(), json!(VERSION));
    obj.insert("count".into(), json!(items.len()));
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", to_fixed_json(&header)?)?;
    for item in items {
        writeln!(w, "{}", to_fixed_json(item)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_jsonl`]. Errors name the 1-based line and
/// the offending field path.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<(Value, Vec<T>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| parse_err(1, "header", "empty file"))??;
    let header: Value = serde_json::from_str(&header_line).map_err(|e| parse_err(1, "header", e))?;
    if header.get("schema").and_then(Value::as_str) != Some(schema) {
        return Err(parse_err(1, "schema", format!("expected `{schema}`")));
    }
    if header.get("version").and_then(Value::as_u64) != Some(VERSION) {
        return Err(parse_err(1, "version", format!("expected {VERSION}")));
    }
    let count = header
        .get("count")
        .and_then(Value::as_u64)
        .ok_or_else(|| parse_err(1, "count", "missing record count"))? as usize;
    let mut items = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&line);
        let item = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            parse_err(lineno, if field == "." { "record".into() } else { field }, e.into_inner())
        })?;
        items.push(item);
    }
    if items.len() != count {
        return Err(parse_err(
            items.len() + 2,
            "count",
            format!("header declares {count} records, found {} (truncated?)", items.len()),
        ));
    }
    Ok((header, items))
}

fn parse_err(line: usize, field: impl Into<String>, msg: impl ToString) -> Error {
    Error::Parse { line, field: field.into(), msg: msg.to_string() }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let header = json!({ "name": dataset.name, "provenance": dataset.provenance });
    write_jsonl(path, DATASET_SCHEMA, header, &dataset.scenes)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, scenes) = read_jsonl(path, DATASET_SCHEMA)?;
    let name = header
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(1, "name", "missing dataset name"))?
        .to_string();
    let provenance = serde_json::from_value(header.get("provenance").cloned().unwrap_or(Value::Null))
        .map_err(|e| parse_err(1, "provenance", e))?;
    let ds = Dataset { name, provenance, scenes };
    ds.validate()?;
    Ok(ds)
}
