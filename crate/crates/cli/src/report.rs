use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

/// One JSON document per run: what was asked, what was written, and the
/// headline numbers.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<PathBuf>,
    pub metrics: Map<String, Value>,
}

impl RunReport {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        RunReport { command: command.to_string(), config, seed, wall_time_s: 0.0, outputs: Vec::new(), metrics: Map::new() }
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn to_json(&self) -> String {
        let mut out = String::new();
        write_value(&serde_json::to_value(self).unwrap_or(Value::Null), 0, &mut out);
        out.push('\n');
        out
    }
}

/// Pretty JSON with every non-integer float written to 17 significant digits.
pub fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Number(n) => match (n.as_i64(), n.as_u64(), n.as_f64()) {
            (Some(i), _, _) => out.push_str(&i.to_string()),
            (_, Some(u), _) => out.push_str(&u.to_string()),
            (_, _, Some(f)) => out.push_str(&nimc_core::io::fmt_f64(f)),
            _ => out.push_str("null"),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(item, indent + 1, out);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}
