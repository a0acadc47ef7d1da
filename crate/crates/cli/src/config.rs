use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Fills every unset option of `args` from a flat TOML file. Flags always
/// win; keys may be written with dashes or underscores. Unknown keys and
/// nested tables are rejected.
pub fn merge_config<T: Serialize + DeserializeOwned>(args: T, path: Option<&Path>) -> Result<T, String> {
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("invalid config {}: {e}", path.display()))?;
    let mut value = serde_json::to_value(&args).map_err(|e| e.to_string())?;
    let obj = value.as_object_mut().ok_or("arguments are not a record")?;
    for (key, raw) in table {
        let key_norm = key.replace('-', "_");
        let slot = obj.get_mut(&key_norm).ok_or_else(|| format!("unknown config key '{key}'"))?;
        if slot.is_null() {
            *slot = toml_to_json(&key, raw)?;
        }
    }
    serde_json::from_value(value).map_err(|e| format!("config {}: {e}", path.display()))
}

fn toml_to_json(key: &str, v: toml::Value) -> Result<Value, String> {
    Ok(match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => Value::from(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Array(items) => {
            // Lists are carried as comma-separated strings, like the flags.
            let parts: Result<Vec<String>, String> = items
                .into_iter()
                .map(|i| match i {
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    toml::Value::String(s) => Ok(s),
                    _ => Err(format!("config key '{key}' has an unsupported list element")),
                })
                .collect();
            Value::String(parts?.join(","))
        }
        _ => return Err(format!("config key '{key}' must be a scalar or list")),
    })
}
