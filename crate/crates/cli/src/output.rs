//! JSON summaries and CSV tables.

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

/// Shortest round-trip text for a float; non-finite values spelled out.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub struct Outcome {
    pub result: Value,
    pub tables: Vec<Table>,
}

pub fn envelope(subcommand: &str, seed: u64, config: &[(String, String)], status: &str, body: (&str, Value)) -> Value {
    let cfg: Map<String, Value> = config.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
    let mut m = Map::new();
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert("subcommand".into(), json!(subcommand));
    m.insert("seed".into(), json!(seed));
    m.insert("status".into(), json!(status));
    m.insert("config".into(), Value::Object(cfg));
    m.insert(body.0.into(), body.1);
    Value::Object(m)
}

pub fn write_all(dir: &Path, subcommand: &str, doc: &Value, tables: &[Table]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = serde_json::to_string_pretty(doc)? + "\n";
    std::fs::write(dir.join(format!("{subcommand}.json")), text)?;
    for t in tables {
        let path = dir.join(format!("{subcommand}_{}.csv", t.name));
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(&path)?;
        w.write_record(&t.header)?;
        for r in &t.rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(())
}
