//! CSV files with a versioned schema comment and optional `# key: value`
//! notes ahead of the header row.

use std::path::Path;

use crate::error::{Category, CliError, Result};

pub const TRAIN_LOG: &str = "mft-train-log/1";
pub const OCCLUSION: &str = "mft-occlusion/1";
pub const PRUNE: &str = "mft-prune/1";
pub const KEPT: &str = "mft-kept/1";
pub const FINETUNE: &str = "mft-finetune/1";
pub const FLOPS: &str = "mft-flops/1";
pub const REPORT: &str = "mft-report/1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub schema: String,
    pub notes: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(schema: &str, header: &[&str]) -> Self {
        Self {
            schema: schema.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn note(mut self, key: &str, value: impl ToString) -> Self {
        self.notes.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn note_value(&self, key: &str) -> Option<&str> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::new(Category::Schema, format!("{} has no column `{name}`", self.schema)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("# schema: {}\n", self.schema).into_bytes();
        for (k, v) in &self.notes {
            out.extend(format!("# {k}: {v}\n").bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())
            .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, expected: &str) -> Result<Self> {
        let mut lines = text.lines();
        let schema = lines
            .next()
            .and_then(|l| l.strip_prefix("# schema: "))
            .ok_or_else(|| CliError::new(Category::Schema, "missing `# schema:` line"))?
            .trim()
            .to_string();
        if schema != expected {
            return Err(CliError::new(
                Category::Schema,
                format!("unsupported schema `{schema}` (expected `{expected}`)"),
            ));
        }
        let mut notes = Vec::new();
        let mut body = String::new();
        for l in lines {
            match l.strip_prefix("# ") {
                Some(n) if body.is_empty() => {
                    let (k, v) = n.split_once(": ").unwrap_or((n, ""));
                    notes.push((k.to_string(), v.to_string()));
                }
                _ => {
                    body.push_str(l);
                    body.push('\n');
                }
            }
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let bad = |e: csv::Error| CliError::new(Category::Data, format!("{expected}: {e}"));
        let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?;
        Ok(Self {
            schema,
            notes,
            header,
            rows,
        })
    }

    pub fn read(path: &Path, expected: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))?;
        Self::parse(&text, expected).map_err(|e| CliError::new(e.category, format!("{}: {}", path.display(), e.message)))
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| CliError::new(Category::Data, format!("`{s}` is not a number")))
}

/// `value (±delta)` to one decimal; a delta that rounds to zero prints as
/// `0.0`.
pub fn fmt_delta(value: f64, base: f64) -> String {
    let d = ((value - base) * 10.0).round() / 10.0;
    if d == 0.0 {
        format!("{value:.1} (0.0)")
    } else {
        format!("{value:.1} ({d:+.1})")
    }
}
