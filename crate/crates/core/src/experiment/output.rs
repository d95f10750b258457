use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A CSV file whose first line is a `# key=value ...` comment.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(meta: &[(&str, &str)], header: &[&str]) -> Self {
        Self {
            meta: meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::from("#");
        for (k, v) in &self.meta {
            write!(out, " {k}={v}").unwrap();
        }
        out.push('\n');
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta_line = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::invalid("CSV is missing its `#` metadata line"))?;
        let meta = meta_line
            .split_whitespace()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::invalid(format!("bad metadata entry `{kv}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::invalid("CSV is missing its header row"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let row: Vec<String> = l.split(',').map(str::to_string).collect();
                if row.len() == header.len() {
                    Ok(row)
                } else {
                    Err(Error::invalid(format!("CSV row has {} fields, header has {}", row.len(), header.len())))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("CSV has no column `{name}`")))
    }

    pub fn float(&self, row: usize, name: &str) -> Result<f64> {
        let raw = &self.rows[row][self.column(name)?];
        raw.parse()
            .map_err(|_| Error::invalid(format!("column `{name}` holds non-numeric `{raw}`")))
    }
}

/// Shortest decimal that round-trips.
pub fn num(v: f64) -> String {
    format!("{v}")
}
