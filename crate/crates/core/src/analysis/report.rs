//! CSV output. Every file opens with a `# schema=<name> version=1` line,
//! optionally followed by `# key=value` metadata lines, then a header row.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{PolarError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub schema: String,
    pub metadata: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(schema: &str, header: &[&str]) -> Self {
        Self {
            schema: schema.to_string(),
            metadata: Vec::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(PolarError::dim("csv row", self.header.len(), row.len()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# schema={} version={}", self.schema, SCHEMA_VERSION)?;
        for (k, v) in &self.metadata {
            writeln!(w, "# {k}={v}")?;
        }
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(&self.header)?;
        for r in &self.rows {
            cw.write_record(r)?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn to_string_lossy(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8_lossy(&buf).into_owned()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let schema = first
            .trim()
            .strip_prefix("# schema=")
            .and_then(|s| s.strip_suffix(&format!(" version={SCHEMA_VERSION}")))
            .ok_or_else(|| PolarError::Format(format!("missing schema line: {first:?}")))?
            .to_string();
        let mut rest = String::new();
        r.read_to_string(&mut rest)?;
        let mut metadata = Vec::new();
        let mut body = String::new();
        for line in rest.lines() {
            match line.strip_prefix("# ") {
                Some(kv) => {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| PolarError::Format(format!("bad metadata line {line:?}")))?;
                    metadata.push((k.to_string(), v.to_string()));
                }
                None => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let mut cr = csv::Reader::from_reader(body.as_bytes());
        let header = cr.headers()?.iter().map(str::to_string).collect();
        let rows = cr
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            schema,
            metadata,
            header,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Column by header name, parsed as `f64`.
    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PolarError::arg(format!("no column {name}")))?;
        self.rows
            .iter()
            .map(|r| {
                r[j].parse::<f64>()
                    .map_err(|e| PolarError::Format(format!("column {name}: {e}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_metadata() {
        let mut t = CsvTable::new("demo", &["a", "b"]).meta("note", "proxy");
        t.push(vec!["1".into(), "x,y".into()]).unwrap();
        let text = t.to_string_lossy();
        assert!(text.starts_with("# schema=demo version=1\n# note=proxy\na,b\n"));
        let back = CsvTable::read(text.as_bytes()).unwrap();
        assert_eq!(back, t);
        assert!(t.clone().push(vec!["1".into()]).is_err());
    }

    #[test]
    fn rejects_missing_schema() {
        assert!(CsvTable::read("a,b\n1,2\n".as_bytes()).is_err());
    }
}
