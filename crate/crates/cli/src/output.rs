use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::settings::Format;

/// Bumped whenever a JSON report changes shape.
pub const SCHEMA_VERSION: u32 = 1;

/// Wraps a report body with the schema version and command name.
#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    #[serde(flatten)]
    pub body: &'a T,
}

/// A rectangular result, written as CSV and shown as CSV or an aligned table.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<&'static str>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_aligned(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(self.header.clone());
        out.push('\n');
        out.push_str(
            &widths
                .iter()
                .map(|&w| "-".repeat(w))
                .collect::<Vec<_>>()
                .join("  "),
        );
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
            out.push('\n');
        }
        out
    }
}

/// Output directory handle; created on first use.
pub struct OutDir {
    dir: PathBuf,
}

impl OutDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn json<T: Serialize>(
        &self,
        name: &str,
        command: &str,
        body: &T,
    ) -> CliResult<(PathBuf, String)> {
        let text = to_json(command, body);
        let path = self.write(name, text.as_bytes())?;
        Ok((path, text))
    }
}

pub fn to_json<T: Serialize>(command: &str, body: &T) -> String {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        body,
    };
    let mut text = serde_json::to_string_pretty(&env).expect("reports serialize");
    text.push('\n');
    text
}

/// Writes `<stem>.json` and `<stem>.csv`, then prints one of them (or the
/// aligned table) with any notes.
pub fn emit<T: Serialize>(
    out: &OutDir,
    stem: &str,
    command: &str,
    body: &T,
    table: &Table,
    notes: &[String],
    format: Format,
) -> CliResult<()> {
    let (_, json) = out.json(&format!("{stem}.json"), command, body)?;
    let csv = table.to_csv();
    out.write(&format!("{stem}.csv"), csv.as_bytes())?;
    match format {
        Format::Json => print!("{json}"),
        Format::Csv => print!("{csv}"),
        Format::Table => print!("{}", table.to_aligned()),
    }
    for n in notes {
        if format == Format::Table {
            println!("note: {n}");
        } else {
            eprintln!("note: {n}");
        }
    }
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn num(x: f64) -> String {
    format!("{x}")
}
