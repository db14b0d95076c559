use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use skewcert::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Exit codes: validation errors and cap overruns are distinguished so
/// scripts can retry with a larger cap.
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_CAP: i32 = 3;

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Core(e) if e.is_cap() => EXIT_CAP,
            Failure::Core(_) => EXIT_INVALID,
            Failure::Io(_) => EXIT_IO,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Failure::Core(e) => {
                let mut v = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": self.exit_code() });
                if let Error::Config { source_name, line, column, .. } = e {
                    v["file"] = json!(source_name);
                    v["line"] = json!(line);
                    v["column"] = json!(column);
                }
                v
            }
            Failure::Io(m) => json!({ "error": "Io", "message": m, "exit_code": self.exit_code() }),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::InvalidInput(msg.into()))
}

#[derive(Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub inputs: Value,
    pub results: Value,
    pub warnings: Vec<String>,
}

/// Collects the report and any CSV side outputs of one command.
pub struct Output {
    pub command: String,
    pub inputs: Value,
    pub warnings: Vec<String>,
    pub csv: Vec<(String, String)>,
}

impl Output {
    pub fn new(command: &str, inputs: Value) -> Self {
        Output { command: command.to_string(), inputs, warnings: Vec::new(), csv: Vec::new() }
    }

    pub fn warn(&mut self, w: impl Into<String>) {
        self.warnings.push(w.into());
    }

    pub fn csv(&mut self, name: &str, text: String) {
        self.csv.push((format!("{}_{name}.csv", self.command), text));
    }

    pub fn finish(self, results: Value, out_dir: Option<&Path>) -> CliResult<String> {
        let report = Report {
            schema_version: SCHEMA_VERSION,
            command: self.command.clone(),
            inputs: self.inputs,
            results,
            warnings: self.warnings,
        };
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Io(e.to_string()))? + "\n";
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
            write(&dir.join(format!("{}.json", self.command)), &text)?;
            for (name, body) in &self.csv {
                write(&dir.join(name), body)?;
            }
        }
        Ok(text)
    }
}

fn write(path: &PathBuf, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

/// Serializes rows with the csv crate.
pub fn csv_rows<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
