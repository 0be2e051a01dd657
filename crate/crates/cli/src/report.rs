use std::fmt;

use perflaw_core::{Error, ErrorClass};
use serde_json::Value;

/// Exit statuses: 1 usage, 2 I/O, 3 validation, 4 numeric.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Invalid(String),
    Core(Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Invalid(_) => 3,
            Failure::Core(e) => match e.class() {
                ErrorClass::Io => 2,
                ErrorClass::Validation => 3,
                ErrorClass::Numeric => 4,
            },
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Invalid(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

pub type CmdResult = Result<Report, Failure>;

/// What a command prints: a JSON document and its text rendering.
pub struct Report {
    pub json: Value,
    pub text: String,
}

impl Report {
    /// Text form as `key: value` lines over the top-level JSON fields.
    pub fn from_json(json: Value) -> Self {
        let text = key_values(&json);
        Self { json, text }
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(&self.json).expect("report serializes");
                s.push('\n');
                s
            }
            OutputFormat::Text => {
                let mut s = self.text.clone();
                if !s.ends_with('\n') {
                    s.push('\n');
                }
                s
            }
        }
    }
}

pub fn key_values(json: &Value) -> String {
    match json {
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}: {s}\n"),
                other => format!("{k}: {other}\n"),
            })
            .collect(),
        other => format!("{other}\n"),
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, clap::ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    #[default]
    Text,
}
