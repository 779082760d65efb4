use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] mbsde::Error),

    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Read { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Validation(_) => "validation",
            CliError::Core(mbsde::Error::Gate { .. }) => "gate",
            CliError::Core(mbsde::Error::NotConverged { .. }) => "divergence",
            CliError::Core(_) => "validation",
            CliError::Write { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "parse" | "validation" => 2,
            "gate" => 3,
            "divergence" => 4,
            _ => 1,
        }
    }

    /// One-line JSON description for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Parse { line, column, .. } => {
                v["line"] = json!(line);
                v["column"] = json!(column);
            }
            CliError::Core(mbsde::Error::Gate { k_exp, six_l2 }) => {
                v["k_exp_beta_t"] = json!(k_exp);
                v["six_l_squared"] = json!(six_l2);
            }
            CliError::Core(mbsde::Error::NotConverged {
                diverged,
                iterations,
                distances,
                ..
            }) => {
                v["diverged"] = json!(diverged);
                v["iterations"] = json!(iterations);
                v["iterate_distances"] = json!(distances);
            }
            _ => {}
        }
        v
    }
}
