use std::io::ErrorKind;

use uqforge_core::Error;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_SCHEMA: u8 = 3;
pub const EXIT_MISSING_FILE: u8 = 4;
pub const EXIT_UNDEFINED_AUROC: u8 = 5;
pub const EXIT_INVALID_ARGUMENT: u8 = 6;
pub const EXIT_MODEL_MISMATCH: u8 = 7;
pub const EXIT_IO: u8 = 8;

/// Maps the first recognizable cause in the chain to an error kind and exit
/// code.
pub fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Missing { .. }
                | Error::Json(_) => ("schema", EXIT_SCHEMA),
                Error::UndefinedAuroc(_) => ("undefined_auroc", EXIT_UNDEFINED_AUROC),
                Error::InvalidArgument(_) => ("invalid_argument", EXIT_INVALID_ARGUMENT),
                Error::ModelMismatch(_) => ("model_mismatch", EXIT_MODEL_MISMATCH),
                Error::Io(io) if io.kind() == ErrorKind::NotFound => {
                    ("missing_file", EXIT_MISSING_FILE)
                }
                Error::Io(_) => ("io", EXIT_IO),
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == ErrorKind::NotFound {
                ("missing_file", EXIT_MISSING_FILE)
            } else {
                ("io", EXIT_IO)
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("schema", EXIT_SCHEMA);
        }
    }
    ("error", EXIT_OTHER)
}

/// One JSON object on one line: `{"error":KIND,"code":N,"message":TEXT}`.
pub fn error_line(kind: &str, code: u8, err: &anyhow::Error) -> String {
    let message = format!("{err:#}").replace('\n', " ");
    serde_json::json!({ "error": kind, "code": code, "message": message }).to_string()
}
