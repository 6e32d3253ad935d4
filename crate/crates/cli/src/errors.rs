use std::io::ErrorKind;
use std::process::ExitCode;

use aat_core::AatError;
use serde_json::json;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_FILE: u8 = 3;
pub const EXIT_INVARIANT: u8 = 4;

/// An input that parses but breaks a documented contract.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invariant(pub String);

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if e.downcast_ref::<Invariant>().is_some() {
        return ("invariant", EXIT_INVARIANT);
    }
    if let Some(io) = e.downcast_ref::<std::io::Error>() {
        return if io.kind() == ErrorKind::NotFound {
            ("missing_file", EXIT_MISSING_FILE)
        } else {
            ("io", EXIT_FAILURE)
        };
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return ("invariant", EXIT_INVARIANT);
    }
    match e.downcast_ref::<AatError>() {
        Some(AatError::Io { source, .. }) if source.kind() == ErrorKind::NotFound => ("missing_file", EXIT_MISSING_FILE),
        Some(AatError::Io { .. }) => ("io", EXIT_FAILURE),
        Some(
            AatError::DimensionMismatch { .. }
            | AatError::NonFinite(_)
            | AatError::InvalidAttention(_)
            | AatError::InvalidParameter(_)
            | AatError::InvalidConfig(_)
            | AatError::IndexOutOfRange { .. }
            | AatError::CorruptManifest { .. }
            | AatError::TruncatedBlob { .. }
            | AatError::ShapeMismatch { .. }
            | AatError::MissingTensor(_)
            | AatError::BenchRejected { .. }
            | AatError::Json(_),
        ) => ("invariant", EXIT_INVARIANT),
        Some(AatError::Diverged { .. }) => ("diverged", EXIT_FAILURE),
        Some(_) | None => ("error", EXIT_FAILURE),
    }
}

fn emit(kind: &str, message: &str, code: u8) -> ExitCode {
    let record = json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    eprintln!("{record}");
    ExitCode::from(code)
}

pub fn report(e: &anyhow::Error) -> ExitCode {
    let (kind, code) = classify(e);
    emit(kind, &format!("{e:#}"), code)
}

pub fn usage(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind as K;
    if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
        let _ = e.print();
        return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand {
            ExitCode::from(EXIT_USAGE)
        } else {
            ExitCode::SUCCESS
        };
    }
    let _ = e.print();
    emit("usage", e.kind().as_str().unwrap_or("invalid arguments"), EXIT_USAGE)
}
