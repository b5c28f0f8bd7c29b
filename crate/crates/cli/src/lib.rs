//! Command-line entry points and the HTTP inference service.

pub mod commands;
pub mod server;

use sketchfill::Error;

/// Environment variable naming the checkpoint directory.
pub const CHECKPOINT_ENV: &str = "SKETCHFILL_CHECKPOINTS";

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_INTERNAL: u8 = 2;

/// Bad input from the caller maps to 1, everything else to 2.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse(_)
        | Error::UnsupportedMeter(_)
        | Error::Polyphony(_)
        | Error::Overlap(_)
        | Error::Range(_)
        | Error::ArityMismatch { .. }
        | Error::ShapeMismatch(_)
        | Error::Vocab { .. }
        | Error::EmptyCorpus
        | Error::TooFewWindows { .. }
        | Error::EmptyInput
        | Error::Spec(_)
        | Error::Mask(_)
        | Error::Config(_)
        | Error::Validation(_)
        | Error::Json(_) => EXIT_VALIDATION,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_VALIDATION,
        Error::CheckpointMismatch(_)
        | Error::Divergence { .. }
        | Error::ModelNotLoaded(_)
        | Error::Tensor(_)
        | Error::Io(_) => EXIT_INTERNAL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caller_mistakes_are_validation_errors() {
        assert_eq!(exit_code(&Error::Validation("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Spec("x".into())), EXIT_VALIDATION);
        let missing = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(exit_code(&Error::Io(missing)), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::CheckpointMismatch("x".into())), EXIT_INTERNAL);
        assert_eq!(exit_code(&Error::ModelNotLoaded("x".into())), EXIT_INTERNAL);
    }
}
