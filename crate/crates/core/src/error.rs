//! Errors raised while running one generation stage.

use crate::llm::{GatewayError, ParseError, TemplateError};
use crate::pointing::PointingError;
use crate::render::{RenderError, ValidationFailure};

#[derive(Debug, Clone, thiserror::Error)]
pub enum StageError {
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("gateway error: {0}")]
    Gateway(#[from] GatewayError),
    #[error("parse failed: {0}")]
    Parse(#[from] ParseError),
    #[error("render failed: {0}")]
    Render(#[from] RenderError),
    #[error("rendered image rejected: {0}")]
    InvalidImage(#[from] ValidationFailure),
    #[error("pointing failed: {0}")]
    Pointing(#[from] PointingError),
}

impl StageError {
    /// Short machine-readable tag used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            StageError::Template(_) => "template-error",
            StageError::Gateway(_) => "gateway-failed",
            StageError::Parse(_) => "parse-failed",
            StageError::Render(_) => "render-failed",
            StageError::InvalidImage(_) => "invalid-image",
            StageError::Pointing(_) => "pointing-failed",
        }
    }

    /// Whether another attempt with a fresh sampling seed can succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            StageError::Template(_) => false,
            StageError::Gateway(e) => e.is_retryable(),
            StageError::Parse(_) | StageError::InvalidImage(_) => true,
            StageError::Render(e) => !matches!(e, RenderError::ToolMissing { .. }),
            StageError::Pointing(e) => e.is_retryable(),
        }
    }
}
