//! Code execution and image validation.
//!
//! A [`CodeArtifact`] is executed by a per-tool adapter inside a private
//! working directory under a [`SandboxPolicy`]; the output is normalized to a
//! PNG [`RenderedImage`] and checked against [`ImageConstraints`].

pub mod adapters;
pub mod fixture;
pub mod image;
pub mod sandbox;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::llm::FencedCode;
use crate::seed;

pub use self::adapters::{AdapterConfig, SandboxRenderer};
pub use self::image::{validate_image, ImageConstraints, RenderedImage, ValidationFailure};

/// The eleven rendering tools plus the hermetic fixture tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tool {
    Matplotlib,
    Plotly,
    Vegalite,
    Latex,
    Html,
    Mermaid,
    Graphviz,
    Svg,
    Asymptote,
    Lilypond,
    Rdkit,
    Fixture,
}

impl Tool {
    /// Tools that generation pipelines may use.
    pub const RENDERING: [Tool; 11] = [
        Tool::Matplotlib,
        Tool::Plotly,
        Tool::Vegalite,
        Tool::Latex,
        Tool::Html,
        Tool::Mermaid,
        Tool::Graphviz,
        Tool::Svg,
        Tool::Asymptote,
        Tool::Lilypond,
        Tool::Rdkit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tool::Matplotlib => "matplotlib",
            Tool::Plotly => "plotly",
            Tool::Vegalite => "vegalite",
            Tool::Latex => "latex",
            Tool::Html => "html",
            Tool::Mermaid => "mermaid",
            Tool::Graphviz => "graphviz",
            Tool::Svg => "svg",
            Tool::Asymptote => "asymptote",
            Tool::Lilypond => "lilypond",
            Tool::Rdkit => "rdkit",
            Tool::Fixture => "fixture",
        }
    }

    /// Tag the code prompt asks the model to put on the opening fence.
    pub fn fence_tag(self) -> &'static str {
        match self {
            Tool::Matplotlib | Tool::Plotly | Tool::Rdkit => "python",
            Tool::Vegalite => "json",
            Tool::Latex => "latex",
            Tool::Html => "html",
            Tool::Mermaid => "mermaid",
            Tool::Graphviz => "dot",
            Tool::Svg => "svg",
            Tool::Asymptote => "asymptote",
            Tool::Lilypond => "lilypond",
            Tool::Fixture => "fixture",
        }
    }

    /// File name the source is written to inside the working directory.
    pub fn source_file(self) -> &'static str {
        match self {
            Tool::Matplotlib | Tool::Plotly | Tool::Rdkit => "main.py",
            Tool::Vegalite => "spec.vl.json",
            Tool::Latex => "main.tex",
            Tool::Html => "index.html",
            Tool::Mermaid => "diagram.mmd",
            Tool::Graphviz => "graph.dot",
            Tool::Svg => "image.svg",
            Tool::Asymptote => "figure.asy",
            Tool::Lilypond => "score.ly",
            Tool::Fixture => "scene.fixture",
        }
    }
}

impl std::fmt::Display for Tool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Tool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tool::RENDERING
            .into_iter()
            .chain([Tool::Fixture])
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown tool `{s}`"))
    }
}

/// Generated source plus the tool that renders it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeArtifact {
    pub source: String,
    pub tool: Tool,
    /// Fence tag as received from the model.
    pub lang_tag: String,
}

impl CodeArtifact {
    pub fn new(
        tool: Tool,
        source: impl Into<String>,
        lang_tag: impl Into<String>,
    ) -> Result<Self, RenderError> {
        let source = source.into();
        if source.trim().is_empty() {
            return Err(RenderError::EmptySource);
        }
        Ok(Self {
            source,
            tool,
            lang_tag: lang_tag.into(),
        })
    }

    pub fn from_fenced(tool: Tool, code: FencedCode) -> Result<Self, RenderError> {
        if code.tag_mismatch {
            log::warn!(
                "accepted code block tagged `{}` for tool {tool} (expected `{}`)",
                code.lang_tag,
                tool.fence_tag()
            );
        }
        Self::new(tool, code.source, code.lang_tag)
    }

    /// Full SHA-256 of the source.
    pub fn digest(&self) -> String {
        seed::sha256_hex(self.source.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxPolicy {
    pub wall_timeout: Duration,
    pub max_output_bytes: usize,
    /// Private per-render directory; created if absent.
    pub working_dir: PathBuf,
    pub network_disabled: bool,
}

impl SandboxPolicy {
    pub fn new(working_dir: impl Into<PathBuf>, wall_timeout: Duration) -> Self {
        Self {
            wall_timeout,
            max_output_bytes: 1 << 20,
            working_dir: working_dir.into(),
            network_disabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.wall_timeout.is_zero() {
            return Err(RenderError::InvalidPolicy(
                "wall timeout must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("{tool}: required program `{program}` not found")]
    ToolMissing { tool: Tool, program: String },
    #[error("{tool}: exited with status {status:?}: {stderr}")]
    CompileError {
        tool: Tool,
        status: Option<i32>,
        stderr: String,
    },
    #[error("{tool}: timed out after {seconds:.1}s")]
    Timeout { tool: Tool, seconds: f64 },
    #[error("{tool}: no output image produced")]
    NoOutputImage { tool: Tool },
    #[error("{tool}: output image is not decodable: {reason}")]
    UndecodableImage { tool: Tool, reason: String },
    #[error("source is empty")]
    EmptySource,
    #[error("invalid sandbox policy: {0}")]
    InvalidPolicy(String),
    #[error("sandbox i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for RenderError {
    fn from(e: std::io::Error) -> Self {
        RenderError::Io(e.to_string())
    }
}

/// Turns a code artifact into a validated-decodable PNG.
pub trait Renderer: Send + Sync {
    fn render(
        &self,
        artifact: &CodeArtifact,
        policy: &SandboxPolicy,
    ) -> Result<RenderedImage, RenderError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tool_names_round_trip() {
        for t in Tool::RENDERING.into_iter().chain([Tool::Fixture]) {
            assert_eq!(t.as_str().parse::<Tool>().unwrap(), t);
            assert_eq!(serde_json::to_value(t).unwrap(), t.as_str());
        }
        assert!("gnuplot".parse::<Tool>().is_err());
    }

    #[test]
    fn empty_source_is_rejected() {
        assert_eq!(
            CodeArtifact::new(Tool::Html, " \n", "html"),
            Err(RenderError::EmptySource)
        );
    }

    #[test]
    fn zero_timeout_is_invalid() {
        let p = SandboxPolicy::new("/tmp/x", Duration::ZERO);
        assert!(matches!(p.validate(), Err(RenderError::InvalidPolicy(_))));
    }
}
