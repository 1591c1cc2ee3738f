//! Prompt templates with `{{NAME}}` placeholders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Placeholder {
    Persona,
    Topic,
    FigureType,
    Data,
    Code,
    NumTopics,
    MarkerColor,
}

impl Placeholder {
    pub const ALL: [Placeholder; 7] = [
        Placeholder::Persona,
        Placeholder::Topic,
        Placeholder::FigureType,
        Placeholder::Data,
        Placeholder::Code,
        Placeholder::NumTopics,
        Placeholder::MarkerColor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Persona => "PERSONA",
            Placeholder::Topic => "TOPIC",
            Placeholder::FigureType => "FIGURE_TYPE",
            Placeholder::Data => "DATA",
            Placeholder::Code => "CODE",
            Placeholder::NumTopics => "NUM_TOPICS",
            Placeholder::MarkerColor => "MARKER_COLOR",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl std::fmt::Display for Placeholder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template body is empty")]
    EmptyBody,
    #[error("unknown placeholder {{{{{0}}}}}")]
    UnknownPlaceholder(String),
    #[error("missing binding for placeholder {0}")]
    MissingBinding(Placeholder),
}

/// Values substituted into a template.
#[derive(Debug, Clone, Default)]
pub struct Bindings(BTreeMap<Placeholder, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, p: Placeholder, value: impl Into<String>) -> Self {
        self.0.insert(p, value.into());
        self
    }

    pub fn set(&mut self, p: Placeholder, value: impl Into<String>) {
        self.0.insert(p, value.into());
    }

    pub fn get(&self, p: Placeholder) -> Option<&str> {
        self.0.get(&p).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    body: String,
    id: String,
    pieces: Vec<Piece>,
}

fn is_marker_name(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_uppercase() || b == b'_' || b.is_ascii_digit())
}

impl PromptTemplate {
    /// Parses `body`. Any `{{NAME}}` whose NAME looks like a marker (uppercase,
    /// digits, underscores) must be one of the allowed [`Placeholder`]s; other
    /// brace runs are kept as literal text.
    pub fn new(stage: Stage, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        if body.trim().is_empty() {
            return Err(TemplateError::EmptyBody);
        }
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = body.as_str();
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            match after.find("}}") {
                Some(close) if is_marker_name(&after[..close]) => {
                    let name = &after[..close];
                    let p = Placeholder::from_name(name)
                        .ok_or_else(|| TemplateError::UnknownPlaceholder(name.to_string()))?;
                    text.push_str(&rest[..open]);
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(p));
                    rest = &after[close + 2..];
                }
                _ => {
                    text.push_str(&rest[..open + 2]);
                    rest = after;
                }
            }
        }
        text.push_str(rest);
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        let id = seed::short_digest(body.as_bytes());
        Ok(Self {
            stage,
            body,
            id,
            pieces,
        })
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Stable hash of the body.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Distinct placeholders in order of first appearance.
    pub fn placeholders(&self) -> Vec<Placeholder> {
        let mut out = Vec::new();
        for piece in &self.pieces {
            if let Piece::Slot(p) = piece {
                if !out.contains(p) {
                    out.push(*p);
                }
            }
        }
        out
    }

    /// Substitutes every placeholder verbatim. Bound values are not rescanned,
    /// so a value containing `{{TOPIC}}` is inserted literally.
    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(p) => {
                    out.push_str(bindings.get(*p).ok_or(TemplateError::MissingBinding(*p))?)
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_substitution() {
        let t = PromptTemplate::new(Stage::Topic, "My persona is: {{PERSONA}}").unwrap();
        let b = Bindings::new().with(Placeholder::Persona, "a chef");
        assert_eq!(t.render(&b).unwrap(), "My persona is: a chef");
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let t = PromptTemplate::new(Stage::Data, "{{PERSONA}} wants {{TOPIC}}").unwrap();
        let b = Bindings::new().with(Placeholder::Persona, "x");
        assert_eq!(
            t.render(&b).unwrap_err(),
            TemplateError::MissingBinding(Placeholder::Topic)
        );
    }

    #[test]
    fn no_placeholders_is_identity() {
        let body = "Just text, with {braces} and {{ lower }} kept.";
        let t = PromptTemplate::new(Stage::Code, body).unwrap();
        assert!(t.placeholders().is_empty());
        assert_eq!(t.render(&Bindings::new()).unwrap(), body);
    }

    #[test]
    fn unknown_marker_is_rejected() {
        assert_eq!(
            PromptTemplate::new(Stage::Code, "{{COLOR}}").unwrap_err(),
            TemplateError::UnknownPlaceholder("COLOR".into())
        );
        assert_eq!(
            PromptTemplate::new(Stage::Code, "  \n").unwrap_err(),
            TemplateError::EmptyBody
        );
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplate::new(Stage::Data, "[{{TOPIC}}] [{{PERSONA}}]").unwrap();
        let b = Bindings::new()
            .with(Placeholder::Topic, "{{PERSONA}}")
            .with(Placeholder::Persona, "p");
        assert_eq!(t.render(&b).unwrap(), "[{{PERSONA}}] [p]");
    }

    #[test]
    fn repeated_placeholders_and_id() {
        let t = PromptTemplate::new(
            Stage::Topic,
            "{{NUM_TOPICS}} for {{PERSONA}}; {{NUM_TOPICS}}",
        )
        .unwrap();
        assert_eq!(
            t.placeholders(),
            vec![Placeholder::NumTopics, Placeholder::Persona]
        );
        let b = Bindings::new()
            .with(Placeholder::NumTopics, "10")
            .with(Placeholder::Persona, "p");
        let out = t.render(&b).unwrap();
        assert_eq!(out, "10 for p; 10");
        assert!(!out.contains("{{"));
        let t2 = PromptTemplate::new(Stage::Topic, t.body()).unwrap();
        assert_eq!(t.id(), t2.id());
    }
}
