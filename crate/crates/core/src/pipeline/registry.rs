use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::Category;
use crate::llm::{Placeholder, PromptTemplate, Stage, TemplateError};
use crate::render::Tool;

pub const QA_PIPELINES: usize = 20;
pub const QA_CATEGORIES: usize = 9;
pub const TOOLS: usize = 11;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("registry is not valid TOML: {0}")]
    Toml(String),
    #[error("template {path}: {source}")]
    Template { path: String, source: TemplateError },
    #[error("pipeline `{id}`: template {path} uses {placeholder}, which the {stage} stage does not bind")]
    UnboundPlaceholder {
        id: String,
        path: String,
        stage: Stage,
        placeholder: Placeholder,
    },
    #[error("pipeline `{id}`: {message}")]
    InvalidSpec { id: String, message: String },
    #[error("duplicate pipeline id `{0}`")]
    DuplicateId(String),
    #[error("registry cardinality: {0}")]
    Cardinality(String),
    #[error("unsupported registry format version {0}")]
    FormatVersion(u32),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegistry {
    format_version: u32,
    fallback_category: Category,
    pipeline: Vec<RawSpec>,
    #[serde(default)]
    keywords: BTreeMap<Category, Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    id: String,
    category: Category,
    tool: Tool,
    #[serde(default = "one")]
    weight: f64,
    templates: RawTemplates,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplates {
    topic: String,
    data: String,
    code: String,
    instruction: Option<String>,
    point_edit: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StageTemplates {
    pub topic: PromptTemplate,
    pub data: PromptTemplate,
    pub code: PromptTemplate,
    /// Present for QA pipelines.
    pub instruction: Option<PromptTemplate>,
    /// Present for the pointing pipeline.
    pub point_edit: Option<PromptTemplate>,
}

#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub id: String,
    pub category: Category,
    pub tool: Tool,
    pub weight: f64,
    pub templates: StageTemplates,
}

/// Placeholders each stage binds when it renders its prompt.
pub fn bound_placeholders(stage: Stage) -> &'static [Placeholder] {
    use Placeholder::*;
    match stage {
        Stage::Topic => &[Persona, NumTopics, FigureType],
        Stage::Data => &[Persona, Topic, FigureType],
        Stage::Code => &[Persona, Topic, FigureType, Data],
        Stage::Instruction => &[Persona, Topic, FigureType, Data, Code],
        Stage::PointEdit => &[Code, Topic, FigureType, MarkerColor],
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRegistry {
    specs: Vec<PipelineSpec>,
    fallback: Category,
    keywords: Vec<(Category, Vec<String>)>,
}

impl PipelineRegistry {
    /// The registry and templates compiled into the binary.
    pub fn builtin() -> Result<Self, RegistryError> {
        Self::parse(crate::assets::registry_toml(), |p| {
            crate::assets::file(p)
                .map(str::to_string)
                .ok_or_else(|| RegistryError::Io {
                    path: PathBuf::from(p),
                    message: "no such embedded file".into(),
                })
        })
    }

    /// Loads a registry file; template paths resolve relative to its directory.
    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| RegistryError::Io {
                path: p.to_path_buf(),
                message: e.to_string(),
            })
        };
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, |rel| read(&base.join(rel)))
    }

    pub fn parse(
        text: &str,
        resolve: impl Fn(&str) -> Result<String, RegistryError>,
    ) -> Result<Self, RegistryError> {
        let raw: RawRegistry =
            toml::from_str(text).map_err(|e| RegistryError::Toml(e.to_string()))?;
        if raw.format_version != 1 {
            return Err(RegistryError::FormatVersion(raw.format_version));
        }
        let mut specs = Vec::with_capacity(raw.pipeline.len());
        let mut ids = BTreeSet::new();
        for r in raw.pipeline {
            if !ids.insert(r.id.clone()) {
                return Err(RegistryError::DuplicateId(r.id));
            }
            specs.push(build_spec(r, &resolve)?);
        }
        specs.sort_by(|a, b| a.id.cmp(&b.id));
        let keywords = Category::ALL
            .into_iter()
            .filter_map(|c| {
                raw.keywords.get(&c).map(|kws| {
                    let mut kws: Vec<String> =
                        kws.iter().map(|k| k.trim().to_lowercase()).collect();
                    kws.retain(|k| !k.is_empty());
                    (c, kws)
                })
            })
            .collect();
        let reg = Self {
            specs,
            fallback: raw.fallback_category,
            keywords,
        };
        reg.check_cardinality()?;
        Ok(reg)
    }

    fn check_cardinality(&self) -> Result<(), RegistryError> {
        let qa: Vec<&PipelineSpec> = self
            .specs
            .iter()
            .filter(|s| !s.category.is_pointing())
            .collect();
        let pointing = self.specs.len() - qa.len();
        let categories: BTreeSet<Category> = qa.iter().map(|s| s.category).collect();
        let tools: BTreeSet<Tool> = self.specs.iter().map(|s| s.tool).collect();
        let mut problems = Vec::new();
        if qa.len() != QA_PIPELINES {
            problems.push(format!(
                "{} QA pipelines, expected {QA_PIPELINES}",
                qa.len()
            ));
        }
        if pointing != 1 {
            problems.push(format!("{pointing} pointing pipelines, expected 1"));
        }
        if categories.len() != QA_CATEGORIES {
            problems.push(format!(
                "{} QA categories, expected {QA_CATEGORIES}",
                categories.len()
            ));
        }
        if tools.len() != TOOLS || tools.contains(&Tool::Fixture) {
            problems.push(format!(
                "{} distinct rendering tools, expected {TOOLS}",
                tools.len()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RegistryError::Cardinality(problems.join("; ")))
        }
    }

    /// All specs sorted by id.
    pub fn specs(&self) -> &[PipelineSpec] {
        &self.specs
    }

    pub fn get(&self, id: &str) -> Option<&PipelineSpec> {
        self.specs
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.specs[i])
    }

    /// Specs of one category, sorted by id.
    pub fn by_category(&self, category: Category) -> Vec<&PipelineSpec> {
        self.specs
            .iter()
            .filter(|s| s.category == category)
            .collect()
    }

    pub fn category_index(&self) -> BTreeMap<Category, Vec<String>> {
        let mut idx: BTreeMap<Category, Vec<String>> = BTreeMap::new();
        for s in &self.specs {
            idx.entry(s.category).or_default().push(s.id.clone());
        }
        idx
    }

    pub fn tools(&self) -> BTreeSet<Tool> {
        self.specs.iter().map(|s| s.tool).collect()
    }

    pub fn fallback_category(&self) -> Category {
        self.fallback
    }

    /// Pointing spec for `tool`, if any.
    pub fn pointing_spec(&self, tool: Tool) -> Option<&PipelineSpec> {
        self.specs
            .iter()
            .find(|s| s.category.is_pointing() && s.tool == tool)
    }

    /// Resolves a query to a category by whole-word keyword match. The
    /// longest keyword wins; ties go to the earlier category. Returns `None`
    /// when nothing matches.
    pub fn match_keywords(&self, text: &str) -> Option<Category> {
        let words: Vec<String> = text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        let mut best: Option<(usize, Category)> = None;
        for (cat, kws) in &self.keywords {
            for kw in kws {
                if best.is_some_and(|(len, _)| kw.len() <= len) {
                    continue;
                }
                if phrase_matches(&words, kw) {
                    best = Some((kw.len(), *cat));
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

fn word_matches(word: &str, kw: &str) -> bool {
    word == kw || word.strip_suffix('s') == Some(kw) || word.strip_suffix("es") == Some(kw)
}

fn phrase_matches(words: &[String], phrase: &str) -> bool {
    let parts: Vec<&str> = phrase.split_whitespace().collect();
    if parts.is_empty() || parts.len() > words.len() {
        return false;
    }
    words
        .windows(parts.len())
        .any(|win| win.iter().zip(&parts).all(|(w, p)| word_matches(w, p)))
}

fn build_spec(
    r: RawSpec,
    resolve: &impl Fn(&str) -> Result<String, RegistryError>,
) -> Result<PipelineSpec, RegistryError> {
    let invalid = |message: &str| RegistryError::InvalidSpec {
        id: r.id.clone(),
        message: message.to_string(),
    };
    if r.id.trim().is_empty() {
        return Err(invalid("empty id"));
    }
    if !(r.weight.is_finite() && r.weight > 0.0) {
        return Err(invalid("weight must be positive"));
    }
    if r.tool == Tool::Fixture {
        return Err(invalid("the fixture tool cannot back a pipeline"));
    }
    let load = |stage: Stage, path: &str| -> Result<PromptTemplate, RegistryError> {
        let body = resolve(path)?;
        let t = PromptTemplate::new(stage, body).map_err(|source| RegistryError::Template {
            path: path.to_string(),
            source,
        })?;
        let bound = bound_placeholders(stage);
        if let Some(p) = t.placeholders().into_iter().find(|p| !bound.contains(p)) {
            return Err(RegistryError::UnboundPlaceholder {
                id: r.id.clone(),
                path: path.to_string(),
                stage,
                placeholder: p,
            });
        }
        Ok(t)
    };
    let optional =
        |stage: Stage, path: &Option<String>| path.as_deref().map(|p| load(stage, p)).transpose();
    let templates = StageTemplates {
        topic: load(Stage::Topic, &r.templates.topic)?,
        data: load(Stage::Data, &r.templates.data)?,
        code: load(Stage::Code, &r.templates.code)?,
        instruction: optional(Stage::Instruction, &r.templates.instruction)?,
        point_edit: optional(Stage::PointEdit, &r.templates.point_edit)?,
    };
    match (
        r.category.is_pointing(),
        &templates.instruction,
        &templates.point_edit,
    ) {
        (false, Some(_), None) | (true, None, Some(_)) => {}
        (false, _, _) => {
            return Err(invalid(
                "QA pipelines need an instruction template and no point_edit template",
            ))
        }
        (true, _, _) => {
            return Err(invalid(
                "the pointing pipeline needs a point_edit template and no instruction template",
            ))
        }
    }
    Ok(PipelineSpec {
        id: r.id,
        category: r.category,
        tool: r.tool,
        weight: r.weight,
        templates,
    })
}
