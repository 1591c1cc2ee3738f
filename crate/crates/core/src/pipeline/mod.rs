//! Registry, pipeline selection and job/batch orchestration.

pub mod batch;
pub mod config;
pub mod job;
pub mod registry;
pub mod select;

use serde::{Deserialize, Serialize};

pub use batch::{run_batch, run_point_batch, BatchError, BatchOptions, BatchReport};
pub use config::{ConfigError, RunConfig};
pub use job::{
    run_job, GenerationJob, JobDeps, JobFailure, JobSettings, StageOutcome, StageRoutes,
};
pub use registry::{PipelineRegistry, PipelineSpec, RegistryError, StageTemplates};
pub use select::{select_pipelines, Allocation, SelectError, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Charts,
    Documents,
    Tables,
    Diagrams,
    Math,
    VectorGraphics,
    SheetMusic,
    Circuits,
    ChemicalStructures,
    Pointing,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Charts,
        Category::Documents,
        Category::Tables,
        Category::Diagrams,
        Category::Math,
        Category::VectorGraphics,
        Category::SheetMusic,
        Category::Circuits,
        Category::ChemicalStructures,
        Category::Pointing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Charts => "charts",
            Category::Documents => "documents",
            Category::Tables => "tables",
            Category::Diagrams => "diagrams",
            Category::Math => "math",
            Category::VectorGraphics => "vector-graphics",
            Category::SheetMusic => "sheet-music",
            Category::Circuits => "circuits",
            Category::ChemicalStructures => "chemical-structures",
            Category::Pointing => "pointing",
        }
    }

    pub fn is_pointing(self) -> bool {
        self == Category::Pointing
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

/// Requested category, or keyword-based resolution from the query text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CategoryChoice {
    Auto,
    Fixed(Category),
}

impl From<CategoryChoice> for String {
    fn from(c: CategoryChoice) -> Self {
        c.to_string()
    }
}

impl TryFrom<String> for CategoryChoice {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl std::fmt::Display for CategoryChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CategoryChoice::Auto => f.write_str("auto"),
            CategoryChoice::Fixed(c) => c.fmt(f),
        }
    }
}

impl std::str::FromStr for CategoryChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            Ok(CategoryChoice::Auto)
        } else {
            s.parse().map(CategoryChoice::Fixed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationQuery {
    pub text: String,
    pub category: CategoryChoice,
    pub count: u32,
    pub seed: u64,
}

impl GenerationQuery {
    pub fn new(text: impl Into<String>, category: CategoryChoice, count: u32, seed: u64) -> Self {
        Self {
            text: text.into(),
            category,
            count,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_strings_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
            assert_eq!(serde_json::to_value(c).unwrap(), c.as_str());
        }
        assert_eq!(
            "auto".parse::<CategoryChoice>().unwrap(),
            CategoryChoice::Auto
        );
        assert!("posters".parse::<CategoryChoice>().is_err());
    }
}
