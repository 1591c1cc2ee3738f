//! Run configuration: a TOML file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::job::{JobSettings, StageRoutes};
use super::{BatchOptions, CategoryChoice, GenerationQuery, PipelineRegistry};
use crate::instruction::EmitStyle;
use crate::llm::http::{AnthropicProvider, OpenAiProvider};
use crate::llm::{Gateway, MockProvider, ResponseCache, RetryPolicy};
use crate::persona::PersonaStore;
use crate::pointing::MarkerSpec;
use crate::render::{AdapterConfig, ImageConstraints, SandboxRenderer};

pub const MOCK_PROVIDER: &str = "mock";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Registry(#[from] super::RegistryError),
    #[error(transparent)]
    Persona(#[from] crate::persona::PersonaError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Serve every stage from the scripted mock provider.
    pub mock: bool,
    /// Directory of mock response files; the bundled ones otherwise.
    pub mock_fixtures: Option<PathBuf>,
    /// Persistent response cache. `None` keeps the cache in memory.
    pub cache_dir: Option<PathBuf>,
    pub max_concurrent: usize,
    pub max_retries: u32,
    pub openai_base_url: String,
    pub openai_key_env: String,
    pub anthropic_base_url: String,
    pub anthropic_key_env: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mock: false,
            mock_fixtures: None,
            cache_dir: Some(PathBuf::from(".codesynth-cache")),
            max_concurrent: 8,
            max_retries: 3,
            openai_base_url: "https://api.openai.com/v1".into(),
            openai_key_env: "OPENAI_API_KEY".into(),
            anthropic_base_url: "https://api.anthropic.com".into(),
            anthropic_key_env: "ANTHROPIC_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub timeout_secs: f64,
    pub max_output_bytes: usize,
    pub network_disabled: bool,
    /// Concurrent renders across all workers.
    pub max_renders: usize,
    /// Render every artifact with the fixture DSL tool.
    pub fixture_renderer: bool,
    pub fixture_program: Option<PathBuf>,
    pub harness: Option<PathBuf>,
    pub programs: BTreeMap<String, PathBuf>,
    pub html_viewport_width: u32,
    pub html_max_height: u32,
    pub pdf_dpi: u32,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        let a = AdapterConfig::default();
        Self {
            timeout_secs: 60.0,
            max_output_bytes: 1 << 20,
            network_disabled: true,
            max_renders: a.max_concurrent,
            fixture_renderer: false,
            fixture_program: None,
            harness: None,
            programs: BTreeMap::new(),
            html_viewport_width: a.html_viewport_width,
            html_max_height: a.html_max_height,
            pdf_dpi: a.pdf_dpi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub query: Option<String>,
    pub category: CategoryChoice,
    pub count: u32,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub personas: Option<PathBuf>,
    pub num_topics: usize,
    pub max_attempts: u32,
    pub dedup: bool,
    pub emit: EmitStyle,
    pub llm_classifier: bool,
    pub provider: ProviderConfig,
    pub models: StageRoutes,
    pub sandbox: SandboxConfig,
    pub image: ImageConstraints,
    pub marker: MarkerSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let job = JobSettings::default();
        Self {
            query: None,
            category: CategoryChoice::Auto,
            count: 10,
            seed: 0,
            workers: 4,
            out_dir: None,
            registry: None,
            personas: None,
            num_topics: job.num_topics,
            max_attempts: job.max_attempts,
            dedup: true,
            emit: EmitStyle::Dual,
            llm_classifier: false,
            provider: ProviderConfig::default(),
            models: job.routes,
            sandbox: SandboxConfig::default(),
            image: job.constraints,
            marker: job.marker,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.message().to_string()))
    }

    /// Points every stage at the mock provider.
    pub fn use_mock_provider(&mut self) {
        self.provider.mock = true;
        for route in self.models.iter_mut() {
            route.provider = MOCK_PROVIDER.into();
            route.model = MOCK_PROVIDER.into();
        }
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(invalid("max_attempts must be at least 1"));
        }
        if self.num_topics == 0 {
            return Err(invalid("num_topics must be at least 1"));
        }
        if !(self.sandbox.timeout_secs.is_finite() && self.sandbox.timeout_secs > 0.0) {
            return Err(invalid("sandbox.timeout_secs must be positive"));
        }
        if self.sandbox.max_output_bytes == 0 || self.sandbox.max_renders == 0 {
            return Err(invalid("sandbox limits must be positive"));
        }
        if self.provider.max_concurrent == 0 || self.provider.max_retries == 0 {
            return Err(invalid("provider limits must be positive"));
        }
        self.image.check().map_err(invalid)?;
        if !(0.0..=441.7).contains(&self.marker.tolerance) || self.marker.min_area == 0 {
            return Err(invalid("marker tolerance or min_area out of range"));
        }
        let known = ["openai", "anthropic", MOCK_PROVIDER];
        for (stage, route) in [
            ("topic", &self.models.topic),
            ("data", &self.models.data),
            ("code", &self.models.code),
            ("instruction", &self.models.instruction),
            ("point_edit", &self.models.point_edit),
        ] {
            if !known.contains(&route.provider.as_str()) {
                return Err(invalid(format!(
                    "models.{stage}: unknown provider `{}`",
                    route.provider
                )));
            }
            if route.provider == MOCK_PROVIDER && !self.provider.mock {
                return Err(invalid(format!(
                    "models.{stage} uses the mock provider but provider.mock is off"
                )));
            }
            if route.model.trim().is_empty() {
                return Err(invalid(format!("models.{stage}: empty model id")));
            }
        }
        let files = [
            ("registry", self.registry.as_ref()),
            ("personas", self.personas.as_ref()),
            ("sandbox.harness", self.sandbox.harness.as_ref()),
            (
                "sandbox.fixture_program",
                self.sandbox.fixture_program.as_ref(),
            ),
        ];
        for (name, path) in files {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(invalid(format!("{name}: {} is not a file", p.display())));
                }
            }
        }
        if let Some(dir) = &self.provider.mock_fixtures {
            if !dir.is_dir() {
                return Err(invalid(format!(
                    "provider.mock_fixtures: {} is not a directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    pub fn query(&self) -> Result<GenerationQuery, ConfigError> {
        let text = self
            .query
            .as_deref()
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| invalid("a query is required"))?;
        if self.count == 0 {
            return Err(invalid("count must be at least 1"));
        }
        Ok(GenerationQuery::new(
            text,
            self.category,
            self.count,
            self.seed,
        ))
    }

    pub fn registry(&self) -> Result<PipelineRegistry, ConfigError> {
        Ok(match &self.registry {
            Some(p) => PipelineRegistry::load(p)?,
            None => PipelineRegistry::builtin()?,
        })
    }

    pub fn personas(&self) -> Result<PersonaStore, ConfigError> {
        Ok(match &self.personas {
            Some(p) => PersonaStore::load(p)?,
            None => PersonaStore::builtin(),
        })
    }

    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        let p = &self.provider;
        let cache = match &p.cache_dir {
            Some(dir) => ResponseCache::persistent(dir)
                .map_err(|e| invalid(format!("provider.cache_dir {}: {e}", dir.display())))?,
            None => ResponseCache::in_memory(),
        };
        let retry = RetryPolicy {
            max_attempts: p.max_retries,
            ..RetryPolicy::default()
        };
        let mut gw = Gateway::new(Arc::new(cache), p.max_concurrent, retry)
            .with_provider(
                "openai",
                Arc::new(OpenAiProvider::new(&p.openai_base_url, &p.openai_key_env)),
            )
            .with_provider(
                "anthropic",
                Arc::new(AnthropicProvider::new(
                    &p.anthropic_base_url,
                    &p.anthropic_key_env,
                )),
            );
        if p.mock {
            let mock = match &p.mock_fixtures {
                Some(dir) => MockProvider::from_dir(dir).map_err(|e| {
                    invalid(format!("provider.mock_fixtures {}: {e}", dir.display()))
                })?,
                None => MockProvider::builtin(),
            };
            gw.register(MOCK_PROVIDER, Arc::new(mock));
        }
        Ok(gw)
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        let s = &self.sandbox;
        AdapterConfig {
            programs: s.programs.clone(),
            fixture_program: s.fixture_program.clone(),
            harness: s.harness.clone(),
            route_all_to_fixture: s.fixture_renderer,
            max_concurrent: s.max_renders,
            html_viewport_width: s.html_viewport_width,
            html_max_height: s.html_max_height,
            pdf_dpi: s.pdf_dpi,
        }
    }

    pub fn renderer(&self) -> SandboxRenderer {
        SandboxRenderer::new(self.adapter_config())
    }

    pub fn job_settings(&self) -> JobSettings {
        JobSettings {
            routes: self.models.clone(),
            max_attempts: self.max_attempts,
            num_topics: self.num_topics,
            render_timeout: Duration::from_secs_f64(self.sandbox.timeout_secs),
            max_output_bytes: self.sandbox.max_output_bytes,
            network_disabled: self.sandbox.network_disabled,
            constraints: self.image,
            marker: self.marker,
        }
    }

    pub fn batch_options(&self, out_dir: &Path) -> BatchOptions {
        BatchOptions {
            out_dir: out_dir.to_path_buf(),
            workers: self.workers,
            dedup: self.dedup,
            emit: Some(self.emit),
            run_meta: Some(self.effective_meta()),
            llm_classifier: self.llm_classifier,
        }
    }

    /// The configuration as stored in the shard. Machine-local paths are
    /// reduced to file names so that shards compare equal across checkouts.
    pub fn effective_meta(&self) -> serde_json::Value {
        let mut c = self.clone();
        let strip = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                *path = path.file_name().map(PathBuf::from).unwrap_or_default();
            }
        };
        strip(&mut c.out_dir);
        strip(&mut c.registry);
        strip(&mut c.personas);
        strip(&mut c.provider.mock_fixtures);
        strip(&mut c.provider.cache_dir);
        strip(&mut c.sandbox.fixture_program);
        strip(&mut c.sandbox.harness);
        for p in c.sandbox.programs.values_mut() {
            *p = p.file_name().map(PathBuf::from).unwrap_or_default();
        }
        serde_json::to_value(&c).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::parse(
            "query = \"book covers\"\ncount = 5\n[sandbox]\ntimeout_secs = 2.5\n[models.instruction]\nprovider = \"openai\"\nmodel = \"gpt-4o\"\ntemperature = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.count, 5);
        assert_eq!(c.sandbox.timeout_secs, 2.5);
        assert_eq!(c.models.instruction.model, "gpt-4o");
        assert_eq!(c.models.instruction.top_p, 1.0);
        assert_eq!(c.workers, 4);
        assert_eq!(c.query().unwrap().text, "book covers");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::parse("category = \"posters\"").is_err());
        assert!(RunConfig::parse("colour = 1").is_err());
        let mut c = RunConfig::default();
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.models.code.provider = "mock".into();
        assert!(c.validate().is_err());
        c.use_mock_provider();
        c.validate().unwrap();
        let mut c = RunConfig::default();
        c.registry = Some("/nonexistent/registry.toml".into());
        assert!(c.validate().is_err());
        assert!(RunConfig::default().query().is_err());
    }

    #[test]
    fn meta_has_no_absolute_paths() {
        let mut c = RunConfig::default();
        c.sandbox.fixture_program = Some("/usr/local/bin/codesynth".into());
        let meta = c.effective_meta().to_string();
        assert!(!meta.contains("/usr/local"));
        assert!(meta.contains("codesynth"));
    }
}
