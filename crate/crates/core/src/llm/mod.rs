//! Provider-agnostic LLM access.
//!
//! Prompts are rendered from [`PromptTemplate`]s, dispatched through the
//! [`Gateway`] (which consults a content-addressed [`ResponseCache`] first and
//! retries transient provider errors with exponential backoff), and the
//! completions are parsed by the strict per-stage parsers in [`parse`].

pub mod cache;
pub mod gateway;
pub mod http;
pub mod mock;
pub mod parse;
pub mod template;

use serde::{Deserialize, Serialize};

pub use cache::{CacheKey, ResponseCache};
pub use gateway::{Gateway, GatewayError, GatewayStats, LlmProvider, ProviderError, RetryPolicy};
pub use mock::{FnProvider, MockProvider};
pub use parse::{DataContent, FencedCode, ParseError, QaParse};
pub use template::{Bindings, Placeholder, PromptTemplate, TemplateError};

/// Generation stage a prompt belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Topic,
    Data,
    Code,
    Instruction,
    PointEdit,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Topic,
        Stage::Data,
        Stage::Code,
        Stage::Instruction,
        Stage::PointEdit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Topic => "topic",
            Stage::Data => "data",
            Stage::Code => "code",
            Stage::Instruction => "instruction",
            Stage::PointEdit => "point-edit",
        }
    }

    /// Per-stage salt mixed into sampling seeds.
    pub fn salt(self) -> u64 {
        match self {
            Stage::Topic => 1,
            Stage::Data => 2,
            Stage::Code => 3,
            Stage::Instruction => 4,
            Stage::PointEdit => 5,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s || (s == "point_edit" && *st == Stage::PointEdit))
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub provider: String,
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub stage: Stage,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.prompt.is_empty() {
            return Err("prompt is empty".into());
        }
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature {} is negative", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    /// Raw completion. May be empty if the provider returned nothing; the
    /// stage parsers reject that downstream.
    pub text: String,
    pub cached: bool,
    pub latency_ms: u64,
    /// Provider dispatch attempts (0 on a cache hit).
    pub attempts: u32,
}

/// Provider, model and sampling parameters used for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRoute {
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
}

fn default_top_p() -> f64 {
    1.0
}

impl ModelRoute {
    pub fn new(provider: impl Into<String>, model: impl Into<String>, temperature: f64) -> Self {
        Self {
            provider: provider.into(),
            model: model.into(),
            temperature,
            top_p: 1.0,
        }
    }

    pub fn request(&self, stage: Stage, prompt: String, seed: u64) -> LlmRequest {
        LlmRequest {
            provider: self.provider.clone(),
            model: self.model.clone(),
            prompt,
            temperature: self.temperature,
            top_p: self.top_p,
            seed,
            stage,
        }
    }
}

/// One completed stage call: the response and the hash of the exact prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCall {
    pub response: LlmResponse,
    pub prompt_hash: String,
}

impl Gateway {
    /// Renders `template` with `bindings` and completes it through `route`.
    pub fn call_template(
        &self,
        template: &PromptTemplate,
        bindings: &Bindings,
        route: &ModelRoute,
        seed: u64,
    ) -> Result<StageCall, crate::error::StageError> {
        let prompt = template.render(bindings)?;
        let prompt_hash = crate::seed::short_digest(prompt.as_bytes());
        let response = self.complete(&route.request(template.stage, prompt, seed))?;
        Ok(StageCall {
            response,
            prompt_hash,
        })
    }
}
