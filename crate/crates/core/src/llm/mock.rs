//! Scripted providers for hermetic runs.
//!
//! [`MockProvider`] answers from stage-tagged fixture files (`topic.txt`,
//! `data.txt`, `code.txt`, `instruction.txt`, `point_edit.txt`). A file may
//! hold several variants separated by a line of exactly `=====`; the variant
//! is chosen by `seed % variants`. Fixture text supports these expansions:
//!
//! | marker            | expands to                                               |
//! |-------------------|----------------------------------------------------------|
//! | `{{SEED}}`        | the request's sampling seed                              |
//! | `{{SEED%N}}`      | `seed % N`                                               |
//! | `{{SEED%N+M}}`    | `seed % N + M`                                           |
//! | `{{FENCE}}`       | first code-fence tag mentioned in the prompt (else `text`) |
//! | `{{PROMPT_CODE}}` | text between `<code>` and `</code>` in the prompt        |
//! | `{{MARKER_HEX}}`  | first `#rrggbb` after "marker color" in the prompt       |

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use regex::Regex;

use super::{LlmProvider, LlmRequest, ProviderError, Stage};

const VARIANT_SEPARATOR: &str = "=====";

fn file_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Topic => "topic.txt",
        Stage::Data => "data.txt",
        Stage::Code => "code.txt",
        Stage::Instruction => "instruction.txt",
        Stage::PointEdit => "point_edit.txt",
    }
}

fn split_variants(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for line in text.lines() {
        if line.trim_end() == VARIANT_SEPARATOR {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push_str(line);
            cur.push('\n');
        }
    }
    out.push(cur);
    out.into_iter()
        .map(|v| v.trim_end_matches('\n').to_string())
        .collect()
}

#[derive(Debug, Default)]
pub struct MockProvider {
    fixtures: HashMap<Stage, Vec<String>>,
    calls: AtomicU64,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixtures bundled with the crate.
    pub fn builtin() -> Self {
        let mut p = Self::new();
        for stage in Stage::ALL {
            if let Some(text) = crate::assets::file(&format!("mock/{}", file_name(stage))) {
                p = p.with_fixture(stage, text);
            }
        }
        p
    }

    /// Loads whichever stage files exist in `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut p = Self::new();
        for stage in Stage::ALL {
            let path = dir.as_ref().join(file_name(stage));
            if path.exists() {
                p = p.with_fixture(stage, &std::fs::read_to_string(path)?);
            }
        }
        Ok(p)
    }

    pub fn with_fixture(mut self, stage: Stage, text: &str) -> Self {
        self.fixtures.insert(stage, split_variants(text));
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

fn fence_tag(prompt: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"```([A-Za-z0-9_+\-]+)").expect("valid regex"));
    re.captures(prompt)
        .and_then(|c| c.get(1))
        .map_or("text", |m| m.as_str())
}

fn prompt_code(prompt: &str) -> &str {
    let Some(start) = prompt.find("<code>") else {
        return "";
    };
    let rest = &prompt[start + "<code>".len()..];
    let end = rest.find("</code>").unwrap_or(rest.len());
    rest[..end].trim_matches('\n')
}

fn marker_hex(prompt: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE
        .get_or_init(|| Regex::new(r"(?is)marker colou?r.*?(#[0-9a-f]{6})").expect("valid regex"));
    re.captures(prompt)
        .and_then(|c| c.get(1))
        .map_or("#ff00ff", |m| m.as_str())
}

/// Applies the fixture expansions listed in the module docs.
pub fn expand_fixture(fixture: &str, request: &LlmRequest) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"\{\{(SEED(?:%(\d+)(?:\+(\d+))?)?|FENCE|PROMPT_CODE|MARKER_HEX)\}\}")
            .expect("valid regex")
    });
    re.replace_all(fixture, |c: &regex::Captures<'_>| {
        let seed = request.seed;
        match &c[1] {
            "FENCE" => fence_tag(&request.prompt).to_string(),
            "PROMPT_CODE" => prompt_code(&request.prompt).to_string(),
            "MARKER_HEX" => marker_hex(&request.prompt).to_string(),
            _ => {
                let modulus = c.get(2).and_then(|m| m.as_str().parse::<u64>().ok());
                let offset = c
                    .get(3)
                    .and_then(|m| m.as_str().parse::<u64>().ok())
                    .unwrap_or(0);
                match modulus {
                    Some(n) if n > 0 => (seed % n + offset).to_string(),
                    _ => seed.to_string(),
                }
            }
        }
    })
    .into_owned()
}

impl LlmProvider for MockProvider {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let variants = self.fixtures.get(&request.stage).ok_or_else(|| {
            ProviderError::Fatal(format!("no mock fixture for stage {}", request.stage))
        })?;
        let v = &variants[(request.seed % variants.len() as u64) as usize];
        Ok(expand_fixture(v, request))
    }
}

type ScriptFn = dyn Fn(&LlmRequest, u64) -> Result<String, ProviderError> + Send + Sync;

/// Provider backed by a closure receiving the request and the 0-based call
/// index; used to script faults and bespoke responses in tests.
pub struct FnProvider {
    script: Box<ScriptFn>,
    calls: AtomicU64,
}

impl FnProvider {
    pub fn new(
        script: impl Fn(&LlmRequest, u64) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Box::new(script),
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl std::fmt::Debug for FnProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnProvider")
            .field("calls", &self.calls())
            .finish()
    }
}

impl LlmProvider for FnProvider {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed);
        (self.script)(request, n)
    }
}
