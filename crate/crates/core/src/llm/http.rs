//! HTTP providers. Credentials are read from environment variables only.

use std::time::Duration;

use serde_json::{json, Value};

use super::{LlmProvider, LlmRequest, ProviderError};

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

fn map_ureq_error(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            let msg = format!(
                "HTTP {code}: {}",
                body.chars().take(500).collect::<String>()
            );
            match code {
                429 => ProviderError::RateLimited(msg),
                401 | 403 => ProviderError::Unavailable(msg),
                c if c >= 500 => ProviderError::Transient(msg),
                _ => ProviderError::Fatal(msg),
            }
        }
        ureq::Error::Transport(t) => ProviderError::Transient(t.to_string()),
    }
}

fn api_key(env_var: &str) -> Result<String, ProviderError> {
    std::env::var(env_var)
        .ok()
        .filter(|k| !k.trim().is_empty())
        .ok_or_else(|| {
            ProviderError::Unavailable(format!("environment variable {env_var} is not set"))
        })
}

/// OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiProvider {
    base_url: String,
    key_env: String,
    agent: ureq::Agent,
}

impl OpenAiProvider {
    pub fn new(base_url: impl Into<String>, key_env: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            key_env: key_env.into(),
            agent: ureq::AgentBuilder::new().timeout(DEFAULT_TIMEOUT).build(),
        }
    }

    pub fn request_body(request: &LlmRequest) -> Value {
        json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "seed": request.seed,
        })
    }

    pub fn response_text(body: &Value) -> Result<String, ProviderError> {
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                ProviderError::Fatal("response has no choices[0].message.content".into())
            })
    }
}

impl LlmProvider for OpenAiProvider {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let key = api_key(&self.key_env)?;
        let resp = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(Self::request_body(request))
            .map_err(map_ureq_error)?;
        let body: Value = resp
            .into_json()
            .map_err(|e| ProviderError::Transient(format!("bad response body: {e}")))?;
        Self::response_text(&body)
    }
}

/// Anthropic `/v1/messages` endpoint. The API has no sampling seed; the seed
/// still participates in the cache key.
#[derive(Debug, Clone)]
pub struct AnthropicProvider {
    base_url: String,
    key_env: String,
    max_tokens: u32,
    agent: ureq::Agent,
}

impl AnthropicProvider {
    pub fn new(base_url: impl Into<String>, key_env: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            key_env: key_env.into(),
            max_tokens: 8192,
            agent: ureq::AgentBuilder::new().timeout(DEFAULT_TIMEOUT).build(),
        }
    }

    pub fn request_body(&self, request: &LlmRequest) -> Value {
        json!({
            "model": request.model,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature.min(1.0),
            "top_p": request.top_p,
        })
    }

    pub fn response_text(body: &Value) -> Result<String, ProviderError> {
        let blocks = body
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Fatal("response has no content array".into()))?;
        Ok(blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""))
    }
}

impl LlmProvider for AnthropicProvider {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let key = api_key(&self.key_env)?;
        let resp = self
            .agent
            .post(&format!("{}/v1/messages", self.base_url))
            .set("x-api-key", &key)
            .set("anthropic-version", "2023-06-01")
            .send_json(self.request_body(request))
            .map_err(map_ureq_error)?;
        let body: Value = resp
            .into_json()
            .map_err(|e| ProviderError::Transient(format!("bad response body: {e}")))?;
        Self::response_text(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Stage;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req() -> LlmRequest {
        LlmRequest {
            provider: "openai".into(),
            model: "gpt-4o-mini".into(),
            prompt: "hi".into(),
            temperature: 0.3,
            top_p: 1.0,
            seed: 9,
            stage: Stage::Instruction,
        }
    }

    /// Serves one canned HTTP response and returns the request body it saw.
    fn serve_once(status: &str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let status = status.to_string();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            String::from_utf8(buf).unwrap()
        });
        (addr, handle)
    }

    #[test]
    fn openai_round_trip() {
        std::env::set_var("CODESYNTH_TEST_OPENAI_KEY", "k");
        let (addr, h) = serve_once("200 OK", r#"{"choices":[{"message":{"content":"a | b"}}]}"#);
        let p = OpenAiProvider::new(addr, "CODESYNTH_TEST_OPENAI_KEY");
        assert_eq!(p.complete(&req()).unwrap(), "a | b");
        let sent: Value = serde_json::from_str(&h.join().unwrap()).unwrap();
        assert_eq!(sent["model"], "gpt-4o-mini");
        assert_eq!(sent["seed"], 9);
        assert_eq!(sent["messages"][0]["content"], "hi");
    }

    #[test]
    fn status_codes_map_to_error_kinds() {
        std::env::set_var("CODESYNTH_TEST_OPENAI_KEY2", "k");
        let (addr, h) = serve_once("429 Too Many Requests", "{}");
        let p = OpenAiProvider::new(addr, "CODESYNTH_TEST_OPENAI_KEY2");
        assert!(matches!(
            p.complete(&req()),
            Err(ProviderError::RateLimited(_))
        ));
        h.join().unwrap();
        let (addr, h) = serve_once("503 Service Unavailable", "{}");
        let p = OpenAiProvider::new(addr, "CODESYNTH_TEST_OPENAI_KEY2");
        assert!(matches!(
            p.complete(&req()),
            Err(ProviderError::Transient(_))
        ));
        h.join().unwrap();
    }

    #[test]
    fn missing_key_is_unavailable() {
        let p = OpenAiProvider::new("http://127.0.0.1:1", "CODESYNTH_TEST_UNSET_KEY");
        assert!(matches!(
            p.complete(&req()),
            Err(ProviderError::Unavailable(_))
        ));
    }

    #[test]
    fn anthropic_response_concatenates_text_blocks() {
        let body = serde_json::json!({"content": [{"type": "text", "text": "a"}, {"type": "tool_use"}, {"type": "text", "text": "b"}]});
        assert_eq!(AnthropicProvider::response_text(&body).unwrap(), "ab");
        let p = AnthropicProvider::new("http://x", "K");
        assert_eq!(p.request_body(&req())["max_tokens"], 8192);
    }
}
