use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    AttemptError, ChatBackend, ChatReply, ChatRequest, EmbeddingBackend, EmbeddingRequest,
    Embeddings, Granularity,
};
use crate::metrics::tokenize;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// e.g. `http://localhost:30000/v1`; `/chat/completions` and
    /// `/embeddings` are appended.
    pub base_url: String,
    /// Name of the environment variable holding the API key. An unset
    /// variable sends no `Authorization` header.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_timeout() -> u64 {
    300
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
        }
    }
}

/// Client for servers speaking the OpenAI-compatible chat and embedding wire
/// shape (vLLM, sglang, hosted gateways).
pub struct OpenAiCompatClient {
    http: Client,
    base_url: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl OpenAiCompatClient {
    pub fn new(config: &OpenAiConfig) -> Result<Self, reqwest::Error> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let http = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()?;
        Ok(Self {
            http,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key,
        })
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, AttemptError> {
        let mut req = self
            .http
            .post(format!("{}{}", self.base_url, path))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify_transport)?;
        let status = resp.status();
        let text = resp.text().map_err(classify_transport)?;
        if status.is_success() {
            Ok(text)
        } else if is_retryable(status) {
            Err(AttemptError::Transient(format!(
                "HTTP {status}: {}",
                truncate(&text)
            )))
        } else {
            Err(AttemptError::Permanent(format!(
                "HTTP {status}: {}",
                truncate(&text)
            )))
        }
    }

    fn embed_texts(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>, AttemptError> {
        let raw = self.post("/embeddings", &json!({ "model": model, "input": inputs }))?;
        let mut body: EmbeddingBody = serde_json::from_str(&raw)
            .map_err(|e| AttemptError::Permanent(format!("malformed embedding response: {e}")))?;
        if body.data.len() != inputs.len() {
            return Err(AttemptError::Permanent(format!(
                "expected {} embeddings, got {}",
                inputs.len(),
                body.data.len()
            )));
        }
        body.data.sort_by_key(|d| d.index.unwrap_or(0));
        Ok(body.data.into_iter().map(|d| d.embedding).collect())
    }
}

fn is_retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
}

fn classify_transport(e: reqwest::Error) -> AttemptError {
    if e.is_timeout() || e.is_connect() || e.is_request() || e.is_body() {
        AttemptError::Transient(e.to_string())
    } else {
        AttemptError::Permanent(e.to_string())
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl ChatBackend for OpenAiCompatClient {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, AttemptError> {
        let body = json!({
            "model": request.model_id,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        let raw = self.post("/chat/completions", &body)?;
        let parsed: ChatBody = serde_json::from_str(&raw)
            .map_err(|e| AttemptError::Permanent(format!("malformed chat response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| AttemptError::Permanent("chat response has no choices".into()))?;
        let usage = parsed.usage.unwrap_or(Usage {
            prompt_tokens: None,
            completion_tokens: None,
        });
        Ok(ChatReply {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }
}

impl EmbeddingBackend for OpenAiCompatClient {
    fn embed_once(&self, request: &EmbeddingRequest) -> Result<Embeddings, AttemptError> {
        match request.granularity {
            Granularity::Sentence => Ok(self
                .embed_texts(&request.model_id, &request.inputs)?
                .into_iter()
                .map(|v| vec![v])
                .collect()),
            // The wire format only returns pooled vectors, so token vectors
            // are obtained by embedding each token on its own.
            Granularity::Token => {
                let per_input: Vec<Vec<String>> =
                    request.inputs.iter().map(|t| tokenize(t).tokens).collect();
                let flat: Vec<String> = per_input.iter().flatten().cloned().collect();
                let mut vectors = if flat.is_empty() {
                    Vec::new()
                } else {
                    self.embed_texts(&request.model_id, &flat)?
                }
                .into_iter();
                Ok(per_input
                    .iter()
                    .map(|toks| vectors.by_ref().take(toks.len()).collect())
                    .collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{chat_complete, BackendError, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned `(status, body)` per connection and reports each
    /// request body it received.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((request_line, String::from_utf8(buf).unwrap()))
                    .unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn client(base: &str) -> OpenAiCompatClient {
        let mut cfg = OpenAiConfig::new(base);
        cfg.api_key_env = "PERSONA_REFINERY_TEST_UNSET_KEY".into();
        cfg.timeout_secs = 10;
        OpenAiCompatClient::new(&cfg).unwrap()
    }

    fn fast(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 1,
            max_delay_ms: 2,
        }
    }

    const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"pong"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;

    #[test]
    fn chat_wire_shape() {
        let (base, rx) = serve(vec![(200, OK_BODY.into())]);
        let resp =
            chat_complete(&client(&base), &ChatRequest::new("m1", "ping"), &fast(1)).unwrap();
        assert_eq!(resp.text, "pong");
        assert_eq!(resp.prompt_tokens, Some(3));
        let (line, body) = rx.recv().unwrap();
        assert!(line.starts_with("POST /v1/chat/completions "));
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "m1");
        assert_eq!(v["messages"], json!([{"role": "user", "content": "ping"}]));
        assert_eq!(v["temperature"], 0.6);
        assert_eq!(v["top_p"], 0.95);
        assert_eq!(v["max_tokens"], 2000);
    }

    #[test]
    fn retries_429_and_5xx() {
        let (base, _rx) = serve(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (200, OK_BODY.into()),
        ]);
        let resp = chat_complete(&client(&base), &ChatRequest::new("m", "ping"), &fast(5)).unwrap();
        assert_eq!(resp.attempts_used, 3);
    }

    #[test]
    fn auth_failure_is_permanent() {
        let (base, _rx) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
        let err =
            chat_complete(&client(&base), &ChatRequest::new("m", "ping"), &fast(5)).unwrap_err();
        assert!(matches!(err, BackendError::PermanentBackendError(_)));
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let c = client(&format!("http://127.0.0.1:{port}/v1"));
        let err = chat_complete(&c, &ChatRequest::new("m", "ping"), &fast(2)).unwrap_err();
        assert!(matches!(
            err,
            BackendError::RetriesExhausted { attempts: 2, .. }
        ));
    }

    #[test]
    fn embeddings_wire_shape_and_token_regrouping() {
        let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]},{"index":2,"embedding":[1.0,1.0]}]}"#;
        let (base, rx) = serve(vec![(200, body.into())]);
        let req = EmbeddingRequest {
            model_id: "e".into(),
            inputs: vec!["Hello, world!".into(), "...".into(), "cat".into()],
            granularity: Granularity::Token,
        };
        let out = client(&base).embed_once(&req).unwrap();
        assert_eq!(
            out,
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![],
                vec![vec![1.0, 1.0]]
            ]
        );
        let (line, sent) = rx.recv().unwrap();
        assert!(line.starts_with("POST /v1/embeddings "));
        let v: serde_json::Value = serde_json::from_str(&sent).unwrap();
        assert_eq!(v, json!({"model": "e", "input": ["hello", "world", "cat"]}));
    }
}
