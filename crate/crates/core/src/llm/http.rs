use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendConfig, ChatBackend, ChatMessage, CompletionRequest, LlmError, Secret};

/// OpenAI-style `chat/completions` endpoint.
pub struct HttpBackend {
    endpoint: String,
    token: Secret,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpBackend { endpoint: config.endpoint_url.clone(), token: config.resolved_token(), client })
    }

    pub(crate) fn body(request: &CompletionRequest) -> serde_json::Value {
        serde_json::to_value(WireRequest {
            model: &request.model_name,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
            seed: request.seed,
        })
        .expect("request serializes")
    }
}

fn map_transport(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let mut builder = self.client.post(&self.endpoint).json(&Self::body(request));
        if !self.token.is_empty() {
            builder = builder.bearer_auth(self.token.expose());
        }
        let resp = builder.send().map_err(map_transport)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(LlmError::AuthFailed),
            408 => return Err(LlmError::Timeout),
            429 => return Err(LlmError::RateLimited),
            500..=599 => return Err(LlmError::Server(status)),
            other => {
                let text = resp.text().unwrap_or_default();
                return Err(LlmError::MalformedResponse(format!("status {other}: {text}")));
            }
        }
        let text = resp.text().map_err(map_transport)?;
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message.content".into()))
    }

    fn name(&self) -> &str {
        "http"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmClient, RetryPolicy};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves the canned (status, body) pairs in order, one per connection,
    /// recording each request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_owned();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(format!("{auth}\n{}", String::from_utf8(buf).unwrap()));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (url, seen, handle)
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn config(url: &str) -> BackendConfig {
        BackendConfig {
            endpoint_url: url.to_owned(),
            auth_token: Secret::new("tok"),
            timeout_ms: 5_000,
            ..BackendConfig::default()
        }
    }

    #[test]
    fn wire_body_shape() {
        let r = CompletionRequest::new("qwen", vec![ChatMessage::system("s"), ChatMessage::user("u")])
            .temperature(1.0)
            .seed(4)
            .scenario("hidden");
        let body = HttpBackend::body(&r);
        assert_eq!(body["model"], "qwen");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["max_tokens"], 16384);
        assert_eq!(body["seed"], 4);
        assert!(body.get("scenario").is_none());
    }

    #[test]
    fn http_429_twice_then_success() {
        let (url, seen, handle) = serve(vec![(429, "{}".into()), (429, "{}".into()), (200, ok_body("ranked"))]);
        let backend = Arc::new(HttpBackend::new(&config(&url)).unwrap());
        let client = LlmClient::new(backend, RetryPolicy::immediate(3), 1);
        let r = CompletionRequest::new("m", vec![ChatMessage::user("q")]);
        assert_eq!(client.complete(&r).unwrap(), "ranked");
        handle.join().unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen[0].starts_with("authorization: Bearer tok") || seen[0].starts_with("Authorization: Bearer tok"));
    }

    #[test]
    fn http_error_taxonomy() {
        let (url, _, handle) = serve(vec![
            (401, "{}".into()),
            (200, "{\"choices\": []}".into()),
            (200, "not json".into()),
            (503, "{}".into()),
        ]);
        let backend = HttpBackend::new(&config(&url)).unwrap();
        let r = CompletionRequest::new("m", vec![ChatMessage::user("q")]);
        assert_eq!(backend.send(&r).unwrap_err(), LlmError::AuthFailed);
        assert!(matches!(backend.send(&r).unwrap_err(), LlmError::MalformedResponse(_)));
        assert!(matches!(backend.send(&r).unwrap_err(), LlmError::MalformedResponse(_)));
        assert_eq!(backend.send(&r).unwrap_err(), LlmError::Server(503));
        handle.join().unwrap();
    }

    #[test]
    fn http_timeout_is_classified() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            std::thread::sleep(Duration::from_millis(600));
            drop(stream);
        });
        let cfg = BackendConfig { timeout_ms: 150, ..config(&url) };
        let backend = HttpBackend::new(&cfg).unwrap();
        let r = CompletionRequest::new("m", vec![ChatMessage::user("q")]);
        assert_eq!(backend.send(&r).unwrap_err(), LlmError::Timeout);
        handle.join().unwrap();
    }
}
