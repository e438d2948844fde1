//! Blocking client for OpenAI-compatible chat-completions endpoints.

use std::time::Duration;

use reclaim::weak_labeler::{ClientError, LlmClient, LlmSettings};
use serde_json::{json, Value};

pub struct ChatClient {
    http: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: String,
    temperature: f64,
}

impl ChatClient {
    /// Reads the key from the environment variable named in `settings`.
    pub fn from_env(settings: &LlmSettings) -> Result<Self, String> {
        let api_key = std::env::var(&settings.api_key_env).map_err(|_| {
            format!(
                "environment variable {} is not set; export the API key there or pass --mock-llm",
                settings.api_key_env
            )
        })?;
        Self::new(settings, api_key)
    }

    pub fn new(settings: &LlmSettings, api_key: String) -> Result<Self, String> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            http,
            url: format!(
                "{}/chat/completions",
                settings.base_url.trim_end_matches('/')
            ),
            model: settings.model.clone(),
            api_key,
            temperature: settings.temperature,
        })
    }
}

fn classify_status(status: u16, body: &str) -> ClientError {
    let detail = format!(
        "HTTP {status}: {}",
        body.chars().take(200).collect::<String>()
    );
    match status {
        401 | 403 => ClientError::Auth(detail),
        408 | 429 | 500..=599 => ClientError::Network(detail),
        _ => ClientError::Request(detail),
    }
}

fn message_content(body: &Value) -> Option<String> {
    body.get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

impl LlmClient for ChatClient {
    fn model_identifier(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let payload = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        });
        let response = self
            .http
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&payload)
            .send()
            .map_err(|e| ClientError::Network(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| ClientError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| ClientError::Request(format!("invalid JSON reply: {e}")))?;
        message_content(&body)
            .ok_or_else(|| ClientError::Request("reply has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) replies in order and records requests.
    fn serve(replies: Vec<(u16, &'static str)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut payload = vec![0; length];
                reader.read_exact(&mut payload).unwrap();
                seen.push(head + &String::from_utf8(payload).unwrap());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn client(base_url: String) -> ChatClient {
        let settings = LlmSettings {
            base_url,
            model: "test-model".into(),
            timeout_secs: 5,
            ..Default::default()
        };
        ChatClient::new(&settings, "sk-test".into()).unwrap()
    }

    #[test]
    fn sends_chat_request_and_reads_content() {
        let (url, server) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"1"}}]}"#,
        )]);
        assert_eq!(client(url).complete("prompt text").unwrap(), "1");
        let request = server.join().unwrap().remove(0);
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request
            .to_ascii_lowercase()
            .contains("authorization: bearer sk-test"));
        let body: Value = serde_json::from_str(request.split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["content"], "prompt text");
    }

    #[test]
    fn statuses_map_to_error_kinds() {
        let (url, server) = serve(vec![
            (401, "{}"),
            (429, "{}"),
            (503, "{}"),
            (400, "{}"),
            (200, "{\"choices\":[]}"),
        ]);
        let c = client(url);
        assert!(matches!(c.complete("x"), Err(ClientError::Auth(_))));
        assert!(matches!(c.complete("x"), Err(ClientError::Network(_))));
        assert!(matches!(c.complete("x"), Err(ClientError::Network(_))));
        assert!(matches!(c.complete("x"), Err(ClientError::Request(_))));
        assert!(matches!(c.complete("x"), Err(ClientError::Request(_))));
        server.join().unwrap();
    }

    #[test]
    fn unreachable_host_is_a_network_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        drop(listener);
        assert!(matches!(
            client(url).complete("x"),
            Err(ClientError::Network(_))
        ));
    }

    #[test]
    fn missing_key_variable_is_explained() {
        let settings = LlmSettings {
            api_key_env: "RECLAIM_TEST_SURELY_UNSET".into(),
            ..Default::default()
        };
        let err = ChatClient::from_env(&settings).err().unwrap();
        assert!(err.contains("RECLAIM_TEST_SURELY_UNSET"));
    }
}
