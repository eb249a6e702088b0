use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatBackend, EmbedBackend, EmbeddingVector, GatewayError, GenerationRequest, RetryPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub endpoint_url: String,
    pub model_name: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

/// HTTP backend speaking the chat-completions protocol.
pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint_url.trim_end_matches('/'))
    }

    /// Retries transport failures, 429 and 5xx; other statuses fail at once.
    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.url(path);
        self.config.retry.run(|| {
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.config.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req.send_json(body).map_err(|e| Ok(e.to_string()))?;
            let status = resp.status().as_u16();
            if status == 429 || status >= 500 {
                return Err(Ok(format!("HTTP {status}")));
            }
            if status >= 400 {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(Err(GatewayError::Protocol(format!("HTTP {status}: {text}"))));
            }
            resp.body_mut().read_json::<Value>().map_err(|e| Err(GatewayError::Protocol(e.to_string())))
        })
    }
}

pub(crate) fn chat_body(model: &str, request: &GenerationRequest) -> Value {
    let mut body = json!({
        "model": model,
        "messages": request
            .messages
            .iter()
            .map(|m| json!({ "role": m.role, "content": m.content }))
            .collect::<Vec<_>>(),
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    body
}

pub(crate) fn parse_chat_response(v: &Value) -> Result<String, GatewayError> {
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".into()))
}

pub(crate) fn parse_embedding_response(v: &Value) -> Result<Vec<EmbeddingVector>, GatewayError> {
    let data = v["data"].as_array().ok_or_else(|| GatewayError::Protocol("missing data[]".into()))?;
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
    for (i, item) in data.iter().enumerate() {
        let index = item["index"].as_u64().unwrap_or(i as u64);
        let values = item["embedding"]
            .as_array()
            .ok_or_else(|| GatewayError::Protocol(format!("data[{i}].embedding missing")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| GatewayError::Protocol("non-numeric embedding".into())))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((index, values));
    }
    rows.sort_by_key(|(i, _)| *i);
    rows.into_iter().map(|(_, v)| EmbeddingVector::new(v)).collect()
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        let v = self.post("chat/completions", &chat_body(&self.config.model_name, request))?;
        parse_chat_response(&v)
    }
}

impl EmbedBackend for LiveBackend {
    fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let body = json!({ "model": self.config.embedding_model, "input": texts });
        parse_embedding_response(&self.post("embeddings", &body)?)
    }
}
