//! HTTP clients: one for the embedding service, one that plugs an external
//! text generator into corpus synthesis.

use std::time::Duration;

use qanchor::api::{EmbedRequest, EmbedResponse, ErrorBody, PrefixResponse, ProfileRequest, RefreshRequest, Stats};
use qanchor::hier::EventRecord;
use qanchor::synth::{AnswerGenerator, GenRequest, UserProfile};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error body.
    #[error("{status}: {} ({})", body.message, body.code)]
    Api { status: u16, body: ErrorBody },

    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn is_cache_miss(&self) -> bool {
        matches!(self, ClientError::Api { body, .. } if body.code == "cache_miss")
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.code),
            ClientError::Transport(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            code: "http".into(),
            message: text,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            body,
        })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Self::decode(resp).await
    }

    /// Uploads a profile and builds its prefix; returns `L_p`.
    pub async fn put_profile(&self, profile: &UserProfile) -> Result<usize> {
        let req = ProfileRequest {
            user_id: profile.user_id.clone(),
            profile: profile.clone(),
        };
        let r: PrefixResponse = self.post("/v1/profile", &req).await?;
        Ok(r.l_p)
    }

    pub async fn embed(&self, user_id: &str, query: &str, scenario: Option<&str>) -> Result<EmbedResponse> {
        let req = EmbedRequest {
            user_id: user_id.into(),
            query: query.into(),
            scenario: scenario.map(str::to_string),
        };
        self.post("/v1/embed", &req).await
    }

    pub async fn refresh(&self, user_id: &str, events: &[EventRecord]) -> Result<usize> {
        let req = RefreshRequest {
            user_id: user_id.into(),
            events: events.to_vec(),
        };
        let r: PrefixResponse = self.post("/v1/refresh", &req).await?;
        Ok(r.l_p)
    }

    pub async fn stats(&self) -> Result<Stats> {
        let resp = self.http.get(format!("{}/v1/stats", self.base)).send().await?;
        Self::decode(resp).await
    }
}

#[derive(Serialize)]
struct GenBody<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenReply {
    text: String,
}

/// Answer generator backed by an HTTP service taking `{"prompt"}` and
/// returning `{"text"}`. Blocking; call it outside async contexts.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    url: String,
    retries: u32,
    http: reqwest::blocking::Client,
}

impl HttpGenerator {
    pub fn new(url: &str, timeout: Duration, retries: u32) -> qanchor::Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| qanchor::Error::Generator(e.to_string()))?;
        Ok(Self {
            url: url.to_string(),
            retries,
            http,
        })
    }

    fn once(&self, prompt: &str) -> std::result::Result<String, String> {
        let resp = self
            .http
            .post(&self.url)
            .json(&GenBody { prompt })
            .send()
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("status {}", resp.status()));
        }
        resp.json::<GenReply>().map(|r| r.text).map_err(|e| e.to_string())
    }
}

impl AnswerGenerator for HttpGenerator {
    fn generate(&self, req: &GenRequest<'_>) -> qanchor::Result<String> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.once(&req.prompt) {
                Ok(t) => return Ok(t),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, user = req.user_id, "generator call failed");
                    last = e;
                }
            }
        }
        Err(qanchor::Error::Generator(format!(
            "{} failed after {} attempts: {last}",
            self.url,
            self.retries + 1
        )))
    }
}
