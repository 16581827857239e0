//! Typed wrapper over the generation service's JSON API.

use layout_mcl_core::api::{CategoriesResponse, ErrorBody, GenerateRequest, GenerateResponse, HealthResponse};
use reqwest::{Response, StatusCode};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {}{}", body.error, body.field.as_deref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Api { status: StatusCode, body: ErrorBody },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn decode<T: serde::de::DeserializeOwned>(res: Response) -> Result<T> {
        let status = res.status();
        if status.is_success() {
            return Ok(res.json().await?);
        }
        let text = res.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: text,
            field: None,
        });
        Err(ClientError::Api { status, body })
    }

    pub async fn categories(&self) -> Result<Vec<String>> {
        let r: CategoriesResponse = Self::decode(self.http.get(self.url("/api/categories")).send().await?).await?;
        Ok(r.categories)
    }

    pub async fn health(&self) -> Result<HealthResponse> {
        Self::decode(self.http.get(self.url("/api/health")).send().await?).await
    }

    pub async fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse> {
        Self::decode(self.http.post(self.url("/api/generate")).json(request).send().await?).await
    }
}
