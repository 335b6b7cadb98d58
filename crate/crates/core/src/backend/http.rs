//! Blocking JSON client for servers speaking the `/v1/step` protocol.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::CONTENT_TYPE;

use super::wire::validate_response;
use super::{Backend, BackendError, BackendRequest, BackendResponse};

#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    client: Client,
    retries: u32,
    backoff: Duration,
}

enum Attempt {
    Done(Result<BackendResponse, BackendError>),
    Retry(BackendError),
}

impl HttpBackend {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

    /// `endpoint` is the server root, e.g. `http://localhost:8000`.
    pub fn new(
        endpoint: impl Into<String>,
        timeout: Duration,
        retries: u32,
    ) -> Result<Self, BackendError> {
        let endpoint = endpoint.into().trim_end_matches('/').to_string();
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self {
            endpoint,
            client,
            retries,
            backoff: Duration::from_millis(200),
        })
    }

    /// Base delay before the first retry; doubled on every further retry.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn url(&self) -> String {
        format!("{}/v1/step", self.endpoint)
    }

    fn attempt(&self, body: &str, attempts: u32) -> Attempt {
        let sent = self
            .client
            .post(self.url())
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send();
        let resp = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Attempt::Retry(BackendError::Timeout {
                    endpoint: self.url(),
                    attempts,
                })
            }
            Err(e) => {
                return Attempt::Retry(BackendError::Connection {
                    endpoint: self.url(),
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => {
                return Attempt::Retry(BackendError::Timeout {
                    endpoint: self.url(),
                    attempts,
                })
            }
            Err(e) => {
                return Attempt::Retry(BackendError::Connection {
                    endpoint: self.url(),
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        if !status.is_success() {
            let e = BackendError::Status {
                status: status.as_u16(),
                body: text,
            };
            return if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(e)
            } else {
                Attempt::Done(Err(e))
            };
        }
        Attempt::Done(
            validate_response(&text).map_err(|error| BackendError::Schema { error, body: text }),
        )
    }
}

impl Backend for HttpBackend {
    fn step(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body =
            serde_json::to_string(req).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, attempts) {
                Attempt::Done(result) => return result,
                Attempt::Retry(e) if attempts > self.retries => return Err(e),
                Attempt::Retry(e) => {
                    let delay = self.backoff * 2u32.saturating_pow(attempts - 1);
                    log::warn!("step request failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}
