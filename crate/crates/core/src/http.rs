//! Blocking JSON-over-HTTP client with bounded retries, shared by the
//! remote embedding, cross-encoder and chat-completion providers.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct HttpClient {
    agent: ureq::Agent,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl HttpClient {
    pub fn new(timeout: Duration, max_retries: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpClient {
            agent,
            max_retries,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    /// POSTs `body` as JSON and decodes the JSON response.
    ///
    /// Transport failures, 429 and 5xx responses are retried up to
    /// `max_retries` extra times with linear backoff; any other non-2xx
    /// status fails immediately. The error records how many attempts ran.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        token: Option<&str>,
        body: &B,
    ) -> Result<R> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut req = self
                .agent
                .post(url)
                .header("Content-Type", "application/json");
            if let Some(tok) = token {
                req = req.header("Authorization", format!("Bearer {tok}"));
            }
            let (retryable, message) = match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp
                            .body_mut()
                            .read_json::<R>()
                            .map_err(|e| Error::Transport {
                                attempts,
                                message: format!("malformed response body: {e}"),
                            });
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    (
                        status == 429 || status >= 500,
                        format!("http status {status}: {text}"),
                    )
                }
                Err(e) => (true, e.to_string()),
            };
            if !retryable || attempts > self.max_retries {
                return Err(Error::Transport { attempts, message });
            }
            log::warn!("POST {url} failed (attempt {attempts}): {message}");
            std::thread::sleep(self.backoff * attempts);
        }
    }
}

/// Reads a bearer token from the environment, treating empty as absent.
pub fn token_from_env(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|s| !s.is_empty())
}
