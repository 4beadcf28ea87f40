//! Outbound HTTP restricted to an explicit set of local origins.
//!
//! Every request the crate makes (inference and embedding) goes through
//! [`LocalHttp`]. Requests to any origin outside the allowlist fail before a
//! socket is opened, redirects are never followed, and proxy environment
//! variables are ignored.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use url::{Origin, Url};

#[derive(Debug, Error)]
pub enum EgressError {
    #[error("outbound request to {0} refused: origin is not an allowed local backend")]
    Denied(String),
    #[error("invalid url {url:?}: {message}")]
    BadUrl { url: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allowlist {
    origins: Vec<Origin>,
}

impl Allowlist {
    pub fn new<'a>(urls: impl IntoIterator<Item = &'a Url>) -> Self {
        let mut origins: Vec<Origin> = Vec::new();
        for u in urls {
            let o = u.origin();
            if !origins.contains(&o) {
                origins.push(o);
            }
        }
        Self { origins }
    }

    pub fn permits(&self, url: &Url) -> bool {
        let o = url.origin();
        o.is_tuple() && self.origins.contains(&o)
    }

    /// Allowed origins serialized as `scheme://host:port`.
    pub fn origins(&self) -> Vec<String> {
        self.origins
            .iter()
            .map(|o| o.ascii_serialization())
            .collect()
    }
}

/// A request the client attempted, whether or not it was allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub url: String,
    pub allowed: bool,
}

#[derive(Clone)]
pub struct LocalHttp {
    client: reqwest::Client,
    allow: Arc<Allowlist>,
    attempts: Arc<Mutex<Vec<Attempt>>>,
}

impl std::fmt::Debug for LocalHttp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalHttp")
            .field("allow", &self.allow.origins())
            .finish()
    }
}

impl LocalHttp {
    pub fn new(allow: Allowlist) -> Self {
        let client = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .no_proxy()
            .connect_timeout(Duration::from_secs(5))
            .build()
            .expect("http client builds");
        Self {
            client,
            allow: Arc::new(allow),
            attempts: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn allowlist(&self) -> &Allowlist {
        &self.allow
    }

    /// Every outbound request attempted so far, in order.
    pub fn attempts(&self) -> Vec<Attempt> {
        self.attempts.lock().expect("attempt log").clone()
    }

    fn admit(&self, url: &Url) -> Result<(), EgressError> {
        let allowed = self.allow.permits(url);
        self.attempts.lock().expect("attempt log").push(Attempt {
            url: url.to_string(),
            allowed,
        });
        if allowed {
            Ok(())
        } else {
            Err(EgressError::Denied(url.to_string()))
        }
    }

    pub fn post_json<T: Serialize + ?Sized>(
        &self,
        url: &Url,
        body: &T,
        timeout: Duration,
    ) -> Result<reqwest::RequestBuilder, EgressError> {
        self.admit(url)?;
        let bytes = serde_json::to_vec(body).map_err(|e| EgressError::BadUrl {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        Ok(self
            .client
            .post(url.clone())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(bytes)
            .timeout(timeout))
    }

    pub fn get(
        &self,
        url: &Url,
        timeout: Duration,
    ) -> Result<reqwest::RequestBuilder, EgressError> {
        self.admit(url)?;
        Ok(self.client.get(url.clone()).timeout(timeout))
    }
}

pub fn parse_url(raw: &str) -> Result<Url, EgressError> {
    Url::parse(raw).map_err(|e| EgressError::BadUrl {
        url: raw.to_string(),
        message: e.to_string(),
    })
}

/// Joins `path` onto a base URL, keeping any path prefix the base carries.
pub fn join(base: &Url, path: &str) -> Url {
    let mut u = base.clone();
    let prefix = u.path().trim_end_matches('/').to_string();
    u.set_path(&format!("{prefix}/{}", path.trim_start_matches('/')));
    u
}
