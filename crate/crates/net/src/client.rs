//! Blocking HTTP clients implementing the core service traits.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;

use poa_core::ca::IssuanceRequest;
use poa_core::ct::{CtInclusion, Sct};
use poa_core::jose::{Jwks, JwksSource, SourceError};
use poa_core::keys::VerifyingKey;
use poa_core::ledger::{CosignRequest, Cosignature, LedgerEntry, SignedDigest, TimestampBracket};
use poa_core::merkle::{ConsistencyProof, Hash, InclusionProof};
use poa_core::service::{CtSubmitter, CtView, LedgerPublisher, LedgerView, Published, ServiceError, WitnessEndpoint};
use poa_core::verifier::TrustRoots;

use crate::wire::*;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    /// Connection refused, timeout and other transport failures.
    #[error("{url}: {message}")]
    Transport { url: String, message: String },
    /// The server answered with an error body.
    #[error("{message}")]
    Api { status: u16, code: String, message: String },
    #[error("{url}: undecodable response: {message}")]
    Decode { url: String, message: String },
}

impl ClientError {
    /// The server's error code, if it answered.
    pub fn code(&self) -> Option<&str> {
        match self {
            Self::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

impl From<ClientError> for ServiceError {
    fn from(e: ClientError) -> Self {
        match &e {
            ClientError::Transport { .. } => ServiceError::Unavailable(e.to_string()),
            ClientError::Api { code, status, .. } => match (code.as_str(), status) {
                ("not-found", _) | (_, 404) => ServiceError::NotFound(e.to_string()),
                ("unavailable", _) | (_, 503) => ServiceError::Unavailable(e.to_string()),
                _ => ServiceError::Rejected(e.to_string()),
            },
            ClientError::Decode { .. } => ServiceError::Rejected(e.to_string()),
        }
    }
}

/// A base URL plus a shared connection pool.
#[derive(Debug, Clone)]
pub struct Http {
    client: Client,
    base: String,
}

impl Http {
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_timeout(base, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base: impl Into<String>, timeout: Duration) -> Self {
        let client = Client::builder().timeout(timeout).build().expect("HTTP client builds");
        Self {
            client,
            base: base.into().trim_end_matches('/').to_owned(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, url: &str, request: RequestBuilder) -> Result<Response, ClientError> {
        let response = request.send().map_err(|e| ClientError::Transport {
            url: url.to_owned(),
            message: e.to_string(),
        })?;
        let status = response.status();
        if status.is_success() {
            return Ok(response);
        }
        let text = response.text().unwrap_or_default();
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => ClientError::Api {
                status: status.as_u16(),
                code: body.error,
                message: body.message,
            },
            Err(_) => ClientError::Api {
                status: status.as_u16(),
                code: status.as_str().to_owned(),
                message: format!("{url}: HTTP {status}: {text}"),
            },
        })
    }

    fn decode<T: DeserializeOwned>(url: &str, response: Response) -> Result<T, ClientError> {
        response.json().map_err(|e| ClientError::Decode {
            url: url.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str, query: &[(&str, String)]) -> Result<T, ClientError> {
        let url = self.url(path);
        let response = self.send(&url, self.client.get(&url).query(query))?;
        Self::decode(&url, response)
    }

    pub fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        let url = self.url(path);
        let response = self.send(&url, self.client.get(&url))?;
        response.bytes().map(|b| b.to_vec()).map_err(|e| ClientError::Decode {
            url,
            message: e.to_string(),
        })
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = self.url(path);
        let response = self.send(&url, self.client.post(&url).json(body))?;
        Self::decode(&url, response)
    }

    fn post_text<B: Serialize>(&self, path: &str, body: &B) -> Result<String, ClientError> {
        let url = self.url(path);
        let response = self.send(&url, self.client.post(&url).json(body))?;
        response.text().map_err(|e| ClientError::Decode {
            url,
            message: e.to_string(),
        })
    }

    fn post_empty(&self, path: &str, body: &impl Serialize) -> Result<(), ClientError> {
        let url = self.url(path);
        self.send(&url, self.client.post(&url).json(body)).map(|_| ())
    }
}

/// Fetches one issuer's JWKS from its `/jwks` endpoint.
#[derive(Debug, Clone)]
pub struct HttpJwksSource {
    issuer: String,
    http: Http,
}

impl HttpJwksSource {
    /// The JWKS lives at `{issuer}/jwks`.
    pub fn new(issuer: impl Into<String>) -> Self {
        let issuer = issuer.into();
        Self::with_url(issuer.clone(), issuer)
    }

    /// For an issuer name that is not its own URL.
    pub fn with_url(issuer: impl Into<String>, base: impl Into<String>) -> Self {
        Self {
            issuer: issuer.into(),
            http: Http::new(base),
        }
    }
}

impl JwksSource for HttpJwksSource {
    fn fetch_jwks(&self, issuer: &str, now: u64) -> Result<Jwks, SourceError> {
        if issuer != self.issuer {
            return Err(SourceError::UnknownIssuer(issuer.to_owned()));
        }
        let body = self.http.get_bytes("/jwks").map_err(|e| SourceError::Fetch(e.to_string()))?;
        Ok(Jwks::from_json(&body, now)?)
    }
}

#[derive(Debug, Clone)]
pub struct IdpClient {
    http: Http,
}

impl IdpClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self { http: Http::new(base) }
    }

    pub fn token(&self, body: &TokenBody) -> Result<String, ClientError> {
        Ok(self.http.post::<_, TokenResponse>("/token", body)?.token)
    }

    pub fn rotate(&self) -> Result<u64, ClientError> {
        Ok(self
            .http
            .post::<_, RotateResponse>("/rotate", &serde_json::json!({}))?
            .rotation_counter)
    }

    pub fn jwks(&self) -> Result<Jwks, ClientError> {
        let body = self.http.get_bytes("/jwks")?;
        Jwks::from_json(&body, 0).map_err(|e| ClientError::Decode {
            url: self.http.url("/jwks"),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LedgerClient {
    http: Http,
}

impl LedgerClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self { http: Http::new(base) }
    }

    pub fn digest(&self) -> Result<SignedDigest, ClientError> {
        self.http.get("/digest", &[])
    }

    pub fn refresh(&self) -> Result<SignedDigest, ClientError> {
        self.http.post("/refresh", &serde_json::json!({}))
    }

    pub fn inclusion(&self, index: u64, size: u64) -> Result<InclusionProof, ClientError> {
        self.http
            .get("/inclusion", &[("index", index.to_string()), ("size", size.to_string())])
    }

    pub fn consistency(&self, old: u64, new: u64) -> Result<ConsistencyProof, ClientError> {
        self.http
            .get("/consistency", &[("old", old.to_string()), ("new", new.to_string())])
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>, ClientError> {
        self.http.get("/entries", &[])
    }

    pub fn key(&self) -> Result<VerifyingKey, ClientError> {
        Ok(self.http.get::<KeyResponse>("/key", &[])?.public_key)
    }

    pub fn cosign(&self, cosignature: &Cosignature) -> Result<(), ClientError> {
        self.http.post_empty("/cosign", cosignature)
    }
}

impl LedgerPublisher for LedgerClient {
    fn publish(&self, issuer: &str, jwks: &Jwks) -> Result<Published, ServiceError> {
        let document: serde_json::Value =
            serde_json::from_slice(&jwks.canonical_json()).expect("canonical JWKS is JSON");
        let body = AppendBody {
            issuer: issuer.to_owned(),
            jwks: document,
        };
        Ok(self.http.post("/append", &body)?)
    }
}

impl LedgerView for LedgerClient {
    fn query_at(&self, issuer: &str, t: u64) -> Result<TimestampBracket, ServiceError> {
        Ok(self
            .http
            .get("/at", &[("issuer", issuer.to_owned()), ("t", t.to_string())])?)
    }
}

#[derive(Debug, Clone)]
pub struct CtClient {
    http: Http,
}

impl CtClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self { http: Http::new(base) }
    }

    pub fn digest(&self) -> Result<SignedDigest, ClientError> {
        self.http.get("/digest", &[])
    }

    pub fn key(&self) -> Result<VerifyingKey, ClientError> {
        Ok(self.http.get::<KeyResponse>("/key", &[])?.public_key)
    }
}

impl CtSubmitter for CtClient {
    fn submit(&self, tbs: &[u8]) -> Result<Sct, ServiceError> {
        let body = SubmitBody {
            tbs: STANDARD.encode(tbs),
        };
        Ok(self.http.post("/submit", &body)?)
    }
}

impl CtView for CtClient {
    fn inclusion(&self, leaf_hash: &Hash) -> Result<CtInclusion, ServiceError> {
        Ok(self.http.get("/inclusion", &[("hash", hex::encode(leaf_hash))])?)
    }
}

/// A remote witness, known to the ledger by id.
#[derive(Debug, Clone)]
pub struct WitnessClient {
    id: String,
    http: Http,
}

impl WitnessClient {
    pub fn new(id: impl Into<String>, base: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            http: Http::new(base),
        }
    }

    pub fn state(&self) -> Result<WitnessState, ClientError> {
        self.http.get("/state", &[])
    }
}

impl WitnessEndpoint for WitnessClient {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn last_size(&self) -> Result<u64, ServiceError> {
        Ok(self.state()?.last_cosigned.tree_size)
    }

    fn review(&self, request: &CosignRequest) -> Result<Cosignature, ServiceError> {
        Ok(self.http.post("/review", request)?)
    }
}

#[derive(Debug, Clone)]
pub struct CaClient {
    http: Http,
}

impl CaClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self { http: Http::new(base) }
    }

    pub fn challenge(&self, key: &VerifyingKey) -> Result<String, ClientError> {
        let body = ChallengeBody { public_key: *key };
        Ok(self.http.post::<_, ChallengeResponse>("/challenge", &body)?.nonce)
    }

    /// The PEM chain (leaf then root).
    pub fn issue(&self, request: &IssuanceRequest) -> Result<String, ClientError> {
        self.http.post_text("/issue", request)
    }

    pub fn root_pem(&self) -> Result<String, ClientError> {
        let bytes = self.http.get_bytes("/root")?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn trust(&self) -> Result<TrustRoots, ClientError> {
        let url = self.http.url("/trust");
        let bytes = self.http.get_bytes("/trust")?;
        TrustRoots::from_json(&String::from_utf8_lossy(&bytes)).map_err(|e| ClientError::Decode {
            url,
            message: e.to_string(),
        })
    }

    pub fn poll(&self) -> Result<PollResponse, ClientError> {
        self.http.post("/poll", &serde_json::json!({}))
    }
}
