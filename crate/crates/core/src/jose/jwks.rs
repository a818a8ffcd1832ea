//! JWKS documents: `{"keys":[{"kty":"RSA","kid":..,"n":..,"e":..}]}`.

use std::collections::BTreeSet;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gq::{KeyError, RsaPublicKey};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JwksError {
    #[error("malformed JWKS document: {0}")]
    Malformed(String),
    #[error("duplicate kid {0:?} in key set")]
    DuplicateKid(String),
    #[error("key {kid:?}: {source}")]
    InvalidKey { kid: String, source: KeyError },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jwk {
    pub kty: String,
    #[serde(default)]
    pub kid: Option<String>,
    pub n: String,
    pub e: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alg: Option<String>,
    #[serde(default, rename = "use", skip_serializing_if = "Option::is_none")]
    pub key_use: Option<String>,
}

impl From<&RsaPublicKey> for Jwk {
    fn from(key: &RsaPublicKey) -> Self {
        let e = key.exponent().to_be_bytes();
        let first = e.iter().position(|b| *b != 0).unwrap_or(e.len() - 1);
        Jwk {
            kty: "RSA".into(),
            kid: Some(key.key_id().to_owned()),
            n: URL_SAFE_NO_PAD.encode(key.modulus().to_bytes_be()),
            e: URL_SAFE_NO_PAD.encode(&e[first..]),
            alg: Some("RS256".into()),
            key_use: Some("sig".into()),
        }
    }
}

impl TryFrom<&Jwk> for RsaPublicKey {
    type Error = JwksError;

    fn try_from(jwk: &Jwk) -> Result<Self, JwksError> {
        let kid = jwk.kid.clone().unwrap_or_default();
        if jwk.kty != "RSA" {
            return Err(JwksError::Malformed(format!("unsupported kty {:?}", jwk.kty)));
        }
        let decode = |field: &str, value: &str| {
            URL_SAFE_NO_PAD
                .decode(value)
                .map_err(|e| JwksError::Malformed(format!("{field}: {e}")))
        };
        let n = BigUint::from_bytes_be(&decode("n", &jwk.n)?);
        let e_bytes = decode("e", &jwk.e)?;
        if e_bytes.is_empty() || e_bytes.len() > 8 {
            return Err(JwksError::Malformed("e: unsupported length".into()));
        }
        let e = e_bytes.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64);
        RsaPublicKey::new_production(n, e, kid.clone())
            .map_err(|source| JwksError::InvalidKey { kid, source })
    }
}

#[derive(Serialize, Deserialize)]
struct Document {
    keys: Vec<Jwk>,
}

/// A snapshot of an identity provider's verification keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Jwks {
    keys: Vec<RsaPublicKey>,
    pub fetched_at: u64,
}

impl Jwks {
    pub fn new(keys: Vec<RsaPublicKey>, fetched_at: u64) -> Result<Self, JwksError> {
        let mut seen = BTreeSet::new();
        for key in &keys {
            if !seen.insert(key.key_id()) {
                return Err(JwksError::DuplicateKid(key.key_id().to_owned()));
            }
        }
        Ok(Self { keys, fetched_at })
    }

    pub fn keys(&self) -> &[RsaPublicKey] {
        &self.keys
    }

    pub fn find(&self, kid: &str) -> Option<&RsaPublicKey> {
        self.keys.iter().find(|k| k.key_id() == kid)
    }

    pub fn from_json(json: &[u8], fetched_at: u64) -> Result<Self, JwksError> {
        let doc: Document =
            serde_json::from_slice(json).map_err(|e| JwksError::Malformed(e.to_string()))?;
        let keys = doc
            .keys
            .iter()
            .map(RsaPublicKey::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(keys, fetched_at)
    }

    /// The JWKS document with object keys in lexicographic order. Identical
    /// key sets always produce identical bytes.
    pub fn canonical_json(&self) -> Vec<u8> {
        let doc = Document {
            keys: self.keys.iter().map(Jwk::from).collect(),
        };
        // serde_json::Value keeps object members in a BTreeMap.
        let value = serde_json::to_value(&doc).expect("JWKS serializes");
        serde_json::to_vec(&value).expect("JWKS serializes")
    }

    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json()).into()
    }

    /// Equality of the key material, ignoring when the set was fetched.
    pub fn same_keys(&self, other: &Jwks) -> bool {
        self.canonical_json() == other.canonical_json()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SourceError {
    #[error("issuer {0:?} is not known to this source")]
    UnknownIssuer(String),
    #[error("JWKS fetch failed: {0}")]
    Fetch(String),
    #[error(transparent)]
    Document(#[from] JwksError),
}

/// Where the live key set of an issuer comes from: an HTTP `jwks_uri` in
/// deployment, the simulated provider in-process.
pub trait JwksSource: Send + Sync {
    fn fetch_jwks(&self, issuer: &str, now: u64) -> Result<Jwks, SourceError>;
}
