//! Compact JWS parsing, OIDC claim validation and RS256 verification.
//!
//! Verification always runs over the verbatim `header.payload` bytes taken
//! from the token. Re-serialized JSON is never trusted because member order
//! is not canonical.

pub mod emsa;
pub mod jwks;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::gq::RsaPublicKey;
pub use emsa::{emsa_encode, EmsaError};
pub use jwks::{Jwk, Jwks, JwksError, JwksSource, SourceError};

/// Default clock skew tolerated when checking `iat`/`exp`.
pub const DEFAULT_CLOCK_SKEW: u64 = 60;

/// Upper bound on keys tried when a token names no `kid`.
pub const MAX_TRIAL_KEYS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JoseError {
    #[error("malformed token: {0}")]
    Malformed(String),
    #[error("encrypted tokens are not accepted")]
    EncryptedDisallowed,
    #[error("unsupported algorithm {0:?}")]
    UnsupportedAlgorithm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ClaimRejection {
    #[error("iss-mismatch")]
    IssuerMismatch,
    #[error("aud-mismatch")]
    AudienceMismatch,
    #[error("expired")]
    Expired,
    #[error("not-yet-valid")]
    NotYetValid,
    #[error("nonce-mismatch")]
    NonceMismatch,
}

impl ClaimRejection {
    pub fn code(&self) -> &'static str {
        match self {
            Self::IssuerMismatch => "iss-mismatch",
            Self::AudienceMismatch => "aud-mismatch",
            Self::Expired => "expired",
            Self::NotYetValid => "not-yet-valid",
            Self::NonceMismatch => "nonce-mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SignatureRejection {
    #[error("key-not-found")]
    KeyNotFound,
    #[error("signature length {found} does not match modulus length {expected}")]
    BadLength { expected: usize, found: usize },
    #[error("signature does not verify")]
    Mismatch,
    #[error(transparent)]
    Encoding(#[from] EmsaError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JwtHeader {
    pub alg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub typ: Option<String>,
}

/// `aud` is either a single string or an array of strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Audience {
    One(String),
    Many(Vec<String>),
}

impl Audience {
    pub fn contains(&self, aud: &str) -> bool {
        match self {
            Audience::One(a) => a == aud,
            Audience::Many(list) => list.iter().any(|a| a == aud),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            Audience::One(a) => a.is_empty(),
            Audience::Many(list) => list.is_empty() || list.iter().all(String::is_empty),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OidcClaims {
    pub iss: String,
    pub sub: String,
    pub aud: Audience,
    pub exp: u64,
    pub iat: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonce: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
}

impl OidcClaims {
    fn check_shape(&self) -> Result<(), JoseError> {
        if self.sub.is_empty() {
            return Err(JoseError::Malformed("empty sub".into()));
        }
        if self.aud.is_empty() {
            return Err(JoseError::Malformed("empty aud".into()));
        }
        if self.iat > self.exp {
            return Err(JoseError::Malformed("iat after exp".into()));
        }
        Ok(())
    }
}

/// Header and claims of a JWT without its signature, as embedded in
/// certificates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnsignedToken {
    pub header: JwtHeader,
    pub claims: OidcClaims,
    signing_input: Vec<u8>,
}

impl UnsignedToken {
    /// Parses exactly `base64url(header) "." base64url(payload)`.
    pub fn parse(signing_input: &[u8]) -> Result<Self, JoseError> {
        let text = std::str::from_utf8(signing_input)
            .map_err(|_| JoseError::Malformed("not ASCII".into()))?;
        let parts: Vec<&str> = text.split('.').collect();
        let [header, payload] = parts[..] else {
            return Err(JoseError::Malformed(format!(
                "expected 2 segments, found {}",
                parts.len()
            )));
        };
        let header: JwtHeader = decode_json("header", header)?;
        if header.alg != "RS256" {
            return Err(JoseError::UnsupportedAlgorithm(header.alg));
        }
        let claims: OidcClaims = decode_json("payload", payload)?;
        claims.check_shape()?;
        Ok(Self {
            header,
            claims,
            signing_input: signing_input.to_vec(),
        })
    }

    pub fn signing_input(&self) -> &[u8] {
        &self.signing_input
    }
}

/// A parsed compact JWS carrying OIDC claims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OidcToken {
    pub header: JwtHeader,
    pub claims: OidcClaims,
    signature: Vec<u8>,
    signing_input: Vec<u8>,
}

impl OidcToken {
    /// Exactly the bytes covered by the RSA signature.
    pub fn signing_input(&self) -> &[u8] {
        &self.signing_input
    }

    /// The `header.payload` bytes embedded into certificates.
    pub fn raw_header_body(&self) -> &[u8] {
        &self.signing_input
    }

    pub fn signature_bytes(&self) -> &[u8] {
        &self.signature
    }

    pub fn signature(&self) -> BigUint {
        BigUint::from_bytes_be(&self.signature)
    }

    pub fn to_compact(&self) -> String {
        let mut out = String::from_utf8(self.signing_input.clone()).expect("ASCII signing input");
        out.push('.');
        out.push_str(&URL_SAFE_NO_PAD.encode(&self.signature));
        out
    }

    pub(crate) fn from_parts(unsigned: UnsignedToken, signature: Vec<u8>) -> Self {
        Self {
            header: unsigned.header,
            claims: unsigned.claims,
            signature,
            signing_input: unsigned.signing_input,
        }
    }
}

fn decode_json<T: serde::de::DeserializeOwned>(what: &str, segment: &str) -> Result<T, JoseError> {
    let raw = URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|e| JoseError::Malformed(format!("{what}: {e}")))?;
    serde_json::from_slice(&raw).map_err(|e| JoseError::Malformed(format!("{what}: {e}")))
}

/// Parses a compact-serialized JWS. JWE envelopes (five segments) are
/// refused outright.
pub fn parse_compact(token: &[u8]) -> Result<OidcToken, JoseError> {
    let text =
        std::str::from_utf8(token).map_err(|_| JoseError::Malformed("not ASCII".into()))?;
    let text = text.trim();
    let segments = text.split('.').count();
    match segments {
        3 => {}
        5 => return Err(JoseError::EncryptedDisallowed),
        n => return Err(JoseError::Malformed(format!("expected 3 segments, found {n}"))),
    }
    let (signing_input, signature) = text.rsplit_once('.').expect("three segments");
    let unsigned = UnsignedToken::parse(signing_input.as_bytes())?;
    let signature = URL_SAFE_NO_PAD
        .decode(signature)
        .map_err(|e| JoseError::Malformed(format!("signature: {e}")))?;
    if signature.is_empty() {
        return Err(JoseError::Malformed("empty signature".into()));
    }
    Ok(OidcToken::from_parts(unsigned, signature))
}

/// What a relying party expects of a token's claims.
#[derive(Debug, Clone)]
pub struct ClaimsPolicy {
    pub expected_iss: String,
    pub expected_aud: String,
    pub clock_skew: u64,
    /// `None` skips the nonce check entirely.
    pub nonce: Option<String>,
}

impl ClaimsPolicy {
    pub fn new(expected_iss: impl Into<String>, expected_aud: impl Into<String>) -> Self {
        Self {
            expected_iss: expected_iss.into(),
            expected_aud: expected_aud.into(),
            clock_skew: DEFAULT_CLOCK_SKEW,
            nonce: None,
        }
    }

    pub fn with_nonce(mut self, nonce: impl Into<String>) -> Self {
        self.nonce = Some(nonce.into());
        self
    }

    pub fn with_skew(mut self, skew: u64) -> Self {
        self.clock_skew = skew;
        self
    }
}

pub fn validate_claims(
    claims: &OidcClaims,
    policy: &ClaimsPolicy,
    now: u64,
) -> Result<(), ClaimRejection> {
    if claims.iss != policy.expected_iss {
        return Err(ClaimRejection::IssuerMismatch);
    }
    if !claims.aud.contains(&policy.expected_aud) {
        return Err(ClaimRejection::AudienceMismatch);
    }
    if now > claims.exp.saturating_add(policy.clock_skew) {
        return Err(ClaimRejection::Expired);
    }
    if claims.iat > now.saturating_add(policy.clock_skew) {
        return Err(ClaimRejection::NotYetValid);
    }
    if let Some(expected) = &policy.nonce {
        if claims.nonce.as_deref() != Some(expected.as_str()) {
            return Err(ClaimRejection::NonceMismatch);
        }
    }
    Ok(())
}

/// RS256 check: `σ^e mod n` must equal the EMSA-PKCS1-v1_5 encoding of
/// `SHA-256(signing_input)`.
pub fn verify_rs256(pk: &RsaPublicKey, token: &OidcToken) -> Result<(), SignatureRejection> {
    verify_rs256_raw(pk, token.signing_input(), token.signature_bytes())
}

pub fn verify_rs256_raw(
    pk: &RsaPublicKey,
    signing_input: &[u8],
    signature: &[u8],
) -> Result<(), SignatureRejection> {
    let k = pk.modulus_len();
    if signature.len() != k {
        return Err(SignatureRejection::BadLength {
            expected: k,
            found: signature.len(),
        });
    }
    let sigma = BigUint::from_bytes_be(signature);
    if sigma >= *pk.modulus() {
        return Err(SignatureRejection::Mismatch);
    }
    let expected = emsa::encode_message(signing_input, k)?;
    if pk.apply(&sigma) == expected {
        Ok(())
    } else {
        Err(SignatureRejection::Mismatch)
    }
}

/// Selects the verification key for a token: by `kid` when present,
/// otherwise by trial over at most [`MAX_TRIAL_KEYS`] keys.
pub fn select_key<'a>(
    jwks: &'a Jwks,
    kid: Option<&str>,
    mut accepts: impl FnMut(&RsaPublicKey) -> bool,
) -> Option<&'a RsaPublicKey> {
    match kid {
        Some(kid) => jwks.find(kid).filter(|k| accepts(k)),
        None => jwks.keys().iter().take(MAX_TRIAL_KEYS).find(|k| accepts(k)),
    }
}

pub fn verify_with_jwks<'a>(
    jwks: &'a Jwks,
    token: &OidcToken,
) -> Result<&'a RsaPublicKey, SignatureRejection> {
    match token.header.kid.as_deref() {
        Some(kid) => {
            let key = jwks.find(kid).ok_or(SignatureRejection::KeyNotFound)?;
            verify_rs256(key, token).map(|()| key)
        }
        None => select_key(jwks, None, |k| verify_rs256(k, token).is_ok())
            .ok_or(SignatureRejection::KeyNotFound),
    }
}

/// base64url (unpadded) encoding of JSON-serializable header/claims.
pub fn encode_segment<T: Serialize>(value: &T) -> String {
    URL_SAFE_NO_PAD.encode(serde_json::to_vec(value).expect("JSON serializes"))
}
