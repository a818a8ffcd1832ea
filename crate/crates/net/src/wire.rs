//! JSON bodies shared by servers and clients.

use serde::{Deserialize, Serialize};

use poa_core::keys::VerifyingKey;
use poa_core::ledger::SignedDigest;

/// Error body of every non-2xx response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenBody {
    pub sub: String,
    pub aud: String,
    #[serde(default)]
    pub lifetime: Option<u64>,
    #[serde(default)]
    pub nonce: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotateResponse {
    pub rotation_counter: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppendBody {
    pub issuer: String,
    /// The JWKS document as served by the issuer.
    pub jwks: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InclusionQuery {
    pub index: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyQuery {
    pub old: u64,
    pub new: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtQuery {
    pub issuer: String,
    pub t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyResponse {
    pub public_key: VerifyingKey,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitBody {
    /// Base64 DER of the precertificate TBS.
    pub tbs: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HashQuery {
    /// Hex leaf hash.
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessState {
    pub id: String,
    pub public_key: VerifyingKey,
    pub last_cosigned: SignedDigest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengeBody {
    pub public_key: VerifyingKey,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengeResponse {
    pub nonce: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PollResponse {
    pub changed: bool,
    pub degraded: bool,
}
