//! The certificate authority.
//!
//! Issuance runs in a fixed order: validate the token against a freshly
//! polled JWKS; publish a changed key set to the ledger and wait for quorum;
//! map claims to certificate fields; embed the token's signing input and a
//! GQ proof of its signature; log the precertificate; sign.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use der::Encode;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use x509_cert::name::Name;
use x509_cert::Certificate;

use crate::cert::{self, CertError, LeafTemplate, SanName, SubjectFields};
use crate::gq;
use crate::jose::{
    parse_compact, validate_claims, verify_with_jwks, ClaimRejection, ClaimsPolicy, JoseError, Jwks, JwksSource,
    OidcClaims, SignatureRejection, DEFAULT_CLOCK_SKEW,
};
use crate::keys::{SigningKey, VerifyingKey};
use crate::ledger::{client_check_quorum, LogTrust};
use crate::merkle::verify_inclusion;
use crate::service::{CtSubmitter, LedgerPublisher};

pub const DEFAULT_CERT_LIFETIME: u64 = 600;
pub const DEFAULT_CHALLENGE_TTL: u64 = 300;
pub const DEFAULT_CA_ID: &str = "poa-ca";
const POP_TAG: &[u8] = b"poa-pop-v1:";

/// The bytes a requester signs to prove possession of its key.
pub fn pop_message(nonce: &str) -> Vec<u8> {
    [POP_TAG, nonce.as_bytes()].concat()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClaimMapError {
    #[error("empty sub claim")]
    EmptySubject,
    #[error("sub claim is not representable in a SAN: {0}")]
    Unrepresentable(String),
}

/// Deterministic mapping from token claims to certificate fields.
pub fn claim_map(claims: &OidcClaims, cert_lifetime: u64) -> Result<SubjectFields, ClaimMapError> {
    let sub = claims.sub.as_str();
    if sub.is_empty() {
        return Err(ClaimMapError::EmptySubject);
    }
    if !sub.is_ascii() || sub.chars().any(|c| c.is_ascii_control()) {
        return Err(ClaimMapError::Unrepresentable(sub.to_owned()));
    }
    let san = if sub.contains('@') {
        SanName::Email(sub.to_owned())
    } else {
        SanName::Uri(sub.to_owned())
    };
    Ok(SubjectFields {
        san,
        issuer: claims.iss.clone(),
        not_before: claims.iat,
        not_after: claims.iat.saturating_add(cert_lifetime),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenFailure {
    #[error("{0}")]
    Malformed(JoseError),
    #[error("{}", .0.code())]
    Claims(ClaimRejection),
    #[error("{0}")]
    Signature(SignatureRejection),
    #[error("jwks-unavailable: {0}")]
    JwksUnavailable(String),
    #[error("{0}")]
    Unmappable(ClaimMapError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IssueError {
    #[error("invalid-token({0})")]
    InvalidToken(TokenFailure),
    #[error("unknown-challenge")]
    UnknownChallenge,
    #[error("bad-proof-of-possession")]
    BadProofOfPossession,
    #[error("ledger-unavailable: {0}")]
    LedgerUnavailable(String),
    #[error("proof-failure: {0}")]
    ProofFailure(String),
    #[error("ct-unavailable: {0}")]
    CtUnavailable(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl IssueError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidToken(_) => "invalid-token",
            Self::UnknownChallenge => "unknown-challenge",
            Self::BadProofOfPossession => "bad-proof-of-possession",
            Self::LedgerUnavailable(_) => "ledger-unavailable",
            Self::ProofFailure(_) => "proof-failure",
            Self::CtUnavailable(_) => "ct-unavailable",
            Self::Internal(_) => "internal",
        }
    }
}

impl From<CertError> for IssueError {
    fn from(e: CertError) -> Self {
        IssueError::Internal(e.to_string())
    }
}

fn invalid(f: TokenFailure) -> IssueError {
    IssueError::InvalidToken(f)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaConfig {
    /// Audience tokens must name.
    pub ca_id: String,
    pub issuer: String,
    pub ca_name: String,
    pub cert_lifetime: u64,
    pub challenge_ttl: u64,
    pub clock_skew: u64,
    pub lambda: u32,
}

impl CaConfig {
    pub fn new(issuer: impl Into<String>) -> Self {
        Self {
            ca_id: DEFAULT_CA_ID.into(),
            issuer: issuer.into(),
            ca_name: cert::DEFAULT_CA_NAME.into(),
            cert_lifetime: DEFAULT_CERT_LIFETIME,
            challenge_ttl: DEFAULT_CHALLENGE_TTL,
            clock_skew: DEFAULT_CLOCK_SKEW,
            lambda: gq::DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssuanceRequest {
    /// Compact JWS.
    pub token: String,
    pub public_key: VerifyingKey,
    #[serde(with = "crate::hexser::bytes")]
    pub pop: Vec<u8>,
}

#[derive(Debug, Clone)]
struct CacheEntry {
    jwks: Jwks,
    hash: [u8; 32],
    published: Option<[u8; 32]>,
    degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PollOutcome {
    pub changed: bool,
    pub degraded: bool,
    pub jwks: Jwks,
}

/// Per-issuer latest key set. Readers clone the entry; updates swap it.
#[derive(Debug, Default)]
pub struct JwksCache {
    entries: RwLock<HashMap<String, CacheEntry>>,
}

impl JwksCache {
    pub fn get(&self, issuer: &str) -> Option<Jwks> {
        self.entries.read().expect("cache lock").get(issuer).map(|e| e.jwks.clone())
    }

    pub fn content_hash(&self, issuer: &str) -> Option<[u8; 32]> {
        self.entries.read().expect("cache lock").get(issuer).map(|e| e.hash)
    }

    fn update(&self, issuer: &str, jwks: Jwks) -> bool {
        let hash = jwks.content_hash();
        let mut entries = self.entries.write().expect("cache lock");
        match entries.get_mut(issuer) {
            Some(e) if e.hash == hash => {
                e.degraded = false;
                false
            }
            Some(e) => {
                e.jwks = jwks;
                e.hash = hash;
                e.degraded = false;
                true
            }
            None => {
                entries.insert(
                    issuer.to_owned(),
                    CacheEntry {
                        jwks,
                        hash,
                        published: None,
                        degraded: false,
                    },
                );
                true
            }
        }
    }

    fn mark_degraded(&self, issuer: &str) -> Option<Jwks> {
        let mut entries = self.entries.write().expect("cache lock");
        entries.get_mut(issuer).map(|e| {
            e.degraded = true;
            e.jwks.clone()
        })
    }

    fn unpublished(&self, issuer: &str) -> Option<(Jwks, [u8; 32])> {
        let entries = self.entries.read().expect("cache lock");
        entries
            .get(issuer)
            .filter(|e| e.published != Some(e.hash))
            .map(|e| (e.jwks.clone(), e.hash))
    }

    fn mark_published(&self, issuer: &str, hash: [u8; 32]) {
        if let Some(e) = self.entries.write().expect("cache lock").get_mut(issuer) {
            e.published = Some(hash);
        }
    }
}

struct Challenge {
    key: VerifyingKey,
    expires: u64,
}

/// Services the CA depends on.
pub struct CaBackends {
    pub jwks_source: Arc<dyn JwksSource>,
    pub ledger: Arc<dyn LedgerPublisher>,
    pub ledger_trust: LogTrust,
    pub ct: Arc<dyn CtSubmitter>,
    pub ct_key: VerifyingKey,
}

pub struct CertificateAuthority {
    config: CaConfig,
    key: SigningKey,
    name: Name,
    root: Certificate,
    backends: CaBackends,
    cache: JwksCache,
    challenges: Mutex<HashMap<String, Challenge>>,
    publish_lock: Mutex<()>,
    rng: Mutex<ChaCha20Rng>,
}

/// An issued leaf plus the root it chains to.
#[derive(Debug, Clone)]
pub struct IssuedCertificate {
    pub leaf: Certificate,
    pub root: Certificate,
}

impl IssuedCertificate {
    pub fn leaf_der(&self) -> Vec<u8> {
        self.leaf.to_der().expect("certificate encodes")
    }

    pub fn chain_pem(&self) -> String {
        format!("{}{}", cert::to_pem(&self.leaf), cert::to_pem(&self.root))
    }
}

impl CertificateAuthority {
    /// `root_not_before` anchors the self-signed root's validity; the root is
    /// valid for ten years.
    pub fn new(
        config: CaConfig,
        key: SigningKey,
        backends: CaBackends,
        root_not_before: u64,
        seed: u64,
    ) -> Result<Self, CertError> {
        let name = cert::ca_name(&config.ca_name)?;
        let root = cert::build_root(&key, &config.ca_name, root_not_before, 10 * 365 * 86_400)?;
        Ok(Self {
            config,
            key,
            name,
            root,
            backends,
            cache: JwksCache::default(),
            challenges: Mutex::new(HashMap::new()),
            publish_lock: Mutex::new(()),
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
        })
    }

    pub fn config(&self) -> &CaConfig {
        &self.config
    }

    pub fn root(&self) -> &Certificate {
        &self.root
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn cache(&self) -> &JwksCache {
        &self.cache
    }

    /// Single-use nonce the requester must put in its token and sign.
    pub fn challenge(&self, key: &VerifyingKey, now: u64) -> String {
        let mut bytes = [0u8; 16];
        self.rng.lock().expect("rng lock").fill_bytes(&mut bytes);
        let nonce = hex::encode(bytes);
        let mut challenges = self.challenges.lock().expect("challenge lock");
        challenges.retain(|_, c| c.expires >= now);
        challenges.insert(
            nonce.clone(),
            Challenge {
                key: *key,
                expires: now + self.config.challenge_ttl,
            },
        );
        nonce
    }

    /// Fetches the issuer's key set. A failed fetch keeps the stale cache
    /// and reports it as degraded.
    pub fn poll_jwks(&self, now: u64) -> Result<PollOutcome, IssueError> {
        let issuer = &self.config.issuer;
        match self.backends.jwks_source.fetch_jwks(issuer, now) {
            Ok(jwks) => {
                let changed = self.cache.update(issuer, jwks.clone());
                Ok(PollOutcome {
                    changed,
                    degraded: false,
                    jwks,
                })
            }
            Err(e) => {
                tracing::warn!(%issuer, error = %e, "JWKS fetch failed");
                match self.cache.mark_degraded(issuer) {
                    Some(jwks) => Ok(PollOutcome {
                        changed: false,
                        degraded: true,
                        jwks,
                    }),
                    None => Err(invalid(TokenFailure::JwksUnavailable(e.to_string()))),
                }
            }
        }
    }

    /// Pushes the cached key set to the ledger unless it is already there,
    /// then checks the returned digest carries a quorum and includes it.
    pub fn publish_jwks(&self) -> Result<(), IssueError> {
        let issuer = &self.config.issuer;
        let _serial = self.publish_lock.lock().expect("publish lock");
        let Some((jwks, hash)) = self.cache.unpublished(issuer) else {
            return Ok(());
        };
        let published = self
            .backends
            .ledger
            .publish(issuer, &jwks)
            .map_err(|e| IssueError::LedgerUnavailable(e.to_string()))?;
        client_check_quorum(&published.digest, &self.backends.ledger_trust)
            .map_err(|e| IssueError::LedgerUnavailable(e.to_string()))?;
        let entry = &published.entry;
        let included = entry.issuer == *issuer
            && entry.jwks.same_keys(&jwks)
            && published.proof.leaf_index == entry.index
            && published.proof.tree_size == published.digest.tree_size
            && verify_inclusion(&entry.leaf_hash(), &published.proof, &published.digest.root_hash);
        if !included {
            return Err(IssueError::LedgerUnavailable("ledger did not include the key set".into()));
        }
        self.cache.mark_published(issuer, hash);
        Ok(())
    }

    pub fn issue(&self, request: &IssuanceRequest, now: u64) -> Result<IssuedCertificate, IssueError> {
        // 1. Token: parse, claims, challenge binding, signature.
        let token = parse_compact(request.token.trim().as_bytes()).map_err(|e| invalid(TokenFailure::Malformed(e)))?;
        let policy = ClaimsPolicy::new(&self.config.issuer, &self.config.ca_id).with_skew(self.config.clock_skew);
        validate_claims(&token.claims, &policy, now).map_err(|e| invalid(TokenFailure::Claims(e)))?;
        let nonce = token
            .claims
            .nonce
            .clone()
            .ok_or(invalid(TokenFailure::Claims(ClaimRejection::NonceMismatch)))?;
        let challenge = self.challenges.lock().expect("challenge lock").remove(&nonce);
        match challenge {
            Some(c) if c.expires >= now && c.key == request.public_key => {}
            _ => return Err(IssueError::UnknownChallenge),
        }
        if !request.public_key.verify(&pop_message(&nonce), &request.pop) {
            return Err(IssueError::BadProofOfPossession);
        }
        let jwks = self.poll_jwks(now)?.jwks;
        let idp_key = verify_with_jwks(&jwks, &token)
            .map_err(|e| invalid(TokenFailure::Signature(e)))?
            .clone();

        // 2. Key-set changes reach the ledger before any certificate.
        self.publish_jwks()?;

        // 3. Certificate fields.
        let fields = claim_map(&token.claims, self.config.cert_lifetime)
            .map_err(|e| invalid(TokenFailure::Unmappable(e)))?;

        // 4-5. Signing input and proof of knowledge of its signature.
        let (serial, proof) = {
            let mut rng = self.rng.lock().expect("rng lock");
            let mut serial = [0u8; 16];
            rng.fill_bytes(&mut serial);
            serial[0] = (serial[0] & 0x7f) | 0x01;
            let proof = gq::prove(
                &idp_key,
                token.signing_input(),
                &token.signature(),
                self.config.lambda,
                &mut *rng,
            )
            .map_err(|e| IssueError::ProofFailure(e.to_string()))?;
            (serial, proof)
        };
        let mut tbs = cert::build_leaf_tbs(&LeafTemplate {
            serial: &serial,
            ca_name: &self.name,
            fields: &fields,
            subject_key: &request.public_key,
            signing_input: token.signing_input(),
            proof: &proof.to_bytes(),
        })?;

        // 6. Precertificate to the CT log.
        let precert = cert::precert_tbs_der(&tbs)?;
        let sct = self
            .backends
            .ct
            .submit(&precert)
            .map_err(|e| IssueError::CtUnavailable(e.to_string()))?;
        if !sct.verify(&self.backends.ct_key, &precert) {
            return Err(IssueError::CtUnavailable("SCT does not verify".into()));
        }
        cert::attach_sct(&mut tbs, &sct)?;

        // 7. Sign.
        let leaf = cert::sign_tbs(tbs, &self.key)?;
        tracing::info!(sub = %token.claims.sub, "issued certificate");
        Ok(IssuedCertificate {
            leaf,
            root: self.root.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jose::Audience;

    fn claims(sub: &str) -> OidcClaims {
        OidcClaims {
            iss: "https://idp.test".into(),
            sub: sub.into(),
            aud: Audience::One(DEFAULT_CA_ID.into()),
            exp: 2_000,
            iat: 1_000,
            nonce: None,
            email: None,
        }
    }

    #[test]
    fn claim_map_rules() {
        let email = claim_map(&claims("alice@example.com"), 600).unwrap();
        assert_eq!(email.san, SanName::Email("alice@example.com".into()));
        assert_eq!((email.not_before, email.not_after), (1_000, 1_600));
        assert_eq!(email.issuer, "https://idp.test");

        let uri = claim_map(&claims("https://ci.example/job/42"), 600).unwrap();
        assert_eq!(uri.san, SanName::Uri("https://ci.example/job/42".into()));

        assert_eq!(claim_map(&claims(""), 600), Err(ClaimMapError::EmptySubject));
        assert!(matches!(claim_map(&claims("bø"), 600), Err(ClaimMapError::Unrepresentable(_))));
        assert_eq!(claim_map(&claims("x"), 600), claim_map(&claims("x"), 600));
    }

    #[test]
    fn error_codes_render() {
        let e = invalid(TokenFailure::Claims(ClaimRejection::AudienceMismatch));
        assert_eq!(e.to_string(), "invalid-token(aud-mismatch)");
        let e = invalid(TokenFailure::Signature(SignatureRejection::KeyNotFound));
        assert_eq!(e.to_string(), "invalid-token(key-not-found)");
        assert_eq!(e.code(), "invalid-token");
    }

    #[test]
    fn pop_message_is_tagged() {
        assert_eq!(pop_message("ab"), b"poa-pop-v1:ab".to_vec());
    }
}
