//! Thread-safe service wrappers and the traits that let the CA and verifier
//! talk to a ledger, CT log or witness either in-process or over HTTP.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::ct::{CtInclusion, CtLog, Sct};
use crate::jose::{Jwks, JwksSource};
use crate::keys::{SigningKey, VerifyingKey};
use crate::ledger::{
    Cosignature, CosignRequest, JwkLedger, LedgerEntry, LedgerError, SignedDigest, TimestampBracket, Witness,
};
use crate::merkle::{ConsistencyProof, Hash, InclusionProof};

pub trait Clock: Send + Sync {
    /// Unix seconds.
    fn now(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .expect("clock after epoch")
            .as_secs()
    }
}

/// Manually driven clock shared by simulated components.
#[derive(Debug, Default)]
pub struct SimClock(AtomicU64);

impl SimClock {
    pub fn new(now: u64) -> Self {
        Self(AtomicU64::new(now))
    }

    pub fn set(&self, now: u64) {
        self.0.store(now, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: u64) -> u64 {
        self.0.fetch_add(secs, Ordering::SeqCst) + secs
    }
}

impl Clock for SimClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// A clock that must never be read.
#[derive(Debug, Default, Clone, Copy)]
pub struct PoisonedClock;

impl Clock for PoisonedClock {
    fn now(&self) -> u64 {
        panic!("clock read where no clock is allowed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum ServiceError {
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("not found: {0}")]
    NotFound(String),
}

/// A ledger append as seen by the CA: the entry, its inclusion proof and
/// the digest both refer to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Published {
    pub entry: LedgerEntry,
    pub proof: InclusionProof,
    pub digest: SignedDigest,
    pub duplicate: bool,
}

pub trait LedgerPublisher: Send + Sync {
    /// Appends `jwks` for `issuer` and returns once a cosigning round ran.
    fn publish(&self, issuer: &str, jwks: &Jwks) -> Result<Published, ServiceError>;
}

pub trait LedgerView: Send + Sync {
    fn query_at(&self, issuer: &str, t: u64) -> Result<TimestampBracket, ServiceError>;
}

pub trait CtSubmitter: Send + Sync {
    fn submit(&self, tbs: &[u8]) -> Result<Sct, ServiceError>;
}

pub trait CtView: Send + Sync {
    fn inclusion(&self, leaf_hash: &Hash) -> Result<CtInclusion, ServiceError>;
}

pub trait WitnessEndpoint: Send + Sync {
    fn id(&self) -> String;
    /// Tree size of the last digest the witness cosigned.
    fn last_size(&self) -> Result<u64, ServiceError>;
    fn review(&self, request: &CosignRequest) -> Result<Cosignature, ServiceError>;
}

/// Outcome of asking one witness to cosign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessResult {
    pub witness_id: String,
    pub outcome: Result<(), String>,
}

pub struct LedgerService {
    ledger: RwLock<JwkLedger>,
    writer: Mutex<()>,
    witnesses: Vec<Arc<dyn WitnessEndpoint>>,
    clock: Arc<dyn Clock>,
}

impl LedgerService {
    pub fn new(ledger: JwkLedger, witnesses: Vec<Arc<dyn WitnessEndpoint>>, clock: Arc<dyn Clock>) -> Self {
        Self {
            ledger: RwLock::new(ledger),
            writer: Mutex::new(()),
            witnesses,
            clock,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.ledger.read().expect("ledger lock").verifying_key()
    }

    pub fn digest(&self) -> SignedDigest {
        self.ledger.read().expect("ledger lock").digest().clone()
    }

    pub fn size(&self) -> u64 {
        self.ledger.read().expect("ledger lock").size()
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.ledger.read().expect("ledger lock").entries().to_vec()
    }

    pub fn inclusion(&self, index: u64, size: u64) -> Result<InclusionProof, ServiceError> {
        let ledger = self.ledger.read().expect("ledger lock");
        ledger.prove_inclusion(index, size).map_err(not_found)
    }

    pub fn consistency(&self, old: u64, new: u64) -> Result<ConsistencyProof, ServiceError> {
        let ledger = self.ledger.read().expect("ledger lock");
        ledger.prove_consistency(old, new).map_err(not_found)
    }

    pub fn add_cosignature(&self, cosignature: Cosignature) -> Result<(), ServiceError> {
        let mut ledger = self.ledger.write().expect("ledger lock");
        ledger
            .add_cosignature(cosignature)
            .map_err(|e| ServiceError::Rejected(e.to_string()))
    }

    /// Asks every witness to cosign the current digest. Witness calls are
    /// made without holding the ledger lock; a cosignature for a digest that
    /// changed meanwhile is dropped.
    pub fn cosign_round(&self) -> Vec<WitnessResult> {
        let _writer = self.writer.lock().expect("writer lock");
        self.cosign_round_locked()
    }

    fn cosign_round_locked(&self) -> Vec<WitnessResult> {
        self.witnesses
            .iter()
            .map(|w| {
                let outcome = w
                    .last_size()
                    .and_then(|size| {
                        let request = self.ledger.read().expect("ledger lock").cosign_request(size);
                        w.review(&request)
                    })
                    .and_then(|c| self.add_cosignature(c))
                    .map_err(|e| e.to_string());
                if let Err(reason) = &outcome {
                    tracing::warn!(witness = %w.id(), %reason, "witness did not cosign");
                }
                WitnessResult {
                    witness_id: w.id(),
                    outcome,
                }
            })
            .collect()
    }

    pub fn append(&self, issuer: &str, jwks: &Jwks) -> Published {
        let _writer = self.writer.lock().expect("writer lock");
        let now = self.clock.now();
        let outcome = self.ledger.write().expect("ledger lock").append(issuer, jwks, now);
        let needs_round = {
            let ledger = self.ledger.read().expect("ledger lock");
            ledger.digest().witness_cosignatures.len() < self.witnesses.len()
        };
        if needs_round {
            self.cosign_round_locked();
        }
        let ledger = self.ledger.read().expect("ledger lock");
        let digest = ledger.digest().clone();
        let proof = ledger
            .prove_inclusion(outcome.entry.index, digest.tree_size)
            .expect("entry is in the tree");
        Published {
            entry: outcome.entry,
            proof,
            digest,
            duplicate: outcome.duplicate,
        }
    }

    /// Re-signs the head at the current time and runs a cosigning round.
    pub fn refresh(&self) -> SignedDigest {
        let _writer = self.writer.lock().expect("writer lock");
        let now = self.clock.now();
        self.ledger.write().expect("ledger lock").refresh(now);
        self.cosign_round_locked();
        self.digest()
    }

    /// Bracket query. An open bracket whose digest predates `t` triggers a
    /// refresh so the answer proves no later entry existed at `t`.
    pub fn bracket(&self, issuer: &str, t: u64) -> Result<TimestampBracket, ServiceError> {
        let first = self.query_locked(issuer, t)?;
        if first.after.is_some() || first.digest.timestamp >= t {
            return Ok(first);
        }
        if self.clock.now() < t {
            return Err(ServiceError::Rejected(format!("query time {t} is in the future")));
        }
        self.refresh();
        self.query_locked(issuer, t)
    }

    fn query_locked(&self, issuer: &str, t: u64) -> Result<TimestampBracket, ServiceError> {
        let ledger = self.ledger.read().expect("ledger lock");
        ledger.query_at(issuer, t).map_err(|e| match e {
            LedgerError::UnknownAtTime { .. } => ServiceError::NotFound(e.to_string()),
            other => ServiceError::Rejected(other.to_string()),
        })
    }

    /// Direct access for fault injection in tests and scenarios.
    pub fn with_ledger<T>(&self, f: impl FnOnce(&mut JwkLedger) -> T) -> T {
        let _writer = self.writer.lock().expect("writer lock");
        f(&mut self.ledger.write().expect("ledger lock"))
    }
}

fn not_found(e: LedgerError) -> ServiceError {
    ServiceError::NotFound(e.to_string())
}

impl LedgerPublisher for LedgerService {
    fn publish(&self, issuer: &str, jwks: &Jwks) -> Result<Published, ServiceError> {
        Ok(self.append(issuer, jwks))
    }
}

impl LedgerView for LedgerService {
    fn query_at(&self, issuer: &str, t: u64) -> Result<TimestampBracket, ServiceError> {
        self.bracket(issuer, t)
    }
}

pub struct CtService {
    log: Mutex<CtLog>,
    clock: Arc<dyn Clock>,
}

impl CtService {
    pub fn new(key: SigningKey, clock: Arc<dyn Clock>) -> Self {
        let log = CtLog::new(key, clock.now());
        Self {
            log: Mutex::new(log),
            clock,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.log.lock().expect("ct lock").verifying_key()
    }

    pub fn digest(&self) -> SignedDigest {
        self.log.lock().expect("ct lock").digest().clone()
    }

    pub fn size(&self) -> u64 {
        self.log.lock().expect("ct lock").size()
    }
}

impl CtSubmitter for CtService {
    fn submit(&self, tbs: &[u8]) -> Result<Sct, ServiceError> {
        let now = self.clock.now();
        self.log
            .lock()
            .expect("ct lock")
            .submit_precert(tbs, now)
            .map_err(|e| ServiceError::Rejected(e.to_string()))
    }
}

impl CtView for CtService {
    fn inclusion(&self, leaf_hash: &Hash) -> Result<CtInclusion, ServiceError> {
        self.log
            .lock()
            .expect("ct lock")
            .inclusion_by_hash(leaf_hash)
            .map_err(|e| ServiceError::NotFound(e.to_string()))
    }
}

pub struct WitnessService {
    witness: Mutex<Witness>,
    source: Arc<dyn JwksSource>,
    clock: Arc<dyn Clock>,
}

impl WitnessService {
    pub fn new(witness: Witness, source: Arc<dyn JwksSource>, clock: Arc<dyn Clock>) -> Self {
        Self {
            witness: Mutex::new(witness),
            source,
            clock,
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.witness.lock().expect("witness lock").verifying_key()
    }

    pub fn last_cosigned(&self) -> SignedDigest {
        self.witness.lock().expect("witness lock").last_cosigned().clone()
    }
}

impl WitnessEndpoint for WitnessService {
    fn id(&self) -> String {
        self.witness.lock().expect("witness lock").id().to_owned()
    }

    fn last_size(&self) -> Result<u64, ServiceError> {
        Ok(self.witness.lock().expect("witness lock").last_cosigned().tree_size)
    }

    fn review(&self, request: &CosignRequest) -> Result<Cosignature, ServiceError> {
        let now = self.clock.now();
        self.witness
            .lock()
            .expect("witness lock")
            .review(request, self.source.as_ref(), now)
            .map_err(|r| ServiceError::Rejected(format!("{}: {r}", r.code())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gq::RsaPublicKey;
    use crate::jose::SourceError;
    use crate::ledger::{client_check_quorum, verify_bracket, LogTrust};
    use num_bigint::BigUint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeMap;

    struct Fixed(Mutex<Jwks>);

    impl JwksSource for Fixed {
        fn fetch_jwks(&self, _: &str, _: u64) -> Result<Jwks, SourceError> {
            Ok(self.0.lock().unwrap().clone())
        }
    }

    fn jwks(seed: u32) -> Jwks {
        let n = (BigUint::from(1u8) << 600) + BigUint::from(2 * seed + 1);
        Jwks::new(vec![RsaPublicKey::new(n, 65537, format!("k{seed}")).unwrap()], 0).unwrap()
    }

    fn topology(clock: Arc<SimClock>, source: Arc<Fixed>) -> (LedgerService, LogTrust) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ledger = JwkLedger::new(SigningKey::generate(&mut rng), clock.now());
        let mut witnesses: Vec<Arc<dyn WitnessEndpoint>> = Vec::new();
        let mut keys = BTreeMap::new();
        for i in 0..3 {
            let w = Witness::new(format!("w{i}"), SigningKey::generate(&mut rng), ledger.verifying_key());
            ledger.register_witness(w.id(), w.verifying_key());
            keys.insert(w.id().to_owned(), w.verifying_key());
            witnesses.push(Arc::new(WitnessService::new(w, source.clone(), clock.clone())));
        }
        let trust = LogTrust {
            log_key: ledger.verifying_key(),
            witness_keys: keys,
            quorum: 2,
        };
        (LedgerService::new(ledger, witnesses, clock), trust)
    }

    #[test]
    fn append_runs_cosigning_round() {
        let clock = Arc::new(SimClock::new(1_000));
        let source = Arc::new(Fixed(Mutex::new(jwks(1))));
        let (svc, trust) = topology(clock.clone(), source.clone());
        let published = svc.publish("iss", &jwks(1)).unwrap();
        assert!(!published.duplicate);
        assert_eq!(client_check_quorum(&published.digest, &trust), Ok(3));
        let again = svc.publish("iss", &jwks(1)).unwrap();
        assert!(again.duplicate);
        assert_eq!(svc.size(), 1);
    }

    #[test]
    fn stale_open_bracket_is_refreshed() {
        let clock = Arc::new(SimClock::new(1_000));
        let source = Arc::new(Fixed(Mutex::new(jwks(1))));
        let (svc, trust) = topology(clock.clone(), source);
        svc.publish("iss", &jwks(1)).unwrap();
        clock.set(1_500);
        let bracket = svc.query_at("iss", 1_400).unwrap();
        assert_eq!(bracket.digest.timestamp, 1_500);
        assert!(verify_bracket(&bracket, "iss", 1_400, &trust).is_ok());
        assert!(matches!(svc.query_at("iss", 2_000), Err(ServiceError::Rejected(_))));
        assert!(matches!(svc.query_at("iss", 10), Err(ServiceError::NotFound(_))));
    }

    #[test]
    fn mismatched_keyset_gets_no_quorum() {
        let clock = Arc::new(SimClock::new(1_000));
        let source = Arc::new(Fixed(Mutex::new(jwks(1))));
        let (svc, trust) = topology(clock, source);
        let published = svc.publish("iss", &jwks(2)).unwrap();
        assert!(client_check_quorum(&published.digest, &trust).is_err());
    }

    #[test]
    #[should_panic(expected = "no clock is allowed")]
    fn poisoned_clock_panics() {
        PoisonedClock.now();
    }
}
