//! In-process deployment: simulated IdP, ledger with witnesses, CT log and
//! CA on one shared clock. Used by the games, the acceptance suite and the
//! CLI's offline commands.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use der::Encode;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use x509_cert::{Certificate, TbsCertificate};

use crate::ca::{pop_message, CaBackends, CaConfig, CertificateAuthority, IssuanceRequest, IssueError, IssuedCertificate};
use crate::cert::{self, CertError};
use crate::idp::{IdpError, IdpState, TokenRequest};
use crate::jose::{Jwks, JwksSource, OidcToken, SourceError};
use crate::keys::SigningKey;
use crate::ledger::{JwkLedger, LogTrust, Witness};
use crate::service::{Clock, CtService, CtSubmitter, LedgerService, SimClock, WitnessEndpoint, WitnessService};
use crate::verifier::{self, TrustRoots, VerificationReport};

/// Key size, exponent and security parameter used together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub modulus_bits: usize,
    pub exponent: u64,
    pub lambda: u32,
}

impl Profile {
    pub const TOY: Profile = Profile {
        modulus_bits: 512,
        exponent: 7,
        lambda: 16,
    };

    pub const DEFAULT: Profile = Profile {
        modulus_bits: 2048,
        exponent: 65537,
        lambda: 128,
    };

    pub fn by_name(name: &str) -> Option<Profile> {
        match name {
            "toy" => Some(Self::TOY),
            "default" => Some(Self::DEFAULT),
            _ => None,
        }
    }
}

/// Simulated identity provider on the shared clock.
pub struct SimIdp {
    state: RwLock<IdpState>,
    rng: Mutex<ChaCha20Rng>,
    clock: Arc<dyn Clock>,
}

impl SimIdp {
    pub fn new(issuer: &str, profile: Profile, clock: Arc<dyn Clock>, seed: u64) -> Result<Self, IdpError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let state = IdpState::generate(issuer, profile.modulus_bits, profile.exponent, clock.now(), &mut rng)?;
        Ok(Self {
            state: RwLock::new(state),
            rng: Mutex::new(rng),
            clock,
        })
    }

    pub fn issuer(&self) -> String {
        self.state.read().expect("idp lock").issuer_url().to_owned()
    }

    pub fn token(&self, request: &TokenRequest) -> Result<OidcToken, IdpError> {
        self.state.read().expect("idp lock").issue_token(request, self.clock.now())
    }

    pub fn rotate(&self) -> Result<(), IdpError> {
        let now = self.clock.now();
        let mut rng = self.rng.lock().expect("rng lock");
        self.state.write().expect("idp lock").rotate(now, &mut *rng)
    }

    /// Read access to the full state, including private keys.
    pub fn with_state<T>(&self, f: impl FnOnce(&IdpState) -> T) -> T {
        f(&self.state.read().expect("idp lock"))
    }
}

impl JwksSource for SimIdp {
    fn fetch_jwks(&self, issuer: &str, now: u64) -> Result<Jwks, SourceError> {
        let state = self.state.read().expect("idp lock");
        if state.issuer_url() != issuer {
            return Err(SourceError::UnknownIssuer(issuer.to_owned()));
        }
        let mut jwks = state.active_keys().clone();
        jwks.fetched_at = now;
        Ok(jwks)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub profile: Profile,
    pub seed: u64,
    pub start_time: u64,
    pub issuer: String,
    pub witnesses: usize,
    pub quorum: usize,
    pub token_lifetime: u64,
    pub cert_lifetime: u64,
}

impl TopologyConfig {
    pub fn new(profile: Profile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            start_time: 1_750_000_000,
            issuer: "https://idp.poa.test".into(),
            witnesses: 3,
            quorum: 2,
            token_lifetime: 300,
            cert_lifetime: crate::ca::DEFAULT_CERT_LIFETIME,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("identity provider: {0}")]
    Idp(#[from] IdpError),
    #[error("certificate: {0}")]
    Cert(#[from] CertError),
    #[error("issuance: {0}")]
    Issue(#[from] IssueError),
}

/// A certificate together with what the requester used to obtain it.
#[derive(Debug, Clone)]
pub struct Requested {
    pub issued: IssuedCertificate,
    pub token: OidcToken,
    pub key: SigningKey,
}

pub struct Topology {
    pub config: TopologyConfig,
    pub clock: Arc<SimClock>,
    pub idp: Arc<SimIdp>,
    pub ledger: Arc<LedgerService>,
    pub witnesses: Vec<Arc<WitnessService>>,
    pub ct: Arc<CtService>,
    pub ca: Arc<CertificateAuthority>,
    pub trust: TrustRoots,
    ca_key: SigningKey,
    ledger_key: SigningKey,
    witness_keys: Vec<SigningKey>,
    rng: Mutex<ChaCha20Rng>,
}

impl Topology {
    pub fn new(config: TopologyConfig) -> Result<Self, TopologyError> {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let clock = Arc::new(SimClock::new(config.start_time));
        let dyn_clock: Arc<dyn Clock> = clock.clone();
        let idp = Arc::new(SimIdp::new(&config.issuer, config.profile, dyn_clock.clone(), rng.next_u64())?);
        let source: Arc<dyn JwksSource> = idp.clone();

        let ledger_key = SigningKey::generate(&mut rng);
        let mut ledger = JwkLedger::new(ledger_key.clone(), config.start_time);
        let mut witnesses = Vec::new();
        let mut witness_keys = Vec::new();
        let mut endpoints: Vec<Arc<dyn WitnessEndpoint>> = Vec::new();
        let mut trusted = BTreeMap::new();
        for i in 0..config.witnesses {
            let key = SigningKey::generate(&mut rng);
            let witness = Witness::new(format!("witness-{i}"), key.clone(), ledger.verifying_key());
            ledger.register_witness(witness.id(), witness.verifying_key());
            trusted.insert(witness.id().to_owned(), witness.verifying_key());
            let svc = Arc::new(WitnessService::new(witness, source.clone(), dyn_clock.clone()));
            endpoints.push(svc.clone());
            witnesses.push(svc);
            witness_keys.push(key);
        }
        let log_trust = LogTrust {
            log_key: ledger.verifying_key(),
            witness_keys: trusted,
            quorum: config.quorum,
        };
        let ledger = Arc::new(LedgerService::new(ledger, endpoints, dyn_clock.clone()));
        let ct = Arc::new(CtService::new(SigningKey::generate(&mut rng), dyn_clock.clone()));

        let ca_key = SigningKey::generate(&mut rng);
        let mut ca_config = CaConfig::new(&config.issuer);
        ca_config.lambda = config.profile.lambda;
        ca_config.cert_lifetime = config.cert_lifetime;
        let backends = CaBackends {
            jwks_source: source,
            ledger: ledger.clone(),
            ledger_trust: log_trust.clone(),
            ct: ct.clone(),
            ct_key: ct.verifying_key(),
        };
        let root_start = config.start_time - 86_400;
        let ca = Arc::new(CertificateAuthority::new(
            ca_config.clone(),
            ca_key.clone(),
            backends,
            root_start,
            rng.next_u64(),
        )?);
        let trust = TrustRoots {
            ca_root: ca.root().clone(),
            ledger: log_trust,
            ct_key: ct.verifying_key(),
            expected_issuer: config.issuer.clone(),
            expected_ca_audience: ca_config.ca_id.clone(),
            lambda: config.profile.lambda,
            cert_lifetime: ca_config.cert_lifetime,
            clock_skew: ca_config.clock_skew,
        };
        let topology = Self {
            config,
            clock,
            idp,
            ledger,
            witnesses,
            ct,
            ca,
            trust,
            ca_key,
            ledger_key,
            witness_keys,
            rng: Mutex::new(rng),
        };
        topology.sync_jwks()?;
        Ok(topology)
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    /// What the CA's JWKS poll loop does on each tick.
    pub fn sync_jwks(&self) -> Result<bool, IssueError> {
        let changed = self.ca.poll_jwks(self.now())?.changed;
        self.ca.publish_jwks()?;
        Ok(changed)
    }

    /// Rotates the IdP key and lets the CA pick up the change.
    pub fn rotate(&self) -> Result<(), TopologyError> {
        self.idp.rotate()?;
        self.sync_jwks()?;
        Ok(())
    }

    pub fn token_request(&self, sub: &str, nonce: Option<String>) -> TokenRequest {
        TokenRequest {
            sub: sub.to_owned(),
            aud: self.ca.config().ca_id.clone(),
            lifetime: self.config.token_lifetime,
            nonce,
        }
    }

    /// The requester flow: fresh key, challenge, token bound to the
    /// challenge, proof of possession, issuance.
    pub fn request(&self, sub: &str) -> Result<Requested, IssueError> {
        self.request_with(sub, |r| r)
    }

    /// Like [`Topology::request`] with a hook to alter the token request.
    pub fn request_with(
        &self,
        sub: &str,
        adjust: impl FnOnce(TokenRequest) -> TokenRequest,
    ) -> Result<Requested, IssueError> {
        let key = SigningKey::generate(&mut *self.rng.lock().expect("rng lock"));
        let now = self.now();
        let nonce = self.ca.challenge(&key.verifying_key(), now);
        let request = adjust(self.token_request(sub, Some(nonce.clone())));
        let token = self
            .idp
            .token(&request)
            .map_err(|e| IssueError::Internal(e.to_string()))?;
        let issued = self.ca.issue(
            &IssuanceRequest {
                token: token.to_compact(),
                public_key: key.verifying_key(),
                pop: key.sign(&pop_message(&nonce)),
            },
            now,
        )?;
        Ok(Requested { issued, token, key })
    }

    pub fn verify(&self, der: &[u8]) -> VerificationReport {
        verifier::verify(der, &self.trust, self.ledger.as_ref(), Some(self.ct.as_ref()))
    }

    /// The CA signing key, as handed to adversaries that control the CA.
    pub fn ca_signing_key(&self) -> &SigningKey {
        &self.ca_key
    }

    pub fn ledger_signing_key(&self) -> &SigningKey {
        &self.ledger_key
    }

    pub fn witness_signing_keys(&self) -> &[SigningKey] {
        &self.witness_keys
    }

    pub fn rng(&self) -> std::sync::MutexGuard<'_, ChaCha20Rng> {
        self.rng.lock().expect("rng lock")
    }

    /// Re-signs a modified copy of `leaf` with the CA key after logging the
    /// new precertificate: what a party holding the CA key can produce.
    pub fn reissue(
        &self,
        leaf: &Certificate,
        modify: impl FnOnce(&mut TbsCertificate),
    ) -> Result<Vec<u8>, TopologyError> {
        let mut tbs = leaf.tbs_certificate.clone();
        modify(&mut tbs);
        self.sign_with_fresh_sct(tbs)
    }

    pub fn sign_with_fresh_sct(&self, mut tbs: TbsCertificate) -> Result<Vec<u8>, TopologyError> {
        let precert = cert::precert_tbs_der(&tbs)?;
        let sct = self
            .ct
            .submit(&precert)
            .map_err(|e| IssueError::CtUnavailable(e.to_string()))?;
        cert::attach_sct(&mut tbs, &sct)?;
        let signed = cert::sign_tbs(tbs, &self.ca_key)?;
        Ok(signed.to_der().map_err(CertError::from)?)
    }

    /// A random subject: an email address or a URI.
    pub fn random_subject<R: Rng>(rng: &mut R) -> String {
        let id: u32 = rng.gen();
        if rng.gen_bool(0.5) {
            format!("user{id}@example.com")
        } else {
            format!("https://ci.example/job/{id}")
        }
    }
}
