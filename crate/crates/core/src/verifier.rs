//! Certificate verification.
//!
//! Seven ordered steps; the first failure ends verification. The verifier
//! has no clock: the SCT timestamp is the only notion of "now".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use x509_cert::Certificate;

use crate::ca::claim_map;
use crate::cert::{self, CertError};
use crate::ct::{ct_leaf_hash, Sct};
use crate::gq::{self, GqProof, RsaPublicKey};
use crate::jose::{validate_claims, ClaimsPolicy, UnsignedToken, MAX_TRIAL_KEYS};
use crate::keys::VerifyingKey;
use crate::ledger::{verify_bracket, LogTrust};
use crate::service::{CtView, LedgerView};

/// Out-of-band verifier configuration.
#[derive(Debug, Clone)]
pub struct TrustRoots {
    pub ca_root: Certificate,
    pub ledger: LogTrust,
    pub ct_key: VerifyingKey,
    pub expected_issuer: String,
    pub expected_ca_audience: String,
    pub lambda: u32,
    pub cert_lifetime: u64,
    pub clock_skew: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrustRootsError {
    #[error("quorum {quorum} exceeds the {witnesses} configured witnesses")]
    QuorumTooLarge { quorum: usize, witnesses: usize },
    #[error("CA root: {0}")]
    Root(CertError),
    #[error("CA root is not self-signed")]
    RootNotSelfSigned,
    #[error("invalid trust roots document: {0}")]
    Document(String),
}

#[derive(Serialize, Deserialize)]
struct TrustRootsWire {
    ca_root: String,
    ledger_key: VerifyingKey,
    witness_keys: BTreeMap<String, VerifyingKey>,
    quorum: usize,
    ct_key: VerifyingKey,
    expected_issuer: String,
    expected_ca_audience: String,
    lambda: u32,
    cert_lifetime: u64,
    clock_skew: u64,
}

impl TrustRoots {
    pub fn validate(&self) -> Result<(), TrustRootsError> {
        let witnesses = self.ledger.witness_keys.len();
        if self.ledger.quorum > witnesses {
            return Err(TrustRootsError::QuorumTooLarge {
                quorum: self.ledger.quorum,
                witnesses,
            });
        }
        let key = cert::certificate_key(&self.ca_root).map_err(TrustRootsError::Root)?;
        if !cert::verify_signature(&self.ca_root, &key) {
            return Err(TrustRootsError::RootNotSelfSigned);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let wire = TrustRootsWire {
            ca_root: cert::to_pem(&self.ca_root),
            ledger_key: self.ledger.log_key,
            witness_keys: self.ledger.witness_keys.clone(),
            quorum: self.ledger.quorum,
            ct_key: self.ct_key,
            expected_issuer: self.expected_issuer.clone(),
            expected_ca_audience: self.expected_ca_audience.clone(),
            lambda: self.lambda,
            cert_lifetime: self.cert_lifetime,
            clock_skew: self.clock_skew,
        };
        serde_json::to_string_pretty(&wire).expect("trust roots serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, TrustRootsError> {
        let wire: TrustRootsWire =
            serde_json::from_str(json).map_err(|e| TrustRootsError::Document(e.to_string()))?;
        let roots = TrustRoots {
            ca_root: cert::from_pem(&wire.ca_root).map_err(TrustRootsError::Root)?,
            ledger: LogTrust {
                log_key: wire.ledger_key,
                witness_keys: wire.witness_keys,
                quorum: wire.quorum,
            },
            ct_key: wire.ct_key,
            expected_issuer: wire.expected_issuer,
            expected_ca_audience: wire.expected_ca_audience,
            lambda: wire.lambda,
            cert_lifetime: wire.cert_lifetime,
            clock_skew: wire.clock_skew,
        };
        roots.validate()?;
        Ok(roots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: u8,
    pub name: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtInclusionStatus {
    Verified,
    Offline,
    NotChecked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub step_results: Vec<StepResult>,
    pub current_time_used: Option<u64>,
    pub ct_inclusion: CtInclusionStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<cert::SanName>,
}

impl VerificationReport {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }

    /// The step that failed, if any.
    pub fn failed_step(&self) -> Option<u8> {
        self.step_results.iter().find(|s| !s.pass).map(|s| s.step)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const STEP_NAMES: [&str; 7] = [
    "certificate-and-sct",
    "current-time",
    "token-parse",
    "claims",
    "ledger-bracket",
    "proof",
    "claim-map",
];

struct Run {
    steps: Vec<StepResult>,
    current_time: Option<u64>,
    ct_inclusion: CtInclusionStatus,
    subject: Option<cert::SanName>,
}

impl Run {
    fn pass(&mut self, step: u8) {
        self.steps.push(StepResult {
            step,
            name: STEP_NAMES[step as usize - 1].into(),
            pass: true,
            reason: None,
        });
    }

    fn finish(self, failure: Option<(u8, String)>) -> VerificationReport {
        let mut steps = self.steps;
        if let Some((step, reason)) = &failure {
            steps.push(StepResult {
                step: *step,
                name: STEP_NAMES[*step as usize - 1].into(),
                pass: false,
                reason: Some(reason.clone()),
            });
        }
        VerificationReport {
            verdict: if failure.is_none() { Verdict::Accept } else { Verdict::Reject },
            step_results: steps,
            current_time_used: self.current_time,
            ct_inclusion: self.ct_inclusion,
            subject: self.subject,
        }
    }
}

/// Input that is not a certificate at all.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed input: {0}")]
pub struct MalformedInput(pub String);

/// Verifies a PEM leaf (a trailing chain is ignored; the root comes from
/// the trust roots).
pub fn verify_pem(
    pem: &str,
    trust: &TrustRoots,
    ledger: &dyn LedgerView,
    ct: Option<&dyn CtView>,
) -> Result<VerificationReport, MalformedInput> {
    let chain = cert::chain_from_pem(pem).map_err(|e| MalformedInput(e.to_string()))?;
    let der = der::Encode::to_der(&chain[0]).map_err(|e| MalformedInput(e.to_string()))?;
    Ok(verify(&der, trust, ledger, ct))
}

pub fn verify(
    der: &[u8],
    trust: &TrustRoots,
    ledger: &dyn LedgerView,
    ct: Option<&dyn CtView>,
) -> VerificationReport {
    let mut run = Run {
        steps: Vec::with_capacity(7),
        current_time: None,
        ct_inclusion: CtInclusionStatus::NotChecked,
        subject: None,
    };
    let failure = run_steps(&mut run, der, trust, ledger, ct).err();
    run.finish(failure)
}

fn run_steps(
    run: &mut Run,
    der: &[u8],
    trust: &TrustRoots,
    ledger: &dyn LedgerView,
    ct: Option<&dyn CtView>,
) -> Result<(), (u8, String)> {
    let fail = |step: u8| move |reason: String| (step, reason);

    // 1. Chain to the CA root, SCT signature, CT inclusion when reachable.
    let leaf = cert::parse_der(der).map_err(|e| (1, format!("malformed-certificate: {e}")))?;
    let root = &trust.ca_root;
    let root_key = cert::certificate_key(root).map_err(|e| (1, format!("bad-ca-root: {e}")))?;
    if leaf.tbs_certificate.issuer != root.tbs_certificate.subject {
        return Err((1, "issuer-mismatch".into()));
    }
    if !cert::verify_signature(&leaf, &root_key) {
        return Err((1, "bad-ca-signature".into()));
    }
    let contents = cert::leaf_contents(&leaf).map_err(|e| (1, format!("malformed-certificate: {e}")))?;
    let sct = Sct::from_bytes(&contents.sct).map_err(|e| (1, format!("malformed-sct: {e}")))?;
    if !sct.verify(&trust.ct_key, &contents.precert_tbs) {
        return Err((1, "bad-sct-signature".into()));
    }
    let sct_time = sct.timestamp_secs();
    if sct_time < contents.not_before || sct_time > contents.not_after {
        return Err((1, "sct-outside-validity".into()));
    }
    let root_validity = &root.tbs_certificate.validity;
    if sct_time < root_validity.not_before.to_unix_duration().as_secs()
        || sct_time > root_validity.not_after.to_unix_duration().as_secs()
    {
        return Err((1, "sct-outside-root-validity".into()));
    }
    run.ct_inclusion = match ct {
        None => CtInclusionStatus::Offline,
        Some(ct) => {
            let leaf_hash = ct_leaf_hash(sct.timestamp_ms, &contents.precert_tbs);
            match ct.inclusion(&leaf_hash) {
                Ok(inclusion) if inclusion.verify(&trust.ct_key, &leaf_hash) => CtInclusionStatus::Verified,
                Ok(_) => return Err((1, "ct-inclusion-invalid".into())),
                Err(crate::service::ServiceError::Unavailable(_)) => CtInclusionStatus::Offline,
                Err(e) => return Err((1, format!("ct-inclusion-missing: {e}"))),
            }
        }
    };
    run.pass(1);

    // 2. The SCT timestamp is the current time from here on.
    run.current_time = Some(sct_time);
    run.pass(2);

    // 3. Header and claims from the embedded signing input.
    let token = UnsignedToken::parse(&contents.signing_input).map_err(|e| (3, e.to_string()))?;
    run.pass(3);

    // 4. Claims at the SCT time; no signature or nonce check.
    let policy = ClaimsPolicy::new(&trust.expected_issuer, &trust.expected_ca_audience).with_skew(trust.clock_skew);
    validate_claims(&token.claims, &policy, sct_time).map_err(|e| (4, e.code().to_owned()))?;
    run.pass(4);

    // 5. Key set live at the SCT time, from a quorum-cosigned bracket.
    let bracket = ledger
        .query_at(&trust.expected_issuer, sct_time)
        .map_err(|e| (5, format!("ledger-query: {e}")))?;
    let jwks = verify_bracket(&bracket, &trust.expected_issuer, sct_time, &trust.ledger)
        .map_err(|e| (5, e.to_string()))?;
    run.pass(5);

    // 6. Proof of knowledge of the token signature.
    let proof = GqProof::from_bytes(&contents.proof).map_err(|e| (6, format!("proof-decode: {e}")))?;
    let check = |pk: &RsaPublicKey| gq::verify_proof(pk, &contents.signing_input, &proof, trust.lambda);
    match token.header.kid.as_deref() {
        Some(kid) => {
            let pk = jwks.find(kid).ok_or_else(|| (6, "key-not-found".to_owned()))?;
            check(pk).map_err(|e| e.to_string()).map_err(fail(6))?;
        }
        None => {
            let ok = jwks.keys().iter().take(MAX_TRIAL_KEYS).any(|pk| check(pk).is_ok());
            if !ok {
                return Err((6, "no-key-accepts-proof".into()));
            }
        }
    }
    run.pass(6);

    // 7. Certificate fields must be exactly what the claims map to.
    let fields = claim_map(&token.claims, trust.cert_lifetime).map_err(|e| (7, e.to_string()))?;
    let san = cert::san_extension_value(&fields.san).map_err(|e| (7, e.to_string()))?;
    if san != contents.san {
        return Err((7, "san-mismatch".into()));
    }
    if fields.issuer != contents.issuer {
        return Err((7, "issuer-extension-mismatch".into()));
    }
    if (fields.not_before, fields.not_after) != (contents.not_before, contents.not_after) {
        return Err((7, "validity-mismatch".into()));
    }
    if !leaf.tbs_certificate.subject.0.is_empty() {
        return Err((7, "unexpected-subject".into()));
    }
    run.subject = Some(fields.san);
    run.pass(7);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_shape() {
        let mut run = Run {
            steps: Vec::new(),
            current_time: Some(5),
            ct_inclusion: CtInclusionStatus::Offline,
            subject: None,
        };
        run.pass(1);
        run.pass(2);
        let report = run.finish(Some((3, "bad".into())));
        assert_eq!(report.verdict, Verdict::Reject);
        assert_eq!(report.failed_step(), Some(3));
        let steps: Vec<u8> = report.step_results.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![1, 2, 3]);
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["verdict"], "reject");
        assert_eq!(json["step_results"][2]["name"], "token-parse");
        assert_eq!(json["current_time_used"], 5);
        assert_eq!(json["ct_inclusion"], "offline");
    }
}
