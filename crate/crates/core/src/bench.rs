//! Size and timing measurements for one profile.

use std::time::{Duration, Instant};

use der::Encode;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::cert::{self, OID_GQ_PROOF, OID_SIGNING_INPUT};
use crate::gq::{self, GqProof};
use crate::sim::{Profile, Topology, TopologyConfig, TopologyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub profile: Profile,
    pub rounds: u32,
    pub challenge_bits: u32,
    pub kid_bytes: usize,
    pub proof_bytes: usize,
    /// `5 + 2 * t * L + 1 + |kid|`.
    pub proof_bytes_formula: usize,
    /// Proof for the same key and statement at lambda = 64.
    pub proof_bytes_lambda64: usize,
    pub cert_bytes: usize,
    pub cert_bytes_without_extensions: usize,
    pub ratio: f64,
    pub prove_ms: f64,
    pub verify_ms: f64,
    pub issuance_ms: f64,
    pub iterations: usize,
}

fn median_ms(mut samples: Vec<Duration>) -> f64 {
    samples.sort();
    samples[samples.len() / 2].as_secs_f64() * 1e3
}

/// Builds an in-process topology for `profile`, issues `iterations`
/// certificates and measures the last one.
pub fn measure(profile: Profile, seed: u64, iterations: usize) -> Result<BenchReport, TopologyError> {
    let iterations = iterations.max(1);
    let topo = Topology::new(TopologyConfig::new(profile, seed))?;

    let mut issuance = Vec::with_capacity(iterations);
    let mut last = None;
    for i in 0..iterations {
        topo.clock.advance(1);
        let start = Instant::now();
        let got = topo.request(&format!("bench{i}@example.com"))?;
        issuance.push(start.elapsed());
        last = Some(got);
    }
    let requested = last.expect("at least one iteration");
    let leaf = &requested.issued.leaf;
    let contents = cert::leaf_contents(leaf)?;

    let pk = topo.idp.with_state(|s| s.signing_key().public_key().clone());
    let sigma = BigUint::from_bytes_be(requested.token.signature_bytes());
    let signing_input = requested.token.signing_input();
    let (mut prove_t, mut verify_t) = (Vec::new(), Vec::new());
    let mut rng = topo.rng();
    for _ in 0..iterations {
        let start = Instant::now();
        let proof = gq::prove(&pk, signing_input, &sigma, profile.lambda, &mut *rng).expect("honest proof");
        prove_t.push(start.elapsed());
        let start = Instant::now();
        gq::verify_proof(&pk, signing_input, &proof, profile.lambda).expect("honest proof verifies");
        verify_t.push(start.elapsed());
    }
    let lambda64 = gq::prove(&pk, signing_input, &sigma, 64, &mut *rng).expect("honest proof");
    drop(rng);

    let params = gq::round_count(profile.lambda, profile.exponent).expect("valid profile");
    let kid_bytes = pk.key_id().len();
    let cert_bytes = leaf.to_der().map_err(cert::CertError::from)?.len();
    let mut stripped = leaf.tbs_certificate.clone();
    if let Some(exts) = stripped.extensions.as_mut() {
        exts.retain(|e| e.extn_id != OID_SIGNING_INPUT && e.extn_id != OID_GQ_PROOF);
    }
    let stripped = cert::sign_tbs(stripped, topo.ca_signing_key())?;
    let without = stripped.to_der().map_err(cert::CertError::from)?.len();

    Ok(BenchReport {
        profile,
        rounds: params.rounds,
        challenge_bits: params.challenge_bits,
        kid_bytes,
        proof_bytes: contents.proof.len(),
        proof_bytes_formula: GqProof::encoded_len(params.rounds as usize, pk.modulus_len(), kid_bytes),
        proof_bytes_lambda64: lambda64.to_bytes().len(),
        cert_bytes,
        cert_bytes_without_extensions: without,
        ratio: cert_bytes as f64 / without as f64,
        prove_ms: median_ms(prove_t),
        verify_ms: median_ms(verify_t),
        issuance_ms: median_ms(issuance),
        iterations,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let p = &self.profile;
        let rows = [
            ("profile", format!("{}-bit n, e={}, lambda={}", p.modulus_bits, p.exponent, p.lambda)),
            ("rounds", format!("{} ({} challenge bits)", self.rounds, self.challenge_bits)),
            ("kid bytes", self.kid_bytes.to_string()),
            ("proof bytes", self.proof_bytes.to_string()),
            ("proof bytes (formula)", self.proof_bytes_formula.to_string()),
            ("proof bytes (lambda=64)", self.proof_bytes_lambda64.to_string()),
            ("cert bytes", self.cert_bytes.to_string()),
            ("cert bytes without 9901/9902", self.cert_bytes_without_extensions.to_string()),
            ("ratio", format!("{:.2}", self.ratio)),
            ("prove ms (median)", format!("{:.3}", self.prove_ms)),
            ("verify ms (median)", format!("{:.3}", self.verify_ms)),
            ("issuance ms (median)", format!("{:.3}", self.issuance_ms)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_sizes_follow_wire_format() {
        let report = measure(Profile::TOY, 3, 1).unwrap();
        // e = 7: two challenge bits, lambda 16 -> 8 rounds over 64-byte n.
        assert_eq!(report.rounds, 8);
        assert_eq!(report.proof_bytes, 5 + 2 * 8 * 64 + 1 + report.kid_bytes);
        assert_eq!(report.proof_bytes, report.proof_bytes_formula);
        assert_eq!(report.proof_bytes_lambda64, 5 + 2 * 32 * 64 + 1 + report.kid_bytes);
        assert!(report.ratio > 1.0);
        assert!(report.to_text().contains("ratio"));
    }
}
