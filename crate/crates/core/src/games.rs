//! Executable security games: completeness, unforgeability against an
//! adversary holding the CA key, and replay of embedded token material.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use num_bigint::BigUint;
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bigint::{random_unit, to_fixed_be};
use crate::ca::claim_map;
use crate::cert::{self, LeafTemplate, OID_SIGNING_INPUT};
use crate::gq::{self, GqProof, PaddedMessage, RsaPublicKey};
use crate::idp::RsaKeyPair;
use crate::jose::{encode_segment, parse_compact, verify_rs256, Audience, JwtHeader, OidcClaims};
use crate::keys::SigningKey;
use crate::sim::{Requested, Topology, TopologyError};

/// Counts for one game or adversary strategy. For completeness `successes`
/// counts accepted certificates; for attacks it counts adversary wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameTally {
    pub name: String,
    pub trials: u64,
    pub successes: u64,
}

impl GameTally {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            trials: 0,
            successes: 0,
        }
    }

    fn record(&mut self, success: bool) {
        self.trials += 1;
        self.successes += success as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

/// Issue-then-verify with random identities, token lifetimes and clock
/// steps. With `rotations`, IdP keys rotate at random points and all
/// certificates are verified only after the last rotation.
pub fn completeness(topo: &Topology, trials: usize, rotations: bool) -> Result<GameTally, TopologyError> {
    let mut tally = GameTally::new("completeness");
    let mut issued = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (sub, lifetime, step, rotate) = {
            let mut rng = topo.rng();
            (
                Topology::random_subject(&mut *rng),
                rng.gen_range(60..=900u64),
                rng.gen_range(0..=30u64),
                rotations && rng.gen_bool(0.2),
            )
        };
        topo.clock.advance(step);
        let got = topo.request_with(&sub, |mut r| {
            r.lifetime = lifetime;
            r
        })?;
        issued.push(got.issued.leaf_der());
        if rotate {
            topo.clock.advance(1);
            topo.rotate()?;
        }
        if !rotations {
            tally.record(topo.verify(issued.last().expect("just pushed")).accepted());
        }
    }
    if rotations {
        topo.clock.advance(60);
        for der in &issued {
            tally.record(topo.verify(der).accepted());
        }
    }
    Ok(tally)
}

/// Proof-construction strategies for an adversary that holds the CA key
/// but has no token signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForgeryStrategy {
    /// Well-framed proof with random commitments and responses.
    RandomProof,
    /// Transcripts from the simulator for self-chosen challenges.
    SimulatedTranscript,
    /// The proof from another party's honestly issued certificate.
    TransplantedProof,
}

impl ForgeryStrategy {
    pub const ALL: [ForgeryStrategy; 3] = [
        ForgeryStrategy::RandomProof,
        ForgeryStrategy::SimulatedTranscript,
        ForgeryStrategy::TransplantedProof,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomProof => "random-proof",
            Self::SimulatedTranscript => "simulated-transcript",
            Self::TransplantedProof => "transplanted-proof",
        }
    }
}

/// Header and claims for a token the adversary wants to exist.
pub fn fabricated_signing_input(topo: &Topology, victim: &str) -> Vec<u8> {
    let now = topo.now();
    let kid = topo.idp.with_state(|s| s.signing_key().public_key().key_id().to_owned());
    let header = JwtHeader {
        alg: "RS256".into(),
        kid: Some(kid),
        typ: Some("JWT".into()),
    };
    let claims = OidcClaims {
        iss: topo.config.issuer.clone(),
        sub: victim.into(),
        aud: Audience::One(topo.ca.config().ca_id.clone()),
        exp: now + 300,
        iat: now,
        nonce: None,
        email: None,
    };
    format!("{}.{}", encode_segment(&header), encode_segment(&claims)).into_bytes()
}

/// Builds and signs (with the CA key, after CT logging) a certificate
/// carrying `signing_input` and `proof`.
pub fn rogue_certificate(
    topo: &Topology,
    signing_input: &[u8],
    proof: &[u8],
    subject_key: &SigningKey,
) -> Result<Vec<u8>, TopologyError> {
    let unsigned = crate::jose::UnsignedToken::parse(signing_input)
        .map_err(|e| TopologyError::Cert(cert::CertError::Unsupported(e.to_string())))?;
    let fields = claim_map(&unsigned.claims, topo.trust.cert_lifetime)
        .map_err(|e| TopologyError::Cert(cert::CertError::Unsupported(e.to_string())))?;
    let name = topo.ca.root().tbs_certificate.subject.clone();
    let mut serial = [0u8; 16];
    topo.rng().fill_bytes(&mut serial);
    serial[0] = (serial[0] & 0x7f) | 1;
    let vk = subject_key.verifying_key();
    let tbs = cert::build_leaf_tbs(&LeafTemplate {
        serial: &serial,
        ca_name: &name,
        fields: &fields,
        subject_key: &vk,
        signing_input,
        proof,
    })?;
    topo.sign_with_fresh_sct(tbs)
}

fn current_idp_key(topo: &Topology) -> RsaPublicKey {
    topo.idp.with_state(|s| s.signing_key().public_key().clone())
}

fn forged_proof<R: RngCore + CryptoRng>(
    strategy: ForgeryStrategy,
    pk: &RsaPublicKey,
    signing_input: &[u8],
    lambda: u32,
    donor: &GqProof,
    rng: &mut R,
) -> Vec<u8> {
    let params = gq::round_count(lambda, pk.exponent()).expect("valid profile");
    let rounds = params.rounds as usize;
    let n = pk.modulus();
    let len = pk.modulus_len();
    let make = |commitments, responses| GqProof {
        challenge_bits: params.challenge_bits,
        modulus_len: len,
        commitments,
        responses,
        key_id: pk.key_id().to_owned(),
    };
    match strategy {
        ForgeryStrategy::RandomProof => {
            let mut draw = || (0..rounds).map(|_| random_unit(rng, n)).collect::<Vec<_>>();
            let (t, z) = (draw(), draw());
            make(t, z).to_bytes()
        }
        ForgeryStrategy::SimulatedTranscript => {
            let statement = PaddedMessage::new(pk, signing_input).expect("key long enough");
            let bound = 1u64 << params.challenge_bits;
            let challenges: Vec<u64> = (0..rounds).map(|_| rng.gen_range(0..bound)).collect();
            let (t, z) = gq::simulate(pk, statement.value(), &challenges, rng).expect("statement invertible");
            make(t, z).to_bytes()
        }
        ForgeryStrategy::TransplantedProof => donor.to_bytes(),
    }
}

/// Runs one forgery strategy `trials` times against the full verifier.
pub fn unforgeability(
    topo: &Topology,
    strategy: ForgeryStrategy,
    trials: usize,
) -> Result<GameTally, TopologyError> {
    let mut tally = GameTally::new(strategy.name());
    // A public, honestly issued certificate supplies the transplant donor.
    let donor_cert = topo.request("donor@example.com")?;
    let donor = GqProof::from_bytes(&cert::leaf_contents(&donor_cert.issued.leaf)?.proof)
        .expect("honest proof decodes");
    let pk = current_idp_key(topo);
    let adversary_key = SigningKey::generate(&mut *topo.rng());
    for i in 0..trials {
        let victim = format!("victim{i}@example.com");
        let signing_input = fabricated_signing_input(topo, &victim);
        let proof = {
            let mut rng = topo.rng();
            forged_proof(strategy, &pk, &signing_input, topo.trust.lambda, &donor, &mut *rng)
        };
        let der = rogue_certificate(topo, &signing_input, &proof, &adversary_key)?;
        tally.record(topo.verify(&der).accepted());
    }
    Ok(tally)
}

/// Interactive GQ soundness: the forger guesses each challenge in advance
/// and commits to `T = z^e * X^-c'`. A round is won only if the verifier's
/// uniform challenge in `[0, e)` equals the guess and the round equation
/// holds for the forger's response.
pub fn challenge_guessing<R: RngCore + CryptoRng>(
    pk: &RsaPublicKey,
    statement: &BigUint,
    rounds: usize,
    trials: usize,
    rng: &mut R,
) -> GameTally {
    let mut tally = GameTally::new(&format!("challenge-guessing(e={}, t={rounds})", pk.exponent()));
    for _ in 0..trials {
        let mut won = true;
        for _ in 0..rounds {
            let guess = gq::interactive_challenge(pk, rng);
            let (t, z) = gq::simulate(pk, statement, &[guess], rng).expect("statement invertible");
            let challenge = gq::interactive_challenge(pk, rng);
            if challenge != guess || !gq::check_round(pk, statement, &t[0], challenge, &z[0]) {
                won = false;
                break;
            }
        }
        tally.record(won);
    }
    tally
}

/// Whether a compact token would be accepted by a relying party that
/// trusts every key the IdP has ever published.
pub fn relying_party_accepts(topo: &Topology, compact: &[u8]) -> bool {
    let Ok(token) = parse_compact(compact) else {
        return false;
    };
    let keys: Vec<RsaPublicKey> = topo.idp.with_state(|s| {
        s.active_keys()
            .keys()
            .iter()
            .chain(s.retired_keys().iter().flat_map(|(j, _)| j.keys()))
            .cloned()
            .collect()
    });
    keys.iter().any(|k| verify_rs256(k, &token).is_ok())
}

/// Candidate third segments an observer can cut from a certificate's proof.
fn signature_candidates(proof: &GqProof, pk: &RsaPublicKey, variant: usize, rng: &mut impl Rng) -> Vec<Vec<u8>> {
    let k = pk.modulus_len();
    let fit = |v: &BigUint| to_fixed_be(&(v % pk.modulus()), k).expect("reduced mod n");
    let i = rng.gen_range(0..proof.rounds());
    match variant % 4 {
        0 => vec![proof.to_bytes()],
        1 => vec![fit(&proof.responses[i])],
        2 => vec![fit(&proof.commitments[i])],
        _ => vec![fit(&(&proof.responses[i] * &proof.commitments[i]))],
    }
}

/// Replay by extraction: take the embedded `header.payload` and try to
/// complete it into a valid token using bytes from the certificate. If the
/// certificate already embeds a complete token (the insecure design), that
/// token is tried as is.
pub fn replay_extraction(topo: &Topology, certs: &[Vec<u8>], trials: usize) -> Result<GameTally, TopologyError> {
    let mut tally = GameTally::new("replay-extraction");
    let pk = current_idp_key(topo);
    for trial in 0..trials {
        let der = &certs[trial % certs.len()];
        let leaf = cert::parse_der(der)?;
        let contents = cert::leaf_contents(&leaf)?;
        let embedded = &contents.signing_input;
        let won = if embedded.iter().filter(|&&b| b == b'.').count() == 2 {
            relying_party_accepts(topo, embedded)
        } else {
            let proof = GqProof::from_bytes(&contents.proof).ok();
            let candidates = match &proof {
                Some(p) => signature_candidates(p, &pk, trial, &mut *topo.rng()),
                None => vec![contents.proof.clone()],
            };
            candidates.iter().any(|sig| {
                let mut token = embedded.clone();
                token.push(b'.');
                token.extend_from_slice(URL_SAFE_NO_PAD.encode(sig).as_bytes());
                relying_party_accepts(topo, &token)
            })
        };
        tally.record(won);
    }
    Ok(tally)
}

/// The insecure design: a certificate embedding the complete token.
pub fn strawman_certificate(topo: &Topology, requested: &Requested) -> Result<Vec<u8>, TopologyError> {
    let compact = requested.token.to_compact();
    topo.reissue(&requested.issued.leaf, |tbs| {
        cert::set_octet_extension(tbs, OID_SIGNING_INPUT, compact.as_bytes()).expect("encodes");
    })
}

/// `base^k mod n` for every `k` in `-range..=range`, indexed by `k + range`.
fn signed_powers(base: &BigUint, n: &BigUint, range: i32) -> Vec<BigUint> {
    let inverse = base.modinv(n).expect("unit");
    let mut out = vec![BigUint::from(1u8); (2 * range + 1) as usize];
    let mid = range as usize;
    for k in 1..=mid {
        out[mid + k] = &out[mid + k - 1] * base % n;
        out[mid - k] = &out[mid - k + 1] * &inverse % n;
    }
    out
}

/// Searches one transcript for a signature on `x`: every
/// `z_i^a * T_i^b * X^k` and `(z_i / z_j)^a * (T_i / T_j)^b` with exponents
/// in `-range..=range`. Candidates are tested through their e-th powers,
/// which are products of precomputed powers of `z^e`, `T^e` and `X^e`.
pub fn recombination_search(pk: &RsaPublicKey, x: &BigUint, proof: &GqProof, range: i32) -> Option<BigUint> {
    let n = pk.modulus();
    let span = 2 * range as usize + 1;
    let zero = range as usize;
    let powers = |v: &BigUint| (signed_powers(v, n, range), signed_powers(&pk.apply(v), n, range));
    let (xs, xe) = powers(x);
    let (zs, ze): (Vec<_>, Vec<_>) = proof.responses.iter().map(powers).unzip();
    let (ts, te): (Vec<_>, Vec<_>) = proof.commitments.iter().map(powers).unzip();
    for i in 0..proof.rounds() {
        for a in 0..span {
            for b in 0..span {
                let zt = &ze[i][a] * &te[i][b] % n;
                for k in 0..span {
                    if (a, b, k) == (zero, zero, zero) {
                        continue;
                    }
                    if &zt * &xe[k] % n == *x {
                        return Some(&zs[i][a] * &ts[i][b] % n * &xs[k] % n);
                    }
                }
            }
        }
        for j in 0..proof.rounds() {
            if i == j {
                continue;
            }
            // (z_i / z_j)^a = z_i^a * z_j^-a, likewise for T.
            for a in 0..span {
                let za = &ze[i][a] * &ze[j][span - 1 - a] % n;
                for b in 0..span {
                    if (a, b) == (zero, zero) {
                        continue;
                    }
                    if &za * &te[i][b] % n * &te[j][span - 1 - b] % n == *x {
                        let cand = &zs[i][a] * &zs[j][span - 1 - a] % n * &ts[i][b] % n * &ts[j][span - 1 - b] % n;
                        return Some(cand);
                    }
                }
            }
        }
    }
    None
}

/// Runs [`recombination_search`] over `trials` fresh honest proofs.
pub fn replay_recombination<R: RngCore + CryptoRng>(
    key: &RsaKeyPair,
    signing_input: &[u8],
    lambda: u32,
    range: i32,
    trials: usize,
    rng: &mut R,
) -> GameTally {
    let pk = key.public_key();
    let statement = PaddedMessage::new(pk, signing_input).expect("key long enough");
    let sigma = BigUint::from_bytes_be(&key.sign_rs256(signing_input));
    let mut tally = GameTally::new("replay-recombination");
    for _ in 0..trials {
        let proof = gq::prove(pk, signing_input, &sigma, lambda, rng).expect("honest proof");
        tally.record(recombination_search(pk, statement.value(), &proof, range).is_some());
    }
    tally
}
