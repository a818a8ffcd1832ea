//! Non-interactive Guillou-Quisquater proof of knowledge of an RSA signature.
//!
//! For an RS256 token the statement is the padded message `X` (the
//! EMSA-PKCS1-v1_5 encoding of the SHA-256 hash of the JWT signing input) and
//! the witness is the signature `σ` with `σ^e ≡ X (mod n)`. One round is the
//! classic sigma protocol:
//!
//! ```text
//! prover:   r <-$ Z_n^*,  T = r^e
//! verifier: c in [0, 2^b)
//! prover:   z = r * σ^c
//! check:    z^e == T * X^c   (mod n)
//! ```
//!
//! A cheating prover survives one round with probability at most `2^-b`, so
//! the proof repeats `t = ceil(λ / b)` rounds with `b = floor(log2 e)`. The
//! challenges come from a SHA-256 transcript hash binding the key, the
//! statement, every commitment, and a caller-supplied context.

use num_bigint::BigUint;
use num_traits::Zero;
use rand::{CryptoRng, Rng, RngCore};
use sha2::{Digest, Sha256};

use crate::bigint::{is_unit, random_unit, to_fixed_be};
use crate::jose::emsa::{self, EmsaError};

/// Domain separation tag for the Fiat-Shamir transcript.
pub const TRANSCRIPT_TAG: &[u8] = b"poa-gq-v1";

/// Wire format version byte.
pub const PROOF_VERSION: u8 = 0x01;

/// Default security level in bits.
pub const DEFAULT_LAMBDA: u32 = 128;

/// Largest repetition count representable in the proof encoding.
pub const MAX_ROUNDS: u32 = u8::MAX as u32;

/// Minimum modulus size outside of toy mode.
pub const MIN_PRODUCTION_BITS: u64 = 512;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("invalid exponent: e must be odd and at least 3")]
    InvalidExponent,
    #[error("modulus must be odd and larger than the exponent")]
    InvalidModulus,
    #[error("modulus has {0} bits, below the production minimum")]
    ModulusTooSmall(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GqError {
    #[error("invalid exponent: e must be odd and at least 3")]
    InvalidExponent,
    #[error("security parameter must be positive")]
    InvalidLambda,
    #[error("{0} rounds exceed the encodable maximum of {MAX_ROUNDS}")]
    TooManyRounds(u32),
    #[error("signature does not verify against the padded message")]
    SignatureMismatch,
    #[error("statement is not invertible modulo n; cannot simulate")]
    CannotSimulate,
    #[error("challenge {0} is not below the public exponent")]
    ChallengeOutOfRange(u64),
    #[error(transparent)]
    Encoding(#[from] EmsaError),
}

/// Why a proof was rejected. Rejection is an ordinary outcome, not a fault.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProofRejection {
    #[error("proof parameters (t={rounds}, b={bits}) do not match the configured security level")]
    ParameterMismatch { rounds: u32, bits: u32 },
    #[error("proof names key {found:?} but was checked against {expected:?}")]
    KeyMismatch { expected: String, found: String },
    #[error("proof modulus length {found} differs from key modulus length {expected}")]
    ModulusLengthMismatch { expected: usize, found: usize },
    #[error("round {0}: value outside [1, n)")]
    OutOfRange(usize),
    #[error("round {0}: value shares a factor with n")]
    NotCoprime(usize),
    #[error("round {0}: verification equation does not hold")]
    EquationFailed(usize),
    #[error("statement cannot be formed: {0}")]
    Statement(#[from] EmsaError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("proof encoding truncated")]
    Truncated,
    #[error("unsupported proof version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("proof declares zero rounds or zero challenge bits")]
    EmptyProof,
    #[error("proof declares zero-length modulus")]
    EmptyModulus,
    #[error("{0} trailing bytes after proof")]
    TrailingBytes(usize),
    #[error("key id is not UTF-8")]
    KeyIdEncoding,
}

/// An RSA verification key as published in a JWKS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RsaPublicKey {
    n: BigUint,
    e: u64,
    key_id: String,
}

impl RsaPublicKey {
    /// Builds a key without a size floor (toy moduli allowed).
    pub fn new(n: BigUint, e: u64, key_id: impl Into<String>) -> Result<Self, KeyError> {
        if e < 3 || e % 2 == 0 {
            return Err(KeyError::InvalidExponent);
        }
        if n.is_zero() || !n.bit(0) || n <= BigUint::from(e) {
            return Err(KeyError::InvalidModulus);
        }
        Ok(Self {
            n,
            e,
            key_id: key_id.into(),
        })
    }

    pub fn new_production(n: BigUint, e: u64, key_id: impl Into<String>) -> Result<Self, KeyError> {
        let bits = n.bits();
        if bits < MIN_PRODUCTION_BITS {
            return Err(KeyError::ModulusTooSmall(bits));
        }
        Self::new(n, e, key_id)
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn exponent(&self) -> u64 {
        self.e
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    /// Length of the modulus in bytes.
    pub fn modulus_len(&self) -> usize {
        self.n.bits().div_ceil(8) as usize
    }

    /// `value^e mod n`.
    pub fn apply(&self, value: &BigUint) -> BigUint {
        value.modpow(&BigUint::from(self.e), &self.n)
    }
}

/// The statement `X`: the padded SHA-256 hash of a JWT signing input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedMessage {
    value: BigUint,
    source: Vec<u8>,
}

impl PaddedMessage {
    pub fn new(pk: &RsaPublicKey, signing_input: &[u8]) -> Result<Self, EmsaError> {
        let value = emsa::encode_message(signing_input, pk.modulus_len())?;
        Ok(Self {
            value,
            source: signing_input.to_vec(),
        })
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn source(&self) -> &[u8] {
        &self.source
    }
}

/// Repetition parameters for a target security level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChallengeParams {
    pub rounds: u32,
    pub challenge_bits: u32,
}

/// `t = ceil(lambda / floor(log2 e))`, with challenges drawn `floor(log2 e)`
/// bits wide so every chunk is strictly below `e`.
pub fn round_count(lambda: u32, e: u64) -> Result<ChallengeParams, GqError> {
    if e < 3 {
        return Err(GqError::InvalidExponent);
    }
    if lambda == 0 {
        return Err(GqError::InvalidLambda);
    }
    let challenge_bits = 63 - e.leading_zeros();
    Ok(ChallengeParams {
        rounds: lambda.div_ceil(challenge_bits),
        challenge_bits,
    })
}

/// A multi-round non-interactive GQ proof.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GqProof {
    pub challenge_bits: u32,
    pub modulus_len: usize,
    pub commitments: Vec<BigUint>,
    pub responses: Vec<BigUint>,
    pub key_id: String,
}

impl GqProof {
    pub fn rounds(&self) -> usize {
        self.commitments.len()
    }

    /// Encoded size for `rounds` rounds at modulus length `modulus_len`.
    pub fn encoded_len(rounds: usize, modulus_len: usize, key_id_len: usize) -> usize {
        5 + 2 * rounds * modulus_len + 1 + key_id_len
    }

    /// Bit-exact wire encoding: version, t, b, L (u16 BE), t commitments and
    /// t responses as L-byte big-endian integers, then a length-prefixed key
    /// id.
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = self.rounds();
        let l = self.modulus_len;
        assert!(t <= MAX_ROUNDS as usize, "round count exceeds wire limit");
        assert_eq!(t, self.responses.len(), "commitment/response count mismatch");
        assert!(l <= u16::MAX as usize && self.key_id.len() <= u8::MAX as usize);
        let mut out = Vec::with_capacity(Self::encoded_len(t, l, self.key_id.len()));
        out.push(PROOF_VERSION);
        out.push(t as u8);
        out.push(self.challenge_bits as u8);
        out.extend_from_slice(&(l as u16).to_be_bytes());
        for v in self.commitments.iter().chain(&self.responses) {
            out.extend(to_fixed_be(v, l).expect("proof value wider than modulus"));
        }
        out.push(self.key_id.len() as u8);
        out.extend_from_slice(self.key_id.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let header = bytes.get(..5).ok_or(DecodeError::Truncated)?;
        if header[0] != PROOF_VERSION {
            return Err(DecodeError::UnsupportedVersion(header[0]));
        }
        let t = header[1] as usize;
        let b = header[2] as u32;
        let l = u16::from_be_bytes([header[3], header[4]]) as usize;
        if t == 0 || b == 0 {
            return Err(DecodeError::EmptyProof);
        }
        if l == 0 {
            return Err(DecodeError::EmptyModulus);
        }
        let body_len = 2 * t * l;
        let body = bytes.get(5..5 + body_len).ok_or(DecodeError::Truncated)?;
        let mut values = body.chunks_exact(l).map(BigUint::from_bytes_be);
        let commitments: Vec<_> = values.by_ref().take(t).collect();
        let responses: Vec<_> = values.collect();
        let rest = &bytes[5 + body_len..];
        let (&kid_len, rest) = rest.split_first().ok_or(DecodeError::Truncated)?;
        let kid = rest.get(..kid_len as usize).ok_or(DecodeError::Truncated)?;
        let trailing = rest.len() - kid.len();
        if trailing != 0 {
            return Err(DecodeError::TrailingBytes(trailing));
        }
        let key_id = String::from_utf8(kid.to_vec()).map_err(|_| DecodeError::KeyIdEncoding)?;
        Ok(Self {
            challenge_bits: b,
            modulus_len: l,
            commitments,
            responses,
            key_id,
        })
    }
}

fn absorb(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u32).to_be_bytes());
    hasher.update(bytes);
}

/// Derives one `challenge_bits`-wide challenge per commitment from
/// `SHA-256(tag || n || e || X || T_1 || .. || T_t || context)`.
///
/// Chunks are read MSB-first from the digest; when more than 256 bits are
/// needed the stream continues as `SHA-256(seed || counter)` for
/// `counter = 0, 1, ..`.
pub fn fiat_shamir(
    pk: &RsaPublicKey,
    statement: &BigUint,
    commitments: &[BigUint],
    context: &[u8],
    challenge_bits: u32,
) -> Vec<u64> {
    assert!(!commitments.is_empty(), "transcript needs at least one commitment");
    assert!((1..=64).contains(&challenge_bits));
    let l = pk.modulus_len();
    let fixed = |v: &BigUint| to_fixed_be(v, l).unwrap_or_else(|| v.to_bytes_be());

    let mut hasher = Sha256::new();
    absorb(&mut hasher, TRANSCRIPT_TAG);
    absorb(&mut hasher, &fixed(pk.modulus()));
    absorb(&mut hasher, &pk.exponent().to_be_bytes());
    absorb(&mut hasher, &fixed(statement));
    for commitment in commitments {
        absorb(&mut hasher, &fixed(commitment));
    }
    absorb(&mut hasher, context);
    let seed: [u8; 32] = hasher.finalize().into();

    let total_bits = commitments.len() * challenge_bits as usize;
    let stream: Vec<u8> = if total_bits <= 256 {
        seed.to_vec()
    } else {
        (0u32..)
            .take(total_bits.div_ceil(256))
            .flat_map(|counter| {
                let mut h = Sha256::new();
                h.update(seed);
                h.update(counter.to_be_bytes());
                <[u8; 32]>::from(h.finalize())
            })
            .collect()
    };

    let bit = |i: usize| (stream[i / 8] >> (7 - i % 8)) & 1;
    (0..commitments.len())
        .map(|round| {
            let start = round * challenge_bits as usize;
            (start..start + challenge_bits as usize).fold(0u64, |acc, i| (acc << 1) | bit(i) as u64)
        })
        .collect()
}

/// Prover-side randomness for one round.
pub struct RoundSecret(BigUint);

/// Commitment step: `T = r^e mod n` for a fresh unit `r`.
pub fn commit<R: RngCore + CryptoRng>(pk: &RsaPublicKey, rng: &mut R) -> (RoundSecret, BigUint) {
    let r = random_unit(rng, pk.modulus());
    let t = pk.apply(&r);
    (RoundSecret(r), t)
}

/// Commitment with caller-chosen randomness. Only useful for fixed vectors.
pub fn commit_with(pk: &RsaPublicKey, r: BigUint) -> (RoundSecret, BigUint) {
    let t = pk.apply(&r);
    (RoundSecret(r), t)
}

/// Response step: `z = r * σ^c mod n`.
pub fn respond(pk: &RsaPublicKey, secret: &RoundSecret, signature: &BigUint, challenge: u64) -> BigUint {
    let n = pk.modulus();
    (&secret.0 * signature.modpow(&BigUint::from(challenge), n)) % n
}

/// The per-round verification equation `z^e == T * X^c (mod n)`.
pub fn check_round(
    pk: &RsaPublicKey,
    statement: &BigUint,
    commitment: &BigUint,
    challenge: u64,
    response: &BigUint,
) -> bool {
    let n = pk.modulus();
    let lhs = pk.apply(response);
    let rhs = (commitment * statement.modpow(&BigUint::from(challenge), n)) % n;
    lhs == rhs
}

/// Uniform challenge in `[0, e)` as used by the interactive protocol.
pub fn interactive_challenge<R: RngCore>(pk: &RsaPublicKey, rng: &mut R) -> u64 {
    rng.gen_range(0..pk.exponent())
}

/// Proves knowledge of `signature` for the statement `X`, refusing if the
/// signature is not an e-th root of `X`.
pub fn prove_statement<R: RngCore + CryptoRng>(
    pk: &RsaPublicKey,
    statement: &BigUint,
    signature: &BigUint,
    lambda: u32,
    rng: &mut R,
) -> Result<GqProof, GqError> {
    let params = round_count(lambda, pk.exponent())?;
    if params.rounds > MAX_ROUNDS {
        return Err(GqError::TooManyRounds(params.rounds));
    }
    let n = pk.modulus();
    if signature.is_zero() || signature >= n || pk.apply(signature) != *statement {
        return Err(GqError::SignatureMismatch);
    }

    let (secrets, commitments): (Vec<_>, Vec<_>) =
        (0..params.rounds).map(|_| commit(pk, rng)).unzip();
    let challenges = fiat_shamir(
        pk,
        statement,
        &commitments,
        pk.key_id().as_bytes(),
        params.challenge_bits,
    );
    let responses = secrets
        .iter()
        .zip(&challenges)
        .map(|(secret, &c)| respond(pk, secret, signature, c))
        .collect();

    Ok(GqProof {
        challenge_bits: params.challenge_bits,
        modulus_len: pk.modulus_len(),
        commitments,
        responses,
        key_id: pk.key_id().to_owned(),
    })
}

/// Proves knowledge of an RS256 signature over `signing_input`.
pub fn prove<R: RngCore + CryptoRng>(
    pk: &RsaPublicKey,
    signing_input: &[u8],
    signature: &BigUint,
    lambda: u32,
    rng: &mut R,
) -> Result<GqProof, GqError> {
    let message = PaddedMessage::new(pk, signing_input)?;
    prove_statement(pk, message.value(), signature, lambda, rng)
}

/// Checks a proof against the statement `X` at security level `lambda`.
pub fn verify_statement(
    pk: &RsaPublicKey,
    statement: &BigUint,
    proof: &GqProof,
    lambda: u32,
) -> Result<(), ProofRejection> {
    let mismatch = ProofRejection::ParameterMismatch {
        rounds: proof.rounds() as u32,
        bits: proof.challenge_bits,
    };
    let params = round_count(lambda, pk.exponent()).map_err(|_| mismatch.clone())?;
    if params.rounds as usize != proof.rounds()
        || params.challenge_bits != proof.challenge_bits
        || proof.responses.len() != proof.rounds()
    {
        return Err(mismatch);
    }
    if proof.key_id != pk.key_id() {
        return Err(ProofRejection::KeyMismatch {
            expected: pk.key_id().to_owned(),
            found: proof.key_id.clone(),
        });
    }
    if proof.modulus_len != pk.modulus_len() {
        return Err(ProofRejection::ModulusLengthMismatch {
            expected: pk.modulus_len(),
            found: proof.modulus_len,
        });
    }
    let n = pk.modulus();
    for (i, (t, z)) in proof.commitments.iter().zip(&proof.responses).enumerate() {
        for v in [t, z] {
            if v.is_zero() || v >= n {
                return Err(ProofRejection::OutOfRange(i));
            }
            if !is_unit(v, n) {
                return Err(ProofRejection::NotCoprime(i));
            }
        }
    }
    let challenges = fiat_shamir(
        pk,
        statement,
        &proof.commitments,
        proof.key_id.as_bytes(),
        proof.challenge_bits,
    );
    for (i, ((t, z), c)) in proof
        .commitments
        .iter()
        .zip(&proof.responses)
        .zip(challenges)
        .enumerate()
    {
        if !check_round(pk, statement, t, c, z) {
            return Err(ProofRejection::EquationFailed(i));
        }
    }
    Ok(())
}

/// Checks a proof for an RS256 signature over `signing_input`.
pub fn verify_proof(
    pk: &RsaPublicKey,
    signing_input: &[u8],
    proof: &GqProof,
    lambda: u32,
) -> Result<(), ProofRejection> {
    let message = PaddedMessage::new(pk, signing_input)?;
    verify_statement(pk, message.value(), proof, lambda)
}

/// Honest-verifier simulator: for given challenges, samples `z` uniformly
/// from `Z_n^*` and solves for `T = z^e * X^-c`.
///
/// The output satisfies the round equation for the supplied challenges only;
/// it cannot match challenges re-derived by [`fiat_shamir`].
pub fn simulate<R: RngCore + CryptoRng>(
    pk: &RsaPublicKey,
    statement: &BigUint,
    challenges: &[u64],
    rng: &mut R,
) -> Result<(Vec<BigUint>, Vec<BigUint>), GqError> {
    let n = pk.modulus();
    let inverse = statement.modinv(n).ok_or(GqError::CannotSimulate)?;
    if let Some(&c) = challenges.iter().find(|&&c| c >= pk.exponent()) {
        return Err(GqError::ChallengeOutOfRange(c));
    }
    Ok(challenges
        .iter()
        .map(|&c| {
            let z = random_unit(rng, n);
            let t = (pk.apply(&z) * inverse.modpow(&BigUint::from(c), n)) % n;
            (t, z)
        })
        .unzip())
}

/// Returns `true` if `signature` is an e-th root of `statement`.
pub fn is_root(pk: &RsaPublicKey, statement: &BigUint, signature: &BigUint) -> bool {
    !signature.is_zero() && signature < pk.modulus() && pk.apply(signature) == *statement
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy() -> (RsaPublicKey, BigUint, BigUint) {
        let pk = RsaPublicKey::new(BigUint::from(77u32), 7, "toy").unwrap();
        (pk, BigUint::from(15u32), BigUint::from(64u32))
    }

    // floor(log2 e) computed by repeated halving, independent of leading_zeros.
    fn ilog2_oracle(mut e: u64) -> u32 {
        let mut k = 0;
        while e > 1 {
            e /= 2;
            k += 1;
        }
        k
    }

    #[test]
    fn round_count_matches_integer_log_oracle() {
        for (lambda, e) in [(128u32, 65537u64), (64, 7), (1, 3), (16, 7), (128, 3), (100, 257)] {
            let b = ilog2_oracle(e);
            let expected = (lambda + b - 1) / b;
            let params = round_count(lambda, e).unwrap();
            assert_eq!(params.challenge_bits, b);
            assert_eq!(params.rounds, expected, "lambda={lambda} e={e}");
        }
        assert_eq!(round_count(128, 65537).unwrap().rounds, 8);
        assert_eq!(round_count(64, 7).unwrap().rounds, 32);
        assert_eq!(round_count(1, 3).unwrap().rounds, 1);
    }

    #[test]
    fn round_count_rejects_small_exponent() {
        assert_eq!(round_count(128, 2), Err(GqError::InvalidExponent));
        assert_eq!(round_count(128, 1), Err(GqError::InvalidExponent));
        assert_eq!(round_count(0, 3), Err(GqError::InvalidLambda));
    }

    #[test]
    fn challenge_chunks_stay_below_exponent() {
        for e in [3u64, 5, 7, 17, 65537, (1 << 33) + 1] {
            assert!(1u128 << round_count(8, e).unwrap().challenge_bits <= e as u128);
        }
    }

    #[test]
    fn key_validation() {
        assert_eq!(
            RsaPublicKey::new(BigUint::from(77u32), 4, "k"),
            Err(KeyError::InvalidExponent)
        );
        assert_eq!(
            RsaPublicKey::new(BigUint::from(78u32), 7, "k"),
            Err(KeyError::InvalidModulus)
        );
        assert_eq!(
            RsaPublicKey::new_production(BigUint::from(77u32), 7, "k"),
            Err(KeyError::ModulusTooSmall(7))
        );
    }

    #[test]
    fn toy_round_vector() {
        let (pk, x, sigma) = toy();
        assert_eq!(pk.apply(&sigma), x);
        let (secret, t) = commit_with(&pk, BigUint::from(2u32));
        assert_eq!(t, BigUint::from(51u32));
        let z = respond(&pk, &secret, &sigma, 3);
        assert_eq!(z, BigUint::from(72u32));
        assert_eq!(pk.apply(&z), BigUint::from(30u32));
        assert_eq!((&t * x.modpow(&BigUint::from(3u32), pk.modulus())) % pk.modulus(), BigUint::from(30u32));
        assert!(check_round(&pk, &x, &t, 3, &z));
        assert!(!check_round(&pk, &x, &t, 2, &z));
    }

    #[test]
    fn identity_signature_and_zero_challenge() {
        let (pk, x, sigma) = toy();
        let (secret, t) = commit_with(&pk, BigUint::from(9u32));
        let z = respond(&pk, &secret, &BigUint::one(), 5);
        assert_eq!(z, BigUint::from(9u32));
        assert!(check_round(&pk, &BigUint::one(), &t, 5, &z));
        let z0 = respond(&pk, &secret, &sigma, 0);
        assert_eq!(z0, BigUint::from(9u32));
        assert!(check_round(&pk, &x, &t, 0, &z0));
        assert_eq!(pk.apply(&z0), t);
    }

    #[test]
    fn toy_statement_round_trip() {
        let (pk, x, sigma) = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let proof = prove_statement(&pk, &x, &sigma, 16, &mut rng).unwrap();
        assert_eq!(proof.rounds(), 8);
        verify_statement(&pk, &x, &proof, 16).unwrap();
        assert!(verify_statement(&pk, &BigUint::from(16u32), &proof, 16).is_err());
        assert!(matches!(
            verify_statement(&pk, &x, &proof, 32),
            Err(ProofRejection::ParameterMismatch { .. })
        ));
    }

    #[test]
    fn refuses_false_statement() {
        let (pk, x, _) = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        assert_eq!(
            prove_statement(&pk, &x, &BigUint::from(65u32), 16, &mut rng),
            Err(GqError::SignatureMismatch)
        );
        assert_eq!(
            prove_statement(&pk, &x, &BigUint::from(0u32), 16, &mut rng),
            Err(GqError::SignatureMismatch)
        );
    }

    #[test]
    fn too_many_rounds_rejected() {
        let (pk, x, sigma) = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        assert_eq!(
            prove_statement(&pk, &x, &sigma, 1024, &mut rng),
            Err(GqError::TooManyRounds(512))
        );
    }

    #[test]
    fn fiat_shamir_is_deterministic_and_extends() {
        let (pk, x, _) = toy();
        let commitments: Vec<BigUint> = (1..=200u32).map(BigUint::from).collect();
        let a = fiat_shamir(&pk, &x, &commitments, b"ctx", 2);
        let b = fiat_shamir(&pk, &x, &commitments, b"ctx", 2);
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|&c| c < 4));
        assert_ne!(a, fiat_shamir(&pk, &x, &commitments, b"ctY", 2));
        // Rounds past the first 256 bits are not all zero.
        assert!(a[128..].iter().any(|&c| c != 0));
    }

    #[test]
    fn fiat_shamir_single_block_prefix() {
        // With t*b <= 256 the chunks are the digest itself, MSB first.
        let (pk, x, _) = toy();
        let commitments = vec![BigUint::from(51u32); 4];
        let chunks = fiat_shamir(&pk, &x, &commitments, b"", 8);
        let mut h = Sha256::new();
        absorb(&mut h, TRANSCRIPT_TAG);
        absorb(&mut h, &[77]);
        absorb(&mut h, &7u64.to_be_bytes());
        absorb(&mut h, &[15]);
        for _ in 0..4 {
            absorb(&mut h, &[51]);
        }
        absorb(&mut h, b"");
        let digest = h.finalize();
        let expected: Vec<u64> = digest[..4].iter().map(|&b| b as u64).collect();
        assert_eq!(chunks, expected);
    }

    #[test]
    fn simulator_satisfies_round_equation() {
        let (pk, x, _) = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let challenges = [0u64, 1, 2, 3, 6, 5];
        let (ts, zs) = simulate(&pk, &x, &challenges, &mut rng).unwrap();
        for ((t, z), c) in ts.iter().zip(&zs).zip(challenges) {
            assert!(check_round(&pk, &x, t, c, z));
        }
        let (ts, zs) = simulate(&pk, &x, &[0, 0], &mut rng).unwrap();
        assert_eq!(ts[0], pk.apply(&zs[0]));
        assert_eq!(
            simulate(&pk, &BigUint::from(14u32), &[1], &mut rng),
            Err(GqError::CannotSimulate)
        );
        assert_eq!(
            simulate(&pk, &x, &[7], &mut rng),
            Err(GqError::ChallengeOutOfRange(7))
        );
    }

    #[test]
    fn wire_format_layout() {
        let (pk, x, sigma) = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let proof = prove_statement(&pk, &x, &sigma, 16, &mut rng).unwrap();
        let bytes = proof.to_bytes();
        assert_eq!(bytes.len(), GqProof::encoded_len(8, 1, 3));
        assert_eq!(&bytes[..5], &[0x01, 8, 2, 0, 1]);
        assert_eq!(bytes[5], proof.commitments[0].to_bytes_be()[0]);
        assert_eq!(&bytes[bytes.len() - 4..], b"\x03toy");
        assert_eq!(GqProof::from_bytes(&bytes).unwrap(), proof);
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert_eq!(GqProof::from_bytes(&[]), Err(DecodeError::Truncated));
        assert_eq!(
            GqProof::from_bytes(&[2, 1, 1, 0, 1, 5, 5, 0]),
            Err(DecodeError::UnsupportedVersion(2))
        );
        assert_eq!(GqProof::from_bytes(&[1, 0, 1, 0, 1, 0]), Err(DecodeError::EmptyProof));
        assert_eq!(GqProof::from_bytes(&[1, 1, 1, 0, 0, 0]), Err(DecodeError::EmptyModulus));
        assert_eq!(GqProof::from_bytes(&[1, 1, 1, 0, 1, 5]), Err(DecodeError::Truncated));
        assert_eq!(
            GqProof::from_bytes(&[1, 1, 1, 0, 1, 5, 5, 0, 9]),
            Err(DecodeError::TrailingBytes(1))
        );
        assert_eq!(
            GqProof::from_bytes(&[1, 1, 1, 0, 1, 5, 5, 1, 0xff]),
            Err(DecodeError::KeyIdEncoding)
        );
    }
}
