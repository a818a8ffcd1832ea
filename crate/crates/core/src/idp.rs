//! Simulated OIDC identity provider: RSA key generation, RS256 token
//! issuance, and key rotation.

use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use rsa::traits::{PrivateKeyParts, PublicKeyParts};
use sha2::{Digest, Sha256};

use crate::bigint::to_fixed_be;
use crate::gq::RsaPublicKey;
use crate::jose::{
    emsa, encode_segment, Audience, Jwk, Jwks, JwtHeader, OidcClaims, OidcToken, UnsignedToken,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdpError {
    #[error("token lifetime must be positive")]
    InvalidLifetime,
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
}

/// An RSA signing key. The private parts never leave this type.
#[derive(Clone)]
pub struct RsaKeyPair {
    public: RsaPublicKey,
    d: BigUint,
    primes: (BigUint, BigUint),
}

impl std::fmt::Debug for RsaKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RsaKeyPair")
            .field("kid", &self.public.key_id())
            .finish_non_exhaustive()
    }
}

fn convert(v: &rsa::BigUint) -> BigUint {
    BigUint::from_bytes_be(&v.to_bytes_be())
}

/// Hex SHA-256 over the RFC 7638 thumbprint input `{"e":..,"kty":"RSA","n":..}`.
pub fn key_thumbprint(n: &BigUint, e: u64) -> String {
    let provisional = RsaPublicKey::new(n.clone(), e, "").expect("valid key");
    let jwk = Jwk::from(&provisional);
    let input = format!(r#"{{"e":"{}","kty":"RSA","n":"{}"}}"#, jwk.e, jwk.n);
    hex::encode(Sha256::digest(input.as_bytes()))
}

impl RsaKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(
        rng: &mut R,
        bits: usize,
        e: u64,
    ) -> Result<Self, IdpError> {
        let key = rsa::RsaPrivateKey::new_with_exp(rng, bits, &rsa::BigUint::from(e))
            .map_err(|err| IdpError::KeyGeneration(err.to_string()))?;
        let n = convert(key.n());
        let kid = key_thumbprint(&n, e);
        let public = RsaPublicKey::new(n, e, kid)
            .map_err(|err| IdpError::KeyGeneration(err.to_string()))?;
        let [p, q] = key.primes() else {
            return Err(IdpError::KeyGeneration("expected two primes".into()));
        };
        Ok(Self {
            public,
            d: convert(key.d()),
            primes: (convert(p), convert(q)),
        })
    }

    pub fn public_key(&self) -> &RsaPublicKey {
        &self.public
    }

    pub fn private_exponent(&self) -> &BigUint {
        &self.d
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.primes.0, &self.primes.1)
    }

    /// RSASSA-PKCS1-v1_5 / SHA-256 signature, `modulus_len` bytes.
    pub fn sign_rs256(&self, message: &[u8]) -> Vec<u8> {
        let k = self.public.modulus_len();
        let x = emsa::encode_message(message, k).expect("modulus large enough for RS256");
        let sigma = x.modpow(&self.d, self.public.modulus());
        to_fixed_be(&sigma, k).expect("signature below modulus")
    }
}

/// What the test issuance endpoint accepts.
#[derive(Debug, Clone)]
pub struct TokenRequest {
    pub sub: String,
    pub aud: String,
    pub lifetime: u64,
    pub nonce: Option<String>,
}

/// Identity provider state: one active signing key plus retired key sets.
#[derive(Debug, Clone)]
pub struct IdpState {
    issuer_url: String,
    signing_key: RsaKeyPair,
    active_keys: Jwks,
    retired_keys: Vec<(Jwks, u64)>,
    rotation_counter: u64,
    bits: usize,
    exponent: u64,
}

impl IdpState {
    pub fn generate<R: RngCore + CryptoRng>(
        issuer_url: impl Into<String>,
        bits: usize,
        e: u64,
        now: u64,
        rng: &mut R,
    ) -> Result<Self, IdpError> {
        let signing_key = RsaKeyPair::generate(rng, bits, e)?;
        let active_keys =
            Jwks::new(vec![signing_key.public_key().clone()], now).expect("single key");
        Ok(Self {
            issuer_url: issuer_url.into(),
            signing_key,
            active_keys,
            retired_keys: Vec::new(),
            rotation_counter: 0,
            bits,
            exponent: e,
        })
    }

    pub fn issuer_url(&self) -> &str {
        &self.issuer_url
    }

    pub fn active_keys(&self) -> &Jwks {
        &self.active_keys
    }

    pub fn retired_keys(&self) -> &[(Jwks, u64)] {
        &self.retired_keys
    }

    pub fn rotation_counter(&self) -> u64 {
        self.rotation_counter
    }

    pub fn signing_key(&self) -> &RsaKeyPair {
        &self.signing_key
    }

    /// The JWKS document as served; byte-stable between rotations.
    pub fn jwks_json(&self) -> Vec<u8> {
        self.active_keys.canonical_json()
    }

    pub fn issue_token(&self, request: &TokenRequest, now: u64) -> Result<OidcToken, IdpError> {
        if request.lifetime == 0 {
            return Err(IdpError::InvalidLifetime);
        }
        let header = JwtHeader {
            alg: "RS256".into(),
            kid: Some(self.signing_key.public_key().key_id().to_owned()),
            typ: Some("JWT".into()),
        };
        let claims = OidcClaims {
            iss: self.issuer_url.clone(),
            sub: request.sub.clone(),
            aud: Audience::One(request.aud.clone()),
            exp: now + request.lifetime,
            iat: now,
            nonce: request.nonce.clone(),
            email: request.sub.contains('@').then(|| request.sub.clone()),
        };
        let signing_input = format!("{}.{}", encode_segment(&header), encode_segment(&claims));
        let signature = self.signing_key.sign_rs256(signing_input.as_bytes());
        let unsigned = UnsignedToken::parse(signing_input.as_bytes()).expect("own token parses");
        Ok(OidcToken::from_parts(unsigned, signature))
    }

    /// Replaces the signing key. The old key set is retired at `now` and is
    /// no longer served.
    pub fn rotate<R: RngCore + CryptoRng>(&mut self, now: u64, rng: &mut R) -> Result<(), IdpError> {
        let next = RsaKeyPair::generate(rng, self.bits, self.exponent)?;
        let fresh = Jwks::new(vec![next.public_key().clone()], now).expect("single key");
        let old = std::mem::replace(&mut self.active_keys, fresh);
        self.retired_keys.push((old, now));
        self.signing_key = next;
        self.rotation_counter += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jose::{parse_compact, verify_rs256, verify_with_jwks, SignatureRejection};
    use num_integer::Integer;
    use num_traits::One;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_idp(seed: u64) -> IdpState {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        IdpState::generate("https://idp.test", 512, 3, 0, &mut rng).unwrap()
    }

    fn request(sub: &str) -> TokenRequest {
        TokenRequest {
            sub: sub.into(),
            aud: "poa-ca".into(),
            lifetime: 300,
            nonce: None,
        }
    }

    #[test]
    fn toy_key_issues_verifiable_tokens() {
        let idp = toy_idp(1);
        let key = idp.active_keys().keys()[0].clone();
        assert_eq!(key.exponent(), 3);
        assert_eq!(key.modulus().bits(), 512);
        let token = idp.issue_token(&request("alice@example.com"), 100).unwrap();
        verify_rs256(&key, &token).unwrap();
        assert_eq!(token.claims.exp, 400);
        assert_eq!(token.header.kid.as_deref(), Some(key.key_id()));
    }

    #[test]
    fn private_exponent_inverts_public_exponent() {
        for seed in 0..4 {
            let idp = toy_idp(seed);
            let key = idp.signing_key();
            let (p, q) = key.primes();
            assert_eq!(&(p * q), key.public_key().modulus());
            let one = BigUint::one();
            let lambda = (p - &one).lcm(&(q - &one));
            let de = key.private_exponent() * BigUint::from(key.public_key().exponent());
            assert_eq!(de % lambda, one);
        }
    }

    #[test]
    fn default_size_parameters_echo() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let idp = IdpState::generate("https://idp.test", 2048, 65537, 0, &mut rng).unwrap();
        let key = &idp.active_keys().keys()[0];
        assert_eq!(key.modulus().bits(), 2048);
        assert_eq!(key.exponent(), 65537);
        assert_eq!(key.key_id().len(), 64);
    }

    #[test]
    fn compact_round_trip_matches_raw_bytes() {
        let idp = toy_idp(2);
        let token = idp.issue_token(&request("bob"), 5).unwrap();
        let reparsed = parse_compact(token.to_compact().as_bytes()).unwrap();
        assert_eq!(reparsed, token);
        let reencoded = format!(
            "{}.{}",
            encode_segment(&reparsed.header),
            encode_segment(&reparsed.claims)
        );
        assert_eq!(reencoded.as_bytes(), token.signing_input());
    }

    #[test]
    fn signatures_are_deterministic() {
        let idp = toy_idp(3);
        let a = idp.issue_token(&request("carol"), 50).unwrap();
        let b = idp.issue_token(&request("carol"), 50).unwrap();
        assert_eq!(a.signature_bytes(), b.signature_bytes());
        let c = idp.issue_token(&request("carol"), 51).unwrap();
        assert_ne!(a.signature_bytes(), c.signature_bytes());
    }

    #[test]
    fn flipped_payload_byte_fails() {
        let idp = toy_idp(4);
        let token = idp.issue_token(&request("dave"), 0).unwrap();
        let key = &idp.active_keys().keys()[0];
        let mut si = token.signing_input().to_vec();
        let last = si.len() - 1;
        si[last] = if si[last] == b'A' { b'B' } else { b'A' };
        assert!(crate::jose::verify_rs256_raw(key, &si, token.signature_bytes()).is_err());
    }

    #[test]
    fn rotation_retires_old_key() {
        let mut idp = toy_idp(5);
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let before = idp.issue_token(&request("erin"), 10).unwrap();
        let old_kid = idp.active_keys().keys()[0].key_id().to_owned();
        let old_json = idp.jwks_json();
        assert_eq!(old_json, idp.jwks_json());
        idp.rotate(20, &mut rng).unwrap();
        assert_eq!(idp.rotation_counter(), 1);
        assert_eq!(idp.active_keys().keys().len(), 1);
        assert_ne!(idp.active_keys().keys()[0].key_id(), old_kid);
        assert_ne!(idp.jwks_json(), old_json);
        assert_eq!(idp.retired_keys()[0].1, 20);
        assert_eq!(
            verify_with_jwks(idp.active_keys(), &before),
            Err(SignatureRejection::KeyNotFound)
        );
        let after = idp.issue_token(&request("erin"), 30).unwrap();
        assert!(verify_with_jwks(idp.active_keys(), &after).is_ok());
    }

    #[test]
    fn zero_lifetime_rejected() {
        let idp = toy_idp(6);
        let mut req = request("x");
        req.lifetime = 0;
        assert_eq!(idp.issue_token(&req, 0).unwrap_err(), IdpError::InvalidLifetime);
    }
}
