//! ECDSA P-256 keys used by the CA, the ledger, witnesses, the CT log and
//! requesters. Signatures are DER-encoded and deterministic (RFC 6979).

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{self, Signature};
use p256::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rand::{CryptoRng, RngCore};
use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyEncodingError {
    #[error("invalid key encoding: {0}")]
    Invalid(String),
}

#[derive(Clone)]
pub struct SigningKey(ecdsa::SigningKey);

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("SigningKey").field(&self.verifying_key().fingerprint()).finish()
    }
}

impl SigningKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self(ecdsa::SigningKey::random(rng))
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey(*self.0.verifying_key())
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        let sig: Signature = self.0.sign(message);
        sig.to_der().as_bytes().to_vec()
    }

    pub fn to_pkcs8_pem(&self) -> String {
        self.0
            .to_pkcs8_pem(LineEnding::LF)
            .expect("P-256 key encodes")
            .to_string()
    }

    pub fn from_pkcs8_pem(pem: &str) -> Result<Self, KeyEncodingError> {
        ecdsa::SigningKey::from_pkcs8_pem(pem)
            .map(Self)
            .map_err(|e| KeyEncodingError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerifyingKey(ecdsa::VerifyingKey);

impl std::fmt::Debug for VerifyingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("VerifyingKey").field(&self.fingerprint()).finish()
    }
}

impl VerifyingKey {
    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        Signature::from_der(signature)
            .map(|sig| self.0.verify(message, &sig).is_ok())
            .unwrap_or(false)
    }

    /// DER `SubjectPublicKeyInfo`.
    pub fn to_spki_der(&self) -> Vec<u8> {
        self.0
            .to_public_key_der()
            .expect("P-256 key encodes")
            .into_vec()
    }

    pub fn from_spki_der(der: &[u8]) -> Result<Self, KeyEncodingError> {
        ecdsa::VerifyingKey::from_public_key_der(der)
            .map(Self)
            .map_err(|e| KeyEncodingError::Invalid(e.to_string()))
    }

    pub fn to_pem(&self) -> String {
        self.0.to_public_key_pem(LineEnding::LF).expect("P-256 key encodes")
    }

    pub fn from_pem(pem: &str) -> Result<Self, KeyEncodingError> {
        ecdsa::VerifyingKey::from_public_key_pem(pem)
            .map(Self)
            .map_err(|e| KeyEncodingError::Invalid(e.to_string()))
    }

    /// SHA-256 of the DER SubjectPublicKeyInfo.
    pub fn key_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_spki_der()).into()
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(self.key_hash())
    }
}

impl Serialize for VerifyingKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_pem())
    }
}

impl<'de> Deserialize<'de> for VerifyingKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let pem = String::deserialize(d)?;
        Self::from_pem(&pem).map_err(D::Error::custom)
    }
}
