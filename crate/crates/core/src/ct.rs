//! Minimal certificate transparency log.
//!
//! Leaves are `timestamp_ms (u64 BE) || precertificate TBS DER`, hashed as
//! RFC 6962 leaves. An SCT signs `log_id || timestamp_ms || SHA-256(tbs)`.

use std::collections::HashMap;

use der::Decode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use x509_cert::TbsCertificate;

use crate::keys::{SigningKey, VerifyingKey};
use crate::ledger::SignedDigest;
use crate::merkle::{self, Hash, InclusionProof, MerkleTree};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CtError {
    #[error("malformed TBS certificate: {0}")]
    MalformedTbs(String),
    #[error("no leaf with that hash")]
    UnknownLeaf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sct {
    #[serde(with = "crate::hexser::hash")]
    pub log_id: Hash,
    pub timestamp_ms: u64,
    #[serde(with = "crate::hexser::bytes")]
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SctDecodeError {
    #[error("SCT truncated")]
    Truncated,
    #[error("{0} trailing bytes after SCT")]
    TrailingBytes(usize),
}

pub fn sct_message(log_id: &Hash, timestamp_ms: u64, tbs: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(72);
    out.extend_from_slice(log_id);
    out.extend_from_slice(&timestamp_ms.to_be_bytes());
    out.extend_from_slice(&Sha256::digest(tbs));
    out
}

pub fn ct_leaf_body(timestamp_ms: u64, tbs: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + tbs.len());
    out.extend_from_slice(&timestamp_ms.to_be_bytes());
    out.extend_from_slice(tbs);
    out
}

pub fn ct_leaf_hash(timestamp_ms: u64, tbs: &[u8]) -> Hash {
    merkle::leaf_hash(&ct_leaf_body(timestamp_ms, tbs))
}

impl Sct {
    /// Timestamp in whole seconds, as used for OIDC claim checks.
    pub fn timestamp_secs(&self) -> u64 {
        self.timestamp_ms / 1000
    }

    pub fn verify(&self, ct_key: &VerifyingKey, tbs: &[u8]) -> bool {
        self.log_id == ct_key.key_hash()
            && ct_key.verify(&sct_message(&self.log_id, self.timestamp_ms, tbs), &self.signature)
    }

    /// `log_id (32) || timestamp_ms (u64 BE) || sig_len (u16 BE) || sig`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(42 + self.signature.len());
        out.extend_from_slice(&self.log_id);
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out.extend_from_slice(&(self.signature.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SctDecodeError> {
        if bytes.len() < 42 {
            return Err(SctDecodeError::Truncated);
        }
        let log_id: Hash = bytes[..32].try_into().expect("32 bytes");
        let timestamp_ms = u64::from_be_bytes(bytes[32..40].try_into().expect("8 bytes"));
        let len = u16::from_be_bytes([bytes[40], bytes[41]]) as usize;
        let rest = &bytes[42..];
        if rest.len() < len {
            return Err(SctDecodeError::Truncated);
        }
        if rest.len() > len {
            return Err(SctDecodeError::TrailingBytes(rest.len() - len));
        }
        Ok(Self {
            log_id,
            timestamp_ms,
            signature: rest.to_vec(),
        })
    }
}

/// Inclusion evidence for one leaf under a signed CT tree head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtInclusion {
    pub proof: InclusionProof,
    pub digest: SignedDigest,
}

impl CtInclusion {
    pub fn verify(&self, ct_key: &VerifyingKey, leaf_hash: &Hash) -> bool {
        ct_key.verify(&self.digest.message(), &self.digest.log_signature)
            && self.proof.tree_size == self.digest.tree_size
            && merkle::verify_inclusion(leaf_hash, &self.proof, &self.digest.root_hash)
    }
}

pub struct CtLog {
    key: SigningKey,
    log_id: Hash,
    tree: MerkleTree,
    by_hash: HashMap<Hash, u64>,
    latest: SignedDigest,
}

impl std::fmt::Debug for CtLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CtLog")
            .field("size", &self.tree.len())
            .field("log_id", &hex::encode(self.log_id))
            .finish_non_exhaustive()
    }
}

impl CtLog {
    pub fn new(key: SigningKey, now: u64) -> Self {
        let log_id = key.verifying_key().key_hash();
        let tree = MerkleTree::new();
        let latest = SignedDigest::sign(&key, 0, tree.root(), now);
        Self {
            key,
            log_id,
            tree,
            by_hash: HashMap::new(),
            latest,
        }
    }

    pub fn log_id(&self) -> Hash {
        self.log_id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn size(&self) -> u64 {
        self.tree.len()
    }

    pub fn digest(&self) -> &SignedDigest {
        &self.latest
    }

    /// Appends a precertificate and returns its SCT. Identical submissions
    /// are logged again.
    pub fn submit_precert(&mut self, tbs: &[u8], now: u64) -> Result<Sct, CtError> {
        TbsCertificate::from_der(tbs).map_err(|e| CtError::MalformedTbs(e.to_string()))?;
        let timestamp_ms = now * 1000;
        let leaf = ct_leaf_hash(timestamp_ms, tbs);
        self.by_hash.entry(leaf).or_insert(self.tree.len());
        self.tree.push(leaf);
        let timestamp = now.max(self.latest.timestamp);
        self.latest = SignedDigest::sign(&self.key, self.tree.len(), self.tree.root(), timestamp);
        let signature = self.key.sign(&sct_message(&self.log_id, timestamp_ms, tbs));
        Ok(Sct {
            log_id: self.log_id,
            timestamp_ms,
            signature,
        })
    }

    pub fn inclusion_by_hash(&self, leaf_hash: &Hash) -> Result<CtInclusion, CtError> {
        let index = *self.by_hash.get(leaf_hash).ok_or(CtError::UnknownLeaf)?;
        let proof = self
            .tree
            .prove_inclusion(index, self.tree.len())
            .expect("indexed leaf is in the tree");
        Ok(CtInclusion {
            proof,
            digest: self.latest.clone(),
        })
    }
}
