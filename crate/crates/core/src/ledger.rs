//! JWK Ledger: a witness-cosigned transparency log of timestamped JWKS
//! snapshots.
//!
//! The ledger appends one entry per key-set change. Each entry hashes as an
//! RFC 6962 leaf over a canonical, length-prefixed body. Every new tree head
//! is signed by the ledger and cosigned by witnesses that replay the change
//! against the issuer's live JWKS endpoint. Clients ask "which key set was
//! live at time `t`" and receive a [`TimestampBracket`]: the last entry at or
//! before `t`, the next entry for that issuer (or proof that none exists yet),
//! and inclusion proofs for every leaf in between under one cosigned digest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::jose::{Jwks, JwksSource, SourceError};
use crate::keys::{SigningKey, VerifyingKey};
use crate::merkle::{
    self, verify_consistency, verify_inclusion, ConsistencyProof, Hash, InclusionProof,
    MerkleError, MerkleTree,
};

/// Default tolerance between a witness's clock and ledger timestamps.
pub const DEFAULT_WITNESS_SKEW: u64 = 120;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub index: u64,
    pub issuer: String,
    pub jwks: Jwks,
    pub recorded_at: u64,
}

impl LedgerEntry {
    /// `len(issuer) || issuer || recorded_at || len(jwks) || jwks`, lengths as
    /// u32 and the timestamp as u64, all big-endian. The JWKS is its
    /// canonical (sorted-member) JSON document.
    pub fn leaf_body(&self) -> Vec<u8> {
        let jwks = self.jwks.canonical_json();
        let mut out = Vec::with_capacity(16 + self.issuer.len() + jwks.len());
        out.extend_from_slice(&(self.issuer.len() as u32).to_be_bytes());
        out.extend_from_slice(self.issuer.as_bytes());
        out.extend_from_slice(&self.recorded_at.to_be_bytes());
        out.extend_from_slice(&(jwks.len() as u32).to_be_bytes());
        out.extend_from_slice(&jwks);
        out
    }

    pub fn leaf_hash(&self) -> Hash {
        merkle::leaf_hash(&self.leaf_body())
    }
}

#[derive(Serialize, Deserialize)]
struct EntryWire {
    index: u64,
    issuer: String,
    jwks: serde_json::Value,
    recorded_at: u64,
    #[serde(with = "crate::hexser::hash")]
    leaf_hash: Hash,
}

impl Serialize for LedgerEntry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let jwks = serde_json::from_slice(&self.jwks.canonical_json()).expect("valid JSON");
        EntryWire {
            index: self.index,
            issuer: self.issuer.clone(),
            jwks,
            recorded_at: self.recorded_at,
            leaf_hash: self.leaf_hash(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LedgerEntry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let wire = EntryWire::deserialize(d)?;
        let raw = serde_json::to_vec(&wire.jwks).map_err(D::Error::custom)?;
        let jwks = Jwks::from_json(&raw, wire.recorded_at).map_err(D::Error::custom)?;
        let entry = LedgerEntry {
            index: wire.index,
            issuer: wire.issuer,
            jwks,
            recorded_at: wire.recorded_at,
        };
        if entry.leaf_hash() != wire.leaf_hash {
            return Err(D::Error::custom("leaf_hash does not match entry body"));
        }
        Ok(entry)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cosignature {
    pub witness_id: String,
    #[serde(with = "crate::hexser::bytes")]
    pub signature: Vec<u8>,
}

/// A signed tree head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedDigest {
    pub tree_size: u64,
    #[serde(with = "crate::hexser::hash")]
    pub root_hash: Hash,
    pub timestamp: u64,
    #[serde(with = "crate::hexser::bytes")]
    pub log_signature: Vec<u8>,
    #[serde(default)]
    pub witness_cosignatures: Vec<Cosignature>,
}

/// `tree_size (u64 BE) || root_hash || timestamp (u64 BE)`.
pub fn digest_message(tree_size: u64, root_hash: &Hash, timestamp: u64) -> [u8; 48] {
    let mut out = [0u8; 48];
    out[..8].copy_from_slice(&tree_size.to_be_bytes());
    out[8..40].copy_from_slice(root_hash);
    out[40..].copy_from_slice(&timestamp.to_be_bytes());
    out
}

impl SignedDigest {
    pub fn sign(key: &SigningKey, tree_size: u64, root_hash: Hash, timestamp: u64) -> Self {
        let log_signature = key.sign(&digest_message(tree_size, &root_hash, timestamp));
        Self {
            tree_size,
            root_hash,
            timestamp,
            log_signature,
            witness_cosignatures: Vec::new(),
        }
    }

    pub fn message(&self) -> [u8; 48] {
        digest_message(self.tree_size, &self.root_hash, self.timestamp)
    }

    /// Same tree head with no cosignatures attached.
    pub fn unsigned_by_witnesses(&self) -> Self {
        Self {
            witness_cosignatures: Vec::new(),
            ..self.clone()
        }
    }

    pub fn same_head(&self, other: &SignedDigest) -> bool {
        self.tree_size == other.tree_size
            && self.root_hash == other.root_hash
            && self.timestamp == other.timestamp
    }
}

/// Client-side trust configuration for a transparency log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogTrust {
    pub log_key: VerifyingKey,
    pub witness_keys: BTreeMap<String, VerifyingKey>,
    pub quorum: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QuorumError {
    #[error("log signature does not verify")]
    BadLogSignature,
    #[error("only {valid} valid witness cosignatures, {required} required")]
    InsufficientCosignatures { valid: usize, required: usize },
}

/// Accepts a digest iff the log signature verifies and at least `quorum`
/// distinct configured witnesses cosigned it. Returns the count of valid
/// distinct cosignatures.
pub fn client_check_quorum(digest: &SignedDigest, trust: &LogTrust) -> Result<usize, QuorumError> {
    let message = digest.message();
    if !trust.log_key.verify(&message, &digest.log_signature) {
        return Err(QuorumError::BadLogSignature);
    }
    let mut valid = std::collections::BTreeSet::new();
    for cosig in &digest.witness_cosignatures {
        if let Some(key) = trust.witness_keys.get(&cosig.witness_id) {
            if key.verify(&message, &cosig.signature) {
                valid.insert(cosig.witness_id.as_str());
            }
        }
    }
    if valid.len() < trust.quorum {
        return Err(QuorumError::InsufficientCosignatures {
            valid: valid.len(),
            required: trust.quorum,
        });
    }
    Ok(valid.len())
}

/// An entry together with its inclusion proof under a bracket's digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestedEntry {
    pub entry: LedgerEntry,
    pub proof: InclusionProof,
}

/// Answer to "which key set did `issuer` publish at `query_time`".
///
/// `interleaved` holds every entry strictly between `before` and `after`
/// (or the end of the tree when `after` is absent); all of them belong to
/// other issuers, which is what makes `before` and `after` adjacent for this
/// issuer. With a single configured issuer it is always empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampBracket {
    pub issuer: String,
    pub query_time: u64,
    pub before: AttestedEntry,
    #[serde(default)]
    pub interleaved: Vec<AttestedEntry>,
    pub after: Option<AttestedEntry>,
    pub digest: SignedDigest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BracketError {
    #[error("digest not accepted: {0}")]
    Quorum(#[from] QuorumError),
    #[error("bracket answers for {found:?}, expected {expected:?}")]
    WrongIssuer { expected: String, found: String },
    #[error("bracket answers time {found}, expected {expected}")]
    WrongQueryTime { expected: u64, found: u64 },
    #[error("entry at index {0} does not precede the query time")]
    BeforeTooLate(u64),
    #[error("entry at index {0} does not follow the query time")]
    AfterTooEarly(u64),
    #[error("entry at index {0} has no valid inclusion proof under the digest")]
    NotIncluded(u64),
    #[error("entries are not adjacent for this issuer")]
    NotAdjacent,
    #[error("open bracket needs a digest at or after {needed}, got {found}")]
    StaleDigest { needed: u64, found: u64 },
}

fn check_included(item: &AttestedEntry, digest: &SignedDigest) -> Result<(), BracketError> {
    let index = item.entry.index;
    if item.proof.leaf_index != index
        || item.proof.tree_size != digest.tree_size
        || !verify_inclusion(&item.entry.leaf_hash(), &item.proof, &digest.root_hash)
    {
        return Err(BracketError::NotIncluded(index));
    }
    Ok(())
}

/// Client-side bracket check. On success returns the key set that was live
/// for `issuer` at time `t`.
pub fn verify_bracket<'a>(
    bracket: &'a TimestampBracket,
    issuer: &str,
    t: u64,
    trust: &LogTrust,
) -> Result<&'a Jwks, BracketError> {
    client_check_quorum(&bracket.digest, trust)?;
    if bracket.query_time != t {
        return Err(BracketError::WrongQueryTime {
            expected: t,
            found: bracket.query_time,
        });
    }
    let before = &bracket.before;
    for item in std::iter::once(before).chain(&bracket.after) {
        if item.entry.issuer != issuer {
            return Err(BracketError::WrongIssuer {
                expected: issuer.to_owned(),
                found: item.entry.issuer.clone(),
            });
        }
    }
    if before.entry.recorded_at > t {
        return Err(BracketError::BeforeTooLate(before.entry.index));
    }
    check_included(before, &bracket.digest)?;

    let mut next = before.entry.index + 1;
    for item in &bracket.interleaved {
        if item.entry.index != next || item.entry.issuer == issuer {
            return Err(BracketError::NotAdjacent);
        }
        check_included(item, &bracket.digest)?;
        next += 1;
    }

    match &bracket.after {
        Some(after) => {
            if after.entry.index != next {
                return Err(BracketError::NotAdjacent);
            }
            if after.entry.recorded_at <= t {
                return Err(BracketError::AfterTooEarly(after.entry.index));
            }
            check_included(after, &bracket.digest)?;
        }
        None => {
            if next != bracket.digest.tree_size {
                return Err(BracketError::NotAdjacent);
            }
            if bracket.digest.timestamp < t {
                return Err(BracketError::StaleDigest {
                    needed: t,
                    found: bracket.digest.timestamp,
                });
            }
        }
    }
    Ok(&before.entry.jwks)
}

/// A client that remembers the last digest it accepted and only moves
/// forward along consistent extensions of it.
#[derive(Debug, Clone)]
pub struct DigestPin {
    pinned: SignedDigest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PinError {
    #[error("new digest not accepted: {0}")]
    Quorum(#[from] QuorumError),
    #[error("new digest is smaller than the pinned digest")]
    Rollback,
    #[error("consistency proof covers {found_old}..{found_new}, expected {old}..{new}")]
    WrongRange {
        old: u64,
        new: u64,
        found_old: u64,
        found_new: u64,
    },
    #[error("log is not an extension of the pinned digest")]
    Inconsistent,
}

impl DigestPin {
    pub fn new(digest: SignedDigest, trust: &LogTrust) -> Result<Self, PinError> {
        client_check_quorum(&digest, trust)?;
        Ok(Self { pinned: digest })
    }

    pub fn pinned(&self) -> &SignedDigest {
        &self.pinned
    }

    /// Checks that `next` extends the pinned log. The pin only advances when
    /// everything verifies.
    pub fn check(
        &self,
        next: &SignedDigest,
        proof: &ConsistencyProof,
        trust: &LogTrust,
    ) -> Result<(), PinError> {
        client_check_quorum(next, trust)?;
        let (old, new) = (self.pinned.tree_size, next.tree_size);
        if new < old {
            return Err(PinError::Rollback);
        }
        if old == 0 {
            return Ok(());
        }
        if proof.old_size != old || proof.new_size != new {
            return Err(PinError::WrongRange {
                old,
                new,
                found_old: proof.old_size,
                found_new: proof.new_size,
            });
        }
        if !verify_consistency(proof, &self.pinned.root_hash, &next.root_hash) {
            return Err(PinError::Inconsistent);
        }
        Ok(())
    }

    pub fn advance(
        &mut self,
        next: SignedDigest,
        proof: &ConsistencyProof,
        trust: &LogTrust,
    ) -> Result<(), PinError> {
        self.check(&next, proof, trust)?;
        self.pinned = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("no entry for {issuer:?} at or before {t}")]
    UnknownAtTime { issuer: String, t: u64 },
    #[error("not found: {0}")]
    NotFound(#[from] MerkleError),
    #[error("cosignature from unknown witness {0:?}")]
    UnknownWitness(String),
    #[error("cosignature from {0:?} does not verify over the current digest")]
    BadCosignature(String),
    #[error("key set does not match the issuer's live JWKS")]
    KeysetMismatch,
    #[error("could not check key set: {0}")]
    Source(#[from] SourceError),
}

/// Result of an append. `duplicate` marks a snapshot equal to the issuer's
/// latest entry, in which case nothing was appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendOutcome {
    pub entry: LedgerEntry,
    pub digest: SignedDigest,
    pub duplicate: bool,
}

/// Everything a witness needs to review the ledger's newest digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosignRequest {
    pub proposed: SignedDigest,
    pub new_entries: Vec<AttestedEntry>,
    pub consistency: Option<ConsistencyProof>,
}

/// The ledger server state.
pub struct JwkLedger {
    key: SigningKey,
    entries: Vec<LedgerEntry>,
    tree: MerkleTree,
    latest: SignedDigest,
    witnesses: BTreeMap<String, VerifyingKey>,
}

impl std::fmt::Debug for JwkLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JwkLedger")
            .field("size", &self.entries.len())
            .field("latest", &self.latest)
            .finish_non_exhaustive()
    }
}

impl JwkLedger {
    pub fn new(key: SigningKey, now: u64) -> Self {
        Self::from_entries(key, Vec::new(), now)
    }

    /// Rebuilds a ledger from stored entries and signs a fresh digest at
    /// `now`. Entry indices are reassigned by position.
    pub fn from_entries(key: SigningKey, mut entries: Vec<LedgerEntry>, now: u64) -> Self {
        for (i, e) in entries.iter_mut().enumerate() {
            e.index = i as u64;
        }
        let tree = MerkleTree::from_leaf_hashes(entries.iter().map(LedgerEntry::leaf_hash));
        let latest = SignedDigest::sign(&key, tree.len(), tree.root(), now);
        Self {
            key,
            entries,
            tree,
            latest,
            witnesses: BTreeMap::new(),
        }
    }

    pub fn register_witness(&mut self, id: impl Into<String>, key: VerifyingKey) {
        self.witnesses.insert(id.into(), key);
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn size(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entry(&self, index: u64) -> Option<&LedgerEntry> {
        self.entries.get(index as usize)
    }

    pub fn digest(&self) -> &SignedDigest {
        &self.latest
    }

    pub fn latest_for(&self, issuer: &str) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| e.issuer == issuer)
    }

    fn sign_head(&mut self, now: u64) {
        let timestamp = now.max(self.latest.timestamp);
        self.latest = SignedDigest::sign(&self.key, self.tree.len(), self.tree.root(), timestamp);
    }

    /// Appends a snapshot unless it equals the issuer's latest one.
    pub fn append(&mut self, issuer: &str, jwks: &Jwks, now: u64) -> AppendOutcome {
        if let Some(latest) = self.latest_for(issuer) {
            if latest.jwks.same_keys(jwks) {
                return AppendOutcome {
                    entry: latest.clone(),
                    digest: self.latest.clone(),
                    duplicate: true,
                };
            }
        }
        let floor = self.latest_for(issuer).map_or(0, |e| e.recorded_at);
        let recorded_at = now.max(floor);
        let mut jwks = jwks.clone();
        jwks.fetched_at = recorded_at;
        let entry = LedgerEntry {
            index: self.size(),
            issuer: issuer.to_owned(),
            jwks,
            recorded_at,
        };
        self.push_entry(entry.clone());
        self.sign_head(now);
        AppendOutcome {
            entry,
            digest: self.latest.clone(),
            duplicate: false,
        }
    }

    /// Appends after checking the snapshot against the issuer's live key set.
    pub fn append_verified(
        &mut self,
        issuer: &str,
        jwks: &Jwks,
        source: &dyn JwksSource,
        now: u64,
    ) -> Result<AppendOutcome, LedgerError> {
        let live = source.fetch_jwks(issuer, now)?;
        if !live.same_keys(jwks) {
            return Err(LedgerError::KeysetMismatch);
        }
        Ok(self.append(issuer, jwks, now))
    }

    /// Adds a leaf without signing a new head. A well-behaved ledger never
    /// calls this on its own; it exists to build misbehaving ledgers.
    pub fn push_entry(&mut self, mut entry: LedgerEntry) {
        entry.index = self.size();
        self.tree.push(entry.leaf_hash());
        self.entries.push(entry);
    }

    /// Re-signs the current tree at a later timestamp, dropping cosignatures.
    pub fn refresh(&mut self, now: u64) -> &SignedDigest {
        self.sign_head(now);
        &self.latest
    }

    pub fn add_cosignature(&mut self, cosignature: Cosignature) -> Result<(), LedgerError> {
        let key = self
            .witnesses
            .get(&cosignature.witness_id)
            .ok_or_else(|| LedgerError::UnknownWitness(cosignature.witness_id.clone()))?;
        if !key.verify(&self.latest.message(), &cosignature.signature) {
            return Err(LedgerError::BadCosignature(cosignature.witness_id));
        }
        let cosigs = &mut self.latest.witness_cosignatures;
        cosigs.retain(|c| c.witness_id != cosignature.witness_id);
        cosigs.push(cosignature);
        cosigs.sort_by(|a, b| a.witness_id.cmp(&b.witness_id));
        Ok(())
    }

    pub fn prove_inclusion(&self, index: u64, tree_size: u64) -> Result<InclusionProof, LedgerError> {
        Ok(self.tree.prove_inclusion(index, tree_size)?)
    }

    pub fn prove_consistency(&self, old: u64, new: u64) -> Result<ConsistencyProof, LedgerError> {
        Ok(self.tree.prove_consistency(old, new)?)
    }

    fn attest(&self, index: u64) -> AttestedEntry {
        AttestedEntry {
            entry: self.entries[index as usize].clone(),
            proof: self
                .tree
                .prove_inclusion(index, self.size())
                .expect("index within tree"),
        }
    }

    /// The review package for a witness whose last cosigned digest had
    /// `witness_size` leaves.
    pub fn cosign_request(&self, witness_size: u64) -> CosignRequest {
        let size = self.size();
        let new_entries = (witness_size.min(size)..size).map(|i| self.attest(i)).collect();
        let consistency = (witness_size > 0 && witness_size <= size)
            .then(|| self.tree.prove_consistency(witness_size, size).expect("valid range"));
        CosignRequest {
            proposed: self.latest.unsigned_by_witnesses(),
            new_entries,
            consistency,
        }
    }

    /// Brackets `t` for `issuer` under the current digest.
    pub fn query_at(&self, issuer: &str, t: u64) -> Result<TimestampBracket, LedgerError> {
        let unknown = || LedgerError::UnknownAtTime {
            issuer: issuer.to_owned(),
            t,
        };
        let before = self
            .entries
            .iter()
            .rev()
            .find(|e| e.issuer == issuer && e.recorded_at <= t)
            .ok_or_else(unknown)?
            .index;
        let after = self.entries[before as usize + 1..]
            .iter()
            .find(|e| e.issuer == issuer)
            .map(|e| e.index);
        let end = after.unwrap_or(self.size());
        Ok(TimestampBracket {
            issuer: issuer.to_owned(),
            query_time: t,
            before: self.attest(before),
            interleaved: (before + 1..end).map(|i| self.attest(i)).collect(),
            after: after.map(|i| self.attest(i)),
            digest: self.latest.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WitnessRefusal {
    #[error("log signature on proposed digest does not verify")]
    BadLogSignature,
    #[error("proposed digest rolls back the last cosigned digest")]
    Rollback,
    #[error("proposed digest is not consistent with the last cosigned digest")]
    Inconsistent,
    #[error("extra-entries: {0} leaves added in one round")]
    ExtraEntries(u64),
    #[error("supplied entry does not match the new leaf")]
    DeltaMismatch,
    #[error("keyset-mismatch: recorded key set differs from the issuer's live JWKS")]
    KeysetMismatch,
    #[error("timestamp outside witness clock skew")]
    ClockSkew,
    #[error("could not fetch live key set: {0}")]
    SourceUnavailable(SourceError),
}

impl WitnessRefusal {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadLogSignature => "bad-log-signature",
            Self::Rollback => "rollback",
            Self::Inconsistent => "inconsistent",
            Self::ExtraEntries(_) => "extra-entries",
            Self::DeltaMismatch => "delta-mismatch",
            Self::KeysetMismatch => "keyset-mismatch",
            Self::ClockSkew => "clock-skew",
            Self::SourceUnavailable(_) => "source-unavailable",
        }
    }
}

/// An independent witness. It cosigns a digest only if it extends the last
/// digest it cosigned by at most one entry, and that entry's key set is what
/// the issuer is serving right now.
pub struct Witness {
    id: String,
    key: SigningKey,
    ledger_key: VerifyingKey,
    prev: SignedDigest,
    skew: u64,
}

impl std::fmt::Debug for Witness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Witness")
            .field("id", &self.id)
            .field("prev", &self.prev)
            .finish_non_exhaustive()
    }
}

impl Witness {
    pub fn new(id: impl Into<String>, key: SigningKey, ledger_key: VerifyingKey) -> Self {
        Self {
            id: id.into(),
            key,
            ledger_key,
            prev: SignedDigest {
                tree_size: 0,
                root_hash: merkle::empty_root(),
                timestamp: 0,
                log_signature: Vec::new(),
                witness_cosignatures: Vec::new(),
            },
            skew: DEFAULT_WITNESS_SKEW,
        }
    }

    pub fn with_skew(mut self, skew: u64) -> Self {
        self.skew = skew;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    /// The last digest this witness cosigned.
    pub fn last_cosigned(&self) -> &SignedDigest {
        &self.prev
    }

    pub fn review(
        &mut self,
        request: &CosignRequest,
        source: &dyn JwksSource,
        now: u64,
    ) -> Result<Cosignature, WitnessRefusal> {
        let proposed = &request.proposed;
        if !self.ledger_key.verify(&proposed.message(), &proposed.log_signature) {
            return Err(WitnessRefusal::BadLogSignature);
        }
        if proposed.tree_size < self.prev.tree_size || proposed.timestamp < self.prev.timestamp {
            return Err(WitnessRefusal::Rollback);
        }
        if proposed.timestamp.abs_diff(now) > self.skew {
            return Err(WitnessRefusal::ClockSkew);
        }

        let consistent = match (self.prev.tree_size, &request.consistency) {
            (0, _) => true,
            (old, _) if old == proposed.tree_size => self.prev.root_hash == proposed.root_hash,
            (old, Some(proof)) => {
                proof.old_size == old
                    && proof.new_size == proposed.tree_size
                    && verify_consistency(proof, &self.prev.root_hash, &proposed.root_hash)
            }
            (_, None) => false,
        };
        if !consistent {
            return Err(WitnessRefusal::Inconsistent);
        }

        let added = proposed.tree_size - self.prev.tree_size;
        if added > 1 {
            return Err(WitnessRefusal::ExtraEntries(added));
        }
        if added == 1 {
            let [delta] = request.new_entries.as_slice() else {
                return Err(WitnessRefusal::DeltaMismatch);
            };
            let entry = &delta.entry;
            if entry.index != self.prev.tree_size
                || delta.proof.leaf_index != entry.index
                || delta.proof.tree_size != proposed.tree_size
                || !verify_inclusion(&entry.leaf_hash(), &delta.proof, &proposed.root_hash)
            {
                return Err(WitnessRefusal::DeltaMismatch);
            }
            let live = source
                .fetch_jwks(&entry.issuer, now)
                .map_err(WitnessRefusal::SourceUnavailable)?;
            if !live.same_keys(&entry.jwks) {
                return Err(WitnessRefusal::KeysetMismatch);
            }
            if entry.recorded_at.abs_diff(now) > self.skew {
                return Err(WitnessRefusal::ClockSkew);
            }
        }

        let signature = self.key.sign(&proposed.message());
        self.prev = proposed.clone();
        Ok(Cosignature {
            witness_id: self.id.clone(),
            signature,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gq::RsaPublicKey;
    use num_bigint::BigUint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Mutex;

    const ISSUER: &str = "https://idp.test";

    fn jwks(seed: u32) -> Jwks {
        let n = (BigUint::from(1u8) << 520) + BigUint::from(2 * seed + 1);
        Jwks::new(
            vec![RsaPublicKey::new(n, 65537, format!("kid-{seed}")).unwrap()],
            0,
        )
        .unwrap()
    }

    struct Live(Mutex<Jwks>);

    impl JwksSource for Live {
        fn fetch_jwks(&self, _issuer: &str, _now: u64) -> Result<Jwks, SourceError> {
            Ok(self.0.lock().unwrap().clone())
        }
    }

    struct Setup {
        ledger: JwkLedger,
        witnesses: Vec<Witness>,
        trust: LogTrust,
    }

    fn setup(n_witnesses: usize, quorum: usize) -> Setup {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut ledger = JwkLedger::new(SigningKey::generate(&mut rng), 0);
        let mut witnesses = Vec::new();
        let mut witness_keys = BTreeMap::new();
        for i in 0..n_witnesses {
            let w = Witness::new(format!("w{i}"), SigningKey::generate(&mut rng), ledger.verifying_key());
            ledger.register_witness(w.id(), w.verifying_key());
            witness_keys.insert(w.id().to_owned(), w.verifying_key());
            witnesses.push(w);
        }
        let trust = LogTrust {
            log_key: ledger.verifying_key(),
            witness_keys,
            quorum,
        };
        Setup {
            ledger,
            witnesses,
            trust,
        }
    }

    fn cosign_all(s: &mut Setup, source: &dyn JwksSource, now: u64) -> Vec<Result<(), WitnessRefusal>> {
        let mut results = Vec::new();
        for w in &mut s.witnesses {
            let req = s.ledger.cosign_request(w.last_cosigned().tree_size);
            results.push(w.review(&req, source, now).map(|c| {
                s.ledger.add_cosignature(c).unwrap();
            }));
        }
        results
    }

    #[test]
    fn single_leaf_root_and_duplicate_noop() {
        let mut s = setup(1, 1);
        let out = s.ledger.append(ISSUER, &jwks(1), 100);
        assert!(!out.duplicate);
        assert_eq!(out.digest.tree_size, 1);
        assert_eq!(out.digest.root_hash, merkle::leaf_hash(&out.entry.leaf_body()));
        let again = s.ledger.append(ISSUER, &jwks(1), 150);
        assert!(again.duplicate);
        assert_eq!(again.digest.tree_size, 1);
        assert_eq!(again.entry, out.entry);
    }

    #[test]
    fn leaf_body_layout() {
        let entry = LedgerEntry {
            index: 0,
            issuer: "ab".into(),
            jwks: jwks(1),
            recorded_at: 258,
        };
        let body = entry.leaf_body();
        assert_eq!(&body[..6], &[0, 0, 0, 2, b'a', b'b']);
        assert_eq!(&body[6..14], &258u64.to_be_bytes());
        let json = entry.jwks.canonical_json();
        assert_eq!(&body[14..18], &(json.len() as u32).to_be_bytes());
        assert_eq!(&body[18..], &json[..]);
    }

    #[test]
    fn entry_json_round_trip_checks_leaf_hash() {
        let mut set = jwks(2);
        set.fetched_at = 77;
        let entry = LedgerEntry {
            index: 3,
            issuer: ISSUER.into(),
            jwks: set,
            recorded_at: 77,
        };
        let json = serde_json::to_value(&entry).unwrap();
        let back: LedgerEntry = serde_json::from_value(json.clone()).unwrap();
        assert_eq!(back, entry);
        let mut tampered = json;
        tampered["recorded_at"] = 78.into();
        assert!(serde_json::from_value::<LedgerEntry>(tampered).is_err());
    }

    #[test]
    fn honest_round_gets_quorum() {
        let mut s = setup(3, 2);
        let live = Live(Mutex::new(jwks(1)));
        s.ledger.append(ISSUER, &jwks(1), 100);
        assert!(cosign_all(&mut s, &live, 100).iter().all(Result::is_ok));
        assert_eq!(client_check_quorum(s.ledger.digest(), &s.trust), Ok(3));
    }

    #[test]
    fn quorum_rules() {
        let mut s = setup(3, 2);
        let live = Live(Mutex::new(jwks(1)));
        s.ledger.append(ISSUER, &jwks(1), 100);
        cosign_all(&mut s, &live, 100);
        let full = s.ledger.digest().clone();

        let mut two = full.clone();
        two.witness_cosignatures.truncate(2);
        assert_eq!(client_check_quorum(&two, &s.trust), Ok(2));

        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let stranger = SigningKey::generate(&mut rng);
        let mut one_plus_unknown = full.clone();
        one_plus_unknown.witness_cosignatures = vec![
            full.witness_cosignatures[0].clone(),
            Cosignature {
                witness_id: "intruder".into(),
                signature: stranger.sign(&full.message()),
            },
        ];
        assert_eq!(
            client_check_quorum(&one_plus_unknown, &s.trust),
            Err(QuorumError::InsufficientCosignatures { valid: 1, required: 2 })
        );

        let mut duplicated = full.clone();
        duplicated.witness_cosignatures =
            vec![full.witness_cosignatures[0].clone(), full.witness_cosignatures[0].clone()];
        assert_eq!(
            client_check_quorum(&duplicated, &s.trust),
            Err(QuorumError::InsufficientCosignatures { valid: 1, required: 2 })
        );

        let mut forged = full.clone();
        forged.timestamp += 1;
        assert_eq!(client_check_quorum(&forged, &s.trust), Err(QuorumError::BadLogSignature));
    }

    #[test]
    fn witness_refuses_two_leaves_in_one_round() {
        let mut s = setup(1, 1);
        let live = Live(Mutex::new(jwks(1)));
        s.ledger.append(ISSUER, &jwks(1), 100);
        cosign_all(&mut s, &live, 100);
        s.ledger.push_entry(LedgerEntry {
            index: 0,
            issuer: ISSUER.into(),
            jwks: jwks(7),
            recorded_at: 101,
        });
        s.ledger.append(ISSUER, &jwks(2), 102);
        *live.0.lock().unwrap() = jwks(2);
        assert_eq!(
            cosign_all(&mut s, &live, 102),
            vec![Err(WitnessRefusal::ExtraEntries(2))]
        );
    }

    #[test]
    fn witness_refuses_keyset_mismatch() {
        let mut s = setup(1, 1);
        let live = Live(Mutex::new(jwks(1)));
        let mut forged = jwks(1);
        let key = forged.keys()[0].clone();
        let mut n = key.modulus().to_bytes_be();
        n[10] ^= 0x01;
        forged = Jwks::new(
            vec![RsaPublicKey::new(BigUint::from_bytes_be(&n), 65537, key.key_id()).unwrap()],
            0,
        )
        .unwrap();
        s.ledger.append(ISSUER, &forged, 100);
        assert_eq!(
            cosign_all(&mut s, &live, 100),
            vec![Err(WitnessRefusal::KeysetMismatch)]
        );
    }

    #[test]
    fn witness_refuses_skewed_and_rewritten_logs() {
        let mut s = setup(1, 1);
        let live = Live(Mutex::new(jwks(1)));
        s.ledger.append(ISSUER, &jwks(1), 100);
        assert_eq!(cosign_all(&mut s, &live, 1000), vec![Err(WitnessRefusal::ClockSkew)]);
        assert!(cosign_all(&mut s, &live, 100)[0].is_ok());

        // A different ledger (same key) with a rewritten first entry.
        let key = s.ledger.key.clone();
        let mut rewritten = JwkLedger::from_entries(
            key,
            vec![LedgerEntry {
                index: 0,
                issuer: ISSUER.into(),
                jwks: jwks(9),
                recorded_at: 100,
            }],
            101,
        );
        *live.0.lock().unwrap() = jwks(2);
        rewritten.append(ISSUER, &jwks(2), 102);
        let req = rewritten.cosign_request(1);
        assert_eq!(
            s.witnesses[0].review(&req, &live, 102),
            Err(WitnessRefusal::Inconsistent)
        );
    }

    #[test]
    fn refresh_is_cosigned_without_delta() {
        let mut s = setup(2, 2);
        let live = Live(Mutex::new(jwks(1)));
        s.ledger.append(ISSUER, &jwks(1), 100);
        cosign_all(&mut s, &live, 100);
        s.ledger.refresh(500);
        assert!(s.ledger.digest().witness_cosignatures.is_empty());
        assert!(cosign_all(&mut s, &live, 500).iter().all(Result::is_ok));
        assert_eq!(client_check_quorum(s.ledger.digest(), &s.trust), Ok(2));
        assert_eq!(s.ledger.digest().timestamp, 500);
    }

    #[test]
    fn add_cosignature_validates() {
        let mut s = setup(1, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let other = SigningKey::generate(&mut rng);
        assert_eq!(
            s.ledger.add_cosignature(Cosignature {
                witness_id: "nobody".into(),
                signature: vec![]
            }),
            Err(LedgerError::UnknownWitness("nobody".into()))
        );
        let bad = Cosignature {
            witness_id: "w0".into(),
            signature: other.sign(&s.ledger.digest().message()),
        };
        assert_eq!(
            s.ledger.add_cosignature(bad),
            Err(LedgerError::BadCosignature("w0".into()))
        );
    }

    #[test]
    fn bracket_cases() {
        let mut s = setup(2, 2);
        let live = Live(Mutex::new(jwks(1)));
        s.ledger.append(ISSUER, &jwks(1), 100);
        cosign_all(&mut s, &live, 100);
        *live.0.lock().unwrap() = jwks(2);
        s.ledger.append(ISSUER, &jwks(2), 200);
        cosign_all(&mut s, &live, 200);

        let b = s.ledger.query_at(ISSUER, 150).unwrap();
        assert_eq!(b.before.entry.recorded_at, 100);
        assert_eq!(b.after.as_ref().unwrap().entry.recorded_at, 200);
        let keys = verify_bracket(&b, ISSUER, 150, &s.trust).unwrap();
        assert!(keys.same_keys(&jwks(1)));

        // Exactly at an entry's timestamp the entry itself is "before".
        let b = s.ledger.query_at(ISSUER, 200).unwrap();
        assert_eq!(b.before.entry.recorded_at, 200);
        assert!(b.after.is_none());
        assert_eq!(verify_bracket(&b, ISSUER, 200, &s.trust).unwrap(), &b.before.entry.jwks);

        // Open bracket needs a fresh digest.
        let b = s.ledger.query_at(ISSUER, 250).unwrap();
        assert!(b.after.is_none());
        assert_eq!(
            verify_bracket(&b, ISSUER, 250, &s.trust),
            Err(BracketError::StaleDigest { needed: 250, found: 200 })
        );
        s.ledger.refresh(260);
        cosign_all(&mut s, &live, 260);
        let b = s.ledger.query_at(ISSUER, 250).unwrap();
        assert!(b.digest.timestamp >= 250);
        assert!(verify_bracket(&b, ISSUER, 250, &s.trust).is_ok());

        assert_eq!(
            s.ledger.query_at(ISSUER, 50),
            Err(LedgerError::UnknownAtTime { issuer: ISSUER.into(), t: 50 })
        );
    }

    #[test]
    fn bracket_tampering_detected() {
        let mut s = setup(1, 1);
        let live = Live(Mutex::new(jwks(1)));
        for (i, t) in [(1u32, 100u64), (2, 200), (3, 300)] {
            *live.0.lock().unwrap() = jwks(i);
            s.ledger.append(ISSUER, &jwks(i), t);
            cosign_all(&mut s, &live, t);
        }
        let good = s.ledger.query_at(ISSUER, 150).unwrap();
        assert!(verify_bracket(&good, ISSUER, 150, &s.trust).is_ok());

        // Skip an entry: pair entry 0 with entry 2.
        let mut skipped = good.clone();
        skipped.after = Some(s.ledger.attest(2));
        assert_eq!(verify_bracket(&skipped, ISSUER, 150, &s.trust), Err(BracketError::NotAdjacent));

        // Swap in a different key set for "before".
        let mut swapped = good.clone();
        swapped.before.entry.jwks = jwks(9);
        assert_eq!(verify_bracket(&swapped, ISSUER, 150, &s.trust), Err(BracketError::NotIncluded(0)));

        // Query time mismatch.
        assert!(matches!(
            verify_bracket(&good, ISSUER, 160, &s.trust),
            Err(BracketError::WrongQueryTime { .. })
        ));

        // Drop the after entry to claim the old key set is still current.
        let mut truncated = good.clone();
        truncated.after = None;
        assert_eq!(verify_bracket(&truncated, ISSUER, 150, &s.trust), Err(BracketError::NotAdjacent));
    }

    #[test]
    fn interleaved_issuers_bracket() {
        let mut s = setup(1, 1);
        let other = "https://other.test";
        s.ledger.append(ISSUER, &jwks(1), 100);
        s.ledger.append(other, &jwks(5), 120);
        s.ledger.append(ISSUER, &jwks(2), 200);
        s.ledger.append(other, &jwks(6), 220);
        s.ledger.refresh(400);
        // Not routed through witnesses; sign directly with the witness key.
        let cosig = s.witnesses[0].key.sign(&s.ledger.digest().message());
        s.ledger
            .add_cosignature(Cosignature { witness_id: "w0".into(), signature: cosig })
            .unwrap();

        let b = s.ledger.query_at(ISSUER, 150).unwrap();
        assert_eq!(b.interleaved.len(), 1);
        assert!(verify_bracket(&b, ISSUER, 150, &s.trust).is_ok());

        let open = s.ledger.query_at(ISSUER, 300).unwrap();
        assert_eq!(open.before.entry.index, 2);
        assert_eq!(open.interleaved.len(), 1);
        assert!(verify_bracket(&open, ISSUER, 300, &s.trust).is_ok());

        let mut hidden = b.clone();
        hidden.interleaved.clear();
        assert_eq!(verify_bracket(&hidden, ISSUER, 150, &s.trust), Err(BracketError::NotAdjacent));
    }

    #[test]
    fn pin_detects_rewrite() {
        let mut s = setup(1, 1);
        let live = Live(Mutex::new(jwks(1)));
        for (i, t) in [(1u32, 100u64), (2, 200)] {
            *live.0.lock().unwrap() = jwks(i);
            s.ledger.append(ISSUER, &jwks(i), t);
            cosign_all(&mut s, &live, t);
        }
        let mut pin = DigestPin::new(s.ledger.digest().clone(), &s.trust).unwrap();

        *live.0.lock().unwrap() = jwks(3);
        s.ledger.append(ISSUER, &jwks(3), 300);
        cosign_all(&mut s, &live, 300);
        let proof = s.ledger.prove_consistency(2, 3).unwrap();
        pin.advance(s.ledger.digest().clone(), &proof, &s.trust).unwrap();

        let mut entries = s.ledger.entries().to_vec();
        entries[0].jwks = jwks(66);
        let mut evil = JwkLedger::from_entries(s.ledger.key.clone(), entries, 400);
        evil.register_witness("w0", s.witnesses[0].verifying_key());
        let cosig = s.witnesses[0].key.sign(&evil.digest().message());
        evil.add_cosignature(Cosignature { witness_id: "w0".into(), signature: cosig }).unwrap();
        let proof = evil.prove_consistency(3, 3).unwrap();
        assert_eq!(
            pin.check(evil.digest(), &proof, &s.trust),
            Err(PinError::Inconsistent)
        );
    }
}
