//! RFC 6962 Merkle tree hashing with inclusion and consistency proofs.
//!
//! Leaves hash as `SHA-256(0x00 || data)` and interior nodes as
//! `SHA-256(0x01 || left || right)`. Proof verification follows the
//! iterative algorithms of RFC 9162 section 2.1.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Hash = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MerkleError {
    #[error("leaf {index} is not in a tree of size {size}")]
    LeafOutOfRange { index: u64, size: u64 },
    #[error("tree size {requested} exceeds current size {current}")]
    SizeOutOfRange { requested: u64, current: u64 },
    #[error("invalid consistency range {old}..{new}")]
    InvalidRange { old: u64, new: u64 },
}

pub fn leaf_hash(data: &[u8]) -> Hash {
    let mut h = Sha256::new();
    h.update([0x00]);
    h.update(data);
    h.finalize().into()
}

pub fn node_hash(left: &Hash, right: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update([0x01]);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

/// Root of the empty tree, `SHA-256("")`.
pub fn empty_root() -> Hash {
    Sha256::digest([]).into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    #[serde(with = "crate::hexser::hash_list")]
    pub path: Vec<Hash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyProof {
    pub old_size: u64,
    pub new_size: u64,
    #[serde(with = "crate::hexser::hash_list")]
    pub path: Vec<Hash>,
}

/// Append-only tree keeping every complete aligned subtree, so roots and
/// proofs for any prefix cost `O(log n)` hashes.
#[derive(Debug, Clone, Default)]
pub struct MerkleTree {
    // levels[h][i] is the hash of leaves [i * 2^h, (i + 1) * 2^h).
    levels: Vec<Vec<Hash>>,
}

fn split_point(n: u64) -> u64 {
    debug_assert!(n > 1);
    1 << (63 - (n - 1).leading_zeros())
}

impl MerkleTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_leaf_hashes(leaves: impl IntoIterator<Item = Hash>) -> Self {
        let mut tree = Self::new();
        for leaf in leaves {
            tree.push(leaf);
        }
        tree
    }

    pub fn len(&self) -> u64 {
        self.levels.first().map_or(0, |l| l.len() as u64)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, index: u64) -> Option<&Hash> {
        self.levels.first()?.get(index as usize)
    }

    pub fn push(&mut self, leaf: Hash) {
        let mut height = 0;
        let mut node = leaf;
        loop {
            if self.levels.len() == height {
                self.levels.push(Vec::new());
            }
            let level = &mut self.levels[height];
            level.push(node);
            if level.len() % 2 == 1 {
                break;
            }
            node = node_hash(&level[level.len() - 2], &level[level.len() - 1]);
            height += 1;
        }
    }

    fn subtree(&self, start: u64, len: u64) -> Hash {
        debug_assert!(len > 0);
        if len.is_power_of_two() {
            let height = len.trailing_zeros() as usize;
            return self.levels[height][(start >> height) as usize];
        }
        let k = split_point(len);
        node_hash(&self.subtree(start, k), &self.subtree(start + k, len - k))
    }

    fn check_size(&self, size: u64) -> Result<(), MerkleError> {
        if size > self.len() {
            return Err(MerkleError::SizeOutOfRange {
                requested: size,
                current: self.len(),
            });
        }
        Ok(())
    }

    pub fn root(&self) -> Hash {
        self.root_at(self.len()).expect("current size")
    }

    /// Root hash of the first `size` leaves.
    pub fn root_at(&self, size: u64) -> Result<Hash, MerkleError> {
        self.check_size(size)?;
        Ok(if size == 0 {
            empty_root()
        } else {
            self.subtree(0, size)
        })
    }

    pub fn prove_inclusion(&self, index: u64, size: u64) -> Result<InclusionProof, MerkleError> {
        self.check_size(size)?;
        if index >= size {
            return Err(MerkleError::LeafOutOfRange { index, size });
        }
        let mut path = Vec::new();
        self.inclusion_path(index, 0, size, &mut path);
        Ok(InclusionProof {
            leaf_index: index,
            tree_size: size,
            path,
        })
    }

    fn inclusion_path(&self, index: u64, start: u64, len: u64, out: &mut Vec<Hash>) {
        if len <= 1 {
            return;
        }
        let k = split_point(len);
        if index < k {
            self.inclusion_path(index, start, k, out);
            out.push(self.subtree(start + k, len - k));
        } else {
            self.inclusion_path(index - k, start + k, len - k, out);
            out.push(self.subtree(start, k));
        }
    }

    pub fn prove_consistency(&self, old: u64, new: u64) -> Result<ConsistencyProof, MerkleError> {
        self.check_size(new)?;
        if old == 0 || old > new {
            return Err(MerkleError::InvalidRange { old, new });
        }
        let mut path = Vec::new();
        if old < new {
            self.consistency_path(old, 0, new, true, &mut path);
        }
        Ok(ConsistencyProof {
            old_size: old,
            new_size: new,
            path,
        })
    }

    fn consistency_path(&self, m: u64, start: u64, n: u64, complete: bool, out: &mut Vec<Hash>) {
        if m == n {
            if !complete {
                out.push(self.subtree(start, n));
            }
            return;
        }
        let k = split_point(n);
        if m <= k {
            self.consistency_path(m, start, k, complete, out);
            out.push(self.subtree(start + k, n - k));
        } else {
            self.consistency_path(m - k, start + k, n - k, false, out);
            out.push(self.subtree(start, k));
        }
    }
}

pub fn verify_inclusion(leaf: &Hash, proof: &InclusionProof, root: &Hash) -> bool {
    if proof.leaf_index >= proof.tree_size {
        return false;
    }
    let mut f = proof.leaf_index;
    let mut s = proof.tree_size - 1;
    let mut r = *leaf;
    for p in &proof.path {
        if s == 0 {
            return false;
        }
        if f & 1 == 1 || f == s {
            r = node_hash(p, &r);
            if f & 1 == 0 {
                while f & 1 == 0 && f != 0 {
                    f >>= 1;
                    s >>= 1;
                }
            }
        } else {
            r = node_hash(&r, p);
        }
        f >>= 1;
        s >>= 1;
    }
    s == 0 && r == *root
}

pub fn verify_consistency(proof: &ConsistencyProof, old_root: &Hash, new_root: &Hash) -> bool {
    let (old, new) = (proof.old_size, proof.new_size);
    if old > new {
        return false;
    }
    if old == new {
        return proof.path.is_empty() && old_root == new_root;
    }
    if old == 0 {
        return proof.path.is_empty();
    }
    if proof.path.is_empty() {
        return false;
    }
    let mut path = proof.path.as_slice();
    let seed;
    if old.is_power_of_two() {
        seed = *old_root;
    } else {
        seed = path[0];
        path = &path[1..];
    }
    let mut f = old - 1;
    let mut s = new - 1;
    while f & 1 == 1 {
        f >>= 1;
        s >>= 1;
    }
    let mut fr = seed;
    let mut sr = seed;
    for c in path {
        if s == 0 {
            return false;
        }
        if f & 1 == 1 || f == s {
            fr = node_hash(c, &fr);
            sr = node_hash(c, &sr);
            if f & 1 == 0 {
                while f & 1 == 0 && f != 0 {
                    f >>= 1;
                    s >>= 1;
                }
            }
        } else {
            sr = node_hash(&sr, c);
        }
        f >>= 1;
        s >>= 1;
    }
    fr == *old_root && sr == *new_root && s == 0
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Direct recursive definition of the tree hash, used to cross-check the
    //! cached implementation.
    use super::*;

    pub fn mth(leaves: &[Hash]) -> Hash {
        match leaves.len() {
            0 => empty_root(),
            1 => leaves[0],
            n => {
                let k = split_point(n as u64) as usize;
                node_hash(&mth(&leaves[..k]), &mth(&leaves[k..]))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(n: usize) -> Vec<Hash> {
        (0..n).map(|i| leaf_hash(&(i as u64).to_be_bytes())).collect()
    }

    #[test]
    fn small_trees() {
        let l = leaves(2);
        let mut tree = MerkleTree::new();
        assert_eq!(tree.root(), empty_root());
        tree.push(l[0]);
        assert_eq!(tree.root(), l[0]);
        let p = tree.prove_inclusion(0, 1).unwrap();
        assert!(p.path.is_empty());
        assert!(verify_inclusion(&l[0], &p, &l[0]));

        tree.push(l[1]);
        let root = node_hash(&l[0], &l[1]);
        assert_eq!(tree.root(), root);
        let p = tree.prove_inclusion(0, 2).unwrap();
        assert_eq!(p.path, vec![l[1]]);
        assert!(verify_inclusion(&l[0], &p, &root));

        let c = tree.prove_consistency(1, 2).unwrap();
        assert_eq!(c.path, vec![l[1]]);
        assert!(verify_consistency(&c, &l[0], &root));
        let same = tree.prove_consistency(2, 2).unwrap();
        assert!(same.path.is_empty());
        assert!(verify_consistency(&same, &root, &root));
    }

    #[test]
    fn rfc6962_empty_root_vector() {
        assert_eq!(
            hex::encode(empty_root()),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        // Leaf hash of the empty string, from the CT reference test data.
        assert_eq!(
            hex::encode(leaf_hash(b"")),
            "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d"
        );
    }

    #[test]
    fn roots_match_recursive_oracle() {
        let all = leaves(70);
        let tree = MerkleTree::from_leaf_hashes(all.clone());
        for size in 0..=70u64 {
            assert_eq!(tree.root_at(size).unwrap(), oracle::mth(&all[..size as usize]));
        }
    }

    #[test]
    fn range_errors() {
        let tree = MerkleTree::from_leaf_hashes(leaves(4));
        assert!(matches!(tree.prove_inclusion(4, 4), Err(MerkleError::LeafOutOfRange { .. })));
        assert!(matches!(tree.prove_inclusion(0, 5), Err(MerkleError::SizeOutOfRange { .. })));
        assert!(matches!(tree.prove_consistency(0, 3), Err(MerkleError::InvalidRange { .. })));
        assert!(matches!(tree.prove_consistency(3, 2), Err(MerkleError::InvalidRange { .. })));
        assert!(matches!(tree.prove_consistency(1, 5), Err(MerkleError::SizeOutOfRange { .. })));
    }

    #[test]
    fn tampered_proofs_fail() {
        let all = leaves(13);
        let tree = MerkleTree::from_leaf_hashes(all.clone());
        let root = tree.root();
        let mut p = tree.prove_inclusion(5, 13).unwrap();
        assert!(verify_inclusion(&all[5], &p, &root));
        assert!(!verify_inclusion(&all[6], &p, &root));
        p.path[1][0] ^= 1;
        assert!(!verify_inclusion(&all[5], &p, &root));

        let old_root = tree.root_at(6).unwrap();
        let mut c = tree.prove_consistency(6, 13).unwrap();
        assert!(verify_consistency(&c, &old_root, &root));
        c.path.pop();
        assert!(!verify_consistency(&c, &old_root, &root));
    }
}
