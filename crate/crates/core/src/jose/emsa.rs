//! EMSA-PKCS1-v1_5 encoding for SHA-256 (the RS256 padding).

use num_bigint::BigUint;
use sha2::{Digest, Sha256};

/// DER prefix of `DigestInfo { sha256, NULL }` preceding the 32-byte hash.
pub const SHA256_DIGEST_INFO_PREFIX: [u8; 19] = [
    0x30, 0x31, 0x30, 0x0d, 0x06, 0x09, 0x60, 0x86, 0x48, 0x01, 0x65, 0x03, 0x04, 0x02, 0x01, 0x05,
    0x00, 0x04, 0x20,
];

/// Smallest encoded length: DigestInfo (51 bytes) plus 11 bytes of framing
/// and minimum padding.
pub const MIN_ENCODED_LEN: usize = SHA256_DIGEST_INFO_PREFIX.len() + 32 + 11;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmsaError {
    #[error("invalid parameter: modulus of {0} bytes is too short for EMSA-PKCS1-v1_5/SHA-256")]
    ModulusTooShort(usize),
}

/// Encoded message bytes `00 01 FF..FF 00 || DigestInfo || digest`, exactly
/// `modulus_len` bytes long.
pub fn emsa_encode_bytes(digest: &[u8; 32], modulus_len: usize) -> Result<Vec<u8>, EmsaError> {
    if modulus_len < MIN_ENCODED_LEN {
        return Err(EmsaError::ModulusTooShort(modulus_len));
    }
    let t_len = SHA256_DIGEST_INFO_PREFIX.len() + digest.len();
    let mut em = Vec::with_capacity(modulus_len);
    em.extend_from_slice(&[0x00, 0x01]);
    em.resize(modulus_len - t_len - 1, 0xff);
    em.push(0x00);
    em.extend_from_slice(&SHA256_DIGEST_INFO_PREFIX);
    em.extend_from_slice(digest);
    debug_assert_eq!(em.len(), modulus_len);
    Ok(em)
}

/// The encoded message as a big-endian integer.
pub fn emsa_encode(digest: &[u8; 32], modulus_len: usize) -> Result<BigUint, EmsaError> {
    emsa_encode_bytes(digest, modulus_len).map(|em| BigUint::from_bytes_be(&em))
}

/// Hashes `message` with SHA-256 and encodes the digest.
pub fn encode_message(message: &[u8], modulus_len: usize) -> Result<BigUint, EmsaError> {
    let digest: [u8; 32] = Sha256::digest(message).into();
    emsa_encode(&digest, modulus_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimum_length_has_eight_padding_bytes() {
        let em = emsa_encode_bytes(&[7u8; 32], MIN_ENCODED_LEN).unwrap();
        assert_eq!(MIN_ENCODED_LEN, 62);
        assert_eq!(&em[..2], &[0x00, 0x01]);
        let pad = em[2..].iter().take_while(|b| **b == 0xff).count();
        assert_eq!(pad, 8);
        assert_eq!(em[2 + pad], 0x00);
        assert_eq!(&em[3 + pad..3 + pad + 19], &SHA256_DIGEST_INFO_PREFIX);
        assert_eq!(&em[3 + pad + 19..], &[7u8; 32]);
    }

    #[test]
    fn too_short_is_rejected() {
        assert_eq!(
            emsa_encode(&[0u8; 32], MIN_ENCODED_LEN - 1),
            Err(EmsaError::ModulusTooShort(61))
        );
        assert!(emsa_encode(&[0u8; 32], 51).is_err());
    }

    #[test]
    fn leading_bytes_and_injectivity() {
        for len in [62usize, 64, 128, 256, 512] {
            let a = emsa_encode_bytes(&[1u8; 32], len).unwrap();
            let b = emsa_encode_bytes(&[2u8; 32], len).unwrap();
            assert_eq!(&a[..2], &[0, 1]);
            assert_eq!(a.len(), len);
            assert_ne!(a, b);
        }
    }
}
