//! Small helpers over `num_bigint::BigUint` shared by the RSA and proof code.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use rand::{CryptoRng, RngCore};

/// Big-endian encoding left-padded with zeros to exactly `len` bytes.
///
/// Returns `None` when the value does not fit.
pub fn to_fixed_be(value: &BigUint, len: usize) -> Option<Vec<u8>> {
    let raw = value.to_bytes_be();
    let raw: &[u8] = if raw == [0] { &[] } else { &raw };
    if raw.len() > len {
        return None;
    }
    let mut out = vec![0u8; len - raw.len()];
    out.extend_from_slice(raw);
    Some(out)
}

pub fn is_unit(value: &BigUint, modulus: &BigUint) -> bool {
    value.gcd(modulus).is_one()
}

/// Uniform element of the multiplicative group mod `modulus`, re-drawing on
/// non-units.
pub fn random_unit<R: RngCore + CryptoRng>(rng: &mut R, modulus: &BigUint) -> BigUint {
    loop {
        let candidate = rng.gen_biguint_range(&BigUint::one(), modulus);
        if is_unit(&candidate, modulus) {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_width_pads_and_rejects_overflow() {
        let v = BigUint::from(0x0102u32);
        assert_eq!(to_fixed_be(&v, 4).unwrap(), vec![0, 0, 1, 2]);
        assert_eq!(to_fixed_be(&BigUint::from(0u8), 2).unwrap(), vec![0, 0]);
        assert!(to_fixed_be(&v, 1).is_none());
    }

    #[test]
    fn random_unit_on_toy_modulus_is_coprime() {
        let mut rng = rand::thread_rng();
        let n = BigUint::from(77u32);
        for _ in 0..200 {
            let r = random_unit(&mut rng, &n);
            assert!(is_unit(&r, &n));
            assert!(r < n);
        }
    }
}
