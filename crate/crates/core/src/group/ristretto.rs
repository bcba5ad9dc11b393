use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use sha2::Sha512;

use super::{Group, GroupError};

/// The ristretto255 prime-order group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ristretto255;

// 2^252 + 27742317777372353535851937790883648493
const ORDER_BE: [u8; 32] = [
    0x10, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
    0x14, 0xde, 0xf9, 0xde, 0xa2, 0xf7, 0x9c, 0xd6, 0x58, 0x12, 0x63, 0x1a, 0x5c, 0xf5, 0xd3, 0xed,
];

impl Group for Ristretto255 {
    type Scalar = Scalar;
    type Element = RistrettoPoint;

    const NAME: &'static str = "ristretto255";
    const ELEMENT_LEN: usize = 32;
    const SCALAR_LEN: usize = 32;

    fn order() -> &'static [u8] {
        &ORDER_BE
    }

    fn cofactor() -> u64 {
        1
    }

    fn generator() -> RistrettoPoint {
        RISTRETTO_BASEPOINT_POINT
    }

    fn identity() -> RistrettoPoint {
        RistrettoPoint::identity()
    }

    fn add(a: &RistrettoPoint, b: &RistrettoPoint) -> RistrettoPoint {
        a + b
    }

    fn neg(e: &RistrettoPoint) -> RistrettoPoint {
        -e
    }

    fn scalar_mul(k: &Scalar, e: &RistrettoPoint) -> RistrettoPoint {
        k * e
    }

    fn scalar_from_u64(v: u64) -> Scalar {
        Scalar::from(v)
    }

    fn scalar_product(a: &Scalar, b: &Scalar) -> Scalar {
        a * b
    }

    fn scalar_from_wide(bytes: &[u8; 64]) -> Scalar {
        Scalar::from_bytes_mod_order_wide(bytes)
    }

    fn hash_to_element(label: &[u8]) -> RistrettoPoint {
        RistrettoPoint::hash_from_bytes::<Sha512>(label)
    }

    fn encode_element(e: &RistrettoPoint) -> Vec<u8> {
        e.compress().to_bytes().to_vec()
    }

    fn decode_element(bytes: &[u8]) -> Result<RistrettoPoint, GroupError> {
        CompressedRistretto::from_slice(bytes)
            .map_err(|_| GroupError::InvalidElement)?
            .decompress()
            .ok_or(GroupError::InvalidElement)
    }

    fn encode_scalar(k: &Scalar) -> Vec<u8> {
        let mut out = k.to_bytes();
        out.reverse();
        out.to_vec()
    }

    fn decode_scalar(bytes: &[u8]) -> Result<Scalar, GroupError> {
        let mut le: [u8; 32] = bytes.try_into().map_err(|_| GroupError::InvalidScalar)?;
        le.reverse();
        Option::from(Scalar::from_canonical_bytes(le)).ok_or(GroupError::InvalidScalar)
    }
}
