use sha2::{Digest, Sha512};
use zeroize::Zeroize;

use super::{Group, GroupError};

const MODULUS: u32 = 23;
const ORDER: u8 = 11;
const GENERATOR: u8 = 2;

/// The order-11 subgroup of the multiplicative integers mod 23, generated
/// by 2. The group law is written additively to match [`Group`], so
/// `add(a, b)` is `a * b mod 23` and `scalar_mul(k, e)` is `e^k mod 23`.
///
/// Only suitable for tests: discrete logarithms are trivial.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ToyGroup;

/// Integer in `[0, 11)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToyScalar(u8);

/// Residue mod 23 lying in the order-11 subgroup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToyElement(u8);

impl ToyScalar {
    pub fn new(v: u64) -> Self {
        Self((v % ORDER as u64) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl Zeroize for ToyScalar {
    fn zeroize(&mut self) {
        self.0.zeroize();
    }
}

impl ToyElement {
    /// Returns the element for residue `v`, if it lies in the subgroup.
    pub fn from_residue(v: u8) -> Option<Self> {
        let in_group = v != 0 && (v as u32) < MODULUS && pow_mod(v as u32, ORDER as u32) == 1;
        in_group.then_some(Self(v))
    }

    pub fn residue(self) -> u8 {
        self.0
    }
}

fn pow_mod(base: u32, mut exp: u32) -> u32 {
    let mut acc = 1u32;
    let mut b = base % MODULUS;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % MODULUS;
        }
        b = b * b % MODULUS;
        exp >>= 1;
    }
    acc
}

impl Group for ToyGroup {
    type Scalar = ToyScalar;
    type Element = ToyElement;

    const NAME: &'static str = "toy-z23-order11";
    const ELEMENT_LEN: usize = 1;
    const SCALAR_LEN: usize = 1;

    fn order() -> &'static [u8] {
        &[ORDER]
    }

    fn cofactor() -> u64 {
        1
    }

    fn generator() -> ToyElement {
        ToyElement(GENERATOR)
    }

    fn identity() -> ToyElement {
        ToyElement(1)
    }

    fn add(a: &ToyElement, b: &ToyElement) -> ToyElement {
        ToyElement((a.0 as u32 * b.0 as u32 % MODULUS) as u8)
    }

    fn neg(e: &ToyElement) -> ToyElement {
        // Fermat inverse in Z_23^*
        ToyElement(pow_mod(e.0 as u32, MODULUS - 2) as u8)
    }

    fn scalar_mul(k: &ToyScalar, e: &ToyElement) -> ToyElement {
        ToyElement(pow_mod(e.0 as u32, k.0 as u32) as u8)
    }

    fn scalar_from_u64(v: u64) -> ToyScalar {
        ToyScalar::new(v)
    }

    fn scalar_product(a: &ToyScalar, b: &ToyScalar) -> ToyScalar {
        ToyScalar::new(a.0 as u64 * b.0 as u64)
    }

    fn scalar_from_wide(bytes: &[u8; 64]) -> ToyScalar {
        let r = bytes
            .iter()
            .fold(0u32, |acc, &b| (acc * 256 + b as u32) % ORDER as u32);
        ToyScalar(r as u8)
    }

    fn hash_to_element(label: &[u8]) -> ToyElement {
        let digest = Sha512::digest(label);
        let v = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        // exponent in [1, 11) keeps the result off the identity
        let exp = 1 + (v % (ORDER as u64 - 1)) as u32;
        ToyElement(pow_mod(GENERATOR as u32, exp) as u8)
    }

    fn encode_element(e: &ToyElement) -> Vec<u8> {
        vec![e.0]
    }

    fn decode_element(bytes: &[u8]) -> Result<ToyElement, GroupError> {
        match bytes {
            [v] => ToyElement::from_residue(*v).ok_or(GroupError::InvalidElement),
            _ => Err(GroupError::InvalidElement),
        }
    }

    fn encode_scalar(k: &ToyScalar) -> Vec<u8> {
        vec![k.0]
    }

    fn decode_scalar(bytes: &[u8]) -> Result<ToyScalar, GroupError> {
        match bytes {
            [v] if *v < ORDER => Ok(ToyScalar(*v)),
            _ => Err(GroupError::InvalidScalar),
        }
    }
}
