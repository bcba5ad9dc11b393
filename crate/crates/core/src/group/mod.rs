//! Prime-order group abstraction the key exchange runs over.
//!
//! Two realizations ship with the crate:
//!
//! * [`Ristretto255`], the production group (cofactor 1, 32-byte canonical
//!   encodings).
//! * [`ToyGroup`], the order-11 subgroup of the integers mod 23. It is small
//!   enough to brute-force discrete logarithms, which makes it useful as an
//!   oracle in tests.
//!
//! The protocol code is generic over [`Group`], so both realizations satisfy
//! the same contract and share every protocol-level test.

mod ristretto;
mod toy;

use core::fmt::Debug;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;
use zeroize::Zeroize;

pub use ristretto::Ristretto255;
pub use toy::{ToyElement, ToyGroup, ToyScalar};

/// Domain-separation label for the mask point used by the sender.
pub const M_LABEL: &[u8] = b"relaywire M";
/// Domain-separation label for the mask point used by the receiver.
pub const N_LABEL: &[u8] = b"relaywire N";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("invalid element encoding")]
    InvalidElement,
    #[error("invalid scalar encoding")]
    InvalidScalar,
    #[error("entropy source failure: {0}")]
    Entropy(String),
    #[error("invalid group parameters: {0}")]
    InvalidParams(&'static str),
}

/// A cyclic group of prime order `p`, possibly embedded in a larger group of
/// order `p * h`.
///
/// Implementors are zero-sized markers; all operations are associated
/// functions over the `Scalar` and `Element` value types.
pub trait Group: Copy + Clone + Debug + PartialEq + Eq + Send + Sync + 'static {
    type Scalar: Copy + Eq + Debug + Send + Sync + Zeroize;
    type Element: Copy + Eq + Debug + Send + Sync;

    /// Human-readable group name.
    const NAME: &'static str;
    /// Length of a canonical element encoding in bytes.
    const ELEMENT_LEN: usize;
    /// Length of a canonical scalar encoding in bytes.
    const SCALAR_LEN: usize;

    /// Subgroup order `p`, big-endian.
    fn order() -> &'static [u8];
    /// Cofactor `h`.
    fn cofactor() -> u64;
    fn generator() -> Self::Element;
    fn identity() -> Self::Element;

    fn add(a: &Self::Element, b: &Self::Element) -> Self::Element;
    fn neg(e: &Self::Element) -> Self::Element;
    fn scalar_mul(k: &Self::Scalar, e: &Self::Element) -> Self::Element;

    fn scalar_from_u64(v: u64) -> Self::Scalar;
    /// `a * b mod p`.
    fn scalar_product(a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar;
    /// Reduces 64 uniformly distributed bytes modulo `p`.
    fn scalar_from_wide(bytes: &[u8; 64]) -> Self::Scalar;

    /// Deterministically maps a label to a non-identity subgroup element
    /// whose discrete logarithm is unknown.
    fn hash_to_element(label: &[u8]) -> Self::Element;

    fn encode_element(e: &Self::Element) -> Vec<u8>;
    fn decode_element(bytes: &[u8]) -> Result<Self::Element, GroupError>;
    /// Fixed-length big-endian scalar encoding.
    fn encode_scalar(k: &Self::Scalar) -> Vec<u8>;
    fn decode_scalar(bytes: &[u8]) -> Result<Self::Scalar, GroupError>;

    fn sub(a: &Self::Element, b: &Self::Element) -> Self::Element {
        Self::add(a, &Self::neg(b))
    }

    fn is_zero_scalar(k: &Self::Scalar) -> bool {
        *k == Self::scalar_from_u64(0)
    }

    /// Draws a uniform nonzero scalar, resampling on zero.
    fn random_scalar<R: RngCore + CryptoRng + ?Sized>(
        rng: &mut R,
    ) -> Result<Self::Scalar, GroupError> {
        let mut wide = [0u8; 64];
        loop {
            rng.try_fill_bytes(&mut wide)
                .map_err(|e| GroupError::Entropy(e.to_string()))?;
            let k = Self::scalar_from_wide(&wide);
            if !Self::is_zero_scalar(&k) {
                wide.zeroize();
                return Ok(k);
            }
        }
    }
}

/// Public parameters both parties agree on: `p`, `h`, `P`, `M` and `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupParams<G: Group> {
    pub order_p: &'static [u8],
    pub cofactor_h: u64,
    pub generator: G::Element,
    pub m: G::Element,
    pub n: G::Element,
}

impl<G: Group> GroupParams<G> {
    /// Standard parameters with `M` and `N` hashed from fixed labels.
    pub fn standard() -> Self {
        Self::with_masks(G::hash_to_element(M_LABEL), G::hash_to_element(N_LABEL))
            .expect("hash-derived mask points are valid")
    }

    /// Parameters with explicit mask points; used by tests that need
    /// specific values.
    pub fn with_masks(m: G::Element, n: G::Element) -> Result<Self, GroupError> {
        let identity = G::identity();
        if m == identity || n == identity {
            return Err(GroupError::InvalidParams("mask point is the identity"));
        }
        if m == n {
            return Err(GroupError::InvalidParams("mask points coincide"));
        }
        Ok(Self {
            order_p: G::order(),
            cofactor_h: G::cofactor(),
            generator: G::generator(),
            m,
            n,
        })
    }

    pub fn cofactor_scalar(&self) -> G::Scalar {
        G::scalar_from_u64(self.cofactor_h)
    }
}

impl<G: Group> Default for GroupParams<G> {
    fn default() -> Self {
        Self::standard()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn group_laws<G: Group>(seed: u64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = G::generator();
        let id = G::identity();
        for _ in 0..50 {
            let a = G::scalar_mul(&G::random_scalar(&mut rng).unwrap(), &p);
            let b = G::scalar_mul(&G::random_scalar(&mut rng).unwrap(), &p);
            let c = G::scalar_mul(&G::random_scalar(&mut rng).unwrap(), &p);
            assert_eq!(G::add(&G::add(&a, &b), &c), G::add(&a, &G::add(&b, &c)));
            assert_eq!(G::add(&a, &b), G::add(&b, &a));
            assert_eq!(G::add(&a, &id), a);
            assert_eq!(G::add(&a, &G::neg(&a)), id);
            assert_eq!(G::neg(&G::neg(&a)), a);
        }
    }

    fn scalar_laws<G: Group>(seed: u64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = G::generator();
        assert_eq!(G::scalar_mul(&G::scalar_from_u64(0), &p), G::identity());
        assert_eq!(G::scalar_mul(&G::scalar_from_u64(1), &p), p);
        for _ in 0..50 {
            let a = G::random_scalar(&mut rng).unwrap();
            let b = G::random_scalar(&mut rng).unwrap();
            assert_eq!(
                G::scalar_mul(&a, &G::scalar_mul(&b, &p)),
                G::scalar_mul(&G::scalar_product(&a, &b), &p)
            );
        }
    }

    fn encoding_round_trip<G: Group>(seed: u64) {
        let mut rng = StdRng::seed_from_u64(seed);
        for _ in 0..50 {
            let k = G::random_scalar(&mut rng).unwrap();
            let e = G::scalar_mul(&k, &G::generator());
            let enc = G::encode_element(&e);
            assert_eq!(enc.len(), G::ELEMENT_LEN);
            assert_eq!(G::decode_element(&enc).unwrap(), e);
            let ks = G::encode_scalar(&k);
            assert_eq!(ks.len(), G::SCALAR_LEN);
            assert_eq!(G::decode_scalar(&ks).unwrap(), k);
        }
        assert!(G::decode_element(&vec![0u8; G::ELEMENT_LEN + 1]).is_err());
        assert!(G::decode_element(&[]).is_err());
        assert!(G::decode_scalar(&vec![0xff; G::SCALAR_LEN]).is_err());
    }

    fn standard_params<G: Group>() {
        let params = GroupParams::<G>::standard();
        assert_ne!(params.m, G::identity());
        assert_ne!(params.n, G::identity());
        assert_ne!(params.m, params.n);
        assert_eq!(params, GroupParams::<G>::standard());
        assert_eq!(params.generator, G::generator());
    }

    #[test]
    fn ristretto_group_laws() {
        group_laws::<Ristretto255>(1);
        scalar_laws::<Ristretto255>(2);
        encoding_round_trip::<Ristretto255>(3);
        standard_params::<Ristretto255>();
    }

    #[test]
    fn toy_group_laws() {
        group_laws::<ToyGroup>(1);
        scalar_laws::<ToyGroup>(2);
        encoding_round_trip::<ToyGroup>(3);
        standard_params::<ToyGroup>();
    }

    #[test]
    fn with_masks_rejects_degenerate_points() {
        let p = ToyGroup::generator();
        assert!(GroupParams::<ToyGroup>::with_masks(p, p).is_err());
        assert!(GroupParams::<ToyGroup>::with_masks(ToyGroup::identity(), p).is_err());
    }

    #[test]
    fn random_scalar_range_production() {
        let mut rng = rand::rngs::OsRng;
        for _ in 0..10_000 {
            let k = Ristretto255::random_scalar(&mut rng).unwrap();
            assert!(!Ristretto255::is_zero_scalar(&k));
            // canonical decoding enforces k < p
            let enc = Ristretto255::encode_scalar(&k);
            assert_eq!(Ristretto255::decode_scalar(&enc).unwrap(), k);
        }
    }

    struct FailingRng;
    impl RngCore for FailingRng {
        fn next_u32(&mut self) -> u32 {
            unreachable!()
        }
        fn next_u64(&mut self) -> u64 {
            unreachable!()
        }
        fn fill_bytes(&mut self, _: &mut [u8]) {
            unreachable!()
        }
        fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), rand_core::Error> {
            Err(rand_core::Error::new("no entropy"))
        }
    }
    impl CryptoRng for FailingRng {}

    #[test]
    fn entropy_failure_is_reported() {
        assert!(matches!(
            ToyGroup::random_scalar(&mut FailingRng),
            Err(GroupError::Entropy(_))
        ));
    }
}
