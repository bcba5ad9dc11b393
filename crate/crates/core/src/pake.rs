//! Balanced password-authenticated key exchange with key confirmation.
//!
//! Each side derives `w` from the shared passphrase, masks an ephemeral
//! Diffie-Hellman share with `w`, and the two sides exchange shares:
//!
//! ```text
//! sender:   T = w*M + x*P        receiver: S = w*N + y*P
//! sender:   K = h*x*(S - w*N)    receiver: K = h*y*(T - w*M)
//! ```
//!
//! Both arrive at `K = h*x*y*P`. The session keys come from a hash of the
//! transcript, and each side proves possession of them with a MAC over
//! the transcript before any application data flows.

use core::fmt;

use argon2::{Algorithm, Argon2, Params, Version};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::group::{Group, GroupError, GroupParams};

type HmacSha256 = Hmac<Sha256>;

/// Length of a confirmation MAC.
pub const TAG_LEN: usize = 32;

/// Info prefix for the confirmation-key derivation.
pub const CONFIRMATION_INFO: &[u8] = b"ConfirmationKeys";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PakeError {
    #[error("passphrase must not be empty")]
    EmptyPassphrase,
    #[error("password hashing failed: {0}")]
    PasswordHash(String),
    #[error("peer share is the identity element")]
    IdentityShare,
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("confirmation tag has length {0}, expected {TAG_LEN}")]
    MalformedTag(usize),
    #[error("confirmation tag claims role {claimed:?}, expected {expected:?}")]
    UnexpectedRole { claimed: Role, expected: Role },
}

/// Which side of the exchange a party plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Party "A". Masks with `M`.
    Sender,
    /// Party "B". Masks with `N`.
    Receiver,
}

impl Role {
    pub fn peer(self) -> Role {
        match self {
            Role::Sender => Role::Receiver,
            Role::Receiver => Role::Sender,
        }
    }

    /// Fixed identity string used in the transcript.
    pub fn identity(self) -> &'static [u8] {
        match self {
            Role::Sender => b"sender",
            Role::Receiver => b"receiver",
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Role::Sender => 1,
            Role::Receiver => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Role> {
        match b {
            1 => Some(Role::Sender),
            2 => Some(Role::Receiver),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Sender => "sender",
            Role::Receiver => "receiver",
        })
    }
}

/// Cost parameters of the memory-hard password hash (Argon2id).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PasswordHashCost {
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

impl PasswordHashCost {
    /// Interactive-grade defaults: 8 MiB, two passes, one lane.
    pub const INTERACTIVE: PasswordHashCost = PasswordHashCost {
        memory_kib: 8 * 1024,
        iterations: 2,
        parallelism: 1,
    };
}

impl Default for PasswordHashCost {
    fn default() -> Self {
        Self::INTERACTIVE
    }
}

/// Stretches the passphrase with Argon2id and reduces the 64-byte output
/// modulo the group order.
pub fn hash_password<G: Group>(passphrase: &str, salt: &[u8]) -> Result<G::Scalar, PakeError> {
    hash_password_with_cost::<G>(passphrase, salt, PasswordHashCost::INTERACTIVE)
}

pub fn hash_password_with_cost<G: Group>(
    passphrase: &str,
    salt: &[u8],
    cost: PasswordHashCost,
) -> Result<G::Scalar, PakeError> {
    if passphrase.is_empty() {
        return Err(PakeError::EmptyPassphrase);
    }
    let params = Params::new(cost.memory_kib, cost.iterations, cost.parallelism, Some(64))
        .map_err(|e| PakeError::PasswordHash(e.to_string()))?;
    let argon = Argon2::new(Algorithm::Argon2id, Version::V0x13, params);
    let mut wide = [0u8; 64];
    argon
        .hash_password_into(passphrase.as_bytes(), salt, &mut wide)
        .map_err(|e| PakeError::PasswordHash(e.to_string()))?;
    let w = G::scalar_from_wide(&wide);
    wide.zeroize();
    Ok(w)
}

/// Appends `len(bytes) || bytes` with an 8-byte little-endian length.
fn push_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Encoded pieces of the transcript, in the order they are hashed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptParts<'a> {
    pub sender_id: &'a [u8],
    pub receiver_id: &'a [u8],
    /// Receiver's share `S`.
    pub s: &'a [u8],
    /// Sender's share `T`.
    pub t: &'a [u8],
    pub k: &'a [u8],
    pub w: &'a [u8],
}

impl TranscriptParts<'_> {
    /// `len(A)||A||len(B)||B||len(S)||S||len(T)||T||len(K)||K||len(w)||w`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tt = Vec::with_capacity(
            48 + self.sender_id.len()
                + self.receiver_id.len()
                + self.s.len()
                + self.t.len()
                + self.k.len()
                + self.w.len(),
        );
        for part in [self.sender_id, self.receiver_id, self.s, self.t, self.k, self.w] {
            push_prefixed(&mut tt, part);
        }
        tt
    }
}

/// Keys derived by a finished exchange.
///
/// Equality is constant-time over all key material.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct SessionKeys {
    ke: [u8; 32],
    ka: [u8; 32],
    kc_a: [u8; 16],
    kc_b: [u8; 16],
    transcript_hash: [u8; 64],
    transcript: Vec<u8>,
}

impl SessionKeys {
    /// Derives every key from the serialized transcript and the AAD.
    pub fn derive(transcript: Vec<u8>, aad: &[u8]) -> SessionKeys {
        let digest: [u8; 64] = Sha512::digest(&transcript).into();
        let mut ke = [0u8; 32];
        let mut ka = [0u8; 32];
        ke.copy_from_slice(&digest[..32]);
        ka.copy_from_slice(&digest[32..]);

        let mut info = Vec::with_capacity(CONFIRMATION_INFO.len() + aad.len());
        info.extend_from_slice(CONFIRMATION_INFO);
        info.extend_from_slice(aad);
        let mut okm = [0u8; 32];
        Hkdf::<Sha256>::new(None, &ka)
            .expand(&info, &mut okm)
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        let mut kc_a = [0u8; 16];
        let mut kc_b = [0u8; 16];
        kc_a.copy_from_slice(&okm[..16]);
        kc_b.copy_from_slice(&okm[16..]);
        okm.zeroize();

        SessionKeys {
            ke,
            ka,
            kc_a,
            kc_b,
            transcript_hash: digest,
            transcript,
        }
    }

    /// Chunk-encryption key.
    pub fn ke(&self) -> &[u8; 32] {
        &self.ke
    }

    pub fn ka(&self) -> &[u8; 32] {
        &self.ka
    }

    pub fn kc_a(&self) -> &[u8; 16] {
        &self.kc_a
    }

    pub fn kc_b(&self) -> &[u8; 16] {
        &self.kc_b
    }

    pub fn transcript_hash(&self) -> &[u8; 64] {
        &self.transcript_hash
    }

    pub fn transcript(&self) -> &[u8] {
        &self.transcript
    }

    fn confirmation_key(&self, role: Role) -> &[u8; 16] {
        match role {
            Role::Sender => &self.kc_a,
            Role::Receiver => &self.kc_b,
        }
    }
}

impl PartialEq for SessionKeys {
    fn eq(&self, other: &Self) -> bool {
        let same = self.ke.ct_eq(&other.ke)
            & self.ka.ct_eq(&other.ka)
            & self.kc_a.ct_eq(&other.kc_a)
            & self.kc_b.ct_eq(&other.kc_b)
            & self.transcript_hash.ct_eq(&other.transcript_hash);
        same.into()
    }
}

impl Eq for SessionKeys {}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKeys").finish_non_exhaustive()
    }
}

/// In-flight exchange, consumed by [`PakeState::finish`].
pub struct PakeState<G: Group> {
    params: GroupParams<G>,
    role: Role,
    identity_self: Vec<u8>,
    identity_peer: Vec<u8>,
    w: G::Scalar,
    ephemeral_secret: G::Scalar,
    own_share: G::Element,
    aad: Vec<u8>,
}

impl<G: Group> Drop for PakeState<G> {
    fn drop(&mut self) {
        self.ephemeral_secret.zeroize();
        self.w.zeroize();
    }
}

impl<G: Group> fmt::Debug for PakeState<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PakeState")
            .field("group", &G::NAME)
            .field("role", &self.role)
            .field("own_share", &self.own_share)
            .finish_non_exhaustive()
    }
}

impl<G: Group> PakeState<G> {
    /// Starts an exchange with a fresh ephemeral secret.
    pub fn start<R: RngCore + CryptoRng + ?Sized>(
        role: Role,
        w: G::Scalar,
        identity_self: &[u8],
        identity_peer: &[u8],
        aad: &[u8],
        params: &GroupParams<G>,
        rng: &mut R,
    ) -> Result<(Self, G::Element), PakeError> {
        let secret = G::random_scalar(rng)?;
        Ok(Self::start_with_ephemeral(
            role,
            w,
            secret,
            identity_self,
            identity_peer,
            aad,
            params,
        ))
    }

    /// Starts an exchange with a caller-chosen ephemeral secret.
    ///
    /// Reusing an ephemeral secret across sessions breaks the protocol;
    /// this exists for known-answer tests.
    pub fn start_with_ephemeral(
        role: Role,
        w: G::Scalar,
        ephemeral_secret: G::Scalar,
        identity_self: &[u8],
        identity_peer: &[u8],
        aad: &[u8],
        params: &GroupParams<G>,
    ) -> (Self, G::Element) {
        let mask = match role {
            Role::Sender => &params.m,
            Role::Receiver => &params.n,
        };
        let own_share = G::add(
            &G::scalar_mul(&w, mask),
            &G::scalar_mul(&ephemeral_secret, &params.generator),
        );
        let state = PakeState {
            params: *params,
            role,
            identity_self: identity_self.to_vec(),
            identity_peer: identity_peer.to_vec(),
            w,
            ephemeral_secret,
            own_share,
            aad: aad.to_vec(),
        };
        (state, own_share)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn own_share(&self) -> &G::Element {
        &self.own_share
    }

    /// Decodes the peer's share and finishes the exchange.
    pub fn finish_encoded(self, peer_share: &[u8]) -> Result<SessionKeys, PakeError> {
        let peer = G::decode_element(peer_share)?;
        self.finish(&peer)
    }

    /// Computes `K`, the transcript and the session keys.
    pub fn finish(self, peer_share: &G::Element) -> Result<SessionKeys, PakeError> {
        if *peer_share == G::identity() {
            return Err(PakeError::IdentityShare);
        }
        let peer_mask = match self.role {
            Role::Sender => &self.params.n,
            Role::Receiver => &self.params.m,
        };
        let unmasked = G::sub(peer_share, &G::scalar_mul(&self.w, peer_mask));
        let k = G::scalar_mul(
            &self.params.cofactor_scalar(),
            &G::scalar_mul(&self.ephemeral_secret, &unmasked),
        );

        let own = G::encode_element(&self.own_share);
        let peer = G::encode_element(peer_share);
        let k_enc = G::encode_element(&k);
        let w_enc = G::encode_scalar(&self.w);
        let parts = match self.role {
            Role::Sender => TranscriptParts {
                sender_id: &self.identity_self,
                receiver_id: &self.identity_peer,
                s: &peer,
                t: &own,
                k: &k_enc,
                w: &w_enc,
            },
            Role::Receiver => TranscriptParts {
                sender_id: &self.identity_peer,
                receiver_id: &self.identity_self,
                s: &own,
                t: &peer,
                k: &k_enc,
                w: &w_enc,
            },
        };
        Ok(SessionKeys::derive(parts.to_bytes(), &self.aad))
    }
}

/// Key-confirmation MAC sent by one side.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ConfirmationTag {
    pub mac: [u8; TAG_LEN],
    pub from_role: Role,
}

impl fmt::Debug for ConfirmationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConfirmationTag")
            .field("from_role", &self.from_role)
            .finish_non_exhaustive()
    }
}

impl ConfirmationTag {
    pub fn from_bytes(from_role: Role, bytes: &[u8]) -> Result<Self, PakeError> {
        let mac = bytes
            .try_into()
            .map_err(|_| PakeError::MalformedTag(bytes.len()))?;
        Ok(Self { mac, from_role })
    }
}

/// Outcome of checking the peer's confirmation tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

fn transcript_mac(key: &[u8], transcript: &[u8]) -> [u8; TAG_LEN] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(transcript);
    mac.finalize().into_bytes().into()
}

/// `MAC(KcA, TT)` for the sender, `MAC(KcB, TT)` for the receiver.
pub fn confirm_tag(keys: &SessionKeys, role: Role) -> ConfirmationTag {
    ConfirmationTag {
        mac: transcript_mac(keys.confirmation_key(role), &keys.transcript),
        from_role: role,
    }
}

/// Recomputes the peer's tag and compares in constant time.
pub fn verify_peer_tag(
    keys: &SessionKeys,
    own_role: Role,
    tag: &ConfirmationTag,
) -> Result<Verdict, PakeError> {
    let expected_role = own_role.peer();
    if tag.from_role != expected_role {
        return Err(PakeError::UnexpectedRole {
            claimed: tag.from_role,
            expected: expected_role,
        });
    }
    let expected = confirm_tag(keys, expected_role);
    if bool::from(expected.mac.ct_eq(&tag.mac)) {
        Ok(Verdict::Accept)
    } else {
        Ok(Verdict::Reject)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{Ristretto255, ToyGroup, ToyScalar};
    use rand::rngs::{OsRng, StdRng};
    use rand::SeedableRng;

    const SALT0: &[u8] = b"relaywire-test-salt-0";
    const CHEAP: PasswordHashCost = PasswordHashCost {
        memory_kib: 64,
        iterations: 1,
        parallelism: 1,
    };

    fn run<G: Group>(w_a: G::Scalar, w_b: G::Scalar, aad: &[u8]) -> (SessionKeys, SessionKeys) {
        let params = GroupParams::<G>::standard();
        let mut rng = OsRng;
        let (a, t) = PakeState::start(Role::Sender, w_a, b"sender", b"receiver", aad, &params, &mut rng).unwrap();
        let (b, s) = PakeState::start(Role::Receiver, w_b, b"receiver", b"sender", aad, &params, &mut rng).unwrap();
        (a.finish(&s).unwrap(), b.finish(&t).unwrap())
    }

    #[test]
    fn hash_password_is_deterministic_and_sensitive() {
        let a = hash_password::<Ristretto255>("correct horse", SALT0).unwrap();
        let b = hash_password::<Ristretto255>("correct horse", SALT0).unwrap();
        let c = hash_password::<Ristretto255>("correct horsf", SALT0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn hash_password_rejects_empty() {
        assert_eq!(
            hash_password::<ToyGroup>("", SALT0),
            Err(PakeError::EmptyPassphrase)
        );
    }

    #[test]
    fn hash_password_toy_range() {
        for i in 0..20 {
            let w = hash_password_with_cost::<ToyGroup>(&format!("pw{i}"), SALT0, CHEAP).unwrap();
            assert!(w.value() < 11);
        }
    }

    #[test]
    fn honest_run_agrees() {
        let w = hash_password::<Ristretto255>("correct horse", SALT0).unwrap();
        let (ka, kb) = run::<Ristretto255>(w, w, b"v1");
        assert_eq!(ka, kb);
        assert_eq!(
            verify_peer_tag(&ka, Role::Sender, &confirm_tag(&kb, Role::Receiver)),
            Ok(Verdict::Accept)
        );
        assert_eq!(
            verify_peer_tag(&kb, Role::Receiver, &confirm_tag(&ka, Role::Sender)),
            Ok(Verdict::Accept)
        );
    }

    #[test]
    fn mismatched_password_rejects() {
        let w = <Ristretto255 as Group>::scalar_from_u64(41);
        let w2 = <Ristretto255 as Group>::scalar_from_u64(42);
        let (ka, kb) = run::<Ristretto255>(w, w2, b"");
        assert_ne!(ka.ke(), kb.ke());
        assert_eq!(
            verify_peer_tag(&ka, Role::Sender, &confirm_tag(&kb, Role::Receiver)),
            Ok(Verdict::Reject)
        );
        assert_eq!(
            verify_peer_tag(&kb, Role::Receiver, &confirm_tag(&ka, Role::Sender)),
            Ok(Verdict::Reject)
        );
    }

    #[test]
    fn fresh_ephemeral_per_start() {
        let params = GroupParams::<Ristretto255>::standard();
        let w = <Ristretto255 as Group>::scalar_from_u64(7);
        let (_, s1) = PakeState::start(Role::Sender, w, b"a", b"b", b"", &params, &mut OsRng).unwrap();
        let (_, s2) = PakeState::start(Role::Sender, w, b"a", b"b", b"", &params, &mut OsRng).unwrap();
        assert_ne!(s1, s2);
    }

    #[test]
    fn forced_toy_share() {
        let params = GroupParams::<ToyGroup>::standard();
        let w = ToyScalar::new(5);
        let x = ToyScalar::new(3);
        let (_, t) = PakeState::start_with_ephemeral(Role::Sender, w, x, b"sender", b"receiver", b"", &params);
        let expected = ToyGroup::add(
            &ToyGroup::scalar_mul(&w, &params.m),
            &ToyGroup::scalar_mul(&x, &params.generator),
        );
        assert_eq!(t, expected);
        let (_, s) = PakeState::start_with_ephemeral(Role::Receiver, w, x, b"receiver", b"sender", b"", &params);
        assert_ne!(params.m, params.n);
        assert_ne!(s, t);
    }

    #[test]
    fn identity_share_rejected() {
        let params = GroupParams::<ToyGroup>::standard();
        let mut rng = StdRng::seed_from_u64(9);
        let (a, _) = PakeState::start(Role::Sender, ToyScalar::new(5), b"s", b"r", b"", &params, &mut rng).unwrap();
        assert_eq!(a.finish(&ToyGroup::identity()), Err(PakeError::IdentityShare));
    }

    #[test]
    fn bad_encoding_rejected() {
        let params = GroupParams::<Ristretto255>::standard();
        let (a, _) = PakeState::start(
            Role::Sender,
            <Ristretto255 as Group>::scalar_from_u64(1),
            b"s",
            b"r",
            b"",
            &params,
            &mut OsRng,
        )
        .unwrap();
        assert!(matches!(
            a.finish_encoded(&[0xff; 32]),
            Err(PakeError::Group(GroupError::InvalidElement))
        ));
    }

    #[test]
    fn tags_are_deterministic_and_role_bound() {
        let w = hash_password::<Ristretto255>("pw", SALT0).unwrap();
        let (ka, _) = run::<Ristretto255>(w, w, b"");
        assert_eq!(confirm_tag(&ka, Role::Sender), confirm_tag(&ka, Role::Sender));
        assert_ne!(
            confirm_tag(&ka, Role::Sender).mac,
            confirm_tag(&ka, Role::Receiver).mac
        );
        let mut flipped = ka.transcript().to_vec();
        flipped[3] ^= 0x01;
        assert_ne!(
            transcript_mac(ka.kc_a(), &flipped),
            confirm_tag(&ka, Role::Sender).mac
        );
    }

    #[test]
    fn truncated_tag_is_protocol_error() {
        assert_eq!(
            ConfirmationTag::from_bytes(Role::Receiver, &[0u8; 31]),
            Err(PakeError::MalformedTag(31))
        );
    }

    #[test]
    fn wrong_claimed_role_is_protocol_error() {
        let w = <Ristretto255 as Group>::scalar_from_u64(3);
        let (ka, _) = run::<Ristretto255>(w, w, b"");
        let own = confirm_tag(&ka, Role::Sender);
        assert!(matches!(
            verify_peer_tag(&ka, Role::Sender, &own),
            Err(PakeError::UnexpectedRole { .. })
        ));
    }

    #[test]
    fn key_lengths() {
        let w = <Ristretto255 as Group>::scalar_from_u64(3);
        let (ka, _) = run::<Ristretto255>(w, w, b"");
        assert_eq!(ka.ke().len(), ka.ka().len());
        assert_eq!(ka.kc_a().len(), ka.kc_b().len());
        assert_eq!(&ka.transcript_hash()[..32], ka.ke());
    }

    #[test]
    fn aad_changes_confirmation_keys_only() {
        let params = GroupParams::<ToyGroup>::standard();
        let w = ToyScalar::new(4);
        let mk = |aad: &[u8]| {
            let (a, _) = PakeState::start_with_ephemeral(Role::Sender, w, ToyScalar::new(2), b"sender", b"receiver", aad, &params);
            let (_, s) = PakeState::start_with_ephemeral(Role::Receiver, w, ToyScalar::new(6), b"receiver", b"sender", aad, &params);
            a.finish(&s).unwrap()
        };
        let k1 = mk(b"");
        let k2 = mk(b"v2");
        assert_eq!(k1.ke(), k2.ke());
        assert_ne!(k1.kc_a(), k2.kc_a());
    }

    #[test]
    fn transcript_layout() {
        let parts = TranscriptParts {
            sender_id: b"A",
            receiver_id: b"BB",
            s: &[1],
            t: &[2],
            k: &[3],
            w: &[4],
        };
        let tt = parts.to_bytes();
        assert_eq!(&tt[..9], &[1, 0, 0, 0, 0, 0, 0, 0, b'A']);
        assert_eq!(&tt[9..19], &[2, 0, 0, 0, 0, 0, 0, 0, b'B', b'B']);
        assert_eq!(tt.len(), 6 * 8 + 1 + 2 + 4);
        assert_eq!(tt[19 + 8], 1, "S precedes T");
        assert_eq!(tt[19 + 9 + 8], 2);
    }
}
