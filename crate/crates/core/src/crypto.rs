//! Deterministic Ed25519 signing and SHA-256 hashing.

use std::fmt;

use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Decode, Encode, Reader, Writer};
use crate::{canonical_struct, canonical_tag_enum};

pub const PUBLIC_KEY_LEN: usize = 32;
pub const PRIVATE_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("private key must be {PRIVATE_KEY_LEN} bytes, got {0}")]
    MalformedPrivateKey(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignatureScheme {
    Ed25519,
}

canonical_tag_enum!(SignatureScheme { Ed25519 = 1 });

/// 256-bit hash output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; PUBLIC_KEY_LEN];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(PublicKey(out))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Secret half of a key pair. `Debug` never prints the bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey([u8; PRIVATE_KEY_LEN]);

impl PrivateKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        let arr: [u8; PRIVATE_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| KeyError::MalformedPrivateKey(bytes.len()))?;
        Ok(PrivateKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; PRIVATE_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(<redacted>)")
    }
}

impl Encode for PublicKey {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(&self.0);
    }
}

impl Decode for PublicKey {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(PublicKey(r.fixed()?))
    }
}

impl Encode for PrivateKey {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(&self.0);
    }
}

impl Decode for PrivateKey {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(PrivateKey(r.fixed()?))
    }
}

impl Encode for Digest {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(&self.0);
    }
}

impl Decode for Digest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Digest(r.fixed()?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

impl Encode for Signature {
    fn encode_to(&self, w: &mut Writer) {
        w.put_field(&self.0);
    }
}

impl Decode for Signature {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Signature(r.fixed()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub scheme: SignatureScheme,
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
}

canonical_struct!(KeyPair { scheme, public_key, private_key });

impl KeyPair {
    /// Deterministic key generation: the seed is the Ed25519 secret.
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        let sk = SigningKey::from_bytes(seed);
        KeyPair {
            scheme: SignatureScheme::Ed25519,
            public_key: PublicKey(sk.verifying_key().to_bytes()),
            private_key: PrivateKey(*seed),
        }
    }

    /// Key generation from system entropy (live mode).
    pub fn generate_live() -> Self {
        let seed: [u8; 32] = rand::random();
        Self::from_seed(&seed)
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign_with(&self.private_key, message)
    }
}

pub fn generate_keypair(seed: &[u8; 32]) -> KeyPair {
    KeyPair::from_seed(seed)
}

/// Signs `message` with raw private key bytes.
pub fn sign(private_key: &[u8], message: &[u8]) -> Result<Signature, KeyError> {
    Ok(sign_with(&PrivateKey::from_bytes(private_key)?, message))
}

fn sign_with(private_key: &PrivateKey, message: &[u8]) -> Signature {
    let sk = SigningKey::from_bytes(&private_key.0);
    Signature(sk.sign(message).to_bytes())
}

/// Strict verification: rejects malformed keys, non-canonical `S` and
/// small-order components.
pub fn verify(public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    vk.verify_strict(message, &sig).is_ok()
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Hashes the canonical encoding of a value.
pub fn hash_value<T: Encode + ?Sized>(value: &T) -> Digest {
    hash(&value.canonical_encode())
}

/// Derives a 32-byte seed from a master seed and a purpose label.
pub fn derive_seed(master: &[u8; 32], label: &str) -> [u8; 32] {
    let mut w = Writer::new();
    w.put_field(b"vtn/seed-derivation/v1");
    w.put_field(master);
    w.put_field(label.as_bytes());
    hash(&w.into_bytes()).0
}

/// Expands a numeric scenario seed into key material entropy.
pub fn seed_from_u64(seed: u64) -> [u8; 32] {
    let mut w = Writer::new();
    w.put_field(b"vtn/root-seed/v1");
    w.put_u64(seed);
    hash(&w.into_bytes()).0
}
