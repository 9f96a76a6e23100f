//! Paillier cryptosystem (`g = n + 1`) with a two-band signed fixed-point
//! encoding of reals.
//!
//! Only one multiplicative depth is supported: ciphertext times plaintext.

mod encoding;
mod paillier;
mod prime;

pub use encoding::{FixedPoint, DEFAULT_SCALE_BITS};
pub use paillier::{add_cipher, keygen, mul_plain, CipherVector, Ciphertext, KeyId, KeyPair, PublicKey};
pub use prime::{is_probable_prime, random_below, random_prime, MILLER_RABIN_ROUNDS};

/// Default modulus size for experiments.
pub const DEFAULT_KEY_BITS: u64 = 1024;
/// Modulus size for unit tests and desk-scale acceptance runs.
pub const TEST_KEY_BITS: u64 = 512;
