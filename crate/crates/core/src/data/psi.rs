//! Entity alignment by RSA blind signatures.
//!
//! B holds an RSA key. A blinds the hashes of its ids, B signs them without
//! seeing them, and A unblinds. Both sides turn signatures into salted
//! tokens, so A can intersect its tokens with B's token set; A then returns
//! the common tokens so B learns the intersection too. A cannot compute a
//! token without B's signature, and B only ever sees blinded values and the
//! common tokens.

use std::collections::{HashMap, HashSet};

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::he::random_prime;
use crate::rng::{self, streams};
use crate::transport::{self, Actor, Endpoint, MessageKind, Payload, Transcript};

const PUBLIC_EXPONENT: u32 = 65_537;
const SALT_BYTES: usize = 16;

/// B's signing key. Kept in the outcome so test harnesses can build
/// inverse tables; the protocol itself never moves `d` off B.
#[derive(Clone, Debug)]
pub struct RsaBlindKey {
    pub n: BigUint,
    pub e: BigUint,
    pub d: BigUint,
    p: BigUint,
    q: BigUint,
    dp: BigUint,
    dq: BigUint,
    q_inv: BigUint,
}

impl RsaBlindKey {
    pub fn generate<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<Self> {
        let e = BigUint::from(PUBLIC_EXPONENT);
        loop {
            let p = random_prime(bits / 2, rng)?;
            let q = random_prime(bits / 2, rng)?;
            if p == q {
                continue;
            }
            let phi = (&p - 1u32) * (&q - 1u32);
            if !phi.gcd(&e).is_one() {
                continue;
            }
            let d = e.modinv(&phi).expect("e coprime to φ");
            let q_inv = q.modinv(&p).expect("distinct primes");
            return Ok(Self {
                n: &p * &q,
                dp: &d % (&p - 1u32),
                dq: &d % (&q - 1u32),
                e,
                d,
                p,
                q,
                q_inv,
            });
        }
    }

    /// `x^d mod n` by CRT.
    pub fn sign(&self, x: &BigUint) -> BigUint {
        let sp = x.modpow(&self.dp, &self.p);
        let sq = x.modpow(&self.dq, &self.q);
        let diff = (&sp + &self.p - (&sq % &self.p)) % &self.p;
        &sq + &self.q * (diff * &self.q_inv % &self.p)
    }
}

/// Full-domain hash of an id into `Z_n`.
pub(crate) fn hash_to_group(id: u64, n: &BigUint) -> BigUint {
    let want = (n.bits() as usize + 128).div_ceil(8);
    let mut bytes = Vec::with_capacity(want + 32);
    let mut counter = 0u32;
    while bytes.len() < want {
        let mut h = Sha256::new();
        h.update(b"entity-id");
        h.update(id.to_le_bytes());
        h.update(counter.to_le_bytes());
        bytes.extend(h.finalize());
        counter += 1;
    }
    BigUint::from_bytes_be(&bytes[..want]) % n
}

pub(crate) fn token(salt: &[u8; SALT_BYTES], signature: &BigUint, n: &BigUint) -> [u8; 32] {
    let width = n.bits().div_ceil(8) as usize;
    let sig = signature.to_bytes_be();
    let mut h = Sha256::new();
    h.update(salt);
    h.update(vec![0u8; width.saturating_sub(sig.len())]);
    h.update(sig);
    h.finalize().into()
}

#[derive(Clone, Debug)]
pub struct AlignmentOutcome {
    /// Intersection as learned by A, sorted.
    pub common_at_a: Vec<u64>,
    /// Intersection as learned by B, sorted.
    pub common_at_b: Vec<u64>,
    pub salt: [u8; SALT_BYTES],
    pub key: RsaBlindKey,
}

impl AlignmentOutcome {
    /// Values A can map back to raw ids on its own: hashes of any id in
    /// `universe` and the tokens of its own ids.
    pub fn inverse_table_a(&self, universe: &[u64], ids_a: &[u64]) -> HashMap<Vec<u8>, u64> {
        let mut t: HashMap<Vec<u8>, u64> = universe
            .iter()
            .map(|&x| (hash_to_group(x, &self.key.n).to_bytes_be(), x))
            .collect();
        for &a in ids_a {
            let h = hash_to_group(a, &self.key.n);
            t.insert(token(&self.salt, &self.key.sign(&h), &self.key.n).to_vec(), a);
        }
        t
    }

    /// Values B can map back on its own: hashes, signatures and tokens of
    /// any id in `universe`.
    pub fn inverse_table_b(&self, universe: &[u64]) -> HashMap<Vec<u8>, u64> {
        let mut t = HashMap::new();
        for &x in universe {
            let h = hash_to_group(x, &self.key.n);
            let s = self.key.sign(&h);
            t.insert(token(&self.salt, &s, &self.key.n).to_vec(), x);
            t.insert(s.to_bytes_be(), x);
            t.insert(h.to_bytes_be(), x);
        }
        t
    }
}

fn bytes_to_salt(x: &BigUint) -> Result<[u8; SALT_BYTES]> {
    let b = x.to_bytes_be();
    if b.len() > SALT_BYTES {
        return Err(Error::Protocol("salt too long".into()));
    }
    let mut salt = [0u8; SALT_BYTES];
    salt[SALT_BYTES - b.len()..].copy_from_slice(&b);
    Ok(salt)
}

/// Runs the alignment between endpoints `a` and `b`, driving both sides in
/// protocol order. Five messages: key and salt (B→A), blinded hashes (A→B),
/// blind signatures and B's token set (B→A), common tokens (A→B).
pub fn blinded_intersection(
    ids_a: &[u64],
    ids_b: &[u64],
    a: &mut Endpoint,
    b: &mut Endpoint,
    rsa_bits: u64,
    seed: u64,
) -> Result<AlignmentOutcome> {
    let mut rng_b = rng::stream(seed, streams::PSI);
    let mut rng_a = rng::indexed_stream(seed, streams::PSI, 1);

    // B: key, salt and its own token table, reseeding the salt on collision.
    let key = RsaBlindKey::generate(rsa_bits, &mut rng_b)?;
    let signed_b: Vec<BigUint> = ids_b
        .iter()
        .map(|&x| key.sign(&hash_to_group(x, &key.n)))
        .collect();
    let (salt, table_b) = loop {
        let mut salt = [0u8; SALT_BYTES];
        rng_b
            .try_fill_bytes(&mut salt)
            .map_err(|e| Error::Rng(e.to_string()))?;
        let table: HashMap<[u8; 32], u64> = ids_b
            .iter()
            .zip(&signed_b)
            .map(|(&x, s)| (token(&salt, s, &key.n), x))
            .collect();
        if table.len() == ids_b.len() {
            break (salt, table);
        }
        log::warn!("token collision in alignment; reseeding salt");
    };
    b.send(
        Actor::A,
        MessageKind::Control,
        None,
        Payload::BigInts(vec![key.n.clone(), key.e.clone(), BigUint::from_bytes_be(&salt)]),
    )?;

    // A: blind.
    let params = a.expect(Actor::B, MessageKind::Control)?.into_bigints()?;
    let [n, e, salt_int]: [BigUint; 3] = params
        .try_into()
        .map_err(|_| Error::Protocol("alignment key message needs n, e, salt".into()))?;
    let salt_at_a = bytes_to_salt(&salt_int)?;
    let mut blinding = Vec::with_capacity(ids_a.len());
    let mut blinded = Vec::with_capacity(ids_a.len());
    for &x in ids_a {
        let r = loop {
            let r = crate::he::random_below(&n, &mut rng_a)?;
            if r.gcd(&n).is_one() {
                break r;
            }
        };
        blinded.push(hash_to_group(x, &n) * r.modpow(&e, &n) % &n);
        blinding.push(r);
    }
    a.send(Actor::B, MessageKind::BlindedIds, None, Payload::BigInts(blinded))?;

    // B: sign blindly, publish its tokens in sorted order.
    let incoming = b.expect(Actor::A, MessageKind::BlindedIds)?.into_bigints()?;
    if incoming.iter().any(|x| x >= &key.n) {
        return Err(Error::Protocol("blinded value outside Z_n".into()));
    }
    let signatures: Vec<BigUint> = incoming.iter().map(|x| key.sign(x)).collect();
    b.send(Actor::A, MessageKind::BlindedIds, None, Payload::BigInts(signatures))?;
    let mut tokens_b: Vec<[u8; 32]> = table_b.keys().copied().collect();
    tokens_b.sort_unstable();
    b.send(Actor::A, MessageKind::BlindedIds, None, Payload::Tokens(tokens_b))?;

    // A: unblind, verify, intersect.
    let sigs = a.expect(Actor::B, MessageKind::BlindedIds)?.into_bigints()?;
    let their_tokens: HashSet<[u8; 32]> = a
        .expect(Actor::B, MessageKind::BlindedIds)?
        .into_tokens()?
        .into_iter()
        .collect();
    if sigs.len() != ids_a.len() {
        return Err(Error::Protocol(format!(
            "{} signatures for {} blinded ids",
            sigs.len(),
            ids_a.len()
        )));
    }
    let mut own: HashMap<[u8; 32], u64> = HashMap::with_capacity(ids_a.len());
    for ((&x, s), r) in ids_a.iter().zip(&sigs).zip(&blinding) {
        let r_inv = r
            .modinv(&n)
            .ok_or_else(|| Error::Protocol("blinding factor not invertible".into()))?;
        let sig = s * r_inv % &n;
        if sig.modpow(&e, &n) != hash_to_group(x, &n) {
            return Err(Error::Protocol("invalid blind signature for a local id".into()));
        }
        if own.insert(token(&salt_at_a, &sig, &n), x).is_some() {
            return Err(Error::Protocol("token collision among local ids".into()));
        }
    }
    let mut common_tokens: Vec<[u8; 32]> = own
        .keys()
        .filter(|t| their_tokens.contains(*t))
        .copied()
        .collect();
    common_tokens.sort_unstable();
    let mut common_at_a: Vec<u64> = common_tokens.iter().map(|t| own[t]).collect();
    common_at_a.sort_unstable();
    a.send(Actor::B, MessageKind::BlindedIds, None, Payload::Tokens(common_tokens))?;

    // B: resolve.
    let returned = b.expect(Actor::A, MessageKind::BlindedIds)?.into_tokens()?;
    let mut common_at_b = returned
        .iter()
        .map(|t| {
            table_b
                .get(t)
                .copied()
                .ok_or_else(|| Error::Protocol("unknown token in intersection".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    common_at_b.sort_unstable();

    Ok(AlignmentOutcome {
        common_at_a,
        common_at_b,
        salt,
        key,
    })
}

/// Alignment over a fresh in-process network; returns the transcript too.
pub fn run_blinded_intersection(
    ids_a: &[u64],
    ids_b: &[u64],
    rsa_bits: u64,
    seed: u64,
) -> Result<(AlignmentOutcome, Transcript)> {
    let mut net = transport::in_process();
    let out = blinded_intersection(ids_a, ids_b, &mut net.a, &mut net.b, rsa_bits, seed)?;
    Ok((out, net.transcript()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_overlap() {
        let (out, t) = run_blinded_intersection(&[1, 2, 3], &[2, 3, 4], 512, 1).unwrap();
        assert_eq!(out.common_at_a, vec![2, 3]);
        assert_eq!(out.common_at_b, vec![2, 3]);
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn disjoint_sets() {
        let (out, _) = run_blinded_intersection(&[1, 2], &[3, 4], 512, 2).unwrap();
        assert!(out.common_at_a.is_empty());
        assert!(out.common_at_b.is_empty());
    }

    #[test]
    fn signatures_verify() {
        let key = RsaBlindKey::generate(512, &mut rng::seeded(3)).unwrap();
        let h = hash_to_group(99, &key.n);
        assert_eq!(key.sign(&h).modpow(&key.e, &key.n), h);
        assert_eq!(key.sign(&h), h.modpow(&key.d, &key.n));
    }
}
