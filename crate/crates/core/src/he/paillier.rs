use std::fmt;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::encoding::FixedPoint;
use super::prime::{random_below, random_prime};
use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Short fingerprint of a public modulus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub u64);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    id: KeyId,
}

/// Secret key with the textbook `(λ, μ)` pair and the CRT precomputation
/// used for fast decryption.
#[derive(Clone)]
pub struct SecretKey {
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    secret: SecretKey,
    bits: u64,
}

/// One ciphertext together with the fixed-point scale of its plaintext.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    pub value: BigUint,
    pub scale_bits: u32,
    pub key: KeyId,
}

/// Ciphertexts sharing one key and one plaintext scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherVector {
    pub ciphertexts: Vec<BigUint>,
    pub scale_bits: u32,
    pub key: KeyId,
}

fn key_id(n: &BigUint) -> KeyId {
    let digest = Sha256::digest(n.to_bytes_be());
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    KeyId(u64::from_be_bytes(first))
}

fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

fn mod_inverse(a: &BigUint, m: &BigUint) -> Result<BigUint> {
    a.modinv(m)
        .ok_or_else(|| Error::Crypto("value not invertible modulo the key".into()))
}

/// Generates a key whose modulus has exactly `bits` bits.
///
/// 512-bit keys are meant for tests; experiments use 1024 or 2048.
pub fn keygen<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<KeyPair> {
    if ![512, 1024, 2048].contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "key size must be 512, 1024 or 2048 bits, got {bits}"
        )));
    }
    loop {
        let p = random_prime(bits / 2, rng)?;
        let q = random_prime(bits / 2, rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        return KeyPair::from_primes(p, q);
    }
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Self {
        Self {
            n_squared: &n * &n,
            g: &n + 1u32,
            id: key_id(&n),
            n,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    /// `c = (1 + m·n)·rⁿ mod n²` for a residue `m < n`.
    pub fn encrypt_raw<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<BigUint> {
        if m >= &self.n {
            return Err(Error::Crypto("plaintext residue ≥ n".into()));
        }
        let r = loop {
            let r = random_below(&self.n, rng)?;
            if r.gcd(&self.n).is_one() {
                break r;
            }
        };
        let gm = (m * &self.n + 1u32) % &self.n_squared;
        Ok(gm * r.modpow(&self.n, &self.n_squared) % &self.n_squared)
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, pt: &FixedPoint, rng: &mut R) -> Result<Ciphertext> {
        Ok(Ciphertext {
            value: self.encrypt_raw(&pt.mantissa, rng)?,
            scale_bits: pt.scale_bits,
            key: self.id,
        })
    }

    pub fn encrypt_value<R: RngCore + ?Sized>(
        &self,
        value: f64,
        scale_bits: u32,
        rng: &mut R,
    ) -> Result<Ciphertext> {
        self.encrypt(&FixedPoint::encode(value, scale_bits, &self.n)?, rng)
    }

    pub fn encrypt_vector<R: RngCore + ?Sized>(
        &self,
        values: &[f64],
        scale_bits: u32,
        rng: &mut R,
    ) -> Result<CipherVector> {
        let ciphertexts = values
            .iter()
            .map(|&v| {
                let pt = FixedPoint::encode(v, scale_bits, &self.n)?;
                self.encrypt_raw(&pt.mantissa, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CipherVector {
            ciphertexts,
            scale_bits,
            key: self.id,
        })
    }

    fn check(&self, c: &Ciphertext) -> Result<()> {
        if c.key != self.id {
            return Err(Error::Crypto(format!(
                "ciphertext under key {} used with key {}",
                c.key, self.id
            )));
        }
        if c.value >= self.n_squared {
            return Err(Error::Crypto("ciphertext ≥ n²".into()));
        }
        Ok(())
    }

    /// `c^k mod n²`, using `(c⁻¹)^(n−k)` for residues in the negative band
    /// so the exponent stays short.
    fn pow_signed(&self, c: &BigUint, k: &FixedPoint, c_inv: Option<&BigUint>) -> Result<BigUint> {
        if k.is_negative(&self.n) {
            let magnitude = &self.n - &k.mantissa;
            let inv = match c_inv {
                Some(inv) => inv.clone(),
                None => mod_inverse(c, &self.n_squared)?,
            };
            Ok(inv.modpow(&magnitude, &self.n_squared))
        } else {
            Ok(c.modpow(&k.mantissa, &self.n_squared))
        }
    }
}

/// Homomorphic addition; decrypts to `(m1 + m2) mod n`.
pub fn add_cipher(pk: &PublicKey, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext> {
    pk.check(c1)?;
    pk.check(c2)?;
    if c1.scale_bits != c2.scale_bits {
        return Err(Error::Crypto(format!(
            "scale mismatch: 2^{} vs 2^{}",
            c1.scale_bits, c2.scale_bits
        )));
    }
    Ok(Ciphertext {
        value: &c1.value * &c2.value % pk.n_squared(),
        scale_bits: c1.scale_bits,
        key: c1.key,
    })
}

/// Plaintext-by-ciphertext product; decrypts to `m·k mod n` at scale
/// `2^(s_c + s_k)`.
pub fn mul_plain(pk: &PublicKey, c: &Ciphertext, k: &FixedPoint) -> Result<Ciphertext> {
    pk.check(c)?;
    let scale_bits = c.scale_bits + k.scale_bits;
    if u64::from(scale_bits) + 2 >= pk.n.bits() {
        return Err(Error::BandOverflow);
    }
    Ok(Ciphertext {
        value: pk.pow_signed(&c.value, k, None)?,
        scale_bits,
        key: c.key,
    })
}

impl KeyPair {
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        let n = &p * &q;
        let public = PublicKey::from_modulus(n.clone());
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        let mu = mod_inverse(&(&lambda % &n), &n)?;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let hp = mod_inverse(
            &l_function(&public.g.modpow(&(&p - 1u32), &p_squared), &p),
            &p,
        )?;
        let hq = mod_inverse(
            &l_function(&public.g.modpow(&(&q - 1u32), &q_squared), &q),
            &q,
        )?;
        let q_inv_p = mod_inverse(&q, &p)?;
        Ok(Self {
            bits: n.bits(),
            public,
            secret: SecretKey {
                lambda,
                mu,
                p,
                q,
                p_squared,
                q_squared,
                hp,
                hq,
                q_inv_p,
            },
        })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn id(&self) -> KeyId {
        self.public.id
    }

    pub fn lambda(&self) -> &BigUint {
        &self.secret.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.secret.mu
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.secret.p, &self.secret.q)
    }

    /// CRT decryption of a raw ciphertext to its residue mod `n`.
    pub fn decrypt_raw(&self, c: &BigUint) -> Result<BigUint> {
        if c >= self.public.n_squared() {
            return Err(Error::Crypto("ciphertext ≥ n²".into()));
        }
        let s = &self.secret;
        let mp = l_function(&c.modpow(&(&s.p - 1u32), &s.p_squared), &s.p) * &s.hp % &s.p;
        let mq = l_function(&c.modpow(&(&s.q - 1u32), &s.q_squared), &s.q) * &s.hq % &s.q;
        let diff = (&mp + &s.p - (&mq % &s.p)) % &s.p;
        Ok(&mq + &s.q * (diff * &s.q_inv_p % &s.p))
    }

    /// Textbook decryption `L(c^λ mod n²)·μ mod n`; slower, kept as a cross-check.
    pub fn decrypt_textbook(&self, c: &BigUint) -> Result<BigUint> {
        let pk = &self.public;
        if c >= pk.n_squared() {
            return Err(Error::Crypto("ciphertext ≥ n²".into()));
        }
        let u = c.modpow(&self.secret.lambda, pk.n_squared());
        Ok(l_function(&u, pk.n()) * &self.secret.mu % pk.n())
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<FixedPoint> {
        self.public.check(c)?;
        Ok(FixedPoint {
            mantissa: self.decrypt_raw(&c.value)?,
            scale_bits: c.scale_bits,
        })
    }

    pub fn decrypt_value(&self, c: &Ciphertext) -> Result<f64> {
        self.decrypt(c)?.decode(self.public.n())
    }

    pub fn decrypt_vector(&self, v: &CipherVector) -> Result<Vec<f64>> {
        if v.key != self.public.id {
            return Err(Error::Crypto(format!(
                "vector under key {} decrypted with key {}",
                v.key, self.public.id
            )));
        }
        v.ciphertexts
            .iter()
            .map(|c| {
                FixedPoint {
                    mantissa: self.decrypt_raw(c)?,
                    scale_bits: v.scale_bits,
                }
                .decode(self.public.n())
            })
            .collect()
    }
}

impl CipherVector {
    pub fn len(&self) -> usize {
        self.ciphertexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ciphertexts.is_empty()
    }

    pub fn get(&self, i: usize) -> Ciphertext {
        Ciphertext {
            value: self.ciphertexts[i].clone(),
            scale_bits: self.scale_bits,
            key: self.key,
        }
    }

    /// Checks key ownership and the `c < n²` range of every element.
    pub fn validate(&self, pk: &PublicKey) -> Result<()> {
        if self.key != pk.id() {
            return Err(Error::Crypto(format!(
                "vector under key {} checked against key {}",
                self.key,
                pk.id()
            )));
        }
        if self.ciphertexts.iter().any(|c| c >= pk.n_squared()) {
            return Err(Error::Crypto("ciphertext ≥ n²".into()));
        }
        Ok(())
    }

    pub fn add(&self, pk: &PublicKey, other: &CipherVector) -> Result<CipherVector> {
        self.validate(pk)?;
        other.validate(pk)?;
        if self.len() != other.len() {
            return Err(Error::shape("CipherVector::add", self.len(), other.len()));
        }
        if self.scale_bits != other.scale_bits {
            return Err(Error::Crypto("scale mismatch in vector addition".into()));
        }
        Ok(CipherVector {
            ciphertexts: self
                .ciphertexts
                .iter()
                .zip(&other.ciphertexts)
                .map(|(a, b)| a * b % pk.n_squared())
                .collect(),
            scale_bits: self.scale_bits,
            key: self.key,
        })
    }

    /// Row-wise scaling: for a `len × d` plaintext matrix `k` returns the
    /// row-major `len × d` ciphertexts of `m_i · k_ij` at scale
    /// `2^(s + scale_bits)`.
    pub fn outer_mul_plain(
        &self,
        pk: &PublicKey,
        k: &Tensor2,
        scale_bits: u32,
    ) -> Result<CipherVector> {
        self.validate(pk)?;
        if k.rows() != self.len() {
            return Err(Error::shape("outer_mul_plain rows", self.len(), k.rows()));
        }
        let out_scale = self.scale_bits + scale_bits;
        if u64::from(out_scale) + 2 >= pk.n().bits() {
            return Err(Error::BandOverflow);
        }
        let mut out = Vec::with_capacity(k.rows() * k.cols());
        for (c, row) in self.ciphertexts.iter().zip(k.iter_rows()) {
            let encoded = row
                .iter()
                .map(|&v| FixedPoint::encode(v, scale_bits, pk.n()))
                .collect::<Result<Vec<_>>>()?;
            let inv = if encoded.iter().any(|e| e.is_negative(pk.n())) {
                Some(mod_inverse(c, pk.n_squared())?)
            } else {
                None
            };
            for e in &encoded {
                out.push(pk.pow_signed(c, e, inv.as_ref())?);
            }
        }
        Ok(CipherVector {
            ciphertexts: out,
            scale_bits: out_scale,
            key: self.key,
        })
    }
}
