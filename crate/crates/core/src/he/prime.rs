use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

use crate::error::{Error, Result};

const SMALL_PRIMES: [u32; 53] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

pub const MILLER_RABIN_ROUNDS: usize = 64;

/// Uniform `bits`-bit integer from fallible random bytes.
pub(crate) fn random_bits<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint> {
    let bytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; bytes];
    rng.try_fill_bytes(&mut buf)
        .map_err(|e| Error::Rng(e.to_string()))?;
    let excess = bytes as u64 * 8 - bits;
    if excess > 0 {
        buf[0] &= 0xFF >> excess;
    }
    Ok(BigUint::from_bytes_be(&buf))
}

/// Uniform integer in `[1, bound)` by rejection.
pub fn random_below<R: RngCore + ?Sized>(bound: &BigUint, rng: &mut R) -> Result<BigUint> {
    if bound <= &BigUint::one() {
        return Err(Error::InvalidArgument("random_below needs bound > 1".into()));
    }
    loop {
        let r = random_bits(bound.bits(), rng)?;
        if !r.is_zero() && &r < bound {
            return Ok(r);
        }
    }
}

/// Miller–Rabin with `rounds` random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> Result<bool> {
    let two = BigUint::from(2u32);
    if n < &two {
        return Ok(false);
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return Ok(true);
        }
        if (n % &p).is_zero() {
            return Ok(false);
        }
    }
    if n.is_even() {
        return Ok(n == &two);
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().expect("n > 2");
    let d = &n_minus_one >> s;
    let n_minus_three = n - 3u32;
    'witness: for _ in 0..rounds {
        // a uniform in [2, n − 2]
        let a = random_below(&n_minus_three, rng)? + 1u32;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return Ok(false);
    }
    Ok(true)
}

/// Random prime with exactly `bits` bits and its two top bits set, so that
/// the product of two such primes has exactly `2·bits` bits.
pub fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint> {
    if bits < 16 {
        return Err(Error::InvalidArgument(format!("prime size {bits} too small")));
    }
    let top = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    loop {
        let candidate = random_bits(bits, rng)? | &top | BigUint::one();
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng)? {
            return Ok(candidate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn small_numbers() {
        let mut r = rng::seeded(1);
        let primes: Vec<u32> = (0..200)
            .filter(|&k| is_probable_prime(&BigUint::from(k), 16, &mut r).unwrap())
            .collect();
        let oracle: Vec<u32> = (0..200u32)
            .filter(|&k| k >= 2 && (2..k).all(|d| k % d != 0))
            .collect();
        assert_eq!(primes, oracle);
    }

    #[test]
    fn carmichael_numbers_rejected() {
        let mut r = rng::seeded(2);
        for c in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&BigUint::from(c), 64, &mut r).unwrap(), "{c}");
        }
    }

    #[test]
    fn mersenne_prime_accepted() {
        let mut r = rng::seeded(3);
        let m127 = (BigUint::one() << 127u32) - 1u32;
        assert!(is_probable_prime(&m127, 64, &mut r).unwrap());
        let composite = (BigUint::one() << 128u32) + 1u32;
        assert!(!is_probable_prime(&composite, 64, &mut r).unwrap());
    }

    #[test]
    fn generated_prime_has_top_bits() {
        let mut r = rng::seeded(4);
        let p = random_prime(128, &mut r).unwrap();
        assert_eq!(p.bits(), 128);
        assert!(p.bit(126));
    }

    struct Broken;
    impl RngCore for Broken {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, _: &mut [u8]) {}
        fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
            Err(rand::Error::new(std::io::Error::other("entropy source gone")))
        }
    }

    #[test]
    fn rng_failure_surfaces() {
        assert!(matches!(random_prime(64, &mut Broken), Err(Error::Rng(_))));
    }
}
