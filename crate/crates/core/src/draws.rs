//! Seeded modified Latin hypercube draws mapped to standard-normal deviates.
//!
//! Every (individual, dimension) pair owns an independent substream, so draws
//! do not depend on thread count, on the order individuals are listed in, or on
//! which other random components are switched on.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use libm::erfc;

use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 8] = b"DLBDRAWS";
const CACHE_VERSION: u32 = 1;

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal distribution function on (0, 1).
pub fn inverse_normal_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid(format!("probability {u} outside (0, 1)")));
    }
    if u > 0.5 {
        return Ok(-lower_quantile(1.0 - u));
    }
    Ok(lower_quantile(u))
}

// Rational approximation (relative error ~1e-9) followed by one Halley step on erfc.
fn lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for an individual identifier (FNV-1a).
pub fn key_for_id(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn stream(seed: u64, individual_key: u64, dimension_key: u64) -> ChaCha8Rng {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ individual_key) ^ dimension_key);
    ChaCha8Rng::seed_from_u64(h)
}

/// The stratified uniforms behind one (individual, dimension) column.
pub fn mlhs_uniforms(seed: u64, individual_key: u64, dimension_key: u64, q: usize) -> Vec<f64> {
    let mut rng = stream(seed, individual_key, dimension_key);
    let shift = loop {
        let s: f64 = rng.gen();
        if s > 0.0 {
            break s;
        }
    };
    let mut perm: Vec<usize> = (0..q).collect();
    perm.shuffle(&mut rng);
    perm.into_iter()
        .map(|p| (p as f64 + shift) / q as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrawMatrix {
    n: usize,
    q: usize,
    k: usize,
    seed: u64,
    individual_keys: Vec<u64>,
    dimension_keys: Vec<u64>,
    // (individual * q + draw) * k + dimension
    values: Vec<f64>,
}

/// MLHS draws for `n` individuals and `k` dimensions keyed by position.
pub fn mlhs(n: usize, q: usize, k: usize, seed: u64) -> Result<DrawMatrix> {
    let individuals: Vec<u64> = (0..n as u64).collect();
    let dims: Vec<u64> = (0..k as u64).collect();
    mlhs_keyed(&individuals, q, &dims, seed)
}

/// MLHS draws with explicit substream keys per individual and per dimension.
pub fn mlhs_keyed(individual_keys: &[u64], q: usize, dimension_keys: &[u64], seed: u64) -> Result<DrawMatrix> {
    let (n, k) = (individual_keys.len(), dimension_keys.len());
    if n == 0 || q == 0 {
        return Err(Error::invalid(format!(
            "draw matrix needs at least one individual and one draw (N={n}, Q={q})"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("draw matrix needs at least one dimension"));
    }
    let mut values = vec![0.0; n * q * k];
    values
        .par_chunks_mut(q * k)
        .zip(individual_keys.par_iter())
        .for_each(|(block, &ikey)| {
            for (d, &dkey) in dimension_keys.iter().enumerate() {
                for (j, u) in mlhs_uniforms(seed, ikey, dkey, q).into_iter().enumerate() {
                    block[j * k + d] = inverse_normal_cdf(u).expect("stratified uniform inside (0, 1)");
                }
            }
        });
    Ok(DrawMatrix {
        n,
        q,
        k,
        seed,
        individual_keys: individual_keys.to_vec(),
        dimension_keys: dimension_keys.to_vec(),
        values,
    })
}

impl DrawMatrix {
    pub fn individuals(&self) -> usize {
        self.n
    }

    pub fn draws(&self) -> usize {
        self.q
    }

    pub fn dimensions(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dimension_keys(&self) -> &[u64] {
        &self.dimension_keys
    }

    pub fn individual_keys(&self) -> &[u64] {
        &self.individual_keys
    }

    pub fn value(&self, individual: usize, draw: usize, dimension: usize) -> f64 {
        self.values[(individual * self.q + draw) * self.k + dimension]
    }

    /// The Q x K block of one individual, draw-major.
    pub fn block(&self, individual: usize) -> &[f64] {
        let len = self.q * self.k;
        &self.values[individual * len..(individual + 1) * len]
    }

    /// Uniform preimages of one (individual, dimension) column, regenerated from the seed.
    pub fn uniforms(&self, individual: usize, dimension: usize) -> Vec<f64> {
        mlhs_uniforms(
            self.seed,
            self.individual_keys[individual],
            self.dimension_keys[dimension],
            self.q,
        )
    }

    /// Reorders the draw index of every individual by `perm`.
    pub fn permute_draws(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.q {
            return Err(Error::Dimension {
                what: "draw permutation",
                expected: self.q,
                found: perm.len(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.n {
            for (j, &p) in perm.iter().enumerate() {
                for d in 0..self.k {
                    out.values[(i * self.q + j) * self.k + d] = self.value(i, p, d);
                }
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> u64 {
        self.individual_keys
            .iter()
            .chain(&self.dimension_keys)
            .fold(splitmix64(self.n as u64), |h, k| splitmix64(h ^ k))
    }

    /// Writes the binary cache: header (magic, version, N, Q, K, seed, key fingerprint) then row-major f64.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(52 + self.values.len() * 8);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for v in [self.n as u64, self.q as u64, self.k as u64, self.seed, self.fingerprint()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache written for the same keys and seed; `Ok(None)` when the header does not match.
    pub fn read_cache(
        path: &Path,
        individual_keys: &[u64],
        q: usize,
        dimension_keys: &[u64],
        seed: u64,
    ) -> Result<Option<Self>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 52 || &bytes[..8] != CACHE_MAGIC {
            return Err(Error::DrawCache("bad magic".into()));
        }
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CACHE_VERSION {
            return Err(Error::DrawCache(format!("unsupported version {version}")));
        }
        let (n, cq, k, cseed, fp) = (word(12), word(20), word(28), word(36), word(44));
        let mut expected = DrawMatrix {
            n: individual_keys.len(),
            q,
            k: dimension_keys.len(),
            seed,
            individual_keys: individual_keys.to_vec(),
            dimension_keys: dimension_keys.to_vec(),
            values: Vec::new(),
        };
        if (n, cq, k, cseed, fp)
            != (expected.n as u64, q as u64, expected.k as u64, seed, expected.fingerprint())
        {
            return Ok(None);
        }
        let count = expected.n * q * expected.k;
        if bytes.len() != 52 + count * 8 {
            return Err(Error::DrawCache("payload length does not match header".into()));
        }
        expected.values = bytes[52..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Some(expected))
    }
}
