//! Winner-take-all hashing.
//!
//! A vector is hashed by inspecting the first `K` entries of `P = u * W`
//! seeded permutations and recording, for each permutation, the position of
//! the largest inspected value. Consecutive groups of `u` such positions are
//! packed into one band code, giving `W` codes per vector. Two vectors
//! collide in a band when their band codes are equal.
//!
//! Conventions:
//! * a permutation `pi` is applied by gathering, `v'[k] = v[pi[k]]`;
//! * the recorded position is 0-based and ties go to the smallest `k`;
//! * within a band, the `i`-th index occupies bits
//!   `[i * bits, (i + 1) * bits)` with `bits = ceil(log2 K)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

/// Reserved band code. Never produced by packing since codes use < 31 bits.
pub const EMPTY_CODE: u32 = (1 << 31) - 1;

/// Hash family hyperparameters `{K, u, W}` plus the permutation seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WtaParams {
    k: u32,
    u: u32,
    w: u32,
    seed: u64,
}

impl WtaParams {
    pub fn new(k: u32, u: u32, w: u32, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidParams(format!("K must be >= 2, got {k}")));
        }
        if u < 1 {
            return Err(Error::InvalidParams("u must be >= 1".into()));
        }
        if w < 1 {
            return Err(Error::InvalidParams("W must be >= 1".into()));
        }
        // Hit counters are u16.
        if w > u16::MAX as u32 {
            return Err(Error::InvalidParams(format!(
                "W must be <= {}, got {w}",
                u16::MAX
            )));
        }
        let bits = u64::from(u) * u64::from(bits_for(k));
        if bits >= 31 {
            return Err(Error::PackingOverflow {
                bits: bits.min(u64::from(u32::MAX)) as u32,
            });
        }
        Ok(Self { k, u, w, seed })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn u(&self) -> u32 {
        self.u
    }

    pub fn w(&self) -> u32 {
        self.w
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `P = u * W`.
    pub fn num_hashes(&self) -> usize {
        self.u as usize * self.w as usize
    }

    pub fn bits_per_index(&self) -> u32 {
        bits_for(self.k)
    }

    /// Number of significant bits in a band code.
    pub fn band_bits(&self) -> u32 {
        self.u * self.bits_per_index()
    }
}

/// `ceil(log2 k)`, with `bits_for(1) == 0`.
pub fn bits_for(k: u32) -> u32 {
    if k <= 1 {
        0
    } else {
        32 - (k - 1).leading_zeros()
    }
}

/// The first `K` entries of each of `P` seeded permutations of `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSet {
    d: usize,
    k: usize,
    // P rows of K indices, flat
    prefixes: Vec<u32>,
}

impl PermutationSet {
    /// Row `p` is the length-`k` prefix of a forward Fisher-Yates shuffle of
    /// `[0, d)` driven by `SeededRng::stream(seed, p)`: for `i` in `0..k`,
    /// swap position `i` with `i + below(d - i)`.
    pub fn generate(d: usize, num_hashes: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParams("K must be >= 1".into()));
        }
        if d < k {
            return Err(Error::DimensionTooSmall { dim: d, k });
        }
        if d > u32::MAX as usize {
            return Err(Error::InvalidParams(format!("dimension {d} too large")));
        }
        let mut prefixes = vec![0u32; num_hashes * k];
        prefixes
            .par_chunks_mut(k)
            .enumerate()
            .for_each_init(
                || (0..d as u32).collect::<Vec<u32>>(),
                |scratch, (p, row)| {
                    let mut rng = SeededRng::stream(seed, p as u64);
                    let mut touched = Vec::with_capacity(k);
                    for i in 0..k {
                        let j = i + rng.below((d - i) as u64) as usize;
                        scratch.swap(i, j);
                        touched.push((i, j));
                    }
                    row.copy_from_slice(&scratch[..k]);
                    // undo swaps so the scratch identity can be reused
                    for &(i, j) in touched.iter().rev() {
                        scratch.swap(i, j);
                    }
                },
            );
        Ok(Self { d, k, prefixes })
    }

    pub fn for_params(d: usize, params: &WtaParams) -> Result<Self> {
        Self::generate(d, params.num_hashes(), params.k() as usize, params.seed())
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_hashes(&self) -> usize {
        self.prefixes.len() / self.k
    }

    pub fn row(&self, p: usize) -> &[u32] {
        &self.prefixes[p * self.k..(p + 1) * self.k]
    }
}

/// `P` ordinal indices, each in `[0, K)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCodes(pub Vec<u32>);

/// `W` packed band codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandCodes(pub Vec<u32>);

fn check_finite(v: &[f32]) -> Result<()> {
    if let Some(i) = v.iter().position(|x| x.is_nan()) {
        return Err(Error::InvalidInput(format!("NaN at position {i}")));
    }
    Ok(())
}

#[inline]
fn argmax_prefix(v: &[f32], prefix: &[u32]) -> u32 {
    let mut best = 0u32;
    let mut best_val = v[prefix[0] as usize];
    for (k, &idx) in prefix.iter().enumerate().skip(1) {
        let x = v[idx as usize];
        if x > best_val {
            best_val = x;
            best = k as u32;
        }
    }
    best
}

pub fn wta_hash_vector(v: &[f32], perms: &PermutationSet) -> Result<HashCodes> {
    if v.len() != perms.dim() {
        return Err(Error::shape(
            format!("vector of length {}", perms.dim()),
            format!("length {}", v.len()),
        ));
    }
    check_finite(v)?;
    let codes = (0..perms.num_hashes())
        .map(|p| argmax_prefix(v, perms.row(p)))
        .collect();
    Ok(HashCodes(codes))
}

pub fn pack_bands(codes: &HashCodes, params: &WtaParams) -> Result<BandCodes> {
    if codes.0.len() != params.num_hashes() {
        return Err(Error::shape(
            format!("{} hash codes", params.num_hashes()),
            format!("{}", codes.0.len()),
        ));
    }
    let bits = params.bits_per_index();
    let mut out = Vec::with_capacity(params.w() as usize);
    for band in codes.0.chunks_exact(params.u() as usize) {
        let mut code = 0u32;
        for (i, &idx) in band.iter().enumerate() {
            if idx >= params.k() {
                return Err(Error::InvalidInput(format!(
                    "hash index {idx} out of range for K = {}",
                    params.k()
                )));
            }
            code |= idx << (i as u32 * bits);
        }
        out.push(code);
    }
    Ok(BandCodes(out))
}

/// Inverse of the packing for one band.
pub fn unpack_band(code: u32, params: &WtaParams) -> Vec<u32> {
    let bits = params.bits_per_index();
    let mask = (1u32 << bits) - 1;
    (0..params.u()).map(|i| (code >> (i * bits)) & mask).collect()
}

/// Band codes for a batch of vectors, `rows x W`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMatrix {
    rows: usize,
    w: usize,
    codes: Vec<u32>,
}

impl BandMatrix {
    pub fn from_vec(rows: usize, w: usize, codes: Vec<u32>) -> Result<Self> {
        if codes.len() != rows * w {
            return Err(Error::shape(
                format!("{} codes", rows * w),
                format!("{}", codes.len()),
            ));
        }
        Ok(Self { rows, w, codes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.codes[i * self.w..(i + 1) * self.w]
    }

    pub fn get(&self, i: usize, w: usize) -> u32 {
        self.codes[i * self.w + w]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.codes
    }
}

fn hash_row_into(v: &[f32], perms: &PermutationSet, params: &WtaParams, out: &mut [u32]) {
    let u = params.u() as usize;
    let bits = params.bits_per_index();
    for (w, slot) in out.iter_mut().enumerate() {
        let mut code = 0u32;
        for i in 0..u {
            let idx = argmax_prefix(v, perms.row(w * u + i));
            code |= idx << (i as u32 * bits);
        }
        *slot = code;
    }
}

fn check_pairing(perms: &PermutationSet, params: &WtaParams) -> Result<()> {
    if perms.k() != params.k() as usize || perms.num_hashes() != params.num_hashes() {
        return Err(Error::shape(
            format!("permutations for K={} P={}", params.k(), params.num_hashes()),
            format!("K={} P={}", perms.k(), perms.num_hashes()),
        ));
    }
    Ok(())
}

/// Hashes every row of `m`. Rows are processed independently in parallel.
pub fn hash_matrix(m: &Matrix, perms: &PermutationSet, params: &WtaParams) -> Result<BandMatrix> {
    check_pairing(perms, params)?;
    if m.cols() != perms.dim() {
        return Err(Error::shape(
            format!("{} columns", perms.dim()),
            format!("{}", m.cols()),
        ));
    }
    check_finite(m.as_slice())?;
    let w = params.w() as usize;
    let mut codes = vec![0u32; m.rows() * w];
    codes
        .par_chunks_mut(w)
        .enumerate()
        .with_min_len(16)
        .for_each(|(i, out)| hash_row_into(m.row(i), perms, params, out));
    Ok(BandMatrix {
        rows: m.rows(),
        w,
        codes,
    })
}

/// Bundles parameters with their materialized permutations.
#[derive(Debug, Clone)]
pub struct WtaHasher {
    params: WtaParams,
    perms: PermutationSet,
}

impl WtaHasher {
    pub fn new(dim: usize, params: WtaParams) -> Result<Self> {
        let perms = PermutationSet::for_params(dim, &params)?;
        Ok(Self { params, perms })
    }

    pub fn params(&self) -> &WtaParams {
        &self.params
    }

    pub fn permutations(&self) -> &PermutationSet {
        &self.perms
    }

    pub fn dim(&self) -> usize {
        self.perms.dim()
    }

    pub fn hash_vector(&self, v: &[f32]) -> Result<BandCodes> {
        pack_bands(&wta_hash_vector(v, &self.perms)?, &self.params)
    }

    pub fn hash_matrix(&self, m: &Matrix) -> Result<BandMatrix> {
        hash_matrix(m, &self.perms, &self.params)
    }
}
