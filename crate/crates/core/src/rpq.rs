//! Random projection with quantization (RPQ) signatures.
//!
//! A vector is projected onto `N` standard normal directions and each
//! projection is reduced to its sign bit. Equal signatures mark vectors as
//! reuse candidates.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, shape_err, Result};
use crate::mcache::EntryId;
use crate::tensor::{conv2d_forward, Activation, ConvLayerSpec, Tensor};

/// `m x N` projection matrix stored column-major, so each column is one
/// random filter and a longer matrix from the same seed extends a shorter one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    seed: u64,
    rows: usize,
    cols: usize,
    entries: Vec<f32>,
}

pub fn gen_projection(seed: u64, m: usize, n: usize) -> Result<ProjectionMatrix> {
    ProjectionMatrix::new(seed, m, n)
}

impl ProjectionMatrix {
    pub fn new(seed: u64, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(config_err!("projection needs m, N >= 1 (got {}x{})", rows, cols));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Ok(Self { seed, rows, cols, entries })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Input vector length `m`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Signature length `N`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f32] {
        &self.entries[j * self.rows..(j + 1) * self.rows]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    /// The same matrix with `cols` columns; existing columns are kept.
    pub fn resized(&self, cols: usize) -> Result<Self> {
        if cols <= self.cols {
            if cols == 0 {
                return Err(config_err!("projection needs N >= 1"));
            }
            return Ok(Self {
                seed: self.seed,
                rows: self.rows,
                cols,
                entries: self.entries[..cols * self.rows].to_vec(),
            });
        }
        Self::new(self.seed, self.rows, cols)
    }
}

/// Bit string of fixed length. Bit `j` is stored at bit `j % 64` of word `j / 64`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Signature {
    words: Vec<u64>,
    len: usize,
}

impl Signature {
    pub fn zeros(len: usize) -> Self {
        Self { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut s = Self::zeros(0);
        for b in bits {
            s.push(b);
        }
        s
    }

    pub fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        if bit {
            self.words[self.len / 64] |= 1 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, j: usize) -> bool {
        assert!(j < self.len, "bit {} of a {}-bit signature", j, self.len);
        (self.words[j / 64] >> (j % 64)) & 1 == 1
    }

    pub fn set(&mut self, j: usize, bit: bool) {
        assert!(j < self.len, "bit {} of a {}-bit signature", j, self.len);
        let mask = 1u64 << (j % 64);
        if bit {
            self.words[j / 64] |= mask;
        } else {
            self.words[j / 64] &= !mask;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|j| self.get(j))
    }

    /// First `n` bits as an integer, bit `j` weighted `2^j`. `n <= 64`.
    pub fn low_bits(&self, n: usize) -> u64 {
        assert!(n <= 64 && n <= self.len);
        if n == 0 {
            return 0;
        }
        let w = self.words[0];
        if n == 64 {
            w
        } else {
            w & ((1u64 << n) - 1)
        }
    }

    /// Bits `0..n`.
    pub fn prefix(&self, n: usize) -> Self {
        assert!(n <= self.len);
        let mut words = self.words[..n.div_ceil(64)].to_vec();
        if !n.is_multiple_of(64) {
            *words.last_mut().expect("n > 0") &= (1u64 << (n % 64)) - 1;
        }
        Self { words, len: n }
    }

    /// Bits `start..len`.
    pub fn suffix(&self, start: usize) -> Self {
        assert!(start <= self.len);
        let len = self.len - start;
        let (skip, shift) = (start / 64, start % 64);
        let words = (0..len.div_ceil(64))
            .map(|i| {
                let lo = self.words[skip + i] >> shift;
                let hi = match (shift, self.words.get(skip + i + 1)) {
                    (0, _) | (_, None) => 0,
                    (_, Some(&w)) => w << (64 - shift),
                };
                lo | hi
            })
            .collect();
        Self { words, len }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Raw packed words (trailing bits of the last word are zero).
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(shape_err!("{} words cannot hold exactly {} bits", words.len(), len));
        }
        let mut s = Self { words, len };
        if !len.is_multiple_of(64) {
            let last = s.words.len() - 1;
            s.words[last] &= (1u64 << (len % 64)) - 1;
        }
        Ok(s)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Signature(")?;
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        f.write_str(")")
    }
}

/// 1 iff `x < 0`; both zeros give 0.
#[inline]
pub fn sign_quantize(x: f32) -> bool {
    x < 0.0
}

pub fn signature_of(v: &[f32], p: &ProjectionMatrix) -> Result<Signature> {
    if v.len() != p.rows {
        return Err(shape_err!("vector of length {} for a projection with m = {}", v.len(), p.rows));
    }
    Ok(signature_unchecked(v, p))
}

fn signature_unchecked(v: &[f32], p: &ProjectionMatrix) -> Signature {
    let wide: Vec<f64> = p.entries.iter().map(|&x| x as f64).collect();
    let mut buf = vec![0.0f64; p.rows];
    signature_wide(v, &wide, p, &mut buf)
}

// Each projection is the f64 dot product rounded to f32, exactly what a
// single-channel convolution produces; the widening is hoisted.
fn signature_wide(v: &[f32], wide: &[f64], p: &ProjectionMatrix, buf: &mut [f64]) -> Signature {
    for (b, &x) in buf.iter_mut().zip(v) {
        *b = x as f64;
    }
    let mut s = Signature::zeros(p.cols);
    for (j, col) in wide.chunks_exact(p.rows).enumerate() {
        let mut acc = 0.0f64;
        for (&x, &y) in buf.iter().zip(col) {
            acc += x * y;
        }
        if sign_quantize(acc as f32) {
            s.words[j / 64] |= 1 << (j % 64);
        }
    }
    s
}

/// Signatures of a packed run of `m`-long vectors.
pub(crate) fn signatures_of_packed(packed: &[f32], p: &ProjectionMatrix) -> Vec<Signature> {
    let wide: Vec<f64> = p.entries.iter().map(|&x| x as f64).collect();
    let mut buf = vec![0.0f64; p.rows];
    packed.chunks_exact(p.rows).map(|v| signature_wide(v, &wide, p, &mut buf)).collect()
}

/// Signature table of one channel pass, indexed by input-vector ordinal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignatureTable {
    sigs: Vec<Signature>,
    entries: Vec<Option<EntryId>>,
}

impl SignatureTable {
    pub fn from_signatures(sigs: Vec<Signature>) -> Self {
        let entries = vec![None; sigs.len()];
        Self { sigs, entries }
    }

    pub fn len(&self) -> usize {
        self.sigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigs.is_empty()
    }

    pub fn signature(&self, ordinal: usize) -> Option<&Signature> {
        self.sigs.get(ordinal)
    }

    pub fn signatures(&self) -> &[Signature] {
        &self.sigs
    }

    pub fn entry(&self, ordinal: usize) -> Option<EntryId> {
        self.entries.get(ordinal).copied().flatten()
    }

    pub fn set_entry(&mut self, ordinal: usize, id: Option<EntryId>) -> Result<()> {
        let len = self.entries.len();
        let slot = self
            .entries
            .get_mut(ordinal)
            .ok_or_else(|| shape_err!("ordinal {} outside a table of {}", ordinal, len))?;
        *slot = id;
        Ok(())
    }

    pub fn clear(&mut self) {
        self.sigs.clear();
        self.entries.clear();
    }

    /// Replace the contents with a new channel's signatures.
    pub fn load(&mut self, sigs: Vec<Signature>) {
        self.entries.clear();
        self.entries.resize(sigs.len(), None);
        self.sigs = sigs;
    }
}

/// Every column of `P` becomes a `k1 x k2` filter; each output map of that
/// bank is sign-quantized into one bit of every position's signature.
/// `input` is one channel, `[H, W]` or `[1, H, W]`.
pub fn signatures_via_convolution(input: &Tensor, spec: &ConvLayerSpec, p: &ProjectionMatrix) -> Result<SignatureTable> {
    if p.rows != spec.kernel_area() {
        return Err(shape_err!(
            "projection has m = {} but the kernel covers {} values",
            p.rows,
            spec.kernel_area()
        ));
    }
    let bank = ConvLayerSpec {
        in_channels: 1,
        out_channels: p.cols,
        activation: Activation::Identity,
        ..*spec
    };
    bank.validate()?;
    let (h, w) = spec.input;
    let chan = match input.shape() {
        [hh, ww] | [1, hh, ww] if (*hh, *ww) == (h, w) => Tensor::new(vec![1, h, w], input.data().to_vec())?,
        s => return Err(shape_err!("expected a single {}x{} channel, got {:?}", h, w, s)),
    };
    let (k1, k2) = spec.kernel;
    let filters = Tensor::new(vec![p.cols, 1, k1, k2], p.entries.clone())?;
    let maps = conv2d_forward(&chan, &filters, &bank)?;
    let positions = bank.output_positions();
    let sigs = (0..positions)
        .map(|i| Signature::from_bits((0..p.cols).map(|j| sign_quantize(maps.data()[j * positions + i]))))
        .collect();
    Ok(SignatureTable::from_signatures(sigs))
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 8-bit fixed point of a unit-scale value.
#[inline]
pub fn quantize_i8(x: f32) -> i8 {
    libm::roundf(x.clamp(-1.0, 1.0) * 127.0) as i8
}

/// Bloom filter of the `(index, quantize_i8(value))` pairs of `v`, each pair
/// setting `hash_count` bits chosen by independent 64-bit hashes.
pub fn bloom_signature(v: &[f32], filter_bits: usize, hash_count: usize) -> Result<Signature> {
    if hash_count == 0 || filter_bits < hash_count {
        return Err(config_err!(
            "bloom filter needs filter_bits >= hash_count >= 1 (got {} bits, {} hashes)",
            filter_bits,
            hash_count
        ));
    }
    let mut out = Signature::zeros(filter_bits);
    for (i, &x) in v.iter().enumerate() {
        let key = ((i as u64) << 8) | (quantize_i8(x) as u8 as u64);
        for k in 0..hash_count as u64 {
            let h = splitmix64(key ^ splitmix64(k.wrapping_mul(0xD6E8_FEB8_6659_FD93)));
            out.set((h % filter_bits as u64) as usize, true);
        }
    }
    Ok(out)
}

pub const DEFAULT_BLOOM_HASHES: usize = 3;

/// Perturbation half-width of the "similar" copies.
pub const DEFAULT_EPSILON: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct UniquenessParams {
    pub base_count: usize,
    pub dim: usize,
    pub copies: usize,
    pub lengths: Vec<usize>,
    pub epsilon: f32,
    pub bloom_hashes: usize,
}

impl Default for UniquenessParams {
    fn default() -> Self {
        Self {
            base_count: 10,
            dim: 10,
            copies: 10,
            lengths: vec![1, 2, 4, 8, 16, 20, 24, 32, 48, 64],
            epsilon: DEFAULT_EPSILON,
            bloom_hashes: DEFAULT_BLOOM_HASHES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum HashMethod {
    Rpq,
    Bloom,
}

impl HashMethod {
    pub fn name(self) -> &'static str {
        match self {
            HashMethod::Rpq => "rpq",
            HashMethod::Bloom => "bloom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UniquenessRow {
    pub length: usize,
    pub method: HashMethod,
    pub unique_count: usize,
    pub trial_seed: u64,
}

/// `base_count` uniform vectors in `[-1, 1]^dim`, each followed by `copies`
/// perturbed copies, grouped base by base.
pub fn similar_vector_set(params: &UniquenessParams, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = params.epsilon;
    let mut out = Vec::with_capacity(params.base_count * (params.copies + 1));
    for _ in 0..params.base_count {
        let base: Vec<f32> = (0..params.dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        for _ in 0..params.copies {
            let copy = base
                .iter()
                .map(|&x| if eps > 0.0 { x + rng.random_range(-eps..=eps) } else { x })
                .collect();
            out.push(copy);
        }
        out.push(base);
    }
    out
}

fn count_distinct(mut sigs: Vec<Signature>) -> usize {
    sigs.sort_unstable();
    sigs.dedup();
    sigs.len()
}

/// One trial: distinct signature count at each length for RPQ and Bloom.
pub fn uniqueness_trial(params: &UniquenessParams, trial_seed: u64) -> Result<Vec<UniquenessRow>> {
    if params.dim == 0 {
        return Err(config_err!("dim must be positive"));
    }
    let vectors = similar_vector_set(params, trial_seed);
    let longest = params.lengths.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::with_capacity(2 * params.lengths.len());
    if longest == 0 {
        return Ok(rows);
    }
    let proj = ProjectionMatrix::new(splitmix64(trial_seed), params.dim, longest)?;
    let full: Vec<Signature> = vectors.iter().map(|v| signature_unchecked(v, &proj)).collect();
    for &len in &params.lengths {
        if len == 0 {
            return Err(config_err!("signature length must be positive"));
        }
        let rpq = count_distinct(full.iter().map(|s| s.prefix(len)).collect());
        rows.push(UniquenessRow { length: len, method: HashMethod::Rpq, unique_count: rpq, trial_seed });
        let hashes = params.bloom_hashes.min(len);
        let bloom: Vec<Signature> = vectors
            .iter()
            .map(|v| bloom_signature(v, len, hashes))
            .collect::<Result<_>>()?;
        rows.push(UniquenessRow {
            length: len,
            method: HashMethod::Bloom,
            unique_count: count_distinct(bloom),
            trial_seed,
        });
    }
    Ok(rows)
}

/// `trials` independent trials with seeds `seed, seed + 1, ...`.
pub fn uniqueness_experiment(params: &UniquenessParams, seed: u64, trials: usize) -> Result<Vec<UniquenessRow>> {
    let mut rows = Vec::new();
    for t in 0..trials as u64 {
        rows.extend(uniqueness_trial(params, seed.wrapping_add(t))?);
    }
    Ok(rows)
}
