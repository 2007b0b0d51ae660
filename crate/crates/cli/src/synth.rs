//! Layer inputs with a chosen share of repeated windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simreuse_core::tensor::{ConvLayerSpec, Tensor};

/// Input for `spec` built from kernel-sized tiles: a fraction `1 - dup` of
/// each channel's tiles are fresh random patches and every other tile copies
/// the fresh tile opening its group, in raster order. For stride equal to
/// the kernel and no padding the duplicate-window fraction is exactly `dup`
/// (up to rounding); other layers only use it as a similarity lever.
pub fn duplicated_input(spec: &ConvLayerSpec, dup: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k1, k2) = spec.kernel;
    let (h, w) = spec.input;
    let (th, tw) = (h.div_ceil(k1), w.div_ceil(k2));
    let tiles = th * tw;
    let fresh = (((1.0 - dup) * tiles as f64).round() as usize).clamp(1, tiles);
    let mut data = vec![0.0f32; spec.in_channels * h * w];
    for c in 0..spec.in_channels {
        let patches: Vec<Vec<f32>> =
            (0..fresh).map(|_| (0..k1 * k2).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        for y in 0..h {
            for x in 0..w {
                let t = (y / k1) * tw + x / k2;
                data[(c * h + y) * w + x] = patches[t * fresh / tiles][(y % k1) * k2 + x % k2];
            }
        }
    }
    Tensor::new(spec.input_shape(), data).expect("shape matches")
}

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).expect("finite values")
}

/// Seed for item `i` of stream `stream`.
pub fn derive_seed(seed: u64, stream: u64, i: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
