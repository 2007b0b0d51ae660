#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simreuse_core::tensor::{conv2d_input_grad, conv2d_weight_grad, Activation, ConvLayerSpec, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0)).unwrap()
}

/// Non-overlapping `k x k` windows (stride `k`, no padding) over `C` channels
/// of `tiles x tiles` windows each.
pub fn tiled_spec(tiles: usize, k: usize, channels: usize, filters: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        in_channels: channels,
        out_channels: filters,
        kernel: (k, k),
        input: (tiles * k, tiles * k),
        stride: k,
        padding: 0,
        activation: Activation::Identity,
    }
}

/// Input for `tiled_spec` where a fraction `dup` of each channel's windows
/// repeat an earlier window and the rest are fresh random patches. Repeats
/// are spread evenly through raster order: within every run of windows the
/// first of each group is fresh and the others copy it.
pub fn duplicated_input(spec: &ConvLayerSpec, dup: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let (k, _) = spec.kernel;
    let (h, w) = spec.input;
    let (th, tw) = (h / k, w / k);
    let count = th * tw;
    let fresh = ((1.0 - dup) * count as f64).round().max(1.0) as usize;
    let mut data = vec![0.0f32; spec.in_channels * h * w];
    for c in 0..spec.in_channels {
        let patches: Vec<Vec<f32>> = (0..fresh).map(|_| (0..k * k).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
        for t in 0..count {
            // window t copies the fresh patch of its group
            let src = t * fresh / count;
            let (ty, tx) = (t / tw, t % tw);
            for dy in 0..k {
                for dx in 0..k {
                    data[c * h * w + (ty * k + dy) * w + tx * k + dx] = patches[src][dy * k + dx];
                }
            }
        }
    }
    Tensor::new(spec.input_shape(), data).unwrap()
}

/// Fraction of windows per channel that equal an earlier window, summed
/// over channels.
pub fn measured_duplicate_fraction(input: &Tensor, spec: &ConvLayerSpec) -> f64 {
    let (h, w) = spec.input;
    let mut dups = 0;
    let mut total = 0;
    for c in 0..spec.in_channels {
        let chan = Tensor::new(vec![h, w], input.slab(c).to_vec()).unwrap();
        let ch = simreuse_core::tensor::extract_input_vectors(&chan, spec).unwrap();
        total += ch.len();
        dups += (0..ch.len()).filter(|&i| ch[..i].contains(&ch[i])).count();
    }
    dups as f64 / total as f64
}

pub fn random_spec(r: &mut rand_chacha::ChaCha8Rng) -> ConvLayerSpec {
    loop {
        let spec = ConvLayerSpec {
            in_channels: r.random_range(1..=3),
            out_channels: r.random_range(1..=3),
            kernel: (r.random_range(1..=3), r.random_range(1..=3)),
            input: (r.random_range(2..=7), r.random_range(2..=7)),
            stride: r.random_range(1..=2),
            padding: r.random_range(0..=1),
            activation: Activation::Identity,
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

/// Cross-correlation through an explicit im2col matrix and a GEMM, in f64.
pub fn im2col_conv(x: &[f64], w: &[f64], s: &ConvLayerSpec) -> Vec<f64> {
    let (h, wd) = s.input;
    let (k1, k2) = s.kernel;
    let oh = (h + 2 * s.padding - k1) / s.stride + 1;
    let ow = (wd + 2 * s.padding - k2) / s.stride + 1;
    let cols = s.in_channels * k1 * k2;
    let mut a = vec![0.0f64; oh * ow * cols];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for c in 0..s.in_channels {
                for m in 0..k1 {
                    for n in 0..k2 {
                        let y = (oy * s.stride + m) as isize - s.padding as isize;
                        let xx = (ox * s.stride + n) as isize - s.padding as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            a[row * cols + (c * k1 + m) * k2 + n] = x[(c * h + y as usize) * wd + xx as usize];
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0f64; s.out_channels * oh * ow];
    for f in 0..s.out_channels {
        for p in 0..oh * ow {
            out[f * oh * ow + p] = (0..cols).map(|j| a[p * cols + j] * w[f * cols + j]).sum();
        }
    }
    out
}

pub fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-6
}

/// Central differences of `L = sum(r * conv(act(z), w))` in f64 against both
/// conv gradients on `layers` random layers; the first mismatch is returned.
pub fn conv_gradient_check(layers: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let h = 1e-3;
    for layer in 0..layers {
        let spec = random_spec(&mut r);
        let relu = layer % 2 == 1;
        // keep pre-activations clear of the ReLU kink
        let z = Tensor::from_fn(spec.input_shape(), |_| {
            let m = r.random_range(0.05f32..1.0);
            if r.random::<bool>() { m } else { -m }
        })
        .unwrap();
        let w = random_tensor(spec.weight_shape(), &mut r);
        let rr = random_tensor(spec.output_shape(), &mut r);
        let act = |v: f64| if relu { v.max(0.0) } else { v };
        let loss = |zv: &[f64], wv: &[f64]| -> f64 {
            let x: Vec<f64> = zv.iter().map(|&v| act(v)).collect();
            im2col_conv(&x, wv, &spec).iter().zip(rr.data()).map(|(o, &q)| o * q as f64).sum()
        };
        let (zv, wv) = (widen(&z), widen(&w));
        let x = Tensor::from_fn(spec.input_shape(), |i| act(zv[i]) as f32).unwrap();

        let dw = conv2d_weight_grad(&rr, &x, &spec).unwrap();
        for i in 0..wv.len() {
            let (mut p, mut m) = (wv.clone(), wv.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&zv, &p) - loss(&zv, &m)) / (2.0 * h);
            if !close(dw.data()[i] as f64, fd, 1e-3) {
                return Err(format!("dW {spec:?} #{i}: {} vs {fd}", dw.data()[i]));
            }
        }
        let prev = if relu { Activation::ReLU } else { Activation::Identity };
        let dz = conv2d_input_grad(&rr, &w, &z, &spec, prev).unwrap();
        for i in 0..zv.len() {
            let (mut p, mut m) = (zv.clone(), zv.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &wv) - loss(&m, &wv)) / (2.0 * h);
            if !close(dz.data()[i] as f64, fd, 1e-3) {
                return Err(format!("dX {spec:?} #{i}: {} vs {fd}", dz.data()[i]));
            }
        }
    }
    Ok(())
}
