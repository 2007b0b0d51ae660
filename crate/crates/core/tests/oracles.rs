//! Kernels and the reuse engine checked against independent oracles.

mod common;

use common::{
    close, conv_gradient_check, duplicated_input, im2col_conv, measured_duplicate_fraction, random_spec, random_tensor, rng,
    tiled_spec, widen,
};
use rand::Rng;
use simreuse_core::mcache::{MCache, MCacheConfig};
use simreuse_core::reuse::{backward_conv_with_reuse, forward_conv_with_reuse, ConvBackwardArgs};
use simreuse_core::rpq::ProjectionMatrix;
use simreuse_core::tensor::*;

#[test]
fn conv_forward_matches_im2col_gemm() {
    let mut r = rng(11);
    for _ in 0..200 {
        let spec = random_spec(&mut r);
        let x = random_tensor(spec.input_shape(), &mut r);
        let w = random_tensor(spec.weight_shape(), &mut r);
        let got = conv2d_forward(&x, &w, &spec).unwrap();
        let want = im2col_conv(&widen(&x), &widen(&w), &spec);
        assert_eq!(got.len(), want.len());
        for (g, e) in got.data().iter().zip(&want) {
            assert!((*g as f64 - e).abs() <= 1e-5, "{spec:?}: {g} vs {e}");
        }
    }
}

#[test]
fn extracted_vector_count_is_output_size() {
    for h in 1..8 {
        for k in 1..=3 {
            for stride in 1..=3 {
                for padding in 0..=2 {
                    let spec = ConvLayerSpec { kernel: (k, k), input: (h, h + 1), stride, padding, ..ConvLayerSpec::simple((h, h + 1), (k, k)) };
                    if spec.validate().is_err() {
                        continue;
                    }
                    let chan = Tensor::zeros(vec![h, h + 1]);
                    let n = extract_input_vectors(&chan, &spec).unwrap().len();
                    let oh = (h + 2 * padding - k) / stride + 1;
                    let ow = (h + 1 + 2 * padding - k) / stride + 1;
                    assert_eq!(n, oh * ow, "{spec:?}");
                }
            }
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    if let Err(e) = conv_gradient_check(50, 12) {
        panic!("{e}");
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

#[test]
fn fc_kernels_match_naive_and_finite_differences() {
    let mut r = rng(13);
    let h = 1e-3;
    for _ in 0..20 {
        let (batch, inf, outf) = (r.random_range(1..5), r.random_range(1..20), r.random_range(1..6));
        let x = random_tensor(vec![batch, inf], &mut r);
        let w = random_tensor(vec![inf, outf], &mut r);
        let want = matmul(&widen(&x), &widen(&w), batch, inf, outf);
        let got = fc_forward(&x, &w).unwrap();
        let blocked = fc_forward_blocked(&x, &w, 4).unwrap();
        for ((g, b), e) in got.data().iter().zip(blocked.data()).zip(&want) {
            assert!((*g as f64 - e).abs() <= 1e-5 && (*b as f64 - e).abs() <= 1e-5);
        }
        let rr = random_tensor(vec![batch, outf], &mut r);
        let loss = |xv: &[f64], wv: &[f64]| -> f64 {
            matmul(xv, wv, batch, inf, outf).iter().zip(rr.data()).map(|(o, &q)| o * q as f64).sum()
        };
        let (xv, wv) = (widen(&x), widen(&w));
        let dw = fc_weight_grad(&x, &rr).unwrap();
        let dx = fc_input_grad(&rr, &w).unwrap();
        for i in 0..wv.len() {
            let (mut p, mut m) = (wv.clone(), wv.clone());
            p[i] += h;
            m[i] -= h;
            assert!(close(dw.data()[i] as f64, (loss(&xv, &p) - loss(&xv, &m)) / (2.0 * h), 1e-3));
        }
        for i in 0..xv.len() {
            let (mut p, mut m) = (xv.clone(), xv.clone());
            p[i] += h;
            m[i] -= h;
            assert!(close(dx.data()[i] as f64, (loss(&p, &wv) - loss(&m, &wv)) / (2.0 * h), 1e-3));
        }
    }
}

#[test]
fn attention_matches_naive_and_finite_differences() {
    let mut r = rng(14);
    let h = 1e-3;
    for _ in 0..10 {
        let (t, k) = (r.random_range(1..5), r.random_range(1..6));
        let x = random_tensor(vec![t, k], &mut r);
        let rr = random_tensor(vec![t, k], &mut r);
        let forward = |xv: &[f64]| -> Vec<f64> {
            let mut xt = vec![0.0; k * t];
            for i in 0..t {
                for j in 0..k {
                    xt[j * t + i] = xv[i * k + j];
                }
            }
            let s = matmul(xv, &xt, t, k, t);
            matmul(&s, xv, t, t, k)
        };
        let got = attention_forward(&x).unwrap();
        for (g, e) in got.data().iter().zip(forward(&widen(&x))) {
            assert!(close(*g as f64, e, 1e-5));
        }
        let loss = |xv: &[f64]| -> f64 { forward(xv).iter().zip(rr.data()).map(|(o, &q)| o * q as f64).sum() };
        let xv = widen(&x);
        let dx = attention_backward(&x, &rr).unwrap();
        for i in 0..xv.len() {
            let (mut p, mut m) = (xv.clone(), xv.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(close(dx.data()[i] as f64, fd, 1e-3), "{} vs {fd}", dx.data()[i]);
        }
    }
}

/// Sign-bit signature computed independently of the library code.
fn oracle_signature(v: &[f32], p: &ProjectionMatrix) -> Vec<bool> {
    (0..p.cols())
        .map(|j| {
            let s: f64 = v.iter().zip(p.column(j)).map(|(&a, &b)| a as f64 * b as f64).sum();
            (s as f32) < 0.0
        })
        .collect()
}

#[test]
fn one_repeated_patch_reuses_all_but_the_first_vector() {
    let spec = tiled_spec(4, 3, 2, 3);
    let mut r = rng(15);
    let patch: Vec<f32> = (0..9).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let x = Tensor::from_fn(spec.input_shape(), |i| {
        let (y, xx) = ((i / 12) % 12, i % 12);
        patch[(y % 3) * 3 + xx % 3]
    })
    .unwrap();
    let w = random_tensor(spec.weight_shape(), &mut r);
    let p = ProjectionMatrix::new(1, 9, 20).unwrap();
    let mut cache = MCache::new(MCacheConfig::default()).unwrap();
    let out = forward_conv_with_reuse(&x, &w, &spec, &p, &mut cache, true).unwrap();
    let vectors = spec.output_positions() as u64;
    assert_eq!(out.stats.reused, (spec.in_channels * spec.out_channels) as u64 * (vectors - 1));
    assert_eq!(out.output, conv2d_forward(&x, &w, &spec).unwrap());
}

#[test]
fn long_signatures_on_distinct_windows_reuse_nothing() {
    let spec = ConvLayerSpec { in_channels: 2, out_channels: 2, padding: 1, ..ConvLayerSpec::simple((8, 8), (3, 3)) };
    let mut r = rng(16);
    let x = random_tensor(spec.input_shape(), &mut r);
    let w = random_tensor(spec.weight_shape(), &mut r);
    let p = ProjectionMatrix::new(2, 9, 256).unwrap();
    // Monte-Carlo side: no two windows of a channel share a 256-bit signature
    for c in 0..2 {
        let chan = Tensor::new(vec![8, 8], x.slab(c).to_vec()).unwrap();
        let sigs: Vec<Vec<bool>> = extract_input_vectors(&chan, &spec).unwrap().iter().map(|v| oracle_signature(v, &p)).collect();
        for i in 0..sigs.len() {
            assert!(!sigs[..i].contains(&sigs[i]));
        }
    }
    let cfg = MCacheConfig { total_entries: 128, ways: 2, ..Default::default() };
    let mut cache = MCache::new(cfg).unwrap();
    let out = forward_conv_with_reuse(&x, &w, &spec, &p, &mut cache, true).unwrap();
    assert_eq!(out.stats.reused, 0);
    assert_eq!(out.output, conv2d_forward(&x, &w, &spec).unwrap());
}

#[test]
fn three_quarters_duplicated_windows_give_three_quarters_reuse() {
    let spec = tiled_spec(32, 3, 2, 4);
    let x = duplicated_input(&spec, 0.75, 17);
    assert!((measured_duplicate_fraction(&x, &spec) - 0.75).abs() < 1e-9);
    let mut r = rng(17);
    let w = random_tensor(spec.weight_shape(), &mut r);
    let p = ProjectionMatrix::new(3, 9, 20).unwrap();
    let mut cache = MCache::new(MCacheConfig::default()).unwrap();
    let out = forward_conv_with_reuse(&x, &w, &spec, &p, &mut cache, true).unwrap();
    let frac = out.stats.reuse_fraction();
    assert!((frac - 0.75).abs() <= 0.05, "{frac}");
}

#[test]
fn near_duplicates_stay_within_the_perturbation_bound() {
    let spec = tiled_spec(16, 3, 2, 3);
    let eps = 1e-4f32;
    let base = duplicated_input(&spec, 0.75, 18);
    let mut r = rng(18);
    let x = Tensor::from_fn(spec.input_shape(), |i| base.data()[i] + r.random_range(-eps..eps)).unwrap();
    let w = random_tensor(spec.weight_shape(), &mut r);
    // 20 bits already merge some unrelated 9-D patches; 40 keep them apart
    let p = ProjectionMatrix::new(4, 9, 40).unwrap();
    // precondition: vectors sharing a signature differ by at most 2*eps per element
    let (hh, ww) = spec.input;
    for c in 0..spec.in_channels {
        let chan = Tensor::new(vec![hh, ww], x.slab(c).to_vec()).unwrap();
        let vs = extract_input_vectors(&chan, &spec).unwrap();
        let sigs: Vec<Vec<bool>> = vs.iter().map(|v| oracle_signature(v, &p)).collect();
        for i in 0..vs.len() {
            for j in 0..i {
                if sigs[i] == sigs[j] {
                    assert!(vs[i].iter().zip(&vs[j]).all(|(a, b)| (a - b).abs() <= 2.0 * eps));
                }
            }
        }
    }
    let mut cache = MCache::new(MCacheConfig::default()).unwrap();
    let out = forward_conv_with_reuse(&x, &w, &spec, &p, &mut cache, true).unwrap();
    assert!(out.stats.reused > 0);
    let reference = conv2d_forward(&x, &w, &spec).unwrap();
    let positions = spec.output_positions();
    for f in 0..spec.out_channels {
        let bound: f64 = (0..spec.in_channels)
            .map(|c| {
                let base = (f * spec.in_channels + c) * 9;
                2.0 * eps as f64 * w.data()[base..base + 9].iter().map(|v| v.abs() as f64).sum::<f64>()
            })
            .sum();
        for i in 0..positions {
            let d = (out.output.data()[f * positions + i] as f64 - reference.data()[f * positions + i] as f64).abs();
            assert!(d <= bound + 1e-6, "{d} > {bound}");
        }
    }
}

#[test]
fn backward_with_exact_duplicates_matches_reference() {
    // stride 1 over a periodic tiling: forward windows repeat with period 3,
    // and dense random deltas give distinct gradient windows
    let spec = ConvLayerSpec { in_channels: 2, out_channels: 3, padding: 1, ..ConvLayerSpec::simple((12, 12), (3, 3)) };
    let mut r = rng(19);
    let patches: Vec<f32> = (0..18).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let x = Tensor::from_fn(spec.input_shape(), |i| {
        let (c, y, xx) = (i / 144, (i / 12) % 12, i % 12);
        patches[c * 9 + (y % 3) * 3 + xx % 3]
    })
    .unwrap();
    let w = random_tensor(spec.weight_shape(), &mut r);
    let p = ProjectionMatrix::new(5, 9, 48).unwrap();
    let mut cache = MCache::new(MCacheConfig::default()).unwrap();
    let fwd = forward_conv_with_reuse(&x, &w, &spec, &p, &mut cache, true).unwrap();
    assert_eq!(fwd.output, conv2d_forward(&x, &w, &spec).unwrap());
    let delta = random_tensor(spec.output_shape(), &mut r);
    let args = ConvBackwardArgs {
        delta: &delta,
        weights: &w,
        layer_input: &x,
        act_input: &x,
        prev_activation: Activation::Identity,
        spec: &spec,
        own: fwd.stored.as_ref(),
        next: None,
        projection: &p,
        detection_on: true,
    };
    let b = backward_conv_with_reuse(args, &mut cache).unwrap();
    assert_eq!(b.signature_regenerations, spec.out_channels);
    assert!(b.weight_grad_stats.reused > 0);
    let wg = conv2d_weight_grad(&delta, &x, &spec).unwrap();
    for (a, e) in b.weight_grad.data().iter().zip(wg.data()) {
        assert!(close(*a as f64, *e as f64, 1e-5), "{a} vs {e}");
    }
    let ig = conv2d_input_grad(&delta, &w, &x, &spec, Activation::Identity).unwrap();
    assert_eq!(b.input_grad_stats.reused, 0);
    assert_eq!(b.input_grad, ig);
}
