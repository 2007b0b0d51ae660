//! Reference numerical kernels.
//!
//! Everything here is the ground truth the reuse engine is checked against.
//! Dot products accumulate in `f64` in a fixed element order and are rounded to
//! `f32` only when stored, so two code paths that visit the same products in
//! the same order agree bit for bit.
//!
//! Layouts (row-major throughout):
//! - conv input / feature map: `[C, H, W]`
//! - conv weights: `[F, C, k1, k2]`
//! - conv output / delta: `[F, outH, outW]`
//! - FC inputs `[batch, in]`, FC weights `[in, out]`
//! - attention input `[t, k]`

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};

/// Dense row-major `f32` tensor. All values are finite on construction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {:?}", shape));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f32) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape, (0..len).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Row `i` of the leading axis as a flat slice.
    pub fn slab(&self, i: usize) -> &[f32] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Built from values the kernels produced; skips the finiteness scan.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    ReLU,
    #[default]
    Identity,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    /// f'(x); ReLU'(0) is 0.
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (k1, k2): kernel rows and columns.
    pub kernel: (usize, usize),
    /// (H, W) of each input channel.
    pub input: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub activation: Activation,
}

impl ConvLayerSpec {
    /// Single-channel, single-filter, stride 1, no padding.
    pub fn simple(input: (usize, usize), kernel: (usize, usize)) -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            kernel,
            input,
            stride: 1,
            padding: 0,
            activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(config_err!("kernel extents and stride must be positive"));
        }
        if self.input.0 == 0 || self.input.1 == 0 {
            return Err(config_err!("input extents must be positive"));
        }
        for (extent, k) in [(self.input.0, self.kernel.0), (self.input.1, self.kernel.1)] {
            let padded = extent + 2 * self.padding;
            if padded < k {
                return Err(config_err!(
                    "kernel {} larger than padded input {}",
                    k,
                    padded
                ));
            }
            if !(padded - k).is_multiple_of(self.stride) {
                return Err(config_err!(
                    "(extent {} - kernel {} + 2*padding {}) not divisible by stride {}",
                    extent,
                    k,
                    self.padding,
                    self.stride
                ));
            }
        }
        Ok(())
    }

    /// (outH, outW). Assumes `validate` passed.
    pub fn output_dims(&self) -> (usize, usize) {
        let oh = (self.input.0 + 2 * self.padding - self.kernel.0) / self.stride + 1;
        let ow = (self.input.1 + 2 * self.padding - self.kernel.1) / self.stride + 1;
        (oh, ow)
    }

    pub fn output_positions(&self) -> usize {
        let (oh, ow) = self.output_dims();
        oh * ow
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.in_channels, self.input.0, self.input.1]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let (oh, ow) = self.output_dims();
        vec![self.out_channels, oh, ow]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FCLayerSpec {
    pub in_features: usize,
    pub out_features: usize,
    /// Length of the sub-vectors signatures are computed over. Inputs whose
    /// width is not a multiple are zero-padded on the right.
    #[cfg_attr(feature = "serde", serde(default = "default_block_len"))]
    pub block_vector_len: usize,
}

#[cfg(feature = "serde")]
fn default_block_len() -> usize {
    9
}

impl FCLayerSpec {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self { in_features, out_features, block_vector_len: 9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 || self.block_vector_len == 0 {
            return Err(config_err!("FC extents and block length must be positive"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.in_features.div_ceil(self.block_vector_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AttentionSpec {
    pub seq_len: usize,
    pub dim: usize,
}

/// Sequential `f64` dot product of two equally long `f32` slices.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

fn channel_of<'a>(input: &'a Tensor, spec: &ConvLayerSpec) -> Result<&'a [f32]> {
    let (h, w) = spec.input;
    match input.shape() {
        [hh, ww] | [1, hh, ww] if (*hh, *ww) == (h, w) => Ok(input.data()),
        s => Err(shape_err!("expected a single {}x{} channel, got {:?}", h, w, s)),
    }
}

/// Windows of one channel in raster order of output positions, each flattened
/// row-major to `k1*k2` values (zeros where the window overlaps the padding).
pub fn extract_input_vectors(input: &Tensor, spec: &ConvLayerSpec) -> Result<Vec<Vec<f32>>> {
    spec.validate()?;
    let chan = channel_of(input, spec)?;
    let area = spec.kernel_area();
    let flat = extract_windows(chan, spec);
    Ok(flat.chunks_exact(area).map(|c| c.to_vec()).collect())
}

/// Same as [`extract_input_vectors`] on a raw channel slice, packed contiguously
/// (`positions * k1 * k2` values).
pub(crate) fn extract_windows(chan: &[f32], spec: &ConvLayerSpec) -> Vec<f32> {
    let (h, w) = spec.input;
    let (k1, k2) = spec.kernel;
    let (oh, ow) = spec.output_dims();
    let p = spec.padding as isize;
    let s = spec.stride as isize;
    let mut out = Vec::with_capacity(oh * ow * k1 * k2);
    for oy in 0..oh as isize {
        for ox in 0..ow as isize {
            for m in 0..k1 as isize {
                let y = oy * s + m - p;
                for n in 0..k2 as isize {
                    let x = ox * s + n - p;
                    let v = if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        chan[y as usize * w + x as usize]
                    } else {
                        0.0
                    };
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Gradient vectors for the input-gradient convolution: for every input
/// position `(i, j)` of `spec`, the `k1*k2` window of the zero-padded (and, for
/// stride > 1, zero-dilated) delta map in flipped orientation. Element
/// `(m', n')` holds `delta[(i+p-m)/s][(j+p-n)/s]` with `m = k1-1-m'`,
/// `n = k2-1-n'`, or zero where that index is fractional or out of range.
/// Dotting with [`flipped_filter`] yields the correlation term of the input
/// gradient.
pub(crate) fn extract_gradient_windows(delta_chan: &[f32], spec: &ConvLayerSpec) -> Vec<f32> {
    let (h, w) = spec.input;
    let (k1, k2) = spec.kernel;
    let (oh, ow) = spec.output_dims();
    let p = spec.padding as isize;
    let s = spec.stride as isize;
    let mut out = Vec::with_capacity(h * w * k1 * k2);
    let tap = |pos: isize, k: isize, extent: usize| -> Option<usize> {
        let t = pos + p - k;
        if t < 0 || t % s != 0 {
            return None;
        }
        let q = (t / s) as usize;
        (q < extent).then_some(q)
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            for mf in 0..k1 as isize {
                let m = k1 as isize - 1 - mf;
                let row = tap(i, m, oh);
                for nf in 0..k2 as isize {
                    let n = k2 as isize - 1 - nf;
                    let v = match (row, tap(j, n, ow)) {
                        (Some(y), Some(x)) => delta_chan[y * ow + x],
                        _ => 0.0,
                    };
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Filter `w[f][c]` rotated by 180 degrees, flattened row-major.
pub(crate) fn flipped_filter(weights: &Tensor, spec: &ConvLayerSpec, f: usize, c: usize) -> Vec<f32> {
    let area = spec.kernel_area();
    let base = (f * spec.in_channels + c) * area;
    let mut v = weights.data()[base..base + area].to_vec();
    v.reverse();
    v
}

pub(crate) fn filter_slice<'a>(weights: &'a Tensor, spec: &ConvLayerSpec, f: usize, c: usize) -> &'a [f32] {
    let area = spec.kernel_area();
    let base = (f * spec.in_channels + c) * area;
    &weights.data()[base..base + area]
}

pub(crate) fn check_shape(t: &Tensor, want: &[usize], what: &str) -> Result<()> {
    if t.shape() != want {
        return Err(shape_err!("{} has shape {:?}, expected {:?}", what, t.shape(), want));
    }
    Ok(())
}

/// Convolution before the activation: `f64` sums per channel, channels added in
/// order, rounded to `f32`.
pub fn conv2d_preactivation(input: &Tensor, weights: &Tensor, spec: &ConvLayerSpec) -> Result<Tensor> {
    spec.validate()?;
    check_shape(input, &spec.input_shape(), "conv input")?;
    check_shape(weights, &spec.weight_shape(), "conv weights")?;
    let positions = spec.output_positions();
    let area = spec.kernel_area();
    let mut acc = vec![0.0f64; spec.out_channels * positions];
    for c in 0..spec.in_channels {
        let windows = extract_windows(input.slab(c), spec);
        for f in 0..spec.out_channels {
            let filt = filter_slice(weights, spec, f, c);
            let row = &mut acc[f * positions..(f + 1) * positions];
            for (slot, win) in row.iter_mut().zip(windows.chunks_exact(area)) {
                *slot += dot_f64(win, filt);
            }
        }
    }
    Ok(Tensor::from_parts(spec.output_shape(), acc.into_iter().map(|v| v as f32).collect()))
}

/// Cross-correlation (no kernel flip) summed over input channels, activation
/// applied.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, spec: &ConvLayerSpec) -> Result<Tensor> {
    let mut pre = conv2d_preactivation(input, weights, spec)?;
    if spec.activation != Activation::Identity {
        pre.data.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
    }
    Ok(pre)
}

/// dE/dw for every weight: `sum_{i,j} delta[f][i][j] * x[c][i*s+m-p][j*s+n-p]`.
pub fn conv2d_weight_grad(delta: &Tensor, out_prev: &Tensor, spec: &ConvLayerSpec) -> Result<Tensor> {
    spec.validate()?;
    check_shape(delta, &spec.output_shape(), "delta")?;
    check_shape(out_prev, &spec.input_shape(), "previous-layer output")?;
    let positions = spec.output_positions();
    let area = spec.kernel_area();
    let mut grad = vec![0.0f32; spec.out_channels * spec.in_channels * area];
    for c in 0..spec.in_channels {
        let windows = extract_windows(out_prev.slab(c), spec);
        for f in 0..spec.out_channels {
            let d = &delta.slab(f)[..positions];
            let mut acc = vec![0.0f64; area];
            for (&dv, win) in d.iter().zip(windows.chunks_exact(area)) {
                if dv == 0.0 {
                    continue;
                }
                for (a, &x) in acc.iter_mut().zip(win) {
                    *a += dv as f64 * x as f64;
                }
            }
            let base = (f * spec.in_channels + c) * area;
            for (g, a) in grad[base..base + area].iter_mut().zip(acc) {
                *g = a as f32;
            }
        }
    }
    Ok(Tensor::from_parts(spec.weight_shape(), grad))
}

/// dE/dx for the input of the layer described by `spec`, multiplied by
/// `prev_activation'(act_input)`. `act_input` is the pre-activation of the
/// previous layer (for ReLU its post-activation output gives the same mask).
pub fn conv2d_input_grad(
    delta_next: &Tensor,
    weights_next: &Tensor,
    act_input: &Tensor,
    spec: &ConvLayerSpec,
    prev_activation: Activation,
) -> Result<Tensor> {
    spec.validate()?;
    check_shape(delta_next, &spec.output_shape(), "delta")?;
    check_shape(weights_next, &spec.weight_shape(), "weights")?;
    check_shape(act_input, &spec.input_shape(), "activation input")?;
    let (h, w) = spec.input;
    let positions = h * w;
    let area = spec.kernel_area();
    let mut acc = vec![0.0f64; spec.in_channels * positions];
    for f in 0..spec.out_channels {
        let windows = extract_gradient_windows(delta_next.slab(f), spec);
        for c in 0..spec.in_channels {
            let filt = flipped_filter(weights_next, spec, f, c);
            let row = &mut acc[c * positions..(c + 1) * positions];
            for (slot, win) in row.iter_mut().zip(windows.chunks_exact(area)) {
                *slot += dot_f64(win, &filt);
            }
        }
    }
    let data = acc
        .into_iter()
        .zip(act_input.data())
        .map(|(g, &x)| g as f32 * prev_activation.derivative(x))
        .collect();
    Ok(Tensor::from_parts(spec.input_shape(), data))
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err!("{} must be 2-D, got {:?}", what, s)),
    }
}

/// `inputs[batch, in] x weights[in, out]`, sequential `f64` accumulation.
pub fn fc_forward(inputs: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (batch, inf) = matrix_dims(inputs, "FC inputs")?;
    let (win, outf) = matrix_dims(weights, "FC weights")?;
    if inf != win {
        return Err(shape_err!("FC inputs have {} features, weights expect {}", inf, win));
    }
    let wd = weights.data();
    let mut out = Vec::with_capacity(batch * outf);
    for r in 0..batch {
        let x = inputs.slab(r);
        for j in 0..outf {
            let mut acc = 0.0f64;
            for (i, &xv) in x.iter().enumerate() {
                acc += xv as f64 * wd[i * outf + j] as f64;
            }
            out.push(acc as f32);
        }
    }
    Ok(Tensor::from_parts(vec![batch, outf], out))
}

/// Like [`fc_forward`] but each output sums per-block partials (blocks of
/// `block_len` consecutive input features, each partial accumulated first).
/// This is the accumulation order of the block-wise reuse path.
pub fn fc_forward_blocked(inputs: &Tensor, weights: &Tensor, block_len: usize) -> Result<Tensor> {
    let (batch, inf) = matrix_dims(inputs, "FC inputs")?;
    let (win, outf) = matrix_dims(weights, "FC weights")?;
    if inf != win {
        return Err(shape_err!("FC inputs have {} features, weights expect {}", inf, win));
    }
    if block_len == 0 {
        return Err(config_err!("block length must be positive"));
    }
    let wd = weights.data();
    let mut out = Vec::with_capacity(batch * outf);
    for r in 0..batch {
        let x = inputs.slab(r);
        for j in 0..outf {
            let mut acc = 0.0f64;
            for start in (0..inf).step_by(block_len) {
                let end = (start + block_len).min(inf);
                let mut part = 0.0f64;
                for i in start..end {
                    part += x[i] as f64 * wd[i * outf + j] as f64;
                }
                acc += part;
            }
            out.push(acc as f32);
        }
    }
    Ok(Tensor::from_parts(vec![batch, outf], out))
}

pub fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix_dims(t, "matrix")?;
    let d = t.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(d[i * c + j]);
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// `inputs^T x delta`: gradient of the FC weights.
pub fn fc_weight_grad(inputs: &Tensor, delta: &Tensor) -> Result<Tensor> {
    fc_forward(&transpose(inputs)?, delta)
}

/// `delta x weights^T`: gradient of the FC inputs.
pub fn fc_input_grad(delta: &Tensor, weights: &Tensor) -> Result<Tensor> {
    fc_forward(delta, &transpose(weights)?)
}

/// Non-parametric attention without scaling or softmax:
/// `W = X X^T` (rounded to `f32`), then `Y = W X`.
pub fn attention_forward(x: &Tensor) -> Result<Tensor> {
    matrix_dims(x, "attention input")?;
    let xt = transpose(x)?;
    let w = fc_forward(x, &xt)?;
    fc_forward(&w, x)
}

/// Block-accumulated variant of [`attention_forward`], matching the reuse path.
pub fn attention_forward_blocked(x: &Tensor, block_len: usize) -> Result<Tensor> {
    matrix_dims(x, "attention input")?;
    let xt = transpose(x)?;
    let w = fc_forward_blocked(x, &xt, block_len)?;
    fc_forward_blocked(&w, x, block_len)
}

/// dE/dX of [`attention_forward`] given dE/dY.
///
/// With `W = X X^T` symmetric: `dX = W dY + (dW + dW^T) X` where `dW = dY X^T`.
pub fn attention_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (t, k) = matrix_dims(x, "attention input")?;
    check_shape(dy, &[t, k], "attention output gradient")?;
    let xt = transpose(x)?;
    let w = fc_forward(x, &xt)?;
    let dw = fc_forward(dy, &xt)?;
    let dwt = transpose(&dw)?;
    let sym: Vec<f32> = dw.data().iter().zip(dwt.data()).map(|(a, b)| a + b).collect();
    let sym = Tensor::from_parts(vec![t, t], sym);
    let a = fc_forward(&w, dy)?;
    let b = fc_forward(&sym, x)?;
    let data = a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect();
    Ok(Tensor::from_parts(vec![t, k], data))
}
