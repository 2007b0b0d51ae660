//! Desk-scale SGD training with and without reuse.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapt::{analytic_fc_baseline_cycles, AdaptConfig, AdaptState};
use crate::dataflow::{
    baseline_backward, simulate_backward, simulate_fc, simulate_forward, simulate_without_detection, CycleReport,
    Dataflow, PEArrayConfig,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::mcache::{HitState, Hitmap, MCache, MCacheConfig};
use crate::reuse::{
    backward_conv_with_reuse, forward_attention_with_reuse, forward_conv_with_reuse, forward_fc_with_reuse,
    ConvBackwardArgs, FcOptions, ReuseStats, StoredLayer,
};
use crate::rpq::ProjectionMatrix;
use crate::tensor::{
    attention_backward, attention_forward, conv2d_forward, conv2d_input_grad, conv2d_weight_grad, fc_forward,
    fc_input_grad, fc_weight_grad, Activation, AttentionSpec, ConvLayerSpec, FCLayerSpec, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    Fc(FCLayerSpec),
    /// Treats the `[F, H, W]` map before it as `F` vectors of length `H*W`.
    Attention(AttentionSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Loss {
    Mse,
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelSpec {
    /// `[C, H, W]` of one sample.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// Two 3x3 same-padded ReLU convolutions of `filters` maps and a linear
    /// classifier head.
    pub fn desk_cnn(height: usize, width: usize, classes: usize, filters: usize) -> Self {
        let c1 = ConvLayerSpec {
            in_channels: 1,
            out_channels: filters,
            kernel: (3, 3),
            input: (height, width),
            stride: 1,
            padding: 1,
            activation: Activation::ReLU,
        };
        let c2 = ConvLayerSpec { in_channels: filters, ..c1 };
        Self {
            input: (1, height, width),
            classes,
            layers: vec![
                LayerSpec::Conv(c1),
                LayerSpec::Conv(c2),
                LayerSpec::Fc(FCLayerSpec::new(filters * height * width, classes)),
            ],
            loss: Loss::CrossEntropy,
            learning_rate: 0.02,
            batch_size: 10,
            epochs: 5,
            seed: 1,
        }
    }

    /// Checks that shapes compose: per-sample layers (conv, attention) first,
    /// then FC layers ending in `classes` outputs.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.batch_size == 0 || self.classes == 0 {
            return Err(config_err!("model needs layers, a positive batch size and classes"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning rate must be positive"));
        }
        let mut shape = vec![self.input.0, self.input.1, self.input.2];
        let mut in_fc = false;
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerSpec::Conv(c) => {
                    c.validate()?;
                    if in_fc || c.input_shape() != shape {
                        return Err(config_err!("layer {}: conv expects {:?}, gets {:?}", i, c.input_shape(), shape));
                    }
                    shape = c.output_shape();
                }
                LayerSpec::Attention(a) => {
                    let (seq, dim) = (shape[0], shape[1..].iter().product::<usize>());
                    if in_fc || (a.seq_len, a.dim) != (seq, dim) {
                        return Err(config_err!("layer {}: attention expects {}x{}, gets {}x{}", i, a.seq_len, a.dim, seq, dim));
                    }
                }
                LayerSpec::Fc(f) => {
                    f.validate()?;
                    let width: usize = shape.iter().product();
                    if f.in_features != width {
                        return Err(config_err!("layer {}: FC expects {} inputs, gets {}", i, f.in_features, width));
                    }
                    in_fc = true;
                    shape = vec![f.out_features];
                }
            }
        }
        if !in_fc || shape != [self.classes] {
            return Err(config_err!("model must end in an FC layer with {} outputs", self.classes));
        }
        Ok(())
    }

    fn sample_stage(&self) -> usize {
        self.layers.iter().take_while(|l| !matches!(l, LayerSpec::Fc(_))).count()
    }
}

/// Images `[count, C, H, W]` and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(shape: (usize, usize, usize), classes: usize, images: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let (c, h, w) = shape;
        let per = c * h * w;
        if per == 0 || images.len() != per * labels.len() {
            return Err(shape_err!("{} values for {} images of {}x{}x{}", images.len(), labels.len(), c, h, w));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(shape_err!("label {} outside {} classes", l, classes));
        }
        if let Some(i) = images.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { channels: c, height: h, width: w, classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> Tensor {
        let n = self.sample_len();
        Tensor::new(vec![self.channels, self.height, self.width], self.images[i * n..(i + 1) * n].to_vec())
            .expect("validated at construction")
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let k = self.sample_len();
        let part = |imgs: &[f32], labels: &[u32]| Dataset {
            images: imgs.to_vec(),
            labels: labels.to_vec(),
            ..self.clone_meta()
        };
        (part(&self.images[..n * k], &self.labels[..n]), part(&self.images[n * k..], &self.labels[n..]))
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SyntheticConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Side of the square dictionary patches.
    pub patch: usize,
    pub dictionary: usize,
    /// Side, in tiles, of the square regions that repeat one patch.
    pub region: usize,
    /// Probability that a region of the class layout is swapped for a random patch.
    pub variation: f32,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { count: 1000, height: 48, width: 48, classes: 4, patch: 3, dictionary: 6, region: 8, variation: 0.25, noise: 0.01, seed: 7 }
    }
}

/// Single-channel images tiled from a small patch dictionary. Each class has
/// a fixed layout of uniform regions; samples swap regions at random and add
/// noise, so most windows repeat across and within images.
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    let p = cfg.patch * cfg.region;
    if p == 0 || !cfg.height.is_multiple_of(p) || !cfg.width.is_multiple_of(p) || cfg.dictionary == 0 || cfg.classes == 0 {
        return Err(config_err!("image size must be a multiple of patch * region"));
    }
    let tile = cfg.patch;
    if !(0.0..=1.0).contains(&cfg.variation) || !(cfg.noise >= 0.0) {
        return Err(config_err!("variation must be in [0, 1] and noise non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dict: Vec<Vec<f32>> = (0..cfg.dictionary)
        .map(|_| (0..tile * tile).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let (th, tw) = (cfg.height / p, cfg.width / p);
    let layouts: Vec<Vec<usize>> = (0..cfg.classes)
        .map(|_| (0..th * tw).map(|_| rng.random_range(0..cfg.dictionary)).collect())
        .collect();
    let noise = Normal::new(0.0f32, cfg.noise).map_err(|e| config_err!("noise: {}", e))?;
    let mut images = Vec::with_capacity(cfg.count * cfg.height * cfg.width);
    let mut labels = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let class = rng.random_range(0..cfg.classes);
        let tiles: Vec<usize> = layouts[class]
            .iter()
            .map(|&t| if rng.random::<f32>() < cfg.variation { rng.random_range(0..cfg.dictionary) } else { t })
            .collect();
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let d = tiles[(y / p) * tw + x / p];
                let v = dict[d][(y % tile) * tile + x % tile];
                images.push(if cfg.noise > 0.0 { v + noise.sample(&mut rng) } else { v });
            }
        }
        labels.push(class as u32);
    }
    Dataset::new((1, cfg.height, cfg.width), cfg.classes, images, labels)
}

/// Parameters per layer (`None` for attention).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub layers: Vec<Option<Tensor>>,
}

/// Uniform He initialisation, seeded.
pub fn init_weights(model: &ModelSpec) -> Result<Weights> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let (shape, fan_in) = match l {
            LayerSpec::Conv(c) => (c.weight_shape(), c.in_channels * c.kernel_area()),
            LayerSpec::Fc(f) => (vec![f.in_features, f.out_features], f.in_features),
            LayerSpec::Attention(_) => {
                layers.push(None);
                continue;
            }
        };
        let bound = libm::sqrtf(6.0 / fan_in as f32);
        layers.push(Some(Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))?));
    }
    Ok(Weights { layers })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainOptions {
    pub mercury_on: bool,
    /// Keep the reuse path but never detect similarity.
    pub force_detection_off: bool,
    pub adapt: AdaptConfig,
    pub pe: PEArrayConfig,
    pub cache: MCacheConfig,
    pub dataflow: Dataflow,
    pub asynchronous: bool,
    pub fc: FcOptions,
    pub projection_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            mercury_on: true,
            force_detection_off: false,
            adapt: AdaptConfig::default(),
            pe: PEArrayConfig::default(),
            cache: MCacheConfig::default(),
            dataflow: Dataflow::Rs,
            asynchronous: false,
            fc: FcOptions::default(),
            projection_seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub mercury_cycles: u64,
    pub baseline_cycles: u64,
    pub reuse_fraction: f64,
    pub signature_bits: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptTraceRow {
    pub iteration: usize,
    pub signature_bits: usize,
    pub detection_on: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub epochs: Vec<EpochRecord>,
    pub trace: Vec<AdaptTraceRow>,
    pub weights: Weights,
    pub stats: ReuseStats,
    pub cycles: CycleReport,
    /// Per-iteration mean batch loss.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochComparison {
    pub epoch: usize,
    pub baseline_loss: f64,
    pub mercury_loss: f64,
    pub baseline_acc: f64,
    pub mercury_acc: f64,
    pub mercury_cycles: u64,
    pub baseline_cycles: u64,
    pub reuse_fraction: f64,
}

/// Per-epoch records of the two arms side by side.
pub fn compare(baseline: &ArmResult, mercury: &ArmResult) -> Vec<EpochComparison> {
    baseline
        .epochs
        .iter()
        .zip(&mercury.epochs)
        .map(|(b, m)| EpochComparison {
            epoch: b.epoch,
            baseline_loss: b.train_loss,
            mercury_loss: m.train_loss,
            baseline_acc: b.val_accuracy,
            mercury_acc: m.val_accuracy,
            mercury_cycles: m.mercury_cycles,
            baseline_cycles: m.baseline_cycles,
            reuse_fraction: m.reuse_fraction,
        })
        .collect()
}

fn weight(w: &Weights, l: usize) -> &Tensor {
    w.layers[l].as_ref().expect("parametric layer")
}

fn as_sequence(t: &Tensor) -> Result<Tensor> {
    let seq = t.shape()[0];
    Tensor::new(vec![seq, t.len() / seq], t.data().to_vec())
}

/// Reference forward pass of one batch; returns logits `[batch, classes]`.
fn reference_logits(model: &ModelSpec, w: &Weights, images: &[Tensor]) -> Result<Tensor> {
    let stage = model.sample_stage();
    let mut rows = Vec::new();
    for img in images {
        let mut x = img.clone();
        for (l, spec) in model.layers[..stage].iter().enumerate() {
            x = match spec {
                LayerSpec::Conv(c) => conv2d_forward(&x, weight(w, l), c)?,
                LayerSpec::Attention(_) => {
                    let shape = x.shape().to_vec();
                    attention_forward(&as_sequence(&x)?)?.reshape(shape)?
                }
                LayerSpec::Fc(_) => unreachable!(),
            };
        }
        rows.extend_from_slice(x.data());
    }
    let mut h = Tensor::new(vec![images.len(), rows.len() / images.len()], rows)?;
    for (l, _) in model.layers.iter().enumerate().skip(stage) {
        h = fc_forward(&h, weight(w, l))?;
    }
    Ok(h)
}

/// Mean loss and gradient w.r.t. the logits.
fn loss_and_grad(loss: Loss, logits: &Tensor, labels: &[u32]) -> (f64, Tensor) {
    let batch = labels.len();
    let k = logits.len() / batch;
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let z = logits.slab(r);
        let g = &mut grad[r * k..(r + 1) * k];
        match loss {
            Loss::CrossEntropy => {
                let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let exps: Vec<f64> = z.iter().map(|&v| libm::exp(v as f64 - m)).collect();
                let sum: f64 = exps.iter().sum();
                total += libm::log(sum) + m - z[label as usize] as f64;
                for (j, e) in exps.iter().enumerate() {
                    let t = if j == label as usize { 1.0 } else { 0.0 };
                    g[j] = ((e / sum - t) / batch as f64) as f32;
                }
            }
            Loss::Mse => {
                for (j, &v) in z.iter().enumerate() {
                    let d = v as f64 - if j == label as usize { 1.0 } else { 0.0 };
                    total += 0.5 * d * d;
                    g[j] = (d / batch as f64) as f32;
                }
            }
        }
    }
    (total / batch as f64, Tensor::new(logits.shape().to_vec(), grad).expect("same shape"))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean loss with the reference (reuse-free) forward pass.
pub fn evaluate(model: &ModelSpec, weights: &Weights, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let chunk = model.batch_size.max(1);
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let images: Vec<Tensor> = (start..end).map(|i| data.image(i)).collect();
        let labels = &data.labels[start..end];
        let logits = reference_logits(model, weights, &images)?;
        let (l, _) = loss_and_grad(model.loss, &logits, labels);
        loss += l * labels.len() as f64;
        correct += labels.iter().enumerate().filter(|(r, &y)| argmax(logits.slab(*r)) == y as usize).count();
    }
    Ok((correct as f64 / data.len() as f64, loss / data.len() as f64))
}

/// One sample's per-sample-stage record.
struct SampleRecord {
    /// Input of each per-sample layer, then the stage output.
    acts: Vec<Tensor>,
    /// Forward hitmaps and stored signatures per conv layer (reuse on).
    conv: Vec<Option<(Vec<Hitmap>, Option<StoredLayer>)>>,
}

struct Arm<'a> {
    model: &'a ModelSpec,
    opts: &'a TrainOptions,
    adapt: AdaptState,
    projections: Vec<Option<ProjectionMatrix>>,
    cache: MCache,
    stats: ReuseStats,
}

impl Arm<'_> {
    fn detection(&self, l: usize) -> bool {
        self.opts.mercury_on && !self.opts.force_detection_off && self.adapt.detection_on(l)
    }

    fn projection(&mut self, l: usize, m: usize) -> Result<ProjectionMatrix> {
        let n = self.adapt.current_n();
        let seed = self.opts.projection_seed.wrapping_add(l as u64);
        let p = match self.projections[l].take() {
            Some(p) if p.cols() == n && p.rows() == m => p,
            _ => ProjectionMatrix::new(seed, m, n)?,
        };
        self.projections[l] = Some(p.clone());
        Ok(p)
    }

    fn forward_sample(&mut self, w: &Weights, img: &Tensor) -> Result<SampleRecord> {
        let stage = self.model.sample_stage();
        let mut acts = vec![img.clone()];
        let mut conv = Vec::with_capacity(stage);
        for l in 0..stage {
            let x = acts.last().expect("input");
            let y = match &self.model.layers[l] {
                LayerSpec::Conv(c) => {
                    if self.opts.mercury_on {
                        let on = self.detection(l);
                        let p = self.projection(l, c.kernel_area())?;
                        let r = forward_conv_with_reuse(x, weight(w, l), c, &p, &mut self.cache, on)?;
                        self.stats += r.stats;
                        conv.push(Some((r.hitmaps, r.stored)));
                        r.output
                    } else {
                        conv.push(None);
                        conv2d_forward(x, weight(w, l), c)?
                    }
                }
                LayerSpec::Attention(a) => {
                    conv.push(None);
                    let shape = x.shape().to_vec();
                    let seq = as_sequence(x)?;
                    let y = if self.opts.mercury_on && self.detection(l) {
                        let block = a.dim.min(9);
                        let p = self.projection(l, block)?;
                        let r = forward_attention_with_reuse(&seq, block, &p, &self.opts.cache, self.opts.fc, true)?;
                        self.stats += r.stats();
                        r.output
                    } else {
                        attention_forward(&seq)?
                    };
                    y.reshape(shape)?
                }
                LayerSpec::Fc(_) => unreachable!(),
            };
            acts.push(y);
        }
        Ok(SampleRecord { acts, conv })
    }

    /// Backward through the per-sample layers; accumulates weight gradients
    /// and returns (reuse-side, baseline) backward cycles per layer.
    fn backward_sample(
        &mut self,
        w: &Weights,
        rec: &SampleRecord,
        grad_out: Tensor,
        grads: &mut [Option<Vec<f32>>],
        cycles: &mut [(CycleReport, u64)],
    ) -> Result<()> {
        let stage = self.model.sample_stage();
        let mut g = grad_out;
        for l in (0..stage).rev() {
            let x = &rec.acts[l];
            let y = &rec.acts[l + 1];
            match &self.model.layers[l] {
                LayerSpec::Conv(c) => {
                    let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * c.activation.derivative(yv)).collect();
                    let delta = Tensor::new(y.shape().to_vec(), data)?;
                    let (wg, ig, report, base) = if self.opts.mercury_on {
                        let on = self.detection(l);
                        let p = self.projection(l, c.kernel_area())?;
                        let own = rec.conv[l].as_ref().and_then(|(_, s)| s.as_ref());
                        let next = rec.conv.get(l + 1).and_then(|r| r.as_ref()).and_then(|(_, s)| s.as_ref());
                        let args = ConvBackwardArgs {
                            delta: &delta,
                            weights: weight(w, l),
                            layer_input: x,
                            act_input: x,
                            prev_activation: Activation::Identity,
                            spec: c,
                            own,
                            next,
                            projection: &p,
                            detection_on: on,
                        };
                        let b = backward_conv_with_reuse(args, &mut self.cache)?;
                        let next_kernel = if b.reused_stored { Some(c.kernel) } else { None };
                        let mut rep = simulate_backward(
                            c,
                            next_kernel,
                            &b.input_grad_hitmaps,
                            &b.weight_grad_hitmaps,
                            self.adapt.current_n(),
                            self.opts.asynchronous,
                            &self.opts.pe,
                        )?;
                        let mut base = baseline_backward(c, &self.opts.pe)?;
                        if !on {
                            rep = base;
                        }
                        if l == 0 {
                            rep.input_grad = CycleReport::default();
                            base.input_grad = CycleReport::default();
                        } else {
                            self.stats += b.input_grad_stats;
                        }
                        self.stats += b.weight_grad_stats;
                        (b.weight_grad, b.input_grad, rep.total(), base.total().total_cycles)
                    } else {
                        let wg = conv2d_weight_grad(&delta, x, c)?;
                        let ig = conv2d_input_grad(&delta, weight(w, l), x, c, Activation::Identity)?;
                        let mut base = baseline_backward(c, &self.opts.pe)?;
                        if l == 0 {
                            base.input_grad = CycleReport::default();
                        }
                        let t = base.total();
                        (wg, ig, t, t.total_cycles)
                    };
                    let acc = grads[l].get_or_insert_with(|| vec![0.0; wg.len()]);
                    acc.iter_mut().zip(wg.data()).for_each(|(a, &v)| *a += v);
                    cycles[l].0 = cycles[l].0 + report;
                    cycles[l].1 += base;
                    g = ig;
                }
                LayerSpec::Attention(_) => {
                    let shape = x.shape().to_vec();
                    g = attention_backward(&as_sequence(x)?, &as_sequence(&g)?)?.reshape(shape)?;
                }
                LayerSpec::Fc(_) => unreachable!(),
            }
        }
        Ok(())
    }

    fn forward_cycles(&self, l: usize, hitmaps: &[Hitmap]) -> Result<(CycleReport, u64)> {
        let LayerSpec::Conv(c) = &self.model.layers[l] else { unreachable!() };
        let n = if self.detection(l) { self.adapt.current_n() } else { 0 };
        let r = if self.detection(l) {
            simulate_forward(c, hitmaps, n, self.opts.dataflow, self.opts.asynchronous, &self.opts.pe)?
        } else {
            simulate_without_detection(c, self.opts.dataflow, self.opts.asynchronous, &self.opts.pe)?
        };
        Ok((r, r.baseline_cycles))
    }

    fn step(&mut self, w: &mut Weights, images: &[Tensor], labels: &[u32]) -> Result<(f64, CycleReport, u64)> {
        let model = self.model;
        let layers = model.layers.len();
        let stage = model.sample_stage();
        let mut cycles = vec![(CycleReport::default(), 0u64); layers];
        let mut recs = Vec::with_capacity(images.len());
        let mut rows = Vec::new();
        for img in images {
            let rec = self.forward_sample(w, img)?;
            if self.opts.mercury_on {
                for l in 0..stage {
                    if let Some(Some((hm, _))) = rec.conv.get(l) {
                        let (r, b) = self.forward_cycles(l, hm)?;
                        cycles[l].0 = cycles[l].0 + r;
                        cycles[l].1 += b;
                    }
                }
            }
            rows.extend_from_slice(rec.acts.last().expect("output").data());
            recs.push(rec);
        }
        if !self.opts.mercury_on {
            for (l, spec) in model.layers[..stage].iter().enumerate() {
                if let LayerSpec::Conv(c) = spec {
                    let mnu: Vec<Hitmap> = (0..c.in_channels).map(|_| Hitmap::uniform(c.output_positions(), HitState::Mnu)).collect();
                    let r = simulate_forward(c, &mnu, 0, self.opts.dataflow, false, &self.opts.pe)?;
                    let b = r.baseline_cycles * images.len() as u64;
                    let base = CycleReport { compute_cycles: b, baseline_cycles: b, ..Default::default() };
                    cycles[l].0 = cycles[l].0 + base;
                    cycles[l].1 += b;
                }
            }
        }
        let batch = images.len();
        let mut hs = vec![Tensor::new(vec![batch, rows.len() / batch], rows)?];
        for l in stage..layers {
            let LayerSpec::Fc(f) = &model.layers[l] else { unreachable!() };
            let x = hs.last().expect("input");
            let base = 3 * analytic_fc_baseline_cycles(f, batch, &self.opts.pe)?;
            let y = if self.opts.mercury_on && self.detection(l) {
                let p = self.projection(l, f.block_vector_len)?;
                let r = forward_fc_with_reuse(x, weight(w, l), f, &p, &self.opts.cache, self.opts.fc, true)?;
                self.stats += r.stats;
                let t = simulate_fc(f, &r.schedule, self.adapt.current_n(), &self.opts.pe)?;
                // the two backward matmuls run without reuse
                let back = 2 * analytic_fc_baseline_cycles(f, batch, &self.opts.pe)?;
                cycles[l].0 = cycles[l].0 + t + CycleReport { compute_cycles: back, baseline_cycles: back, ..Default::default() };
                r.output
            } else {
                if self.opts.mercury_on {
                    let demand = (batch * f.blocks() * f.out_features) as u64;
                    self.stats += ReuseStats { executed: demand, ..Default::default() };
                }
                cycles[l].0 = cycles[l].0 + CycleReport { compute_cycles: base, baseline_cycles: base, ..Default::default() };
                fc_forward(x, weight(w, l))?
            };
            cycles[l].1 += base;
            hs.push(y);
        }
        let (loss, mut g) = loss_and_grad(model.loss, hs.last().expect("logits"), labels);
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; layers];
        for l in (stage..layers).rev() {
            let x = &hs[l - stage];
            grads[l] = Some(fc_weight_grad(x, &g)?.into_data());
            g = fc_input_grad(&g, weight(w, l))?;
        }
        for (r, rec) in recs.iter().enumerate() {
            let out = rec.acts.last().expect("output");
            let gr = Tensor::new(out.shape().to_vec(), g.slab(r).to_vec())?;
            self.backward_sample(w, rec, gr, &mut grads, &mut cycles)?;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: 0, iteration: 0, loss });
        }
        for (l, g) in grads.into_iter().enumerate() {
            if let (Some(g), Some(t)) = (g, w.layers[l].as_mut()) {
                let lr = model.learning_rate;
                let data: Vec<f32> = t.data().iter().zip(&g).map(|(&v, &d)| v - lr * d).collect();
                *t = Tensor::new(t.shape().to_vec(), data).map_err(|_| Error::Diverged { epoch: 0, iteration: 0, loss })?;
            }
        }
        let mut total = CycleReport::default();
        let mut base_total = 0;
        for (l, (rep, base)) in cycles.iter().enumerate() {
            if self.opts.mercury_on && self.detection(l) {
                self.adapt.observe_batch_costs(l, rep.total_cycles, *base);
            }
            total = total + *rep;
            base_total += base;
        }
        if self.opts.mercury_on {
            self.adapt.observe_loss(loss);
        }
        Ok((loss, total, base_total))
    }
}

/// Trains one arm. Both arms with the same model seed see the same
/// initial weights and the same sample order.
pub fn train(model: &ModelSpec, train_set: &Dataset, val_set: &Dataset, opts: &TrainOptions) -> Result<ArmResult> {
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if (train_set.channels, train_set.height, train_set.width) != model.input {
        return Err(shape_err!("dataset images do not match the model input {:?}", model.input));
    }
    let mut w = init_weights(model)?;
    let mut arm = Arm {
        model,
        opts,
        adapt: AdaptState::new(opts.adapt, model.layers.len())?,
        projections: vec![None; model.layers.len()],
        cache: MCache::new(opts.cache)?,
        stats: ReuseStats::default(),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0xD1CE);
    let mut epochs = Vec::with_capacity(model.epochs);
    let mut trace = Vec::new();
    let mut losses = Vec::new();
    let mut cycles = CycleReport::default();
    let mut iteration = 0;
    for epoch in 0..model.epochs {
        order.shuffle(&mut rng);
        let before = arm.stats;
        let (mut loss_sum, mut mercury, mut baseline) = (0.0f64, 0u64, 0u64);
        let mut batches = 0usize;
        for chunk in order.chunks(model.batch_size) {
            let images: Vec<Tensor> = chunk.iter().map(|&i| train_set.image(i)).collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, rep, base) = arm.step(&mut w, &images, &labels).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { epoch, iteration, loss },
                e => e,
            })?;
            loss_sum += loss;
            losses.push(loss);
            mercury += rep.total_cycles;
            baseline += base;
            cycles = cycles + rep;
            batches += 1;
            iteration += 1;
            trace.push(AdaptTraceRow {
                iteration,
                signature_bits: arm.adapt.current_n(),
                detection_on: (0..model.layers.len()).map(|l| arm.detection(l)).collect(),
            });
        }
        let (acc, val_loss) = if val_set.is_empty() { (0.0, 0.0) } else { evaluate(model, &w, val_set)? };
        let delta = ReuseStats {
            executed: arm.stats.executed - before.executed,
            reused: arm.stats.reused - before.reused,
            mnu_forced: arm.stats.mnu_forced - before.mnu_forced,
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_accuracy: acc,
            mercury_cycles: mercury,
            baseline_cycles: baseline,
            reuse_fraction: delta.reuse_fraction(),
            signature_bits: arm.adapt.current_n(),
        });
    }
    Ok(ArmResult { epochs, trace, weights: w, stats: arm.stats, cycles, losses })
}
