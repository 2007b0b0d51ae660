//! Numerically real layer execution with signature-driven reuse.
//!
//! A HIT takes the cached result without checking that the vectors are
//! really equal; signature equality is the only criterion.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use crate::dataflow::{FcRowEvent, FcSchedule};
use crate::error::{config_err, shape_err, Error, Result};
use crate::mcache::{ChannelStats, EntryId, HitState, Hitmap, MCache, MCacheConfig};
use crate::rpq::{signatures_of_packed, ProjectionMatrix, Signature, SignatureTable};
use crate::tensor::{
    check_shape, dot_f64, extract_gradient_windows, extract_windows, filter_slice, flipped_filter, transpose,
    Activation, ConvLayerSpec, FCLayerSpec, Tensor,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReuseStats {
    pub executed: u64,
    pub reused: u64,
    /// Rows that had to compute because they were reused in the previous block.
    pub mnu_forced: u64,
}

impl ReuseStats {
    pub fn demand(&self) -> u64 {
        self.executed + self.reused
    }

    pub fn reuse_fraction(&self) -> f64 {
        if self.demand() == 0 {
            0.0
        } else {
            self.reused as f64 / self.demand() as f64
        }
    }
}

impl Add for ReuseStats {
    type Output = ReuseStats;
    fn add(self, o: ReuseStats) -> ReuseStats {
        ReuseStats {
            executed: self.executed + o.executed,
            reused: self.reused + o.reused,
            mnu_forced: self.mnu_forced + o.mnu_forced,
        }
    }
}

impl AddAssign for ReuseStats {
    fn add_assign(&mut self, o: ReuseStats) {
        *self = *self + o;
    }
}

/// Signatures and hitmap of one channel pass.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StoredChannel {
    pub signatures: Vec<Signature>,
    pub hitmap: Hitmap,
}

/// What a layer's forward pass leaves for the backward pass.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StoredLayer {
    pub spec: ConvLayerSpec,
    pub bits: usize,
    pub channels: Vec<StoredChannel>,
}

impl StoredLayer {
    pub fn hitmaps(&self) -> Vec<Hitmap> {
        self.channels.iter().map(|c| c.hitmap.clone()).collect()
    }

    /// Whether this layer's input windows line up one to one with the
    /// gradient vectors of `prev` (the layer producing this layer's input).
    pub fn matches_gradient_grid_of(&self, prev: &ConvLayerSpec) -> bool {
        self.spec.kernel == prev.kernel
            && self.spec.output_dims() == prev.input
            && self.spec.in_channels == prev.out_channels
    }
}

/// Per-layer forward signatures, each consumable once per backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerSignatureStore {
    layers: BTreeMap<usize, StoredLayer>,
    consumed: BTreeMap<usize, bool>,
}

impl LayerSignatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, entry: StoredLayer) {
        self.layers.insert(layer, entry);
        self.consumed.insert(layer, false);
    }

    pub fn get(&self, layer: usize) -> Option<&StoredLayer> {
        self.layers.get(&layer)
    }

    /// Mark a layer's entry used by this backward pass; a second use is a
    /// logic error.
    pub fn consume(&mut self, layer: usize) -> Result<&StoredLayer> {
        let used = self.consumed.get_mut(&layer).ok_or(Error::MissingStore { layer })?;
        if *used {
            return Err(Error::Logic(alloc::format!("stored signatures of layer {} consumed twice", layer)));
        }
        *used = true;
        Ok(&self.layers[&layer])
    }

    /// Start a new backward pass over the same forward signatures.
    pub fn rearm(&mut self) {
        self.consumed.values_mut().for_each(|v| *v = false);
    }

    pub fn clear(&mut self) {
        self.layers.clear();
        self.consumed.clear();
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &StoredLayer)> {
        self.layers.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

fn check_projection(p: &ProjectionMatrix, m: usize) -> Result<()> {
    if p.rows() != m {
        return Err(shape_err!("projection has m = {}, vectors have {} values", p.rows(), m));
    }
    Ok(())
}

/// Signature phase of one channel: signatures into a fresh table, every
/// ordinal probed in raster order.
fn populate(cache: &mut MCache, packed: &[f32], p: &ProjectionMatrix) -> Result<(SignatureTable, Hitmap)> {
    let mut table = SignatureTable::from_signatures(signatures_of_packed(packed, p));
    let mut hitmap = Hitmap::new(table.len());
    cache.clear_cache();
    for i in 0..table.len() {
        cache.probe_and_update(i, &mut hitmap, &mut table)?;
    }
    Ok((table, hitmap))
}

/// Re-insert stored signatures into a cleared cache, recovering the entry ids
/// (the stored hitmap is reproduced exactly since probing is deterministic).
fn reload(cache: &mut MCache, stored: &StoredChannel) -> Result<SignatureTable> {
    let mut table = SignatureTable::from_signatures(stored.signatures.clone());
    let mut hitmap = Hitmap::new(table.len());
    cache.clear_cache();
    for i in 0..table.len() {
        cache.probe_and_update(i, &mut hitmap, &mut table)?;
    }
    if hitmap != stored.hitmap {
        return Err(Error::Logic("stored hitmap does not replay on this cache configuration".into()));
    }
    Ok(table)
}

/// One filter over one channel of vectors: `acc[i] += v_i . filt`, reusing
/// cached results for HITs. The caller invalidates VD bits afterwards.
fn filter_pass(
    cache: &mut MCache,
    table: &SignatureTable,
    hitmap: &Hitmap,
    packed: &[f32],
    filt: &[f32],
    acc: &mut [f64],
    stats: &mut ReuseStats,
) -> Result<()> {
    let m = filt.len();
    for (i, (slot, v)) in acc.iter_mut().zip(packed.chunks_exact(m)).enumerate() {
        let value = match hitmap.state(i) {
            HitState::Hit => {
                let e = table.entry(i).ok_or_else(|| Error::Logic(alloc::format!("HIT ordinal {} has no entry", i)))?;
                let r = cache
                    .read_result(e, 0)?
                    .ok_or_else(|| Error::Logic(alloc::format!("HIT ordinal {} read before its entry was filled", i)))?;
                stats.reused += 1;
                r[0]
            }
            HitState::Mau => {
                let d = dot_f64(v, filt);
                let e = table.entry(i).ok_or_else(|| Error::Logic(alloc::format!("MAU ordinal {} has no entry", i)))?;
                cache.write_result(e, 0, &[d])?;
                stats.executed += 1;
                d
            }
            HitState::Mnu => {
                stats.executed += 1;
                dot_f64(v, filt)
            }
        };
        *slot += value;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvForward {
    pub output: Tensor,
    pub stats: ReuseStats,
    /// One hitmap per input channel (all MNU when detection is off).
    pub hitmaps: Vec<Hitmap>,
    pub cache_stats: Vec<ChannelStats>,
    /// Signatures for the backward pass; `None` when detection is off.
    pub stored: Option<StoredLayer>,
}

/// Forward convolution with reuse. `p` must have `m = k1*k2`; its column
/// count is the current signature length. With `detection_on == false` the
/// layer runs exactly like the reference and reuses nothing.
pub fn forward_conv_with_reuse(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvLayerSpec,
    p: &ProjectionMatrix,
    cache: &mut MCache,
    detection_on: bool,
) -> Result<ConvForward> {
    spec.validate()?;
    check_shape(input, &spec.input_shape(), "conv input")?;
    check_shape(weights, &spec.weight_shape(), "conv weights")?;
    check_projection(p, spec.kernel_area())?;
    if cache.config().result_width != 1 {
        return Err(config_err!("conv reuse needs a cache with result_width 1"));
    }
    let positions = spec.output_positions();
    let mut acc = vec![0.0f64; spec.out_channels * positions];
    let mut stats = ReuseStats::default();
    let mut hitmaps = Vec::with_capacity(spec.in_channels);
    let mut cache_stats = Vec::new();
    let mut stored = Vec::new();
    for c in 0..spec.in_channels {
        let windows = extract_windows(input.slab(c), spec);
        if !detection_on {
            for f in 0..spec.out_channels {
                let filt = filter_slice(weights, spec, f, c);
                let row = &mut acc[f * positions..(f + 1) * positions];
                for (slot, win) in row.iter_mut().zip(windows.chunks_exact(spec.kernel_area())) {
                    *slot += dot_f64(win, filt);
                }
            }
            stats.executed += (spec.out_channels * positions) as u64;
            hitmaps.push(Hitmap::uniform(positions, HitState::Mnu));
            continue;
        }
        let (table, hitmap) = populate(cache, &windows, p)?;
        for f in 0..spec.out_channels {
            let filt = filter_slice(weights, spec, f, c);
            filter_pass(cache, &table, &hitmap, &windows, filt, &mut acc[f * positions..(f + 1) * positions], &mut stats)?;
            cache.invalidate_vd_all();
        }
        cache_stats.push(cache.stats());
        stored.push(StoredChannel { signatures: table.signatures().to_vec(), hitmap: hitmap.clone() });
        hitmaps.push(hitmap);
    }
    let data = acc.into_iter().map(|v| spec.activation.apply(v as f32)).collect();
    Ok(ConvForward {
        output: Tensor::new(spec.output_shape(), data)?,
        stats,
        hitmaps,
        cache_stats,
        stored: detection_on.then(|| StoredLayer { spec: *spec, bits: p.cols(), channels: stored }),
    })
}

/// Inputs of [`backward_conv_with_reuse`] besides the cache.
#[derive(Debug, Clone, Copy)]
pub struct ConvBackwardArgs<'a> {
    /// dE/d(pre-activation output) of this layer, `[F, oH, oW]`.
    pub delta: &'a Tensor,
    pub weights: &'a Tensor,
    /// The forward input of this layer.
    pub layer_input: &'a Tensor,
    /// Input of the previous activation (for ReLU its output works too).
    pub act_input: &'a Tensor,
    pub prev_activation: Activation,
    pub spec: &'a ConvLayerSpec,
    /// This layer's forward signatures (weight-gradient grouping).
    pub own: Option<&'a StoredLayer>,
    /// Forward signatures of the following layer, whose input is this
    /// layer's output.
    pub next: Option<&'a StoredLayer>,
    /// Projection used when gradient signatures must be regenerated.
    pub projection: &'a ProjectionMatrix,
    pub detection_on: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackward {
    pub weight_grad: Tensor,
    pub input_grad: Tensor,
    pub input_grad_stats: ReuseStats,
    pub weight_grad_stats: ReuseStats,
    /// One per delta channel, over the `H*W` gradient vectors.
    pub input_grad_hitmaps: Vec<Hitmap>,
    /// The forward hitmaps used to group the weight gradient.
    pub weight_grad_hitmaps: Vec<Hitmap>,
    /// Channels whose gradient signatures were recomputed.
    pub signature_regenerations: usize,
    /// Whether the following layer's stored hitmaps were reused.
    pub reused_stored: bool,
}

impl ConvBackward {
    pub fn stats(&self) -> ReuseStats {
        self.input_grad_stats + self.weight_grad_stats
    }
}

/// Backward convolution with reuse.
///
/// Input gradient: gradient vectors of each delta channel against the
/// flipped filters. If the following layer's stored signatures cover the
/// same window grid with the same kernel, they are reloaded; otherwise the
/// gradient vectors are hashed again (one regeneration per delta channel).
///
/// Weight gradient: forward input vectors sharing a cache entry are summed
/// once, `sum_i d_i x_i = (sum_{i in e} d_i) x_e`, so only MAU and MNU vectors
/// are multiplied. Because of this reassociation it matches the reference to
/// rounding, not bit for bit.
pub fn backward_conv_with_reuse(args: ConvBackwardArgs<'_>, cache: &mut MCache) -> Result<ConvBackward> {
    let spec = args.spec;
    spec.validate()?;
    check_shape(args.delta, &spec.output_shape(), "delta")?;
    check_shape(args.weights, &spec.weight_shape(), "weights")?;
    check_shape(args.layer_input, &spec.input_shape(), "layer input")?;
    check_shape(args.act_input, &spec.input_shape(), "activation input")?;
    check_projection(args.projection, spec.kernel_area())?;
    let area = spec.kernel_area();
    let (h, w) = spec.input;
    let in_pos = h * w;
    let out_pos = spec.output_positions();

    let stored_next = args.next.filter(|n| args.detection_on && n.matches_gradient_grid_of(spec));
    let mut ig_stats = ReuseStats::default();
    let mut ig_hitmaps = Vec::with_capacity(spec.out_channels);
    let mut regenerations = 0;
    let mut acc = vec![0.0f64; spec.in_channels * in_pos];
    for f in 0..spec.out_channels {
        let windows = extract_gradient_windows(args.delta.slab(f), spec);
        let keyed = if !args.detection_on {
            None
        } else if let Some(next) = stored_next {
            let table = reload(cache, &next.channels[f])?;
            Some((table, next.channels[f].hitmap.clone()))
        } else {
            regenerations += 1;
            Some(populate(cache, &windows, args.projection)?)
        };
        for c in 0..spec.in_channels {
            let filt = flipped_filter(args.weights, spec, f, c);
            let row = &mut acc[c * in_pos..(c + 1) * in_pos];
            match &keyed {
                Some((table, hitmap)) => {
                    filter_pass(cache, table, hitmap, &windows, &filt, row, &mut ig_stats)?;
                    cache.invalidate_vd_all();
                }
                None => {
                    for (slot, win) in row.iter_mut().zip(windows.chunks_exact(area)) {
                        *slot += dot_f64(win, &filt);
                    }
                    ig_stats.executed += in_pos as u64;
                }
            }
        }
        ig_hitmaps.push(keyed.map_or_else(|| Hitmap::uniform(in_pos, HitState::Mnu), |(_, hm)| hm));
    }
    let input_grad = acc
        .into_iter()
        .zip(args.act_input.data())
        .map(|(g, &x)| g as f32 * args.prev_activation.derivative(x))
        .collect();

    let own = if args.detection_on { args.own } else { None };
    if let Some(o) = own {
        if o.spec.kernel != spec.kernel || o.channels.len() != spec.in_channels {
            return Err(shape_err!("stored forward signatures do not belong to this layer"));
        }
    }
    let mut wg_stats = ReuseStats::default();
    let mut wg_hitmaps = Vec::with_capacity(spec.in_channels);
    let mut grad = vec![0.0f32; spec.out_channels * spec.in_channels * area];
    for c in 0..spec.in_channels {
        let windows = extract_windows(args.layer_input.slab(c), spec);
        // dense group per cached ordinal, and one representative ordinal per group
        let groups: Option<(Vec<Option<usize>>, Vec<usize>, Hitmap)> = match own {
            Some(o) => {
                let table = reload(cache, &o.channels[c])?;
                let mut index: BTreeMap<EntryId, usize> = BTreeMap::new();
                let mut reps = Vec::new();
                let ids = (0..out_pos)
                    .map(|i| {
                        table.entry(i).map(|e| {
                            *index.entry(e).or_insert_with(|| {
                                reps.push(i);
                                reps.len() - 1
                            })
                        })
                    })
                    .collect();
                Some((ids, reps, o.channels[c].hitmap.clone()))
            }
            None => None,
        };
        let mut sums = vec![0.0f64; groups.as_ref().map_or(0, |g| g.1.len())];
        for f in 0..spec.out_channels {
            let d = &args.delta.slab(f)[..out_pos];
            let mut acc = vec![0.0f64; area];
            let mut axpy = |scale: f64, win: &[f32]| {
                for (a, &x) in acc.iter_mut().zip(win) {
                    *a += scale * x as f64;
                }
            };
            match &groups {
                None => {
                    for (&dv, win) in d.iter().zip(windows.chunks_exact(area)) {
                        if dv != 0.0 {
                            axpy(dv as f64, win);
                        }
                    }
                    wg_stats.executed += out_pos as u64;
                }
                Some((ids, reps, hitmap)) => {
                    sums.iter_mut().for_each(|s| *s = 0.0);
                    for i in 0..out_pos {
                        match ids[i] {
                            Some(g) => sums[g] += d[i] as f64,
                            None => {
                                if d[i] != 0.0 {
                                    axpy(d[i] as f64, &windows[i * area..(i + 1) * area]);
                                }
                            }
                        }
                        if hitmap.state(i) == HitState::Hit {
                            wg_stats.reused += 1;
                        } else {
                            wg_stats.executed += 1;
                        }
                    }
                    for (&rep, &s) in reps.iter().zip(&sums) {
                        if s != 0.0 {
                            axpy(s, &windows[rep * area..(rep + 1) * area]);
                        }
                    }
                }
            }
            let base = (f * spec.in_channels + c) * area;
            for (g, a) in grad[base..base + area].iter_mut().zip(acc) {
                *g = a as f32;
            }
        }
        wg_hitmaps.push(groups.map_or_else(|| Hitmap::uniform(out_pos, HitState::Mnu), |(_, _, hm)| hm));
    }

    Ok(ConvBackward {
        weight_grad: Tensor::new(spec.weight_shape(), grad)?,
        input_grad: Tensor::new(spec.input_shape(), input_grad)?,
        input_grad_stats: ig_stats,
        weight_grad_stats: wg_stats,
        input_grad_hitmaps: ig_hitmaps,
        weight_grad_hitmaps: wg_hitmaps,
        signature_regenerations: regenerations,
        reused_stored: stored_next.is_some(),
    })
}

/// Options of the blocked FC path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct FcOptions {
    /// A row reused in one block must compute the next block itself.
    pub one_step_ahead: bool,
}

impl Default for FcOptions {
    fn default() -> Self {
        Self { one_step_ahead: true }
    }
}

/// Output writes of one block, retired first in first out, one per cycle.
#[derive(Debug, Default)]
struct ConflictHandler {
    queue: VecDeque<(usize, usize, f64)>,
    retired: u64,
}

impl ConflictHandler {
    fn push(&mut self, row: usize, col: usize, value: f64) {
        self.queue.push_back((row, col, value));
    }

    fn drain(&mut self, acc: &mut [f64], cols: usize) {
        while let Some((r, c, v)) = self.queue.pop_front() {
            acc[r * cols + c] += v;
            self.retired += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcForward {
    pub output: Tensor,
    pub stats: ReuseStats,
    /// Per block: hitmap over batch rows.
    pub hitmaps: Vec<Hitmap>,
    pub schedule: FcSchedule,
    /// Output writes retired by the conflict handler.
    pub writes_retired: u64,
}

/// The two block-parity caches of the FC path, sized for `out` partials.
pub fn fc_split_caches(base: &MCacheConfig, out: usize) -> Result<[MCache; 2]> {
    let cfg = MCacheConfig { result_width: out, versions: 1, ..*base };
    Ok([MCache::new(cfg)?, MCache::new(cfg)?])
}

/// Blocked FC forward with reuse across batch rows.
///
/// The input features are cut into blocks of `block_vector_len`; rows whose
/// sub-vectors share a signature share the sub-vector's partial products
/// with every weight column. Blocks alternate between two caches. The output
/// accumulates block partials in block order, as [`crate::tensor::fc_forward_blocked`].
pub fn forward_fc_with_reuse(
    inputs: &Tensor,
    weights: &Tensor,
    spec: &FCLayerSpec,
    p: &ProjectionMatrix,
    cache_config: &MCacheConfig,
    options: FcOptions,
    detection_on: bool,
) -> Result<FcForward> {
    spec.validate()?;
    let batch = match inputs.shape() {
        [b, i] if *i == spec.in_features => *b,
        s => return Err(shape_err!("FC inputs {:?}, expected [batch, {}]", s, spec.in_features)),
    };
    check_shape(weights, &[spec.in_features, spec.out_features], "FC weights")?;
    let len = spec.block_vector_len;
    check_projection(p, len)?;
    let out = spec.out_features;
    let mut caches = fc_split_caches(cache_config, out)?;
    let wd = weights.data();
    let mut acc = vec![0.0f64; batch * out];
    let mut stats = ReuseStats::default();
    let mut hitmaps = Vec::with_capacity(spec.blocks());
    let mut schedule = FcSchedule::default();
    let mut handler = ConflictHandler::default();
    let mut reused_last = vec![false; batch];
    let mut partials = vec![0.0f64; out];
    let mut sub = vec![0.0f32; batch * len];
    for b in 0..spec.blocks() {
        let start = b * len;
        let end = (start + len).min(spec.in_features);
        let cache = &mut caches[b % 2];
        let mut hitmap = Hitmap::new(batch);
        let mut table = SignatureTable::default();
        if detection_on {
            sub.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..batch {
                sub[r * len..r * len + (end - start)].copy_from_slice(&inputs.slab(r)[start..end]);
            }
            table.load(signatures_of_packed(&sub, p));
            cache.clear_cache();
            for r in 0..batch {
                if options.one_step_ahead && reused_last[r] {
                    hitmap.assign(r, HitState::Mnu)?;
                    stats.mnu_forced += 1;
                } else {
                    cache.probe_and_update(r, &mut hitmap, &mut table)?;
                }
            }
        } else {
            (0..batch).try_for_each(|r| hitmap.assign(r, HitState::Mnu))?;
        }
        let mut owner: BTreeMap<EntryId, usize> = BTreeMap::new();
        let mut events = vec![FcRowEvent { state: HitState::Mnu, followers: 0 }; batch];
        for r in 0..batch {
            let state = hitmap.state(r);
            events[r].state = state;
            if state == HitState::Hit {
                let e = table.entry(r).ok_or_else(|| Error::Logic(alloc::format!("HIT row {} has no entry", r)))?;
                let cached = cache
                    .read_result(e, 0)?
                    .ok_or_else(|| Error::Logic(alloc::format!("HIT row {} read before its entry was filled", r)))?;
                for (j, &v) in cached.iter().enumerate() {
                    handler.push(r, j, v);
                }
                if let Some(&leader) = owner.get(&e) {
                    events[leader].followers += 1;
                }
                stats.reused += out as u64;
                continue;
            }
            let x = inputs.slab(r);
            for (j, part) in partials.iter_mut().enumerate() {
                let mut s = 0.0f64;
                for i in start..end {
                    s += x[i] as f64 * wd[i * out + j] as f64;
                }
                *part = s;
            }
            if state == HitState::Mau {
                let e = table.entry(r).ok_or_else(|| Error::Logic(alloc::format!("MAU row {} has no entry", r)))?;
                cache.write_result(e, 0, &partials)?;
                owner.insert(e, r);
            }
            for (j, &v) in partials.iter().enumerate() {
                handler.push(r, j, v);
            }
            stats.executed += out as u64;
        }
        handler.drain(&mut acc, out);
        for r in 0..batch {
            reused_last[r] = events[r].state == HitState::Hit;
        }
        schedule.blocks.push(events);
        hitmaps.push(hitmap);
    }
    Ok(FcForward {
        output: Tensor::new(vec![batch, out], acc.into_iter().map(|v| v as f32).collect())?,
        stats,
        hitmaps,
        schedule,
        writes_retired: handler.retired,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionForward {
    pub output: Tensor,
    /// `W = X X^T`.
    pub scores: Tensor,
    pub scores_pass: FcForward,
    pub output_pass: FcForward,
}

impl AttentionForward {
    pub fn stats(&self) -> ReuseStats {
        self.scores_pass.stats + self.output_pass.stats
    }
}

/// `W = X X^T`, then `Y = W X`, both through the FC reuse path with the rows
/// of `X` (then of `W`) as reuse keys. Projections have `m = block_len`.
pub fn forward_attention_with_reuse(
    x: &Tensor,
    block_len: usize,
    p: &ProjectionMatrix,
    cache_config: &MCacheConfig,
    options: FcOptions,
    detection_on: bool,
) -> Result<AttentionForward> {
    let (t, k) = match x.shape() {
        [t, k] => (*t, *k),
        s => return Err(shape_err!("attention input must be [seq, dim], got {:?}", s)),
    };
    let xt = transpose(x)?;
    let s1 = FCLayerSpec { in_features: k, out_features: t, block_vector_len: block_len };
    let scores_pass = forward_fc_with_reuse(x, &xt, &s1, p, cache_config, options, detection_on)?;
    let s2 = FCLayerSpec { in_features: t, out_features: k, block_vector_len: block_len };
    let output_pass = forward_fc_with_reuse(&scores_pass.output, x, &s2, p, cache_config, options, detection_on)?;
    Ok(AttentionForward {
        output: output_pass.output.clone(),
        scores: scores_pass.output.clone(),
        scores_pass,
        output_pass,
    })
}
