//! Cycle-approximate timing of the PE array.
//!
//! Functions here consume hitmaps (one per channel pass) and never touch
//! tensor data. All costs are in cycles and every constant is a field of
//! [`PEArrayConfig`].

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Add;

use crate::error::{config_err, shape_err, Result};
use crate::mcache::{HitState, Hitmap};
use crate::tensor::{ConvLayerSpec, FCLayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PEArrayConfig {
    pub pe_count: usize,
    pub mac_latency: u64,
    pub cache_read_latency: u64,
    /// Extra cycles a MAU vector spends writing its result. Defaults to 0: the
    /// write overlaps the PE set's output store.
    pub cache_write_latency: u64,
    pub pipelined_signatures: bool,
    /// Cycles to load a filter into a PE set (charged to baseline and reuse alike).
    pub filter_load_cycles: u64,
    /// Flash-clear of the VD bits when a PE set switches filters.
    pub vd_invalidate_cycles: u64,
    /// Per-vector Hitmap lookup inside a PE.
    pub hitmap_check_cycles: u64,
    /// Filter slots `M` of the asynchronous design.
    pub filter_slots: usize,
}

impl Default for PEArrayConfig {
    fn default() -> Self {
        Self {
            pe_count: 168,
            mac_latency: 1,
            cache_read_latency: 1,
            cache_write_latency: 0,
            pipelined_signatures: true,
            filter_load_cycles: 0,
            vd_invalidate_cycles: 1,
            hitmap_check_cycles: 0,
            filter_slots: 4,
        }
    }
}

impl PEArrayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pe_count == 0 || self.mac_latency == 0 || self.filter_slots == 0 {
            return Err(config_err!("pe_count, mac_latency and filter_slots must be positive"));
        }
        Ok(())
    }

    /// PE sets for a kernel with `k1` rows: one PE per row.
    pub fn pe_sets(&self, k1: usize) -> Result<usize> {
        if k1 == 0 || self.pe_count < k1 {
            return Err(config_err!("{} PEs cannot form a set of {}", self.pe_count, k1));
        }
        Ok(self.pe_count / k1)
    }

    /// One row-stationary dot product: `k2` MACs per row PE, then `k1`
    /// accumulation steps down the set.
    pub fn dot_cycles(&self, kernel: (usize, usize)) -> u64 {
        (kernel.0 + kernel.1) as u64 * self.mac_latency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Dataflow {
    #[default]
    #[cfg_attr(feature = "serde", serde(alias = "row_stationary"))]
    Rs,
    #[cfg_attr(feature = "serde", serde(alias = "weight_stationary"))]
    Ws,
    #[cfg_attr(feature = "serde", serde(alias = "input_stationary"))]
    Is,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CycleReport {
    pub signature_cycles: u64,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub total_cycles: u64,
    /// Same work without reuse or signatures.
    pub baseline_cycles: u64,
    /// Summed idle time of PE sets (or PEs) waiting on slower ones.
    pub idle_pe_set_cycles: u64,
    pub dot_products_executed: u64,
    pub dot_products_reused: u64,
    pub signature_regenerations: u64,
    /// `baseline_cycles / total_cycles`.
    pub modeled_speedup: f64,
}

impl CycleReport {
    fn finish(mut self) -> Self {
        self.total_cycles = self.signature_cycles + self.compute_cycles + self.stall_cycles;
        self.modeled_speedup = ratio(self.baseline_cycles, self.total_cycles);
        self
    }

    /// Speedup with the signature phase taken out of the reuse side.
    pub fn net_speedup(&self) -> f64 {
        ratio(self.baseline_cycles, self.total_cycles - self.signature_cycles)
    }

    pub fn reuse_fraction(&self) -> f64 {
        let all = self.dot_products_executed + self.dot_products_reused;
        if all == 0 {
            0.0
        } else {
            self.dot_products_reused as f64 / all as f64
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

impl Add for CycleReport {
    type Output = CycleReport;

    fn add(self, o: CycleReport) -> CycleReport {
        CycleReport {
            signature_cycles: self.signature_cycles + o.signature_cycles,
            compute_cycles: self.compute_cycles + o.compute_cycles,
            stall_cycles: self.stall_cycles + o.stall_cycles,
            total_cycles: 0,
            baseline_cycles: self.baseline_cycles + o.baseline_cycles,
            idle_pe_set_cycles: self.idle_pe_set_cycles + o.idle_pe_set_cycles,
            dot_products_executed: self.dot_products_executed + o.dot_products_executed,
            dot_products_reused: self.dot_products_reused + o.dot_products_reused,
            signature_regenerations: self.signature_regenerations + o.signature_regenerations,
            modeled_speedup: 0.0,
        }
        .finish()
    }
}

impl core::iter::Sum for CycleReport {
    fn sum<I: Iterator<Item = CycleReport>>(iter: I) -> Self {
        iter.fold(CycleReport::default().finish(), Add::add)
    }
}

/// Signature phase of one PE set for square `x*x` vectors.
pub fn signature_phase_cycles(x: usize, vectors_per_set: usize, bits: usize, pipelined: bool) -> u64 {
    signature_phase_cycles_rect((x, x), vectors_per_set, bits, pipelined)
}

/// Rectangular form: a bit costs `k1+k2` cycles unpipelined; pipelined, the
/// first bit costs `k1+k2+1` and each later bit `k2`.
pub fn signature_phase_cycles_rect(kernel: (usize, usize), vectors_per_set: usize, bits: usize, pipelined: bool) -> u64 {
    let (k1, k2) = (kernel.0 as u64, kernel.1 as u64);
    let work = (vectors_per_set * bits) as u64;
    if work == 0 {
        return 0;
    }
    if pipelined {
        (k1 + k2 + 1) + k2 * (work - 1)
    } else {
        (k1 + k2) * work
    }
}

/// Per-channel cost of a conv-shaped pass.
struct PassShape<'a> {
    kernel: (usize, usize),
    filters: usize,
    vectors: usize,
    hitmaps: &'a [Hitmap],
    /// Signature cycles charged before each channel.
    signature: Vec<u64>,
    regenerations: u64,
}

fn check_hitmaps(hitmaps: &[Hitmap], channels: usize, vectors: usize) -> Result<()> {
    if hitmaps.len() != channels {
        return Err(shape_err!("{} hitmaps for {} channels", hitmaps.len(), channels));
    }
    if let Some(h) = hitmaps.iter().find(|h| h.len() != vectors) {
        return Err(shape_err!("hitmap of length {} for {} input vectors", h.len(), vectors));
    }
    Ok(())
}

fn vector_cost(state: HitState, dot: u64, cfg: &PEArrayConfig) -> u64 {
    match state {
        HitState::Hit => cfg.hitmap_check_cycles + cfg.cache_read_latency,
        HitState::Mau => cfg.hitmap_check_cycles + dot + cfg.cache_write_latency,
        HitState::Mnu => cfg.hitmap_check_cycles + dot,
    }
}

/// Per-set cost of one filter over a channel's hitmap; sets own contiguous
/// raster blocks of `ceil(vectors / sets)` vectors.
fn set_costs(h: &Hitmap, sets: usize, dot: u64, cfg: &PEArrayConfig) -> (Vec<u64>, usize, usize) {
    let per_set = h.len().div_ceil(sets).max(1);
    let mut costs = vec![0u64; sets];
    let (mut hits, mut maus) = (0, 0);
    for (i, state) in h.iter().enumerate() {
        costs[i / per_set] += vector_cost(state, dot, cfg);
        match state {
            HitState::Hit => hits += 1,
            HitState::Mau => maus += 1,
            HitState::Mnu => {}
        }
    }
    (costs, hits, maus)
}

fn rs_baseline(kernel: (usize, usize), filters: usize, vectors: usize, channels: usize, cfg: &PEArrayConfig) -> Result<u64> {
    let sets = cfg.pe_sets(kernel.0)?;
    let per_set = vectors.div_ceil(sets) as u64;
    let fc = (filters * channels) as u64;
    Ok(per_set * cfg.dot_cycles(kernel) * fc + fc * cfg.filter_load_cycles)
}

fn rs_sync(p: &PassShape, cfg: &PEArrayConfig) -> Result<CycleReport> {
    cfg.validate()?;
    let sets = cfg.pe_sets(p.kernel.0)?;
    let dot = cfg.dot_cycles(p.kernel);
    let f = p.filters as u64;
    let mut r = CycleReport { signature_regenerations: p.regenerations, ..Default::default() };
    for (c, h) in p.hitmaps.iter().enumerate() {
        let (costs, hits, maus) = set_costs(h, sets, dot, cfg);
        let slowest = costs.iter().copied().max().unwrap_or(0);
        r.signature_cycles += p.signature[c];
        r.compute_cycles += f * slowest;
        r.stall_cycles += f * cfg.filter_load_cycles;
        if maus > 0 {
            r.stall_cycles += (f - 1) * cfg.vd_invalidate_cycles;
        }
        r.idle_pe_set_cycles += f * costs.iter().map(|&c| slowest - c).sum::<u64>();
        r.dot_products_reused += f * hits as u64;
        r.dot_products_executed += f * (h.len() - hits) as u64;
    }
    r.baseline_cycles = rs_baseline(p.kernel, p.filters, p.vectors, p.hitmaps.len(), cfg)?;
    Ok(r.finish())
}

/// Asynchronous row-stationary schedule. Filter `f` occupies one of `M`
/// slots from its load until every set has finished it; a set starts `f` once
/// it has finished `f-1` and `f` is loaded. Filters load in order, so sets
/// never compete for a slot; the earliest-index set is reported on ties.
fn rs_async(p: &PassShape, cfg: &PEArrayConfig) -> Result<CycleReport> {
    cfg.validate()?;
    let sets = cfg.pe_sets(p.kernel.0)?;
    let slots = cfg.filter_slots;
    let dot = cfg.dot_cycles(p.kernel);
    let mut r = CycleReport { signature_regenerations: p.regenerations, ..Default::default() };
    for (c, h) in p.hitmaps.iter().enumerate() {
        let (costs, hits, maus) = set_costs(h, sets, dot, cfg);
        let mut fin = vec![0u64; sets];
        let mut all_done: Vec<u64> = Vec::with_capacity(p.filters);
        for f in 0..p.filters {
            let free = if f < slots { 0 } else { all_done[f - slots] };
            let ready = fin.iter().copied().min().unwrap_or(0);
            let reload = if f >= slots && maus > 0 { cfg.vd_invalidate_cycles } else { 0 };
            let avail = free.max(ready) + cfg.filter_load_cycles + reload;
            for (s, t) in fin.iter_mut().enumerate() {
                *t = (*t).max(avail) + costs[s];
            }
            all_done.push(fin.iter().copied().max().unwrap_or(0));
        }
        let span = all_done.last().copied().unwrap_or(0);
        let last = fin.iter().position(|&t| t == span).unwrap_or(0);
        let busy = p.filters as u64 * costs[last];
        r.signature_cycles += p.signature[c];
        r.compute_cycles += busy;
        r.stall_cycles += span - busy;
        r.idle_pe_set_cycles += costs.iter().map(|&c| span - p.filters as u64 * c).sum::<u64>();
        r.dot_products_reused += (p.filters * hits) as u64;
        r.dot_products_executed += (p.filters * (h.len() - hits)) as u64;
    }
    r.baseline_cycles = rs_baseline(p.kernel, p.filters, p.vectors, p.hitmaps.len(), cfg)?;
    Ok(r.finish())
}

fn forward_shape<'a>(layer: &ConvLayerSpec, hitmaps: &'a [Hitmap], bits: usize, cfg: &PEArrayConfig) -> Result<PassShape<'a>> {
    layer.validate()?;
    let vectors = layer.output_positions();
    check_hitmaps(hitmaps, layer.in_channels, vectors)?;
    let sets = cfg.pe_sets(layer.kernel.0)?;
    let sig = signature_phase_cycles_rect(layer.kernel, vectors.div_ceil(sets), bits, cfg.pipelined_signatures) * cfg.mac_latency;
    Ok(PassShape {
        kernel: layer.kernel,
        filters: layer.out_channels,
        vectors,
        hitmaps,
        signature: vec![sig; layer.in_channels],
        regenerations: 0,
    })
}

/// Synchronous row-stationary forward pass: all PE sets meet at a barrier
/// after every filter.
pub fn simulate_forward_sync(layer: &ConvLayerSpec, hitmaps: &[Hitmap], bits: usize, cfg: &PEArrayConfig) -> Result<CycleReport> {
    rs_sync(&forward_shape(layer, hitmaps, bits, cfg)?, cfg)
}

/// Asynchronous row-stationary forward pass with `cfg.filter_slots` filters
/// (and cache data versions) in flight.
pub fn simulate_forward_async(layer: &ConvLayerSpec, hitmaps: &[Hitmap], bits: usize, cfg: &PEArrayConfig) -> Result<CycleReport> {
    rs_async(&forward_shape(layer, hitmaps, bits, cfg)?, cfg)
}

/// Row-stationary cycles of the layer with reuse switched off.
pub fn baseline_forward(layer: &ConvLayerSpec, cfg: &PEArrayConfig) -> Result<CycleReport> {
    layer.validate()?;
    let hm: Vec<Hitmap> = (0..layer.in_channels)
        .map(|_| Hitmap::uniform(layer.output_positions(), HitState::Mnu))
        .collect();
    let mut shape = forward_shape(layer, &hm, 0, cfg)?;
    shape.signature.iter_mut().for_each(|s| *s = 0);
    rs_sync(&shape, cfg)
}

/// Weight stationary: each PE keeps one filter, input vectors are broadcast.
/// The signature phase is one broadcast against `N` resident random vectors;
/// a HIT skips the broadcast and MACs of that vector for the whole pass.
pub fn simulate_weight_stationary(layer: &ConvLayerSpec, hitmaps: &[Hitmap], bits: usize, cfg: &PEArrayConfig) -> Result<CycleReport> {
    cfg.validate()?;
    layer.validate()?;
    let vectors = layer.output_positions();
    check_hitmaps(hitmaps, layer.in_channels, vectors)?;
    let area = layer.kernel_area() as u64;
    let mac = area * cfg.mac_latency;
    let passes = layer.out_channels.div_ceil(cfg.pe_count) as u64;
    let f = layer.out_channels as u64;
    let sig = vectors as u64 * mac * bits.div_ceil(cfg.pe_count) as u64;
    let mut r = CycleReport::default();
    for h in hitmaps {
        let (hits, maus, _) = h.counts();
        let per_pass: u64 = h.iter().map(|s| vector_cost(s, mac, cfg)).sum();
        r.signature_cycles += sig;
        r.compute_cycles += passes * per_pass;
        r.stall_cycles += passes * cfg.filter_load_cycles;
        if maus > 0 {
            r.stall_cycles += (passes - 1) * cfg.vd_invalidate_cycles;
        }
        r.dot_products_reused += f * hits as u64;
        r.dot_products_executed += f * (vectors - hits) as u64;
    }
    r.baseline_cycles = layer.in_channels as u64 * passes * (vectors as u64 * mac + cfg.filter_load_cycles);
    Ok(r.finish())
}

/// Input stationary: each PE keeps one input vector and streams every filter
/// past it; PEs own contiguous blocks and never wait on each other. A HIT
/// vector is loaded and then reads all its results from the cache.
pub fn simulate_input_stationary(layer: &ConvLayerSpec, hitmaps: &[Hitmap], bits: usize, cfg: &PEArrayConfig) -> Result<CycleReport> {
    cfg.validate()?;
    layer.validate()?;
    let vectors = layer.output_positions();
    check_hitmaps(hitmaps, layer.in_channels, vectors)?;
    let area = layer.kernel_area() as u64;
    let mac = area * cfg.mac_latency;
    let f = layer.out_channels as u64;
    let per_pe = vectors.div_ceil(cfg.pe_count).max(1);
    let pes = vectors.div_ceil(per_pe);
    let sig = per_pe as u64 * bits as u64 * mac;
    let mut r = CycleReport::default();
    for h in hitmaps {
        let mut pe_time = vec![0u64; pes];
        for (i, s) in h.iter().enumerate() {
            pe_time[i / per_pe] += area + f * vector_cost(s, mac, cfg);
        }
        let slowest = pe_time.iter().copied().max().unwrap_or(0);
        let (hits, _, _) = h.counts();
        r.signature_cycles += sig;
        r.compute_cycles += slowest;
        r.idle_pe_set_cycles += pe_time.iter().map(|&t| slowest - t).sum::<u64>();
        r.dot_products_reused += f * hits as u64;
        r.dot_products_executed += f * (vectors - hits) as u64;
    }
    r.baseline_cycles = layer.in_channels as u64 * per_pe as u64 * (area + f * mac);
    Ok(r.finish())
}

/// Dispatch on dataflow; `asynchronous` only affects row stationary.
pub fn simulate_forward(
    layer: &ConvLayerSpec,
    hitmaps: &[Hitmap],
    bits: usize,
    dataflow: Dataflow,
    asynchronous: bool,
    cfg: &PEArrayConfig,
) -> Result<CycleReport> {
    match (dataflow, asynchronous) {
        (Dataflow::Rs, false) => simulate_forward_sync(layer, hitmaps, bits, cfg),
        (Dataflow::Rs, true) => simulate_forward_async(layer, hitmaps, bits, cfg),
        (Dataflow::Ws, _) => simulate_weight_stationary(layer, hitmaps, bits, cfg),
        (Dataflow::Is, _) => simulate_input_stationary(layer, hitmaps, bits, cfg),
    }
}

/// A layer whose similarity detection is off: every vector computes and no
/// signature phase runs.
pub fn simulate_without_detection(
    layer: &ConvLayerSpec,
    dataflow: Dataflow,
    asynchronous: bool,
    cfg: &PEArrayConfig,
) -> Result<CycleReport> {
    layer.validate()?;
    let mnu = vec![Hitmap::uniform(layer.output_positions(), HitState::Mnu); layer.in_channels];
    let r = simulate_forward(layer, &mnu, 0, dataflow, asynchronous, cfg)?;
    Ok(CycleReport { signature_cycles: 0, ..r }.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackwardReport {
    /// Gradient of the layer input (gradient vectors against flipped filters).
    pub input_grad: CycleReport,
    /// Gradient of the weights (forward input vectors weighted by the deltas).
    pub weight_grad: CycleReport,
}

impl BackwardReport {
    pub fn total(&self) -> CycleReport {
        self.input_grad + self.weight_grad
    }
}

/// Backward timing of one conv layer.
///
/// The input-gradient pass treats each delta channel as a channel pass with
/// `in_channels` filters over the `H*W` gradient vectors of `layer.kernel`.
/// When `next_kernel` (the kernel of the following layer, whose forward
/// hitmaps cover this layer's output) equals `layer.kernel`, the stored
/// hitmaps are reloaded and no signature cycles are charged; otherwise one
/// signature regeneration is charged per delta channel. The weight-gradient
/// pass reuses this layer's forward-input hitmaps at no signature cost.
pub fn simulate_backward(
    layer: &ConvLayerSpec,
    next_kernel: Option<(usize, usize)>,
    input_grad_hitmaps: &[Hitmap],
    weight_grad_hitmaps: &[Hitmap],
    bits: usize,
    asynchronous: bool,
    cfg: &PEArrayConfig,
) -> Result<BackwardReport> {
    layer.validate()?;
    let (h, w) = layer.input;
    let grad_vectors = h * w;
    check_hitmaps(input_grad_hitmaps, layer.out_channels, grad_vectors)?;
    let sets = cfg.pe_sets(layer.kernel.0)?;
    let matched = next_kernel == Some(layer.kernel);
    let sig = if matched {
        0
    } else {
        signature_phase_cycles_rect(layer.kernel, grad_vectors.div_ceil(sets), bits, cfg.pipelined_signatures) * cfg.mac_latency
    };
    let input_pass = PassShape {
        kernel: layer.kernel,
        filters: layer.in_channels,
        vectors: grad_vectors,
        hitmaps: input_grad_hitmaps,
        signature: vec![sig; layer.out_channels],
        regenerations: if matched { 0 } else { layer.out_channels as u64 },
    };
    let mut weight_pass = forward_shape(layer, weight_grad_hitmaps, 0, cfg)?;
    weight_pass.signature.iter_mut().for_each(|s| *s = 0);
    let run = |p: &PassShape| if asynchronous { rs_async(p, cfg) } else { rs_sync(p, cfg) };
    Ok(BackwardReport { input_grad: run(&input_pass)?, weight_grad: run(&weight_pass)? })
}

/// Backward cycles with reuse switched off.
pub fn baseline_backward(layer: &ConvLayerSpec, cfg: &PEArrayConfig) -> Result<BackwardReport> {
    let (h, w) = layer.input;
    let ig: Vec<Hitmap> = (0..layer.out_channels).map(|_| Hitmap::uniform(h * w, HitState::Mnu)).collect();
    let wg: Vec<Hitmap> = (0..layer.in_channels)
        .map(|_| Hitmap::uniform(layer.output_positions(), HitState::Mnu))
        .collect();
    simulate_backward(layer, Some(layer.kernel), &ig, &wg, 0, false, cfg)
}

/// What one batch row did in one FC block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FcRowEvent {
    pub state: HitState,
    /// Later rows that reuse this row's partial products (sends it must make
    /// per weight column).
    pub followers: usize,
}

/// Per block, per batch row events of a blocked FC execution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FcSchedule {
    pub blocks: Vec<Vec<FcRowEvent>>,
}

impl FcSchedule {
    pub fn no_reuse(batch: usize, blocks: usize) -> Self {
        let ev = FcRowEvent { state: HitState::Mnu, followers: 0 };
        Self { blocks: vec![vec![ev; batch]; blocks] }
    }
}

/// FC timing: row `r` runs on PE `r % pe_count`, one weight column after
/// another. A computing row pays `len` MACs per column, but a row with
/// followers sends each column's partial to them one per cycle and stalls
/// when the sends outlast the next column's MACs. A HIT row only looks up
/// its match. Every row computes its block signature (`N * len` MACs).
pub fn simulate_fc(spec: &FCLayerSpec, schedule: &FcSchedule, bits: usize, cfg: &PEArrayConfig) -> Result<CycleReport> {
    cfg.validate()?;
    spec.validate()?;
    if schedule.blocks.len() != spec.blocks() {
        return Err(shape_err!("schedule has {} blocks, layer has {}", schedule.blocks.len(), spec.blocks()));
    }
    let batch = schedule.blocks.first().map_or(0, Vec::len);
    if schedule.blocks.iter().any(|b| b.len() != batch) {
        return Err(shape_err!("ragged FC schedule"));
    }
    let out = spec.out_features as u64;
    let pes = cfg.pe_count.min(batch.max(1));
    // (signature, compute, stall) per PE
    let mut per_pe = vec![(0u64, 0u64, 0u64); pes];
    let mut r = CycleReport::default();
    for (b, rows) in schedule.blocks.iter().enumerate() {
        let start = b * spec.block_vector_len;
        let len = ((start + spec.block_vector_len).min(spec.in_features) - start) as u64;
        let mac = len * cfg.mac_latency;
        for (row, ev) in rows.iter().enumerate() {
            let t = &mut per_pe[row % pes];
            t.0 += bits as u64 * mac;
            match ev.state {
                HitState::Hit => {
                    t.1 += cfg.hitmap_check_cycles + cfg.cache_read_latency;
                    r.dot_products_reused += out;
                }
                state => {
                    let write = if state == HitState::Mau { cfg.cache_write_latency } else { 0 };
                    let column = mac + write + cfg.hitmap_check_cycles;
                    t.1 += out * column;
                    t.2 += out * (ev.followers as u64).saturating_sub(column);
                    r.dot_products_executed += out;
                }
            }
        }
    }
    let totals: Vec<u64> = per_pe.iter().map(|t| t.0 + t.1 + t.2).collect();
    let span = totals.iter().copied().max().unwrap_or(0);
    let last = totals.iter().position(|&t| t == span).unwrap_or(0);
    (r.signature_cycles, r.compute_cycles, r.stall_cycles) = per_pe[last];
    r.idle_pe_set_cycles = totals.iter().map(|&t| span - t).sum();
    r.baseline_cycles = batch.div_ceil(pes) as u64 * out * spec.in_features as u64 * cfg.mac_latency;
    Ok(r.finish())
}
