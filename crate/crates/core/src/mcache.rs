//! The reuse cache.
//!
//! Set-associative, indexed and tagged by signature, with no replacement:
//! once a set holds `ways` tags, further new signatures mapping there are
//! reported as MNU and leave the cache untouched. Each line has a tag-valid
//! bit (VT) and one data-valid bit (VD) per data version. Tags are written in
//! the signature phase, data in the compute phase.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};
use crate::rpq::{Signature, SignatureTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct MCacheConfig {
    pub total_entries: usize,
    pub ways: usize,
    /// Data versions per line, one per filter that may be in flight.
    pub versions: usize,
    /// Values per data slot (1 for a conv dot product).
    pub result_width: usize,
}

impl Default for MCacheConfig {
    fn default() -> Self {
        Self { total_entries: 1024, ways: 16, versions: 4, result_width: 1 }
    }
}

impl MCacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_entries == 0 || self.ways == 0 || self.versions == 0 || self.result_width == 0 {
            return Err(config_err!("cache parameters must be positive: {:?}", self));
        }
        if !self.total_entries.is_multiple_of(self.ways) {
            return Err(config_err!(
                "total_entries {} not divisible by ways {}",
                self.total_entries,
                self.ways
            ));
        }
        if !self.sets().is_power_of_two() {
            return Err(config_err!("set count {} is not a power of two", self.sets()));
        }
        Ok(())
    }

    pub fn sets(&self) -> usize {
        self.total_entries / self.ways
    }

    pub fn index_bits(&self) -> usize {
        self.sets().trailing_zeros() as usize
    }
}

/// Position of a line: `set * ways + way`. Stable until the next `clear`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntryId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum HitState {
    /// Signature already cached: reuse the stored result.
    Hit,
    /// Miss And Update: tag inserted, data filled by this vector's computation.
    Mau,
    /// Miss No Update: the set was full; compute and do not cache.
    Mnu,
}

/// Set index from the low `log2(sets)` signature bits, tag from the rest.
pub fn index_and_tag(sig: &Signature, config: &MCacheConfig) -> Result<(usize, Signature)> {
    let bits = config.index_bits();
    if sig.len() < bits {
        return Err(config_err!(
            "signature of {} bits is shorter than the {}-bit set index",
            sig.len(),
            bits
        ));
    }
    Ok((sig.low_bits(bits) as usize, sig.suffix(bits)))
}

#[derive(Debug, Clone)]
pub struct CacheLine {
    tag: Option<Signature>,
    vd: Vec<bool>,
    data: Vec<f64>,
}

impl CacheLine {
    fn empty(config: &MCacheConfig) -> Self {
        Self {
            tag: None,
            vd: vec![false; config.versions],
            data: vec![0.0; config.versions * config.result_width],
        }
    }

    pub fn vt(&self) -> bool {
        self.tag.is_some()
    }

    /// VD implies VT.
    fn consistent(&self) -> bool {
        self.vt() || self.vd.iter().all(|v| !v)
    }

    pub fn tag(&self) -> Option<&Signature> {
        self.tag.as_ref()
    }

    pub fn vd(&self, version: usize) -> bool {
        self.vd[version]
    }
}

/// Per-vector verdicts of one channel pass. Each ordinal is assigned once.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Hitmap {
    states: Vec<Option<HitState>>,
}

impl Hitmap {
    pub fn new(len: usize) -> Self {
        Self { states: vec![None; len] }
    }

    /// A fully assigned hitmap, mostly for driving the timing model directly.
    pub fn from_states(states: impl IntoIterator<Item = HitState>) -> Self {
        Self { states: states.into_iter().map(Some).collect() }
    }

    pub fn uniform(len: usize, state: HitState) -> Self {
        Self { states: vec![Some(state); len] }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, ordinal: usize) -> Option<HitState> {
        self.states.get(ordinal).copied().flatten()
    }

    /// The state of an ordinal that must already be assigned; unassigned
    /// ordinals read as MNU, the conservative "compute it" verdict.
    pub fn state(&self, ordinal: usize) -> HitState {
        self.get(ordinal).unwrap_or(HitState::Mnu)
    }

    pub fn assign(&mut self, ordinal: usize, state: HitState) -> Result<()> {
        let len = self.states.len();
        let slot = self
            .states
            .get_mut(ordinal)
            .ok_or_else(|| shape_err!("ordinal {} outside hitmap of {}", ordinal, len))?;
        if slot.is_some() {
            return Err(Error::Logic(alloc::format!(
                "ordinal {} probed twice in one channel pass",
                ordinal
            )));
        }
        *slot = Some(state);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.states.iter().all(Option::is_some)
    }

    /// (hits, maus, mnus) over assigned ordinals.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in self.states.iter().flatten() {
            match s {
                HitState::Hit => c.0 += 1,
                HitState::Mau => c.1 += 1,
                HitState::Mnu => c.2 += 1,
            }
        }
        c
    }

    pub fn iter(&self) -> impl Iterator<Item = HitState> + '_ {
        self.states.iter().map(|s| s.unwrap_or(HitState::Mnu))
    }

    pub fn reset(&mut self, len: usize) {
        self.states.clear();
        self.states.resize(len, None);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingInsert {
    pub ordinal: usize,
    pub tag: Signature,
}

/// Per-set FIFOs of tag insertions; the controller of each set retires one
/// request per cycle, sets are independent.
#[derive(Debug, Clone)]
pub struct InsertQueue {
    sets: Vec<VecDeque<PendingInsert>>,
}

impl InsertQueue {
    pub fn new(sets: usize) -> Self {
        Self { sets: (0..sets).map(|_| VecDeque::new()).collect() }
    }

    pub fn push(&mut self, set: usize, req: PendingInsert) {
        self.sets[set].push_back(req);
    }

    pub fn pop(&mut self, set: usize) -> Option<PendingInsert> {
        self.sets[set].pop_front()
    }

    pub fn depth(&self, set: usize) -> usize {
        self.sets[set].len()
    }

    pub fn max_depth(&self) -> usize {
        self.sets.iter().map(VecDeque::len).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.sets.iter().all(VecDeque::is_empty)
    }
}

/// Per-channel cache statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChannelStats {
    pub hits: usize,
    pub maus: usize,
    pub mnus: usize,
    pub occupancy: usize,
    pub vd_writes: usize,
}

/// Outcome of the requests issued in one cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeCycle {
    pub states: Vec<HitState>,
    /// Cycles the busiest set controller needed to retire its insert queue.
    pub drain_cycles: usize,
}

#[derive(Debug, Clone)]
pub struct MCache {
    config: MCacheConfig,
    lines: Vec<CacheLine>,
    queue: InsertQueue,
    stats: ChannelStats,
    overwrites: usize,
}

impl MCache {
    pub fn new(config: MCacheConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lines: (0..config.total_entries).map(|_| CacheLine::empty(&config)).collect(),
            queue: InsertQueue::new(config.sets()),
            config,
            stats: ChannelStats::default(),
            overwrites: 0,
        })
    }

    pub fn config(&self) -> &MCacheConfig {
        &self.config
    }

    pub fn line(&self, id: EntryId) -> Option<&CacheLine> {
        self.lines.get(id.0 as usize)
    }

    fn set_lines(&self, set: usize) -> &[CacheLine] {
        let w = self.config.ways;
        &self.lines[set * w..(set + 1) * w]
    }

    fn find(&self, set: usize, tag: &Signature) -> Option<EntryId> {
        self.set_lines(set)
            .iter()
            .position(|l| l.tag.as_ref() == Some(tag))
            .map(|way| EntryId((set * self.config.ways + way) as u32))
    }

    fn free_way(&self, set: usize) -> Option<usize> {
        self.set_lines(set).iter().position(|l| !l.vt())
    }

    fn record(&mut self, ordinal: usize, state: HitState, id: Option<EntryId>, hitmap: &mut Hitmap, table: &mut SignatureTable) -> Result<()> {
        hitmap.assign(ordinal, state)?;
        table.set_entry(ordinal, id)?;
        match state {
            HitState::Hit => self.stats.hits += 1,
            HitState::Mau => self.stats.maus += 1,
            HitState::Mnu => self.stats.mnus += 1,
        }
        Ok(())
    }

    /// Retire one queued insert for `set`: a tag inserted earlier in the same
    /// cycle turns this request into a HIT.
    fn retire(&mut self, set: usize, req: PendingInsert, hitmap: &mut Hitmap, table: &mut SignatureTable) -> Result<HitState> {
        let state = self.retire_unchecked(set, req, hitmap, table)?;
        debug_assert!(self.set_lines(set).iter().all(CacheLine::consistent));
        Ok(state)
    }

    fn retire_unchecked(&mut self, set: usize, req: PendingInsert, hitmap: &mut Hitmap, table: &mut SignatureTable) -> Result<HitState> {
        if let Some(id) = self.find(set, &req.tag) {
            self.record(req.ordinal, HitState::Hit, Some(id), hitmap, table)?;
            return Ok(HitState::Hit);
        }
        match self.free_way(set) {
            Some(way) => {
                let idx = set * self.config.ways + way;
                self.lines[idx].tag = Some(req.tag);
                self.record(req.ordinal, HitState::Mau, Some(EntryId(idx as u32)), hitmap, table)?;
                Ok(HitState::Mau)
            }
            None => {
                self.record(req.ordinal, HitState::Mnu, None, hitmap, table)?;
                Ok(HitState::Mnu)
            }
        }
    }

    /// Probe the signature stored for `ordinal` and update the cache, the
    /// hitmap and the table's entry id.
    pub fn probe_and_update(&mut self, ordinal: usize, hitmap: &mut Hitmap, table: &mut SignatureTable) -> Result<HitState> {
        // a lone probe: its queue holds one request, retired at once
        if hitmap.get(ordinal).is_some() {
            return Err(Error::Logic(alloc::format!("ordinal {} probed twice in one channel pass", ordinal)));
        }
        let sig = table.signature(ordinal).ok_or_else(|| shape_err!("no signature for ordinal {}", ordinal))?;
        let (set, tag) = index_and_tag(sig, &self.config)?;
        self.retire(set, PendingInsert { ordinal, tag }, hitmap, table)
    }

    /// Resolve probes issued in the same cycle. Hits resolve immediately;
    /// misses go through the per-set insert queues in request order, so the
    /// outcome equals probing sequentially in that order.
    pub fn probe_cycle(&mut self, ordinals: &[usize], hitmap: &mut Hitmap, table: &mut SignatureTable) -> Result<ProbeCycle> {
        let mut states: Vec<Option<HitState>> = vec![None; ordinals.len()];
        let mut waiting: Vec<(usize, usize)> = Vec::new();
        for (k, &ordinal) in ordinals.iter().enumerate() {
            if hitmap.get(ordinal).is_some() {
                return Err(Error::Logic(alloc::format!(
                    "ordinal {} probed twice in one channel pass",
                    ordinal
                )));
            }
            let sig = table
                .signature(ordinal)
                .ok_or_else(|| shape_err!("no signature for ordinal {}", ordinal))?;
            let (set, tag) = index_and_tag(sig, &self.config)?;
            if let Some(id) = self.find(set, &tag) {
                self.record(ordinal, HitState::Hit, Some(id), hitmap, table)?;
                states[k] = Some(HitState::Hit);
            } else {
                self.queue.push(set, PendingInsert { ordinal, tag });
                waiting.push((k, set));
            }
        }
        let drain_cycles = self.queue.max_depth();
        let mut touched: Vec<usize> = waiting.iter().map(|&(_, set)| set).collect();
        touched.sort_unstable();
        touched.dedup();
        for set in touched {
            while let Some(req) = self.queue.pop(set) {
                let ordinal = req.ordinal;
                let state = self.retire(set, req, hitmap, table)?;
                let k = ordinals.iter().position(|&o| o == ordinal).unwrap_or(0);
                states[k] = Some(state);
            }
        }
        Ok(ProbeCycle {
            states: states.into_iter().map(|s| s.unwrap_or(HitState::Mnu)).collect(),
            drain_cycles,
        })
    }

    fn check_version(&self, id: EntryId, version: usize) -> Result<usize> {
        if version >= self.config.versions {
            return Err(config_err!("version {} out of range (M = {})", version, self.config.versions));
        }
        let idx = id.0 as usize;
        if idx >= self.lines.len() {
            return Err(config_err!("entry {} out of range", idx));
        }
        Ok(idx)
    }

    pub fn read_result(&self, id: EntryId, version: usize) -> Result<Option<&[f64]>> {
        let idx = self.check_version(id, version)?;
        let line = &self.lines[idx];
        if !line.vd[version] {
            return Ok(None);
        }
        let w = self.config.result_width;
        Ok(Some(&line.data[version * w..(version + 1) * w]))
    }

    pub fn write_result(&mut self, id: EntryId, version: usize, result: &[f64]) -> Result<()> {
        let idx = self.check_version(id, version)?;
        let w = self.config.result_width;
        if result.len() != w {
            return Err(shape_err!("result of width {} for slots of width {}", result.len(), w));
        }
        let line = &mut self.lines[idx];
        if !line.vt() {
            return Err(Error::Logic(alloc::format!("write to entry {} without a valid tag", idx)));
        }
        if line.vd[version] {
            self.overwrites += 1;
        }
        line.data[version * w..(version + 1) * w].copy_from_slice(result);
        line.vd[version] = true;
        debug_assert!(line.consistent());
        self.stats.vd_writes += 1;
        Ok(())
    }

    /// Flash-clear every VD bit; tags stay valid.
    pub fn invalidate_vd_all(&mut self) {
        for line in &mut self.lines {
            line.vd.iter_mut().for_each(|v| *v = false);
        }
    }

    /// Clear the VD bits of one version (a filter slot being reloaded).
    pub fn invalidate_version(&mut self, version: usize) {
        for line in &mut self.lines {
            line.vd[version] = false;
        }
    }

    /// Start a new channel pass: no tags, no data, fresh hitmap and table.
    pub fn clear(&mut self, hitmap: &mut Hitmap, table: &mut SignatureTable) {
        self.clear_cache();
        hitmap.reset(0);
        table.clear();
    }

    pub(crate) fn clear_cache(&mut self) {
        for line in &mut self.lines {
            line.tag = None;
            line.vd.iter_mut().for_each(|v| *v = false);
        }
        self.stats = ChannelStats::default();
    }

    pub fn occupancy(&self) -> usize {
        self.lines.iter().filter(|l| l.vt()).count()
    }

    pub fn set_occupancy(&self, set: usize) -> usize {
        self.set_lines(set).iter().filter(|l| l.vt()).count()
    }

    /// Tags currently held by `set`, in way order.
    pub fn set_tags(&self, set: usize) -> Vec<Signature> {
        self.set_lines(set).iter().filter_map(|l| l.tag.clone()).collect()
    }

    pub fn stats(&self) -> ChannelStats {
        ChannelStats { occupancy: self.occupancy(), ..self.stats }
    }

    /// Writes that landed on an already valid version.
    pub fn overwrites(&self) -> usize {
        self.overwrites
    }

    /// VD implies VT on every line.
    pub fn check_invariants(&self) -> bool {
        self.lines.iter().all(CacheLine::consistent)
    }
}
