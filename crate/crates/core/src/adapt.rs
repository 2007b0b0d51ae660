//! Runtime adaptation: signature growth on flat loss, per-layer stoppage of
//! similarity detection when it costs more than it saves.

use alloc::vec::Vec;

use crate::dataflow::PEArrayConfig;
use crate::error::{config_err, Result};
use crate::tensor::{ConvLayerSpec, FCLayerSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AdaptConfig {
    pub initial_n: usize,
    /// Flat iterations before the signature grows by one bit.
    pub k: usize,
    pub loss_flat_tol: f64,
    /// Unprofitable batches before a layer stops detecting similarity.
    pub t: usize,
    pub max_n: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { initial_n: 20, k: 50, loss_flat_tol: 1e-3, t: 3, max_n: 64 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_n == 0 || self.initial_n > self.max_n {
            return Err(config_err!("need 1 <= initial_n ({}) <= max_n ({})", self.initial_n, self.max_n));
        }
        if self.k == 0 || self.t == 0 {
            return Err(config_err!("K and T must be at least 1"));
        }
        if !(self.loss_flat_tol >= 0.0) {
            return Err(config_err!("loss_flat_tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerAdaptState {
    pub detection_on: bool,
    pub unprofitable_streak: usize,
    /// Accumulated reuse-side cycles (C_S).
    pub mercury_cycles: u64,
    /// Accumulated analytic baseline cycles (C_B).
    pub baseline_cycles: u64,
}

impl Default for LayerAdaptState {
    fn default() -> Self {
        Self { detection_on: true, unprofitable_streak: 0, mercury_cycles: 0, baseline_cycles: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptState {
    config: AdaptConfig,
    current_n: usize,
    flat_streak: usize,
    prev_loss: Option<f64>,
    layers: Vec<LayerAdaptState>,
}

impl AdaptState {
    pub fn new(config: AdaptConfig, layers: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            current_n: config.initial_n,
            config,
            flat_streak: 0,
            prev_loss: None,
            layers: alloc::vec![LayerAdaptState::default(); layers],
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn current_n(&self) -> usize {
        self.current_n
    }

    pub fn flat_streak(&self) -> usize {
        self.flat_streak
    }

    pub fn layer(&self, i: usize) -> &LayerAdaptState {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[LayerAdaptState] {
        &self.layers
    }

    pub fn detection_on(&self, layer: usize) -> bool {
        self.layers.get(layer).is_some_and(|l| l.detection_on)
    }

    /// Force a layer's detection off (it stays off).
    pub fn disable(&mut self, layer: usize) {
        self.layers[layer].detection_on = false;
    }

    /// Feed one iteration's loss; returns true when N grew.
    pub fn observe_loss(&mut self, loss: f64) -> bool {
        let flat = match self.prev_loss {
            Some(prev) => (loss - prev).abs() <= self.config.loss_flat_tol * prev.abs().max(1.0),
            None => false,
        };
        self.prev_loss = Some(loss);
        if !flat {
            self.flat_streak = 0;
            return false;
        }
        self.flat_streak += 1;
        if self.flat_streak < self.config.k {
            return false;
        }
        self.flat_streak = 0;
        if self.current_n < self.config.max_n {
            self.current_n += 1;
            true
        } else {
            false
        }
    }

    /// Feed one batch's cycle costs for `layer`; returns true when this call
    /// disabled detection.
    pub fn observe_batch_costs(&mut self, layer: usize, mercury_cycles: u64, baseline_cycles: u64) -> bool {
        let t = self.config.t;
        let l = &mut self.layers[layer];
        if !l.detection_on {
            return false;
        }
        l.mercury_cycles += mercury_cycles;
        l.baseline_cycles += baseline_cycles;
        if mercury_cycles > baseline_cycles {
            l.unprofitable_streak += 1;
        } else {
            l.unprofitable_streak = 0;
        }
        if l.unprofitable_streak >= t {
            l.detection_on = false;
            true
        } else {
            false
        }
    }
}

/// Closed-form row-stationary cycles of a conv layer without reuse:
/// `ceil(P / sets) * (k1 + k2) * F * C`, plus filter loads.
pub fn analytic_baseline_cycles(spec: &ConvLayerSpec, cfg: &PEArrayConfig) -> Result<u64> {
    spec.validate()?;
    let sets = cfg.pe_sets(spec.kernel.0)? as u64;
    let p = spec.output_positions() as u64;
    let fc = (spec.out_channels * spec.in_channels) as u64;
    Ok(p.div_ceil(sets) * cfg.dot_cycles(spec.kernel) * fc + fc * cfg.filter_load_cycles)
}

/// FC counterpart: `ceil(batch / PEs) * out * in` MACs on the busiest PE.
pub fn analytic_fc_baseline_cycles(spec: &FCLayerSpec, batch: usize, cfg: &PEArrayConfig) -> Result<u64> {
    spec.validate()?;
    let pes = cfg.pe_count.min(batch.max(1));
    Ok(batch.div_ceil(pes) as u64 * (spec.out_features * spec.in_features) as u64 * cfg.mac_latency)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(k: usize, t: usize) -> AdaptState {
        AdaptState::new(AdaptConfig { k, t, ..Default::default() }, 2).unwrap()
    }

    #[test]
    fn flat_losses_grow_n() {
        let mut s = state(3, 3);
        let grew: Vec<bool> = [1.0, 1.0, 1.0, 1.0].iter().map(|&l| s.observe_loss(l)).collect();
        assert_eq!(grew, [false, false, false, true]);
        assert_eq!(s.current_n(), 21);
    }

    #[test]
    fn decreasing_losses_keep_n() {
        let mut s = state(3, 3);
        for i in 0..100 {
            s.observe_loss(10.0 - i as f64 * 0.05);
        }
        assert_eq!(s.current_n(), 20);
    }

    #[test]
    fn n_is_capped() {
        let mut s = AdaptState::new(AdaptConfig { k: 1, max_n: 22, ..Default::default() }, 0).unwrap();
        for _ in 0..10 {
            s.observe_loss(0.5);
        }
        assert_eq!(s.current_n(), 22);
    }

    #[test]
    fn stoppage_after_t_batches() {
        let mut s = state(3, 3);
        assert!(!s.observe_batch_costs(0, 10, 5));
        assert!(!s.observe_batch_costs(0, 10, 5));
        assert!(s.observe_batch_costs(0, 10, 5));
        assert!(!s.detection_on(0));
        assert!(!s.observe_batch_costs(0, 1, 5));
        assert!(!s.detection_on(0));
        assert!(s.detection_on(1));
        for i in 0..20 {
            s.observe_batch_costs(1, if i % 2 == 0 { 10 } else { 1 }, 5);
        }
        assert!(s.detection_on(1));
    }

    #[test]
    fn analytic_hand_count() {
        let spec = ConvLayerSpec::simple((5, 5), (3, 3));
        let cfg = PEArrayConfig { pe_count: 9, ..Default::default() };
        assert_eq!(analytic_baseline_cycles(&spec, &cfg).unwrap(), 18);
        let two = ConvLayerSpec { out_channels: 2, ..spec };
        assert_eq!(analytic_baseline_cycles(&two, &cfg).unwrap(), 36);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig { initial_n: 70, ..Default::default() }.validate().is_err());
        assert!(AdaptConfig { k: 0, ..Default::default() }.validate().is_err());
    }
}
