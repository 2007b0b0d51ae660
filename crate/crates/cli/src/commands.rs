//! The four subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use simreuse_core::dataflow::{simulate_forward, simulate_without_detection, CycleReport, Dataflow};
use simreuse_core::mcache::{HitState, Hitmap, MCache, MCacheConfig};
use simreuse_core::reuse::{forward_conv_with_reuse, ReuseStats};
use simreuse_core::rpq::{uniqueness_trial, HashMethod, ProjectionMatrix, UniquenessRow};
use simreuse_core::tensor::ConvLayerSpec;
use simreuse_core::trainer::{compare, synthetic_dataset, train as train_arm, ArmResult, EpochRecord, ModelSpec, TrainOptions};

use crate::config::RunConfig;
use crate::mrcy;
use crate::output::Outputs;
use crate::synth::{derive_seed, duplicated_input, random_tensor};

#[derive(Debug, Serialize)]
struct RpqSummaryRow {
    length: usize,
    method: HashMethod,
    trials: usize,
    mean_unique: f64,
    exact_trials: usize,
}

pub fn rpq_experiment(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let params = &cfg.rpq.params;
    let trials: Vec<Vec<UniquenessRow>> = (0..cfg.rpq.trials as u64)
        .into_par_iter()
        .map(|t| uniqueness_trial(params, cfg.seed.wrapping_add(t)))
        .collect::<Result<_, _>>()?;
    let rows: Vec<UniquenessRow> = trials.into_iter().flatten().collect();
    let mut groups: BTreeMap<(usize, HashMethod), Vec<usize>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.length, r.method)).or_default().push(r.unique_count);
    }
    let summary = groups.into_iter().map(|((length, method), counts)| RpqSummaryRow {
        length,
        method,
        trials: counts.len(),
        mean_unique: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        exact_trials: counts.iter().filter(|&&c| c == params.base_count).count(),
    });
    let mut o = Outputs::new(out, "rpq-experiment", cfg)?;
    o.csv("rpq_experiment.csv", &rows)?;
    o.csv("rpq_summary.csv", summary)?;
    Ok(o.commit())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimPoint {
    pub layer: usize,
    pub duplicate_fraction: f64,
    pub cache: MCacheConfig,
    pub report: CycleReport,
    /// Per channel: (hits, maus, mnus).
    pub channels: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Serialize)]
struct SimRow {
    layer: usize,
    duplicate_fraction: f64,
    total_entries: usize,
    ways: usize,
    dataflow: Dataflow,
    asynchronous: bool,
    bits: usize,
    signature_cycles: u64,
    compute_cycles: u64,
    stall_cycles: u64,
    total_cycles: u64,
    baseline_cycles: u64,
    modeled_speedup: f64,
    net_speedup: f64,
    reuse_fraction: f64,
}

#[derive(Debug, Serialize)]
struct ChannelRow {
    layer: usize,
    duplicate_fraction: f64,
    total_entries: usize,
    ways: usize,
    channel: usize,
    vectors: usize,
    hits: usize,
    maus: usize,
    mnus: usize,
}

fn sweep_caches(cfg: &RunConfig) -> Vec<MCacheConfig> {
    let mut caches: Vec<MCacheConfig> =
        cfg.simulate.caches.iter().map(|c| MCacheConfig { result_width: 1, ..*c }).collect();
    let d = MCacheConfig::default();
    if !caches.iter().any(|c| c.total_entries == d.total_entries && c.ways == d.ways) {
        caches.push(d);
    }
    caches
}

fn sim_point(cfg: &RunConfig, li: usize, spec: &ConvLayerSpec, di: usize, dup: f64, cache: MCacheConfig) -> Result<SimPoint> {
    let sim = &cfg.simulate;
    let point_seed = derive_seed(cfg.seed, li as u64, di as u64);
    let (report, hitmaps) = if sim.reuse {
        let input = duplicated_input(spec, dup, point_seed);
        let weights = random_tensor(spec.weight_shape(), derive_seed(point_seed, 1, 0));
        let p = ProjectionMatrix::new(derive_seed(cfg.seed, 2, li as u64), spec.kernel_area(), sim.bits)?;
        let mut mc = MCache::new(cache)?;
        let fwd = forward_conv_with_reuse(&input, &weights, spec, &p, &mut mc, true)?;
        let r = simulate_forward(spec, &fwd.hitmaps, sim.bits, sim.dataflow, sim.asynchronous, &sim.pe)?;
        (r, fwd.hitmaps)
    } else {
        let r = simulate_without_detection(spec, sim.dataflow, sim.asynchronous, &sim.pe)?;
        (r, vec![Hitmap::uniform(spec.output_positions(), HitState::Mnu); spec.in_channels])
    };
    Ok(SimPoint { layer: li, duplicate_fraction: dup, cache, report, channels: hitmaps.iter().map(Hitmap::counts).collect() })
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let sim = &cfg.simulate;
    ensure!(!sim.layers.is_empty(), "simulate.layers is empty");
    let caches = sweep_caches(cfg);
    let mut jobs = Vec::new();
    for (li, spec) in sim.layers.iter().enumerate() {
        for (di, &dup) in sim.duplicate_fractions.iter().enumerate() {
            for &c in &caches {
                jobs.push((li, spec, di, dup, c));
            }
        }
    }
    let points: Vec<SimPoint> = jobs
        .into_par_iter()
        .map(|(li, spec, di, dup, c)| sim_point(cfg, li, spec, di, dup, c).with_context(|| format!("layer {li}, d = {dup}")))
        .collect::<Result<_>>()?;
    let rows = points.iter().map(|p| SimRow {
        layer: p.layer,
        duplicate_fraction: p.duplicate_fraction,
        total_entries: p.cache.total_entries,
        ways: p.cache.ways,
        dataflow: sim.dataflow,
        asynchronous: sim.asynchronous,
        bits: sim.bits,
        signature_cycles: p.report.signature_cycles,
        compute_cycles: p.report.compute_cycles,
        stall_cycles: p.report.stall_cycles,
        total_cycles: p.report.total_cycles,
        baseline_cycles: p.report.baseline_cycles,
        modeled_speedup: p.report.modeled_speedup,
        net_speedup: p.report.net_speedup(),
        reuse_fraction: p.report.reuse_fraction(),
    });
    let channel_rows = points.iter().flat_map(|p| {
        p.channels.iter().enumerate().map(move |(channel, &(hits, maus, mnus))| ChannelRow {
            layer: p.layer,
            duplicate_fraction: p.duplicate_fraction,
            total_entries: p.cache.total_entries,
            ways: p.cache.ways,
            channel,
            vectors: hits + maus + mnus,
            hits,
            maus,
            mnus,
        })
    });
    let mut o = Outputs::new(out, "simulate", cfg)?;
    o.json("simulate.json", "points", &points)?;
    o.csv("simulate.csv", rows)?;
    o.csv("simulate_channels.csv", channel_rows)?;
    Ok(o.commit())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub epochs: Vec<EpochRecord>,
    pub stats: ReuseStats,
    pub cycles: CycleReport,
    pub mercury_cycles: u64,
    pub baseline_cycles: u64,
}

impl ArmSummary {
    fn of(a: &ArmResult) -> Self {
        Self {
            epochs: a.epochs.clone(),
            stats: a.stats,
            cycles: a.cycles,
            mercury_cycles: a.epochs.iter().map(|e| e.mercury_cycles).sum(),
            baseline_cycles: a.epochs.iter().map(|e| e.baseline_cycles).sum(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelSpec,
    pub baseline: ArmSummary,
    pub mercury: ArmSummary,
    pub accuracy_gap_points: f64,
    pub cycle_ratio: f64,
}

#[derive(Debug, Serialize)]
struct TraceRow {
    iteration: usize,
    signature_bits: usize,
    /// Per-layer flags, `;`-separated.
    detection_on: String,
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let t = &cfg.train;
    let data = match &t.data {
        Some(p) => mrcy::load(p)?,
        None => synthetic_dataset(&t.synthetic)?,
    };
    let (tr, va) = data.split(t.train_count);
    ensure!(!tr.is_empty(), "no training samples (train_count = {})", t.train_count);
    let mut model = match &t.model {
        Some(m) => m.clone(),
        None => ModelSpec::desk_cnn(data.height, data.width, data.classes, t.filters),
    };
    model.seed = cfg.seed;
    if let Some(e) = t.epochs {
        model.epochs = e;
    }
    if let Some(lr) = t.learning_rate {
        model.learning_rate = lr;
    }
    if let Some(b) = t.batch_size {
        model.batch_size = b;
    }
    let base_opts = TrainOptions { mercury_on: false, ..t.options };
    let merc_opts = TrainOptions { mercury_on: true, ..t.options };
    let (base, merc) = rayon::join(|| train_arm(&model, &tr, &va, &base_opts), || train_arm(&model, &tr, &va, &merc_opts));
    let (base, merc) = (base.context("baseline arm")?, merc.context("reuse arm")?);
    let gap = match (base.epochs.last(), merc.epochs.last()) {
        (Some(b), Some(m)) => (m.val_accuracy - b.val_accuracy).abs() * 100.0,
        _ => 0.0,
    };
    let m = ArmSummary::of(&merc);
    let summary = TrainSummary {
        model,
        cycle_ratio: m.mercury_cycles as f64 / m.baseline_cycles.max(1) as f64,
        baseline: ArmSummary::of(&base),
        mercury: m,
        accuracy_gap_points: gap,
    };
    let trace = merc.trace.iter().map(|r| TraceRow {
        iteration: r.iteration,
        signature_bits: r.signature_bits,
        detection_on: r.detection_on.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(";"),
    });
    let mut o = Outputs::new(out, "train", cfg)?;
    o.csv("train_comparison.csv", compare(&base, &merc))?;
    o.csv("adapt_trace.csv", trace)?;
    o.json("train.json", "summary", &summary)?;
    Ok(o.commit())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub source: String,
    pub label: String,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub count: usize,
    pub geomean_speedup: f64,
}

pub fn geometric_mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() || xs.iter().any(|&x| !(x > 0.0)) {
        return None;
    }
    Some((xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp())
}

fn report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let source = path.display().to_string();
    match doc.get("command").and_then(|c| c.as_str()) {
        Some("simulate") => {
            let points: Vec<SimPoint> = serde_json::from_value(doc["points"].clone())
                .with_context(|| format!("{}: malformed points", path.display()))?;
            Ok(points
                .into_iter()
                .map(|p| ReportRow {
                    source: source.clone(),
                    label: format!("layer {} d={} cache {}/{}", p.layer, p.duplicate_fraction, p.cache.total_entries, p.cache.ways),
                    speedup: p.report.modeled_speedup,
                })
                .collect())
        }
        Some("train") => {
            let s: TrainSummary = serde_json::from_value(doc["summary"].clone())
                .with_context(|| format!("{}: malformed summary", path.display()))?;
            let speedup = s.mercury.baseline_cycles as f64 / s.mercury.mercury_cycles.max(1) as f64;
            Ok(vec![ReportRow { source, label: "train".into(), speedup }])
        }
        other => bail!("{}: not a simulate or train output (command {:?})", path.display(), other),
    }
}

pub fn build_report(inputs: &[PathBuf]) -> Result<Report> {
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(report_rows(p)?);
    }
    let speedups: Vec<f64> = rows.iter().map(|r| r.speedup).collect();
    let geomean_speedup = geometric_mean(&speedups).context("no positive speedups to aggregate")?;
    Ok(Report { count: rows.len(), rows, geomean_speedup })
}

pub fn report(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let r = build_report(inputs)?;
    let mut o = Outputs::new(out, "report", cfg)?;
    o.csv("report.csv", &r.rows)?;
    o.json("report.json", "report", &r)?;
    Ok(o.commit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_mean_by_hand() {
        assert!((geometric_mean(&[2.0, 8.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!((geometric_mean(&[1.5]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(geometric_mean(&[]), None);
        assert_eq!(geometric_mean(&[1.0, 0.0]), None);
    }

    #[test]
    fn sweep_always_has_the_default_cache() {
        let mut cfg = RunConfig::default();
        cfg.simulate.caches = vec![MCacheConfig { total_entries: 64, ways: 4, ..Default::default() }];
        let c = sweep_caches(&cfg);
        assert_eq!(c.len(), 2);
        assert!(c.iter().any(|c| c.total_entries == 1024 && c.ways == 16));
    }
}
