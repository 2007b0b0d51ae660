mod common;

use proptest::prelude::*;
use simreuse_core::adapt::{analytic_baseline_cycles, AdaptConfig, AdaptState};
use simreuse_core::dataflow::{
    baseline_forward, simulate_forward, simulate_without_detection, CycleReport, Dataflow, PEArrayConfig,
};
use simreuse_core::mcache::{HitState, Hitmap, MCache, MCacheConfig};
use simreuse_core::reuse::forward_conv_with_reuse;
use simreuse_core::rpq::{signature_of, signatures_via_convolution, ProjectionMatrix, Signature, SignatureTable};
use simreuse_core::tensor::{conv2d_forward, extract_input_vectors, Activation, ConvLayerSpec, Tensor};

fn conv_spec() -> impl Strategy<Value = ConvLayerSpec> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2, 3usize..10, 3usize..10).prop_filter_map(
        "output must be non-empty",
        |(c, f, k1, k2, stride, padding, h, w)| {
            let spec = ConvLayerSpec {
                in_channels: c,
                out_channels: f,
                kernel: (k1, k2),
                input: (h, w),
                stride,
                padding,
                activation: Activation::Identity,
            };
            spec.validate().ok().map(|_| spec)
        },
    )
}

fn tensor_for(shape: Vec<usize>, seed: u64) -> Tensor {
    common::random_tensor(shape, &mut common::rng(seed))
}

fn cache_config() -> impl Strategy<Value = MCacheConfig> {
    (0u32..4, 0u32..4).prop_map(|(s, w)| {
        let ways = 1usize << w;
        MCacheConfig { total_entries: ways << s, ways, versions: 2, result_width: 1 }
    })
}

/// Signatures from a small alphabet so that repeats occur.
fn small_signatures(len: usize, alphabet: u64, bits: usize, seed: u64) -> Vec<Signature> {
    use rand::Rng;
    let mut r = common::rng(seed);
    (0..len)
        .map(|_| Signature::from_words(vec![r.random_range(0..alphabet)], bits).unwrap())
        .collect()
}

fn probe_all(cache: &mut MCache, sigs: Vec<Signature>) -> (Vec<HitState>, Hitmap) {
    let n = sigs.len();
    let mut table = SignatureTable::from_signatures(sigs);
    let mut hitmap = Hitmap::new(n);
    let states = (0..n).map(|i| cache.probe_and_update(i, &mut hitmap, &mut table).unwrap()).collect();
    (states, hitmap)
}

fn random_hitmaps(spec: &ConvLayerSpec, seed: u64) -> Vec<Hitmap> {
    use rand::Rng;
    let mut r = common::rng(seed);
    (0..spec.in_channels)
        .map(|_| {
            Hitmap::from_states((0..spec.output_positions()).map(|_| match r.random_range(0..3) {
                0 => HitState::Hit,
                1 => HitState::Mau,
                _ => HitState::Mnu,
            }))
        })
        .collect()
}

const FLOWS: [(Dataflow, bool); 4] = [(Dataflow::Rs, false), (Dataflow::Rs, true), (Dataflow::Ws, false), (Dataflow::Is, false)];

fn small_pe() -> PEArrayConfig {
    PEArrayConfig { pe_count: 12, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_route_equals_per_vector_signatures(spec in conv_spec(), seed in any::<u64>(), n in 1usize..80) {
        let chan = ConvLayerSpec { in_channels: 1, ..spec };
        let input = tensor_for(vec![spec.input.0, spec.input.1], seed);
        let p = ProjectionMatrix::new(seed ^ 1, spec.kernel_area(), n).unwrap();
        let table = signatures_via_convolution(&input, &chan, &p).unwrap();
        let vectors = extract_input_vectors(&input, &chan).unwrap();
        prop_assert_eq!(table.len(), vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            prop_assert_eq!(table.signature(i).unwrap(), &signature_of(v, &p).unwrap());
        }
    }

    #[test]
    fn equal_vectors_get_equal_signatures(v in prop::collection::vec(-10.0f32..10.0, 1..30), seed in any::<u64>(), n in 1usize..100) {
        let p = ProjectionMatrix::new(seed, v.len(), n).unwrap();
        let copy = v.clone();
        prop_assert_eq!(signature_of(&v, &p).unwrap(), signature_of(&copy, &p).unwrap());
    }

    #[test]
    fn longer_signatures_refine_shorter_ones(
        a in prop::collection::vec(-1.0f32..1.0, 9),
        b in prop::collection::vec(-1.0f32..1.0, 9),
        seed in any::<u64>(),
        n in 1usize..70,
    ) {
        let short = ProjectionMatrix::new(seed, 9, n).unwrap();
        let long = ProjectionMatrix::new(seed, 9, n + 1).unwrap();
        let (la, lb) = (signature_of(&a, &long).unwrap(), signature_of(&b, &long).unwrap());
        prop_assert_eq!(la.prefix(n), signature_of(&a, &short).unwrap());
        if la == lb {
            prop_assert_eq!(signature_of(&a, &short).unwrap(), signature_of(&b, &short).unwrap());
        }
    }

    #[test]
    fn power_of_two_scaling_keeps_the_signature(v in prop::collection::vec(-1.0f32..1.0, 1..20), e in -20i32..20, seed in any::<u64>()) {
        let p = ProjectionMatrix::new(seed, v.len(), 64).unwrap();
        let c = 2.0f32.powi(e);
        let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
        prop_assert_eq!(signature_of(&v, &p).unwrap(), signature_of(&scaled, &p).unwrap());
    }

    #[test]
    fn positive_scaling_keeps_the_signature_away_from_zero(v in prop::collection::vec(-1.0f32..1.0, 1..20), c in 1e-3f32..1e3, seed in any::<u64>()) {
        let p = ProjectionMatrix::new(seed, v.len(), 32).unwrap();
        let norm: f64 = v.iter().map(|&x| (x as f64).abs()).sum();
        for j in 0..32 {
            let d = simreuse_core::tensor::dot_f64(&v, p.column(j));
            prop_assume!(d.abs() > 1e-4 * norm.max(1e-6));
        }
        let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
        prop_assert_eq!(signature_of(&v, &p).unwrap(), signature_of(&scaled, &p).unwrap());
    }

    #[test]
    fn probe_states_follow_a_set_model(cfg in cache_config(), len in 0usize..200, alphabet in 1u64..64, seed in any::<u64>()) {
        let mut cache = MCache::new(cfg).unwrap();
        let sigs = small_signatures(len, alphabet, 12, seed);
        let (states, hitmap) = probe_all(&mut cache, sigs.clone());
        let mut model: Vec<Vec<Signature>> = vec![Vec::new(); cfg.sets()];
        let mut maus = vec![0usize; cfg.sets()];
        for (s, &state) in sigs.iter().zip(&states) {
            let set = s.low_bits(cfg.index_bits()) as usize;
            let expect = if model[set].contains(s) {
                HitState::Hit
            } else if model[set].len() < cfg.ways {
                model[set].push(s.clone());
                maus[set] += 1;
                HitState::Mau
            } else {
                HitState::Mnu
            };
            prop_assert_eq!(state, expect);
        }
        let (h, a, m) = hitmap.counts();
        prop_assert_eq!(h + a + m, len);
        prop_assert!(maus.iter().all(|&k| k <= cfg.ways));
        prop_assert_eq!(cache.occupancy(), a);
        prop_assert!(cache.check_invariants());
    }

    #[test]
    fn lines_are_never_replaced(cfg in cache_config(), len in 0usize..200, alphabet in 1u64..64, seed in any::<u64>()) {
        let mut cache = MCache::new(cfg).unwrap();
        let sigs = small_signatures(len, alphabet, 12, seed);
        let mut table = SignatureTable::from_signatures(sigs);
        let mut hitmap = Hitmap::new(len);
        let mut before: Vec<Vec<Signature>> = (0..cfg.sets()).map(|s| cache.set_tags(s)).collect();
        for i in 0..len {
            let state = cache.probe_and_update(i, &mut hitmap, &mut table).unwrap();
            let after: Vec<Vec<Signature>> = (0..cfg.sets()).map(|s| cache.set_tags(s)).collect();
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(b.iter().all(|t| a.contains(t)));
            }
            let grew: usize = after.iter().map(Vec::len).sum::<usize>() - before.iter().map(Vec::len).sum::<usize>();
            prop_assert_eq!(grew, usize::from(state == HitState::Mau));
            before = after;
        }
    }

    #[test]
    fn same_cycle_probes_match_sequential_probes(cfg in cache_config(), len in 1usize..120, alphabet in 1u64..32, width in 1usize..9, seed in any::<u64>()) {
        let sigs = small_signatures(len, alphabet, 12, seed);
        let mut seq = MCache::new(cfg).unwrap();
        let (expect, _) = probe_all(&mut seq, sigs.clone());
        let mut par = MCache::new(cfg).unwrap();
        let mut table = SignatureTable::from_signatures(sigs);
        let mut hitmap = Hitmap::new(len);
        let ordinals: Vec<usize> = (0..len).collect();
        let mut got = Vec::new();
        for chunk in ordinals.chunks(width) {
            got.extend(par.probe_cycle(chunk, &mut hitmap, &mut table).unwrap().states);
        }
        prop_assert_eq!(got, expect);
        prop_assert!(hitmap.is_complete());
    }

    #[test]
    fn valid_data_implies_valid_tag(cfg in cache_config(), len in 0usize..100, alphabet in 1u64..32, seed in any::<u64>(), writes in prop::collection::vec((0usize..100, 0usize..2), 0..40)) {
        let mut cache = MCache::new(cfg).unwrap();
        let sigs = small_signatures(len, alphabet, 12, seed);
        let mut table = SignatureTable::from_signatures(sigs);
        let mut hitmap = Hitmap::new(len);
        for i in 0..len {
            cache.probe_and_update(i, &mut hitmap, &mut table).unwrap();
        }
        for (ord, version) in writes {
            if let Some(id) = table.entry(ord) {
                cache.write_result(id, version, &[ord as f64]).unwrap();
                prop_assert!(cache.line(id).unwrap().vt());
                prop_assert_eq!(cache.read_result(id, version).unwrap(), Some(&[ord as f64][..]));
            }
            prop_assert!(cache.check_invariants());
        }
        cache.invalidate_vd_all();
        prop_assert!(cache.check_invariants());
    }

    #[test]
    fn more_hits_never_cost_more(spec in conv_spec(), seed in any::<u64>(), flips in prop::collection::vec(any::<prop::sample::Index>(), 1..8), bits in 1usize..40) {
        let pe = small_pe();
        let maps = random_hitmaps(&spec, seed);
        let mut better = maps.clone();
        for ix in flips {
            let c = ix.index(better.len());
            let o = ix.index(better[c].len());
            let mut states: Vec<HitState> = better[c].iter().collect();
            states[o] = HitState::Hit;
            better[c] = Hitmap::from_states(states);
        }
        for (flow, asynchronous) in FLOWS {
            let a = simulate_forward(&spec, &maps, bits, flow, asynchronous, &pe).unwrap();
            let b = simulate_forward(&spec, &better, bits, flow, asynchronous, &pe).unwrap();
            prop_assert!(b.signature_cycles <= a.signature_cycles, "{:?}", flow);
            prop_assert!(b.compute_cycles <= a.compute_cycles, "{:?} {}", flow, asynchronous);
            prop_assert!(b.total_cycles <= a.total_cycles, "{:?} {}", flow, asynchronous);
            if !asynchronous {
                prop_assert!(b.stall_cycles <= a.stall_cycles, "{:?}", flow);
            }
        }
    }

    #[test]
    fn async_is_never_slower(spec in conv_spec(), seed in any::<u64>(), slots in prop::sample::select(vec![2usize, 4]), bits in 1usize..40) {
        let pe = PEArrayConfig { filter_slots: slots, ..small_pe() };
        let maps = random_hitmaps(&spec, seed);
        let s = simulate_forward(&spec, &maps, bits, Dataflow::Rs, false, &pe).unwrap();
        let a = simulate_forward(&spec, &maps, bits, Dataflow::Rs, true, &pe).unwrap();
        prop_assert!(a.total_cycles <= s.total_cycles);
    }

    #[test]
    fn all_mnu_costs_baseline_plus_signatures(spec in conv_spec(), bits in 1usize..40) {
        let pe = small_pe();
        let maps = vec![Hitmap::uniform(spec.output_positions(), HitState::Mnu); spec.in_channels];
        let base = baseline_forward(&spec, &pe).unwrap();
        prop_assert_eq!(base.total_cycles, analytic_baseline_cycles(&spec, &pe).unwrap());
        for (flow, asynchronous) in FLOWS {
            let r = simulate_forward(&spec, &maps, bits, flow, asynchronous, &pe).unwrap();
            prop_assert_eq!(r.total_cycles, r.baseline_cycles + r.signature_cycles, "{:?} {}", flow, asynchronous);
            if flow == Dataflow::Rs {
                prop_assert_eq!(r.total_cycles - r.signature_cycles, analytic_baseline_cycles(&spec, &pe).unwrap());
            }
            let off = simulate_without_detection(&spec, flow, asynchronous, &pe).unwrap();
            prop_assert_eq!(off.total_cycles, r.total_cycles - r.signature_cycles);
            prop_assert_eq!(off.signature_cycles, 0);
        }
    }

    #[test]
    fn dot_products_are_conserved_in_timing(spec in conv_spec(), seed in any::<u64>(), bits in 1usize..40) {
        let pe = small_pe();
        let maps = random_hitmaps(&spec, seed);
        let demand = (spec.output_positions() * spec.in_channels * spec.out_channels) as u64;
        let mut first: Option<CycleReport> = None;
        for (flow, asynchronous) in FLOWS {
            let r = simulate_forward(&spec, &maps, bits, flow, asynchronous, &pe).unwrap();
            prop_assert_eq!(r.dot_products_executed + r.dot_products_reused, demand);
            prop_assert_eq!(r, simulate_forward(&spec, &maps, bits, flow, asynchronous, &pe).unwrap());
            if let Some(f) = &first {
                prop_assert_eq!(f.dot_products_reused, r.dot_products_reused);
            }
            first = Some(r);
        }
    }

    #[test]
    fn reuse_engine_conserves_dot_products(spec in conv_spec(), seed in any::<u64>(), n in 8usize..40, dup in 0.0f64..0.9) {
        let spec = ConvLayerSpec { kernel: (spec.kernel.0, spec.kernel.0), ..spec };
        prop_assume!(spec.validate().is_ok());
        let input = periodic_input(&spec, dup, seed);
        let w = tensor_for(spec.weight_shape(), seed ^ 3);
        let p = ProjectionMatrix::new(seed, spec.kernel_area(), n).unwrap();
        let mut cache = MCache::new(MCacheConfig::default()).unwrap();
        let out = forward_conv_with_reuse(&input, &w, &spec, &p, &mut cache, true).unwrap();
        let demand = (spec.output_positions() * spec.in_channels * spec.out_channels) as u64;
        prop_assert_eq!(out.stats.executed + out.stats.reused, demand);
        let hits: usize = out.hitmaps.iter().map(|h| h.counts().0).sum();
        prop_assert_eq!(out.stats.reused, (hits * spec.out_channels) as u64);
    }

    #[test]
    fn disabled_detection_is_the_reference(spec in conv_spec(), seed in any::<u64>(), relu in any::<bool>()) {
        let spec = ConvLayerSpec { activation: if relu { Activation::ReLU } else { Activation::Identity }, ..spec };
        let input = tensor_for(spec.input_shape(), seed);
        let w = tensor_for(spec.weight_shape(), seed ^ 3);
        let p = ProjectionMatrix::new(seed, spec.kernel_area(), 20).unwrap();
        let mut cache = MCache::new(MCacheConfig::default()).unwrap();
        let out = forward_conv_with_reuse(&input, &w, &spec, &p, &mut cache, false).unwrap();
        let reference = conv2d_forward(&input, &w, &spec).unwrap();
        prop_assert_eq!(out.stats.reused, 0);
        prop_assert!(out.output.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adaptation_is_monotone(
        losses in prop::collection::vec(prop::sample::select(vec![1.0f64, 1.0005, 0.9, 2.0]), 1..200),
        costs in prop::collection::vec((0usize..3, 0u64..20, 0u64..20), 0..200),
        k in 1usize..6,
        t in 1usize..5,
    ) {
        let mut s = AdaptState::new(AdaptConfig { k, t, max_n: 30, ..Default::default() }, 3).unwrap();
        let mut n = s.current_n();
        let mut on = [true; 3];
        for (i, &loss) in losses.iter().enumerate() {
            s.observe_loss(loss);
            prop_assert!(s.current_n() >= n && s.current_n() <= 30);
            n = s.current_n();
            if let Some(&(layer, m, b)) = costs.get(i) {
                s.observe_batch_costs(layer, m, b);
            }
            for (l, was) in on.iter_mut().enumerate() {
                prop_assert!(*was || !s.detection_on(l));
                *was = s.detection_on(l);
            }
        }
    }

    #[test]
    fn false_merges_never_grow_with_n(seed in any::<u64>(), count in 2usize..40, n in 1usize..40) {
        let mut r = common::rng(seed);
        let vectors: Vec<Vec<f32>> = (0..count).map(|_| common::random_tensor(vec![9], &mut r).into_data()).collect();
        let merges = |bits: usize| {
            let p = ProjectionMatrix::new(seed, 9, bits).unwrap();
            let sigs: Vec<Signature> = vectors.iter().map(|v| signature_of(v, &p).unwrap()).collect();
            let mut pairs = 0;
            for i in 0..count {
                for j in 0..i {
                    if sigs[i] == sigs[j] && vectors[i] != vectors[j] {
                        pairs += 1;
                    }
                }
            }
            pairs
        };
        prop_assert!(merges(n + 1) <= merges(n));
    }
}

/// Input whose channels repeat a short period of windows, so stride-k
/// windows recur.
fn periodic_input(spec: &ConvLayerSpec, dup: f64, seed: u64) -> Tensor {
    let (h, w) = spec.input;
    let period = ((1.0 - dup) * (h * w) as f64).ceil().max(1.0) as usize;
    let base = tensor_for(vec![spec.in_channels, period], seed);
    let mut data = Vec::with_capacity(spec.in_channels * h * w);
    for c in 0..spec.in_channels {
        data.extend((0..h * w).map(|i| base.slab(c)[i % period]));
    }
    Tensor::new(spec.input_shape(), data).unwrap()
}
