mod common;

use proptest::prelude::*;

use common::*;
use slimdet::cfg::LayerKind;
use slimdet::prune::{
    apply_pruning, build_masks, collect_scaling_factors, compute_global_threshold, propagate_masks, prune_once,
    ChannelMaskSet, MaskOrigin, PruneConfig,
};
use slimdet::weights::{ConvAffine, WeightStore};
use slimdet::{count_params, validate};

fn dead_channel_ratio(store: &WeightStore) -> f64 {
    let def_gammas: Vec<f32> = store
        .layers
        .iter()
        .flatten()
        .filter_map(|w| w.batch_norm())
        .flat_map(|bn| bn.gamma.iter().copied())
        .collect();
    let zeros = def_gammas.iter().filter(|&&g| g == 0.0).count();
    (zeros as f64 + 0.5) / def_gammas.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_networks_are_valid(seed in any::<u64>(), rich in any::<bool>()) {
        let def = random_network(seed, 6, 12, rich);
        prop_assert!(validate(&def).is_empty(), "{:?}", validate(&def));
        if !rich {
            prop_assert!((6..=12).contains(&def.layers.len()));
        }
    }

    #[test]
    fn propagation_matches_closure_oracle(seed in any::<u64>()) {
        let def = random_network(seed, 6, 12, false);
        let raw = random_raw_masks(&def, seed ^ 1);
        let got = propagate_masks(&def, &raw).unwrap();
        prop_assert_eq!(&got.masks, &oracle_masks(&def, &raw));
        for (i, layer) in def.layers.iter().enumerate() {
            if let LayerKind::Route(_) = layer.kind {
                let concat: Vec<bool> = def.inputs(i).unwrap().into_iter().flatten()
                    .flat_map(|s| got.masks[s].clone()).collect();
                prop_assert_eq!(&got.masks[i], &concat);
                prop_assert_eq!(got.origins[i], MaskOrigin::RouteConcat);
            }
        }
        // a fixed point
        prop_assert_eq!(propagate_masks(&def, &got).unwrap().masks, got.masks);
    }

    #[test]
    fn dead_channels_prune_without_changing_outputs(seed in any::<u64>()) {
        let def = random_network(seed, 8, 14, true);
        let mut store = WeightStore::seeded(&def, seed).unwrap();
        kill_channels(&mut store, seed ^ 7, 0.4);
        let cfg = PruneConfig { global_ratio: dead_channel_ratio(&store), ..PruneConfig::default() };
        let (pdef, pstore, report) = prune_once(&def, &store, &cfg).unwrap();
        prop_assert_eq!(report.params_after, count_params(&pdef).unwrap());
        let dev = max_deviation((&def, &store), (&pdef, &pstore), 3);
        prop_assert!(dev <= 1e-5, "deviation {}", dev);
    }

    #[test]
    fn pruned_count_is_the_percentile_rank(ratio in 0.0f64..0.99, layers in 1usize..5, width in 2usize..12, seed in any::<u64>()) {
        // plain chain, distinct factors dealt round-robin so every layer's
        // maximum sits at the top of the pool; local thresholds inert
        let mut def = slimdet::NetworkDef::new(slimdet::cfg::NetHeader::new(4, 4, 2));
        for _ in 0..layers {
            def.push(conv(width, 1, true));
        }
        def.push(conv(3, 1, false));
        let mut store = WeightStore::seeded(&def, seed).unwrap();
        let n = layers * width;
        for (l, w) in store.layers.iter_mut().flatten().enumerate().take(layers) {
            if let ConvAffine::BatchNorm(bn) = &mut w.affine {
                for c in 0..width {
                    bn.gamma[c] = ((c * layers + l + 1) as f32) / n as f32 * if c % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let top = n - layers;
        prop_assume!(((ratio * n as f64).floor() as usize) <= top);
        let cfg = PruneConfig { global_ratio: ratio, local_percentile: 0.999_999, iterations: 1 };
        let (_, _, report) = prune_once(&def, &store, &cfg).unwrap();
        let pruned = report.channels_before() - report.channels_after();
        prop_assert_eq!(pruned, (ratio * n as f64).floor() as usize);
    }

    #[test]
    fn local_floor_keeps_a_tenth(seed in any::<u64>(), ratio in 0.5f64..0.99) {
        let def = random_network(seed, 6, 12, false);
        let store = WeightStore::seeded(&def, seed).unwrap();
        let cfg = PruneConfig { global_ratio: ratio, local_percentile: 0.9, iterations: 1 };
        let (_, _, report) = prune_once(&def, &store, &cfg).unwrap();
        for l in &report.layers {
            prop_assert!(l.after * 10 >= l.before, "layer {} kept {} of {}", l.layer, l.after, l.before);
        }
    }
}

#[test]
fn ratio_zero_keeps_everything() {
    for seed in 0..6 {
        let def = random_network(seed, 8, 14, true);
        let store = WeightStore::seeded(&def, seed).unwrap();
        let (pdef, pstore, _) = prune_once(&def, &store, &PruneConfig::with_ratio(0.0)).unwrap();
        assert_eq!(pdef, def);
        assert_eq!(pstore, store);
    }
}

#[test]
fn explicit_masks_apply_like_thresholds() {
    let def = random_network(11, 8, 14, true);
    let store = WeightStore::seeded(&def, 11).unwrap();
    let factors = collect_scaling_factors(&def, &store);
    let pooled: Vec<f32> = factors.iter().flat_map(|f| f.values.clone()).collect();
    let global = compute_global_threshold(&pooled, 0.5).unwrap();
    let locals = vec![f32::INFINITY; factors.len()];
    let masks = propagate_masks(&def, &build_masks(&def, &factors, global, &locals).unwrap()).unwrap();
    let (pdef, pstore, _) = apply_pruning(&def, &store, &masks).unwrap();
    let (qdef, qstore, _) = prune_once(&def, &store, &PruneConfig { local_percentile: 0.999_999, ..PruneConfig::with_ratio(0.5) }).unwrap();
    // an inert local percentile equals infinite local thresholds unless a
    // layer's maximum sits below the global threshold
    let all_above = factors.iter().all(|f| f.values.iter().any(|&v| v >= global));
    if all_above {
        assert_eq!((pdef, pstore), (qdef, qstore));
    }
    assert!(ChannelMaskSet::all_retain(&def).is_ok());
}

#[test]
fn generator_covers_every_layer_kind() {
    let nets: Vec<_> = (0..40).map(|s| random_network(s, 6, 12, false)).collect();
    let kinds = |f: fn(&LayerKind) -> bool| nets.iter().filter(|d| count_kind(d, f) > 0).count();
    assert!(kinds(|k| matches!(k, LayerKind::Route(_))) >= 10);
    assert!(kinds(|k| matches!(k, LayerKind::Shortcut(_))) >= 10);
    assert!(kinds(|k| matches!(k, LayerKind::MaxPool(_))) >= 10);
    assert!(kinds(|k| matches!(k, LayerKind::Upsample(_))) >= 5);
    for s in 0..10 {
        let d = random_network(s, 8, 14, true);
        assert!(has_shortcut_chain(&d));
        assert!(slimdet::spp::count_spp_blocks(&d) >= 1);
        assert!(count_kind(&d, |k| matches!(k, LayerKind::Route(r) if r.layers.len() == 2)) >= 1);
    }
}

#[test]
fn dead_channel_pruning_removes_channels() {
    let mut pruned = 0;
    for seed in 0..20 {
        let def = random_network(seed, 8, 14, true);
        let mut store = WeightStore::seeded(&def, seed).unwrap();
        kill_channels(&mut store, seed ^ 7, 0.4);
        let cfg = PruneConfig { global_ratio: dead_channel_ratio(&store), ..PruneConfig::default() };
        let (_, _, report) = prune_once(&def, &store, &cfg).unwrap();
        pruned += (report.channels_after() < report.channels_before()) as usize;
    }
    assert!(pruned >= 15, "only {pruned} of 20 networks lost channels");
}
