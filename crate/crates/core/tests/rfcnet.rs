use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfcnet::analysis::{count_flops, count_params, reference_note, RowKind};
use rfcnet::autodiff::{Buffer, Shape, Tensor};
use rfcnet::ldcs::{concat_correction, param_count_ldcs, KernelSet, Merge};
use rfcnet::rfcnet::{
    enumerate_chains, receptive_field, receptive_field_of, tree_layer_spec, ChainDescriptor,
    Preset, ProbeWiring, RfcConfig, RfcModel,
};

fn input(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::constant(Buffer::from_fn(Shape::new(2, 3, h, w), |_, _, _, _| {
        rng.gen_range(0.0..1.0)
    }))
}

#[test]
fn forward_shapes() {
    let cfg = RfcConfig::preset(Preset::C).with_width(4).with_depth(3);
    let model = RfcModel::<f32>::build(&cfg).unwrap();
    let x = input(32, 48, 1);
    let levels = model.forward_levels(&x).unwrap();
    assert_eq!(levels.len(), 4);
    for (l, groups) in levels.iter().enumerate() {
        assert_eq!(groups.len(), 2usize.pow(l as u32));
        for g in groups {
            assert_eq!(g.shape(), Shape::new(2, 4, 8, 12));
        }
    }
    assert_eq!(model.forward(&x).unwrap().shape(), Shape::new(2, 2, 32, 48));
    assert!(model.forward(&input(30, 48, 1)).is_err());
}

#[test]
fn chain_counts_per_preset() {
    for (p, depth, want) in [
        (Preset::A, 3, 27),
        (Preset::B, 3, 27),
        (Preset::C, 4, 16),
        (Preset::D, 5, 32),
    ] {
        let cfg = RfcConfig::preset(p).with_depth(depth);
        let chains = enumerate_chains(&cfg);
        assert_eq!(chains.len(), want);
        // distinct as paths: preset b/d repeat kernel sizes, so compare leaves
        let distinct: HashSet<_> = chains.iter().map(|c| c.leaf_index).collect();
        assert_eq!(distinct.len(), want);
        assert!(chains.iter().enumerate().all(|(i, c)| c.leaf_index == i));
    }
}

#[test]
fn chain_rf_extremes_for_preset_a() {
    let cfg = RfcConfig::preset(Preset::A);
    let rfs: Vec<usize> = enumerate_chains(&cfg).iter().map(receptive_field).collect();
    assert_eq!(rfs[0], 34);
    assert_eq!(rfs[26], 82);
    assert_eq!(*rfs.iter().min().unwrap(), 34);
    assert_eq!(*rfs.iter().max().unwrap(), 82);
}

#[test]
fn rf_recursion_matches_jump_formula() {
    // one conv stack with strides: rf = 1 + Σ (k_i − 1)·Π_{j<i} s_j
    assert_eq!(receptive_field_of([(3, 1), (3, 1)]), 5);
    assert_eq!(receptive_field_of([(3, 2), (3, 1)]), 7);
    assert_eq!(receptive_field_of([(2, 2), (2, 2), (3, 1)]), 12);
}

#[test]
fn leaf_output_depends_on_its_chain_kernels() {
    let cfg = RfcConfig::preset(Preset::A).with_width(1).with_depth(2);
    let model = RfcModel::<f64>::build(&cfg).unwrap();
    model.set_probe_weights(ProbeWiring::StrongOnly);
    for leaf in [0, 4, 8] {
        let chain = ChainDescriptor::for_leaf(&cfg, leaf).unwrap();
        assert_eq!(
            model.empirical_rf_probe(leaf, 96).unwrap(),
            receptive_field(&chain)
        );
    }
}

#[test]
fn loose_wiring_widens_support() {
    let cfg = RfcConfig::preset(Preset::A).with_width(1).with_depth(2);
    let model = RfcModel::<f64>::build(&cfg).unwrap();
    model.set_probe_weights(ProbeWiring::WithLoose);
    let chain = ChainDescriptor::for_leaf(&cfg, 0).unwrap();
    assert!(model.empirical_rf_probe(0, 96).unwrap() > receptive_field(&chain));
}

#[test]
fn tree_rows_reconcile_with_closed_form() {
    for merge in [Merge::Add, Merge::Concat] {
        for p in Preset::ALL {
            let cfg = RfcConfig {
                merge,
                include_bias: false,
                ..RfcConfig::preset(p).with_width(4)
            };
            let model = RfcModel::<f32>::build(&cfg).unwrap();
            let report = count_params(&model);
            for (l, row) in report
                .rows
                .iter()
                .filter(|r| r.kind == RowKind::Ldcs)
                .enumerate()
            {
                let spec = tree_layer_spec(&cfg, l as u32);
                assert_eq!(row.analytic_params, Some(param_count_ldcs(&spec).unwrap()));
                assert_eq!(
                    row.enumerated_params,
                    row.analytic_params.unwrap() + concat_correction(&spec)
                );
                assert_eq!(row.reconciles(), Some(true));
            }
            assert_eq!(report.totals.params(), model.num_params(false));
        }
    }
}

#[test]
fn report_totals_include_bias_when_present() {
    let cfg = RfcConfig::preset(Preset::D).with_width(4);
    let model = RfcModel::<f32>::build(&cfg).unwrap();
    let report = count_flops(&model, 64, 64);
    assert_eq!(report.totals.params(), model.num_params(true));
    let text = report.render_text();
    assert!(text.contains("concat correction"));
    let note = reference_note(Preset::D, &report);
    assert!(note.contains("NOT REPRODUCED"));
    assert!(note.contains("73.24"));
}

#[test]
fn build_is_seed_deterministic() {
    let cfg = RfcConfig::preset(Preset::B).with_width(2).with_depth(2);
    let a = RfcModel::<f32>::build(&cfg).unwrap().state();
    assert_eq!(a, RfcModel::<f32>::build(&cfg).unwrap().state());
    assert_ne!(
        a,
        RfcModel::<f32>::build(&RfcConfig { seed: 1, ..cfg })
            .unwrap()
            .state()
    );
}

#[test]
fn parameter_names_are_unique() {
    let model = RfcModel::<f32>::build(&RfcConfig::preset(Preset::A).with_width(2)).unwrap();
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let set: HashSet<&String> = names.iter().collect();
    assert_eq!(set.len(), names.len());
    assert_eq!(names.first().map(String::as_str), Some("stem.conv1.weight"));
    assert_eq!(names.last().map(String::as_str), Some("head.bias"));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = RfcConfig::preset(Preset::A);
    let bad = [
        RfcConfig {
            kernels: vec![3, 5],
            ..base.clone()
        },
        RfcConfig {
            kernels: vec![3, 4, 7],
            ..base.clone()
        },
        RfcConfig {
            m: 1,
            kernels: vec![3],
            ..base.clone()
        },
        RfcConfig {
            depth: 0,
            ..base.clone()
        },
        RfcConfig {
            width: 0,
            ..base.clone()
        },
        RfcConfig {
            num_classes: 1,
            ..base.clone()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
        assert!(RfcModel::<f32>::build(&cfg).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leaf_encoding_roundtrips(preset in prop::sample::select(Preset::ALL.to_vec()), depth in 1usize..6) {
        let cfg = RfcConfig::preset(preset).with_depth(depth);
        for chain in enumerate_chains(&cfg) {
            prop_assert_eq!(chain.kernel_sequence.len(), depth);
            // base-m digits of the leaf, most significant first, name the branches
            let mut rest = chain.leaf_index;
            let mut digits = vec![0; depth];
            for d in digits.iter_mut().rev() {
                *d = rest % cfg.m;
                rest /= cfg.m;
            }
            let kernels: Vec<usize> = digits.iter().map(|&d| cfg.kernels[d]).collect();
            prop_assert_eq!(&kernels, &chain.kernel_sequence);
            prop_assert_eq!(ChainDescriptor::for_leaf(&cfg, chain.leaf_index).unwrap(), chain.clone());
            let rf = 10 + 4 * chain.kernel_sequence.iter().map(|k| k - 1).sum::<usize>();
            prop_assert_eq!(receptive_field(&chain), rf);
        }
    }

    #[test]
    fn conv_flops_quadruple(preset in prop::sample::select(Preset::ALL.to_vec()), h in 1usize..20, w in 1usize..20) {
        let model = RfcModel::<f32>::build(&RfcConfig::preset(preset).with_width(2)).unwrap();
        let small = count_flops(&model, 4 * h, 4 * w);
        let big = count_flops(&model, 8 * h, 8 * w);
        prop_assert_eq!(big.totals.conv_flops, 4 * small.totals.conv_flops);
    }

    #[test]
    fn config_kv_roundtrip(
        preset in prop::sample::select(Preset::ALL.to_vec()),
        depth in 1usize..5,
        width in 1usize..9,
        add: bool,
        bias: bool,
        seed: u64,
    ) {
        let cfg = RfcConfig {
            merge: if add { Merge::Add } else { Merge::Concat },
            include_bias: bias,
            seed,
            ..RfcConfig::preset(preset).with_width(width).with_depth(depth)
        };
        let map: BTreeMap<String, String> = cfg
            .to_kv_lines()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        prop_assert_eq!(RfcConfig::from_kv(&map).unwrap(), cfg);
    }
}
