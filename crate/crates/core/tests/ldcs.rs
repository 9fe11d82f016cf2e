mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{ldcs_oracle, random_spec, to_map};
use rfcnet::autodiff::{Buffer, Shape, Tensor};
use rfcnet::ldcs::{
    build_ldcs_layer, build_sdcs_layer, concat_correction, enumerate_params, ldcs_forward,
    param_count_ldcs, param_count_sdcs, LdcsLayerSpec, Merge,
};

#[test]
fn sdcs_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (d_l, d_next, k) = (
            rng.gen_range(1..65),
            rng.gen_range(1..65),
            [3, 5, 7, 9][rng.gen_range(0..4)],
        );
        let layer = build_sdcs_layer::<f32>(d_l, d_next, k, false, rng.gen()).unwrap();
        assert_eq!(
            enumerate_params(&layer, false),
            param_count_sdcs(d_l as u64, d_next as u64, k as u64)
        );
    }
}

#[test]
fn ldcs_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..200 {
        let merge = if i % 2 == 0 {
            Merge::Add
        } else {
            Merge::Concat
        };
        let spec = random_spec(&mut rng, merge);
        let layer = build_ldcs_layer::<f32>(&spec, i).unwrap();
        let enumerated = enumerate_params(&layer, false);
        assert_eq!(
            enumerated,
            param_count_ldcs(&spec).unwrap() + concat_correction(&spec),
            "{spec:?}"
        );
        if merge == Merge::Add {
            assert_eq!(concat_correction(&spec), 0);
        }
    }
}

#[test]
fn hand_values() {
    assert_eq!(param_count_sdcs(4, 8, 3), 352);
    let spec = LdcsLayerSpec::uniform(16, 2, 16, 4, 3, Merge::Add);
    // strong 4·4·9·8 + loose 16·8 + fuse 16·16/4
    assert_eq!(
        param_count_ldcs(&spec).unwrap(),
        4 * 4 * 9 * 8 + 16 * 8 + 64
    );
    assert_eq!(
        concat_correction(&LdcsLayerSpec {
            merge: Merge::Concat,
            ..spec
        }),
        64
    );
    // even kernels are countable but not buildable
    let even = LdcsLayerSpec::uniform(2, 2, 16, 2, 2, Merge::Add);
    assert_eq!(param_count_ldcs(&even).unwrap(), 8 * 4 * 2 + 16 + 128);
    assert!(build_ldcs_layer::<f32>(&even, 0).is_err());
}

#[test]
fn forward_matches_loop_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..50 {
        let merge = if i % 2 == 0 {
            Merge::Concat
        } else {
            Merge::Add
        };
        let mut spec = random_spec(&mut rng, merge);
        spec.include_bias = i % 3 != 0;
        let layer = build_ldcs_layer::<f64>(&spec, 1000 + i).unwrap();
        let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
        let cin = spec.d_l / spec.n_l;
        let bufs: Vec<Buffer<f64>> = (0..spec.n_l)
            .map(|_| {
                Buffer::from_fn(Shape::new(1, cin, h, w), |_, _, _, _| {
                    rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        let got = ldcs_forward(
            &layer,
            &bufs
                .iter()
                .cloned()
                .map(Tensor::constant)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let want = ldcs_oracle(&layer, &bufs.iter().map(to_map).collect::<Vec<_>>());
        assert_eq!(got.len(), spec.n_next);
        for (g, wmap) in got.iter().zip(&want) {
            let gmap = to_map(&g.value());
            for (a, b) in gmap
                .iter()
                .flatten()
                .flatten()
                .zip(wmap.iter().flatten().flatten())
            {
                let err = (a - b).abs() / (a.abs() + b.abs()).max(1e-12);
                assert!(
                    err <= 1e-5 || (a - b).abs() < 1e-12,
                    "instance {i}: {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn custom_parent_map_is_respected() {
    let spec = LdcsLayerSpec::uniform(4, 2, 4, 2, 3, Merge::Concat);
    let layer = build_ldcs_layer::<f64>(&spec, 9)
        .unwrap()
        .with_parents(vec![1, 0])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bufs: Vec<Buffer<f64>> = (0..2)
        .map(|_| {
            Buffer::from_fn(Shape::new(1, 2, 4, 4), |_, _, _, _| {
                rng.gen_range(-1.0..1.0)
            })
        })
        .collect();
    let got = layer
        .forward(
            &bufs
                .iter()
                .cloned()
                .map(Tensor::constant)
                .collect::<Vec<_>>(),
        )
        .unwrap();
    let want = ldcs_oracle(&layer, &bufs.iter().map(to_map).collect::<Vec<_>>());
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in to_map(&g.value())
            .iter()
            .flatten()
            .flatten()
            .zip(w.iter().flatten().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(build_ldcs_layer::<f64>(&spec, 9)
        .unwrap()
        .with_parents(vec![2, 0])
        .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ldcs_strictly_cheaper_than_sdcs(
        n_l in 2usize..9,
        m in 1usize..5,
        a in 1usize..17,
        b in 1usize..65,
        k in 2usize..12,
        add_merge: bool,
    ) {
        let n_next = n_l * m;
        let (d_l, d_next) = (n_l * a, n_next * b);
        let merge = if add_merge { Merge::Add } else { Merge::Concat };
        let spec = LdcsLayerSpec::uniform(d_l, n_l, d_next, n_next, k, merge);
        prop_assert!(param_count_ldcs(&spec).unwrap() < param_count_sdcs(d_l as u64, d_next as u64, k as u64));
    }

    #[test]
    fn one_group_degenerates_to_sdcs(d_l in 1usize..33, d_next in 1usize..33, k in prop::sample::select(vec![3usize, 5, 7])) {
        let spec = LdcsLayerSpec::uniform(d_l, 1, d_next, 1, k, Merge::Concat);
        prop_assert_eq!(param_count_ldcs(&spec).unwrap(), param_count_sdcs(d_l as u64, d_next as u64, k as u64));
        prop_assert_eq!(concat_correction(&spec), 0);
        let layer = build_ldcs_layer::<f32>(&spec, 0).unwrap();
        prop_assert_eq!(enumerate_params(&layer, false), param_count_sdcs(d_l as u64, d_next as u64, k as u64));
    }

    #[test]
    fn invalid_divisibility_rejected(n_l in 2usize..6, extra in 1usize..5) {
        let d_l = n_l * 3 + (extra % n_l).max(1);
        prop_assume!(d_l % n_l != 0);
        let spec = LdcsLayerSpec::uniform(d_l, n_l, n_l, n_l, 3, Merge::Add);
        prop_assert!(param_count_ldcs(&spec).is_err());
        prop_assert!(build_ldcs_layer::<f32>(&spec, 0).is_err());
    }
}
