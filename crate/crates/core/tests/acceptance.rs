//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{ldcs_oracle, random_spec, to_map};
use rfcnet::analysis::{count_flops, reference_note};
use rfcnet::autodiff::{Buffer, Shape, Tensor};
use rfcnet::data::{write_checkpoint, DatasetSpec};
use rfcnet::ldcs::{
    build_ldcs_layer, build_sdcs_layer, concat_correction, enumerate_params, ldcs_forward,
    param_count_ldcs, param_count_sdcs, LdcsLayerSpec, Merge,
};
use rfcnet::rfcnet::{
    enumerate_chains, receptive_field, ChainDescriptor, Preset, ProbeWiring, RfcConfig, RfcModel,
};
use rfcnet::training::{check_model_gradients, train_loop, TrainConfig, TrainHistory};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || {
        format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs())
    })
}

fn sdcs_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..100 {
        let (d_l, d_next) = (rng.gen_range(1..65usize), rng.gen_range(1..65usize));
        let k = [3, 5, 7, 9][rng.gen_range(0..4)];
        let layer = build_sdcs_layer::<f32>(d_l, d_next, k, false, i).map_err(|e| e.to_string())?;
        let (got, want) = (
            enumerate_params(&layer, false),
            param_count_sdcs(d_l as u64, d_next as u64, k as u64),
        );
        ensure(got == want, || {
            format!("({d_l}, {d_next}, {k}): enumerated {got}, closed form {want}")
        })?;
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!(
        "100 triples exact in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn ldcs_oracle_counts() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for merge in [Merge::Add, Merge::Concat] {
        for i in 0..200 {
            let spec = random_spec(&mut rng, merge);
            let layer = build_ldcs_layer::<f32>(&spec, i).map_err(|e| e.to_string())?;
            let closed = param_count_ldcs(&spec).map_err(|e| e.to_string())?;
            let want = match merge {
                Merge::Add => closed,
                Merge::Concat => closed + concat_correction(&spec),
            };
            let got = enumerate_params(&layer, false);
            ensure(got == want, || {
                format!("{spec:?}: enumerated {got}, expected {want}")
            })?;
        }
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!(
        "200 add + 200 concat specs exact in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn strict_reduction() -> Outcome {
    let mut tested = 0u64;
    for n_l in 2..=8usize {
        for m in 1..=4 {
            let n_next = n_l * m;
            for a in 1..=8 {
                for b in 1..=8 {
                    for k in 2..=11 {
                        let (d_l, d_next) = (n_l * a, n_next * b);
                        let spec = LdcsLayerSpec::uniform(d_l, n_l, d_next, n_next, k, Merge::Add);
                        let ldcs = param_count_ldcs(&spec).map_err(|e| e.to_string())?;
                        let sdcs = param_count_sdcs(d_l as u64, d_next as u64, k as u64);
                        ensure(ldcs < sdcs, || {
                            format!("{spec:?}: ldcs {ldcs} >= sdcs {sdcs}")
                        })?;
                        tested += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "{tested} specs with k in 2..=11, n_l in 2..=8, zero exceptions"
    ))
}

fn forward_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let merge = if i % 2 == 0 {
            Merge::Concat
        } else {
            Merge::Add
        };
        let mut spec = random_spec(&mut rng, merge);
        spec.include_bias = i % 3 != 0;
        let layer = build_ldcs_layer::<f64>(&spec, 2000 + i).map_err(|e| e.to_string())?;
        let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
        let cin = spec.d_l / spec.n_l;
        let bufs: Vec<Buffer<f64>> = (0..spec.n_l)
            .map(|_| {
                Buffer::from_fn(Shape::new(1, cin, h, w), |_, _, _, _| {
                    rng.gen_range(-1.0..1.0)
                })
            })
            .collect();
        let inputs: Vec<Tensor<f64>> = bufs.iter().cloned().map(Tensor::constant).collect();
        let got = ldcs_forward(&layer, &inputs).map_err(|e| e.to_string())?;
        let want = ldcs_oracle(&layer, &bufs.iter().map(to_map).collect::<Vec<_>>());
        for (g, wmap) in got.iter().zip(&want) {
            for (a, b) in to_map(&g.value())
                .iter()
                .flatten()
                .flatten()
                .zip(wmap.iter().flatten().flatten())
            {
                let scale = a.abs().max(b.abs());
                if scale > 0.0 {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
    }
    ensure(worst <= 1e-5, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("50 instances, max relative error {worst:.3e}"))
}

fn chain_law() -> Outcome {
    let mut cases = vec![(Preset::A, 3, 27), (Preset::B, 3, 27)];
    for depth in 1..=6 {
        cases.push((Preset::C, depth, 1 << depth));
        cases.push((Preset::D, depth, 1 << depth));
    }
    let mut total = 0;
    for (preset, depth, want) in cases {
        let cfg = RfcConfig::preset(preset).with_depth(depth);
        let chains = enumerate_chains(&cfg);
        ensure(chains.len() == want, || {
            format!(
                "preset {preset}, L={depth}: {} chains, want {want}",
                chains.len()
            )
        })?;
        for (i, chain) in chains.iter().enumerate() {
            ensure(chain.leaf_index == i, || {
                format!("preset {preset}: chain {i} has leaf {}", chain.leaf_index)
            })?;
            let mut rest = i;
            let mut digits = vec![0; depth];
            for d in digits.iter_mut().rev() {
                *d = rest % cfg.m;
                rest /= cfg.m;
            }
            let kernels: Vec<usize> = digits.iter().map(|&d| cfg.kernels[d]).collect();
            ensure(kernels == chain.kernel_sequence, || {
                format!("preset {preset}, leaf {i}: {:?}", chain.kernel_sequence)
            })?;
            let back = ChainDescriptor::for_leaf(&cfg, i).map_err(|e| e.to_string())?;
            ensure(&back == chain, || {
                format!("preset {preset}, leaf {i}: decode mismatch")
            })?;
        }
        total += chains.len();
    }
    Ok(format!(
        "27, 27, 2^L (L=1..6) chains; {total} leaf encodings checked"
    ))
}

fn rf_agreement() -> Outcome {
    let cfg = RfcConfig::preset(Preset::A).with_width(1).with_depth(3);
    let model = RfcModel::<f64>::build(&cfg).map_err(|e| e.to_string())?;
    model.set_probe_weights(ProbeWiring::StrongOnly);
    let chains = enumerate_chains(&cfg);
    for chain in &chains {
        let want = receptive_field(chain);
        let got = model
            .empirical_rf_probe(chain.leaf_index, 128)
            .map_err(|e| e.to_string())?;
        ensure(got == want, || {
            format!(
                "chain {:?}: probe {got}, analytic {want}",
                chain.kernel_sequence
            )
        })?;
    }
    let rfs: Vec<usize> = chains.iter().map(receptive_field).collect();
    ensure(rfs[0] == 34 && rfs[26] == 82, || {
        format!("extremes {} and {}", rfs[0], rfs[26])
    })?;
    Ok(format!(
        "{} chains of preset a at 128x128, rf 34..82",
        chains.len()
    ))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = RfcConfig::preset(Preset::D).with_width(2).with_depth(2);
    let report = check_model_gradients(&cfg, 8, 8, 1e-4).map_err(|e| e.to_string())?;
    let err = report.max_rel_error();
    ensure(err <= 1e-4, || {
        format!(
            "max relative error {err:.3e} at {:?}",
            report.worst().map(|w| &w.0)
        )
    })?;
    within(start, Duration::from_secs(120))?;
    Ok(format!(
        "{} coordinates, max relative error {err:.3e}, {:.1}s",
        report.checked(),
        start.elapsed().as_secs_f64()
    ))
}

fn flop_scaling() -> Outcome {
    for preset in Preset::ALL {
        let model =
            RfcModel::<f32>::build(&RfcConfig::preset(preset)).map_err(|e| e.to_string())?;
        for side in [64, 112, 224] {
            let small = count_flops(&model, side, side).totals.conv_flops;
            let big = count_flops(&model, 2 * side, 2 * side).totals.conv_flops;
            ensure(big == 4 * small, || {
                format!("preset {preset} at {side}: {small} -> {big}")
            })?;
        }
    }
    Ok("presets a-d at 64, 112, 224: exactly x4".into())
}

struct Run {
    history: TrainHistory,
    last: Vec<u8>,
    best: Vec<u8>,
    seconds: f64,
}

fn e2e_run() -> Result<Run, String> {
    let start = Instant::now();
    let cfg = RfcConfig::preset(Preset::D).with_width(8).with_depth(2);
    let (train, val) = DatasetSpec::synthetic(200, 64, 64, 0)
        .load()
        .map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let model = RfcModel::<f32>::build(&cfg).map_err(|e| e.to_string())?;
    let out = train_loop(&model, &train, &val, &tc, |_| {}).map_err(|e| e.to_string())?;
    let last = write_checkpoint(&model);
    model
        .load_state(&out.best_state)
        .map_err(|e| e.to_string())?;
    let best = write_checkpoint(&model);
    Ok(Run {
        history: out.history,
        last,
        best,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn end_to_end(run: &Run) -> Outcome {
    let h = &run.history;
    ensure(h.len() == 30, || format!("{} epochs recorded", h.len()))?;
    let best = h.best_val_miou().unwrap_or(f64::NAN);
    let last = h.epochs[29].val_miou;
    let (l1, l10) = (h.epochs[0].mean_loss, h.epochs[9].mean_loss);
    ensure(last >= 0.85, || {
        format!("final val mIoU {last:.4} < 0.85 (best {best:.4})")
    })?;
    ensure(l10 < l1, || {
        format!("epoch-10 loss {l10:.4} >= epoch-1 loss {l1:.4}")
    })?;
    ensure(run.seconds <= 600.0, || format!("took {:.1}s", run.seconds))?;
    Ok(format!(
        "final val mIoU {last:.4} (best {best:.4}), loss {l1:.4} -> {l10:.4} by epoch 10, {:.1}s",
        run.seconds
    ))
}

fn determinism(a: &Run) -> Outcome {
    let b = e2e_run()?;
    ensure(a.history == b.history, || "histories differ".into())?;
    ensure(a.last == b.last, || "last checkpoints differ".into())?;
    ensure(a.best == b.best, || "best checkpoints differ".into())?;
    Ok(format!(
        "identical histories, last and best checkpoints ({} bytes each)",
        a.last.len()
    ))
}

fn non_reproducibility_note() -> Outcome {
    let model = RfcModel::<f32>::build(&RfcConfig::preset(Preset::A)).map_err(|e| e.to_string())?;
    let note = reference_note(Preset::A, &count_flops(&model, 224, 224));
    for needle in ["NOT REPRODUCED", "5.76", "18.13", "81.31", "this build"] {
        ensure(note.contains(needle), || format!("note lacks {needle:?}"))?;
    }
    Ok("published figures shown beside this build, labeled NOT REPRODUCED".into())
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL  {name}: {detail}");
        }
    };
    report("sdcs count oracle", sdcs_oracle());
    report("ldcs count oracle", ldcs_oracle_counts());
    report("strict ldcs reduction", strict_reduction());
    report("ldcs forward fidelity", forward_fidelity());
    report("chain law", chain_law());
    report("receptive-field agreement", rf_agreement());
    report("gradient correctness", gradient_check());
    report("flop scaling", flop_scaling());
    match e2e_run() {
        Ok(run) => {
            report("end-to-end training", end_to_end(&run));
            report("determinism", determinism(&run));
        }
        Err(e) => {
            report("end-to-end training", Err(e.clone()));
            report("determinism", Err(e));
        }
    }
    report("non-reproducibility statement", non_reproducibility_note());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
