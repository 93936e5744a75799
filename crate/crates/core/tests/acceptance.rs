//! Acceptance criteria A1 to A7. Each criterion prints one PASS/FAIL line.
//!
//! cargo test --release -p mpgnet --test acceptance -- --nocapture

mod common;

use std::time::{Duration, Instant};

use common::{frm_reference, pgm_reference, randomize_conv, uniform};
use mpgnet::blocks::{FrmBlock, PgmBlock};
use mpgnet::checkpoint::Checkpoint;
use mpgnet::checks::{format_results, gradient_suite};
use mpgnet::data::{generate, Sample, SynthConfig};
use mpgnet::engine::{Mode, Shape4, Tape, Tensor};
use mpgnet::labels::LabelMap;
use mpgnet::loss::{cross_entropy, dice_loss, joint_loss, seg_loss, LossWeights};
use mpgnet::model::{Ablation, ForwardOutput, Model, ModelConfig};
use mpgnet::nn::{Forward, ParamStore};
use mpgnet::train::{ablate, evaluate, train, TrainConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn a1_gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradient_suite(0).map_err(|e| e.to_string())?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    if !failed.is_empty() {
        return Err(format!("{} of {} checks failed\n{}", failed.len(), results.len(), format_results(&results)));
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    Ok(format!("{} checks, worst relative error {worst:.2e}", results.len()))
}

fn a2_block_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let mut store = ParamStore::<f64>::new();
        let frm = FrmBlock::new(&mut store, &mut rng, "frm", 16, 8).map_err(|e| e.to_string())?;
        let pgm = PgmBlock::new(&mut store, &mut rng, "pgm", 16, 8).map_err(|e| e.to_string())?;
        for conv in [&frm.conv_a, &frm.conv_b, &pgm.conv_logits, &pgm.conv_attn, &pgm.conv_transform, &pgm.conv_fuse] {
            randomize_conv(&mut store, conv, &mut rng, 0.6);
        }
        let x = uniform(2000 + i, Shape4::new(2, 16, 6, 7), -3.0, 3.0);

        let mut tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        let mut f = Forward::new(&mut tape, &store, Mode::Train).unwrap();
        let fo = frm.forward_with_gate(&mut f, v).map_err(|e| e.to_string())?;
        let po = pgm.forward(&mut f, v).map_err(|e| e.to_string())?;

        let (refined, gate) = frm_reference(&store, &frm, &x);
        let gate: Vec<f64> = gate.into_iter().flatten().collect();
        let (fused, logits) = pgm_reference(&store, &pgm, &x);
        worst = worst
            .max(max_abs(tape.value(fo.refined).data(), &refined))
            .max(max_abs(tape.value(fo.gate).data(), &gate))
            .max(max_abs(tape.value(po.fused).data(), &fused))
            .max(max_abs(tape.value(po.aux_logits).data(), &logits));

        let g = tape.value(fo.gate).data();
        check(g.iter().all(|&v| v > 0.0 && v < 1.0), || format!("instance {i}: gate outside (0,1)"))?;
        let y = tape.value(fo.refined).data();
        check(y.iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()), || {
            format!("instance {i}: refined magnitude exceeds input")
        })?;
    }
    check(worst <= 1e-6, || format!("max abs error {worst:.3e} > 1e-6"))?;

    // Zero transform branch plus identity fusion returns the input exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let mut store = ParamStore::<f64>::new();
    let pgm = PgmBlock::new(&mut store, &mut rng, "pgm", 8, 8).map_err(|e| e.to_string())?;
    for conv in [&pgm.conv_logits, &pgm.conv_attn] {
        randomize_conv(&mut store, conv, &mut rng, 0.6);
    }
    for id in pgm.conv_transform.param_ids() {
        store.param_mut(id).value.data_mut().fill(0.0);
    }
    store.param_mut(pgm.conv_fuse.weight).value =
        Tensor::from_fn(Shape4::new(8, 8, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
    store.param_mut(pgm.conv_fuse.bias.unwrap()).value.data_mut().fill(0.0);
    let x = uniform(3001, Shape4::new(2, 8, 4, 6), -2.0, 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let mut f = Forward::new(&mut tape, &store, Mode::Train).unwrap();
    let out = pgm.forward(&mut f, v).map_err(|e| e.to_string())?;
    check(tape.value(out.fused) == &x, || "residual identity is not exact".into())?;

    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("20 instances, max abs error {worst:.2e}; gate bounds and residual identity hold"))
}

fn a3_overfit() -> Outcome {
    let start = Instant::now();
    let samples = generate(&SynthConfig { seed: 1, ..SynthConfig::default() }, 4).map_err(|e| e.to_string())?;
    check(samples[0].labels.height() == 64 && samples[0].labels.width() == 128, || "samples are not 64x128".into())?;
    let model = ModelConfig {
        stage_channels: [16, 32, 64, 128],
        class_count: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 2,
        max_steps: Some(300),
        ..TrainConfig::default()
    };
    let out = train(&model, &cfg, &samples, TrainOptions::default()).map_err(|e| e.to_string())?;
    let losses = out.trace.losses();
    check(losses.len() == 300, || format!("ran {} steps", losses.len()))?;
    let (early, last) = (losses[9], losses[losses.len() - 1]);
    let f1 = evaluate(&out.model, &samples).map_err(|e| e.to_string())?.mean_foreground;
    let summary = format!("mean foreground F1 {f1:.4}, loss {early:.4} at step 10 -> {last:.4}");
    check(f1 >= 0.90, || format!("{summary}: F1 below 0.90"))?;
    check(last < 0.25 * early, || format!("{summary}: final loss not below 25% of step-10 loss"))?;
    within(start.elapsed(), Duration::from_secs(600))?;
    Ok(format!("{summary} ({:.0}s)", start.elapsed().as_secs_f64()))
}

fn a4_loss_identities() -> Outcome {
    let start = Instant::now();
    let cases = 250;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..cases {
        let n = rng.gen_range(1..3);
        let k = rng.gen_range(2..9);
        let (h, w) = (4 * rng.gen_range(1..4), 4 * rng.gen_range(1..4));
        let labels = LabelMap::new(n, h, w, k, (0..n * h * w).map(|_| rng.gen_range(0..k as u8)).collect()).unwrap();
        let alpha = rng.gen_range(0.0..3.0);
        let beta = rng.gen_range(0.01..3.0);
        let scale = rng.gen_range(0.1..10.0);
        let weights = LossWeights::new(alpha, beta).unwrap();

        let mut tape = Tape::<f64>::new();
        let mut leaf = |tape: &mut Tape<f64>, hh: usize, ww: usize| {
            let t = Tensor::from_fn(Shape4::new(n, k, hh, ww), |_, _, _, _| rng.gen_range(-3.0..3.0));
            tape.leaf(t, true).unwrap()
        };
        let final_logits = leaf(&mut tape, h, w);
        let aux = vec![leaf(&mut tape, h / 4, w / 4), leaf(&mut tape, h / 2, w / 2), leaf(&mut tape, h, w)];
        let final_probs = tape.softmax_channels(final_logits).unwrap();
        let output = ForwardOutput {
            final_probs,
            final_logits,
            aux_logits: aux.clone(),
            bottleneck: final_logits,
            frm_gates: Vec::new(),
        };
        let joint = joint_loss(&mut tape, &output, &labels, weights).map_err(|e| e.to_string())?;
        let total = tape.value(joint.total).item().unwrap();

        let mut heads = Vec::new();
        for (i, &logits) in std::iter::once(&final_logits).chain(&aux).enumerate() {
            let s = tape.shape(logits);
            let scaled = labels.resize_nearest(s.h, s.w);
            let mut t = Tape::<f64>::new();
            let v = t.constant(tape.value(logits).clone()).unwrap();
            let p = t.softmax_channels(v).unwrap();
            let ce = cross_entropy(&mut t, p, &scaled).unwrap();
            let dl = dice_loss(&mut t, p, &scaled).unwrap();
            let seg = seg_loss(&mut t, p, &scaled, weights).unwrap();
            let seg_scaled = seg_loss(&mut t, p, &scaled, LossWeights::new(scale * alpha, scale * beta).unwrap()).unwrap();
            let (ce, dl, seg, seg_scaled) = (
                t.value(ce).item().unwrap(),
                t.value(dl).item().unwrap(),
                t.value(seg).item().unwrap(),
                t.value(seg_scaled).item().unwrap(),
            );
            check((0.0..=1.0).contains(&dl), || format!("case {case} head {i}: dice {dl} outside [0,1]"))?;
            check((seg_scaled - scale * seg).abs() <= 1e-10 * (1.0 + seg_scaled.abs()), || {
                format!("case {case} head {i}: seg loss not homogeneous in (alpha, beta)")
            })?;
            check((seg - (alpha * ce + beta * dl)).abs() <= 1e-10 * (1.0 + seg.abs()), || {
                format!("case {case} head {i}: seg loss is not alpha*CE + beta*Dice")
            })?;
            heads.push(seg);
        }
        let sum: f64 = heads.iter().sum();
        check((total - sum).abs() <= 1e-10 * (1.0 + sum.abs()), || {
            format!("case {case}: joint {total} != sum of heads {sum}")
        })?;

        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::full(Shape4::new(n, 8, h, w), 0.125)).unwrap();
        let labels8 = LabelMap::new(n, h, w, 8, (0..n * h * w).map(|_| rng.gen_range(0..8u8)).collect()).unwrap();
        let ce = cross_entropy(&mut t, p, &labels8).unwrap();
        let ce = t.value(ce).item().unwrap();
        check((ce - 2.0794).abs() <= 1e-4, || format!("case {case}: uniform CE {ce}"))?;
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{cases} randomized cases"))
}

fn a5_full_size_shapes() -> Outcome {
    let start = Instant::now();
    let model = Model::<f32>::build(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let input = Tensor::from_fn(Shape4::new(1, 1, 216, 496), |_, _, y, x| ((y * 7 + x * 3) % 11) as f32 / 10.0);
    let mut tape = Tape::new();
    let x = tape.constant(input).unwrap();
    let (pass, _) = model.forward_pure(&mut tape, x, Mode::Train).map_err(|e| e.to_string())?;
    let out = &pass.output;
    let k = model.config().class_count;
    let b = tape.shape(out.bottleneck);
    check((b.h, b.w) == (27, 62), || format!("bottleneck {:?}", b.dims()))?;
    let aux: Vec<_> = out.aux_logits.iter().map(|&a| tape.shape(a)).collect();
    let expect = [Shape4::new(1, k, 54, 124), Shape4::new(1, k, 108, 248), Shape4::new(1, k, 216, 496)];
    check(aux == expect, || format!("aux heads {:?}", aux.iter().map(|s| s.dims()).collect::<Vec<_>>()))?;
    check(tape.shape(out.final_probs) == Shape4::new(1, k, 216, 496), || "final head shape".into())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "bottleneck 27x62, aux 54x124 / 108x248 / 216x496 ({:.1}s)",
        start.elapsed().as_secs_f64()
    ))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        stage_channels: [8, 16, 32, 64],
        ..ModelConfig::default()
    }
}

fn small_data(n: usize, seed: u64) -> Result<Vec<Sample>, String> {
    generate(
        &SynthConfig {
            width: 64,
            seed,
            ..SynthConfig::default()
        },
        n,
    )
    .map_err(|e| e.to_string())
}

fn a6_determinism_and_persistence() -> Outcome {
    let samples = small_data(6, 60)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = |checkpoint_dir| {
        train(
            &small_model(),
            &cfg,
            &samples,
            TrainOptions {
                checkpoint_dir,
                ..TrainOptions::default()
            },
        )
        .map_err(|e| e.to_string())
    };
    let a = run(Some(dir.path()))?;
    let b = run(None)?;
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    check(bits(a.trace.losses()) == bits(b.trace.losses()), || "loss traces differ".into())?;

    let ck = Checkpoint::load(a.checkpoint.as_ref().ok_or("no checkpoint written")?).map_err(|e| e.to_string())?;
    let restored = ck.restore().map_err(|e| e.to_string())?;
    for (i, s) in samples.iter().enumerate() {
        let x = s.image.to_tensor::<f32>();
        let p = a.model.predict(&x).map_err(|e| e.to_string())?;
        let q = restored.predict(&x).map_err(|e| e.to_string())?;
        check(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()), || {
            format!("sample {i}: restored outputs differ")
        })?;
    }
    Ok(format!(
        "{} identical trace steps; restored outputs bit-identical on {} samples",
        a.trace.steps.len(),
        samples.len()
    ))
}

fn a7_ablation() -> Outcome {
    let start = Instant::now();
    let train_set = small_data(20, 70)?;
    let held_out = small_data(8, 71)?;
    let steps = 200;
    let cfg = TrainConfig {
        epochs: steps / 10,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let seeds = [0, 1, 2];
    let report = ablate(&small_model(), &cfg, &train_set, Some(&held_out), &seeds, |_, _, _| {})
        .map_err(|e| e.to_string())?;
    let k = small_model().class_count;
    check(report.rows.len() == 4, || format!("{} rows", report.rows.len()))?;
    for r in &report.rows {
        check(r.f1.len() == k && r.per_seed.len() == seeds.len(), || {
            format!("{:?}: {} classes, {} seeds", r.variant, r.f1.len(), r.per_seed.len())
        })?;
    }
    let full = report.row(Ablation::Full).ok_or("no full row")?.mean_foreground;
    let base = report.row(Ablation::Baseline).ok_or("no baseline row")?.mean_foreground;
    println!("{}", report.to_text());
    Ok(format!(
        "4x{k} table over {} seeds; mean F1 full {full:.4} vs baseline {base:.4} ({:.0}s)",
        seeds.len(),
        start.elapsed().as_secs_f64()
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("A1 gradient suite", a1_gradient_suite),
        ("A2 block oracles", a2_block_oracles),
        ("A3 overfit", a3_overfit),
        ("A4 loss identities", a4_loss_identities),
        ("A5 full-size shapes", a5_full_size_shapes),
        ("A6 determinism and persistence", a6_determinism_and_persistence),
        ("A7 ablation harness", a7_ablation),
    ];
    let mut failures = Vec::new();
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("{name}: PASS  {detail}"),
            Err(why) => {
                println!("{name}: FAIL  {why}");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed: {}", failures.join(", "));
}
