mod common;

use common::{parameter_count, uniform};
use mpgnet::engine::{relative_error, Mode, Shape4, Tape, Tensor};
use mpgnet::labels::LabelMap;
use mpgnet::loss::{joint_loss, seg_loss, LossWeights};
use mpgnet::model::{Ablation, Model, ModelConfig};
use mpgnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        stage_channels: [8, 16, 32, 64],
        frm_reduction: 4,
        ..ModelConfig::default()
    }
}

fn random_labels(seed: u64, n: usize, h: usize, w: usize, k: usize) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::new(n, h, w, k, (0..n * h * w).map(|_| rng.gen_range(0..k as u8)).collect()).unwrap()
}

fn probs<T: mpgnet::engine::Scalar>(model: &Model<T>, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let (pass, _) = model.forward_pure(&mut tape, v, mode).unwrap();
    tape.value(pass.output.final_probs).clone()
}

fn loss_value(model: &Model<f64>, x: &Tensor<f64>, labels: &LabelMap) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let (pass, _) = model.forward_pure(&mut tape, v, Mode::Train).unwrap();
    let j = joint_loss(&mut tape, &pass.output, labels, LossWeights::default()).unwrap();
    tape.value(j.total).item().unwrap()
}

fn gradients(model: &Model<f64>, x: &Tensor<f64>, labels: &LabelMap) -> Vec<Option<Tensor<f64>>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let (pass, _) = model.forward_pure(&mut tape, v, Mode::Train).unwrap();
    let j = joint_loss(&mut tape, &pass.output, labels, LossWeights::default()).unwrap();
    let mut grads = tape.backward(j.total).unwrap();
    model.store().collect_grads(&pass.params, &mut grads)
}

#[test]
fn parameter_count_matches_closed_form() {
    let default = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
    assert_eq!(default.parameter_count(), parameter_count(&ModelConfig::default()));
    assert_eq!(default.parameter_count(), 1_022_556);
    for variant in Ablation::ALL {
        for base in [ModelConfig::default(), small()] {
            let cfg = base.with_ablation(variant);
            let m = Model::<f32>::build(cfg.clone(), 3).unwrap();
            assert_eq!(m.parameter_count(), parameter_count(&cfg), "{variant:?}");
        }
    }
    let base = Model::<f32>::build(ModelConfig::default().with_ablation(Ablation::Baseline), 0).unwrap();
    assert!(base.parameter_count() < default.parameter_count());
}

#[test]
fn build_is_deterministic_in_seed() {
    let a = Model::<f32>::build(small(), 9).unwrap();
    let b = Model::<f32>::build(small(), 9).unwrap();
    let c = Model::<f32>::build(small(), 10).unwrap();
    assert_eq!(a.store().params(), b.store().params());
    assert_ne!(a.store().params(), c.store().params());
}

#[test]
fn invalid_configurations_are_rejected() {
    let bad_widths = ModelConfig {
        stage_channels: [8, 16, 24, 48],
        ..small()
    };
    assert!(matches!(Model::<f32>::build(bad_widths, 0), Err(Error::Config(_))));
    let one_class = ModelConfig {
        class_count: 1,
        ..small()
    };
    assert!(matches!(Model::<f32>::build(one_class, 0), Err(Error::Config(_))));

    let model = Model::<f32>::build(small(), 0).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(Shape4::new(1, 1, 20, 32))).unwrap();
    match model.forward_pure(&mut tape, v, Mode::Train) {
        Err(Error::Config(msg)) => assert!(msg.contains("divisible by 8"), "{msg}"),
        other => panic!("expected a configuration error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn forward_shapes_and_probability_sums() {
    let mut model = Model::<f32>::build(small(), 1).unwrap();
    let x = uniform(2, Shape4::new(2, 1, 64, 128), 0.0, 1.0).cast::<f32>();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let pass = model.forward(&mut tape, v, Mode::Train).unwrap();
    let out = &pass.output;
    assert_eq!(tape.shape(out.final_probs), Shape4::new(2, 8, 64, 128));
    assert_eq!(tape.shape(out.bottleneck), Shape4::new(2, 64, 8, 16));
    let aux: Vec<Shape4> = out.aux_logits.iter().map(|&a| tape.shape(a)).collect();
    assert_eq!(
        aux,
        vec![
            Shape4::new(2, 8, 16, 32),
            Shape4::new(2, 8, 32, 64),
            Shape4::new(2, 8, 64, 128)
        ]
    );
    assert_eq!(out.frm_gates.len(), 3);

    for mode in [Mode::Train, Mode::Eval] {
        let p = probs(&model, &x, mode);
        for n in 0..2 {
            for y in 0..64 {
                for xx in 0..128 {
                    let s: f32 = (0..8).map(|k| p.at(n, k, y, xx)).sum();
                    assert!((s - 1.0).abs() <= 1e-5);
                }
            }
        }
    }
}

#[test]
fn eval_mode_is_repeatable() {
    let mut model = Model::<f32>::build(small(), 4).unwrap();
    let x = uniform(5, Shape4::new(1, 1, 32, 32), 0.0, 1.0).cast::<f32>();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    model.forward(&mut tape, v, Mode::Train).unwrap();
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_before_training_reports_uninitialized_statistics() {
    let model = Model::<f32>::build(small(), 0).unwrap();
    let x = Tensor::zeros(Shape4::new(1, 1, 16, 16));
    assert!(matches!(model.predict(&x), Err(Error::UninitializedStatistics(_))));
}

#[test]
fn disabled_blocks_are_bypassed() {
    let x = uniform(6, Shape4::new(2, 1, 16, 32), 0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut model = Model::<f64>::build(small(), 8).unwrap();
    model.set_ablation(false, true).unwrap();
    let before = probs(&model, &x, Mode::Train);
    for id in model.frm_param_ids() {
        for v in model.store_mut().param_mut(id).value.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
    }
    assert_eq!(before, probs(&model, &x, Mode::Train));

    let mut model = Model::<f64>::build(small(), 8).unwrap();
    model.set_ablation(true, false).unwrap();
    let before = probs(&model, &x, Mode::Train);
    for id in model.pgm_param_ids() {
        for v in model.store_mut().param_mut(id).value.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
    }
    assert_eq!(before, probs(&model, &x, Mode::Train));

    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let (pass, _) = model.forward_pure(&mut tape, v, Mode::Train).unwrap();
    assert!(pass.output.aux_logits.is_empty());
}

#[test]
fn skip_widths_line_up_with_decoders() {
    let cfg = ModelConfig::default();
    let [c1, c2, c3, c4] = cfg.stage_channels;
    let model = Model::<f32>::build(cfg, 0).unwrap();
    let store = model.store();
    let shape = |name: &str| store.param(store.find_param(name).unwrap()).value.shape();
    assert_eq!(shape("dec1.conv.weight"), Shape4::new(c3, c3 + c4, 3, 3));
    assert_eq!(shape("dec2.conv.weight"), Shape4::new(c2, c2 + c3, 3, 3));
    assert_eq!(shape("dec3.conv.weight"), Shape4::new(c1, c1 + c2, 3, 3));
    for (i, c) in [c1, c2, c3].into_iter().enumerate() {
        assert_eq!(shape(&format!("frm{}.conv_a.weight", i + 1)).c, c);
    }
    for (d, c) in [c3, c2, c1].into_iter().enumerate() {
        assert_eq!(shape(&format!("pgm{}.conv_logits.weight", d + 1)), Shape4::new(8, c, 1, 1));
    }
    assert_eq!(shape("head.weight"), Shape4::new(8, c1, 1, 1));
    let names: std::collections::HashSet<_> = store.params().iter().map(|p| &p.name).collect();
    assert_eq!(names.len(), store.params().len());
    for p in store.params() {
        let exempt = p.name.ends_with(".bias") || p.name.ends_with(".gamma") || p.name.ends_with(".beta");
        assert_eq!(p.weight_decay_exempt, exempt, "{}", p.name);
    }
}

#[test]
fn every_parameter_receives_a_gradient() {
    let model = Model::<f32>::build(ModelConfig::default(), 11).unwrap();
    let x = uniform(12, Shape4::new(2, 1, 16, 32), 0.0, 1.0).cast::<f32>();
    let labels = random_labels(13, 2, 16, 32, 8);
    let mut tape = Tape::new();
    let v = tape.constant(x).unwrap();
    let (pass, _) = model.forward_pure(&mut tape, v, Mode::Train).unwrap();
    let j = joint_loss(&mut tape, &pass.output, &labels, LossWeights::default()).unwrap();
    let mut grads = tape.backward(j.total).unwrap();
    let collected = model.store().collect_grads(&pass.params, &mut grads);
    for (p, g) in model.store().params().iter().zip(&collected) {
        let g = g.as_ref().unwrap_or_else(|| panic!("{} received no gradient", p.name));
        assert!(g.is_finite(), "{}", p.name);
        assert!(g.data().iter().any(|&v| v != 0.0), "{} gradient is identically zero", p.name);
    }
}

#[test]
fn baseline_joint_loss_is_the_final_head() {
    let model = Model::<f64>::build(small().with_ablation(Ablation::Baseline), 0).unwrap();
    let x = uniform(14, Shape4::new(2, 1, 16, 16), 0.0, 1.0);
    let labels = random_labels(15, 2, 16, 16, 8);
    let mut tape = Tape::new();
    let v = tape.constant(x).unwrap();
    let (pass, _) = model.forward_pure(&mut tape, v, Mode::Train).unwrap();
    let j = joint_loss(&mut tape, &pass.output, &labels, LossWeights::default()).unwrap();
    let s = seg_loss(&mut tape, pass.output.final_probs, &labels, LossWeights::default()).unwrap();
    assert_eq!(j.heads.len(), 1);
    assert_eq!(tape.value(j.total).item().unwrap(), tape.value(s).item().unwrap());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        stage_channels: [4, 8, 16, 32],
        frm_reduction: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // Nonzero biases so no attention path starts out symmetric or dead.
    let biases: Vec<_> = model
        .store()
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.ends_with(".bias"))
        .map(|(i, _)| i)
        .collect();
    for i in biases {
        for v in model.store_mut().params_mut()[i].value.data_mut() {
            *v = rng.gen_range(0.1..0.4);
        }
    }
    let x = uniform(23, Shape4::new(2, 1, 16, 32), 0.0, 1.0);
    let labels = random_labels(24, 2, 16, 32, 8);
    let analytic = gradients(&model, &x, &labels);

    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for pi in 0..model.store().params().len() {
        let numel = model.store().params()[pi].value.shape().numel();
        let coords: Vec<usize> = if numel <= 8 {
            (0..numel).collect()
        } else {
            (0..4).map(|_| rng.gen_range(0..numel)).collect()
        };
        let g = analytic[pi].as_ref().expect("gradient present");
        for c in coords {
            let orig = model.store().params()[pi].value.data()[c];
            model.store_mut().params_mut()[pi].value.data_mut()[c] = orig + h;
            let plus = loss_value(&model, &x, &labels);
            model.store_mut().params_mut()[pi].value.data_mut()[c] = orig - h;
            let minus = loss_value(&model, &x, &labels);
            model.store_mut().params_mut()[pi].value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(g.data()[c], numeric);
            if err > worst.0 {
                worst = (err, format!("{}[{c}]: {} vs {numeric}", model.store().params()[pi].name, g.data()[c]));
            }
        }
    }
    assert!(worst.0 < 1e-3, "worst {:.3e} at {}", worst.0, worst.1);
}
