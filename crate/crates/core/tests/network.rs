use irdet_core::data::{synth_dataset, SynthParams};
use irdet_core::net::HEAD_BIAS;
use irdet_core::registry::Strategies;
use irdet_core::train::{multi_head_loss, poly_lr, soft_iou_loss, train, AdamW, TrainParams};
use irdet_core::{Ablation, Error, Model, NetConfig, Session};
use irdet_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MICRO: [usize; 5] = [8, 16, 32, 64, 128];
const TINY: [usize; 5] = [4, 8, 16, 32, 64];

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

#[test]
fn default_config_k_schedule() {
    let cfg = NetConfig::default();
    assert_eq!(cfg.channels, vec![64, 128, 256, 512, 1024]);
    assert_eq!(cfg.offset_o, 3);
    assert_eq!(cfg.stage_k(), vec![512, 256, 128, 64, 32]);
}

#[test]
fn heads_come_back_at_input_resolution() {
    let model = Model::<f32>::build(NetConfig::with_channels(&MICRO), 0).unwrap();
    assert_eq!(model.head_count(), 4);
    let x = random(&[2, 1, 64, 64], 1).cast::<f32>();
    for training in [true, false] {
        let logits = model.logits(&x, training).unwrap();
        assert_eq!(logits.len(), 4);
        assert!(logits.iter().all(|l| l.shape() == [2, 1, 64, 64]));
    }
    let cfg = NetConfig {
        deep_supervision: false,
        ..NetConfig::with_channels(&MICRO)
    };
    let single = Model::<f32>::build(cfg, 0).unwrap();
    assert_eq!(single.head_count(), 1);
    assert_eq!(single.logits(&x, false).unwrap().len(), 1);
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    for channels in [vec![8, 16, 32, 64], vec![8, 16, 16, 32, 64], vec![8, 16, 24, 64, 128]] {
        let cfg = NetConfig::with_channels(&channels);
        assert!(matches!(Model::<f32>::build(cfg, 0), Err(Error::InvalidNetwork(_))));
    }
    let model = Model::<f32>::build(NetConfig::with_channels(&TINY), 0).unwrap();
    assert!(model.predict(&Tensor::zeros(&[1, 1, 40, 40])).is_err());
    assert!(model.predict(&Tensor::zeros(&[1, 2, 32, 32])).is_err());
}

#[test]
fn unknown_strategy_names_are_reported() {
    let mut cfg = NetConfig::with_channels(&TINY);
    cfg.attention = "sparse".into();
    match Model::<f32>::build(cfg, 0) {
        Err(Error::UnknownStrategy { kind, name, known }) => {
            assert_eq!(kind, "channel attention");
            assert_eq!(name, "sparse");
            assert!(known.contains("serank"));
        }
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("unknown attention accepted"),
    }
    let s = Strategies::<f32>::builtin();
    assert!(s.encoders.names().contains(&"ddc-cdc"));
}

#[test]
fn ablation_switches_pick_strategies() {
    let base = NetConfig::with_channels(&TINY).with_ablation(Ablation::BASELINE);
    assert_eq!((base.encoder.as_str(), base.attention.as_str(), base.fusion.as_str()), ("conv", "identity", "concat"));
    let full = NetConfig::default();
    assert_eq!((full.encoder.as_str(), full.attention.as_str(), full.fusion.as_str()), ("ddc", "serank", "lsff"));
    let x = random(&[1, 1, 32, 32], 2);
    for a in [
        Ablation::BASELINE,
        Ablation { pe: false, ..Ablation::FULL },
        Ablation { cdc: false, ..Ablation::FULL },
        Ablation { dilated: false, ..Ablation::FULL },
        Ablation { lsff: false, ..Ablation::FULL },
    ] {
        let m = Model::<f64>::build(NetConfig::with_channels(&TINY).with_ablation(a), 3).unwrap();
        assert_eq!(m.predict(&x).unwrap().shape(), &[1, 1, 32, 32]);
    }
    let plain = Model::<f64>::build(NetConfig::with_channels(&TINY).with_ablation(Ablation::BASELINE), 3).unwrap();
    let full = Model::<f64>::build(NetConfig::with_channels(&TINY), 3).unwrap();
    assert!(plain.store().parameter_count() < full.store().parameter_count());
}

#[test]
fn config_text_round_trip() {
    let mut cfg = NetConfig::with_channels(&MICRO).with_ablation(Ablation { pe: false, ..Ablation::FULL });
    cfg.deep_supervision = false;
    cfg.offset_o = 1;
    assert_eq!(NetConfig::from_text(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn forward_is_deterministic() {
    let a = Model::<f64>::build(NetConfig::with_channels(&TINY), 11).unwrap();
    let b = Model::<f64>::build(NetConfig::with_channels(&TINY), 11).unwrap();
    let c = Model::<f64>::build(NetConfig::with_channels(&TINY), 12).unwrap();
    let x = random(&[2, 1, 32, 32], 4);
    for training in [true, false] {
        assert_eq!(a.logits(&x, training).unwrap(), b.logits(&x, training).unwrap());
        assert_eq!(a.logits(&x, training).unwrap(), a.logits(&x, training).unwrap());
    }
    assert_ne!(a.logits(&x, false).unwrap(), c.logits(&x, false).unwrap());
}

#[test]
fn predict_is_the_sigmoid_of_the_final_head() {
    let model = Model::<f64>::build(NetConfig::with_channels(&TINY), 5).unwrap();
    let x = random(&[2, 1, 32, 32], 6);
    let p = model.predict(&x).unwrap();
    let z = &model.logits(&x, false).unwrap()[0];
    for (&p, &z) in p.data().iter().zip(z.data()) {
        assert!(p > 0.0 && p < 1.0);
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
    }
    // Fresh heads start close to the empty prediction.
    let mean = p.mean();
    assert!(mean < 0.2, "{mean}");
    let bias = model.store().id("dec1.head.bias").unwrap();
    assert_eq!(model.store().get(bias).data(), &[HEAD_BIAS]);
}

#[test]
fn every_parameter_receives_a_gradient() {
    let model = Model::<f64>::build(NetConfig::with_channels(&TINY), 7).unwrap();
    let x = random(&[2, 1, 32, 32], 8);
    let y = random(&[2, 1, 32, 32], 9).map(|v| if v > 0.9 { 1.0 } else { 0.0 });
    let tape = Tape::new();
    let s = Session::training(&tape, model.store());
    let out = model.forward(&s, tape.constant(x)).unwrap();
    let loss = multi_head_loss(&out.logits, tape.constant(y)).unwrap();
    let mut g = tape.backward(loss).unwrap();
    let grads = s.gradients(&mut g);
    let trainable: Vec<_> = model.store().trainable().collect();
    assert_eq!(grads.len(), trainable.len());
    for (id, grad) in grads {
        assert!(
            grad.data().iter().any(|&v| v != 0.0),
            "{} has an all-zero gradient",
            model.store().name(id)
        );
    }
}

#[test]
fn soft_iou_examples() {
    let tape = Tape::new();
    let y = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
    let sharp = y.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
    let loss = soft_iou_loss(tape.constant(sharp), tape.constant(y.clone())).unwrap();
    assert!(loss.value().item() < 1e-6);

    let empty = Tensor::full(&[1, 1, 2, 2], 0.0f64);
    let cold = Tensor::full(&[1, 1, 2, 2], -800.0f64);
    let loss = soft_iou_loss(tape.constant(cold), tape.constant(empty)).unwrap();
    assert_eq!(loss.value().item(), 0.0);

    let half = Tensor::zeros(&[1, 1, 2, 2]);
    let loss = soft_iou_loss(tape.constant(half), tape.constant(y.clone())).unwrap();
    assert!((loss.value().item() - 0.5).abs() < 1e-15);

    assert!(soft_iou_loss(tape.constant(Tensor::zeros(&[1, 1, 2, 3])), tape.constant(y)).is_err());
}

#[test]
fn multi_head_loss_is_the_mean() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0f64, 0.0]).unwrap());
    let a = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![40.0, -40.0]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
    let la = soft_iou_loss(a, y).unwrap().value().item();
    let lb = soft_iou_loss(b, y).unwrap().value().item();
    let mean = multi_head_loss(&[a, b], y).unwrap().value().item();
    assert!((mean - (la + lb) / 2.0).abs() < 1e-15);
}

#[test]
fn poly_lr_examples() {
    assert_eq!(poly_lr(0.1, 0, 100, 0.9), 0.1);
    assert_eq!(poly_lr(0.1, 100, 100, 0.9), 0.0);
    assert!((poly_lr(0.1, 50, 100, 1.0) - 0.05).abs() < 1e-15);
    let lrs: Vec<f64> = (0..=100).map(|i| poly_lr(1.0, i, 100, 0.9)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

mod adamw {
    use super::*;
    use irdet_core::ParamStore;

    fn store(values: &[f64]) -> (ParamStore<f64>, irdet_core::ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap(), true)
            .unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = store(&[1.0, -2.0, 3.0]);
        let mut opt = AdamW::new(0.0);
        for _ in 0..5 {
            opt.step(&mut s, &[(id, Tensor::zeros(&[3]))], 0.1);
        }
        assert_eq!(s.get(id).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let (mut s, id) = store(&[0.5, -0.5]);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut s, &[(id, Tensor::full(&[2], 1.0))], 1e-3);
        for (&after, before) in s.get(id).data().iter().zip([0.5, -0.5]) {
            assert!((after - (before - 1e-3)).abs() < 1e-10);
        }
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let (mut s, id) = store(&[2.0, -4.0]);
        let mut opt = AdamW::new(0.1);
        for _ in 0..3 {
            opt.step(&mut s, &[(id, Tensor::zeros(&[2]))], 0.5);
        }
        let f = (1.0f64 - 0.05).powi(3);
        assert!((s.get(id).data()[0] - 2.0 * f).abs() < 1e-15);
        assert!((s.get(id).data()[1] + 4.0 * f).abs() < 1e-15);
    }

    /// Textbook Adam, written against plain vectors.
    struct Reference {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    }

    impl Reference {
        fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
            self.t += 1;
            for i in 0..p.len() {
                self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
                self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
                let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
                let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
                p[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
    }

    #[test]
    fn without_decay_matches_reference_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let init: Vec<f64> = (0..17).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut s, id) = store(&init);
        let mut opt = AdamW::new(0.0);
        let mut p = init.clone();
        let mut r = Reference {
            m: vec![0.0; 17],
            v: vec![0.0; 17],
            t: 0,
        };
        for i in 0..100 {
            let g: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lr = poly_lr(1e-2, i, 100, 0.9);
            opt.step(&mut s, &[(id, Tensor::new(&[17], g.clone()).unwrap())], lr);
            r.step(&mut p, &g, lr);
        }
        for (a, b) in s.get(id).data().iter().zip(&p) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let moments = opt.moments[id.index()].as_ref().unwrap();
        assert!(moments.v.data().iter().all(|&v| v >= 0.0));
    }
}

fn micro_data() -> irdet_core::data::Dataset {
    synth_dataset(&SynthParams {
        count: 8,
        size: 64,
        seed: 1,
        ..Default::default()
    })
    .unwrap()
}

fn micro_params(epochs: usize, lr: f64) -> TrainParams {
    TrainParams {
        epochs,
        lr,
        batch: 4,
        resolution: 64,
        seed: 1,
        ..TrainParams::default()
    }
}

#[test]
fn training_is_deterministic_and_makes_progress() {
    let data = micro_data();
    let hp = micro_params(2, 5e-3);
    let run = || {
        let mut model = Model::<f32>::build(NetConfig::with_channels(&MICRO), 1).unwrap();
        let mut opt = AdamW::new(hp.weight_decay);
        let trace = train(&mut model, &data, &hp, &mut opt).unwrap();
        (trace, model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma.store().get(ma.store().id("enc1.serank.w_q").unwrap()), mb.store().get(mb.store().id("enc1.serank.w_q").unwrap()));
    assert_eq!(a.steps.len(), 4);
    assert_eq!(a.epoch_losses.len(), 2);
    assert!(a.epoch_losses[1] <= a.epoch_losses[0]);
    assert_eq!(a.steps.iter().map(|s| s.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert_eq!(a.steps[0].lr, 5e-3);
    let csv = a.to_csv();
    assert!(csv.starts_with("step,epoch,lr,loss\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn zero_learning_rate_changes_nothing_but_statistics() {
    let data = micro_data();
    let mut model = Model::<f32>::build(NetConfig::with_channels(&TINY), 2).unwrap();
    let before = model.store().clone();
    let mut opt = AdamW::new(1e-2);
    train(&mut model, &data, &micro_params(1, 0.0), &mut opt).unwrap();
    let store = model.store();
    for id in store.ids() {
        if store.is_trainable(id) {
            assert_eq!(store.get(id), before.get(id), "{}", store.name(id));
        }
    }
    assert!(store.ids().any(|id| !store.is_trainable(id) && store.get(id) != before.get(id)));
}

#[test]
fn training_preconditions() {
    let data = micro_data();
    let mut model = Model::<f32>::build(NetConfig::with_channels(&TINY), 2).unwrap();
    let mut opt = AdamW::new(1e-2);
    let mut hp = micro_params(1, 1e-3);
    hp.resolution = 72;
    assert!(train(&mut model, &data, &hp, &mut opt).is_err());
    hp.resolution = 128;
    assert!(train(&mut model, &data, &hp, &mut opt).is_err());
    hp.resolution = 64;
    hp.batch = 0;
    assert!(train(&mut model, &data, &hp, &mut opt).is_err());
    let empty = irdet_core::data::Dataset::default();
    assert!(train(&mut model, &empty, &micro_params(1, 1e-3), &mut opt).is_err());
    assert_eq!(opt.step, 0);
}

#[test]
fn resumed_training_continues_the_step_count() {
    let data = micro_data();
    let mut model = Model::<f32>::build(NetConfig::with_channels(&TINY), 3).unwrap();
    let mut opt = AdamW::new(1e-2);
    train(&mut model, &data, &micro_params(1, 1e-3), &mut opt).unwrap();
    let trace = train(&mut model, &data, &micro_params(1, 1e-3), &mut opt).unwrap();
    assert_eq!(trace.steps.first().unwrap().step, 3);
    assert_eq!(opt.step, 4);
}
