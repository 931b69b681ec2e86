use proptest::prelude::*;

use super::*;
use crate::params::Param;

struct One(Param<f64>);

impl Module<f64> for One {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<f64>)) {
        f(&self.0)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        f(&mut self.0)
    }
}

fn one(values: &[f64]) -> One {
    One(Param::new("w", Tensor::from_f64([values.len()], values).unwrap()))
}

fn grads(values: &[f64]) -> BTreeMap<String, Tensor<f64>> {
    BTreeMap::from([("w".to_string(), Tensor::from_f64([values.len()], values).unwrap())])
}

const CFG: AdamWConfig = AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-15, weight_decay: 0.0, clip: 1e9 };

#[test]
fn schedule_endpoints() {
    let s = Schedule { lr_base: 1e-3, lr_min: 1e-5, warmup: 10, total: 110 };
    s.validate().unwrap();
    assert_eq!(s.lr(0), 0.0);
    assert_eq!(s.lr(5), 5e-4);
    assert_eq!(s.lr(10), 1e-3);
    assert!((s.lr(60) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    assert!((s.lr(110) - 1e-5).abs() < 1e-18);
    let bound = s.lr_base * std::f64::consts::PI / 100.0;
    for k in 10..110 {
        assert!((s.lr(k + 1) - s.lr(k)).abs() <= bound);
    }
    assert!(Schedule { warmup: 110, ..s }.validate().is_err());
    assert!(Schedule { lr_min: 1.0, ..s }.validate().is_err());
    Schedule { warmup: 0, total: 0, ..s }.validate().unwrap();
}

#[test]
fn zero_grads_without_decay_change_nothing() {
    let mut m = one(&[0.5, -2.0]);
    let mut opt = AdamW::default();
    for _ in 0..3 {
        let info = opt.step(&mut m, grads(&[0.0, 0.0]), 1e-2, &CFG);
        assert!(!info.skipped);
    }
    assert_eq!(m.0.value.data(), &[0.5, -2.0]);
}

#[test]
fn first_step_closed_form() {
    let (w0, g, lr) = (0.3, -0.02, 1e-2);
    let cfg = AdamWConfig { weight_decay: 0.1, eps: 1e-3, ..CFG };
    let mut m = one(&[w0]);
    AdamW::default().step(&mut m, grads(&[g]), lr, &cfg);
    // m̂ = g and v̂ = g² after bias correction
    let expect = w0 * (1.0 - lr * 0.1) - lr * g / (g.abs() + 1e-3);
    assert!((m.0.value.data()[0] - expect).abs() < 1e-15);
}

#[test]
fn second_step_matches_hand_moments() {
    let (g1, g2, lr) = (0.5, -0.25, 0.1);
    let mut m = one(&[0.0]);
    let mut opt = AdamW::default();
    opt.step(&mut m, grads(&[g1]), lr, &CFG);
    opt.step(&mut m, grads(&[g2]), lr, &CFG);
    let m2 = 0.9 * 0.1 * g1 + 0.1 * g2;
    let v2 = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
    let upd2 = (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-15);
    let expect = -lr * 1.0 - lr * upd2;
    assert!((m.0.value.data()[0] - expect).abs() < 1e-12);
}

#[test]
fn non_finite_grads_skip_the_step() {
    let mut m = one(&[1.0]);
    let mut opt = AdamW::default();
    let info = opt.step(&mut m, grads(&[f64::NAN]), 0.1, &CFG);
    assert!(info.skipped);
    assert_eq!(opt, AdamW::default());
    assert_eq!(m.0.value.data(), &[1.0]);
}

#[test]
fn state_round_trips_through_checkpoint() {
    let mut m = one(&[1.0, 2.0]);
    let mut opt = AdamW::default();
    opt.step(&mut m, grads(&[0.1, -0.3]), 0.1, &CFG);
    let mut ema = Ema::default();
    let ecfg = EmaConfig { beta: 0.9, start_step: 0, every: 1, power: 0.75 };
    ema.maybe_update(&m, 1, &ecfg);
    let mut ck = Checkpoint::new(0);
    opt.save(&mut ck);
    ema.save(&mut ck);
    let ck = Checkpoint::from_bytes(&ck.to_bytes(), None).unwrap();
    assert_eq!(AdamW::load(&ck).unwrap(), opt);
    assert_eq!(Ema::load(&ck).unwrap(), ema);
}

#[test]
fn ema_gating_and_decay() {
    let cfg = EmaConfig { beta: 0.9999, start_step: 100, every: 5, power: 0.75 };
    assert!(!cfg.active(95) && !cfg.active(101) && cfg.active(100) && cfg.active(105));
    assert_eq!(cfg.effective_beta(0), 0.0);
    assert!((cfg.effective_beta(1) - (1.0 - 0.5f64.powf(0.75))).abs() < 1e-15);
    assert_eq!(cfg.effective_beta(u64::MAX / 2), 0.9999);

    let m = one(&[2.0, -1.0]);
    let mut ema = Ema::default();
    assert!(!ema.maybe_update(&m, 99, &cfg));
    assert!(ema.is_empty());
    assert!(ema.maybe_update(&m, 100, &cfg));
    assert_eq!(ema.shadow["w"].data(), &[2.0, -1.0]);
}

#[test]
fn ema_converges_monotonically_to_constant_params() {
    let cfg = EmaConfig { beta: 0.9, start_step: 0, every: 1, power: 0.75 };
    let mut ema = Ema::default();
    ema.maybe_update(&one(&[0.0]), 0, &cfg);
    let m = one(&[1.0]);
    let mut last = 1.0;
    for step in 1..200 {
        ema.maybe_update(&m, step, &cfg);
        let gap = 1.0 - ema.shadow["w"].data()[0];
        assert!(gap <= last && gap >= 0.0);
        last = gap;
    }
    assert!(last < 1e-8);
}

proptest! {
    #[test]
    fn clipping_hits_threshold_and_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..20), max in 0.01f64..5.0) {
        let mut g = grads(&v);
        let before = global_norm(&g);
        clip_global_norm(&mut g, max);
        let after = global_norm(&g);
        if before > max {
            prop_assert!((after - max).abs() <= 1e-9);
        } else {
            prop_assert_eq!(&g, &grads(&v));
        }
        let again = g.clone();
        clip_global_norm(&mut g, max);
        prop_assert!(global_norm(&g) <= max + 1e-9);
        prop_assert!(g["w"].max_abs_diff(&again["w"]) <= 1e-15 * (1.0 + again["w"].max_abs()));
    }

    #[test]
    fn schedule_stays_in_range(step in 0u64..=500, warmup in 0u64..100) {
        let s = Schedule { lr_base: 2e-3, lr_min: 1e-6, warmup, total: 500 };
        let lr = s.lr(step);
        prop_assert!((0.0..=2e-3).contains(&lr));
        if step >= warmup {
            prop_assert!(lr >= 1e-6 - 1e-18);
        }
    }
}
