use rand::Rng;

use super::*;
use crate::masking::stc_mask;
use crate::params::check_module_gradients;

fn toy_config(d: usize) -> ModelConfig {
    ModelConfig {
        patch: PatchConfig { channels: 1, frames: 4, height: 8, width: 8, p_t: 1, p_s: 4, d_model: d },
        egt: EgtConfig { lg: 2, hg: 2, wg: 2, inner_param_set: false },
        layer: LayerConfig { d_model: d, expand: 2, conv_kernel: 2, n_state: 2 },
        n_blocks: 1,
        m_blocks: 1,
        head_hidden: vec![4, 3],
        mask: MaskConfig { gamma_t: 1, gamma_s: 1, p_mask: 0.5 },
        task: Task::Regress,
    }
}

fn video(seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, ids::DATA);
    Tensor::from_fn([1, 4, 8, 8], |_| rng.random_range(0.0..1.0))
}

fn mask(cfg: &ModelConfig, seed: u64) -> MaskGrid {
    stc_mask(cfg.patch.grid(), cfg.mask, &mut stream(seed, ids::MASK)).unwrap()
}

#[test]
fn config_checks() {
    let r = ModelConfig::reference();
    r.validate().unwrap();
    assert_eq!(r.head_input_width(), 10368);
    assert_eq!(r.n_blocks * 6 / 6, 6);
    let mut bad = toy_config(4);
    bad.m_blocks = 2;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut other = toy_config(4);
    assert_eq!(other.architecture_hash(), toy_config(4).architecture_hash());
    other.mask.p_mask = 0.7;
    assert_eq!(other.architecture_hash(), toy_config(4).architecture_hash());
    other.layer.n_state = 3;
    assert_ne!(other.architecture_hash(), toy_config(4).architecture_hash());
}

#[test]
fn mvm_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let t = Tensor::from_f64([3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let (p, tv) = (tape.constant(t.clone()), tape.constant(t));
    let l = mvm_loss(&mut tape, p, tv, &[true, false, true]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let p = tape.constant(Tensor::from_f64([2, 1], &[3.0, 100.0]).unwrap());
    let tv = tape.constant(Tensor::from_f64([2, 1], &[1.0, -7.0]).unwrap());
    let l = mvm_loss(&mut tape, p, tv, &[true, false]).unwrap();
    assert_eq!(tape.value(l).item(), 4.0);
    // the unmasked row does not enter
    let p2 = tape.constant(Tensor::from_f64([2, 1], &[3.0, -55.0]).unwrap());
    let l2 = mvm_loss(&mut tape, p2, tv, &[true, false]).unwrap();
    assert_eq!(tape.value(l2).item(), 4.0);
    assert!(mvm_loss(&mut tape, p, tv, &[false, false]).is_err());
}

#[test]
fn task_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::from_f64([1], &[3.0]).unwrap());
    let l = task_loss(&mut tape, p, &[5.0], Task::Regress, [1.0, 1.0]).unwrap();
    assert_eq!(tape.value(l).item(), 2.0);

    let labels = [0.0, 1.0, 1.0, 0.0];
    let w = class_weights(&labels).unwrap();
    assert_eq!(w, [1.0, 1.0]);
    let z = [0.3, -1.2, 2.0, 0.0];
    let p = tape.constant(Tensor::from_f64([4], &z).unwrap());
    let l = task_loss(&mut tape, p, &labels, Task::Classify, w).unwrap();
    let plain: f64 = z
        .iter()
        .zip(&labels)
        .map(|(&z, &y)| {
            let s = 1.0 / (1.0 + (-z as f64).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((tape.value(l).item() - plain).abs() < 1e-12);

    let w = class_weights(&[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((w[1] / w[0] - 3.0).abs() < 1e-12);
    assert!(class_weights(&[1.0, 1.0]).is_err());
    let p = tape.constant(Tensor::from_f64([1], &[0.0]).unwrap());
    assert!(task_loss(&mut tape, p, &[], Task::Regress, [1.0, 1.0]).is_err());
}

#[test]
fn pretrain_forward_shapes_and_mask_token_use() {
    let cfg = toy_config(4);
    let model: Model<f64> = Model::new(cfg.clone(), 0).unwrap();
    let v = video(1);
    let m = mask(&cfg, 2);
    let mut tape = Tape::new();
    let out = model.pretrain_forward(&mut tape, &v, &m).unwrap();
    assert_eq!(tape.shape(out.pred), &[16, 16]);
    assert_eq!(out.target.shape(), &[16, 16]);
    assert_eq!(out.token_mask.iter().filter(|&&b| b).count(), 8);
    let base = tape.value(out.loss).item();
    assert!(base > 0.0);

    let mut zeroed = model.clone();
    zeroed.mask_token.value = Tensor::zeros([4]);
    let mut tape = Tape::new();
    let out = zeroed.pretrain_forward(&mut tape, &v, &m).unwrap();
    assert_ne!(tape.value(out.loss).item(), base);
}

#[test]
fn zero_head_predicts_zero_and_globals_reach_the_prediction() {
    let cfg = toy_config(4);
    let mut model: Model<f64> = Model::new(cfg, 0).unwrap();
    let v = video(3);
    let mut tape = Tape::new();
    let y = model.downstream_forward(&mut tape, &v).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let g = &tape.param_grads()["egt.families"];
    for f in 0..26 {
        assert!(g.data()[f * 4..f * 4 + 4].iter().any(|&x| x != 0.0), "family {f} has no gradient");
    }
    assert_eq!(model.predict(&v).unwrap(), model.predict(&v).unwrap());

    for layer in &mut model.head {
        layer.visit_mut(&mut |p| p.value = Tensor::zeros(p.value.shape().to_vec()));
    }
    assert_eq!(model.predict(&v).unwrap(), 0.0);
    assert_eq!(model.predict(&video(4)).unwrap(), 0.0);
}

#[test]
fn pretrain_gradients_match_finite_differences() {
    let cfg = toy_config(8);
    let model: Model<f64> = Model::new(cfg.clone(), 5).unwrap();
    let v = video(6);
    let m = mask(&cfg, 7);
    let report = check_module_gradients(&model, 2, 1e-6, |mm, tape| Ok(mm.pretrain_forward(tape, &v, &m)?.loss)).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn downstream_gradients_match_finite_differences() {
    let cfg = toy_config(8);
    let model: Model<f64> = Model::new(cfg, 8).unwrap();
    let v = video(9);
    let report = check_module_gradients(&model, 2, 1e-6, |mm, tape| {
        let y = mm.downstream_forward(tape, &v)?;
        task_loss(tape, y, &[0.7], Task::Classify, [1.0, 2.0])
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn delta_maps_have_one_group_per_block() {
    let mut cfg = toy_config(4);
    cfg.n_blocks = 3;
    let model: Model<f64> = Model::new(cfg, 0).unwrap();
    let maps = delta_maps(&model, &video(0)).unwrap();
    assert_eq!(maps.len(), 3);
    for m in &maps {
        assert_eq!(m.grid, [4, 2, 2]);
        assert_eq!(m.values.len(), 16);
        let lo = m.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.values.iter().copied().fold(0.0, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
    assert_eq!(normalize_unit(&[0.3; 5]), vec![0.0; 5]);

    let dir = tempfile::tempdir().unwrap();
    let files = export_delta_maps(&model, &video(0), dir.path()).unwrap();
    assert_eq!(files.len(), 3 * 4);
    let bytes = std::fs::read(&files[0]).unwrap();
    assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(bytes.len(), 11 + 4);
}

#[test]
fn load_values_is_all_or_nothing() {
    let cfg = toy_config(4);
    let mut a: Model<f64> = Model::new(cfg.clone(), 0).unwrap();
    let b: Model<f64> = Model::new(cfg, 1).unwrap();
    let before = a.named_values();
    let mut vals = b.named_values();
    vals.remove("mask_token");
    assert!(a.load_values(&vals).is_err());
    assert_eq!(a.named_values(), before);
    a.load_values(&b.named_values()).unwrap();
    assert_eq!(a.named_values(), b.named_values());
}

#[test]
fn reconstruction_export_keeps_visible_patches() {
    let cfg = toy_config(4);
    let model: Model<f64> = Model::new(cfg.clone(), 0).unwrap();
    let v = video(2);
    let m = mask(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let files = export_reconstruction(&model, &v, &m, dir.path()).unwrap();
    assert_eq!(files.len(), 3 * 4);
    let orig = std::fs::read(dir.path().join("orig_f000.pgm")).unwrap();
    let masked = std::fs::read(dir.path().join("masked_f000.pgm")).unwrap();
    let recon = std::fs::read(dir.path().join("recon_f000.pgm")).unwrap();
    assert!(orig.starts_with(b"P5\n8 8\n255\n"));
    // the first frame's patches follow the mask's first four entries
    let header = 11;
    for y in 0..8 {
        for x in 0..8 {
            let patch = (y / 4) * 2 + x / 4;
            let px = header + y * 8 + x;
            if m.token_mask[patch] {
                assert_eq!(masked[px], 0);
            } else {
                assert_eq!((masked[px], recon[px]), (orig[px], orig[px]));
            }
        }
    }
}
