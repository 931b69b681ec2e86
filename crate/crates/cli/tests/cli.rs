use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "frames=8", "side=16", "p_s=8", "d_model=8", "n_state=2", "n_blocks=1", "m_blocks=1", "head_hidden=8", "n_train=8", "n_val=4",
    "pt_steps=3", "pt_warmup=1", "pt_batch=2", "ft_steps=4", "ft_warmup=1", "ft_batch=2", "ema_start=2", "ema_every=2",
];

fn run(args: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mamba3d"));
    cmd.arg("--out").arg(out);
    // later overrides win, so the test's own come last
    for o in TINY {
        cmd.arg("--override").arg(o);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = run(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["gen-data"], &data);
    assert!(data.join("train.m3d").exists() && data.join("val.m3d").exists());
    let data_s = data.to_str().unwrap();

    let pt = d.join("pt");
    ok(&["pretrain", "--quiet", "--data", data_s], &pt);
    let ckpt = pt.join("pretrain.ckpt");
    let csv = std::fs::read_to_string(pt.join("pretrain_metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,metric,value\n"));
    assert!(csv.contains("3,train,loss,"));

    let ft = d.join("ft");
    ok(&["finetune", "--quiet", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap()], &ft);
    let best = ft.join("best.ckpt");
    assert!(best.exists());

    let ev = d.join("ev");
    let printed = ok(&["eval", "--data", data_s, "--checkpoint", best.to_str().unwrap()], &ev);
    assert!(printed.contains("r2 "));
    assert!(std::fs::read_to_string(ev.join("eval_metrics.csv")).unwrap().contains(",val,mae,"));

    ok(&["reconstruct", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap(), "--sample", "1"], d);
    assert_eq!(std::fs::read_dir(d.join("recon")).unwrap().count(), 3 * 8);
    ok(&["dump-delta", "--data", data_s, "--checkpoint", best.to_str().unwrap()], d);
    assert_eq!(std::fs::read_dir(d.join("delta")).unwrap().count(), 8);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["pretrain", "--quiet", "--seed", "4"], &a);
    ok(&["pretrain", "--quiet", "--seed", "4"], &b);
    ok(&["pretrain", "--quiet", "--seed", "5"], &c);
    let read = |p: &Path| std::fs::read(p.join("pretrain_metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "seed = 1\nlearning_rate = 3\n").unwrap();
    let o = run(&["gen-data", "--config", conf.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = run(&["gen-data", "--override", "m_blocks=5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data"], &data);
    let mut bytes = std::fs::read(data.join("train.m3d")).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(data.join("train.m3d"), bytes).unwrap();
    let o = run(&["pretrain", "--quiet", "--data", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    // a dataset rendered at another size does not fit the config
    let other = dir.path().join("other");
    ok(&["gen-data", "--override", "side=24"], &other);
    let o = run(&["pretrain", "--quiet", "--data", other.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_mask_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(&["bench-mask", "--reps", "2"], dir.path());
    let mut lines = printed.lines();
    assert_eq!(lines.next(), Some("gamma_t,gamma_s,p_mask,S_unmasked,cache_build_us,encode_us_masked,encode_us_full"));
    assert_eq!(lines.next().unwrap().split(',').count(), 7);
    assert_eq!(std::fs::read_to_string(dir.path().join("bench_mask.csv")).unwrap(), printed);
}
