use std::path::Path;
use std::process::Command as Process;

use dgmlab_cli::pipeline::replay;
use dgmlab_cli::{parse_config, run, Command, Dirs, ExperimentConfig, ExperimentRecord};

/// Desk config with small budgets so a full chain runs in seconds.
fn small() -> ExperimentConfig {
    parse_config(
        "train.steps = 300\n\
         data.n = 1024\n\
         attack.trigger_seeds = 0,1\n\
         defense.closest_n = 2000\n\
         defense.ob_steps = 300\n\
         report.exp_samples = 2000\n\
         report.frechet_samples = 500\n",
    )
    .unwrap()
}

fn with(cfg: &ExperimentConfig, key: &str, value: &str) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.set(key, value).unwrap();
    c
}

fn chain(dir: &Path) -> ExperimentConfig {
    let cfg = small();
    let dirs = Dirs::same(dir);
    run(&Command::Train, &cfg, &dirs).unwrap();
    for s in ["trail", "red", "rex"] {
        run(&Command::Attack, &with(&cfg, "attack.strategy", s), &dirs).unwrap();
    }
    cfg
}

#[test]
fn record_chain_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = chain(dir.path());
    let dirs = Dirs::same(dir.path());
    let defend = run(&Command::Defend, &cfg, &dirs).unwrap();
    let red = defend.table.row("red_in_sample").unwrap();
    let attack = ExperimentRecord::load(&dir.path().join("attack_red_in_sample.json")).unwrap();
    let tar = attack.table.row("red_in_sample").unwrap().tar_dis.value().unwrap();
    let recon = red.recon_d.value().unwrap();
    assert!(recon <= 10.0 * tar.max(cfg.attack.tau_fid), "{recon} vs {tar}");
    assert!(red.recon_d.render().contains("max of 2"));
    assert!(defend.reports.iter().any(|r| r.inspection == "smi"));

    let report = run(&Command::Report, &cfg, &dirs).unwrap();
    let names: Vec<&str> = report.table.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["benign", "trail_in_sample", "red_in_sample", "rex_in_sample"]);
    let t = &report.table;
    assert!(t.row("benign").unwrap().exp_dis.value().is_none());
    assert!(t.row("trail_in_sample").unwrap().exp_dis.value().is_none());
    assert!(t.row("red_in_sample").unwrap().exp_dis.value().is_some());
    assert!(t.row("rex_in_sample").unwrap().exp_dis.value().is_some());
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains("N/A") && text.contains("in_sample"));
}

#[test]
fn every_record_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = chain(dir.path());
    let dirs = Dirs::same(dir.path());
    run(&Command::Defend, &cfg, &dirs).unwrap();
    run(&Command::Sanitize, &with(&cfg, "sanitize.probe_n", "2000"), &dirs).unwrap();
    run(&Command::Report, &cfg, &dirs).unwrap();
    // later artifacts must not leak into replays of earlier records
    run(&Command::Attack, &with(&cfg, "attack.trigger", "mode"), &dirs).unwrap();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") {
            let original = ExperimentRecord::load(&p).unwrap();
            let fresh = replay(&p, &dir.path().join("replay")).unwrap();
            assert_eq!(fresh.table, original.table, "{}", p.display());
            assert_eq!(fresh.config, original.config);
        }
    }
}

#[test]
fn lambda_sweep_writes_one_group_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let dirs = Dirs::same(dir.path());
    run(&Command::Train, &cfg, &dirs).unwrap();
    let sweep = parse_config("attack.lambda_sweep = 0.01,1,100\nattack.trigger_seeds = 0\nattack.early_stop = false\nattack.max_steps = 100\nreport.exp_samples = 1000\nreport.frechet_samples = 200\ntrain.steps = 300\ndata.n = 1024").unwrap();
    let rec = run(&Command::Attack, &sweep, &dirs).unwrap();
    for i in 0..3 {
        assert!(rec.table.row(&format!("red_in_sample_lambda{i}")).is_some());
        assert!(dir.path().join(format!("red_in_sample_lambda{i}_0.dgml")).exists());
    }
}

fn dgmlab(args: &[&str]) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_dgmlab")).args(args).output().unwrap()
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(dgmlab(&["attack", "--out", out]).status.code(), Some(3));
    assert_eq!(dgmlab(&["train", "--out", out, "--budget", "attack.lambda=banana"]).status.code(), Some(2));
    assert_eq!(dgmlab(&["train", "--out", out, "--budget", "nonsense.key=1"]).status.code(), Some(2));
    let ok = dgmlab(&["train", "--out", out, "--budget", "train.steps=50", "--budget", "report.frechet_samples=100"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let s = dgmlab(&["sample", "--out", out, "--model", "benign.dgml", "--count", "2"]);
    assert_eq!(s.status.code(), Some(0));
    let pgm = std::fs::read(dir.path().join("benign_sample1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), 11 + 64);
    let r = dgmlab(&["replay", dir.path().join("train_benign.json").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
}

#[test]
fn config_file_and_seed_flag_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.cfg");
    std::fs::write(&path, "# desk run\ntrain.steps = 40\nreport.frechet_samples = 100\n").unwrap();
    let out = dir.path().join("o");
    let status = dgmlab(&["train", "--config", path.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(status.status.code(), Some(0));
    let rec = ExperimentRecord::load(&out.join("train_benign.json")).unwrap();
    assert_eq!(rec.seeds.train, 5);
    assert_eq!(rec.seeds.data, 7);
    assert!(rec.config.contains("train.steps = 40"));
}
