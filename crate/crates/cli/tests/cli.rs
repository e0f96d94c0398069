use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use darc_cli::config::{parse_config, preset_by_name, ExperimentConfig, ExperimentKind};
use darc_cli::experiment::run_experiment;
use darc_core::domains::GridworldSpec;
use darc_core::mdp::TabularMdp;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    let text = fs::read_to_string(configs_dir().join(name)).unwrap();
    parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn darc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_darc"))
}

#[test]
fn shipped_configs_reproduce_presets() {
    let cases = [
        ("wall_darc.cfg", ExperimentKind::Darc, "wall_transfer", 3),
        ("wall_rl_source.cfg", ExperimentKind::RlSource, "wall_transfer", 3),
        ("wall_rl_target.cfg", ExperimentKind::RlTarget, "wall_transfer", 3),
        ("wall_importance.cfg", ExperimentKind::Importance, "wall_transfer", 3),
        ("wall_ablation.cfg", ExperimentKind::AblationSingleClassifier, "wall_skewed", 10),
        ("wall_warmup.cfg", ExperimentKind::Darc, "wall_warmup", 10),
        ("flip_darc.cfg", ExperimentKind::Darc, "flip_transfer", 10),
        ("flip_matl.cfg", ExperimentKind::MatlStyle, "flip_matl", 10),
    ];
    for (file, kind, preset, n_seeds) in cases {
        let cfg = load(file);
        let preset = preset_by_name(preset).unwrap();
        assert_eq!(cfg.kind, kind, "{file}");
        assert_eq!(cfg.seeds, (0..n_seeds).collect::<Vec<u64>>(), "{file}");
        assert_eq!(cfg.spec, preset.spec, "{file}");
        assert_eq!(cfg.grid, preset.kind, "{file}");
        for &s in &cfg.seeds {
            assert_eq!(cfg.darc_config(s), preset.with_seed(s), "{file} seed {s}");
        }
        cfg.validate().unwrap();
    }
    for file in ["archery.cfg", "theory.cfg"] {
        load(file).validate().unwrap();
    }
}

fn tiny_darc() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_kind(ExperimentKind::Darc);
    cfg.spec = GridworldSpec { horizon: 12, ..GridworldSpec::flip_default() };
    cfg.grid = darc_core::darc::presets::GridKind::Flip;
    cfg.seeds = vec![4, 9];
    cfg.darc.num_iterations = 120;
    cfg.darc.eval_every = 40;
    cfg.darc.eval_episodes = 10;
    cfg
}

#[test]
fn runs_are_byte_identical() {
    let cfg = tiny_darc();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = run_experiment(&cfg, a.path()).unwrap();
    let ob = run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(oa.exit_code(), 0);
    assert_eq!(oa.files.len(), ob.files.len());
    for (fa, fb) in oa.files.iter().zip(&ob.files) {
        assert_eq!(fa.file_name(), fb.file_name());
        assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap(), "{}", fa.display());
    }
    let names: Vec<_> = oa.files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for want in ["seed_4.csv", "seed_9.csv", "aggregate.csv", "success_by_seed.csv", "summary.txt", "target_success.svg"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
}

#[test]
fn aggregate_is_mean_of_seeds() {
    let cfg = tiny_darc();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path()).unwrap();
    let read = |n: &str| -> Vec<Vec<f64>> {
        fs::read_to_string(out.dir.join(n))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let (a, b, m) = (read("seed_4.csv"), read("seed_9.csv"), read("aggregate.csv"));
    assert_eq!(m.len(), 120);
    for i in 0..m.len() {
        for j in 0..m[i].len() {
            assert!((m[i][j] - (a[i][j] + b[i][j]) / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn ablation_reports_sign_test() {
    let mut cfg = tiny_darc();
    cfg.kind = ExperimentKind::AblationSingleClassifier;
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path()).unwrap();
    assert!(out.summary.contains("sign test p ="));
    assert!(out.dir.join("full_seed_4.csv").exists());
    assert!(out.dir.join("sas_only_seed_9.csv").exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let status = darc().args(["run", "/nonexistent.cfg"]).status().unwrap();
    assert_eq!(status.code(), Some(1));

    let bad = root.join("bad.cfg");
    fs::write(&bad, "[darc]\ntarget_collect_period = 0\n").unwrap();
    assert_eq!(darc().arg("run").arg(&bad).status().unwrap().code(), Some(1));

    let out = darc().env("DARC_OUTPUT_ROOT", root).args(["theory", "--instances", "5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("theory_suite/theory_report.csv").exists());

    let mdp = GridworldSpec::wall_default();
    let pair = darc_core::darc::presets::GridKind::Wall.build(&mdp).unwrap();
    let good = root.join("good.mdp");
    fs::write(&good, pair.source.to_text()).unwrap();
    assert_eq!(darc().arg("validate").arg(&good).status().unwrap().code(), Some(0));

    let mut broken = TabularMdp::from_text(&pair.source.to_text()).unwrap();
    broken.row_mut(0, 0)[0] += 0.5;
    let broken_path = root.join("broken.mdp");
    fs::write(&broken_path, broken.to_text()).unwrap();
    let out = darc().arg("validate").arg(&broken_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("row (s=0, a=0)"));
}

#[test]
fn plot_and_template_commands() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    fs::write(&csv, "x,y\n0,1\n1,2\n").unwrap();
    assert_eq!(darc().arg("plot").arg(&csv).arg("x:y").status().unwrap().code(), Some(0));
    assert!(fs::read_to_string(dir.path().join("c.svg")).unwrap().starts_with("<svg"));
    assert_eq!(darc().arg("plot").arg(&csv).arg("x:z").status().unwrap().code(), Some(1));

    let out = darc().args(["template", "darc", "--preset", "flip_transfer", "--seeds", "3"]).output().unwrap();
    let cfg = parse_config(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.darc_config(3), preset_by_name("flip_transfer").unwrap().with_seed(3));
    assert_eq!(darc().args(["template", "nope"]).status().unwrap().code(), Some(1));
}
