use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ivim_core::agp::load_model;
use ivim_core::volume::Volume;
use ivim_cli::RunConfig;

const TINY_TRAIN: &str = "[train]\npreset = \"smoke\"\niterations = 30\nbatch_size = 16\ncheckpoint_interval = 10\n";

fn ivim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivim")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = ivim(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A briefly trained model shared by the commands that need one.
fn tiny_model() -> &'static Path {
    static MODEL: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, p) = MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), TINY_TRAIN);
        let out = dir.path().join("train");
        ok(&["train", "--config", &cfg, "--deterministic", "--out", s(&out)]);
        let model = out.join("model.agp");
        (dir, model)
    });
    p
}

#[test]
fn simulate_writes_expected_payload_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 3\n[simulate]\ndims = [2, 2, 1]\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", &cfg, "--deterministic", "--out", s(&a)]);
    ok(&["simulate", "--config", &cfg, "--deterministic", "--out", s(&b)]);
    let v = Volume::read(&a.join("signals.ivol")).unwrap();
    assert_eq!(v.data().len(), 2 * 2 * 17);
    assert_eq!(v.b_values().unwrap().len(), 17);
    assert_eq!(Volume::read(&a.join("truth.ivol")).unwrap().n_channels(), 4);
    for f in ["signals.ivol", "truth.ivol", "manifest.toml", "config.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 3"), "{manifest}");
}

#[test]
fn invalid_config_fails_with_key_path_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[protocol]\nb_values = [0.0, 200.0, 100.0]\nnoise_sigmas = [1.0, 1.0, 1.0, 1.0]\n");
    let out = dir.path().join("o");
    let o = ivim(&["simulate", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("b_values[2]"), "{err}");
    assert!(!out.exists());

    let cfg = write_config(dir.path(), "[simulate]\ndimz = [1, 1, 1]\n");
    let o = ivim(&["simulate", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimz"));
}

#[test]
fn preset_flag_selects_paper_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "[simulate]\ndims = [1, 1, 1]\n");
    ok(&["simulate", "--config", &cfg, "--preset", "paper", "--out", s(&out)]);
    let resolved = RunConfig::load(&out.join("config.toml")).unwrap();
    let t = resolved.train().unwrap();
    assert_eq!((t.iterations, t.batch_size, t.learning_rate), (1_000_000, 2000, 1e-3));
}

#[test]
fn train_writes_loadable_model_and_resume_matches() {
    let model = load_model(tiny_model()).unwrap();
    assert_eq!(model.n_inputs(), 17);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_TRAIN);
    let (part, rest) = (dir.path().join("part"), dir.path().join("rest"));
    ok(&["train", "--config", &cfg, "--deterministic", "--until", "13", "--out", s(&part)]);
    let ckpt = part.join("checkpoint.ckpt");
    ok(&["train", "--config", &cfg, "--deterministic", "--resume", s(&ckpt), "--out", s(&rest)]);
    let full = tiny_model().parent().unwrap();
    assert_eq!(std::fs::read(rest.join("model.agp")).unwrap(), std::fs::read(full.join("model.agp")).unwrap());
    let log = std::fs::read_to_string(rest.join("loss.csv")).unwrap();
    assert_eq!(log, std::fs::read_to_string(full.join("loss.csv")).unwrap());
    assert_eq!(log.lines().last().unwrap().split(',').next(), Some("30"));
}

#[test]
fn lsq_fit_recovers_noiseless_volume_with_named_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[protocol]\nnoise_sigmas = [1e-9, 1e-9, 1e-9, 1e-9]\n[simulate]\ndims = [2, 2, 1]\nwith_dephasing = false\nparams = [1000.0, 0.2, 1e-3, 3e-2]\n",
    );
    let (sim, fit) = (dir.path().join("sim"), dir.path().join("fit"));
    ok(&["simulate", "--config", &cfg, "--out", s(&sim)]);
    let input = sim.join("signals.ivol");
    ok(&["fit", "--config", &cfg, "--method", "lsq", "--input", s(&input), "--out", s(&fit)]);
    let p = Volume::read(&fit.join("params.ivol")).unwrap();
    let names: Vec<_> = p.channels().iter().map(|c| (c.name.as_str(), c.unit.as_str())).collect();
    assert_eq!(names, [("s0", "a.u."), ("f", "1"), ("d", "mm2/s"), ("d_star", "mm2/s")]);
    let truth = [1000.0, 0.2, 1e-3, 3e-2];
    for v in 0..p.n_voxels() {
        for (est, t) in p.voxel(v).iter().zip(truth) {
            assert!(((*est as f64) - t).abs() / t < 0.01, "{:?}", p.voxel(v));
        }
    }
    assert!(fit.join("fit_quality.ivol").exists());
}

#[test]
fn agp_fit_needs_model_and_matching_b_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulate]\ndims = [2, 1, 1]\n");
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", &cfg, "--out", s(&sim)]);
    let input = sim.join("signals.ivol");
    let out = dir.path().join("fit");
    let o = ivim(&["fit", "--method", "agp", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    ok(&["fit", "--method", "agp", "--input", s(&input), "--model", s(tiny_model()), "--out", s(&out)]);
    let u = Volume::read(&out.join("uncertainty.ivol")).unwrap();
    assert_eq!(u.channels()[3].name, "d_star_std");
    assert!(out.join("params.ivol").exists());

    let short = write_config(
        dir.path(),
        "[protocol]\nb_values = [0.0, 50.0, 200.0, 500.0, 900.0]\n[lsq]\nsegmentation_threshold = 300.0\n[simulate]\ndims = [1, 1, 1]\n",
    );
    let sim5 = dir.path().join("sim5");
    ok(&["simulate", "--config", &short, "--out", s(&sim5)]);
    let o = ivim(&["fit", "--method", "agp", "--input", s(&sim5.join("signals.ivol")), "--model", s(tiny_model()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('5') && err.contains("17"), "{err}");
}

#[test]
fn oracle_outputs_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 5\n[abc]\nn_proposals = 100000\nacceptance_quantile = 1e-3\nn_signals = 1\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["oracle", "--config", &cfg, "--model", s(tiny_model()), "--deterministic", "--out", s(out)]);
    }
    let samples = std::fs::read_to_string(a.join("abc_000.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 100);
    assert_eq!(samples, std::fs::read_to_string(b.join("abc_000.csv")).unwrap());
    let cmp = std::fs::read_to_string(a.join("comparison.csv")).unwrap();
    assert!(cmp.starts_with("signal,param,truth,abc_mean,abc_std,agp_mean,agp_std,mean_shift,std_ratio,overlap"));
    assert_eq!(cmp.lines().count(), 1 + 4);
}

#[test]
fn bench_reports_twelve_cells_and_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[eval]\nn_cases = 4\ngrid_resolution = 3\ngrid_realizations = 2\n");
    let out = dir.path().join("bench");
    ok(&["bench", "--config", &cfg, "--model", s(tiny_model()), "--out", s(&out)]);
    let table = std::fs::read_to_string(out.join("table1.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let cells: usize = rows.iter().map(|r| r[2..].len()).sum();
    assert_eq!(cells, 12);
    let conditions: Vec<_> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(
        conditions,
        [("without_dephasing", "agp"), ("without_dephasing", "lsq"), ("with_dephasing", "agp"), ("with_dephasing", "lsq")]
    );
    let expected = RunConfig::load(Path::new(&cfg)).unwrap().fingerprint();
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains(&format!("fingerprint {expected}")), "{report}");
    assert_eq!(Volume::read(&out.join("grid_fixed_f.ivol")).unwrap().dims(), [3, 3, 1]);
}

#[test]
fn repeat_table_layout_seed_and_zero_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 11\n[eval]\nrepeat_subjects = 3\nrepeat_roi = [2, 2]\nrepeat_noise_scale = 1e-9\nrepeat_with_dephasing = false\n",
    );
    let out = dir.path().join("rep");
    ok(&["repeat", "--config", &cfg, "--model", s(tiny_model()), "--out", s(&out)]);
    let table = std::fs::read_to_string(out.join("table2.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 7);
        for v in &f[1..4] {
            assert!(v.parse::<f64>().unwrap() < 1.0, "{row}");
        }
    }
    assert!(std::fs::read_to_string(out.join("report.txt")).unwrap().contains("seed 11"));
}

#[test]
fn convert_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulate]\ndims = [3, 2, 1]\n");
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", &cfg, "--out", s(&sim)]);
    let (csv, back) = (dir.path().join("t.csv"), dir.path().join("t.ivol"));
    ok(&["convert", "-i", s(&sim.join("truth.ivol")), "-o", s(&csv)]);
    ok(&["convert", "-i", s(&csv), "-o", s(&back), "--kind", "params"]);
    let (a, b) = (Volume::read(&sim.join("truth.ivol")).unwrap(), Volume::read(&back).unwrap());
    assert_eq!(a.dims(), b.dims());
    assert_eq!(a.data(), b.data());
}

#[test]
fn missing_output_directory_is_a_usage_error() {
    let o = ivim(&["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}
