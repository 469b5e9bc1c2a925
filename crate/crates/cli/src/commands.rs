use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ivim_core::abc::{compare_posteriors, AbcReferenceTable};
use ivim_core::agp::{fit_volume_agp, load_model, loss_log_csv, save_model, Checkpoint, MlpModel, Trainer};
use ivim_core::eval::{
    anisotropic_benchmark, synthetic_repeatability_study, uncertainty_grid, BenchmarkConfig, BenchmarkReport,
    RepeatConfig, UncertaintyGridSpec,
};
use ivim_core::lsq::{fit_volume_lsq, param_channels};
use ivim_core::params::F;
use ivim_core::rng::{Domain, SeedStream};
use ivim_core::volume::{Channel, Volume};
use ivim_core::{simulate_signal, AcquisitionProtocol, IvimParams, SignalVector, PARAM_NAMES};
use rayon::prelude::*;
use serde::Serialize;

use crate::{CliError, Command, Method, RunConfig};

/// Child tag of the `Eval` stream that draws oracle test signals.
const ORACLE_SIGNALS: u64 = 1;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    fingerprint: String,
    protocol_fingerprint: String,
    files: Vec<String>,
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(out: Option<PathBuf>, cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = out
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))
    }

    fn volume(&mut self, name: &str, v: &Volume) -> Result<(), CliError> {
        let p = self.path(name);
        v.write(&p).map_err(|e| CliError::io(&p, e))
    }

    /// Writes the resolved config and a manifest listing every file of the run.
    fn finish(mut self, command: &str, cfg: &RunConfig, protocol: &AcquisitionProtocol) -> Result<(), CliError> {
        self.text("config.toml", &cfg.to_toml())?;
        let m = Manifest {
            command,
            seed: cfg.seed,
            fingerprint: cfg.fingerprint(),
            protocol_fingerprint: format!("{:08x}", protocol.fingerprint()),
            files: self.files.clone(),
        };
        let p = self.dir.join("manifest.toml");
        std::fs::write(&p, toml::to_string(&m).expect("manifest serializes")).map_err(|e| CliError::io(&p, e))
    }
}

fn stamp(v: &mut Volume, cfg: &RunConfig) -> Result<(), CliError> {
    v.set_meta("seed", cfg.seed.to_string())?;
    v.set_meta("fingerprint", cfg.fingerprint())?;
    Ok(())
}

fn open_model(path: &Path, protocol: &AcquisitionProtocol) -> Result<MlpModel, CliError> {
    let model = load_model(path).map_err(|e| CliError::io(path, e))?;
    if model.n_inputs() != protocol.n_b() {
        return Err(CliError::Data(format!(
            "{}: model expects {} b-values, protocol has {}",
            path.display(),
            model.n_inputs(),
            protocol.n_b()
        )));
    }
    Ok(model)
}

pub fn dispatch(cfg: &RunConfig, command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { out } => simulate(cfg, Output::create(out, cfg)?),
        Command::Train { out, resume, until } => train(cfg, Output::create(out, cfg)?, resume.as_deref(), until),
        Command::Fit {
            method,
            input,
            model,
            out,
        } => {
            if method == Method::Agp && model.is_none() {
                return Err(CliError::Usage("--method agp requires --model".into()));
            }
            fit(cfg, Output::create(out, cfg)?, method, &input, model.as_deref())
        }
        Command::Oracle { model, signals, out } => oracle(cfg, Output::create(out, cfg)?, &model, signals.as_deref()),
        Command::Bench { model, out } => bench(cfg, Output::create(out, cfg)?, &model),
        Command::Repeat { model, out } => repeat(cfg, Output::create(out, cfg)?, &model),
        Command::Convert { input, output, kind } => convert(&input, &output, &kind),
    }
}

fn b_channels(protocol: &AcquisitionProtocol) -> Vec<Channel> {
    protocol.b_values().iter().map(|b| Channel::new(format!("b{b}"), "a.u.")).collect()
}

fn simulate(cfg: &RunConfig, mut out: Output) -> Result<(), CliError> {
    let protocol = cfg.protocol()?;
    let prior = cfg.prior()?;
    let sim = cfg.simulate;
    let fixed = sim.params.map(IvimParams::from_array).transpose().map_err(|e| CliError::Config(format!("simulate.params: {e}")))?;
    let n = sim.dims.iter().product::<usize>();
    let stream = SeedStream::new(cfg.seed, Domain::Simulate);
    let voxels: Vec<(IvimParams, SignalVector)> = (0..n as u64)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream.rng(v);
            let y = fixed.unwrap_or_else(|| prior.sample(&mut rng));
            let x = simulate_signal(&y, &protocol, sim.with_dephasing, &mut rng);
            (y, x)
        })
        .collect();

    let mut signals = Volume::filled(sim.dims, "signals", b_channels(&protocol), 0.0)?;
    let mut truth = Volume::filled(sim.dims, "params", param_channels(""), 0.0)?;
    for (v, (y, x)) in voxels.iter().enumerate() {
        for (dst, s) in signals.voxel_mut(v).iter_mut().zip(x.values()) {
            *dst = *s as f32;
        }
        for (dst, p) in truth.voxel_mut(v).iter_mut().zip(y.to_array()) {
            *dst = p as f32;
        }
    }
    signals.set_b_values(protocol.b_values())?;
    signals.set_meta("dephasing", sim.with_dephasing.to_string())?;
    stamp(&mut signals, cfg)?;
    stamp(&mut truth, cfg)?;
    out.volume("signals.ivol", &signals)?;
    out.volume("truth.ivol", &truth)?;
    out.finish("simulate", cfg, &protocol)
}

fn train(cfg: &RunConfig, mut out: Output, resume: Option<&Path>, until: Option<u64>) -> Result<(), CliError> {
    let protocol = cfg.protocol()?;
    let prior = cfg.prior()?;
    let tc = cfg.train()?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).map_err(|e| CliError::io(p, e))?;
            Trainer::resume(&prior, &protocol, tc, ckpt)?
        }
        None => Trainer::new(&prior, &protocol, tc)?,
    };
    let stop = until.unwrap_or(tc.iterations).min(tc.iterations);
    let mut logged = trainer.log().len();
    while trainer.iteration() < stop {
        trainer.step()?;
        if trainer.log().len() > logged {
            logged = trainer.log().len();
            let (it, loss) = trainer.log()[logged - 1];
            eprintln!("iteration {it}/{} mean loss {loss:.5}", tc.iterations);
        }
    }
    let ckpt_path = out.path("checkpoint.ckpt");
    trainer.checkpoint().save(&ckpt_path).map_err(|e| CliError::io(&ckpt_path, e))?;
    let model_path = out.path("model.agp");
    save_model(trainer.model(), &model_path).map_err(|e| CliError::io(&model_path, e))?;
    out.text("loss.csv", &loss_log_csv(trainer.log()))?;
    if !trainer.is_done() {
        eprintln!("paused at iteration {}; continue with --resume", trainer.iteration());
    }
    out.finish("train", cfg, &protocol)
}

fn fit(cfg: &RunConfig, mut out: Output, method: Method, input: &Path, model: Option<&Path>) -> Result<(), CliError> {
    let protocol = cfg.protocol()?;
    let vol = Volume::read(input).map_err(|e| CliError::io(input, e))?;
    if vol.n_channels() != protocol.n_b() {
        return Err(CliError::Data(format!(
            "{}: volume has {} b-value channels, protocol expects {}",
            input.display(),
            vol.n_channels(),
            protocol.n_b()
        )));
    }
    if let Some(b) = vol.b_values() {
        if b != protocol.b_values() {
            return Err(CliError::Data(format!(
                "{}: volume b-values {b:?} differ from protocol b-values {:?}",
                input.display(),
                protocol.b_values()
            )));
        }
    }
    match method {
        Method::Lsq => {
            let mut maps = fit_volume_lsq(&vol, &protocol, &cfg.lsq()?)?;
            for (name, v) in [
                ("params.ivol", &mut maps.params),
                ("fit_quality.ivol", &mut maps.quality),
                ("at_bound.ivol", &mut maps.at_bound),
            ] {
                v.set_meta("method", "lsq")?;
                stamp(v, cfg)?;
                out.volume(name, v)?;
            }
        }
        Method::Agp => {
            let model = open_model(model.expect("checked by dispatch"), &protocol)?;
            let mut maps = fit_volume_agp(&model, &vol, &protocol)?;
            for (name, v) in [("params.ivol", &mut maps.mean), ("uncertainty.ivol", &mut maps.std)] {
                v.set_meta("method", "agp")?;
                stamp(v, cfg)?;
                out.volume(name, v)?;
            }
        }
    }
    out.finish("fit", cfg, &protocol)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn oracle(cfg: &RunConfig, mut out: Output, model: &Path, signals: Option<&Path>) -> Result<(), CliError> {
    let protocol = cfg.protocol()?;
    let prior = cfg.prior()?;
    let model = open_model(model, &protocol)?;
    let abc = cfg.abc()?;

    let tests: Vec<(Option<IvimParams>, SignalVector)> = match signals {
        Some(p) => {
            let vol = Volume::read(p).map_err(|e| CliError::io(p, e))?;
            (0..vol.n_voxels())
                .map(|v| {
                    let x = SignalVector::new(vol.voxel(v).iter().map(|&s| s as f64).collect())
                        .map_err(|e| CliError::Data(format!("{} voxel {v}: {e}", p.display())))?;
                    protocol.check_signal(&x)?;
                    Ok((None, x))
                })
                .collect::<Result<_, CliError>>()?
        }
        None => {
            let [f_lo, f_hi] = cfg.abc.f_range;
            let restricted = prior.with_range(F, f_lo, f_hi).map_err(|e| CliError::Config(format!("abc.f_range: {e}")))?;
            let stream = SeedStream::new(cfg.seed, Domain::Eval).child(ORACLE_SIGNALS);
            (0..cfg.abc.n_signals as u64)
                .map(|i| {
                    let mut rng = stream.rng(i);
                    let y = restricted.sample(&mut rng);
                    (Some(y), simulate_signal(&y, &protocol, abc.with_dephasing, &mut rng))
                })
                .collect()
        }
    };

    let table = AbcReferenceTable::simulate(&prior, &protocol, &abc)?;
    let mut cmp_csv = String::from("signal,param,truth,abc_mean,abc_std,agp_mean,agp_std,mean_shift,std_ratio,overlap\n");
    let mut shifts = vec![Vec::new(); PARAM_NAMES.len()];
    let mut ratios = vec![Vec::new(); PARAM_NAMES.len()];
    for (i, (truth, x)) in tests.iter().enumerate() {
        let set = table.query(x, abc.acceptance_quantile)?;
        out.text(&format!("abc_{i:03}.csv"), &set.to_csv())?;
        let agp = model.forward(x.values())?;
        let c = compare_posteriors(&set, &agp);
        for (j, name) in PARAM_NAMES.iter().enumerate() {
            let t = truth.map_or(f64::NAN, |y| y.to_array()[j]);
            writeln!(
                cmp_csv,
                "{i},{name},{t:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                set.summary.mean[j], set.summary.std[j], agp.mean[j], agp.std[j], c.mean_shift[j], c.std_ratio[j], c.overlap[j]
            )
            .unwrap();
            shifts[j].push(c.mean_shift[j]);
            ratios[j].push(c.std_ratio[j]);
        }
    }
    out.text("comparison.csv", &cmp_csv)?;

    let mut summary = format!(
        "fingerprint {}\nseed {}\nn_signals {}\nn_proposals {}\nacceptance_quantile {:e}\n",
        cfg.fingerprint(),
        cfg.seed,
        tests.len(),
        abc.n_proposals,
        abc.acceptance_quantile
    );
    for (j, name) in PARAM_NAMES.iter().enumerate() {
        writeln!(summary, "{name}_median_mean_shift {:e}", median(shifts[j].clone())).unwrap();
        writeln!(summary, "{name}_median_std_ratio {:e}", median(ratios[j].clone())).unwrap();
    }
    out.text("summary.txt", &summary)?;
    out.finish("oracle", cfg, &protocol)
}

fn table1_csv(without: &BenchmarkReport, with: &BenchmarkReport) -> String {
    let mut s = String::from("condition,method,mae_f,mae_d,mae_d_star\n");
    for (cond, r) in [("without_dephasing", without), ("with_dephasing", with)] {
        for (method, mae) in [("agp", r.agp), ("lsq", r.lsq)] {
            let [f, d, ds] = mae.as_array();
            writeln!(s, "{cond},{method},{f:e},{d:e},{ds:e}").unwrap();
        }
    }
    s
}

fn grid_csv(grid: &ivim_core::eval::UncertaintyGrid) -> String {
    let [(a0, ..), (a1, ..)] = grid.spec.axes;
    let (x0, x1) = (grid.spec.axis_values(0), grid.spec.axis_values(1));
    let mut s = format!(
        "ix,iy,{},{},s0_std,f_std,d_std,d_star_std\n",
        PARAM_NAMES[a0], PARAM_NAMES[a1]
    );
    for (iy, y) in x1.iter().enumerate() {
        for (ix, x) in x0.iter().enumerate() {
            let c = grid.cell(ix, iy);
            writeln!(s, "{ix},{iy},{x:e},{y:e},{:e},{:e},{:e},{:e}", c[0], c[1], c[2], c[3]).unwrap();
        }
    }
    s
}

fn bench(cfg: &RunConfig, mut out: Output, model: &Path) -> Result<(), CliError> {
    let protocol = cfg.protocol()?;
    let prior = cfg.prior()?;
    let model = open_model(model, &protocol)?;
    let lsq = cfg.lsq()?;
    let run = |with_dephasing| {
        let bc = BenchmarkConfig {
            n_cases: cfg.eval.n_cases,
            with_dephasing,
            seed: cfg.seed,
            ..Default::default()
        };
        anisotropic_benchmark(&model, &lsq, &protocol, &bc)
    };
    let without = run(false)?;
    let with = run(true)?;
    out.text("table1.csv", &table1_csv(&without, &with))?;
    out.text("cases_without_dephasing.csv", &without.cases_csv())?;
    out.text("cases_with_dephasing.csv", &with.cases_csv())?;

    let res = cfg.eval.grid_resolution;
    for (name, mut spec) in [
        ("fixed_d_star", UncertaintyGridSpec::fixed_d_star(&prior, res)),
        ("fixed_d", UncertaintyGridSpec::fixed_d(&prior, res)),
        ("fixed_f", UncertaintyGridSpec::fixed_f(&prior, res)),
    ] {
        spec.realizations = cfg.eval.grid_realizations;
        let grid = uncertainty_grid(&model, &spec, &prior, &protocol, cfg.seed)?;
        let mut vol = grid.to_volume()?;
        stamp(&mut vol, cfg)?;
        out.volume(&format!("grid_{name}.ivol"), &vol)?;
        out.text(&format!("grid_{name}.csv"), &grid_csv(&grid))?;
    }

    let mut report = format!(
        "fingerprint {}\nseed {}\nprotocol_fingerprint {:08x}\nn_cases {}\n",
        cfg.fingerprint(),
        cfg.seed,
        protocol.fingerprint(),
        cfg.eval.n_cases
    );
    for (cond, r) in [("without_dephasing", &without), ("with_dephasing", &with)] {
        writeln!(report, "lsq_failures_{cond} {}", r.lsq_failures).unwrap();
    }
    report.push_str("units mae_f=percentage_points mae_d=1e-4_mm2/s mae_d_star=1e-3_mm2/s\n");
    out.text("report.txt", &report)?;
    out.finish("bench", cfg, &protocol)
}

fn repeat(cfg: &RunConfig, mut out: Output, model: &Path) -> Result<(), CliError> {
    let protocol = cfg.protocol()?;
    let model = open_model(model, &protocol)?;
    let e = cfg.eval;
    let rc = RepeatConfig {
        n_subjects: e.repeat_subjects,
        roi: e.repeat_roi,
        noise_scale: e.repeat_noise_scale,
        with_dephasing: e.repeat_with_dephasing,
        seed: cfg.seed,
        ..Default::default()
    };
    let r = synthetic_repeatability_study(&model, &cfg.lsq()?, &protocol, &rc)?;
    out.text("table2.csv", &r.to_csv())?;
    let mut subjects = String::from("subject,method,session,s0,f,d,d_star\n");
    for (s, sub) in r.subjects.iter().enumerate() {
        let rows = [("truth", 0, sub.truth), ("agp", 1, sub.agp[0]), ("agp", 2, sub.agp[1]), ("lsq", 1, sub.lsq[0]), ("lsq", 2, sub.lsq[1])];
        for (method, session, v) in rows {
            writeln!(subjects, "{s},{method},{session},{:e},{:e},{:e},{:e}", v[0], v[1], v[2], v[3]).unwrap();
        }
    }
    out.text("subjects.csv", &subjects)?;
    out.text(
        "report.txt",
        &format!(
            "fingerprint {}\nseed {}\nprotocol_fingerprint {:08x}\nn_subjects {}\nnoise_scale {:e}\n",
            cfg.fingerprint(),
            cfg.seed,
            r.protocol_fingerprint,
            rc.n_subjects,
            rc.noise_scale
        ),
    )?;
    out.finish("repeat", cfg, &protocol)
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn convert(input: &Path, output: &Path, kind: &str) -> Result<(), CliError> {
    let vol = if is_csv(input) {
        let text = std::fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
        Volume::from_csv(&text, kind).map_err(|e| CliError::io(input, e))?
    } else {
        Volume::read(input).map_err(|e| CliError::io(input, e))?
    };
    if is_csv(output) {
        std::fs::write(output, vol.to_csv()).map_err(|e| CliError::io(output, e))
    } else {
        vol.write(output).map_err(|e| CliError::io(output, e))
    }
}
