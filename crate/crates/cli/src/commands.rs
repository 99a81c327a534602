use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use arz_core::calibration::{fit_three_param, AggregatedGrid};
use arz_core::control::{ControlLawController, Controller, KernelController, OpenLoop, PiController, EDGE_POINTS};
use arz_core::dataset::{gen_control_dataset, gen_kernel_dataset, ControlDataset, ControlDatasetConfig, KernelDataset, KernelDatasetConfig, KernelSample, SampleSpec, Split};
use arz_core::kernel::{solve_kernels, solve_with, KernelParams, TriangularGrid};
use arz_core::metrics::{decay_fit, timing_bench, EvaluationReport, Timing};
use arz_core::operator::{OperatorModel, PinnModel, StoredModel, Target};
use arz_core::presets::{Preset, Scenario};
use arz_core::sim::{make_initial, run_closed_loop, ScenarioResult};
use arz_core::train::{kernel_errors_per_km, operator_test_error, train_control_law, train_no, train_pinn, train_pino, LossCurve, Method};
use arz_core::units::*;
use log::{info, warn};

use crate::config::RunConfig;
use crate::svg::Heatmap;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    OpenLoop,
    Backstepping,
    Pi,
    Learned(Method),
}

impl Kind {
    fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "open_loop" => Kind::OpenLoop,
            "backstepping" => Kind::Backstepping,
            "pi" => Kind::Pi,
            other => Kind::Learned(other.parse().map_err(|_| {
                CliError::Usage(format!(
                    "unknown controller `{other}` (expected open_loop, backstepping, pi, no_kernel, pino_kernel, pinn_kernel or no_control_law)"
                ))
            })?),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Kind::OpenLoop => "open_loop",
            Kind::Backstepping => "backstepping",
            Kind::Pi => "pi",
            Kind::Learned(m) => m.name(),
        }
    }
}

/// A model file checked against the method it is used for.
enum Loaded {
    Operator(OperatorModel),
    Pinn(PinnModel),
}

fn load_model(path: &Path, method: Method) -> Result<Loaded, CliError> {
    let stored = StoredModel::load(path)?;
    let want = match method {
        Method::NoControlLaw => Target::ControlLaw,
        _ => Target::Kernels,
    };
    match (method, stored) {
        (Method::PinnKernel, StoredModel::Pinn(p)) => Ok(Loaded::Pinn(p)),
        (Method::PinnKernel, StoredModel::Operator(_)) => {
            Err(CliError::Usage(format!("{} holds an operator model, not a single-instance PINN", path.display())))
        }
        (_, StoredModel::Operator(m)) if m.target == want => Ok(Loaded::Operator(m)),
        (_, StoredModel::Operator(m)) => Err(CliError::Usage(format!(
            "{} holds a {:?} model; {} needs {:?}",
            path.display(),
            m.target,
            method,
            want
        ))),
        (_, StoredModel::Pinn(_)) => Err(CliError::Usage(format!("{} holds a single-instance PINN; {method} needs an operator", path.display()))),
    }
}

fn build_controller(kind: Kind, cfg: &RunConfig, s: &Scenario, model: Option<&Loaded>) -> Result<Box<dyn Controller + Send>, CliError> {
    let grid = s.sim_config(cfg.cells)?.grid;
    Ok(match (kind, model) {
        (Kind::OpenLoop, _) => Box::new(OpenLoop),
        (Kind::Backstepping, _) => Box::new(KernelController::backstepping(s.eq, s.tau, grid, &TriangularGrid::new(EDGE_POINTS, s.length)?)?),
        (Kind::Pi, _) => Box::new(PiController::new(cfg.pi.kp, cfg.pi.ki)?.with_u_max(cfg.pi.u_max_kmh.map(kmh_to_ms))),
        (Kind::Learned(Method::PinnKernel), Some(Loaded::Pinn(p))) => Box::new(KernelController::from_pinn(p, s.eq, s.tau, grid)?),
        (Kind::Learned(Method::NoControlLaw), Some(Loaded::Operator(m))) => Box::new(ControlLawController::new(m.clone(), &s.eq, s.tau, s.length)?),
        (Kind::Learned(method), Some(Loaded::Operator(m))) => {
            let c = KernelController::from_operator(m, s.eq, s.tau, grid)?;
            if method == Method::PinoKernel {
                Box::new(c.renamed("pino_kernel"))
            } else {
                Box::new(c)
            }
        }
        (Kind::Learned(m), _) => return Err(CliError::Usage(format!("controller {m} needs --model"))),
    })
}

fn model_for(kind: Kind, path: Option<&Path>) -> Result<Option<Loaded>, CliError> {
    match kind {
        Kind::Learned(m) => {
            let p = path.ok_or_else(|| CliError::Usage(format!("controller {m} needs --model")))?;
            Ok(Some(load_model(p, m)?))
        }
        _ => Ok(None),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn echo_config(cfg: &RunConfig) -> Result<(), CliError> {
    write(&cfg.out.join("config.toml"), cfg.to_toml())
}

fn run(s: &Scenario, cells: usize, c: &mut dyn Controller) -> Result<ScenarioResult, CliError> {
    let r = run_closed_loop(&s.ic, &s.sim_config(cells)?, c)?;
    for w in &r.warnings {
        warn!("{}: {w}", r.controller);
    }
    Ok(r)
}

fn equilibrium_line(s: &Scenario) -> String {
    let e = &s.eq;
    format!(
        "equilibrium rho* = {:.2} veh/km, v* = {:.2} km/h, q* = {:.0} veh/h, lambda1 = {:.2} km/h, lambda2 = {:.2} km/h",
        per_m_to_per_km(e.rho_star),
        ms_to_kmh(e.v_star),
        per_s_to_per_h(e.q_star),
        ms_to_kmh(e.lambda1),
        ms_to_kmh(e.lambda2)
    )
}

fn trajectory_summary(s: &Scenario, r: &ScenarioResult) -> String {
    let mut out = String::new();
    let rel = |t: f64| r.l2_at(t) / r.l2[0];
    let _ = writeln!(out, "controller {}", r.controller);
    let _ = writeln!(out, "{}", equilibrium_line(s));
    let _ = writeln!(out, "finite clearing time t_f = {:.1} s", s.eq.finite_time(s.length));
    let _ = writeln!(out, "initial L2 deviation {:.4e}", r.l2[0]);
    for t in [75.0, 150.0, 250.0, s.horizon] {
        if t <= s.horizon {
            let _ = writeln!(out, "deviation at {t:>5.0} s: {:.3}% of initial", 100.0 * rel(t));
        }
    }
    let _ = writeln!(out, "first below 10%: {:?} s, below 1%: {:?} s", r.time_below(0.1), r.time_below(0.01));
    if let Ok(fit) = decay_fit(&r.t, &r.l2, 0.0, s.horizon) {
        let _ = writeln!(
            out,
            "decay rate {:.4} 1/s (r² {:.3}) over [{:.0}, {:.0}] s{}",
            fit.rate,
            fit.r_squared,
            fit.window.0,
            fit.window.1,
            fit.floor.map_or(String::new(), |f| format!(", floor {f:.3e}"))
        );
    }
    let end = rel(s.horizon);
    let verdict = if end >= 0.5 {
        "persistent oscillation"
    } else if end < 0.05 {
        "stabilised"
    } else {
        "decaying"
    };
    let _ = writeln!(out, "verdict: {verdict}");
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

fn heatmaps(out: &Path, r: &ScenarioResult) -> Result<(), CliError> {
    let rho: Vec<f64> = r.rho.iter().map(|&x| per_m_to_per_km(x)).collect();
    let v: Vec<f64> = r.v.iter().map(|&x| ms_to_kmh(x)).collect();
    let title_rho = format!("density, {}", r.controller);
    let title_v = format!("speed, {}", r.controller);
    write(&out.join("rho.svg"), Heatmap { title: &title_rho, unit: "veh/km", t: &r.t, x: &r.x, values: &rho }.render())?;
    write(&out.join("v.svg"), Heatmap { title: &title_v, unit: "km/h", t: &r.t, x: &r.x, values: &v }.render())
}

fn report_csv(reports: &[EvaluationReport], extra_header: &str, extra: &[String]) -> String {
    let mut s = format!("{}{extra_header}\n", EvaluationReport::csv_header());
    for (i, r) in reports.iter().enumerate() {
        s.push_str(&r.csv_row());
        if let Some(e) = extra.get(i) {
            s.push_str(e);
        }
        s.push('\n');
    }
    s
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let s = cfg.scenario()?;
    let kind = Kind::parse(&cfg.controller)?;
    let model = model_for(kind, cfg.model.as_deref())?;
    echo_config(cfg)?;
    let mut c = build_controller(kind, cfg, &s, model.as_ref())?;
    let t0 = Instant::now();
    let r = run(&s, cfg.cells, c.as_mut())?;
    info!("{} run took {:.2} s ({} steps)", kind.name(), t0.elapsed().as_secs_f64(), r.steps);
    let baseline = if kind == Kind::Backstepping {
        r.clone()
    } else {
        run(&s, cfg.cells, build_controller(Kind::Backstepping, cfg, &s, None)?.as_mut())?
    };
    let report = EvaluationReport::evaluate(&r, &baseline, (0.0, s.horizon), None)?;
    r.write_csv(&cfg.out.join("trajectory.csv"))?;
    write(&cfg.out.join("report.csv"), report_csv(std::slice::from_ref(&report), "", &[]))?;
    let summary = trajectory_summary(&s, &r);
    write(&cfg.out.join("summary.txt"), &summary)?;
    if cfg.svg {
        heatmaps(&cfg.out, &r)?;
    }
    print!("{summary}");
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let s = cfg.scenario()?;
    let (lo, hi) = cfg.density_interval()?;
    let samples = SampleSpec::new(cfg.data.samples, lo, hi, cfg.seed);
    echo_config(cfg)?;
    let dir = &cfg.out;
    let t0 = Instant::now();
    let (n, interval, skipped) = match cfg.data.kind.as_str() {
        "kernels" => {
            let ds = gen_kernel_dataset(&KernelDatasetConfig { family: s.family(), samples, grid_n: cfg.data.grid_n }, cfg.jobs)?;
            ds.write(dir)?;
            (ds.samples.len(), ds.lambda_interval, ds.skipped.len())
        }
        "control" => {
            let c = ControlDatasetConfig {
                family: s.family(),
                samples,
                ic: s.ic.clone(),
                horizon: s.horizon,
                n_cells: cfg.cells,
                nt: cfg.data.nt,
                kernel_n: EDGE_POINTS,
            };
            let ds = gen_control_dataset(&c, cfg.jobs)?;
            ds.write(dir)?;
            (ds.samples.len(), ds.lambda_interval, ds.skipped.len())
        }
        other => return Err(CliError::Usage(format!("unknown dataset kind `{other}` (expected kernels or control)"))),
    };
    println!(
        "{n} {} samples, lambda2 in [{:.2}, {:.2}] km/h, {skipped} skipped, {:.1} s; written to {}",
        cfg.data.kind,
        ms_to_kmh(interval.0),
        ms_to_kmh(interval.1),
        t0.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn data_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.train.data.as_deref().ok_or_else(|| CliError::Usage("training needs --data (a gen-data output directory)".into()))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let method = cfg.method()?;
    let tc = cfg.train_config(method);
    echo_config(cfg)?;
    let t0 = Instant::now();
    let (stored, curve, note): (StoredModel, LossCurve, String) = match method {
        Method::NoKernel | Method::PinoKernel => {
            let mut ds = KernelDataset::read(data_dir(cfg)?)?;
            if cfg.train.half_data {
                ds = ds.halve_training();
            }
            let t = if method == Method::NoKernel { train_no(&ds, &tc)? } else { train_pino(&ds, &tc)? };
            let (max, mean) = operator_test_error(&t.model, &ds)?;
            (StoredModel::Operator(t.model), t.curve, format!("held-out kernel error max {max:.3e} / mean {mean:.3e} 1/km"))
        }
        Method::PinnKernel => {
            let s = cfg.scenario()?;
            let grid = TriangularGrid::new(cfg.data.grid_n, s.length)?;
            let field = solve_with(&KernelParams::new(&s.eq, s.tau, s.length).with_coupling(s.family().coupling), &grid)?;
            let sample = KernelSample { eq: s.eq, field: field.clone(), split: Split::Train };
            let t = train_pinn(&sample, &s.family(), &tc)?;
            let (max, mean) = kernel_errors_per_km(&t.model.kernel_field(&grid)?, &field)?;
            (StoredModel::Pinn(t.model), t.curve, format!("instance kernel error max {max:.3e} / mean {mean:.3e} 1/km"))
        }
        Method::NoControlLaw => {
            let ds = ControlDataset::read(data_dir(cfg)?)?;
            let t = train_control_law(&ds, &tc)?;
            (StoredModel::Operator(t.model), t.curve, String::new())
        }
    };
    let path = cfg.out.join(format!("{method}.bin"));
    stored.save(&path)?;
    curve.write_csv(&cfg.out.join(format!("{method}_loss.csv")))?;
    println!(
        "{method}: {} epochs in {:.1} s, final train loss {:.3e}, test loss {:.3e}",
        tc.epochs,
        t0.elapsed().as_secs_f64(),
        curve.train.last().copied().unwrap_or(f64::NAN),
        curve.test.last().copied().unwrap_or(f64::NAN)
    );
    if !note.is_empty() {
        println!("{note}");
    }
    println!("model written to {}", path.display());
    Ok(())
}

fn median_secs(mut f: impl FnMut() -> Result<(), CliError>) -> Result<f64, CliError> {
    let mut t = Vec::with_capacity(5);
    for _ in 0..5 {
        let t0 = Instant::now();
        f()?;
        t.push(t0.elapsed().as_secs_f64());
    }
    t.sort_by(f64::total_cmp);
    Ok(t[2])
}

/// One-off cost a controller pays before its first evaluation: the kernel
/// solve for backstepping, kernel inference for the learned kernel laws.
fn setup_cost(kind: Kind, s: &Scenario, model: Option<&Loaded>) -> Result<f64, CliError> {
    match (kind, model) {
        (Kind::Backstepping, _) => {
            let g = TriangularGrid::new(EDGE_POINTS, s.length)?;
            median_secs(|| {
                std::hint::black_box(solve_kernels(&s.eq, s.tau, &g)?);
                Ok(())
            })
        }
        (Kind::Learned(Method::PinnKernel), Some(Loaded::Pinn(p))) => median_secs(|| {
            std::hint::black_box(p.edge_kernels(s.eq.lambda2, EDGE_POINTS)?);
            Ok(())
        }),
        (Kind::Learned(m), Some(Loaded::Operator(op))) if m != Method::NoControlLaw => median_secs(|| {
            std::hint::black_box(op.edge_kernels(s.eq.lambda2, EDGE_POINTS)?);
            Ok(())
        }),
        _ => Ok(0.0),
    }
}

fn timing(kind: Kind, cfg: &RunConfig, s: &Scenario, model: Option<&Loaded>, evals: usize) -> Result<Timing, CliError> {
    let grid = s.sim_config(cfg.cells)?.grid;
    let state = make_initial(&s.ic, &s.eq, &grid, &s.fd)?;
    let setup = setup_cost(kind, s, model)?;
    let mut c = build_controller(kind, cfg, s, model)?;
    Ok(timing_bench(c.as_mut(), &state, &s.eq, 5000, setup, evals))
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let s = cfg.scenario()?;
    let kind = Kind::parse(&cfg.controller)?;
    let model = model_for(kind, cfg.model.as_deref())?;
    echo_config(cfg)?;
    let baseline = run(&s, cfg.cells, build_controller(Kind::Backstepping, cfg, &s, None)?.as_mut())?;
    let r = run(&s, cfg.cells, build_controller(kind, cfg, &s, model.as_ref())?.as_mut())?;
    let t = timing(kind, cfg, &s, model.as_ref(), baseline.steps)?;
    let tb = timing(Kind::Backstepping, cfg, &s, None, baseline.steps)?;
    let report = EvaluationReport::evaluate(&r, &baseline, (0.0, s.horizon), Some(t))?;
    let ratio = tb.amortized / t.amortized;
    write(&cfg.out.join("report.csv"), report_csv(std::slice::from_ref(&report), ",timing_ratio", &[format!(",{ratio}")]))?;
    let mut table = EvaluationReport::table(std::slice::from_ref(&report));
    let _ = writeln!(table, "\ncost ratio against backstepping (amortised): {ratio:.2}x");
    write(&cfg.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.calibrate;
    let input: PathBuf = match (c.synthetic, &c.input) {
        (Some(n), path) => {
            let fd = match Preset::NgsimCalibrated.scenario().fd {
                arz_core::fd::FundamentalDiagram::ThreeParam(f) => f,
                _ => unreachable!("calibrated preset uses the three-parameter diagram"),
            };
            let p = path.clone().unwrap_or_else(|| cfg.out.join("synthetic_grid.csv"));
            AggregatedGrid::synthetic(&fd, n, 0.01, cfg.seed).write_csv(&p)?;
            p
        }
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(CliError::Usage("calibrate needs --input or --synthetic".into())),
    };
    let rho_max = c.rho_max_veh_per_km.map_or(per_km_to_per_m(800.0), per_km_to_per_m);
    echo_config(cfg)?;
    let grid = AggregatedGrid::read_csv(&input, Some(rho_max))?;
    let fit = fit_three_param(&grid, rho_max)?;
    let snippet = fit.to_toml();
    write(&cfg.out.join("fd.toml"), &snippet)?;
    print!("{snippet}");
    println!("# {} observations, rmse {:.2} veh/h, written to {}", grid.len(), per_s_to_per_h(fit.rmse), cfg.out.join("fd.toml").display());
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<(), CliError> {
    let s = cfg.scenario()?;
    let mut entries: Vec<(Kind, Option<Loaded>)> = vec![(Kind::Backstepping, None), (Kind::Pi, None)];
    if let Some(dir) = &cfg.model_dir {
        for m in Method::ALL {
            let p = dir.join(format!("{m}.bin"));
            if p.exists() {
                entries.push((Kind::Learned(m), Some(load_model(&p, m)?)));
            } else {
                info!("no {m} model in {}", dir.display());
            }
        }
    }
    echo_config(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build().map_err(|e| CliError::Usage(e.to_string()))?;
    let runs: Vec<Result<ScenarioResult, CliError>> = pool.install(|| {
        use rayon::prelude::*;
        entries.par_iter().map(|(k, m)| run(&s, cfg.cells, build_controller(*k, cfg, &s, m.as_ref())?.as_mut())).collect()
    });
    let runs: Vec<ScenarioResult> = runs.into_iter().collect::<Result<_, _>>()?;
    let baseline = &runs[0];
    // timings run one at a time so they do not compete for cores
    let mut reports = Vec::new();
    let mut extra = Vec::new();
    let mut kernel_rows = Vec::new();
    let base_timing = timing(Kind::Backstepping, cfg, &s, None, baseline.steps)?;
    for ((kind, model), r) in entries.iter().zip(&runs) {
        let t = timing(*kind, cfg, &s, model.as_ref(), baseline.steps)?;
        let ratio = base_timing.amortized / t.amortized;
        reports.push(EvaluationReport::evaluate(r, baseline, (0.0, s.horizon), Some(t))?);
        let grid = TriangularGrid::new(cfg.data.grid_n, s.length)?;
        let errs = match model {
            Some(Loaded::Operator(m)) if m.target == Target::Kernels => {
                Some(kernel_errors_per_km(&m.kernel_field(s.eq.lambda2, &grid)?, &solve_kernels(&s.eq, s.tau, &grid)?)?)
            }
            Some(Loaded::Pinn(p)) if p.check_instance(s.eq.lambda2).is_ok() => {
                Some(kernel_errors_per_km(&p.kernel_field(&grid)?, &solve_kernels(&s.eq, s.tau, &grid)?)?)
            }
            _ => None,
        };
        let (emax, emean) = errs.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        if let Some((a, b)) = errs {
            kernel_rows.push(format!("{:<16} {a:>14.3e} {b:>14.3e}", kind.name()));
        }
        extra.push(format!(",{ratio},{emax},{emean}"));
    }
    write(&cfg.out.join("compare.csv"), report_csv(&reports, ",timing_ratio,kernel_err_max_per_km,kernel_err_mean_per_km", &extra))?;
    let mut text = format!("preset {}\n{}\n\n", s.preset, equilibrium_line(&s));
    text.push_str(&EvaluationReport::table(&reports));
    if !kernel_rows.is_empty() {
        let _ = writeln!(text, "\nKernel error against the numerical solution [1/km]");
        let _ = writeln!(text, "{:<16} {:>14} {:>14}", "method", "max", "mean");
        for row in &kernel_rows {
            let _ = writeln!(text, "{row}");
        }
    }
    let _ = writeln!(text, "\nCost per evaluation against backstepping (setup amortised over {} evaluations)", baseline.steps);
    for (r, e) in reports.iter().zip(&extra) {
        let ratio: f64 = e.split(',').nth(1).and_then(|x| x.parse().ok()).unwrap_or(f64::NAN);
        let _ = writeln!(text, "{:<16} {:>10.2}x", r.controller, ratio);
    }
    write(&cfg.out.join("tables.txt"), &text)?;
    print!("{text}");
    Ok(())
}
