use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gevolab_core::evolution::{EnergyCheckSettings, ProbeSettings, TraceSettings};
use gevolab_core::export::{tagged, tagged_option, write_columns, write_dense_matrix, write_json, write_trace_csv};
use gevolab_core::pseudo_op::{linear_fit, PowerIteration};
use gevolab_core::symbols::{zone_balance, EstimateSettings};
use gevolab_core::{
    build_conjugator, classify, compute_q1, probe_threshold, solve, transformed_energy_check,
    verify_symbol_estimate, ClassKind, CutoffFamily, Datum, EnergyCheckReport, EstimateGrid,
    Error, GevreyProbeResult, Quantizer, SymbolEstimateReport, WeightSymbols, WellPosednessClass,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, KeyLocator, OutputFormat};
use crate::error::CliError;

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    CheckFailed,
}

impl Outcome {
    fn from_pass(passed: bool) -> Self {
        if passed {
            Outcome::Pass
        } else {
            Outcome::CheckFailed
        }
    }
}

/// Relative `L2` drift tolerated by the free-flow conservation check.
pub const CONSERVATION_TOLERANCE: f64 = 1e-8;

/// Times at which the symbol estimates are sampled, as fractions of `T`.
const ESTIMATE_TIMES: [f64; 3] = [0.05, 0.3, 1.0];

pub struct Run {
    pub config: ExperimentConfig,
    pub class: WellPosednessClass,
    locator: KeyLocator,
}

impl Run {
    pub fn load(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self, CliError> {
        let (mut config, locator) = crate::config::load(path)?;
        if let Some(dir) = out {
            config.output.dir = dir;
        }
        if let Some(seed) = seed {
            config.seed = seed;
        }
        let class = classify(&config.profile).map_err(|e| locator.error("profile", e.to_string()))?;
        config.resolve(&class)?;
        Ok(Self { config, class, locator })
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = self.config.output.dir.as_path();
        fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.to_path_buf(), source })?;
        Ok(dir)
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        write_json(&self.out_dir()?.join("manifest.json"), &self.config)?;
        Ok(())
    }

    fn symbols(&self) -> Result<WeightSymbols, CliError> {
        let consts = self.config.constants().ok_or_else(|| {
            self.locator.error("consts", format!("no weight can be built for a {} profile; set every consts key", self.class.kind))
        })?;
        consts.validate().map_err(|e| self.locator.error("consts", e.to_string()))?;
        Ok(WeightSymbols::new(
            &self.config.profile,
            &self.class,
            &consts,
            &CutoffFamily::default(),
            self.config.model.a3_sign,
        )?)
    }

    fn format(&self) -> OutputFormat {
        self.config.output.format
    }
}

fn summary_line(class: &WellPosednessClass) -> String {
    let theta = class.theta_sup.map(|t| format!(", theta_sup={t:.6}")).unwrap_or_default();
    let branch = serde_json::to_value(class.theorem_branch).ok();
    let branch = branch.as_ref().and_then(|b| b.as_str()).unwrap_or("?");
    format!("{} via {branch}: q2={:.6}, q1={:.6}, q={:.6}{theta}", class.kind, class.q2, class.q1, class.q)
}

pub fn classify_cmd(run: &Run) -> Result<Outcome, CliError> {
    let json = serde_json::to_string_pretty(&run.class).map_err(Error::from)?;
    let mut stdout = io::stdout().lock();
    match writeln!(stdout, "{json}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
            return Err(CliError::Write { path: PathBuf::from("<stdout>"), source: e });
        }
        _ => {}
    }
    eprintln!("{}", summary_line(&run.class));
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct ZoneBalance {
    second: f64,
    first: f64,
}

#[derive(Serialize)]
struct SymbolsReport<'a> {
    kind: ClassKind,
    q: f64,
    fields: &'a [SymbolEstimateReport],
    zone_balance: ZoneBalance,
    passed: bool,
}

pub fn symbols_cmd(run: &Run) -> Result<Outcome, CliError> {
    let cfg = &run.config;
    let symbols = Arc::new(run.symbols()?);
    let h = symbols.consts.h;
    let times: Vec<f64> = ESTIMATE_TIMES.iter().map(|f| f * cfg.profile.horizon).collect();
    let grid = EstimateGrid::logarithmic(1e3, 1e3, h, times, 4);
    let settings = EstimateSettings { h, mu: symbols.consts.mu, cap: cfg.symbols.cap, ..Default::default() };
    let offset = cfg.symbols.order_offset;

    let mut reports = Vec::new();
    for field in [symbols.lambda2_field(), symbols.lambda1_field(), symbols.lambda_field(), symbols.dt_lambda_field()] {
        let declared = field.redeclared(field.order_xi - offset, field.weight_x);
        let report = verify_symbol_estimate(&declared, cfg.symbols.alpha_max, cfg.symbols.beta_max, &grid, &settings)?;
        eprintln!(
            "{}: order {:.4}, {} violations{}",
            report.label,
            report.order_xi,
            report.violation_count,
            if report.passed { "" } else { " (FAILED)" }
        );
        reports.push(report);
    }
    let q1_raw = compute_q1(cfg.profile.ell, cfg.profile.kprime, cfg.profile.sigma1)?;
    let (second, first) = zone_balance(&cfg.profile, run.class.q2, q1_raw);
    let passed = reports.iter().all(|r| r.passed);

    let dir = run.out_dir()?;
    run.write_manifest()?;
    let report = SymbolsReport { kind: run.class.kind, q: run.class.q, fields: &reports, zone_balance: ZoneBalance { second, first }, passed };
    write_json(&dir.join("symbols.json"), &report)?;

    let lambda = symbols.lambda_field();
    let (mut ts, mut xs, mut xis, mut values) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &t in &grid.times {
        for &x in &grid.xs {
            for &xi in &grid.xis {
                ts.push(t);
                xs.push(x);
                xis.push(xi);
                values.push(lambda.eval(t, x, xi)?.re);
            }
        }
    }
    write_columns(&dir.join("lambda.bin"), &[("t", &ts), ("x", &xs), ("xi", &xis), ("lambda", &values)])?;
    Ok(Outcome::from_pass(passed))
}

#[derive(Debug, Clone, Serialize)]
struct LadderRung {
    h: f64,
    #[serde(with = "tagged")]
    residual_norm: f64,
    invertible: bool,
    neumann_terms: Option<usize>,
    #[serde(with = "tagged_option")]
    inverse_defect: Option<f64>,
}

#[derive(Serialize)]
struct InvertReport<'a> {
    t: f64,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "L")]
    half_length: f64,
    ladder: &'a [LadderRung],
    #[serde(with = "tagged")]
    slope: f64,
    target_slope: f64,
    /// Smallest rung from which every larger rung is invertible.
    h0: Option<f64>,
    passed: bool,
}

pub fn invert_cmd(run: &Run) -> Result<Outcome, CliError> {
    let cfg = &run.config;
    let symbols = run.symbols()?;
    let t = cfg.profile.horizon;
    let power = PowerIteration { seed: cfg.seed, ..Default::default() };
    let mut ladder = Vec::new();
    let mut last = None;
    for &h in &cfg.invert.h_ladder {
        let grid = Quantizer::new(cfg.invert.n, cfg.invert.half_length, h)?;
        let rung = match build_conjugator(&grid, &symbols, t, &power) {
            Ok(c) => {
                let rung = LadderRung {
                    h,
                    residual_norm: c.residual_norm,
                    invertible: true,
                    neumann_terms: Some(c.neumann_terms),
                    inverse_defect: Some(c.inverse_defect),
                };
                last = Some(c);
                rung
            }
            Err(Error::NotInvertible(r)) => {
                last = None;
                LadderRung { h, residual_norm: r, invertible: false, neumann_terms: None, inverse_defect: None }
            }
            Err(e) => return Err(e.into()),
        };
        eprintln!("h = {h}: residual norm {:.3e}{}", rung.residual_norm, if rung.invertible { "" } else { " (not invertible)" });
        ladder.push(rung);
    }

    let fit: Vec<(f64, f64)> = ladder
        .iter()
        .filter(|r| r.residual_norm > 0.0 && r.residual_norm.is_finite())
        .map(|r| (r.h.ln(), r.residual_norm.ln()))
        .collect();
    let slope = if fit.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = fit.into_iter().unzip();
        linear_fit(&x, &y).0
    } else {
        f64::NAN
    };
    let h0 = (0..ladder.len()).find(|&i| ladder[i..].iter().all(|r| r.invertible)).map(|i| ladder[i].h);
    let passed = ladder.last().is_some_and(|r| r.invertible);

    let dir = run.out_dir()?;
    run.write_manifest()?;
    let report = InvertReport {
        t,
        n: cfg.invert.n,
        half_length: cfg.invert.half_length,
        ladder: &ladder,
        slope,
        target_slope: -(1.0 - run.class.q),
        h0,
        passed,
    };
    write_json(&dir.join("invert.json"), &report)?;
    if run.format() == OutputFormat::Csv {
        write_csv(&dir.join("ladder.csv"), "h,residual_norm,invertible,neumann_terms,inverse_defect", ladder.iter().map(|r| {
            vec![
                csv(r.h),
                csv(r.residual_norm),
                r.invertible.to_string(),
                r.neumann_terms.map(|j| j.to_string()).unwrap_or_default(),
                r.inverse_defect.map(csv).unwrap_or_default(),
            ]
        }))?;
    }
    if cfg.invert.export {
        if let Some(c) = last {
            let h = ladder.last().map(|r| r.h).unwrap_or(1.0);
            write_dense_matrix(&dir.join("residual.bin"), cfg.invert.n, &c.residual.to_dense(), &format!("E R - I at h = {h}"))?;
        }
    }
    eprintln!("fitted slope {slope:.3}, h0 {h0:?}");
    Ok(Outcome::from_pass(passed))
}

#[derive(Serialize)]
struct ConservationCheck {
    tolerance: f64,
    #[serde(with = "tagged")]
    max_drift: f64,
    passed: bool,
}

#[derive(Serialize)]
struct EvolveReport<'a> {
    kind: ClassKind,
    dt: f64,
    steps: usize,
    blow_up_time: Option<f64>,
    conservation: Option<ConservationCheck>,
    energy: Option<&'a EnergyCheckReport>,
    energy_skipped: Option<String>,
    passed: bool,
}

pub fn evolve_cmd(run: &Run) -> Result<Outcome, CliError> {
    let cfg = &run.config;
    let grid = cfg.solver_grid()?;
    let problem = cfg.model_problem();
    let horizon = cfg.profile.horizon;
    let dt = cfg.dt();
    let consts = cfg.constants();
    let settings = TraceSettings {
        m: cfg.evolve.m,
        gevrey: consts.map(|c| (c.rho0 * (horizon + 1.0), c.theta)),
        snapshots: cfg.evolve.snapshots,
    };
    let trace = solve(&problem, &grid, horizon, dt, cfg.time.record_every, &settings)?;

    let conservation = cfg.model.is_free_flow().then(|| {
        let base = trace.l2[0];
        let max_drift = trace.l2.iter().map(|v| (v / base - 1.0).abs()).fold(0.0, f64::max);
        let max_drift = if trace.blow_up_time.is_some() { f64::INFINITY } else { max_drift };
        ConservationCheck { tolerance: CONSERVATION_TOLERANCE, max_drift, passed: max_drift <= CONSERVATION_TOLERANCE }
    });

    let (energy, energy_skipped) = if run.class.kind == ClassKind::OutOfScope {
        (None, Some(format!("no energy estimate applies: {}", run.class.trace.last().cloned().unwrap_or_default())))
    } else {
        let symbols = run.symbols()?;
        let gevrey = run.class.kind == ClassKind::GevreyHInfinity;
        if gevrey {
            symbols.consts.check_theta(&run.class).map_err(|e| run.locator.error("consts.theta", e.to_string()))?;
        }
        let settings = EnergyCheckSettings {
            dt,
            record_every: cfg.time.record_every,
            theta: symbols.consts.theta,
            rho0: if gevrey { symbols.consts.rho0 } else { 0.0 },
            horizon,
            cap: cfg.evolve.energy_cap,
        };
        (Some(transformed_energy_check(&problem, &grid, Some(&symbols), &settings)?), None)
    };

    let passed = trace.blow_up_time.is_none()
        && conservation.as_ref().is_none_or(|c| c.passed)
        && energy.as_ref().is_none_or(|e| e.passed);

    let dir = run.out_dir()?;
    run.write_manifest()?;
    match run.format() {
        OutputFormat::Csv => write_trace_csv(&dir.join("trace.csv"), &trace, None)?,
        OutputFormat::Json => write_json(&dir.join("trace.json"), &trace)?,
    }
    write_spectra(&dir.join("spectra.bin"), &grid, &trace.spectrum_snapshots)?;
    if let Some(c) = &conservation {
        eprintln!("L2 drift {:.3e} (tolerance {:.0e})", c.max_drift, c.tolerance);
    }
    if let Some(e) = &energy {
        eprintln!("energy constant {} (cap {})", csv(e.constant), e.cap);
    }
    if let Some(t) = trace.blow_up_time {
        eprintln!("solution overflowed at t = {t}");
    }
    let report = EvolveReport {
        kind: run.class.kind,
        dt,
        steps: trace.steps,
        blow_up_time: trace.blow_up_time,
        conservation,
        energy: energy.as_ref(),
        energy_skipped,
        passed,
    };
    write_json(&dir.join("evolve.json"), &report)?;
    Ok(Outcome::from_pass(passed))
}

fn write_spectra(path: &Path, grid: &Quantizer, snapshots: &[gevolab_core::evolution::SpectrumSnapshot]) -> Result<(), CliError> {
    let (mut ts, mut xis, mut moduli) = (Vec::new(), Vec::new(), Vec::new());
    for s in snapshots {
        for (&xi, &m) in grid.xis().iter().zip(&s.modulus) {
            ts.push(s.t);
            xis.push(xi);
            moduli.push(m);
        }
    }
    write_columns(path, &[("t", &ts), ("xi", &xis), ("modulus", &moduli)])?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeSummary {
    theta: f64,
    #[serde(with = "tagged")]
    q_hat: f64,
    verdict: gevolab_core::ProbeVerdict,
    file: String,
}

/// Analytic datum with `|u_hat| ~ exp(-<xi>/2)`, whose Gevrey radius is
/// finite for every theta.
const PROBE_DATUM: Datum = Datum::AnalyticSpectrum { decay: 0.5 };

pub fn probe_cmd(run: &Run) -> Result<Outcome, CliError> {
    let cfg = &run.config;
    let grid = cfg.solver_grid()?;
    let mut problem = cfg.model_problem();
    problem.datum = PROBE_DATUM;
    let horizon = cfg.profile.horizon;
    let settings = ProbeSettings {
        dt: cfg.dt(),
        rho0: cfg.consts.rho0.unwrap_or(ProbeSettings::default().rho0),
        rho_floor: cfg.probe.rho_floor,
        snapshots: cfg.evolve.snapshots,
        ..Default::default()
    };
    let results = probe_threshold(&problem, &grid, &cfg.probe.theta_list, horizon, &settings)?;
    let trace_settings = TraceSettings { m: cfg.evolve.m, gevrey: None, snapshots: cfg.evolve.snapshots };
    let trace = solve(&problem, &grid, horizon, cfg.dt(), cfg.time.record_every, &trace_settings)?;

    let dir = run.out_dir()?;
    run.write_manifest()?;
    let mut summary = Vec::new();
    for r in &results {
        let name = format!("probe_theta_{}", r.theta_tested);
        write_json(&dir.join(format!("{name}.json")), r)?;
        if run.format() == OutputFormat::Csv {
            write_trace_csv(&dir.join(format!("{name}.csv")), &trace, Some(r))?;
        }
        eprintln!("theta {}: q_hat {:.4}, {:?}", r.theta_tested, r.q_hat, r.verdict);
        summary.push(ProbeSummary { theta: r.theta_tested, q_hat: r.q_hat, verdict: r.verdict, file: format!("{name}.json") });
    }
    write_json(&dir.join("probe.json"), &summary)?;
    if run.format() == OutputFormat::Csv {
        write_csv(&dir.join("probe.csv"), "theta,t,rho_fit,residual,modes", radius_rows(&results))?;
    }
    Ok(Outcome::Pass)
}

fn radius_rows(results: &[GevreyProbeResult]) -> impl Iterator<Item = Vec<String>> + '_ {
    results.iter().flat_map(|r| {
        r.rho_fit
            .iter()
            .map(move |s| vec![csv(r.theta_tested), csv(s.t), csv(s.rho), csv(s.residual), s.modes.to_string()])
    })
}

fn csv(v: f64) -> String {
    gevolab_core::export::csv_value(v)
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}
