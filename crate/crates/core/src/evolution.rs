//! Pseudospectral RK4 solver for model degenerate third-order problems,
//! norm monitoring, the transformed energy check and the Gevrey growth probe.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::classification::{compute_q2, DegeneracyProfile};
use crate::error::{Error, Result};
use crate::export::{tagged, tagged_option, tagged_option_vec, tagged_pairs, tagged_vec};
use crate::pseudo_op::{check_weight_range, linear_fit, GridFunction, Quantizer, WeightGrid};
use crate::symbols::{bracket, japanese, WeightSymbols};

/// Spectral amplitude beyond which a trajectory is declared blown up.
pub const BLOW_UP_THRESHOLD: f64 = 1e280;
/// Smallest spectral amplitude used in logarithmic fits.
pub const SPECTRAL_FLOOR: f64 = 1e-280;

/// Initial data of a model problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Datum {
    /// `exp(-x^2/2)`.
    Gaussian,
    /// Spectrum `exp(-decay <xi>)`, centred at `x = 0`.
    AnalyticSpectrum { decay: f64 },
    Samples(GridFunction),
}

impl Datum {
    pub fn on_grid(&self, grid: &Quantizer) -> Result<GridFunction> {
        match self {
            Datum::Gaussian => Ok(GridFunction::from_real(
                &grid.xs().iter().map(|x| (-0.5 * x * x).exp()).collect::<Vec<_>>(),
            )),
            Datum::AnalyticSpectrum { decay } => {
                let dx = grid.spacing();
                // Fourier coefficients of a function whose transform is
                // exp(-decay <xi>), sampled with spacing dx.
                let spectrum: Vec<Complex64> = grid
                    .xis()
                    .iter()
                    .map(|&xi| Complex64::new((-decay * japanese(xi)).exp() / dx, 0.0))
                    .collect();
                Ok(grid.inverse(&spectrum))
            }
            Datum::Samples(u) => {
                if u.len() != grid.n {
                    return Err(Error::Grid(format!(
                        "datum has {} samples, grid has {}",
                        u.len(),
                        grid.n
                    )));
                }
                Ok(u.clone())
            }
        }
    }
}

/// Forcing term as a function of time.
pub type Forcing = Arc<dyn Fn(f64) -> GridFunction + Send + Sync>;

/// `P = D_t + a3(t) D^3 + a2(t,x) D^2 + a1(t,x) D + a0` with
/// `a3 = sign * c_a3 * t^ell`, `a2 = A2 t^k <x>^{-sigma2}`,
/// `a1 = A1 t^kprime <x>^{-sigma1}` and constant `a0`.
#[derive(Clone)]
pub struct ModelProblem {
    pub profile: DegeneracyProfile,
    pub a3_sign: f64,
    pub a2: Complex64,
    pub a1: Complex64,
    pub a0: Complex64,
    pub forcing: Option<Forcing>,
    pub datum: Datum,
    /// When false the coefficients lose their `<x>` decay.
    pub x_decay: bool,
    /// Replaces `ell` in the leading coefficient, e.g. 0 for a
    /// constant-coefficient flow.
    pub leading_power: Option<f64>,
}

impl fmt::Debug for ModelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelProblem")
            .field("profile", &self.profile)
            .field("a3_sign", &self.a3_sign)
            .field("a2", &self.a2)
            .field("a1", &self.a1)
            .field("a0", &self.a0)
            .field("forced", &self.forcing.is_some())
            .field("datum", &self.datum)
            .field("x_decay", &self.x_decay)
            .field("leading_power", &self.leading_power)
            .finish()
    }
}

impl ModelProblem {
    /// Gaussian datum, `a3 = c_a3 t^ell`, `a2 = 0.05 i t^k <x>^{-sigma2}`.
    pub fn new(profile: DegeneracyProfile) -> Self {
        Self {
            profile,
            a3_sign: 1.0,
            a2: Complex64::new(0.0, 0.05),
            a1: Complex64::new(0.0, 0.0),
            a0: Complex64::new(0.0, 0.0),
            forcing: None,
            datum: Datum::Gaussian,
            x_decay: true,
            leading_power: None,
        }
    }

    /// Only the leading term.
    pub fn free_flow(profile: DegeneracyProfile) -> Self {
        Self { a2: Complex64::new(0.0, 0.0), ..Self::new(profile) }
    }

    pub fn leading_exponent(&self) -> f64 {
        self.leading_power.unwrap_or(self.profile.ell)
    }

    pub fn a3(&self, t: f64) -> f64 {
        self.a3_sign.signum() * self.profile.a3_lower * t.powf(self.leading_exponent())
    }

    /// `dt <= c / (C_a3 T^ell xi_max^3 + |A2| T^k xi_max^2 + 1)`.
    pub fn cfl_bound(&self, grid: &Quantizer, horizon: f64, safety: f64) -> f64 {
        let xi = grid.xi_max();
        let p = &self.profile;
        safety
            / (p.a3_upper * horizon.powf(self.leading_exponent()) * xi.powi(3)
                + self.a2.norm() * horizon.powf(p.k) * xi * xi
                + 1.0)
    }
}

/// Default CFL safety factor.
pub const CFL_SAFETY: f64 = 0.5;

/// Right-hand side evaluator working on FFT-ordered spectra.
struct Rhs<'a> {
    problem: &'a ModelProblem,
    grid: &'a Quantizer,
    xi: Vec<f64>,
    mask: Vec<f64>,
    decay2: Vec<f64>,
    decay1: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl<'a> Rhs<'a> {
    fn new(problem: &'a ModelProblem, grid: &'a Quantizer) -> Self {
        let n = grid.n;
        let dk = std::f64::consts::PI / grid.half_length;
        let xi: Vec<f64> = (0..n)
            .map(|k| if k < n / 2 { k as f64 * dk } else { (k as f64 - n as f64) * dk })
            .collect();
        let cut = grid.dealias_fraction * grid.xi_max() * (1.0 + 1e-12);
        let mask = xi.iter().map(|v| if v.abs() <= cut { 1.0 } else { 0.0 }).collect();
        let weight = |sigma: f64| -> Vec<f64> {
            grid.xs()
                .iter()
                .map(|&x| if problem.x_decay { japanese(x).powf(-sigma) } else { 1.0 })
                .collect()
        };
        let mut planner = FftPlanner::new();
        Self {
            problem,
            grid,
            xi,
            mask,
            decay2: weight(problem.profile.sigma2),
            decay1: weight(problem.profile.sigma1),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// `-i FFT(c(x) * IFFT(xi^power * v))`, accumulated into `out`.
    fn add_variable_term(&self, out: &mut [Complex64], v: &[Complex64], coefficient: Complex64, decay: &[f64], power: i32) {
        let n = self.grid.n;
        let mut buffer: Vec<Complex64> = v.iter().zip(&self.xi).map(|(a, x)| a * x.powi(power)).collect();
        self.inverse.process(&mut buffer);
        let scale = 1.0 / n as f64;
        for (b, w) in buffer.iter_mut().zip(decay) {
            *b *= coefficient * (w * scale);
        }
        self.forward.process(&mut buffer);
        for (o, b) in out.iter_mut().zip(&buffer) {
            *o -= Complex64::i() * b;
        }
    }

    fn eval(&self, t: f64, state: &[Complex64]) -> Vec<Complex64> {
        let p = self.problem;
        let v: Vec<Complex64> = state.iter().zip(&self.mask).map(|(a, m)| a * m).collect();
        let a3 = p.a3(t);
        let mut out: Vec<Complex64> = v
            .iter()
            .zip(&self.xi)
            .map(|(a, x)| Complex64::i() * (-(a3 * x * x * x) - p.a0) * a)
            .collect();
        if p.a2 != Complex64::new(0.0, 0.0) {
            let c = p.a2 * t.powf(p.profile.k);
            self.add_variable_term(&mut out, &v, c, &self.decay2, 2);
        }
        if p.a1 != Complex64::new(0.0, 0.0) {
            let c = p.a1 * t.powf(p.profile.kprime);
            self.add_variable_term(&mut out, &v, c, &self.decay1, 1);
        }
        if let Some(forcing) = &p.forcing {
            let mut f = forcing(t).values;
            self.forward.process(&mut f);
            for (o, fv) in out.iter_mut().zip(&f) {
                *o += Complex64::i() * fv;
            }
        }
        for (o, m) in out.iter_mut().zip(&self.mask) {
            *o *= m;
        }
        out
    }

    fn rk4(&self, t: f64, dt: f64, state: &[Complex64]) -> Vec<Complex64> {
        let axpy = |base: &[Complex64], k: &[Complex64], h: f64| -> Vec<Complex64> {
            base.iter().zip(k).map(|(a, b)| a + b * h).collect()
        };
        let k1 = self.eval(t, state);
        let k2 = self.eval(t + 0.5 * dt, &axpy(state, &k1, 0.5 * dt));
        let k3 = self.eval(t + 0.5 * dt, &axpy(state, &k2, 0.5 * dt));
        let k4 = self.eval(t + dt, &axpy(state, &k3, dt));
        (0..state.len())
            .map(|i| state[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
            .collect()
    }

    fn to_spectrum(&self, u: &GridFunction) -> Vec<Complex64> {
        let mut buffer = u.values.clone();
        self.forward.process(&mut buffer);
        buffer
    }

    fn to_grid(&self, spectrum: &[Complex64]) -> GridFunction {
        let mut buffer = spectrum.to_vec();
        self.inverse.process(&mut buffer);
        let scale = 1.0 / self.grid.n as f64;
        GridFunction::new(buffer.into_iter().map(|v| v * scale).collect())
    }
}

fn check_dt(problem: &ModelProblem, grid: &Quantizer, horizon: f64, dt: f64) -> Result<()> {
    let bound = problem.cfl_bound(grid, horizon, CFL_SAFETY);
    if !(dt > 0.0 && dt <= bound) {
        return Err(Error::Cfl { dt, bound });
    }
    Ok(())
}

/// One classical RK4 step of
/// `u_t = i(-a3 D^3 - a2 D^2 - a1 D - a0) u + i f`, dealiased per stage.
pub fn step(state: &GridFunction, t: f64, dt: f64, problem: &ModelProblem, grid: &Quantizer) -> Result<GridFunction> {
    check_dt(problem, grid, t + dt, dt)?;
    let rhs = Rhs::new(problem, grid);
    let next = rhs.rk4(t, dt, &rhs.to_spectrum(state));
    Ok(rhs.to_grid(&next))
}

/// Integration outcome of [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub dt: f64,
    pub blow_up_time: Option<f64>,
}

/// Steps from 0 to `horizon` with a step no larger than `dt`, calling
/// `observe(step, t, spectrum)` at step 0, every `record_every` steps and at
/// the end. Spectra are in FFT order.
pub fn integrate<F>(problem: &ModelProblem, grid: &Quantizer, horizon: f64, dt: f64, record_every: usize, mut observe: F) -> Result<RunSummary>
where
    F: FnMut(usize, f64, &[Complex64]) -> Result<()>,
{
    if !(horizon > 0.0) {
        return Err(Error::Grid(format!("time horizon must be positive, got {horizon}")));
    }
    let steps = (horizon / dt).ceil().max(1.0) as usize;
    let dt_used = horizon / steps as f64;
    check_dt(problem, grid, horizon, dt_used)?;
    let record_every = record_every.max(1);
    let rhs = Rhs::new(problem, grid);
    let mut state = rhs.to_spectrum(&problem.datum.on_grid(grid)?);
    for (s, m) in state.iter_mut().zip(&rhs.mask) {
        *s *= m;
    }
    observe(0, 0.0, &state)?;
    for i in 1..=steps {
        let t = (i - 1) as f64 * dt_used;
        state = rhs.rk4(t, dt_used, &state);
        let t_next = i as f64 * dt_used;
        let blown = state.iter().any(|v| !v.norm().is_finite() || v.norm() > BLOW_UP_THRESHOLD);
        if blown {
            return Ok(RunSummary { steps: i, dt: dt_used, blow_up_time: Some(t_next) });
        }
        if i % record_every == 0 || i == steps {
            observe(i, t_next, &state)?;
        }
    }
    Ok(RunSummary { steps, dt: dt_used, blow_up_time: None })
}

/// `|u_hat|` in centred frequency order at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSnapshot {
    pub t: f64,
    pub modulus: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    /// Sobolev order of the `hm` column.
    pub m: f64,
    /// Gevrey radius and index of the `gevrey` column, if recorded.
    pub gevrey: Option<(f64, f64)>,
    /// Approximate number of spectrum snapshots.
    pub snapshots: usize,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self { m: 1.0, gevrey: None, snapshots: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    #[serde(with = "tagged_vec")]
    pub l2: Vec<f64>,
    #[serde(with = "tagged_vec")]
    pub hm: Vec<f64>,
    #[serde(with = "tagged_option_vec")]
    pub gevrey: Option<Vec<f64>>,
    pub spectrum_snapshots: Vec<SpectrumSnapshot>,
    pub m: f64,
    pub dt: f64,
    pub steps: usize,
    /// Set when the trajectory overflowed; the trace stops there.
    pub blow_up_time: Option<f64>,
}

/// `(dx/N) sum |w(xi) u_hat|^2`, the discrete Parseval form of the
/// weighted `L^2` norm squared, for an FFT-ordered spectrum.
fn weighted_energy(grid: &Quantizer, spectrum_fft: &[Complex64], weight: impl Fn(f64) -> f64) -> f64 {
    let n = grid.n;
    let dk = std::f64::consts::PI / grid.half_length;
    let scale = grid.spacing() / n as f64;
    spectrum_fft
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let xi = if k < n / 2 { k as f64 * dk } else { (k as f64 - n as f64) * dk };
            v.norm_sqr() * weight(xi).powi(2)
        })
        .sum::<f64>()
        * scale
}

fn centred_modulus(grid: &Quantizer, spectrum_fft: &[Complex64]) -> Vec<f64> {
    let n = grid.n;
    (0..n).map(|m| spectrum_fft[(m + n / 2) % n].norm()).collect()
}

/// `|| <D>_h^m exp(rho <D>_h^{1/theta}) u ||_{L^2}`.
pub fn gevrey_sobolev_norm(u: &GridFunction, grid: &Quantizer, m: f64, rho: f64, theta: f64, h: f64) -> Result<f64> {
    check_weight_range(rho, theta, h, grid.xi_max())?;
    let mut spectrum = u.values.clone();
    FftPlanner::new().plan_fft_forward(grid.n).process(&mut spectrum);
    Ok(weighted_energy(grid, &spectrum, |xi| {
        let b = bracket(xi, h);
        b.powf(m) * (rho * b.powf(1.0 / theta)).exp()
    })
    .sqrt())
}

/// Solves the model problem and records norms and spectrum snapshots.
pub fn solve(problem: &ModelProblem, grid: &Quantizer, horizon: f64, dt: f64, record_every: usize, settings: &TraceSettings) -> Result<EnergyTrace> {
    if let Some((rho, theta)) = settings.gevrey {
        check_weight_range(rho, theta, grid.h, grid.xi_max())?;
    }
    let steps_total = (horizon / dt).ceil().max(1.0) as usize;
    let snapshot_every = (steps_total / settings.snapshots.max(1)).max(1);
    let mut trace = EnergyTrace {
        times: Vec::new(),
        l2: Vec::new(),
        hm: Vec::new(),
        gevrey: settings.gevrey.map(|_| Vec::new()),
        spectrum_snapshots: Vec::new(),
        m: settings.m,
        dt: 0.0,
        steps: 0,
        blow_up_time: None,
    };
    let h = grid.h;
    let observe_every = record_every.max(1).min(snapshot_every);
    let summary = integrate(problem, grid, horizon, dt, observe_every, |i, t, spectrum| {
        let is_last = i == steps_total;
        if i % record_every.max(1) == 0 || is_last {
            trace.times.push(t);
            trace.l2.push(weighted_energy(grid, spectrum, |_| 1.0).sqrt());
            trace.hm.push(weighted_energy(grid, spectrum, |xi| bracket(xi, h).powf(settings.m)).sqrt());
            if let (Some(values), Some((rho, theta))) = (trace.gevrey.as_mut(), settings.gevrey) {
                values.push(weighted_energy(grid, spectrum, |xi| (rho * bracket(xi, h).powf(1.0 / theta)).exp()).sqrt());
            }
        }
        if i % snapshot_every == 0 || is_last {
            trace.spectrum_snapshots.push(SpectrumSnapshot { t, modulus: centred_modulus(grid, spectrum) });
        }
        Ok(())
    })?;
    trace.dt = summary.dt;
    trace.steps = summary.steps;
    trace.blow_up_time = summary.blow_up_time;
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheckSettings {
    pub dt: f64,
    pub record_every: usize,
    pub theta: f64,
    pub rho0: f64,
    pub horizon: f64,
    /// Largest acceptable fitted constant.
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheckReport {
    pub times: Vec<f64>,
    /// `||v(t)||^2` of the transformed solution.
    #[serde(with = "tagged_vec")]
    pub energy: Vec<f64>,
    /// `int_0^t ||f_{k,Lambda}||^2`.
    #[serde(with = "tagged_vec")]
    pub forcing_integral: Vec<f64>,
    /// Smallest `C` with `||v(t)||^2 <= C (||v(0)||^2 + int_0^t ||f_{k,Lambda}||^2)`.
    #[serde(with = "tagged")]
    pub constant: f64,
    pub cap: f64,
    pub passed: bool,
    pub blow_up_time: Option<f64>,
}

/// Solves the problem, transforms the trajectory by
/// `v(t) = exp(k(t) <D>_h^{1/theta}) exp(Lambda)(t, x, D) u(t)` with
/// `k(t) = rho0 (T + 1 - t)` and fits the energy constant. Without weight
/// symbols only the Gevrey factor is applied.
pub fn transformed_energy_check(
    problem: &ModelProblem,
    grid: &Quantizer,
    symbols: Option<&WeightSymbols>,
    settings: &EnergyCheckSettings,
) -> Result<EnergyCheckReport> {
    let horizon = settings.horizon;
    let k_of = |t: f64| settings.rho0 * (horizon + 1.0 - t);
    check_weight_range(k_of(0.0), settings.theta, grid.h, grid.xi_max())?;
    let operator_grid = grid.clone().with_dealias(1.0)?;
    let weights = symbols.map(|s| WeightGrid::new(&operator_grid, s)).transpose()?;
    let h = grid.h;

    let transform = |t: f64, u: &GridFunction| -> Result<f64> {
        let conjugated = match &weights {
            Some(w) => w.forward_operator(t)?.apply(u),
            None => u.clone(),
        };
        let k = k_of(t);
        let spectrum = operator_grid.forward(&conjugated);
        let dx = grid.spacing();
        let n = grid.n as f64;
        Ok(spectrum
            .iter()
            .zip(grid.xis())
            .map(|(v, &xi)| v.norm_sqr() * (2.0 * k * bracket(xi, h).powf(1.0 / settings.theta)).exp())
            .sum::<f64>()
            * dx
            / n)
    };

    let rhs_grid = grid.clone();
    let mut times = Vec::new();
    let mut energy = Vec::new();
    let mut forcing_norms = Vec::new();
    let summary = integrate(problem, grid, horizon, settings.dt, settings.record_every, |_, t, spectrum| {
        let mut buffer = spectrum.to_vec();
        FftPlanner::new().plan_fft_inverse(rhs_grid.n).process(&mut buffer);
        let scale = 1.0 / rhs_grid.n as f64;
        let u = GridFunction::new(buffer.into_iter().map(|v| v * scale).collect());
        times.push(t);
        energy.push(transform(t, &u)?);
        let f = match &problem.forcing {
            Some(forcing) => transform(t, &forcing(t))?,
            None => 0.0,
        };
        forcing_norms.push(f);
        Ok(())
    })?;

    let mut forcing_integral = vec![0.0; times.len()];
    for i in 1..times.len() {
        forcing_integral[i] =
            forcing_integral[i - 1] + 0.5 * (forcing_norms[i] + forcing_norms[i - 1]) * (times[i] - times[i - 1]);
    }
    let base = energy.first().copied().unwrap_or(0.0);
    let constant = energy
        .iter()
        .zip(&forcing_integral)
        .map(|(e, f)| e / (base + f))
        .fold(0.0, f64::max);
    let constant = if summary.blow_up_time.is_some() { f64::INFINITY } else { constant };
    Ok(EnergyCheckReport {
        times,
        energy,
        forcing_integral,
        constant,
        cap: settings.cap,
        passed: constant.is_finite() && constant <= settings.cap,
        blow_up_time: summary.blow_up_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeVerdict {
    RadiusPersists,
    RadiusCollapses,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusSample {
    pub t: f64,
    #[serde(with = "tagged")]
    pub rho: f64,
    /// Root-mean-square residual of the log-spectrum fit.
    #[serde(with = "tagged")]
    pub residual: f64,
    pub modes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDiagnostics {
    /// `|xi|` band of the radius fit.
    pub radius_band: (f64, f64),
    /// `|xi|` band of the growth-exponent fit.
    pub growth_band: (f64, f64),
    pub growth_modes: usize,
    #[serde(with = "tagged")]
    pub growth_residual: f64,
    /// Exponent of the zone-cut per-mode growth bound over the same band.
    #[serde(with = "tagged_option")]
    pub heuristic_exponent: Option<f64>,
    pub blow_up_time: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevreyProbeResult {
    pub theta_tested: f64,
    pub rho_fit: Vec<RadiusSample>,
    #[serde(with = "tagged")]
    pub q_hat: f64,
    /// `(t, q_hat(t))` measured against the initial spectrum.
    #[serde(with = "tagged_pairs")]
    pub q_hat_running: Vec<(f64, f64)>,
    pub verdict: ProbeVerdict,
    pub fit_diagnostics: ProbeDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub dt: f64,
    pub rho0: f64,
    pub rho_floor: f64,
    pub snapshots: usize,
    /// Radius fits with relative residual above this are inconclusive.
    pub max_relative_residual: f64,
    /// Growth fits with residual above this are inconclusive.
    pub max_growth_residual: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            dt: f64::INFINITY,
            rho0: 0.1,
            rho_floor: 1e-3,
            snapshots: 20,
            max_relative_residual: 0.25,
            max_growth_residual: 0.5,
        }
    }
}

/// Fewest modes accepted by any probe fit.
pub const MIN_FIT_MODES: usize = 8;
/// Log growth below this counts as no growth.
const GROWTH_THRESHOLD: f64 = 1e-6;

fn fit_radius(grid: &Quantizer, modulus: &[f64], theta: f64, t: f64) -> RadiusSample {
    let cut = 2.0 / 3.0 * grid.xi_max();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&xi, &a) in grid.xis().iter().zip(modulus) {
        if a > SPECTRAL_FLOOR && a.is_finite() && xi.abs() <= cut {
            xs.push(bracket(xi, grid.h).powf(1.0 / theta));
            ys.push(a.ln());
        }
    }
    if xs.len() < MIN_FIT_MODES {
        return RadiusSample { t, rho: f64::NAN, residual: f64::NAN, modes: xs.len() };
    }
    let (slope, intercept) = linear_fit(&xs, &ys);
    let rms = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    let range = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    RadiusSample { t, rho: -slope, residual: if range > 0.0 { rms / range } else { 0.0 }, modes: xs.len() }
}

struct GrowthFit {
    exponent: f64,
    residual: f64,
    modes: usize,
}

fn growth_band(grid: &Quantizer) -> (f64, f64) {
    let top = 2.0 / 3.0 * grid.xi_max();
    (0.5 * top, top)
}

fn fit_growth(grid: &Quantizer, initial: &[f64], current: &[f64]) -> GrowthFit {
    let (lo, hi) = growth_band(grid);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (m, &xi) in grid.xis().iter().enumerate() {
        let (a0, a) = (initial[m], current[m]);
        if xi.abs() < lo || xi.abs() > hi * (1.0 + 1e-12) || a0 <= SPECTRAL_FLOOR || !a.is_finite() {
            continue;
        }
        let growth = (a / a0).ln();
        if growth > GROWTH_THRESHOLD {
            xs.push(bracket(xi, grid.h).ln());
            ys.push(growth.ln());
        }
    }
    if xs.len() < MIN_FIT_MODES {
        return GrowthFit { exponent: 0.0, residual: 0.0, modes: xs.len() };
    }
    let (slope, intercept) = linear_fit(&xs, &ys);
    let rms = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    GrowthFit { exponent: slope.max(0.0), residual: rms, modes: xs.len() }
}

/// Slope of `ln` of the zone-cut growth bound
/// `|A2| xi^2 min(T, <xi>^{-(2-q2)/(k+1)})^{k+1} / (k+1)` against `ln <xi>`.
fn heuristic_exponent(problem: &ModelProblem, grid: &Quantizer, horizon: f64) -> Option<f64> {
    let p = &problem.profile;
    let q2 = compute_q2(p.ell, p.k, p.sigma2).ok()?;
    let amplitude = problem.a2.im.abs();
    if amplitude == 0.0 || !(q2 < 2.0) {
        return None;
    }
    let (lo, hi) = growth_band(grid);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &xi in grid.xis() {
        if xi.abs() < lo || xi.abs() > hi {
            continue;
        }
        let b = bracket(xi, grid.h);
        let cut = horizon.min(b.powf(-(2.0 - q2) / (p.k + 1.0)));
        let growth = amplitude * xi * xi * cut.powf(p.k + 1.0) / (p.k + 1.0);
        xs.push(b.ln());
        ys.push(growth.ln());
    }
    (xs.len() >= 2).then(|| linear_fit(&xs, &ys).0)
}

/// Runs the problem once and, for each `theta`, fits the Gevrey radius of
/// the spectrum over time and the growth exponent `q_hat`.
pub fn probe_threshold(problem: &ModelProblem, grid: &Quantizer, theta_list: &[f64], horizon: f64, settings: &ProbeSettings) -> Result<Vec<GevreyProbeResult>> {
    let dt = settings.dt.min(problem.cfl_bound(grid, horizon, CFL_SAFETY));
    let trace = solve(
        problem,
        grid,
        horizon,
        dt,
        usize::MAX,
        &TraceSettings { m: 0.0, gevrey: None, snapshots: settings.snapshots },
    )?;
    let snapshots = &trace.spectrum_snapshots;
    let initial = &snapshots[0].modulus;
    let last = snapshots.last().expect("initial snapshot is always recorded");
    let final_fit = fit_growth(grid, initial, &last.modulus);
    let q_hat_running: Vec<(f64, f64)> = snapshots
        .iter()
        .map(|s| {
            let fit = fit_growth(grid, initial, &s.modulus);
            (s.t, if fit.modes >= MIN_FIT_MODES { fit.exponent } else { f64::NAN })
        })
        .collect();
    let heuristic = heuristic_exponent(problem, grid, horizon);
    let cut = 2.0 / 3.0 * grid.xi_max();

    let results = theta_list
        .iter()
        .map(|&theta| {
            let rho_fit: Vec<RadiusSample> = snapshots.iter().map(|s| fit_radius(grid, &s.modulus, theta, s.t)).collect();
            let mut notes = Vec::new();
            let first = rho_fit[0];
            let end = *rho_fit.last().expect("nonempty");
            let too_few = rho_fit.iter().any(|r| r.modes < MIN_FIT_MODES);
            let noisy = rho_fit.iter().any(|r| r.residual > settings.max_relative_residual);
            let collapsed = trace.blow_up_time.is_some()
                || rho_fit.iter().any(|r| r.rho.is_finite() && r.rho < settings.rho_floor);
            let persist_level = (first.rho - settings.rho0 * (horizon + 1.0)).max(settings.rho_floor);
            let verdict = if too_few {
                notes.push(format!("fewer than {MIN_FIT_MODES} usable modes in the radius band"));
                ProbeVerdict::Inconclusive
            } else if collapsed {
                ProbeVerdict::RadiusCollapses
            } else if noisy {
                notes.push("radius fit residual above threshold".to_string());
                ProbeVerdict::Inconclusive
            } else if end.rho >= persist_level {
                ProbeVerdict::RadiusPersists
            } else {
                notes.push(format!("final radius {} below {}", end.rho, persist_level));
                ProbeVerdict::Inconclusive
            };
            if final_fit.modes < MIN_FIT_MODES {
                notes.push("no growing modes in the growth band; q_hat set to 0".to_string());
            } else if final_fit.residual > settings.max_growth_residual {
                notes.push(format!("growth fit residual {} above threshold", final_fit.residual));
            }
            GevreyProbeResult {
                theta_tested: theta,
                rho_fit,
                q_hat: final_fit.exponent,
                q_hat_running: q_hat_running.clone(),
                verdict,
                fit_diagnostics: ProbeDiagnostics {
                    radius_band: (0.0, cut),
                    growth_band: growth_band(grid),
                    growth_modes: final_fit.modes,
                    growth_residual: final_fit.residual,
                    heuristic_exponent: heuristic,
                    blow_up_time: trace.blow_up_time,
                    notes,
                },
            }
        })
        .collect();
    Ok(results)
}
