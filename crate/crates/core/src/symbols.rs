//! Weight symbols of the conjugating transformation and a finite-difference
//! checker for symbol-class estimates.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classification::{DegeneracyProfile, Regime, WellPosednessClass};
use crate::cutoffs::CutoffFamily;
use crate::error::{Error, Result};
use crate::export::tagged;
use crate::quadrature::integrate;

/// `<v>_h = sqrt(h^2 + v^2)`.
pub fn bracket(v: f64, h: f64) -> f64 {
    h.hypot(v)
}

/// `<x> = sqrt(1 + x^2)`.
pub fn japanese(x: f64) -> f64 {
    1f64.hypot(x)
}

/// Amplitudes and parameters of the weight `Lambda` and of the Gevrey
/// transformation `exp(k(t) <D>_h^{1/theta})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConstants {
    #[serde(rename = "M2")]
    pub m2: f64,
    #[serde(rename = "M1")]
    pub m1: f64,
    #[serde(rename = "Me2")]
    pub me2: f64,
    #[serde(rename = "Me1")]
    pub me1: f64,
    #[serde(rename = "Mpsi2")]
    pub mpsi2: f64,
    #[serde(rename = "Mpsi1")]
    pub mpsi1: f64,
    pub rho0: f64,
    pub h: f64,
    pub theta: f64,
    pub mu: f64,
}

/// Margin applied on top of the positivity thresholds for the amplitudes.
const AMPLITUDE_MARGIN: f64 = 1.01;

impl TransformConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("M2", self.m2),
            ("M1", self.m1),
            ("Me2", self.me2),
            ("Me1", self.me1),
            ("Mpsi2", self.mpsi2),
            ("Mpsi1", self.mpsi1),
            ("rho0", self.rho0),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Constants(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.h.is_finite() && self.h >= 1.0) {
            return Err(Error::Constants(format!("h must be at least 1, got {}", self.h)));
        }
        if !(self.theta.is_finite() && self.theta > 1.0) {
            return Err(Error::Constants(format!("theta must exceed 1, got {}", self.theta)));
        }
        if !(self.mu.is_finite() && self.mu > 1.0) {
            return Err(Error::Constants(format!("mu must exceed 1, got {}", self.mu)));
        }
        Ok(())
    }

    /// Checks `theta < 1/q` for a Gevrey class.
    pub fn check_theta(&self, class: &WellPosednessClass) -> Result<()> {
        if let Some(sup) = class.theta_sup {
            if self.theta >= sup {
                return Err(Error::Constants(format!(
                    "theta = {} is not below 1/q = {sup}",
                    self.theta
                )));
            }
        }
        Ok(())
    }

    /// Default constants for a profile: `h = 1`, `theta = 1.05`,
    /// `rho0 = 0.1`, `mu = 1.01`, the smallest admissible amplitudes with a
    /// 1% margin, and evolution-zone amplitudes estimated from the symbols.
    pub fn for_profile(
        profile: &DegeneracyProfile,
        class: &WellPosednessClass,
        cutoffs: &CutoffFamily,
    ) -> Result<Self> {
        let p = profile;
        let mut consts = Self {
            m2: AMPLITUDE_MARGIN * p.a2_bound / (3.0 * p.a3_lower),
            m1: AMPLITUDE_MARGIN * 2.0 * p.a1_bound / (3.0 * p.a3_lower),
            me2: 1.0,
            me1: 1.0,
            mpsi2: AMPLITUDE_MARGIN * p.a2_bound,
            mpsi1: AMPLITUDE_MARGIN * p.a1_bound,
            rho0: 0.1,
            h: 1.0,
            theta: 1.05,
            mu: 1.01,
        };
        let symbols = WeightSymbols::new(p, class, &consts, cutoffs, 1.0)?;
        consts.me2 = consts.m2 * symbols.level(LevelId::Second).evolution_amplitude_factor()?;
        consts.me1 = consts.m1 * symbols.level(LevelId::First).evolution_amplitude_factor()?;
        Ok(consts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelId {
    /// Built from the second-order coefficient.
    Second,
    /// Built from the first-order coefficient.
    First,
}

/// One level of the weight: the `lambda` symbol, its evolution-zone pieces
/// and its pseudodifferential-zone piece.
#[derive(Debug, Clone)]
pub struct Level {
    pub id: LevelId,
    /// Frequency power of the coefficient this level absorbs (2 or 1).
    pub power: f64,
    pub index: f64,
    pub time_order: f64,
    pub decay: f64,
    /// `ell - k` (or `ell - kprime`).
    pub gap: f64,
    pub amplitude: f64,
    pub evolution_amplitude: f64,
    pub zone_amplitude: f64,
    h: f64,
    a3_sign: f64,
    cutoffs: CutoffFamily,
    full_transition_integral: f64,
    full_zone_integral: f64,
}

fn profile_integrand(y: f64, scale: f64, decay: f64, cutoffs: &CutoffFamily) -> f64 {
    let jy = japanese(y);
    jy.powf(-decay) * cutoffs.psi(jy / scale)
}

/// Breakpoints at 0, 1, 2, 4, ... inside `[lo, hi]`, so each segment has a
/// bounded ratio of endpoints.
fn dyadic_segments(lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let mut points = vec![lo];
    let mut next = 1.0;
    while next <= lo {
        next *= 2.0;
    }
    while next < hi {
        points.push(next);
        next *= 2.0;
    }
    points.push(hi);
    points.windows(2).map(|w| (w[0], w[1])).collect()
}

impl Level {
    fn new(
        id: LevelId,
        profile: &DegeneracyProfile,
        class: &WellPosednessClass,
        consts: &TransformConstants,
        cutoffs: &CutoffFamily,
        a3_sign: f64,
    ) -> Result<Self> {
        let (power, index, time_order, decay, gap, amplitude, evolution_amplitude, zone_amplitude) =
            match id {
                LevelId::Second => (
                    2.0,
                    class.q2,
                    profile.k,
                    profile.sigma2,
                    profile.ell - profile.k,
                    consts.m2,
                    consts.me2,
                    consts.mpsi2,
                ),
                LevelId::First => (
                    1.0,
                    class.q1,
                    profile.kprime,
                    profile.sigma1,
                    profile.ell - profile.kprime,
                    consts.m1,
                    consts.me1,
                    consts.mpsi1,
                ),
            };
        let c = *cutoffs;
        let p = -gap - 1.0;
        let full_transition_integral =
            integrate(|u: f64| u.powf(p) * (1.0 - c.chi(u)), 0.5, 1.0)?;
        let full_zone_integral = integrate(|u: f64| u.powf(time_order) * c.chi(u), 0.5, 1.0)?;
        Ok(Self {
            id,
            power,
            index,
            time_order,
            decay,
            gap,
            amplitude,
            evolution_amplitude,
            zone_amplitude,
            h: consts.h,
            a3_sign,
            cutoffs: c,
            full_transition_integral,
            full_zone_integral,
        })
    }

    /// `<xi>_h^{(power - q)/(time_order + 1)}`: the zone boundary sits at
    /// `t * zone_speed = 1`.
    pub fn zone_speed(&self, xi: f64) -> f64 {
        bracket(xi, self.h).powf((self.power - self.index) / (self.time_order + 1.0))
    }

    /// Radius in `<x>` beyond which `lambda` stops growing.
    pub fn profile_scale(&self, xi: f64) -> f64 {
        bracket(xi, self.h).powf((self.power - self.index) / self.decay)
    }

    /// The `<xi>_h` factor of the evolution-zone time integral.
    pub fn growth_factor(&self, xi: f64) -> f64 {
        let b = bracket(xi, self.h);
        let shift = b.powf(-(2.0 - self.power));
        if self.decay < 1.0 {
            b.powf((self.power - self.index) * (1.0 - self.decay) / self.decay) * shift
        } else if self.decay == 1.0 {
            b.ln() * shift
        } else {
            shift
        }
    }

    fn plateau_and_support(scale: f64) -> (f64, f64) {
        let plateau = if scale > 2.0 { ((0.5 * scale).powi(2) - 1.0).sqrt() } else { 0.0 };
        let support = if scale > 1.0 { (scale * scale - 1.0).sqrt() } else { 0.0 };
        (plateau, support)
    }

    /// `int_lo^hi <y>^{-sigma} psi(<y>/scale) dy` for `0 <= lo <= hi`.
    fn profile_integral_between(&self, lo: f64, hi: f64, scale: f64) -> Result<f64> {
        let (plateau, support) = Self::plateau_and_support(scale);
        let hi = hi.min(support);
        if hi <= lo {
            return Ok(0.0);
        }
        let decay = self.decay;
        let c = self.cutoffs;
        let mut total = 0.0;
        let flat_end = hi.min(plateau);
        if flat_end > lo {
            for (a, b) in dyadic_segments(lo, flat_end) {
                total += integrate(|y: f64| japanese(y).powf(-decay), a, b)?;
            }
        }
        let bend_start = lo.max(plateau);
        if hi > bend_start {
            for (a, b) in dyadic_segments(bend_start, hi) {
                total += integrate(|y| profile_integrand(y, scale, decay, &c), a, b)?;
            }
        }
        Ok(total)
    }

    /// Prefactor `M * omega(xi/h) * <xi>_h^{-(2 - power)}` of `lambda`.
    fn lambda_prefactor(&self, xi: f64) -> f64 {
        let b = bracket(xi, self.h);
        self.amplitude * self.cutoffs.omega(xi / self.h, self.a3_sign) * b.powf(-(2.0 - self.power))
    }

    /// The time-independent symbol `lambda(x, xi)`.
    pub fn lambda(&self, x: f64, xi: f64) -> Result<f64> {
        let pre = self.lambda_prefactor(xi);
        if pre == 0.0 || x == 0.0 {
            return Ok(0.0);
        }
        let integral = self.profile_integral_between(0.0, x.abs(), self.profile_scale(xi))?;
        Ok(pre * x.signum() * integral)
    }

    /// `lambda(x, xi)` at every `x` in `xs`, sharing one cumulative sweep.
    pub fn lambda_column(&self, xs: &[f64], xi: f64) -> Result<Vec<f64>> {
        let pre = self.lambda_prefactor(xi);
        if pre == 0.0 {
            return Ok(vec![0.0; xs.len()]);
        }
        let scale = self.profile_scale(xi);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a].abs().total_cmp(&xs[b].abs()));
        let mut out = vec![0.0; xs.len()];
        let mut last = 0.0;
        let mut cumulative = 0.0;
        for i in order {
            let r = xs[i].abs();
            if r > last {
                cumulative += self.profile_integral_between(last, r, scale)?;
                last = r;
            }
            out[i] = if xs[i] == 0.0 { 0.0 } else { pre * xs[i].signum() * cumulative };
        }
        Ok(out)
    }

    /// `int_{1/2}^{upper} u^{-gap-1} (1 - chi(u)) du` for `upper >= 1/2`.
    fn transition_integral(&self, upper: f64) -> Result<f64> {
        let p = -self.gap - 1.0;
        if upper >= 1.0 {
            let plateau = if self.gap == 0.0 { upper.ln() } else { (upper.powf(-self.gap) - 1.0) / -self.gap };
            return Ok(self.full_transition_integral + plateau);
        }
        let c = self.cutoffs;
        integrate(|u: f64| u.powf(p) * (1.0 - c.chi(u)), 0.5, upper)
    }

    /// `int_0^{upper} u^{k} chi(u) du`.
    fn zone_integral(&self, upper: f64) -> Result<f64> {
        let k = self.time_order;
        let head = upper.min(0.5).powf(k + 1.0) / (k + 1.0);
        if upper <= 0.5 {
            return Ok(head);
        }
        if upper >= 1.0 {
            return Ok(head + self.full_zone_integral);
        }
        let c = self.cutoffs;
        Ok(head + integrate(|u: f64| u.powf(k) * c.chi(u), 0.5, upper)?)
    }

    /// `t^{-gap} (1 - chi)(t S)`, zero at `t = 0`.
    pub fn local_factor(&self, t: f64, xi: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let cut = 1.0 - self.cutoffs.chi(t * self.zone_speed(xi));
        if cut == 0.0 {
            return 0.0;
        }
        t.powf(-self.gap) * cut
    }

    /// `lambda_e = t^{-gap} lambda (1 - chi)(t S)` given `lambda(x, xi)`.
    pub fn local_piece(&self, t: f64, xi: f64, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        self.local_factor(t, xi) * lambda
    }

    /// `Lambda_e = -Me G(xi) int_0^t tau^{-gap-1} (1 - chi)(2 tau S) d tau`.
    pub fn evolution_piece(&self, t: f64, xi: f64) -> Result<f64> {
        let s2 = 2.0 * t * self.zone_speed(xi);
        if t <= 0.0 || s2 <= 0.5 {
            return Ok(0.0);
        }
        let scale = (2.0 * self.zone_speed(xi)).powf(self.gap);
        let integral = scale * self.transition_integral(s2)?;
        Ok(-self.evolution_amplitude * self.growth_factor(xi) * integral)
    }

    /// `Lambda_psi = -Mpsi <xi>_h^power int_0^t tau^k chi(tau S) d tau`.
    pub fn zone_piece(&self, t: f64, xi: f64) -> Result<f64> {
        if t <= 0.0 {
            return Ok(0.0);
        }
        let speed = self.zone_speed(xi);
        let integral = speed.powf(-(self.time_order + 1.0)) * self.zone_integral(t * speed)?;
        Ok(-self.zone_amplitude * bracket(xi, self.h).powf(self.power) * integral)
    }

    /// Time derivatives of the three pieces, given `lambda(x, xi)`.
    pub fn rates(&self, t: f64, xi: f64, lambda: f64) -> (f64, f64, f64) {
        if t <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let s = t * self.zone_speed(xi);
        let c = &self.cutoffs;
        let lead = t.powf(-self.gap - 1.0);
        let local = lead * (-self.gap * lambda * (1.0 - c.chi(s)) - lambda * c.chi_derivative(s) * s);
        let evolution =
            -self.evolution_amplitude * self.growth_factor(xi) * lead * (1.0 - c.chi(2.0 * s));
        let zone = -self.zone_amplitude
            * bracket(xi, self.h).powf(self.power)
            * t.powf(self.time_order)
            * c.chi(s);
        (local, evolution, zone)
    }

    /// Smallest factor `C` such that `Me = M * C` makes `-d/dt` of the
    /// evolution-zone pieces pointwise nonnegative, measured on a
    /// logarithmic frequency sweep.
    pub fn evolution_amplitude_factor(&self) -> Result<f64> {
        let bracket_term = self.gap.abs() + self.cutoffs.max_chi_log_derivative();
        let lowest = std::f64::consts::SQRT_2 * self.h;
        let samples = 400;
        let mut sup: f64 = 0.0;
        for i in 0..=samples {
            let b = lowest * (1e6f64 / lowest).powf(i as f64 / samples as f64);
            let xi = (b * b - self.h * self.h).sqrt();
            let integral = self.profile_integral_between(0.0, f64::INFINITY, self.profile_scale(xi))?;
            let ratio = integral * b.powf(-(2.0 - self.power)) / self.growth_factor(xi);
            sup = sup.max(ratio);
        }
        Ok(bracket_term * sup)
    }
}

/// The six pieces of `Lambda` at one point; inactive pieces are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LambdaParts {
    pub local2: f64,
    pub evolution2: f64,
    pub zone2: f64,
    pub local1: f64,
    pub evolution1: f64,
    pub zone1: f64,
}

impl LambdaParts {
    pub fn total(&self) -> f64 {
        self.local2 + self.evolution2 + self.zone2 + self.local1 + self.evolution1 + self.zone1
    }

    pub fn second(&self) -> f64 {
        self.local2 + self.evolution2 + self.zone2
    }

    pub fn first(&self) -> f64 {
        self.local1 + self.evolution1 + self.zone1
    }
}

/// `lambda_2`, `lambda_1` tabulated on an `x` by `xi` grid, row-major in `x`.
#[derive(Debug, Clone)]
pub struct LambdaTable {
    pub xs: Vec<f64>,
    pub xis: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda1: Vec<f64>,
}

/// The weight `Lambda` and its building blocks for one profile.
#[derive(Debug, Clone)]
pub struct WeightSymbols {
    pub profile: DegeneracyProfile,
    pub regime: Regime,
    pub q: f64,
    pub consts: TransformConstants,
    pub cutoffs: CutoffFamily,
    second: Level,
    first: Level,
}

impl WeightSymbols {
    pub fn new(
        profile: &DegeneracyProfile,
        class: &WellPosednessClass,
        consts: &TransformConstants,
        cutoffs: &CutoffFamily,
        a3_sign: f64,
    ) -> Result<Self> {
        profile.validate()?;
        if !(consts.h.is_finite() && consts.h >= 1.0) {
            return Err(Error::Constants(format!("h must be at least 1, got {}", consts.h)));
        }
        if class.q2 >= 2.0 || class.q1 >= 1.0 {
            return Err(Error::Domain(format!(
                "indices q2 = {}, q1 = {} leave no room for a weight",
                class.q2, class.q1
            )));
        }
        Ok(Self {
            profile: *profile,
            regime: class.regime(),
            q: class.q,
            consts: *consts,
            cutoffs: *cutoffs,
            second: Level::new(LevelId::Second, profile, class, consts, cutoffs, a3_sign)?,
            first: Level::new(LevelId::First, profile, class, consts, cutoffs, a3_sign)?,
        })
    }

    pub fn level(&self, id: LevelId) -> &Level {
        match id {
            LevelId::Second => &self.second,
            LevelId::First => &self.first,
        }
    }

    /// Copy with a different frequency shift `h`, keeping all amplitudes.
    pub fn with_h(&self, h: f64) -> Self {
        let mut out = self.clone();
        out.consts.h = h;
        out.second.h = h;
        out.first.h = h;
        out
    }

    pub fn lambda2(&self, x: f64, xi: f64) -> Result<f64> {
        self.second.lambda(x, xi)
    }

    pub fn lambda1(&self, x: f64, xi: f64) -> Result<f64> {
        self.first.lambda(x, xi)
    }

    /// Splits `Lambda` into its pieces, given precomputed `lambda` values.
    pub fn parts_from_values(&self, t: f64, xi: f64, lambda2: f64, lambda1: f64) -> Result<LambdaParts> {
        let mut parts = LambdaParts::default();
        match self.regime {
            Regime::SecondOrderGap => {
                parts.local2 = self.second.local_piece(t, xi, lambda2);
                parts.evolution2 = self.second.evolution_piece(t, xi)?;
                parts.zone2 = self.second.zone_piece(t, xi)?;
                parts.local1 = self.first.local_piece(t, xi, lambda1);
                parts.evolution1 = self.first.evolution_piece(t, xi)?;
                parts.zone1 = self.first.zone_piece(t, xi)?;
            }
            Regime::FirstOrderGap => {
                parts.local2 = lambda2;
                parts.local1 = self.first.local_piece(t, xi, lambda1);
                parts.evolution1 = self.first.evolution_piece(t, xi)?;
                parts.zone1 = self.first.zone_piece(t, xi)?;
            }
            Regime::NoGap => {
                parts.local2 = lambda2;
                parts.local1 = lambda1;
            }
        }
        Ok(parts)
    }

    pub fn lambda_parts(&self, t: f64, x: f64, xi: f64) -> Result<LambdaParts> {
        let l2 = self.lambda2(x, xi)?;
        let l1 = self.lambda1(x, xi)?;
        self.parts_from_values(t, xi, l2, l1)
    }

    /// `Lambda(t, x, xi)`.
    pub fn lambda(&self, t: f64, x: f64, xi: f64) -> Result<f64> {
        Ok(self.lambda_parts(t, x, xi)?.total())
    }

    /// Time derivative of each piece of `Lambda`.
    pub fn rate_parts(&self, t: f64, x: f64, xi: f64) -> Result<LambdaParts> {
        let mut parts = LambdaParts::default();
        if t <= 0.0 {
            return Ok(parts);
        }
        let fill_second = |parts: &mut LambdaParts| -> Result<()> {
            let (a, b, c) = self.second.rates(t, xi, self.lambda2(x, xi)?);
            parts.local2 = a;
            parts.evolution2 = b;
            parts.zone2 = c;
            Ok(())
        };
        let fill_first = |parts: &mut LambdaParts| -> Result<()> {
            let (a, b, c) = self.first.rates(t, xi, self.lambda1(x, xi)?);
            parts.local1 = a;
            parts.evolution1 = b;
            parts.zone1 = c;
            Ok(())
        };
        match self.regime {
            Regime::SecondOrderGap => {
                fill_second(&mut parts)?;
                fill_first(&mut parts)?;
            }
            Regime::FirstOrderGap => fill_first(&mut parts)?,
            Regime::NoGap => {}
        }
        Ok(parts)
    }

    /// `d/dt Lambda(t, x, xi)`; zero at `t = 0`.
    pub fn dt_lambda(&self, t: f64, x: f64, xi: f64) -> Result<f64> {
        Ok(self.rate_parts(t, x, xi)?.total())
    }

    /// Frequency order claimed for `d/dt Lambda`.
    pub fn dt_lambda_order(&self) -> f64 {
        let order = |l: &Level| l.power - (l.power - l.index) * l.time_order / (l.time_order + 1.0);
        match self.regime {
            Regime::SecondOrderGap => order(&self.second).max(order(&self.first)),
            Regime::FirstOrderGap => order(&self.first),
            Regime::NoGap => 0.0,
        }
    }

    /// Tabulates `lambda_2` and `lambda_1` on a grid.
    pub fn tabulate(&self, xs: &[f64], xis: &[f64]) -> Result<LambdaTable> {
        let columns: Vec<(Vec<f64>, Vec<f64>)> = xis
            .par_iter()
            .map(|&xi| Ok((self.second.lambda_column(xs, xi)?, self.first.lambda_column(xs, xi)?)))
            .collect::<Result<_>>()?;
        let (nx, nxi) = (xs.len(), xis.len());
        let mut lambda2 = vec![0.0; nx * nxi];
        let mut lambda1 = vec![0.0; nx * nxi];
        for (m, (c2, c1)) in columns.iter().enumerate() {
            for j in 0..nx {
                lambda2[j * nxi + m] = c2[j];
                lambda1[j * nxi + m] = c1[j];
            }
        }
        Ok(LambdaTable { xs: xs.to_vec(), xis: xis.to_vec(), lambda2, lambda1 })
    }

    /// Multipliers `f2, f1` and the `x`-free remainder `g` with
    /// `Lambda = f2 lambda_2 + f1 lambda_1 + g` at fixed `(t, xi)`.
    pub fn column_factors(&self, t: f64, xi: f64) -> Result<(f64, f64, f64)> {
        let x_free = self.parts_from_values(t, xi, 0.0, 0.0)?.total();
        let (f2, f1) = match self.regime {
            Regime::SecondOrderGap => (self.second.local_factor(t, xi), self.first.local_factor(t, xi)),
            Regime::FirstOrderGap => (1.0, self.first.local_factor(t, xi)),
            Regime::NoGap => (1.0, 1.0),
        };
        Ok((f2, f1, x_free))
    }

    /// `Lambda(t, x_j, xi_m)` on a tabulated grid, row-major in `x`. The
    /// `x`-dependent pieces are multiplied by `taper[j]`.
    pub fn lambda_on_table(&self, table: &LambdaTable, t: f64, taper: &[f64]) -> Result<Vec<f64>> {
        let (mut local, x_free) = self.split_on_table(table, t, taper)?;
        let nxi = table.xis.len();
        local.par_chunks_mut(nxi).for_each(|row| {
            for (value, g) in row.iter_mut().zip(&x_free) {
                *value += g;
            }
        });
        Ok(local)
    }

    /// `Lambda` on a tabulated grid split into its tapered `x`-dependent
    /// part (row-major in `x`) and its `x`-free part (one value per `xi`).
    pub fn split_on_table(&self, table: &LambdaTable, t: f64, taper: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let nxi = table.xis.len();
        let factors: Vec<(f64, f64, f64)> =
            table.xis.par_iter().map(|&xi| self.column_factors(t, xi)).collect::<Result<_>>()?;
        let mut local = vec![0.0; table.xs.len() * nxi];
        local.par_chunks_mut(nxi).enumerate().for_each(|(j, row)| {
            for (m, value) in row.iter_mut().enumerate() {
                let idx = j * nxi + m;
                let (f2, f1, _) = factors[m];
                *value = taper[j] * (f2 * table.lambda2[idx] + f1 * table.lambda1[idx]);
            }
        });
        Ok((local, factors.iter().map(|f| f.2).collect()))
    }

    pub fn lambda2_field(self: &Arc<Self>) -> SymbolField {
        let s = Arc::clone(self);
        let weight = (1.0 - self.profile.sigma2).max(0.0);
        SymbolField::fallible("lambda2", 0.0, weight, 0.0, move |_, x, xi| {
            Ok(Complex64::new(s.lambda2(x, xi)?, 0.0))
        })
    }

    pub fn lambda1_field(self: &Arc<Self>) -> SymbolField {
        let s = Arc::clone(self);
        let weight = (1.0 - self.profile.sigma1).max(0.0);
        SymbolField::fallible("lambda1", -1.0, weight, 0.0, move |_, x, xi| {
            Ok(Complex64::new(s.lambda1(x, xi)?, 0.0))
        })
    }

    pub fn lambda_field(self: &Arc<Self>) -> SymbolField {
        let s = Arc::clone(self);
        SymbolField::fallible("Lambda", self.q, 0.0, 0.0, move |t, x, xi| {
            Ok(Complex64::new(s.lambda(t, x, xi)?, 0.0))
        })
    }

    pub fn dt_lambda_field(self: &Arc<Self>) -> SymbolField {
        let s = Arc::clone(self);
        SymbolField::fallible("dt_Lambda", self.dt_lambda_order(), 0.0, 0.0, move |t, x, xi| {
            Ok(Complex64::new(s.dt_lambda(t, x, xi)?, 0.0))
        })
    }
}

type SymbolFn = dyn Fn(f64, f64, f64) -> Result<Complex64> + Send + Sync;

/// A symbol `p(t, x, xi)` with its claimed growth: order `order_xi` in
/// `<xi>_h`, weight `weight_x` in `<x>` and a factor `t^time_power`.
#[derive(Clone)]
pub struct SymbolField {
    eval: Arc<SymbolFn>,
    pub order_xi: f64,
    pub weight_x: f64,
    pub time_power: f64,
    pub label: String,
}

impl fmt::Debug for SymbolField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymbolField")
            .field("label", &self.label)
            .field("order_xi", &self.order_xi)
            .field("weight_x", &self.weight_x)
            .field("time_power", &self.time_power)
            .finish()
    }
}

impl SymbolField {
    pub fn new<F>(label: &str, order_xi: f64, weight_x: f64, time_power: f64, f: F) -> Self
    where
        F: Fn(f64, f64, f64) -> Complex64 + Send + Sync + 'static,
    {
        Self::fallible(label, order_xi, weight_x, time_power, move |t, x, xi| Ok(f(t, x, xi)))
    }

    pub fn fallible<F>(label: &str, order_xi: f64, weight_x: f64, time_power: f64, f: F) -> Self
    where
        F: Fn(f64, f64, f64) -> Result<Complex64> + Send + Sync + 'static,
    {
        Self { eval: Arc::new(f), order_xi, weight_x, time_power, label: label.to_string() }
    }

    pub fn constant(value: Complex64) -> Self {
        Self::new("constant", 0.0, 0.0, 0.0, move |_, _, _| value)
    }

    pub fn eval(&self, t: f64, x: f64, xi: f64) -> Result<Complex64> {
        (self.eval)(t, x, xi)
    }

    /// Same symbol with different claimed orders.
    pub fn redeclared(&self, order_xi: f64, weight_x: f64) -> Self {
        Self { order_xi, weight_x, ..self.clone() }
    }

    /// Pointwise product with `exp(sign * field)`.
    pub fn exponential(&self, sign: f64) -> Self {
        let inner = self.clone();
        Self::fallible(
            &format!("exp({}{})", if sign < 0.0 { "-" } else { "" }, self.label),
            f64::INFINITY,
            0.0,
            0.0,
            move |t, x, xi| Ok((inner.eval(t, x, xi)? * sign).exp()),
        )
    }
}

/// Sample points for [`verify_symbol_estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateGrid {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub xis: Vec<f64>,
}

impl EstimateGrid {
    /// Logarithmic grid with `|x| <= x_max`, `<xi>_h <= bracket_max` and
    /// the given times.
    pub fn logarithmic(x_max: f64, bracket_max: f64, h: f64, times: Vec<f64>, per_decade: usize) -> Self {
        let mut xs = vec![0.0];
        let mut xis = vec![0.0];
        let decades = x_max.log10().ceil() as usize;
        for i in 0..=(decades * per_decade) {
            let v = 10f64.powf(i as f64 / per_decade as f64);
            if v <= x_max {
                xs.push(v);
                xs.push(-v);
            }
        }
        let xi_max = (bracket_max * bracket_max - h * h).max(0.0).sqrt();
        let lowest = 0.5 * h;
        let decades = (xi_max / lowest).log10().ceil().max(1.0) as usize;
        for i in 0..=(decades * per_decade) {
            let v = lowest * 10f64.powf(i as f64 / per_decade as f64);
            if v <= xi_max {
                xis.push(v);
                xis.push(-v);
            }
        }
        Self { times, xs, xis }
    }
}

/// Parameters of the finite-difference estimate check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateSettings {
    pub h: f64,
    pub mu: f64,
    /// Largest acceptable constant.
    pub cap: f64,
    /// `xi` step relative to `<xi>_h`.
    pub xi_step: f64,
    /// `x` step relative to `<x>`.
    pub x_step: f64,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self { h: 1.0, mu: 1.01, cap: 10.0, xi_step: 1e-3, x_step: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestConstant {
    pub alpha: usize,
    pub beta: usize,
    #[serde(with = "tagged")]
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub alpha: usize,
    pub beta: usize,
    pub t: f64,
    pub x: f64,
    pub xi: f64,
    #[serde(with = "tagged")]
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolEstimateReport {
    pub label: String,
    pub order_xi: f64,
    pub weight_x: f64,
    pub alpha_max: usize,
    pub beta_max: usize,
    pub cap: f64,
    pub best_constants: Vec<BestConstant>,
    /// Offending points, truncated to the first [`MAX_REPORTED_VIOLATIONS`].
    pub violations: Vec<Violation>,
    pub violation_count: usize,
    pub passed: bool,
}

pub const MAX_REPORTED_VIOLATIONS: usize = 64;

const MAX_DERIVATIVE_ORDER: usize = 4;

fn stencil(order: usize) -> &'static [(i32, f64)] {
    match order {
        0 => &[(0, 1.0)],
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        4 => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
        _ => unreachable!("derivative order checked by caller"),
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Nested central differences at one scale, read from a cached table of
/// values indexed by `(i + r, j + r)`.
fn mixed_difference(table: &[Vec<Complex64>], radius: i32, alpha: usize, beta: usize, dxi: f64, dx: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(i, ci) in stencil(alpha) {
        for &(j, cj) in stencil(beta) {
            acc += table[(i + radius) as usize][(j + radius) as usize] * (ci * cj);
        }
    }
    acc / (dxi.powi(alpha as i32) * dx.powi(beta as i32))
}

fn check_step(step: f64, at: f64) -> Result<()> {
    if !(step > 1e-12 * at.abs().max(1.0)) {
        return Err(Error::StepUnderflow { step, at });
    }
    Ok(())
}

/// Measures the smallest constants `C` with
/// `|d_xi^a d_x^b p| <= C^{a+b+1} a!^mu b!^mu <xi>_h^{order-a} <x>^{weight-b} t^s`
/// over the grid, for all `a <= alpha_max`, `b <= beta_max`.
///
/// Derivatives use nested central differences with two Richardson
/// extrapolation levels.
pub fn verify_symbol_estimate(
    field: &SymbolField,
    alpha_max: usize,
    beta_max: usize,
    grid: &EstimateGrid,
    settings: &EstimateSettings,
) -> Result<SymbolEstimateReport> {
    if alpha_max > MAX_DERIVATIVE_ORDER {
        return Err(Error::DerivativeDepth(alpha_max));
    }
    if beta_max > MAX_DERIVATIVE_ORDER {
        return Err(Error::DerivativeDepth(beta_max));
    }
    let radius: i32 = if alpha_max.max(beta_max) > 2 { 2 } else { 1 };
    let xi_radius = if alpha_max == 0 { 0 } else { radius };
    let x_radius = if beta_max == 0 { 0 } else { radius };

    let points: Vec<(f64, f64, f64)> = grid
        .times
        .iter()
        .flat_map(|&t| grid.xs.iter().flat_map(move |&x| grid.xis.iter().map(move |&xi| (t, x, xi))))
        .collect();

    let pairs: Vec<(usize, usize)> =
        (0..=alpha_max).flat_map(|a| (0..=beta_max).map(move |b| (a, b))).collect();

    let per_point: Vec<Vec<f64>> = points
        .par_iter()
        .map(|&(t, x, xi)| {
            let dxi0 = settings.xi_step * bracket(xi, settings.h);
            let dx0 = settings.x_step * japanese(x);
            if alpha_max > 0 {
                check_step(dxi0 / 4.0, xi)?;
            }
            if beta_max > 0 {
                check_step(dx0 / 4.0, x)?;
            }
            let mut scaled = Vec::with_capacity(3);
            for level in 0..3 {
                let factor = 0.5f64.powi(level);
                let (dxi, dx) = (dxi0 * factor, dx0 * factor);
                let table: Vec<Vec<Complex64>> = (-radius..=radius)
                    .map(|i| {
                        (-radius..=radius)
                            .map(|j| {
                                if i.abs() > xi_radius || j.abs() > x_radius {
                                    return Ok(Complex64::new(0.0, 0.0));
                                }
                                field.eval(t, x + j as f64 * dx, xi + i as f64 * dxi)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                scaled.push((table, dxi, dx));
            }
            let ratios = pairs
                .iter()
                .map(|&(a, b)| {
                    let d: Vec<Complex64> = scaled
                        .iter()
                        .map(|(table, dxi, dx)| mixed_difference(table, radius, a, b, *dxi, *dx))
                        .collect();
                    let derivative = if a + b == 0 {
                        d[0]
                    } else {
                        let r1 = (d[1] * 4.0 - d[0]) / 3.0;
                        let r1_half = (d[2] * 4.0 - d[1]) / 3.0;
                        (r1_half * 16.0 - r1) / 15.0
                    };
                    let bound = (factorial(a) * factorial(b)).powf(settings.mu)
                        * bracket(xi, settings.h).powf(field.order_xi - a as f64)
                        * japanese(x).powf(field.weight_x - b as f64)
                        * t.powf(field.time_power);
                    if bound == 0.0 {
                        return if derivative.norm() == 0.0 { 0.0 } else { f64::INFINITY };
                    }
                    (derivative.norm() / bound).powf(1.0 / (a + b + 1) as f64)
                })
                .collect();
            Ok(ratios)
        })
        .collect::<Result<_>>()?;

    let mut best_constants: Vec<BestConstant> = pairs
        .iter()
        .map(|&(alpha, beta)| BestConstant { alpha, beta, constant: 0.0 })
        .collect();
    let mut violations = Vec::new();
    let mut violation_count = 0;
    for (point, ratios) in points.iter().zip(&per_point) {
        for (k, &c) in ratios.iter().enumerate() {
            let entry = &mut best_constants[k];
            if c.is_nan() || c > entry.constant {
                entry.constant = if c.is_nan() { f64::NAN } else { c };
            }
            if !(c <= settings.cap) {
                violation_count += 1;
                if violations.len() < MAX_REPORTED_VIOLATIONS {
                    violations.push(Violation {
                        alpha: entry.alpha,
                        beta: entry.beta,
                        t: point.0,
                        x: point.1,
                        xi: point.2,
                        constant: c,
                    });
                }
            }
        }
    }
    Ok(SymbolEstimateReport {
        label: field.label.clone(),
        order_xi: field.order_xi,
        weight_x: field.weight_x,
        alpha_max,
        beta_max,
        cap: settings.cap,
        best_constants,
        passed: violation_count == 0,
        violations,
        violation_count,
    })
}

/// Residuals of the zone-balance identities for the second- and
/// first-order indices.
pub fn zone_balance(profile: &DegeneracyProfile, q2: f64, q1_raw: f64) -> (f64, f64) {
    crate::classification::zone_balance_residuals(profile, q2, q1_raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classification::classify;

    fn default_symbols() -> Arc<WeightSymbols> {
        let profile = DegeneracyProfile::default();
        let class = classify(&profile).unwrap();
        let cutoffs = CutoffFamily::default();
        let consts = TransformConstants::for_profile(&profile, &class, &cutoffs).unwrap();
        Arc::new(WeightSymbols::new(&profile, &class, &consts, &cutoffs, 1.0).unwrap())
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
        h * (0.5 * f(a) + inner + 0.5 * f(b))
    }

    #[test]
    fn lambda2_trivial_values() {
        let s = default_symbols();
        assert_eq!(s.lambda2(0.0, 50.0).unwrap(), 0.0);
        assert_eq!(s.lambda2(3.0, 0.9).unwrap(), 0.0);
        let a = s.lambda2(7.0, 40.0).unwrap();
        let b = s.lambda2(-7.0, 40.0).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn lambda2_matches_trapezoid_beyond_support() {
        let s = default_symbols();
        let h = 1.0;
        let xi = (100f64 * 100.0 - h * h).sqrt();
        let level = s.level(LevelId::Second);
        let scale = level.profile_scale(xi);
        let edge = (scale * scale - 1.0).sqrt();
        let x = edge * 1.5;
        let c = s.cutoffs;
        let oracle = trapezoid(|y| profile_integrand(y, scale, 0.8, &c), 0.0, edge, 1_000_000);
        let omega = c.omega(xi, 1.0);
        let expected = s.consts.m2 * omega * oracle;
        let value = s.lambda2(x, xi).unwrap();
        assert!((value - expected).abs() <= 1e-7 * expected.abs(), "{value} vs {expected}");
        let bound_exponent = (2.0 - 6.0 / 7.0) * (1.0 - 0.8) / 0.8;
        let ratio = value.abs() / (s.consts.m2 * 100f64.powf(bound_exponent));
        assert!(ratio < 10.0);
    }

    #[test]
    fn lambda1_sign_and_log_variant() {
        let s = default_symbols();
        for &(x, xi) in &[(2.0, 5.0), (-3.0, 8.0), (4.0, -9.0)] {
            let v = s.lambda1(x, xi).unwrap();
            let omega = s.cutoffs.omega(xi, 1.0);
            assert_eq!(v.signum(), x.signum() * omega.signum());
        }
        let profile = DegeneracyProfile { sigma1: 1.0, ..DegeneracyProfile::default() };
        let class = classify(&profile).unwrap();
        let consts = TransformConstants::for_profile(&profile, &class, &s.cutoffs).unwrap();
        let sym = WeightSymbols::new(&profile, &class, &consts, &s.cutoffs, 1.0).unwrap();
        let xi = 400.0;
        let x: f64 = 3.0;
        let expected = consts.m1 * s.cutoffs.omega(xi, 1.0) / bracket(xi, 1.0) * x.asinh();
        let v = sym.lambda1(x, xi).unwrap();
        assert!((v - expected).abs() < 1e-10 * expected.abs());
    }

    #[test]
    fn lambda_vanishes_at_initial_time() {
        let s = default_symbols();
        for &(x, xi) in &[(0.5, 3.0), (100.0, 900.0), (-20.0, -40.0)] {
            assert_eq!(s.lambda(0.0, x, xi).unwrap(), 0.0);
        }
    }

    #[test]
    fn negative_pieces() {
        let s = default_symbols();
        for &t in &[0.01, 0.3, 1.0] {
            for &xi in &[0.0, 3.0, 30.0, 900.0] {
                let parts = s.lambda_parts(t, 5.0, xi).unwrap();
                assert!(parts.zone2 <= 0.0 && parts.evolution2 <= 0.0);
                assert!(parts.zone1 <= 0.0 && parts.evolution1 <= 0.0);
            }
        }
    }

    #[test]
    fn dt_lambda_matches_finite_difference() {
        let s = default_symbols();
        let mut checked = 0;
        for &(t, x, xi) in &[(0.4, 3.0, 20.0), (0.9, -50.0, 300.0), (0.7, 10.0, -80.0), (0.2, 1.0, 600.0)] {
            let d = 1e-5 * t;
            let fd = (s.lambda(t + d, x, xi).unwrap() - s.lambda(t - d, x, xi).unwrap()) / (2.0 * d);
            let exact = s.dt_lambda(t, x, xi).unwrap();
            assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1e-3), "{t} {x} {xi}: {fd} vs {exact}");
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    #[test]
    fn zone_rate_is_quadrature_free_inside_zone() {
        let s = default_symbols();
        let xi = 30.0;
        let level = s.level(LevelId::Second);
        let t = 0.4 / level.zone_speed(xi);
        let rates = s.rate_parts(t, 2.0, xi).unwrap();
        let expected = -s.consts.mpsi2 * t.powf(1.0) * bracket(xi, 1.0).powi(2);
        assert!((rates.zone2 - expected).abs() <= 1e-14 * expected.abs());
    }

    #[test]
    fn evolution_pieces_make_negative_rate() {
        let s = default_symbols();
        for &t in &[0.1, 0.5, 1.0] {
            for &x in &[-300.0, -2.0, 0.5, 40.0] {
                for &xi in &[2.0, 20.0, 200.0, 900.0] {
                    let r = s.rate_parts(t, x, xi).unwrap();
                    assert!(r.local2 + r.evolution2 <= 1e-12, "{t} {x} {xi}");
                    assert!(r.local1 + r.evolution1 <= 1e-12, "{t} {x} {xi}");
                }
            }
        }
    }

    #[test]
    fn table_matches_pointwise() {
        let s = default_symbols();
        let xs: Vec<f64> = (0..17).map(|j| -8.0 + j as f64).collect();
        let xis = vec![0.0, 1.5, 4.0, -12.0];
        let table = s.tabulate(&xs, &xis).unwrap();
        let taper = vec![1.0; xs.len()];
        let values = s.lambda_on_table(&table, 0.8, &taper).unwrap();
        for (j, &x) in xs.iter().enumerate() {
            for (m, &xi) in xis.iter().enumerate() {
                let direct = s.lambda(0.8, x, xi).unwrap();
                assert!((values[j * xis.len() + m] - direct).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn constant_field_passes() {
        let field = SymbolField::constant(Complex64::new(1.0, 0.0));
        let grid = EstimateGrid::logarithmic(100.0, 100.0, 1.0, vec![0.5], 2);
        let report = verify_symbol_estimate(&field, 2, 2, &grid, &EstimateSettings::default()).unwrap();
        assert!(report.passed);
        assert!(report.best_constants.iter().all(|b| b.constant <= 1.0 + 1e-12));
    }

    #[test]
    fn derivative_depth_is_capped() {
        let field = SymbolField::constant(Complex64::new(1.0, 0.0));
        let grid = EstimateGrid::logarithmic(10.0, 10.0, 1.0, vec![0.5], 1);
        let r = verify_symbol_estimate(&field, 5, 0, &grid, &EstimateSettings::default());
        assert!(matches!(r, Err(Error::DerivativeDepth(5))));
    }

    #[test]
    fn tiny_steps_underflow() {
        let field = SymbolField::constant(Complex64::new(1.0, 0.0));
        let grid = EstimateGrid::logarithmic(10.0, 10.0, 1.0, vec![0.5], 1);
        let settings = EstimateSettings { xi_step: 1e-14, ..EstimateSettings::default() };
        let r = verify_symbol_estimate(&field, 1, 0, &grid, &settings);
        assert!(matches!(r, Err(Error::StepUnderflow { .. })));
    }

    #[test]
    fn misdeclared_order_is_caught() {
        let s = default_symbols();
        let field = s.lambda2_field().redeclared(-1.0, 1.0 - 0.8);
        let grid = EstimateGrid::logarithmic(1e3, 1e3, 1.0, vec![0.0], 1);
        let report = verify_symbol_estimate(&field, 0, 0, &grid, &EstimateSettings::default()).unwrap();
        assert!(!report.passed);
        assert!(report.violations.iter().any(|v| bracket(v.xi, 1.0) > 100.0));
    }

    #[test]
    fn known_derivative_is_recovered() {
        let field = SymbolField::new("poly", 3.0, 2.0, 0.0, |_, x, xi| Complex64::new(xi.powi(3) * x * x, 0.0));
        let grid = EstimateGrid { times: vec![1.0], xs: vec![2.0], xis: vec![3.0] };
        let settings = EstimateSettings { mu: 1.0, xi_step: 1e-2, x_step: 1e-2, ..EstimateSettings::default() };
        let report = verify_symbol_estimate(&field, 2, 2, &grid, &settings).unwrap();
        // d_xi^2 d_x^2 of xi^3 x^2 is 12 xi; bound is 2!*2! <3>^1 <2>^0.
        let entry = report.best_constants.iter().find(|b| b.alpha == 2 && b.beta == 2).unwrap();
        let expected = (12.0 * 3.0 / (4.0 * bracket(3.0, 1.0))).powf(1.0 / 5.0);
        assert!((entry.constant - expected).abs() < 1e-6, "{} vs {}", entry.constant, expected);
    }
}
