//! Experiment configuration.
//!
//! A config is a TOML document (or a JSON manifest written by a previous
//! run). Every key is optional and unknown keys are rejected. Defaults:
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 42 |
//! | `profile.{ell,k,kprime,sigma2,sigma1,T}` | 2, 1, 1, 0.8, 0.9, 1 |
//! | `profile.{c_a3,C_a3,C_a2,C_a1,C_a0}` | 1, 1, 0.05, 0.05, 0.05 |
//! | `consts.*` | derived from the profile |
//! | `grid.{N,L,dealias}` | 1024, 40 pi, 2/3 |
//! | `time.dt` | CFL bound with safety 0.5 |
//! | `time.record_every` | 50 |
//! | `model.a3_sign` | 1 |
//! | `model.{A2,A1,A0}_{real,imag}` | 0, except `A2_imag = 0.05` |
//! | `probe.theta_list`, `probe.rho_floor` | [1.05, 1.1, 1.2], 1e-3 |
//! | `symbols.{alpha_max,beta_max,order_offset,cap}` | 2, 2, 0, 10 |
//! | `invert.{h_ladder,N,L,export}` | [1, 2, 4, ..., 64], 128, pi/4, false |
//! | `evolve.{m,energy_cap,snapshots}` | 1, 10, 20 |
//! | `output.{dir,format}` | "gevolab-out", "csv" |

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use gevolab_core::evolution::CFL_SAFETY;
use gevolab_core::{
    CutoffFamily, DegeneracyProfile, Datum, ModelProblem, Quantizer, TransformConstants,
    WellPosednessClass,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Largest supported derivative order in the symbol estimates.
pub const MAX_DERIVATIVE_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub profile: DegeneracyProfile,
    pub consts: ConstsConfig,
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub model: ModelConfig,
    pub probe: ProbeConfig,
    pub symbols: SymbolsConfig,
    pub invert: InvertConfig,
    pub evolve: EvolveConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            profile: DegeneracyProfile::default(),
            consts: ConstsConfig::default(),
            grid: GridConfig::default(),
            time: TimeConfig::default(),
            model: ModelConfig::default(),
            probe: ProbeConfig::default(),
            symbols: SymbolsConfig::default(),
            invert: InvertConfig::default(),
            evolve: EvolveConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Overrides for the transformation constants. Missing entries are derived
/// from the profile; an overridden `M2` or `M1` rescales the matching
/// evolution-zone amplitude unless that is given too.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstsConfig {
    #[serde(rename = "M2")]
    pub m2: Option<f64>,
    #[serde(rename = "M1")]
    pub m1: Option<f64>,
    #[serde(rename = "Me2")]
    pub me2: Option<f64>,
    #[serde(rename = "Me1")]
    pub me1: Option<f64>,
    #[serde(rename = "Mpsi2")]
    pub mpsi2: Option<f64>,
    #[serde(rename = "Mpsi1")]
    pub mpsi1: Option<f64>,
    pub rho0: Option<f64>,
    pub h: Option<f64>,
    pub theta: Option<f64>,
    pub mu: Option<f64>,
}

impl ConstsConfig {
    fn entries(&self) -> [(&'static str, Option<f64>); 10] {
        [
            ("M2", self.m2),
            ("M1", self.m1),
            ("Me2", self.me2),
            ("Me1", self.me1),
            ("Mpsi2", self.mpsi2),
            ("Mpsi1", self.mpsi1),
            ("rho0", self.rho0),
            ("h", self.h),
            ("theta", self.theta),
            ("mu", self.mu),
        ]
    }

    fn is_complete(&self) -> bool {
        self.entries().iter().all(|(_, v)| v.is_some())
    }

    fn to_constants(self) -> Option<TransformConstants> {
        Some(TransformConstants {
            m2: self.m2?,
            m1: self.m1?,
            me2: self.me2?,
            me1: self.me1?,
            mpsi2: self.mpsi2?,
            mpsi1: self.mpsi1?,
            rho0: self.rho0?,
            h: self.h?,
            theta: self.theta?,
            mu: self.mu?,
        })
    }

    fn fill_from(&mut self, base: &TransformConstants) {
        let m2 = *self.m2.get_or_insert(base.m2);
        let m1 = *self.m1.get_or_insert(base.m1);
        self.me2.get_or_insert(m2 * base.me2 / base.m2);
        self.me1.get_or_insert(m1 * base.me1 / base.m1);
        self.mpsi2.get_or_insert(base.mpsi2);
        self.mpsi1.get_or_insert(base.mpsi1);
        self.rho0.get_or_insert(base.rho0);
        self.h.get_or_insert(base.h);
        self.theta.get_or_insert(base.theta);
        self.mu.get_or_insert(base.mu);
    }
}

/// Periodic solver grid on `[-L, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub half_length: f64,
    pub dealias: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 1024, half_length: 40.0 * PI, dealias: 2.0 / 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: Option<f64>,
    pub record_every: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { dt: None, record_every: 50 }
    }
}

/// Coefficients of the model problem: `a3 = a3_sign c_a3 t^ell`,
/// `a2 = A2 t^k <x>^{-sigma2}`, `a1 = A1 t^kprime <x>^{-sigma1}`, `a0 = A0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub a3_sign: f64,
    #[serde(rename = "A2_real")]
    pub a2_real: f64,
    #[serde(rename = "A2_imag")]
    pub a2_imag: f64,
    #[serde(rename = "A1_real")]
    pub a1_real: f64,
    #[serde(rename = "A1_imag")]
    pub a1_imag: f64,
    #[serde(rename = "A0_real")]
    pub a0_real: f64,
    #[serde(rename = "A0_imag")]
    pub a0_imag: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { a3_sign: 1.0, a2_real: 0.0, a2_imag: 0.05, a1_real: 0.0, a1_imag: 0.0, a0_real: 0.0, a0_imag: 0.0 }
    }
}

impl ModelConfig {
    pub fn a2(&self) -> Complex64 {
        Complex64::new(self.a2_real, self.a2_imag)
    }

    pub fn a1(&self) -> Complex64 {
        Complex64::new(self.a1_real, self.a1_imag)
    }

    pub fn a0(&self) -> Complex64 {
        Complex64::new(self.a0_real, self.a0_imag)
    }

    pub fn is_free_flow(&self) -> bool {
        [self.a2(), self.a1(), self.a0()].iter().all(|a| a.norm() == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub theta_list: Vec<f64>,
    pub rho_floor: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { theta_list: vec![1.05, 1.1, 1.2], rho_floor: 1e-3 }
    }
}

/// Symbol estimate checks. `order_offset` is subtracted from every declared
/// frequency order, so a positive value declares the symbols too small.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymbolsConfig {
    pub alpha_max: usize,
    pub beta_max: usize,
    pub order_offset: f64,
    pub cap: f64,
}

impl Default for SymbolsConfig {
    fn default() -> Self {
        Self { alpha_max: 2, beta_max: 2, order_offset: 0.0, cap: 10.0 }
    }
}

/// Invertibility ladder on its own small grid. `export` writes the dense
/// residual at the largest `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertConfig {
    pub h_ladder: Vec<f64>,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "L")]
    pub half_length: f64,
    pub export: bool,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            h_ladder: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            n: 128,
            half_length: PI / 4.0,
            export: false,
        }
    }
}

/// `m` is the Sobolev order of the `hm` column; `energy_cap` bounds the
/// fitted energy constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveConfig {
    pub m: f64,
    pub energy_cap: f64,
    pub snapshots: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self { m: 1.0, energy_cap: 10.0, snapshots: 20 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    /// Tables as CSV, reports as JSON.
    #[default]
    Csv,
    /// Everything as JSON.
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("gevolab-out"), format: OutputFormat::Csv }
    }
}

/// Finds the line a key was written on, for error messages.
#[derive(Debug, Clone, Default)]
pub struct KeyLocator {
    text: String,
    toml: bool,
}

impl KeyLocator {
    pub fn line(&self, key: &str) -> Option<usize> {
        if !self.toml {
            return None;
        }
        let doc = toml_edit::ImDocument::parse(self.text.as_str()).ok()?;
        let mut item = doc.as_item();
        for part in key.split('.') {
            item = item.as_table_like()?.get(part)?;
        }
        let span = item.span().or_else(|| {
            // Implicit tables carry no span; fall back to the first key in them.
            let table = item.as_table_like()?;
            table.iter().find_map(|(_, v)| v.span())
        })?;
        Some(line_of(&self.text, span.start))
    }

    pub fn error(&self, key: &str, message: impl Into<String>) -> CliError {
        CliError::Config { key: key.to_string(), line: self.line(key), message: message.into() }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Reads a TOML config, or a JSON manifest when the file ends in `.json`.
pub fn load(path: &Path) -> Result<(ExperimentConfig, KeyLocator), CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let config = if is_json { parse_json(&text)? } else { parse_toml(&text)? };
    let locator = KeyLocator { text, toml: !is_json };
    if let Err((key, message)) = config.validate() {
        return Err(locator.error(&key, message));
    }
    Ok((config, locator))
}

pub fn parse_toml(text: &str) -> Result<ExperimentConfig, CliError> {
    let deserializer = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(deserializer).map_err(|err| {
        let key = err.path().to_string();
        let inner = err.into_inner();
        CliError::Config {
            key,
            line: inner.span().map(|s| line_of(text, s.start)),
            message: inner.message().to_string(),
        }
    })
}

pub fn parse_json(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut deserializer = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut deserializer).map_err(|err| {
        let key = err.path().to_string();
        let inner = err.into_inner();
        let line = (inner.line() > 0).then_some(inner.line());
        CliError::Config { key, line, message: inner.to_string() }
    })
}

type Issue = (String, String);

fn issue(key: &str, message: impl Into<String>) -> Issue {
    (key.to_string(), message.into())
}

fn require(ok: bool, key: &str, message: impl FnOnce() -> String) -> Result<(), Issue> {
    if ok {
        Ok(())
    } else {
        Err(issue(key, message()))
    }
}

fn positive(key: &str, value: f64) -> Result<(), Issue> {
    require(value.is_finite() && value > 0.0, key, || format!("must be positive and finite, got {value}"))
}

fn power_of_two(key: &str, n: usize) -> Result<(), Issue> {
    require(n >= 16 && n.is_power_of_two(), key, || format!("must be a power of two and at least 16, got {n}"))
}

impl ExperimentConfig {
    /// Checks every key on its own; cross-checks that need the classifier
    /// happen in [`ExperimentConfig::resolve`].
    pub fn validate(&self) -> Result<(), Issue> {
        let p = &self.profile;
        for (key, value) in [
            ("profile.ell", p.ell),
            ("profile.k", p.k),
            ("profile.kprime", p.kprime),
            ("profile.sigma2", p.sigma2),
            ("profile.sigma1", p.sigma1),
            ("profile.T", p.horizon),
            ("profile.c_a3", p.a3_lower),
            ("profile.C_a3", p.a3_upper),
            ("profile.C_a2", p.a2_bound),
            ("profile.C_a1", p.a1_bound),
            ("profile.C_a0", p.a0_bound),
        ] {
            positive(key, value)?;
        }
        require(p.a3_lower <= p.a3_upper, "profile.c_a3", || {
            format!("lower bound {} exceeds C_a3 = {}", p.a3_lower, p.a3_upper)
        })?;

        for (name, value) in self.consts.entries() {
            let key = format!("consts.{name}");
            let Some(v) = value else { continue };
            match name {
                "h" => require(v.is_finite() && v >= 1.0, &key, || format!("must be at least 1, got {v}"))?,
                "theta" | "mu" => require(v.is_finite() && v > 1.0, &key, || format!("must exceed 1, got {v}"))?,
                _ => positive(&key, v)?,
            }
        }

        power_of_two("grid.N", self.grid.n)?;
        positive("grid.L", self.grid.half_length)?;
        require(self.grid.dealias > 0.0 && self.grid.dealias <= 1.0, "grid.dealias", || {
            format!("must lie in (0, 1], got {}", self.grid.dealias)
        })?;

        if let Some(dt) = self.time.dt {
            positive("time.dt", dt)?;
        }
        require(self.time.record_every >= 1, "time.record_every", || "must be at least 1".into())?;

        let m = &self.model;
        require(m.a3_sign == 1.0 || m.a3_sign == -1.0, "model.a3_sign", || {
            format!("must be 1 or -1, got {}", m.a3_sign)
        })?;
        for (name, value, bound, bound_key) in [
            ("A2", m.a2(), p.a2_bound, "C_a2"),
            ("A1", m.a1(), p.a1_bound, "C_a1"),
            ("A0", m.a0(), p.a0_bound, "C_a0"),
        ] {
            let key = if value.im.abs() >= value.re.abs() { format!("model.{name}_imag") } else { format!("model.{name}_real") };
            require(value.re.is_finite() && value.im.is_finite(), &key, || "must be finite".into())?;
            require(value.norm() <= bound, &key, || {
                format!("|{name}| = {} exceeds profile.{bound_key} = {bound}", value.norm())
            })?;
        }

        require(!self.probe.theta_list.is_empty(), "probe.theta_list", || "must not be empty".into())?;
        for &theta in &self.probe.theta_list {
            require(theta.is_finite() && theta > 1.0, "probe.theta_list", || format!("every theta must exceed 1, got {theta}"))?;
        }
        positive("probe.rho_floor", self.probe.rho_floor)?;

        let s = &self.symbols;
        for (key, order) in [("symbols.alpha_max", s.alpha_max), ("symbols.beta_max", s.beta_max)] {
            require(order <= MAX_DERIVATIVE_ORDER, key, || {
                format!("derivative order {order} exceeds the supported depth of {MAX_DERIVATIVE_ORDER}")
            })?;
        }
        require(s.order_offset.is_finite(), "symbols.order_offset", || "must be finite".into())?;
        positive("symbols.cap", s.cap)?;

        let inv = &self.invert;
        require(!inv.h_ladder.is_empty(), "invert.h_ladder", || "must not be empty".into())?;
        for pair in inv.h_ladder.windows(2) {
            require(pair[0] < pair[1], "invert.h_ladder", || "must be strictly increasing".into())?;
        }
        require(inv.h_ladder.iter().all(|h| h.is_finite() && *h >= 1.0), "invert.h_ladder", || {
            "every h must be at least 1".into()
        })?;
        power_of_two("invert.N", inv.n)?;
        positive("invert.L", inv.half_length)?;

        require(self.evolve.m.is_finite(), "evolve.m", || "must be finite".into())?;
        positive("evolve.energy_cap", self.evolve.energy_cap)?;
        Ok(())
    }

    /// Fills in derived constants and the time step. Constants stay unset
    /// when the profile admits no weight.
    pub fn resolve(&mut self, class: &WellPosednessClass) -> Result<(), CliError> {
        if !self.consts.is_complete() {
            if let Ok(base) = TransformConstants::for_profile(&self.profile, class, &CutoffFamily::default()) {
                self.consts.fill_from(&base);
            }
        }
        if self.time.dt.is_none() {
            let grid = self.solver_grid()?;
            self.time.dt = Some(self.model_problem().cfl_bound(&grid, self.profile.horizon, CFL_SAFETY));
        }
        Ok(())
    }

    pub fn constants(&self) -> Option<TransformConstants> {
        self.consts.to_constants()
    }

    pub fn h(&self) -> f64 {
        self.consts.h.unwrap_or(1.0)
    }

    pub fn solver_grid(&self) -> Result<Quantizer, CliError> {
        Ok(Quantizer::new(self.grid.n, self.grid.half_length, self.h())?.with_dealias(self.grid.dealias)?)
    }

    pub fn model_problem(&self) -> ModelProblem {
        let mut problem = ModelProblem::new(self.profile);
        problem.a3_sign = self.model.a3_sign;
        problem.a2 = self.model.a2();
        problem.a1 = self.model.a1();
        problem.a0 = self.model.a0();
        problem.datum = Datum::Gaussian;
        problem
    }

    /// Time step after [`ExperimentConfig::resolve`].
    pub fn dt(&self) -> f64 {
        self.time.dt.unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_toml("").unwrap(), ExperimentConfig::default());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn shipped_default_config_matches_defaults() {
        let mut config = parse_toml(include_str!("../../../configs/default.toml")).unwrap();
        assert_eq!(config.consts.theta, Some(1.05));
        config.consts = ConstsConfig::default();
        assert_eq!(config, ExperimentConfig::default());
    }

    #[test]
    fn type_errors_carry_key_path_and_line() {
        let err = parse_toml("seed = 1\n\n[grid]\nN = \"many\"\n").unwrap_err();
        match err {
            CliError::Config { key, line, .. } => {
                assert_eq!(key, "grid.N");
                assert_eq!(line, Some(4));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_toml("[grid]\nN = 64\nspacing = 2\n").unwrap_err();
        let CliError::Config { line, message, .. } = err else { panic!() };
        assert_eq!(line, Some(3));
        assert!(message.contains("spacing"), "{message}");
    }

    #[test]
    fn validation_errors_are_located() {
        let text = "[profile]\nell = 2.0\n\n[symbols]\nalpha_max = 5\n";
        let config = parse_toml(text).unwrap();
        let (key, _) = config.validate().unwrap_err();
        assert_eq!(key, "symbols.alpha_max");
        let locator = KeyLocator { text: text.into(), toml: true };
        assert_eq!(locator.line(&key), Some(5));
        assert_eq!(locator.line("grid.N"), None);
    }

    #[test]
    fn dotted_keys_are_located() {
        let text = "seed = 3\nmodel.a3_sign = 2.0\n";
        let config = parse_toml(text).unwrap();
        let (key, _) = config.validate().unwrap_err();
        assert_eq!(key, "model.a3_sign");
        let locator = KeyLocator { text: text.into(), toml: true };
        assert_eq!(locator.line(&key), Some(2));
    }

    #[test]
    fn amplitudes_must_respect_profile_bounds() {
        let config = parse_toml("[model]\nA2_imag = 0.5\n").unwrap();
        let (key, message) = config.validate().unwrap_err();
        assert_eq!(key, "model.A2_imag");
        assert!(message.contains("C_a2"));
    }

    #[test]
    fn overridden_amplitude_rescales_its_evolution_amplitude() {
        let base = TransformConstants {
            m2: 2.0,
            m1: 1.0,
            me2: 6.0,
            me1: 5.0,
            mpsi2: 1.0,
            mpsi1: 1.0,
            rho0: 0.1,
            h: 1.0,
            theta: 1.05,
            mu: 1.01,
        };
        let mut consts = ConstsConfig { m2: Some(4.0), ..Default::default() };
        consts.fill_from(&base);
        assert_eq!(consts.me2, Some(12.0));
        assert_eq!(consts.me1, Some(5.0));
        assert!(consts.is_complete());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut config = ExperimentConfig::default();
        config.time.dt = Some(1.0 / 3.0);
        config.consts.theta = Some(1.0 + f64::EPSILON);
        let text = serde_json::to_string_pretty(&config).unwrap();
        assert_eq!(parse_json(&text).unwrap(), config);
    }
}
