//! Periodic-grid quantization of symbols and the conjugating operator
//! `exp(Lambda)(t, x, D)` with its Neumann-series inverse.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::cutoffs::smooth_step;
use crate::error::{Error, Result};
use crate::export::tagged;
use crate::symbols::{bracket, LambdaTable, SymbolField, WeightSymbols};

/// Largest admissible exponent in an exponential Fourier weight.
pub const WEIGHT_EXPONENT_LIMIT: f64 = 700.0;

/// Samples of a function on the periodic grid `x_j = -L + 2Lj/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub values: Vec<Complex64>,
}

impl GridFunction {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![Complex64::new(0.0, 0.0); n] }
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self { values: values.iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }

    /// Unit-variance complex Gaussian-like samples from a seeded generator.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        Self {
            values: (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Euclidean norm of the samples.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `sum_j conj(self_j) other_j`.
    pub fn inner(&self, other: &Self) -> Complex64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self { values: self.values.iter().map(|v| v * factor).collect() }
    }

    pub fn add_scaled(&self, factor: Complex64, other: &Self) -> Self {
        Self { values: self.values.iter().zip(&other.values).map(|(a, b)| a + factor * b).collect() }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add_scaled(Complex64::new(-1.0, 0.0), other)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// A periodic grid with `N` points on `[-L, L)` and the frequencies
/// `pi/L * {-N/2, ..., N/2 - 1}`, stored in that centred order.
#[derive(Clone)]
pub struct Quantizer {
    pub n: usize,
    pub half_length: f64,
    pub h: f64,
    /// Symbols vanish for `|xi| > dealias_fraction * xi_max`.
    pub dealias_fraction: f64,
    xs: Arc<Vec<f64>>,
    xis: Arc<Vec<f64>>,
    twiddles: Arc<Vec<Complex64>>,
    forward_fft: Arc<dyn Fft<f64>>,
    inverse_fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Quantizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Quantizer")
            .field("n", &self.n)
            .field("half_length", &self.half_length)
            .field("h", &self.h)
            .field("dealias_fraction", &self.dealias_fraction)
            .finish()
    }
}

impl Quantizer {
    pub fn new(n: usize, half_length: f64, h: f64) -> Result<Self> {
        if n < 16 || !n.is_power_of_two() {
            return Err(Error::Grid(format!("N must be a power of two and at least 16, got {n}")));
        }
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(Error::Grid(format!("L must be positive, got {half_length}")));
        }
        if !(h.is_finite() && h >= 1.0) {
            return Err(Error::Grid(format!("h must be at least 1, got {h}")));
        }
        let step = 2.0 * half_length / n as f64;
        let xs = (0..n).map(|j| -half_length + step * j as f64).collect();
        let half = (n / 2) as i64;
        let xis = (0..n as i64).map(|m| std::f64::consts::PI / half_length * (m - half) as f64).collect();
        let twiddles = (0..n)
            .map(|r| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * r as f64 / n as f64))
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            half_length,
            h,
            dealias_fraction: 1.0,
            xs: Arc::new(xs),
            xis: Arc::new(xis),
            twiddles: Arc::new(twiddles),
            forward_fft: planner.plan_fft_forward(n),
            inverse_fft: planner.plan_fft_inverse(n),
        })
    }

    pub fn with_dealias(mut self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Grid(format!("dealias fraction must lie in (0, 1], got {fraction}")));
        }
        self.dealias_fraction = fraction;
        Ok(self)
    }

    pub fn with_h(&self, h: f64) -> Result<Self> {
        if !(h.is_finite() && h >= 1.0) {
            return Err(Error::Grid(format!("h must be at least 1, got {h}")));
        }
        let mut out = self.clone();
        out.h = h;
        Ok(out)
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    /// Frequencies in centred order.
    pub fn xis(&self) -> &[f64] {
        &self.xis
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_length / self.n as f64
    }

    /// Largest `|xi|` on the grid, `pi N / (2L)`.
    pub fn xi_max(&self) -> f64 {
        std::f64::consts::PI * self.n as f64 / (2.0 * self.half_length)
    }

    /// True for frequencies retained by the dealiasing rule.
    pub fn retained(&self) -> Vec<bool> {
        let cut = self.dealias_fraction * self.xi_max();
        self.xis.iter().map(|xi| xi.abs() <= cut * (1.0 + 1e-12)).collect()
    }

    fn parity(m_index: usize) -> f64 {
        if m_index % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    fn fft_index(&self, m_index: usize) -> usize {
        (m_index + self.n / 2) % self.n
    }

    /// `e^{i x_j xi_m}` for centred frequency index `m_index`.
    fn phase(&self, j: usize, m_index: usize) -> Complex64 {
        let m = m_index as i64 - (self.n / 2) as i64;
        let r = (j as i64 * m).rem_euclid(self.n as i64) as usize;
        self.twiddles[r] * Self::parity(m_index)
    }

    /// `u_hat(xi_m) = sum_j e^{-i x_j xi_m} u_j`, in centred order.
    pub fn forward(&self, u: &GridFunction) -> Vec<Complex64> {
        let mut buffer = u.values.clone();
        self.forward_fft.process(&mut buffer);
        (0..self.n).map(|m| buffer[self.fft_index(m)] * Self::parity(m)).collect()
    }

    /// Inverse of [`Quantizer::forward`].
    pub fn inverse(&self, spectrum: &[Complex64]) -> GridFunction {
        let mut buffer = vec![Complex64::new(0.0, 0.0); self.n];
        for (m, &v) in spectrum.iter().enumerate() {
            buffer[self.fft_index(m)] = v * Self::parity(m);
        }
        self.inverse_fft.process(&mut buffer);
        let scale = 1.0 / self.n as f64;
        GridFunction::new(buffer.into_iter().map(|v| v * scale).collect())
    }

    /// `p(t, x_j, xi_m)` as a row-major table, zero outside the dealiasing
    /// band.
    pub fn symbol_table(&self, field: &SymbolField, t: f64) -> Result<Vec<Complex64>> {
        let retained = self.retained();
        let rows: Vec<Vec<Complex64>> = self
            .xs
            .par_iter()
            .map(|&x| {
                self.xis
                    .iter()
                    .zip(&retained)
                    .map(|(&xi, &keep)| if keep { field.eval(t, x, xi) } else { Ok(Complex64::new(0.0, 0.0)) })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    fn apply_direct(&self, table: &[Complex64], u: &GridFunction) -> GridFunction {
        let spectrum = self.forward(u);
        let n = self.n;
        let scale = 1.0 / n as f64;
        let values = (0..n)
            .into_par_iter()
            .map(|j| {
                let row = &table[j * n..(j + 1) * n];
                let mut acc = Complex64::new(0.0, 0.0);
                for m in 0..n {
                    acc += self.phase(j, m) * row[m] * spectrum[m];
                }
                acc * scale
            })
            .collect();
        GridFunction::new(values)
    }

    fn apply_reverse(&self, table: &[Complex64], u: &GridFunction) -> GridFunction {
        let n = self.n;
        let coefficients: Vec<Complex64> = (0..n)
            .into_par_iter()
            .map(|m| {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..n {
                    acc += self.phase(l, m).conj() * table[l * n + m] * u.values[l];
                }
                acc
            })
            .collect();
        self.inverse(&coefficients)
    }

    fn apply_multiplier(&self, values: &[Complex64], u: &GridFunction) -> GridFunction {
        let spectrum: Vec<Complex64> = self.forward(u).iter().zip(values).map(|(a, b)| a * b).collect();
        self.inverse(&spectrum)
    }

    /// Smooth periodic taper, 1 on `|x| <= 0.75 L` and vanishing at `x = -L`.
    pub fn taper(&self, sharpness: f64) -> Vec<f64> {
        let l = self.half_length;
        self.xs.iter().map(|&x| smooth_step((x.abs() - 0.75 * l) / (0.25 * l), sharpness)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Direct,
    Reverse,
    Multiplier,
    Composed,
}

enum Node {
    Identity(usize),
    Direct { grid: Quantizer, table: Arc<Vec<Complex64>> },
    Reverse { grid: Quantizer, table: Arc<Vec<Complex64>> },
    Multiplier { grid: Quantizer, values: Arc<Vec<Complex64>> },
    Composed { outer: OperatorHandle, inner: OperatorHandle },
    Combination(Vec<(Complex64, OperatorHandle)>),
    /// `sum_{j <= terms} (-residual)^j`, applied in Horner form.
    Neumann { residual: OperatorHandle, terms: usize },
    Dense { n: usize, matrix: Arc<Vec<Complex64>> },
}

/// An immutable linear operator on grid functions.
#[derive(Clone)]
pub struct OperatorHandle {
    node: Arc<Node>,
    pub kind: OperatorKind,
    pub symbol_label: String,
}

impl fmt::Debug for OperatorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorHandle")
            .field("kind", &self.kind)
            .field("symbol_label", &self.symbol_label)
            .field("n", &self.n())
            .finish()
    }
}

fn conj_table(table: &[Complex64]) -> Arc<Vec<Complex64>> {
    Arc::new(table.iter().map(|v| v.conj()).collect())
}

impl OperatorHandle {
    fn from_node(node: Node, kind: OperatorKind, label: impl Into<String>) -> Self {
        Self { node: Arc::new(node), kind, symbol_label: label.into() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_node(Node::Identity(n), OperatorKind::Multiplier, "1")
    }

    /// Fourier multiplier with values given in centred frequency order.
    pub fn multiplier(grid: &Quantizer, values: Vec<Complex64>, label: &str) -> Self {
        Self::from_node(
            Node::Multiplier { grid: grid.clone(), values: Arc::new(values) },
            OperatorKind::Multiplier,
            label,
        )
    }

    /// Kohn–Nirenberg operator of a tabulated symbol.
    pub fn direct(grid: &Quantizer, table: Vec<Complex64>, label: &str) -> Self {
        Self::from_node(Node::Direct { grid: grid.clone(), table: Arc::new(table) }, OperatorKind::Direct, label)
    }

    /// Reverse operator of a tabulated symbol.
    pub fn reverse(grid: &Quantizer, table: Vec<Complex64>, label: &str) -> Self {
        Self::from_node(Node::Reverse { grid: grid.clone(), table: Arc::new(table) }, OperatorKind::Reverse, label)
    }

    pub fn dense(n: usize, matrix: Vec<Complex64>, label: &str) -> Self {
        assert_eq!(matrix.len(), n * n, "dense matrix must be n by n");
        Self::from_node(Node::Dense { n, matrix: Arc::new(matrix) }, OperatorKind::Composed, label)
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &OperatorHandle) -> Self {
        let label = format!("{} o {}", self.symbol_label, inner.symbol_label);
        Self::from_node(
            Node::Composed { outer: self.clone(), inner: inner.clone() },
            OperatorKind::Composed,
            label,
        )
    }

    pub fn combination(terms: Vec<(Complex64, OperatorHandle)>) -> Self {
        let label = terms.iter().map(|(c, op)| format!("({c})*{}", op.symbol_label)).collect::<Vec<_>>().join(" + ");
        Self::from_node(Node::Combination(terms), OperatorKind::Composed, label)
    }

    /// `self - other`.
    pub fn minus(&self, other: &OperatorHandle) -> Self {
        Self::combination(vec![(Complex64::new(1.0, 0.0), self.clone()), (Complex64::new(-1.0, 0.0), other.clone())])
    }

    pub fn neumann(residual: &OperatorHandle, terms: usize) -> Self {
        let label = format!("neumann[{}; {terms}]", residual.symbol_label);
        Self::from_node(Node::Neumann { residual: residual.clone(), terms }, OperatorKind::Composed, label)
    }

    pub fn n(&self) -> usize {
        match &*self.node {
            Node::Identity(n) => *n,
            Node::Direct { grid, .. } | Node::Reverse { grid, .. } | Node::Multiplier { grid, .. } => grid.n,
            Node::Composed { outer, .. } => outer.n(),
            Node::Combination(terms) => terms.first().map(|(_, op)| op.n()).unwrap_or(0),
            Node::Neumann { residual, .. } => residual.n(),
            Node::Dense { n, .. } => *n,
        }
    }

    pub fn apply(&self, u: &GridFunction) -> GridFunction {
        match &*self.node {
            Node::Identity(_) => u.clone(),
            Node::Direct { grid, table } => grid.apply_direct(table, u),
            Node::Reverse { grid, table } => grid.apply_reverse(table, u),
            Node::Multiplier { grid, values } => grid.apply_multiplier(values, u),
            Node::Composed { outer, inner } => outer.apply(&inner.apply(u)),
            Node::Combination(terms) => {
                let mut out = GridFunction::zeros(u.len());
                for (c, op) in terms {
                    out = out.add_scaled(*c, &op.apply(u));
                }
                out
            }
            Node::Neumann { residual, terms } => {
                let mut s = u.clone();
                for _ in 0..*terms {
                    s = u.sub(&residual.apply(&s));
                }
                s
            }
            Node::Dense { n, matrix } => {
                let values = (0..*n)
                    .into_par_iter()
                    .map(|j| matrix[j * n..(j + 1) * n].iter().zip(&u.values).map(|(a, b)| a * b).sum())
                    .collect();
                GridFunction::new(values)
            }
        }
    }

    /// The `L^2` adjoint.
    pub fn adjoint(&self) -> Self {
        let label = format!("({})*", self.symbol_label);
        match &*self.node {
            Node::Identity(n) => Self::identity(*n),
            Node::Direct { grid, table } => Self::from_node(
                Node::Reverse { grid: grid.clone(), table: conj_table(table) },
                OperatorKind::Reverse,
                label,
            ),
            Node::Reverse { grid, table } => Self::from_node(
                Node::Direct { grid: grid.clone(), table: conj_table(table) },
                OperatorKind::Direct,
                label,
            ),
            Node::Multiplier { grid, values } => Self::from_node(
                Node::Multiplier { grid: grid.clone(), values: conj_table(values) },
                OperatorKind::Multiplier,
                label,
            ),
            Node::Composed { outer, inner } => inner.adjoint().compose(&outer.adjoint()),
            Node::Combination(terms) => {
                Self::combination(terms.iter().map(|(c, op)| (c.conj(), op.adjoint())).collect())
            }
            Node::Neumann { residual, terms } => Self::neumann(&residual.adjoint(), *terms),
            Node::Dense { n, matrix } => {
                let n = *n;
                let mut out = vec![Complex64::new(0.0, 0.0); n * n];
                for j in 0..n {
                    for l in 0..n {
                        out[l * n + j] = matrix[j * n + l].conj();
                    }
                }
                Self::from_node(Node::Dense { n, matrix: Arc::new(out) }, OperatorKind::Composed, label)
            }
        }
    }

    /// Row-major dense matrix, built column by column from unit vectors.
    pub fn to_dense(&self) -> Vec<Complex64> {
        let n = self.n();
        let columns: Vec<GridFunction> = (0..n)
            .into_par_iter()
            .map(|l| {
                let mut e = GridFunction::zeros(n);
                e.values[l] = Complex64::new(1.0, 0.0);
                self.apply(&e)
            })
            .collect();
        let mut matrix = vec![Complex64::new(0.0, 0.0); n * n];
        for (l, column) in columns.iter().enumerate() {
            for j in 0..n {
                matrix[j * n + l] = column.values[j];
            }
        }
        matrix
    }

    /// Materializes the operator as a dense matrix handle.
    pub fn densified(&self) -> Self {
        Self::from_node(Node::Dense { n: self.n(), matrix: Arc::new(self.to_dense()) }, self.kind, self.symbol_label.clone())
    }
}

/// Kohn–Nirenberg quantization
/// `u -> (1/N) sum_m e^{i x xi_m} p(t, x, xi_m) u_hat(xi_m)`.
pub fn quantize(grid: &Quantizer, field: &SymbolField, t: f64) -> Result<OperatorHandle> {
    Ok(OperatorHandle::direct(grid, grid.symbol_table(field, t)?, &field.label))
}

/// Reverse quantization, with the symbol evaluated at the integration
/// variable.
pub fn quantize_reverse(grid: &Quantizer, field: &SymbolField, t: f64) -> Result<OperatorHandle> {
    Ok(OperatorHandle::reverse(grid, grid.symbol_table(field, t)?, &format!("R[{}]", field.label)))
}

/// Checks that `rho <xi_max>_h^{1/theta}` stays below the overflow limit.
pub fn check_weight_range(rho: f64, theta: f64, h: f64, xi_max: f64) -> Result<()> {
    if !(theta > 0.0) || rho * bracket(xi_max, h).powf(1.0 / theta) > WEIGHT_EXPONENT_LIMIT {
        return Err(Error::WeightOverflow { rho, theta, xi_max });
    }
    Ok(())
}

/// Fourier multiplier `exp(rho <xi>_h^{1/theta})`.
pub fn exp_weight(grid: &Quantizer, rho: f64, theta: f64) -> Result<OperatorHandle> {
    check_weight_range(rho, theta, grid.h, grid.xi_max())?;
    let values = grid
        .xis()
        .iter()
        .map(|&xi| Complex64::new((rho * bracket(xi, grid.h).powf(1.0 / theta)).exp(), 0.0))
        .collect();
    Ok(OperatorHandle::multiplier(grid, values, &format!("exp({rho} <D>^(1/{theta}))")))
}

/// Settings for the power-iteration norm estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 500, seed: 42 }
    }
}

/// Largest singular value of `op`, by power iteration on `op* op`.
pub fn spectral_norm(op: &OperatorHandle, settings: &PowerIteration) -> f64 {
    let adjoint = op.adjoint();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut v = GridFunction::random(op.n(), &mut rng);
    v = v.scaled(Complex64::new(1.0 / v.norm(), 0.0));
    let mut estimate = 0.0;
    for _ in 0..settings.max_iterations {
        let z = adjoint.apply(&op.apply(&v));
        let size = z.norm();
        if size == 0.0 || !size.is_finite() {
            return if size == 0.0 { 0.0 } else { f64::INFINITY };
        }
        let next = size.sqrt();
        v = z.scaled(Complex64::new(1.0 / size, 0.0));
        let converged = (next - estimate).abs() <= settings.tolerance * next;
        estimate = next;
        if converged {
            break;
        }
    }
    estimate
}

/// Target size of the first neglected Neumann term.
pub const NEUMANN_TAIL: f64 = 1e-12;

/// Smallest `J` with `norm^{J+1} < 1e-12`.
pub fn neumann_terms(norm: f64) -> usize {
    if norm <= 0.0 {
        return 0;
    }
    let mut j = 0;
    while norm.powi(j as i32 + 1) >= NEUMANN_TAIL {
        j += 1;
    }
    j
}

/// `E = exp(Lambda)(t, x, D)`, its reverse partner `R = ^R exp(-Lambda)`,
/// the residual `E R - I` and the inverse `R sum (-r)^j`.
///
/// When `Lambda = Lambda_x(x, xi) + Lambda_0(xi)`, both operators factor as
/// `E = op(exp(Lambda_x)) exp(Lambda_0)(D)` and
/// `R = exp(-Lambda_0)(D) ^R exp(-Lambda_x)`, so the multipliers cancel in
/// `E R` and never enter a dense product.
#[derive(Debug, Clone)]
pub struct Conjugator {
    pub e: OperatorHandle,
    pub reverse: OperatorHandle,
    pub e_inv: OperatorHandle,
    pub residual: OperatorHandle,
    pub residual_norm: f64,
    pub neumann_terms: usize,
    /// Measured `||E E_inv - I||`.
    pub inverse_defect: f64,
}

impl Conjugator {
    /// Builds the conjugator from `Lambda(x_j, xi_m)` given row-major on the
    /// grid.
    pub fn from_lambda(grid: &Quantizer, lambda: &[f64], settings: &PowerIteration) -> Result<Self> {
        Self::from_parts(grid, lambda, &vec![0.0; grid.n], settings)
    }

    /// Builds the conjugator from the `x`-dependent table `local` (row-major)
    /// and the `x`-free values `x_free` (centred frequency order).
    pub fn from_parts(grid: &Quantizer, local: &[f64], x_free: &[f64], settings: &PowerIteration) -> Result<Self> {
        let table = |sign: f64| -> Vec<Complex64> {
            local.iter().map(|&v| Complex64::new((sign * v).exp(), 0.0)).collect()
        };
        let multiplier = |sign: f64| -> Vec<Complex64> {
            x_free.iter().map(|&v| Complex64::new((sign * v).exp(), 0.0)).collect()
        };
        let direct = OperatorHandle::direct(grid, table(1.0), "exp(Lambda_x)");
        let reverse_local = OperatorHandle::reverse(grid, table(-1.0), "R[exp(-Lambda_x)]");
        let has_free = x_free.iter().any(|&v| v != 0.0);
        let (e, reverse) = if has_free {
            (
                direct.compose(&OperatorHandle::multiplier(grid, multiplier(1.0), "exp(Lambda_0)")),
                OperatorHandle::multiplier(grid, multiplier(-1.0), "exp(-Lambda_0)").compose(&reverse_local),
            )
        } else {
            (direct.clone(), reverse_local.clone())
        };
        let identity = OperatorHandle::identity(grid.n);
        let residual = direct.compose(&reverse_local).minus(&identity).densified();
        let residual_norm = spectral_norm(&residual, settings);
        if !(residual_norm < 1.0) {
            return Err(Error::NotInvertible(residual_norm));
        }
        let terms = neumann_terms(residual_norm);
        let series = OperatorHandle::neumann(&residual, terms);
        let e_inv = reverse.compose(&series);
        // E E_inv = op(exp(Lambda_x)) R_x sum (-r)^j once the multipliers cancel.
        let defect_op = direct.compose(&reverse_local).compose(&series).minus(&identity);
        let inverse_defect = spectral_norm(&defect_op, settings);
        Ok(Self { e, reverse, e_inv, residual, residual_norm, neumann_terms: terms, inverse_defect })
    }
}

/// Precomputed `lambda_2`, `lambda_1` on a grid, so that `Lambda(t)` can be
/// assembled cheaply at many times.
#[derive(Debug, Clone)]
pub struct WeightGrid {
    pub grid: Quantizer,
    pub symbols: Arc<WeightSymbols>,
    table: LambdaTable,
    taper: Vec<f64>,
}

impl WeightGrid {
    pub fn new(grid: &Quantizer, symbols: &WeightSymbols) -> Result<Self> {
        let symbols = Arc::new(symbols.with_h(grid.h));
        let table = symbols.tabulate(grid.xs(), grid.xis())?;
        let taper = grid.taper(symbols.cutoffs.sharpness);
        Ok(Self { grid: grid.clone(), symbols, table, taper })
    }

    /// `Lambda(t, x_j, xi_m)` with the `x`-dependent pieces tapered near the
    /// periodic boundary.
    pub fn lambda(&self, t: f64) -> Result<Vec<f64>> {
        self.symbols.lambda_on_table(&self.table, t, &self.taper)
    }

    /// `Lambda(t)` split into the tapered `x`-dependent table and the
    /// `x`-free column.
    pub fn split(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.symbols.split_on_table(&self.table, t, &self.taper)
    }

    pub fn conjugator(&self, t: f64, settings: &PowerIteration) -> Result<Conjugator> {
        let (local, x_free) = self.split(t)?;
        Conjugator::from_parts(&self.grid, &local, &x_free, settings)
    }

    /// `exp(Lambda)(t, x, D)` alone, as `op(exp(Lambda_x)) exp(Lambda_0)(D)`.
    pub fn forward_operator(&self, t: f64) -> Result<OperatorHandle> {
        let (local, x_free) = self.split(t)?;
        let table = local.iter().map(|&v| Complex64::new(v.exp(), 0.0)).collect();
        let values = x_free.iter().map(|&v| Complex64::new(v.exp(), 0.0)).collect();
        Ok(OperatorHandle::direct(&self.grid, table, "exp(Lambda_x)")
            .compose(&OperatorHandle::multiplier(&self.grid, values, "exp(Lambda_0)")))
    }
}

/// Builds the conjugator of the weight at time `t` on the grid.
pub fn build_conjugator(
    grid: &Quantizer,
    symbols: &WeightSymbols,
    t: f64,
    settings: &PowerIteration,
) -> Result<Conjugator> {
    WeightGrid::new(grid, symbols)?.conjugator(t, settings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMeasurement {
    pub lower: f64,
    pub upper: f64,
    /// Representative `<xi>_h` of the band (geometric mean of its edges).
    pub center: f64,
    /// Root-mean-square of `||Rem u|| / ||u||` over the band's wave packets.
    #[serde(with = "tagged")]
    pub remainder: f64,
    /// Same for the unconjugated operator.
    #[serde(with = "tagged")]
    pub operator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugationReport {
    pub label: String,
    pub symbol_order: f64,
    pub q: f64,
    pub bands: Vec<BandMeasurement>,
    #[serde(with = "tagged")]
    pub fitted_order: f64,
    pub order_bound: f64,
    pub passed: bool,
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Measures the frequency order of `E p(x, D) E_inv - p(x, D)` on
/// frequency bands `[b, 2b)` with `b` starting at `lowest_frequency`.
///
/// Each band is probed with Gaussian wave packets centred at `x = 0` with
/// spectral width `b / 4`, one per grid frequency in the band, so that the
/// probe stays away from the periodic seam at `x = -L`. Bands stop once the
/// packets would reach `xi_max`.
pub fn conjugation_probe(
    grid: &Quantizer,
    conjugator: &Conjugator,
    field: &SymbolField,
    t: f64,
    q: f64,
    lowest_frequency: f64,
) -> Result<ConjugationReport> {
    let p = quantize(grid, field, t)?;
    let remainder = conjugator.e.compose(&p).compose(&conjugator.e_inv).minus(&p).densified();
    let p_dense = p.densified();
    let xi_max = grid.xi_max();
    let mut bands = Vec::new();
    let mut lower = lowest_frequency;
    // Packets must decay well before xi_max, otherwise the truncated
    // spectrum delocalizes them in x.
    while 2.75 * lower <= xi_max * (1.0 + 1e-12) {
        let upper = 2.0 * lower;
        let width = 0.25 * lower;
        let packets: Vec<GridFunction> = grid
            .xis()
            .iter()
            .filter(|xi| xi.abs() >= lower && xi.abs() < upper)
            .map(|&center| {
                let spectrum: Vec<Complex64> = grid
                    .xis()
                    .iter()
                    .map(|&xi| Complex64::new((-0.5 * ((xi - center) / width).powi(2)).exp(), 0.0))
                    .collect();
                grid.inverse(&spectrum)
            })
            .collect();
        if !packets.is_empty() {
            let measure = |op: &OperatorHandle| -> f64 {
                let total: f64 = packets.iter().map(|u| (op.apply(u).norm() / u.norm()).powi(2)).sum();
                (total / packets.len() as f64).sqrt()
            };
            let center = bracket((lower * upper).sqrt(), grid.h);
            bands.push(BandMeasurement {
                lower,
                upper,
                center,
                remainder: measure(&remainder),
                operator: measure(&p_dense),
            });
        }
        lower = upper;
    }
    let usable: Vec<&BandMeasurement> = bands.iter().filter(|b| b.remainder > 0.0).collect();
    let fitted_order = if usable.len() >= 2 {
        let x: Vec<f64> = usable.iter().map(|b| b.center.ln()).collect();
        let y: Vec<f64> = usable.iter().map(|b| b.remainder.ln()).collect();
        linear_fit(&x, &y).0
    } else {
        f64::NAN
    };
    let order_bound = field.order_xi - (1.0 - q) + 0.2;
    Ok(ConjugationReport {
        label: field.label.clone(),
        symbol_order: field.order_xi,
        q,
        passed: fitted_order <= order_bound,
        bands,
        fitted_order,
        order_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_pair(n: usize, seed: u64) -> (GridFunction, GridFunction) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (GridFunction::random(n, &mut rng), GridFunction::random(n, &mut rng))
    }

    #[test]
    fn forward_inverse_round_trip() {
        let g = Quantizer::new(64, 3.0, 1.0).unwrap();
        let (u, _) = random_pair(64, 1);
        let back = g.inverse(&g.forward(&u));
        assert!(back.sub(&u).max_abs() < 1e-13);
    }

    #[test]
    fn forward_matches_definition() {
        let g = Quantizer::new(16, 2.0, 1.0).unwrap();
        let (u, _) = random_pair(16, 2);
        let fast = g.forward(&u);
        for (m, &xi) in g.xis().iter().enumerate() {
            let slow: Complex64 = g
                .xs()
                .iter()
                .zip(&u.values)
                .map(|(&x, &v)| v * Complex64::from_polar(1.0, -x * xi))
                .sum();
            assert!((slow - fast[m]).norm() < 1e-12);
        }
    }

    #[test]
    fn unit_symbol_is_identity() {
        let g = Quantizer::new(64, 4.0, 1.0).unwrap();
        let op = quantize(&g, &SymbolField::constant(Complex64::new(1.0, 0.0)), 0.0).unwrap();
        let (u, _) = random_pair(64, 3);
        assert!(op.apply(&u).sub(&u).max_abs() <= 1e-12);
    }

    #[test]
    fn frequency_symbol_is_derivative() {
        let g = Quantizer::new(128, 5.0, 1.0).unwrap();
        let field = SymbolField::new("xi", 1.0, 0.0, 0.0, |_, _, xi| Complex64::new(xi, 0.0));
        let op = quantize(&g, &field, 0.0).unwrap();
        let values = g.xis().iter().map(|&xi| Complex64::new(xi, 0.0)).collect();
        let multiplier = OperatorHandle::multiplier(&g, values, "xi");
        let (u, _) = random_pair(128, 4);
        assert!(op.apply(&u).sub(&multiplier.apply(&u)).max_abs() <= 1e-10);
    }

    #[test]
    fn reverse_of_x_independent_symbol_is_direct() {
        let g = Quantizer::new(32, 2.0, 1.0).unwrap();
        let field = SymbolField::new("poly", 2.0, 0.0, 0.0, |_, _, xi| Complex64::new(xi * xi - 1.0, xi));
        let a = quantize(&g, &field, 0.0).unwrap();
        let b = quantize_reverse(&g, &field, 0.0).unwrap();
        let (u, _) = random_pair(32, 5);
        assert!(a.apply(&u).sub(&b.apply(&u)).max_abs() < 1e-10);
    }

    #[test]
    fn reverse_is_adjoint_for_real_symbols() {
        let g = Quantizer::new(64, 3.0, 1.0).unwrap();
        let field = SymbolField::new("x xi", 1.0, 1.0, 0.0, |_, x, xi| Complex64::new((x * xi).sin() + x, 0.0));
        let a = quantize(&g, &field, 0.0).unwrap();
        let r = quantize_reverse(&g, &field, 0.0).unwrap();
        let (u, v) = random_pair(64, 6);
        let lhs = r.apply(&u).inner(&v);
        let rhs = u.inner(&a.apply(&v));
        assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0));
    }

    #[test]
    fn reverse_matches_conjugate_transpose() {
        let g = Quantizer::new(64, 3.0, 1.0).unwrap();
        let field = SymbolField::new("x xi", 2.0, 1.0, 0.0, |_, x, xi| Complex64::new(x * xi, 0.0));
        let a = quantize(&g, &field, 0.0).unwrap().to_dense();
        let r = quantize_reverse(&g, &field, 0.0).unwrap().to_dense();
        let n = 64;
        for j in 0..n {
            for l in 0..n {
                assert!((r[j * n + l] - a[l * n + j].conj()).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn exp_weight_composition_and_guard() {
        let g = Quantizer::new(64, 4.0, 1.0).unwrap();
        let (u, _) = random_pair(64, 7);
        let zero = exp_weight(&g, 0.0, 1.5).unwrap();
        assert!(zero.apply(&u).sub(&u).max_abs() < 1e-13);
        let ab = exp_weight(&g, 0.2, 1.5).unwrap().compose(&exp_weight(&g, 0.3, 1.5).unwrap());
        let c = exp_weight(&g, 0.5, 1.5).unwrap();
        let lhs = ab.apply(&u);
        assert!(lhs.sub(&c.apply(&u)).max_abs() <= 1e-12 * lhs.max_abs());
        assert!(matches!(exp_weight(&g, 1e4, 1.1), Err(Error::WeightOverflow { .. })));
    }

    #[test]
    fn power_iteration_on_known_matrix() {
        let n = 16;
        let mut m = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            m[i * n + i] = Complex64::new(0.1 * i as f64, 0.0);
        }
        m[1] = Complex64::new(0.0, 0.5);
        let op = OperatorHandle::dense(n, m, "m");
        // The coupled 2x2 block has singular values below 0.6, so the
        // largest diagonal entry wins.
        let norm = spectral_norm(&op, &PowerIteration::default());
        assert!((norm - 1.5).abs() < 1e-6);
    }

    #[test]
    fn zero_weight_conjugator_is_trivial() {
        let g = Quantizer::new(32, 2.0, 1.0).unwrap();
        let c = Conjugator::from_lambda(&g, &vec![0.0; 32 * 32], &PowerIteration::default()).unwrap();
        assert!(c.residual_norm < 1e-13);
        assert_eq!(c.neumann_terms, 0);
        let (u, _) = random_pair(32, 9);
        assert!(c.e_inv.apply(&u).sub(&u).max_abs() < 1e-12);
    }

    #[test]
    fn neumann_terms_rule() {
        assert_eq!(neumann_terms(0.0), 0);
        assert_eq!(neumann_terms(0.05), 9);
        assert!(0.5f64.powi(neumann_terms(0.5) as i32 + 1) < 1e-12);
        assert!(0.5f64.powi(neumann_terms(0.5) as i32) >= 1e-12);
    }

    #[test]
    fn adjoint_of_composite() {
        let g = Quantizer::new(32, 2.0, 1.0).unwrap();
        let f = SymbolField::new("f", 1.0, 0.0, 0.0, |_, x, xi| Complex64::new(x.cos() * xi, xi.sin()));
        let a = quantize(&g, &f, 0.0).unwrap();
        let b = quantize_reverse(&g, &f, 0.0).unwrap();
        let op = OperatorHandle::neumann(&a.compose(&b).minus(&OperatorHandle::identity(32)), 3);
        let (u, v) = random_pair(32, 10);
        let lhs = op.apply(&u).inner(&v);
        let rhs = u.inner(&op.adjoint().apply(&v));
        assert!((lhs - rhs).norm() <= 1e-9 * lhs.norm().max(1.0));
    }
}
