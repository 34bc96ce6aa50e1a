//! Well-posedness indices and the decision tree that maps a degeneracy
//! profile to the function space in which the Cauchy problem is well posed.
//!
//! All threshold comparisons are carried out on the exact rational values of
//! the `f64` inputs, so a boundary case such as `sigma2 == 1` or a vanishing
//! first-order index is never decided by rounding.

use std::fmt;

use num_rational::BigRational;
use num_traits::{Num, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the degenerate operator: vanishing orders in time, decay
/// rates in space, time horizon and coefficient bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegeneracyProfile {
    /// Vanishing order of the leading coefficient at `t = 0`.
    pub ell: f64,
    /// Time factor of the second-order coefficient.
    pub k: f64,
    /// Time factor of the first-order coefficient.
    pub kprime: f64,
    /// Spatial decay rate of the second-order coefficient.
    pub sigma2: f64,
    /// Spatial decay rate of the first-order coefficient.
    pub sigma1: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "c_a3")]
    pub a3_lower: f64,
    #[serde(rename = "C_a3")]
    pub a3_upper: f64,
    #[serde(rename = "C_a2")]
    pub a2_bound: f64,
    #[serde(rename = "C_a1")]
    pub a1_bound: f64,
    #[serde(rename = "C_a0")]
    pub a0_bound: f64,
}

impl Default for DegeneracyProfile {
    fn default() -> Self {
        Self {
            ell: 2.0,
            k: 1.0,
            kprime: 1.0,
            sigma2: 0.8,
            sigma1: 0.9,
            horizon: 1.0,
            a3_lower: 1.0,
            a3_upper: 1.0,
            a2_bound: 0.05,
            a1_bound: 0.05,
            a0_bound: 0.05,
        }
    }
}

impl DegeneracyProfile {
    /// Profile with the given orders and decay rates and default constants.
    pub fn with_indices(ell: f64, k: f64, kprime: f64, sigma2: f64, sigma1: f64) -> Self {
        Self {
            ell,
            k,
            kprime,
            sigma2,
            sigma1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("ell", self.ell),
            ("k", self.k),
            ("kprime", self.kprime),
            ("sigma2", self.sigma2),
            ("sigma1", self.sigma1),
            ("T", self.horizon),
            ("c_a3", self.a3_lower),
            ("C_a3", self.a3_upper),
            ("C_a2", self.a2_bound),
            ("C_a1", self.a1_bound),
            ("C_a0", self.a0_bound),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidProfile(format!(
                    "{name} must be finite and strictly positive, got {value}"
                )));
            }
        }
        if self.a3_lower > self.a3_upper {
            return Err(Error::InvalidProfile(format!(
                "c_a3 = {} exceeds C_a3 = {}",
                self.a3_lower, self.a3_upper
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassKind {
    L2,
    HInfinity,
    GevreyHInfinity,
    OutOfScope,
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ClassKind::L2 => "L2",
            ClassKind::HInfinity => "HInfinity",
            ClassKind::GevreyHInfinity => "GevreyHInfinity",
            ClassKind::OutOfScope => "OutOfScope",
        };
        f.write_str(name)
    }
}

/// Ordering of the vanishing orders, which decides which pieces the weight
/// symbol is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `ell > k`: the second-order coefficient degenerates slower than the
    /// leading one.
    SecondOrderGap,
    /// `k >= ell > kprime`: only the first-order coefficient has a gap.
    FirstOrderGap,
    /// `ell <= min(k, kprime)`.
    NoGap,
}

/// The exact rule of the decision tree that produced a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    GapGevrey,
    GapOrderTooHigh,
    GapDecayTooSlow,
    FirstGapSlowDecay,
    FirstGapFirstOrderGevrey,
    FirstGapLogDecay,
    FirstGapFastDecay,
    FirstGapDecayTooSlow,
    NoGapBothSlow,
    NoGapSecondOrderSlow,
    NoGapFirstOrderSlow,
    NoGapLogDecay,
    NoGapFastDecay,
    NoGapDecayTooSlow,
}

impl Branch {
    pub fn regime(self) -> Regime {
        use Branch::*;
        match self {
            GapGevrey | GapOrderTooHigh | GapDecayTooSlow => Regime::SecondOrderGap,
            FirstGapSlowDecay | FirstGapFirstOrderGevrey | FirstGapLogDecay
            | FirstGapFastDecay | FirstGapDecayTooSlow => Regime::FirstOrderGap,
            NoGapBothSlow | NoGapSecondOrderSlow | NoGapFirstOrderSlow | NoGapLogDecay
            | NoGapFastDecay | NoGapDecayTooSlow => Regime::NoGap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellPosednessClass {
    pub kind: ClassKind,
    /// Upper end of the admissible Gevrey range; present only for
    /// [`ClassKind::GevreyHInfinity`].
    pub theta_sup: Option<f64>,
    pub q2: f64,
    /// First-order index after clamping negative values to zero.
    pub q1: f64,
    pub q: f64,
    pub theorem_branch: Branch,
    pub trace: Vec<String>,
}

impl WellPosednessClass {
    pub fn regime(&self) -> Regime {
        self.theorem_branch.regime()
    }
}

/// Open interval `(lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenInterval {
    pub lower: f64,
    pub upper: f64,
}

impl OpenInterval {
    pub fn contains(&self, value: f64) -> bool {
        value > self.lower && value < self.upper
    }
}

fn two<T: Num>() -> T {
    T::one() + T::one()
}

fn second_order_index<T: Num + Clone + PartialOrd>(ell: T, k: T, sigma2: T) -> T {
    let one = T::one();
    if sigma2 < one {
        let denominator = sigma2.clone() * (ell - k.clone()) + (k.clone() + T::one());
        two::<T>() * (one - sigma2 * (k + T::one()) / denominator)
    } else {
        two::<T>() * (ell.clone() - k) / (ell + one)
    }
}

fn first_order_index<T: Num + Clone + PartialOrd>(ell: T, kprime: T, sigma1: T) -> T {
    let one = T::one();
    if sigma1 < one {
        let denominator =
            sigma1.clone() * (ell - kprime.clone()) + (kprime.clone() + T::one());
        one - two::<T>() * sigma1 * (kprime + T::one()) / denominator
    } else {
        (ell.clone() - two::<T>() * kprime - T::one()) / (ell + one)
    }
}

fn check_positive(args: &[(&str, f64)]) -> Result<()> {
    for (name, value) in args {
        if !(value.is_finite() && *value > 0.0) {
            return Err(Error::Domain(format!(
                "{name} must be finite and strictly positive, got {value}"
            )));
        }
    }
    Ok(())
}

fn check_positive_exact(args: &[(&str, &BigRational)]) -> Result<()> {
    for (name, value) in args {
        if !value.is_positive() {
            return Err(Error::Domain(format!(
                "{name} must be strictly positive, got {value}"
            )));
        }
    }
    Ok(())
}

/// Second-order index: `2(1 - s(k+1)/(s(l-k)+k+1))` for `s < 1`, otherwise
/// `2(l-k)/(l+1)`. May be negative when `ell < k`.
pub fn compute_q2(ell: f64, k: f64, sigma2: f64) -> Result<f64> {
    check_positive(&[("ell", ell), ("k", k), ("sigma2", sigma2)])?;
    Ok(second_order_index(ell, k, sigma2))
}

/// First-order index, returned without clamping.
pub fn compute_q1(ell: f64, kprime: f64, sigma1: f64) -> Result<f64> {
    check_positive(&[("ell", ell), ("kprime", kprime), ("sigma1", sigma1)])?;
    Ok(first_order_index(ell, kprime, sigma1))
}

/// [`compute_q2`] in exact rational arithmetic.
pub fn compute_q2_exact(ell: &BigRational, k: &BigRational, sigma2: &BigRational) -> Result<BigRational> {
    check_positive_exact(&[("ell", ell), ("k", k), ("sigma2", sigma2)])?;
    Ok(second_order_index(ell.clone(), k.clone(), sigma2.clone()))
}

/// [`compute_q1`] in exact rational arithmetic.
pub fn compute_q1_exact(ell: &BigRational, kprime: &BigRational, sigma1: &BigRational) -> Result<BigRational> {
    check_positive_exact(&[("ell", ell), ("kprime", kprime), ("sigma1", sigma1)])?;
    Ok(first_order_index(ell.clone(), kprime.clone(), sigma1.clone()))
}

/// Exact rational value of a finite float.
pub fn exact(value: f64) -> BigRational {
    BigRational::from_float(value).expect("finite value")
}

struct ExactProfile {
    ell: BigRational,
    k: BigRational,
    kprime: BigRational,
    sigma2: BigRational,
    sigma1: BigRational,
}

impl ExactProfile {
    fn new(p: &DegeneracyProfile) -> Self {
        Self {
            ell: exact(p.ell),
            k: exact(p.k),
            kprime: exact(p.kprime),
            sigma2: exact(p.sigma2),
            sigma1: exact(p.sigma1),
        }
    }
}

fn rational(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

struct Outcome {
    kind: ClassKind,
    q2: f64,
    q1: f64,
    branch: Branch,
}

/// Applies the full decision tree. Every valid profile maps to a class;
/// [`ClassKind::OutOfScope`] carries the violated hypothesis in its trace.
pub fn classify(profile: &DegeneracyProfile) -> Result<WellPosednessClass> {
    profile.validate()?;
    let p = profile;
    let r = ExactProfile::new(p);
    let mut trace = Vec::new();

    let outcome = if r.ell > r.k {
        trace.push(format!(
            "ell = {} > k = {}: second-order coefficient has a degeneracy gap",
            p.ell, p.k
        ));
        classify_second_order_gap(p, &r, &mut trace)
    } else if r.ell > r.kprime {
        trace.push(format!(
            "k = {} >= ell = {} > kprime = {}: only the first-order coefficient has a degeneracy gap",
            p.k, p.ell, p.kprime
        ));
        classify_first_order_gap(p, &r, &mut trace)
    } else {
        trace.push(format!(
            "ell = {} <= min(k, kprime) = {}: no degeneracy gap in time",
            p.ell,
            p.k.min(p.kprime)
        ));
        classify_no_gap(p, &r, &mut trace)
    };

    let q = outcome.q2.max(outcome.q1);
    let theta_sup = if outcome.kind == ClassKind::GevreyHInfinity {
        let theta = 1.0 / q;
        trace.push(format!("q = max(q2, q1) = {q}; Gevrey range 1 < theta < {theta}"));
        Some(theta)
    } else {
        trace.push(format!("class {}", outcome.kind));
        None
    };
    Ok(WellPosednessClass {
        kind: outcome.kind,
        theta_sup,
        q2: outcome.q2,
        q1: outcome.q1,
        q,
        theorem_branch: outcome.branch,
        trace,
    })
}

fn clamped_first_order_index(p: &DegeneracyProfile, r: &ExactProfile, trace: &mut Vec<String>) -> (f64, bool) {
    let raw = first_order_index(p.ell, p.kprime, p.sigma1);
    let positive = first_order_index(r.ell.clone(), r.kprime.clone(), r.sigma1.clone()).is_positive();
    if positive {
        trace.push(format!("q1 = {raw} > 0"));
        (raw.max(0.0), true)
    } else {
        trace.push(format!("q1 raw = {raw} <= 0, clamped to 0"));
        (0.0, false)
    }
}

fn classify_second_order_gap(p: &DegeneracyProfile, r: &ExactProfile, trace: &mut Vec<String>) -> Outcome {
    let q2 = second_order_index(p.ell, p.k, p.sigma2);
    trace.push(format!("q2 = {q2}"));
    let (q1, _) = clamped_first_order_index(p, r, trace);

    let order_bound = rational(2, 1) * r.k.clone() + rational(1, 1);
    if r.ell >= order_bound {
        trace.push(format!(
            "violated: ell < 2k + 1 (ell = {}, 2k + 1 = {})",
            p.ell,
            2.0 * p.k + 1.0
        ));
        return Outcome { kind: ClassKind::OutOfScope, q2, q1, branch: Branch::GapOrderTooHigh };
    }
    trace.push(format!("ell = {} < 2k + 1 = {}", p.ell, 2.0 * p.k + 1.0));

    if r.sigma2 >= rational(1, 1) {
        trace.push(format!("sigma2 = {} >= 1", p.sigma2));
    } else {
        // sigma2 > (k+1)/(2+3k-ell); the denominator is positive because ell < 2k+1.
        let denominator = rational(2, 1) + rational(3, 1) * r.k.clone() - r.ell.clone();
        let lhs = r.sigma2.clone() * denominator;
        let rhs = r.k.clone() + rational(1, 1);
        let bound = (p.k + 1.0) / (2.0 + 3.0 * p.k - p.ell);
        if lhs > rhs {
            trace.push(format!("sigma2 = {} > (k+1)/(2+3k-ell) = {bound}", p.sigma2));
        } else {
            trace.push(format!(
                "violated: sigma2 > (k+1)/(2+3k-ell) (sigma2 = {}, bound = {bound})",
                p.sigma2
            ));
            return Outcome { kind: ClassKind::OutOfScope, q2, q1, branch: Branch::GapDecayTooSlow };
        }
    }
    Outcome { kind: ClassKind::GevreyHInfinity, q2, q1, branch: Branch::GapGevrey }
}

fn classify_first_order_gap(p: &DegeneracyProfile, r: &ExactProfile, trace: &mut Vec<String>) -> Outcome {
    let (q1, q1_positive) = clamped_first_order_index(p, r, trace);
    let half = rational(1, 2);
    let one = rational(1, 1);

    if r.sigma2 <= half {
        let q2 = 2.0 * (1.0 - p.sigma2);
        trace.push(format!("violated: sigma2 > 1/2 (sigma2 = {})", p.sigma2));
        return Outcome { kind: ClassKind::OutOfScope, q2, q1, branch: Branch::FirstGapDecayTooSlow };
    }
    if r.sigma2 < one {
        let q2 = 2.0 * (1.0 - p.sigma2);
        trace.push(format!("1/2 < sigma2 = {} < 1: q2 = 2(1 - sigma2) = {q2}", p.sigma2));
        return Outcome { kind: ClassKind::GevreyHInfinity, q2, q1, branch: Branch::FirstGapSlowDecay };
    }
    trace.push(format!("sigma2 = {} >= 1: q2 = 0", p.sigma2));
    if q1_positive {
        return Outcome { kind: ClassKind::GevreyHInfinity, q2: 0.0, q1, branch: Branch::FirstGapFirstOrderGevrey };
    }
    if r.sigma2 == one {
        Outcome { kind: ClassKind::HInfinity, q2: 0.0, q1, branch: Branch::FirstGapLogDecay }
    } else {
        Outcome { kind: ClassKind::L2, q2: 0.0, q1, branch: Branch::FirstGapFastDecay }
    }
}

fn classify_no_gap(p: &DegeneracyProfile, r: &ExactProfile, trace: &mut Vec<String>) -> Outcome {
    let half = rational(1, 2);
    let one = rational(1, 1);
    let second_slow = r.sigma2 < one;
    let first_slow = r.sigma1 < half;
    let q2 = if second_slow { 2.0 * (1.0 - p.sigma2) } else { 0.0 };
    let q1 = if first_slow { 1.0 - 2.0 * p.sigma1 } else { 0.0 };
    trace.push(format!("q2 = 2(1 - sigma2)+ = {q2}"));
    trace.push(format!("q1 = (1 - 2 sigma1)+ = {q1}"));

    if r.sigma2 <= half {
        trace.push(format!("violated: sigma2 > 1/2 (sigma2 = {})", p.sigma2));
        return Outcome { kind: ClassKind::OutOfScope, q2, q1, branch: Branch::NoGapDecayTooSlow };
    }
    let (kind, branch) = match (second_slow, first_slow) {
        (true, true) => (ClassKind::GevreyHInfinity, Branch::NoGapBothSlow),
        (true, false) => (ClassKind::GevreyHInfinity, Branch::NoGapSecondOrderSlow),
        (false, true) => (ClassKind::GevreyHInfinity, Branch::NoGapFirstOrderSlow),
        (false, false) if r.sigma2 == one => (ClassKind::HInfinity, Branch::NoGapLogDecay),
        (false, false) => (ClassKind::L2, Branch::NoGapFastDecay),
    };
    Outcome { kind, q2, q1, branch }
}

/// Admissible Gevrey indices `(1, theta_sup)` of a Gevrey class.
pub fn theta_range(class: &WellPosednessClass) -> Result<OpenInterval> {
    if class.kind != ClassKind::GevreyHInfinity {
        return Err(Error::WrongKind(class.kind.to_string()));
    }
    let upper = class
        .theta_sup
        .expect("Gevrey classes always carry a finite theta_sup");
    assert!(upper.is_finite() && upper > 1.0, "theta_sup must lie in (1, inf)");
    Ok(OpenInterval { lower: 1.0, upper })
}

/// Zone-balance residuals: `q2 - (2-q2)((l-k)/(k+1) + (1-s2)/s2)` and the
/// first-order analogue. Both vanish for the slow-decay indices.
pub fn zone_balance_residuals(p: &DegeneracyProfile, q2: f64, q1_raw: f64) -> (f64, f64) {
    let second = q2 - (2.0 - q2) * ((p.ell - p.k) / (p.k + 1.0) + (1.0 - p.sigma2) / p.sigma2);
    let first = q1_raw
        - ((1.0 - q1_raw) * ((p.ell - p.kprime) / (p.kprime + 1.0) + (1.0 - p.sigma1) / p.sigma1) - 1.0);
    (second, first)
}

/// True when the exact rational value is zero; used by callers comparing
/// exact index values.
pub fn is_exact_zero(value: &BigRational) -> bool {
    value.is_zero()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn second_order_index_examples() {
        assert!(approx(compute_q2(2.0, 1.0, 0.8).unwrap(), 6.0 / 7.0));
        assert_eq!(compute_q2(1.5, 1.5, 1.5).unwrap(), 0.0);
        let below = compute_q2(2.0, 1.0, 1.0 - 1e-12).unwrap();
        assert!((below - 2.0 / 3.0).abs() < 1e-10);
        assert!(approx(compute_q2(2.0, 1.0, 1.0).unwrap(), 2.0 / 3.0));
    }

    #[test]
    fn first_order_index_examples() {
        assert!(approx(compute_q1(2.0, 1e-300, 0.5).unwrap(), 0.5));
        assert!(approx(compute_q1(1.3, 1.3, 0.3).unwrap(), 1.0 - 0.6));
        assert!(approx(compute_q1(1.0, 1.0, 1.0).unwrap(), -1.0));
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(compute_q2(0.0, 1.0, 0.8), Err(Error::Domain(_))));
        assert!(matches!(compute_q1(1.0, -1.0, 0.8), Err(Error::Domain(_))));
        assert!(matches!(compute_q2(1.0, 1.0, f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn classify_examples() {
        let l2 = classify(&DegeneracyProfile::with_indices(1.0, 2.0, 2.0, 1.5, 0.6)).unwrap();
        assert_eq!(l2.kind, ClassKind::L2);
        let hinf = classify(&DegeneracyProfile::with_indices(1.0, 2.0, 2.0, 1.0, 0.5)).unwrap();
        assert_eq!(hinf.kind, ClassKind::HInfinity);

        let gevrey = classify(&DegeneracyProfile::default()).unwrap();
        assert_eq!(gevrey.kind, ClassKind::GevreyHInfinity);
        assert!(approx(gevrey.q2, 6.0 / 7.0));
        assert_eq!(gevrey.q1, 0.0);
        assert!(approx(gevrey.theta_sup.unwrap(), 7.0 / 6.0));
        assert_eq!(gevrey.theorem_branch, Branch::GapGevrey);

        let out = classify(&DegeneracyProfile::with_indices(2.0, 0.4, 0.4, 2.0, 2.0)).unwrap();
        assert_eq!(out.kind, ClassKind::OutOfScope);
        assert_eq!(out.theorem_branch, Branch::GapOrderTooHigh);
        assert!(out.trace.iter().any(|line| line.contains("violated: ell < 2k + 1")));
    }

    #[test]
    fn decay_threshold_boundary_is_out_of_scope() {
        // k = 0.5, ell = 1.5 puts the bound at exactly 0.75.
        let p = DegeneracyProfile::with_indices(1.5, 0.5, 0.5, 0.75, 0.9);
        let c = classify(&p).unwrap();
        assert_eq!(c.kind, ClassKind::OutOfScope);
        assert_eq!(c.theorem_branch, Branch::GapDecayTooSlow);
        let just_above = DegeneracyProfile::with_indices(1.5, 0.5, 0.5, 0.75 + 1e-12, 0.9);
        assert_eq!(classify(&just_above).unwrap().kind, ClassKind::GevreyHInfinity);
    }

    #[test]
    fn equal_orders_route_away_from_gap_branch() {
        let p = DegeneracyProfile::with_indices(1.0, 1.0, 0.5, 0.8, 0.9);
        assert_eq!(classify(&p).unwrap().regime(), Regime::FirstOrderGap);
        let p = DegeneracyProfile::with_indices(1.0, 1.0, 1.0, 0.8, 0.9);
        assert_eq!(classify(&p).unwrap().regime(), Regime::NoGap);
    }

    #[test]
    fn theta_range_contract() {
        let gevrey = classify(&DegeneracyProfile::default()).unwrap();
        let range = theta_range(&gevrey).unwrap();
        assert_eq!(range.lower, 1.0);
        assert!(approx(range.upper, 7.0 / 6.0));
        assert!(range.contains(1.1) && !range.contains(1.2));

        let hinf = classify(&DegeneracyProfile::with_indices(1.0, 2.0, 2.0, 1.0, 0.5)).unwrap();
        assert!(matches!(theta_range(&hinf), Err(Error::WrongKind(_))));
    }

    #[test]
    fn invalid_profile_rejected() {
        let mut p = DegeneracyProfile::default();
        p.a3_lower = 2.0;
        assert!(matches!(classify(&p), Err(Error::InvalidProfile(_))));
        p = DegeneracyProfile::default();
        p.sigma1 = 0.0;
        assert!(matches!(classify(&p), Err(Error::InvalidProfile(_))));
    }

    #[test]
    fn zone_balance_holds_for_default_profile() {
        let p = DegeneracyProfile::default();
        let q2 = compute_q2(p.ell, p.k, p.sigma2).unwrap();
        let q1 = compute_q1(p.ell, p.kprime, p.sigma1).unwrap();
        let (a, b) = zone_balance_residuals(&p, q2, q1);
        assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
    }
}
