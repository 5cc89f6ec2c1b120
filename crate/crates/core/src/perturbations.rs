//! Perturbation-component laws for the simultaneous perturbation gradient.
//!
//! Two laws are built in, both with mean 0 and variance 1:
//!
//! * Bernoulli ±1.
//! * Segmented uniform: uniform on `(-β, -α) ∪ (α, β)` with
//!   `α = (19 - 3√13)/20` and `β = (19 + 3√13)/20`.
//!
//! Note that `αβ = 61/100`, which gives `E[1/Δ²] = 1/(αβ) = 100/61`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpsaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Bernoulli,
    SegmentedUniform,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 2] = [DistributionKind::Bernoulli, DistributionKind::SegmentedUniform];

    pub fn name(self) -> &'static str {
        match self {
            DistributionKind::Bernoulli => "bernoulli",
            DistributionKind::SegmentedUniform => "segmented_uniform",
        }
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistributionKind {
    type Err = SpsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(DistributionKind::Bernoulli),
            "segmented_uniform" => Ok(DistributionKind::SegmentedUniform),
            other => Err(SpsaError::UnknownDistribution(other.to_string())),
        }
    }
}

/// Inner endpoint `α = (19 - 3√13)/20 ≈ 0.4092` of the segmented uniform.
pub fn su_inner() -> f64 {
    (19.0 - 3.0 * 13f64.sqrt()) / 20.0
}

/// Outer endpoint `β = (19 + 3√13)/20 ≈ 1.4908` of the segmented uniform.
pub fn su_outer() -> f64 {
    (19.0 + 3.0 * 13f64.sqrt()) / 20.0
}

/// Exact rational value, used where a moment has a closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: i64,
    pub den: i64,
}

impl Fraction {
    pub const fn new(num: i64, den: i64) -> Self {
        Fraction { num, den }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Moments of a single perturbation component (and of ratios of two
/// independent components `i != j`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSet {
    pub mean: f64,
    pub variance: f64,
    /// `E[1/Δ²]`
    pub inv_second: f64,
    /// `E[Δᵢ²/Δⱼ²]`, `i != j`
    pub ratio_second: f64,
    /// `E[Δᵢ/Δⱼ]`, `i != j`
    pub cross_ratio: f64,
}

impl MomentSet {
    /// `[E(Δᵢ), E(Δᵢ/Δⱼ), E(Δᵢ²/Δⱼ²), E(1/Δᵢ²)]`, the usual tabulation order.
    pub fn table_row(&self) -> [f64; 4] {
        [self.mean, self.cross_ratio, self.ratio_second, self.inv_second]
    }
}

/// Labels matching [`MomentSet::table_row`].
pub const MOMENT_LABELS: [&str; 4] = ["E(D_i)", "E(D_i/D_j)", "E(D_i^2/D_j^2)", "E(1/D_i^2)"];

/// Structural properties checked by [`validate_for_spsa`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuralProperties {
    pub symmetric: bool,
    pub bounded: bool,
    pub inv_second_finite: bool,
}

impl StructuralProperties {
    /// Symmetric uniform on `(-√3, √3)`: bounded, but too much mass near zero.
    pub const SYMMETRIC_UNIFORM: Self = StructuralProperties {
        symmetric: true,
        bounded: true,
        inv_second_finite: false,
    };

    /// Mean-zero normal: unbounded, and `E[1/Δ²]` diverges.
    pub const MEAN_ZERO_NORMAL: Self = StructuralProperties {
        symmetric: true,
        bounded: false,
        inv_second_finite: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    /// Not symmetric about zero (A2).
    Asymmetric,
    /// Not uniformly bounded in magnitude (A2).
    Unbounded,
    /// `E[1/Δ²]` is infinite, so the bounded second moment of `y/Δᵢ` fails (A3).
    InverseMomentInfinite,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Asymmetric => f.write_str("A2: not symmetric about zero"),
            Violation::Unbounded => f.write_str("A2: not bounded in magnitude"),
            Violation::InverseMomentInfinite => f.write_str("A3: E[1/D^2] is infinite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Invalid(Vec<Violation>),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

/// Validity gate for SPSA perturbation components. Works on declared
/// structure because finiteness of an inverse moment cannot be decided
/// from samples.
pub fn validate_for_spsa(props: StructuralProperties) -> Validity {
    let mut violations = Vec::new();
    if !props.symmetric {
        violations.push(Violation::Asymmetric);
    }
    if !props.bounded {
        violations.push(Violation::Unbounded);
    }
    if !props.inv_second_finite {
        violations.push(Violation::InverseMomentInfinite);
    }
    if violations.is_empty() {
        Validity::Valid
    } else {
        Validity::Invalid(violations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationDistribution {
    kind: DistributionKind,
}

impl PerturbationDistribution {
    pub const BERNOULLI: Self = PerturbationDistribution {
        kind: DistributionKind::Bernoulli,
    };
    pub const SEGMENTED_UNIFORM: Self = PerturbationDistribution {
        kind: DistributionKind::SegmentedUniform,
    };

    pub fn new(kind: DistributionKind) -> Self {
        PerturbationDistribution { kind }
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn structural_properties(&self) -> StructuralProperties {
        StructuralProperties {
            symmetric: true,
            bounded: true,
            inv_second_finite: true,
        }
    }

    pub fn validate(&self) -> Validity {
        validate_for_spsa(self.structural_properties())
    }

    /// Draws one component. Bernoulli consumes one uniform; the segmented
    /// uniform consumes exactly two (sign, then magnitude).
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        match self.kind {
            DistributionKind::Bernoulli => sign,
            DistributionKind::SegmentedUniform => {
                let (alpha, beta) = (su_inner(), su_outer());
                let u: f64 = rng.random();
                sign * (alpha + (beta - alpha) * u)
            }
        }
    }

    /// Fills `out` with i.i.d. components.
    pub fn sample_vector<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for d in out.iter_mut() {
            *d = self.sample_component(rng);
        }
    }

    /// Probability density of the segmented uniform: `1/(2(β-α)) = 5/(3√13)`
    /// on the support, 0 elsewhere.
    pub fn density(&self, x: f64) -> Result<f64> {
        self.require_continuous("density")?;
        let (alpha, beta) = (su_inner(), su_outer());
        let ax = x.abs();
        if ax > alpha && ax < beta {
            Ok(0.5 / (beta - alpha))
        } else {
            Ok(0.0)
        }
    }

    /// Piecewise-linear distribution function of the segmented uniform.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        self.require_continuous("cdf")?;
        let (alpha, beta) = (su_inner(), su_outer());
        let width = beta - alpha;
        Ok(if x <= -beta {
            0.0
        } else if x < -alpha {
            (x + beta) / (2.0 * width)
        } else if x <= alpha {
            0.5
        } else if x < beta {
            0.5 + (x - alpha) / (2.0 * width)
        } else {
            1.0
        })
    }

    /// Quantile function. `u < 0.5` lands in `[-β, -α)`, `u >= 0.5` in
    /// `[α, β]`; the tie at `u = 0.5` resolves to `+α`.
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        self.require_continuous("inverse_cdf")?;
        if !(0.0..=1.0).contains(&u) {
            return Err(SpsaError::ProbabilityDomain(u));
        }
        let (alpha, beta) = (su_inner(), su_outer());
        let width = beta - alpha;
        Ok(if u < 0.5 {
            -beta + 2.0 * width * u
        } else {
            alpha + 2.0 * width * (u - 0.5)
        })
    }

    /// Closed-form moments as exact fractions, in
    /// [`MomentSet::table_row`] order.
    pub fn exact_moments(&self) -> [Fraction; 4] {
        match self.kind {
            DistributionKind::Bernoulli => [
                Fraction::new(0, 1),
                Fraction::new(0, 1),
                Fraction::new(1, 1),
                Fraction::new(1, 1),
            ],
            // E[Δ²] = (α² + αβ + β²)/3 = 1 and E[1/Δ²] = 1/(αβ) = 100/61
            DistributionKind::SegmentedUniform => [
                Fraction::new(0, 1),
                Fraction::new(0, 1),
                Fraction::new(100, 61),
                Fraction::new(100, 61),
            ],
        }
    }

    pub fn analytic_moments(&self) -> MomentSet {
        let inv_second = self.exact_moments()[3].to_f64();
        let variance = 1.0;
        MomentSet {
            mean: 0.0,
            variance,
            inv_second,
            ratio_second: variance * inv_second,
            cross_ratio: 0.0,
        }
    }

    fn require_continuous(&self, op: &'static str) -> Result<()> {
        match self.kind {
            DistributionKind::SegmentedUniform => Ok(()),
            DistributionKind::Bernoulli => Err(SpsaError::KindMismatch { op, kind: self.kind }),
        }
    }
}

impl fmt::Display for PerturbationDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.kind.fmt(f)
    }
}

impl FromStr for PerturbationDistribution {
    type Err = SpsaError;

    fn from_str(s: &str) -> Result<Self> {
        s.parse().map(PerturbationDistribution::new)
    }
}

/// Monte Carlo estimates of the tabulated moments with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledMoments {
    pub estimate: [f64; 4],
    pub std_error: [f64; 4],
    pub draws: usize,
}

/// Estimates the four tabulated moments from `draws` independent pairs
/// `(Δᵢ, Δⱼ)`.
pub fn sample_moments<R: Rng + ?Sized>(dist: &PerturbationDistribution, draws: usize, rng: &mut R) -> SampledMoments {
    let mut sum = [0.0f64; 4];
    let mut sum_sq = [0.0f64; 4];
    for _ in 0..draws {
        let di = dist.sample_component(rng);
        let dj = dist.sample_component(rng);
        let vals = [di, di / dj, (di * di) / (dj * dj), 1.0 / (di * di)];
        for (m, v) in vals.iter().enumerate() {
            sum[m] += v;
            sum_sq[m] += v * v;
        }
    }
    let n = draws as f64;
    let mut estimate = [0.0; 4];
    let mut std_error = [0.0; 4];
    for m in 0..4 {
        let mean = sum[m] / n;
        let var = ((sum_sq[m] - n * mean * mean) / (n - 1.0)).max(0.0);
        estimate[m] = mean;
        std_error[m] = (var / n).sqrt();
    }
    SampledMoments {
        estimate,
        std_error,
        draws,
    }
}
