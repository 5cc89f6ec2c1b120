//! One-iteration comparison of the segmented uniform against Bernoulli ±1.
//!
//! The central quantity is the difference `MSE_SU - MSE_B` of
//! `E‖θ̂₁ - θ*‖²` after a single SPSA step from a common start point,
//! written in terms of the first-step gains, the noise variance, the
//! gradient `Lᵢ` at `θ̂₀` and the offset `θ̂₀ - θ*`. A negative value favours
//! the segmented uniform. For quadratic losses the expression is exact;
//! otherwise it omits an `O(c₀²)` Taylor remainder, which can be dominated
//! by the bound `U` when a third-derivative bound `M` is known.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpsaError};
use crate::perturbations::PerturbationDistribution;
use crate::spsa::{GainSchedule, ProblemConfig};

/// Inputs of the one-step superiority conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionInput {
    pub p: usize,
    pub a0_su: f64,
    pub a0_bern: f64,
    pub c0_su: f64,
    pub c0_bern: f64,
    pub sigma2: f64,
    /// `Lᵢ`, first derivatives at `θ̂₀`.
    pub grad: Vec<f64>,
    /// `θ̂₀ - θ*`.
    pub offset: Vec<f64>,
    /// Bound `M` on `|L_ijk|`, needed only by the conservative form.
    pub third_derivative_bound: Option<f64>,
}

/// Where the `Lᵢ` in a [`ConditionInput`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    Analytic,
    CentralDifference,
    Supplied,
}

impl ConditionInput {
    /// Builds the input from a problem and the two gain schedules at `k = 0`.
    pub fn from_problem(
        problem: &ProblemConfig,
        su: &GainSchedule,
        bern: &GainSchedule,
        third_derivative_bound: Option<f64>,
    ) -> (Self, GradientSource) {
        let source = if problem.loss().has_analytic_gradient() {
            GradientSource::Analytic
        } else {
            GradientSource::CentralDifference
        };
        let input = ConditionInput {
            p: problem.p(),
            a0_su: su.gain_a(0),
            a0_bern: bern.gain_a(0),
            c0_su: su.gain_c(0),
            c0_bern: bern.gain_c(0),
            sigma2: problem.sigma2(),
            grad: problem.loss().gradient(problem.theta0()),
            offset: problem
                .theta0()
                .iter()
                .zip(problem.theta_star())
                .map(|(t, s)| t - s)
                .collect(),
            third_derivative_bound,
        };
        (input, source)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a0_su", self.a0_su),
            ("a0_bern", self.a0_bern),
            ("c0_su", self.c0_su),
            ("c0_bern", self.c0_bern),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SpsaError::InvalidParameter {
                    name,
                    value: v,
                    constraint: "gains must be finite and >= 0",
                });
            }
        }
        if !(self.c0_su > 0.0 && self.c0_bern > 0.0) {
            return Err(SpsaError::InvalidParameter {
                name: "c0",
                value: self.c0_su.min(self.c0_bern),
                constraint: "perturbation gains must be > 0",
            });
        }
        for (what, v) in [("grad", &self.grad), ("offset", &self.offset)] {
            if v.len() != self.p {
                return Err(SpsaError::Dimension {
                    what,
                    got: v.len(),
                    expected: self.p,
                });
            }
        }
        Ok(())
    }

    fn sum_grad_sq(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum()
    }

    fn offset_dot_grad(&self) -> f64 {
        self.offset.iter().zip(&self.grad).map(|(e, g)| e * g).sum()
    }

    /// `maxᵢ Lᵢ(θ̂₀)` (signed, not absolute).
    pub fn max_grad(&self) -> f64 {
        self.grad.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `[(100p/61 - 39/61) a_S² - p a_B²] ΣLᵢ²
///  + (a_S - a_B) [pσ²(a_S + a_B)/(2c_B²) - 2Σ(θ̂₀ᵢ - θᵢ*)Lᵢ]
///  - p a_S² σ² (1/(2c_B²) - 50/(61 c_S²))`
pub fn condition_lhs_explicit(input: &ConditionInput) -> f64 {
    let p = input.p as f64;
    let (a_s, a_b) = (input.a0_su, input.a0_bern);
    let (c_s, c_b) = (input.c0_su, input.c0_bern);
    let s2 = input.sigma2;

    let gradient_term = ((100.0 * p / 61.0 - 39.0 / 61.0) * a_s * a_s - p * a_b * a_b) * input.sum_grad_sq();
    let cross_term = (a_s - a_b) * (p * s2 / (2.0 * c_b * c_b) * (a_s + a_b) - 2.0 * input.offset_dot_grad());
    let noise_term = p * a_s * a_s * s2 * (1.0 / (2.0 * c_b * c_b) - 50.0 / (61.0 * c_s * c_s));
    gradient_term + cross_term - noise_term
}

/// The `p = 2` specialization:
/// `[(161/61) a_S² - 2a_B²](L₁² + L₂²)
///  + (a_S - a_B)[σ²(a_S + a_B)/c_B² - 2(L₁e₁ + L₂e₂)]
///  - a_S²σ²(1/c_B² - 100/(61 c_S²))`.
pub fn corollary3_lhs(input: &ConditionInput) -> Result<f64> {
    if input.p != 2 {
        return Err(SpsaError::Dimension {
            what: "p (the two-dimensional condition)",
            got: input.p,
            expected: 2,
        });
    }
    input.validate()?;
    let (a_s, a_b) = (input.a0_su, input.a0_bern);
    let (c_s, c_b) = (input.c0_su, input.c0_bern);
    let s2 = input.sigma2;
    let (l1, l2) = (input.grad[0], input.grad[1]);
    let (e1, e2) = (input.offset[0], input.offset[1]);

    Ok((161.0 / 61.0 * a_s * a_s - 2.0 * a_b * a_b) * (l1 * l1 + l2 * l2)
        + (a_s - a_b) * (s2 * (a_s + a_b) / (c_b * c_b) - 2.0 * (l1 * e1 + l2 * e2))
        - a_s * a_s * s2 * (1.0 / (c_b * c_b) - 100.0 / (61.0 * c_s * c_s)))
}

/// Upper bound `U` on the Taylor remainder given `|L_ijk| <= M`:
///
/// `U = (4a_S c_S² + a_B c_B²) M (Σ|θ̂₀ᵢ - θᵢ*|) (p-1)²
///    + (1/20) a_S² c_S⁴ M² p⁷ a_S
///    + (1/3)(a_S² c_S³ + a_B² c_B³) M p⁵ max_Li`
///
/// The middle term keeps its trailing `a_S` factor (so it is cubic in
/// `a_S`), as the bound is usually stated.
pub fn u_bound(input: &ConditionInput, max_li: f64) -> Result<f64> {
    let m = input
        .third_derivative_bound
        .ok_or(SpsaError::MissingThirdDerivativeBound)?;
    if !(m >= 0.0 && m.is_finite()) {
        return Err(SpsaError::InvalidParameter {
            name: "third_derivative_bound",
            value: m,
            constraint: "must be finite and >= 0",
        });
    }
    let p = input.p as f64;
    let (a_s, a_b) = (input.a0_su, input.a0_bern);
    let (c_s, c_b) = (input.c0_su, input.c0_bern);
    let abs_offset: f64 = input.offset.iter().map(|e| e.abs()).sum();

    let first = (4.0 * a_s * c_s * c_s + a_b * c_b * c_b) * m * abs_offset * (p - 1.0).powi(2);
    let second = a_s * a_s * c_s.powi(4) * m * m * p.powi(7) * a_s / 20.0;
    let third = (a_s * a_s * c_s.powi(3) + a_b * a_b * c_b.powi(3)) * m * p.powi(5) * max_li / 3.0;
    Ok(first + second + third)
}

/// Sufficient sub-conditions for a negative explicit LHS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Remark2 {
    /// `a_S/a_B < √(p/(100p/61 - 39/61))`
    pub ratio_a_ok: bool,
    /// `c_B/c_S < √(61/100)`
    pub ratio_c_ok: bool,
    /// `2Σ(θ̂₀ᵢ - θᵢ*)Lᵢ < pσ²(a_S + a_B)/(2c_B²)`
    pub flatness_ok: bool,
}

impl Remark2 {
    pub fn all(&self) -> bool {
        self.ratio_a_ok && self.ratio_c_ok && self.flatness_ok
    }
}

/// Threshold on `a_S/a_B` in the gain-ratio sub-condition.
pub fn a_ratio_threshold(p: usize) -> f64 {
    let p = p as f64;
    (p / (100.0 * p / 61.0 - 39.0 / 61.0)).sqrt()
}

pub fn check_remark2(input: &ConditionInput) -> Remark2 {
    let p = input.p as f64;
    let ratio_a_ok = input.a0_su / input.a0_bern < a_ratio_threshold(input.p);
    let ratio_c_ok = input.c0_bern / input.c0_su < (61.0f64 / 100.0).sqrt();
    let flatness_ok = 2.0 * input.offset_dot_grad()
        < p * input.sigma2 * (input.a0_su + input.a0_bern) / (2.0 * input.c0_bern * input.c0_bern);
    Remark2 {
        ratio_a_ok,
        ratio_c_ok,
        flatness_ok,
    }
}

/// Exact `E‖θ̂₁ - θ*‖²` after one step on a quadratic loss, from the
/// moments of the perturbation law:
///
/// `‖e‖² - 2a e·g + a²(1 + (p-1)E[Δᵢ²/Δⱼ²])‖g‖² + a² p σ² E[1/Δ²]/(2c²)`
///
/// with `e = θ̂₀ - θ*` and `g = ∇L(θ̂₀)`. The step is
/// `-a (g·Δ + (ε⁺ - ε⁻)/(2c)) Δ⁻¹` since the central difference of a
/// quadratic has no remainder; expanding the square, odd moments of `Δ`
/// and of the noise drop out.
pub fn mse_one_step_quadratic(
    problem: &ProblemConfig,
    a0: f64,
    c0: f64,
    dist: &PerturbationDistribution,
) -> Result<f64> {
    if !problem.loss().is_quadratic() {
        return Err(SpsaError::NotQuadratic(problem.loss().name().to_string()));
    }
    let p = problem.p() as f64;
    let m = dist.analytic_moments();
    let g = problem.loss().gradient(problem.theta0());
    let e: Vec<f64> = problem
        .theta0()
        .iter()
        .zip(problem.theta_star())
        .map(|(t, s)| t - s)
        .collect();
    let e_sq: f64 = e.iter().map(|x| x * x).sum();
    let e_dot_g: f64 = e.iter().zip(&g).map(|(x, y)| x * y).sum();
    let g_sq: f64 = g.iter().map(|x| x * x).sum();

    Ok(e_sq - 2.0 * a0 * e_dot_g
        + a0 * a0 * (1.0 + (p - 1.0) * m.ratio_second) * g_sq
        + a0 * a0 * p * problem.sigma2() * m.inv_second / (2.0 * c0 * c0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionForm {
    /// General smooth loss, remainder omitted.
    Theorem1Explicit,
    /// Explicit LHS plus `U`.
    Corollary1,
    /// Quadratic loss, any `p`.
    Corollary2,
    /// Quadratic loss, `p = 2`.
    Corollary3,
}

impl ConditionForm {
    pub fn name(self) -> &'static str {
        match self {
            ConditionForm::Theorem1Explicit => "theorem1_explicit",
            ConditionForm::Corollary1 => "corollary1",
            ConditionForm::Corollary2 => "corollary2",
            ConditionForm::Corollary3 => "corollary3",
        }
    }

    /// The most specific form that applies.
    pub fn auto(is_quadratic: bool, p: usize, has_bound: bool) -> Self {
        match (is_quadratic, p, has_bound) {
            (true, 2, _) => ConditionForm::Corollary3,
            (true, _, _) => ConditionForm::Corollary2,
            (false, _, true) => ConditionForm::Corollary1,
            (false, _, false) => ConditionForm::Theorem1Explicit,
        }
    }
}

impl fmt::Display for ConditionForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    SuFavored,
    BernoulliFavoredOrInconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::SuFavored => "su_favored",
            Verdict::BernoulliFavoredOrInconclusive => "bernoulli_favored_or_inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub lhs_explicit: f64,
    pub u_bound: Option<f64>,
    pub lhs_conservative: Option<f64>,
    pub verdict: Verdict,
    pub which_condition: ConditionForm,
    pub remark2: Remark2,
    pub gradient_source: GradientSource,
    /// True when the explicit LHS is exact (quadratic loss).
    pub exact: bool,
}

impl ConditionReport {
    /// The value the verdict is based on.
    pub fn decisive_lhs(&self) -> f64 {
        self.lhs_conservative.unwrap_or(self.lhs_explicit)
    }

    /// `(name, value)` pairs in display order.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        vec![
            ("which_condition", self.which_condition.to_string()),
            ("lhs_explicit", self.lhs_explicit.to_string()),
            ("u_bound", opt(self.u_bound)),
            ("lhs_conservative", opt(self.lhs_conservative)),
            ("verdict", self.verdict.to_string()),
            ("exact", self.exact.to_string()),
            (
                "remainder",
                if self.exact {
                    "vanishes (quadratic loss)".to_string()
                } else if self.u_bound.is_some() {
                    "bounded by u_bound".to_string()
                } else {
                    "O(c0^2) omitted, not computable".to_string()
                },
            ),
            ("remark2.ratio_a_ok", self.remark2.ratio_a_ok.to_string()),
            ("remark2.ratio_c_ok", self.remark2.ratio_c_ok.to_string()),
            ("remark2.flatness_ok", self.remark2.flatness_ok.to_string()),
            (
                "gradient_source",
                match self.gradient_source {
                    GradientSource::Analytic => "analytic",
                    GradientSource::CentralDifference => "central_difference_1e-5",
                    GradientSource::Supplied => "supplied",
                }
                .to_string(),
            ),
        ]
    }
}

/// One `name = value` per line.
impl fmt::Display for ConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, value) in self.fields() {
            writeln!(f, "{name} = {value}")?;
        }
        Ok(())
    }
}

/// Evaluates the requested form.
///
/// `Corollary2`/`Corollary3` require a quadratic loss and `Corollary3`
/// additionally `p = 2`; `Corollary1` requires `M`. Supplying `M` with
/// `Theorem1Explicit` also reports `U`, but the verdict then still uses
/// the explicit value.
pub fn evaluate_condition(
    input: &ConditionInput,
    form: ConditionForm,
    is_quadratic: bool,
    gradient_source: GradientSource,
) -> Result<ConditionReport> {
    input.validate()?;
    let needs_quadratic = matches!(form, ConditionForm::Corollary2 | ConditionForm::Corollary3);
    if needs_quadratic && !is_quadratic {
        return Err(SpsaError::NotQuadratic(format!("{form} requested")));
    }
    let lhs_explicit = match form {
        ConditionForm::Corollary3 => corollary3_lhs(input)?,
        _ => condition_lhs_explicit(input),
    };
    let u = match (form, input.third_derivative_bound) {
        (ConditionForm::Corollary1, _) | (ConditionForm::Theorem1Explicit, Some(_)) => {
            Some(u_bound(input, input.max_grad())?)
        }
        _ => None,
    };
    let lhs_conservative = match form {
        ConditionForm::Corollary1 => u.map(|u| lhs_explicit + u),
        _ => None,
    };
    let decisive = lhs_conservative.unwrap_or(lhs_explicit);
    let verdict = if decisive < 0.0 {
        Verdict::SuFavored
    } else {
        Verdict::BernoulliFavoredOrInconclusive
    };
    Ok(ConditionReport {
        lhs_explicit,
        u_bound: u,
        lhs_conservative,
        verdict,
        which_condition: form,
        remark2: check_remark2(input),
        gradient_source,
        exact: is_quadratic,
    })
}
