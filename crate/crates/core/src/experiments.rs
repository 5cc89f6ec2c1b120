//! Monte Carlo comparison of the two perturbation laws.
//!
//! Replicate `r` draws its noise from one stream shared by the Bernoulli
//! and segmented-uniform runs (common random numbers) and its
//! perturbations from a separate stream per law. All three stream seeds
//! are a pure function of `(master_seed, r)`, so any replicate can be
//! replayed on its own and the result does not depend on how replicates
//! are spread across threads.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, SpsaError};
use crate::perturbations::{DistributionKind, PerturbationDistribution};
use crate::spsa::{iterate, GainSchedule, ProblemConfig, SplitStreams};
use crate::theory::{condition_lhs_explicit, ConditionInput};

/// Coupling used for the matched pairs, echoed in output metadata.
pub const PAIRING_MODE: &str = "shared_noise_stream+independent_perturbation_streams";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Noise = 0,
    BernoulliPerturbation = 1,
    SegmentedUniformPerturbation = 2,
}

impl Stream {
    fn perturbation(kind: DistributionKind) -> Self {
        match kind {
            DistributionKind::Bernoulli => Stream::BernoulliPerturbation,
            DistributionKind::SegmentedUniform => Stream::SegmentedUniformPerturbation,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of stream `stream` for replicate `replicate`.
pub fn derive_seed(master_seed: u64, replicate: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ replicate) ^ stream as u64)
}

pub fn stream_rng(master_seed: u64, replicate: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, replicate, stream))
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub problem: ProblemConfig,
    pub schedule_su: GainSchedule,
    pub schedule_bern: GainSchedule,
    pub k_values: Vec<usize>,
    pub n_reps: u64,
    pub master_seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_reps < 2 {
            return Err(SpsaError::InvalidExperiment(format!(
                "n_reps must be >= 2 for the paired t-test, got {}",
                self.n_reps
            )));
        }
        if self.k_values.is_empty() {
            return Err(SpsaError::InvalidExperiment("k_values is empty".into()));
        }
        if self.k_values[0] == 0 {
            return Err(SpsaError::InvalidExperiment("k_values must be positive".into()));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SpsaError::InvalidExperiment(
                "k_values must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn k_max(&self) -> usize {
        *self.k_values.last().expect("validated non-empty")
    }

    pub fn schedule(&self, kind: DistributionKind) -> &GainSchedule {
        match kind {
            DistributionKind::Bernoulli => &self.schedule_bern,
            DistributionKind::SegmentedUniform => &self.schedule_su,
        }
    }
}

/// Squared errors `‖θ̂_k - θ*‖²` for every replicate, indexed
/// `[k index][replicate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateErrors {
    pub k_values: Vec<usize>,
    pub bernoulli: Vec<Vec<f64>>,
    pub segmented_uniform: Vec<Vec<f64>>,
}

impl ReplicateErrors {
    pub fn n_reps(&self) -> usize {
        self.bernoulli.first().map_or(0, Vec::len)
    }

    pub fn for_kind(&self, kind: DistributionKind) -> &[Vec<f64>] {
        match kind {
            DistributionKind::Bernoulli => &self.bernoulli,
            DistributionKind::SegmentedUniform => &self.segmented_uniform,
        }
    }

    /// `SE_B - SE_SU` per replicate at k index `ki`.
    pub fn paired_diffs(&self, ki: usize) -> Vec<f64> {
        self.bernoulli[ki]
            .iter()
            .zip(&self.segmented_uniform[ki])
            .map(|(b, s)| b - s)
            .collect()
    }
}

/// Runs one replicate under one law, harvesting squared errors at the
/// requested iteration counts.
pub fn run_replicate(spec: &ExperimentSpec, replicate: u64, kind: DistributionKind) -> Result<Vec<f64>> {
    let dist = PerturbationDistribution::new(kind);
    let mut draws = SplitStreams {
        perturbation: stream_rng(spec.master_seed, replicate, Stream::perturbation(kind)),
        noise: stream_rng(spec.master_seed, replicate, Stream::Noise),
    };
    let mut out = Vec::with_capacity(spec.k_values.len());
    let mut next = 0;
    let outcome = iterate(
        &spec.problem,
        spec.schedule(kind),
        &dist,
        spec.k_max(),
        &mut draws,
        |k, theta| {
            if next < spec.k_values.len() && spec.k_values[next] == k {
                out.push(spec.problem.squared_error(theta));
                next += 1;
            }
        },
    )?;
    if let Some(iteration) = outcome.diverged_at {
        return Err(SpsaError::Diverged {
            replicate,
            distribution: kind,
            iteration,
        });
    }
    Ok(out)
}

/// Simulates every replicate under both laws (in parallel) and gathers the
/// squared errors in replicate order.
pub fn simulate(spec: &ExperimentSpec) -> Result<ReplicateErrors> {
    spec.validate()?;
    for kind in DistributionKind::ALL {
        if !PerturbationDistribution::new(kind).validate().is_valid() {
            return Err(SpsaError::UnknownDistribution(kind.to_string()));
        }
    }
    let per_rep: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..spec.n_reps)
        .into_par_iter()
        .map(|r| {
            let b = run_replicate(spec, r, DistributionKind::Bernoulli)?;
            let s = run_replicate(spec, r, DistributionKind::SegmentedUniform)?;
            Ok((b, s))
        })
        .collect();

    let nk = spec.k_values.len();
    let n = spec.n_reps as usize;
    let mut bernoulli = vec![Vec::with_capacity(n); nk];
    let mut segmented_uniform = vec![Vec::with_capacity(n); nk];
    for rep in per_rep {
        let (b, s) = rep?;
        for ki in 0..nk {
            bernoulli[ki].push(b[ki]);
            segmented_uniform[ki].push(s[ki]);
        }
    }
    Ok(ReplicateErrors {
        k_values: spec.k_values.clone(),
        bernoulli,
        segmented_uniform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseEstimate {
    pub distribution: DistributionKind,
    pub k: usize,
    pub mse: f64,
    pub std_error: f64,
    pub n_reps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedComparison {
    pub k: usize,
    /// `MSE_B - MSE_SU` over paired replicates.
    pub mean_diff: f64,
    /// Standard error of `mean_diff`.
    pub std_error: f64,
    pub t_stat: f64,
    /// One-sided, alternative `MSE_B > MSE_SU`.
    pub p_value: f64,
    pub n_pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub estimates: Vec<MseEstimate>,
    pub comparisons: Vec<PairedComparison>,
    pub master_seed: u64,
}

impl ExperimentResult {
    /// Concatenates the rows of several results (e.g. blocks run at
    /// different replicate counts).
    pub fn merge(parts: Vec<ExperimentResult>) -> ExperimentResult {
        let master_seed = parts.first().map_or(0, |p| p.master_seed);
        let mut merged = ExperimentResult {
            estimates: Vec::new(),
            comparisons: Vec::new(),
            master_seed,
        };
        for p in parts {
            merged.estimates.extend(p.estimates);
            merged.comparisons.extend(p.comparisons);
        }
        merged
    }

    pub fn estimate(&self, kind: DistributionKind, k: usize) -> Option<&MseEstimate> {
        self.estimates.iter().find(|e| e.distribution == kind && e.k == k)
    }

    pub fn comparison(&self, k: usize) -> Option<&PairedComparison> {
        self.comparisons.iter().find(|c| c.k == k)
    }
}

/// Sample mean and standard error of the mean, summed in slice order.
pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub mean: f64,
    pub std_error: f64,
    pub t_stat: f64,
    /// Upper-tail probability of Student's t with `n - 1` degrees of freedom.
    pub p_value: f64,
    /// Zero sample variance; `t` and `p` follow the sign convention.
    pub degenerate: bool,
}

/// One-sided matched-pairs t-test of `mean(diffs) > 0`.
///
/// Zero-variance input gives `t = ±∞, p = 0/1` by the sign of the mean,
/// or `t = 0, p = 0.5` when the mean is zero too.
pub fn paired_t_test(diffs: &[f64]) -> Result<TTest> {
    if diffs.len() < 2 {
        return Err(SpsaError::InvalidExperiment(format!(
            "paired t-test needs at least 2 differences, got {}",
            diffs.len()
        )));
    }
    let (mean, std_error) = mean_and_std_error(diffs);
    if std_error == 0.0 {
        let (t_stat, p_value) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTest {
            mean,
            std_error,
            t_stat,
            p_value,
            degenerate: true,
        });
    }
    let t_stat = mean / std_error;
    let dof = (diffs.len() - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, dof).expect("dof >= 1");
    let p_value = dist.sf(t_stat).clamp(0.0, 1.0);
    Ok(TTest {
        mean,
        std_error,
        t_stat,
        p_value,
        degenerate: false,
    })
}

/// Aggregates squared errors into per-law MSE estimates and per-k paired
/// comparisons.
pub fn summarize(errors: &ReplicateErrors, master_seed: u64) -> Result<ExperimentResult> {
    let n = errors.n_reps() as u64;
    let mut estimates = Vec::new();
    let mut comparisons = Vec::new();
    for (ki, &k) in errors.k_values.iter().enumerate() {
        for kind in DistributionKind::ALL {
            let (mse, std_error) = mean_and_std_error(&errors.for_kind(kind)[ki]);
            estimates.push(MseEstimate {
                distribution: kind,
                k,
                mse,
                std_error,
                n_reps: n,
            });
        }
        let t = paired_t_test(&errors.paired_diffs(ki))?;
        comparisons.push(PairedComparison {
            k,
            mean_diff: t.mean,
            std_error: t.std_error,
            t_stat: t.t_stat,
            p_value: t.p_value,
            n_pairs: n,
        });
    }
    Ok(ExperimentResult {
        estimates,
        comparisons,
        master_seed,
    })
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let errors = simulate(spec)?;
    summarize(&errors, spec.master_seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryComparison {
    /// Monte Carlo `MSE_SU - MSE_B` at `k = 1`.
    pub mc_diff: f64,
    pub paired_std_error: f64,
    /// Closed-form `MSE_SU - MSE_B`.
    pub theory_diff: f64,
    /// `|mc_diff - theory_diff| <= 4 · paired_std_error`.
    pub consistent: bool,
}

/// Checks the one-step Monte Carlo difference against the closed form.
pub fn compare_with_theory(spec: &ExperimentSpec) -> Result<TheoryComparison> {
    if !spec.problem.loss().is_quadratic() {
        return Err(SpsaError::NotQuadratic(spec.problem.loss().name().to_string()));
    }
    if spec.k_values != [1] {
        return Err(SpsaError::InvalidExperiment(format!(
            "theory comparison needs k_values = [1], got {:?}",
            spec.k_values
        )));
    }
    let errors = simulate(spec)?;
    let t = paired_t_test(&errors.paired_diffs(0))?;
    let (input, _) = ConditionInput::from_problem(&spec.problem, &spec.schedule_su, &spec.schedule_bern, None);
    let theory_diff = condition_lhs_explicit(&input);
    let mc_diff = -t.mean;
    Ok(TheoryComparison {
        mc_diff,
        paired_std_error: t.std_error,
        theory_diff,
        consistent: (mc_diff - theory_diff).abs() <= 4.0 * t.std_error,
    })
}

pub const CSV_COLUMNS: [&str; 8] = [
    "k",
    "distribution",
    "mse",
    "std_error",
    "n_reps",
    "mean_diff",
    "t_stat",
    "p_value",
];

/// Writes the result table. `metadata` lines are emitted first, each
/// prefixed with `# `. Rows: one per (k, law), then one `paired` row per k.
pub fn write_csv<W: Write>(result: &ExperimentResult, metadata: &[String], mut w: W) -> std::io::Result<()> {
    for line in metadata {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for e in &result.estimates {
        writeln!(
            w,
            "{},{},{},{},{},,,",
            e.k, e.distribution, e.mse, e.std_error, e.n_reps
        )?;
    }
    for c in &result.comparisons {
        writeln!(
            w,
            "{},paired,,{},{},{},{},{}",
            c.k, c.std_error, c.n_pairs, c.mean_diff, c.t_stat, c.p_value
        )?;
    }
    Ok(())
}
