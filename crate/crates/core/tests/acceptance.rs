//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! ```text
//! cargo test -p spsa-perturb --test acceptance
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spsa_perturb::cli::{bundled_config, Table};
use spsa_perturb::experiments::{paired_t_test, run_experiment, simulate, write_csv, ExperimentResult};
use spsa_perturb::perturbations::{sample_moments, Fraction};
use spsa_perturb::spsa::{sp_gradient, spsa_run, GainSchedule, LossFunction, LossRegistry, ProblemConfig};
use spsa_perturb::theory::{condition_lhs_explicit, corollary3_lhs, mse_one_step_quadratic, ConditionInput};
use spsa_perturb::{DistributionKind, PerturbationDistribution};

type Outcome = std::result::Result<String, String>;

const SU: PerturbationDistribution = PerturbationDistribution::SEGMENTED_UNIFORM;
const BERN: PerturbationDistribution = PerturbationDistribution::BERNOULLI;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn time_limit(start: Instant, limit: Duration, what: &str) -> std::result::Result<(), String> {
    let elapsed = start.elapsed();
    if elapsed > limit {
        Err(format!("{what} took {elapsed:.1?}, limit {limit:.0?}"))
    } else {
        Ok(())
    }
}

fn registry() -> LossRegistry {
    LossRegistry::with_builtins()
}

fn criterion_moments() -> Outcome {
    let start = Instant::now();
    let expected = [
        (
            SU,
            [
                Fraction::new(0, 1),
                Fraction::new(0, 1),
                Fraction::new(100, 61),
                Fraction::new(100, 61),
            ],
        ),
        (
            BERN,
            [
                Fraction::new(0, 1),
                Fraction::new(0, 1),
                Fraction::new(1, 1),
                Fraction::new(1, 1),
            ],
        ),
    ];
    let mut worst = 0.0f64;
    for (dist, exact) in expected {
        ensure!(
            dist.exact_moments() == exact,
            "{dist}: exact moments {:?}",
            dist.exact_moments()
        );
        let analytic = dist.analytic_moments().table_row();
        for m in 0..4 {
            ensure!(
                analytic[m] == exact[m].to_f64(),
                "{dist}: analytic moment {m} = {}",
                analytic[m]
            );
        }
        let sampled = sample_moments(&dist, 1_000_000, &mut ChaCha8Rng::seed_from_u64(0x5eed));
        for m in 0..4 {
            let dev = (sampled.estimate[m] - analytic[m]).abs();
            let z = if sampled.std_error[m] > 0.0 {
                dev / sampled.std_error[m]
            } else if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            ensure!(
                z <= 4.0,
                "{dist}: moment {m} sampled {} vs {} ({z:.2} SE)",
                sampled.estimate[m],
                analytic[m]
            );
            worst = worst.max(z);
        }
    }
    time_limit(start, Duration::from_secs(5), "moments")?;
    Ok(format!("exact tables match, worst MC deviation {worst:.2} SE"))
}

fn criterion_condition_value() -> Outcome {
    let reg = registry();
    let cfg = bundled_config(Table::Table2);
    let problem = cfg.problem(&reg).map_err(|e| e.to_string())?;
    let (su, bern) = cfg.schedules().map_err(|e| e.to_string())?;
    let (input, _) = ConditionInput::from_problem(&problem, &su, &bern, None);
    let lhs = corollary3_lhs(&input).map_err(|e| e.to_string())?;
    ensure!(within(lhs, -0.0114, 1e-4), "corollary3_lhs = {lhs}");
    Ok(format!("corollary3_lhs = {lhs:.6}"))
}

fn random_quadratic(rng: &mut ChaCha8Rng, p: usize, sigma2: f64) -> ProblemConfig {
    let b: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let h: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| (0..p).map(|r| b[r][i] * b[r][j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 })
                .collect()
        })
        .collect();
    let center: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let theta0: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    ProblemConfig::new(
        LossFunction::quadratic("random", h, center.clone()),
        center,
        sigma2,
        theta0,
    )
    .unwrap()
}

fn bernoulli_enumeration(problem: &ProblemConfig, a0: f64, c0: f64) -> f64 {
    let p = problem.p();
    let mut total = 0.0;
    for mask in 0..1usize << p {
        let delta: Vec<f64> = (0..p).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let g = sp_gradient(problem, problem.theta0(), c0, &delta, 0.0, 0.0).unwrap();
        let det: f64 = (0..p)
            .map(|i| problem.theta0()[i] - a0 * g[i] - problem.theta_star()[i])
            .map(|x| x * x)
            .sum();
        let inv: f64 = delta.iter().map(|d| 1.0 / (d * d)).sum();
        total += det + a0 * a0 * 2.0 * problem.sigma2() / (4.0 * c0 * c0) * inv;
    }
    total / (1usize << p) as f64
}

fn criterion_oracle_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_identity = 0.0f64;
    for n in 0..1000 {
        let p = rng.random_range(1..=6);
        let sigma2 = rng.random_range(0.0..2.0);
        let problem = random_quadratic(&mut rng, p, sigma2);
        let (a_s, a_b) = (rng.random_range(0.0..0.1), rng.random_range(0.0..0.1));
        let (c_s, c_b) = (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
        let diff = mse_one_step_quadratic(&problem, a_s, c_s, &SU).map_err(|e| e.to_string())?
            - mse_one_step_quadratic(&problem, a_b, c_b, &BERN).map_err(|e| e.to_string())?;
        let input = ConditionInput {
            p,
            a0_su: a_s,
            a0_bern: a_b,
            c0_su: c_s,
            c0_bern: c_b,
            sigma2,
            grad: problem.loss().gradient(problem.theta0()),
            offset: (0..p).map(|i| problem.theta0()[i] - problem.theta_star()[i]).collect(),
            third_derivative_bound: None,
        };
        let lhs = condition_lhs_explicit(&input);
        let err = (diff - lhs).abs();
        ensure!(err <= 1e-12, "config {n} (p = {p}): mse diff {diff} vs lhs {lhs}");
        worst_identity = worst_identity.max(err);
    }
    let mut worst_enum = 0.0f64;
    for p in 1..=4 {
        for _ in 0..50 {
            let sigma2 = rng.random_range(0.0..2.0);
            let problem = random_quadratic(&mut rng, p, sigma2);
            let (a0, c0) = (rng.random_range(0.0..0.1), rng.random_range(0.1..1.0));
            let closed = mse_one_step_quadratic(&problem, a0, c0, &BERN).map_err(|e| e.to_string())?;
            let err = (closed - bernoulli_enumeration(&problem, a0, c0)).abs();
            ensure!(err <= 1e-12, "p = {p}: enumeration differs by {err:e}");
            worst_enum = worst_enum.max(err);
        }
    }
    time_limit(start, Duration::from_secs(10), "oracle identity")?;
    Ok(format!(
        "1000 configs max |diff| {worst_identity:.1e}, enumeration p<=4 max {worst_enum:.1e}"
    ))
}

/// Table-2 run at 10⁶ replicates over k ∈ {1, 5, 10}, shared by criteria 4
/// and 5.
fn table2_short() -> std::result::Result<ExperimentResult, String> {
    let mut cfg = bundled_config(Table::Table2);
    cfg.k_values = vec![1, 5, 10];
    cfg.n_reps = 1_000_000;
    let spec = cfg.experiment_spec(&registry()).map_err(|e| e.to_string())?;
    run_experiment(&spec).map_err(|e| e.to_string())
}

fn criterion_table2_k1(result: &ExperimentResult) -> Outcome {
    let b = result
        .estimate(DistributionKind::Bernoulli, 1)
        .ok_or("missing k=1 Bernoulli")?;
    let s = result
        .estimate(DistributionKind::SegmentedUniform, 1)
        .ok_or("missing k=1 SU")?;
    let c = result.comparison(1).ok_or("missing k=1 comparison")?;
    ensure!(
        within(b.mse, 0.1913, 0.005),
        "MSE_B = {:.4} outside 0.1913 +/- 0.005",
        b.mse
    );
    ensure!(
        within(s.mse, 0.1798, 0.005),
        "MSE_SU = {:.4} outside 0.1798 +/- 0.005",
        s.mse
    );
    let mc_diff = -c.mean_diff;
    ensure!(
        within(mc_diff, -0.0114, 4.0 * c.std_error),
        "mc_diff = {mc_diff:.5} not within 4 SE ({:.1e}) of -0.0114",
        c.std_error
    );
    Ok(format!(
        "MSE_B = {:.4}, MSE_SU = {:.4}, mc_diff = {mc_diff:.5} (SE {:.1e})",
        b.mse, s.mse, c.std_error
    ))
}

fn criterion_table2_ordering(short: &ExperimentResult) -> Outcome {
    let mut parts = Vec::new();
    for k in [1, 5, 10] {
        let c = short.comparison(k).ok_or(format!("missing k={k}"))?;
        let b = short.estimate(DistributionKind::Bernoulli, k).unwrap().mse;
        let s = short.estimate(DistributionKind::SegmentedUniform, k).unwrap().mse;
        ensure!(
            s < b && c.p_value < 1e-6,
            "k={k}: MSE_B {b:.4}, MSE_SU {s:.4}, p = {:e}",
            c.p_value
        );
        parts.push(format!("k={k} p={:.1e}", c.p_value));
    }
    let mut cfg = bundled_config(Table::Table2);
    cfg.k_values = vec![1000];
    cfg.n_reps = 10_000;
    let spec = cfg.experiment_spec(&registry()).map_err(|e| e.to_string())?;
    let long = run_experiment(&spec).map_err(|e| e.to_string())?;
    let c = long.comparison(1000).unwrap();
    let b = long.estimate(DistributionKind::Bernoulli, 1000).unwrap().mse;
    let s = long.estimate(DistributionKind::SegmentedUniform, 1000).unwrap().mse;
    ensure!(
        b < s && c.p_value > 1.0 - 1e-6,
        "k=1000: MSE_B {b:.4}, MSE_SU {s:.4}, p = {}",
        c.p_value
    );
    parts.push(format!("k=1000 p={:.6}", c.p_value));
    Ok(parts.join(", "))
}

fn criterion_table3() -> Outcome {
    let mut cfg = bundled_config(Table::Table3);
    cfg.n_reps = 100_000;
    cfg.k_values = vec![1, 2, 5, 1000];
    let spec = cfg.experiment_spec(&registry()).map_err(|e| e.to_string())?;
    let result = run_experiment(&spec).map_err(|e| e.to_string())?;
    let mse = |kind, k| result.estimate(kind, k).unwrap().mse;
    let (b1, s1) = (
        mse(DistributionKind::Bernoulli, 1),
        mse(DistributionKind::SegmentedUniform, 1),
    );
    ensure!(within(b1, 1.7891, 0.05), "k=1 MSE_B = {b1:.4} outside 1.7891 +/- 0.05");
    ensure!(within(s1, 1.5255, 0.05), "k=1 MSE_SU = {s1:.4} outside 1.5255 +/- 0.05");
    for k in [1, 2] {
        let (b, s) = (
            mse(DistributionKind::Bernoulli, k),
            mse(DistributionKind::SegmentedUniform, k),
        );
        ensure!(s < b, "k={k}: expected SU better, MSE_B {b:.4} MSE_SU {s:.4}");
    }
    for k in [5, 1000] {
        let (b, s) = (
            mse(DistributionKind::Bernoulli, k),
            mse(DistributionKind::SegmentedUniform, k),
        );
        ensure!(b < s, "k={k}: expected Bernoulli better, MSE_B {b:.4} MSE_SU {s:.4}");
    }
    Ok(format!(
        "k=1 MSE_B = {b1:.4}, MSE_SU = {s1:.4}; orderings SU,SU,B,B hold"
    ))
}

/// Exact integral of the piecewise-constant SU density.
fn su_density_mass() -> f64 {
    let (a, b) = (
        spsa_perturb::perturbations::su_inner(),
        spsa_perturb::perturbations::su_outer(),
    );
    let mid = 0.5 * (a + b);
    2.0 * SU.density(mid).unwrap() * (b - a)
}

fn criterion_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // perturbations
    for _ in 0..10_000 {
        let u: f64 = rng.random();
        let x = SU.inverse_cdf(u).unwrap();
        ensure!(
            (SU.cdf(x).unwrap() - u).abs() <= 1e-12,
            "inverse-CDF round trip at u = {u}"
        );
    }
    ensure!(
        (su_density_mass() - 1.0).abs() <= 1e-9,
        "SU density integrates to {}",
        su_density_mass()
    );
    ensure!(
        (SU.cdf(0.0).unwrap() - 0.5).abs() <= 1e-15,
        "SU cdf(0) = {}",
        SU.cdf(0.0).unwrap()
    );
    for _ in 0..1000 {
        let x = rng.random_range(-2.0..2.0);
        ensure!(
            SU.density(x).unwrap() == SU.density(-x).unwrap(),
            "density asymmetric at {x}"
        );
        ensure!(
            (SU.cdf(x).unwrap() + SU.cdf(-x).unwrap() - 1.0).abs() <= 1e-12,
            "cdf asymmetric at {x}"
        );
    }

    // spsa core
    let q = ProblemConfig::new(LossFunction::quadratic_4_1(), vec![0.0, 0.0], 1.0, vec![0.3, 0.3]).unwrap();
    let sched = GainSchedule::new(0.05, 0.2).unwrap();
    for dist in [SU, BERN] {
        let a = spsa_run(&q, &sched, &dist, 50, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = spsa_run(&q, &sched, &dist, 50, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        ensure!(a == b, "{dist}: same seed gave different trajectories");
    }
    for p in [1usize, 2, 7] {
        let calls = Arc::new(AtomicU64::new(0));
        let counter = Arc::clone(&calls);
        let loss = LossFunction::new("counted", p, move |t| {
            counter.fetch_add(1, Ordering::Relaxed);
            t.iter().map(|x| x * x).sum()
        });
        let cq = ProblemConfig::new(loss, vec![0.0; p], 0.5, vec![1.0; p]).unwrap();
        spsa_run(&cq, &sched, &SU, 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        ensure!(
            calls.load(Ordering::Relaxed) == 80,
            "p={p}: {} evaluations for 40 iterations",
            calls.load(Ordering::Relaxed)
        );
    }
    let q0 = ProblemConfig::new(LossFunction::quadratic_4_1(), vec![0.0, 0.0], 0.0, vec![0.3, 0.3]).unwrap();
    let theta = [0.3, -0.7];
    let truth = q0.loss().gradient(&theta);
    for dist in [SU, BERN] {
        let n = 1_000_000;
        let mut r = ChaCha8Rng::seed_from_u64(404);
        let (mut sum, mut sq, mut delta) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        for _ in 0..n {
            dist.sample_vector(&mut r, &mut delta);
            let g = sp_gradient(&q0, &theta, 0.1, &delta, 0.0, 0.0).unwrap();
            for i in 0..2 {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
            ensure!(
                (mean - truth[i]).abs() <= 4.0 * se,
                "{dist}: gradient component {i} biased ({mean} vs {})",
                truth[i]
            );
        }
    }
    for loss in [LossFunction::quadratic_4_1(), LossFunction::quartic_4_2()] {
        for _ in 0..100 {
            let t = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (an, fd) = (loss.gradient(&t), loss.fd_gradient(&t, 1e-5));
            for i in 0..2 {
                ensure!(
                    (an[i] - fd[i]).abs() <= 1e-6,
                    "{}: gradient mismatch at {t:?}",
                    loss.name()
                );
            }
        }
    }

    // theory
    for _ in 0..1000 {
        let input = ConditionInput {
            p: 2,
            a0_su: rng.random_range(0.0..0.2),
            a0_bern: rng.random_range(0.0..0.2),
            c0_su: rng.random_range(0.05..1.0),
            c0_bern: rng.random_range(0.05..1.0),
            sigma2: rng.random_range(0.0..2.0),
            grad: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            offset: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            third_derivative_bound: None,
        };
        let (g, s) = (condition_lhs_explicit(&input), corollary3_lhs(&input).unwrap());
        ensure!((g - s).abs() <= 1e-12, "specialization identity: {g} vs {s}");
    }

    // experiments
    let mut cfg = bundled_config(Table::Table2);
    cfg.k_values = vec![1, 5, 10];
    cfg.n_reps = 5_000;
    let spec = cfg.experiment_spec(&registry()).map_err(|e| e.to_string())?;
    let csv = || {
        let mut buf = Vec::new();
        write_csv(&run_experiment(&spec).unwrap(), &[cfg.to_json_compact()], &mut buf).unwrap();
        buf
    };
    ensure!(csv() == csv(), "CSV reruns differ");
    let errs = simulate(&spec).map_err(|e| e.to_string())?;
    ensure!(paired_t_test(&errs.paired_diffs(0)).is_ok(), "paired t-test failed");

    Ok("perturbations, spsa core, theory and experiments invariants hold".into())
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, start: Instant, outcome: Outcome) {
    let elapsed = start.elapsed();
    match outcome {
        Ok(detail) => {
            println!("[PASS] criterion {n}: {name}: {detail} [{elapsed:.1?}]");
            results.push(true);
        }
        Err(why) => {
            println!("[FAIL] criterion {n}: {name}: {why} [{elapsed:.1?}]");
            results.push(false);
        }
    }
}

fn main() -> ExitCode {
    let mut results = Vec::new();

    let t = Instant::now();
    report(&mut results, 1, "perturbation moments", t, criterion_moments());
    let t = Instant::now();
    report(
        &mut results,
        2,
        "condition value on the quadratic example",
        t,
        criterion_condition_value(),
    );
    let t = Instant::now();
    report(
        &mut results,
        3,
        "one-step MSE oracle identity",
        t,
        criterion_oracle_identity(),
    );

    let t = Instant::now();
    let short = table2_short();
    match &short {
        Ok(r) => report(
            &mut results,
            4,
            "quadratic example, k=1 MSEs",
            t,
            criterion_table2_k1(r),
        ),
        Err(e) => report(&mut results, 4, "quadratic example, k=1 MSEs", t, Err(e.clone())),
    }
    let t = Instant::now();
    match &short {
        Ok(r) => report(
            &mut results,
            5,
            "quadratic example, orderings",
            t,
            criterion_table2_ordering(r),
        ),
        Err(e) => report(&mut results, 5, "quadratic example, orderings", t, Err(e.clone())),
    }

    let t = Instant::now();
    report(
        &mut results,
        6,
        "quartic example, k=1 MSEs and orderings",
        t,
        criterion_table3(),
    );
    let t = Instant::now();
    report(&mut results, 7, "property suites", t, criterion_properties());

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
