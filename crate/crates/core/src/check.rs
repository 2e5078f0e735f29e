//! Built-in invariant checks, exposed through the `check` CLI subcommand.
//!
//! Each check measures an error against a pinned tolerance and reports one
//! line. The joint-advantage path can be swapped for a deliberately corrupted
//! one (`Mutation::JointAdvantageScale`) to verify that the suite actually
//! detects a broken build.

use rand::Rng;

use crate::advantage::{
    group_normalized_advantage, joint_dual_group_advantage, kl_penalty, mean_and_population_std,
    objective_gradient_coefficients, objective_value, AdvantageMatrix, GroupConfig, RewardMatrix,
    SampleLikelihoods,
};
use crate::error::Result;
use crate::mat::Mat;
use crate::rng::substream;
use crate::variants::{deterministic_variant_indices, softmax_probabilities};

/// Outcome of one invariant check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    /// Worst measured error (check-specific meaning).
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &'static str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }

    /// One report line: `PASS name measured=... tol=... (detail)`.
    pub fn line(&self) -> String {
        format!(
            "{} {} measured={:.3e} tol={:.1e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

/// Deliberate corruptions for self-testing the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Scale joint advantages by 1 + 1e-3, breaking flattening equivalence.
    JointAdvantageScale,
}

type JointFn<'a> = &'a dyn Fn(&RewardMatrix, f64) -> Result<AdvantageMatrix>;

fn corrupted_joint(rewards: &RewardMatrix, guard: f64) -> Result<AdvantageMatrix> {
    let mut adv = joint_dual_group_advantage(rewards, guard)?;
    for v in adv.values.as_mut_slice() {
        *v *= 1.0 + 1e-3;
    }
    Ok(adv)
}

fn check_flattening_equivalence(seed: u64, joint: JointFn) -> CheckReport {
    let mut rng = substream(seed, &[101]);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for _ in 0..200 {
        let g = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        if g * m < 2 {
            continue;
        }
        let rewards: Vec<f64> = (0..g * m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let matrix = RewardMatrix::from_flat(g, m, rewards.clone()).unwrap();
        let joint_adv = joint(&matrix, 1e-6).unwrap();
        let (flat, _) = group_normalized_advantage(&rewards, 1e-6).unwrap();
        for (a, b) in joint_adv.values.as_slice().iter().zip(&flat) {
            worst = worst.max((a - b).abs());
        }
        cases += 1;
    }
    CheckReport::new(
        "flattening_equivalence",
        worst,
        1e-12,
        format!("{cases} random G x M pools"),
    )
}

fn check_normalization(seed: u64) -> CheckReport {
    let mut rng = substream(seed, &[102]);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(2..=36);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (adv, flag) = group_normalized_advantage(&rewards, 1e-6).unwrap();
        if flag {
            continue;
        }
        let (mean, std) = mean_and_population_std(&adv);
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    CheckReport::new(
        "advantage_normalization",
        worst,
        1e-9,
        "mean 0 / population std 1 on unguarded groups".into(),
    )
}

fn check_guard(seed: u64) -> CheckReport {
    let mut rng = substream(seed, &[103]);
    let mut failures = 0usize;
    for _ in 0..200 {
        let n = rng.gen_range(2..=16);
        let c: f64 = rng.gen_range(-2.0..2.0);
        let (adv, flag) = group_normalized_advantage(&vec![c; n], 1e-6).unwrap();
        if !flag || adv.iter().any(|a| *a != 0.0) {
            failures += 1;
        }
    }
    CheckReport::new(
        "zero_variance_guard",
        failures as f64,
        0.0,
        "uniform groups must zero out with the flag set".into(),
    )
}

/// Random likelihood/advantage instances that stay clear of the clip kink so
/// central differences are valid.
fn random_instance(
    rng: &mut rand_chacha::ChaCha8Rng,
    beta: f64,
) -> (SampleLikelihoods, AdvantageMatrix, GroupConfig) {
    let g = rng.gen_range(1..=4);
    let m = rng.gen_range(1..=3);
    let config = GroupConfig {
        num_generations: g,
        num_variants: m,
        kl_coeff: beta,
        ..GroupConfig::default()
    };
    loop {
        let mut current = Mat::zeros(g, m);
        let mut old = Mat::zeros(g, m);
        let mut reference = Mat::zeros(g, m);
        let mut advantages = Mat::zeros(g, m);
        let mut ok = true;
        for i in 0..g {
            for j in 0..m {
                let lp_old: f64 = rng.gen_range(-3.0..-0.2);
                let delta: f64 = rng.gen_range(-0.6..0.6);
                let ratio = delta.exp();
                // Keep every sample at least 2e-2 away from the clip kink.
                if (ratio - (1.0 - config.clip_epsilon)).abs() < 2e-2
                    || (ratio - (1.0 + config.clip_epsilon)).abs() < 2e-2
                {
                    ok = false;
                }
                let a: f64 = rng.gen_range(0.2..1.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                current.set(i, j, lp_old + delta);
                old.set(i, j, lp_old);
                reference.set(i, j, lp_old + rng.gen_range(-0.5..0.5));
                advantages.set(i, j, a);
            }
        }
        if !ok {
            continue;
        }
        let likelihoods = SampleLikelihoods::new(current, old, reference).unwrap();
        let adv = AdvantageMatrix {
            values: advantages,
            zero_advantage_flag: false,
        };
        return (likelihoods, adv, config);
    }
}

fn check_gradient_fd(seed: u64) -> CheckReport {
    let mut rng = substream(seed, &[104]);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut instances = 0usize;
    for trial in 0..12 {
        let beta = if trial % 2 == 0 { 0.0 } else { 0.04 };
        let (likelihoods, adv, config) = random_instance(&mut rng, beta);
        let coeffs = objective_gradient_coefficients(&likelihoods, &adv, &config).unwrap();
        for i in 0..likelihoods.generations() {
            for j in 0..likelihoods.variants() {
                let mut plus = likelihoods.clone();
                plus.logprob_current.set(i, j, plus.logprob_current.get(i, j) + h);
                let mut minus = likelihoods.clone();
                minus
                    .logprob_current
                    .set(i, j, minus.logprob_current.get(i, j) - h);
                let fd = (objective_value(&plus, &adv, &config).unwrap()
                    - objective_value(&minus, &adv, &config).unwrap())
                    / (2.0 * h);
                let analytic = coeffs.get(i, j);
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                worst = worst.max((fd - analytic).abs() / denom);
            }
        }
        instances += 1;
    }
    CheckReport::new(
        "objective_gradient_fd",
        worst,
        1e-4,
        format!("{instances} instances, beta in {{0, 0.04}}, h = 1e-5"),
    )
}

fn check_softmax_sampling(seed: u64) -> CheckReport {
    let mut worst_se = 0.0f64;
    for case in 0..4u64 {
        let mut rng = substream(seed, &[105, case]);
        let n = rng.gen_range(2..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = rng.gen_range(0.2..1.0);
        let probs = softmax_probabilities(&scores, tau).unwrap();
        let draws = 50_000usize;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[crate::variants::sample_segment_frame(&scores, tau, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let se = (p * (1.0 - p) / draws as f64).sqrt().max(1e-12);
            worst_se = worst_se.max(((*c as f64 / draws as f64) - p).abs() / se);
        }
    }
    CheckReport::new(
        "softmax_sampling_frequency",
        worst_se,
        3.0,
        "empirical frequencies within 3 binomial standard errors".into(),
    )
}

fn check_kl_nonnegative(seed: u64) -> CheckReport {
    let mut rng = substream(seed, &[106]);
    let mut min = f64::INFINITY;
    for _ in 0..500 {
        let cur = rng.gen_range(-5.0..0.0);
        let reference = rng.gen_range(-5.0..0.0);
        min = min.min(kl_penalty(cur, reference).unwrap());
    }
    let zero = kl_penalty(-1.2, -1.2).unwrap();
    CheckReport::new(
        "kl_nonnegativity",
        (-min).max(zero.abs()),
        0.0,
        "k3 >= 0, = 0 at identical policies".into(),
    )
}

fn check_deterministic_coverage(_seed: u64) -> CheckReport {
    let mut failures = 0usize;
    for m in 1..=4usize {
        let budget = 16usize;
        let f = budget * m;
        let mut seen = vec![0usize; f];
        for i in 0..m {
            let v = deterministic_variant_indices(f, budget, m, i).unwrap();
            for idx in v.frame_indices {
                seen[idx] += 1;
            }
        }
        if seen.iter().any(|c| *c != 1) {
            failures += 1;
        }
    }
    CheckReport::new(
        "deterministic_coverage",
        failures as f64,
        0.0,
        "staggered variants tile the video exactly once".into(),
    )
}

/// Run every check with an optional deliberate corruption.
pub fn run_checks(seed: u64, mutation: Option<Mutation>) -> Vec<CheckReport> {
    let joint: JointFn = match mutation {
        Some(Mutation::JointAdvantageScale) => &corrupted_joint,
        None => &|rewards, guard| joint_dual_group_advantage(rewards, guard),
    };
    vec![
        check_flattening_equivalence(seed, joint),
        check_normalization(seed),
        check_guard(seed),
        check_gradient_fd(seed),
        check_softmax_sampling(seed),
        check_kl_nonnegative(seed),
        check_deterministic_coverage(seed),
    ]
}
