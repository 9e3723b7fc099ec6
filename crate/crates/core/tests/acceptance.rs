//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `EXPECTED_RED` are known not to be met by this implementation;
//! they are reported but do not fail the run. Any other failure exits non-zero, and so
//! does an expected-red criterion that starts passing (so the list stays truthful).

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gauss_hermite;
use givehr::baselines::Estimator;
use givehr::benchmark::{run_replications, BenchmarkConfig, Replications};
use givehr::inference::SeMethod;
use givehr::numeric::norm_cdf;
use givehr::observation::probit_kernel;
use givehr::outcome::oracle::{compensated_process, PosteriorMethod};
use givehr::simulate::{generate, interaction_spec, thinning, Scenario, ScenarioSpec};
use givehr::visiting::eb_posterior;

const EXPECTED_RED: &[usize] = &[6];
const SEED: u64 = 20_240_601;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(id: usize, pass: bool, detail: String) -> Outcome {
    println!(
        "criterion {id:>2}: {} | {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    Outcome { id, pass, detail }
}

fn probit_conjugacy() -> Outcome {
    let start = Instant::now();
    let gh = gauss_hermite::rule(64);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = rng.random_range(-2.0..2.0);
        let b = rng.random_range(-1.5..1.5);
        let d = rng.random_range(1.0..2.0);
        let mu = rng.random_range(-1.0..1.0);
        let var = rng.random_range(0.01..1.0);
        let kern = probit_kernel(a, b, d, mu, var);
        let e_phi = gh.normal_expectation(mu, var, |u| norm_cdf((a + b * u) / d));
        let e_uphi = gh.normal_expectation(mu, var, |u| u * norm_cdf((a + b * u) / d));
        worst = worst
            .max((kern.mean_prob - e_phi).abs())
            .max((norm_cdf(kern.k) - e_phi).abs())
            .max((kern.ratio - e_uphi / e_phi).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-8 && secs < 5.0,
        format!(
            "max |closed form - 64-pt Gauss-Hermite| = {worst:.2e} (< 1e-8), {secs:.2} s (< 5 s)"
        ),
    )
}

fn log_posterior(u: f64, m: f64, nu: f64, sigma: f64, mu0: f64) -> f64 {
    m * (mu0 + sigma * u) - nu * (mu0 + sigma * u).exp() - 0.5 * u * u
}

fn grid_argmax(lo: f64, hi: f64, points: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let h = (hi - lo) / (points - 1) as f64;
    let (mut best, mut arg) = (f64::NEG_INFINITY, lo);
    for k in 0..points {
        let u = lo + k as f64 * h;
        let v = f(u);
        if v > best {
            best = v;
            arg = u;
        }
    }
    (arg, h)
}

fn laplace_mode() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let mut worst: f64 = 0.0;
    let mut var_ok = true;
    for _ in 0..200 {
        let m = rng.random_range(0..=30usize);
        let nu = rng.random_range(0.05..20.0);
        let sigma = rng.random_range(0.1..1.5);
        let mu0 = -sigma * sigma / 2.0;
        let post = eb_posterior(m, nu, sigma, mu0);
        let f = |u: f64| log_posterior(u, m as f64, nu, sigma, mu0);
        let span = sigma * m as f64 + sigma * nu * mu0.exp() + 1.0;
        let (coarse, h) = grid_argmax(-span, span, 1_000_000, f);
        let (fine, _) = grid_argmax(coarse - 2.0 * h, coarse + 2.0 * h, 1_000_000, f);
        worst = worst.max((post.mu_u - fine).abs());
        var_ok &= post.s_u_sq > 0.0 && post.s_u_sq <= 1.0;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        worst < 1e-4 && var_ok && secs < 10.0,
        format!("max |Newton mode - grid argmax| = {worst:.2e} (< 1e-4), s2_U in (0,1]: {var_ok}, {secs:.2} s (< 10 s)"),
    )
}

/// Kolmogorov limiting distribution `P(K > λ)`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            let sign = if k as i64 % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

fn order_statistics() -> Outcome {
    // Intensity 0.1 t on (0, 10]; given m = 5 the times are iid with CDF t²/100.
    let (end, m_target, draws) = (10.0, 5usize, 10_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut times = Vec::with_capacity(draws * m_target);
    let mut accepted = 0;
    while accepted < draws {
        let path = thinning(&mut rng, end, 1.0, |t| 0.1 * t);
        if path.len() == m_target {
            times.extend(path);
            accepted += 1;
        }
    }
    times.sort_by(f64::total_cmp);
    let n = times.len() as f64;
    let d = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let f = (t / end).powi(2);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let sqrt_n = n.sqrt();
    let p = kolmogorov_sf((sqrt_n + 0.12 + 0.11 / sqrt_n) * d);
    report(
        3,
        p > 0.01,
        format!("KS D = {d:.4} over {draws} conditioned paths, p = {p:.3} (> 0.01)"),
    )
}

fn compensated_mean_zero() -> Outcome {
    let spec = ScenarioSpec::new(Scenario::A4, 100_000, SEED + 3);
    let (cohort, truth) = generate(&spec).expect("generate");
    let oracle = truth.oracle_truth().expect("A4 oracle");
    let summarize = |method| {
        let vals: Vec<f64> = (0..cohort.n())
            .map(|i| compensated_process(&cohort, i, &oracle, method).expect("oracle"))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (mean, sd / n.sqrt())
    };
    let (mean, sem) = summarize(PosteriorMethod::Exact);
    let (lmean, lsem) = summarize(PosteriorMethod::Laplace);
    report(
        4,
        mean.abs() < 3.0 * sem,
        format!(
            "exact posterior: mean M = {mean:.4}, SEM = {sem:.4} (|mean| < 3 SEM); Laplace: {lmean:.4} (SEM {lsem:.4})"
        ),
    )
}

fn run(scenario: Scenario, estimators: &str, reps: usize, se: SeMethod) -> Replications {
    let mut cfg = BenchmarkConfig::new(
        scenario,
        1000,
        Estimator::parse_list(estimators).unwrap(),
        reps,
        SEED,
    );
    cfg.se = se;
    run_replications(&cfg).expect("replications")
}

fn a4_reproduction(a4: &Replications) -> Outcome {
    let row = a4.table.row("givehr", "F").unwrap();
    report(
        5,
        row.bias.abs() <= 0.05 && (0.17..=0.27).contains(&row.rmse) && row.failed == 0,
        format!(
            "A.4 GIVEHR beta_F over {} reps: bias = {:.4} (|.| <= 0.05), RMSE = {:.4} (in [0.17, 0.27]), failed = {}",
            row.reps, row.bias, row.rmse, row.failed
        ),
    )
}

fn b1_contrast(b1: &Replications) -> Outcome {
    let g = b1.table.row("givehr", "F").unwrap();
    let iirr = b1.table.row("iirr", "F").unwrap();
    let lmm = b1.table.row("lmm", "F").unwrap();
    let pass = g.bias.abs() <= 0.05
        && g.rmse <= 0.25
        && (0.45..=0.57).contains(&iirr.bias)
        && (0.14..=0.23).contains(&lmm.bias);
    report(
        6,
        pass,
        format!(
            "B.1 beta_F: GIVEHR bias {:.4} (|.| <= 0.05) RMSE {:.4} (<= 0.25); IIRR bias {:.4} (in [0.45, 0.57]); LMM bias {:.4} (in [0.14, 0.23])",
            g.bias, g.rmse, iirr.bias, lmm.bias
        ),
    )
}

fn a2_measured(a2: &Replications) -> Outcome {
    let g = a2.table.row("givehr", "F").unwrap();
    let lmm = a2.table.row("lmm", "F").unwrap();
    let pass = lmm.bias.abs() <= 0.03 && (0.08..=0.13).contains(&lmm.rmse) && g.bias.abs() <= 0.03;
    report(
        7,
        pass,
        format!(
            "A.2 beta_F: LMM bias {:.4} (|.| <= 0.03) RMSE {:.4} (in [0.08, 0.13]); GIVEHR bias {:.4} (|.| <= 0.03)",
            lmm.bias, lmm.rmse, g.bias
        ),
    )
}

fn sandwich_calibration(a4: &Replications) -> Outcome {
    let f = a4.table.row("givehr", "F").unwrap();
    let x = a4.table.row("givehr", "X").unwrap();
    let rf = f.mean_se.unwrap() / f.empirical_se;
    let rx = x.mean_se.unwrap() / x.empirical_se;
    let near = |v: f64, target: f64| (v / target - 1.0).abs() <= 0.2;
    let pass = (1.00..=1.16).contains(&rf)
        && (0.96..=1.12).contains(&rx)
        && near(f.empirical_se, 0.212)
        && near(x.empirical_se, 0.128);
    report(
        8,
        pass,
        format!(
            "A.4 sandwich/empirical SE: F {rf:.3} (in [1.00, 1.16]), X {rx:.3} (in [0.96, 1.12]); empirical SE F {:.4} (0.212 +/- 20%), X {:.4} (0.128 +/- 20%)",
            f.empirical_se, x.empirical_se
        ),
    )
}

fn identities(runs: &[&Replications]) -> Outcome {
    let mut eq: f64 = 0.0;
    let mut cen: f64 = 0.0;
    let mut fits = 0;
    for run in runs {
        for rec in run.records.iter().filter(|r| r.estimator == "givehr") {
            if let (Some(e), Some(c)) = (rec.equation_residual, rec.centering_residual) {
                eq = eq.max(e);
                cen = cen.max(c);
                fits += 1;
            }
        }
    }
    report(
        9,
        fits > 0 && eq < 1e-8 && cen < 1e-10,
        format!("over {fits} GIVEHR fits: max estimating-equation residual {eq:.2e} (< 1e-8), max centering residual {cen:.2e} (< 1e-10)"),
    )
}

fn absorption() -> (Outcome, Replications, Replications) {
    let a = 0.5;
    let theta0 = 0.5;
    let mut base = BenchmarkConfig::new(Scenario::A4, 1000, vec![Estimator::Givehr], 100, SEED + 4);
    base.roles = Some(interaction_spec());
    let mut shifted = base.clone();
    shifted.scenario.latent_slope = a;
    let r0 = run_replications(&base).expect("a = 0");
    let r1 = run_replications(&shifted).expect("a = 0.5");
    let paired = |k: usize| -> (f64, f64) {
        let d: Vec<f64> = r0
            .records
            .iter()
            .zip(&r1.records)
            .filter_map(|(x, y)| Some(y.estimates[k]? - x.estimates[k]?))
            .collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (mean, sd / n.sqrt())
    };
    let (dx, sx) = paired(1);
    let (df, sf) = paired(0);
    let predicted = theta0 * a;
    let failures = r0
        .table
        .rows
        .iter()
        .chain(&r1.table.rows)
        .map(|r| r.failed)
        .sum::<usize>();
    let pass = (dx - predicted).abs() < 3.0 * sx && df.abs() < 3.0 * sf && failures == 0;
    let out = report(
        10,
        pass,
        format!(
            "A.4 with E(U|X) = 0.5 X, F*X in roles, 100 paired reps: shift in beta_X {dx:.4} (predicted {predicted:.3}, MC SE {sx:.4}); shift in beta_F {df:.4} (MC SE {sf:.4}); failed fits {failures}"
        ),
    );
    (out, r0, r1)
}

fn main() {
    let start = Instant::now();
    let mut results = vec![
        probit_conjugacy(),
        laplace_mode(),
        order_statistics(),
        compensated_mean_zero(),
    ];
    let a4 = run(Scenario::A4, "givehr", 200, SeMethod::Sandwich);
    results.push(a4_reproduction(&a4));
    let b1 = run(Scenario::B1, "givehr,lmm,iirr", 200, SeMethod::None);
    results.push(b1_contrast(&b1));
    let a2 = run(Scenario::A2, "givehr,lmm", 200, SeMethod::None);
    results.push(a2_measured(&a2));
    results.push(sandwich_calibration(&a4));
    let (abs, r0, r1) = absorption();
    results.push(identities(&[&a4, &b1, &a2, &r0, &r1]));
    results.push(abs);
    results.sort_by_key(|o| o.id);

    let passed = results.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass ({:.1} s)",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    let mut bad = Vec::new();
    for o in &results {
        let expected_red = EXPECTED_RED.contains(&o.id);
        if !o.pass && !expected_red {
            bad.push(format!("criterion {} regressed: {}", o.id, o.detail));
        }
        if o.pass && expected_red {
            bad.push(format!(
                "criterion {} now passes; remove it from EXPECTED_RED",
                o.id
            ));
        }
    }
    if !bad.is_empty() {
        for b in &bad {
            eprintln!("{b}");
        }
        std::process::exit(1);
    }
}
