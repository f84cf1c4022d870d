//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; run with
//! `cargo test --release --test acceptance`.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use nested_hmm::chain::{build_tridiagonal, compose_augmented, pair_emission_vector};
use nested_hmm::em::{cluster_loglik, fit, pairwise_loglik, run_em, solve_tridiagonal_rho, EmConfig, FitResult};
use nested_hmm::forward::forward_loglik;
use nested_hmm::inference::{cluster_scores, sandwich, select_grid, InferenceReport};
use nested_hmm::io::grid_csv;
use nested_hmm::model::{
    flatten_parameters, unflatten_parameters, LagHandling, MeasurementFamily, ModelSpec, PanelDataset, ParameterSet,
    TransitionConstraint,
};
use nested_hmm::simulate::{simulate, CovariateColumn, CovariateGenerator, SimDesign};
use rand::Rng;

const FORWARD_TOL: f64 = 1e-10;
const EXACT_TOL: f64 = 1e-10;
const NORMALIZATION_TOL: f64 = 1e-10;
const ASCENT_TOL: f64 = 1e-10;
const SCORE_REL_TOL: f64 = 1e-5;
const SCORE_STEP: f64 = 1e-5;
const RHO_GRID_STEP: f64 = 1e-6;
const RHO_TOL: f64 = 1e-6;
const RECOVERY_SE: f64 = 3.0;
const RECOVERY_SHARE: f64 = 0.90;
const RECOVERY_SEEDS: [u64; 3] = [101, 202, 303];
const FIT_MINUTES: f64 = 10.0;
const SELECTION_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
const SELECTION_HITS: usize = 3;
const SYMMETRY_TOL: f64 = 1e-8;
const PENALTY_REL_TOL: f64 = 0.25;

/// Prints a criterion line straight to stdout so it shows without
/// `--nocapture`, then fails the test if the criterion failed.
fn report(criterion: u32, pass: bool, detail: String) {
    let line = format!("criterion {criterion}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn trace_ascends(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - ASCENT_TOL)
}

#[test]
fn criterion_01_forward_matches_path_enumeration() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let s = spec(r.gen_range(1..=2), r.gen_range(1..=2));
        let theta = random_theta(&s, &mut r);
        let t_len = r.gen_range(2..=4);
        let data = random_panel(&s, &[2], t_len, &mut r);
        let c = &data.clusters[0];
        let chain = compose_augmented(&theta.lambda, &theta.cluster_transition, &theta.pi, &theta.unit_transition).unwrap();
        let emissions: Vec<Vec<f64>> =
            (0..t_len).map(|t| pair_emission_vector(t, c, &c.units[0], Some(&c.units[1]), &theta, &s)).collect();
        let got = forward_loglik(&chain, &emissions).unwrap();
        let want = brute_pair_loglik(c, &c.units[0], &c.units[1], &theta, &s, t_len);
        worst = worst.max((got - want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    report(1, worst < FORWARD_TOL && secs < 10.0, format!("max |diff| {worst:.2e}, {secs:.2}s"));
}

#[test]
fn criterion_02_pairwise_is_exact_for_clusters_of_two() {
    let mut r = rng(2);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let mut s = spec(r.gen_range(1..=2), r.gen_range(1..=2));
        s.unit_covariates = vec!["x".into()];
        s.cluster_covariates = vec!["z".into()];
        let theta = random_theta(&s, &mut r);
        let t_len = r.gen_range(2..=3);
        let data = random_panel(&s, &[2, 2, 2], t_len, &mut r);
        let want: f64 = data.clusters.iter().map(|c| brute_cluster_loglik(c, &theta, &s, t_len)).sum();
        let got = pairwise_loglik(&data, &s, &theta).unwrap();
        worst = worst.max((got - want).abs());
    }
    report(2, worst < EXACT_TOL, format!("max |diff| {worst:.2e} over 20 datasets"));
}

#[test]
fn criterion_03_pair_likelihood_sums_to_one() {
    let mut r = rng(3);
    let mut worst = 0.0_f64;
    for case in 0..12 {
        let mut s = spec(1 + case % 3, 1 + (case / 3) % 2);
        s.unit_covariates = vec!["x".into()];
        let theta = random_theta(&s, &mut r);
        let t_len = 1 + case % 3;
        let template = random_panel(&s, &[2], t_len, &mut r);
        let mut total = 0.0;
        for outcome in 0..1usize << (2 * t_len) {
            let mut data: PanelDataset = template.clone();
            for (i, unit) in data.clusters[0].units.iter_mut().enumerate() {
                for t in 0..t_len {
                    unit.responses[t] = ((outcome >> (i * t_len + t)) & 1) as f64;
                }
            }
            total += pairwise_loglik(&data, &s, &theta).unwrap().exp();
        }
        worst = worst.max((total - 1.0).abs());
    }
    report(3, worst < NORMALIZATION_TOL, format!("max |sum - 1| {worst:.2e}"));
}

#[test]
fn criterion_04_em_ascends() {
    let mut r = rng(4);
    let constraints = [TransitionConstraint::Unconstrained, TransitionConstraint::TridiagonalConstant, TransitionConstraint::Diagonal];
    let mut checked = 0;
    let mut bad = 0;
    for case in 0..9 {
        let mut s = spec(2 + case % 2, 2);
        s.cluster_transition = constraints[case % 3];
        s.unit_transition = constraints[(case / 3) % 3];
        s.unit_covariates = vec!["x".into()];
        if case % 4 == 3 {
            s.family = MeasurementFamily::Gaussian;
        }
        let data = random_panel(&s, &[5, 3, 4, 6, 1, 2], 5, &mut r);
        let config = EmConfig { n_random_starts: 2, seed: case as u64, max_iterations: 300, ..EmConfig::default() };
        let result = fit(&data, &s, &config).unwrap();
        checked += 1;
        // every start's trace must ascend, not only the winner's
        for start in 0..=config.n_random_starts {
            let theta = if start == 0 {
                nested_hmm::em::deterministic_start(&data, &s)
            } else {
                nested_hmm::em::random_start(&data, &s, config.seed, start as u64)
            };
            let run = run_em(&data, &s, theta, &config).unwrap();
            checked += 1;
            bad += usize::from(!trace_ascends(&run.trace));
        }
        bad += usize::from(!trace_ascends(&result.trace));
    }
    for (_, (f, _, _)) in recovery_runs() {
        checked += 1;
        bad += usize::from(!trace_ascends(&f.trace));
    }
    report(4, bad == 0, format!("{bad} of {checked} traces decrease by more than {ASCENT_TOL:e}"));
}

#[test]
fn criterion_05_scores_match_finite_differences() {
    let mut r = rng(5);
    let mut worst = 0.0_f64;
    for case in 0..10 {
        let mut s = spec(1 + case % 2, 2);
        s.cluster_transition =
            if s.k1 > 1 { TransitionConstraint::TridiagonalConstant } else { TransitionConstraint::Unconstrained };
        s.unit_covariates = vec!["x".into()];
        s.cluster_covariates = vec!["z".into()];
        if case % 5 == 4 {
            s.family = MeasurementFamily::Gaussian;
        }
        let theta = random_theta(&s, &mut r);
        let data = random_panel(&s, &[3, 2, 1], 3, &mut r);
        let x = flatten_parameters(&theta, &s).unwrap();
        let scores = cluster_scores(&data, &s, &theta).unwrap();
        for h in 0..data.clusters.len() {
            for i in 0..x.len() {
                let at = |d: f64| {
                    let mut y = x.clone();
                    y[i] += d;
                    cluster_loglik(&data, &s, &unflatten_parameters(&y, &s).unwrap(), h).unwrap()
                };
                let fd = (at(SCORE_STEP) - at(-SCORE_STEP)) / (2.0 * SCORE_STEP);
                worst = worst.max((scores[h][i] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    report(5, worst < SCORE_REL_TOL, format!("max relative error {worst:.2e}"));
}

fn rho_objective(a: f64, b: f64, c: f64, rho: f64) -> f64 {
    a * rho.ln() + b * (1.0 - rho).ln() + c * (1.0 - 2.0 * rho).ln()
}

#[test]
fn criterion_06_tridiagonal_rho_matches_grid() {
    let mut r = rng(6);
    let mut worst = 0.0_f64;
    let n = (0.5 / RHO_GRID_STEP).round() as usize;
    for _ in 0..20 {
        let (a, b, c) = (r.gen_range(0.1..50.0), r.gen_range(0.1..200.0), r.gen_range(0.1..200.0));
        let mut best = (f64::NEG_INFINITY, 0.0);
        for g in 1..n {
            let rho = g as f64 * RHO_GRID_STEP;
            let f = rho_objective(a, b, c, rho);
            if f > best.0 {
                best = (f, rho);
            }
        }
        let rho = solve_tridiagonal_rho(a, b, c).unwrap();
        worst = worst.max((rho - best.1).abs());
    }
    report(6, worst < RHO_TOL, format!("max |rho - grid argmax| {worst:.2e}"));
}

fn covariate_columns() -> Vec<CovariateColumn> {
    vec![
        CovariateColumn { name: "skill".into(), generator: CovariateGenerator::Binary { rate: 0.5 }, time_invariant: true },
        // income in thousands, centred
        CovariateColumn {
            name: "income".into(),
            generator: CovariateGenerator::Uniform { low: -5.0, high: 5.0 },
            time_invariant: true,
        },
    ]
}

fn panel_spec(k1: usize, k2: usize) -> ModelSpec {
    ModelSpec {
        k1,
        k2,
        cluster_transition: TransitionConstraint::TridiagonalConstant,
        unit_transition: TransitionConstraint::TridiagonalConstant,
        family: MeasurementFamily::Bernoulli,
        lag_handling: LagHandling::None,
        unit_covariates: vec!["skill".into(), "income".into()],
        ..ModelSpec::default()
    }
}

fn recovery_truth() -> ParameterSet {
    ParameterSet {
        lambda: vec![0.2221, 0.7181, 0.0598],
        cluster_transition: build_tridiagonal(3, 0.0870).unwrap(),
        pi: vec![0.4122, 0.5878],
        unit_transition: build_tridiagonal(2, 0.0271).unwrap(),
        intercept: -3.474,
        alpha: vec![0.0, 0.444, 2.931],
        beta: vec![0.0, 2.718],
        gamma: vec![],
        delta: vec![2.037, -0.200],
        sigma2: None,
    }
}

fn panel_design(spec: ModelSpec, theta: ParameterSet, seed: u64) -> SimDesign {
    SimDesign {
        clusters: 249,
        cluster_size_min: 4,
        cluster_size_max: 10,
        occasions: 6,
        spec,
        theta,
        cluster_covariates: vec![],
        unit_covariates: covariate_columns(),
        seed,
    }
}

/// Deterministic start only; random starts multiply the cost without
/// changing what the criteria measure.
fn panel_config() -> EmConfig {
    EmConfig { n_random_starts: 0, ..EmConfig::default() }
}

type RecoveryRun = (FitResult, InferenceReport, f64);

fn recovery_runs() -> &'static Vec<(u64, RecoveryRun)> {
    static RUNS: OnceLock<Vec<(u64, RecoveryRun)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = panel_spec(3, 2);
        RECOVERY_SEEDS
            .iter()
            .map(|&seed| {
                let (data, _) = simulate(&panel_design(spec.clone(), recovery_truth(), seed)).unwrap();
                let start = Instant::now();
                let result = fit(&data, &spec, &panel_config()).unwrap();
                let inference = sandwich(&data, &spec, &result.theta).unwrap();
                (seed, (result, inference, start.elapsed().as_secs_f64()))
            })
            .collect()
    })
}

#[test]
fn criterion_07_parameter_recovery() {
    let spec = panel_spec(3, 2);
    let truth = flatten_parameters(&recovery_truth(), &spec).unwrap();
    let mut within = 0;
    let mut total = 0;
    let mut slowest = 0.0_f64;
    let mut per_seed = Vec::new();
    for (seed, (result, inference, secs)) in recovery_runs() {
        slowest = slowest.max(*secs);
        let est = flatten_parameters(&result.theta, &spec).unwrap();
        let mut misses = Vec::new();
        for (i, p) in inference.parameters.iter().enumerate() {
            if !p.std_error.is_some_and(|se| (est[i] - truth[i]).abs() <= RECOVERY_SE * se) {
                misses.push(p.name.clone());
            }
        }
        let hits = truth.len() - misses.len();
        within += hits;
        total += truth.len();
        per_seed.push(format!("seed {seed}: {hits}/{} missing {misses:?}", truth.len()));
    }
    let share = within as f64 / total as f64;
    let pass = share >= RECOVERY_SHARE && slowest < FIT_MINUTES * 60.0;
    report(7, pass, format!("{within}/{total} within {RECOVERY_SE} s.e. [{}], slowest fit {slowest:.0}s", per_seed.join(", ")));
}

fn selection_truth() -> ParameterSet {
    ParameterSet {
        lambda: vec![0.7, 0.3],
        cluster_transition: build_tridiagonal(2, 0.0870).unwrap(),
        pi: vec![0.4122, 0.5878],
        unit_transition: build_tridiagonal(2, 0.0271).unwrap(),
        intercept: -3.474,
        alpha: vec![0.0, 2.0],
        beta: vec![0.0, 2.718],
        gamma: vec![],
        delta: vec![2.037, -0.200],
        sigma2: None,
    }
}

#[test]
fn criterion_08_clic_selects_the_true_grid_cell() {
    let spec = panel_spec(2, 2);
    let mut hits = 0;
    let mut picks = Vec::new();
    let mut layout_ok = true;
    for &seed in &SELECTION_SEEDS {
        let (data, _) = simulate(&panel_design(spec.clone(), selection_truth(), seed)).unwrap();
        let grid = select_grid(&data, &[1, 2, 3], &[1, 2, 3], &spec, &panel_config()).unwrap();
        let table = grid_csv(&grid);
        let lines: Vec<&str> = table.lines().collect();
        layout_ok &= lines.len() == 4
            && lines[0] == "k1,k2=1,k2=2,k2=3"
            && lines[1..].iter().enumerate().all(|(i, l)| l.starts_with(&format!("{},", i + 1)) && l.split(',').count() == 4)
            && table.matches('*').count() == 1;
        hits += usize::from(grid.best == Some((2, 2)));
        picks.push(format!("{:?}", grid.best));
    }
    report(
        8,
        hits >= SELECTION_HITS && layout_ok,
        format!("picked (2, 2) in {hits}/{} [{}], grid layout ok: {layout_ok}", SELECTION_SEEDS.len(), picks.join(" ")),
    );
}

#[test]
fn criterion_09_sandwich_sanity() {
    let mut sym_ok = true;
    let mut diag_ok = true;
    let mut pen_ok = true;
    for (_, (_, inference, _)) in recovery_runs() {
        match &inference.covariance {
            Some(cov) => {
                for i in 0..cov.len() {
                    diag_ok &= cov[i][i] >= 0.0;
                    for j in 0..cov.len() {
                        sym_ok &= (cov[i][j] - cov[j][i]).abs() <= SYMMETRY_TOL;
                    }
                }
            }
            None => sym_ok = false,
        }
        pen_ok &= inference.penalty.is_some_and(|p| p > 0.0);
    }

    // clusters of two: the pairwise likelihood is the full likelihood
    let spec = ModelSpec {
        unit_covariates: vec![],
        ..panel_spec(2, 2)
    };
    let truth = ParameterSet { delta: vec![], intercept: -1.0, alpha: vec![0.0, 1.5], beta: vec![0.0, 2.0], ..selection_truth() };
    let design = SimDesign {
        clusters: 3000,
        cluster_size_min: 2,
        cluster_size_max: 2,
        occasions: 4,
        unit_covariates: vec![],
        ..panel_design(spec.clone(), truth, 909)
    };
    let (data, _) = simulate(&design).unwrap();
    let result = fit(&data, &spec, &panel_config()).unwrap();
    let inference = sandwich(&data, &spec, &result.theta).unwrap();
    let p = spec.free_parameter_count() as f64;
    let penalty = inference.penalty.unwrap_or(f64::NAN);
    let exact_ok = (penalty - p).abs() <= PENALTY_REL_TOL * p && trace_ascends(&result.trace);
    report(
        9,
        sym_ok && diag_ok && pen_ok && exact_ok,
        format!("symmetric {sym_ok}, diagonal >= 0 {diag_ok}, penalties > 0 {pen_ok}, exact-regime penalty {penalty:.2} vs p = {p}"),
    );
}

#[test]
fn criterion_10_fit_json_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    std::fs::write(
        path("sim.conf"),
        "k1 = 2\nk2 = 2\ncluster_transition = tridiagonal\nunit_transition = tridiagonal\nclusters = 40\n\
         cluster_size = 2..5\noccasions = 4\nintercept = -1\nalpha = 0, 1.5\nbeta = 0, 2\ncluster_rho = 0.1\n\
         unit_rho = 0.05\nunit_covariate.x = uniform(-1, 1)\ndelta = 0.5\n",
    )
    .unwrap();
    std::fs::write(
        path("fit.conf"),
        "k1 = 2\nk2 = 2\ncluster_transition = tridiagonal\nunit_transition = tridiagonal\nunit_covariates = x\n\
         lag_handling = none\nn_random_starts = 2\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_nested-hmm");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["simulate", "--config", &path("sim.conf"), "--out", &path("panel.csv"), "--seed", "7"]);
    for name in ["a.json", "b.json"] {
        run(&["fit", "--data", &path("panel.csv"), "--config", &path("fit.conf"), "--out", &path(name), "--seed", "3", "--threads", "1"]);
    }
    let a = std::fs::read(path("a.json")).unwrap();
    let b = std::fs::read(path("b.json")).unwrap();
    report(10, !a.is_empty() && a == b, format!("{} bytes, identical: {}", a.len(), a == b));
}
