//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.
//!
//! `cargo test --release -p deliberate --test acceptance` runs everything; extra arguments
//! select criteria by substring, e.g. `-- decay gradient`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use deliberate::cli::run_from;
use deliberate::data::{Stakeholder, N_WORKSHOPS};
use deliberate::design::DesignMatrices;
use deliberate::draws::normal_cdf;
use deliberate::estimation::{EstimateOptions, EstimationResult, Prepared};
use deliberate::model::{decay, ordered_probs};
use deliberate::optimize::central_difference_gradient;
use deliberate::reporting::{describe, paired_t_test, reversion_curves, CurveGroup};
use deliberate::synthesis::{recovery_experiment, simulate_dataset, ScenarioSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NORMALIZATION_PAIRS: usize = 10_000;
const NORMALIZATION_TOL: f64 = 1e-12;
const NORMALIZATION_BUDGET: Duration = Duration::from_secs(1);

const DEGENERATE_INDIVIDUALS: usize = 50;
const DEGENERATE_DRAWS: [usize; 3] = [1, 10, 100];
const DEGENERATE_TOL: f64 = 1e-10;
const DEGENERATE_BUDGET: Duration = Duration::from_secs(5);

const DECAY_GRID: usize = 1000;
const DECAY_SPOT: f64 = 0.9980;
const DECAY_SPOT_TOL: f64 = 5e-4;
/// d(8; 119.17, 17) at 40 significant digits.
const DECAY_SPOT_REFERENCE: f64 = 0.998_032_735_167_984_5;

const GRADIENT_POINTS: usize = 10;
const GRADIENT_INDIVIDUALS: usize = 100;
const GRADIENT_DRAWS: usize = 100;
const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_STEP: f64 = 1e-5;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);

const RECOVERY_INDIVIDUALS: usize = 500;
const RECOVERY_DRAWS: usize = 500;
const RECOVERY_SHARE: f64 = 0.90;
const RECOVERY_BUDGET: Duration = Duration::from_secs(30 * 60);

const DIRECTION_INDIVIDUALS: usize = 213;
const DIRECTION_REPLICATIONS: u64 = 10;
const DIRECTION_REQUIRED: usize = 9;

const TTEST_VECTORS: usize = 100;
const TTEST_T_TOL: f64 = 1e-12;
const TTEST_P_TOL: f64 = 1e-9;

const CURVE_TOL: f64 = 1e-9;

const STRATA: usize = 64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("normalization", normalization),
        ("degenerate-mixing", degenerate_mixing),
        ("decay-contract", decay_contract),
        ("gradient-check", gradient_check),
        ("parameter-recovery", parameter_recovery),
        ("direction-reproduction", direction_reproduction),
        ("paired-t-oracle", paired_t_oracle),
        ("curve-contract", curve_contract),
        ("determinism", determinism),
        ("mlhs-stratification", mlhs_stratification),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("{status} {name:<24} {} [{:.1}s]", result.detail, started.elapsed().as_secs_f64());
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn random_thresholds(rng: &mut impl Rng) -> [f64; 10] {
    let mut tau = [0.0; 10];
    let mut acc = rng.gen_range(-8.0..2.0);
    for t in &mut tau {
        *t = acc;
        acc += rng.gen_range(0.01..2.5);
    }
    tau
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: Vec<(f64, [f64; 10])> = (0..NORMALIZATION_PAIRS)
        .map(|_| (rng.gen_range(-20.0..20.0), random_thresholds(&mut rng)))
        .collect();
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    for (v, tau) in &cases {
        let p = ordered_probs(*v, tau).expect("ordered thresholds");
        negative += p.iter().filter(|x| **x < 0.0).count();
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    let elapsed = started.elapsed();
    outcome(
        negative == 0 && worst <= NORMALIZATION_TOL && elapsed < NORMALIZATION_BUDGET,
        format!(
            "{NORMALIZATION_PAIRS} pairs, max |sum-1| = {worst:.2e} (tol {NORMALIZATION_TOL:.0e}), {negative} negative, {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Independent reversion share for the closed-form likelihood.
fn share_reverted(delta: f64, alpha: f64, horizon: f64) -> f64 {
    if alpha <= 0.0 {
        0.0
    } else if delta >= horizon {
        1.0
    } else {
        1.0 - (alpha * (1.0 / horizon - 1.0 / (horizon - delta))).exp()
    }
}

fn dot_named(named: &BTreeMap<String, f64>, prefix: &str, columns: &[String], x: &[f64]) -> f64 {
    columns.iter().zip(x).map(|(c, v)| named[&format!("{prefix}.{c}")] * v).sum()
}

/// Plain ordered-logit log-likelihood with every random component switched off.
fn closed_form_loglik(design: &DesignMatrices, named: &BTreeMap<String, f64>) -> f64 {
    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut total = 0.0;
    for ind in &design.individuals {
        let rho = named["rho.base"] + dot_named(named, "rho", &design.reversion_columns, &ind.reversion_x);
        let alpha = named["alpha.base"] + dot_named(named, "alpha", &design.alpha_columns, &ind.alpha_x);
        for obs in &ind.observations {
            let s = Stakeholder::ALL[obs.stakeholder];
            let indicators = DesignMatrices::indicators(obs);
            let deltas = ind.delta_row(obs.time_index);
            let mut v = 0.0;
            for w in 0..N_WORKSHOPS {
                if indicators[w] == 1 {
                    let keep = 1.0 - rho * share_reverted(deltas[w], alpha, design.horizon);
                    v += named[&format!("beta.{s}.w{}", w + 1)] * keep;
                }
            }
            if let Some(c) = ind.wave_column {
                v += named[&format!("wave.{s}.{}", design.wave_columns[c])];
            }
            v += dot_named(named, &format!("gamma.{s}"), &design.equation_columns[obs.stakeholder], &ind.equation_x[obs.stakeholder]);
            if obs.period > 0 {
                v += named[&format!("calendar.{}", design.calendar_labels[obs.period])];
            }
            let r = usize::from(obs.rating);
            let upper = if r < 10 { logistic(named[&format!("tau.{s}.{}", r + 1)] - v) } else { 1.0 };
            let lower = if r > 0 { logistic(named[&format!("tau.{s}.{r}")] - v) } else { 0.0 };
            total += (upper - lower).ln();
        }
    }
    total
}

fn degenerate_mixing() -> Outcome {
    let started = Instant::now();
    let spec = ScenarioSpec::recovery(DEGENERATE_INDIVIDUALS, 21);
    let sim = simulate_dataset(&spec).expect("simulate");
    let mut worst: f64 = 0.0;
    let mut closed = 0.0;
    for q in DEGENERATE_DRAWS {
        let mut cfg = spec.estimation_config();
        cfg.draws = q;
        let prepared = Prepared::new(&sim.dataset, &cfg, false).expect("prepare");
        let mut working = prepared.working(&sim.truth).expect("truth fits layout");
        for (w, e) in working.iter_mut().zip(prepared.layout.entries()) {
            if e.kind.is_sigma() {
                *w = 0.0;
            }
        }
        let simulated = prepared.problem().loglik(&working).total;
        closed = closed_form_loglik(&prepared.design, &prepared.layout.to_named(&working));
        worst = worst.max((simulated - closed).abs());
    }
    let elapsed = started.elapsed();
    outcome(
        worst <= DEGENERATE_TOL && elapsed < DEGENERATE_BUDGET,
        format!(
            "Q in {DEGENERATE_DRAWS:?}, {DEGENERATE_INDIVIDUALS} individuals, closed form {closed:.6}, max |diff| = {worst:.2e} (tol {DEGENERATE_TOL:.0e})"
        ),
    )
}

fn decay_contract() -> Outcome {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let alpha = rng.gen_range(0.01..300.0);
        let horizon = rng.gen_range(2.0..40.0);
        if decay(0.0, alpha, horizon).unwrap() != 0.0 {
            problems.push(format!("d(0) != 0 at alpha {alpha}"));
        }
        for extra in [0.0, 0.5, 3.0, 100.0] {
            if decay(horizon + extra, alpha, horizon).unwrap() != 1.0 {
                problems.push(format!("d(D+{extra}) != 1 at alpha {alpha}"));
            }
        }
        let mut prev = 0.0;
        for k in 0..DECAY_GRID {
            let d = decay(1.2 * horizon * k as f64 / (DECAY_GRID - 1) as f64, alpha, horizon).unwrap();
            if d < prev {
                problems.push(format!("decreasing at alpha {alpha}, step {k}"));
                break;
            }
            prev = d;
        }
    }
    let spot = decay(8.0, 119.17, 17.0).unwrap();
    let spot_ok = (spot - DECAY_SPOT).abs() <= DECAY_SPOT_TOL && (spot - DECAY_SPOT_REFERENCE).abs() < 1e-13;
    outcome(
        problems.is_empty() && spot_ok,
        format!(
            "{DECAY_GRID}-point grids on 50 (alpha, D); d(8; 119.17, 17) = {spot:.10} (want {DECAY_SPOT} +- {DECAY_SPOT_TOL:.0e}){}",
            problems.first().map(|p| format!("; {p}")).unwrap_or_default()
        ),
    )
}

/// Forward-backward differences with an absolute step, written independently of the library routine.
fn reference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        y[j] = x[j] + GRADIENT_STEP;
        let up = f(&y);
        y[j] = x[j] - GRADIENT_STEP;
        let down = f(&y);
        y[j] = x[j];
        out.push((up - down) / (2.0 * GRADIENT_STEP));
    }
    out
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let spec = ScenarioSpec::recovery(GRADIENT_INDIVIDUALS, 31);
    let sim = simulate_dataset(&spec).expect("simulate");
    let mut cfg = spec.estimation_config();
    cfg.draws = GRADIENT_DRAWS;
    let prepared = Prepared::new(&sim.dataset, &cfg, false).expect("prepare");
    let layout = &prepared.layout;
    let problem = prepared.problem();
    let truth_free = layout.working_to_free(&prepared.working(&sim.truth).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = |w: &[f64]| problem.loglik(w).total;
    let mut worst_library: f64 = 0.0;
    let mut worst_analytic: f64 = 0.0;
    for _ in 0..GRADIENT_POINTS {
        let free: Vec<f64> = truth_free.iter().map(|x| x + rng.gen_range(-0.25..0.25)).collect();
        let w = layout.free_to_working(&free);
        let reference = reference_gradient(f, &w);
        let library = central_difference_gradient(f, &w, 1e-6);
        let (_, analytic) = problem.loglik_with_gradient(&w);
        for j in 0..w.len() {
            let scale = reference[j].abs().max(1.0);
            worst_library = worst_library.max((library[j] - reference[j]).abs() / scale);
            worst_analytic = worst_analytic.max((analytic[j] - reference[j]).abs() / scale);
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst_library <= GRADIENT_TOL && worst_analytic <= GRADIENT_TOL && elapsed < GRADIENT_BUDGET,
        format!(
            "{GRADIENT_POINTS} points, {} coordinates, N={GRADIENT_INDIVIDUALS}, Q={GRADIENT_DRAWS}: max rel diff finite-difference {worst_library:.1e}, analytic {worst_analytic:.1e} (tol {GRADIENT_TOL:.0e})",
            layout.len()
        ),
    )
}

fn parameter_recovery() -> Outcome {
    let started = Instant::now();
    let spec = ScenarioSpec::recovery(RECOVERY_INDIVIDUALS, deliberate::config::DEFAULT_SEED);
    let report = recovery_experiment(&spec, RECOVERY_DRAWS, 1, &EstimateOptions::default()).expect("recovery run");
    let run = &report.runs[0];
    let share = report.share_within_two();
    let elapsed = started.elapsed();
    let misses: Vec<&str> = run.rows.iter().filter(|r| r.z >= 2.0).map(|r| r.name.as_str()).collect();
    outcome(
        report.all_converged() && share >= RECOVERY_SHARE && elapsed < RECOVERY_BUDGET,
        format!(
            "N={RECOVERY_INDIVIDUALS}, Q={RECOVERY_DRAWS}: {}/{} free parameters within 2 robust SE ({:.1}%, need {:.0}%), converged {} in {} iterations; outside: {}",
            run.rows.len() - misses.len(),
            run.rows.len(),
            100.0 * share,
            100.0 * RECOVERY_SHARE,
            run.converged,
            run.iterations,
            misses.join(", ")
        ),
    )
}

fn direction_reproduction() -> Outcome {
    let mut hits = 0;
    let mut notes = Vec::new();
    for rep in 0..DIRECTION_REPLICATIONS {
        let spec = ScenarioSpec::table3_like(DIRECTION_INDIVIDUALS, 1000 + rep);
        let sim = simulate_dataset(&spec).expect("simulate");
        let rows = describe(&sim.dataset).expect("describe");
        let change = |s: Stakeholder| {
            rows.iter()
                .find(|r| r.stakeholder == Some(s))
                .and_then(|r| r.change)
                .expect("paired cells")
        };
        let c: Vec<f64> = Stakeholder::ALL.iter().map(|s| change(*s)).collect();
        let food = change(Stakeholder::FoodIndustry).abs();
        let ok = change(Stakeholder::Government) > 0.0
            && change(Stakeholder::Supermarkets) > 0.0
            && change(Stakeholder::Individuals) > 0.0
            && change(Stakeholder::Farmers) < 0.0
            && c.iter().all(|x| x.abs() >= food);
        hits += usize::from(ok);
        if !ok {
            notes.push(format!("replication {rep} changes {c:.2?}"));
        }
    }
    outcome(
        hits >= DIRECTION_REQUIRED,
        format!(
            "{hits}/{DIRECTION_REPLICATIONS} replications (N={DIRECTION_INDIVIDUALS}) reproduce every sign and the smallest food-industry change (need {DIRECTION_REQUIRED}){}",
            notes.first().map(|n| format!("; {n}")).unwrap_or_default()
        ),
    )
}

/// Two-sided Student-t tail probability from the finite trigonometric series for integer df.
fn student_two_sided(t: f64, df: usize) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let inside = if df % 2 == 1 {
        let mut term = c;
        let mut sum = if df > 1 { c } else { 0.0 };
        for k in (3..df).step_by(2) {
            term *= c * c * (k - 1) as f64 / k as f64;
            sum += term;
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in (2..df).step_by(2) {
            term *= c * c * (k - 1) as f64 / k as f64;
            sum += term;
        }
        s * sum
    };
    1.0 - inside
}

fn paired_t_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_t: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for _ in 0..TTEST_VECTORS {
        let n = rng.gen_range(3..=50);
        let shift = rng.gen_range(-1.0..1.0);
        let d: Vec<f64> = (0..n).map(|_| shift + rng.gen_range(-2.0..2.0)).collect();
        let r = paired_t_test(&d).expect("valid differences");
        let nf = n as f64;
        let mean = d.iter().sum::<f64>() / nf;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
        let t = mean / (sd / nf.sqrt());
        worst_t = worst_t.max((r.t - t).abs() / t.abs().max(1.0));
        worst_p = worst_p.max((r.p - student_two_sided(t, n - 1)).abs());
    }
    let hand = paired_t_test(&[2.0, 1.0, 3.0]).expect("hand case");
    let hand_ok = (hand.t - 3.464).abs() < 5e-4 && (hand.p - 0.0742).abs() < 5e-5;
    outcome(
        worst_t <= TTEST_T_TOL && worst_p <= TTEST_P_TOL && hand_ok,
        format!(
            "{TTEST_VECTORS} vectors: max t diff {worst_t:.1e} (tol {TTEST_T_TOL:.0e}), max p diff {worst_p:.1e} (tol {TTEST_P_TOL:.0e}); (2,1,3): t = {:.4}, p = {:.4}",
            hand.t, hand.p
        ),
    )
}

/// Small converged estimation on simulated data, run through the command line.
fn small_estimate(dir: &Path, threads: usize) -> std::path::PathBuf {
    let sim = dir.join("sim");
    if !sim.exists() {
        let code = run_from([
            "deliberate", "simulate", "--preset", "recovery", "--individuals", "60", "--seed", "9", "--out",
            sim.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "simulate exit code");
    }
    let out = dir.join(format!("threads{threads}"));
    let path = |f: &str| sim.join(f).display().to_string();
    let threads = threads.to_string();
    let code = run_from([
        "deliberate".to_string(),
        "estimate".into(),
        "--ratings".into(),
        path("ratings.csv"),
        "--individuals".into(),
        path("individuals.csv"),
        "--schedule".into(),
        path("schedule.csv"),
        "--config".into(),
        path("config.toml"),
        "--draws".into(),
        "40".into(),
        "--seed".into(),
        "17".into(),
        "--threads".into(),
        threads,
        "--out".into(),
        out.display().to_string(),
    ]);
    assert!(code == 0 || code == 3, "estimate exit code {code}");
    out
}

fn curve_contract() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let est = small_estimate(tmp.path(), 1);
    let text = std::fs::read_to_string(est.join("estimates.json")).unwrap();
    let estimated = EstimationResult::from_json(&text).unwrap();

    let mut reported = estimated.clone();
    let effects: BTreeMap<&str, f64> = BTreeMap::from([("area:rural", 0.35), ("vote:did_not_vote", -0.39)]);
    reported.params.rho_base = 0.33;
    reported.params.rho_effects = reported.reversion_columns.iter().map(|c| effects[c.as_str()]).collect();
    reported.params.alpha_base = 119.17;
    let groups: Vec<CurveGroup> = [("urban", "voted"), ("rural", "voted"), ("urban", "did_not_vote"), ("rural", "did_not_vote")]
        .iter()
        .map(|(area, vote)| CurveGroup {
            label: format!("{area} {vote}"),
            settings: BTreeMap::from([("area".to_string(), area.to_string()), ("vote".to_string(), vote.to_string())]),
        })
        .collect();

    let mut curves = reversion_curves(&reported, &groups, 4).unwrap();
    curves.extend(reversion_curves(&estimated, &deliberate::reporting::default_groups(&estimated), 2).unwrap());
    let mut problems = Vec::new();
    let mut boosted = 0;
    for c in &curves {
        let first = c.points[0].percent_remaining;
        let last = c.points.last().unwrap().percent_remaining;
        if first != 100.0 {
            problems.push(format!("{} starts at {first}", c.label));
        }
        if c.rho > 0.0 && c.alpha > 0.0 && (last - 100.0 * (1.0 - c.rho)).abs() > CURVE_TOL {
            problems.push(format!("{} ends at {last}, want {}", c.label, 100.0 * (1.0 - c.rho)));
        }
        if c.rho < 0.0 && c.alpha > 0.0 {
            boosted += 1;
            if !c.points[1..].iter().all(|p| p.percent_remaining > 100.0) {
                problems.push(format!("{} (rho {}) does not exceed 100", c.label, c.rho));
            }
        }
    }
    outcome(
        problems.is_empty() && boosted > 0,
        format!(
            "{} curves ({boosted} with negative reversion), terminal tol {CURVE_TOL:.0e}{}",
            curves.len(),
            problems.first().map(|p| format!("; {p}")).unwrap_or_default()
        ),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let one = small_estimate(tmp.path(), 1);
    let four = small_estimate(tmp.path(), 4);
    let files = ["estimates.json", "estimates.txt", "estimates.csv", "covariance.csv", "contributions.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(one.join(f)).unwrap() != std::fs::read(four.join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "estimate with --threads 1 and --threads 4: {} of {} outputs byte-identical{}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() { String::new() } else { format!("; differ: {}", differing.join(", ")) }
        ),
    )
}

fn mlhs_stratification() -> Outcome {
    let spec = ScenarioSpec::recovery(40, 13);
    let sim = simulate_dataset(&spec).expect("simulate");
    let mut cfg = spec.estimation_config();
    cfg.draws = STRATA;
    let prepared = Prepared::new(&sim.dataset, &cfg, false).expect("prepare");
    let draws = prepared.draws.as_ref().expect("random components");
    let mut bad = 0;
    for i in 0..draws.individuals() {
        for k in 0..draws.dimensions() {
            let mut occupancy = [0u32; STRATA];
            for q in 0..draws.draws() {
                occupancy[(normal_cdf(draws.value(i, q, k)) * STRATA as f64).floor() as usize] += 1;
            }
            bad += usize::from(occupancy.iter().any(|c| *c != 1));
        }
    }
    outcome(
        bad == 0 && draws.draws() == STRATA,
        format!(
            "{} individuals x {} dimensions at Q={STRATA}: {bad} columns with a stratum not occupied exactly once",
            draws.individuals(),
            draws.dimensions()
        ),
    )
}
