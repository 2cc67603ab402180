//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion (with indented sub-check lines), and exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use calmi::analytic::{
    analytic_bias, bias_grid, theta_identities, AnalyticMethod, GridSpec, PopulationTable, SplitTable,
};
use calmi::deltasolve::{
    calibration_residual, mean_probabilities, solve_delta_binary, solve_delta_categorical, CalibrationTarget,
    LinpredProfile,
};
use calmi::impute::{impute_calibrated, CalibratedOptions, Method};
use calmi::pool::{pool, AnalysisFit};
use calmi::rng::substream;
use calmi::simlab::{apply_method, replicate, run_repetitions, PopulationCase, ScenarioConfig, ScenarioOutput};
use calmi::tabular::{read_csv, ReadOptions};
use calmi::{expit, logit, Dataset, DesignSpec, Mechanism, PopulationDistribution, PopulationSource, SelectionModel};
use calmi::Variable;
use rand::Rng;

const SEED: u64 = 20_240_611;

struct Criterion {
    checks: Vec<(bool, String)>,
}

impl Criterion {
    fn new() -> Self {
        Criterion { checks: Vec::new() }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.checks.push((ok, detail.into()));
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|(ok, _)| *ok)
    }
}

fn report(id: &str, title: &str, c: &Criterion, elapsed: Duration, results: &mut Vec<(String, bool)>) {
    let status = if c.passed() { "PASS" } else { "FAIL" };
    println!("[{status}] criterion {id}: {title} ({:.1}s)", elapsed.as_secs_f64());
    for (ok, detail) in &c.checks {
        println!("         {} {detail}", if *ok { "ok  " } else { "FAIL" });
    }
    results.push((id.to_string(), c.passed()));
}

fn reference_tab() -> PopulationTable {
    PopulationTable::from_generators(0.7, 0.5f64.ln(), 1.5f64.ln()).unwrap()
}

fn m3() -> SelectionModel {
    SelectionModel::new(Mechanism::M3, 1.35, -1.5, 0.0).unwrap()
}

fn m4() -> SelectionModel {
    SelectionModel::new(Mechanism::M4, 0.75, -1.5, 1.5).unwrap()
}

fn criterion_1() -> Criterion {
    let mut c = Criterion::new();
    let tab = reference_tab();
    for (label, model) in [("M3", m3()), ("M4", m4())] {
        let t = theta_identities(&tab, &model).unwrap();
        let dy = (t.thetay_obs - t.thetay_mis).abs();
        c.check(dy <= 1e-12, format!("{label}: |θy_obs − θy_mis| = {dy:.2e} ≤ 1e-12"));
        let d0 = t.theta0_mis - t.theta0_obs;
        c.check(
            (d0 - 1.5).abs() <= 1e-10 && (d0 + model.alpha_x).abs() <= 1e-10,
            format!("{label}: θ0_mis − θ0_obs = {d0:.12} (target 1.5 = −αx, tol 1e-10)"),
        );
    }
    c
}

/// Expectation-level binary calibration inputs for a 2×2 selection model.
fn binary_expectation(model: &SelectionModel) -> (CalibrationTarget, Vec<LinpredProfile>) {
    let tab = reference_tab();
    let split = SplitTable::new(&tab, model);
    let o = split.observed;
    let t0 = (o[1][0] / o[0][0]).ln();
    let ty = (o[1][1] * o[0][0] / (o[1][0] * o[0][1])).ln();
    let mis = |k: usize| split.missing[0][k] + split.missing[1][k];
    let target = CalibrationTarget::binary(tab.p_x(), split.p_x_observed(), split.p_observed()).unwrap();
    (target, vec![LinpredProfile::new(vec![t0], mis(0)), LinpredProfile::new(vec![t0 + ty], mis(1))])
}

fn criterion_2() -> Criterion {
    let mut c = Criterion::new();
    for (label, model) in [("M3", m3()), ("M4", m4())] {
        let (target, profiles) = binary_expectation(&model);
        let adj = solve_delta_binary(&target, &profiles).unwrap();
        let err = (adj.offsets[0] + model.alpha_x).abs();
        c.check(err <= 1e-8, format!("{label}: δ = {:.10}, |δ + αx| = {err:.2e} ≤ 1e-8", adj.offsets[0]));
        let worst = calibration_residual(&target, &profiles, &adj.offsets).iter().fold(0.0f64, |m, r| m.max(r.abs()));
        c.check(worst <= 1e-9, format!("{label}: completed-data identity residual {worst:.2e} ≤ 1e-9"));
    }

    // four levels, binary outcome, missingness on the level only
    let px = [0.5, 0.25, 0.15, 0.1];
    let beta = [logit(0.3), 0.4, -0.3, 0.8];
    let alpha = [1.2, -0.7, -1.4, 0.3];
    let mut obs = [[0.0; 2]; 4];
    let mut mis = [[0.0; 2]; 4];
    for j in 0..4 {
        let py = expit(beta[0] + if j > 0 { beta[j] } else { 0.0 });
        let pr = expit(alpha[j]);
        for (k, pk) in [(0usize, 1.0 - py), (1, py)] {
            obs[j][k] = px[j] * pk * pr;
            mis[j][k] = px[j] * pk * (1.0 - pr);
        }
    }
    let p_r: f64 = obs.iter().flatten().sum();
    let p_obs: Vec<f64> = obs.iter().map(|r| (r[0] + r[1]) / p_r).collect();
    let names = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let target = CalibrationTarget::new(names, px.to_vec(), p_obs, p_r).unwrap();
    let profiles: Vec<LinpredProfile> = (0..2)
        .map(|k| {
            let lp = (1..4).map(|j| (obs[j][k] / obs[0][k]).ln()).collect();
            LinpredProfile::new(lp, (0..4).map(|j| mis[j][k]).sum())
        })
        .collect();
    let adj = solve_delta_categorical(&target, &profiles).unwrap();
    let mean = mean_probabilities(&profiles, &adj.offsets);
    let worst = (0..4)
        .map(|j| (p_r * target.observed[j] + (1.0 - p_r) * mean[j] - px[j]).abs())
        .fold(0.0f64, f64::max);
    c.check(worst <= 1e-9, format!("J=4: completed-data identity residual {worst:.2e} ≤ 1e-9 per level"));
    let dev = (1..4).map(|j| (adj.offsets[j - 1] + (alpha[j] - alpha[0])).abs()).fold(0.0f64, f64::max);
    c.check(dev <= 1e-8, format!("J=4: δ_j = −(α_j − α_0) within {dev:.2e} ≤ 1e-8"));
    c
}

fn criterion_3() -> (Criterion, Criterion) {
    let mut c = Criterion::new();
    let mut conditional_m3 = Criterion::new();
    let tab = reference_tab();
    let grid = GridSpec::default();
    let mut cache: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    let mut results = BTreeMap::new();
    for (mi, mech) in Mechanism::ALL.iter().enumerate() {
        for (ai, method) in AnalyticMethod::ALL.iter().enumerate() {
            let r = bias_grid(&tab, *mech, *method, &grid).unwrap();
            cache.insert((mi, ai), r.max_abs_bias());
            results.insert((mi, ai), r);
        }
    }
    let idx = |m: Mechanism| Mechanism::ALL.iter().position(|x| *x == m).unwrap();
    let aidx = |a: AnalyticMethod| AnalyticMethod::ALL.iter().position(|x| *x == a).unwrap();
    let zero = |m: Mechanism, a: AnalyticMethod| {
        let (b0, bx) = cache[&(idx(m), aidx(a))];
        (b0.max(bx) <= 1e-8, format!("{a} {m}: max |bias| = ({b0:.2e}, {bx:.2e}) ≤ 1e-8"))
    };
    let push_zero = |c: &mut Criterion, m, a| {
        let (ok, d) = zero(m, a);
        c.check(ok, d);
    };
    push_zero(&mut c, Mechanism::M1, AnalyticMethod::Cra);
    push_zero(&mut c, Mechanism::M3, AnalyticMethod::Cra);
    push_zero(&mut c, Mechanism::M1, AnalyticMethod::StandardMi);
    push_zero(&mut c, Mechanism::M2, AnalyticMethod::StandardMi);
    {
        let r = &results[&(idx(Mechanism::M3), aidx(AnalyticMethod::StandardMi))];
        let bx = r.points.iter().map(|p| p.bias_bx.abs()).fold(0.0f64, f64::max);
        c.check(bx <= 1e-8, format!("standard-mi M3: max |bias βx| = {bx:.2e} ≤ 1e-8"));
        let b0_max = r.points.iter().map(|p| p.bias_b0.abs()).fold(0.0f64, f64::max);
        let all_nonzero = r.points.iter().filter(|p| p.alpha_x != 0.0).all(|p| p.bias_b0 != 0.0);
        let zero_at_null = r.points.iter().filter(|p| p.alpha_x == 0.0).all(|p| p.bias_b0.abs() <= 1e-8);
        c.check(
            all_nonzero && zero_at_null && b0_max > 1e-4,
            format!("standard-mi M3: bias β0 ≠ 0 wherever αx ≠ 0 (max {b0_max:.3e} > 1e-4), 0 at αx = 0"),
        );
    }
    push_zero(&mut c, Mechanism::M3, AnalyticMethod::MarginalWeightedMi);
    {
        let (b0, bx) = cache[&(idx(Mechanism::M2), aidx(AnalyticMethod::MarginalWeightedMi))];
        c.check(b0.max(bx) > 1e-4, format!("marginal-weighted-mi M2: max |bias| = {:.3e} > 1e-4", b0.max(bx)));
    }
    push_zero(&mut c, Mechanism::M2, AnalyticMethod::ConditionalWeightedMi);
    for m in Mechanism::ALL {
        push_zero(&mut c, m, AnalyticMethod::CalibratedMi);
    }
    let (ok, d) = zero(Mechanism::M3, AnalyticMethod::ConditionalWeightedMi);
    conditional_m3.check(ok, d);
    if !ok {
        let r = &results[&(idx(Mechanism::M3), aidx(AnalyticMethod::ConditionalWeightedMi))];
        let worst = r
            .points
            .iter()
            .max_by(|a, b| a.bias_b0.abs().max(a.bias_bx.abs()).total_cmp(&b.bias_b0.abs().max(b.bias_bx.abs())))
            .unwrap();
        conditional_m3.check(
            false,
            format!(
                "largest at α0 = {}, αx = {}: bias = ({:.3e}, {:.3e})",
                worst.alpha0, worst.alpha_x, worst.bias_b0, worst.bias_bx
            ),
        );
    }
    (c, conditional_m3)
}

fn criterion_4(outputs: &BTreeMap<Mechanism, ScenarioOutput>) -> Criterion {
    let mut c = Criterion::new();
    for (mech, out) in outputs {
        let failed = out.failed_reps();
        let first = out.failures.first().map(|f| format!("; first: rep {} {}: {}", f.rep, f.method, f.message)).unwrap_or_default();
        c.check(
            out.check_failure_cap().is_ok(),
            format!("{mech}: {failed} of {} repetitions failed, within the 1% cap{first}", out.config.reps),
        );
    }
    for (mech, out) in outputs {
        for p in ["beta0", "beta_x"] {
            let s = out.summary_for(Method::CalibratedMi, p).unwrap();
            c.check(
                s.bias.abs() <= 4.0 * s.bias_mcse,
                format!("(a) calibrated {mech} {p}: |bias| {:.4} ≤ 4·MCSE {:.4}", s.bias.abs(), 4.0 * s.bias_mcse),
            );
            c.check(
                (0.92..=0.975).contains(&s.coverage),
                format!("(a) calibrated {mech} {p}: coverage {:.3} in [0.92, 0.975]", s.coverage),
            );
        }
    }
    let std = |m: Mechanism, p: &str| outputs[&m].summary_for(Method::StandardMi, p).unwrap().clone();
    for (m, p) in [(Mechanism::M3, "beta0"), (Mechanism::M4, "beta0"), (Mechanism::M4, "beta_x")] {
        let s = std(m, p);
        c.check(
            s.bias.abs() > 5.0 * s.bias_mcse,
            format!("(b) standard {m} {p}: |bias| {:.4} > 5·MCSE {:.4}", s.bias.abs(), 5.0 * s.bias_mcse),
        );
    }
    let s = std(Mechanism::M4, "beta_x");
    c.check(s.coverage < 0.5, format!("(b) standard M4 beta_x: coverage {:.3} < 0.5", s.coverage));
    for (m, params) in [
        (Mechanism::M1, vec!["beta0", "beta_x"]),
        (Mechanism::M3, vec!["beta0", "beta_x"]),
        (Mechanism::M2, vec!["beta_x"]),
    ] {
        for p in params {
            let s = outputs[&m].summary_for(Method::Cra, p).unwrap();
            c.check(
                s.bias.abs() <= 4.0 * s.bias_mcse,
                format!("(c) cra {m} {p}: |bias| {:.4} ≤ 4·MCSE {:.4}", s.bias.abs(), 4.0 * s.bias_mcse),
            );
        }
    }
    for (mech, out) in outputs {
        for p in ["beta0", "beta_x"] {
            let full = out.summary_for(Method::FullData, p).unwrap().emp_se;
            let others = out
                .summary
                .iter()
                .filter(|s| s.parameter == p && s.method != Method::FullData)
                .map(|s| s.emp_se)
                .fold(f64::INFINITY, f64::min);
            c.check(full < others, format!("(d) {mech} {p}: full-data empSE {full:.4} < min other {others:.4}"));
        }
    }
    c
}

fn criterion_5(exact: &BTreeMap<Mechanism, ScenarioOutput>, external: &BTreeMap<Mechanism, ScenarioOutput>) -> Criterion {
    let mut c = Criterion::new();
    for (mech, out) in external {
        let failed = out.failed_reps();
        let first = out.failures.first().map(|f| format!("; first: rep {} {}: {}", f.rep, f.method, f.message)).unwrap_or_default();
        c.check(
            out.check_failure_cap().is_ok(),
            format!("{mech}: {failed} of {} repetitions failed, within the 1% cap{first}", out.config.reps),
        );
    }
    for mech in [Mechanism::M3, Mechanism::M4] {
        for p in ["beta0", "beta_x"] {
            let a = exact[&mech].summary_for(Method::CalibratedMi, p).unwrap();
            let b = external[&mech].summary_for(Method::CalibratedMi, p).unwrap();
            let d_mod = b.model_se - a.model_se;
            let mc_mod = (a.model_se_mcse.powi(2) + b.model_se_mcse.powi(2)).sqrt();
            c.check(
                d_mod > 2.0 * mc_mod,
                format!("{mech} {p}: modSE {:.4} → {:.4}, increase {d_mod:.4} > 2·MCSE {:.4}", a.model_se, b.model_se, 2.0 * mc_mod),
            );
            let d_emp = b.emp_se - a.emp_se;
            let mc_emp = (a.emp_se_mcse.powi(2) + b.emp_se_mcse.powi(2)).sqrt();
            c.check(
                d_emp > 2.0 * mc_emp,
                format!("{mech} {p}: empSE {:.4} → {:.4}, increase {d_emp:.4} > 2·MCSE {:.4}", a.emp_se, b.emp_se, 2.0 * mc_emp),
            );
        }
    }
    c
}

fn criterion_6() -> Criterion {
    let mut c = Criterion::new();
    let fit = |e: f64, v: f64| AnalysisFit::new(vec!["b".into()], vec![e], vec![v], 100.0).unwrap();
    let p = &pool(&[fit(1.0, 0.5), fit(2.0, 0.5)]).unwrap()[0];
    let exact = (p.estimate - 1.5).abs().max((p.within - 0.5).abs()).max((p.between - 0.5).abs()).max((p.total - 1.25).abs());
    c.check(exact <= 1e-12, format!("hand fixture Q̄=1.5, W=0.5, B=0.5, T=1.25: max error {exact:.1e} ≤ 1e-12"));
    let fits: Vec<AnalysisFit> = (0..6).map(|i| fit(0.3 * i as f64 - (i * i) as f64 * 0.05, 0.1 + 0.02 * i as f64)).collect();
    let mut perm = fits.clone();
    perm.rotate_left(2);
    perm.swap(0, 3);
    let (a, b) = (&pool(&fits).unwrap()[0], &pool(&perm).unwrap()[0]);
    let diff = (a.estimate - b.estimate).abs().max((a.total - b.total).abs()).max((a.df - b.df).abs() / a.df);
    c.check(diff <= 1e-12, format!("permutation invariance: max difference {diff:.1e}"));
    let same = &pool(&vec![fit(0.7, 0.2); 4]).unwrap()[0];
    c.check(
        same.between == 0.0 && same.total == same.within && (same.fmi - 2.0 / (same.df + 3.0)).abs() < 1e-15,
        format!("B = 0: T = W = {}, FMI = 2/(ν+3) = {:.5}", same.total, same.fmi),
    );
    c
}

fn criterion_7() -> Criterion {
    let mut c = Criterion::new();
    let tab = reference_tab();
    let (b0, bx) = tab.betas();
    let methods = [
        (Method::Cra, AnalyticMethod::Cra),
        (Method::StandardMi, AnalyticMethod::StandardMi),
        (Method::MarginalWeightedMi, AnalyticMethod::MarginalWeightedMi),
        (Method::ConditionalWeightedMi, AnalyticMethod::ConditionalWeightedMi),
        (Method::CalibratedMi, AnalyticMethod::CalibratedMi),
    ];
    for mech in Mechanism::ALL {
        let mut cfg = ScenarioConfig::desk(mech, SEED ^ 0x7);
        cfg.n = 1_000_000;
        cfg.reps = 2;
        let data = replicate(&cfg, 0).unwrap();
        let model = SelectionModel::reference(mech);
        for (i, (method, analytic)) in methods.iter().enumerate() {
            let est = apply_method(&data, *method, 10, SEED + i as u64).unwrap();
            let (a0, ax) = analytic_bias(&tab, &model, *analytic).unwrap();
            let z0 = (est[0].estimate - b0 - a0) / est[0].se();
            let zx = (est[1].estimate - bx - ax) / est[1].se();
            c.check(
                z0.abs() <= 4.0 && zx.abs() <= 4.0,
                format!(
                    "{mech} {method}: simulated bias ({:+.4}, {:+.4}) vs analytic ({a0:+.4}, {ax:+.4}), z = ({z0:+.2}, {zx:+.2})",
                    est[0].estimate - b0,
                    est[1].estimate - bx
                ),
            );
        }
    }
    c
}

/// Four-level ethnicity-like target with an outcome and a second complete
/// covariate; missingness depends on the level (not at random).
fn synthetic_categorical(n: usize, pop: &[f64; 4]) -> Dataset {
    let mut rng = substream(SEED, &[8]);
    let obs_prob = [0.85, 0.55, 0.6, 0.45];
    let (mut y, mut x, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = 3;
        for (l, p) in pop.iter().enumerate() {
            acc += p;
            if u < acc {
                j = l;
                break;
            }
        }
        let zv = u32::from(rng.random::<f64>() < 0.4);
        let eta = logit(0.2) + [0.0, 1.3, 0.9, 0.4][j] + 0.5 * zv as f64;
        y.push(Some(u32::from(rng.random::<f64>() < expit(eta))));
        z.push(Some(zv));
        x.push(if rng.random::<f64>() < obs_prob[j] { Some(j as u32) } else { None });
    }
    Dataset::new(
        vec![Variable::binary("y"), Variable::new("eth", ["white", "asian", "black", "other"]), Variable::binary("z")],
        vec![y, x, z],
    )
    .unwrap()
}

fn criterion_8() -> Criterion {
    let mut c = Criterion::new();
    let pop = [0.72, 0.12, 0.08, 0.08];
    let ds = synthetic_categorical(20_000, &pop);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.csv");
    ds.write_csv(&path).unwrap();
    let ds = read_csv(&path, &ReadOptions::default()).unwrap();
    let eth = ds.index_of("eth").unwrap();
    let pop_dist = PopulationDistribution::from_level_spec(
        ds.variable(eth),
        "white=0.72,asian=0.12,black=0.08",
        PopulationSource::Exact,
    )
    .unwrap();
    let spec = DesignSpec::new("eth", ["y", "z"]);
    let res = impute_calibrated(&ds, &spec, 30, &pop_dist, &CalibratedOptions::default(), SEED).unwrap();
    let dists = res.completed_distributions().unwrap();
    let labels = &ds.variable(eth).levels;
    for j in 0..4 {
        let v: Vec<f64> = dists.iter().map(|d| d[j]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let mcse = sd / (v.len() as f64).sqrt();
        let p = pop_dist.proportions[j];
        c.check(
            (mean - p).abs() <= 4.0 * mcse,
            format!("{}: completed {mean:.5} vs reference {p:.5}, |diff| ≤ 4·MC SE {:.5}", labels[j], 4.0 * mcse),
        );
    }
    let pooled = res.analyze(&DesignSpec::new("y", ["eth", "z"])).unwrap();
    c.check(
        pooled.iter().all(|p| p.fmi.is_finite() && p.se().is_finite()),
        format!("analysis model pooled over M = 30 ({} coefficients, FMI populated)", pooled.len()),
    );
    c
}

fn run_desk(population: PopulationCase, methods: &[Method]) -> BTreeMap<Mechanism, ScenarioOutput> {
    Mechanism::ALL
        .iter()
        .map(|&m| {
            let mut cfg = ScenarioConfig::desk(m, SEED + m as u64);
            cfg.population = population;
            cfg.methods = methods.to_vec();
            (m, run_repetitions(&cfg).unwrap())
        })
        .collect()
}

fn main() {
    // `cargo test` passes harness flags; accept and ignore them, but honor a
    // name filter for running a single criterion.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let want = |id: &str| filter.as_deref().map_or(true, |f| id.starts_with(f));
    let mut results = Vec::new();

    if want("1") {
        let t = Instant::now();
        let c = criterion_1();
        let e = t.elapsed();
        let mut c = c;
        c.check(e < Duration::from_secs(1), format!("runtime {:.3}s < 1s", e.as_secs_f64()));
        report("1", "exact analytic identities", &c, e, &mut results);
    }
    if want("2") {
        let t = Instant::now();
        let mut c = criterion_2();
        let e = t.elapsed();
        c.check(e < Duration::from_secs(1), format!("runtime {:.3}s < 1s", e.as_secs_f64()));
        report("2", "delta-solver correctness", &c, e, &mut results);
    }
    if want("3") {
        let t = Instant::now();
        let (mut c, cond) = criterion_3();
        let e = t.elapsed();
        c.check(e < Duration::from_secs(60), format!("runtime {:.1}s < 60s", e.as_secs_f64()));
        report("3", "analytic bias grids", &c, e, &mut results);
        report("3-cond", "conditional weighted MI bias ≡ 0 under M3", &cond, e, &mut results);
    }
    let methods = [Method::FullData, Method::Cra, Method::StandardMi, Method::CalibratedMi];
    let mut exact = None;
    if want("4") || want("5") {
        let t = Instant::now();
        let out = run_desk(PopulationCase::Exact, &methods);
        let e = t.elapsed();
        if want("4") {
            let mut c = criterion_4(&out);
            c.check(e < Duration::from_secs(15 * 60), format!("runtime {:.1}s ≤ 15 min", e.as_secs_f64()));
            report("4", "desk-scale simulation (S=500, n=2000, M=10)", &c, e, &mut results);
        }
        exact = Some(out);
    }
    if want("5") {
        let t = Instant::now();
        let external = run_desk(PopulationCase::External { n_ex: 1000 }, &[Method::CalibratedMi]);
        let e = t.elapsed();
        let mut c = criterion_5(exact.as_ref().unwrap(), &external);
        c.check(e < Duration::from_secs(20 * 60), format!("runtime {:.1}s ≤ 20 min", e.as_secs_f64()));
        report("5", "estimated population widens calibrated SEs (n_ex = 1000 vs exact)", &c, e, &mut results);
    }
    if want("6") {
        let t = Instant::now();
        let mut c = criterion_6();
        let e = t.elapsed();
        c.check(e < Duration::from_secs(1), format!("runtime {:.3}s < 1s", e.as_secs_f64()));
        report("6", "pooling fixtures", &c, e, &mut results);
    }
    if want("7") {
        let t = Instant::now();
        let mut c = criterion_7();
        let e = t.elapsed();
        c.check(e < Duration::from_secs(5 * 60), format!("runtime {:.1}s ≤ 5 min", e.as_secs_f64()));
        report("7", "simulation at n = 10^6 matches analytic bias", &c, e, &mut results);
    }
    if want("8") {
        let t = Instant::now();
        let c = criterion_8();
        report("8", "synthetic 4-level pipeline recovers reference distribution", &c, t.elapsed(), &mut results);
    }

    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
