//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line
//! and the test fails if any criterion fails.

use std::time::{Duration, Instant};

use dsmlab::bounds::{
    classic_bound, consensus_distance_bound, experimental_divergence, new_bound,
    olshevsky_threshold, BoundInputs, Prediction,
};
use dsmlab::data::toy::{aligned_direction, toy_worst_closed_form, toy_worst_linear_drift};
use dsmlab::data::{
    build_toy_dataset, random_split, split_by_label, toy_aligned, ClassLayout, Dataset, Objective,
    Partition, SyntheticSpec,
};
use dsmlab::engine::{
    self, geometric_grid, knee_learning_rate, Init, MetricsLog, Problem, RunConfig,
};
use dsmlab::estimators::{
    beta, beta_from_ratios, beta_hat, closed_form_from_dataset, measure_stats, permutation_oracle,
};
use dsmlab::spectral::{decompose, energy_fractions_running_max};
use dsmlab::timing::{
    loss_vs_time, simulate_schedule, time_to_reach, ComputeMode, TimeDistribution,
};
use dsmlab::topology::{generate, ConsensusMatrix, GraphKind, GraphSpec};
use dsmlab::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn ring(m: usize, d: usize) -> ConsensusMatrix {
    generate(&GraphSpec::new(GraphKind::UndirectedRingLattice, m, d)).unwrap()
}

fn expander(m: usize, d: usize, seed: u64) -> ConsensusMatrix {
    generate(&GraphSpec::new(GraphKind::RandomRegularExpander, m, d).with_seed(seed)).unwrap()
}

fn within_runtime(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (
        t <= limit,
        format!("{:.2}s of {:.0}s", t.as_secs_f64(), limit.as_secs_f64()),
    )
}

/// Aligned toy problem on several graphs against both closed forms.
fn toy_reproduction() -> Verdict {
    let start = Instant::now();
    let (m, eta, zeta, k_max) = (100usize, 0.1, 0.1, 2000usize);
    let mut graphs: Vec<ConsensusMatrix> = [2, 4, 10, 99].iter().map(|&d| ring(m, d)).collect();
    graphs.push(expander(m, 4, 1));
    graphs.push(expander(m, 10, 2));
    let mut worst_rel: f64 = 0.0;
    let mut worst_drift_form: f64 = 0.0;
    for a in &graphs {
        let dec = decompose(a).unwrap();
        let (lambda, u) = aligned_direction(&dec).expect("symmetric graphs have a real direction");
        let ds = build_toy_dataset(&u, zeta).unwrap();
        let part = toy_aligned(&ds);
        let problem = Problem::new(Objective::toy(zeta), &ds, &part);
        let cfg = RunConfig::new(eta, k_max, 1, 0).with_init(Init::Constant { value: 1.0 });
        let log = engine::run(a, &problem, &cfg).unwrap().log;
        for r in &log.records {
            let k = r.iter as u64;
            let exact = toy_worst_closed_form(lambda, eta, zeta, k);
            worst_rel = worst_rel.max((r.loss_worst_local - exact).abs() / exact.abs());
            worst_drift_form = worst_drift_form
                .max((r.loss_worst_local - toy_worst_linear_drift(lambda, eta, zeta, k)).abs());
        }
    }
    let drift_form_tol = eta * zeta * zeta / 2.0;
    let (fast, time) = within_runtime(start, Duration::from_secs(10));
    verdict(
        worst_rel <= 1e-9 && worst_drift_form <= drift_form_tol * (1.0 + 1e-9) && fast,
        format!(
            "{} graphs, max rel err {worst_rel:.2e} (<= 1e-9), max linear-drift form gap {worst_drift_form:.2e} (<= {drift_form_tol:.0e}), {time}",
            graphs.len()
        ),
    )
}

/// Decaying-step thresholds for the 16-node ring.
fn strongly_convex_thresholds() -> Verdict {
    let start = Instant::now();
    let lambda = (1.0 + 2.0 * (std::f64::consts::PI / 8.0).cos()) / 3.0;
    let measured = decompose(&ring(16, 2)).unwrap().lambda2_modulus();
    let t = olshevsky_threshold(5.03, 1.0, 16, lambda, 5.0).unwrap();
    let t2 = olshevsky_threshold(5.03, 0.01, 16, lambda, 5.0).unwrap();
    let rel = |x: f64, r: f64| (x - r).abs() / r;
    let checks = [
        (measured - lambda).abs() < 1e-12,
        t.k0 == 254,
        rel(t.eta0, 0.02) <= 0.05 && rel(t.eta0, 0.0197) <= 1e-3,
        rel(t.k1 as f64, 31140.0) <= 0.05,
        rel(t.kprime_l, 7.4e9) <= 0.10,
        rel(t2.kprime_l, 7.4e17) <= 0.10,
    ];
    let (fast, time) = within_runtime(start, Duration::from_secs(1));
    verdict(
        checks.iter().all(|&c| c) && fast,
        format!(
            "K0={} eta0={:.4} K1={} K'={:.3e} K'(mu=0.01)={:.3e}, {time}",
            t.k0, t.eta0, t.k1, t.kprime_l, t2.kprime_l
        ),
    )
}

fn integer_dataset(s: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..s * n)
        .map(|_| rng.random_range(-3i32..=3) as f64)
        .collect();
    let y: Vec<f64> = (0..s).map(|_| rng.random_range(-5i32..=5) as f64).collect();
    Dataset::from_rows(x, n, y).unwrap()
}

/// Closed-form moments against the permutation oracle.
fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let ds = integer_dataset(12, 2, 7);
    let obj = Objective::LinearMse;
    let w = [0.5, -0.25];
    let mut ok = true;
    let mut worst_rel: f64 = 0.0;
    let mut worst_se: f64 = 0.0;
    for c in [1usize, 3] {
        for b in [1usize, 2, 4] {
            let est = closed_form_from_dataset(&obj, &ds, &w, 3, b, c).unwrap();
            let orc = permutation_oracle(&ds, &obj, &w, 3, b, c, 200_000, 11).unwrap();
            for (x, r, se) in [
                (orc.mean_e, est.e_hat, orc.se_e),
                (orc.mean_e_sp, est.e_sp_hat, orc.se_e_sp),
            ] {
                let err = (x - r).abs();
                worst_rel = worst_rel.max(err / r.abs());
                if se > 0.0 {
                    worst_se = worst_se.max(err / se);
                }
                ok &= err <= (3.0 * se).max(1e-9 * r.abs()) && err <= 0.01 * r.abs();
            }
            ok &= est.h_lower <= orc.mean_h && orc.mean_h <= est.h_hat;
        }
    }
    let (fast, time) = within_runtime(start, Duration::from_secs(60));
    verdict(
        ok && fast,
        format!("6 settings, max rel err {worst_rel:.2e}, max err/SE {worst_se:.2}, H inside interval, {time}"),
    )
}

fn random_inputs(rng: &mut ChaCha8Rng) -> BoundInputs {
    let e = rng.random_range(1e-3..10.0);
    let r = rng.random_range(0.0..10.0);
    BoundInputs {
        m: rng.random_range(1..200),
        eta: 10f64.powf(rng.random_range(-4.0..0.0)),
        lambda2_mod: rng.random_range(0.0..0.9999),
        alpha: rng.random_range(1e-3..=1.0),
        e,
        e_sp: e * rng.random_range(0.0..=1.0),
        h: e.sqrt() * rng.random_range(0.0..=1.0),
        r,
        r_sp: r * rng.random_range(0.0..=1.0),
        dist0_sq: rng.random_range(0.0..100.0),
        l: 0.0,
    }
}

/// Refined bound never exceeds the classic one; they agree at the worst case.
fn bound_dominance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = 0usize;
    let mut identity_gap: f64 = 0.0;
    for _ in 0..10_000 {
        let inp = random_inputs(&mut rng);
        let worst = BoundInputs {
            e_sp: inp.e,
            h: inp.e.sqrt(),
            r_sp: inp.r,
            alpha: 1.0,
            ..inp
        };
        for k in [1u64, 10, 1000] {
            let n = new_bound(&inp, k).unwrap();
            let c = classic_bound(&inp, k).unwrap();
            if n > c * (1.0 + 1e-12) {
                violations += 1;
            }
            let w = new_bound(&worst, k).unwrap();
            identity_gap = identity_gap.max((w - c).abs() / c.max(f64::MIN_POSITIVE));
        }
    }
    verdict(
        violations == 0 && identity_gap <= 1e-12,
        format!("30000 evaluations, {violations} violations, worst-case identity rel gap {identity_gap:.1e}"),
    )
}

fn center(g: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = g.column_mean();
    let mut out = g.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
    }
    out
}

/// Measured distance to consensus under the bound driven by measured E_sp and α.
fn consensus_distance() -> Verdict {
    let (m, b, k) = (16usize, 32usize, 500usize);
    let ds = SyntheticSpec::regression(m * 128, 10, 5)
        .generate()
        .unwrap();
    let part = random_split(&ds, m, 1, 5).unwrap();
    let problem = Problem::new(Objective::LinearMse, &ds, &part);
    let mut worst_ratio: f64 = 0.0;
    let mut ok = true;
    for a in [ring(m, 2), expander(m, 4, 3)] {
        let dec = decompose(&a).unwrap();
        let mut iterations = Vec::with_capacity(k);
        let out = engine::run_observed(&a, &problem, &RunConfig::new(0.01, k, b, 9), |_, g, _| {
            iterations.push(vec![center(g)]);
        })
        .unwrap();
        let profile = energy_fractions_running_max(&dec, &iterations).unwrap();
        let e_sp = out
            .log
            .records
            .iter()
            .map(|r| r.dg_fro_sq)
            .fold(0.0, f64::max);
        let e = out
            .log
            .records
            .iter()
            .map(|r| r.g_fro_sq)
            .fold(0.0, f64::max);
        let r0 = out.w0.norm_squared() / m as f64;
        let inp = BoundInputs {
            m,
            eta: 0.01,
            lambda2_mod: dec.lambda2_modulus(),
            alpha: profile.alpha,
            e,
            e_sp,
            h: e.sqrt(),
            r: r0,
            r_sp: center(&out.w0).norm_squared() / m as f64,
            dist0_sq: 0.0,
            l: 0.0,
        };
        for rec in &out.log.records {
            let bound = consensus_distance_bound(&inp, rec.iter as u64).unwrap();
            worst_ratio = worst_ratio.max(rec.dw_fro / bound);
            ok &= rec.dw_fro <= bound;
        }
    }
    verdict(
        ok,
        format!(
            "ring d=2 and expander d=4, max measured/bound {worst_ratio:.3} over 500 iterations"
        ),
    )
}

/// β from the published triple, and β̂ against measured β.
fn beta_consistency() -> Verdict {
    let triple = beta_from_ratios(1.53, 7.92, 1.01);
    let triple_ok = (triple - 12.23).abs() / 12.23 <= 0.005;
    let m = 16;
    let b = 8;
    let ds = SyntheticSpec::regression(m * 64, 10, 21)
        .generate()
        .unwrap();
    let part = random_split(&ds, m, 1, 21).unwrap();
    let problem = Problem::new(Objective::LinearMse, &ds, &part);
    let a = ring(m, 2);
    let dec = decompose(&a).unwrap();
    let w0 = DMatrix::zeros(10, m);
    let stats = measure_stats(&dec, &problem, &w0, b, 2000, 4).unwrap();
    let est = closed_form_from_dataset(&Objective::LinearMse, &ds, &[0.0; 10], m, b, 1).unwrap();
    let measured = beta(&stats);
    let predicted = beta_hat(&est, stats.alpha);
    let rel = (predicted - measured).abs() / measured;
    verdict(
        triple_ok && rel <= 0.15,
        format!("triple gives {triple:.3} (12.23 +- 0.5%), beta_hat {predicted:.3} vs beta {measured:.3} (rel {rel:.3} <= 0.15)"),
    )
}

fn knee_eta(problem: &Problem, m: usize, b: usize) -> f64 {
    let clique = generate(&GraphSpec::clique(m)).unwrap();
    let grid = geometric_grid(1e-5, 10.0, 31);
    knee_learning_rate(&clique, problem, b, &Init::default(), 3, &grid)
        .unwrap()
        .eta
}

fn curve(a: &ConsensusMatrix, problem: &Problem, eta: f64, k: usize, b: usize) -> MetricsLog {
    let mut cfg = RunConfig::new(eta, k, b, 8);
    cfg.track_local = false;
    engine::run(a, problem, &cfg).unwrap().log
}

fn divergence_between(problem: &Problem, m: usize, b: usize, k: usize) -> (f64, Prediction) {
    let eta = knee_eta(problem, m, b);
    let clique = curve(
        &generate(&GraphSpec::clique(m)).unwrap(),
        problem,
        eta,
        k,
        b,
    );
    let ring_log = curve(&ring(m, 2), problem, eta, k, b);
    let losses = |l: &MetricsLog| {
        l.records
            .iter()
            .map(|r| r.loss_avg_time)
            .collect::<Vec<_>>()
    };
    (
        eta,
        experimental_divergence(&losses(&clique), &losses(&ring_log), 0.04).unwrap(),
    )
}

/// Ring vs clique on a random split and on a by-label split.
fn topology_insensitivity() -> Verdict {
    let (m, b, k) = (16usize, 128usize, 1000usize);
    // class parameters vary smoothly with the class id, so the by-label split
    // places the heterogeneity along the ring's slowest mode
    let ds = SyntheticSpec::regression(m * 256, 10, 31)
        .with_classes(m, 1.0)
        .with_layout(ClassLayout::Circular)
        .generate()
        .unwrap();
    let random: Partition = random_split(&ds, m, 1, 31).unwrap();
    let by_label = split_by_label(&ds, m).unwrap();
    let (eta_r, k_random) =
        divergence_between(&Problem::new(Objective::LinearMse, &ds, &random), m, b, k);
    let (eta_l, k_label) =
        divergence_between(&Problem::new(Objective::LinearMse, &ds, &by_label), m, b, k);
    let ok = k_random.is_never() && matches!(k_label, Prediction::At(x) if x <= 200);
    verdict(
        ok,
        format!("random split (eta {eta_r:.3e}) k'={k_random}, by-label split (eta {eta_l:.3e}) k'={k_label} (<= 200)"),
    )
}

/// Heavy-tailed computation times: sparse graphs iterate faster and reach
/// the clique's final loss sooner.
fn straggler_direction() -> Verdict {
    let start = Instant::now();
    let (m, b, k) = (16usize, 16usize, 300usize);
    let dist = TimeDistribution::Pareto {
        shape: 2.0,
        scale: 1.0,
        cap: 100.0,
    }
    .sampler()
    .unwrap();
    let mode = ComputeMode::IidPerIteration;
    let durations: Vec<f64> = [2usize, 4, 8, 15]
        .iter()
        .map(|&d| {
            simulate_schedule(&ring(m, d), &dist, 5000, 0.0, &mode, 77)
                .unwrap()
                .mean_iteration_duration()
        })
        .collect();
    let monotone = durations.windows(2).all(|w| w[1] >= w[0]);

    let ds = SyntheticSpec::regression(m * 64, 10, 41)
        .generate()
        .unwrap();
    let part = random_split(&ds, m, 1, 41).unwrap();
    let problem = Problem::new(Objective::LinearMse, &ds, &part);
    let eta = knee_eta(&problem, m, b);
    let clique = generate(&GraphSpec::clique(m)).unwrap();
    let clique_log = curve(&clique, &problem, eta, k, b);
    let clique_sched = simulate_schedule(&clique, &dist, k, 0.0, &mode, 77).unwrap();
    let clique_curve = loss_vs_time(&clique_log, &clique_sched).unwrap();
    let (t_clique, target) = *clique_curve.last().unwrap();
    let sparse = ring(m, 2);
    let sparse_log = curve(&sparse, &problem, eta, 2 * k, b);
    let sparse_sched = simulate_schedule(&sparse, &dist, 2 * k, 0.0, &mode, 77).unwrap();
    let sparse_curve = loss_vs_time(&sparse_log, &sparse_sched).unwrap();
    let t_sparse = time_to_reach(&sparse_curve, target);
    let reached = matches!(t_sparse, Some(t) if t <= t_clique);
    let (fast, time) = within_runtime(start, Duration::from_secs(30));
    verdict(
        monotone && reached && fast,
        format!(
            "mean durations d=2,4,8,15: {:.3?}; clique final loss at t={t_clique:.1}, ring reaches it at {}, {time}",
            durations,
            t_sparse.map_or("never".to_string(), |t| format!("t={t:.1}"))
        ),
    )
}

/// Gap, small-cycle eigenvalue, expander advantage and projector residuals.
fn spectral_properties() -> Verdict {
    let clique_gap = decompose(&generate(&GraphSpec::clique(10)).unwrap())
        .unwrap()
        .gap();
    let cycle = decompose(&ring(4, 2)).unwrap().lambda2_modulus();
    let exp_gap = decompose(&expander(100, 4, 0)).unwrap().gap();
    let ring_gap = decompose(&ring(100, 4)).unwrap().gap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let m = rng.random_range(3..40usize);
        let spec = match i % 4 {
            0 => GraphSpec::new(
                GraphKind::UndirectedRingLattice,
                m,
                2 * rng.random_range(1..=(m - 1) / 2),
            ),
            1 => GraphSpec::new(GraphKind::DirectedRingLattice, m, rng.random_range(1..m)),
            2 => {
                let m = 2 * (m / 2).max(3);
                GraphSpec::new(GraphKind::RandomRegularExpander, m, 3).with_seed(i as u64)
            }
            _ => GraphSpec::clique(m),
        };
        let dec = decompose(&generate(&spec).unwrap()).unwrap();
        let mm = dec.m();
        let projectors: Vec<DMatrix<f64>> = (0..dec.q()).map(|q| dec.projector(q)).collect();
        let sum: DMatrix<f64> = projectors
            .iter()
            .fold(DMatrix::zeros(mm, mm), |acc, p| acc + p);
        worst = worst.max((sum - DMatrix::identity(mm, mm)).abs().max());
        for (q, p) in projectors.iter().enumerate() {
            for (r, pr) in projectors.iter().enumerate() {
                let prod = p * pr;
                let res = if q == r {
                    (prod - p).abs().max()
                } else {
                    prod.abs().max()
                };
                worst = worst.max(res);
            }
        }
    }
    let ok = clique_gap == 1.0
        && (cycle - 1.0 / 3.0).abs() <= 1e-12
        && exp_gap >= ring_gap
        && worst <= 1e-9;
    verdict(
        ok,
        format!(
            "clique gap {clique_gap}, |lambda2|(C4) {cycle:.15}, expander gap {exp_gap:.4} vs ring {ring_gap:.4}, projector residual {worst:.1e}"
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 9] = [
        ("toy analytic reproduction", toy_reproduction),
        ("strongly convex thresholds", strongly_convex_thresholds),
        ("closed-form vs permutation oracle", oracle_equivalence),
        ("bound dominance", bound_dominance),
        ("consensus distance", consensus_distance),
        ("beta consistency", beta_consistency),
        (
            "topology insensitivity in iterations",
            topology_insensitivity,
        ),
        ("straggler direction", straggler_direction),
        ("spectral properties", spectral_properties),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!(
            "[{}] {} {}: {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
