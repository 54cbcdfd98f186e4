//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{bisect, lq_spec, median, scenario, RiccatiOracle};
use fbcontrol::adjoint::{solve_first_adjoint, solve_second_adjoint};
use fbcontrol::algebra::{k1, k2, k2_tilde, picard_trace, solve_v, FixedPointConfig};
use fbcontrol::assumptions::{check_monotonicity, solve_bound_odes};
use fbcontrol::fbsde::{simulate_feedback, simulate_picard, ConstantPolicy, FieldPolicy};
use fbcontrol::hjb::solve_hjb;
use fbcontrol::problem::{
    CoefficientSet, ControlSet, Domain, Lipschitz, Point, Scenario, Term, TermModel, UniformGrid,
    Var,
};
use fbcontrol::verify::{
    check_jet_spatial, check_jet_temporal, check_local_relations, check_mp_global, check_mp_local,
    default_relations, run_relations, sample_points, to_json, to_table, Artifacts, JetOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const X: [u32; 5] = [0, 1, 0, 0, 0];
const Y: [u32; 5] = [0, 0, 1, 0, 0];
const U: [u32; 5] = [0, 0, 0, 0, 1];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "algebra contraction",
            limit: Duration::from_secs(1),
            run: algebra_contraction,
        },
        Criterion {
            name: "K1 reduction identity",
            limit: Duration::from_secs(1),
            run: k1_reduction,
        },
        Criterion {
            name: "K2 substitution identity",
            limit: Duration::MAX,
            run: k2_substitution,
        },
        Criterion {
            name: "bounding ODE closed form",
            limit: Duration::from_secs(1),
            run: bounding_ode,
        },
        Criterion {
            name: "HJB trivial exactness",
            limit: Duration::from_secs(10),
            run: hjb_exactness,
        },
        Criterion {
            name: "LQ end-to-end",
            limit: Duration::from_secs(300),
            run: lq_end_to_end,
        },
        Criterion {
            name: "MP inequality",
            limit: Duration::from_secs(120),
            run: mp_inequality,
        },
        Criterion {
            name: "jet probes",
            limit: Duration::from_secs(120),
            run: jet_probes,
        },
        Criterion {
            name: "local case",
            limit: Duration::from_secs(120),
            run: local_case,
        },
        Criterion {
            name: "determinism",
            limit: Duration::MAX,
            run: determinism,
        },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed < c.limit;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = if c.limit == Duration::MAX {
            String::new()
        } else {
            format!(" of {}s", c.limit.as_secs())
        };
        println!(
            "criterion {:>2} {:<26} {}  {} [{:.2}s{budget}]",
            i + 1,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn algebra_contraction() -> Outcome {
    let beta0 = 0.2;
    let cfg = FixedPointConfig::new(beta0);
    let mut r = rng(1);
    let (mut residual, mut ratio, mut oracle_gap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (a, freq, phase) = (
            r.random_range(0.1..1.0),
            r.random_range(0.5..3.0),
            r.random_range(0.0..6.3),
        );
        let (cx, cu) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let l3: f64 = a * freq;
        let coeffs = CoefficientSet::new(
            TermModel {
                diffusion: vec![
                    Term::sine(a, Var::Z, freq, phase),
                    Term::monomial(cx, X),
                    Term::monomial(cu, U),
                ],
                ..Default::default()
            },
            Lipschitz {
                l1: 1.0,
                l2: 0.0,
                l3,
            },
        );
        let bound = (1.0 - beta0) / l3;
        let (t, x, v, u) = (
            r.random_range(0.0..1.0),
            r.random_range(-2.0..2.0),
            r.random_range(-2.0..2.0),
            r.random_range(-1.0..1.0),
        );
        let p = r.random_range(-bound..=bound);
        let sigma = |z: f64| coeffs.sigma(&Point::new(t, x, v, z, u));
        let sol = solve_v(&coeffs, t, x, v, p, u, &cfg).expect("margin holds");
        residual = residual.max((sol.value - p * sigma(sol.value)).abs());
        let (_, trace) =
            picard_trace(|z| p * sigma(z), 0.0, cfg.tol, cfg.max_iter).expect("contraction");
        for w in trace.windows(3) {
            let (before, after) = ((w[1] - w[0]).abs(), (w[2] - w[1]).abs());
            let rounding = 4.0 * f64::EPSILON * (1.0 + w[2].abs());
            if before > rounding {
                ratio = ratio.max((after - rounding).max(0.0) / before);
            }
        }
        let span = p.abs() * (a + cx.abs() * 2.0 + cu.abs() + 1.0) + 1.0;
        let root = bisect(|z| z - p * sigma(z), -span - 10.0, span + 10.0);
        oracle_gap = oracle_gap.max((sol.value - root).abs());
    }
    Outcome::new(
        residual <= 1e-10 && ratio <= 1.0 - beta0 && oracle_gap <= 1e-10,
        format!("max residual {residual:.1e}, max step ratio {ratio:.3}, max |V - bisection| {oracle_gap:.1e}"),
    )
}

fn k1_reduction() -> Outcome {
    let mut r = rng(2);
    let worst = max_of((0..1000).map(|_| {
        let (p, q, sx) = (
            r.random_range(-5.0..5.0),
            r.random_range(-5.0..5.0),
            r.random_range(-5.0..5.0),
        );
        let v = k1([sx, 0.0, 0.0], p, q).expect("no coupling");
        (v - (p * sx + q)).abs()
    }));
    Outcome::new(
        worst <= 1e-14,
        format!("max |K1 - (p σ_x + q)| {worst:.1e}"),
    )
}

fn k2_substitution() -> Outcome {
    let mut r = rng(3);
    let worst = max_of((0..1000).map(|_| {
        let mut draw = |lo: f64, hi: f64| r.random_range(lo..hi);
        let ds = [draw(-1.0, 1.0), draw(-1.0, 1.0), draw(-1.0, 1.0)];
        let (a, b, c, d, e, f) = (
            draw(-1.0, 1.0),
            draw(-1.0, 1.0),
            draw(-1.0, 1.0),
            draw(-1.0, 1.0),
            draw(-1.0, 1.0),
            draw(-1.0, 1.0),
        );
        let hess = [[a, d, e], [d, b, f], [e, f, c]];
        let (wx, wxx, wxxx, sigma) = (
            draw(-0.9, 0.9),
            draw(-2.0, 2.0),
            draw(-2.0, 2.0),
            draw(-1.0, 1.0),
        );
        let kk = k1(ds, wx, wxx * sigma).expect("gap below one");
        let tilde = k2_tilde(ds, &hess, wx, wxx, wxxx * sigma, kk).expect("gap below one");
        let direct = k2(ds, &hess, wx, wxx, wxxx * sigma, kk).expect("gap below one");
        (tilde - direct).abs()
    }));
    Outcome::new(
        worst <= 1e-14,
        format!("max |K2~ - K2(P = W_xx, Q = W_xxx σ)| {worst:.1e}"),
    )
}

fn bounding_ode() -> Outcome {
    let closed = |l1: f64, horizon: f64, t: f64| (1.0 + l1) * (l1 * (horizon - t)).exp() - 1.0;
    let error = |l1: f64, horizon: f64, steps: usize| {
        let ode = solve_bound_odes(l1, 0.0, 0.5, horizon, steps, 1e12);
        max_of(
            ode.times
                .iter()
                .zip(&ode.s)
                .map(|(t, s)| (s - closed(l1, horizon, *t)).abs()),
        )
    };
    let at_1000 = error(1.0, 1.0, 1000);
    let ladder: Vec<f64> = [25, 50, 100].iter().map(|&n| error(2.0, 1.5, n)).collect();
    let orders: Vec<f64> = ladder.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let order_ok = orders.iter().all(|o| (o - 4.0).abs() < 0.15);
    Outcome::new(
        at_1000 <= 1e-8 && order_ok,
        format!("max error {at_1000:.1e} at 1000 steps, observed orders {orders:.3?}"),
    )
}

fn hjb_exactness() -> Outcome {
    let zero = scenario("zero.toml");
    let f = solve_hjb(&zero).expect("zero dynamics solve");
    let zero_err = max_of((0..f.nt()).flat_map(|i| {
        let f = &f;
        let zero = &zero;
        f.xs.iter()
            .enumerate()
            .map(move |(j, &x)| (f.w[f.idx(i, j)] - zero.coefficients.phi(x)).abs())
    }));
    let one = scenario("g_one.toml");
    let g = solve_hjb(&one).expect("unit cost solve");
    let one_err = max_of((0..g.nt()).flat_map(|i| {
        let g = &g;
        let one = &one;
        g.xs.iter().enumerate().map(move |(j, &x)| {
            (g.w[g.idx(i, j)] - (one.coefficients.phi(x) + one.horizon - g.times[i])).abs()
        })
    }));
    let grid = format!("{}x{}", one.grid.time_steps, one.grid.state_nodes);
    Outcome::new(
        zero_err == 0.0 && one_err <= g.dt(),
        format!("b=σ=g=0: max |W - φ| {zero_err:.1e}; g≡1 on {grid}: max error {one_err:.1e} (Δt = {:.1e})", g.dt()),
    )
}

fn with_controls(s: &Scenario, count: usize) -> Scenario {
    let mut out = s.clone();
    let [lo, hi] = s.controls.bounds();
    out.controls = ControlSet::new(
        UniformGrid {
            min: lo,
            max: hi,
            count,
        }
        .values(),
        s.controls.is_convex(),
        None,
    )
    .expect("valid grid");
    out
}

/// Median relative residuals of `p - W_x` and `q - W_xx σ`, and the smallest
/// `P - W_xx`, at the verification sample points.
fn smooth_residuals(s: &Scenario) -> (f64, f64, f64) {
    let f = solve_hjb(s).expect("LQ solve");
    let b = simulate_feedback(s, &f, &FieldPolicy::new(&f, s)).expect("LQ simulation");
    let first = solve_first_adjoint(s, &b).expect("first adjoint");
    let second = solve_second_adjoint(s, &b, &first).expect("second adjoint");
    let (mut rp, mut rq, mut wx, mut wq) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut gap = f64::INFINITY;
    for (m, k) in sample_points(s, &b) {
        let i = b.at(m, k);
        let (t, x) = (b.times[k], b.x[i]);
        let sigma = s
            .coefficients
            .sigma(&Point::new(t, x, b.y[i], b.z[i], b.u[i]));
        let (dx, dxx) = (f.value_x(t, x), f.value_xx(t, x));
        rp.push((first.p[i] - dx).abs());
        wx.push(dx.abs());
        rq.push((first.q[i] - dxx * sigma).abs());
        wq.push((dxx * sigma).abs());
        gap = gap.min(second.big_p[i] - dxx);
    }
    (median(&rp) / median(&wx), median(&rq) / median(&wq), gap)
}

fn lq_end_to_end() -> Outcome {
    let s = scenario("lq.toml");
    let f = solve_hjb(&s).expect("LQ solve");
    let oracle = RiccatiOracle::solve(&lq_spec(&s), s.t0, s.horizon, 4000);
    let mut rel: f64 = 0.0;
    for i in 0..f.nt() {
        for (j, &x) in f.xs.iter().enumerate() {
            if x.abs() <= 2.0 {
                let exact = oracle.value(f.times[i], x);
                rel = rel.max((f.w[f.idx(i, j)] - exact).abs() / exact.abs());
            }
        }
    }
    // one joint refinement level: Δt, Δx and the control spacing all halve
    let mut coarse = with_controls(&s, s.controls.len().div_ceil(2));
    coarse.grid.time_steps /= 2;
    coarse.grid.state_nodes /= 2;
    let (cp, cq, _) = smooth_residuals(&coarse);
    let (fp, fq, gap) = smooth_residuals(&s);
    let tol = s.tolerances.total();
    let pass = rel < 0.02 && fp < 0.05 && fq < 0.05 && fp < cp && fq < cq && gap >= -tol;
    Outcome::new(
        pass,
        format!(
            "W rel err {rel:.2e} on {}x{}; median |p-Wx| {cp:.2e} -> {fp:.2e}, |q-Wxx σ| {cq:.2e} -> {fq:.2e}; min P-Wxx {gap:.2e} (tol {tol})",
            s.grid.time_steps, s.grid.state_nodes
        ),
    )
}

fn mp_inequality() -> Outcome {
    let s = scenario("lq.toml");
    let art = Artifacts::compute(&s).expect("LQ pipeline");
    let optimal = check_mp_global(&s, &art.bundle, &art.first, &art.second, &s.check_controls)
        .expect("MP check");
    let samples = optimal.values("H(u)-H(u_bar)").len();
    let worst = optimal
        .check("H(u)-H(u_bar)")
        .expect("margin check")
        .statistic;

    let b = simulate_picard(&s, &ConstantPolicy(1.5)).expect("suboptimal simulation");
    let first = solve_first_adjoint(&s, &b).expect("first adjoint");
    let second = solve_second_adjoint(&s, &b, &first).expect("second adjoint");
    let off = check_mp_global(&s, &b, &first, &second, &s.check_controls).expect("MP check");
    let off_worst = off.check("H(u)-H(u_bar)").expect("margin check").statistic;
    let tol = s.tolerances.total();
    let expected = s.verify.sample_paths * s.verify.sample_times * s.check_controls.len();
    Outcome::new(
        optimal.passed && samples == expected && s.check_controls.len() == 9 && !off.passed,
        format!("min margin {worst:.2e} over {samples} samples (tol {tol}); constant u=1.5 gives {off_worst:.2e}"),
    )
}

fn envelopes(r: &fbcontrol::verify::RelationReport) -> Vec<f64> {
    (0..)
        .map_while(|j| r.diagnostic(&format!("envelope[{j}]")))
        .collect()
}

fn sci(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", items.join(", "))
}

fn jet_probes() -> Outcome {
    let s = scenario("lq.toml");
    let art = Artifacts::compute(&s).expect("LQ pipeline");
    let spatial = |opts: JetOptions| {
        check_jet_spatial(&s, &art.field, &art.bundle, &art.first, &art.second, &opts)
            .expect("spatial probe")
    };
    let space = spatial(JetOptions::default());
    let time = check_jet_temporal(
        &s,
        &art.field,
        &art.bundle,
        &art.first,
        &art.second,
        &JetOptions::default(),
    )
    .expect("temporal probe");
    let detected = [0.1, -0.1].iter().all(|&shift| {
        let r = spatial(JetOptions {
            p_shift: shift,
            ..Default::default()
        });
        !r.check(&format!("sub[{}]", s.verify.ladder - 1))
            .expect("sub-jet check")
            .passed
    });
    let (es, et) = (envelopes(&space), envelopes(&time));
    Outcome::new(
        space.passed && time.passed && detected && es.len() == 4 && et.len() == 4,
        format!(
            "spatial envelopes {}, temporal envelopes {}, p±0.1 detected: {detected}",
            sci(&es),
            sci(&et)
        ),
    )
}

fn local_case() -> Outcome {
    // b = -y, σ = 0, g = x, φ = x
    let family = CoefficientSet::new(
        TermModel {
            drift: vec![Term::monomial(-1.0, Y)],
            generator: vec![Term::monomial(1.0, X)],
            terminal: vec![Term::monomial(1.0, X)],
            ..Default::default()
        },
        Lipschitz::default(),
    );
    let mono = check_monotonicity(&family, &[-1.0, 0.0, 1.0], &Domain::cube(1.0, 2.0), 200, 3);
    let fitted = (mono.beta1 - 1.0).abs() < 1e-9
        && mono.beta2.abs() < 1e-9
        && (mono.beta3 - 1.0).abs() < 1e-9;

    let s = scenario("local.toml");
    let instance = fbcontrol::assumptions::assess(&s).monotonicity;
    let art = Artifacts::compute(&s).expect("local pipeline");
    let local = art.local.as_ref().expect("local regime");
    let relations =
        check_local_relations(&s, &art.bundle, &art.first, local).expect("local relations");
    let ratio = relations.summary_of("m-p*h").map(|_| {
        let r: Vec<f64> = relations.values("m-p*h").iter().map(|v| v.abs()).collect();
        let m: Vec<f64> = relations.values("m").iter().map(|v| v.abs()).collect();
        median(&r) / median(&m)
    });
    let ratio = ratio.expect("samples recorded");
    let mp = check_mp_local(&s, &art.bundle, local, &s.check_controls).expect("local MP");
    let worst = mp.check("H'_u*(u-u_bar)").expect("margin check").statistic;
    Outcome::new(
        mono.pass && fitted && instance.pass && ratio < 0.05 && mp.passed,
        format!(
            "β = ({:.3}, {:.3}, {:.3}); median |m-ph|/|m| {ratio:.2e}; min local margin {worst:.2e} (tol {})",
            mono.beta1,
            mono.beta2,
            mono.beta3,
            s.tolerances.total()
        ),
    )
}

/// Everything a verify run writes, concatenated.
fn verify_outputs(s: &Scenario) -> String {
    let art = Artifacts::compute(s).expect("pipeline");
    let reports = run_relations(s, &art, &default_relations(s)).expect("relations");
    [
        art.field.to_csv(),
        art.bundle.to_csv(),
        art.second.to_csv(),
        to_json(&reports),
        to_table(&reports),
    ]
    .concat()
}

fn determinism() -> Outcome {
    let s = scenario("lq.toml");
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(|| verify_outputs(&s))
    };
    let (one, three) = (run(1), run(3));
    Outcome::new(
        one == three,
        format!(
            "{} bytes of verify output, identical with 1 and 3 threads: {}",
            one.len(),
            one == three
        ),
    )
}
