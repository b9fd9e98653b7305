//! Orbit and two-class pgf checks: hat-pgf limits, atom identities, residuals
//! of the defining recursions re-evaluated through the solved functions, and
//! closed-form oracles for the service-start root.

use num_complex::Complex64;
use reflectar::dists::{DiscreteMixture, Dist};
use reflectar::engine::SolveOptions;
use reflectar::retrial::{
    build_hat_pgfs, root_q, solve_orbit_pgf, solve_orbit_pgf_instant_retrieval, solve_priority,
    ClassArrivals, JointPgf, OrbitSpec, PgfSpec, PrioritySpec, RetrialError,
};

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn opts() -> SolveOptions {
    SolveOptions::default()
}

fn poisson_window(rate: f64, service_rate: f64) -> PgfSpec {
    PgfSpec::PoissonDuringService {
        rate,
        service: Dist::Exponential { rate: service_rate },
    }
}

/// Single retention atom, shared window laws, moderate impatience.
fn baseline_orbit() -> OrbitSpec {
    OrbitSpec {
        rate_empty: 1.0,
        rate_busy: 1.0,
        retrieval_empty: 2.0,
        retrieval_busy: 2.0,
        arrivals_busy: poisson_window(1.0, 4.0),
        arrivals_empty: poisson_window(1.0, 4.0),
        retention: DiscreteMixture::single(0.8),
        classes: None,
    }
}

/// Two retention atoms and distinct empty/busy window laws.
fn mixed_orbit() -> OrbitSpec {
    OrbitSpec {
        rate_empty: 0.7,
        rate_busy: 1.2,
        retrieval_empty: 1.5,
        retrieval_busy: 2.5,
        arrivals_busy: poisson_window(0.9, 3.0),
        arrivals_empty: PgfSpec::Polynomial {
            coeffs: vec![0.35, 0.4, 0.25],
        },
        retention: DiscreteMixture::new(vec![0.5, 0.8], vec![0.4, 0.6]).unwrap(),
        classes: None,
    }
}

fn baseline_priority() -> PrioritySpec {
    PrioritySpec {
        rate_primary: 0.5,
        rate_orbit: 0.3,
        retrieval: 2.0,
        arrivals: JointPgf::PoissonDuringService {
            service: Dist::Exponential { rate: 2.0 },
        },
        retention: DiscreteMixture::single(0.7),
    }
}

#[test]
fn hat_pgfs_are_one_at_one() {
    for spec in [baseline_orbit(), mixed_orbit()] {
        let (chat, ghat) = build_hat_pgfs(&spec, c(1.0)).unwrap();
        assert!((chat - 1.0).norm() < 1e-12, "busy hat at 1: {chat}");
        assert!((ghat - 1.0).norm() < 1e-12, "empty hat at 1: {ghat}");
    }
}

/// With retrieval rates far above the arrival rates the race is always won
/// by the retrieval, and the tilted window laws collapse to the plain ones.
#[test]
fn fast_retrieval_hats_collapse_to_plain_windows() {
    let mut spec = mixed_orbit();
    spec.retrieval_empty = 1e12;
    spec.retrieval_busy = 1e12;
    for z in [0.0, 0.3, 0.6, 0.9] {
        let (chat, ghat) = build_hat_pgfs(&spec, c(z)).unwrap();
        let plain_c = spec.arrivals_busy.eval(c(z)).unwrap();
        let plain_g = spec.arrivals_empty.eval(c(z)).unwrap();
        assert!((chat - plain_c).norm() < 1e-10, "busy at {z}");
        assert!((ghat - plain_g).norm() < 1e-10, "empty at {z}");
    }
}

/// Class-dependent window laws that coincide with the shared law must give
/// the same hats and the same solved pgf as the shared-law form.
#[test]
fn coincident_class_laws_collapse() {
    let shared = mixed_orbit();
    let mut classed = shared.clone();
    classed.classes = Some(ClassArrivals {
        busy_orbit_served: shared.arrivals_busy.clone(),
        busy_arrival_served: shared.arrivals_busy.clone(),
        empty_orbit_served: shared.arrivals_empty.clone(),
        empty_arrival_served: shared.arrivals_empty.clone(),
    });
    for z in [0.1, 0.45, 0.8] {
        let (c1, g1) = build_hat_pgfs(&shared, c(z)).unwrap();
        let (c2, g2) = build_hat_pgfs(&classed, c(z)).unwrap();
        assert!((c1 - c2).norm() < 1e-12);
        assert!((g1 - g2).norm() < 1e-12);
    }
    let a = solve_orbit_pgf(&shared, &opts()).unwrap();
    let b = solve_orbit_pgf(&classed, &opts()).unwrap();
    assert!((a.f0 - b.f0).abs() < 1e-10, "{} vs {}", a.f0, b.f0);
    for z in [0.2, 0.5, 0.9] {
        let da = a.eval(z).unwrap();
        let db = b.eval(z).unwrap();
        assert!((da - db).abs() < 1e-10, "pgf at {z}: {da} vs {db}");
    }
}

#[test]
fn orbit_pgf_is_normalized() {
    for spec in [baseline_orbit(), mixed_orbit()] {
        let sol = solve_orbit_pgf(&spec, &opts()).unwrap();
        assert!((sol.eval(1.0).unwrap() - 1.0).abs() < 1e-8);
        assert!(sol.f0 > 0.0 && sol.f0 < 1.0, "f0 = {}", sol.f0);
        assert!(sol.mean > 0.0, "mean = {}", sol.mean);
    }
}

/// When the busy window brings no arrivals, C(0) = 1 makes the pinned mass
/// equal the recursion's removability mass, so the origin pole cancels and
/// the solution is analytic. For busy window [1], empty window [0, 1],
/// retention 0.6 and races (1, 2)/(1, 3) the recursion is solved by hand by
/// a linear function: matching coefficients in
/// f(z) = ((3 + z)/(4z)) f(0.4 + 0.6z) + f0 ((2 + z)/3 - (3 + z)/(4z))
/// with the pin f0 = f(0.4) gives f(z) = (43 + 20z)/63 and f0 = 51/63.
/// The stored constant is the thinned-empty mass f(0.4), not the function's
/// own origin value 43/63.
#[test]
fn orbit_matches_hand_solved_linear_family() {
    let spec = OrbitSpec {
        rate_empty: 1.0,
        rate_busy: 1.0,
        retrieval_empty: 2.0,
        retrieval_busy: 3.0,
        arrivals_busy: PgfSpec::Polynomial { coeffs: vec![1.0] },
        arrivals_empty: PgfSpec::Polynomial {
            coeffs: vec![0.0, 1.0],
        },
        retention: DiscreteMixture::single(0.6),
        classes: None,
    };
    let sol = solve_orbit_pgf(&spec, &opts()).unwrap();
    assert!((sol.f0 - 51.0 / 63.0).abs() < 1e-9, "f0 = {}", sol.f0);
    assert!((sol.mean - 20.0 / 63.0).abs() < 1e-7, "mean = {}", sol.mean);
    let mut prev = 0.0;
    for k in 1..=20 {
        let z = k as f64 / 20.0;
        let v = sol.eval(z).unwrap();
        let linear = (43.0 + 20.0 * z) / 63.0;
        assert!((v - linear).abs() < 1e-9, "f({z}) = {v} vs {linear}");
        assert!(v >= prev && v <= 1.0 + 1e-9);
        prev = v;
    }
}

/// With busy-window arrivals the pinned identity f(0) = C(0) sum p_i f(abar_i)
/// sits below the removability mass sum p_i f(abar_i), so the solved function
/// keeps a simple pole at the origin: values just above 0 leave the unit
/// interval, while the stored f0 carries the atom and the regular tail rises
/// to 1. This documents the shape rather than papering over it.
#[test]
fn orbit_origin_pole_under_pinned_identity() {
    for spec in [baseline_orbit(), mixed_orbit()] {
        let sol = solve_orbit_pgf(&spec, &opts()).unwrap();
        assert!(sol.eval(0.05).unwrap() > 1.0, "origin pole absent");
        let mut prev = 0.0;
        for k in 10..=20 {
            let z = k as f64 / 20.0;
            let v = sol.eval(z).unwrap();
            assert!((0.0..=1.0 + 1e-8).contains(&v), "f({z}) = {v}");
            assert!(v >= prev - 1e-10, "tail not monotone at {z}");
            prev = v;
        }
    }
}

/// The empty-orbit probability satisfies the retention-atom identity
/// f(0) = C(0) sum_i p_i f(abar_i).
#[test]
fn orbit_atom_identity() {
    for spec in [baseline_orbit(), mixed_orbit()] {
        let sol = solve_orbit_pgf(&spec, &opts()).unwrap();
        let c0 = spec.arrivals_busy.eval(c(0.0)).unwrap().re;
        let mut mixed = 0.0;
        for (a, p) in spec.retention.values.iter().zip(&spec.retention.probs) {
            mixed += p * sol.eval(1.0 - a).unwrap();
        }
        let residual = (sol.f0 - c0 * mixed).abs();
        assert!(residual < 1e-8, "atom identity residual {residual:.3e}");
    }
}

/// The solved pgf satisfies the defining recursion
/// f(z) = (Chat(z)/z) sum_i p_i f(abar_i + a_i z) + f(0) k(z)
/// with k(z) = (Ghat(0)(z - 1) + Ghat(z) - Chat(z))/z.
#[test]
fn orbit_equation_residual_on_interior_grid() {
    for spec in [baseline_orbit(), mixed_orbit()] {
        let sol = solve_orbit_pgf(&spec, &opts()).unwrap();
        let ghat0 = build_hat_pgfs(&spec, c(0.0)).unwrap().1;
        for k in 0..20 {
            let z = 0.05 + 0.9 * k as f64 / 19.0;
            let zc = c(z);
            let (chat, ghat) = build_hat_pgfs(&spec, zc).unwrap();
            let forcing = (ghat0 * (zc - 1.0) + ghat - chat) / zc;
            let mut comp = Complex64::ZERO;
            for (a, p) in spec.retention.values.iter().zip(&spec.retention.probs) {
                comp += p * sol.eval(1.0 - a * (1.0 - z)).unwrap();
            }
            let rhs = chat / zc * comp + sol.f0 * forcing;
            let residual = (sol.eval(z).unwrap() - rhs.re).abs();
            assert!(residual < 1e-8, "residual {residual:.3e} at z = {z}");
        }
    }
}

/// Sending both retrieval rates to infinity in the raced solver recovers the
/// instant-retrieval solver.
#[test]
fn instant_retrieval_is_the_fast_race_limit() {
    let mut fast = mixed_orbit();
    fast.retrieval_empty = 1e12;
    fast.retrieval_busy = 1e12;
    let raced = solve_orbit_pgf(&fast, &opts()).unwrap();
    let instant = solve_orbit_pgf_instant_retrieval(&mixed_orbit(), &opts()).unwrap();
    assert!(
        (raced.f0 - instant.f0).abs() < 1e-6,
        "{} vs {}",
        raced.f0,
        instant.f0
    );
    for z in [0.1, 0.4, 0.7, 0.95] {
        let a = raced.eval(z).unwrap();
        let b = instant.eval(z).unwrap();
        assert!((a - b).abs() < 1e-6, "pgf at {z}: {a} vs {b}");
    }
    assert!((raced.mean - instant.mean).abs() < 1e-5);
}

#[test]
fn orbit_rejects_full_retention() {
    let mut spec = baseline_orbit();
    spec.retention = DiscreteMixture::single(1.0);
    assert!(matches!(
        solve_orbit_pgf(&spec, &opts()),
        Err(RetrialError::InvalidSpec(_))
    ));
}

#[test]
fn orbit_rejects_bad_windows() {
    let mut spec = baseline_orbit();
    spec.arrivals_busy = PgfSpec::Polynomial {
        coeffs: vec![0.5, 0.2],
    };
    assert!(matches!(
        solve_orbit_pgf(&spec, &opts()),
        Err(RetrialError::InvalidSpec(_))
    ));
    let mut spec = baseline_orbit();
    spec.rate_busy = -1.0;
    assert!(matches!(
        solve_orbit_pgf(&spec, &opts()),
        Err(RetrialError::InvalidSpec(_))
    ));
}

/// A window law without z1-dependence makes the root iteration converge in
/// one step to the orbit-marginal pgf.
#[test]
fn root_matches_flat_arrival_law() {
    let spec = PrioritySpec {
        rate_primary: 0.4,
        rate_orbit: 0.6,
        retrieval: 1.0,
        arrivals: JointPgf::Polynomial {
            coeffs: vec![vec![0.3, 0.5, 0.2]],
        },
        retention: DiscreteMixture::single(0.5),
    };
    for z2 in [0.0, 0.25, 0.6, 1.0] {
        let q = root_q(&spec, z2).unwrap();
        let direct = 0.3 + 0.5 * z2 + 0.2 * z2 * z2;
        assert!((q - direct).abs() < 1e-12, "q({z2}) = {q} vs {direct}");
    }
}

/// Exponential service makes the root the smaller zero of a quadratic.
#[test]
fn root_matches_exponential_service_quadratic() {
    let spec = baseline_priority();
    let (mu, l1, l2) = (2.0, spec.rate_primary, spec.rate_orbit);
    for z2 in [0.0, 0.3, 0.7, 1.0] {
        let b = mu + l1 + l2 * (1.0 - z2);
        let closed = (b - (b * b - 4.0 * l1 * mu).sqrt()) / (2.0 * l1);
        let q = root_q(&spec, z2).unwrap();
        assert!((q - closed).abs() < 1e-12, "q({z2}) = {q} vs {closed}");
    }
}

/// An arrival law that fixes every z1 has no isolated root.
#[test]
fn root_rejects_identity_arrival_law() {
    let spec = PrioritySpec {
        rate_primary: 0.4,
        rate_orbit: 0.6,
        retrieval: 1.0,
        arrivals: JointPgf::Polynomial {
            coeffs: vec![vec![0.0], vec![1.0]],
        },
        retention: DiscreteMixture::single(0.5),
    };
    assert!(matches!(
        root_q(&spec, 0.5),
        Err(RetrialError::InvalidSpec(_))
    ));
}

#[test]
fn priority_is_normalized_and_consistent() {
    let sol = solve_priority(&baseline_priority(), &opts()).unwrap();
    assert!((sol.eval(1.0, 1.0).unwrap() - 1.0).abs() < 1e-8);
    // Empty-queue probability has the closed form (1 - m1)/A(0, 1): here the
    // queueing-class load is 0.25 and A(0, 1) = 2/2.5.
    assert!((sol.empty_queue_prob - 0.9375).abs() < 1e-10);
    assert!((sol.section(1.0).unwrap() - sol.empty_queue_prob).abs() < 1e-9);
    // The boundary section is the z1 = 0 slice of the assembled pgf.
    for z2 in [0.05, 0.3, 0.65, 0.9] {
        let a = sol.section(z2).unwrap();
        let b = sol.eval(0.0, z2).unwrap();
        assert!((a - b).abs() < 1e-9, "section vs eval at {z2}: {a} vs {b}");
    }
    assert!(sol.mean_primary > 0.0 && sol.mean_orbit > 0.0);
}

/// The pinned constant equals the thinned-empty mass sum_i p_i F(0, abar_i);
/// the joint atom F(0, 0) sits strictly below it under impatience.
#[test]
fn priority_pin_identity_and_atom() {
    let spec = baseline_priority();
    let sol = solve_priority(&spec, &opts()).unwrap();
    let mut mixed = 0.0;
    for (a, p) in spec.retention.values.iter().zip(&spec.retention.probs) {
        mixed += p * sol.section(1.0 - a).unwrap();
    }
    assert!(
        (sol.f00 - mixed).abs() < 1e-8,
        "pin residual {:.3e}",
        (sol.f00 - mixed).abs()
    );
    let atom = sol.eval(0.0, 0.0).unwrap();
    assert!((sol.section(0.0).unwrap() - atom).abs() < 1e-8);
    assert!(atom > 0.0 && atom < sol.f00, "atom {atom} vs pin {}", sol.f00);
}

/// The boundary section satisfies its reduced recursion
/// F(0, z2) = g(z2) sum_i p_i F(0, m_i(z2)) + K l(z2) at the root z1 = q(z2).
#[test]
fn priority_section_equation_residual() {
    let spec = baseline_priority();
    let sol = solve_priority(&spec, &opts()).unwrap();
    let lam = spec.rate_primary + spec.rate_orbit;
    let al = spec.retrieval;
    let a00 = spec
        .arrivals
        .eval_at(spec.rate_primary, spec.rate_orbit, c(0.0), c(0.0))
        .unwrap();
    for z2 in [0.15, 0.4, 0.6, 0.85] {
        let q = root_q(&spec, z2).unwrap();
        let a0z2 = spec
            .arrivals
            .eval_at(spec.rate_primary, spec.rate_orbit, c(0.0), c(z2))
            .unwrap();
        let idle = al + lam * (1.0 - q);
        let g = al * q / (z2 * idle);
        let l = (a00.re * al * (z2 - 1.0) * q) / (a0z2.re * idle * z2);
        let mut comp = 0.0;
        for (a, p) in spec.retention.values.iter().zip(&spec.retention.probs) {
            comp += p * sol.section(1.0 - a * (1.0 - z2)).unwrap();
        }
        let rhs = g * comp + sol.f00 * l;
        let residual = (sol.section(z2).unwrap() - rhs).abs();
        assert!(residual < 1e-8, "residual {residual:.3e} at z2 = {z2}");
    }
}

#[test]
fn priority_rejects_overloaded_queueing_class() {
    let mut spec = baseline_priority();
    spec.rate_primary = 2.5;
    assert!(matches!(
        solve_priority(&spec, &opts()),
        Err(RetrialError::InvalidSpec(_))
    ));
}

#[test]
fn priority_handles_polynomial_joint_law() {
    let spec = PrioritySpec {
        rate_primary: 0.4,
        rate_orbit: 0.3,
        retrieval: 1.5,
        arrivals: JointPgf::Polynomial {
            coeffs: vec![
                vec![0.3, 0.2],
                vec![0.2, 0.1],
                vec![0.15, 0.05],
            ],
        },
        retention: DiscreteMixture::single(0.6),
    };
    let sol = solve_priority(&spec, &opts()).unwrap();
    assert!((sol.eval(1.0, 1.0).unwrap() - 1.0).abs() < 1e-8);
    // m1 = 0.3 + 2 * 0.2 and A(0, 1) = 0.5 give (1 - m1)/A(0, 1) = 0.6.
    assert!((sol.empty_queue_prob - 0.6).abs() < 1e-10);
    for (z1, z2) in [(0.3, 0.8), (0.9, 0.2), (0.5, 0.5)] {
        let v = sol.eval(z1, z2).unwrap();
        assert!((0.0..=1.0 + 1e-8).contains(&v), "F({z1},{z2}) = {v}");
    }
}
