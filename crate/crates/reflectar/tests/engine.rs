use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflectar::dists::DiscreteMixture;
use reflectar::engine::{
    constant, infinite_product, pure, solve_multi_branch_commuting, solve_multi_branch_parts,
    solve_shift_chain, solve_single_branch, solve_two_branch, solve_with_linear_constants,
    AffineMap, BranchTerm, Constraint, EngineError, FunctionalEquation, SolveOptions,
};

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn one_branch(
    weight: impl Fn(Complex64) -> Complex64 + Send + Sync + 'static,
    scale: f64,
    inhom: impl Fn(Complex64) -> Complex64 + Send + Sync + 'static,
) -> FunctionalEquation {
    FunctionalEquation::new(
        vec![BranchTerm::new(pure(weight), AffineMap::scaling(scale))],
        pure(inhom),
        Vec::new(),
    )
}

#[test]
fn single_branch_zero_weight_returns_inhom() {
    let eq = one_branch(|_| Complex64::ZERO, 0.5, |s| (-s).exp());
    let s = c(0.7);
    let got = solve_single_branch(&eq, s, &SolveOptions::default()).unwrap();
    assert!((got - (-s).exp()).norm() < 1e-14);
}

#[test]
fn single_branch_constant_weight_sums_geometric_series() {
    let eq = one_branch(|_| c(0.5), 0.5, |_| c(1.0));
    let got = solve_single_branch(&eq, c(3.0), &SolveOptions::default()).unwrap();
    assert!((got - c(2.0)).norm() < 1e-10, "got {got}");
}

#[test]
fn single_branch_matches_brute_force_summation() {
    let eq = one_branch(|s| 0.9 * (-s).exp(), 0.5, |s| (-s).exp());
    let opts = SolveOptions {
        max_depth: 400,
        tail_tol: 1e-14,
        ..Default::default()
    };
    let s = c(1.0);
    let got = solve_single_branch(&eq, s, &opts).unwrap();
    // Independent direct summation, run far past convergence of the 0.9^n
    // envelope.
    let mut oracle = Complex64::ZERO;
    let mut prod = Complex64::ONE;
    let mut point = s;
    for _ in 0..1500 {
        oracle += prod * (-point).exp();
        prod *= 0.9 * (-point).exp();
        point *= 0.5;
    }
    assert!((got - oracle).norm() < 1e-12, "got {got} oracle {oracle}");
}

#[test]
fn single_branch_insufficient_depth_is_an_error() {
    let eq = one_branch(|s| 0.9 * (-s).exp(), 0.5, |s| (-s).exp());
    let opts = SolveOptions {
        max_depth: 40,
        ..Default::default()
    };
    assert!(matches!(
        solve_single_branch(&eq, c(1.0), &opts),
        Err(EngineError::NonConvergence { .. })
    ));
}

#[test]
fn two_branch_degenerate_second_weight_matches_single() {
    let two = FunctionalEquation::new(
        vec![
            BranchTerm::new(pure(|_| c(0.5)), AffineMap::scaling(0.5)),
            BranchTerm::new(constant(Complex64::ZERO), AffineMap::scaling(0.7)),
        ],
        constant(Complex64::ONE),
        Vec::new(),
    );
    let single = one_branch(|_| c(0.5), 0.5, |_| c(1.0));
    let opts = SolveOptions::default();
    let s = c(1.3);
    let a = solve_two_branch(&two, s, &opts).unwrap();
    let b = solve_single_branch(&single, s, &opts).unwrap();
    assert!((a - b).norm() < 1e-10, "{a} vs {b}");
}

#[test]
fn two_branch_coincident_maps_match_summed_weight() {
    let h0 = |s: Complex64| 0.2 * (-s).exp();
    let h1 = |s: Complex64| 0.1 / (1.0 + s);
    let l = |s: Complex64| (-0.3 * s).exp();
    let two = FunctionalEquation::new(
        vec![
            BranchTerm::new(pure(h0), AffineMap::scaling(0.6)),
            BranchTerm::new(pure(h1), AffineMap::scaling(0.6)),
        ],
        pure(l),
        Vec::new(),
    );
    let single = one_branch(move |s| h0(s) + h1(s), 0.6, l);
    let opts = SolveOptions::default();
    let s = c(0.9);
    let a = solve_two_branch(&two, s, &opts).unwrap();
    let b = solve_single_branch(&single, s, &opts).unwrap();
    assert!((a - b).norm() < 1e-10, "{a} vs {b}");
}

/// Sums weight products times the inhomogeneous term over every branch-choice
/// path up to the given depth, plus the depth-limit homogeneous mass. This is
/// the defining expansion, enumerated path by path with no lattice sharing.
fn enumerate_paths(
    weights: &[&dyn Fn(Complex64) -> Complex64],
    maps: &[AffineMap],
    inhom: &dyn Fn(Complex64) -> Complex64,
    point: Complex64,
    weight_so_far: Complex64,
    depth_left: usize,
) -> Complex64 {
    let mut total = weight_so_far * inhom(point);
    if depth_left > 0 {
        for (w, m) in weights.iter().zip(maps) {
            total += enumerate_paths(
                weights,
                maps,
                inhom,
                m.apply(point),
                weight_so_far * w(point),
                depth_left - 1,
            );
        }
    }
    total
}

#[test]
fn two_branch_matches_path_enumeration() {
    // Weights with small total mass so that layer 18 already contributes
    // below 1e-11 and the homogeneous part vanishes.
    let h0 = |s: Complex64| 0.15 * (-s).exp();
    let h1 = |s: Complex64| 0.1 / (1.0 + s);
    let l = |s: Complex64| (-0.4 * s).exp();
    let maps = [AffineMap::scaling(0.4), AffineMap::scaling(0.7)];
    let eq = FunctionalEquation::new(
        vec![
            BranchTerm::new(pure(h0), maps[0]),
            BranchTerm::new(pure(h1), maps[1]),
        ],
        pure(l),
        Vec::new(),
    );
    let opts = SolveOptions::default();
    for s in [c(0.5), c(2.0), Complex64::new(1.0, 0.8)] {
        let got = solve_two_branch(&eq, s, &opts).unwrap();
        let oracle = enumerate_paths(&[&h0, &h1], &maps, &l, s, Complex64::ONE, 18);
        assert!((got - oracle).norm() < 1e-10, "at {s}: {got} vs {oracle}");
    }
}

#[test]
fn multi_branch_single_branch_agrees_with_dedicated_solver() {
    let eq = one_branch(|_| c(0.4), 0.5, |s| (-s).exp());
    let opts = SolveOptions::default();
    let s = c(1.1);
    let multi = solve_multi_branch_commuting(&eq, s, &opts).unwrap();
    let single = solve_single_branch(&eq, s, &opts).unwrap();
    assert!((multi - single).norm() < 1e-10);
}

#[test]
fn multi_branch_matches_direct_table_recursion() {
    let h = [
        |s: Complex64| 0.1 * (-0.2 * s).exp(),
        |s: Complex64| c(0.05) / (1.0 + 0.1 * s),
    ];
    let scales = [0.3, 0.6];
    let l = |s: Complex64| (-0.5 * s).exp();
    let eq = FunctionalEquation::new(
        vec![
            BranchTerm::new(pure(h[0]), AffineMap::scaling(scales[0])),
            BranchTerm::new(pure(h[1]), AffineMap::scaling(scales[1])),
        ],
        pure(l),
        Vec::new(),
    );
    let opts = SolveOptions::default();
    let s = c(0.8);
    let got = solve_multi_branch_commuting(&eq, s, &opts).unwrap();

    // Direct triangular-table recursion on W[k][m] up to total depth 15,
    // written with explicit arrays rather than the solver's layer maps.
    let depth = 15usize;
    let pt = |k: usize, m: usize| scales[0].powi(k as i32) * scales[1].powi(m as i32) * s;
    let mut w = vec![vec![Complex64::ZERO; depth + 1]; depth + 1];
    w[0][0] = Complex64::ONE;
    let mut oracle = Complex64::ZERO;
    for n in 0..=depth {
        for k in 0..=n {
            let m = n - k;
            if n > 0 {
                let mut v = Complex64::ZERO;
                if k > 0 {
                    v += w[k - 1][m] * h[0](pt(k - 1, m));
                }
                if m > 0 {
                    v += w[k][m - 1] * h[1](pt(k, m - 1));
                }
                w[k][m] = v;
            }
            oracle += w[k][m] * l(pt(k, m));
            if n == depth {
                oracle += w[k][m];
            }
        }
    }
    assert!((got - oracle).norm() < 1e-10, "{got} vs {oracle}");
}

#[test]
fn multi_branch_rejects_non_commuting_maps() {
    let eq = FunctionalEquation::new(
        vec![
            BranchTerm::new(pure(|_| c(0.1)), AffineMap { scale: 0.5, shift: 0.0 }),
            BranchTerm::new(pure(|_| c(0.1)), AffineMap { scale: 0.5, shift: 1.0 }),
        ],
        constant(Complex64::ONE),
        Vec::new(),
    );
    assert!(matches!(
        solve_multi_branch_commuting(&eq, c(1.0), &SolveOptions::default()),
        Err(EngineError::NonCommutingMaps)
    ));
}

#[test]
fn multi_branch_supports_common_fixed_point_shifts() {
    // Maps z -> 1 - a + a z share the fixed point 1 and commute; the solved
    // value must satisfy the defining relation.
    let a = [0.4, 0.7];
    let h0 = |z: Complex64| 0.3 * z;
    let h1 = |z: Complex64| c(0.2) * z * z;
    let l = |z: Complex64| 0.1 + 0.05 * z;
    let eq = FunctionalEquation::new(
        vec![
            BranchTerm::new(pure(h0), AffineMap::toward(1.0, a[0])),
            BranchTerm::new(pure(h1), AffineMap::toward(1.0, a[1])),
        ],
        pure(l),
        Vec::new(),
    );
    let opts = SolveOptions::default();
    let z = c(0.3);
    let eval = |x: Complex64| solve_multi_branch_commuting(&eq, x, &opts).unwrap();
    let lhs = eval(z);
    let rhs = h0(z) * eval(AffineMap::toward(1.0, a[0]).apply(z))
        + h1(z) * eval(AffineMap::toward(1.0, a[1]).apply(z))
        + l(z);
    assert!((lhs - rhs).norm() < 1e-10, "residual {}", (lhs - rhs).norm());
}

#[test]
fn shift_chain_zero_arrival_rate_is_one() {
    let mix = DiscreteMixture::new(vec![0.5], vec![1.0]).unwrap();
    let got = solve_shift_chain(&mix, 0.0, 2.0, c(1.0), &SolveOptions::default()).unwrap();
    assert_eq!(got, Complex64::ONE);
}

#[test]
fn shift_chain_unit_value_gives_exponential_series() {
    let mix = DiscreteMixture::new(vec![1.0], vec![1.0]).unwrap();
    let (lam, mu) = (1.3, 1.7);
    let got = solve_shift_chain(&mix, lam, mu, c(0.0), &SolveOptions::default()).unwrap();
    assert!((got - c((lam / mu).exp())).norm() < 1e-12, "got {got}");
}

#[test]
fn shift_chain_matches_memoized_enumeration() {
    let mix = DiscreteMixture::new(vec![0.5, 0.8], vec![0.3, 0.7]).unwrap();
    let (lam, mu) = (1.0, 2.0);
    let got = solve_shift_chain(&mix, lam, mu, c(0.0), &SolveOptions::default()).unwrap();

    // Top-down recursion over occupancy pairs to depth 30.
    let depth = 30usize;
    let a = [0.5, 0.8];
    let p = [0.3, 0.7];
    let mut table = vec![vec![Complex64::ZERO; depth + 1]; depth + 1];
    table[0][0] = Complex64::ONE;
    let mut oracle = Complex64::ONE;
    for n in 1..=depth {
        for i in 0..=n {
            let j = n - i;
            let mut t = Complex64::ZERO;
            if i > 0 {
                let acc = (i - 1) as f64 * a[0] + j as f64 * a[1];
                t += table[i - 1][j] * p[0] * lam / (mu + mu * acc);
            }
            if j > 0 {
                let acc = i as f64 * a[0] + (j - 1) as f64 * a[1];
                t += table[i][j - 1] * p[1] * lam / (mu + mu * acc);
            }
            table[i][j] = t;
            oracle += t;
        }
    }
    assert!((got - oracle).norm() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn infinite_product_trivial_cases() {
    let opts = SolveOptions::default();
    let (p, _) = infinite_product(|_| Ok(Complex64::ONE), &opts).unwrap();
    assert_eq!(p, Complex64::ONE);
    // Factors exp(ln2 * 0.5^j) multiply to exp(2 ln 2) = 4.
    let (p, _) =
        infinite_product(|j| Ok(c((2.0f64.ln() * 0.5f64.powi(j as i32)).exp())), &opts).unwrap();
    assert!((p - c(4.0)).norm() < 1e-11, "got {p}");
}

#[test]
fn infinite_product_matches_direct_product() {
    let opts = SolveOptions::default();
    let (p, tail) = infinite_product(|j| Ok(c(1.0 + 0.3 * 0.6f64.powi(j as i32))), &opts).unwrap();
    let mut direct = 1.0f64;
    for j in 0..200 {
        direct *= 1.0 + 0.3 * 0.6f64.powi(j);
    }
    assert!((p - c(direct)).norm() < 1e-13, "{p} vs {direct}");
    assert!(tail < 1e-12);
}

#[test]
fn infinite_product_detects_divergence() {
    let opts = SolveOptions::default();
    assert!(matches!(
        infinite_product(|_| Ok(c(1.5)), &opts),
        Err(EngineError::ProductDivergence { .. })
    ));
}

#[test]
fn constants_no_unknowns_returns_full_solution() {
    // With weight 1/(1+s) toward 0 the homogeneous part is the infinite
    // product of the weights along the orbit; no constants involved.
    let a = 0.5;
    let eq = one_branch(move |s| 1.0 / (1.0 + s), a, |_| Complex64::ZERO);
    let sol = solve_with_linear_constants(eq, &[], &SolveOptions::default()).unwrap();
    assert!(sol.constants.is_empty());
    let s = c(0.8);
    let mut oracle = Complex64::ONE;
    for j in 0..200 {
        oracle *= 1.0 / (1.0 + a.powi(j) * s);
    }
    let got = sol.eval(s).unwrap();
    assert!((got - oracle).norm() < 1e-11, "{got} vs {oracle}");
}

#[test]
fn constants_identity_system_returns_given_values() {
    let eq = FunctionalEquation::new(
        vec![BranchTerm::new(pure(|_| c(0.3)), AffineMap::scaling(0.5))],
        constant(Complex64::ZERO),
        vec![constant(Complex64::ONE), pure(|s| s)],
    );
    let constraints = [
        Constraint::fix_constant(2, 0, c(2.5)),
        Constraint::fix_constant(2, 1, c(-1.25)),
    ];
    let sol = solve_with_linear_constants(eq, &constraints, &SolveOptions::default()).unwrap();
    assert!((sol.constants[0] - c(2.5)).norm() < 1e-12);
    assert!((sol.constants[1] - c(-1.25)).norm() < 1e-12);
    assert!(sol.diagnostics.linear_system_condition_number.is_some());
}

/// Mixed-delay style weight: service transform at the retained fraction
/// times the delay kernels. Used as a realistic one-constant pinning case.
struct DelayCase {
    p: f64,
    q: f64,
    cfrac: f64,
    a: f64,
    delta: f64,
    nu: f64,
}

impl DelayCase {
    fn phi_b(&self, s: Complex64) -> Complex64 {
        1.0 / (1.0 + s)
    }

    fn weight(&self, s: Complex64) -> Complex64 {
        let cbar = 1.0 - self.cfrac;
        self.phi_b(cbar * s)
            * (self.p * self.delta / (self.delta - s) + self.nu * self.q / (self.nu + s))
            + self.q * s / (self.nu + s) * self.phi_b(s + self.nu * self.cfrac)
    }
}

#[test]
fn constants_single_pin_matches_product_closed_form() {
    let case = DelayCase {
        p: 0.6,
        q: 0.4,
        cfrac: 0.4,
        a: 0.5,
        delta: 1.0,
        nu: 2.0,
    };
    let (a, delta) = (case.a, case.delta);
    let w = DelayCase { ..case };
    let eq = FunctionalEquation::new(
        vec![BranchTerm::new(
            Box::new(move |s| Ok(w.weight(s))),
            AffineMap::scaling(a),
        )],
        constant(Complex64::ZERO),
        vec![pure(move |s| -s / (delta - s))],
    );
    // Pin: C = p phi_B(delta cbar) Z(a delta).
    let pin_w = case.p * case.phi_b(c(delta * (1.0 - case.cfrac))).re;
    let constraints = [Constraint {
        const_coeffs: vec![Complex64::ONE],
        z_terms: vec![(c(-pin_w), c(a * delta))],
        rhs: Complex64::ZERO,
    }];
    let sol = solve_with_linear_constants(eq, &constraints, &SolveOptions::default()).unwrap();

    // Closed form by direct loops: C = w~ * prod_j H(a^{j+1} d) /
    // (1 + w~ * sum_n [a^{n+1} d / (d - a^{n+1} d)] prod_{j<n} H(a^{j+1} d)).
    let h = |x: f64| case.weight(c(x)).re;
    let mut prod_all = 1.0;
    for j in 0..200 {
        prod_all *= h(a.powi(j + 1) * delta);
    }
    let mut series = 0.0;
    let mut partial = 1.0;
    for n in 0..200 {
        let x = a.powi(n + 1) * delta;
        series += x / (delta - x) * partial;
        partial *= h(x);
    }
    let oracle = pin_w * prod_all / (1.0 + pin_w * series);
    assert!(
        (sol.constants[0] - c(oracle)).norm() < 1e-9,
        "pinned constant {} vs closed form {oracle}",
        sol.constants[0]
    );
    // The pinned transform is a proper stationary transform.
    let z0 = sol.eval(c(0.0)).unwrap();
    assert!((z0 - c(1.0)).norm() < 1e-9, "value at 0 is {z0}");
}

/// Hyper-jitter style two-constant equation reused by the reorder test.
fn two_constant_case() -> (FunctionalEquation, Vec<Constraint>) {
    let (p1, p2) = (0.5, 0.5);
    let (b1, b2) = (0.7, 0.4); // complements of the retained fractions
    let (q1, q2) = (0.4, 0.6);
    let (d1, d2) = (1.0, 2.5);
    let a = 0.5;
    let f = move |s: Complex64| p1 / (1.0 + b1 * s) + p2 / (1.0 + b2 * s);
    let v = move |s: Complex64| q1 * d1 / (d1 - s) + q2 * d2 / (d2 - s);
    let eq = FunctionalEquation::new(
        vec![BranchTerm::new(
            pure(move |s| v(s) * f(s)),
            AffineMap::scaling(a),
        )],
        constant(Complex64::ZERO),
        vec![
            pure(move |s| -s * q1 / (d1 - s)),
            pure(move |s| -s * q2 / (d2 - s)),
        ],
    );
    let constraints = vec![
        Constraint {
            const_coeffs: vec![Complex64::ONE, Complex64::ZERO],
            z_terms: vec![(c(-f(c(d1)).re), c(a * d1))],
            rhs: Complex64::ZERO,
        },
        Constraint {
            const_coeffs: vec![Complex64::ZERO, Complex64::ONE],
            z_terms: vec![(c(-f(c(d2)).re), c(a * d2))],
            rhs: Complex64::ZERO,
        },
    ];
    (eq, constraints)
}

#[test]
fn constants_invariant_under_constraint_reordering() {
    let (eq, constraints) = two_constant_case();
    let sol = solve_with_linear_constants(eq, &constraints, &SolveOptions::default()).unwrap();
    let (eq2, mut constraints2) = two_constant_case();
    constraints2.reverse();
    // Reversed rows permute the unknown-to-row pairing, not the unknowns.
    let sol2 = solve_with_linear_constants(eq2, &constraints2, &SolveOptions::default()).unwrap();
    for j in 0..2 {
        assert!(
            (sol.constants[j] - sol2.constants[j]).norm() < 1e-9,
            "constant {j} moved under reordering"
        );
    }
    for s in [c(0.0), c(0.7), c(3.0)] {
        let a = sol.eval(s).unwrap();
        let b = sol2.eval(s).unwrap();
        assert!((a - b).norm() < 1e-9);
    }
    let z0 = sol.eval(c(0.0)).unwrap();
    assert!((z0 - c(1.0)).norm() < 1e-9, "value at 0 is {z0}");
}

#[test]
fn constants_singular_system_is_rejected() {
    let eq = FunctionalEquation::new(
        vec![BranchTerm::new(pure(|_| c(0.3)), AffineMap::scaling(0.5))],
        constant(Complex64::ZERO),
        vec![constant(Complex64::ONE), constant(Complex64::ONE)],
    );
    let row = || Constraint {
        const_coeffs: vec![Complex64::ONE, Complex64::ONE],
        z_terms: Vec::new(),
        rhs: c(1.0),
    };
    let err =
        solve_with_linear_constants(eq, &[row(), row()], &SolveOptions::default()).unwrap_err();
    assert!(matches!(
        err,
        EngineError::SingularSystem { .. } | EngineError::IllConditioned { .. }
    ));
}

#[test]
fn converged_solves_satisfy_equation_residual() {
    // Residual |Z(s) - sum h_i(s) Z(g_i(s)) - L(s)| < 10 * tail_tol at
    // random points with Re(s) in [0, 5].
    let (eq, constraints) = two_constant_case();
    let opts = SolveOptions::default();
    let sol = solve_with_linear_constants(eq, &constraints, &opts).unwrap();
    let (eq_check, _) = two_constant_case();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let s = Complex64::new(rng.random_range(0.0..5.0), rng.random_range(-2.0..2.0));
        let z = sol.eval(s).unwrap();
        let mut rhs = Complex64::ZERO;
        for br in &eq_check.branches {
            rhs += (br.weight)(s).unwrap() * sol.eval(br.map.apply(s)).unwrap();
        }
        let mut inhom = Complex64::ZERO;
        for (cst, psi) in sol.constants.iter().zip(&eq_check.inhom_basis) {
            inhom += cst * psi(s).unwrap();
        }
        let residual = (z - rhs - inhom).norm();
        assert!(residual < 10.0 * opts.tail_tol, "residual {residual} at {s}");
    }
}

#[test]
fn doubling_depth_changes_converged_results_below_tolerance() {
    let h0 = |s: Complex64| 0.15 * (-s).exp();
    let h1 = |s: Complex64| 0.1 / (1.0 + s);
    let l = |s: Complex64| (-0.4 * s).exp();
    let build = || {
        FunctionalEquation::new(
            vec![
                BranchTerm::new(pure(h0), AffineMap::scaling(0.4)),
                BranchTerm::new(pure(h1), AffineMap::scaling(0.7)),
            ],
            pure(l),
            Vec::new(),
        )
    };
    let base = SolveOptions::default();
    let doubled = SolveOptions {
        max_depth: base.max_depth * 2,
        ..base
    };
    let s = c(0.9);
    let a = solve_two_branch(&build(), s, &base).unwrap();
    let b = solve_two_branch(&build(), s, &doubled).unwrap();
    assert!((a - b).norm() < base.tail_tol);
}

#[test]
fn parts_split_recomposes_full_solution() {
    // The forcing term vanishes at the fixed point, as in every stationary
    // equation; otherwise the path series cannot converge while the
    // homogeneous mass stays positive.
    let eq = one_branch(|s| 1.0 / (1.0 + 0.5 * s), 0.5, |s| 0.1 * s * (-s).exp());
    let opts = SolveOptions::default();
    let s = c(1.2);
    let (hom, forcing) = solve_multi_branch_parts(&eq, s, &opts).unwrap();
    let full = solve_multi_branch_commuting(&eq, s, &opts).unwrap();
    assert!((hom + forcing - full).norm() < 1e-14);
    let single_forcing = solve_single_branch(&eq, s, &opts).unwrap();
    assert!((forcing - single_forcing).norm() < 1e-14);
}
