//! Generic solvers for contraction-map functional equations.
//!
//! All equations handled here have the shape
//! Z(s) = sum_i h_i(s) Z(g_i(s)) + Phi(s) + sum_j C_j Psi_j(s)
//! with affine maps g_i that contract toward a common fixed point. Iterating
//! the equation produces path sums over a multi-index lattice: a homogeneous
//! part (products of weights alone, converging to the coefficient of
//! Z(fixed point) = 1) and a forcing part (weight products times the
//! inhomogeneous term at the composed argument). The solvers below evaluate
//! both parts layer by layer with explicit truncation control, and the
//! constant-determination step pins the C_j through a dense linear system.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::dists::DistError;

/// Maps closer than this (after composing both orders) count as commuting.
const COMMUTE_TOL: f64 = 1e-12;
/// Linear systems with condition number above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("series not converged: depth {depth} reached with tail bound {tail_bound}")]
    NonConvergence { depth: usize, tail_bound: f64 },
    #[error("term budget {cap} exhausted")]
    TermCapExceeded { cap: u64 },
    #[error("infinite product diverges: |factor - 1| stopped decreasing near index {index}")]
    ProductDivergence { index: usize },
    #[error("branch maps do not commute; this solver requires a common fixed point")]
    NonCommutingMaps,
    #[error("constant system is ill-conditioned (condition number {condition_number:.3e}) for constraints {constraints}")]
    IllConditioned {
        condition_number: f64,
        constraints: String,
    },
    #[error("constant system is singular for constraints {constraints}")]
    SingularSystem { constraints: String },
    #[error("{0}")]
    Dist(#[from] DistError),
    #[error("invalid equation: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Complex-valued function of a complex argument, fallible so that transform
/// evaluations can surface pole-guard errors.
pub type CFn = Box<dyn Fn(Complex64) -> Result<Complex64> + Send + Sync>;

/// Wraps an infallible closure as a [`CFn`].
pub fn pure(f: impl Fn(Complex64) -> Complex64 + Send + Sync + 'static) -> CFn {
    Box::new(move |s| Ok(f(s)))
}

/// A constant function as a [`CFn`].
pub fn constant(value: Complex64) -> CFn {
    Box::new(move |_| Ok(value))
}

/// s -> scale * s + shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub scale: f64,
    pub shift: f64,
}

impl AffineMap {
    pub fn scaling(scale: f64) -> Self {
        Self { scale, shift: 0.0 }
    }

    /// Map with the given contraction factor and fixed point.
    pub fn toward(fixed_point: f64, scale: f64) -> Self {
        Self {
            scale,
            shift: fixed_point * (1.0 - scale),
        }
    }

    pub fn apply(&self, s: Complex64) -> Complex64 {
        self.scale * s + self.shift
    }

    /// self after other: (self ∘ other)(s) = self(other(s)).
    pub fn compose(&self, other: &AffineMap) -> AffineMap {
        AffineMap {
            scale: self.scale * other.scale,
            shift: self.scale * other.shift + self.shift,
        }
    }

    pub fn commutes_with(&self, other: &AffineMap) -> bool {
        let ab = self.compose(other);
        let ba = other.compose(self);
        (ab.shift - ba.shift).abs() <= COMMUTE_TOL * (1.0 + ab.shift.abs())
    }
}

/// One h_i(s) Z(g_i(s)) term.
pub struct BranchTerm {
    pub weight: CFn,
    pub map: AffineMap,
}

impl BranchTerm {
    pub fn new(weight: CFn, map: AffineMap) -> Self {
        Self { weight, map }
    }
}

/// Z(s) = sum_i h_i(s) Z(g_i(s)) + Phi(s) + sum_j C_j Psi_j(s).
///
/// `constants` holds the current C vector; it is all zeros until a
/// determination step fills it in.
pub struct FunctionalEquation {
    pub branches: Vec<BranchTerm>,
    pub inhom_fixed: CFn,
    pub inhom_basis: Vec<CFn>,
    pub constants: Vec<Complex64>,
}

impl FunctionalEquation {
    pub fn new(branches: Vec<BranchTerm>, inhom_fixed: CFn, inhom_basis: Vec<CFn>) -> Self {
        let m = inhom_basis.len();
        Self {
            branches,
            inhom_fixed,
            inhom_basis,
            constants: vec![Complex64::ZERO; m],
        }
    }

    /// Phi(s) + sum_j C_j Psi_j(s) with the stored constants.
    pub fn inhom(&self, s: Complex64) -> Result<Complex64> {
        let mut total = (self.inhom_fixed)(s)?;
        for (c, psi) in self.constants.iter().zip(&self.inhom_basis) {
            total += c * psi(s)?;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub max_depth: usize,
    pub tail_tol: f64,
    pub term_cap: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_depth: 200,
            tail_tol: 1e-12,
            term_cap: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Diagnostics {
    pub depth_used: usize,
    pub tail_bound_estimate: f64,
    pub linear_system_condition_number: Option<f64>,
}

impl Diagnostics {
    fn series(depth_used: usize, tail_bound_estimate: f64) -> Self {
        Self {
            depth_used,
            tail_bound_estimate,
            linear_system_condition_number: None,
        }
    }

    /// Pointwise worst case of two diagnostics.
    pub fn merge(&self, other: &Diagnostics) -> Diagnostics {
        Diagnostics {
            depth_used: self.depth_used.max(other.depth_used),
            tail_bound_estimate: self.tail_bound_estimate.max(other.tail_bound_estimate),
            linear_system_condition_number: match (
                self.linear_system_condition_number,
                other.linear_system_condition_number,
            ) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
        }
    }
}

/// Evaluable solved transform: full value (homogeneous part included),
/// the pinned constants, and truncation/conditioning diagnostics.
pub struct TransformSolution {
    pub eval: Box<dyn Fn(Complex64) -> Result<Complex64> + Send + Sync>,
    pub constants: Vec<Complex64>,
    pub diagnostics: Diagnostics,
}

impl TransformSolution {
    pub fn eval(&self, s: Complex64) -> Result<Complex64> {
        (self.eval)(s)
    }
}

impl fmt::Debug for TransformSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformSolution")
            .field("constants", &self.constants)
            .field("diagnostics", &self.diagnostics)
            .finish_non_exhaustive()
    }
}

/// Homogeneous and forcing parts of a lattice evaluation, with one forcing
/// accumulator per requested inhomogeneous function.
struct LatticeOut {
    hom: Complex64,
    forcing: Vec<Complex64>,
    depth_used: usize,
    tail_bound: f64,
}

type InhomRef<'a> = &'a (dyn Fn(Complex64) -> Result<Complex64> + Send + Sync);

/// Layer-by-layer dynamic programming over the multi-index path lattice.
///
/// Node idx carries W_idx (sum of weight products over all orderings reaching
/// idx) and the composed point m_idx(s). Children receive W_idx * h_j(point).
/// The homogeneous layer sums H_n = sum_{|idx|=n} W_idx converge to the
/// coefficient multiplying Z at the fixed point; the forcing sums accumulate
/// sum_idx W_idx * L(m_idx(s)).
fn lattice_parts(
    branches: &[BranchTerm],
    inhoms: &[InhomRef<'_>],
    s: Complex64,
    opts: &SolveOptions,
) -> Result<LatticeOut> {
    if branches.is_empty() {
        return Err(EngineError::Invalid("no branches".into()));
    }
    for (i, a) in branches.iter().enumerate() {
        for b in &branches[i + 1..] {
            if !a.map.commutes_with(&b.map) {
                return Err(EngineError::NonCommutingMaps);
            }
        }
    }

    // BTreeMap keeps the summation order independent of hasher state, so
    // repeated runs produce bit-identical results.
    let k = branches.len();
    let mut layer: BTreeMap<Vec<u32>, (Complex64, Complex64)> = BTreeMap::new();
    layer.insert(vec![0u32; k], (Complex64::ONE, s));

    let mut forcing = vec![Complex64::ZERO; inhoms.len()];
    let mut hom_last = Complex64::ZERO;
    let mut calm_layers = 0usize;
    let mut terms: u64 = 0;
    let mut depth = 0usize;
    let mut tail = f64::INFINITY;

    for n in 0..=opts.max_depth {
        depth = n;
        // Layer sums: forcing contribution and homogeneous mass.
        let mut hom_n = Complex64::ZERO;
        let mut forcing_n = vec![Complex64::ZERO; inhoms.len()];
        for (w, p) in layer.values() {
            hom_n += w;
            for (acc, l) in forcing_n.iter_mut().zip(inhoms) {
                *acc += w * l(*p)?;
            }
            terms += 1 + inhoms.len() as u64;
            if terms > opts.term_cap {
                return Err(EngineError::TermCapExceeded { cap: opts.term_cap });
            }
        }
        for (acc, f) in forcing.iter_mut().zip(&forcing_n) {
            *acc += f;
        }
        let hom_step = (hom_n - hom_last).norm();
        let forcing_step: f64 = forcing_n.iter().map(|f| f.norm()).fold(0.0, f64::max);
        hom_last = hom_n;
        tail = hom_step.max(forcing_step);
        if n > 0 && tail < opts.tail_tol {
            calm_layers += 1;
            if calm_layers >= 2 {
                return Ok(LatticeOut {
                    hom: hom_last,
                    forcing,
                    depth_used: depth,
                    tail_bound: tail,
                });
            }
        } else {
            calm_layers = 0;
        }

        if n == opts.max_depth {
            break;
        }
        let mut next: BTreeMap<Vec<u32>, (Complex64, Complex64)> = BTreeMap::new();
        for (idx, (w, p)) in &layer {
            for (j, branch) in branches.iter().enumerate() {
                let hw = (branch.weight)(*p)?;
                terms += 1;
                if terms > opts.term_cap {
                    return Err(EngineError::TermCapExceeded { cap: opts.term_cap });
                }
                let mut child = idx.clone();
                child[j] += 1;
                let contrib = w * hw;
                let child_point = branch.map.apply(*p);
                next.entry(child)
                    .and_modify(|(cw, _)| *cw += contrib)
                    .or_insert((contrib, child_point));
            }
        }
        layer = next;
    }

    Err(EngineError::NonConvergence {
        depth,
        tail_bound: tail,
    })
}

/// Forcing series sum_n L(g^n s) prod_{j<n} K(g^j s) for a one-branch
/// equation, using the equation's current inhomogeneous term. The
/// homogeneous product is not included; compose it via [`infinite_product`]
/// or use [`solve_with_linear_constants`] for the full transform.
pub fn solve_single_branch(
    eq: &FunctionalEquation,
    s: Complex64,
    opts: &SolveOptions,
) -> Result<Complex64> {
    if eq.branches.len() != 1 {
        return Err(EngineError::Invalid(format!(
            "single-branch solver got {} branches",
            eq.branches.len()
        )));
    }
    let inhom = |p: Complex64| eq.inhom(p);
    let out = lattice_parts(&eq.branches, &[&inhom], s, opts)?;
    Ok(out.forcing[0])
}

/// Full two-branch solution: forcing path sum plus the homogeneous layer
/// limit (the coefficient of Z at the common fixed point, normalized to 1).
pub fn solve_two_branch(
    eq: &FunctionalEquation,
    s: Complex64,
    opts: &SolveOptions,
) -> Result<Complex64> {
    if eq.branches.len() != 2 {
        return Err(EngineError::Invalid(format!(
            "two-branch solver got {} branches",
            eq.branches.len()
        )));
    }
    solve_multi_branch_commuting(eq, s, opts)
}

/// Full solution for any number of pairwise-commuting branches.
pub fn solve_multi_branch_commuting(
    eq: &FunctionalEquation,
    s: Complex64,
    opts: &SolveOptions,
) -> Result<Complex64> {
    let (hom, forcing) = solve_multi_branch_parts(eq, s, opts)?;
    Ok(hom + forcing)
}

/// Homogeneous limit and forcing sum separately; callers that rescale the
/// homogeneous part (boundary value other than 1) need the split.
pub fn solve_multi_branch_parts(
    eq: &FunctionalEquation,
    s: Complex64,
    opts: &SolveOptions,
) -> Result<(Complex64, Complex64)> {
    let inhom = |p: Complex64| eq.inhom(p);
    let out = lattice_parts(&eq.branches, &[&inhom], s, opts)?;
    Ok((out.hom, out.forcing[0]))
}

/// Shifted product chain: returns
/// 1 + sum_{n>=1} sum_{multisets} prod_k g_{l_k} lambda / (mu + s + mu A_{k-1})
/// where A accumulates the mixture values already placed. Factors shrink like
/// lambda/(mu n a_min), so layers converge super-geometrically.
pub fn solve_shift_chain(
    weights: &crate::dists::DiscreteMixture,
    rate_num: f64,
    rate_den: f64,
    s: Complex64,
    opts: &SolveOptions,
) -> Result<Complex64> {
    weights.validate()?;
    if rate_num < 0.0 || rate_den <= 0.0 {
        return Err(EngineError::Invalid(
            "shift chain needs rate_num >= 0 and rate_den > 0".into(),
        ));
    }
    if rate_num == 0.0 {
        return Ok(Complex64::ONE);
    }
    let k = weights.values.len();
    let mut layer: BTreeMap<Vec<u32>, Complex64> = BTreeMap::new();
    layer.insert(vec![0u32; k], Complex64::ONE);
    let mut total = Complex64::ONE;
    let mut terms: u64 = 0;
    for _ in 1..=opts.max_depth {
        let mut next: BTreeMap<Vec<u32>, Complex64> = BTreeMap::new();
        for (idx, t) in &layer {
            let acc: f64 = idx
                .iter()
                .zip(&weights.values)
                .map(|(c, a)| *c as f64 * a)
                .sum();
            let denom = rate_den + s + rate_den * acc;
            for j in 0..k {
                terms += 1;
                if terms > opts.term_cap {
                    return Err(EngineError::TermCapExceeded { cap: opts.term_cap });
                }
                let factor = weights.probs[j] * rate_num / denom;
                let mut child = idx.clone();
                child[j] += 1;
                *next.entry(child).or_insert(Complex64::ZERO) += t * factor;
            }
        }
        let layer_sum: Complex64 = next.values().sum();
        total += layer_sum;
        if layer_sum.norm() < opts.tail_tol {
            return Ok(total);
        }
        layer = next;
    }
    Err(EngineError::NonConvergence {
        depth: opts.max_depth,
        tail_bound: f64::NAN,
    })
}

/// prod_{j>=0} factor(j) for factors tending to 1 geometrically.
/// Returns the product and a tail bound estimate.
pub fn infinite_product(
    factor: impl Fn(usize) -> Result<Complex64>,
    opts: &SolveOptions,
) -> Result<(Complex64, f64)> {
    let mut product = Complex64::ONE;
    let mut prev_dev = f64::INFINITY;
    let mut non_decreasing = 0usize;
    let mut last_ratio = 0.5f64;
    for j in 0..(opts.max_depth * 50) {
        let f = factor(j)?;
        product *= f;
        let dev = (f - Complex64::ONE).norm();
        if dev >= prev_dev && dev > opts.tail_tol {
            non_decreasing += 1;
            if non_decreasing >= 50 {
                return Err(EngineError::ProductDivergence { index: j });
            }
        } else {
            non_decreasing = 0;
        }
        if prev_dev.is_finite() && prev_dev > 0.0 {
            last_ratio = (dev / prev_dev).clamp(0.0, 0.999);
        }
        if dev < opts.tail_tol {
            // Remaining factors deviate by at most dev * r/(1-r) in log space.
            let tail = product.norm() * dev * last_ratio / (1.0 - last_ratio);
            if tail < opts.tail_tol {
                // Fold in the geometric extrapolation of the remaining
                // deviations; the residual error is then of order dev^2.
                let correction =
                    Complex64::ONE + (f - Complex64::ONE) * last_ratio / (1.0 - last_ratio);
                return Ok((product * correction, tail));
            }
        }
        prev_dev = dev;
        if product.norm() < opts.tail_tol * opts.tail_tol {
            // The product has collapsed to zero; later factors cannot
            // resurrect it at this precision.
            return Ok((product, product.norm()));
        }
    }
    Err(EngineError::NonConvergence {
        depth: opts.max_depth * 50,
        tail_bound: prev_dev,
    })
}

/// One linear relation pinning the constants:
/// sum_j const_coeffs[j] * C_j + sum_q w_q * Z(x_q) = rhs.
pub struct Constraint {
    pub const_coeffs: Vec<Complex64>,
    /// (weight, evaluation point) pairs contributing w * Z(x) to the left side.
    pub z_terms: Vec<(Complex64, Complex64)>,
    pub rhs: Complex64,
}

impl Constraint {
    /// Constraint C_j = value.
    pub fn fix_constant(m: usize, j: usize, value: Complex64) -> Self {
        let mut coeffs = vec![Complex64::ZERO; m];
        coeffs[j] = Complex64::ONE;
        Self {
            const_coeffs: coeffs,
            z_terms: Vec::new(),
            rhs: value,
        }
    }
}

/// Solves for the unknown constants and returns the assembled transform.
///
/// The solution is affine in the constants: Z = Phi* + sum_j C_j Psi*_j,
/// where Phi* carries the homogeneous part plus the fixed forcing and each
/// Psi*_j is the forcing response to basis term j alone. Substituting this
/// into the constraints yields a dense m-by-m system solved with partial
/// pivoting; the condition number is reported and large values rejected.
pub fn solve_with_linear_constants(
    eq: FunctionalEquation,
    constraints: &[Constraint],
    opts: &SolveOptions,
) -> Result<TransformSolution> {
    let m = eq.inhom_basis.len();
    if constraints.len() != m {
        return Err(EngineError::Invalid(format!(
            "{} constraints for {} constants",
            constraints.len(),
            m
        )));
    }
    for c in constraints {
        if c.const_coeffs.len() != m {
            return Err(EngineError::Invalid(
                "constraint coefficient length mismatch".into(),
            ));
        }
    }

    let mut diag = Diagnostics {
        depth_used: 0,
        tail_bound_estimate: 0.0,
        linear_system_condition_number: None,
    };

    let mut constants = vec![Complex64::ZERO; m];
    if m > 0 {
        // Basis responses at every constraint evaluation point, computed in
        // one lattice pass per point.
        let mut responses: HashMap<(u64, u64), (Complex64, Vec<Complex64>)> = HashMap::new();
        for c in constraints {
            for (_, x) in &c.z_terms {
                let key = point_key(*x);
                if responses.contains_key(&key) {
                    continue;
                }
                let (phi_star, psi_star, d) = basis_responses(&eq, *x, opts)?;
                diag = diag.merge(&d);
                responses.insert(key, (phi_star, psi_star));
            }
        }

        let mut a = DMatrix::<Complex<f64>>::zeros(m, m);
        let mut b = DVector::<Complex<f64>>::zeros(m);
        for (i, c) in constraints.iter().enumerate() {
            let mut rhs = c.rhs;
            for (j, alpha) in c.const_coeffs.iter().enumerate() {
                a[(i, j)] = *alpha;
            }
            for (w, x) in &c.z_terms {
                let (phi_star, psi_star) = &responses[&point_key(*x)];
                rhs -= w * phi_star;
                for j in 0..m {
                    a[(i, j)] += w * psi_star[j];
                }
            }
            b[i] = rhs;
        }

        let cond = condition_number(&a);
        diag.linear_system_condition_number = Some(cond);
        let describe = || format!("{} relations on {} constants", constraints.len(), m);
        if !cond.is_finite() {
            return Err(EngineError::SingularSystem {
                constraints: describe(),
            });
        }
        if cond > MAX_CONDITION {
            return Err(EngineError::IllConditioned {
                condition_number: cond,
                constraints: describe(),
            });
        }
        let solved = a
            .lu()
            .solve(&b)
            .ok_or_else(|| EngineError::SingularSystem {
                constraints: describe(),
            })?;
        for j in 0..m {
            constants[j] = solved[j];
        }
    } else {
        // Probe once so the diagnostics reflect a real evaluation.
        let (_, _, d) = basis_responses(&eq, Complex64::ONE, opts)?;
        diag = diag.merge(&d);
    }

    let mut eq = eq;
    eq.constants.clone_from(&constants);
    let opts = *opts;
    let eval_eq = std::sync::Arc::new(eq);
    let closure_eq = eval_eq.clone();
    let eval = Box::new(move |s: Complex64| -> Result<Complex64> {
        let (phi_star, psi_star, _) = basis_responses(&closure_eq, s, &opts)?;
        let mut z = phi_star;
        for (c, p) in closure_eq.constants.iter().zip(&psi_star) {
            z += c * p;
        }
        Ok(z)
    });

    Ok(TransformSolution {
        eval,
        constants,
        diagnostics: diag,
    })
}

/// Phi*(s) (homogeneous limit plus fixed forcing) and the basis forcing
/// responses Psi*_j(s), sharing one lattice pass.
fn basis_responses(
    eq: &FunctionalEquation,
    s: Complex64,
    opts: &SolveOptions,
) -> Result<(Complex64, Vec<Complex64>, Diagnostics)> {
    let mut inhoms: Vec<InhomRef<'_>> = vec![&*eq.inhom_fixed];
    for psi in &eq.inhom_basis {
        inhoms.push(&**psi);
    }
    let out = lattice_parts(&eq.branches, &inhoms, s, opts)?;
    let phi_star = out.hom + out.forcing[0];
    let psi_star = out.forcing[1..].to_vec();
    Ok((
        phi_star,
        psi_star,
        Diagnostics::series(out.depth_used, out.tail_bound),
    ))
}

fn point_key(x: Complex64) -> (u64, u64) {
    (x.re.to_bits(), x.im.to_bits())
}

fn condition_number(a: &DMatrix<Complex<f64>>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let svd = a.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
