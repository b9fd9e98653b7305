//! Model layer: turns each dependence structure into its functional-equation
//! form, pins the unknown constants, and packages the solved transform with
//! the atom at zero, the stationary mean, and a real evaluation grid.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dists::{chi_psi, DiscreteMixture, Dist, DistError};
use crate::engine::{
    self, infinite_product, solve_shift_chain, solve_with_linear_constants, AffineMap, BranchTerm,
    CFn, Constraint, Diagnostics, EngineError, FunctionalEquation, SolveOptions, TransformSolution,
};

/// Closure-level pole guard distance; matches the distribution layer.
const POLE_TOL: f64 = 1e-12;
/// Distance below which evaluation switches to the circle average.
const NEAR_POLE: f64 = 1e-6;
/// Radius of the four-point average around removable singularities.
const CIRCLE_RADIUS: f64 = 1e-3;
/// Imaginary step for derivatives at the origin. The step enters only through
/// the imaginary part, so there is no subtractive cancellation and the result
/// is exact to machine precision.
const DERIV_STEP: f64 = 1e-100;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("normalization pin is degenerate (coefficient {coeff:.3e})")]
    DegeneratePin { coeff: f64 },
    #[error("offered load {rho:.4} admits no stationary regime")]
    Unstable { rho: f64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Service scaled proportionally into the next interarrival time plus an
/// additive delay: W' = [aW + (1-G)B - J]+ with G drawn from `scale`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropService {
    pub a: f64,
    pub service: Dist,
    pub scale: DiscreteMixture,
    pub delay: Dist,
}

/// Additive delay of mixed sign: the interarrival is (cB + J)+ where J is
/// positive with probability `p_plus` (rates from `delay_plus`) and negative
/// otherwise (magnitude from `delay_minus`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedDelay {
    pub a: f64,
    pub scale: DiscreteMixture,
    pub p_plus: f64,
    pub service: Dist,
    pub delay_plus: Dist,
    pub delay_minus: Dist,
}

/// Interarrival proportional to the previous system time:
/// W' = [(1 - eps*beta)(W + B) - J]+ with beta drawn from `scale` and
/// J exponential with rate `rate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemTime {
    pub rate: f64,
    pub service: Dist,
    pub scale: DiscreteMixture,
    pub epsilon: f64,
}

/// Service truncated in proportion to the current wait:
/// W' = [W + [B - Omega*W]+ - A]+ with A ~ exp(arrival_rate),
/// B ~ exp(service_rate), Omega drawn from `obsolescence`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaitDepService {
    pub arrival_rate: f64,
    pub service_rate: f64,
    pub obsolescence: DiscreteMixture,
}

/// Regime switch on whether the service request exceeds a random threshold:
/// below it the registered service is B, the wait scales by a0, and the
/// interarrival is exp(lambda0); above it the registered service is T, the
/// wait scales by a1, and the interarrival is exp(lambda1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Threshold {
    pub a0: f64,
    pub a1: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub service: Dist,
    pub threshold: Dist,
}

/// Interarrival built from an independent rational-transform part `chi` plus
/// service-dependent components: A = X + D_i(B) where i is drawn from the
/// `psi` term weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralDep {
    pub a: f64,
    pub service: Dist,
    pub chi: Dist,
    pub psi: Vec<PsiTerm>,
}

/// One weighted service-dependent component of a [`GeneralDep`] interarrival.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiTerm {
    pub weight: f64,
    #[serde(flatten)]
    pub kind: PsiKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PsiKind {
    /// D(B) = slope * B.
    Linear { slope: f64 },
    /// D(B) = sum of jumps arriving at `rate` during the service.
    CompoundPoisson { rate: f64, jump: Dist },
}

/// Tagged union of all solvable model instances; the JSON form is the CLI
/// config's `model` object.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    PropService(PropService),
    MixedDelay(MixedDelay),
    SystemTime(SystemTime),
    WaitDepService(WaitDepService),
    Threshold(Threshold),
    GeneralDep(GeneralDep),
}

/// Solved model: evaluable transform, atom at zero, stationary mean, and a
/// real grid for reporting. `singularities` lists the real points where the
/// series representation needs the averaging guard.
pub struct PerfMetrics {
    pub transform: TransformSolution,
    pub p0: f64,
    pub ew: f64,
    pub grid: Vec<(f64, f64)>,
    pub singularities: Vec<Complex64>,
}

impl PerfMetrics {
    /// Transform value with the removable-singularity guard applied.
    pub fn z_at(&self, s: Complex64) -> engine::Result<Complex64> {
        eval_guarded(&self.transform, &self.singularities, s)
    }
}

/// Perturbation coefficients of the system-time model around its additive
/// base chain: `r[0]` holds the first- and second-order coefficients of the
/// atom at zero, `r[l]` for l >= 1 those of the l-th moment, and
/// `base_moments[l]` the unperturbed moments (index 0 is the trivial 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionResult {
    pub r: Vec<Vec<f64>>,
    pub base_moments: Vec<f64>,
    pub rho: f64,
}

impl PropService {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(ModelError::InvalidSpec(format!(
                "a = {} must lie in (0,1)",
                self.a
            )));
        }
        self.service.validate()?;
        self.delay.validate()?;
        self.scale.validate()?;
        self.scale.check_range(0.0, f64::INFINITY, "scale factor")?;
        Ok(())
    }
}

impl MixedDelay {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(ModelError::InvalidSpec(format!(
                "a = {} must lie in (0,1)",
                self.a
            )));
        }
        if !(0.0..=1.0).contains(&self.p_plus) {
            return Err(ModelError::InvalidSpec(format!(
                "p_plus = {} must lie in [0,1]",
                self.p_plus
            )));
        }
        self.service.validate()?;
        self.delay_plus.validate()?;
        self.delay_minus.validate()?;
        self.scale.validate()?;
        self.scale.check_range(0.0, 1.0, "retained fraction")?;
        exp_phases(&self.delay_plus, "delay_plus")?;
        exp_phases(&self.delay_minus, "delay_minus")?;
        Ok(())
    }
}

impl SystemTime {
    pub fn validate(&self) -> Result<()> {
        if self.rate <= 0.0 {
            return Err(ModelError::InvalidSpec("rate must be positive".into()));
        }
        if self.epsilon < 0.0 {
            return Err(ModelError::InvalidSpec(
                "epsilon must be nonnegative".into(),
            ));
        }
        self.service.validate()?;
        self.scale.validate()?;
        for b in &self.scale.values {
            if self.epsilon > 0.0 && *b <= 0.0 {
                return Err(ModelError::InvalidSpec(
                    "scale values must be positive when epsilon > 0".into(),
                ));
            }
            if self.epsilon * b >= 1.0 {
                return Err(ModelError::InvalidSpec(format!(
                    "epsilon * beta = {} must stay below 1",
                    self.epsilon * b
                )));
            }
        }
        Ok(())
    }
}

impl WaitDepService {
    pub fn validate(&self) -> Result<()> {
        if self.arrival_rate <= 0.0 || self.service_rate <= 0.0 {
            return Err(ModelError::InvalidSpec("rates must be positive".into()));
        }
        self.obsolescence.validate()?;
        self.obsolescence.check_range(0.0, 1.0, "obsolescence factor")?;
        for v in &self.obsolescence.values {
            if *v <= 0.0 {
                return Err(ModelError::InvalidSpec(
                    "obsolescence factors must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

impl Threshold {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("a0", self.a0), ("a1", self.a1)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(ModelError::InvalidSpec(format!(
                    "{name} = {a} must lie in (0,1]"
                )));
            }
        }
        if self.lambda0 <= 0.0 || self.lambda1 <= 0.0 {
            return Err(ModelError::InvalidSpec(
                "interarrival rates must be positive".into(),
            ));
        }
        self.service.validate()?;
        self.threshold.validate()?;
        Ok(())
    }

    /// Rates with the near-coincidence perturbation applied: the constant
    /// system degenerates as lambda1 -> lambda0, so a coincident pair is
    /// nudged apart and reported on stderr.
    fn effective_rates(&self) -> (f64, f64) {
        if (self.lambda0 - self.lambda1).abs() < 1e-8 {
            let nudged = self.lambda1 * (1.0 + 1e-6);
            eprintln!(
                "warning: threshold rates {} and {} nearly coincide; using {} for the second regime",
                self.lambda0, self.lambda1, nudged
            );
            (self.lambda0, nudged)
        } else {
            (self.lambda0, self.lambda1)
        }
    }
}

impl GeneralDep {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(ModelError::InvalidSpec(format!(
                "a = {} must lie in (0,1)",
                self.a
            )));
        }
        self.service.validate()?;
        self.chi.validate()?;
        let (_, poles) = self.chi.rational_parts().ok_or_else(|| {
            ModelError::InvalidSpec(
                "independent interarrival part must have a rational transform".into(),
            )
        })?;
        for p in &poles {
            if p.re >= 0.0 {
                return Err(ModelError::InvalidSpec(
                    "interarrival transform poles must lie in the left half-plane".into(),
                ));
            }
        }
        for (i, p) in poles.iter().enumerate() {
            for q in &poles[i + 1..] {
                if (p - q).norm() < 1e-10 * (1.0 + p.norm()) {
                    return Err(ModelError::InvalidSpec(
                        "interarrival transform poles must be distinct".into(),
                    ));
                }
            }
        }
        let at_zero = self.chi.lst(Complex64::ZERO)?;
        if (at_zero - 1.0).norm() > 1e-8 {
            return Err(ModelError::InvalidSpec(format!(
                "interarrival transform must equal 1 at the origin (got {at_zero})"
            )));
        }
        if self.psi.is_empty() {
            return Err(ModelError::InvalidSpec(
                "at least one dependence term is required".into(),
            ));
        }
        let mut total = 0.0;
        for term in &self.psi {
            if term.weight < 0.0 {
                return Err(ModelError::InvalidSpec(
                    "dependence weights must be nonnegative".into(),
                ));
            }
            total += term.weight;
            match &term.kind {
                PsiKind::Linear { slope } => {
                    if *slope < 0.0 {
                        return Err(ModelError::InvalidSpec(
                            "linear dependence slope must be nonnegative".into(),
                        ));
                    }
                }
                PsiKind::CompoundPoisson { rate, jump } => {
                    if *rate < 0.0 {
                        return Err(ModelError::InvalidSpec(
                            "compound dependence rate must be nonnegative".into(),
                        ));
                    }
                    jump.validate()?;
                }
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidSpec(format!(
                "dependence weights sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::PropService(m) => m.validate(),
            ModelSpec::MixedDelay(m) => m.validate(),
            ModelSpec::SystemTime(m) => m.validate(),
            ModelSpec::WaitDepService(m) => m.validate(),
            ModelSpec::Threshold(m) => m.validate(),
            ModelSpec::GeneralDep(m) => m.validate(),
        }
    }
}

/// Route a model spec to its solver. Threshold specs dispatch on the scale
/// parameters: a1 = 1 takes the cut-off form, equal scales the product-series
/// path, anything else the general two-branch path.
pub fn solve(spec: &ModelSpec, opts: &SolveOptions) -> Result<PerfMetrics> {
    match spec {
        ModelSpec::PropService(m) => match &m.delay {
            Dist::Exponential { .. } => solve_prop_service(m, opts),
            Dist::HyperExponential { .. } => solve_prop_service_hyper(m, opts),
            _ => Err(ModelError::InvalidSpec(
                "additive delay must be exponential or hyperexponential".into(),
            )),
        },
        ModelSpec::MixedDelay(m) => solve_mixed_delay(m, opts),
        ModelSpec::SystemTime(m) => solve_system_time(m, opts),
        ModelSpec::WaitDepService(m) => solve_wait_dep_service(m, opts),
        ModelSpec::Threshold(m) => {
            if (m.a1 - 1.0).abs() < 1e-9 {
                solve_threshold_cutoff(m, opts)
            } else if (m.a0 - m.a1).abs() < 1e-12 {
                solve_threshold_equal_a(m, opts)
            } else {
                solve_threshold(m, opts)
            }
        }
        ModelSpec::GeneralDep(m) => solve_general_dependence(m, opts),
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn guard(p: Complex64, poles: &[Complex64]) -> engine::Result<()> {
    for q in poles {
        if (p - q).norm() < POLE_TOL {
            return Err(EngineError::Dist(DistError::PoleProximity {
                point: p,
                pole: *q,
            }));
        }
    }
    Ok(())
}

/// Evaluate the transform, replacing values at (or failing near) a removable
/// singularity by the mean over a small circle; the mean-value property makes
/// the four-point average accurate to fourth order in the radius.
pub fn eval_guarded(
    sol: &TransformSolution,
    near: &[Complex64],
    s: Complex64,
) -> engine::Result<Complex64> {
    let close = near.iter().any(|q| (s - q).norm() < NEAR_POLE);
    if !close {
        match sol.eval(s) {
            Ok(v) => return Ok(v),
            Err(EngineError::Dist(DistError::PoleProximity { .. })) => {}
            Err(e) => return Err(e),
        }
    }
    let h = CIRCLE_RADIUS;
    let offsets = [
        Complex64::new(h, 0.0),
        Complex64::new(-h, 0.0),
        Complex64::new(0.0, h),
        Complex64::new(0.0, -h),
    ];
    let mut acc = Complex64::ZERO;
    for o in offsets {
        acc += sol.eval(s + o)?;
    }
    Ok(acc / 4.0)
}

/// Derivative at the origin by a purely imaginary step; valid for functions
/// analytic near 0 that are real on the real axis.
fn deriv_at_zero(f: impl Fn(Complex64) -> engine::Result<Complex64>) -> engine::Result<f64> {
    Ok(f(Complex64::new(0.0, DERIV_STEP))?.im / DERIV_STEP)
}

/// Real reporting grid over [0, 10]; points where the evaluation honestly
/// fails (overflow, unreachable tolerance) are skipped rather than faked.
fn metric_grid(sol: &TransformSolution, near: &[Complex64]) -> Vec<(f64, f64)> {
    (0..=40)
        .filter_map(|k| {
            let s = 0.25 * k as f64;
            eval_guarded(sol, near, Complex64::new(s, 0.0))
                .ok()
                .map(|z| (s, z.re))
        })
        .collect()
}

fn assemble(
    transform: TransformSolution,
    p0: f64,
    ew: f64,
    singularities: Vec<Complex64>,
) -> PerfMetrics {
    let grid = metric_grid(&transform, &singularities);
    PerfMetrics {
        transform,
        p0,
        ew,
        grid,
        singularities,
    }
}

/// (weight, rate) pairs of an exponential or hyperexponential distribution.
fn exp_phases(d: &Dist, what: &str) -> Result<Vec<(f64, f64)>> {
    match d {
        Dist::Exponential { rate } => Ok(vec![(1.0, *rate)]),
        Dist::HyperExponential { weights, rates } => {
            Ok(weights.iter().copied().zip(rates.iter().copied()).collect())
        }
        _ => Err(ModelError::InvalidSpec(format!(
            "{what} must be exponential or hyperexponential"
        ))),
    }
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

// ---------------------------------------------------------------------------
// proportional service dependence

/// Stationary solve for [`PropService`] with an exponential additive delay.
pub fn solve_prop_service(spec: &PropService, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    let phases = match &spec.delay {
        Dist::Exponential { rate } => vec![(1.0, *rate)],
        _ => {
            return Err(ModelError::InvalidSpec(
                "this path needs an exponential delay; use the hyperexponential variant".into(),
            ))
        }
    };
    prop_service_core(spec, phases, opts)
}

/// Stationary solve for [`PropService`] with a hyperexponential delay; one
/// basis term and one pinned constant per phase.
pub fn solve_prop_service_hyper(spec: &PropService, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    let phases = match &spec.delay {
        Dist::HyperExponential { weights, rates } => {
            weights.iter().copied().zip(rates.iter().copied()).collect()
        }
        _ => {
            return Err(ModelError::InvalidSpec(
                "this path needs a hyperexponential delay".into(),
            ))
        }
    };
    prop_service_core(spec, phases, opts)
}

fn prop_service_core(
    spec: &PropService,
    phases: Vec<(f64, f64)>,
    opts: &SolveOptions,
) -> Result<PerfMetrics> {
    // Scale factors above 1 push the registered amount's transform out of
    // the right half-plane and the series representation loses validity
    // beyond a finite strip; the stationary path refuses them.
    for v in &spec.scale.values {
        if *v > 1.0 {
            return Err(ModelError::InvalidSpec(format!(
                "stationary path needs scale factors in [0,1], got {v}"
            )));
        }
    }
    let a = spec.a;
    let delta_poles: Vec<Complex64> = phases.iter().map(|(_, d)| Complex64::new(*d, 0.0)).collect();

    // Phi(s) = sum_i p_i phi_B(s(1 - beta_i)), the service transform mixed
    // over the proportionality draw.
    let phi_hat = {
        let service = spec.service.clone();
        let scale = spec.scale.clone();
        Arc::new(move |s: Complex64| -> engine::Result<Complex64> {
            let mut acc = Complex64::ZERO;
            for (b, p) in scale.values.iter().zip(&scale.probs) {
                acc += *p * service.lst(s * (1.0 - b))?;
            }
            Ok(acc)
        })
    };

    let weight_fn: Arc<dyn Fn(Complex64) -> engine::Result<Complex64> + Send + Sync> = {
        let phi = phi_hat.clone();
        let phases = phases.clone();
        let dp = delta_poles.clone();
        Arc::new(move |p: Complex64| {
            guard(p, &dp)?;
            let mut rate = Complex64::ZERO;
            for &(q, d) in &phases {
                rate += q * d / (d - p);
            }
            Ok(rate * phi(p)?)
        })
    };
    let wb = weight_fn.clone();
    let branches = vec![BranchTerm::new(
        Box::new(move |p| wb(p)),
        AffineMap::scaling(a),
    )];

    let basis: Vec<CFn> = phases
        .iter()
        .map(|(q, d)| {
            let (q, d) = (*q, *d);
            Box::new(move |p: Complex64| {
                guard(p, &[Complex64::new(d, 0.0)])?;
                Ok(-p * q / (d - p))
            }) as CFn
        })
        .collect();

    let m = phases.len();
    let mut constraints = Vec::with_capacity(m);
    for (j, (_, d)) in phases.iter().enumerate() {
        let mut coeffs = vec![Complex64::ZERO; m];
        coeffs[j] = Complex64::ONE;
        let w = -phi_hat(Complex64::new(*d, 0.0))?;
        constraints.push(Constraint {
            const_coeffs: coeffs,
            z_terms: vec![(w, Complex64::new(a * d, 0.0))],
            rhs: Complex64::ZERO,
        });
    }

    let eq = FunctionalEquation::new(branches, engine::constant(Complex64::ZERO), basis);
    let sol = solve_with_linear_constants(eq, &constraints, opts)?;

    let p0: f64 = phases
        .iter()
        .zip(&sol.constants)
        .map(|((q, _), c)| q * c.re)
        .sum();
    let h_prime = deriv_at_zero(|p| weight_fn(p))?;
    let l_prime: f64 = phases
        .iter()
        .zip(&sol.constants)
        .map(|((q, d), c)| -q * c.re / d)
        .sum();
    let ew = -(h_prime + l_prime) / (1.0 - a);

    Ok(assemble(sol, p0, ew, delta_poles))
}

/// Time-dependent transform of [`PropService`]: the r-weighted sum of the
/// per-step transforms started from wait `w`. Needs exponential service and
/// delay. Scale values above one may push the pre-reflection increment
/// negative; the reflection clips those steps at zero, and each such branch
/// contributes one correction constant pinned at its contracted root.
pub fn transient_prop_service(
    spec: &PropService,
    r: f64,
    w: f64,
    s: Complex64,
    opts: &SolveOptions,
) -> Result<Complex64> {
    spec.validate()?;
    if !(r > 0.0 && r < 1.0) {
        return Err(ModelError::InvalidSpec(format!(
            "discount r = {r} must lie in (0,1)"
        )));
    }
    if w < 0.0 {
        return Err(ModelError::InvalidSpec("start wait must be >= 0".into()));
    }
    let mu = match &spec.service {
        Dist::Exponential { rate } => *rate,
        _ => {
            return Err(ModelError::InvalidSpec(
                "time-dependent path needs an exponential service".into(),
            ))
        }
    };
    let delta = match &spec.delay {
        Dist::Exponential { rate } => *rate,
        _ => {
            return Err(ModelError::InvalidSpec(
                "time-dependent path needs an exponential delay".into(),
            ))
        }
    };
    let a = spec.a;
    let probs = spec.scale.probs.clone();
    let gammas: Vec<f64> = spec.scale.values.iter().map(|b| (b - 1.0) / mu).collect();
    for (i, g) in gammas.iter().enumerate() {
        for h in &gammas[i + 1..] {
            if (g - h).abs() < 1e-12 {
                return Err(ModelError::InvalidSpec(
                    "scale values must be distinct for the time-dependent path".into(),
                ));
            }
        }
    }

    // Branches with scale above one have gamma > 0; their effective service
    // enters negatively and the one-step transform kernels only converge to
    // the left of the reciprocal root 1/gamma.
    let clipped: Vec<(f64, f64)> = probs
        .iter()
        .zip(&gammas)
        .filter(|(_, g)| **g > POLE_TOL)
        .map(|(p, g)| (*p, *g))
        .collect();
    for &(_, g) in &clipped {
        if delta * g >= 1.0 {
            return Err(ModelError::InvalidSpec(format!(
                "delay rate {delta} reaches the kernel divergence point {}",
                1.0 / g
            )));
        }
    }

    let f_at = {
        let probs = probs.clone();
        let gammas = gammas.clone();
        move |p: Complex64| -> Complex64 {
            let mut acc = Complex64::ZERO;
            for (i, pi) in probs.iter().enumerate() {
                let mut term = Complex64::new(*pi, 0.0);
                for (j, g) in gammas.iter().enumerate() {
                    if j != i {
                        term *= 1.0 - *g * p;
                    }
                }
                acc += term;
            }
            acc
        }
    };
    let g_at = {
        let gammas = gammas.clone();
        move |p: Complex64| -> Complex64 { gammas.iter().map(|g| 1.0 - *g * p).product() }
    };

    let mut guard_points: Vec<Complex64> = vec![Complex64::new(delta, 0.0)];
    guard_points.extend(clipped.iter().map(|(_, g)| Complex64::new(1.0 / g, 0.0)));

    let weight: CFn = {
        let f_at = f_at.clone();
        let g_at = g_at.clone();
        let gp = guard_points.clone();
        Box::new(move |p| {
            guard(p, &gp)?;
            Ok(r * delta * f_at(p) / ((delta - p) * g_at(p)))
        })
    };
    let branches = vec![BranchTerm::new(weight, AffineMap::scaling(a))];

    // One constant multiplies the delay response, and one more per clipped
    // branch multiplies that branch's clipping response. The pole each
    // response carries at its reciprocal root cancels the matching pole of
    // the branch weight once the constants take their pinned values.
    let mut basis: Vec<CFn> = vec![{
        let dg = [Complex64::new(delta, 0.0)];
        Box::new(move |p: Complex64| {
            guard(p, &dg)?;
            Ok(p / (p - delta))
        }) as CFn
    }];
    for &(_, g) in &clipped {
        let root = Complex64::new(1.0 / g, 0.0);
        basis.push(Box::new(move |p: Complex64| {
            guard(p, &[root])?;
            Ok(delta * g * g * p / ((1.0 - delta * g) * (1.0 - g * p)))
        }) as CFn);
    }
    let fixed: CFn = Box::new(move |p| Ok((-p * w).exp()));

    // The delay constant is r Phi(delta) T(a delta); each clipping constant
    // is r p_i T(a / gamma_i).
    let m = 1 + clipped.len();
    let dc = Complex64::new(delta, 0.0);
    let phi_delta = f_at(dc) / g_at(dc);
    let mut constraints = Vec::with_capacity(m);
    let mut coeffs = vec![Complex64::ZERO; m];
    coeffs[0] = Complex64::ONE;
    constraints.push(Constraint {
        const_coeffs: coeffs,
        z_terms: vec![(-r * phi_delta, a * dc)],
        rhs: Complex64::ZERO,
    });
    for (i, &(pi, g)) in clipped.iter().enumerate() {
        let mut coeffs = vec![Complex64::ZERO; m];
        coeffs[i + 1] = Complex64::ONE;
        constraints.push(Constraint {
            const_coeffs: coeffs,
            z_terms: vec![(Complex64::new(-r * pi, 0.0), Complex64::new(a / g, 0.0))],
            rhs: Complex64::ZERO,
        });
    }

    let eq = FunctionalEquation::new(branches, fixed, basis);
    let sol = solve_with_linear_constants(eq, &constraints, opts)?;
    Ok(eval_guarded(&sol, &guard_points, s)?)
}

// ---------------------------------------------------------------------------
// mixed-sign additive delay

/// Stationary solve for [`MixedDelay`]. The negative-delay branch needs no
/// reflection correction, so only the positive phases contribute constants.
pub fn solve_mixed_delay(spec: &MixedDelay, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    let a = spec.a;
    let p_plus = spec.p_plus;
    let q_minus = 1.0 - p_plus;
    let plus = exp_phases(&spec.delay_plus, "delay_plus")?;
    let minus = exp_phases(&spec.delay_minus, "delay_minus")?;
    let delta_poles: Vec<Complex64> = plus.iter().map(|(_, d)| Complex64::new(*d, 0.0)).collect();

    let phi_hat = {
        let service = spec.service.clone();
        let scale = spec.scale.clone();
        Arc::new(move |s: Complex64| -> engine::Result<Complex64> {
            let mut acc = Complex64::ZERO;
            for (c, p) in scale.values.iter().zip(&scale.probs) {
                acc += *p * service.lst(s * (1.0 - c))?;
            }
            Ok(acc)
        })
    };

    let weight_fn: Arc<dyn Fn(Complex64) -> engine::Result<Complex64> + Send + Sync> = {
        let phi = phi_hat.clone();
        let service = spec.service.clone();
        let scale = spec.scale.clone();
        let plus = plus.clone();
        let minus = minus.clone();
        let dp = delta_poles.clone();
        Arc::new(move |s: Complex64| {
            guard(s, &dp)?;
            let mut rate = Complex64::ZERO;
            for &(qj, dj) in &plus {
                rate += p_plus * qj * dj / (dj - s);
            }
            for &(hl, nl) in &minus {
                rate += q_minus * hl * nl / (nl + s);
            }
            let mut clipped = Complex64::ZERO;
            for &(hl, nl) in &minus {
                let mut inner = Complex64::ZERO;
                for (c, p) in scale.values.iter().zip(&scale.probs) {
                    inner += *p * service.lst(s + nl * c)?;
                }
                clipped += q_minus * hl * s / (nl + s) * inner;
            }
            Ok(rate * phi(s)? + clipped)
        })
    };
    let wb = weight_fn.clone();
    let branches = vec![BranchTerm::new(
        Box::new(move |p| wb(p)),
        AffineMap::scaling(a),
    )];

    let basis: Vec<CFn> = plus
        .iter()
        .map(|(q, d)| {
            let (q, d) = (*q, *d);
            Box::new(move |p: Complex64| {
                guard(p, &[Complex64::new(d, 0.0)])?;
                Ok(-p * q / (d - p))
            }) as CFn
        })
        .collect();

    let m = plus.len();
    let mut constraints = Vec::with_capacity(m);
    for (j, (_, d)) in plus.iter().enumerate() {
        let mut coeffs = vec![Complex64::ZERO; m];
        coeffs[j] = Complex64::ONE;
        let w = -p_plus * phi_hat(Complex64::new(*d, 0.0))?;
        constraints.push(Constraint {
            const_coeffs: coeffs,
            z_terms: vec![(w, Complex64::new(a * d, 0.0))],
            rhs: Complex64::ZERO,
        });
    }

    let eq = FunctionalEquation::new(branches, engine::constant(Complex64::ZERO), basis);
    let sol = solve_with_linear_constants(eq, &constraints, opts)?;

    let p0: f64 = plus
        .iter()
        .zip(&sol.constants)
        .map(|((q, _), c)| q * c.re)
        .sum();
    let h_prime = deriv_at_zero(|p| weight_fn(p))?;
    let l_prime: f64 = plus
        .iter()
        .zip(&sol.constants)
        .map(|((q, d), c)| -q * c.re / d)
        .sum();
    let ew = -(h_prime + l_prime) / (1.0 - a);

    Ok(assemble(sol, p0, ew, delta_poles))
}

// ---------------------------------------------------------------------------
// system-time proportional dependence

/// Stationary solve for [`SystemTime`]. epsilon = 0 reduces to the classical
/// fixed-cycle queue and is answered in closed form; a single scale value
/// uses a scalar log-domain series that survives contraction factors near 1;
/// several scale values go through the lattice engine.
pub fn solve_system_time(spec: &SystemTime, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    let d = spec.rate;
    let eps = spec.epsilon;
    let mean_b = spec.service.mean()?;
    let rho = d * mean_b;
    let m1: f64 = spec
        .scale
        .values
        .iter()
        .zip(&spec.scale.probs)
        .map(|(b, p)| b * p)
        .sum();

    if eps == 0.0 || m1 == 0.0 {
        return pk_closed_form(spec, rho);
    }

    let (sol, p0) = if spec.scale.values.len() == 1 {
        system_time_scalar(spec, opts)?
    } else {
        system_time_lattice(spec, opts)?
    };
    // Exact mean from the differentiated equation at the origin; holds for
    // every epsilon > 0 and avoids differencing the transform.
    let ew = (p0 - (1.0 - rho) - rho * eps * m1) / (d * eps * m1);
    Ok(assemble(sol, p0, ew, vec![Complex64::new(d, 0.0)]))
}

fn pk_closed_form(spec: &SystemTime, rho: f64) -> Result<PerfMetrics> {
    if rho >= 1.0 {
        return Err(ModelError::Unstable { rho });
    }
    let d = spec.rate;
    let service = spec.service.clone();
    let ew = d * spec.service.moment(2)? / (2.0 * (1.0 - rho));
    let eval = Box::new(move |s: Complex64| -> engine::Result<Complex64> {
        if s.norm() < 1e-12 {
            return Ok(Complex64::ONE);
        }
        let phi = service.lst(s)?;
        Ok((1.0 - rho) * s / (s - d * (1.0 - phi)))
    });
    let sol = TransformSolution {
        eval,
        constants: vec![Complex64::new(1.0 - rho, 0.0)],
        diagnostics: Diagnostics {
            depth_used: 0,
            tail_bound_estimate: 0.0,
            linear_system_condition_number: None,
        },
    };
    Ok(assemble(sol, 1.0 - rho, ew, Vec::new()))
}

/// Log of the product prod_{j>=0} h(b^j x) for real x in (0, d), where
/// h(y) = d phi_B(y b) / (d - y) is positive on that interval. Returns the
/// log value and the iteration count. The stopping test uses the analytic
/// bound |ln h(y)| <= y (1/(d-y) + b E B), which is free of the rounding
/// noise that would stall a test on the computed term itself.
fn ln_hom_product(
    service: &Dist,
    d: f64,
    b: f64,
    mean_b: f64,
    x: f64,
    cap: u64,
) -> engine::Result<(f64, usize)> {
    // Compensated summation: near-identity contractions take ~1/(1-b) terms
    // while the running sum reaches thousands, and a plain accumulator would
    // round each addition at the scale of the sum, not of the term.
    let mut acc = 0.0f64;
    let mut comp = 0.0f64;
    let mut y = x;
    for i in 0..cap {
        let phi = service.lst(Complex64::new(y * b, 0.0))?.re;
        let term = d.ln() - (d - y).ln() + phi.ln();
        let t = term - comp;
        let next = acc + t;
        comp = (next - acc) - t;
        acc = next;
        let bound = y * (1.0 / (d - y).abs() + b * mean_b);
        y *= b;
        if bound * b / (1.0 - b) < 1e-12 {
            acc += term * b / (1.0 - b);
            return Ok((acc, i as usize));
        }
    }
    Err(EngineError::TermCapExceeded { cap })
}

/// Log of |S(x)| = sum_n prod_{j<n} h(b^j x) * y_n/(d - y_n) for real x in
/// (0, d); every summand is positive there, so the sum is stable in log form.
fn ln_forcing_series(service: &Dist, d: f64, b: f64, x: f64, cap: u64) -> engine::Result<f64> {
    let mut ln_prefix = 0.0f64;
    let mut comp = 0.0f64;
    let mut y = x;
    let mut lse_max = f64::NEG_INFINITY;
    let mut lse_sum = 0.0f64;
    let mut prev_term = f64::NEG_INFINITY;
    let push = |t: f64, lse_max: &mut f64, lse_sum: &mut f64| {
        if t > *lse_max {
            *lse_sum = *lse_sum * (*lse_max - t).exp() + 1.0;
            *lse_max = t;
        } else {
            *lse_sum += (t - *lse_max).exp();
        }
    };
    for _ in 0..cap {
        if y <= 0.0 {
            break;
        }
        let term = ln_prefix + y.ln() - (d - y).ln();
        push(term, &mut lse_max, &mut lse_sum);
        if term < lse_max - 45.0 && term < prev_term {
            // Geometric tail with the observed ratio.
            let ratio = (term - prev_term).exp().clamp(0.0, 0.9999);
            push(
                term + (ratio / (1.0 - ratio)).ln(),
                &mut lse_max,
                &mut lse_sum,
            );
            return Ok(lse_max + lse_sum.ln());
        }
        prev_term = term;
        let phi = service.lst(Complex64::new(y * b, 0.0))?.re;
        // Same compensated pattern as the product above; the prefix is the
        // identical log-product and reaches the same magnitudes.
        let step = d.ln() - (d - y).ln() + phi.ln();
        let t = step - comp;
        let next = ln_prefix + t;
        comp = (next - ln_prefix) - t;
        ln_prefix = next;
        y *= b;
    }
    Err(EngineError::TermCapExceeded { cap })
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Single-scale solve evaluated as a scalar series. The pinned constant is
/// computed in log space, which keeps the near-identity contraction case
/// (epsilon * beta small) finite even though the intermediate products reach
/// thousands of orders of magnitude.
fn system_time_scalar(
    spec: &SystemTime,
    opts: &SolveOptions,
) -> Result<(TransformSolution, f64)> {
    let d = spec.rate;
    let b = 1.0 - spec.epsilon * spec.scale.values[0];
    let service = spec.service.clone();
    let cap = opts.term_cap;
    let mean_b = service.mean()?;
    // Linear-order coefficient bound of |h - 1| and |psi| near the origin;
    // drives the truncation tests below through the exact lattice point.
    let c_lin = 1.0 / d + b * mean_b;

    let x0 = d * b;
    let (ln_a0, depth) = ln_hom_product(&service, d, b, mean_b, x0, cap)?;
    let ln_s0 = ln_forcing_series(&service, d, b, x0, cap)?;
    let phi0 = service.lst(Complex64::new(x0, 0.0))?.re;
    // Pin at the one constraint point: P = phi0 A(x0) / (1 + phi0 |S(x0)|).
    let ln_p = phi0.ln() + ln_a0 - logsumexp2(0.0, phi0.ln() + ln_s0);
    let p0 = ln_p.exp();

    let eval_service = service.clone();
    let dpole = [Complex64::new(d, 0.0)];
    let eval = Box::new(move |s: Complex64| -> engine::Result<Complex64> {
        if s.norm() < 1e-14 {
            return Ok(Complex64::ONE);
        }
        if s.im == 0.0 && s.re > 0.0 && s.re < d {
            // Log-domain difference Z = A - P |S|; reject when the shared
            // magnitude would swamp the answer's precision.
            let x = s.re;
            let (ln_a, _) = ln_hom_product(&eval_service, d, b, mean_b, x, cap)?;
            let ln_s = ln_forcing_series(&eval_service, d, b, x, cap)?;
            if ln_a > 16.0 {
                return Err(EngineError::NonConvergence {
                    depth: 0,
                    tail_bound: ln_a.exp() * f64::EPSILON,
                });
            }
            return Ok(Complex64::new(ln_a.exp() - (ln_p + ln_s).exp(), 0.0));
        }
        // Direct complex series with magnitude guards.
        let mut prefix = Complex64::ONE;
        let mut acc = Complex64::ZERO;
        let mut y = s;
        for _ in 0..cap {
            guard(y, &dpole)?;
            let psi = -y / (d - y);
            let term = prefix * p0 * psi;
            acc += term;
            let h = d * eval_service.lst(y * b)? / (d - y);
            prefix *= h;
            y *= b;
            let mag = prefix.norm();
            if mag > 1e250 || !mag.is_finite() {
                return Err(EngineError::NonConvergence {
                    depth: 0,
                    tail_bound: f64::INFINITY,
                });
            }
            if mag < 1e-280 {
                return Err(EngineError::NonConvergence {
                    depth: 0,
                    tail_bound: mag,
                });
            }
            if y.norm() * c_lin * b / (1.0 - b) < 1e-12 {
                let rest = term * b / (1.0 - b);
                return Ok(prefix + acc + rest);
            }
        }
        Err(EngineError::TermCapExceeded { cap })
    });

    let sol = TransformSolution {
        eval,
        constants: vec![Complex64::new(p0, 0.0)],
        diagnostics: Diagnostics {
            depth_used: depth,
            tail_bound_estimate: 0.0,
            linear_system_condition_number: None,
        },
    };
    Ok((sol, p0))
}

/// Multi-scale solve through the lattice engine; honest about its limits:
/// contraction factors very close to 1 exhaust the depth or term budget.
fn system_time_lattice(
    spec: &SystemTime,
    opts: &SolveOptions,
) -> Result<(TransformSolution, f64)> {
    let d = spec.rate;
    let eps = spec.epsilon;
    let service = spec.service.clone();
    let pole = [Complex64::new(d, 0.0)];

    let mut branches = Vec::new();
    let mut z_terms = Vec::new();
    for (bv, pv) in spec.scale.values.iter().zip(&spec.scale.probs) {
        let bb = 1.0 - eps * bv;
        let svc = service.clone();
        let p = *pv;
        let weight: CFn = Box::new(move |s: Complex64| {
            guard(s, &pole)?;
            Ok(p * d * svc.lst(s * bb)? / (d - s))
        });
        branches.push(BranchTerm::new(weight, AffineMap::scaling(bb)));
        let pin = Complex64::new(d * bb, 0.0);
        z_terms.push((-(p * service.lst(pin)?), pin));
    }
    let basis: Vec<CFn> = vec![Box::new(move |s: Complex64| {
        guard(s, &pole)?;
        Ok(-s / (d - s))
    })];
    let constraints = vec![Constraint {
        const_coeffs: vec![Complex64::ONE],
        z_terms,
        rhs: Complex64::ZERO,
    }];
    let eq = FunctionalEquation::new(branches, engine::constant(Complex64::ZERO), basis);
    let sol = solve_with_linear_constants(eq, &constraints, opts)?;
    let p0 = sol.constants[0].re;
    Ok((sol, p0))
}

/// Perturbation coefficients of the [`SystemTime`] moments in epsilon around
/// the additive base chain, to second order, for moment orders 0..=l_max.
pub fn expansion_coeffs(spec: &SystemTime, l_max: usize) -> Result<ExpansionResult> {
    spec.validate()?;
    let d = spec.rate;
    let rho = d * spec.service.mean()?;
    if rho >= 1.0 {
        return Err(ModelError::Unstable { rho });
    }
    let m1: f64 = spec
        .scale
        .values
        .iter()
        .zip(&spec.scale.probs)
        .map(|(b, p)| b * p)
        .sum();
    let m2: f64 = spec
        .scale
        .values
        .iter()
        .zip(&spec.scale.probs)
        .map(|(b, p)| b * b * p)
        .sum();

    let top = l_max + 3;
    let mut mb = Vec::with_capacity(top + 1);
    for k in 0..=top {
        mb.push(spec.service.moment(k as u32)?);
    }

    // Unperturbed moments from the classical moment recursion.
    let mut base = vec![0.0f64; l_max + 3];
    base[0] = 1.0;
    for l in 2..=l_max + 3 {
        let mut acc = 0.0;
        for j in 0..=l - 2 {
            acc += binom(l, j) * base[j] * mb[l - j];
        }
        base[l - 1] = d * acc / (l as f64 * (1.0 - rho));
    }

    // First-order coefficients. The zeroth-order moment is identically 1, so
    // its perturbation coefficient vanishes and the moment-indexed sums start
    // at j = 1.
    let mut r1 = vec![0.0f64; l_max + 2];
    r1[0] = (d * base[1] + rho) * m1;
    for l in 2..=l_max + 2 {
        let mut conv = 0.0;
        for j in 1..=l.saturating_sub(2) {
            conv += binom(l, j) * mb[l - j] * r1[j];
        }
        let mut shift = 0.0;
        for n in 0..=l {
            shift += binom(l, n) * base[n] * mb[l - n];
        }
        r1[l - 1] = ((d / l as f64) * conv - d * m1 * shift) / (1.0 - rho);
    }

    // Second-order coefficients.
    let mut r2 = vec![0.0f64; l_max + 1];
    r2[0] = d * m1 * r1[1];
    for l in 2..=l_max + 1 {
        let mut conv = 0.0;
        for j in 1..=l.saturating_sub(2) {
            conv += binom(l, j) * mb[l - j] * r2[j];
        }
        let mut cross = 0.0;
        for j in 1..=l {
            cross += binom(l, j) * mb[l - j] * r1[j];
        }
        let mut shift = 0.0;
        for n in 0..=l {
            shift += binom(l, n) * base[n] * mb[l - n];
        }
        r2[l - 1] = ((d / l as f64) * conv - d * m1 * cross
            + d * (l - 1) as f64 * m2 / 2.0 * shift)
            / (1.0 - rho);
    }

    Ok(ExpansionResult {
        r: (0..=l_max).map(|l| vec![r1[l], r2[l]]).collect(),
        base_moments: base[..=l_max].to_vec(),
        rho,
    })
}

// ---------------------------------------------------------------------------
// wait-dependent service

/// Stationary solve for [`WaitDepService`] through the shifted product
/// chain; the atom normalizes the chain value at the origin.
pub fn solve_wait_dep_service(spec: &WaitDepService, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    let lam = spec.arrival_rate;
    let mu = spec.service_rate;
    let om = spec.obsolescence.clone();

    let s0 = solve_shift_chain(&om, lam, mu, Complex64::ZERO, opts)?.re;
    let pi0 = 1.0 / s0;
    let sp = solve_shift_chain(&om, lam, mu, Complex64::new(0.0, DERIV_STEP), opts)?.im
        / DERIV_STEP;
    let ew = -pi0 * sp;

    let opts2 = *opts;
    let eval = Box::new(move |s: Complex64| -> engine::Result<Complex64> {
        Ok(pi0 * solve_shift_chain(&om, lam, mu, s, &opts2)?)
    });
    let sol = TransformSolution {
        eval,
        constants: vec![Complex64::new(pi0, 0.0)],
        diagnostics: Diagnostics {
            depth_used: 0,
            tail_bound_estimate: 0.0,
            linear_system_condition_number: None,
        },
    };
    Ok(assemble(sol, pi0, ew, Vec::new()))
}

// ---------------------------------------------------------------------------
// threshold dependence

fn kernel_pair(
    service: &Dist,
    threshold: &Dist,
) -> Arc<dyn Fn(Complex64) -> engine::Result<(Complex64, Complex64)> + Send + Sync> {
    let b = service.clone();
    let t = threshold.clone();
    Arc::new(move |s| Ok(chi_psi(&b, &t, s)?))
}

/// Stationary solve for [`Threshold`] with general distinct scales in (0,1).
pub fn solve_threshold(spec: &Threshold, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    if spec.a0 >= 1.0 || spec.a1 >= 1.0 {
        return Err(ModelError::InvalidSpec(
            "general threshold path needs both scales below 1".into(),
        ));
    }
    let (l0, l1) = spec.effective_rates();
    let (a0, a1) = (spec.a0, spec.a1);
    let kernels = kernel_pair(&spec.service, &spec.threshold);
    let poles = [Complex64::new(l0, 0.0), Complex64::new(l1, 0.0)];

    let w0: CFn = {
        let k = kernels.clone();
        Box::new(move |s| {
            guard(s, &poles)?;
            Ok(l0 * k(s)?.0 / (l0 - s))
        })
    };
    let w1: CFn = {
        let k = kernels.clone();
        Box::new(move |s| {
            guard(s, &poles)?;
            Ok(l1 * k(s)?.1 / (l1 - s))
        })
    };
    let branches = vec![
        BranchTerm::new(w0, AffineMap::scaling(a0)),
        BranchTerm::new(w1, AffineMap::scaling(a1)),
    ];
    let basis: Vec<CFn> = vec![
        Box::new(move |s: Complex64| {
            guard(s, &poles)?;
            Ok(s / ((l0 - s) * (l1 - s)))
        }),
        Box::new(move |s: Complex64| {
            guard(s, &poles)?;
            Ok(s * s / ((l0 - s) * (l1 - s)))
        }),
    ];

    let chi_l0 = kernels(Complex64::new(l0, 0.0))?.0;
    let psi_l1 = kernels(Complex64::new(l1, 0.0))?.1;
    let constraints = vec![
        Constraint {
            const_coeffs: vec![Complex64::ONE, Complex64::new(l0, 0.0)],
            z_terms: vec![((l1 - l0) * chi_l0, Complex64::new(a0 * l0, 0.0))],
            rhs: Complex64::ZERO,
        },
        Constraint {
            const_coeffs: vec![Complex64::ONE, Complex64::new(l1, 0.0)],
            z_terms: vec![((l0 - l1) * psi_l1, Complex64::new(a1 * l1, 0.0))],
            rhs: Complex64::ZERO,
        },
    ];

    let eq = FunctionalEquation::new(branches, engine::constant(Complex64::ZERO), basis);
    let sol = solve_with_linear_constants(eq, &constraints, opts)?;

    let p0 = sol.constants[1].re;
    let at0 = kernels(Complex64::ZERO)?;
    let d0 = kernels(Complex64::new(0.0, DERIV_STEP))?;
    let chi_d = d0.0.im / DERIV_STEP;
    let psi_d = d0.1.im / DERIV_STEP;
    let denom = 1.0 - a0 * at0.0.re - a1 * at0.1.re;
    let ew = -(chi_d + at0.0.re / l0 + psi_d + at0.1.re / l1
        + sol.constants[0].re / (l0 * l1))
        / denom;

    Ok(assemble(sol, p0, ew, poles.to_vec()))
}

/// Stationary solve for [`Threshold`] with a1 = 1: the unit-scale branch is
/// divided out, leaving a single-branch equation whose denominator
/// E(s) = lambda1 - s - lambda1 psi(s) vanishes once on (0, lambda1). The
/// divided form needs two pinned constants to stay analytic across both that
/// zero and s = lambda0.
pub fn solve_threshold_cutoff(spec: &Threshold, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    if (spec.a1 - 1.0).abs() > 1e-9 {
        return Err(ModelError::InvalidSpec(
            "cut-off path needs a1 = 1".into(),
        ));
    }
    if spec.a0 >= 1.0 {
        return Err(ModelError::InvalidSpec(
            "cut-off path needs a0 below 1".into(),
        ));
    }
    let (l0, l1) = (spec.lambda0, spec.lambda1);
    let a0 = spec.a0;
    let kernels = kernel_pair(&spec.service, &spec.threshold);

    let e_at = {
        let k = kernels.clone();
        move |s: Complex64| -> engine::Result<Complex64> { Ok(l1 - s - l1 * k(s)?.1) }
    };
    let psi_l1 = kernels(Complex64::new(l1, 0.0))?.1.re;
    // Root of E on (0, lambda1): E(0) = lambda1 chi(0) > 0 and
    // E(lambda1) = -lambda1 psi(lambda1) < 0 whenever the threshold binds.
    let s_star = if psi_l1 > 1e-300 {
        let mut lo = 0.0f64;
        let mut hi = l1;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let val = e_at(Complex64::new(mid, 0.0))?.re;
            if val > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    } else {
        None
    };

    let chi_l0 = kernels(Complex64::new(l0, 0.0))?.0;
    let chi0 = kernels(Complex64::ZERO)?.0.re;

    // When the threshold never binds in practice (its transform share
    // underflows), the second branch carries no mass and the recursion is the
    // plain single-pole queue driven by the below-threshold kernel alone.
    let Some(s_star) = s_star else {
        let pole = [Complex64::new(l0, 0.0)];
        let weight_fn: Arc<dyn Fn(Complex64) -> engine::Result<Complex64> + Send + Sync> = {
            let k = kernels.clone();
            Arc::new(move |s: Complex64| {
                guard(s, &pole)?;
                Ok(l0 * k(s)?.0 / (l0 - s))
            })
        };
        let wb = weight_fn.clone();
        let branches = vec![BranchTerm::new(
            Box::new(move |p| wb(p)),
            AffineMap::scaling(a0),
        )];
        let basis: Vec<CFn> = vec![Box::new(move |s: Complex64| {
            guard(s, &pole)?;
            Ok(-s / (l0 - s))
        })];
        let constraints = vec![Constraint {
            const_coeffs: vec![Complex64::ONE],
            z_terms: vec![(-chi_l0, Complex64::new(a0 * l0, 0.0))],
            rhs: Complex64::ZERO,
        }];
        let eq = FunctionalEquation::new(branches, engine::constant(Complex64::ZERO), basis);
        let sol = solve_with_linear_constants(eq, &constraints, opts)?;
        let k0 = sol.constants[0].re;
        let h_prime = deriv_at_zero(|p| weight_fn(p))?;
        let ew = -(h_prime - k0 / l0) / (1.0 - a0 * chi0);
        return Ok(assemble(sol, k0, ew, vec![Complex64::new(l0, 0.0)]));
    };

    let guards = vec![Complex64::new(l0, 0.0), Complex64::new(s_star, 0.0)];
    let guards_arc = guards.clone();

    let weight_fn: Arc<dyn Fn(Complex64) -> engine::Result<Complex64> + Send + Sync> = {
        let k = kernels.clone();
        let e = e_at.clone();
        let g = guards_arc.clone();
        Arc::new(move |s: Complex64| {
            guard(s, &g)?;
            Ok(l0 * k(s)?.0 * (l1 - s) / ((l0 - s) * e(s)?))
        })
    };
    let wb = weight_fn.clone();
    let branches = vec![BranchTerm::new(
        Box::new(move |p| wb(p)),
        AffineMap::scaling(a0),
    )];
    let basis: Vec<CFn> = vec![
        {
            let e = e_at.clone();
            let g = guards_arc.clone();
            Box::new(move |s: Complex64| {
                guard(s, &g)?;
                Ok(-s * (l1 - s) / ((l0 - s) * e(s)?))
            })
        },
        {
            let e = e_at.clone();
            let g = guards_arc.clone();
            Box::new(move |s: Complex64| {
                guard(s, &g)?;
                Ok(-s / e(s)?)
            })
        },
    ];

    // Two conditions pin the two constants: the residue at the first rate
    // must cancel, and the numerator must vanish where the rearranged
    // denominator crosses zero, which keeps the solution analytic there.
    // Pinning the second rate's residue instead would be circular: the
    // rearrangement already encodes it, and that row collapses to 0 = 0.
    let sc = Complex64::new(s_star, 0.0);
    let chi_sc = kernels(sc)?.0;
    let constraints = vec![
        Constraint {
            const_coeffs: vec![Complex64::ONE, Complex64::ZERO],
            z_terms: vec![(-chi_l0, Complex64::new(a0 * l0, 0.0))],
            rhs: Complex64::ZERO,
        },
        Constraint {
            const_coeffs: vec![-sc * (l1 - sc) / (l0 - sc), -sc],
            z_terms: vec![(l0 * chi_sc * (l1 - sc) / (l0 - sc), a0 * sc)],
            rhs: Complex64::ZERO,
        },
    ];

    let eq = FunctionalEquation::new(branches, engine::constant(Complex64::ZERO), basis);
    let sol = solve_with_linear_constants(eq, &constraints, opts)?;

    let k0 = sol.constants[0].re;
    let k1 = sol.constants[1].re;
    let p0 = k0 + k1;
    let h_prime = deriv_at_zero(|p| weight_fn(p))?;
    let l_prime = -(k0 / l0 + k1 / l1) / chi0;
    let ew = -(h_prime + l_prime) / (1.0 - a0);

    Ok(assemble(sol, p0, ew, guards))
}

/// Stationary solve for [`Threshold`] with a0 = a1 = a, evaluated as an
/// explicit product plus forcing series; independent of the lattice path so
/// the two can cross-check each other.
pub fn solve_threshold_equal_a(spec: &Threshold, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    if (spec.a0 - spec.a1).abs() > 1e-9 {
        return Err(ModelError::InvalidSpec(
            "equal-scale path needs a0 = a1".into(),
        ));
    }
    if spec.a0 >= 1.0 {
        return Err(ModelError::InvalidSpec(
            "equal-scale path needs scales below 1".into(),
        ));
    }
    let (l0, l1) = spec.effective_rates();
    let a = spec.a0;
    let kernels = kernel_pair(&spec.service, &spec.threshold);
    let poles = [Complex64::new(l0, 0.0), Complex64::new(l1, 0.0)];

    let big_h = {
        let k = kernels.clone();
        Arc::new(move |s: Complex64| -> engine::Result<Complex64> {
            guard(s, &poles)?;
            let (chi, psi) = k(s)?;
            Ok(l0 * chi / (l0 - s) + l1 * psi / (l1 - s))
        })
    };
    let psi_basis = move |j: usize, s: Complex64| -> engine::Result<Complex64> {
        guard(s, &poles)?;
        Ok(s.powu(j as u32) / ((l0 - s) * (l1 - s)))
    };

    // A(x) = prod_n H(a^n x); B_j(x) = sum_n Psi_j(a^n x) prod_{m<n} H(a^m x).
    let series = {
        let big_h = big_h.clone();
        let opts = *opts;
        Arc::new(move |x: Complex64| -> engine::Result<(Complex64, Complex64, Complex64)> {
            let (hom, _) = infinite_product(|n| big_h(x * a.powi(n as i32)), &opts)?;
            let mut prefix = Complex64::ONE;
            let mut b1 = Complex64::ZERO;
            let mut b2 = Complex64::ZERO;
            let mut p = x;
            let mut calm = 0;
            for _ in 0..opts.max_depth * 50 {
                let t1 = prefix * psi_basis(1, p)?;
                let t2 = prefix * psi_basis(2, p)?;
                b1 += t1;
                b2 += t2;
                if t1.norm() + t2.norm() < opts.tail_tol * (1.0 + b1.norm() + b2.norm()) {
                    calm += 1;
                    if calm >= 2 {
                        b1 += t1 * a / (1.0 - a);
                        b2 += t2 * a / (1.0 - a);
                        return Ok((hom, b1, b2));
                    }
                } else {
                    calm = 0;
                }
                prefix *= big_h(p)?;
                p *= a;
            }
            Err(EngineError::NonConvergence {
                depth: opts.max_depth * 50,
                tail_bound: f64::NAN,
            })
        })
    };

    let chi_l0 = kernels(Complex64::new(l0, 0.0))?.0;
    let psi_l1 = kernels(Complex64::new(l1, 0.0))?.1;
    let (hom0, b1_0, b2_0) = series(Complex64::new(a * l0, 0.0))?;
    let (hom1, b1_1, b2_1) = series(Complex64::new(a * l1, 0.0))?;

    // Analyticity at each rate: C1 + l_i C2 + (other - l_i) kernel Z(a l_i) = 0
    // with Z(x) = A(x) + C1 B1(x) + C2 B2(x), solved directly as a 2x2 system.
    let f0 = (l1 - l0) * chi_l0;
    let f1 = (l0 - l1) * psi_l1;
    let a11 = Complex64::ONE + f0 * b1_0;
    let a12 = Complex64::new(l0, 0.0) + f0 * b2_0;
    let a21 = Complex64::ONE + f1 * b1_1;
    let a22 = Complex64::new(l1, 0.0) + f1 * b2_1;
    let rhs1 = -f0 * hom0;
    let rhs2 = -f1 * hom1;
    let det = a11 * a22 - a12 * a21;
    if det.norm() < 1e-12 * (a11.norm() * a22.norm() + a12.norm() * a21.norm() + 1.0) {
        return Err(ModelError::DegeneratePin { coeff: det.norm() });
    }
    let c1 = (rhs1 * a22 - a12 * rhs2) / det;
    let c2 = (a11 * rhs2 - rhs1 * a21) / det;

    let eval_series = series.clone();
    let eval = Box::new(move |s: Complex64| -> engine::Result<Complex64> {
        let (hom, b1, b2) = eval_series(s)?;
        Ok(hom + c1 * b1 + c2 * b2)
    });
    let sol = TransformSolution {
        eval,
        constants: vec![c1, c2],
        diagnostics: Diagnostics {
            depth_used: 0,
            tail_bound_estimate: 0.0,
            linear_system_condition_number: None,
        },
    };

    let p0 = c2.re;
    let h_prime = deriv_at_zero(|s| big_h(s))?;
    let ew = -(h_prime + c1.re / (l0 * l1)) / (1.0 - a);

    Ok(assemble(sol, p0, ew, poles.to_vec()))
}

// ---------------------------------------------------------------------------
// general rational-transform dependence

/// Stationary solve for [`GeneralDep`]: one basis power and one constant per
/// pole of the independent interarrival part; constants pinned by
/// analyticity at each pole.
pub fn solve_general_dependence(spec: &GeneralDep, opts: &SolveOptions) -> Result<PerfMetrics> {
    spec.validate()?;
    let a = spec.a;
    let (num, poles) = spec.chi.rational_parts().expect("validated rational");
    let lambdas: Vec<Complex64> = poles.iter().map(|p| -p).collect();
    let kk = lambdas.len();

    let horner = move |coeffs: &[Complex64], x: Complex64| -> Complex64 {
        let mut acc = Complex64::ZERO;
        for c in coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    };

    // The shortening terms flip the transform argument sign, so each kernel
    // factor is an expectation of a growing exponential and only converges on
    // a strip. Past the strip the closed forms continue analytically to
    // values that no longer represent the model, so refuse instead.
    let jump_caps: Vec<f64> = spec
        .psi
        .iter()
        .map(|t| match &t.kind {
            PsiKind::Linear { .. } => f64::INFINITY,
            PsiKind::CompoundPoisson { jump, .. } => jump
                .poles()
                .iter()
                .map(|p| -p.re)
                .fold(f64::INFINITY, f64::min),
        })
        .collect();
    let service_abscissa = spec
        .service
        .poles()
        .iter()
        .map(|p| p.re)
        .fold(f64::NEG_INFINITY, f64::max);

    let psi_terms = spec.psi.clone();
    let psi_at_neg = Arc::new(move |i: usize, s: Complex64| -> engine::Result<Complex64> {
        match &psi_terms[i].kind {
            PsiKind::Linear { slope } => Ok(-*slope * s),
            PsiKind::CompoundPoisson { rate, jump } => {
                if s.re >= jump_caps[i] {
                    return Err(EngineError::Invalid(format!(
                        "argument {} is outside the jump transform's convergence strip",
                        s
                    )));
                }
                Ok(*rate * (1.0 - jump.lst(-s)?))
            }
        }
    });
    let weights: Vec<f64> = spec.psi.iter().map(|t| t.weight).collect();
    let mixed = {
        let service = spec.service.clone();
        let psi_at_neg = psi_at_neg.clone();
        let weights = weights.clone();
        Arc::new(move |s: Complex64| -> engine::Result<Complex64> {
            let mut acc = Complex64::ZERO;
            for (i, w) in weights.iter().enumerate() {
                let arg = s + psi_at_neg(i, s)?;
                if arg.re <= service_abscissa {
                    return Err(EngineError::Invalid(format!(
                        "shifted argument {} is outside the service transform's convergence strip",
                        arg
                    )));
                }
                acc += *w * service.lst(arg)?;
            }
            Ok(acc)
        })
    };

    let weight_fn: Arc<dyn Fn(Complex64) -> engine::Result<Complex64> + Send + Sync> = {
        let num = num.clone();
        let lambdas = lambdas.clone();
        let mixed = mixed.clone();
        Arc::new(move |s: Complex64| {
            guard(s, &lambdas)?;
            let den: Complex64 = lambdas.iter().map(|l| *l - s).product();
            Ok(horner(&num, -s) / den * mixed(s)?)
        })
    };
    let wb = weight_fn.clone();
    let branches = vec![BranchTerm::new(
        Box::new(move |p| wb(p)),
        AffineMap::scaling(a),
    )];

    let basis: Vec<CFn> = (1..=kk)
        .map(|j| {
            let lambdas = lambdas.clone();
            Box::new(move |s: Complex64| {
                guard(s, &lambdas)?;
                let den: Complex64 = lambdas.iter().map(|l| *l - s).product();
                Ok(s.powu(j as u32) / den)
            }) as CFn
        })
        .collect();

    let mut constraints = Vec::with_capacity(kk);
    for &l in &lambdas {
        let coeffs: Vec<Complex64> = (1..=kk).map(|j| l.powu(j as u32)).collect();
        let w = horner(&num, -l) * mixed(l)?;
        constraints.push(Constraint {
            const_coeffs: coeffs,
            z_terms: vec![(w, a * l)],
            rhs: Complex64::ZERO,
        });
    }

    let eq = FunctionalEquation::new(branches, engine::constant(Complex64::ZERO), basis);
    let sol = solve_with_linear_constants(eq, &constraints, opts)?;

    let sign = if kk % 2 == 0 { 1.0 } else { -1.0 };
    let p0 = sign * sol.constants[kk - 1].re;
    // Weight slope at the origin, in closed form. The imaginary-step trick is
    // unusable here: complex poles put order-one imaginary parts next to the
    // tiny step, which gets absorbed before the product rule can keep it.
    let mean_b = spec.service.mean()?;
    let inv_sum: Complex64 = lambdas.iter().map(|l| 1.0 / l).sum();
    let n_ratio = if num.len() > 1 {
        num[1] / num[0]
    } else {
        Complex64::ZERO
    };
    let mut arg_slope = 0.0f64;
    for t in &spec.psi {
        let g1 = match &t.kind {
            PsiKind::Linear { slope } => 1.0 - slope,
            PsiKind::CompoundPoisson { rate, jump } => 1.0 - rate * jump.mean()?,
        };
        arg_slope += t.weight * g1;
    }
    let h_prime = (inv_sum - n_ratio).re - mean_b * arg_slope;
    let prod_l: Complex64 = lambdas.iter().product();
    let ew = -(h_prime + (sol.constants[0] / prod_l).re) / (1.0 - a);

    let singular: Vec<Complex64> = lambdas
        .iter()
        .filter(|l| l.im.abs() < 1e-9)
        .copied()
        .collect();
    Ok(assemble(sol, p0, ew, singular))
}
