//! Orbit-size generating functions for constant-retrial queues whose orbiting
//! customers are impatient. Retention thins the orbit geometrically, so the
//! stationary pgf satisfies a contraction functional equation in the unit-disk
//! variable and the same layered machinery as the transform solvers applies;
//! the maps fix z = 1 instead of the origin. A two-class extension reduces the
//! joint pgf to a one-dimensional boundary section first and assembles the
//! full function afterwards.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dists::{DiscreteMixture, Dist, DistError};
use crate::engine::{
    self, solve_multi_branch_parts, solve_with_linear_constants, AffineMap, BranchTerm, CFn,
    Constraint, Diagnostics, EngineError, FunctionalEquation, SolveOptions, TransformSolution,
};

/// Pgf evaluations at z = 1 must return 1 to within this.
const PGF_TOL: f64 = 1e-12;
/// Atom-pin denominators smaller than this are rejected as degenerate.
const PIN_TOL: f64 = 1e-12;
/// Fixed-point iterations for the service-start root stop at this residual.
const ROOT_TOL: f64 = 1e-14;
/// Iteration budget for the service-start root.
const ROOT_CAP: usize = 100_000;
/// Distance below which the assembled two-class pgf switches to a circle
/// average around the removable point.
const NEAR_ROOT: f64 = 1e-9;
/// Arguments this close to z = 0 route through the stored atom value.
const NEAR_ATOM: f64 = 1e-9;
/// Below this the boundary section unfolds one equation application instead
/// of summing a series whose leading weight carries the removable 1/z2.
const SECTION_UNFOLD: f64 = 1e-2;
/// Radius of the four-point averaging circle.
const CIRCLE_RADIUS: f64 = 1e-3;
/// Step for the pgf derivatives that report means.
const MEAN_STEP: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum RetrialError {
    #[error("invalid retrial spec: {0}")]
    InvalidSpec(String),
    #[error("atom pin is degenerate (denominator magnitude {denominator:.3e})")]
    DegeneratePin { denominator: f64 },
    #[error("service-start root iteration stalled with residual {residual:.3e}")]
    RootIteration { residual: f64 },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, RetrialError>;

/// Number of arrivals attributed to one service window, described through its
/// probability generating function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PgfSpec {
    /// Poisson arrivals at `rate` accumulated over a service drawn from
    /// `service`: the pgf is the service transform at rate (1 - z).
    PoissonDuringService { rate: f64, service: Dist },
    /// Explicit finite-support count: `coeffs[k]` is the probability of k
    /// arrivals.
    Polynomial { coeffs: Vec<f64> },
}

impl PgfSpec {
    pub fn eval(&self, z: Complex64) -> Result<Complex64> {
        Ok(match self {
            PgfSpec::PoissonDuringService { rate, service } => {
                service.lst(*rate * (Complex64::ONE - z))?
            }
            PgfSpec::Polynomial { coeffs } => {
                let mut acc = Complex64::ZERO;
                for c in coeffs.iter().rev() {
                    acc = acc * z + c;
                }
                acc
            }
        })
    }

    fn validate(&self, label: &str) -> Result<()> {
        match self {
            PgfSpec::PoissonDuringService { rate, service } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(RetrialError::InvalidSpec(format!(
                        "{label} arrival rate must be positive, got {rate}"
                    )));
                }
                service.validate()?;
            }
            PgfSpec::Polynomial { coeffs } => {
                if coeffs.is_empty() || coeffs.iter().any(|c| *c < 0.0 || !c.is_finite()) {
                    return Err(RetrialError::InvalidSpec(format!(
                        "{label} coefficients must be nonnegative and nonempty"
                    )));
                }
            }
        }
        let at_one = self.eval(Complex64::ONE)?;
        if (at_one - 1.0).norm() > PGF_TOL {
            return Err(RetrialError::InvalidSpec(format!(
                "{label} pgf evaluates to {at_one} at z = 1, expected 1"
            )));
        }
        Ok(())
    }
}

/// Separate arrival laws for service windows opened by an orbit customer and
/// by a fresh arrival. The race factor then mixes laws instead of scaling a
/// shared one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassArrivals {
    pub busy_orbit_served: PgfSpec,
    pub busy_arrival_served: PgfSpec,
    pub empty_orbit_served: PgfSpec,
    pub empty_arrival_served: PgfSpec,
}

/// Single-class constant-retrial queue with impatient orbit customers.
///
/// The embedded orbit size X evolves per service completion: the orbit thins
/// by a retention draw from `retention`, the service window adds arrivals,
/// and the next window is opened either by the orbit head or by a fresh
/// arrival, whichever wins the exponential race.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitSpec {
    /// Fresh-arrival rate while the system is empty.
    pub rate_empty: f64,
    /// Fresh-arrival rate at a completion that leaves a customer base behind.
    pub rate_busy: f64,
    /// Orbit retrieval rate out of an empty system.
    pub retrieval_empty: f64,
    /// Orbit retrieval rate at busy completions.
    pub retrieval_busy: f64,
    /// Arrivals during a service window inside a busy period.
    pub arrivals_busy: PgfSpec,
    /// Arrivals during the window that opens a busy period.
    pub arrivals_empty: PgfSpec,
    /// Mixture of per-customer retention probabilities: with probability p_i
    /// every orbiting customer independently survives with probability a_i.
    pub retention: DiscreteMixture,
    /// Class-dependent window laws; `None` shares `arrivals_*` across classes.
    pub classes: Option<ClassArrivals>,
}

impl OrbitSpec {
    pub fn validate(&self) -> Result<()> {
        for (rate, label) in [
            (self.rate_empty, "empty-system arrival rate"),
            (self.rate_busy, "busy-system arrival rate"),
            (self.retrieval_empty, "empty-system retrieval rate"),
            (self.retrieval_busy, "busy-system retrieval rate"),
        ] {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(RetrialError::InvalidSpec(format!(
                    "{label} must be positive, got {rate}"
                )));
            }
        }
        self.arrivals_busy.validate("busy-window")?;
        self.arrivals_empty.validate("empty-window")?;
        if let Some(c) = &self.classes {
            c.busy_orbit_served.validate("busy orbit-served")?;
            c.busy_arrival_served.validate("busy arrival-served")?;
            c.empty_orbit_served.validate("empty orbit-served")?;
            c.empty_arrival_served.validate("empty arrival-served")?;
        }
        self.retention.validate()?;
        for a in &self.retention.values {
            if !(*a > 0.0 && *a <= 1.0) {
                return Err(RetrialError::InvalidSpec(format!(
                    "retention probabilities must lie in (0, 1], got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Solved orbit-size pgf, normalized so that f(1) = 1.
pub struct PgfSolution {
    eval_fn: Arc<dyn Fn(f64) -> Result<f64> + Send + Sync>,
    /// Probability of an empty orbit.
    pub f0: f64,
    /// Mean orbit size f'(1), by central difference.
    pub mean: f64,
    pub diagnostics: Diagnostics,
}

impl PgfSolution {
    /// Evaluates the solved function. Intended for z in [0, 1]; the series
    /// stays valid a little beyond 1, which the mean derivative uses. At
    /// z = 0 the stored atom is returned. Note that the pinned identity
    /// f(0) = C(0) sum_i p_i f(abar_i) removes the recursion's origin
    /// singularity only when C(0) = 1, so with busy-window arrivals the
    /// solved function keeps a simple pole at the origin and leaves the unit
    /// interval as z decreases toward it.
    pub fn eval(&self, z: f64) -> Result<f64> {
        (self.eval_fn)(z)
    }
}

/// Which race factor multiplies the window pgfs.
#[derive(Clone, Copy, PartialEq)]
enum RaceForm {
    /// The next window opener is decided by the arrival/retrieval race.
    Raced,
    /// Limit of infinitely fast retrieval: the race factor drops out.
    Instant,
}

type HatFn = Arc<dyn Fn(Complex64) -> engine::Result<Complex64> + Send + Sync>;

fn to_engine(e: RetrialError) -> EngineError {
    match e {
        RetrialError::Engine(inner) => inner,
        RetrialError::Dist(inner) => EngineError::Dist(inner),
        other => EngineError::Invalid(other.to_string()),
    }
}

/// Race-adjusted busy-window pgf.
fn hat_busy(spec: &OrbitSpec, form: RaceForm) -> HatFn {
    let (rate, retrieval) = (spec.rate_busy, spec.retrieval_busy);
    match (&spec.classes, form) {
        (None, RaceForm::Raced) => {
            let c = spec.arrivals_busy.clone();
            Arc::new(move |z| {
                let base = c.eval(z).map_err(to_engine)?;
                Ok(base * (retrieval + rate * z) / (rate + retrieval))
            })
        }
        (None, RaceForm::Instant) => {
            let c = spec.arrivals_busy.clone();
            Arc::new(move |z| c.eval(z).map_err(to_engine))
        }
        (Some(cl), RaceForm::Raced) => {
            let (co, cp) = (cl.busy_orbit_served.clone(), cl.busy_arrival_served.clone());
            Arc::new(move |z| {
                let o = co.eval(z).map_err(to_engine)?;
                let p = cp.eval(z).map_err(to_engine)?;
                Ok((retrieval * o + rate * z * p) / (rate + retrieval))
            })
        }
        (Some(cl), RaceForm::Instant) => {
            let co = cl.busy_orbit_served.clone();
            Arc::new(move |z| co.eval(z).map_err(to_engine))
        }
    }
}

/// Race-adjusted empty-window pgf.
fn hat_empty(spec: &OrbitSpec, form: RaceForm) -> HatFn {
    let (rate, retrieval) = (spec.rate_empty, spec.retrieval_empty);
    match (&spec.classes, form) {
        (None, RaceForm::Raced) => {
            let g = spec.arrivals_empty.clone();
            Arc::new(move |z| {
                let base = g.eval(z).map_err(to_engine)?;
                Ok(base * (retrieval + rate * z) / (rate + retrieval))
            })
        }
        (None, RaceForm::Instant) => {
            let g = spec.arrivals_empty.clone();
            Arc::new(move |z| g.eval(z).map_err(to_engine))
        }
        (Some(cl), RaceForm::Raced) => {
            let (go, gp) = (
                cl.empty_orbit_served.clone(),
                cl.empty_arrival_served.clone(),
            );
            Arc::new(move |z| {
                let o = go.eval(z).map_err(to_engine)?;
                let p = gp.eval(z).map_err(to_engine)?;
                Ok((retrieval * o + rate * z * p) / (rate + retrieval))
            })
        }
        (Some(cl), RaceForm::Instant) => {
            let go = cl.empty_orbit_served.clone();
            Arc::new(move |z| go.eval(z).map_err(to_engine))
        }
    }
}

/// Weight of the atom identity f(0) = c0 * sum_i p_i f(abar_i): the
/// no-arrival probability of a busy window, mixed over the served class so
/// that coincident class laws collapse to the shared form.
fn pin_weight(spec: &OrbitSpec, form: RaceForm) -> Result<f64> {
    let at0 = |p: &PgfSpec| -> Result<f64> { Ok(p.eval(Complex64::ZERO)?.re) };
    Ok(match (&spec.classes, form) {
        (None, _) => at0(&spec.arrivals_busy)?,
        (Some(cl), RaceForm::Raced) => {
            let (rate, retrieval) = (spec.rate_busy, spec.retrieval_busy);
            (retrieval * at0(&cl.busy_orbit_served)? + rate * at0(&cl.busy_arrival_served)?)
                / (rate + retrieval)
        }
        (Some(cl), RaceForm::Instant) => at0(&cl.busy_orbit_served)?,
    })
}

/// Race-adjusted window pgfs (busy, empty) at one point.
pub fn build_hat_pgfs(spec: &OrbitSpec, z: Complex64) -> Result<(Complex64, Complex64)> {
    let busy = hat_busy(spec, RaceForm::Raced)(z).map_err(RetrialError::Engine)?;
    let empty = hat_empty(spec, RaceForm::Raced)(z).map_err(RetrialError::Engine)?;
    Ok((busy, empty))
}

/// Retention maps z -> 1 - a_i (1 - z); they share the fixed point 1, so the
/// branch family commutes.
fn retention_maps(retention: &DiscreteMixture) -> Result<Vec<AffineMap>> {
    for a in &retention.values {
        if *a >= 1.0 {
            return Err(RetrialError::InvalidSpec(
                "retention probability 1 gives an identity branch map, and the layered series \
                 cannot contract through it"
                    .into(),
            ));
        }
    }
    Ok(retention
        .values
        .iter()
        .map(|a| AffineMap {
            scale: *a,
            shift: 1.0 - a,
        })
        .collect())
}

/// Stationary orbit-size pgf.
///
/// The stationary equation is f(z) = g(z) sum_i p_i f(abar_i + a_i z) + f(0)
/// k(z) with g the race-adjusted busy-window pgf over z and k the forcing
/// combination of the window pgfs. The layered series gives the homogeneous
/// limit (coefficient of f(1) = 1) and the forcing response to k; the single
/// unknown f(0) is pinned by the atom identity f(0) = C(0) sum_i p_i
/// f(abar_i), evaluated through the series rather than through the removable
/// 1/z factor in g.
pub fn solve_orbit_pgf(spec: &OrbitSpec, opts: &SolveOptions) -> Result<PgfSolution> {
    spec.validate()?;
    solve_orbit_core(spec, RaceForm::Raced, opts)
}

/// Same equation in the limit of infinitely fast retrieval, where the race
/// factors drop out and the window pgfs act unmodified.
pub fn solve_orbit_pgf_instant_retrieval(
    spec: &OrbitSpec,
    opts: &SolveOptions,
) -> Result<PgfSolution> {
    spec.validate()?;
    solve_orbit_core(spec, RaceForm::Instant, opts)
}

fn solve_orbit_core(spec: &OrbitSpec, form: RaceForm, opts: &SolveOptions) -> Result<PgfSolution> {
    let probs = spec.retention.probs.clone();
    let maps = retention_maps(&spec.retention)?;
    let chat = hat_busy(spec, form);
    let ghat = hat_empty(spec, form);
    let ghat0 = ghat(Complex64::ZERO).map_err(RetrialError::Engine)?;
    let c0 = pin_weight(spec, form)?;

    let forcing: HatFn = {
        let (chat, ghat) = (chat.clone(), ghat.clone());
        Arc::new(move |z| Ok((ghat0 * (z - 1.0) + ghat(z)? - chat(z)?) / z))
    };
    let branches = |probs: &[f64], maps: &[AffineMap]| -> Vec<BranchTerm> {
        probs
            .iter()
            .zip(maps)
            .map(|(p, m)| {
                let chat = chat.clone();
                let p = *p;
                BranchTerm::new(Box::new(move |z| Ok(p * chat(z)? / z)), *m)
            })
            .collect()
    };

    // The pin denominator 1 - C(0) sum_i p_i S(abar_i) vanishes when the
    // forcing response reproduces the atom identity on its own; the engine's
    // one-by-one system cannot see that, so check it here first.
    let probe = FunctionalEquation::new(
        branches(&probs, &maps),
        Box::new({
            let forcing = forcing.clone();
            move |z| forcing(z)
        }),
        vec![],
    );
    let mut s_bar = Complex64::ZERO;
    for (p, m) in probs.iter().zip(&maps) {
        let (_, s) = solve_multi_branch_parts(&probe, Complex64::new(m.shift, 0.0), opts)?;
        s_bar += p * s;
    }
    let den = Complex64::ONE - c0 * s_bar;
    if den.norm() < PIN_TOL {
        return Err(RetrialError::DegeneratePin {
            denominator: den.norm(),
        });
    }

    let basis: CFn = Box::new({
        let forcing = forcing.clone();
        move |z| forcing(z)
    });
    let eq = FunctionalEquation::new(
        branches(&probs, &maps),
        engine::constant(Complex64::ZERO),
        vec![basis],
    );
    let pin = Constraint {
        const_coeffs: vec![Complex64::ONE],
        z_terms: probs
            .iter()
            .zip(&maps)
            .map(|(p, m)| (Complex64::from(-c0 * p), Complex64::new(m.shift, 0.0)))
            .collect(),
        rhs: Complex64::ZERO,
    };
    let sol = solve_with_linear_constants(eq, &[pin], opts)?;
    let f0 = sol.constants[0].re;
    let diagnostics = sol.diagnostics;

    let transform = Arc::new(sol);
    let eval_fn: Arc<dyn Fn(f64) -> Result<f64> + Send + Sync> = {
        let transform = transform.clone();
        Arc::new(move |z: f64| {
            if z.abs() < NEAR_ATOM {
                return Ok(f0);
            }
            let v = (transform.eval)(Complex64::new(z, 0.0))?;
            Ok(v.re)
        })
    };
    let mean = (eval_fn(1.0 + MEAN_STEP)? - eval_fn(1.0 - MEAN_STEP)?) / (2.0 * MEAN_STEP);

    Ok(PgfSolution {
        eval_fn,
        f0,
        mean,
        diagnostics,
    })
}

/// Joint law of the per-service arrivals of the two classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum JointPgf {
    /// Independent Poisson streams of both classes, at the spec's rates,
    /// accumulated over a service drawn from `service`.
    PoissonDuringService { service: Dist },
    /// Explicit joint law: `coeffs[i][j]` is the probability of i queueing
    /// arrivals and j orbit arrivals.
    Polynomial { coeffs: Vec<Vec<f64>> },
}

impl JointPgf {
    /// Joint arrival pgf A(z1, z2) with the class rates folded in.
    pub fn eval_at(
        &self,
        rate_primary: f64,
        rate_orbit: f64,
        z1: Complex64,
        z2: Complex64,
    ) -> Result<Complex64> {
        Ok(match self {
            JointPgf::PoissonDuringService { service } => service.lst(
                rate_primary * (Complex64::ONE - z1) + rate_orbit * (Complex64::ONE - z2),
            )?,
            JointPgf::Polynomial { coeffs } => {
                let mut acc = Complex64::ZERO;
                for row in coeffs.iter().rev() {
                    let mut inner = Complex64::ZERO;
                    for c in row.iter().rev() {
                        inner = inner * z2 + c;
                    }
                    acc = acc * z1 + inner;
                }
                acc
            }
        })
    }

    /// Mean number of queueing-class arrivals per service.
    fn mean_primary(&self, rate_primary: f64) -> Result<f64> {
        Ok(match self {
            JointPgf::PoissonDuringService { service } => rate_primary * service.mean()?,
            JointPgf::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .map(|(i, row)| i as f64 * row.iter().sum::<f64>())
                .sum(),
        })
    }

    fn validate(&self, rate_primary: f64, rate_orbit: f64) -> Result<()> {
        match self {
            JointPgf::PoissonDuringService { service } => service.validate()?,
            JointPgf::Polynomial { coeffs } => {
                if coeffs.is_empty() || coeffs.iter().any(|r| r.is_empty()) {
                    return Err(RetrialError::InvalidSpec(
                        "joint arrival coefficients must be a nonempty grid".into(),
                    ));
                }
                if coeffs
                    .iter()
                    .flatten()
                    .any(|c| *c < 0.0 || !c.is_finite())
                {
                    return Err(RetrialError::InvalidSpec(
                        "joint arrival coefficients must be nonnegative".into(),
                    ));
                }
            }
        }
        let at_one = self.eval_at(rate_primary, rate_orbit, Complex64::ONE, Complex64::ONE)?;
        if (at_one - 1.0).norm() > PGF_TOL {
            return Err(RetrialError::InvalidSpec(format!(
                "joint arrival pgf evaluates to {at_one} at (1, 1), expected 1"
            )));
        }
        Ok(())
    }
}

/// Two-class queue: queueing customers are served exhaustively first, and a
/// constant-retrial orbit with impatience holds the second class. State
/// (X1, X2) is embedded at service starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrioritySpec {
    /// Arrival rate of the queueing (served-first) class.
    pub rate_primary: f64,
    /// Arrival rate of the orbit class.
    pub rate_orbit: f64,
    /// Orbit retrieval rate while the server idles.
    pub retrieval: f64,
    /// Joint per-service arrival law of the two classes.
    pub arrivals: JointPgf,
    /// Per-customer orbit retention mixture, as in [`OrbitSpec`].
    pub retention: DiscreteMixture,
}

impl PrioritySpec {
    pub fn validate(&self) -> Result<()> {
        for (rate, label) in [
            (self.rate_primary, "queueing-class arrival rate"),
            (self.rate_orbit, "orbit-class arrival rate"),
            (self.retrieval, "retrieval rate"),
        ] {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(RetrialError::InvalidSpec(format!(
                    "{label} must be positive, got {rate}"
                )));
            }
        }
        self.arrivals.validate(self.rate_primary, self.rate_orbit)?;
        self.retention.validate()?;
        for a in &self.retention.values {
            if !(*a > 0.0 && *a <= 1.0) {
                return Err(RetrialError::InvalidSpec(format!(
                    "retention probabilities must lie in (0, 1], got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Root of z1 = A(z1, z2) inside the unit disk, by monotone fixed-point
/// iteration from 0. The root is the pgf of the queueing-class population at
/// the end of a busy sub-period opened by one customer.
pub fn root_q(spec: &PrioritySpec, z2: f64) -> Result<f64> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&z2) {
        return Err(RetrialError::InvalidSpec(format!(
            "root argument {z2} must lie in [0, 1]"
        )));
    }
    let z2c = Complex64::new(z2, 0.0);
    let q = fixed_point(spec, z2c)?;
    reject_identity_family(spec, z2c, q)?;
    Ok(q.re)
}

fn fixed_point(spec: &PrioritySpec, z2: Complex64) -> Result<Complex64> {
    let mut z = Complex64::ZERO;
    let mut residual = f64::INFINITY;
    for _ in 0..ROOT_CAP {
        let next = spec
            .arrivals
            .eval_at(spec.rate_primary, spec.rate_orbit, z, z2)?;
        residual = (next - z).norm();
        z = next;
        if residual < ROOT_TOL {
            return Ok(z);
        }
    }
    Err(RetrialError::RootIteration { residual })
}

/// An arrival pgf that fixes every point (A(z1, z2) = z1) makes the root
/// meaningless; probe a second point away from the converged one.
fn reject_identity_family(spec: &PrioritySpec, z2: Complex64, q: Complex64) -> Result<()> {
    let probe = if (q.re - 0.5).abs() > 0.05 { 0.5 } else { 0.75 };
    let at = spec
        .arrivals
        .eval_at(spec.rate_primary, spec.rate_orbit, Complex64::from(probe), z2)?;
    if (at - probe).norm() < PGF_TOL {
        return Err(RetrialError::InvalidSpec(
            "arrival pgf fixes every point in the disk; the service-start root is not isolated"
                .into(),
        ));
    }
    Ok(())
}

/// Solved two-class pgf F(z1, z2), normalized so that F(1, 1) = 1.
pub struct PrioritySolution {
    eval_fn: Arc<dyn Fn(f64, f64) -> Result<f64> + Send + Sync>,
    section_fn: Arc<dyn Fn(f64) -> Result<f64> + Send + Sync>,
    /// Pinned constant of the recursion, equal to sum_i p_i F(0, abar_i).
    /// Without impatience it coincides with the joint atom F(0, 0); with
    /// thinning the atom itself is `eval(0, 0)` and lies below this mass.
    pub f00: f64,
    /// Probability a service begins with the queueing class empty; the scale
    /// of the boundary section.
    pub empty_queue_prob: f64,
    /// Mean queueing-class population at service starts.
    pub mean_primary: f64,
    /// Mean orbit population at service starts.
    pub mean_orbit: f64,
    pub diagnostics: Diagnostics,
}

impl PrioritySolution {
    /// Evaluates the joint pgf on [0, 1]^2 (valid slightly beyond 1).
    pub fn eval(&self, z1: f64, z2: f64) -> Result<f64> {
        (self.eval_fn)(z1, z2)
    }

    /// Evaluates the empty-queue section F(0, z2).
    pub fn section(&self, z2: f64) -> Result<f64> {
        (self.section_fn)(z2)
    }
}

/// Shared pieces of the assembled two-class evaluation.
struct PriorityParts {
    spec: PrioritySpec,
    probs: Vec<f64>,
    maps: Vec<AffineMap>,
    a00: Complex64,
    f00: f64,
    scale: f64,
    section: Arc<TransformSolution>,
}

impl PriorityParts {
    fn arrive(&self, z1: Complex64, z2: Complex64) -> engine::Result<Complex64> {
        self.spec
            .arrivals
            .eval_at(self.spec.rate_primary, self.spec.rate_orbit, z1, z2)
            .map_err(to_engine)
    }

    /// Boundary section F(0, z2) for complex arguments, through the layered
    /// series scaled back from its normalized form. Near z2 = 0 the leading
    /// branch weight carries the removable 1/z2 and the series noise floor
    /// outruns its tail tolerance, so one application of the defining
    /// recursion moves the argument onto the retention atoms, where the
    /// factor cancels against the pinned constant. At z2 = 0 itself the
    /// removable limit is taken as a four-point circle average; it is the
    /// joint atom F(0, 0) and under impatience it sits below the pinned
    /// thinned-empty mass.
    fn section_at(&self, z2: Complex64) -> engine::Result<Complex64> {
        if (z2 - 1.0).norm() < NEAR_ATOM {
            return Ok(Complex64::from(self.scale));
        }
        if z2.norm() < NEAR_ATOM {
            let mut acc = Complex64::ZERO;
            for k in 0..4 {
                let angle = std::f64::consts::FRAC_PI_2 * k as f64;
                let offset = CIRCLE_RADIUS * Complex64::new(angle.cos(), angle.sin());
                acc += self.section_at(z2 + offset)?;
            }
            return Ok(acc / 4.0);
        }
        if z2.norm() < SECTION_UNFOLD {
            let q = fixed_point(&self.spec, z2).map_err(to_engine)?;
            let lam = self.spec.rate_primary + self.spec.rate_orbit;
            let idle = self.spec.retrieval + lam * (Complex64::ONE - q);
            let a0z2 = self.arrive(Complex64::ZERO, z2)?;
            let mut bracket = self.f00 * self.a00 * (z2 - 1.0) / a0z2;
            for (p, m) in self.probs.iter().zip(&self.maps) {
                bracket += p * self.section_at(m.apply(z2))?;
            }
            return Ok(self.spec.retrieval * q / (idle * z2) * bracket);
        }
        Ok(self.scale * (self.section.eval)(z2)?)
    }

    /// Assembled joint pgf. The division by z1 - A(z1, z2) is removable at
    /// the service-start root and at (1, 1); both are evaluated as four-point
    /// circle averages. The 1/z2 factors cancel through the atom identity, so
    /// z2 near 0 is averaged as well.
    fn eval(&self, z1: Complex64, z2: Complex64) -> engine::Result<Complex64> {
        if z2.norm() < NEAR_ATOM {
            let mut acc = Complex64::ZERO;
            for k in 0..4 {
                let angle = std::f64::consts::FRAC_PI_2 * k as f64;
                let offset = CIRCLE_RADIUS * Complex64::new(angle.cos(), angle.sin());
                acc += self.eval_inner(z1, z2 + offset, true)?;
            }
            return Ok(acc / 4.0);
        }
        self.eval_inner(z1, z2, true)
    }

    fn eval_inner(
        &self,
        z1: Complex64,
        z2: Complex64,
        guard: bool,
    ) -> engine::Result<Complex64> {
        let den = z1 - self.arrive(z1, z2)?;
        if guard && den.norm() < NEAR_ROOT {
            let mut acc = Complex64::ZERO;
            for k in 0..4 {
                let angle = std::f64::consts::FRAC_PI_2 * k as f64;
                let offset = CIRCLE_RADIUS * Complex64::new(angle.cos(), angle.sin());
                acc += self.eval_inner(z1 + offset, z2, false)?;
            }
            return Ok(acc / 4.0);
        }
        let lam = self.spec.rate_primary + self.spec.rate_orbit;
        let total = lam + self.spec.retrieval;
        let retrieval = self.spec.retrieval;
        let a0z2 = self.arrive(Complex64::ZERO, z2)?;
        let mut thinned = Complex64::ZERO;
        for (p, m) in self.probs.iter().zip(&self.maps) {
            thinned += p * self.section_at(m.apply(z2))?;
        }
        let numerator = retrieval * a0z2 * z1 / (z2 * total) * thinned
            - self.section_at(z2)? * a0z2 * (retrieval + lam * (Complex64::ONE - z1)) / total
            + self.f00 * self.a00 * retrieval * (z2 - 1.0) * z1 / (z2 * total);
        Ok(numerator / den)
    }
}

/// Joint pgf of the two-class priority queue with an impatient retrial orbit.
///
/// Setting z1 to the service-start root reduces the defining relation to a
/// one-dimensional equation for the boundary section F(0, z2) with the same
/// contraction structure as the single-class orbit. The section is only
/// determined up to its value at 1 there, so it is solved in normalized form,
/// scaled by the closed-form empty-queue probability (1 - m1)/A(0, 1) with m1
/// the mean queueing-class batch, and the remaining constant is pinned to the
/// thinned-empty mass sum_i p_i F(0, abar_i), which also makes the removable
/// point of the assembled formula at z2 = 0 cancel.
pub fn solve_priority(spec: &PrioritySpec, opts: &SolveOptions) -> Result<PrioritySolution> {
    spec.validate()?;
    let lam = spec.rate_primary + spec.rate_orbit;
    let retrieval = spec.retrieval;
    let m1 = spec.arrivals.mean_primary(spec.rate_primary)?;
    if m1 >= 1.0 {
        return Err(RetrialError::InvalidSpec(format!(
            "queueing-class batch mean {m1:.4} admits no stationary regime"
        )));
    }
    reject_identity_family(spec, Complex64::new(0.5, 0.0), Complex64::ZERO)?;

    let a01 = spec
        .arrivals
        .eval_at(spec.rate_primary, spec.rate_orbit, Complex64::ZERO, Complex64::ONE)?;
    if a01.norm() < PIN_TOL {
        return Err(RetrialError::InvalidSpec(
            "arrival pgf vanishes at (0, 1); every service sees queueing arrivals and the \
             boundary scale is undefined"
                .into(),
        ));
    }
    let scale = (1.0 - m1) / a01.re;
    let a00 = spec
        .arrivals
        .eval_at(spec.rate_primary, spec.rate_orbit, Complex64::ZERO, Complex64::ZERO)?;

    let probs = spec.retention.probs.clone();
    let maps = retention_maps(&spec.retention)?;

    // Branch weight g(z2) = retrieval q / (z2 (retrieval + lam (1 - q))) and
    // forcing shape l(z2), both driven by the service-start root.
    let root_spec = spec.clone();
    let root: Arc<dyn Fn(Complex64) -> engine::Result<Complex64> + Send + Sync> =
        Arc::new(move |z2| fixed_point(&root_spec, z2).map_err(to_engine));
    let g: HatFn = {
        let root = root.clone();
        Arc::new(move |z2| {
            let q = root(z2)?;
            Ok(retrieval * q / (z2 * (retrieval + lam * (Complex64::ONE - q))))
        })
    };
    let forcing: HatFn = {
        let root = root.clone();
        let fspec = spec.clone();
        Arc::new(move |z2| {
            let q = root(z2)?;
            let a0z2 = fspec
                .arrivals
                .eval_at(fspec.rate_primary, fspec.rate_orbit, Complex64::ZERO, z2)
                .map_err(to_engine)?;
            Ok(a00 * retrieval * (z2 - 1.0) * q
                / (a0z2 * (retrieval + lam * (Complex64::ONE - q)) * z2))
        })
    };
    let branches = |probs: &[f64], maps: &[AffineMap]| -> Vec<BranchTerm> {
        probs
            .iter()
            .zip(maps)
            .map(|(p, m)| {
                let g = g.clone();
                let p = *p;
                BranchTerm::new(Box::new(move |z| Ok(p * g(z)?)), *m)
            })
            .collect()
    };

    // Normalized section W = F(0, .)/F(0, 1) solves W = sum_i p_i g W(m_i) +
    // D l with D = F(0, 0)/F(0, 1); the atom identity becomes D = sum_i p_i
    // W(abar_i). Check its denominator before handing the engine a
    // one-by-one system it cannot diagnose.
    let probe = FunctionalEquation::new(
        branches(&probs, &maps),
        Box::new({
            let forcing = forcing.clone();
            move |z| forcing(z)
        }),
        vec![],
    );
    let mut s_bar = Complex64::ZERO;
    for (p, m) in probs.iter().zip(&maps) {
        let (_, s) = solve_multi_branch_parts(&probe, Complex64::new(m.shift, 0.0), opts)?;
        s_bar += p * s;
    }
    let den = Complex64::ONE - s_bar;
    if den.norm() < PIN_TOL {
        return Err(RetrialError::DegeneratePin {
            denominator: den.norm(),
        });
    }

    let basis: CFn = Box::new({
        let forcing = forcing.clone();
        move |z| forcing(z)
    });
    let eq = FunctionalEquation::new(
        branches(&probs, &maps),
        engine::constant(Complex64::ZERO),
        vec![basis],
    );
    let pin = Constraint {
        const_coeffs: vec![Complex64::ONE],
        z_terms: probs
            .iter()
            .zip(&maps)
            .map(|(p, m)| (Complex64::from(-*p), Complex64::new(m.shift, 0.0)))
            .collect(),
        rhs: Complex64::ZERO,
    };
    let sol = solve_with_linear_constants(eq, &[pin], opts)?;
    let f00 = scale * sol.constants[0].re;
    let diagnostics = sol.diagnostics;

    let parts = Arc::new(PriorityParts {
        spec: spec.clone(),
        probs,
        maps,
        a00,
        f00,
        scale,
        section: Arc::new(sol),
    });

    let mean_primary = {
        let up = parts.eval(Complex64::from(1.0 + MEAN_STEP), Complex64::ONE)?;
        let down = parts.eval(Complex64::from(1.0 - MEAN_STEP), Complex64::ONE)?;
        ((up - down) / (2.0 * MEAN_STEP)).re
    };
    let mean_orbit = {
        let up = parts.eval(Complex64::ONE, Complex64::from(1.0 + MEAN_STEP))?;
        let down = parts.eval(Complex64::ONE, Complex64::from(1.0 - MEAN_STEP))?;
        ((up - down) / (2.0 * MEAN_STEP)).re
    };

    let eval_fn: Arc<dyn Fn(f64, f64) -> Result<f64> + Send + Sync> = {
        let parts = parts.clone();
        Arc::new(move |z1, z2| {
            let v = parts.eval(Complex64::from(z1), Complex64::from(z2))?;
            Ok(v.re)
        })
    };
    let section_fn: Arc<dyn Fn(f64) -> Result<f64> + Send + Sync> = {
        let parts = parts.clone();
        Arc::new(move |z2| Ok(parts.section_at(Complex64::from(z2))?.re))
    };

    Ok(PrioritySolution {
        eval_fn,
        section_fn,
        f00,
        empty_queue_prob: scale,
        mean_primary,
        mean_orbit,
        diagnostics,
    })
}
