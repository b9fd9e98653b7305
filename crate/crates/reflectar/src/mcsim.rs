//! Monte Carlo cross-checks for the analytic solvers. Replications run on
//! independent, fixed counter-based RNG streams and are reduced in
//! replication order, so results are bit-identical for any thread count.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::models::{ModelError, ModelSpec, PropService, Result};
use crate::retrial::{JointPgf, OrbitSpec, PgfSpec, PrioritySpec};

/// Replication layout and evaluation points for a simulation run.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub replications: usize,
    pub horizon: u64,
    pub burn_in: u64,
    pub seed: u64,
    pub s_grid: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            replications: 64,
            horizon: 100_000,
            burn_in: 10_000,
            seed: 1,
            s_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(ModelError::InvalidSpec(
                "at least one replication is required".into(),
            ));
        }
        if self.burn_in >= self.horizon {
            return Err(ModelError::InvalidSpec(format!(
                "burn_in {} must be below horizon {}",
                self.burn_in, self.horizon
            )));
        }
        Ok(())
    }
}

/// Point estimate with an across-replication standard error. `seed` records
/// the base seed the estimate was produced from.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimEstimate {
    pub mean: Complex64,
    pub stderr: f64,
    pub n: u64,
    pub seed: u64,
}

/// Simulated stationary summary of a waiting-time model.
#[derive(Debug, Clone, Serialize)]
pub struct WaitingSim {
    pub z: Vec<(f64, SimEstimate)>,
    pub p0: SimEstimate,
    pub ew: SimEstimate,
    pub stationarity_warning: Option<String>,
}

/// One transition of the waiting-time recursion.
fn step(spec: &ModelSpec, w: f64, rng: &mut ChaCha12Rng) -> Result<f64> {
    Ok(match spec {
        ModelSpec::PropService(m) => {
            let b = m.service.sample(rng)?;
            let beta = m.scale.sample(rng);
            let j = m.delay.sample(rng)?;
            (m.a * w + (1.0 - beta) * b - j).max(0.0)
        }
        ModelSpec::MixedDelay(m) => {
            let b = m.service.sample(rng)?;
            let c = m.scale.sample(rng);
            let u: f64 = rng.random();
            if u < m.p_plus {
                let j = m.delay_plus.sample(rng)?;
                (m.a * w + (1.0 - c) * b - j).max(0.0)
            } else {
                let j = m.delay_minus.sample(rng)?;
                let inter = (c * b - j).max(0.0);
                (m.a * w + b - inter).max(0.0)
            }
        }
        ModelSpec::SystemTime(m) => {
            let b = m.service.sample(rng)?;
            let beta = m.scale.sample(rng);
            let j = -(1.0 - rng.random::<f64>()).ln() / m.rate;
            ((1.0 - m.epsilon * beta) * (w + b) - j).max(0.0)
        }
        ModelSpec::WaitDepService(m) => {
            let b = -(1.0 - rng.random::<f64>()).ln() / m.service_rate;
            let arr = -(1.0 - rng.random::<f64>()).ln() / m.arrival_rate;
            let om = m.obsolescence.sample(rng);
            (w + (b - om * w).max(0.0) - arr).max(0.0)
        }
        ModelSpec::Threshold(m) => {
            let b = m.service.sample(rng)?;
            let t = m.threshold.sample(rng)?;
            if b < t {
                let arr = -(1.0 - rng.random::<f64>()).ln() / m.lambda0;
                (m.a0 * w + b - arr).max(0.0)
            } else {
                // Above the threshold only the threshold amount is served.
                let arr = -(1.0 - rng.random::<f64>()).ln() / m.lambda1;
                (m.a1 * w + t - arr).max(0.0)
            }
        }
        ModelSpec::GeneralDep(m) => {
            let b = m.service.sample(rng)?;
            let x = m.chi.sample(rng)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut idx = m.psi.len() - 1;
            for (i, term) in m.psi.iter().enumerate() {
                acc += term.weight;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            let dep = match &m.psi[idx].kind {
                crate::models::PsiKind::Linear { slope } => slope * b,
                crate::models::PsiKind::CompoundPoisson { rate, jump } => {
                    let count = poisson(rng, rate * b);
                    let mut total = 0.0;
                    for _ in 0..count {
                        total += jump.sample(rng)?;
                    }
                    total
                }
            };
            (m.a * w + b - (x + dep)).max(0.0)
        }
    })
}

/// Poisson draw: product-of-uniforms for small means, recursive halving
/// (a Poisson mean splits into independent halves) for large ones.
fn poisson(rng: &mut ChaCha12Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    if mean <= 30.0 {
        let limit = (-mean).exp();
        let mut prod: f64 = rng.random();
        let mut n = 0u64;
        while prod > limit {
            prod *= rng.random::<f64>();
            n += 1;
        }
        n
    } else {
        poisson(rng, mean / 2.0) + poisson(rng, mean - mean / 2.0)
    }
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

struct RepStats {
    z_means: Vec<f64>,
    p0_frac: f64,
    w_mean: f64,
    half_means: (f64, f64),
}

fn run_rep(spec: &ModelSpec, cfg: &SimConfig, rep: usize) -> Result<RepStats> {
    let mut rng = rep_rng(cfg.seed, rep);
    let mut w = 0.0f64;
    for _ in 0..cfg.burn_in {
        w = step(spec, w, &mut rng)?;
    }
    let kept = cfg.horizon - cfg.burn_in;
    let half = kept / 2;
    let mut z_sums = vec![0.0f64; cfg.s_grid.len()];
    let mut zero_count = 0u64;
    let mut w_sum = 0.0f64;
    let mut first_half = 0.0f64;
    for i in 0..kept {
        w = step(spec, w, &mut rng)?;
        for (k, s) in cfg.s_grid.iter().enumerate() {
            z_sums[k] += (-s * w).exp();
        }
        if w == 0.0 {
            zero_count += 1;
        }
        w_sum += w;
        if i < half {
            first_half += w;
        }
    }
    let n = kept as f64;
    Ok(RepStats {
        z_means: z_sums.iter().map(|v| v / n).collect(),
        p0_frac: zero_count as f64 / n,
        w_mean: w_sum / n,
        half_means: (
            first_half / half.max(1) as f64,
            (w_sum - first_half) / (kept - half).max(1) as f64,
        ),
    })
}

/// Across-replication mean and standard error of one scalar per replication.
fn reduce(values: &[f64], n_per_rep: u64, seed: u64) -> SimEstimate {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        (var / r).sqrt()
    } else {
        0.0
    };
    SimEstimate {
        mean: Complex64::new(mean, 0.0),
        stderr,
        n: n_per_rep * values.len() as u64,
        seed,
    }
}

/// Simulate the stationary waiting-time law of a model: transform values on
/// the configured grid, the atom at zero, and the mean, with a warning when
/// the first and second halves of the kept samples disagree beyond noise.
pub fn sim_waiting(spec: &ModelSpec, cfg: &SimConfig) -> Result<WaitingSim> {
    spec.validate()?;
    cfg.validate()?;
    let reps: Vec<RepStats> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_rep(spec, cfg, rep))
        .collect::<Result<Vec<_>>>()?;

    let kept = cfg.horizon - cfg.burn_in;
    let z = cfg
        .s_grid
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let per_rep: Vec<f64> = reps.iter().map(|r| r.z_means[k]).collect();
            (*s, reduce(&per_rep, kept, cfg.seed))
        })
        .collect();
    let p0_vals: Vec<f64> = reps.iter().map(|r| r.p0_frac).collect();
    let ew_vals: Vec<f64> = reps.iter().map(|r| r.w_mean).collect();
    let h1: Vec<f64> = reps.iter().map(|r| r.half_means.0).collect();
    let h2: Vec<f64> = reps.iter().map(|r| r.half_means.1).collect();
    let e1 = reduce(&h1, kept / 2, cfg.seed);
    let e2 = reduce(&h2, kept - kept / 2, cfg.seed);
    let gap = (e1.mean.re - e2.mean.re).abs();
    let noise = 3.0 * (e1.stderr.powi(2) + e2.stderr.powi(2)).sqrt();
    let stationarity_warning = if gap > noise {
        Some(format!(
            "first/second half means {:.4} vs {:.4} differ beyond noise {:.4}; consider a longer burn-in",
            e1.mean.re, e2.mean.re, noise
        ))
    } else {
        None
    };

    Ok(WaitingSim {
        z,
        p0: reduce(&p0_vals, kept, cfg.seed),
        ew: reduce(&ew_vals, kept, cfg.seed),
        stationarity_warning,
    })
}

/// Simulate the discounted time-dependent transform of the proportional
/// model from start wait `w`: sum over n of r^n exp(-s W_{n+1}), averaged
/// over independent restarted paths. The geometric truncation bound on the
/// dropped tail is added to the standard error.
pub fn sim_transient(
    spec: &PropService,
    r: f64,
    w: f64,
    s: f64,
    cfg: &SimConfig,
) -> Result<SimEstimate> {
    spec.validate()?;
    cfg.validate()?;
    if !(r > 0.0 && r < 1.0) {
        return Err(ModelError::InvalidSpec(format!(
            "discount r = {r} must lie in (0,1)"
        )));
    }
    // Truncation depth: the dropped tail sums to at most r^(N+1)/(1-r).
    let mut n_steps = 0u64;
    let mut tail = r / (1.0 - r);
    while tail >= 1e-6 {
        tail *= r;
        n_steps += 1;
    }
    let trunc_bound = tail;
    let paths_per_rep = (cfg.horizon / (n_steps + 1)).max(1);
    let model = ModelSpec::PropService(spec.clone());

    let per_rep: Vec<f64> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let mut rng = rep_rng(cfg.seed, rep);
            let mut acc = 0.0f64;
            for _ in 0..paths_per_rep {
                // The n = 0 term uses the starting wait itself; stepping
                // happens after each term is banked.
                let mut cur = w;
                let mut disc = 1.0f64;
                acc += (-s * cur).exp();
                for _ in 0..n_steps {
                    disc *= r;
                    cur = step(&model, cur, &mut rng)?;
                    acc += disc * (-s * cur).exp();
                }
            }
            Ok(acc / paths_per_rep as f64)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut est = reduce(&per_rep, paths_per_rep * (n_steps + 1), cfg.seed);
    est.stderr += trunc_bound;
    Ok(est)
}

/// Survivors of independent Bernoulli retention over `n` customers.
fn binomial(rng: &mut ChaCha12Rng, n: u64, p: f64) -> u64 {
    let mut kept = 0;
    for _ in 0..n {
        if rng.random::<f64>() < p {
            kept += 1;
        }
    }
    kept
}

/// Draw an arrival count from a pgf-described window law.
fn sample_count(spec: &PgfSpec, rng: &mut ChaCha12Rng) -> Result<u64> {
    Ok(match spec {
        PgfSpec::PoissonDuringService { rate, service } => {
            let b = service.sample(rng)?;
            poisson(rng, rate * b)
        }
        PgfSpec::Polynomial { coeffs } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut drawn = coeffs.len() as u64 - 1;
            for (k, c) in coeffs.iter().enumerate() {
                acc += c;
                if u < acc {
                    drawn = k as u64;
                    break;
                }
            }
            drawn
        }
    })
}

/// Draw a joint arrival pair for the two-class chain.
fn sample_joint(
    arrivals: &JointPgf,
    rate_primary: f64,
    rate_orbit: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(u64, u64)> {
    Ok(match arrivals {
        JointPgf::PoissonDuringService { service } => {
            let b = service.sample(rng)?;
            (poisson(rng, rate_primary * b), poisson(rng, rate_orbit * b))
        }
        JointPgf::Polynomial { coeffs } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut drawn = (coeffs.len() as u64 - 1, 0u64);
            'outer: for (i, row) in coeffs.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    acc += c;
                    if u < acc {
                        drawn = (i as u64, j as u64);
                        break 'outer;
                    }
                }
            }
            drawn
        }
    })
}

/// One transition of the embedded orbit chain: thin the orbit (busy case),
/// add the window's arrivals, then let the retrieval race pull one customer
/// out of a nonempty total.
fn step_orbit(spec: &OrbitSpec, x: u64, rng: &mut ChaCha12Rng) -> Result<u64> {
    let total = if x > 0 {
        let stay = spec.retention.sample(rng);
        binomial(rng, x, stay) + sample_count(&spec.arrivals_busy, rng)?
    } else {
        sample_count(&spec.arrivals_empty, rng)?
    };
    let (rate, retrieval) = if x > 0 {
        (spec.rate_busy, spec.retrieval_busy)
    } else {
        (spec.rate_empty, spec.retrieval_empty)
    };
    if total > 0 && rng.random::<f64>() < retrieval / (rate + retrieval) {
        Ok(total - 1)
    } else {
        Ok(total)
    }
}

/// Simulated stationary summary of the orbit chain.
#[derive(Debug, Clone, Serialize)]
pub struct OrbitSim {
    /// Pgf estimates at the configured grid points (each must lie in [0, 1]).
    pub pgf: Vec<(f64, SimEstimate)>,
    pub mean: SimEstimate,
    pub empty: SimEstimate,
    pub stationarity_warning: Option<String>,
}

struct OrbitRep {
    pgf_means: Vec<f64>,
    empty_frac: f64,
    mean: f64,
    half_means: (f64, f64),
}

fn run_orbit_rep(spec: &OrbitSpec, cfg: &SimConfig, rep: usize) -> Result<OrbitRep> {
    let mut rng = rep_rng(cfg.seed, rep);
    let mut x = 0u64;
    for _ in 0..cfg.burn_in {
        x = step_orbit(spec, x, &mut rng)?;
    }
    let kept = cfg.horizon - cfg.burn_in;
    let half = kept / 2;
    let mut pgf_sums = vec![0.0f64; cfg.s_grid.len()];
    let mut empty_count = 0u64;
    let mut x_sum = 0.0f64;
    let mut first_half = 0.0f64;
    for i in 0..kept {
        x = step_orbit(spec, x, &mut rng)?;
        for (k, z) in cfg.s_grid.iter().enumerate() {
            pgf_sums[k] += z.powf(x as f64);
        }
        if x == 0 {
            empty_count += 1;
        }
        x_sum += x as f64;
        if i < half {
            first_half += x as f64;
        }
    }
    let n = kept as f64;
    Ok(OrbitRep {
        pgf_means: pgf_sums.iter().map(|v| v / n).collect(),
        empty_frac: empty_count as f64 / n,
        mean: x_sum / n,
        half_means: (
            first_half / half.max(1) as f64,
            (x_sum - first_half) / (kept - half).max(1) as f64,
        ),
    })
}

/// Simulate the embedded orbit chain from an empty start. The grid in
/// `cfg.s_grid` is reused as the pgf evaluation points.
pub fn sim_orbit(spec: &OrbitSpec, cfg: &SimConfig) -> Result<OrbitSim> {
    spec.validate()
        .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
    cfg.validate()?;
    if spec.classes.is_some() {
        return Err(ModelError::InvalidSpec(
            "class-dependent window laws have no sampler; simulate the shared-law form".into(),
        ));
    }
    if cfg.s_grid.iter().any(|z| !(0.0..=1.0).contains(z)) {
        return Err(ModelError::InvalidSpec(
            "pgf grid points must lie in [0, 1]".into(),
        ));
    }
    let reps: Vec<OrbitRep> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_orbit_rep(spec, cfg, rep))
        .collect::<Result<Vec<_>>>()?;

    let kept = cfg.horizon - cfg.burn_in;
    let pgf = cfg
        .s_grid
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let per_rep: Vec<f64> = reps.iter().map(|r| r.pgf_means[k]).collect();
            (*z, reduce(&per_rep, kept, cfg.seed))
        })
        .collect();
    let empty_vals: Vec<f64> = reps.iter().map(|r| r.empty_frac).collect();
    let mean_vals: Vec<f64> = reps.iter().map(|r| r.mean).collect();
    let h1: Vec<f64> = reps.iter().map(|r| r.half_means.0).collect();
    let h2: Vec<f64> = reps.iter().map(|r| r.half_means.1).collect();
    let e1 = reduce(&h1, kept / 2, cfg.seed);
    let e2 = reduce(&h2, kept - kept / 2, cfg.seed);
    let gap = (e1.mean.re - e2.mean.re).abs();
    let noise = 3.0 * (e1.stderr.powi(2) + e2.stderr.powi(2)).sqrt();
    let stationarity_warning = if gap > noise {
        Some(format!(
            "first/second half means {:.4} vs {:.4} differ beyond noise {:.4}; consider a longer burn-in",
            e1.mean.re, e2.mean.re, noise
        ))
    } else {
        None
    };

    Ok(OrbitSim {
        pgf,
        mean: reduce(&mean_vals, kept, cfg.seed),
        empty: reduce(&empty_vals, kept, cfg.seed),
        stationarity_warning,
    })
}

/// One transition of the embedded two-class chain. The queueing class is
/// served exhaustively; only when a completion leaves it empty (no backlog
/// and no arrivals during the last service) does the idle race run, and a
/// retrieval win thins the orbit it draws from.
fn step_priority(
    spec: &PrioritySpec,
    x1: u64,
    x2: u64,
    rng: &mut ChaCha12Rng,
) -> Result<(u64, u64)> {
    let (a1, a2) = sample_joint(&spec.arrivals, spec.rate_primary, spec.rate_orbit, rng)?;
    if x1 > 0 {
        return Ok((x1 + a1 - 1, x2 + a2));
    }
    if a1 > 0 {
        return Ok((a1 - 1, x2 + a2));
    }
    let lam = spec.rate_primary + spec.rate_orbit;
    if rng.random::<f64>() < spec.retrieval / (lam + spec.retrieval) {
        let stay = spec.retention.sample(rng);
        let total = binomial(rng, x2, stay) + a2;
        Ok((0, total.saturating_sub(1)))
    } else {
        Ok((0, x2 + a2))
    }
}

/// Simulated stationary summary of the two-class chain.
#[derive(Debug, Clone, Serialize)]
pub struct PrioritySim {
    /// Joint pgf estimates at (z, 1) and (1, z) for each configured grid z.
    pub pgf: Vec<((f64, f64), SimEstimate)>,
    pub mean_primary: SimEstimate,
    pub mean_orbit: SimEstimate,
    /// Fraction of service starts with both classes empty.
    pub empty_both: SimEstimate,
    pub stationarity_warning: Option<String>,
}

struct PriorityRep {
    pgf_means: Vec<f64>,
    empty_frac: f64,
    mean1: f64,
    mean2: f64,
    half_means: (f64, f64),
}

fn run_priority_rep(
    spec: &PrioritySpec,
    points: &[(f64, f64)],
    cfg: &SimConfig,
    rep: usize,
) -> Result<PriorityRep> {
    let mut rng = rep_rng(cfg.seed, rep);
    let (mut x1, mut x2) = (0u64, 0u64);
    for _ in 0..cfg.burn_in {
        (x1, x2) = step_priority(spec, x1, x2, &mut rng)?;
    }
    let kept = cfg.horizon - cfg.burn_in;
    let half = kept / 2;
    let mut pgf_sums = vec![0.0f64; points.len()];
    let mut empty_count = 0u64;
    let mut sum1 = 0.0f64;
    let mut sum2 = 0.0f64;
    let mut first_half = 0.0f64;
    for i in 0..kept {
        (x1, x2) = step_priority(spec, x1, x2, &mut rng)?;
        for (k, (z1, z2)) in points.iter().enumerate() {
            pgf_sums[k] += z1.powf(x1 as f64) * z2.powf(x2 as f64);
        }
        if x1 == 0 && x2 == 0 {
            empty_count += 1;
        }
        sum1 += x1 as f64;
        sum2 += x2 as f64;
        if i < half {
            first_half += (x1 + x2) as f64;
        }
    }
    let n = kept as f64;
    Ok(PriorityRep {
        pgf_means: pgf_sums.iter().map(|v| v / n).collect(),
        empty_frac: empty_count as f64 / n,
        mean1: sum1 / n,
        mean2: sum2 / n,
        half_means: (
            first_half / half.max(1) as f64,
            (sum1 + sum2 - first_half) / (kept - half).max(1) as f64,
        ),
    })
}

/// Simulate the embedded two-class chain from an empty start.
pub fn sim_priority(spec: &PrioritySpec, cfg: &SimConfig) -> Result<PrioritySim> {
    spec.validate()
        .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
    cfg.validate()?;
    if cfg.s_grid.iter().any(|z| !(0.0..=1.0).contains(z)) {
        return Err(ModelError::InvalidSpec(
            "pgf grid points must lie in [0, 1]".into(),
        ));
    }
    let points: Vec<(f64, f64)> = cfg
        .s_grid
        .iter()
        .flat_map(|z| [(*z, 1.0), (1.0, *z)])
        .collect();
    let reps: Vec<PriorityRep> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_priority_rep(spec, &points, cfg, rep))
        .collect::<Result<Vec<_>>>()?;

    let kept = cfg.horizon - cfg.burn_in;
    let pgf = points
        .iter()
        .enumerate()
        .map(|(k, pt)| {
            let per_rep: Vec<f64> = reps.iter().map(|r| r.pgf_means[k]).collect();
            (*pt, reduce(&per_rep, kept, cfg.seed))
        })
        .collect();
    let empty_vals: Vec<f64> = reps.iter().map(|r| r.empty_frac).collect();
    let m1_vals: Vec<f64> = reps.iter().map(|r| r.mean1).collect();
    let m2_vals: Vec<f64> = reps.iter().map(|r| r.mean2).collect();
    let h1: Vec<f64> = reps.iter().map(|r| r.half_means.0).collect();
    let h2: Vec<f64> = reps.iter().map(|r| r.half_means.1).collect();
    let e1 = reduce(&h1, kept / 2, cfg.seed);
    let e2 = reduce(&h2, kept - kept / 2, cfg.seed);
    let gap = (e1.mean.re - e2.mean.re).abs();
    let noise = 3.0 * (e1.stderr.powi(2) + e2.stderr.powi(2)).sqrt();
    let stationarity_warning = if gap > noise {
        Some(format!(
            "first/second half means {:.4} vs {:.4} differ beyond noise {:.4}; consider a longer burn-in",
            e1.mean.re, e2.mean.re, noise
        ))
    } else {
        None
    };

    Ok(PrioritySim {
        pgf,
        mean_primary: reduce(&m1_vals, kept, cfg.seed),
        mean_orbit: reduce(&m2_vals, kept, cfg.seed),
        empty_both: reduce(&empty_vals, kept, cfg.seed),
        stationarity_warning,
    })
}
