//! Distribution primitives.
//!
//! Everything downstream consumes distributions through three capabilities:
//! complex-argument Laplace-Stieltjes transform evaluation, sampling (for the
//! simulation oracles), and the threshold kernels `chi`/`psi` that split a
//! service draw on whether it stays below a random threshold.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Evaluation points closer than this to a transform pole are rejected.
pub const POLE_GUARD: f64 = 1e-12;
/// Absolute tolerance for the adaptive quadrature behind `chi_psi`.
pub const QUAD_TOL: f64 = 1e-10;
/// Probability vectors must sum to one within this slack.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("evaluation point {point} is within {POLE_GUARD} of transform pole {pole}")]
    PoleProximity { point: Complex64, pole: Complex64 },
    #[error("distribution has no sampler: {0}")]
    UnsupportedSampler(String),
    #[error("moments unavailable in closed form: {0}")]
    UnsupportedMoment(String),
    #[error("quadrature failed to reach tolerance {tol} (best error {err})")]
    QuadratureNonConvergence { tol: f64, err: f64 },
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Half-plane declaration for rational-transform poles. A proper transform of
/// a nonnegative random variable has all its poles strictly left of the
/// imaginary axis; the declaration is validated rather than trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfPlane {
    Left,
    Right,
}

/// Parametric nonnegative distribution with an evaluable transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", content = "params", rename_all = "snake_case")]
pub enum Dist {
    Exponential {
        rate: f64,
    },
    HyperExponential {
        weights: Vec<f64>,
        rates: Vec<f64>,
    },
    Deterministic {
        value: f64,
    },
    /// Transform N(s)/prod_k (s - pole_k) with real numerator coefficients
    /// (constant term first) and declared pole half-plane.
    RationalLst {
        numerator: Vec<f64>,
        poles: Vec<Complex64>,
        half_plane: HalfPlane,
    },
}

impl Dist {
    /// Checks the structural invariants; call on anything built from config.
    pub fn validate(&self) -> Result<()> {
        match self {
            Dist::Exponential { rate } => {
                if !(*rate > 0.0) {
                    return Err(DistError::InvalidParameter(format!(
                        "exponential rate must be positive, got {rate}"
                    )));
                }
            }
            Dist::HyperExponential { weights, rates } => {
                if weights.len() != rates.len() || weights.is_empty() {
                    return Err(DistError::InvalidParameter(
                        "hyperexponential weights and rates must be equal-length and nonempty"
                            .into(),
                    ));
                }
                if weights.iter().any(|w| *w < 0.0) {
                    return Err(DistError::InvalidParameter(
                        "hyperexponential weights must be nonnegative".into(),
                    ));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > PROB_TOL {
                    return Err(DistError::InvalidParameter(format!(
                        "hyperexponential weights sum to {total}, expected 1"
                    )));
                }
                if rates.iter().any(|r| !(*r > 0.0)) {
                    return Err(DistError::InvalidParameter(
                        "hyperexponential rates must be positive".into(),
                    ));
                }
            }
            Dist::Deterministic { value } => {
                if !(*value >= 0.0) {
                    return Err(DistError::InvalidParameter(format!(
                        "deterministic value must be nonnegative, got {value}"
                    )));
                }
            }
            Dist::RationalLst {
                numerator,
                poles,
                half_plane,
            } => {
                if poles.is_empty() || numerator.is_empty() || numerator.len() > poles.len() {
                    return Err(DistError::InvalidParameter(
                        "rational transform needs numerator degree < pole count".into(),
                    ));
                }
                let consistent = match half_plane {
                    HalfPlane::Left => poles.iter().all(|p| p.re < 0.0),
                    HalfPlane::Right => poles.iter().all(|p| p.re > 0.0),
                };
                if !consistent {
                    return Err(DistError::InvalidParameter(
                        "declared pole half-plane contradicts pole real parts".into(),
                    ));
                }
                let at_zero = self.lst(Complex64::ZERO)?;
                if (at_zero - 1.0).norm() > PROB_TOL {
                    return Err(DistError::InvalidParameter(format!(
                        "transform at 0 equals {at_zero}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// E(e^{-sX}) for the described X; exact closed form per variant.
    pub fn lst(&self, s: Complex64) -> Result<Complex64> {
        for pole in self.poles() {
            if (s - pole).norm() < POLE_GUARD {
                return Err(DistError::PoleProximity { point: s, pole });
            }
        }
        Ok(match self {
            Dist::Exponential { rate } => rate / (rate + s),
            Dist::HyperExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w * r / (r + s))
                .sum(),
            Dist::Deterministic { value } => (-s * *value).exp(),
            Dist::RationalLst {
                numerator, poles, ..
            } => {
                let mut num = Complex64::ZERO;
                for c in numerator.iter().rev() {
                    num = num * s + c;
                }
                let den: Complex64 = poles.iter().map(|p| s - p).product();
                num / den
            }
        })
    }

    /// Transform poles in the s-plane (empty for entire transforms).
    pub fn poles(&self) -> Vec<Complex64> {
        match self {
            Dist::Exponential { rate } => vec![Complex64::new(-rate, 0.0)],
            Dist::HyperExponential { rates, .. } => {
                rates.iter().map(|r| Complex64::new(-r, 0.0)).collect()
            }
            Dist::Deterministic { .. } => Vec::new(),
            Dist::RationalLst { poles, .. } => poles.clone(),
        }
    }

    /// Transform written as N(s) / prod_k (s - pole_k): numerator coefficients
    /// (constant first) and the pole list. None when the transform is entire.
    pub fn rational_parts(&self) -> Option<(Vec<Complex64>, Vec<Complex64>)> {
        match self {
            Dist::Exponential { rate } => Some((
                vec![Complex64::new(*rate, 0.0)],
                vec![Complex64::new(-rate, 0.0)],
            )),
            Dist::HyperExponential { weights, rates } => {
                let mut num = vec![Complex64::ZERO; rates.len()];
                for (j, (w, r)) in weights.iter().zip(rates).enumerate() {
                    let mut part = vec![Complex64::new(w * r, 0.0)];
                    for (l, rl) in rates.iter().enumerate() {
                        if l != j {
                            part = poly_mul_linear(&part, Complex64::new(*rl, 0.0));
                        }
                    }
                    for (acc, c) in num.iter_mut().zip(&part) {
                        *acc += c;
                    }
                }
                Some((num, self.poles()))
            }
            Dist::Deterministic { .. } => None,
            Dist::RationalLst {
                numerator, poles, ..
            } => Some((
                numerator.iter().map(|c| Complex64::new(*c, 0.0)).collect(),
                poles.clone(),
            )),
        }
    }

    /// Draw one value; deterministic given the stream state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        Ok(match self {
            Dist::Exponential { rate } => sample_exp(rng, *rate),
            Dist::HyperExponential { weights, rates } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = rates[rates.len() - 1];
                for (w, r) in weights.iter().zip(rates) {
                    acc += w;
                    if u < acc {
                        chosen = *r;
                        break;
                    }
                }
                sample_exp(rng, chosen)
            }
            Dist::Deterministic { value } => *value,
            Dist::RationalLst { .. } => {
                return Err(DistError::UnsupportedSampler(
                    "general rational transforms have no sampler; use a hyperexponential mixture"
                        .into(),
                ))
            }
        })
    }

    /// Raw moment E(X^k). Closed form except for general rational transforms.
    pub fn moment(&self, k: u32) -> Result<f64> {
        Ok(match self {
            Dist::Exponential { rate } => factorial(k) / rate.powi(k as i32),
            Dist::HyperExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w * factorial(k) / r.powi(k as i32))
                .sum(),
            Dist::Deterministic { value } => value.powi(k as i32),
            Dist::RationalLst { .. } => {
                return Err(DistError::UnsupportedMoment(
                    "moments of general rational transforms are not derived here".into(),
                ))
            }
        })
    }

    pub fn mean(&self) -> Result<f64> {
        self.moment(1)
    }

    /// P(X > x) (strict) or P(X >= x); the two differ only at atoms.
    fn survival(&self, x: f64, strict: bool) -> Result<f64> {
        Ok(match self {
            Dist::Exponential { rate } => (-rate * x.max(0.0)).exp(),
            Dist::HyperExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(w, r)| w * (-r * x.max(0.0)).exp())
                .sum(),
            Dist::Deterministic { value } => {
                let above = if strict { x < *value } else { x <= *value };
                if above {
                    1.0
                } else {
                    0.0
                }
            }
            Dist::RationalLst { .. } => {
                return Err(DistError::UnsupportedSampler(
                    "no distribution function for general rational transforms".into(),
                ))
            }
        })
    }

    /// Density at x, for variants that have one.
    fn density(&self, x: f64) -> Option<f64> {
        match self {
            Dist::Exponential { rate } => Some(rate * (-rate * x).exp()),
            Dist::HyperExponential { weights, rates } => Some(
                weights
                    .iter()
                    .zip(rates)
                    .map(|(w, r)| w * r * (-r * x).exp())
                    .sum(),
            ),
            _ => None,
        }
    }

    /// Slowest exponential decay rate of the density tail, for quadrature
    /// truncation bounds.
    fn min_rate(&self) -> Option<f64> {
        match self {
            Dist::Exponential { rate } => Some(*rate),
            Dist::HyperExponential { rates, .. } => {
                rates.iter().cloned().reduce(f64::min)
            }
            _ => None,
        }
    }
}

fn sample_exp<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Multiply a polynomial (constant-first coefficients) by (s + r).
fn poly_mul_linear(coeffs: &[Complex64], r: Complex64) -> Vec<Complex64> {
    let mut out = vec![Complex64::ZERO; coeffs.len() + 1];
    for (i, c) in coeffs.iter().enumerate() {
        out[i] += c * r;
        out[i + 1] += c;
    }
    out
}

/// Finite-support mixture (retention probabilities, proportionality factors,
/// service-fraction weights and the like).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMixture {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteMixture {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let m = Self { values, probs };
        m.validate()?;
        Ok(m)
    }

    pub fn single(value: f64) -> Self {
        Self {
            values: vec![value],
            probs: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.probs.len() || self.values.is_empty() {
            return Err(DistError::InvalidParameter(
                "mixture values and probabilities must be equal-length and nonempty".into(),
            ));
        }
        if self.probs.iter().any(|p| *p < 0.0) {
            return Err(DistError::InvalidParameter(
                "mixture probabilities must be nonnegative".into(),
            ));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(DistError::InvalidParameter(format!(
                "mixture probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Checks every value lies inside [lo, hi]; owning models declare the range.
    pub fn check_range(&self, lo: f64, hi: f64, what: &str) -> Result<()> {
        if self.values.iter().any(|v| *v < lo || *v > hi) {
            return Err(DistError::InvalidParameter(format!(
                "{what} values must lie in [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (v, p) in self.values.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *v;
            }
        }
        *self.values.last().unwrap()
    }

    /// Sum of p_i * f(value_i).
    pub fn expect(&self, mut f: impl FnMut(f64) -> Complex64) -> Complex64 {
        self.values
            .iter()
            .zip(&self.probs)
            .map(|(v, p)| p * f(*v))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.probs)
            .map(|(v, p)| v * p)
            .sum()
    }
}

/// Threshold kernels: chi(s) = E(e^{-sB}; B < T), psi(s) = E(e^{-sT}; B >= T).
///
/// Closed forms for exponential/exponential and exponential/deterministic
/// pairs; deterministic arguments reduce to direct evaluation; remaining
/// density pairs go through adaptive quadrature.
pub fn chi_psi(b: &Dist, t: &Dist, s: Complex64) -> Result<(Complex64, Complex64)> {
    use Dist::*;
    match (b, t) {
        (Exponential { rate: mu }, Exponential { rate: theta }) => {
            let den = mu + theta + s;
            Ok((mu / den, theta / den))
        }
        (Exponential { rate: mu }, Deterministic { value: tv }) => {
            // chi integrates the exponential density below tv; psi is the
            // survivor mass at the deterministic threshold.
            let chi = mu / (mu + s) * (1.0 - (-(mu + s) * *tv).exp());
            let psi = (-(s + mu) * *tv).exp();
            Ok((chi, psi))
        }
        (Deterministic { value: bv }, _) => {
            let chi = (-s * *bv).exp() * t.survival(*bv, true)?;
            let psi = match t {
                Deterministic { value: tv } => {
                    if *bv >= *tv {
                        (-s * *tv).exp()
                    } else {
                        Complex64::ZERO
                    }
                }
                // P(B >= y) is the indicator of y <= bv, so integrate the
                // threshold density only up to bv.
                _ => density_integral(t, s, Some(*bv), |_| 1.0)?,
            };
            Ok((chi, psi))
        }
        (_, Deterministic { value: tv }) => {
            let chi = density_integral(b, s, Some(*tv), |_| 1.0)?;
            let psi = (-s * *tv).exp() * b.survival(*tv, false)?;
            Ok((chi, psi))
        }
        _ => {
            let st = t.clone();
            let sb = b.clone();
            let chi = density_integral(b, s, None, move |y| st.survival(y, true).unwrap_or(0.0))?;
            let psi = density_integral(t, s, None, move |y| sb.survival(y, false).unwrap_or(0.0))?;
            Ok((chi, psi))
        }
    }
}

/// Integral over [0, cut or a tail-bounded truncation] of dist's density
/// times e^{-sy} times a weight in [0, 1].
fn density_integral(
    dist: &Dist,
    s: Complex64,
    cut: Option<f64>,
    weight: impl Fn(f64) -> f64,
) -> Result<Complex64> {
    let rate = dist.min_rate().ok_or_else(|| {
        DistError::UnsupportedSampler("quadrature needs a density with exponential tail".into())
    })?;
    let mut upper = quad_upper(rate + s.re.max(0.0));
    if let Some(c) = cut {
        upper = upper.min(c);
    }
    if upper <= 0.0 {
        return Ok(Complex64::ZERO);
    }
    let f = |y: f64| -> Complex64 {
        dist.density(y).unwrap_or(0.0) * weight(y) * (-s * y).exp()
    };
    adaptive_quad(&f, 0.0, upper, QUAD_TOL)
}

/// Truncation point with integrand tail mass below 1e-13 for decay `rate`.
fn quad_upper(rate: f64) -> f64 {
    // e^{-rate * U} < 1e-13  =>  U > 30/rate; pad for the polynomial factors.
    (32.0 / rate.max(1e-6)).min(1e7)
}

const GK_XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const GK_WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const GK_WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

/// One Gauss-Kronrod 7-15 panel; returns (estimate, error estimate).
fn gk15(f: &impl Fn(f64) -> Complex64, a: f64, b: f64) -> (Complex64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kronrod = Complex64::ZERO;
    let mut gauss = Complex64::ZERO;
    for (i, (x, wk)) in GK_XGK.iter().zip(&GK_WGK).enumerate() {
        let (flo, fhi) = (f(c - h * x), f(c + h * x));
        let pair = if *x == 0.0 { flo } else { flo + fhi };
        kronrod += wk * pair;
        if i % 2 == 1 {
            gauss += GK_WG[i / 2] * pair;
        }
    }
    (h * kronrod, (h * (kronrod - gauss)).norm())
}

fn adaptive_quad(
    f: &impl Fn(f64) -> Complex64,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<Complex64> {
    // Plain bisection adaptivity with a panel budget; the integrands here are
    // smooth products of exponentials, so this converges quickly.
    let mut stack = vec![(a, b, tol)];
    let mut total = Complex64::ZERO;
    let mut worst = 0.0f64;
    let mut panels = 0;
    while let Some((lo, hi, t)) = stack.pop() {
        panels += 1;
        if panels > 20_000 {
            return Err(DistError::QuadratureNonConvergence { tol, err: worst });
        }
        let (est, err) = gk15(f, lo, hi);
        if err <= t || hi - lo < 1e-12 {
            total += est;
            worst = worst.max(err);
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, t * 0.5));
            stack.push((mid, hi, t * 0.5));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorial_small_values() {
        assert_eq!(factorial(0), 1.0);
        assert_eq!(factorial(4), 24.0);
    }
}
