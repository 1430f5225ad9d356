//! Exact and bound-level probability computations in log space.
//!
//! Every tail probability in the pipeline is carried as a natural-log
//! value: the event-probability certificates compare quantities like
//! d^-100 against beta*(1-beta)^(d^2), which underflow to zero in linear
//! space long before d reaches desk scale.

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// A probability carried as its natural logarithm (<= 0, or -inf for an
/// impossible event).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(pub f64);

impl LogProb {
    /// log 1 = 0: the certain event.
    pub const ONE: LogProb = LogProb(0.0);
    /// The impossible event.
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }

    /// Back to linear space; underflows to 0.0 for very negative logs.
    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    pub fn is_impossible(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProbError {
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error(
        "no sign change of f on c in [{c_lo}, {c_hi}]: f({c_lo}) = {f_lo:e}, f({c_hi}) = {f_hi:e}"
    )]
    NoRoot {
        c_lo: f64,
        c_hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
}

/// log C(n, i) via the log-gamma function.
fn ln_choose(n: u64, i: u64) -> f64 {
    if i > n {
        return f64::NEG_INFINITY;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0)
}

/// Stable sum of probabilities given in log space: terms are accumulated
/// smallest-magnitude first relative to the maximum term.
fn log_sum_exp(terms: &mut Vec<f64>) -> f64 {
    terms.retain(|t| *t != f64::NEG_INFINITY);
    if terms.is_empty() {
        return f64::NEG_INFINITY;
    }
    terms.sort_by(|a, b| a.partial_cmp(b).expect("log terms are never NaN"));
    let max = *terms.last().unwrap();
    let mut acc = 0.0;
    for &t in terms.iter() {
        acc += (t - max).exp();
    }
    max + acc.ln()
}

/// Exact log of P(Bin(n, p) <= m).
///
/// Summation runs over the individual point masses
/// log C(n,i) + i log p + (n-i) log(1-p), ordered by increasing magnitude,
/// so the result is accurate to ~1e-12 relative even when the tail itself
/// is far below the linear-space underflow threshold.
pub fn binom_cdf_log(n: u64, p: f64, m: u64) -> Result<LogProb, ProbError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(ProbError::Domain(format!("p = {p} not in [0, 1]")));
    }
    if m >= n {
        return Ok(LogProb::ONE);
    }
    if p == 0.0 {
        // all mass at 0 and m >= 0
        return Ok(LogProb::ONE);
    }
    if p == 1.0 {
        // all mass at n > m
        return Ok(LogProb::ZERO);
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut terms: Vec<f64> = (0..=m)
        .map(|i| ln_choose(n, i) + i as f64 * lp + (n - i) as f64 * lq)
        .collect();
    let s = log_sum_exp(&mut terms);
    // Guard against the full-sum case drifting a hair above log 1.
    Ok(LogProb(s.min(0.0)))
}

/// Exact log of P(Bin(n, p) >= m), via the complement count n - X.
pub fn binom_upper_log(n: u64, p: f64, m: u64) -> Result<LogProb, ProbError> {
    if m == 0 {
        return Ok(LogProb::ONE);
    }
    if m > n {
        return Ok(LogProb::ZERO);
    }
    binom_cdf_log(n, 1.0 - p, n - m)
}

/// Upper-tail bound log((e/b)^(b*mean)) for P(X > b E[X]), clamped at log 1.
pub fn chernoff_upper(b: f64, mean: f64) -> Result<LogProb, ProbError> {
    if b <= 0.0 || b.is_nan() {
        return Err(ProbError::Domain(format!("b = {b} must be positive")));
    }
    if mean < 0.0 || mean.is_nan() {
        return Err(ProbError::Domain(format!("mean = {mean} must be >= 0")));
    }
    Ok(LogProb((b * mean * (1.0 - b.ln())).min(0.0)))
}

/// Multiplicative bound log(e^(-delta^2 mean / (2+delta))) for
/// P(X >= (1+delta) E[X]).
pub fn chernoff_mult(delta: f64, mean: f64) -> Result<LogProb, ProbError> {
    if delta < 0.0 || delta.is_nan() {
        return Err(ProbError::Domain(format!("delta = {delta} must be >= 0")));
    }
    if mean < 0.0 || mean.is_nan() {
        return Err(ProbError::Domain(format!("mean = {mean} must be >= 0")));
    }
    Ok(LogProb(-delta * delta * mean / (2.0 + delta)))
}

/// Lower-tail bound log(e^(-t^2/(3 mean))) for P(X <= E[X] - t).
pub fn chernoff_lower(t: f64, mean: f64) -> Result<LogProb, ProbError> {
    if mean < 0.0 || mean.is_nan() {
        return Err(ProbError::Domain(format!("mean = {mean} must be >= 0")));
    }
    if t < 0.0 || t > mean || t.is_nan() {
        return Err(ProbError::Domain(format!("t = {t} not in [0, mean = {mean}]")));
    }
    if t == 0.0 {
        return Ok(LogProb::ONE);
    }
    Ok(LogProb(-t * t / (3.0 * mean)))
}

/// The sharpened lower-tail exponent: log of e^(-(1 + 2 xi / 3) t), which
/// dominates P(Bin(n,p) <= delta t) whenever np >= (1+xi)t, p <= 1/2 and
/// delta is small enough relative to xi.
pub fn lower_tail_bound(xi: f64, t: f64) -> LogProb {
    LogProb(-(1.0 + 2.0 * xi / 3.0) * t)
}

/// Root of f(alpha) = P(Bin(d, (1-alpha)/k) <= delta log d) - alpha^2/(d h)
/// over alpha = d^-c, c in [epsilon/4, 5].
#[derive(Debug, Clone, Copy)]
pub struct AlphaSolution {
    pub alpha: f64,
    pub c: f64,
    pub residual: f64,
    pub iterations: u32,
}

/// Solves the sprinkling-rate equation by bisection on the exponent c.
///
/// The endpoint signs f(epsilon/4) < 0 < f(5) are what the existence
/// argument provides; when the endpoints agree in sign (typical for small
/// d, where the asymptotic guarantees fail) the error carries both
/// endpoint values so the caller can fall back to a configured alpha.
/// Otherwise a coarse scan locates the first sign change from c =
/// epsilon/4 upward (if f has several crossings we keep the smallest-c
/// one) and bisection shrinks that bracket below tol in c. Note f ranges
/// over magnitudes like d^-10 near the root, so convergence is on the
/// bracket width; the residual ends up far below any sane tol anyway.
pub fn solve_alpha(
    d: u64,
    k: u64,
    h: u64,
    delta: f64,
    epsilon: f64,
    tol: f64,
) -> Result<AlphaSolution, ProbError> {
    if h == 0 {
        return Err(ProbError::Domain("h must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(ProbError::Domain(format!("delta = {delta} not in (0, 1)")));
    }
    if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
        return Err(ProbError::Domain(format!("epsilon = {epsilon} not in (0, 1)")));
    }
    if tol <= 0.0 {
        return Err(ProbError::Domain(format!("tol = {tol} must be positive")));
    }
    let m = (delta * (d as f64).ln()).floor() as u64;
    let f = |c: f64| -> f64 {
        let alpha = (d as f64).powf(-c);
        let cdf = binom_cdf_log(d, (1.0 - alpha) / k as f64, m)
            .expect("success probability (1-alpha)/k is in [0,1]")
            .prob();
        cdf - alpha * alpha / (d as f64 * h as f64)
    };

    let c_lo = epsilon / 4.0;
    let c_hi = 5.0;
    let f_lo = f(c_lo);
    let f_hi = f(c_hi);
    if f_lo != 0.0 && f_hi != 0.0 && f_lo.signum() == f_hi.signum() {
        return Err(ProbError::NoRoot {
            c_lo,
            c_hi,
            f_lo,
            f_hi,
        });
    }

    // Coarse scan for the first sign change so that among multiple
    // crossings we bracket the smallest-c one.
    const SCAN_STEPS: u32 = 512;
    let step = (c_hi - c_lo) / SCAN_STEPS as f64;
    let mut lo = c_lo;
    let mut flo = f_lo;
    let mut hi = c_hi;
    for i in 1..=SCAN_STEPS {
        let next = c_lo + step * i as f64;
        let fnext = f(next);
        if flo == 0.0 || flo.signum() != fnext.signum() {
            hi = next;
            break;
        }
        lo = next;
        flo = fnext;
    }

    let mut iterations = SCAN_STEPS;
    let mut mid = 0.5 * (lo + hi);
    let mut fmid = f(mid);
    while hi - lo > tol && fmid != 0.0 && flo != 0.0 {
        if flo.signum() == fmid.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
        fmid = f(mid);
        iterations += 1;
    }
    if flo == 0.0 {
        mid = lo;
        fmid = flo;
    }
    Ok(AlphaSolution {
        alpha: (d as f64).powf(-mid),
        c: mid,
        residual: fmid.abs(),
        iterations,
    })
}

/// First-moment factor g(d) = d^(2/d) (1 - 2/d + 2/d^2)^(d/2 - 1 + 1/d),
/// evaluated in log space.
///
/// g(d) < 1 is what rules out a K_{1,d-1}-factor; g decreases on [5, inf)
/// and tends to 1/e.
pub fn first_moment_g(d: u64) -> f64 {
    assert!(d >= 3, "g(d) is defined for d >= 3");
    let df = d as f64;
    let base = (-2.0 / df + 2.0 / (df * df)).ln_1p();
    let log_g = (2.0 / df) * df.ln() + (df / 2.0 - 1.0 + 1.0 / df) * base;
    log_g.exp()
}
