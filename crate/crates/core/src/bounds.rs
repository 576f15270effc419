//! Lower bounds on the orbit mean squared error and empirical MSE accounting.
//!
//! For any alternative model `(x̃, θ̃)` the orbit-aligned estimator obeys
//! `MSE ≥ ‖φ_x(x̃) − x‖² / χ²(f^N_{x̃,θ̃} ‖ f^N_{x,θ})`. The N-sample χ² is
//! either computed from the single-sample divergence or replaced by its
//! leading-order form `exp(λ^d_N K^d) − 1`, `λ^d_N = N/σ^{2d}`,
//! `K^d = ‖ΔM^d‖²/d!`. The local (Cramér-Rao type) limit along a direction
//! uses `λ^q_N Q^q` as denominator.

use rayon::prelude::*;

use crate::channel::{ChannelModel, Projection};
use crate::divergence::{chi2_divergence, chi2_n_samples, NSampleChi2, first_distinguishing_order, ln_expm1, DivergenceMethod, DEFAULT_MAX_ORDER};
use crate::error::{check_dim, Error, Result};
use crate::group::{best_alignment, orbit_distance_sq, FiniteGroup, GroupDistribution, Signal};
use crate::moments::{directional_q, factorial};

/// Bounds are capped at this multiple of their numerator when the
/// divergence is too small to carry information.
pub const NO_INFORMATION_CAP: f64 = 1e12;
/// Bounds below this are reported as zero.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct MseReport {
    pub mse: f64,
    pub bias_sq: f64,
    pub cov_trace: f64,
    pub n_estimates: usize,
    /// Standard error of `mse` as a sample mean.
    pub mse_std_error: f64,
}

/// Aligns every estimate to `x` and splits the empirical MSE into squared
/// bias and covariance trace (both with `1/n` normalization).
pub fn mse_against_orbit(estimates: &[Signal], x: &Signal, group: &FiniteGroup) -> Result<MseReport> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no estimates".into()));
    }
    let aligned = estimates
        .iter()
        .map(|e| best_alignment(e, x, group).map(|(a, _)| a))
        .collect::<Result<Vec<_>>>()?;
    let n = aligned.len() as f64;
    let errs: Vec<f64> = aligned.iter().map(|a| (a - x).norm_squared()).collect();
    let mse = errs.iter().sum::<f64>() / n;
    let mean = aligned.iter().fold(Signal::zeros(x.len()), |acc, a| acc + a) / n;
    let bias_sq = (&mean - x).norm_squared();
    let cov_trace = aligned.iter().map(|a| (a - &mean).norm_squared()).sum::<f64>() / n;
    let mse_std_error = if aligned.len() > 1 {
        (errs.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(MseReport {
        mse,
        bias_sq,
        cov_trace,
        n_estimates: aligned.len(),
        mse_std_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundForm {
    /// Single-sample χ² computed numerically, tensorized to N samples.
    ExactChi2,
    /// `exp(λ^d_N K^d) − 1` in place of the N-sample χ².
    LeadingOrder,
    /// Local limit `λ^q_N Q^q` along a direction.
    CrLimit,
}

impl BoundForm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ExactChi2 => "exact-chi2",
            Self::LeadingOrder => "leading-order",
            Self::CrLimit => "cr-limit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BoundFlags {
    /// The divergence is so small that the bound was capped.
    pub no_information: bool,
    /// The bound fell below [`UNDERFLOW_FLOOR`] and is reported as zero.
    pub underflow: bool,
    /// The N-sample χ² overflowed `f64`; the bound used its logarithm.
    pub chi2_overflow: bool,
}

impl BoundFlags {
    /// `;`-separated names of the raised flags, empty if none.
    pub fn describe(&self) -> String {
        let mut v = Vec::new();
        if self.no_information {
            v.push("no-information");
        }
        if self.underflow {
            v.push("underflow");
        }
        if self.chi2_overflow {
            v.push("chi2-overflow");
        }
        v.join(";")
    }
}

#[derive(Debug, Clone)]
pub struct BoundReport {
    pub mse_lower: f64,
    pub witness_x: Signal,
    pub witness_theta: GroupDistribution,
    /// Order `d` (or `q` for the local limit) setting the σ scaling.
    pub d: usize,
    /// `N / σ^{2d}`.
    pub lambda: f64,
    /// `K^d` (or `Q^q`).
    pub k_d: f64,
    pub numerator: f64,
    /// N-sample χ² used as denominator; may be infinite (see flags).
    pub chi2_n: f64,
    pub ln_chi2_n: f64,
    pub form: BoundForm,
    pub flags: BoundFlags,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Chi2Mode {
    Exact {
        method: DivergenceMethod,
        budget: usize,
        seed: u64,
    },
    LeadingOrder,
}

fn lambda(n: u64, sigma: f64, d: usize) -> f64 {
    n as f64 * sigma.powi(-2 * d as i32)
}

/// `numerator / exp(ln_den)` with the cap and underflow conventions.
fn finish(numerator: f64, ln_den: f64) -> (f64, BoundFlags) {
    let mut flags = BoundFlags::default();
    if numerator == 0.0 {
        return (0.0, flags);
    }
    let ln_bound = numerator.ln() - ln_den;
    if ln_bound > (numerator * NO_INFORMATION_CAP).ln() {
        flags.no_information = true;
        return (numerator * NO_INFORMATION_CAP, flags);
    }
    let bound = ln_bound.exp();
    if bound < UNDERFLOW_FLOOR {
        flags.underflow = true;
        return (0.0, flags);
    }
    (bound, flags)
}

/// Trace form of `Cov[φ_x(X̂)] ⪰ z zᵀ / χ²_N` for an arbitrary shift
/// `z = E_{x̃,θ̃}[φ_x(X̂)] − E_{x,θ}[φ_x(X̂)]`: returns `‖z‖² / χ²_N`,
/// a lower bound on the trace of the aligned covariance.
pub fn chapman_robbins_general(z: &Signal, chi2_n: &NSampleChi2) -> Result<(f64, BoundFlags)> {
    if !(chi2_n.log1p_value > 0.0) {
        return Err(Error::WitnessEquivalent);
    }
    let (bound, mut flags) = finish(z.norm_squared(), ln_expm1(chi2_n.log1p_value));
    flags.chi2_overflow = chi2_n.overflow;
    Ok((bound, flags))
}

/// Chapman-Robbins bound for orbits at one witness, with the asymptotically
/// unbiased choice `z = φ_x(x̃) − x`.
#[allow(clippy::too_many_arguments)]
pub fn chapman_robbins_orbit(
    witness_x: &Signal,
    witness_theta: &GroupDistribution,
    x: &Signal,
    theta: &GroupDistribution,
    projection: &Projection,
    sigma: f64,
    n: u64,
    mode: Chi2Mode,
) -> Result<BoundReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let truth = ChannelModel::new(x.clone(), theta.clone(), projection.clone(), sigma)?;
    let alt = ChannelModel::new(witness_x.clone(), witness_theta.clone(), projection.clone(), sigma)?;
    let numerator = orbit_distance_sq(witness_x, x, theta.group())?;
    let (d, gap) = match first_distinguishing_order(witness_x, witness_theta, x, theta, projection, DEFAULT_MAX_ORDER) {
        Ok(v) => v,
        Err(Error::NoDistinguishingOrder { .. }) => return Err(Error::WitnessEquivalent),
        Err(e) => return Err(e),
    };
    let lam = lambda(n, sigma, d);
    let k_d = gap / factorial(d);
    let (form, t) = match mode {
        Chi2Mode::Exact { method, budget, seed } => {
            let single = chi2_divergence(&alt, &truth, method, budget, seed)?;
            if single.value <= 0.0 {
                return Err(Error::WitnessEquivalent);
            }
            (BoundForm::ExactChi2, chi2_n_samples(single.value, n)?.log1p_value)
        }
        Chi2Mode::LeadingOrder => (BoundForm::LeadingOrder, lam * k_d),
    };
    let chi2_n = t.exp_m1();
    let ln_chi2_n = ln_expm1(t);
    let (mse_lower, mut flags) = finish(numerator, ln_chi2_n);
    flags.chi2_overflow = chi2_n.is_infinite();
    Ok(BoundReport {
        mse_lower,
        witness_x: witness_x.clone(),
        witness_theta: witness_theta.clone(),
        d,
        lambda: lam,
        k_d,
        numerator,
        chi2_n,
        ln_chi2_n,
        form,
        flags,
    })
}

/// Local limit of the bound along `x_h = (1−h)x + h x̃`,
/// `θ_h = (1−h)θ + h θ̃`: `‖x̃ − x‖² / (λ^q_N Q^q)` with `q` the first order
/// at which `Q^q > 0`. The neglected remainder is `O(λ^q_N σ^{−1})`.
#[allow(clippy::too_many_arguments)]
pub fn cr_limit_bound(
    x: &Signal,
    theta: &GroupDistribution,
    direction_x: &Signal,
    direction_theta: &GroupDistribution,
    projection: &Projection,
    sigma: f64,
    n: u64,
    max_order: usize,
) -> Result<BoundReport> {
    check_dim("direction length", x.len(), direction_x.len())?;
    if n == 0 || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("need positive sample count and sigma".into()));
    }
    let numerator = (direction_x - x).norm_squared();
    let theta_step: f64 = theta
        .weights()
        .iter()
        .zip(direction_theta.weights())
        .map(|(a, b)| (a - b).abs())
        .sum();
    if numerator == 0.0 && theta_step == 0.0 {
        return Err(Error::InvalidArgument("zero direction".into()));
    }
    for q in 1..=max_order {
        let qv = directional_q(x, theta, direction_x, direction_theta, projection, q)?;
        let scale = crate::moments::exact_moment(x, theta, projection, q)?.norm_sq().max(1.0);
        if qv > 1e-20 * scale {
            let lam = lambda(n, sigma, q);
            let den = lam * qv;
            let (mse_lower, flags) = finish(numerator, den.ln());
            return Ok(BoundReport {
                mse_lower,
                witness_x: direction_x.clone(),
                witness_theta: direction_theta.clone(),
                d: q,
                lambda: lam,
                k_d: qv,
                numerator,
                chi2_n: den,
                ln_chi2_n: den.ln(),
                form: BoundForm::CrLimit,
                flags,
            });
        }
    }
    Err(Error::NoDistinguishingOrder { max_order })
}

/// The form giving the larger (stronger) bound.
pub fn dominant_form<'a>(a: &'a BoundReport, b: &'a BoundReport) -> &'a BoundReport {
    if b.mse_lower > a.mse_lower {
        b
    } else {
        a
    }
}

/// How the sample size follows the noise level along a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum NRule {
    /// One sample size per grid point.
    Explicit(Vec<u64>),
    /// `N = round(c σ^{2m})`, at least 1.
    Power { c: f64, m: u32 },
}

impl NRule {
    pub fn samples(&self, sigma_grid: &[f64]) -> Result<Vec<u64>> {
        match self {
            Self::Explicit(v) => {
                check_dim("explicit sample sizes", sigma_grid.len(), v.len())?;
                if v.contains(&0) {
                    return Err(Error::InvalidArgument("sample sizes must be positive".into()));
                }
                Ok(v.clone())
            }
            Self::Power { c, m } => {
                if !(*c > 0.0) {
                    return Err(Error::InvalidArgument(format!("N rule constant must be positive, got {c}")));
                }
                Ok(sigma_grid
                    .iter()
                    .map(|s| (c * s.powi(2 * *m as i32)).round().max(1.0) as u64)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub sigma: f64,
    pub n: u64,
    /// One entry per witness, in input order; errors are kept per row.
    pub rows: Vec<std::result::Result<BoundReport, String>>,
    /// Index of the witness attaining the largest bound.
    pub best: Option<usize>,
}

/// Bounds for every witness at every grid point.
pub fn bound_sweep(
    x: &Signal,
    theta: &GroupDistribution,
    projection: &Projection,
    witnesses: &[(Signal, GroupDistribution)],
    sigma_grid: &[f64],
    n_rule: &NRule,
    mode: Chi2Mode,
) -> Result<Vec<SweepPoint>> {
    if witnesses.is_empty() || sigma_grid.is_empty() {
        return Err(Error::InvalidArgument("sweep needs witnesses and a nonempty sigma grid".into()));
    }
    let ns = n_rule.samples(sigma_grid)?;
    Ok(sigma_grid
        .par_iter()
        .zip(ns.par_iter())
        .map(|(&sigma, &n)| {
            let rows: Vec<_> = witnesses
                .iter()
                .map(|(wx, wt)| chapman_robbins_orbit(wx, wt, x, theta, projection, sigma, n, mode).map_err(|e| e.to_string()))
                .collect();
            let best = rows
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.as_ref().ok().map(|r| (i, r.mse_lower)))
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i);
            SweepPoint { sigma, n, rows, best }
        })
        .collect())
}
