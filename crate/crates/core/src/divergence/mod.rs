//! Observation densities and divergences between channel models.
//!
//! The density of one observation is the Gaussian mixture
//! `Σ_g θ_g N(y; P g x, σ² I)`. Divergences are evaluated by tensor-product
//! Gauss-Hermite quadrature centred on the mixture components (K ≤ 2), by
//! Monte Carlo, or by the leading term of their expansion in `1/σ` through
//! moment tensors.

pub mod hermite;
pub mod quadrature;

use std::f64::consts::PI;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::channel::{ChannelModel, Projection};
use crate::error::{check_dim, Error, Result};
use crate::group::{GroupDistribution, Signal};
use crate::moments::{exact_moment, factorial, projected_orbit};
use crate::rng::{categorical, sample_stream, BoxMuller};

pub use hermite::{hermite_he, scaled_hermite};
pub use quadrature::gauss_hermite;

/// Gauss-Hermite points per axis for the first quadrature pass.
pub const QUADRATURE_START_POINTS: usize = 40;
/// Doubling stops at this many points per axis.
pub const QUADRATURE_MAX_POINTS: usize = 640;
pub const QUADRATURE_REL_TOL: f64 = 1e-9;
/// Largest order scanned by the leading-order expansions.
pub const DEFAULT_MAX_ORDER: usize = 8;
/// Monte Carlo results are refused when the relative standard error of the
/// sample variance, `sqrt((κ − 1)/n)`, exceeds this.
pub const MAX_VARIANCE_REL_ERROR: f64 = 0.5;

// a moment gap below this fraction of the tensor norms counts as zero
const GAP_REL_ZERO: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMethod {
    Quadrature,
    MonteCarlo,
    LeadingOrder,
}

impl DivergenceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Quadrature => "quadrature",
            Self::MonteCarlo => "monte-carlo",
            Self::LeadingOrder => "leading-order",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceEstimate {
    pub value: f64,
    /// Zero for the deterministic methods.
    pub std_error: f64,
    pub method: DivergenceMethod,
    /// Density evaluations (quadrature) or samples (Monte Carlo).
    pub budget: usize,
}

/// Numerically stable `ln Σ exp(v_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    if top == f64::INFINITY {
        return top;
    }
    top + values.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// An isotropic Gaussian mixture in canonical form: zero-weight components
/// dropped, components sorted by mean, coincident means merged. Models in
/// the same orbit therefore produce bit-identical densities.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    means: Vec<Vec<f64>>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    sigma: f64,
    dim: usize,
    log_norm: f64,
}

impl MixtureDensity {
    pub fn new(means: &[DVector<f64>], weights: &[f64], sigma: f64) -> Result<Self> {
        check_dim("mixture weights", means.len(), weights.len())?;
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::InvalidDistribution("mixture weights must be nonnegative with positive sum".into()));
        }
        let dim = means.first().map_or(0, |m| m.len());
        let mut comps: Vec<(Vec<f64>, f64)> = means
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(m, w)| (m.iter().copied().collect(), *w))
            .collect();
        comps.sort_by(|a, b| {
            a.0.iter()
                .zip(&b.0)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.total_cmp(&b.1))
        });
        let mut merged: Vec<(Vec<f64>, f64)> = Vec::with_capacity(comps.len());
        for (m, w) in comps {
            match merged.last_mut() {
                Some(last) if last.0 == m => last.1 += w,
                _ => merged.push((m, w)),
            }
        }
        let total: f64 = merged.iter().map(|c| c.1).sum();
        let (means, weights): (Vec<_>, Vec<_>) = merged.into_iter().map(|(m, w)| (m, w / total)).unzip();
        Ok(Self {
            log_weights: weights.iter().map(|w: &f64| w.ln()).collect(),
            means,
            weights,
            sigma,
            dim,
            log_norm: -0.5 * dim as f64 * (2.0 * PI * sigma * sigma).ln(),
        })
    }

    pub fn from_model(model: &ChannelModel) -> Self {
        Self::new(&model.component_means(), model.theta().weights(), model.sigma())
            .expect("a validated model is a valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn logpdf(&self, y: &[f64]) -> f64 {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_weights)
            .map(|(m, lw)| {
                let d2: f64 = m.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                lw - d2 * inv
            })
            .collect();
        log_sum_exp(&terms) + self.log_norm
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let k = categorical(rng, &self.weights);
        BoxMuller::new().fill(rng, out);
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            *o = m + self.sigma * *o;
        }
    }

    /// `E_f[h(Y)]` by the `n`-point-per-axis product rule around every
    /// component. Returns the value and the number of evaluations.
    fn gh_expectation<F: Fn(&[f64]) -> f64>(&self, n: usize, h: &F) -> (f64, usize) {
        let rule = gauss_hermite(n);
        let (nodes, w) = (&rule.0, &rule.1);
        let scale = self.sigma * std::f64::consts::SQRT_2;
        let norm = PI.powf(-0.5 * self.dim as f64);
        let mut total = 0.0;
        let mut evals = 0;
        let mut y = vec![0.0; self.dim];
        for (m, cw) in self.means.iter().zip(&self.weights) {
            let mut acc = 0.0;
            match self.dim {
                1 => {
                    for (t, wt) in nodes.iter().zip(w) {
                        y[0] = m[0] + scale * t;
                        acc += wt * h(&y);
                    }
                    evals += n;
                }
                2 => {
                    for (t0, w0) in nodes.iter().zip(w) {
                        y[0] = m[0] + scale * t0;
                        let mut row = 0.0;
                        for (t1, w1) in nodes.iter().zip(w) {
                            y[1] = m[1] + scale * t1;
                            row += w1 * h(&y);
                        }
                        acc += w0 * row;
                    }
                    evals += n * n;
                }
                _ => unreachable!("checked by caller"),
            }
            total += cw * norm * acc;
        }
        (total, evals)
    }

    /// Doubles the rule until the relative change drops below
    /// [`QUADRATURE_REL_TOL`].
    fn adaptive_expectation<F: Fn(&[f64]) -> f64>(&self, h: F) -> Result<(f64, usize)> {
        if self.dim == 0 || self.dim > 2 {
            return Err(Error::QuadratureDimension(self.dim));
        }
        let mut n = QUADRATURE_START_POINTS;
        let (mut prev, mut evals) = self.gh_expectation(n, &h);
        while n < QUADRATURE_MAX_POINTS {
            n *= 2;
            let (v, e) = self.gh_expectation(n, &h);
            evals += e;
            let change = (v - prev).abs();
            prev = v;
            if change <= QUADRATURE_REL_TOL * v.abs() || v == 0.0 {
                break;
            }
        }
        Ok((prev, evals))
    }
}

/// Log density of one observation of the raw channel at `y`.
pub fn mixture_logpdf(x: &Signal, theta: &GroupDistribution, projection: &Projection, sigma: f64, y: &[f64]) -> Result<f64> {
    let model = ChannelModel::new(x.clone(), theta.clone(), projection.clone(), sigma)?;
    check_dim("observation", model.output_dim(), y.len())?;
    Ok(MixtureDensity::from_model(&model).logpdf(y))
}

fn check_pair(a: &ChannelModel, b: &ChannelModel) -> Result<()> {
    check_dim("model output dimension", a.output_dim(), b.output_dim())?;
    if (a.sigma() - b.sigma()).abs() > 1e-12 * a.sigma() {
        return Err(Error::InvalidArgument(format!(
            "models must share a noise level ({} vs {})",
            a.sigma(),
            b.sigma()
        )));
    }
    Ok(())
}

fn check_leading_pair(a: &ChannelModel, b: &ChannelModel) -> Result<()> {
    if a.projection().matrix() != b.projection().matrix() {
        return Err(Error::InvalidArgument("leading-order expansion needs a common projection".into()));
    }
    Ok(())
}

struct Moments {
    mean: f64,
    std_error: f64,
}

/// Sample mean and standard error of `values`; optionally refuses heavy tails.
fn summarize(values: &[f64], check_kurtosis: bool) -> Result<Moments> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !mean.is_finite() || !m2.is_finite() {
        return Err(Error::UnreliableVariance {
            kurtosis: f64::INFINITY,
            samples: values.len(),
        });
    }
    if check_kurtosis && m2 > 0.0 {
        let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let kurtosis = m4 / (m2 * m2);
        if ((kurtosis - 1.0) / n).sqrt() > MAX_VARIANCE_REL_ERROR {
            return Err(Error::UnreliableVariance {
                kurtosis,
                samples: values.len(),
            });
        }
    }
    let var = if values.len() > 1 { m2 * n / (n - 1.0) } else { 0.0 };
    Ok(Moments {
        mean,
        std_error: (var / n).sqrt(),
    })
}

fn monte_carlo<F>(source: &MixtureDensity, budget: usize, seed: u64, h: F, check_kurtosis: bool) -> Result<Moments>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if budget < 2 {
        return Err(Error::InvalidArgument("Monte Carlo budget must be at least 2".into()));
    }
    let values: Vec<f64> = (0..budget)
        .into_par_iter()
        .map_init(
            || vec![0.0; source.dim()],
            |y, i| {
                let mut rng = sample_stream(seed, 0, i as u64);
                source.sample(&mut rng, y);
                h(y)
            },
        )
        .collect();
    summarize(&values, check_kurtosis)
}

/// χ²(f_A ‖ f_B) = E_B[(f_A/f_B − 1)²].
pub fn chi2_divergence(
    a: &ChannelModel,
    b: &ChannelModel,
    method: DivergenceMethod,
    budget: usize,
    seed: u64,
) -> Result<DivergenceEstimate> {
    check_pair(a, b)?;
    let fa = MixtureDensity::from_model(a);
    let fb = MixtureDensity::from_model(b);
    let h = |y: &[f64]| (fa.logpdf(y) - fb.logpdf(y)).exp_m1().powi(2);
    match method {
        DivergenceMethod::Quadrature => {
            let (value, evals) = fb.adaptive_expectation(h)?;
            Ok(DivergenceEstimate {
                value,
                std_error: 0.0,
                method,
                budget: evals,
            })
        }
        DivergenceMethod::MonteCarlo => {
            let m = monte_carlo(&fb, budget, seed, h, true)?;
            Ok(DivergenceEstimate {
                value: m.mean,
                std_error: m.std_error,
                method,
                budget,
            })
        }
        DivergenceMethod::LeadingOrder => {
            check_leading_pair(a, b)?;
            let t = chi2_leading_order(a.x(), a.theta(), b.x(), b.theta(), b.projection(), b.sigma(), DEFAULT_MAX_ORDER)?;
            Ok(DivergenceEstimate {
                value: t.value,
                std_error: 0.0,
                method,
                budget: 0,
            })
        }
    }
}

/// D(f_A ‖ f_B) = E_A[ln f_A − ln f_B].
pub fn kl_divergence(
    a: &ChannelModel,
    b: &ChannelModel,
    method: DivergenceMethod,
    budget: usize,
    seed: u64,
) -> Result<DivergenceEstimate> {
    check_pair(a, b)?;
    let fa = MixtureDensity::from_model(a);
    let fb = MixtureDensity::from_model(b);
    let h = |y: &[f64]| fa.logpdf(y) - fb.logpdf(y);
    match method {
        DivergenceMethod::Quadrature => {
            let (value, evals) = fa.adaptive_expectation(h)?;
            Ok(DivergenceEstimate {
                value,
                std_error: 0.0,
                method,
                budget: evals,
            })
        }
        DivergenceMethod::MonteCarlo => {
            let m = monte_carlo(&fa, budget, seed, h, false)?;
            Ok(DivergenceEstimate {
                value: m.mean,
                std_error: m.std_error,
                method,
                budget,
            })
        }
        DivergenceMethod::LeadingOrder => {
            check_leading_pair(a, b)?;
            let t = kl_leading_order(a.x(), a.theta(), b.x(), b.theta(), b.projection(), b.sigma(), DEFAULT_MAX_ORDER)?;
            Ok(DivergenceEstimate {
                value: t.value,
                std_error: 0.0,
                method,
                budget: 0,
            })
        }
    }
}

/// Leading term of a divergence expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadingTerm {
    pub value: f64,
    /// First order with a nonzero moment difference.
    pub order: usize,
    /// `‖M^d_{x̃,θ̃} − M^d_{x,θ}‖²`.
    pub gap_sq: f64,
}

/// First order `d ≤ max_order` at which the moment tensors differ.
pub fn first_distinguishing_order(
    xt: &Signal,
    thetat: &GroupDistribution,
    x: &Signal,
    theta: &GroupDistribution,
    projection: &Projection,
    max_order: usize,
) -> Result<(usize, f64)> {
    for n in 1..=max_order {
        let a = exact_moment(xt, thetat, projection, n)?;
        let b = exact_moment(x, theta, projection, n)?;
        let gap = a.sub(&b)?.norm_sq();
        let scale = a.norm_sq() + b.norm_sq();
        if gap > GAP_REL_ZERO * scale {
            return Ok((n, gap));
        }
    }
    Err(Error::NoDistinguishingOrder { max_order })
}

/// `σ^{−2d}/d! ‖ΔM^d‖²` at the first distinguishing order `d`.
pub fn chi2_leading_order(
    xt: &Signal,
    thetat: &GroupDistribution,
    x: &Signal,
    theta: &GroupDistribution,
    projection: &Projection,
    sigma: f64,
    max_order: usize,
) -> Result<LeadingTerm> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let (order, gap_sq) = first_distinguishing_order(xt, thetat, x, theta, projection, max_order)?;
    Ok(LeadingTerm {
        value: sigma.powi(-2 * order as i32) * gap_sq / factorial(order),
        order,
        gap_sq,
    })
}

/// Half the χ² leading term.
pub fn kl_leading_order(
    xt: &Signal,
    thetat: &GroupDistribution,
    x: &Signal,
    theta: &GroupDistribution,
    projection: &Projection,
    sigma: f64,
    max_order: usize,
) -> Result<LeadingTerm> {
    let t = chi2_leading_order(xt, thetat, x, theta, projection, sigma, max_order)?;
    Ok(LeadingTerm {
        value: t.value / 2.0,
        ..t
    })
}

/// χ² between N-fold products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NSampleChi2 {
    pub value: f64,
    /// `ln(1 + χ²_N)`, finite even when `value` overflows.
    pub log1p_value: f64,
    pub overflow: bool,
}

/// `(1 + χ²)^N − 1` via `expm1(N ln1p χ²)`.
pub fn chi2_n_samples(chi2_single: f64, n: u64) -> Result<NSampleChi2> {
    if !(chi2_single >= 0.0) {
        return Err(Error::InvalidArgument(format!("chi2 must be nonnegative, got {chi2_single}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let t = n as f64 * chi2_single.ln_1p();
    let value = t.exp_m1();
    Ok(NSampleChi2 {
        value,
        log1p_value: t,
        overflow: value.is_infinite(),
    })
}

/// `ln(e^t − 1)` for `t > 0` without overflow.
pub fn ln_expm1(t: f64) -> f64 {
    if t > 30.0 {
        t + (-(-t).exp()).ln_1p()
    } else {
        t.exp_m1().ln()
    }
}

/// Taylor coefficients in `γ = 1/σ` of the noise-normalized density,
/// divided by the standard normal density:
/// `α^j(y) = E_G[s^j He_j(⟨y, v_G⟩ / s)]`, `v_G = P G x`, `s = ‖v_G‖`.
#[derive(Debug, Clone)]
pub struct AlphaExpansion {
    vectors: Vec<DVector<f64>>,
    weights: Vec<f64>,
    max_order: usize,
}

impl AlphaExpansion {
    pub fn new(x: &Signal, theta: &GroupDistribution, projection: &Projection, max_order: usize) -> Result<Self> {
        check_dim("signal length", theta.group().dim(), x.len())?;
        check_dim("projection columns", x.len(), projection.input_dim())?;
        Ok(Self {
            vectors: projected_orbit(x, theta, projection),
            weights: theta.weights().to_vec(),
            max_order,
        })
    }

    pub fn from_model(model: &ChannelModel, max_order: usize) -> Self {
        Self::new(model.x(), model.theta(), model.projection(), max_order).expect("a validated model")
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }

    /// `α^0(y), …, α^{max_order}(y)`.
    pub fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.max_order + 1];
        for (v, w) in self.vectors.iter().zip(&self.weights) {
            if *w == 0.0 {
                continue;
            }
            let u: f64 = v.iter().zip(y).map(|(a, b)| a * b).sum();
            let table = hermite::hermite_table(self.max_order, u, v.norm());
            for (o, h) in out.iter_mut().zip(table) {
                *o += w * h;
            }
        }
        out
    }
}

/// `α^j(y)` for any `j`, independent of the expansion's `max_order`.
pub fn alpha_coefficient(expansion: &AlphaExpansion, order: usize, y: &[f64]) -> f64 {
    expansion
        .vectors
        .iter()
        .zip(&expansion.weights)
        .map(|(v, w)| {
            let u: f64 = v.iter().zip(y).map(|(a, b)| a * b).sum();
            w * scaled_hermite(order, u, v.norm())
        })
        .sum()
}

/// Monte Carlo mean and standard error of `α^d_A(Z) α^d_B(Z)` for standard
/// normal `Z`.
pub fn alpha_pairing_mc(a: &AlphaExpansion, b: &AlphaExpansion, order: usize, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    check_dim("alpha expansion dimension", a.dim(), b.dim())?;
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let dim = a.dim();
    let values: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map_init(
            || vec![0.0; dim],
            |z, i| {
                let mut rng = sample_stream(seed, 0, i as u64);
                BoxMuller::new().fill(&mut rng, z);
                alpha_coefficient(a, order, z) * alpha_coefficient(b, order, z)
            },
        )
        .collect();
    let m = summarize(&values, false)?;
    Ok((m.mean, m.std_error))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::group::cyclic_shift_group;
    use crate::moments::exact_moment;

    fn sig(v: &[f64]) -> Signal {
        DVector::from_row_slice(v)
    }

    fn example2(a: f64, b: f64, sigma: f64) -> ChannelModel {
        let g = Arc::new(cyclic_shift_group(2).unwrap());
        ChannelModel::new(sig(&[a, b]), GroupDistribution::uniform(g), Projection::select(2, &[0]).unwrap(), sigma).unwrap()
    }

    fn example1(b: f64, c: f64, sigma: f64) -> ChannelModel {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        ChannelModel::new(sig(&[0.0, b, c]), GroupDistribution::uniform(g), Projection::select(3, &[0, 1]).unwrap(), sigma)
            .unwrap()
    }

    /// Point mass at `(shift, 0)` observed through the first `dim` coordinates.
    fn gaussian(shift: &[f64], sigma: f64) -> ChannelModel {
        let g = Arc::new(cyclic_shift_group(2).unwrap());
        let theta = GroupDistribution::point_mass(g, 0).unwrap();
        let dim = shift.len();
        let mut x = shift.to_vec();
        x.resize(2, 0.0);
        let coords: Vec<usize> = (0..dim).collect();
        ChannelModel::new(sig(&x), theta, Projection::select(2, &coords).unwrap(), sigma).unwrap()
    }

    fn phi(u: f64) -> f64 {
        (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, 1.0]) - (1.0 + 1f64.exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn single_component_is_gaussian() {
        let m = gaussian(&[0.4, -1.0], 0.7);
        let y = [1.0, 0.5];
        let d2 = (1.0 - 0.4f64).powi(2) + 1.5f64.powi(2);
        let want = -d2 / (2.0 * 0.49) - (2.0 * PI * 0.49).ln();
        let got = mixture_logpdf(m.x(), m.theta(), m.projection(), 0.7, &y).unwrap();
        assert!((got - want).abs() < 1e-13);
    }

    #[test]
    fn example2_two_term_density() {
        let m = example2(1.0, 2.0, 1.0);
        let got = mixture_logpdf(m.x(), m.theta(), m.projection(), 1.0, &[1.5]).unwrap();
        let want = (0.5 * phi(0.5) + 0.5 * phi(-0.5)).ln();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        let f = MixtureDensity::from_model(&example2(1.0, 2.0, 0.6));
        let (lo, hi, n) = (-15.0, 18.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.5 * (f.logpdf(&[lo]).exp() + f.logpdf(&[hi]).exp());
        for i in 1..n {
            s += f.logpdf(&[lo + i as f64 * h]).exp();
        }
        assert!((s * h - 1.0).abs() < 1e-8);
    }

    #[test]
    fn far_tail_does_not_underflow() {
        let f = MixtureDensity::from_model(&example2(1.0, 2.0, 0.01));
        let v = f.logpdf(&[50.0]);
        assert!(v.is_finite() && v < -1e6);
    }

    #[test]
    fn orbit_equivalent_models_share_a_density() {
        let m = example1(1.0, 2.0, 0.8);
        let g = m.group().clone();
        let w = vec![0.5, 0.3, 0.2];
        let theta = GroupDistribution::new(g.clone(), w).unwrap();
        let a = ChannelModel::new(m.x().clone(), theta.clone(), m.projection().clone(), 0.8).unwrap();
        for k in 0..3 {
            let moved = g.element(k).act(m.x());
            let b = ChannelModel::new(moved, theta.pushforward_for(k), m.projection().clone(), 0.8).unwrap();
            let (fa, fb) = (MixtureDensity::from_model(&a), MixtureDensity::from_model(&b));
            for y in [[0.3, -0.2], [2.0, 1.0], [-4.0, 7.5]] {
                assert_eq!(fa.logpdf(&y), fb.logpdf(&y));
            }
            let chi = chi2_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
            assert_eq!(chi.value, 0.0);
        }
    }

    #[test]
    fn identical_models_have_zero_divergence() {
        let m = example2(1.0, 2.0, 2.0);
        for method in [DivergenceMethod::Quadrature, DivergenceMethod::MonteCarlo] {
            assert_eq!(chi2_divergence(&m, &m, method, 1000, 1).unwrap().value, 0.0);
            assert_eq!(kl_divergence(&m, &m, method, 1000, 1).unwrap().value, 0.0);
        }
    }

    #[test]
    fn gaussian_pairs_closed_forms() {
        for (delta, sigma) in [(1.0, 1.0), (0.3, 0.5), (2.0, 3.0)] {
            let a = gaussian(&[delta], sigma);
            let b = gaussian(&[0.0], sigma);
            let chi = chi2_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
            let want = (delta * delta / (sigma * sigma)).exp_m1();
            assert!((chi.value - want).abs() < 1e-10 * want, "{} vs {want}", chi.value);
            assert_eq!(chi.std_error, 0.0);
            let kl = kl_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
            let want_kl = delta * delta / (2.0 * sigma * sigma);
            assert!((kl.value - want_kl).abs() < 1e-12 * want_kl.max(1.0));
        }
        // two dimensions, δ = (0.6, −0.8)
        let a = gaussian(&[0.6, -0.8], 1.3);
        let b = gaussian(&[0.0, 0.0], 1.3);
        let chi = chi2_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
        assert!((chi.value - (1.0f64 / 1.69).exp_m1()).abs() < 1e-10);
    }

    #[test]
    fn quadrature_matches_brute_force_grid() {
        let a = example2(0.0, 3.0, 1.2);
        let b = example2(1.0, 2.0, 1.2);
        let (fa, fb) = (MixtureDensity::from_model(&a), MixtureDensity::from_model(&b));
        let (lo, hi, n) = (-20.0, 23.0, 400_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let y = [lo + i as f64 * h];
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * (2.0 * fa.logpdf(&y) - fb.logpdf(&y)).exp();
        }
        let brute = s * h - 1.0;
        let chi = chi2_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
        assert!((chi.value - brute).abs() < 1e-9 * brute, "{} vs {brute}", chi.value);
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature() {
        let a = example2(0.0, 3.0, 1.5);
        let b = example2(1.0, 2.0, 1.5);
        let q = chi2_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
        let mc = chi2_divergence(&a, &b, DivergenceMethod::MonteCarlo, 200_000, 9).unwrap();
        assert!((mc.value - q.value).abs() < 4.0 * mc.std_error, "{mc:?} vs {q:?}");
        let kq = kl_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
        let kmc = kl_divergence(&a, &b, DivergenceMethod::MonteCarlo, 200_000, 9).unwrap();
        assert!((kmc.value - kq.value).abs() < 4.0 * kmc.std_error);
    }

    #[test]
    fn heavy_tails_are_refused() {
        // the ratio is lognormal with log-scale 3; a handful of draws
        // dominate the sample variance
        let a = gaussian(&[3.0], 1.0);
        let b = gaussian(&[0.0], 1.0);
        let err = chi2_divergence(&a, &b, DivergenceMethod::MonteCarlo, 2000, 3).unwrap_err();
        assert!(matches!(err, Error::UnreliableVariance { .. }));
    }

    #[test]
    fn quadrature_dimension_limit() {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        let m = ChannelModel::new(sig(&[0.0, 1.0, 2.0]), GroupDistribution::uniform(g), Projection::identity(3), 1.0).unwrap();
        assert!(matches!(
            chi2_divergence(&m, &m, DivergenceMethod::Quadrature, 0, 0),
            Err(Error::QuadratureDimension(3))
        ));
        let other = m.with_sigma(2.0).unwrap();
        assert!(chi2_divergence(&m, &other, DivergenceMethod::MonteCarlo, 10, 0).is_err());
    }

    #[test]
    fn leading_order_examples() {
        let (a, b) = (example2(0.0, 3.0, 4.0), example2(1.0, 2.0, 4.0));
        let t = chi2_leading_order(a.x(), a.theta(), b.x(), b.theta(), b.projection(), 4.0, 8).unwrap();
        assert_eq!(t.order, 2);
        assert!((t.gap_sq - 4.0).abs() < 1e-12);
        assert!((t.value - 2.0 / 256.0).abs() < 1e-15);
        let k = kl_leading_order(a.x(), a.theta(), b.x(), b.theta(), b.projection(), 4.0, 8).unwrap();
        assert!((k.value - 1.0 / 256.0).abs() < 1e-15);

        let (b1, c1) = (1.0, 2.0);
        let x = example1(b1, c1, 2.0);
        let t = chi2_leading_order(&sig(&[0.0, c1, b1]), x.theta(), x.x(), x.theta(), x.projection(), 2.0, 8).unwrap();
        assert_eq!(t.order, 3);
        let k3 = (b1 * b1 * c1 - c1 * c1 * b1).powi(2) / 9.0;
        assert!((t.value - k3 / 64.0).abs() < 1e-14);

        let g = x.group().clone();
        let moved = g.element(1).act(x.x());
        let err = chi2_leading_order(&moved, &x.theta().pushforward_for(1), x.x(), x.theta(), x.projection(), 2.0, 8);
        assert!(matches!(err, Err(Error::NoDistinguishingOrder { max_order: 8 })));
    }

    #[test]
    fn quadrature_approaches_leading_order() {
        let mut prev = f64::INFINITY;
        for sigma in [4.0, 8.0, 16.0] {
            let (a, b) = (example2(0.0, 3.0, sigma), example2(1.0, 2.0, sigma));
            let q = chi2_divergence(&a, &b, DivergenceMethod::Quadrature, 0, 0).unwrap();
            let l = chi2_divergence(&a, &b, DivergenceMethod::LeadingOrder, 0, 0).unwrap();
            let dev = (q.value / l.value - 1.0).abs();
            assert!(dev < prev);
            prev = dev;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn n_sample_chi2() {
        assert_eq!(chi2_n_samples(0.25, 1).unwrap().value, 0.25);
        assert_eq!(chi2_n_samples(0.0, 1_000_000).unwrap().value, 0.0);
        let e = chi2_n_samples(1e-6, 1_000_000).unwrap().value;
        assert!((e - (1f64.exp() - 1.0)).abs() < 1e-4 * (1f64.exp() - 1.0));
        let big = chi2_n_samples(1.0, 5000).unwrap();
        assert!(big.overflow && big.value.is_infinite());
        assert!((big.log1p_value - 5000.0 * 2f64.ln()).abs() < 1e-9);
        assert!(chi2_n_samples(-1.0, 3).is_err());
        assert!((ln_expm1(800.0) - 800.0).abs() < 1e-12);
        assert!((ln_expm1(1.0) - (1f64.exp() - 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn alpha_low_orders() {
        let m = example1(1.0, 2.0, 1.0);
        let e = AlphaExpansion::from_model(&m, 4);
        let m1 = exact_moment(m.x(), m.theta(), m.projection(), 1).unwrap();
        for y in [[0.0, 0.0], [0.3, -1.2], [2.0, 5.0]] {
            let c = e.coefficients(&y);
            assert_eq!(c[0], 1.0);
            assert!((c[1] - (y[0] * m1.get(&[0]) + y[1] * m1.get(&[1]))).abs() < 1e-12);
            for (j, cj) in c.iter().enumerate() {
                assert!((alpha_coefficient(&e, j, &y) - cj).abs() < 1e-12 * cj.abs().max(1.0));
            }
        }
    }

    #[test]
    fn alpha_pairs_with_moments() {
        let a = example2(0.0, 3.0, 1.0);
        let b = example2(1.0, 2.0, 1.0);
        let (ea, eb) = (AlphaExpansion::from_model(&a, 3), AlphaExpansion::from_model(&b, 3));
        for d in 1..=3 {
            let (mean, se) = alpha_pairing_mc(&ea, &eb, d, 200_000, 11).unwrap();
            let ma = exact_moment(a.x(), a.theta(), a.projection(), d).unwrap();
            let mb = exact_moment(b.x(), b.theta(), b.projection(), d).unwrap();
            let want = factorial(d) * ma.inner(&mb).unwrap();
            assert!((mean - want).abs() < 4.0 * se, "d={d}: {mean} ± {se} vs {want}");
        }
    }

    #[test]
    fn alpha_zero_mean() {
        let b = example1(1.0, 2.0, 1.0);
        let e = AlphaExpansion::from_model(&b, 4);
        for j in 1..=4 {
            let vals: Vec<f64> = (0..100_000u64)
                .map(|i| {
                    let mut rng = sample_stream(21, j as u64, i);
                    let mut z = [0.0; 2];
                    BoxMuller::new().fill(&mut rng, &mut z);
                    alpha_coefficient(&e, j, &z)
                })
                .collect();
            let m = summarize(&vals, false).unwrap();
            assert!(m.mean.abs() < 4.0 * m.std_error, "j={j}: {} ± {}", m.mean, m.std_error);
        }
    }
}
