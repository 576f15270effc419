//! Marginalized maximum likelihood by expectation-maximization over the
//! hidden group element, the normalized log-likelihood ratio statistic, and
//! the closed-form moment estimator for the two-element swap example.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::channel::{ObservationBatch, Projection};
use crate::divergence::{log_sum_exp, MixtureDensity};
use crate::error::{check_dim, Error, Result};
use crate::group::{FiniteGroup, GroupDistribution, Signal};
use crate::rng::{sample_stream, BoxMuller};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaMode {
    /// θ stays at its initial value throughout.
    KnownFixed,
    Estimated,
}

#[derive(Debug, Clone)]
pub struct MleOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Relative log-likelihood change below which a run has converged.
    pub tol: f64,
    pub theta_mode: ThetaMode,
    /// Initial signals are drawn with standard deviation
    /// `init_scale · (noise-corrected data RMS)`.
    pub init_scale: f64,
    pub seed: u64,
    /// The fixed θ in known mode and the starting θ otherwise; uniform if
    /// absent.
    pub theta: Option<Vec<f64>>,
    /// Starting signal for restart 0; later restarts stay random.
    pub initial_x: Option<Signal>,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 500,
            tol: 1e-9,
            theta_mode: ThetaMode::KnownFixed,
            init_scale: 1.0,
            seed: 0,
            theta: None,
            initial_x: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub x_hat: Signal,
    pub theta_hat: GroupDistribution,
    pub final_loglik: f64,
    /// M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first M-step and after each one.
    pub loglik_trace: Vec<f64>,
    /// Restart that produced this result.
    pub restart: usize,
    /// Some M-step system was rank deficient and solved by pseudo-inverse.
    pub singular: bool,
}

impl FitResult {
    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(|a| a.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "x_hat = [{}]", join(&mut self.x_hat.iter().copied()));
        let _ = writeln!(s, "theta_hat = [{}]", join(&mut self.theta_hat.weights().iter().copied()));
        let _ = writeln!(s, "loglik = {}", self.final_loglik);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "converged = {}", self.converged);
        let _ = writeln!(s, "restart = {}", self.restart);
        let _ = writeln!(s, "singular = {}", self.singular);
        s
    }
}

struct EmProblem<'a> {
    batch: &'a ObservationBatch,
    /// `P g` for every element.
    maps: Vec<DMatrix<f64>>,
    /// `(P g)ᵀ (P g)`.
    grams: Vec<DMatrix<f64>>,
    sigma: f64,
    len: usize,
}

struct Responsibilities {
    /// Row-major `n × |G|`.
    r: Vec<f64>,
    loglik: f64,
}

impl EmProblem<'_> {
    fn e_step(&self, x: &Signal, log_theta: &[f64]) -> Responsibilities {
        let n_g = self.maps.len();
        let means: Vec<DVector<f64>> = self.maps.iter().map(|m| m * x).collect();
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let k = self.batch.dim();
        let log_norm = -0.5 * k as f64 * (2.0 * PI * self.sigma * self.sigma).ln();
        let mut r = vec![0.0; self.batch.n_samples() * n_g];
        let mut loglik = 0.0;
        let mut terms = vec![0.0; n_g];
        for (row, out) in self.batch.rows().zip(r.chunks_mut(n_g)) {
            for ((t, m), lt) in terms.iter_mut().zip(&means).zip(log_theta) {
                let d2: f64 = m.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
                *t = lt - d2 * inv;
            }
            let lse = log_sum_exp(&terms);
            loglik += lse + log_norm;
            for (o, t) in out.iter_mut().zip(&terms) {
                *o = (t - lse).exp();
            }
        }
        Responsibilities { r, loglik }
    }

    /// Returns the new signal, the per-element responsibility totals, and
    /// whether the normal equations were singular.
    fn m_step(&self, resp: &Responsibilities) -> (Signal, Vec<f64>, bool) {
        let n_g = self.maps.len();
        let k = self.batch.dim();
        let mut counts = vec![0.0; n_g];
        let mut sums = vec![DVector::<f64>::zeros(k); n_g];
        for (row, r) in self.batch.rows().zip(resp.r.chunks(n_g)) {
            for g in 0..n_g {
                counts[g] += r[g];
                for (s, y) in sums[g].iter_mut().zip(row) {
                    *s += r[g] * y;
                }
            }
        }
        let mut lhs = DMatrix::<f64>::zeros(self.len, self.len);
        let mut rhs = DVector::<f64>::zeros(self.len);
        for g in 0..n_g {
            lhs += &self.grams[g] * counts[g];
            rhs += self.maps[g].transpose() * &sums[g];
        }
        let svd = lhs.clone().svd(true, true);
        let top = svd.singular_values.max();
        let tol = top * 1e-12 * self.len as f64;
        let singular = svd.singular_values.iter().any(|s| *s <= tol) || top == 0.0;
        let x = if singular {
            svd.solve(&rhs, tol.max(f64::MIN_POSITIVE)).unwrap_or_else(|_| DVector::zeros(self.len))
        } else {
            lhs.cholesky()
                .map(|c| c.solve(&rhs))
                .unwrap_or_else(|| svd.solve(&rhs, tol).expect("svd with both factors"))
        };
        (x, counts, singular)
    }

    fn run(&self, x0: Signal, theta0: Vec<f64>, opts: &MleOptions, restart: usize, group: &Arc<FiniteGroup>) -> FitResult {
        let n = self.batch.n_samples() as f64;
        let mut x = x0;
        let mut theta = theta0;
        let ln = |t: &[f64]| t.iter().map(|w| w.ln()).collect::<Vec<f64>>();
        let mut resp = self.e_step(&x, &ln(&theta));
        let mut trace = vec![resp.loglik];
        let mut converged = false;
        let mut singular = false;
        let mut iterations = 0;
        for it in 1..=opts.max_iters {
            let (x_new, counts, sing) = self.m_step(&resp);
            singular |= sing;
            x = x_new;
            if opts.theta_mode == ThetaMode::Estimated {
                theta = counts.iter().map(|c| c / n).collect();
            }
            let prev = resp.loglik;
            resp = self.e_step(&x, &ln(&theta));
            trace.push(resp.loglik);
            iterations = it;
            if (resp.loglik - prev).abs() <= opts.tol * prev.abs() {
                converged = true;
                break;
            }
        }
        let theta_hat = GroupDistribution::new(group.clone(), theta.clone())
            .or_else(|_| {
                let total: f64 = theta.iter().sum();
                GroupDistribution::new(group.clone(), theta.iter().map(|t| t / total).collect())
            })
            .unwrap_or_else(|_| GroupDistribution::uniform(group.clone()));
        FitResult {
            x_hat: x,
            theta_hat,
            final_loglik: resp.loglik,
            iterations,
            converged: converged && !singular,
            loglik_trace: trace,
            restart,
            singular,
        }
    }
}

/// Best-of-restarts EM fit of the marginal likelihood
/// `Σ_j ln Σ_g θ_g N(y_j; P g x, σ² I)`.
pub fn mle_fit(
    batch: &ObservationBatch,
    group: &Arc<FiniteGroup>,
    projection: &Projection,
    sigma: f64,
    opts: &MleOptions,
) -> Result<FitResult> {
    let len = group.dim();
    check_dim("projection columns", len, projection.input_dim())?;
    check_dim("observation dimension", projection.output_dim(), batch.dim())?;
    if batch.n_samples() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if opts.restarts == 0 || !(opts.tol > 0.0) || !(opts.init_scale > 0.0) {
        return Err(Error::InvalidArgument("need restarts >= 1, tol > 0 and init_scale > 0".into()));
    }
    let theta0 = match &opts.theta {
        Some(w) => GroupDistribution::new(group.clone(), w.clone())?.weights().to_vec(),
        None => GroupDistribution::uniform(group.clone()).weights().to_vec(),
    };
    if let Some(x0) = &opts.initial_x {
        check_dim("initial signal", len, x0.len())?;
    }
    let maps: Vec<DMatrix<f64>> = group.elements().iter().map(|g| projection.matrix() * &g.matrix).collect();
    let grams = maps.iter().map(|m| m.transpose() * m).collect();
    let problem = EmProblem {
        batch,
        maps,
        grams,
        sigma,
        len,
    };
    let k = batch.dim() as f64;
    let mean_sq = batch.as_slice().iter().map(|v| v * v).sum::<f64>() / (batch.n_samples() as f64 * k);
    let debiased = mean_sq - sigma * sigma;
    let rms = if debiased > 0.0 { debiased.sqrt() } else { mean_sq.sqrt() };
    let scale = opts.init_scale * if rms > 0.0 { rms } else { 1.0 };

    let fits: Vec<FitResult> = (0..opts.restarts)
        .into_par_iter()
        .map(|restart| {
            let x0 = match (&opts.initial_x, restart) {
                (Some(x0), 0) => x0.clone(),
                _ => {
                    let mut rng = sample_stream(opts.seed, restart as u64, 0);
                    let mut bm = BoxMuller::new();
                    DVector::from_fn(len, |_, _| scale * bm.sample(&mut rng))
                }
            };
            problem.run(x0, theta0.clone(), opts, restart, group)
        })
        .collect();
    fits.into_iter()
        .filter(|f| f.final_loglik.is_finite())
        .reduce(|best, f| if f.final_loglik > best.final_loglik { f } else { best })
        .ok_or_else(|| Error::InvalidArgument("every restart produced a non-finite likelihood".into()))
}

/// `(σ^{2d̄}/N) Σ_j ln(f_{x̃,θ̃}(y_j) / f_{x,θ}(y_j))` on raw observations.
#[allow(clippy::too_many_arguments)]
pub fn loglik_ratio_statistic(
    batch: &ObservationBatch,
    candidate_x: &Signal,
    candidate_theta: &GroupDistribution,
    truth_x: &Signal,
    truth_theta: &GroupDistribution,
    projection: &Projection,
    sigma: f64,
    d_bar: usize,
) -> Result<f64> {
    if d_bar == 0 {
        return Err(Error::InvalidArgument("d_bar must be at least 1".into()));
    }
    check_dim("observation dimension", projection.output_dim(), batch.dim())?;
    let component_means = |x: &Signal, th: &GroupDistribution| -> Result<Vec<DVector<f64>>> {
        check_dim("signal length", th.group().dim(), x.len())?;
        Ok(th.group().elements().iter().map(|g| projection.apply(&g.act(x))).collect())
    };
    let fa = MixtureDensity::new(&component_means(candidate_x, candidate_theta)?, candidate_theta.weights(), sigma)?;
    let fb = MixtureDensity::new(&component_means(truth_x, truth_theta)?, truth_theta.weights(), sigma)?;
    let total: f64 = batch.rows().map(|y| fa.logpdf(y) - fb.logpdf(y)).sum();
    Ok(sigma.powi(2 * d_bar as i32) * total / batch.n_samples() as f64)
}

/// Inverts `M¹ = (a+b)/2`, `M² = (a²+b²)/2`; larger value first.
pub fn mom_example2(m1: f64, m2: f64) -> Result<(f64, f64)> {
    let spread = m2 - m1 * m1;
    if spread < -1e-12 {
        return Err(Error::Infeasible(format!("second moment {m2} below squared mean {}", m1 * m1)));
    }
    let s = spread.max(0.0).sqrt();
    Ok((m1 + s, m1 - s))
}
