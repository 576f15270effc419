//! Moment tensors `M^n_{x,θ} = E[(P G x)^{⊗n}]` and the quantities built on them.
//!
//! Tensors are stored densely (all `K^n` entries, row-major in the
//! multi-index). Every entry is computed from the *sorted* multi-index, so
//! analytic and empirical tensors are exactly invariant under index
//! permutations.

mod cutoff;

use std::io::Write;

use nalgebra::DVector;

use crate::channel::{ObservationBatch, Projection};
use crate::error::{check_dim, Error, Result};
use crate::group::{GroupDistribution, Signal};

pub use cutoff::{cutoff_search, ConstraintSet, CutoffReport, SearchOptions, SignalConstraint, ThetaConstraint};

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    order: usize,
    dim: usize,
    entries: Vec<f64>,
}

/// Index bookkeeping for symmetric tensors of a given shape.
struct SymmetricLayout {
    /// One sorted multi-index per orbit of the symmetric group.
    canonical: Vec<Vec<usize>>,
    /// For each flat index, the position of its canonical representative.
    class_of: Vec<usize>,
}

impl SymmetricLayout {
    fn new(order: usize, dim: usize) -> Self {
        let total = dim.pow(order as u32);
        let mut canonical: Vec<Vec<usize>> = Vec::new();
        let mut class_of = Vec::with_capacity(total);
        let mut lookup = std::collections::HashMap::new();
        for flat in 0..total {
            let mut idx = unflatten(flat, order, dim);
            idx.sort_unstable();
            let id = *lookup.entry(idx.clone()).or_insert_with(|| {
                canonical.push(idx);
                canonical.len() - 1
            });
            class_of.push(id);
        }
        Self { canonical, class_of }
    }

    fn scatter(&self, values: &[f64]) -> Vec<f64> {
        self.class_of.iter().map(|&c| values[c]).collect()
    }
}

fn unflatten(mut flat: usize, order: usize, dim: usize) -> Vec<usize> {
    let mut idx = vec![0; order];
    for slot in idx.iter_mut().rev() {
        *slot = flat % dim;
        flat /= dim;
    }
    idx
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl MomentTensor {
    pub fn zeros(order: usize, dim: usize) -> Self {
        Self {
            order,
            dim,
            entries: vec![0.0; dim.pow(order as u32)],
        }
    }

    pub fn from_entries(order: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        check_dim("tensor entries", dim.pow(order as u32), entries.len())?;
        Ok(Self { order, dim, entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Entry at multi-index `idx` (zero-based).
    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.order, "multi-index length must equal the order");
        let flat = idx.iter().fold(0, |acc, &k| {
            assert!(k < self.dim, "index {k} out of range");
            acc * self.dim + k
        });
        self.entries[flat]
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        check_dim("tensor order", self.order, other.order)?;
        check_dim("tensor dimension", self.dim, other.dim)
    }

    /// `⟨A, B⟩ = Σ_k A[k] B[k]`.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.entries.iter().zip(&other.entries).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|a| a * a).sum()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            order: self.order,
            dim: self.dim,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect(),
        })
    }

    /// Largest deviation between an entry and any of its index permutations.
    pub fn symmetry_defect(&self) -> f64 {
        let layout = SymmetricLayout::new(self.order, self.dim);
        let mut lo = vec![f64::INFINITY; layout.canonical.len()];
        let mut hi = vec![f64::NEG_INFINITY; layout.canonical.len()];
        for (&c, &v) in layout.class_of.iter().zip(&self.entries) {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
        lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max)
    }

    /// CSV with columns `k1,…,kn,value` (one-based indices).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.order).map(|i| format!("k{i}")).collect();
        header.push("value".into());
        out.write_record(&header)?;
        for (flat, v) in self.entries.iter().enumerate() {
            let mut rec: Vec<String> = unflatten(flat, self.order, self.dim)
                .into_iter()
                .map(|k| (k + 1).to_string())
                .collect();
            rec.push(v.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `Σ_i w_i v_i^{⊗n}` with possibly signed weights.
pub(crate) fn weighted_tensor_power(vectors: &[DVector<f64>], weights: &[f64], order: usize, dim: usize) -> MomentTensor {
    let layout = SymmetricLayout::new(order, dim);
    let mut sums = vec![0.0; layout.canonical.len()];
    for (v, &w) in vectors.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (s, idx) in sums.iter_mut().zip(&layout.canonical) {
            *s += w * idx.iter().map(|&k| v[k]).product::<f64>();
        }
    }
    MomentTensor {
        order,
        dim,
        entries: layout.scatter(&sums),
    }
}

/// Projected orbit `{P g x}` in element order.
pub(crate) fn projected_orbit(x: &Signal, theta: &GroupDistribution, projection: &Projection) -> Vec<DVector<f64>> {
    theta
        .group()
        .elements()
        .iter()
        .map(|g| projection.apply(&g.act(x)))
        .collect()
}

fn check_model_dims(x: &Signal, theta: &GroupDistribution, projection: &Projection) -> Result<()> {
    let len = theta.group().dim();
    check_dim("signal length", len, x.len())?;
    check_dim("projection columns", len, projection.input_dim())
}

/// Exact moment `Σ_g θ_g (P g x)^{⊗n}`.
pub fn exact_moment(x: &Signal, theta: &GroupDistribution, projection: &Projection, order: usize) -> Result<MomentTensor> {
    if order == 0 {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    check_model_dims(x, theta, projection)?;
    let vs = projected_orbit(x, theta, projection);
    Ok(weighted_tensor_power(&vs, theta.weights(), order, projection.output_dim()))
}

/// Sample moment `(1/N) Σ_j Y_j^{⊗n}`, optionally with the additive
/// Gaussian noise contribution removed (orders 1 to 3 only).
pub fn empirical_moment(batch: &ObservationBatch, order: usize, sigma: f64, debias: bool) -> Result<MomentTensor> {
    if order == 0 {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    if debias && order > 3 {
        return Err(Error::InvalidArgument(format!("debiasing is available up to order 3, got {order}")));
    }
    let dim = batch.dim();
    let layout = SymmetricLayout::new(order, dim);
    let mut sums = vec![0.0; layout.canonical.len()];
    for row in batch.rows() {
        for (s, idx) in sums.iter_mut().zip(&layout.canonical) {
            *s += idx.iter().map(|&k| row[k]).product::<f64>();
        }
    }
    let n = batch.n_samples() as f64;
    if debias && order > 1 {
        let s2 = sigma * sigma;
        let mean: Vec<f64> = if order == 3 {
            (0..dim)
                .map(|k| batch.rows().map(|r| r[k]).sum::<f64>() / n)
                .collect()
        } else {
            Vec::new()
        };
        for (s, idx) in sums.iter_mut().zip(&layout.canonical) {
            *s /= n;
            let bias = match order {
                2 => {
                    if idx[0] == idx[1] {
                        s2
                    } else {
                        0.0
                    }
                }
                _ => {
                    let (i, j, k) = (idx[0], idx[1], idx[2]);
                    let mut b = 0.0;
                    if j == k {
                        b += mean[i];
                    }
                    if i == k {
                        b += mean[j];
                    }
                    if i == j {
                        b += mean[k];
                    }
                    s2 * b
                }
            };
            *s -= bias;
        }
    } else {
        sums.iter_mut().for_each(|s| *s /= n);
    }
    Ok(MomentTensor {
        order,
        dim,
        entries: layout.scatter(&sums),
    })
}

/// `K^n = (1/n!) ‖A − B‖²`.
pub fn moment_distance(a: &MomentTensor, b: &MomentTensor) -> Result<f64> {
    Ok(a.sub(b)?.norm_sq() / factorial(a.order))
}

/// `‖M^n_{x̃,θ̃} − M^n_{x,θ}‖²` for every order in `1..=max_order`.
pub fn moment_gaps(
    xt: &Signal,
    thetat: &GroupDistribution,
    x: &Signal,
    theta: &GroupDistribution,
    projection: &Projection,
    max_order: usize,
) -> Result<Vec<f64>> {
    check_model_dims(xt, thetat, projection)?;
    check_model_dims(x, theta, projection)?;
    let dim = projection.output_dim();
    let vt = projected_orbit(xt, thetat, projection);
    let v = projected_orbit(x, theta, projection);
    Ok((1..=max_order)
        .map(|n| {
            let a = weighted_tensor_power(&vt, thetat.weights(), n, dim);
            let b = weighted_tensor_power(&v, theta.weights(), n, dim);
            a.sub(&b).expect("same shape").norm_sq()
        })
        .collect())
}

/// Weights `c_i` with `p'(nodes[at]) = Σ_i c_i p(nodes[i])` for every
/// polynomial of degree below `nodes.len()`.
fn lagrange_derivative_weights(nodes: &[f64], at: usize) -> Vec<f64> {
    let t = nodes[at];
    nodes
        .iter()
        .enumerate()
        .map(|(i, &hi)| {
            if i == at {
                nodes
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != at)
                    .map(|(_, &hj)| 1.0 / (t - hj))
                    .sum()
            } else {
                let mut c = 1.0 / (hi - t);
                for (j, &hj) in nodes.iter().enumerate() {
                    if j != i && j != at {
                        c *= (t - hj) / (hi - hj);
                    }
                }
                c
            }
        })
        .collect()
}

/// `(d/dh) M^n_{x_h,θ_h}` at `h = 0` along `x_h = (1−h)x + h x̃`,
/// `θ_h = (1−h)θ + h θ̃`.
///
/// The path moment is a polynomial of degree at most `n + 1` in `h`, so it
/// is differentiated exactly by interpolating on the symmetric nodes
/// `{0, ±1, …, ±m}/(n+2)`.
pub fn moment_path_derivative(
    x: &Signal,
    theta: &GroupDistribution,
    xt: &Signal,
    thetat: &GroupDistribution,
    projection: &Projection,
    order: usize,
) -> Result<MomentTensor> {
    if order == 0 {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    check_model_dims(x, theta, projection)?;
    check_model_dims(xt, thetat, projection)?;
    check_dim("group order", theta.group().order(), thetat.group().order())?;
    let half = (order + 1).div_ceil(2);
    let scale = 1.0 / (order + 2) as f64;
    let nodes: Vec<f64> = (-(half as i64)..=half as i64).map(|i| i as f64 * scale).collect();
    let center = half;
    let coeffs = lagrange_derivative_weights(&nodes, center);
    let dim = projection.output_dim();
    let mut acc = MomentTensor::zeros(order, dim);
    for (&h, &c) in nodes.iter().zip(&coeffs) {
        if c == 0.0 {
            continue;
        }
        let xh = x * (1.0 - h) + xt * h;
        let wh: Vec<f64> = theta
            .weights()
            .iter()
            .zip(thetat.weights())
            .map(|(a, b)| (1.0 - h) * a + h * b)
            .collect();
        let vs = projected_orbit(&xh, theta, projection);
        let m = weighted_tensor_power(&vs, &wh, order, dim);
        for (a, v) in acc.entries.iter_mut().zip(&m.entries) {
            *a += c * v;
        }
    }
    Ok(acc)
}

/// `Q^n = (1/n!) ‖(d/dh) M^n_{x_h,θ_h}|_{h=0}‖²`.
pub fn directional_q(
    x: &Signal,
    theta: &GroupDistribution,
    xt: &Signal,
    thetat: &GroupDistribution,
    projection: &Projection,
    order: usize,
) -> Result<f64> {
    let d = moment_path_derivative(x, theta, xt, thetat, projection, order)?;
    Ok(d.norm_sq() / factorial(order))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::channel::{simulate, ChannelModel};
    use crate::group::cyclic_shift_group;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sig(v: &[f64]) -> Signal {
        DVector::from_row_slice(v)
    }

    fn example1(b: f64, c: f64) -> (Signal, GroupDistribution, Projection) {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        (sig(&[0.0, b, c]), GroupDistribution::uniform(g), Projection::select(3, &[0, 1]).unwrap())
    }

    fn example2(a: f64, b: f64) -> (Signal, GroupDistribution, Projection) {
        let g = Arc::new(cyclic_shift_group(2).unwrap());
        (sig(&[a, b]), GroupDistribution::uniform(g), Projection::select(2, &[0]).unwrap())
    }

    #[test]
    fn example1_first_two_moments() {
        let (b, c) = (1.3, -0.4);
        let (x, th, p) = example1(b, c);
        let m1 = exact_moment(&x, &th, &p, 1).unwrap();
        assert_abs_diff_eq!(m1.get(&[0]), (b + c) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m1.get(&[1]), (b + c) / 3.0, epsilon = 1e-12);
        let m2 = exact_moment(&x, &th, &p, 2).unwrap();
        assert_abs_diff_eq!(m2.get(&[0, 0]), (b * b + c * c) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m2.get(&[1, 1]), (b * b + c * c) / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m2.get(&[0, 1]), b * c / 3.0, epsilon = 1e-12);
        assert_eq!(m2.get(&[0, 1]), m2.get(&[1, 0]));
    }

    #[test]
    fn example1_third_order_gap() {
        let (b, c) = (1.0, 2.0);
        let (x, th, p) = example1(b, c);
        let xs = sig(&[0.0, c, b]);
        let a = exact_moment(&xs, &th, &p, 3).unwrap();
        let m = exact_moment(&x, &th, &p, 3).unwrap();
        let raw = a.sub(&m).unwrap().norm_sq();
        // six off-diagonal entries each differ by (b²c − c²b)/3
        let closed = 6.0 * ((b * b * c - c * c * b) / 3.0).powi(2);
        assert_abs_diff_eq!(raw, closed, epsilon = 1e-9);
        assert_abs_diff_eq!(raw, 8.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(moment_distance(&a, &m).unwrap(), 4.0 / 9.0, epsilon = 1e-9);
        // the (1,1,2) entry from the worked computation
        assert_abs_diff_eq!(m.get(&[0, 0, 1]), b * b * c / 3.0, epsilon = 1e-12);
        // lower orders agree
        for n in 1..=2 {
            let a = exact_moment(&xs, &th, &p, n).unwrap();
            let m = exact_moment(&x, &th, &p, n).unwrap();
            assert!(moment_distance(&a, &m).unwrap() < 1e-24);
        }
    }

    #[test]
    fn example2_moments() {
        let (a, b) = (1.0, 2.0);
        let (x, th, p) = example2(a, b);
        assert_abs_diff_eq!(exact_moment(&x, &th, &p, 1).unwrap().get(&[0]), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(exact_moment(&x, &th, &p, 2).unwrap().get(&[0, 0]), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, th, p) = example2(1.0, 2.0);
        assert!(exact_moment(&x, &th, &p, 0).is_err());
        assert!(exact_moment(&sig(&[1.0]), &th, &p, 1).is_err());
        let a = MomentTensor::zeros(2, 2);
        let b = MomentTensor::zeros(3, 2);
        assert!(moment_distance(&a, &b).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = MomentTensor::from_entries(1, 2, vec![1.0, 1.0]).unwrap();
        let b = MomentTensor::from_entries(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(moment_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(moment_distance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn orbit_invariance_of_moments() {
        let g = Arc::new(cyclic_shift_group(4).unwrap());
        let theta = GroupDistribution::new(g.clone(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = Projection::select(4, &[0, 2]).unwrap();
        let x = sig(&[0.3, -1.2, 0.8, 2.0]);
        for gi in 0..4 {
            let gx = g.element(gi).act(&x);
            let pushed = theta.pushforward_for(gi);
            for n in 1..=4 {
                let a = exact_moment(&x, &theta, &p, n).unwrap();
                let b = exact_moment(&gx, &pushed, &p, n).unwrap();
                assert!(a.sub(&b).unwrap().norm_sq() < 1e-24);
            }
        }
    }

    #[test]
    fn empirical_noiseless_matches_exact() {
        let (x, th, p) = example1(1.0, 2.0);
        let model = ChannelModel::new(x.clone(), th.clone(), p.clone(), 1e-12).unwrap();
        let n = 30_000;
        let batch = simulate(&model, n, 5).unwrap();
        for order in 1..=3 {
            let e = empirical_moment(&batch, order, 1e-12, false).unwrap();
            let m = exact_moment(&x, &th, &p, order).unwrap();
            let scale = 8f64.powi(order as i32);
            assert!(e.sub(&m).unwrap().norm_sq().sqrt() < 5.0 * scale / (n as f64).sqrt());
            assert_eq!(e.symmetry_defect(), 0.0);
        }
    }

    #[test]
    fn empirical_second_moment_debiased() {
        let (x, th, p) = example2(1.0, 2.0);
        let model = ChannelModel::new(x, th, p, 1.0).unwrap();
        let batch = simulate(&model, 1_000_000, 21).unwrap();
        let m2 = empirical_moment(&batch, 2, 1.0, true).unwrap();
        assert!((m2.get(&[0, 0]) - 2.5).abs() < 0.02, "{}", m2.get(&[0, 0]));
        assert!(empirical_moment(&batch, 4, 1.0, true).is_err());
        assert!(empirical_moment(&batch, 4, 1.0, false).is_ok());
    }

    #[test]
    fn empirical_pure_noise_debiased() {
        let g = Arc::new(cyclic_shift_group(2).unwrap());
        let model = ChannelModel::new(sig(&[0.0, 0.0]), GroupDistribution::uniform(g), Projection::identity(2), 1.0).unwrap();
        let n = 200_000;
        let batch = simulate(&model, n, 2).unwrap();
        let m2 = empirical_moment(&batch, 2, 1.0, true).unwrap();
        for v in m2.entries() {
            assert!(v.abs() < 5.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn empirical_third_moment_debiased() {
        let (x, th, p) = example1(1.0, 2.0);
        let sigma = 0.8;
        let model = ChannelModel::new(x.clone(), th.clone(), p.clone(), sigma).unwrap();
        let n = 400_000;
        let batch = simulate(&model, n, 13).unwrap();
        let e = empirical_moment(&batch, 3, sigma, true).unwrap();
        let m = exact_moment(&x, &th, &p, 3).unwrap();
        // Var(Y_i Y_j Y_k) ≤ E[Y⁶] per entry; generous bound at this scale
        let tol = 5.0 * 40.0 / (n as f64).sqrt();
        for (a, b) in e.entries().iter().zip(m.entries()) {
            assert!((a - b).abs() < tol, "{a} vs {b}");
        }
        assert_eq!(e.symmetry_defect(), 0.0);
    }

    #[test]
    fn example2_directional_q() {
        let (x, th, p) = example2(1.0, 2.0);
        let dir = sig(&[2.0, 1.0]);
        assert!(directional_q(&x, &th, &dir, &th, &p, 1).unwrap() < 1e-24);
        let d2 = moment_path_derivative(&x, &th, &dir, &th, &p, 2).unwrap();
        assert_abs_diff_eq!(d2.get(&[0, 0]), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(directional_q(&x, &th, &dir, &th, &p, 2).unwrap(), 0.5, epsilon = 1e-12);
        for n in 1..=4 {
            assert!(directional_q(&x, &th, &x, &th, &p, n).unwrap() < 1e-28);
        }
    }

    #[test]
    fn lagrange_weights_differentiate_polynomials() {
        let nodes = [-0.5, -0.25, 0.0, 0.25, 0.5];
        let c = lagrange_derivative_weights(&nodes, 2);
        // p(h) = 3 − 2h + h² − 4h³ + 7h⁴, p'(0) = −2
        let p = |h: f64| 3.0 - 2.0 * h + h * h - 4.0 * h.powi(3) + 7.0 * h.powi(4);
        let d: f64 = nodes.iter().zip(&c).map(|(h, w)| w * p(*h)).sum();
        assert_abs_diff_eq!(d, -2.0, epsilon = 1e-12);
    }

    /// Central difference of the path moment, using only `exact_moment`.
    fn finite_difference_q(
        x: &Signal,
        theta: &GroupDistribution,
        xt: &Signal,
        thetat: &GroupDistribution,
        p: &Projection,
        order: usize,
        h: f64,
    ) -> f64 {
        let at = |h: f64| {
            let xh = x * (1.0 - h) + xt * h;
            let w = theta
                .weights()
                .iter()
                .zip(thetat.weights())
                .map(|(a, b)| (1.0 - h) * a + h * b)
                .collect();
            let th = GroupDistribution::new(theta.group().clone(), w).unwrap();
            exact_moment(&xh, &th, p, order).unwrap()
        };
        let d = at(h).sub(&at(-h)).unwrap();
        d.norm_sq() / (4.0 * h * h) / factorial(order)
    }

    #[test]
    fn q_matches_finite_differences() {
        let g = Arc::new(cyclic_shift_group(3).unwrap());
        let theta = GroupDistribution::new(g.clone(), vec![0.5, 0.3, 0.2]).unwrap();
        let thetat = GroupDistribution::new(g, vec![0.2, 0.4, 0.4]).unwrap();
        let p = Projection::select(3, &[0, 1]).unwrap();
        let x = sig(&[0.3, 1.1, -0.7]);
        let xt = sig(&[1.0, -0.5, 0.9]);
        for n in 1..=4 {
            let q = directional_q(&x, &theta, &xt, &thetat, &p, n).unwrap();
            let fd = finite_difference_q(&x, &theta, &xt, &thetat, &p, n, 1e-4);
            assert!((q - fd).abs() <= 1e-6 * q.abs().max(1e-12), "n={n}: {q} vs {fd}");
        }
    }

    #[test]
    fn path_gap_is_quadratic_at_the_first_nonzero_q() {
        // Example 1 direction keeping the zero entry: Q¹ = 0, Q² > 0
        let (x, th, p) = example1(1.0, 2.0);
        let xt = sig(&[0.0, 2.0, 1.0]);
        assert!(directional_q(&x, &th, &xt, &th, &p, 1).unwrap() < 1e-24);
        let q2 = directional_q(&x, &th, &xt, &th, &p, 2).unwrap();
        assert!(q2 > 0.1);
        for &h in &[1e-2, 1e-3, 1e-4] {
            let xh = &x * (1.0 - h) + &xt * h;
            let a = exact_moment(&xh, &th, &p, 2).unwrap();
            let m = exact_moment(&x, &th, &p, 2).unwrap();
            let ratio = moment_distance(&a, &m).unwrap() / (h * h);
            assert!((ratio / q2 - 1.0).abs() < 10.0 * h, "h={h}: {ratio} vs {q2}");
        }
    }

    #[test]
    fn tensor_csv_layout() {
        let t = MomentTensor::from_entries(2, 2, vec![1.0, 2.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "k1,k2,value\n1,1,1\n1,2,2\n2,1,2\n2,2,3\n");
    }

    proptest! {
        #[test]
        fn analytic_tensors_are_exactly_symmetric(
            xs in proptest::collection::vec(-2.0f64..2.0, 4),
            ws in proptest::collection::vec(0.01f64..1.0, 4),
            order in 1usize..5,
        ) {
            let g = Arc::new(cyclic_shift_group(4).unwrap());
            let total: f64 = ws.iter().sum();
            let th = GroupDistribution::new(g, ws.iter().map(|w| w / total).collect());
            prop_assume!(th.is_ok());
            let p = Projection::select(4, &[1, 2, 3]).unwrap();
            let m = exact_moment(&sig(&xs), &th.unwrap(), &p, order).unwrap();
            prop_assert_eq!(m.symmetry_defect(), 0.0);
        }
    }
}
