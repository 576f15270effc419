//! Finite subgroups of O(L), distributions over them, orbits and best alignment.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub type Signal = DVector<f64>;

/// Entrywise tolerance for `gᵀg = I` at construction.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;
/// Entrywise tolerance when matching products back into the element list.
pub const CLOSURE_TOL: f64 = 1e-10;
/// Tolerance on the total mass of a group distribution.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupElement {
    pub matrix: DMatrix<f64>,
    pub index: usize,
}

impl GroupElement {
    pub fn act(&self, x: &Signal) -> Signal {
        &self.matrix * x
    }
}

/// A finite subgroup of O(L) with a precomputed Cayley table.
#[derive(Debug, Clone)]
pub struct FiniteGroup {
    elements: Vec<GroupElement>,
    dim: usize,
    identity: usize,
    // product[i * n + j] = k  with  e_i · e_j = e_k
    product: Vec<usize>,
    inverse: Vec<usize>,
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

impl FiniteGroup {
    /// Builds a group from explicit matrices, checking orthogonality,
    /// closure, identity and inverses. Element order is preserved.
    pub fn from_matrices(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::InvalidArgument("a group needs at least one element".into()))?;
        let dim = first.nrows();
        if dim == 0 {
            return Err(Error::InvalidArgument("group dimension must be positive".into()));
        }
        let eye = DMatrix::<f64>::identity(dim, dim);
        for (index, m) in matrices.iter().enumerate() {
            check_dim("group element rows", dim, m.nrows())?;
            check_dim("group element columns", dim, m.ncols())?;
            let deviation = max_abs_diff(&(m.transpose() * m), &eye);
            if deviation > ORTHOGONALITY_TOL {
                return Err(Error::NotOrthogonal { index, deviation });
            }
        }
        let n = matrices.len();
        let find = |m: &DMatrix<f64>| {
            matrices
                .iter()
                .position(|e| max_abs_diff(e, m) <= CLOSURE_TOL)
        };
        let identity = find(&eye).ok_or(Error::MissingIdentity)?;
        let mut product = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                let p = &matrices[i] * &matrices[j];
                product[i * n + j] = find(&p).ok_or(Error::NotClosed { left: i, right: j })?;
            }
        }
        let inverse = (0..n)
            .map(|i| {
                (0..n)
                    .find(|&j| product[i * n + j] == identity)
                    .ok_or(Error::NotClosed { left: i, right: i })
            })
            .collect::<Result<Vec<_>>>()?;
        let elements = matrices
            .into_iter()
            .enumerate()
            .map(|(index, matrix)| GroupElement { matrix, index })
            .collect();
        Ok(Self {
            elements,
            dim,
            identity,
            product,
            inverse,
        })
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn element(&self, index: usize) -> &GroupElement {
        &self.elements[index]
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn identity_index(&self) -> usize {
        self.identity
    }

    /// Index of `e_i · e_j`.
    pub fn product_index(&self, i: usize, j: usize) -> usize {
        self.product[i * self.order() + j]
    }

    pub fn inverse_index(&self, i: usize) -> usize {
        self.inverse[i]
    }
}

/// The cyclic shift group `{I, R, …, R^{L-1}}` with
/// `R (x_1, …, x_L) = (x_L, x_1, …, x_{L-1})`; element `k` is `R^k`.
pub fn cyclic_shift_group(len: usize) -> Result<FiniteGroup> {
    if len == 0 {
        return Err(Error::InvalidArgument("cyclic shift group needs L >= 1".into()));
    }
    let matrices = (0..len)
        .map(|shift| {
            // (R^k x)_i = x_{i-k}
            DMatrix::from_fn(len, len, |i, j| {
                if (i + len - shift) % len == j {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    FiniteGroup::from_matrices(matrices)
}

/// Probability vector over the elements of a finite group.
#[derive(Debug, Clone)]
pub struct GroupDistribution {
    group: Arc<FiniteGroup>,
    weights: Vec<f64>,
}

impl GroupDistribution {
    pub fn new(group: Arc<FiniteGroup>, weights: Vec<f64>) -> Result<Self> {
        check_dim("distribution weights", group.order(), weights.len())?;
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDistribution(format!("weight {w} is not a finite nonnegative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Ok(Self { group, weights })
    }

    pub fn uniform(group: Arc<FiniteGroup>) -> Self {
        let n = group.order();
        Self {
            weights: vec![1.0 / n as f64; n],
            group,
        }
    }

    pub fn point_mass(group: Arc<FiniteGroup>, index: usize) -> Result<Self> {
        if index >= group.order() {
            return Err(Error::InvalidArgument(format!(
                "element {index} out of range for group of order {}",
                group.order()
            )));
        }
        let mut weights = vec![0.0; group.order()];
        weights[index] = 1.0;
        Ok(Self { group, weights })
    }

    pub fn group(&self) -> &Arc<FiniteGroup> {
        &self.group
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Distribution `θ'` such that `(g·x, θ')` generates the same
    /// observations as `(x, θ)`: mass `θ_j` moves to `e_j · g⁻¹`.
    pub fn pushforward_for(&self, g: usize) -> Self {
        let g_inv = self.group.inverse_index(g);
        let mut weights = vec![0.0; self.weights.len()];
        for (j, &w) in self.weights.iter().enumerate() {
            weights[self.group.product_index(j, g_inv)] += w;
        }
        Self {
            group: Arc::clone(&self.group),
            weights,
        }
    }
}

/// Creates the uniform distribution over `group`.
pub fn uniform_distribution(group: &Arc<FiniteGroup>) -> GroupDistribution {
    GroupDistribution::uniform(Arc::clone(group))
}

/// All orbit members `g·x` in canonical element order, duplicates kept.
pub fn orbit(x: &Signal, group: &FiniteGroup) -> Result<Vec<Signal>> {
    check_dim("orbit signal", group.dim(), x.len())?;
    Ok(group.elements().iter().map(|g| g.act(x)).collect())
}

/// `φ_x(x̂)`: the orbit member of `xhat` closest to `x`, together with the
/// element realizing it. Ties go to the smallest element index.
pub fn best_alignment<'g>(
    xhat: &Signal,
    x: &Signal,
    group: &'g FiniteGroup,
) -> Result<(Signal, &'g GroupElement)> {
    check_dim("alignment estimate", group.dim(), xhat.len())?;
    check_dim("alignment reference", group.dim(), x.len())?;
    let mut best: Option<(f64, Signal, &GroupElement)> = None;
    for g in group.elements() {
        let z = g.act(xhat);
        let dist = (&z - x).norm_squared();
        if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
            best = Some((dist, z, g));
        }
    }
    let (_, z, g) = best.expect("groups are nonempty");
    Ok((z, g))
}

/// `min_g ‖g·xhat − x‖²`.
pub fn orbit_distance_sq(xhat: &Signal, x: &Signal, group: &FiniteGroup) -> Result<f64> {
    let (z, _) = best_alignment(xhat, x, group)?;
    Ok((z - x).norm_squared())
}
