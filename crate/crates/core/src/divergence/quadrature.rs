//! Gauss-Hermite rules for ∫ e^{−t²} f(t) dt.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// Nodes (ascending) and weights of the `n`-point rule. Rules are cached.
pub fn gauss_hermite(n: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().expect("rule cache").get(&n) {
        return r.clone();
    }
    let rule = Arc::new(compute(n));
    cache.lock().expect("rule cache").insert(n, rule.clone());
    rule
}

/// Orthonormal Hermite recurrence at `z`: returns `(p_n(z), p_n'(z))`.
fn orthonormal(n: usize, z: f64) -> (f64, f64) {
    let (mut p1, mut p2) = (PI.powf(-0.25), 0.0);
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Eigenvalues of the Jacobi matrix give the nodes; each is polished by
/// Newton steps on the recurrence, which also yields the weight `2/p_n'²`.
fn compute(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut jacobi = DMatrix::zeros(n, n);
    for i in 1..n {
        let off = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = off;
        jacobi[(i - 1, i)] = off;
    }
    let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    guesses.sort_by(f64::total_cmp);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    // polish the nonnegative half, mirror the rest
    for i in 0..n.div_ceil(2) {
        let mut z = guesses[n - 1 - i].max(0.0);
        if n % 2 == 1 && i == n / 2 {
            z = 0.0;
        }
        let mut dp = orthonormal(n, z).1;
        for _ in 0..20 {
            let (p, d) = orthonormal(n, z);
            dp = d;
            let step = p / d;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                dp = orthonormal(n, z).1;
                break;
            }
        }
        x[n - 1 - i] = z;
        x[i] = -z;
        w[n - 1 - i] = 2.0 / (dp * dp);
        w[i] = w[n - 1 - i];
    }
    (x, w)
}
