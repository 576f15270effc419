//! Damped Gauss-Newton (Levenberg-Marquardt) with a central-difference Jacobian.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iters: usize,
    /// Stop once the squared residual falls below this.
    pub cost_floor: f64,
}

pub(crate) struct LmResult {
    pub params: Vec<f64>,
    pub cost: f64,
}

fn jacobian<F>(f: &F, p: &[f64], m: usize) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut jac = DMatrix::zeros(m, p.len());
    let mut q = p.to_vec();
    for i in 0..p.len() {
        let h = 1e-6 * p[i].abs().max(1.0);
        q[i] = p[i] + h;
        let up = f(&q);
        q[i] = p[i] - h;
        let down = f(&q);
        q[i] = p[i];
        for r in 0..m {
            jac[(r, i)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    jac
}

fn cost(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub(crate) fn levenberg_marquardt<F>(f: F, start: Vec<f64>, opts: LmOptions) -> LmResult
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut p = start;
    let mut r = f(&p);
    let mut c = cost(&r);
    let mut damping = 1e-3;
    for _ in 0..opts.max_iters {
        if c <= opts.cost_floor || !c.is_finite() {
            break;
        }
        let jac = jacobian(&f, &p, r.len());
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..12 {
            let mut a = normal.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += damping * normal[(i, i)].max(1e-9);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                damping *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = f(&trial);
            let ct = cost(&rt);
            if ct < c {
                let rel = (c - ct) / c;
                p = trial;
                r = rt;
                c = ct;
                damping = (damping / 3.0).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            damping *= 4.0;
        }
        if !improved {
            break;
        }
    }
    LmResult { params: p, cost: c }
}
