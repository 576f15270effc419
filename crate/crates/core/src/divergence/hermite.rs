//! Probabilists' Hermite polynomials.

/// He_j(u) by the three-term recurrence He_{j+1} = u He_j − j He_{j−1}.
pub fn hermite_he(j: usize, u: f64) -> f64 {
    scaled_hermite(j, u, 1.0)
}

/// s^j He_j(u/s), evaluated without dividing by `s` so that `s = 0` gives
/// `u^j`. Recurrence: H_{j+1} = u H_j − j s² H_{j−1}.
pub fn scaled_hermite(j: usize, u: f64, s: f64) -> f64 {
    let s2 = s * s;
    let (mut prev, mut cur) = (1.0, u);
    if j == 0 {
        return prev;
    }
    for k in 1..j {
        let next = u * cur - k as f64 * s2 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// All of He_0(u), …, He_max(u).
pub fn hermite_table(max: usize, u: f64, s: f64) -> Vec<f64> {
    let s2 = s * s;
    let mut out = Vec::with_capacity(max + 1);
    out.push(1.0);
    if max >= 1 {
        out.push(u);
    }
    for k in 1..max {
        let next = u * out[k] - k as f64 * s2 * out[k - 1];
        out.push(next);
    }
    out
}
