//! Gauss-Hermite rules and globally adaptive Gauss-Kronrod integration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{PceError, Result};
use crate::Vector;

/// Gauss-Hermite nodes and weights for the weight function `exp(-x^2)`.
///
/// Nodes start from the Golub-Welsch eigenvalues and are polished by Newton
/// steps on the orthonormal Hermite recurrence; weights use the
/// Christoffel form `1 / sum_k p_k(x)^2`, which stays accurate in the tails.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Hermite order must be positive");
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = off;
        jac[(k - 1, k)] = off;
    }
    let mut nodes: Vec<f64> = jac.symmetric_eigenvalues().iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (pn, dpn, _) = hermite_orthonormal(n, *x);
            if dpn != 0.0 {
                *x -= pn / dpn;
            }
        }
        let (_, _, sumsq) = hermite_orthonormal(n, *x);
        weights.push(1.0 / sumsq);
    }
    (nodes, weights)
}

/// Orthonormal Hermite recurrence: returns `(p_n(x), p_n'(x), sum_{k<n} p_k(x)^2)`.
fn hermite_orthonormal(n: usize, x: f64) -> (f64, f64, f64) {
    let mut p_prev = 0.0;
    let mut p = std::f64::consts::PI.powf(-0.25);
    let mut sumsq = 0.0;
    for k in 1..=n {
        sumsq += p * p;
        let kf = k as f64;
        let next = x * (2.0 / kf).sqrt() * p - ((kf - 1.0) / kf).sqrt() * p_prev;
        p_prev = p;
        p = next;
    }
    let dp = (2.0 * n as f64).sqrt() * p_prev;
    (p, dp, sumsq)
}

/// Rule for expectations under the standard normal: `E f(Z) ~ sum w_i f(x_i)`.
pub fn normal_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = std::f64::consts::SQRT_2;
    let c = 1.0 / std::f64::consts::PI.sqrt();
    (
        x.iter().map(|v| v * s).collect(),
        w.iter().map(|v| v * c).collect(),
    )
}

/// Tensor-product standard-normal rule in `dim` dimensions.
pub fn normal_tensor_rule(n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (x, w) = normal_rule(n);
    let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
    let mut wts: Vec<f64> = vec![1.0];
    for _ in 0..dim {
        let mut np = Vec::with_capacity(pts.len() * n);
        let mut nw = Vec::with_capacity(pts.len() * n);
        for (p, pw) in pts.iter().zip(&wts) {
            for (xi, wi) in x.iter().zip(&w) {
                let mut q = p.clone();
                q.push(*xi);
                np.push(q);
                nw.push(pw * wi);
            }
        }
        pts = np;
        wts = nw;
    }
    (pts, wts)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 7/15-point Gauss-Kronrod panel for a vector-valued integrand.
fn gk15<F>(f: &F, a: f64, b: f64) -> Result<(Vector, f64)>
where
    F: Fn(f64) -> Result<Vector>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut k = &fc * WGK[7];
    let mut g = &fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let f1 = f(c - dx)?;
        let f2 = f(c + dx)?;
        let s = &f1 + &f2;
        k += &s * WGK[j];
        if j % 2 == 1 {
            g += &s * WG[j / 2];
        }
    }
    k *= h;
    g *= h;
    let err = (&k - &g).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok((k, err))
}

struct Panel {
    a: f64,
    b: f64,
    value: Vector,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Outcome of an adaptive integration.
#[derive(Debug, Clone)]
pub struct Integral {
    pub value: Vector,
    pub error: f64,
}

/// Globally adaptive Gauss-Kronrod integration of a vector-valued integrand
/// on a finite interval. Stops when the summed error estimate is below
/// `max(abs_tol, rel_tol * |value|_inf)`.
pub fn integrate_vec<F>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<Integral>
where
    F: Fn(f64) -> Result<Vector>,
{
    const MAX_PANELS: usize = 5000;
    if a == b {
        let dim = f(a)?.len();
        return Ok(Integral {
            value: Vector::zeros(dim),
            error: 0.0,
        });
    }
    let (v0, e0) = gk15(&f, a, b)?;
    let mut heap = BinaryHeap::new();
    let mut total = v0.clone();
    let mut total_err = e0;
    heap.push(Panel {
        a,
        b,
        value: v0,
        err: e0,
    });
    let mut panels = 1;
    loop {
        let scale = total.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if total_err <= abs_tol.max(rel_tol * scale) {
            break;
        }
        if panels >= MAX_PANELS {
            return Err(PceError::NoConvergence(format!(
                "adaptive quadrature on [{a}, {b}] stalled at error {total_err:.3e}"
            )));
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        let (lv, le) = gk15(&f, worst.a, mid)?;
        let (rv, re) = gk15(&f, mid, worst.b)?;
        total = total - &worst.value + &lv + &rv;
        total_err = total_err - worst.err + le + re;
        heap.push(Panel {
            a: worst.a,
            b: mid,
            value: lv,
            err: le,
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            value: rv,
            err: re,
        });
        panels += 1;
    }
    // Re-sum from the panels to shed the drift of incremental updates.
    let mut value = Vector::zeros(total.len());
    let mut error = 0.0;
    for p in heap.iter() {
        value += &p.value;
        error += p.err;
    }
    Ok(Integral { value, error })
}

/// Scalar wrapper around [`integrate_vec`].
pub fn integrate<F>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let r = integrate_vec(
        |x| Ok(Vector::from_element(1, f(x))),
        a,
        b,
        abs_tol,
        rel_tol,
    )?;
    Ok(r.value[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_integrates_moments() {
        for n in [5, 20, 40, 60, 100] {
            let (x, w) = normal_rule(n);
            let m0: f64 = w.iter().sum();
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
            assert!((m0 - 1.0).abs() < 1e-13, "n={n} m0={m0}");
            assert!((m2 - 1.0).abs() < 1e-12, "n={n} m2={m2}");
            if n >= 3 {
                assert!((m4 - 3.0).abs() < 1e-11, "n={n} m4={m4}");
            }
        }
    }

    #[test]
    fn hermite_rule_exponential_moment() {
        let (x, w) = normal_rule(40);
        let e: f64 = x.iter().zip(&w).map(|(x, w)| w * (0.8 * x).exp()).sum();
        assert!((e - (0.32_f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn tensor_rule_size_and_mass() {
        let (p, w) = normal_tensor_rule(7, 2);
        assert_eq!(p.len(), 49);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let v = integrate(|t| (1.0 - t).powf(-0.5), 0.0, 1.0 - 1e-8, 1e-12, 1e-12).unwrap();
        let exact = 2.0 * (1.0 - 1e-4);
        assert!((v - exact).abs() < 1e-9, "{v} vs {exact}");
    }

    #[test]
    fn adaptive_smooth() {
        let v = integrate(|t| t.sin(), 0.0, std::f64::consts::PI, 1e-14, 1e-14).unwrap();
        assert!((v - 2.0).abs() < 1e-13);
    }
}
