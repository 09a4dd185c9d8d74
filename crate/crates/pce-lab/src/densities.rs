//! Conditional densities of the public and private signals given the factor.
//!
//! With `F = sum_m E_m`, the law of `X_1` given `X_t = x` and the public
//! signals `h_1..h_n` has density `exp(-y'Fy/2 + y'sum E_m h_m - l_n)` against
//! the OU transition law, where
//! `l_n(t, x, h) = Lambda(t, x; 1, F, sum E_m h_m)`. Insider `k` replaces
//! `(E_k, h_k)` by `(C_k, g_k)`.

use crate::error::{PceError, Result};
use crate::gaussian::{gaussian_posterior, log_mgf_quadratic, OuParams};
use crate::linalg;
use crate::market::{MarketScenario, SignalSystem};
use crate::{Mat, Vector};

/// Evaluators of `l_n`, `l_{n,k}` and the density processes built on them.
#[derive(Debug, Clone)]
pub struct SignalDensities {
    ou: OuParams,
    sys: SignalSystem,
    x0: Vector,
}

impl SignalDensities {
    pub fn new(s: &MarketScenario) -> Result<Self> {
        Ok(Self {
            ou: s.ou.clone(),
            sys: s.signal_system()?,
            x0: s.x0.clone(),
        })
    }

    pub fn from_parts(ou: OuParams, sys: SignalSystem, x0: Vector) -> Self {
        Self { ou, sys, x0 }
    }

    pub fn ou(&self) -> &OuParams {
        &self.ou
    }

    pub fn signals(&self) -> &SignalSystem {
        &self.sys
    }

    fn check(&self, n: usize, h: &[Vector]) -> Result<()> {
        if n > self.sys.n() {
            return Err(PceError::InvalidSpec(format!(
                "stage {n} beyond the {} signals",
                self.sys.n()
            )));
        }
        if h.len() < n {
            return Err(PceError::DimensionMismatch(format!(
                "stage {n} needs {n} signal values, got {}",
                h.len()
            )));
        }
        Ok(())
    }

    /// Quadratic and linear coefficients of the public-signal likelihood.
    fn public_coeffs(&self, n: usize, h: &[Vector], skip: Option<usize>) -> (Mat, Vector) {
        let d = self.ou.dim();
        let mut m = Mat::zeros(d, d);
        let mut v = Vector::zeros(d);
        for k in 1..=n {
            if Some(k) == skip {
                continue;
            }
            m += self.sys.e(k);
            v += self.sys.e(k) * &h[k - 1];
        }
        (m, v)
    }

    /// `l_n(t, x, h_1..h_n)`.
    pub fn ell_n(&self, n: usize, t: f64, x: &Vector, h: &[Vector]) -> Result<f64> {
        self.check(n, h)?;
        let (m, v) = self.public_coeffs(n, h, None);
        log_mgf_quadratic(&self.ou, t, x, 1.0, &m, &v)
    }

    /// `l_{n,k}(t, x, h^{-k}, g_k)`; the entry `h[k-1]` is ignored.
    pub fn ell_nk(
        &self,
        n: usize,
        k: usize,
        t: f64,
        x: &Vector,
        h: &[Vector],
        g: &Vector,
    ) -> Result<f64> {
        self.check(n, h)?;
        if k == 0 || k > n {
            return Err(PceError::InvalidSpec(format!(
                "insider {k} not active in stage {n}"
            )));
        }
        let (mut m, mut v) = self.public_coeffs(n, h, Some(k));
        m += self.sys.c(k);
        v += self.sys.c(k) * g;
        log_mgf_quadratic(&self.ou, t, x, 1.0, &m, &v)
    }

    /// `l` for the public signals other than `k`.
    pub fn ell_without(&self, n: usize, k: usize, t: f64, x: &Vector, h: &[Vector]) -> Result<f64> {
        self.check(n, h)?;
        let (m, v) = self.public_coeffs(n, h, Some(k));
        log_mgf_quadratic(&self.ou, t, x, 1.0, &m, &v)
    }

    /// `p^{n,0}(t, x, h) = exp(l_n(t, x, h) - l_n(0, X_0, h))`.
    pub fn density_ratio(&self, n: usize, t: f64, x: &Vector, h: &[Vector]) -> Result<f64> {
        Ok((self.ell_n(n, t, x, h)? - self.ell_n(n, 0.0, &self.x0, h)?).exp())
    }

    /// `p^{n,k}(t, x, h^{-k}, g_k)`.
    pub fn density_ratio_insider(
        &self,
        n: usize,
        k: usize,
        t: f64,
        x: &Vector,
        h: &[Vector],
        g: &Vector,
    ) -> Result<f64> {
        Ok((self.ell_nk(n, k, t, x, h, g)? - self.ell_nk(n, k, 0.0, &self.x0, h, g)?).exp())
    }

    fn posterior_of_terminal(
        &self,
        t: f64,
        x: &Vector,
        precisions: &[Mat],
        values: &[Vector],
    ) -> Result<(Vector, Mat)> {
        if !(t < 1.0) {
            return Err(PceError::InvalidSpec(format!(
                "signal time {t} must precede 1"
            )));
        }
        let tau = 1.0 - t;
        let prior_p = self.ou.precision(tau)?;
        let (mean, prec) = gaussian_posterior(&self.ou.mean(x, tau), &prior_p, precisions, values)?;
        Ok((mean, linalg::spd_inverse(&prec, "posterior precision")?))
    }

    /// Law of `H_n` given `X_t = x` and `h_1..h_{n-1}`: `N(mu_H, Sigma_H)`.
    pub fn jump_signal_moments(
        &self,
        n: usize,
        t: f64,
        x: &Vector,
        h_prev: &[Vector],
    ) -> Result<(Vector, Mat)> {
        if n == 0 || n > self.sys.n() {
            return Err(PceError::InvalidSpec(format!("no signal {n}")));
        }
        self.check(n - 1, h_prev)?;
        let precs: Vec<Mat> = (1..n).map(|m| self.sys.e(m).clone()).collect();
        let (mean, cov) = self.posterior_of_terminal(t, x, &precs, &h_prev[..n - 1])?;
        let e_inv = linalg::spd_inverse(self.sys.e(n), "signal precision")?;
        Ok((mean, cov + e_inv))
    }

    /// Law of `H_n` as seen by insider `k < n`, who knows `g_k` in place of `h_k`.
    pub fn jump_signal_moments_insider(
        &self,
        n: usize,
        k: usize,
        t: f64,
        x: &Vector,
        h_prev: &[Vector],
        g: &Vector,
    ) -> Result<(Vector, Mat)> {
        if n == 0 || n > self.sys.n() || k == 0 || k >= n {
            return Err(PceError::InvalidSpec(format!(
                "insider {k} does not precede signal {n}"
            )));
        }
        self.check(n - 1, h_prev)?;
        let mut precs = Vec::new();
        let mut vals = Vec::new();
        for m in 1..n {
            if m == k {
                precs.push(self.sys.c(k).clone());
                vals.push(g.clone());
            } else {
                precs.push(self.sys.e(m).clone());
                vals.push(h_prev[m - 1].clone());
            }
        }
        let (mean, cov) = self.posterior_of_terminal(t, x, &precs, &vals)?;
        let e_inv = linalg::spd_inverse(self.sys.e(n), "signal precision")?;
        Ok((mean, cov + e_inv))
    }

    /// Ratio form of the jump-signal pdf: `exp(l_n - l_{n-1}) p_{E_n}(h_n)`.
    pub fn jump_pdf(&self, n: usize, t: f64, x: &Vector, h: &[Vector]) -> Result<f64> {
        self.check(n, h)?;
        let e = self.sys.e(n);
        let zero = Vector::zeros(e.nrows());
        let ratio = self.ell_n(n, t, x, h)? - self.ell_n(n - 1, t, x, h)?;
        Ok(ratio.exp()
            * gaussian_pdf(
                &zero,
                &linalg::spd_inverse(e, "signal precision")?,
                &h[n - 1],
            )?)
    }

    /// Ratio form for insider `k < n`: `exp(l_{n,k} - l_{n-1,k}) p_{E_n}(h_n)`.
    pub fn jump_pdf_insider(
        &self,
        n: usize,
        k: usize,
        t: f64,
        x: &Vector,
        h: &[Vector],
        g: &Vector,
    ) -> Result<f64> {
        self.check(n, h)?;
        let e = self.sys.e(n);
        let zero = Vector::zeros(e.nrows());
        let ratio = self.ell_nk(n, k, t, x, h, g)? - self.ell_nk(n - 1, k, t, x, h, g)?;
        Ok(ratio.exp()
            * gaussian_pdf(
                &zero,
                &linalg::spd_inverse(e, "signal precision")?,
                &h[n - 1],
            )?)
    }
}

/// Density of `N(mean, cov)` at `y`.
pub fn gaussian_pdf(mean: &Vector, cov: &Mat, y: &Vector) -> Result<f64> {
    let d = mean.len();
    let ch = linalg::symmetrize(cov).cholesky().ok_or_else(|| {
        PceError::SingularCovariance("covariance is not positive definite".into())
    })?;
    let r = y - mean;
    let z = ch
        .l()
        .solve_lower_triangular(&r)
        .expect("Cholesky factor is invertible");
    let logdet: f64 = ch.l().diagonal().iter().map(|v| v.ln()).sum();
    Ok(
        (-0.5 * z.norm_squared() - logdet - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
            .exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate;
    use nalgebra::dvector;

    fn example() -> SignalDensities {
        SignalDensities::new(&MarketScenario::two_signal_example()).unwrap()
    }

    #[test]
    fn no_signals_gives_zero() {
        let s = example();
        assert_eq!(s.ell_n(0, 0.3, &dvector![0.7], &[]).unwrap(), 0.0);
    }

    #[test]
    fn stage_one_curvature_in_signal() {
        // l_1 itself is convex in h_1; adding the log of the N(0, E_1^{-1})
        // density gives the concave marginal log-likelihood of H_1.
        let s = example();
        let x = dvector![0.0];
        let e1 = 1.0 / 82.0;
        let p1 = 1.0 / 0.432_332_358_381_693_6;
        let f = |h: f64| s.ell_n(1, 0.0, &x, &[dvector![h]]).unwrap();
        let second = f(1.0) + f(-1.0) - 2.0 * f(0.0);
        assert!((second - e1 * e1 / (p1 + e1)).abs() < 1e-14);
        let marginal = second - e1;
        assert!(marginal < 0.0);
        assert!((marginal + e1 * p1 / (p1 + e1)).abs() < 1e-14);
    }

    #[test]
    fn ratio_is_one_at_origin() {
        let s = example();
        let h = [dvector![0.4], dvector![-1.2]];
        assert_eq!(s.density_ratio(2, 0.0, &dvector![0.0], &h).unwrap(), 1.0);
        let g = dvector![0.3];
        assert_eq!(
            s.density_ratio_insider(2, 1, 0.0, &dvector![0.0], &h, &g)
                .unwrap(),
            1.0
        );
    }

    #[test]
    fn moments_without_conditioning() {
        let s = example();
        let (m, c) = s.jump_signal_moments(1, 0.0, &dvector![0.3], &[]).unwrap();
        let ou = s.ou();
        assert!((m[0] - ou.mean(&dvector![0.3], 1.0)[0]).abs() < 1e-14);
        assert!((c[(0, 0)] - (ou.cov(1.0)[(0, 0)] + 82.0)).abs() < 1e-10);
    }

    #[test]
    fn jump_pdf_matches_moments() {
        let s = example();
        let x = dvector![0.6];
        let h1 = dvector![-0.8];
        let (m, c) = s
            .jump_signal_moments(2, 0.5, &x, std::slice::from_ref(&h1))
            .unwrap();
        let (mi, ci) = s
            .jump_signal_moments_insider(2, 1, 0.5, &x, std::slice::from_ref(&h1), &dvector![1.1])
            .unwrap();
        for i in 0..20 {
            let h2 = -30.0 + 3.0 * i as f64;
            let h = [h1.clone(), dvector![h2]];
            let ratio = s.jump_pdf(2, 0.5, &x, &h).unwrap();
            let gauss = gaussian_pdf(&m, &c, &dvector![h2]).unwrap();
            assert!((ratio / gauss - 1.0).abs() < 1e-10, "h2={h2}");
            let ratio = s
                .jump_pdf_insider(2, 1, 0.5, &x, &h, &dvector![1.1])
                .unwrap();
            let gauss = gaussian_pdf(&mi, &ci, &dvector![h2]).unwrap();
            assert!((ratio / gauss - 1.0).abs() < 1e-10, "h2={h2}");
        }
    }

    #[test]
    fn private_signal_density_normalizes() {
        let s = example();
        let x = dvector![-0.4];
        let h = [dvector![0.0], dvector![0.9]];
        for t in [0.0, 0.3, 0.8] {
            let sd = 1.0 / s.signals().c(1)[(0, 0)].sqrt();
            let total = integrate(
                |g| {
                    let gv = dvector![g];
                    let l = s.ell_nk(2, 1, t, &x, &h, &gv).unwrap()
                        - s.ell_without(2, 1, t, &x, &h).unwrap();
                    l.exp()
                        * gaussian_pdf(&dvector![0.0], &Mat::from_element(1, 1, sd * sd), &gv)
                            .unwrap()
                },
                -40.0,
                40.0,
                1e-13,
                1e-13,
            )
            .unwrap();
            assert!((total - 1.0).abs() < 1e-8, "t={t}: {total}");
        }
    }
}
