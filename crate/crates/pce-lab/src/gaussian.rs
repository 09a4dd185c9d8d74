//! Ornstein-Uhlenbeck transition moments and exponential-quadratic Gaussian
//! expectations.
//!
//! The factor follows `dX = kappa (theta - X) dt + sigma dB`, so that
//! `X_{t+tau} | X_t = x` is Gaussian with mean `theta + e^{-tau kappa}(x - theta)`
//! and covariance `int_0^tau e^{-u kappa} Sigma e^{-u kappa'} du`.

use crate::error::{PceError, Result};
use crate::linalg::{self, expm, psd_factor, symmetrize, SPD_TOL};
use crate::quadrature::integrate_vec;
use crate::{Mat, Vector};

/// Drift and diffusion parameters of the factor process.
#[derive(Debug, Clone, PartialEq)]
pub struct OuParams {
    kappa: Mat,
    theta: Vector,
    sigma: Mat,
    cov: Mat,
}

impl OuParams {
    pub fn new(kappa: Mat, theta: Vector, sigma: Mat) -> Result<Self> {
        let d = theta.len();
        if d == 0 {
            return Err(PceError::DimensionMismatch(
                "factor dimension is zero".into(),
            ));
        }
        linalg::require_square(&kappa, d, "kappa")?;
        linalg::require_square(&sigma, d, "sigma")?;
        let cov = symmetrize(&(&sigma * sigma.transpose()));
        if !linalg::is_spd(&cov) {
            return Err(PceError::SingularCovariance(
                "sigma sigma' is not positive definite".into(),
            ));
        }
        Ok(Self {
            kappa,
            theta,
            sigma,
            cov,
        })
    }

    /// One-dimensional parameters.
    pub fn scalar(kappa: f64, theta: f64, sigma: f64) -> Result<Self> {
        Self::new(
            Mat::from_element(1, 1, kappa),
            Vector::from_element(1, theta),
            Mat::from_element(1, 1, sigma),
        )
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
    pub fn kappa(&self) -> &Mat {
        &self.kappa
    }
    pub fn theta(&self) -> &Vector {
        &self.theta
    }
    pub fn sigma(&self) -> &Mat {
        &self.sigma
    }
    /// Instantaneous covariance `sigma sigma'`.
    pub fn diffusion(&self) -> &Mat {
        &self.cov
    }

    /// `e^{-tau kappa}`.
    pub fn decay(&self, tau: f64) -> Mat {
        expm(&(&self.kappa * (-tau)))
    }

    pub fn mean(&self, x: &Vector, tau: f64) -> Vector {
        &self.theta + self.decay(tau) * (x - &self.theta)
    }

    /// Transition covariance over a horizon `tau`.
    ///
    /// Uses the block exponential of `[[-kappa, Sigma], [0, kappa']] tau`, whose
    /// upper-right block times `e^{-tau kappa'}` is the covariance integral.
    pub fn cov(&self, tau: f64) -> Mat {
        let d = self.dim();
        if tau == 0.0 {
            return Mat::zeros(d, d);
        }
        let mut block = Mat::zeros(2 * d, 2 * d);
        block
            .view_mut((0, 0), (d, d))
            .copy_from(&(-&self.kappa * tau));
        block.view_mut((0, d), (d, d)).copy_from(&(&self.cov * tau));
        block
            .view_mut((d, d), (d, d))
            .copy_from(&(self.kappa.transpose() * tau));
        let e = expm(&block);
        let f11 = e.view((0, 0), (d, d)).into_owned();
        let f12 = e.view((0, d), (d, d)).into_owned();
        symmetrize(&(f12 * f11.transpose()))
    }

    /// Transition covariance by adaptive quadrature of the integrand; an
    /// independent route used to cross-check [`OuParams::cov`].
    pub fn cov_quadrature(&self, tau: f64) -> Result<Mat> {
        let d = self.dim();
        let r = integrate_vec(
            |u| {
                let m = self.cov_rate(u);
                Ok(Vector::from_iterator(d * d, m.iter().copied()))
            },
            0.0,
            tau,
            1e-12,
            1e-13,
        )?;
        Ok(symmetrize(&Mat::from_iterator(
            d,
            d,
            r.value.iter().copied(),
        )))
    }

    /// `d/dtau Sigma(tau) = e^{-tau kappa} Sigma e^{-tau kappa'}`.
    pub fn cov_rate(&self, tau: f64) -> Mat {
        let e = self.decay(tau);
        symmetrize(&(&e * &self.cov * e.transpose()))
    }

    /// `P(tau) = Sigma(tau)^{-1}` for `tau > 0`.
    pub fn precision(&self, tau: f64) -> Result<Mat> {
        if tau <= 0.0 {
            return Err(PceError::SingularCovariance(format!(
                "precision requested at horizon {tau}"
            )));
        }
        let s = self.cov(tau);
        let cond = linalg::condition_number(&s);
        if cond > 1e14 {
            return Err(PceError::SingularCovariance(format!(
                "transition covariance at horizon {tau} has condition number {cond:.3e}"
            )));
        }
        linalg::spd_inverse(&s, "transition covariance")
            .map_err(|_| PceError::SingularCovariance(format!("horizon {tau}")))
    }
}

pub fn ou_mean(params: &OuParams, x: &Vector, tau: f64) -> Vector {
    params.mean(x, tau)
}

pub fn ou_cov(params: &OuParams, tau: f64) -> Mat {
    params.cov(tau)
}

/// A Gaussian law `N(mean, cov)` reweighted by `exp(-y'My/2 + y'V)`.
#[derive(Debug, Clone)]
pub struct Tilt {
    /// `log E[exp(-Y'MY/2 + Y'V)]`.
    pub log_mgf: f64,
    /// Mean of the reweighted law, `(P + M)^{-1}(P mean + V)`.
    pub mean: Vector,
    /// Covariance of the reweighted law, `(P + M)^{-1}`.
    pub cov: Mat,
}

/// Exponential-quadratic expectation under `N(mean, cov)`.
///
/// Every expression is written without `P = cov^{-1}`, so a degenerate
/// covariance (zero horizon) is handled by the same code. Integrability is
/// tested on `I + L'ML` with `cov = LL'`, which is congruent to `P + M`.
pub fn gaussian_tilt(mean: &Vector, cov: &Mat, m: &Mat, v: &Vector) -> Result<Tilt> {
    let d = mean.len();
    linalg::require_square(cov, d, "covariance")?;
    linalg::require_square(m, d, "quadratic coefficient")?;
    linalg::require_len(v, d, "linear coefficient")?;
    let m = symmetrize(m);
    let l = psd_factor(cov);
    let w = symmetrize(&(Mat::identity(d, d) + l.transpose() * &m * &l));
    let ev = linalg::sym_eigenvalues(&w);
    let lo = ev[0];
    let hi = ev[d - 1];
    if lo <= SPD_TOL * hi.max(1.0) {
        return Err(PceError::DivergentIntegral(format!(
            "P + M is not positive definite (congruent eigenvalues {ev:?})"
        )));
    }
    let logdet: f64 = ev.iter().map(|e| e.ln()).sum();
    let a = Mat::identity(d, d) + cov * &m;
    let lu = a.lu();
    let tilted_mean = lu
        .solve(&(mean + cov * v))
        .ok_or_else(|| PceError::DivergentIntegral("I + Sigma M is singular".into()))?;
    let tilted_cov = symmetrize(
        &lu.solve(cov)
            .ok_or_else(|| PceError::DivergentIntegral("I + Sigma M is singular".into()))?,
    );
    let u = lu
        .solve(mean)
        .ok_or_else(|| PceError::DivergentIntegral("I + Sigma M is singular".into()))?;
    let log_mgf =
        -0.5 * logdet - 0.5 * u.dot(&(&m * mean)) + u.dot(v) + 0.5 * v.dot(&(&tilted_cov * v));
    Ok(Tilt {
        log_mgf,
        mean: tilted_mean,
        cov: tilted_cov,
    })
}

/// Tilt of the transition law of `X_b` given `X_t = x`.
pub fn transition_tilt(
    params: &OuParams,
    t: f64,
    x: &Vector,
    b: f64,
    m: &Mat,
    v: &Vector,
) -> Result<Tilt> {
    if b < t {
        return Err(PceError::InvalidSpec(format!(
            "horizon {b} precedes time {t}"
        )));
    }
    let tau = b - t;
    gaussian_tilt(&params.mean(x, tau), &params.cov(tau), m, v)
}

/// `Lambda(t, x; b, M, V) = log E[exp(-X_b'MX_b/2 + X_b'V) | X_t = x]`.
pub fn log_mgf_quadratic(
    params: &OuParams,
    t: f64,
    x: &Vector,
    b: f64,
    m: &Mat,
    v: &Vector,
) -> Result<f64> {
    Ok(transition_tilt(params, t, x, b, m, v)?.log_mgf)
}

/// Gradient of `Lambda` in `V`: the tilted mean of `X_b`.
pub fn lambda_grad_v(
    params: &OuParams,
    t: f64,
    x: &Vector,
    b: f64,
    m: &Mat,
    v: &Vector,
) -> Result<Vector> {
    Ok(transition_tilt(params, t, x, b, m, v)?.mean)
}

/// Hessian of `Lambda` in `V`: the tilted covariance of `X_b`.
pub fn lambda_hess_v(
    params: &OuParams,
    t: f64,
    x: &Vector,
    b: f64,
    m: &Mat,
    v: &Vector,
) -> Result<Mat> {
    Ok(transition_tilt(params, t, x, b, m, v)?.cov)
}

/// Gradient of `Lambda` in the starting point `x`:
/// `e^{-tau kappa'} (I + M Sigma(tau))^{-1} (V - M mu(x, tau))`.
pub fn lambda_grad_x(
    params: &OuParams,
    t: f64,
    x: &Vector,
    b: f64,
    m: &Mat,
    v: &Vector,
) -> Result<Vector> {
    let tau = b - t;
    let d = params.dim();
    // Integrability check shared with the value.
    transition_tilt(params, t, x, b, m, v)?;
    let mu = params.mean(x, tau);
    let s = params.cov(tau);
    let a = Mat::identity(d, d) + m * &s;
    let inner = linalg::solve(&a, &(v - m * &mu), "I + M Sigma")?;
    Ok(params.decay(tau).transpose() * inner)
}

/// Conjugate update of a Gaussian prior by independent Gaussian signals
/// `h_m ~ N(y, E_m^{-1})`. Returns the posterior mean and precision.
pub fn gaussian_posterior(
    prior_mean: &Vector,
    prior_precision: &Mat,
    signal_precisions: &[Mat],
    signal_values: &[Vector],
) -> Result<(Vector, Mat)> {
    let d = prior_mean.len();
    linalg::require_square(prior_precision, d, "prior precision")?;
    if signal_precisions.len() != signal_values.len() {
        return Err(PceError::DimensionMismatch(format!(
            "{} signal precisions but {} signal values",
            signal_precisions.len(),
            signal_values.len()
        )));
    }
    let mut prec = prior_precision.clone();
    let mut lin = prior_precision * prior_mean;
    for (e, h) in signal_precisions.iter().zip(signal_values) {
        linalg::require_square(e, d, "signal precision")?;
        linalg::require_len(h, d, "signal value")?;
        prec += e;
        lin += e * h;
    }
    let prec = symmetrize(&prec);
    let mean = linalg::solve(&prec, &lin, "posterior precision")?;
    Ok((mean, prec))
}
