//! Many-insider limit: dyadic markets, the effective precision and signal
//! processes, their limits, information drifts and the behaviour at `t = 1`.
//!
//! Insider `n` of the level-`N` market enters at `t_n = tau((n-1)/2^N)`.
//! Its private noise uses the `n`-th unit increment of a shared Brownian
//! motion `B^Y`, and its noise-trader demand integrates `sqrt(tau')` against a
//! shared `B^Z` over `[r_n, r_{n+1})`. Sharing these drivers across levels
//! (common random numbers) is what makes the pathwise limits observable.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PceError, Result};
use crate::gaussian::{log_mgf_quadratic, OuParams};
use crate::linalg::{self, psd_factor, symmetrize};
use crate::market::{AgentSpec, InsiderSignal, MarketScenario};
use crate::quadrature::integrate;
use crate::rng;
use crate::{Mat, Vector};

/// Strictly increasing entry-time map `tau: [0,1] -> [0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeChange {
    Identity,
    /// `tau(u) = 2u - u^2`: insiders crowd in early.
    Concave,
}

impl TimeChange {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            TimeChange::Identity => u,
            TimeChange::Concave => u * (2.0 - u),
        }
    }

    pub fn rate(&self, u: f64) -> f64 {
        match self {
            TimeChange::Identity => 1.0,
            TimeChange::Concave => 2.0 * (1.0 - u),
        }
    }

    pub fn inverse(&self, t: f64) -> f64 {
        match self {
            TimeChange::Identity => t,
            TimeChange::Concave => 1.0 - (1.0 - t).max(0.0).sqrt(),
        }
    }
}

/// Positive function of entry time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    Const(f64),
    /// `scale * (1 - t)^(-exponent)`.
    Power {
        scale: f64,
        exponent: f64,
    },
}

impl Profile {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Profile::Const(c) => c,
            Profile::Power { scale, exponent } => scale * (1.0 - t).powf(-exponent),
        }
    }
}

/// A family of markets indexed by the refinement level `N`.
#[derive(Debug, Clone)]
pub struct LimitSpec {
    pub id: String,
    pub tau: TimeChange,
    pub gamma: Profile,
    pub p: Profile,
    pub omega: Profile,
    /// Uninformed agent.
    pub gamma0: f64,
    pub omega0: f64,
    pub c_i: Mat,
    pub d_z: Mat,
    pub ou: OuParams,
    pub x0: Vector,
    pub pi: Vector,
    pub n_range: Vec<u32>,
}

impl LimitSpec {
    /// Scalar market with `lambda = 1`, uniform entry, unit OU factor.
    pub fn reference() -> Self {
        let one = Mat::from_element(1, 1, 1.0);
        Self {
            id: "reference".into(),
            tau: TimeChange::Identity,
            gamma: Profile::Const(0.4),
            p: Profile::Const(1.0),
            omega: Profile::Const(0.4),
            gamma0: 1.0,
            omega0: 0.1,
            c_i: one.clone(),
            d_z: one,
            ou: OuParams::scalar(1.0, 0.0, 1.0).expect("valid parameters"),
            x0: Vector::from_element(1, 0.0),
            pi: Vector::from_element(1, 1.0),
            n_range: vec![4, 6, 8, 10, 12],
        }
    }

    /// The reference market with `lambda(t) = (1-t)^(-exponent)`, carried by
    /// the signal precision.
    pub fn power_law(exponent: f64) -> Self {
        Self {
            id: format!("power_{exponent}"),
            p: Profile::Power {
                scale: 1.0,
                exponent,
            },
            ..Self::reference()
        }
    }

    pub fn dim(&self) -> usize {
        self.ou.dim()
    }

    /// Risk-tolerance weighted precision `p omega / gamma`.
    pub fn lambda(&self, t: f64) -> f64 {
        self.p.eval(t) * self.omega.eval(t) / self.gamma.eval(t)
    }

    /// Integrand `lambda(tau(u))^2 / tau'(u)` of the precision integral.
    pub fn precision_rate(&self, u: f64) -> f64 {
        let l = self.lambda(self.tau.eval(u));
        l * l / self.tau.rate(u)
    }

    /// `int_0^v lambda(tau(u))^2 / tau'(u) du` for `v < 1`.
    pub fn precision_integral(&self, v: f64) -> Result<f64> {
        self.precision_integral_between(0.0, v)
    }

    fn precision_integral_between(&self, a: f64, b: f64) -> Result<f64> {
        integrate(|u| self.precision_rate(u), a, b, 1e-13, 1e-11)
    }

    /// `int_0^1 omega(tau(u)) du`.
    pub fn omega_mass(&self) -> Result<f64> {
        integrate(
            |u| self.omega.eval(self.tau.eval(u)),
            0.0,
            1.0,
            1e-12,
            1e-10,
        )
    }

    /// Limiting weight of the first insider, `1 - omega_0 - int omega(tau)`.
    pub fn first_weight_limit(&self) -> Result<f64> {
        Ok(1.0 - self.omega0 - self.omega_mass()?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let bad = |m: String| Err(PceError::InvalidSpec(m));
        if !(self.gamma0 > 0.0) {
            return bad(format!(
                "uninformed risk aversion {} is not positive",
                self.gamma0
            ));
        }
        if !(self.omega0 > 0.0 && self.omega0 < 1.0) {
            return bad(format!(
                "uninformed weight {} is outside (0, 1)",
                self.omega0
            ));
        }
        linalg::require_square(&self.c_i, d, "C_I")?;
        linalg::require_square(&self.d_z, d, "D_Z")?;
        linalg::require_len(&self.x0, d, "x0")?;
        linalg::require_len(&self.pi, d, "supply")?;
        if !linalg::is_spd(&self.c_i) || !linalg::is_spd(&self.d_z) {
            return bad("C_I and D_Z must be positive definite".into());
        }
        const GRID: usize = 10_000;
        for i in 0..GRID {
            let u = i as f64 / GRID as f64;
            let t = self.tau.eval(u);
            if !(self.tau.rate(u) > 0.0) {
                return bad(format!("tau' vanishes at u = {u}"));
            }
            for (name, f) in [
                ("gamma", &self.gamma),
                ("p", &self.p),
                ("omega", &self.omega),
            ] {
                let v = f.eval(t);
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name}({t}) = {v} is not positive"));
                }
            }
        }
        let mass = self.omega_mass()?;
        if !(mass < 1.0 - self.omega0) {
            return bad(format!(
                "insider weight mass {mass:.6} is not below 1 - omega_0 = {}",
                1.0 - self.omega0
            ));
        }
        if self.n_range.is_empty() {
            return bad("empty list of refinement levels".into());
        }
        Ok(())
    }
}

/// Largest supported refinement level.
pub const MAX_LEVEL: u32 = 16;

/// Dyadic entry times `tau((n-1)/2^N)`, `n = 1..=2^N`, followed by 1.
pub fn dyadic_times(tau: TimeChange, level: u32) -> Vec<f64> {
    let m = 1usize << level;
    (0..=m).map(|k| tau.eval(k as f64 / m as f64)).collect()
}

/// The level-`N` market: `2^N` insiders at the dyadic entry times.
pub fn build_dyadic_scenario(spec: &LimitSpec, level: u32) -> Result<MarketScenario> {
    spec.validate()?;
    if level > MAX_LEVEL {
        return Err(PceError::InvalidSpec(format!(
            "level {level} exceeds the supported maximum {MAX_LEVEL}"
        )));
    }
    let m = 1usize << level;
    let scale = 1.0 / m as f64;
    let times = dyadic_times(spec.tau, level);
    let tail: f64 = times[1..m].iter().map(|&t| spec.omega.eval(t)).sum::<f64>() * scale;
    let first = 1.0 - spec.omega0 - tail;
    if !(first > 0.0) {
        return Err(PceError::InvalidSpec(format!(
            "first insider weight {first:.6} is not positive at level {level}"
        )));
    }
    let mut agents = Vec::with_capacity(m + 1);
    agents.push(AgentSpec {
        id: 0,
        gamma: spec.gamma0,
        omega: spec.omega0,
        signal: None,
    });
    for n in 1..=m {
        let t = times[n - 1];
        let omega = if n == 1 {
            first
        } else {
            scale * spec.omega.eval(t)
        };
        agents.push(AgentSpec {
            id: n,
            gamma: spec.gamma.eval(t),
            omega,
            signal: Some(InsiderSignal {
                time: t,
                c: &spec.c_i * spec.p.eval(t),
                d: &spec.d_z / (times[n] - t),
            }),
        });
    }
    let s = MarketScenario {
        ou: spec.ou.clone(),
        x0: spec.x0.clone(),
        pi: spec.pi.clone(),
        agents,
    };
    s.validated().map_err(|v| {
        PceError::InvalidSpec(
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        )
    })
}

/// Time grid `T_k = tau(k / 2^M)` shared by the factor path and `B^Z`.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    level: u32,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(tau: TimeChange, level: u32) -> Self {
        Self {
            level,
            times: dyadic_times(tau, level),
        }
    }
    pub fn level(&self) -> u32 {
        self.level
    }
    pub fn cells(&self) -> usize {
        self.times.len() - 1
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    /// Grid index nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            0
        } else if k >= self.times.len() {
            self.times.len() - 1
        } else if t - self.times[k - 1] <= self.times[k] - t {
            k - 1
        } else {
            k
        }
    }
    /// Largest grid index with `T_k <= t`.
    pub fn floor(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }
}

/// One draw of the Brownian drivers.
#[derive(Debug, Clone)]
pub struct LimitNoise {
    /// Factor on the grid.
    pub x: Vec<Vector>,
    /// Increments of the factor's Brownian motion `B` on the grid.
    pub db: Vec<Vector>,
    /// Unit increments `B^Y_n - B^Y_{n-1}`.
    pub by: Vec<Vector>,
    /// `int sqrt(tau') dB^Z` over each grid cell in `u`.
    pub bz: Vec<Vector>,
}

impl LimitNoise {
    pub fn x1(&self) -> &Vector {
        self.x.last().expect("grid has at least one point")
    }
}

/// Exact joint sampler of the factor, its Brownian motion and the signal
/// drivers on a [`TimeGrid`].
#[derive(Debug, Clone)]
pub struct LimitSampler {
    ou: OuParams,
    x0: Vector,
    grid: TimeGrid,
    steps: Vec<(Mat, Mat)>,
    private: usize,
}

impl LimitSampler {
    /// `max_level` bounds the number of `B^Y` increments drawn.
    pub fn new(spec: &LimitSpec, grid: TimeGrid, max_level: u32) -> Result<Self> {
        if max_level > grid.level() {
            return Err(PceError::InvalidSpec(format!(
                "level {max_level} is finer than the grid level {}",
                grid.level()
            )));
        }
        let steps = grid
            .times()
            .windows(2)
            .map(|w| joint_step(&spec.ou, w[1] - w[0]))
            .collect();
        Ok(Self {
            ou: spec.ou.clone(),
            x0: spec.x0.clone(),
            grid,
            steps,
            private: 1usize << max_level,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn sample(&self, seed: u64, path: u64) -> LimitNoise {
        let d = self.ou.dim();
        let theta = self.ou.theta();
        let mut f = rng::stream(seed, path, rng::LIMIT_FACTOR);
        let mut x = Vec::with_capacity(self.steps.len() + 1);
        let mut db = Vec::with_capacity(self.steps.len());
        x.push(self.x0.clone());
        for (decay, chol) in &self.steps {
            let xi = normal_vector(&mut f, 2 * d);
            let w = chol * xi;
            let prev = x.last().expect("nonempty");
            x.push(theta + decay * (prev - theta) + w.rows(0, d));
            db.push(w.rows(d, d).into_owned());
        }
        let mut py = rng::stream(seed, path, rng::LIMIT_PRIVATE);
        let by = (0..self.private)
            .map(|_| normal_vector(&mut py, d))
            .collect();
        let mut pz = rng::stream(seed, path, rng::LIMIT_NOISE);
        let bz = self
            .grid
            .times()
            .windows(2)
            .map(|w| normal_vector(&mut pz, d) * (w[1] - w[0]).sqrt())
            .collect();
        LimitNoise { x, db, by, bz }
    }
}

fn normal_vector<R: Rng>(rng: &mut R, d: usize) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Decay and joint covariance factor of `(X_{t+h} - mean, B_{t+h} - B_t)`.
fn joint_step(ou: &OuParams, h: f64) -> (Mat, Mat) {
    let d = ou.dim();
    let n = 2 * d;
    let mut k = Mat::zeros(n, n);
    k.view_mut((0, 0), (d, d)).copy_from(ou.kappa());
    let mut s = Mat::zeros(n, d);
    s.view_mut((0, 0), (d, d)).copy_from(ou.sigma());
    s.view_mut((d, 0), (d, d)).fill_with_identity();
    let q = &s * s.transpose();
    let mut block = Mat::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-&k * h));
    block.view_mut((0, n), (n, n)).copy_from(&(&q * h));
    block
        .view_mut((n, n), (n, n))
        .copy_from(&(k.transpose() * h));
    let e = linalg::expm(&block);
    let f11 = e.view((0, 0), (n, n)).into_owned();
    let f12 = e.view((0, n), (n, n)).into_owned();
    let cov = symmetrize(&(f12 * f11.transpose()));
    (ou.decay(h), psd_factor(&cov))
}

/// Step functions `F^N_t`, `J^N_t` of a level-`N` market.
#[derive(Debug, Clone)]
pub struct EffectiveProcesses {
    level: u32,
    /// `t_1..t_{2^N}` followed by 1.
    times: Vec<f64>,
    e: Vec<Mat>,
    f: Vec<Mat>,
    y_load: Vec<Mat>,
    z_load: Vec<Mat>,
}

/// Effective processes of the level-`N` market built from `spec`.
pub fn effective_processes(spec: &LimitSpec, level: u32) -> Result<EffectiveProcesses> {
    EffectiveProcesses::from_scenario(&build_dyadic_scenario(spec, level)?, level)
}

impl EffectiveProcesses {
    pub fn from_scenario(s: &MarketScenario, level: u32) -> Result<Self> {
        let m = 1usize << level;
        if s.n_insiders() != m {
            return Err(PceError::DimensionMismatch(format!(
                "level {level} needs {m} insiders, scenario has {}",
                s.n_insiders()
            )));
        }
        let sys = s.signal_system()?;
        let mut times = s.times();
        times.push(1.0);
        let mut f = Vec::with_capacity(m);
        let mut acc = Mat::zeros(s.dim(), s.dim());
        let mut y_load = Vec::with_capacity(m);
        let mut z_load = Vec::with_capacity(m);
        for n in 1..=m {
            acc += sys.e(n);
            f.push(acc.clone());
            let sig = s.insider_signal(n);
            y_load.push(linalg::spd_power(&sig.c, -0.5, "signal precision C")?);
            let ci = linalg::spd_inverse(&sig.c, "signal precision C")?;
            let dh = linalg::spd_power(&sig.d, -0.5, "noise precision D")?;
            z_load.push(ci * dh / s.insider(n).alpha());
        }
        Ok(Self {
            level,
            times,
            e: (1..=m).map(|n| sys.e(n).clone()).collect(),
            f,
            y_load,
            z_load,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }
    pub fn n_stages(&self) -> usize {
        self.f.len()
    }
    /// Entry times followed by 1.
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    /// Stage (1-based) active at `t`: the last `n` with `t_n <= t`.
    pub fn stage_at(&self, t: f64) -> usize {
        self.times[..self.n_stages()]
            .partition_point(|&s| s <= t)
            .max(1)
    }
    /// `E^N_n`, 1-based.
    pub fn signal_precision(&self, n: usize) -> &Mat {
        &self.e[n - 1]
    }
    /// `F^N_n = sum_{m <= n} E^N_m`, 1-based.
    pub fn precision(&self, n: usize) -> &Mat {
        &self.f[n - 1]
    }
    pub fn precision_at(&self, t: f64) -> &Mat {
        self.precision(self.stage_at(t))
    }

    /// Public signals `H_n = X_1 + Y_n + alpha_n^{-1} C_n^{-1} Z_n`.
    pub fn signals(&self, grid: &TimeGrid, noise: &LimitNoise) -> Result<Vec<Vector>> {
        if grid.level() < self.level {
            return Err(PceError::InvalidSpec(format!(
                "grid level {} is coarser than market level {}",
                grid.level(),
                self.level
            )));
        }
        if noise.by.len() < self.n_stages() {
            return Err(PceError::DimensionMismatch(format!(
                "{} private increments for {} insiders",
                noise.by.len(),
                self.n_stages()
            )));
        }
        let per = 1usize << (grid.level() - self.level);
        let x1 = noise.x1();
        Ok((0..self.n_stages())
            .map(|i| {
                let cells = &noise.bz[i * per..(i + 1) * per];
                let mut z = cells.iter().fold(Vector::zeros(x1.len()), |acc, c| acc + c);
                z /= (self.times[i + 1] - self.times[i]).sqrt();
                x1 + &self.y_load[i] * &noise.by[i] + &self.z_load[i] * z
            })
            .collect())
    }

    /// `J_n = F_n^{-1} sum_{m <= n} E_m h_m` for every stage.
    pub fn effective_signals(&self, h: &[Vector]) -> Result<Vec<Vector>> {
        if h.len() != self.n_stages() {
            return Err(PceError::DimensionMismatch(format!(
                "{} signals for {} stages",
                h.len(),
                self.n_stages()
            )));
        }
        let mut acc = Vector::zeros(h[0].len());
        let mut out = Vec::with_capacity(h.len());
        for (n, hn) in h.iter().enumerate() {
            acc += &self.e[n] * hn;
            out.push(linalg::solve(&self.f[n], &acc, "effective precision")?);
        }
        Ok(out)
    }
}

/// `sigma' e^{-(1-t) kappa'} (I + F Sigma(1-t))^{-1} F`, the loading of the
/// information drift on `j - mu(x, 1-t)`.
pub fn drift_loading(ou: &OuParams, t: f64, f: &Mat) -> Result<Mat> {
    if !(t <= 1.0) {
        return Err(PceError::InvalidSpec(format!(
            "drift requested at t = {t} > 1"
        )));
    }
    let tau = 1.0 - t;
    let d = ou.dim();
    let a = Mat::identity(d, d) + f * ou.cov(tau);
    let inner = linalg::solve_mat(&a, f, "I + F Sigma")?;
    Ok(ou.sigma().transpose() * ou.decay(tau).transpose() * inner)
}

/// `theta_t = sigma' e^{-(1-t)kappa'} P (P + F)^{-1} F (j - mu(x, 1-t))`.
pub fn information_drift(ou: &OuParams, t: f64, x: &Vector, f: &Mat, j: &Vector) -> Result<Vector> {
    Ok(drift_loading(ou, t, f)? * (j - ou.mean(x, 1.0 - t)))
}

/// `E[l_n(t, X_t, H)]` for a public precision `F`:
/// `-log|I + Sigma(1-t)F|/2 + mu'F mu/2 + Tr(F Sigma(1))/2`, `mu = mu(X_0, 1)`.
pub fn expected_ell(ou: &OuParams, x0: &Vector, t: f64, f: &Mat) -> f64 {
    let d = ou.dim();
    let mu = ou.mean(x0, 1.0);
    let det = (Mat::identity(d, d) + ou.cov(1.0 - t) * f).determinant();
    -0.5 * det.ln() + 0.5 * mu.dot(&(f * &mu)) + 0.5 * (f * ou.cov(1.0)).trace()
}

/// `E int_0^cap |theta^N_u|^2 du` as a telescoping sum of [`expected_ell`].
///
/// Under the enlarged filtration `l` gains `|theta|^2/2` per unit time, so the
/// energy is twice the growth of `E[l]`.
pub fn drift_energy(ou: &OuParams, eff: &EffectiveProcesses, cap: f64) -> f64 {
    let d = ou.dim();
    let logdet = |tau: f64, f: &Mat| (Mat::identity(d, d) + ou.cov(tau) * f).determinant().ln();
    let t = eff.times();
    (0..eff.n_stages())
        .filter(|&i| t[i] < cap)
        .map(|i| {
            let end = t[i + 1].min(cap);
            logdet(1.0 - t[i], &eff.f[i]) - logdet(1.0 - end, &eff.f[i])
        })
        .sum()
}

/// Closed-form limits `F_t`, `J_t`, `theta_t`.
#[derive(Debug, Clone)]
pub struct LimitProcesses {
    spec: LimitSpec,
    base: Mat,
    cross: Mat,
    c_half: Mat,
    d_half: Mat,
}

pub fn limit_processes(spec: &LimitSpec) -> Result<LimitProcesses> {
    spec.validate()?;
    let p0 = spec.p.eval(0.0);
    Ok(LimitProcesses {
        base: &spec.c_i * p0,
        cross: symmetrize(&(&spec.c_i * &spec.d_z * &spec.c_i)),
        c_half: linalg::spd_power(&spec.c_i, 0.5, "C_I")? * p0.sqrt(),
        d_half: &spec.c_i * linalg::spd_power(&spec.d_z, 0.5, "D_Z")?,
        spec: spec.clone(),
    })
}

impl LimitProcesses {
    pub fn spec(&self) -> &LimitSpec {
        &self.spec
    }

    /// `F_t = p(0) C_I + (int_0^{tau^{-1}(t)} lambda(tau)^2/tau') C_I D_Z C_I`, `t < 1`.
    pub fn precision(&self, t: f64) -> Result<Mat> {
        if !(0.0..1.0).contains(&t) {
            return Err(PceError::InvalidSpec(format!(
                "limit precision needs t in [0, 1), got {t}"
            )));
        }
        let a = self.spec.precision_integral(self.spec.tau.inverse(t))?;
        Ok(self.precision_from_integral(a))
    }

    fn precision_from_integral(&self, a: f64) -> Mat {
        &self.base + &self.cross * a
    }

    /// `F` at the dyadic points `tau(k / 2^level)`, `k = 0..2^level` (the last
    /// point, `t = 1`, excluded).
    pub fn precision_on_dyadics(&self, level: u32) -> Result<Vec<Mat>> {
        let m = 1usize << level;
        let mut a = 0.0;
        let mut out = Vec::with_capacity(m);
        out.push(self.precision_from_integral(0.0));
        for k in 1..m {
            a += self
                .spec
                .precision_integral_between((k - 1) as f64 / m as f64, k as f64 / m as f64)?;
            out.push(self.precision_from_integral(a));
        }
        Ok(out)
    }

    /// `F_1`, finite only when the precision integral converges.
    pub fn terminal_precision(&self) -> Result<Mat> {
        match tail_protocol(|a, b| self.spec.precision_integral_between(a, b))?.verdict {
            Divergence::Finite(a) => Ok(self.precision_from_integral(a)),
            Divergence::Infinite => Err(PceError::DivergentIntegral(
                "int_0^1 lambda(tau)^2 / tau' diverges, so J_1 = X_1".into(),
            )),
            Divergence::Inconclusive => {
                Err(PceError::Inconclusive("precision integral at t = 1".into()))
            }
        }
    }

    /// Weights `lambda(tau(u)) / sqrt(tau'(u))` per grid cell, for use with
    /// the `sqrt(tau')`-scaled increments of [`LimitNoise::bz`].
    pub fn cell_weights(&self, grid: &TimeGrid) -> Vec<f64> {
        let m = grid.cells() as f64;
        (0..grid.cells())
            .map(|c| {
                let u = (c as f64 + 0.5) / m;
                self.spec.lambda(self.spec.tau.eval(u)) / self.spec.tau.rate(u)
            })
            .collect()
    }

    /// `J_t` from the drivers, the stochastic integral summed over the grid
    /// cells below `tau^{-1}(t)`.
    pub fn signal(&self, t: f64, grid: &TimeGrid, noise: &LimitNoise) -> Result<Vector> {
        let f = self.precision(t)?;
        let w = self.cell_weights(grid);
        let upto = cells_below(grid, self.spec.tau.inverse(t));
        Ok(self.signal_with(&f, &w, upto, noise))
    }

    fn signal_with(&self, f: &Mat, w: &[f64], upto: usize, noise: &LimitNoise) -> Vector {
        let d = f.nrows();
        let stoch = noise.bz[..upto]
            .iter()
            .zip(w)
            .fold(Vector::zeros(d), |acc, (b, &wc)| acc + b * wc);
        let rhs = &self.c_half * &noise.by[0] + &self.d_half * stoch;
        noise.x1()
            + f.clone()
                .lu()
                .solve(&rhs)
                .expect("F_t is positive definite")
    }

    /// `theta_t` at factor value `x`.
    pub fn drift(&self, t: f64, x: &Vector, j: &Vector) -> Result<Vector> {
        information_drift(&self.spec.ou, t, x, &self.precision(t)?, j)
    }

    /// `E int_0^cap |theta_u|^2 du = int Tr(A_u (Sigma(1-u) + F_u^{-1}) A_u')`.
    pub fn drift_energy(&self, cap: f64) -> Result<f64> {
        let ou = &self.spec.ou;
        let rate = |u: f64| -> f64 {
            let f = match self.precision(u) {
                Ok(f) => f,
                Err(_) => return f64::NAN,
            };
            let a = match drift_loading(ou, u, &f) {
                Ok(a) => a,
                Err(_) => return f64::NAN,
            };
            let fi = f
                .clone()
                .try_inverse()
                .unwrap_or_else(|| f.clone() * f64::NAN);
            (&a * (ou.cov(1.0 - u) + fi) * a.transpose()).trace()
        };
        integrate(rate, 0.0, cap, 1e-10, 1e-8)
    }
}

/// Number of cells whose midpoint lies below `u`.
fn cells_below(grid: &TimeGrid, u: f64) -> usize {
    let m = grid.cells() as f64;
    ((u * m + 0.5).floor() as usize).min(grid.cells())
}

/// Outcome of the endpoint-singularity protocol at `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    /// Converges; carries the extrapolated value.
    Finite(f64),
    Infinite,
    Inconclusive,
}

/// Partial integrals over `[0, 1 - eps]` for `eps = 1e-2, ..., 1e-8`.
#[derive(Debug, Clone)]
pub struct TailReport {
    pub eps: Vec<f64>,
    pub partial: Vec<f64>,
    pub verdict: Divergence,
}

impl TailReport {
    /// Increments of the partial integrals between successive decades.
    pub fn increments(&self) -> Vec<f64> {
        self.partial.windows(2).map(|w| w[1] - w[0]).collect()
    }
    pub fn ratios(&self) -> Vec<f64> {
        self.increments().windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Ratio of successive decade increments at or above which growth counts as
/// divergence.
pub const DIVERGENT_RATIO: f64 = 0.9;
/// Ratio at or below which the tail counts as geometrically convergent.
pub const CONVERGENT_RATIO: f64 = 0.7;

/// Classifies `int_0^1 f` from its partial integrals: `piece(a, b)` returns
/// `int_a^b f`. Divergence needs the last three increment ratios at or above
/// [`DIVERGENT_RATIO`]; convergence needs them at or below
/// [`CONVERGENT_RATIO`] and adds the geometric tail of the last increment.
pub fn tail_protocol<F>(piece: F) -> Result<TailReport>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    let eps: Vec<f64> = (2..=8).map(|k| 10f64.powi(-k)).collect();
    let mut partial = Vec::with_capacity(eps.len());
    let mut acc = piece(0.0, 1.0 - eps[0])?;
    partial.push(acc);
    for w in eps.windows(2) {
        acc += piece(1.0 - w[0], 1.0 - w[1])?;
        partial.push(acc);
    }
    let mut report = TailReport {
        eps,
        partial,
        verdict: Divergence::Inconclusive,
    };
    let inc = report.increments();
    let scale = report.partial.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let last = &inc[inc.len() - 3..];
    if last.iter().all(|v| v.abs() <= 1e-14 * scale) {
        report.verdict = Divergence::Finite(*report.partial.last().expect("nonempty"));
        return Ok(report);
    }
    let ratios = report.ratios();
    let tail = &ratios[ratios.len() - 3..];
    let positive = last.iter().all(|&v| v > 0.0);
    report.verdict = if positive && tail.iter().all(|&r| r >= DIVERGENT_RATIO) {
        Divergence::Infinite
    } else if positive && tail.iter().all(|&r| r <= CONVERGENT_RATIO) {
        let r = tail[tail.len() - 1];
        let d = inc[inc.len() - 1];
        Divergence::Finite(report.partial.last().expect("nonempty") + d * r / (1.0 - r))
    } else {
        Divergence::Inconclusive
    };
    Ok(report)
}

/// Tail report of `Q = int_0^1 tau'(t) A(t) / (1 + (1 - tau(t)) A(t)) dt`,
/// `A(t) = int_0^t lambda(tau(u))^2 / tau'(u) du`.
pub fn q_report(spec: &LimitSpec) -> Result<TailReport> {
    spec.validate()?;
    tail_protocol(|a, b| {
        let base = spec.precision_integral(a)?;
        let failed = std::cell::Cell::new(None);
        let q = integrate(
            |t| {
                let inner = match spec.precision_integral_between(a, t) {
                    Ok(v) => base + v,
                    Err(e) => {
                        failed.set(Some(e));
                        return 0.0;
                    }
                };
                spec.tau.rate(t) * inner / (1.0 + (1.0 - spec.tau.eval(t)) * inner)
            },
            a,
            b,
            1e-12,
            1e-9,
        )?;
        match failed.into_inner() {
            Some(e) => Err(e),
            None => Ok(q),
        }
    })
}

/// `Q`, or `+inf` when the protocol detects divergence.
pub fn q_integral(spec: &LimitSpec) -> Result<f64> {
    let r = q_report(spec)?;
    match r.verdict {
        Divergence::Finite(q) => Ok(q),
        Divergence::Infinite => Ok(f64::INFINITY),
        Divergence::Inconclusive => Err(PceError::Inconclusive(format!(
            "Q partial integrals {:?}",
            r.partial
        ))),
    }
}

/// Joint classification of the terminal signal and of `Q`.
#[derive(Debug, Clone)]
pub struct TerminalClass {
    /// The precision integral; divergence means `J_1 = X_1`.
    pub precision: TailReport,
    pub q: TailReport,
}

impl TerminalClass {
    /// `Some(true)` when `J_1 = X_1`, `None` when inconclusive.
    pub fn reveals_factor(&self) -> Option<bool> {
        match self.precision.verdict {
            Divergence::Infinite => Some(true),
            Divergence::Finite(_) => Some(false),
            Divergence::Inconclusive => None,
        }
    }
    pub fn q_finite(&self) -> Option<bool> {
        match self.q.verdict {
            Divergence::Finite(_) => Some(true),
            Divergence::Infinite => Some(false),
            Divergence::Inconclusive => None,
        }
    }
}

impl fmt::Display for TerminalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let j = match self.reveals_factor() {
            Some(true) => "J1 = X1",
            Some(false) => "J1 noisy",
            None => "J1 inconclusive",
        };
        let q = match self.q.verdict {
            Divergence::Finite(v) => format!("Q finite ({v:.6})"),
            Divergence::Infinite => "Q infinite".into(),
            Divergence::Inconclusive => "Q inconclusive".into(),
        };
        write!(f, "{j}, {q}")
    }
}

/// Classifies behaviour at `t = 1`; inconclusive verdicts are kept, not guessed.
pub fn classify_t1(spec: &LimitSpec) -> Result<TerminalClass> {
    spec.validate()?;
    Ok(TerminalClass {
        precision: tail_protocol(|a, b| spec.precision_integral_between(a, b))?,
        q: q_report(spec)?,
    })
}

/// Monte Carlo settings of a convergence study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub seed: u64,
    pub samples: usize,
    /// Paths used for the drift-energy integrals, a prefix of all samples.
    pub energy_samples: usize,
    pub grid_level: u32,
    pub t_probe: f64,
    pub t_cap: f64,
    pub mc_levels: Vec<u32>,
    pub threads: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            samples: 10_000,
            energy_samples: 2_000,
            grid_level: 12,
            t_probe: 0.5,
            t_cap: 0.9,
            mc_levels: vec![4, 6, 8, 10],
            threads: None,
        }
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, se: f64::NAN };
        }
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }
}

/// Monte Carlo results for one level.
#[derive(Debug, Clone)]
pub struct LevelStats {
    pub level: u32,
    /// `E|J^N_t - J_t|^2` at the probe time.
    pub j_l2: Estimate,
    /// Median of `|theta^N_t - theta_t|` at the probe time.
    pub theta_median: f64,
    pub ell_mc: Estimate,
    pub ell_closed: f64,
    pub energy_mc: Estimate,
    pub energy_closed: f64,
}

/// Outcome of [`run_study`].
#[derive(Debug, Clone)]
pub struct LimitStudy {
    pub spec_id: String,
    /// Probe and cap times after snapping to the grid.
    pub t_probe: f64,
    pub t_cap: f64,
    /// `sup_{t <= cap} |F^N_t - F_t|` per level of the spec's range.
    pub f_sup: Vec<(u32, f64)>,
    pub first_weight: Vec<(u32, f64)>,
    pub levels: Vec<LevelStats>,
    pub energy_limit: f64,
}

/// `sup_{t in [0, cap]} |F^N_t - F_t|` (entrywise max), using that `F` is
/// nondecreasing so each step's error peaks at an end point.
pub fn f_sup_error(eff: &EffectiveProcesses, lim: &LimitProcesses, cap: f64) -> Result<f64> {
    let spec = lim.spec();
    let times = eff.times();
    let mut worst = 0.0_f64;
    let mut a = 0.0;
    let mut prev_u = 0.0;
    for i in 0..eff.n_stages() {
        if times[i] > cap {
            break;
        }
        let u0 = spec.tau.inverse(times[i]);
        let u1 = spec.tau.inverse(times[i + 1].min(cap));
        a += spec.precision_integral_between(prev_u, u0)?;
        let left = lim.precision_from_integral(a);
        let right = lim.precision_from_integral(a + spec.precision_integral_between(u0, u1)?);
        prev_u = u0;
        let f = eff.precision(i + 1);
        worst = worst
            .max(linalg::max_abs(&(f - left)))
            .max(linalg::max_abs(&(f - right)));
    }
    Ok(worst)
}

/// Per-level work shared by all samples.
struct LevelPlan {
    eff: EffectiveProcesses,
    probe_stage: usize,
    probe_loading: Mat,
}

/// Trapezoid integrals of `theta^N` along one path.
#[derive(Debug, Clone)]
pub struct DriftPath {
    /// `int_0^{T_k} theta^N du` for `k = 0..=k_cap`.
    pub cumulative: Vec<Vector>,
    /// `int_0^{T_{k_cap}} |theta^N|^2 du`.
    pub energy: f64,
}

/// Drift loadings of a level on the grid up to index `k_cap`.
pub struct DriftPlan {
    ou: OuParams,
    times: Vec<f64>,
    k_cap: usize,
    stages: Vec<Vec<(usize, Mat)>>,
}

impl DriftPlan {
    pub fn new(
        ou: &OuParams,
        eff: &EffectiveProcesses,
        grid: &TimeGrid,
        k_cap: usize,
    ) -> Result<Self> {
        if grid.level() < eff.level() {
            return Err(PceError::InvalidSpec("grid coarser than market".into()));
        }
        let per = 1usize << (grid.level() - eff.level());
        let t = grid.times();
        let mut stages = Vec::new();
        for n in 0..eff.n_stages() {
            let start = n * per;
            if start >= k_cap {
                break;
            }
            let end = ((n + 1) * per).min(k_cap);
            let f = eff.precision(n + 1);
            let mut v = Vec::with_capacity(end - start + 1);
            for k in start..=end {
                v.push((k, drift_loading(ou, t[k], f)?));
            }
            stages.push(v);
        }
        Ok(Self {
            ou: ou.clone(),
            times: t.to_vec(),
            k_cap,
            stages,
        })
    }

    pub fn k_cap(&self) -> usize {
        self.k_cap
    }

    /// Drift integrals of one path given its effective signals `J^N_n`.
    pub fn integrate(&self, noise: &LimitNoise, j: &[Vector]) -> DriftPath {
        let d = self.ou.dim();
        let theta = self.ou.theta();
        let mut cumulative = vec![Vector::zeros(d); self.k_cap + 1];
        let mut energy = 0.0;
        let mut acc = Vector::zeros(d);
        for (n, stage) in self.stages.iter().enumerate() {
            let jn = &j[n];
            let mut prev: Option<(usize, Vector)> = None;
            for (k, load) in stage {
                let tau = 1.0 - self.times[*k];
                let mu = theta + self.ou.decay(tau) * (&noise.x[*k] - theta);
                let th = load * (jn - mu);
                if let Some((kp, tp)) = prev {
                    let h = self.times[*k] - self.times[kp];
                    acc += (&tp + &th) * (0.5 * h);
                    energy += 0.5 * h * (tp.norm_squared() + th.norm_squared());
                    cumulative[*k] = acc.clone();
                }
                prev = Some((*k, th));
            }
        }
        DriftPath { cumulative, energy }
    }
}

/// Runs the convergence study of the effective processes towards their limits.
pub fn run_study(spec: &LimitSpec, cfg: &StudyConfig) -> Result<LimitStudy> {
    spec.validate()?;
    let lim = limit_processes(spec)?;
    let grid = TimeGrid::new(spec.tau, cfg.grid_level);
    let k_probe = grid.nearest(cfg.t_probe);
    let k_cap = grid.floor(cfg.t_cap);
    let t_probe = grid.times()[k_probe];
    let t_cap = grid.times()[k_cap];
    if !(t_probe < 1.0 && t_cap < 1.0) {
        return Err(PceError::InvalidSpec(
            "probe and cap times must be below 1".into(),
        ));
    }

    let mut f_sup = Vec::new();
    let mut first_weight = Vec::new();
    for &n in &spec.n_range {
        let s = build_dyadic_scenario(spec, n)?;
        first_weight.push((n, s.agents[1].omega));
        let eff = EffectiveProcesses::from_scenario(&s, n)?;
        f_sup.push((n, f_sup_error(&eff, &lim, t_cap)?));
    }

    let max_level = cfg.mc_levels.iter().copied().max().unwrap_or(0);
    let sampler = LimitSampler::new(spec, grid.clone(), max_level)?;
    let ou = &spec.ou;
    let mut plans = Vec::with_capacity(cfg.mc_levels.len());
    for &n in &cfg.mc_levels {
        let eff = effective_processes(spec, n)?;
        let probe_stage = eff.stage_at(t_probe);
        let probe_loading = drift_loading(ou, t_probe, eff.precision(probe_stage))?;
        let drift = DriftPlan::new(ou, &eff, &grid, k_cap)?;
        plans.push((
            LevelPlan {
                eff,
                probe_stage,
                probe_loading,
            },
            drift,
        ));
    }
    let f_probe = lim.precision(t_probe)?;
    let lim_loading = drift_loading(ou, t_probe, &f_probe)?;
    let weights = lim.cell_weights(&grid);
    let upto = cells_below(&grid, spec.tau.inverse(t_probe));

    // Per sample, per level: (|J err|^2, |theta err|, ell, energy).
    type Row = Vec<(f64, f64, f64, Option<f64>)>;
    let work = |i: usize| -> Result<Row> {
        let noise = sampler.sample(cfg.seed, i as u64);
        let j_lim = lim.signal_with(&f_probe, &weights, upto, &noise);
        let x = &noise.x[k_probe];
        let mu = ou.mean(x, 1.0 - t_probe);
        let theta_lim = &lim_loading * (&j_lim - &mu);
        let mut out = Vec::with_capacity(plans.len());
        for (plan, drift) in &plans {
            let h = plan.eff.signals(&grid, &noise)?;
            let j = plan.eff.effective_signals(&h)?;
            let jp = &j[plan.probe_stage - 1];
            let theta = &plan.probe_loading * (jp - &mu);
            let f = plan.eff.precision(plan.probe_stage);
            let ell = log_mgf_quadratic(ou, t_probe, x, 1.0, f, &(f * jp))?;
            let energy = (i < cfg.energy_samples).then(|| drift.integrate(&noise, &j).energy);
            out.push((
                (jp - &j_lim).norm_squared(),
                (theta - &theta_lim).norm(),
                ell,
                energy,
            ));
        }
        Ok(out)
    };
    let rows: Vec<Row> = rng::pool(cfg.threads).install(|| {
        (0..cfg.samples)
            .into_par_iter()
            .map(work)
            .collect::<Result<Vec<_>>>()
    })?;

    let mut levels = Vec::with_capacity(plans.len());
    for (li, (plan, _)) in plans.iter().enumerate() {
        type Probe = (f64, f64, f64, Option<f64>);
        let col = |g: &dyn Fn(&Probe) -> Option<f64>| -> Vec<f64> {
            rows.iter().filter_map(|r| g(&r[li])).collect()
        };
        let mut th = col(&|r| Some(r.1));
        th.sort_by(f64::total_cmp);
        let median = if th.is_empty() {
            f64::NAN
        } else if th.len() % 2 == 1 {
            th[th.len() / 2]
        } else {
            0.5 * (th[th.len() / 2 - 1] + th[th.len() / 2])
        };
        let f = plan.eff.precision(plan.probe_stage);
        levels.push(LevelStats {
            level: plan.eff.level(),
            j_l2: Estimate::from_samples(&col(&|r| Some(r.0))),
            theta_median: median,
            ell_mc: Estimate::from_samples(&col(&|r| Some(r.2))),
            ell_closed: expected_ell(ou, &spec.x0, t_probe, f),
            energy_mc: Estimate::from_samples(&col(&|r| r.3)),
            energy_closed: drift_energy(ou, &plan.eff, t_cap),
        });
    }
    Ok(LimitStudy {
        spec_id: spec.id.clone(),
        t_probe,
        t_cap,
        f_sup,
        first_weight,
        levels,
        energy_limit: lim.drift_energy(t_cap)?,
    })
}

/// One line of the study report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub spec_id: String,
    #[serde(rename = "N")]
    pub n: u32,
    pub t: f64,
    pub metric: String,
    pub value: f64,
}

impl LimitStudy {
    pub fn rows(&self) -> Vec<StudyRow> {
        let row = |n: u32, t: f64, metric: &str, value: f64| StudyRow {
            spec_id: self.spec_id.clone(),
            n,
            t,
            metric: metric.into(),
            value,
        };
        let mut out = Vec::new();
        for &(n, v) in &self.f_sup {
            out.push(row(n, self.t_cap, "f_sup_error", v));
        }
        for &(n, v) in &self.first_weight {
            out.push(row(n, 0.0, "first_weight", v));
        }
        for l in &self.levels {
            let n = l.level;
            let tp = self.t_probe;
            let tc = self.t_cap;
            out.push(row(n, tp, "j_l2_error", l.j_l2.mean));
            out.push(row(n, tp, "j_l2_error_se", l.j_l2.se));
            out.push(row(n, tp, "theta_median_error", l.theta_median));
            out.push(row(n, tp, "ell_mc", l.ell_mc.mean));
            out.push(row(n, tp, "ell_mc_se", l.ell_mc.se));
            out.push(row(n, tp, "ell_closed", l.ell_closed));
            out.push(row(n, tc, "drift_energy_mc", l.energy_mc.mean));
            out.push(row(n, tc, "drift_energy_mc_se", l.energy_mc.se));
            out.push(row(n, tc, "drift_energy_closed", l.energy_closed));
        }
        out.push(row(0, self.t_cap, "drift_energy_limit", self.energy_limit));
        out
    }

    /// Levels where `|ell_mc - ell_closed|` exceeds `k` standard errors.
    pub fn ell_outliers(&self, k: f64) -> Vec<u32> {
        self.levels
            .iter()
            .filter(|l| (l.ell_mc.mean - l.ell_closed).abs() > k * l.ell_mc.se)
            .map(|l| l.level)
            .collect()
    }
}

/// Writes study rows with the header `spec_id,N,t,metric,value`.
pub fn write_study_csv<W: Write>(rows: &[StudyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["spec_id", "N", "t", "metric", "value"])
        .map_err(|e| PceError::Io(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.spec_id.clone(),
            r.n.to_string(),
            format!("{:.16e}", r.t),
            r.metric.clone(),
            format!("{:.16e}", r.value),
        ])
        .map_err(|e| PceError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_study_csv<R: Read>(input: R) -> Result<Vec<StudyRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| PceError::Io(e.to_string())))
        .collect()
}

/// True when every element is strictly below its predecessor.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn dyadic_scenario_layout() {
        let spec = LimitSpec::reference();
        let s = build_dyadic_scenario(&spec, 3).unwrap();
        let t = s.times();
        for (k, tk) in t.iter().enumerate() {
            assert!((tk - k as f64 / 8.0).abs() < 1e-15);
        }
        // First insider: 1 - 0.1 - 7/8 * 0.4.
        assert!((s.agents[1].omega - (0.9 - 0.35)).abs() < 1e-15);
        assert!((s.agents[2].omega - 0.05).abs() < 1e-15);
        // D_n = D_Z / (t_{n+1} - t_n), with t_{2^N + 1} = 1.
        assert!((s.insider_signal(8).d[(0, 0)] - 8.0).abs() < 1e-12);
        let w: f64 = s.agents.iter().map(|a| a.omega).sum();
        assert!((w - 1.0).abs() < 1e-14);

        let s0 = build_dyadic_scenario(&spec, 0).unwrap();
        assert_eq!(s0.n_insiders(), 1);
        assert!((s0.agents[1].omega - 0.9).abs() < 1e-15);
    }

    #[test]
    fn first_weight_converges_at_riemann_rate() {
        let spec = LimitSpec {
            tau: TimeChange::Concave,
            omega: Profile::Power {
                scale: 0.2,
                exponent: -0.3,
            },
            ..LimitSpec::reference()
        };
        let target = spec.first_weight_limit().unwrap();
        let errs: Vec<f64> = (4..=9)
            .map(|n| (build_dyadic_scenario(&spec, n).unwrap().agents[1].omega - target).abs())
            .collect();
        assert!(strictly_decreasing(&errs), "{errs:?}");
    }

    #[test]
    fn weight_mass_too_large_is_rejected() {
        let spec = LimitSpec {
            omega: Profile::Const(0.95),
            ..LimitSpec::reference()
        };
        assert!(matches!(spec.validate(), Err(PceError::InvalidSpec(_))));
        assert!(build_dyadic_scenario(&spec, 2).is_err());
    }

    #[test]
    fn one_insider_effective_signal_is_its_signal() {
        let spec = LimitSpec::reference();
        let eff = effective_processes(&spec, 0).unwrap();
        let grid = TimeGrid::new(spec.tau, 4);
        let noise = LimitSampler::new(&spec, grid.clone(), 0)
            .unwrap()
            .sample(1, 0);
        let h = eff.signals(&grid, &noise).unwrap();
        let j = eff.effective_signals(&h).unwrap();
        assert!((&j[0] - &h[0]).norm() < 1e-15);
        assert!((eff.precision(1) - eff.signal_precision(1)).norm() < 1e-15);
    }

    #[test]
    fn effective_signal_recursion_matches_direct_formula() {
        let spec = LimitSpec::reference();
        let eff = effective_processes(&spec, 3).unwrap();
        let grid = TimeGrid::new(spec.tau, 5);
        let noise = LimitSampler::new(&spec, grid.clone(), 3)
            .unwrap()
            .sample(7, 2);
        let h = eff.signals(&grid, &noise).unwrap();
        let j = eff.effective_signals(&h).unwrap();
        for n in 1..=8 {
            let num: Vector = (1..=n).map(|m| eff.signal_precision(m) * &h[m - 1]).sum();
            let f: Mat = (1..=n).map(|m| eff.signal_precision(m).clone()).sum();
            let direct = f.try_inverse().unwrap() * num;
            assert!((&direct - &j[n - 1]).norm() < 1e-12);
            // J_{n} from J_{n-1} and h_n.
            if n > 1 {
                let rec = eff.precision(n).clone().try_inverse().unwrap()
                    * (eff.precision(n - 1) * &j[n - 2] + eff.signal_precision(n) * &h[n - 1]);
                assert!((&rec - &j[n - 1]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn signal_noise_has_the_effective_precision() {
        // Var(H_n - X_1) must equal E_n^{-1}.
        let spec = LimitSpec::reference();
        let eff = effective_processes(&spec, 2).unwrap();
        let grid = TimeGrid::new(spec.tau, 4);
        let sampler = LimitSampler::new(&spec, grid.clone(), 2).unwrap();
        let k = 20_000;
        let mut ss = [0.0; 4];
        for i in 0..k {
            let noise = sampler.sample(3, i);
            let h = eff.signals(&grid, &noise).unwrap();
            for n in 0..4 {
                ss[n] += (h[n][0] - noise.x1()[0]).powi(2);
            }
        }
        for n in 0..4 {
            let var = ss[n] / k as f64;
            let target = 1.0 / eff.signal_precision(n + 1)[(0, 0)];
            assert!((var / target - 1.0).abs() < 0.05, "n={n} {var} vs {target}");
        }
    }

    #[test]
    fn factor_path_has_ou_moments_and_brownian_coupling() {
        let spec = LimitSpec::reference();
        let grid = TimeGrid::new(spec.tau, 6);
        let sampler = LimitSampler::new(&spec, grid, 0).unwrap();
        let k = 20_000;
        let (mut m, mut v, mut cov_xb) = (0.0, 0.0, 0.0);
        for i in 0..k {
            let n = sampler.sample(5, i);
            let x1 = n.x1()[0];
            let b1: f64 = n.db.iter().map(|d| d[0]).sum();
            m += x1;
            v += x1 * x1;
            cov_xb += x1 * b1;
        }
        let kf = k as f64;
        let var = v / kf - (m / kf).powi(2);
        let target = spec.ou.cov(1.0)[(0, 0)];
        assert!((m / kf).abs() < 4.0 * (target / kf).sqrt());
        assert!((var / target - 1.0).abs() < 0.04, "{var} {target}");
        // Cov(X_1, B_1) = int_0^1 e^{-(1-s)} ds.
        let c = 1.0 - (-1.0f64).exp();
        assert!((cov_xb / kf - c).abs() < 0.03, "{} vs {c}", cov_xb / kf);
    }

    #[test]
    fn limit_precision_examples() {
        let spec = LimitSpec::reference();
        let lim = limit_processes(&spec).unwrap();
        assert!((lim.precision(0.0).unwrap()[(0, 0)] - 1.0).abs() < 1e-14);
        for t in [0.1, 0.5, 0.9] {
            assert!((lim.precision(t).unwrap()[(0, 0)] - (1.0 + t)).abs() < 1e-12);
        }
        let pw = LimitSpec::power_law(0.75);
        let lim = limit_processes(&pw).unwrap();
        let closed = 1.0 + 2.0 * (0.1f64.powf(-0.5) - 1.0);
        let f = lim.precision(0.9).unwrap()[(0, 0)];
        assert!(((f - closed) / closed).abs() < 1e-8, "{f} {closed}");
        let dy = lim.precision_on_dyadics(3).unwrap();
        for (k, fk) in dy.iter().enumerate() {
            let t = k as f64 / 8.0;
            let c = 1.0 + 2.0 * ((1.0 - t).powf(-0.5) - 1.0);
            assert!(((fk[(0, 0)] - c) / c).abs() < 1e-9);
        }
    }

    #[test]
    fn limit_precision_is_monotone_in_two_dimensions() {
        let spec = LimitSpec {
            ou: OuParams::new(
                Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.5]),
                Vector::zeros(2),
                Mat::identity(2, 2),
            )
            .unwrap(),
            c_i: Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            d_z: Mat::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 0.5]),
            x0: Vector::zeros(2),
            pi: Vector::from_element(2, 1.0),
            ..LimitSpec::reference()
        };
        let lim = limit_processes(&spec).unwrap();
        let mut prev = lim.precision(0.0).unwrap();
        assert!(linalg::is_spd(&prev));
        for k in 1..10 {
            let f = lim.precision(k as f64 / 10.0).unwrap();
            assert!(linalg::is_spd(&(&f - &prev)));
            prev = f;
        }
        let errs: Vec<f64> = [4, 6, 8, 10]
            .iter()
            .map(|&n| f_sup_error(&effective_processes(&spec, n).unwrap(), &lim, 0.9).unwrap())
            .collect();
        assert!(strictly_decreasing(&errs), "{errs:?}");
    }

    #[test]
    fn drift_vanishes_at_forecast_and_without_information() {
        let ou = OuParams::scalar(1.0, 0.3, 0.8).unwrap();
        let x = Vector::from_element(1, 0.7);
        let j = ou.mean(&x, 0.6);
        let th = information_drift(&ou, 0.4, &x, &scalar(2.0), &j).unwrap();
        assert!(th.norm() < 1e-15);
        let th =
            information_drift(&ou, 0.4, &x, &scalar(1e-14), &Vector::from_element(1, 5.0)).unwrap();
        assert!(th.norm() < 1e-12);
    }

    #[test]
    fn drift_equals_volatility_times_density_gradient() {
        // theta = sigma' grad_x l(t, x, j) with l = Lambda(t, x; 1, F, F j).
        let ou = OuParams::scalar(0.7, 0.2, 1.3).unwrap();
        let f = scalar(2.5);
        let j = Vector::from_element(1, 0.4);
        let (t, x) = (0.3, 0.1);
        let l = |x: f64| {
            log_mgf_quadratic(&ou, t, &Vector::from_element(1, x), 1.0, &f, &(&f * &j)).unwrap()
        };
        let h = 1e-5;
        let grad = (l(x + h) - l(x - h)) / (2.0 * h);
        let th = information_drift(&ou, t, &Vector::from_element(1, x), &f, &j).unwrap();
        assert!(
            (th[0] - 1.3 * grad).abs() < 1e-8,
            "{} {}",
            th[0],
            1.3 * grad
        );
    }

    #[test]
    fn expected_ell_matches_gaussian_moments() {
        // l is quadratic in (X_t, J) and they are jointly Gaussian, so its mean
        // is exact from the first two moments.
        let ou = OuParams::scalar(1.2, 0.5, 0.9).unwrap();
        let x0 = Vector::from_element(1, -0.3);
        let (t, f) = (0.35, 1.7);
        let l = |x: f64, j: f64| {
            log_mgf_quadratic(
                &ou,
                t,
                &Vector::from_element(1, x),
                1.0,
                &scalar(f),
                &Vector::from_element(1, f * j),
            )
            .unwrap()
        };
        // Quadratic coefficients by finite differences (exact for quadratics).
        let c = l(0.0, 0.0);
        let lx = (l(1.0, 0.0) - l(-1.0, 0.0)) / 2.0;
        let lj = (l(0.0, 1.0) - l(0.0, -1.0)) / 2.0;
        let lxx = l(1.0, 0.0) + l(-1.0, 0.0) - 2.0 * c;
        let ljj = l(0.0, 1.0) + l(0.0, -1.0) - 2.0 * c;
        let lxj = (l(1.0, 1.0) - l(1.0, -1.0) - l(-1.0, 1.0) + l(-1.0, -1.0)) / 4.0;
        let mx = ou.mean(&x0, t)[0];
        let m1 = ou.mean(&x0, 1.0)[0];
        let vx = ou.cov(t)[(0, 0)];
        let v1 = ou.cov(1.0)[(0, 0)];
        let cx1 = (-(1.0 - t) * 1.2f64).exp() * vx;
        let vj = v1 + 1.0 / f;
        let ex = c
            + lx * mx
            + lj * m1
            + 0.5 * lxx * (vx + mx * mx)
            + 0.5 * ljj * (vj + m1 * m1)
            + lxj * (cx1 + mx * m1);
        let closed = expected_ell(&ou, &x0, t, &scalar(f));
        assert!((ex - closed).abs() < 1e-8, "{ex} {closed}");
    }

    #[test]
    fn drift_energy_telescopes_to_integrated_drift_variance() {
        let spec = LimitSpec::reference();
        let eff = effective_processes(&spec, 3).unwrap();
        let ou = &spec.ou;
        let closed = drift_energy(ou, &eff, 0.9);
        let mut direct = 0.0;
        let t = eff.times();
        for n in 0..8 {
            if t[n] >= 0.9 {
                break;
            }
            let f = eff.precision(n + 1).clone();
            let fi = f.clone().try_inverse().unwrap();
            direct += integrate(
                |u| {
                    let a = drift_loading(ou, u, &f).unwrap();
                    (&a * (ou.cov(1.0 - u) + &fi) * a.transpose()).trace()
                },
                t[n],
                t[n + 1].min(0.9),
                1e-13,
                1e-11,
            )
            .unwrap();
        }
        assert!((closed - direct).abs() < 1e-9, "{closed} {direct}");
    }

    #[test]
    fn tail_protocol_examples() {
        let zero = tail_protocol(|_, _| Ok(0.0)).unwrap();
        assert_eq!(zero.verdict, Divergence::Finite(0.0));
        // int (1-t)^{-1/2} = 2.
        let conv = tail_protocol(|a, b| Ok(2.0 * ((1.0 - a).sqrt() - (1.0 - b).sqrt()))).unwrap();
        match conv.verdict {
            Divergence::Finite(v) => assert!((v - 2.0).abs() < 1e-6),
            other => panic!("{other:?}"),
        }
        let log = tail_protocol(|a, b| Ok(((1.0 - a) / (1.0 - b)).ln())).unwrap();
        assert_eq!(log.verdict, Divergence::Infinite);
        // Decade increments shrinking by 0.8 fit neither pattern.
        let odd = tail_protocol(|_, b| Ok(0.8f64.powf(-(1.0 - b).log10()))).unwrap();
        assert_eq!(odd.verdict, Divergence::Inconclusive);
    }

    #[test]
    fn q_zero_for_vanishing_lambda() {
        let spec = LimitSpec {
            p: Profile::Const(1e-200),
            ..LimitSpec::reference()
        };
        assert_eq!(q_integral(&spec).unwrap(), 0.0);
    }

    #[test]
    fn q_matches_closed_form_for_constant_lambda() {
        // lambda = 1, tau = id: A(t) = t, Q = int t / (1 + t - t^2).
        let spec = LimitSpec::reference();
        let exact = integrate(|t| t / (1.0 + t - t * t), 0.0, 1.0, 1e-14, 1e-13).unwrap();
        let q = q_integral(&spec).unwrap();
        assert!((q - exact).abs() < 1e-8, "{q} {exact}");
    }

    #[test]
    fn terminal_classification_follows_the_exponent() {
        let cases = [(0.4, false, true), (0.75, true, true), (1.2, true, false)];
        for (a, reveals, finite) in cases {
            let c = classify_t1(&LimitSpec::power_law(a)).unwrap();
            assert_eq!(c.reveals_factor(), Some(reveals), "a={a}: {c}");
            assert_eq!(c.q_finite(), Some(finite), "a={a}: {c}");
        }
        let lim = limit_processes(&LimitSpec::power_law(0.75)).unwrap();
        assert!(matches!(
            lim.terminal_precision(),
            Err(PceError::DivergentIntegral(_))
        ));
        let lim = limit_processes(&LimitSpec::power_law(0.4)).unwrap();
        let f1 = lim.terminal_precision().unwrap()[(0, 0)];
        // 1 + int (1-u)^{-0.8} = 1 + 5.
        assert!((f1 - 6.0).abs() < 1e-3, "{f1}");
    }

    #[test]
    fn study_csv_round_trip() {
        let rows = vec![
            StudyRow {
                spec_id: "reference".into(),
                n: 4,
                t: 0.5,
                metric: "j_l2_error".into(),
                value: 1.25e-3,
            },
            StudyRow {
                spec_id: "reference".into(),
                n: 6,
                t: 0.9,
                metric: "f_sup_error".into(),
                value: 0.1,
            },
        ];
        let mut buf = Vec::new();
        write_study_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("spec_id,N,t,metric,value\n"));
        assert_eq!(read_study_csv(buf.as_slice()).unwrap(), rows);
    }
}
