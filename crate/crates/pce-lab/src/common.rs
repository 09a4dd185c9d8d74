//! CARA-Gaussian equilibria with common information: a single trading date
//! with a Gaussian payoff variable, and continuous trading on `[a, b]` in a
//! claim written on the OU factor.
//!
//! An agent with risk aversion `gamma` and endowment exponent
//! `gamma * E(y) = y'My/2 + y'V + lambda` maximizes
//! `E[-exp(-gamma (W + E(Y)))]`.

use crate::error::{PceError, Result};
use crate::gaussian::{gaussian_tilt, lambda_grad_v, OuParams};
use crate::linalg::{self, symmetrize};
use crate::lq::{fit_lq, LqForm};
use crate::quadrature::normal_tensor_rule;
use crate::{Mat, Vector};

/// Endowment exponent `y'My/2 + y'V + lambda` (already multiplied by `gamma`).
#[derive(Debug, Clone, PartialEq)]
pub struct Endowment {
    pub m: Mat,
    pub v: Vector,
    pub lambda: f64,
}

impl Endowment {
    pub fn zero(d: usize) -> Self {
        Self {
            m: Mat::zeros(d, d),
            v: Vector::zeros(d),
            lambda: 0.0,
        }
    }

    pub fn from_lq(form: &LqForm) -> Self {
        Self {
            m: form.a().clone(),
            v: form.b().clone(),
            lambda: form.c(),
        }
    }

    pub fn eval(&self, y: &Vector) -> f64 {
        0.5 * y.dot(&(&self.m * y)) + y.dot(&self.v) + self.lambda
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub gamma: f64,
    pub omega: f64,
    pub endowment: Endowment,
}

impl Participant {
    pub fn alpha(&self) -> f64 {
        self.omega / self.gamma
    }
}

/// Representative risk aversion `(sum alpha_j)^{-1}` and coefficients
/// `Mbar = gamma sum alpha_j M_j`, `Vbar = -gamma (sum alpha_j V_j + M'Psi)`.
pub fn representative_coeffs(
    agents: &[Participant],
    payoff_m: &Mat,
    supply: &Vector,
) -> (f64, Mat, Vector) {
    let d = supply.len();
    let gamma = 1.0 / agents.iter().map(Participant::alpha).sum::<f64>();
    let mut m = Mat::zeros(d, d);
    let mut v = payoff_m.transpose() * supply;
    for a in agents {
        m += &a.endowment.m * a.alpha();
        v += &a.endowment.v * a.alpha();
    }
    (gamma, symmetrize(&(m * gamma)), v * (-gamma))
}

fn check_agents(agents: &[Participant], d: usize) -> Result<()> {
    if agents.is_empty() {
        return Err(PceError::InvalidSpec("no agents".into()));
    }
    for (j, a) in agents.iter().enumerate() {
        if !(a.gamma > 0.0 && a.omega > 0.0) {
            return Err(PceError::InvalidSpec(format!(
                "agent {j} has gamma {} and omega {}",
                a.gamma, a.omega
            )));
        }
        linalg::require_square(&a.endowment.m, d, "endowment quadratic")?;
        linalg::require_len(&a.endowment.v, d, "endowment linear")?;
    }
    Ok(())
}

fn check_payoff(m: &Mat, what: &str) -> Result<()> {
    let cond = linalg::condition_number(m);
    if cond > 1e12 {
        return Err(PceError::SingularPayoffMap(format!(
            "{what} has condition number {cond:.3e}"
        )));
    }
    Ok(())
}

/// Trading once at price `p` in `S = M H + V` with `H ~ N(mu_h, sigma_h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinglePeriodProblem {
    pub agents: Vec<Participant>,
    pub payoff_m: Mat,
    pub payoff_v: Vector,
    pub mu_h: Vector,
    pub sigma_h: Mat,
    pub supply: Vector,
}

#[derive(Debug, Clone)]
pub struct SinglePeriodSolution {
    pub price: Vector,
    pub strategies: Vec<Vector>,
    /// `-log` of the optimal expected disutility, i.e. `gamma_j` times the
    /// certainty equivalent.
    pub scaled_ce: Vec<f64>,
    pub gamma: f64,
    pub m_bar: Mat,
    pub v_bar: Vector,
}

impl SinglePeriodSolution {
    pub fn certainty_equivalents(&self, p: &SinglePeriodProblem) -> Vec<f64> {
        self.scaled_ce
            .iter()
            .zip(&p.agents)
            .map(|(s, a)| s / a.gamma)
            .collect()
    }
}

impl SinglePeriodProblem {
    pub fn dim(&self) -> usize {
        self.supply.len()
    }

    fn validate(&self) -> Result<Mat> {
        let d = self.dim();
        linalg::require_square(&self.payoff_m, d, "payoff map")?;
        linalg::require_len(&self.payoff_v, d, "payoff offset")?;
        linalg::require_len(&self.mu_h, d, "payoff mean")?;
        linalg::require_square(&self.sigma_h, d, "payoff covariance")?;
        check_agents(&self.agents, d)?;
        linalg::require_spd(&self.sigma_h, "payoff covariance")?;
        check_payoff(&self.payoff_m, "payoff map")?;
        let ph = linalg::spd_inverse(&self.sigma_h, "payoff covariance")?;
        for (j, a) in self.agents.iter().enumerate() {
            if !linalg::is_spd(&(&a.endowment.m + &ph)) {
                return Err(PceError::AssumptionViolated(format!(
                    "endowment quadratic of agent {j} plus the payoff precision is not positive definite"
                )));
            }
        }
        Ok(ph)
    }
}

/// Closed-form single-period equilibrium.
pub fn solve_single_period(p: &SinglePeriodProblem) -> Result<SinglePeriodSolution> {
    let ph = p.validate()?;
    let d = p.dim();
    let (gamma, m_bar, v_bar) = representative_coeffs(&p.agents, &p.payoff_m, &p.supply);
    let sh = &p.sigma_h;
    let a = Mat::identity(d, d) + sh * &m_bar;
    let price = &p.payoff_v
        + &p.payoff_m * linalg::solve(&a, &(&p.mu_h + sh * &v_bar), "I + Sigma_H Mbar")?;
    let mt = p.payoff_m.transpose();
    let slack = linalg::solve(&p.payoff_m, &(&p.payoff_v - &price), "payoff map")?;
    let mut strategies = Vec::with_capacity(p.agents.len());
    for ag in &p.agents {
        let rhs = &ph * &p.mu_h - &ag.endowment.v + (&ph + &ag.endowment.m) * &slack;
        strategies.push(linalg::solve(&mt, &rhs, "payoff map")? / ag.gamma);
    }
    let mut demand = Vector::zeros(d);
    let mut scale = 1.0 + linalg::max_abs_vec(&p.supply);
    for (ag, s) in p.agents.iter().zip(&strategies) {
        demand += s * ag.omega;
        scale += ag.omega * linalg::max_abs_vec(s);
    }
    let resid = linalg::max_abs_vec(&(&demand - &p.supply));
    if resid > 1e-10 * scale {
        return Err(PceError::AssumptionViolated(format!(
            "single-period clearing residual {resid:.3e}"
        )));
    }
    let r = linalg::spd_inverse(&(&ph + &m_bar), "P_H + Mbar")?;
    let pr = &ph * &r;
    let logdet_ph = spd_logdet(&ph)?;
    let mut scaled_ce = Vec::with_capacity(p.agents.len());
    for ag in &p.agents {
        let mj = &ag.endowment.m;
        let vj = &ag.endowment.v;
        let dm = &m_bar - mj;
        let rv = &r * &v_bar;
        let logdet = spd_logdet(&(&ph + mj))? - logdet_ph;
        let pmu = pr.transpose() * &p.mu_h;
        let value = ag.endowment.lambda
            + 0.5 * logdet
            + rv.dot(vj)
            + 0.5 * rv.dot(&((&ph + mj) * &rv))
            + pmu.dot(&(vj - &dm * &rv))
            + 0.5 * pmu.dot(&((&m_bar * sh * &m_bar + mj) * &pmu));
        scaled_ce.push(value);
    }
    Ok(SinglePeriodSolution {
        price,
        strategies,
        scaled_ce,
        gamma,
        m_bar,
        v_bar,
    })
}

fn spd_logdet(a: &Mat) -> Result<f64> {
    let ch = symmetrize(a)
        .cholesky()
        .ok_or_else(|| PceError::AssumptionViolated("matrix is not positive definite".into()))?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Quadrature brute force: per-agent expected-utility maximization by Newton
/// on a tensor Gauss-Hermite rule, market clearing by damped Newton on the price.
pub fn brute_force_single_period(
    p: &SinglePeriodProblem,
    order: usize,
) -> Result<(Vector, Vec<Vector>)> {
    p.validate()?;
    let d = p.dim();
    if d > 3 {
        return Err(PceError::InvalidSpec(format!(
            "brute force limited to three dimensions, got {d}"
        )));
    }
    let l = linalg::psd_factor(&p.sigma_h);
    let (pts, wts) = normal_tensor_rule(order, d);
    let nodes: Vec<(Vector, f64)> = pts
        .iter()
        .zip(&wts)
        .map(|(z, w)| {
            let h = &p.mu_h + &l * Vector::from_column_slice(z);
            (h, w.ln())
        })
        .collect();
    let payoffs: Vec<Vector> = nodes
        .iter()
        .map(|(h, _)| &p.payoff_m * h + &p.payoff_v)
        .collect();
    let base: Vec<Vec<f64>> = p
        .agents
        .iter()
        .map(|a| {
            nodes
                .iter()
                .map(|(h, lw)| lw - a.endowment.eval(h))
                .collect()
        })
        .collect();

    let demand = |j: usize, price: &Vector, start: &Vector| -> Result<(Vector, Mat)> {
        let gamma = p.agents[j].gamma;
        let objective = |pi: &Vector| -> f64 {
            let a: Vec<f64> = payoffs
                .iter()
                .zip(&base[j])
                .map(|(s, b)| b - gamma * pi.dot(&(s - price)))
                .collect();
            log_sum_exp(&a)
        };
        let mut pi = start.clone();
        let mut f = objective(&pi);
        for _ in 0..200 {
            let a: Vec<f64> = payoffs
                .iter()
                .zip(&base[j])
                .map(|(s, b)| b - gamma * pi.dot(&(s - price)))
                .collect();
            let top = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let rho: Vec<f64> = a.iter().map(|v| (v - top).exp()).collect();
            let total: f64 = rho.iter().sum();
            let mut mean = Vector::zeros(d);
            let mut second = Mat::zeros(d, d);
            for (r, s) in rho.iter().zip(&payoffs) {
                let e = s - price;
                mean += &e * (r / total);
                second += &e * e.transpose() * (r / total);
            }
            let grad = &mean * (-gamma);
            let hess = (second - &mean * mean.transpose()) * (gamma * gamma);
            let step = linalg::solve(&hess, &grad, "utility Hessian")?;
            if step.norm() <= 1e-15 * (1.0 + pi.norm()) {
                return Ok((pi, hess));
            }
            let mut t = 1.0;
            loop {
                let cand = &pi - &step * t;
                let fc = objective(&cand);
                if fc <= f + 1e-14 * f.abs().max(1.0) || t < 1e-8 {
                    pi = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
            if (&step * t).norm() <= 1e-14 * (1.0 + pi.norm()) {
                return Ok((pi, hess));
            }
        }
        Err(PceError::NoConvergence(format!(
            "demand of agent {j} did not converge"
        )))
    };

    let mut price = &p.payoff_v + &p.payoff_m * &p.mu_h;
    let mut starts: Vec<Vector> = vec![Vector::zeros(d); p.agents.len()];
    for _ in 0..200 {
        let mut excess = -p.supply.clone();
        let mut jac = Mat::zeros(d, d);
        for j in 0..p.agents.len() {
            let (pi, hess) = demand(j, &price, &starts[j])?;
            let a = &p.agents[j];
            excess += &pi * a.omega;
            jac -= linalg::inverse(&hess, "utility Hessian")? * (a.omega * a.gamma);
            starts[j] = pi;
        }
        if linalg::max_abs_vec(&excess) <= 1e-13 * (1.0 + linalg::max_abs_vec(&p.supply)) {
            return Ok((price, starts));
        }
        let step = linalg::solve(&jac, &excess, "clearing Jacobian")?;
        let before = excess.norm();
        let mut t = 1.0;
        loop {
            let cand = &price - &step * t;
            let mut ex = -p.supply.clone();
            for j in 0..p.agents.len() {
                ex += demand(j, &cand, &starts[j])?.0 * p.agents[j].omega;
            }
            if ex.norm() < before || t < 1e-6 {
                price = cand;
                break;
            }
            t *= 0.5;
        }
        if (&step * t).norm() <= 1e-15 * (1.0 + price.norm()) {
            let mut ex = -p.supply.clone();
            let mut pis = Vec::new();
            for j in 0..p.agents.len() {
                let pi = demand(j, &price, &starts[j])?.0;
                ex += &pi * p.agents[j].omega;
                pis.push(pi);
            }
            if linalg::max_abs_vec(&ex) <= 1e-10 {
                return Ok((price, pis));
            }
        }
    }
    Err(PceError::NoConvergence(
        "market clearing did not converge".into(),
    ))
}

fn log_sum_exp(a: &[f64]) -> f64 {
    let top = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + a.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// Continuous trading on `[a, b]` in the claim `S_b = M_b X_b + V_b`, with
/// endowments that are quadratic in `X_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousProblem {
    pub ou: OuParams,
    pub a: f64,
    pub b: f64,
    pub payoff_m: Mat,
    pub payoff_v: Vector,
    pub agents: Vec<Participant>,
    pub supply: Vector,
}

#[derive(Debug, Clone)]
pub struct ContinuousSolution {
    problem: ContinuousProblem,
    gamma: f64,
    m_bar: Mat,
    v_bar: Vector,
}

/// Solves the common-information continuous-time problem; the state-price
/// density at `b` is proportional to `exp(-X_b'Mbar X_b/2 + X_b'Vbar)`.
pub fn solve_continuous(p: &ContinuousProblem) -> Result<ContinuousSolution> {
    let d = p.ou.dim();
    if !(p.a < p.b) {
        return Err(PceError::InvalidSpec(format!(
            "empty interval [{}, {}]",
            p.a, p.b
        )));
    }
    linalg::require_square(&p.payoff_m, d, "terminal payoff map")?;
    linalg::require_len(&p.payoff_v, d, "terminal payoff offset")?;
    linalg::require_len(&p.supply, d, "supply")?;
    check_agents(&p.agents, d)?;
    check_payoff(&p.payoff_m, "terminal payoff map")?;
    let (gamma, m_bar, v_bar) = representative_coeffs(&p.agents, &p.payoff_m, &p.supply);
    gaussian_tilt(p.ou.theta(), &p.ou.cov(p.b - p.a), &m_bar, &v_bar).map_err(|_| {
        PceError::AssumptionViolated(
            "P(b - a) + Mbar is not positive definite; the state-price density is not integrable"
                .into(),
        )
    })?;
    Ok(ContinuousSolution {
        problem: p.clone(),
        gamma,
        m_bar,
        v_bar,
    })
}

impl ContinuousSolution {
    /// A solution whose state-price density is imposed rather than derived
    /// from the listed agents, for evaluating price takers.
    pub fn with_density(problem: ContinuousProblem, gamma: f64, m_bar: Mat, v_bar: Vector) -> Self {
        Self {
            problem,
            gamma,
            m_bar,
            v_bar,
        }
    }

    pub fn problem(&self) -> &ContinuousProblem {
        &self.problem
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    /// Density coefficients `(Mbar, Vbar)`.
    pub fn m_bar(&self) -> &Mat {
        &self.m_bar
    }
    pub fn v_bar(&self) -> &Vector {
        &self.v_bar
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let p = &self.problem;
        if t < p.a - 1e-12 || t > p.b + 1e-12 {
            return Err(PceError::InvalidSpec(format!(
                "time {t} outside [{}, {}]",
                p.a, p.b
            )));
        }
        Ok(())
    }

    /// Mean of `X_b` given `X_t = x` under the pricing measure.
    pub fn forward_mean(&self, t: f64, x: &Vector) -> Result<Vector> {
        self.check_time(t)?;
        let t = t.min(self.problem.b);
        lambda_grad_v(
            &self.problem.ou,
            t,
            x,
            self.problem.b,
            &self.m_bar,
            &self.v_bar,
        )
    }

    pub fn price(&self, t: f64, x: &Vector) -> Result<Vector> {
        let m = self.forward_mean(t, x)?;
        Ok(&self.problem.payoff_v + &self.problem.payoff_m * m)
    }

    /// `(I + Sigma(tau) Mbar)^{-1}` and `e^{-tau kappa}` at time `t`.
    fn gain(&self, t: f64) -> Result<(Mat, Mat, f64)> {
        self.check_time(t)?;
        let tau = (self.problem.b - t).max(0.0);
        let d = self.problem.ou.dim();
        let s = self.problem.ou.cov(tau);
        let k = linalg::inverse(&(Mat::identity(d, d) + &s * &self.m_bar), "I + Sigma Mbar")?;
        Ok((k, self.problem.ou.decay(tau), tau))
    }

    /// `dS/dx`, constant in `x`.
    pub fn price_jacobian(&self, t: f64) -> Result<Mat> {
        let (k, e, _) = self.gain(t)?;
        Ok(&self.problem.payoff_m * k * e)
    }

    /// `dS/dt` at fixed `x`.
    pub fn price_time_derivative(&self, t: f64, x: &Vector) -> Result<Vector> {
        let (k, e, tau) = self.gain(t)?;
        let ou = &self.problem.ou;
        let m = self.forward_mean(t, x)?;
        let rate = ou.cov_rate(tau);
        let inner = rate * (&self.m_bar * &m - &self.v_bar) + ou.kappa() * e * (x - ou.theta());
        Ok(&self.problem.payoff_m * k * inner)
    }

    /// Physical drift of the price: time derivative plus the OU generator.
    pub fn price_drift(&self, t: f64, x: &Vector) -> Result<Vector> {
        let ou = &self.problem.ou;
        let jac = self.price_jacobian(t)?;
        Ok(self.price_time_derivative(t, x)? + jac * (ou.kappa() * (ou.theta() - x)))
    }

    /// Volatility-deflated physical drift `(dS/dx sigma)^{-1} drift(S)`.
    pub fn market_price_of_risk(&self, t: f64, x: &Vector) -> Result<Vector> {
        let vol = self.price_jacobian(t)? * self.problem.ou.sigma();
        check_volatility(&vol)?;
        linalg::solve(&vol, &self.price_drift(t, x)?, "price volatility")
    }

    /// The same quantity from the state-price density: `-sigma' dLambda/dx`.
    pub fn market_price_of_risk_from_density(&self, t: f64, x: &Vector) -> Result<Vector> {
        let ou = &self.problem.ou;
        let g = crate::gaussian::lambda_grad_x(ou, t, x, self.problem.b, &self.m_bar, &self.v_bar)?;
        Ok(-(ou.sigma().transpose() * g))
    }

    /// Replicating position of agent `j` at `(t, x)`.
    ///
    /// The optimal terminal wealth solves
    /// `-gamma_j W = X'M_j X/2 + X'V_j + log Z + const`, so its conditional
    /// pricing-measure value is quadratic in the forward mean; its gradient
    /// divided by the price Jacobian is the hedge.
    pub fn hedge(&self, j: usize, t: f64, x: &Vector) -> Result<Vector> {
        let ag = self
            .problem
            .agents
            .get(j)
            .ok_or_else(|| PceError::InvalidSpec(format!("agent {j} not in the problem")))?;
        let (k, e, _) = self.gain(t)?;
        let jac = &self.problem.payoff_m * &k * &e;
        check_volatility(&jac)?;
        let m = self.forward_mean(t, x)?;
        let u = &self.v_bar + &ag.endowment.v;
        let dm = &self.m_bar - &ag.endowment.m;
        let value_grad = (&k * &e).transpose() * (u - dm * m) * (-1.0 / ag.gamma);
        linalg::solve(&jac.transpose(), &value_grad, "price Jacobian")
    }

    /// `-log` of agent `j`'s optimal expected disutility at time `a`, given
    /// `X_a = x` (that is, `gamma_j` times the certainty equivalent).
    pub fn scaled_ce(&self, j: usize, x: &Vector) -> Result<f64> {
        let p = &self.problem;
        let ag = p
            .agents
            .get(j)
            .ok_or_else(|| PceError::InvalidSpec(format!("agent {j} not in the problem")))?;
        let tau = p.b - p.a;
        let sigma = p.ou.cov(tau);
        let prec = p.ou.precision(tau)?;
        let mu = p.ou.mean(x, tau);
        let mb = &self.m_bar;
        let vb = &self.v_bar;
        let mj = &ag.endowment.m;
        let vj = &ag.endowment.v;
        let r = linalg::spd_inverse(&(&prec + mb), "P + Mbar")?;
        let dm = mb - mj;
        let rv = &r * vb;
        let pmu = &r * (&prec * &mu);
        let logdet = spd_logdet(&(&prec + mb))? - spd_logdet(&prec)?;
        Ok(
            ag.endowment.lambda + 0.5 * logdet - 0.5 * (&dm * &r).trace()
                + rv.dot(vj)
                + 0.5 * rv.dot(&((&prec + mj) * &rv))
                + pmu.dot(&(vj - &dm * &rv))
                + 0.5 * pmu.dot(&((mb * &sigma * mb + mj) * &pmu)),
        )
    }

    /// Agent `j`'s scaled certainty equivalent as a quadratic form in `X_a`.
    pub fn certainty_equivalent_form(&self, j: usize) -> Result<LqForm> {
        fit_lq(self.problem.ou.dim(), |x| self.scaled_ce(j, x))
    }
}

fn check_volatility(vol: &Mat) -> Result<()> {
    let cond = linalg::condition_number(vol);
    if cond > 1e12 {
        return Err(PceError::DegenerateVolatility(format!(
            "price volatility has condition number {cond:.3e}"
        )));
    }
    Ok(())
}

/// Scaled certainty equivalent of agent `j` as a form in `X_a`.
pub fn cont_certainty_equivalent(p: &ContinuousProblem, j: usize) -> Result<LqForm> {
    solve_continuous(p)?.certainty_equivalent_form(j)
}

/// Replicating position of agent `j` at `(t, x)`.
pub fn hedging_strategy(p: &ContinuousProblem, j: usize, t: f64, x: &Vector) -> Result<Vector> {
    solve_continuous(p)?.hedge(j, t, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn agent(gamma: f64, omega: f64, m: Mat, v: Vector, lambda: f64) -> Participant {
        Participant {
            gamma,
            omega,
            endowment: Endowment { m, v, lambda },
        }
    }

    fn sp_scalar() -> SinglePeriodProblem {
        SinglePeriodProblem {
            agents: vec![
                agent(1.0, 0.3, dmatrix![0.4], dvector![0.2], 0.1),
                agent(2.0, 0.5, dmatrix![-0.3], dvector![-0.5], 0.0),
                agent(0.5, 0.2, dmatrix![0.0], dvector![0.0], 0.0),
            ],
            payoff_m: dmatrix![1.3],
            payoff_v: dvector![0.2],
            mu_h: dvector![0.4],
            sigma_h: dmatrix![0.7],
            supply: dvector![0.6],
        }
    }

    fn sp_plane() -> SinglePeriodProblem {
        SinglePeriodProblem {
            agents: vec![
                agent(
                    1.0,
                    0.4,
                    dmatrix![0.5, 0.1; 0.1, 0.2],
                    dvector![0.1, -0.2],
                    0.0,
                ),
                agent(
                    1.5,
                    0.6,
                    dmatrix![-0.2, 0.0; 0.0, 0.3],
                    dvector![-0.3, 0.4],
                    0.2,
                ),
            ],
            payoff_m: dmatrix![1.0, 0.3; -0.2, 0.8],
            payoff_v: dvector![0.1, 0.0],
            mu_h: dvector![0.2, -0.1],
            sigma_h: dmatrix![0.6, 0.1; 0.1, 0.4],
            supply: dvector![0.5, 0.2],
        }
    }

    /// `-log E[exp(-gamma pi'(S - p) - E(H))]` by tensor Gauss-Hermite.
    fn scaled_value(p: &SinglePeriodProblem, j: usize, pi: &Vector, price: &Vector) -> f64 {
        let d = p.dim();
        let l = linalg::psd_factor(&p.sigma_h);
        let (pts, wts) = normal_tensor_rule(60, d);
        let a: Vec<f64> = pts
            .iter()
            .zip(&wts)
            .map(|(z, w)| {
                let h = &p.mu_h + &l * Vector::from_column_slice(z);
                let s = &p.payoff_m * &h + &p.payoff_v;
                w.ln() - p.agents[j].gamma * pi.dot(&(s - price)) - p.agents[j].endowment.eval(&h)
            })
            .collect();
        -log_sum_exp(&a)
    }

    #[test]
    fn single_period_matches_brute_force() {
        for (p, order) in [(sp_scalar(), 80), (sp_plane(), 40)] {
            let sol = solve_single_period(&p).unwrap();
            let (price, pis) = brute_force_single_period(&p, order).unwrap();
            assert!(
                (&price - &sol.price).amax() < 1e-9,
                "{price} vs {}",
                sol.price
            );
            for (a, b) in pis.iter().zip(&sol.strategies) {
                assert!((a - b).amax() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_period_ce_matches_quadrature() {
        for p in [sp_scalar(), sp_plane()] {
            let sol = solve_single_period(&p).unwrap();
            for j in 0..p.agents.len() {
                let q = scaled_value(&p, j, &sol.strategies[j], &sol.price);
                assert!(
                    (q - sol.scaled_ce[j]).abs() < 1e-10,
                    "agent {j}: {q} vs {}",
                    sol.scaled_ce[j]
                );
            }
        }
    }

    #[test]
    fn single_period_strategies_are_optimal() {
        let p = sp_plane();
        let sol = solve_single_period(&p).unwrap();
        for j in 0..p.agents.len() {
            let best = scaled_value(&p, j, &sol.strategies[j], &sol.price);
            for k in 0..2 {
                let mut bump = Vector::zeros(2);
                bump[k] = 1e-3;
                let up = scaled_value(&p, j, &(&sol.strategies[j] + &bump), &sol.price);
                let dn = scaled_value(&p, j, &(&sol.strategies[j] - &bump), &sol.price);
                assert!(up < best + 1e-12 && dn < best + 1e-12);
            }
        }
    }

    #[test]
    fn single_period_rejects_non_integrable_endowment() {
        let mut p = sp_scalar();
        p.agents[1].endowment.m = dmatrix![-2.0];
        assert!(matches!(
            solve_single_period(&p),
            Err(PceError::AssumptionViolated(_))
        ));
    }

    #[test]
    fn single_period_rejects_singular_payoff() {
        let mut p = sp_plane();
        p.payoff_m = dmatrix![1.0, 2.0; 0.5, 1.0];
        assert!(matches!(
            solve_single_period(&p),
            Err(PceError::SingularPayoffMap(_))
        ));
    }

    fn cont_plane() -> ContinuousProblem {
        let ou = OuParams::new(
            dmatrix![1.0, 0.2; -0.1, 0.7],
            dvector![0.1, -0.2],
            dmatrix![0.8, 0.0; 0.3, 0.6],
        )
        .unwrap();
        ContinuousProblem {
            ou,
            a: 0.2,
            b: 0.9,
            payoff_m: dmatrix![1.0, 0.2; 0.0, 1.1],
            payoff_v: dvector![0.3, -0.1],
            agents: vec![
                agent(
                    1.0,
                    0.4,
                    dmatrix![0.5, 0.1; 0.1, 0.2],
                    dvector![0.1, -0.2],
                    0.3,
                ),
                agent(
                    2.0,
                    0.6,
                    dmatrix![-0.2, 0.0; 0.0, 0.3],
                    dvector![-0.3, 0.4],
                    0.0,
                ),
            ],
            supply: dvector![0.5, 0.2],
        }
    }

    #[test]
    fn continuous_price_reaches_payoff() {
        let p = cont_plane();
        let sol = solve_continuous(&p).unwrap();
        let x = dvector![0.4, -0.7];
        let s = sol.price(p.b, &x).unwrap();
        assert!((s - (&p.payoff_m * &x + &p.payoff_v)).amax() < 1e-13);
    }

    #[test]
    fn continuous_time_derivative_matches_differences() {
        let p = cont_plane();
        let sol = solve_continuous(&p).unwrap();
        let x = dvector![0.4, -0.7];
        let t = 0.5;
        let h = 1e-5;
        let fd = (sol.price(t + h, &x).unwrap() - sol.price(t - h, &x).unwrap()) / (2.0 * h);
        let an = sol.price_time_derivative(t, &x).unwrap();
        assert!((fd - an).amax() < 1e-8);
        let mut jac_fd = Mat::zeros(2, 2);
        for k in 0..2 {
            let mut e = Vector::zeros(2);
            e[k] = h;
            let col =
                (sol.price(t, &(&x + &e)).unwrap() - sol.price(t, &(&x - &e)).unwrap()) / (2.0 * h);
            jac_fd.set_column(k, &col);
        }
        assert!((jac_fd - sol.price_jacobian(t).unwrap()).amax() < 1e-8);
    }

    #[test]
    fn market_price_of_risk_routes_agree() {
        let p = cont_plane();
        let sol = solve_continuous(&p).unwrap();
        for (t, x) in [
            (0.2, dvector![0.0, 0.0]),
            (0.6, dvector![1.0, -0.5]),
            (0.89, dvector![-2.0, 0.3]),
        ] {
            let a = sol.market_price_of_risk(t, &x).unwrap();
            let b = sol.market_price_of_risk_from_density(t, &x).unwrap();
            assert!((&a - &b).amax() < 1e-10 * (1.0 + a.amax()), "{a} vs {b}");
        }
    }

    #[test]
    fn hedges_clear_supply() {
        let p = cont_plane();
        let sol = solve_continuous(&p).unwrap();
        for (t, x) in [(0.2, dvector![0.0, 0.0]), (0.7, dvector![1.5, -0.5])] {
            let mut total = Vector::zeros(2);
            for (j, a) in p.agents.iter().enumerate() {
                total += sol.hedge(j, t, &x).unwrap() * a.omega;
            }
            assert!((total - &p.supply).amax() < 1e-12);
        }
    }

    /// Static-replication oracle: the optimal claim makes
    /// `gamma_j W + gamma_j E_j(X_b) + log Z` constant, so the scaled CE is
    /// `E^Q[gamma_j E_j(X_b) + log Z(X_b)]`.
    #[test]
    fn continuous_ce_matches_pricing_measure_oracle() {
        let p = cont_plane();
        let sol = solve_continuous(&p).unwrap();
        let x = dvector![0.3, -0.4];
        let tilt = crate::gaussian::transition_tilt(&p.ou, p.a, &x, p.b, sol.m_bar(), sol.v_bar())
            .unwrap();
        let second = &tilt.cov + &tilt.mean * tilt.mean.transpose();
        for (j, a) in p.agents.iter().enumerate() {
            let dm = &a.endowment.m - sol.m_bar();
            let oracle = 0.5 * (dm * &second).trace()
                + tilt.mean.dot(&(&a.endowment.v + sol.v_bar()))
                + a.endowment.lambda
                - tilt.log_mgf;
            let ce = sol.scaled_ce(j, &x).unwrap();
            assert!((ce - oracle).abs() < 1e-11, "agent {j}: {ce} vs {oracle}");
        }
        let form = sol.certainty_equivalent_form(0).unwrap();
        assert!((form.eval(&x) - sol.scaled_ce(0, &x).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn continuous_rejects_divergent_density() {
        let mut p = cont_plane();
        for a in p.agents.iter_mut() {
            a.endowment.m = dmatrix![-20.0, 0.0; 0.0, -20.0];
        }
        assert!(matches!(
            solve_continuous(&p),
            Err(PceError::AssumptionViolated(_))
        ));
    }
}
