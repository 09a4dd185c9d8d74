//! Market scenarios: agents, signal times, precisions and supply, plus the
//! derived public-signal quantities.

use std::fmt;

use crate::error::{PceError, Result};
use crate::gaussian::OuParams;
use crate::linalg::{self, symmetrize};
use crate::{Mat, Vector};

/// Private-signal data of an insider.
#[derive(Debug, Clone, PartialEq)]
pub struct InsiderSignal {
    /// Entry time `t_n`.
    pub time: f64,
    /// Precision `C_n` of `G_n = X_1 + Y_n`.
    pub c: Mat,
    /// Precision `D_n` of the noise-trader demand `Z_n`.
    pub d: Mat,
}

/// One agent; id 0 is the uninformed agent, ids `1..=N` are insiders in entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub id: usize,
    pub gamma: f64,
    pub omega: f64,
    pub signal: Option<InsiderSignal>,
}

impl AgentSpec {
    /// Weighted risk tolerance `omega / gamma`.
    pub fn alpha(&self) -> f64 {
        self.omega / self.gamma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketScenario {
    pub ou: OuParams,
    /// Initial factor value `X_0`.
    pub x0: Vector,
    /// Fixed supply `Pi`.
    pub pi: Vector,
    pub agents: Vec<AgentSpec>,
}

/// A broken scenario invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

impl MarketScenario {
    pub fn dim(&self) -> usize {
        self.ou.dim()
    }

    pub fn n_insiders(&self) -> usize {
        self.agents.len().saturating_sub(1)
    }

    /// Insider `n` (1-based).
    pub fn insider(&self, n: usize) -> &AgentSpec {
        &self.agents[n]
    }

    pub fn insider_signal(&self, n: usize) -> &InsiderSignal {
        self.agents[n]
            .signal
            .as_ref()
            .expect("validated scenarios give every insider a signal")
    }

    /// Entry times `t_1, ..., t_N`.
    pub fn times(&self) -> Vec<f64> {
        (1..=self.n_insiders())
            .map(|n| self.insider_signal(n).time)
            .collect()
    }

    /// End of period `n`: `t_{n+1}`, or 1 for the last period.
    pub fn period_end(&self, n: usize) -> f64 {
        if n < self.n_insiders() {
            self.insider_signal(n + 1).time
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_scenario(self)
    }

    /// Returns the scenario if it satisfies every invariant.
    pub fn validated(self) -> std::result::Result<Self, Vec<Violation>> {
        let v = self.validate();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(v)
        }
    }

    /// Two insiders entering at 0 and 1/2 into a unit OU market with three
    /// identical CARA agents and unit supply.
    pub fn two_signal_example() -> Self {
        let one = || Mat::from_element(1, 1, 1.0);
        let w = 1.0 / 3.0;
        Self {
            ou: OuParams::scalar(1.0, 0.0, 1.0).expect("valid parameters"),
            x0: Vector::from_element(1, 0.0),
            pi: Vector::from_element(1, 1.0),
            agents: vec![
                AgentSpec {
                    id: 0,
                    gamma: 3.0,
                    omega: w,
                    signal: None,
                },
                AgentSpec {
                    id: 1,
                    gamma: 3.0,
                    omega: w,
                    signal: Some(InsiderSignal {
                        time: 0.0,
                        c: one(),
                        d: one(),
                    }),
                },
                AgentSpec {
                    id: 2,
                    gamma: 3.0,
                    omega: w,
                    signal: Some(InsiderSignal {
                        time: 0.5,
                        c: one(),
                        d: Mat::from_element(1, 1, 2.0),
                    }),
                },
            ],
        }
    }

    pub fn signal_system(&self) -> Result<SignalSystem> {
        SignalSystem::new(self)
    }
}

/// Lists every broken invariant; an empty list means the scenario is valid.
pub fn validate_scenario(s: &MarketScenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push =
        |invariant: &'static str, detail: String| out.push(Violation { invariant, detail });
    let d = s.dim();
    if s.x0.len() != d {
        push(
            "dimension",
            format!("x0 has length {}, factor dimension is {d}", s.x0.len()),
        );
    }
    if s.pi.len() != d {
        push(
            "dimension",
            format!("Pi has length {}, factor dimension is {d}", s.pi.len()),
        );
    }
    if s.agents.len() < 2 {
        push("insider-count", "at least one insider is required".into());
    }
    let total: f64 = s.agents.iter().map(|a| a.omega).sum();
    if (total - 1.0).abs() > 1e-12 {
        push(
            "weight-sum",
            format!("economy weights sum to {total}, expected 1"),
        );
    }
    for (i, a) in s.agents.iter().enumerate() {
        if a.id != i {
            push(
                "agent-ids",
                format!("agent at position {i} has id {}", a.id),
            );
        }
        if !(a.gamma > 0.0 && a.gamma.is_finite()) {
            push(
                "positive-preferences",
                format!("agent {i} has gamma {}", a.gamma),
            );
        }
        if !(a.omega > 0.0 && a.omega.is_finite()) {
            push(
                "positive-preferences",
                format!("agent {i} has omega {}", a.omega),
            );
        }
        match (&a.signal, i) {
            (Some(_), 0) => push("agent-ids", "agent 0 must be uninformed".into()),
            (None, i) if i > 0 => push("agent-ids", format!("insider {i} has no signal")),
            (Some(sig), _) => {
                for (name, m) in [("C", &sig.c), ("D", &sig.d)] {
                    if m.nrows() != d || m.ncols() != d {
                        push(
                            "dimension",
                            format!("insider {i} {name} is {}x{}", m.nrows(), m.ncols()),
                        );
                    } else if !linalg::is_spd(m) {
                        push(
                            "signal-precision-spd",
                            format!("insider {i} {name} is not positive definite"),
                        );
                    } else if linalg::max_abs(&(m - m.transpose()))
                        > 1e-12 * (1.0 + linalg::max_abs(m))
                    {
                        push(
                            "signal-precision-spd",
                            format!("insider {i} {name} is not symmetric"),
                        );
                    }
                }
            }
            _ => {}
        }
    }
    let times: Vec<f64> = s
        .agents
        .iter()
        .skip(1)
        .filter_map(|a| a.signal.as_ref().map(|g| g.time))
        .collect();
    if let Some(&t1) = times.first() {
        if t1 != 0.0 {
            push(
                "time-ordering",
                format!("first entry time is {t1}, expected 0"),
            );
        }
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            push(
                "time-ordering",
                format!("entry times {} and {} are not increasing", w[0], w[1]),
            );
        }
    }
    if let Some(&tn) = times.last() {
        if !(tn < 1.0) {
            push(
                "time-ordering",
                format!("last entry time {tn} is not below 1"),
            );
        }
    }
    out
}

/// `E = (C^{-1} + alpha^{-2} C^{-1} D^{-1} C^{-1})^{-1}`, the precision of the
/// public signal `H`.
pub fn effective_precision(c: &Mat, d: &Mat, alpha: f64) -> Result<Mat> {
    if !(alpha > 0.0) {
        return Err(PceError::InvalidSpec(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let ci = linalg::spd_inverse(c, "signal precision C")?;
    let di = linalg::spd_inverse(d, "noise precision D")?;
    let var = &ci + &ci * di * &ci / (alpha * alpha);
    linalg::spd_inverse(&var, "public signal variance")
}

/// `H = G + alpha^{-1} C^{-1} Z`.
pub fn market_signal(g: &Vector, z: &Vector, c: &Mat, alpha: f64) -> Result<Vector> {
    let step = linalg::solve(c, z, "signal precision C")?;
    Ok(g + step / alpha)
}

/// Public-signal precisions and risk tolerances derived from a scenario.
#[derive(Debug, Clone)]
pub struct SignalSystem {
    alpha0: f64,
    alpha: Vec<f64>,
    c: Vec<Mat>,
    e: Vec<Mat>,
}

impl SignalSystem {
    pub fn new(s: &MarketScenario) -> Result<Self> {
        let n = s.n_insiders();
        let mut alpha = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for k in 1..=n {
            let a = s.insider(k);
            let sig = s.insider_signal(k);
            alpha.push(a.alpha());
            c.push(symmetrize(&sig.c));
            e.push(effective_precision(&sig.c, &sig.d, a.alpha())?);
        }
        Ok(Self {
            alpha0: s.agents[0].alpha(),
            alpha,
            c,
            e,
        })
    }

    pub fn n(&self) -> usize {
        self.e.len()
    }
    /// `E_n`, 1-based.
    pub fn e(&self, n: usize) -> &Mat {
        &self.e[n - 1]
    }
    /// `C_n`, 1-based.
    pub fn c(&self, n: usize) -> &Mat {
        &self.c[n - 1]
    }
    /// `alpha_n`, 1-based; `alpha(0)` is the uninformed agent's.
    pub fn alpha(&self, n: usize) -> f64 {
        if n == 0 {
            self.alpha0
        } else {
            self.alpha[n - 1]
        }
    }
    /// Precisions `E_1, ..., E_n`.
    pub fn precisions(&self, n: usize) -> &[Mat] {
        &self.e[..n]
    }
    /// Sum of `E_m` over `m <= n`.
    pub fn cumulative_precision(&self, n: usize) -> Mat {
        let d = self.e[0].nrows();
        self.e[..n].iter().fold(Mat::zeros(d, d), |acc, m| acc + m)
    }
    /// Representative risk aversion over the agents active in period `n`:
    /// the uninformed agent and insiders `1..=n`.
    pub fn gamma_bar(&self, n: usize) -> f64 {
        1.0 / (self.alpha0 + self.alpha[..n].iter().sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_precision_examples() {
        let one = Mat::from_element(1, 1, 1.0);
        let e1 = effective_precision(&one, &one, 1.0 / 9.0).unwrap();
        assert!((e1[(0, 0)] - 1.0 / 82.0).abs() < 1e-15);
        let e2 = effective_precision(&one, &Mat::from_element(1, 1, 2.0), 1.0 / 9.0).unwrap();
        assert!((e2[(0, 0)] - 1.0 / 41.5).abs() < 1e-15);
        let c = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let big = effective_precision(&c, &Mat::identity(2, 2), 1e9).unwrap();
        assert!(linalg::max_abs(&(&big - &c)) < 1e-6 * linalg::max_abs(&c));
    }

    #[test]
    fn market_signal_examples() {
        let g = Vector::from_element(1, 1.5);
        let z = Vector::from_element(1, 0.2);
        let one = Mat::from_element(1, 1, 1.0);
        assert!((market_signal(&g, &z, &one, 1.0 / 9.0).unwrap()[0] - 3.3).abs() < 1e-14);
        assert_eq!(market_signal(&g, &Vector::zeros(1), &one, 0.3).unwrap(), g);
        let zz = Vector::from_row_slice(&[0.4, -0.6]);
        let h = market_signal(&Vector::zeros(2), &zz, &Mat::identity(2, 2), 1.0).unwrap();
        assert_eq!(h, zz);
    }

    #[test]
    fn example_scenario_is_valid() {
        let s = MarketScenario::two_signal_example();
        assert!(s.validate().is_empty(), "{:?}", s.validate());
        let sys = s.signal_system().unwrap();
        assert!((sys.gamma_bar(2) - 3.0).abs() < 1e-14);
        assert!((sys.gamma_bar(1) - 4.5).abs() < 1e-14);
    }

    #[test]
    fn weight_violation_is_named() {
        let mut s = MarketScenario::two_signal_example();
        s.agents[0].omega = 1.0 / 3.0 - 0.1;
        let v = s.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].invariant, "weight-sum");
    }

    #[test]
    fn time_violation_is_named() {
        let mut s = MarketScenario::two_signal_example();
        s.agents[2].signal.as_mut().unwrap().time = 1.0;
        let v = s.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].invariant, "time-ordering");
    }
}
