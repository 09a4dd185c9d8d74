//! Backward induction over the trading periods.
//!
//! Stage `n` covers `[t_n, t_{n+1}]` (with `t_{N+1} = 1`); its state is
//! `z = (x, h_1, .., h_n)` and its participants are the uninformed agent `0`
//! and insiders `1..=n`. Every agent's problem is written against the plain
//! OU law: the conditional-density factor `exp(l)` is absorbed by the
//! martingale property, so stage objects only carry the scaled certainty
//! equivalents `E^j` (the "checked" endowments), quadratic in `z`.
//!
//! Insider `k` holds the static position `C_k g_k / gamma_k` on top of the
//! position `psi^k` computed here, which does not depend on `g_k`. Market
//! clearing for `psi` then uses the supply `Pi - sum_k alpha_k C_k h_k`.

use crate::common::{
    solve_continuous, solve_single_period, ContinuousProblem, ContinuousSolution, Endowment,
    Participant, SinglePeriodProblem, SinglePeriodSolution,
};
use crate::densities::SignalDensities;
use crate::error::{PceError, Result};
use crate::gaussian::OuParams;
use crate::linalg;
use crate::lq::{fit_affine, fit_lq_many, AffineMap, LqForm, StackedIndex};
use crate::market::{MarketScenario, SignalSystem};
use crate::quadrature::normal_tensor_rule;
use crate::{Mat, Vector};

/// Tolerance for algebraic identities between stages.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Tolerance for clearing evaluated along simulated paths.
pub const PATH_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pref {
    gamma: f64,
    omega: f64,
}

/// `Pi - sum_{k <= n} alpha_k C_k h_k` as a map of `z`.
fn supply_map(scenario: &MarketScenario, sys: &SignalSystem, index: StackedIndex) -> AffineMap {
    let d = index.d;
    let mut lin = Mat::zeros(d, index.dim());
    for k in 1..=index.n {
        let r = index.block(k);
        lin.view_mut((0, r.start), (d, d))
            .copy_from(&(sys.c(k) * (-sys.alpha(k))));
    }
    AffineMap {
        lin,
        offset: scenario.pi.clone(),
    }
}

fn prefs(scenario: &MarketScenario, count: usize) -> Vec<Pref> {
    scenario.agents[..count]
        .iter()
        .map(|a| Pref {
            gamma: a.gamma,
            omega: a.omega,
        })
        .collect()
}

/// The continuous-trading part of stage `n`.
#[derive(Debug, Clone)]
pub struct ContinuousStage {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub index: StackedIndex,
    /// Claim delivered at `b`, affine in `z`.
    pub payoff: AffineMap,
    /// Scaled certainty equivalents at `b` for participants `0..=n`.
    pub terminal_endowments: Vec<LqForm>,
    /// Scaled certainty equivalents at `a`.
    pub start_endowments: Vec<LqForm>,
    pub supply: AffineMap,
    ou: OuParams,
    prefs: Vec<Pref>,
    m_bar: Mat,
    gamma: f64,
}

impl ContinuousStage {
    #[allow(clippy::too_many_arguments)]
    fn solve(
        scenario: &MarketScenario,
        sys: &SignalSystem,
        n: usize,
        a: f64,
        b: f64,
        payoff: AffineMap,
        terminal_endowments: Vec<LqForm>,
    ) -> Result<Self> {
        let index = StackedIndex::new(scenario.dim(), n);
        let mut stage = Self {
            n,
            a,
            b,
            index,
            payoff,
            terminal_endowments,
            start_endowments: Vec::new(),
            supply: supply_map(scenario, sys, index),
            ou: scenario.ou.clone(),
            prefs: prefs(scenario, n + 1),
            m_bar: Mat::zeros(0, 0),
            gamma: 0.0,
        };
        let probe = stage.solution_at(&Vector::zeros(index.dim()))?;
        stage.m_bar = probe.m_bar().clone();
        stage.gamma = probe.gamma();
        let count = n + 1;
        stage.start_endowments = fit_lq_many(index.dim(), count, |z| {
            let sol = stage.solution_at(z)?;
            let x = index.extract(z, 0);
            (0..count).map(|j| sol.scaled_ce(j, &x)).collect()
        })?;
        Ok(stage)
    }

    pub fn participants(&self) -> usize {
        self.prefs.len()
    }

    pub fn gamma(&self, j: usize) -> f64 {
        self.prefs[j].gamma
    }

    pub fn omega(&self, j: usize) -> f64 {
        self.prefs[j].omega
    }

    /// Quadratic coefficient of the state-price density (independent of `h`).
    pub fn m_bar(&self) -> &Mat {
        &self.m_bar
    }

    pub fn representative_gamma(&self) -> f64 {
        self.gamma
    }

    /// Common-information problem on `[a, b]` with the signals fixed at `z`.
    pub fn problem_at(&self, z: &Vector) -> Result<ContinuousProblem> {
        linalg::require_len(z, self.index.dim(), "stage state")?;
        let xpos = self.index.positions(&[0]);
        let mut hz = z.clone();
        hz.rows_range_mut(self.index.block(0)).fill(0.0);
        let agents = self
            .prefs
            .iter()
            .zip(&self.terminal_endowments)
            .map(|(p, e)| {
                Ok(Participant {
                    gamma: p.gamma,
                    omega: p.omega,
                    endowment: Endowment::from_lq(&e.restrict(&xpos, z)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContinuousProblem {
            ou: self.ou.clone(),
            a: self.a,
            b: self.b,
            payoff_m: self.payoff.block(&self.index, 0),
            payoff_v: self.payoff.eval(&hz),
            agents,
            supply: self.supply.eval(z),
        })
    }

    pub fn solution_at(&self, z: &Vector) -> Result<ContinuousSolution> {
        solve_continuous(&self.problem_at(z)?)
    }

    pub fn price(&self, t: f64, z: &Vector) -> Result<Vector> {
        self.solution_at(z)?.price(t, &self.index.extract(z, 0))
    }

    /// `M^{n,X}_t`, the sensitivity of the price to the factor.
    pub fn price_factor_loading(&self, t: f64) -> Result<Mat> {
        self.solution_at(&Vector::zeros(self.index.dim()))?
            .price_jacobian(t)
    }

    /// Translated position `psi^j` (for the uninformed agent, the position).
    pub fn hedge(&self, j: usize, t: f64, z: &Vector) -> Result<Vector> {
        self.solution_at(z)?.hedge(j, t, &self.index.extract(z, 0))
    }

    /// Hedge of an agent with the given preferences and terminal endowment,
    /// facing this stage's prices.
    pub fn hedge_with_endowment(
        &self,
        gamma: f64,
        endowment: &LqForm,
        t: f64,
        z: &Vector,
    ) -> Result<Vector> {
        let mut p = self.problem_at(z)?;
        let sol = solve_continuous(&p)?;
        let xpos = self.index.positions(&[0]);
        p.agents.push(Participant {
            gamma,
            omega: 1.0,
            endowment: Endowment::from_lq(&endowment.restrict(&xpos, z)?),
        });
        // The extra agent is a price taker: reuse the market's density.
        let taker = ContinuousSolution::with_density(
            p,
            sol.gamma(),
            sol.m_bar().clone(),
            sol.v_bar().clone(),
        );
        let j = taker.problem().agents.len() - 1;
        taker.hedge(j, t, &self.index.extract(z, 0))
    }

    pub fn market_price_of_risk(&self, t: f64, z: &Vector) -> Result<Vector> {
        self.solution_at(z)?
            .market_price_of_risk(t, &self.index.extract(z, 0))
    }

    pub fn market_price_of_risk_from_density(&self, t: f64, z: &Vector) -> Result<Vector> {
        self.solution_at(z)?
            .market_price_of_risk_from_density(t, &self.index.extract(z, 0))
    }

    /// Price, translated positions and market price of risk at time `t` as
    /// affine maps of `z`.
    pub fn snapshot(&self, t: f64) -> Result<StageSnapshot> {
        let d = self.index.d;
        let count = self.participants();
        let all = fit_affine(self.index.dim(), |z| {
            let sol = self.solution_at(z)?;
            let x = self.index.extract(z, 0);
            let mut out = Vec::with_capacity(d * (count + 2));
            out.extend(sol.price(t, &x)?.iter());
            out.extend(sol.market_price_of_risk(t, &x)?.iter());
            for j in 0..count {
                out.extend(sol.hedge(j, t, &x)?.iter());
            }
            Ok(Vector::from_vec(out))
        })?;
        let rows = |i: usize| AffineMap {
            lin: all.lin.rows(i * d, d).into_owned(),
            offset: all.offset.rows(i * d, d).into_owned(),
        };
        Ok(StageSnapshot {
            t,
            price: rows(0),
            mpr: rows(1),
            hedges: (0..count).map(|j| rows(j + 2)).collect(),
        })
    }
}

/// Stage quantities at a fixed time, affine in the stage state.
#[derive(Debug, Clone)]
pub struct StageSnapshot {
    pub t: f64,
    pub price: AffineMap,
    pub mpr: AffineMap,
    pub hedges: Vec<AffineMap>,
}

/// The single-period problem at `t_n`, when `H_n` is announced.
#[derive(Debug, Clone)]
pub struct JumpStage {
    pub n: usize,
    pub time: f64,
    /// Pre-jump state layout `(x, h_1, .., h_{n-1})`.
    pub index: StackedIndex,
    /// Post-jump price at `t_n`, affine in `(x, h_1, .., h_n)`.
    pub post_price: AffineMap,
    /// Post-jump scaled certainty equivalents of the agents trading at the jump.
    pub post_endowments: Vec<LqForm>,
    /// Pre-jump price, affine in the pre-jump state.
    pub price: AffineMap,
    /// Pre-jump scaled certainty equivalents of agents `0..n`.
    pub pre_endowments: Vec<LqForm>,
    pub supply: AffineMap,
    signal_cov: Mat,
    prefs: Vec<Pref>,
}

impl JumpStage {
    fn solve(
        scenario: &MarketScenario,
        sys: &SignalSystem,
        post: &ContinuousStage,
    ) -> Result<Self> {
        let n = post.n;
        let index = post.index.drop_last();
        let post_price = fit_affine(post.index.dim(), |z| post.price(post.a, z))?;
        let mut jump = Self {
            n,
            time: post.a,
            index,
            post_price,
            post_endowments: post.start_endowments[..n].to_vec(),
            price: AffineMap {
                lin: Mat::zeros(0, 0),
                offset: Vector::zeros(0),
            },
            pre_endowments: Vec::new(),
            supply: supply_map(scenario, sys, index),
            signal_cov: linalg::spd_inverse(sys.e(n), "signal precision")?,
            prefs: prefs(scenario, n),
        };
        jump.price = fit_affine(index.dim(), |z| Ok(jump.solve_at(z)?.price))?;
        jump.pre_endowments = fit_lq_many(index.dim(), n, |z| Ok(jump.solve_at(z)?.scaled_ce))?;
        Ok(jump)
    }

    fn post_state(&self, z: &Vector, h: &Vector) -> Vector {
        let mut full = Vector::zeros(z.len() + h.len());
        full.rows_mut(0, z.len()).copy_from(z);
        full.rows_mut(z.len(), h.len()).copy_from(h);
        full
    }

    /// Single-period problem in `H_n ~ N(0, E_n^{-1})` given the pre-jump state.
    pub fn problem_at(&self, z: &Vector) -> Result<SinglePeriodProblem> {
        linalg::require_len(z, self.index.dim(), "pre-jump state")?;
        let d = self.index.d;
        let zero = Vector::zeros(d);
        let base = self.post_state(z, &zero);
        let post_index = StackedIndex::new(d, self.n);
        let hpos = post_index.positions(&[self.n]);
        let agents = self
            .prefs
            .iter()
            .zip(&self.post_endowments)
            .map(|(p, e)| {
                Ok(Participant {
                    gamma: p.gamma,
                    omega: p.omega,
                    endowment: Endowment::from_lq(&e.restrict(&hpos, &base)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SinglePeriodProblem {
            agents,
            payoff_m: self.post_price.block(&post_index, self.n),
            payoff_v: self.post_price.eval(&base),
            mu_h: zero,
            sigma_h: self.signal_cov.clone(),
            supply: self.supply.eval(z),
        })
    }

    pub fn solve_at(&self, z: &Vector) -> Result<SinglePeriodSolution> {
        solve_single_period(&self.problem_at(z)?)
    }

    /// Translated jump positions of agents `0..n` (insider `n` is not yet trading).
    pub fn trades(&self, z: &Vector) -> Result<Vec<Vector>> {
        Ok(self.solve_at(z)?.strategies)
    }

    pub fn participants(&self) -> usize {
        self.prefs.len()
    }

    pub fn gamma(&self, j: usize) -> f64 {
        self.prefs[j].gamma
    }

    pub fn omega(&self, j: usize) -> f64 {
        self.prefs[j].omega
    }
}

#[derive(Debug, Clone)]
pub struct StageSolution {
    pub continuous: ContinuousStage,
    /// The announcement of `H_n` at the start of the stage (`n >= 2`).
    pub jump: Option<JumpStage>,
}

impl StageSolution {
    pub fn n(&self) -> usize {
        self.continuous.n
    }
}

/// Full equilibrium: one stage per insider.
#[derive(Debug, Clone)]
pub struct PceSolution {
    pub scenario: MarketScenario,
    pub signals: SignalSystem,
    pub densities: SignalDensities,
    pub stages: Vec<StageSolution>,
}

/// The terminal scaled endowments: minus the log-likelihood of the
/// participant's information, with the private-signal term removed.
fn terminal_endowments(scenario: &MarketScenario, sys: &SignalSystem) -> Result<Vec<LqForm>> {
    let n = sys.n();
    let index = StackedIndex::new(scenario.dim(), n);
    let d = index.d;
    let mut out = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let mut a = Mat::zeros(index.dim(), index.dim());
        for m in 1..=n {
            let r = index.block(m);
            let mut xx = a.view_mut((0, 0), (d, d));
            if m == j {
                xx += sys.c(m);
                continue;
            }
            xx += sys.e(m);
            a.view_mut((0, r.start), (d, d)).copy_from(&(-sys.e(m)));
            a.view_mut((r.start, 0), (d, d))
                .copy_from(&(-sys.e(m).transpose()));
        }
        out.push(LqForm::new(a, Vector::zeros(index.dim()), 0.0)?);
    }
    Ok(out)
}

/// Solves the equilibrium backwards from `t = 1`.
pub fn solve_pce(scenario: &MarketScenario) -> Result<PceSolution> {
    let violations = scenario.validate();
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(PceError::InvalidSpec(text.join("; ")));
    }
    let sys = scenario.signal_system()?;
    let densities = SignalDensities::new(scenario)?;
    let big_n = sys.n();
    let d = scenario.dim();
    let times = scenario.times();

    let last_index = StackedIndex::new(d, big_n);
    let mut terminal_lin = Mat::zeros(d, last_index.dim());
    terminal_lin.view_mut((0, 0), (d, d)).fill_with_identity();
    let mut payoff = AffineMap {
        lin: terminal_lin,
        offset: Vector::zeros(d),
    };
    let mut endowments = terminal_endowments(scenario, &sys)?;
    let mut stages_rev: Vec<StageSolution> = Vec::with_capacity(big_n);
    for n in (1..=big_n).rev() {
        let a = times[n - 1];
        let b = scenario.period_end(n);
        let stage =
            ContinuousStage::solve(scenario, &sys, n, a, b, payoff.clone(), endowments.clone())
                .map_err(|e| e.at_stage(n))?;
        let jump = if n >= 2 {
            let j = JumpStage::solve(scenario, &sys, &stage).map_err(|e| e.at_stage(n))?;
            payoff = j.price.clone();
            endowments = j.pre_endowments.clone();
            Some(j)
        } else {
            None
        };
        stages_rev.push(StageSolution {
            continuous: stage,
            jump,
        });
    }
    stages_rev.reverse();
    let sol = PceSolution {
        scenario: scenario.clone(),
        signals: sys,
        densities,
        stages: stages_rev,
    };
    sol.check_structure()?;
    Ok(sol)
}

/// Deterministic probe states of dimension `dim`.
pub fn probe_states(dim: usize, count: usize) -> Vec<Vector> {
    (0..count)
        .map(|k| {
            Vector::from_iterator(
                dim,
                (0..dim).map(|i| {
                    let s = ((i * 6_151 + k * 12_289 + 17) % 1_009) as f64;
                    2.0 * (s / 504.5 - 1.0)
                }),
            )
        })
        .collect()
}

impl PceSolution {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage `n`, 1-based.
    pub fn stage(&self, n: usize) -> &StageSolution {
        &self.stages[n - 1]
    }

    pub fn dim(&self) -> usize {
        self.scenario.dim()
    }

    /// Stage whose period contains `t`; the left stage at period boundaries
    /// other than `t_1`.
    pub fn stage_at(&self, t: f64) -> &StageSolution {
        self.stages
            .iter()
            .find(|s| t <= s.continuous.b)
            .unwrap_or_else(|| self.stages.last().expect("at least one stage"))
    }

    /// Runtime invariants: terminal identity, stitching and full rank.
    pub fn check_structure(&self) -> Result<()> {
        let last = self.stages.last().expect("at least one stage");
        let d = self.dim();
        for z in probe_states(last.continuous.index.dim(), 3) {
            let s = last.continuous.price(1.0, &z)?;
            let x = last.continuous.index.extract(&z, 0);
            if linalg::max_abs_vec(&(s - &x)) > IDENTITY_TOL * (1.0 + linalg::max_abs_vec(&x)) {
                return Err(PceError::AffinityViolated(
                    "terminal price differs from the factor".into(),
                ));
            }
        }
        for st in &self.stages {
            let n = st.n();
            let c = &st.continuous;
            if n < self.n_stages() {
                let next = self
                    .stage(n + 1)
                    .jump
                    .as_ref()
                    .expect("later stages start with a jump");
                for z in probe_states(c.index.dim(), 5) {
                    let left = c.price(c.b, &z)?;
                    let right = next.price.eval(&z);
                    let err = linalg::max_abs_vec(&(&left - &right));
                    if err > IDENTITY_TOL * (1.0 + linalg::max_abs_vec(&right)) {
                        return Err(PceError::AffinityViolated(format!(
                            "stage {n} price does not meet the next pre-jump price ({err:.3e})"
                        ))
                        .at_stage(n));
                    }
                }
            }
            for i in 0..100 {
                let t = c.a + (c.b - c.a) * i as f64 / 99.0;
                let m = c.price_factor_loading(t)?;
                let s = linalg::min_singular_value(&m);
                if s <= 1e-8 {
                    return Err(PceError::DegenerateVolatility(format!(
                        "factor loading singular at t={t} (min singular value {s:.3e})"
                    ))
                    .at_stage(n));
                }
            }
            debug_assert_eq!(c.index.d, d);
        }
        Ok(())
    }

    /// Insider `k`'s static position `C_k g_k / gamma_k`.
    pub fn static_position(&self, k: usize, g: &Vector) -> Vector {
        self.signals.c(k) * g / self.scenario.agents[k].gamma
    }

    /// Actual position of agent `j` in stage `n` at time `t`.
    pub fn position(
        &self,
        n: usize,
        j: usize,
        t: f64,
        z: &Vector,
        g: Option<&Vector>,
    ) -> Result<Vector> {
        let psi = self.stage(n).continuous.hedge(j, t, z)?;
        Ok(self.untranslate(j, psi, g))
    }

    /// Actual jump positions at `t_n` of agents `0..n`; `g[k-1]` is insider `k`'s signal.
    pub fn jump_positions(&self, n: usize, z: &Vector, g: &[Vector]) -> Result<Vec<Vector>> {
        let jump = self
            .stage(n)
            .jump
            .as_ref()
            .ok_or_else(|| PceError::InvalidSpec(format!("stage {n} has no jump")))?;
        Ok(jump
            .trades(z)?
            .into_iter()
            .enumerate()
            .map(|(j, psi)| self.untranslate(j, psi, if j == 0 { None } else { g.get(j - 1) }))
            .collect())
    }

    fn untranslate(&self, j: usize, psi: Vector, g: Option<&Vector>) -> Vector {
        match (j, g) {
            (0, _) | (_, None) => psi,
            (k, Some(g)) => psi + self.static_position(k, g),
        }
    }

    /// Insider `k`'s hedge in stage `n` computed without the static-position
    /// translation: the private-signal term stays in the terminal endowment.
    pub fn untranslated_hedge(
        &self,
        n: usize,
        k: usize,
        t: f64,
        z: &Vector,
        g: &Vector,
    ) -> Result<Vector> {
        let c = &self.stage(n).continuous;
        let dim = c.index.dim();
        // -g'C_k S_b(z): the claim held statically is worth C_k g_k / gamma_k units.
        let lin = c.payoff.lin.transpose() * (self.signals.c(k) * g);
        let shift = LqForm::new(
            Mat::zeros(dim, dim),
            -lin,
            -g.dot(&(self.signals.c(k) * &c.payoff.offset)),
        )?;
        let endowment = c.terminal_endowments[k].add(&shift)?;
        c.hedge_with_endowment(c.gamma(k), &endowment, t, z)
    }

    /// Full scaled certainty equivalent at the start of stage `n`, including
    /// the conditional-density and static-position terms. Non-negative
    /// because not trading is always feasible.
    pub fn full_start_value(
        &self,
        n: usize,
        j: usize,
        z: &Vector,
        g: Option<&Vector>,
    ) -> Result<f64> {
        let c = &self.stage(n).continuous;
        let (x, h) = c.index.split(z);
        let checked = c.start_endowments[j].eval(z);
        if j == 0 {
            return Ok(self.densities.ell_n(n, c.a, &x, &h)? + checked);
        }
        let g = g.ok_or_else(|| {
            PceError::InvalidSpec("insider value needs the private signal".into())
        })?;
        let price = c.price(c.a, z)?;
        Ok(
            self.densities.ell_nk(n, j, c.a, &x, &h, g)? - g.dot(&(self.signals.c(j) * price))
                + checked,
        )
    }

    /// First-order condition at the jump of stage `n` for agent `j`,
    /// integrated against the agent's conditional law of `H_n`:
    /// `|E[(S - p) w] / E[w]|` with `w` the marginal-utility weight.
    pub fn jump_foc_residual(
        &self,
        n: usize,
        j: usize,
        z: &Vector,
        g: Option<&Vector>,
        order: usize,
    ) -> Result<f64> {
        let jump = self
            .stage(n)
            .jump
            .as_ref()
            .ok_or_else(|| PceError::InvalidSpec(format!("stage {n} has no jump")))?;
        let idx = jump.index;
        let (x, h_prev) = idx.split(z);
        let t = jump.time;
        let (mu, cov) = match j {
            0 => self.densities.jump_signal_moments(n, t, &x, &h_prev)?,
            k => self.densities.jump_signal_moments_insider(
                n,
                k,
                t,
                &x,
                &h_prev,
                g.ok_or_else(|| {
                    PceError::InvalidSpec("insider check needs the private signal".into())
                })?,
            )?,
        };
        let p = jump.price.eval(z);
        let pis = self.jump_positions(n, z, &g.map(|g| vec![g.clone(); n]).unwrap_or_default())?;
        let pi = &pis[j];
        let gamma = jump.gamma(j);
        let l = linalg::psd_factor(&cov);
        let d = idx.d;
        let (pts, wts) = normal_tensor_rule(order, d);
        let mut logs = Vec::with_capacity(pts.len());
        let mut gaps = Vec::with_capacity(pts.len());
        for (u, w) in pts.iter().zip(&wts) {
            let hn = &mu + &l * Vector::from_column_slice(u);
            let zn = jump.post_state(z, &hn);
            let s = jump.post_price.eval(&zn);
            let value = self.full_start_value(n, j, &zn, g)?;
            logs.push(w.ln() - gamma * pi.dot(&(&s - &p)) - value);
            gaps.push(s - &p);
        }
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut num = Vector::zeros(d);
        let mut den = 0.0;
        for (lw, gap) in logs.iter().zip(&gaps) {
            let w = (lw - top).exp();
            num += gap * w;
            den += w;
        }
        Ok(linalg::max_abs_vec(&(num / den)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn example() -> PceSolution {
        solve_pce(&MarketScenario::two_signal_example()).unwrap()
    }

    #[test]
    fn last_period_density_matches_closed_form() {
        let sol = example();
        let sys = &sol.signals;
        let gbar = sys.gamma_bar(2);
        let mut want = 0.0;
        for n in 1..=2 {
            let e = sys.e(n)[(0, 0)];
            want += e + gbar * sys.alpha(n) * (sys.c(n)[(0, 0)] - e);
        }
        let got = sol.stage(2).continuous.m_bar()[(0, 0)];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.690_861).abs() < 1e-6);
    }

    #[test]
    fn structure_of_example() {
        let sol = example();
        assert_eq!(sol.n_stages(), 2);
        assert!(sol.stage(1).jump.is_none());
        let jump = sol.stage(2).jump.as_ref().unwrap();
        assert_eq!(jump.time, 0.5);
        assert_eq!(jump.participants(), 2);
    }

    #[test]
    fn insider_position_is_static_in_private_signal() {
        let sol = example();
        for n in 1..=2 {
            let c = &sol.stage(n).continuous;
            for z in probe_states(c.index.dim(), 4) {
                for k in 1..=n {
                    for t in [c.a, 0.5 * (c.a + c.b)] {
                        let psi = c.hedge(k, t, &z).unwrap();
                        for g in [dvector![-1.3], dvector![2.2]] {
                            let full = sol.untranslated_hedge(n, k, t, &z, &g).unwrap();
                            let err = (full - sol.static_position(k, &g) - &psi).amax();
                            assert!(err < 1e-10, "stage {n} insider {k}: {err}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn jump_first_order_conditions_hold() {
        let sol = example();
        for z in probe_states(2, 5) {
            let r0 = sol.jump_foc_residual(2, 0, &z, None, 80).unwrap();
            assert!(r0 < 1e-9, "uninformed residual {r0}");
            for g in [dvector![0.7], dvector![-1.5]] {
                let r1 = sol.jump_foc_residual(2, 1, &z, Some(&g), 80).unwrap();
                assert!(r1 < 1e-9, "insider residual {r1}");
            }
        }
    }

    #[test]
    fn start_values_are_non_negative() {
        let sol = example();
        for n in 1..=2 {
            let dim = sol.stage(n).continuous.index.dim();
            for z in probe_states(dim, 6) {
                assert!(sol.full_start_value(n, 0, &z, None).unwrap() >= -1e-12);
                for k in 1..=n {
                    for g in [dvector![0.0], dvector![1.8], dvector![-2.5]] {
                        let v = sol.full_start_value(n, k, &z, Some(&g)).unwrap();
                        assert!(v >= -1e-12, "stage {n} insider {k}: {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn jump_clears_with_noise_traders() {
        let sol = example();
        let s = &sol.scenario;
        let alpha1 = s.agents[1].alpha();
        for (i, z) in probe_states(2, 10).into_iter().enumerate() {
            let z1 = dvector![0.3 * i as f64 - 1.2];
            let h1 = z.rows(1, 1).into_owned();
            // H_1 = G_1 + Z_1 / (alpha_1 C_1) with C_1 = 1.
            let g1 = &h1 - &z1 / alpha1;
            let pis = sol.jump_positions(2, &z, &[g1]).unwrap();
            let total = &pis[0] * s.agents[0].omega + &pis[1] * s.agents[1].omega + &z1;
            assert!((total - &s.pi).amax() < 1e-10);
        }
    }

    #[test]
    fn single_insider_market_is_one_stage() {
        let mut s = MarketScenario::two_signal_example();
        s.agents.truncate(2);
        s.agents[0].omega = 0.5;
        s.agents[1].omega = 0.5;
        let sol = solve_pce(&s).unwrap();
        assert_eq!(sol.n_stages(), 1);
        let c = &sol.stage(1).continuous;
        assert_eq!(c.a, 0.0);
        assert_eq!(c.b, 1.0);
    }
}
