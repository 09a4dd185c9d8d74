//! Path simulation of the factor, signals and noise trades, with equilibrium
//! prices, positions and market price of risk evaluated along each path.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::engine::{PceSolution, StageSnapshot};
use crate::error::{PceError, Result};
use crate::linalg;
use crate::lq::{fit_affine, AffineMap, StackedIndex};
use crate::market::market_signal;
use crate::rng;
use crate::{Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub n_paths: usize,
    /// Points per period, endpoints included.
    pub grid: usize,
    /// Worker count; `None` uses `PCE_LAB_THREADS` or the machine default.
    pub threads: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_paths: 100,
            grid: 500,
            threads: None,
        }
    }
}

/// One evaluation point of a path. Positions are `None` for insiders who
/// have not yet received their signal.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRow {
    pub stage: usize,
    pub t: f64,
    pub x: Vector,
    pub price: Vector,
    pub mpr: Vector,
    pub positions: Vec<Option<Vector>>,
    pub residual: f64,
}

/// Positions around the announcement at `t_n`: the left limit of the
/// previous period, the jump trade (chosen before `H_n` is seen) and the
/// first position of the new period.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    pub stage: usize,
    pub t: f64,
    pub pre_price: Vector,
    pub post_price: Vector,
    pub pre: Vec<Option<Vector>>,
    pub jump: Vec<Option<Vector>>,
    pub post: Vec<Option<Vector>>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub path_id: usize,
    pub rows: Vec<PathRow>,
    /// Standard normal innovations driving the exact factor transitions.
    pub innovations: Vec<Vector>,
    pub x1: Vector,
    pub g: Vec<Vector>,
    pub y: Vec<Vector>,
    pub z: Vec<Vector>,
    pub h: Vec<Vector>,
    pub jumps: Vec<JumpRecord>,
    /// Terminal trading gains per agent, including jump trades.
    pub wealth: Vec<f64>,
}

/// Per-run precomputation shared by every path.
struct Plan {
    /// `(stage, t)` for every row, in order.
    rows: Vec<(usize, f64)>,
    /// Distinct times, increasing, ending at 1.
    times: Vec<f64>,
    /// Row index to position in `times`.
    row_time: Vec<usize>,
    transitions: Vec<(Mat, Vector, Mat)>,
    snapshots: Vec<StageSnapshot>,
    jump_trades: Vec<Option<AffineMap>>,
    c_chol: Vec<Mat>,
    d_chol: Vec<Mat>,
}

fn grid_times(a: f64, b: f64, grid: usize) -> Vec<f64> {
    (0..grid)
        .map(|i| {
            if i + 1 == grid {
                b
            } else {
                a + (b - a) * i as f64 / (grid - 1) as f64
            }
        })
        .collect()
}

fn normal_vector<R: Rng>(rng: &mut R, d: usize) -> Vector {
    Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn plan(sol: &PceSolution, cfg: &SimConfig) -> Result<Plan> {
    if cfg.grid < 2 {
        return Err(PceError::InvalidSpec(format!(
            "grid must have at least 2 points, got {}",
            cfg.grid
        )));
    }
    let mut rows = Vec::new();
    for st in &sol.stages {
        let c = &st.continuous;
        for t in grid_times(c.a, c.b, cfg.grid) {
            rows.push((c.n, t));
        }
    }
    let mut times: Vec<f64> = Vec::new();
    let mut row_time = Vec::with_capacity(rows.len());
    for &(_, t) in &rows {
        if times.last() != Some(&t) {
            times.push(t);
        }
        row_time.push(times.len() - 1);
    }
    let ou = &sol.scenario.ou;
    let transitions = times
        .windows(2)
        .map(|w| {
            let tau = w[1] - w[0];
            let decay = ou.decay(tau);
            let drift = (Mat::identity(ou.dim(), ou.dim()) - &decay) * ou.theta();
            (decay, drift, linalg::psd_factor(&ou.cov(tau)))
        })
        .collect();
    let snapshots = rows
        .par_iter()
        .map(|&(n, t)| {
            sol.stage(n)
                .continuous
                .snapshot(t)
                .map_err(|e| e.at_stage(n))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jump_trades = vec![None];
    for st in sol.stages.iter().skip(1) {
        let jump = st.jump.as_ref().expect("later stages start with a jump");
        jump_trades.push(Some(fit_affine(jump.index.dim(), |z| {
            let trades = jump.trades(z)?;
            Ok(Vector::from_iterator(
                trades.len() * jump.index.d,
                trades.iter().flat_map(|v| v.iter().copied()),
            ))
        })?));
    }
    let sys = &sol.signals;
    let mut c_chol = Vec::new();
    let mut d_chol = Vec::new();
    for k in 1..=sys.n() {
        let sig = sol.scenario.insider_signal(k);
        c_chol.push(linalg::psd_factor(&linalg::spd_inverse(
            &sig.c,
            "signal precision",
        )?));
        d_chol.push(linalg::psd_factor(&linalg::spd_inverse(
            &sig.d,
            "noise precision",
        )?));
    }
    Ok(Plan {
        rows,
        times,
        row_time,
        transitions,
        snapshots,
        jump_trades,
        c_chol,
        d_chol,
    })
}

fn positions_at(
    sol: &PceSolution,
    snap: &StageSnapshot,
    n: usize,
    z: &Vector,
    g: &[Vector],
) -> Vec<Option<Vector>> {
    let total = sol.scenario.agents.len();
    (0..total)
        .map(|j| {
            if j > n {
                return None;
            }
            let psi = snap.hedges[j].eval(z);
            Some(if j == 0 {
                psi
            } else {
                psi + sol.static_position(j, &g[j - 1])
            })
        })
        .collect()
}

fn residual(
    sol: &PceSolution,
    positions: &[Option<Vector>],
    z_noise: &[Vector],
    active_noise: usize,
) -> f64 {
    let s = &sol.scenario;
    let mut r = s.pi.clone();
    for (j, p) in positions.iter().enumerate() {
        if let Some(p) = p {
            r -= p * s.agents[j].omega;
        }
    }
    for zk in &z_noise[..active_noise] {
        r -= zk;
    }
    linalg::max_abs_vec(&r)
}

fn simulate_path(sol: &PceSolution, plan: &Plan, cfg: &SimConfig, path_id: usize) -> PathSample {
    let d = sol.dim();
    let ou = &sol.scenario.ou;
    let mut frng = rng::stream(cfg.seed, path_id as u64, rng::FACTOR);
    let mut xs = Vec::with_capacity(plan.times.len());
    let mut innovations = Vec::with_capacity(plan.transitions.len());
    xs.push(sol.scenario.x0.clone());
    for (decay, drift, l) in &plan.transitions {
        let e = normal_vector(&mut frng, d);
        let next = decay * xs.last().expect("non-empty") + drift + l * &e;
        innovations.push(e);
        xs.push(next);
    }
    debug_assert_eq!(ou.dim(), d);
    let x1 = xs.last().expect("non-empty").clone();
    let big_n = sol.n_stages();
    let mut yrng = rng::stream(cfg.seed, path_id as u64, rng::PRIVATE_NOISE);
    let mut zrng = rng::stream(cfg.seed, path_id as u64, rng::NOISE_TRADERS);
    let mut y = Vec::with_capacity(big_n);
    let mut z_noise = Vec::with_capacity(big_n);
    let mut g = Vec::with_capacity(big_n);
    let mut h = Vec::with_capacity(big_n);
    for k in 1..=big_n {
        let yk = &plan.c_chol[k - 1] * normal_vector(&mut yrng, d);
        let zk = &plan.d_chol[k - 1] * normal_vector(&mut zrng, d);
        let gk = &x1 + &yk;
        let hk = market_signal(&gk, &zk, sol.signals.c(k), sol.signals.alpha(k))
            .expect("validated signal precisions");
        y.push(yk);
        z_noise.push(zk);
        g.push(gk);
        h.push(hk);
    }

    let mut rows = Vec::with_capacity(plan.rows.len());
    for (i, &(n, t)) in plan.rows.iter().enumerate() {
        let x = &xs[plan.row_time[i]];
        let z = StackedIndex::new(d, n).stack(x, &h[..n]);
        let snap = &plan.snapshots[i];
        let positions = positions_at(sol, snap, n, &z, &g);
        let res = residual(sol, &positions, &z_noise, n);
        rows.push(PathRow {
            stage: n,
            t,
            x: x.clone(),
            price: snap.price.eval(&z),
            mpr: snap.mpr.eval(&z),
            positions,
            residual: res,
        });
    }

    let total = sol.scenario.agents.len();
    let mut jumps = Vec::new();
    for n in 2..=big_n {
        let first = rows.iter().position(|r| r.stage == n).expect("stage rows");
        let before = &rows[first - 1];
        let after = &rows[first];
        let x = &xs[plan.row_time[first]];
        let zp = StackedIndex::new(d, n - 1).stack(x, &h[..n - 1]);
        let flat = plan.jump_trades[n - 1]
            .as_ref()
            .expect("jump map")
            .eval(&zp);
        let jump: Vec<Option<Vector>> = (0..total)
            .map(|j| {
                if j >= n {
                    return None;
                }
                let psi = flat.rows(j * d, d).into_owned();
                Some(if j == 0 {
                    psi
                } else {
                    psi + sol.static_position(j, &g[j - 1])
                })
            })
            .collect();
        let res = residual(sol, &jump, &z_noise, n - 1);
        jumps.push(JumpRecord {
            stage: n,
            t: after.t,
            pre_price: before.price.clone(),
            post_price: after.price.clone(),
            pre: before.positions.clone(),
            jump,
            post: after.positions.clone(),
            residual: res,
        });
    }

    let mut wealth = vec![0.0; total];
    for w in rows.windows(2) {
        if w[0].stage != w[1].stage {
            continue;
        }
        let ds = &w[1].price - &w[0].price;
        for (j, p) in w[0].positions.iter().enumerate() {
            if let Some(p) = p {
                wealth[j] += p.dot(&ds);
            }
        }
    }
    for jr in &jumps {
        let ds = &jr.post_price - &jr.pre_price;
        for (j, p) in jr.jump.iter().enumerate() {
            if let Some(p) = p {
                wealth[j] += p.dot(&ds);
            }
        }
    }

    PathSample {
        path_id,
        rows,
        innovations,
        x1,
        g,
        y,
        z: z_noise,
        h,
        jumps,
        wealth,
    }
}

/// Simulates `cfg.n_paths` paths; path `i` depends only on `(seed, i)`.
pub fn simulate(sol: &PceSolution, cfg: &SimConfig) -> Result<Vec<PathSample>> {
    let pool = rng::pool(cfg.threads);
    pool.install(|| {
        let plan = plan(sol, cfg)?;
        Ok((0..cfg.n_paths)
            .into_par_iter()
            .map(|i| simulate_path(sol, &plan, cfg, i))
            .collect())
    })
}

/// Market price of risk of stage `n` at `(t, z)`.
pub fn market_price_of_risk(sol: &PceSolution, n: usize, t: f64, z: &Vector) -> Result<Vector> {
    sol.stage(n).continuous.market_price_of_risk(t, z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleJump {
    pub path_id: usize,
    pub stage: usize,
    pub agent: usize,
    pub pre: Vector,
    pub jump: Vector,
    pub post: Vector,
    /// Both adjustments exceed `1e-6`.
    pub flagged: bool,
}

/// The two position adjustments around every announcement, per agent
/// trading on both sides of it.
pub fn double_jump_report(samples: &[PathSample]) -> Vec<DoubleJump> {
    let mut out = Vec::new();
    for s in samples {
        for jr in &s.jumps {
            for agent in 0..jr.jump.len() {
                if let (Some(pre), Some(jump), Some(post)) =
                    (&jr.pre[agent], &jr.jump[agent], &jr.post[agent])
                {
                    let first = linalg::max_abs_vec(&(jump - pre));
                    let second = linalg::max_abs_vec(&(post - jump));
                    out.push(DoubleJump {
                        path_id: s.path_id,
                        stage: jr.stage,
                        agent,
                        pre: pre.clone(),
                        jump: jump.clone(),
                        post: post.clone(),
                        flagged: first > 1e-6 && second > 1e-6,
                    });
                }
            }
        }
    }
    out
}

fn vector_columns(name: &str, d: usize) -> Vec<String> {
    if d == 1 {
        vec![name.to_string()]
    } else {
        (0..d).map(|i| format!("{name}.{i}")).collect()
    }
}

fn push_vector(rec: &mut Vec<String>, v: &Vector) {
    rec.extend(v.iter().map(|x| format!("{x:.16e}")));
}

fn push_optional(rec: &mut Vec<String>, v: &Option<Vector>, d: usize) {
    match v {
        Some(v) => push_vector(rec, v),
        None => rec.extend(std::iter::repeat_n(String::new(), d)),
    }
}

/// Header of `paths.csv`.
pub fn paths_header(d: usize, agents: usize) -> Vec<String> {
    let mut h = vec!["path_id".to_string(), "stage".to_string(), "t".to_string()];
    h.extend(vector_columns("X", d));
    h.extend(vector_columns("S", d));
    h.extend(vector_columns("mpr", d));
    for j in 0..agents {
        h.extend(vector_columns(&format!("pi_{j}"), d));
    }
    h.push("residual".to_string());
    h
}

/// Writes the long-format path file: one row per path and evaluation point.
/// Empty position cells mark insiders not yet trading.
pub fn export_csv<W: Write>(samples: &[PathSample], d: usize, agents: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| PceError::Io(e.to_string());
    w.write_record(paths_header(d, agents)).map_err(io)?;
    for s in samples {
        for r in &s.rows {
            let mut rec = vec![
                s.path_id.to_string(),
                r.stage.to_string(),
                format!("{:.16e}", r.t),
            ];
            push_vector(&mut rec, &r.x);
            push_vector(&mut rec, &r.price);
            push_vector(&mut rec, &r.mpr);
            for p in &r.positions {
                push_optional(&mut rec, p, d);
            }
            rec.push(format!("{:.16e}", r.residual));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| PceError::Io(e.to_string()))?;
    Ok(())
}

/// Writes one row per (path, announcement, agent) with the three positions.
pub fn export_jumps_csv<W: Write>(samples: &[PathSample], d: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| PceError::Io(e.to_string());
    let mut header = vec![
        "path_id".to_string(),
        "stage".to_string(),
        "t".to_string(),
        "agent".to_string(),
    ];
    header.extend(vector_columns("S_pre", d));
    header.extend(vector_columns("S_post", d));
    header.extend(vector_columns("pi_pre", d));
    header.extend(vector_columns("pi_jump", d));
    header.extend(vector_columns("pi_post", d));
    w.write_record(&header).map_err(io)?;
    for s in samples {
        for jr in &s.jumps {
            for agent in 0..jr.post.len() {
                let mut rec = vec![
                    s.path_id.to_string(),
                    jr.stage.to_string(),
                    format!("{:.16e}", jr.t),
                    agent.to_string(),
                ];
                push_vector(&mut rec, &jr.pre_price);
                push_vector(&mut rec, &jr.post_price);
                push_optional(&mut rec, &jr.pre[agent], d);
                push_optional(&mut rec, &jr.jump[agent], d);
                push_optional(&mut rec, &jr.post[agent], d);
                w.write_record(&rec).map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| PceError::Io(e.to_string()))?;
    Ok(())
}

/// Writes `paths.csv` and `jumps.csv` under `dir`.
pub fn write_outputs(samples: &[PathSample], d: usize, agents: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    export_csv(
        samples,
        d,
        agents,
        std::fs::File::create(dir.join("paths.csv"))?,
    )?;
    export_jumps_csv(samples, d, std::fs::File::create(dir.join("jumps.csv"))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::solve_pce;
    use crate::market::MarketScenario;

    fn run(paths: usize, grid: usize, threads: usize) -> (PceSolution, Vec<PathSample>) {
        let sol = solve_pce(&MarketScenario::two_signal_example()).unwrap();
        let cfg = SimConfig {
            seed: 7,
            n_paths: paths,
            grid,
            threads: Some(threads),
        };
        let samples = simulate(&sol, &cfg).unwrap();
        (sol, samples)
    }

    #[test]
    fn paths_clear_and_end_at_factor() {
        let (_, samples) = run(20, 40, 2);
        for s in &samples {
            assert_eq!(s.rows.len(), 80);
            for r in &s.rows {
                assert!(r.residual <= 1e-8, "residual {} at t={}", r.residual, r.t);
            }
            let last = s.rows.last().unwrap();
            assert_eq!(last.t, 1.0);
            assert!((&last.price - &s.x1).amax() < 1e-12);
            assert_eq!(s.jumps.len(), 1);
            let j = &s.jumps[0];
            assert_eq!(j.t, 0.5);
            assert!(j.residual <= 1e-10);
            assert!((&j.pre_price - &j.post_price).amax() > 1e-8);
            // Apart from t_2 the price moves continuously on this grid.
            for w in s.rows.windows(2) {
                if w[0].stage == w[1].stage {
                    assert!((&w[1].price - &w[0].price).amax() < 1.5);
                }
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let (sol, a) = run(6, 20, 1);
        let (_, b) = run(6, 20, 4);
        let mut fa = Vec::new();
        let mut fb = Vec::new();
        export_csv(&a, sol.dim(), 3, &mut fa).unwrap();
        export_csv(&b, sol.dim(), 3, &mut fb).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn empty_run_writes_header_only() {
        let (sol, samples) = run(0, 10, 1);
        let mut buf = Vec::new();
        export_csv(&samples, sol.dim(), 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "path_id,stage,t,X,S,mpr,pi_0,pi_1,pi_2,residual\n");
    }

    #[test]
    fn only_the_reaction_adjustment_is_nonzero() {
        // The left limit of the continuous position equals the jump trade;
        // the position moves once the announcement is realized.
        let (_, samples) = run(30, 20, 2);
        let report = double_jump_report(&samples);
        assert_eq!(report.len(), 60);
        for r in &report {
            assert!((&r.jump - &r.pre).amax() < 1e-9 * (1.0 + r.pre.amax()));
            assert!((&r.post - &r.jump).amax() > 1e-6);
            assert!(!r.flagged);
        }
    }
}
