//! Coefficient tables of a solved equilibrium.
//!
//! `pce_coefficients.csv` has columns `stage,t,block,row,col,value`. On a
//! time grid of each stage the price `S = M^X x + sum_k M^{H,k} h_k + V` and
//! the market price of risk are stored block by block: `MX`, `MH1`, ..., `V`
//! for the price and `mpr.MX`, ... for the market price of risk. Each jump
//! adds the pre-jump price map as `jump.MX`, `jump.MH1`, ..., `jump.V`, with
//! `t` the jump time. `V` blocks use `col = 0`.

use std::fmt::Write as _;
use std::io::Write;

use crate::engine::PceSolution;
use crate::error::{PceError, Result};
use crate::linalg;
use crate::lq::{AffineMap, StackedIndex};

/// One coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub stage: usize,
    pub t: f64,
    pub block: String,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

fn push_map(
    out: &mut Vec<CoefficientRow>,
    stage: usize,
    t: f64,
    prefix: &str,
    map: &AffineMap,
    index: &StackedIndex,
) {
    for b in 0..=index.n {
        let name = if b == 0 {
            "MX".to_string()
        } else {
            format!("MH{b}")
        };
        let m = map.block(index, b);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.push(CoefficientRow {
                    stage,
                    t,
                    block: format!("{prefix}{name}"),
                    row: r,
                    col: c,
                    value: m[(r, c)],
                });
            }
        }
    }
    for r in 0..map.offset.len() {
        out.push(CoefficientRow {
            stage,
            t,
            block: format!("{prefix}V"),
            row: r,
            col: 0,
            value: map.offset[r],
        });
    }
}

/// Coefficient rows on `grid + 1` equally spaced times per stage.
pub fn coefficient_rows(sol: &PceSolution, grid: usize) -> Result<Vec<CoefficientRow>> {
    let grid = grid.max(1);
    let mut out = Vec::new();
    for st in &sol.stages {
        let n = st.n();
        if let Some(j) = &st.jump {
            push_map(&mut out, n, j.time, "jump.", &j.price, &j.index);
        }
        let c = &st.continuous;
        for i in 0..=grid {
            let t = c.a + (c.b - c.a) * i as f64 / grid as f64;
            let snap = c.snapshot(t).map_err(|e| e.at_stage(n))?;
            push_map(&mut out, n, t, "", &snap.price, &c.index);
            push_map(&mut out, n, t, "mpr.", &snap.mpr, &c.index);
        }
    }
    Ok(out)
}

pub fn write_coefficients<W: Write>(rows: &[CoefficientRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| PceError::Io(e.to_string());
    w.write_record(["stage", "t", "block", "row", "col", "value"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.stage.to_string(),
            format!("{:.16e}", r.t),
            r.block.clone(),
            r.row.to_string(),
            r.col.to_string(),
            format!("{:.16e}", r.value),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable overview of a solution.
pub fn summary(sol: &PceSolution) -> String {
    let mut s = String::new();
    let sc = &sol.scenario;
    let _ = writeln!(s, "factor dimension: {}", sol.dim());
    let _ = writeln!(s, "stages: {}", sol.n_stages());
    for st in &sol.stages {
        let c = &st.continuous;
        let mbar = c.m_bar();
        let _ = writeln!(
            s,
            "stage {}: [{:.6}, {:.6}], participants {}, representative risk aversion {:.6}, Mbar max entry {:.6}",
            st.n(),
            c.a,
            c.b,
            c.participants(),
            c.representative_gamma(),
            linalg::max_abs(mbar)
        );
        if let Some(j) = &st.jump {
            let _ = writeln!(
                s,
                "  jump at {:.6}: pre-jump price offset {:?}",
                j.time,
                j.price.offset.as_slice()
            );
        }
    }
    let _ = writeln!(s, "supply: {:?}", sc.pi.as_slice());
    match sol.check_structure() {
        Ok(()) => {
            let _ = writeln!(s, "structure checks: pass");
        }
        Err(e) => {
            let _ = writeln!(s, "structure checks: FAIL ({e})");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::solve_pce;
    use crate::market::MarketScenario;

    #[test]
    fn two_signal_table_has_both_stages_and_the_terminal_identity() {
        let sol = solve_pce(&MarketScenario::two_signal_example()).unwrap();
        let rows = coefficient_rows(&sol, 4).unwrap();
        let stages: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.stage).collect();
        assert_eq!(stages.into_iter().collect::<Vec<_>>(), vec![1, 2]);
        let at_one = |block: &str| {
            rows.iter()
                .find(|r| r.stage == 2 && r.t == 1.0 && r.block == block)
                .unwrap()
                .value
        };
        assert!((at_one("MX") - 1.0).abs() < 1e-10);
        assert!(at_one("MH1").abs() < 1e-10);
        assert!(at_one("MH2").abs() < 1e-10);
        assert!(at_one("V").abs() < 1e-10);
        assert!(rows.iter().any(|r| r.block == "jump.MH1" && r.stage == 2));
        let mut buf = Vec::new();
        write_coefficients(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("stage,t,block,row,col,value\n"));
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(summary(&sol).contains("structure checks: pass"));
    }
}
