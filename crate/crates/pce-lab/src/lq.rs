//! Linear-quadratic forms over stacked coordinates `z = (x, h_1, ..., h_n)`
//! and exact fitting of affine / quadratic maps from point evaluations.

use std::ops::Range;

use crate::error::{PceError, Result};
use crate::linalg::{self, symmetrize};
use crate::{Mat, Vector};

/// The function `z -> z'Az/2 + b'z + c` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqForm {
    a: Mat,
    b: Vector,
    c: f64,
}

impl LqForm {
    pub fn new(a: Mat, b: Vector, c: f64) -> Result<Self> {
        let m = b.len();
        linalg::require_square(&a, m, "quadratic block")?;
        Ok(Self {
            a: symmetrize(&a),
            b,
            c,
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            a: Mat::zeros(dim, dim),
            b: Vector::zeros(dim),
            c: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Vector {
        &self.b
    }
    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn eval(&self, z: &Vector) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        self.c + self.b.dot(z) + 0.5 * z.dot(&(&self.a * z))
    }

    pub fn add(&self, other: &LqForm) -> Result<Self> {
        if other.dim() != self.dim() {
            return Err(PceError::DimensionMismatch(format!(
                "adding forms of dimension {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        Self::new(&self.a + &other.a, &self.b + &other.b, self.c + other.c)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            a: &self.a * s,
            b: &self.b * s,
            c: self.c * s,
        }
    }

    /// Places sub-coordinate `i` of this form at position `positions[i]` of a
    /// form over `dim` coordinates; unreferenced coordinates get zero weight.
    pub fn embed(&self, positions: &[usize], dim: usize) -> Result<Self> {
        if positions.len() != self.dim() || positions.iter().any(|&p| p >= dim) {
            return Err(PceError::DimensionMismatch(format!(
                "cannot embed a {}-dimensional form at {positions:?} into {dim}",
                self.dim()
            )));
        }
        let mut a = Mat::zeros(dim, dim);
        let mut b = Vector::zeros(dim);
        for (i, &pi) in positions.iter().enumerate() {
            b[pi] += self.b[i];
            for (j, &pj) in positions.iter().enumerate() {
                a[(pi, pj)] += self.a[(i, j)];
            }
        }
        Self::new(a, b, self.c)
    }

    /// Restriction to the coordinates in `free`, with every other coordinate
    /// fixed at its value in `z`.
    pub fn restrict(&self, free: &[usize], z: &Vector) -> Result<Self> {
        linalg::require_len(z, self.dim(), "restriction point")?;
        let fixed: Vec<usize> = (0..self.dim()).filter(|i| !free.contains(i)).collect();
        let k = free.len();
        let mut a = Mat::zeros(k, k);
        let mut b = Vector::zeros(k);
        for (i, &fi) in free.iter().enumerate() {
            b[i] = self.b[fi];
            for &r in &fixed {
                b[i] += self.a[(fi, r)] * z[r];
            }
            for (j, &fj) in free.iter().enumerate() {
                a[(i, j)] = self.a[(fi, fj)];
            }
        }
        let mut c = self.c;
        for &r in &fixed {
            c += self.b[r] * z[r];
            for &s in &fixed {
                c += 0.5 * self.a[(r, s)] * z[r] * z[s];
            }
        }
        Self::new(a, b, c)
    }
}

pub fn lq_embed(form: &LqForm, index: &StackedIndex, blocks: &[usize]) -> Result<LqForm> {
    form.embed(&index.positions(blocks), index.dim())
}

pub fn lq_add(f: &LqForm, g: &LqForm) -> Result<LqForm> {
    f.add(g)
}

pub fn lq_scale(f: &LqForm, s: f64) -> LqForm {
    f.scale(s)
}

pub fn lq_eval(f: &LqForm, z: &Vector) -> f64 {
    f.eval(z)
}

/// Layout of `z = (x, h_1, ..., h_n)`: block 0 is the factor, block `k` the
/// `k`-th public signal, each of width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackedIndex {
    pub d: usize,
    pub n: usize,
}

impl StackedIndex {
    pub fn new(d: usize, n: usize) -> Self {
        Self { d, n }
    }

    pub fn dim(&self) -> usize {
        self.d * (self.n + 1)
    }

    pub fn block(&self, i: usize) -> Range<usize> {
        assert!(
            i <= self.n,
            "block {i} outside a layout with {} signals",
            self.n
        );
        i * self.d..(i + 1) * self.d
    }

    /// Coordinates of the listed blocks, in order.
    pub fn positions(&self, blocks: &[usize]) -> Vec<usize> {
        blocks.iter().flat_map(|&b| self.block(b)).collect()
    }

    pub fn extract(&self, z: &Vector, i: usize) -> Vector {
        z.rows_range(self.block(i)).into_owned()
    }

    pub fn stack(&self, x: &Vector, h: &[Vector]) -> Vector {
        assert_eq!(h.len(), self.n, "signal count does not match layout");
        let mut z = Vector::zeros(self.dim());
        z.rows_range_mut(self.block(0)).copy_from(x);
        for (k, hk) in h.iter().enumerate() {
            z.rows_range_mut(self.block(k + 1)).copy_from(hk);
        }
        z
    }

    pub fn split(&self, z: &Vector) -> (Vector, Vec<Vector>) {
        let x = self.extract(z, 0);
        let h = (1..=self.n).map(|k| self.extract(z, k)).collect();
        (x, h)
    }

    /// The layout with the last signal block removed.
    pub fn drop_last(&self) -> Self {
        assert!(self.n > 0);
        Self::new(self.d, self.n - 1)
    }
}

/// The map `z -> L z + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub lin: Mat,
    pub offset: Vector,
}

impl AffineMap {
    pub fn new(lin: Mat, offset: Vector) -> Result<Self> {
        if lin.nrows() != offset.len() {
            return Err(PceError::DimensionMismatch(format!(
                "affine map with {} rows and offset of length {}",
                lin.nrows(),
                offset.len()
            )));
        }
        Ok(Self { lin, offset })
    }

    pub fn eval(&self, z: &Vector) -> Vector {
        &self.lin * z + &self.offset
    }

    pub fn dim(&self) -> usize {
        self.lin.ncols()
    }

    pub fn rows(&self) -> usize {
        self.lin.nrows()
    }

    /// Columns of the linear part belonging to block `i`.
    pub fn block(&self, index: &StackedIndex, i: usize) -> Mat {
        let r = index.block(i);
        self.lin.columns(r.start, r.len()).into_owned()
    }
}

const FIT_TOL: f64 = 1e-10;

/// Deterministic off-lattice probe points used to validate fits.
fn validation_probes(dim: usize) -> Vec<Vector> {
    (0..3)
        .map(|k| {
            Vector::from_iterator(
                dim,
                (0..dim).map(|i| {
                    let s = ((i * 7919 + k * 104_729 + 31) % 997) as f64;
                    s / 498.5 - 1.0
                }),
            )
        })
        .collect()
}

fn unit(dim: usize, i: usize, s: f64) -> Vector {
    let mut e = Vector::zeros(dim);
    e[i] = s;
    e
}

/// Fits an affine map from `dim + 1` evaluations and validates it on extra
/// probes; fails with `AffinityViolated` if `f` is not affine.
pub fn fit_affine<F>(dim: usize, f: F) -> Result<AffineMap>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let f0 = f(&Vector::zeros(dim))?;
    let rows = f0.len();
    let mut lin = Mat::zeros(rows, dim);
    for i in 0..dim {
        let fi = f(&unit(dim, i, 1.0))?;
        lin.set_column(i, &(fi - &f0));
    }
    let map = AffineMap::new(lin, f0)?;
    for z in validation_probes(dim) {
        let want = f(&z)?;
        let got = map.eval(&z);
        let scale = 1.0 + linalg::max_abs_vec(&want);
        let err = linalg::max_abs_vec(&(&want - &got));
        if err > FIT_TOL * scale {
            return Err(PceError::AffinityViolated(format!(
                "affine fit residual {err:.3e} at scale {scale:.3e}"
            )));
        }
    }
    Ok(map)
}

/// Fits `count` quadratic functions sharing one evaluator from the origin,
/// `+-e_i` and `e_i + e_j`, then validates on extra probes.
pub fn fit_lq_many<F>(dim: usize, count: usize, f: F) -> Result<Vec<LqForm>>
where
    F: Fn(&Vector) -> Result<Vec<f64>>,
{
    let call = |z: &Vector| -> Result<Vec<f64>> {
        let v = f(z)?;
        if v.len() != count {
            return Err(PceError::DimensionMismatch(format!(
                "evaluator returned {} values, expected {count}",
                v.len()
            )));
        }
        Ok(v)
    };
    let f0 = call(&Vector::zeros(dim))?;
    let plus: Vec<Vec<f64>> = (0..dim)
        .map(|i| call(&unit(dim, i, 1.0)))
        .collect::<Result<_>>()?;
    let minus: Vec<Vec<f64>> = (0..dim)
        .map(|i| call(&unit(dim, i, -1.0)))
        .collect::<Result<_>>()?;
    let mut pair = vec![vec![Vec::new(); dim]; dim];
    for i in 0..dim {
        for j in (i + 1)..dim {
            let z = unit(dim, i, 1.0) + unit(dim, j, 1.0);
            pair[i][j] = call(&z)?;
        }
    }
    let mut forms = Vec::with_capacity(count);
    for q in 0..count {
        let c = f0[q];
        let mut a = Mat::zeros(dim, dim);
        let mut b = Vector::zeros(dim);
        for i in 0..dim {
            a[(i, i)] = plus[i][q] + minus[i][q] - 2.0 * c;
            b[i] = 0.5 * (plus[i][q] - minus[i][q]);
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                // f(e_i + e_j) = (A_ii + A_jj)/2 + A_ij + b_i + b_j + c
                let aij = pair[i][j][q] - 0.5 * (a[(i, i)] + a[(j, j)]) - b[i] - b[j] - c;
                a[(i, j)] = aij;
                a[(j, i)] = aij;
            }
        }
        forms.push(LqForm::new(a, b, c)?);
    }
    for z in validation_probes(dim) {
        let want = call(&z)?;
        for (q, form) in forms.iter().enumerate() {
            let got = form.eval(&z);
            let scale = 1.0 + want[q].abs() + f0[q].abs();
            if (got - want[q]).abs() > FIT_TOL * scale {
                return Err(PceError::AffinityViolated(format!(
                    "quadratic fit {q} residual {:.3e} at scale {scale:.3e}",
                    (got - want[q]).abs()
                )));
            }
        }
    }
    Ok(forms)
}

pub fn fit_lq<F>(dim: usize, f: F) -> Result<LqForm>
where
    F: Fn(&Vector) -> Result<f64>,
{
    Ok(fit_lq_many(dim, 1, |z| Ok(vec![f(z)?]))?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_form() -> LqForm {
        LqForm::new(
            Mat::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 1.0, 0.3, -1.0, 0.3, -0.7]),
            Vector::from_row_slice(&[0.2, -0.4, 1.1]),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn symmetrizes_on_construction() {
        let f = LqForm::new(
            Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            Vector::zeros(2),
            0.0,
        )
        .unwrap();
        assert_eq!(f.a()[(0, 1)], 1.0);
        assert_eq!(f.a()[(1, 0)], 1.0);
    }

    #[test]
    fn embed_then_eval_matches_sub_block() {
        let f = sample_form();
        let idx = StackedIndex::new(1, 4);
        let g = lq_embed(&f, &idx, &[0, 2, 3]).unwrap();
        let z = Vector::from_row_slice(&[0.3, 9.0, -1.2, 0.8, 7.0]);
        let sub = Vector::from_row_slice(&[0.3, -1.2, 0.8]);
        assert!((g.eval(&z) - f.eval(&sub)).abs() < 1e-14);
    }

    #[test]
    fn restrict_matches_eval() {
        let f = sample_form();
        let z = Vector::from_row_slice(&[0.3, -1.2, 0.8]);
        let r = f.restrict(&[1], &z).unwrap();
        for y in [-2.0, 0.0, 1.5] {
            let mut w = z.clone();
            w[1] = y;
            assert!((r.eval(&Vector::from_element(1, y)) - f.eval(&w)).abs() < 1e-14);
        }
    }

    #[test]
    fn fit_recovers_exact_forms() {
        let f = sample_form();
        let g = fit_lq(3, |z| Ok(f.eval(z))).unwrap();
        assert!(linalg::max_abs(&(g.a() - f.a())) < 1e-13);
        assert!((g.b() - f.b()).norm() < 1e-13);
        assert!((g.c() - f.c()).abs() < 1e-13);
    }

    #[test]
    fn fit_rejects_non_quadratic() {
        let err = fit_lq(2, |z| Ok(z[0].powi(3) + z[1])).unwrap_err();
        assert!(matches!(err, PceError::AffinityViolated(_)));
        let err = fit_affine(2, |z| Ok(Vector::from_element(1, z[0] * z[1]))).unwrap_err();
        assert!(matches!(err, PceError::AffinityViolated(_)));
    }

    #[test]
    fn stack_split_roundtrip() {
        let idx = StackedIndex::new(2, 2);
        let x = Vector::from_row_slice(&[1.0, 2.0]);
        let h = vec![
            Vector::from_row_slice(&[3.0, 4.0]),
            Vector::from_row_slice(&[5.0, 6.0]),
        ];
        let z = idx.stack(&x, &h);
        let (x2, h2) = idx.split(&z);
        assert_eq!(x2, x);
        assert_eq!(h2, h);
        assert_eq!(idx.positions(&[2, 0]), vec![4, 5, 0, 1]);
    }
}
