//! O'Sullivan penalized splines in mixed-model form.
//!
//! A basis of size `K` starts from the `K + 2` cubic B-splines on `K - 2`
//! equally spaced interior knots. The roughness penalty `∫ B''B''ᵀ` has a
//! two-dimensional null space (constants and lines); its range is whitened
//! so the penalty becomes the identity on the `K` penalized coefficients,
//! and the resulting functions are made L²-orthogonal to `1` and `t`. The
//! null space is carried explicitly by the first two design columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported `K`: two interior knots.
pub const MIN_SPLINES: usize = 4;
pub const DEFAULT_GRID_SIZE: usize = 1000;

const DEGREE: usize = 3;
const NULL_TOL: f64 = 1e-10;

// Four-point Gauss-Legendre on [-1, 1]; exact for polynomials of degree <= 7.
const GL_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// A B-spline space given by a clamped knot vector and a degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineSpace {
    knots: Vec<f64>,
    degree: usize,
}

impl BSplineSpace {
    /// Clamped space on `[0, 1]` with the given interior knots.
    pub fn clamped(interior: &[f64], degree: usize) -> Self {
        let mut knots = vec![0.0; degree + 1];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Self { knots, degree }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Index `s` with `knots[s] <= t < knots[s + 1]`; the right endpoint
    /// belongs to the last non-empty interval.
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.n_basis() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // first knot strictly greater than t, minus one
        let upper = self.knots.partition_point(|&k| k <= t);
        (upper - 1).clamp(p, last)
    }

    /// All basis functions at `t` (zeros outside the local support).
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_basis());
        let (s, local) = self.eval_local(t);
        for (r, v) in local.iter().enumerate() {
            out[s - self.degree + r] = *v;
        }
        out
    }

    /// Span index and the `degree + 1` non-zero basis values there.
    pub fn eval_local(&self, t: f64) -> (usize, Vec<f64>) {
        let p = self.degree;
        let s = self.span(t);
        let u = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[s + 1 - j];
            right[j] = u[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (s, n)
    }

    /// Matrix mapping coefficients of this space to coefficients of its
    /// derivative, a space of one lower degree on the inner knots.
    pub fn derivative_map(&self) -> (BSplineSpace, DMatrix<f64>) {
        let p = self.degree;
        let m = self.n_basis();
        let mut d = DMatrix::zeros(m - 1, m);
        for i in 0..m - 1 {
            let gap = self.knots[i + p + 1] - self.knots[i + 1];
            if gap > 0.0 {
                let f = p as f64 / gap;
                d[(i, i)] = -f;
                d[(i, i + 1)] = f;
            }
        }
        let lower = BSplineSpace {
            knots: self.knots[1..self.knots.len() - 1].to_vec(),
            degree: p - 1,
        };
        (lower, d)
    }

    /// Greville abscissae: coefficients reproducing `t` exactly.
    pub fn greville(&self) -> DVector<f64> {
        let p = self.degree;
        DVector::from_fn(self.n_basis(), |i, _| {
            self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64
        })
    }

    /// Exact Gram matrix `∫₀¹ B Bᵀ` by Gauss-Legendre on each knot interval.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.n_basis();
        let mut g = DMatrix::zeros(m, m);
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
                let t = 0.5 * (a + b) + half * x;
                let (s, vals) = self.eval_local(t);
                let off = s - self.degree;
                for (r, vr) in vals.iter().enumerate() {
                    for (c, vc) in vals.iter().enumerate() {
                        g[(off + r, off + c)] += wt * half * vr * vc;
                    }
                }
            }
        }
        g
    }
}

/// Penalized spline basis `z_1, ..., z_K` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    k: usize,
    interior_knots: Vec<f64>,
    space: BSplineSpace,
    /// `(K + 2) x K` map from B-spline values to `z` values.
    transform: DMatrix<f64>,
}

impl SplineBasis {
    pub fn new(k: usize) -> Result<Self> {
        build_basis(k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of design columns, `K + 2`.
    pub fn ncols(&self) -> usize {
        self.k + 2
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    pub fn space(&self) -> &BSplineSpace {
        &self.space
    }

    /// `(z_1(t), ..., z_K(t))`.
    pub fn eval_z(&self, t: f64) -> DVector<f64> {
        let (s, vals) = self.space.eval_local(t);
        let off = s - self.space.degree;
        let mut out = DVector::zeros(self.k);
        for (r, v) in vals.iter().enumerate() {
            out.axpy(*v, &self.transform.row(off + r).transpose(), 1.0);
        }
        out
    }

    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        design_matrix(self, times)
    }
}

/// Builds the penalized basis for `k >= MIN_SPLINES`.
pub fn build_basis(k: usize) -> Result<SplineBasis> {
    if k < MIN_SPLINES {
        return Err(Error::Config(format!(
            "number of splines must be at least {MIN_SPLINES}, got {k}"
        )));
    }
    let n_int = k - 2;
    let interior: Vec<f64> = (1..=n_int).map(|i| i as f64 / (n_int + 1) as f64).collect();
    let space = BSplineSpace::clamped(&interior, DEGREE);
    let m = space.n_basis();

    // penalty = D2' G1 D2, with G1 the Gram matrix of the linear B-splines
    let (quad, d1) = space.derivative_map();
    let (lin, d2) = quad.derivative_map();
    let d2 = d2 * d1;
    let omega = d2.transpose() * lin.gram() * &d2;
    let omega = (&omega + omega.transpose()) * 0.5;

    let eig = omega.symmetric_eigen();
    let max_eval = eig.eigenvalues.max();
    let mut keep: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > NULL_TOL * max_eval).collect();
    if keep.len() != k {
        return Err(Error::Numerical(format!(
            "penalty of order {m} has {} positive eigenvalues, expected {k}",
            keep.len()
        )));
    }
    // descending eigenvalue order; stable column signs for reproducibility
    keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut transform = DMatrix::zeros(m, k);
    for (c, &i) in keep.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col = -col;
        }
        transform.set_column(c, &(col / eig.eigenvalues[i].sqrt()));
    }

    // L²-project off span{1, t}; the penalty annihilates both so T'ΩT = I survives.
    let mut null = DMatrix::from_element(m, 2, 1.0);
    null.set_column(1, &space.greville());
    let gram = space.gram();
    let ngn = null.transpose() * &gram * &null;
    let ngt = null.transpose() * &gram * &transform;
    let coef = ngn
        .cholesky()
        .ok_or_else(|| Error::Numerical("null-space Gram matrix is singular".into()))?
        .solve(&ngt);
    transform -= &null * coef;

    Ok(SplineBasis {
        k,
        interior_knots: interior,
        space,
        transform,
    })
}

/// One basis per requested size.
pub fn bases_for(ks: &[usize]) -> Result<Vec<SplineBasis>> {
    ks.iter().map(|&k| build_basis(k)).collect()
}

fn check_times(times: &[f64]) -> Result<()> {
    if let Some(bad) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("time {bad} lies outside [0, 1]")));
    }
    Ok(())
}

/// `[1, t, z_1(t), ..., z_K(t)]` with one row per time.
pub fn design_matrix(basis: &SplineBasis, times: &[f64]) -> Result<DMatrix<f64>> {
    check_times(times)?;
    let mut c = DMatrix::zeros(times.len(), basis.ncols());
    for (r, &t) in times.iter().enumerate() {
        c[(r, 0)] = 1.0;
        c[(r, 1)] = t;
        let z = basis.eval_z(t);
        for (k, v) in z.iter().enumerate() {
            c[(r, k + 2)] = *v;
        }
    }
    Ok(c)
}

/// Equidistant grid on `[0, 1]` with trapezoidal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    pub t: Vec<f64>,
}

impl EvaluationGrid {
    pub fn new(n_g: usize) -> Result<Self> {
        if n_g < 2 {
            return Err(Error::Config(format!("grid size must be at least 2, got {n_g}")));
        }
        let step = 1.0 / (n_g - 1) as f64;
        let mut t: Vec<f64> = (0..n_g).map(|i| i as f64 * step).collect();
        t[n_g - 1] = 1.0;
        Ok(Self { t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Trapezoidal quadrature weights; they sum to 1.
    pub fn weights(&self) -> DVector<f64> {
        let n = self.t.len();
        let mut w = DVector::zeros(n);
        for i in 0..n - 1 {
            let h = self.t[i + 1] - self.t[i];
            w[i] += 0.5 * h;
            w[i + 1] += 0.5 * h;
        }
        w
    }

    /// `C_g` for one basis.
    pub fn design(&self, basis: &SplineBasis) -> DMatrix<f64> {
        design_matrix(basis, &self.t).expect("grid points lie in [0, 1]")
    }
}

/// Grid of `n_g` points together with its design matrix for `basis`.
pub fn evaluation_grid(basis: &SplineBasis, n_g: usize) -> Result<(EvaluationGrid, DMatrix<f64>)> {
    let grid = EvaluationGrid::new(n_g)?;
    let c = grid.design(basis);
    Ok((grid, c))
}
