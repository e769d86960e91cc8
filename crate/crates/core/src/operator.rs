//! Finite-difference discretization of the stationary Fokker-Planck
//! operator.
//!
//! For `dX = f(X) dt + sigma(X) dW` the density evolves under
//!
//! `L u = -sum_i d_i (f_i u) + (1/2) sum_ij d_i d_j (D_ij u)`,  `D = sigma^T sigma`.
//!
//! On a cell-centered grid, `L` is discretized with conservative central
//! differences of the *products* `f_i u` and `D_ij u` (coefficients
//! evaluated at neighbor cell centers), a three-point stencil per axis plus
//! a four-point cross stencil per axis pair. Rows exist only for interior
//! cells; columns are all cells in interior-first storage order, so the
//! matrix has at most `3^dim` entries per row and the interior-selection
//! matrix is `[I | 0]`.
//!
//! A quasi-stationary density with killing rate `r > 0` satisfies
//! `L u = -r u`; the corresponding constraint matrix is `A = A0 - lambda E`
//! with the eigenvalue `lambda = -r` as the shift.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::sde::SdeModel;

/// Sparse rows with sorted column indices; rows and columns are indexed
/// separately (rows by interior cell, columns by all cells).
#[derive(Debug, Clone)]
pub(crate) struct SparseRows {
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRows {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    /// `out = M u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * u[*c];
            }
            out[r] = acc;
        }
    }

    /// `out = M^T y` (accumulated into a zeroed buffer).
    pub fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.n_rows() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                out[*c] += v * y[r];
            }
        }
    }

    /// Sorted-merge dot product of two rows.
    pub fn row_dot(&self, a: usize, b: usize) -> f64 {
        let (ca, va) = self.row(a);
        let (cb, vb) = self.row(b);
        let mut i = 0;
        let mut j = 0;
        let mut acc = 0.0;
        while i < ca.len() && j < cb.len() {
            match ca[i].cmp(&cb[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += va[i] * vb[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Drift and diffusion-product values cached at every cell center.
pub(crate) struct CoeffCache {
    dim: usize,
    drift: Vec<f64>,
    dmat: Vec<f64>,
}

impl CoeffCache {
    pub fn build(model: &SdeModel, grid: &GridSpec) -> CoeffCache {
        let dim = grid.dim();
        let n = grid.n_cells();
        let mut drift = vec![0.0; n * dim];
        let mut dmat = vec![0.0; n * dim * dim];
        let mut x = vec![0.0; dim];
        let mut f = vec![0.0; dim];
        let mut sigma = vec![0.0; dim * dim];
        for rm in 0..n {
            let idx = grid.multi_index(rm);
            for k in 0..dim {
                x[k] = grid.center(k, idx[k]);
            }
            model.eval_drift(&x, &mut f);
            model.eval_diffusion(&x, &mut sigma);
            drift[rm * dim..(rm + 1) * dim].copy_from_slice(&f);
            let d = &mut dmat[rm * dim * dim..(rm + 1) * dim * dim];
            for k in 0..dim {
                for l in 0..dim {
                    let mut acc = 0.0;
                    for m in 0..dim {
                        acc += sigma[m * dim + k] * sigma[m * dim + l];
                    }
                    d[k * dim + l] = acc;
                }
            }
        }
        CoeffCache { dim, drift, dmat }
    }

    fn drift_at(&self, rm: usize, axis: usize) -> f64 {
        self.drift[rm * self.dim + axis]
    }

    fn dmat_at(&self, rm: usize, k: usize, l: usize) -> f64 {
        self.dmat[(rm * self.dim + k) * self.dim + l]
    }
}

/// Writes the stencil of the row for interior cell `idx` as
/// `(row-major neighbor cell, coefficient)` pairs in ascending neighbor
/// order, including the center entry (kept even when zero so a spectral
/// shift always has a slot). `shift` subtracts from the center coefficient.
pub(crate) fn row_stencil(
    cache: &CoeffCache,
    grid: &GridSpec,
    idx: &[usize],
    shift: f64,
    out: &mut Vec<(usize, f64)>,
) {
    let dim = grid.dim();
    out.clear();
    let center_rm = grid.row_major(idx);
    let mut nbr = idx.to_vec();
    // Diagonal and drift terms.
    let mut center_coeff = -shift;
    for i in 0..dim {
        let h = grid.h(i);
        center_coeff -= cache.dmat_at(center_rm, i, i) / (h * h);
        for s in [-1isize, 1] {
            nbr.copy_from_slice(idx);
            nbr[i] = (idx[i] as isize + s) as usize;
            let rm = grid.row_major(&nbr);
            let f = cache.drift_at(rm, i);
            let d = cache.dmat_at(rm, i, i);
            let coeff = -(s as f64) * f / (2.0 * h) + d / (2.0 * h * h);
            out.push((rm, coeff));
        }
    }
    out.push((center_rm, center_coeff));
    // Cross terms, one four-point stencil per axis pair.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let hij = 4.0 * grid.h(i) * grid.h(j);
            for si in [-1isize, 1] {
                for sj in [-1isize, 1] {
                    nbr.copy_from_slice(idx);
                    nbr[i] = (idx[i] as isize + si) as usize;
                    nbr[j] = (idx[j] as isize + sj) as usize;
                    let rm = grid.row_major(&nbr);
                    let d = cache.dmat_at(rm, i, j);
                    if d != 0.0 {
                        out.push((rm, (si * sj) as f64 * d / hij));
                    }
                }
            }
        }
    }
    out.sort_unstable_by_key(|&(rm, _)| rm);
    // Merge duplicate neighbors (cross and axis entries never collide, but
    // keep the invariant locally checkable).
    out.dedup_by(|b, a| {
        if a.0 == b.0 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
}

/// The discretized Fokker-Planck operator `A0` on a grid: one row per
/// interior cell (in interior-first order), columns over all cells in
/// interior-first storage order.
pub struct DiscretizedOperator {
    grid: GridSpec,
    sparse: SparseRows,
}

/// `A = A0 - lambda [I | 0]`: the operator with `lambda` subtracted on the
/// interior diagonal. `lambda` is the Fokker-Planck eigenvalue; a killing
/// rate `r` corresponds to `lambda = -r`.
pub struct ConstraintMatrix {
    grid: GridSpec,
    sparse: SparseRows,
    lambda: f64,
}

/// Assembles `A0` for `model` on `grid`.
pub fn assemble_operator(model: &SdeModel, grid: &GridSpec) -> Result<DiscretizedOperator> {
    if model.dim() != grid.dim() {
        return Err(Error::GridMismatch(format!(
            "model dimension {} vs grid dimension {}",
            model.dim(),
            grid.dim()
        )));
    }
    let cache = CoeffCache::build(model, grid);
    let sparse = assemble_rows(&cache, grid, 0.0);
    Ok(DiscretizedOperator {
        grid: grid.clone(),
        sparse,
    })
}

fn assemble_rows(cache: &CoeffCache, grid: &GridSpec, shift: f64) -> SparseRows {
    let ordering = grid.ordering();
    let n_int = grid.n_interior();
    let mut row_ptr = Vec::with_capacity(n_int + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    let mut stencil = Vec::with_capacity(3usize.pow(grid.dim() as u32));
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(stencil.capacity());
    for r in 0..n_int {
        let rm = ordering.row_major_index(r);
        let idx = grid.multi_index(rm);
        row_stencil(cache, grid, &idx, shift, &mut stencil);
        entries.clear();
        for &(nbr_rm, coeff) in &stencil {
            entries.push((ordering.storage_index(nbr_rm), coeff));
        }
        entries.sort_unstable_by_key(|&(c, _)| c);
        for &(c, v) in &entries {
            cols.push(c);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    }
    SparseRows {
        n_cols: grid.n_cells(),
        row_ptr,
        cols,
        vals,
    }
}

impl DiscretizedOperator {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn n_rows(&self) -> usize {
        self.sparse.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.sparse.n_cols
    }

    /// `out = A0 u` for `u` in interior-first storage order.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.sparse.apply(u, out);
    }

    /// Nonzero entries as `(row, col, value)` triplets.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        triplets(&self.sparse)
    }
}

impl ConstraintMatrix {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_rows(&self) -> usize {
        self.sparse.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.sparse.n_cols
    }

    /// `out = A u` for `u` in interior-first storage order.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.sparse.apply(u, out);
    }

    /// `out = A^T y`.
    pub fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        self.sparse.apply_transpose(y, out);
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        triplets(&self.sparse)
    }

    pub(crate) fn sparse(&self) -> &SparseRows {
        &self.sparse
    }
}

fn triplets(sparse: &SparseRows) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    (0..sparse.n_rows()).flat_map(move |r| {
        let (cols, vals) = sparse.row(r);
        cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
    })
}

/// Forms `A = A0 - lambda [I | 0]` by shifting the interior diagonal.
///
/// Under interior-first ordering row `r` is the constraint for the cell at
/// storage index `r`, so the shift lands on entry `(r, r)`.
pub fn constraint_matrix(op: &DiscretizedOperator, lambda: f64) -> ConstraintMatrix {
    let mut sparse = op.sparse.clone();
    for r in 0..sparse.n_rows() {
        let lo = sparse.row_ptr[r];
        let hi = sparse.row_ptr[r + 1];
        for k in lo..hi {
            if sparse.cols[k] == r {
                sparse.vals[k] -= lambda;
            }
        }
    }
    ConstraintMatrix {
        grid: op.grid.clone(),
        sparse,
        lambda,
    }
}
