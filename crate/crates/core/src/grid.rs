//! Cell-centered rectangular grids and densities living on them.
//!
//! A grid covers a box `[lower_0, upper_0] x ... x [lower_{d-1}, upper_{d-1}]`
//! with `cells_k` equal cells per axis, `d <= 3`. Cell `(i_0, ..., i_{d-1})`
//! has center `lower_k + (i_k + 1/2) h_k` on each axis.
//!
//! Densities are stored in *interior-first* order: all interior cells (no
//! index on an axis boundary) in row-major order, followed by all boundary
//! cells in row-major order. The discretized operator only has rows for
//! interior cells, so under this ordering the interior-selection matrix is
//! literally `[I | 0]`.

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

/// Shape of a cell-centered grid over a rectangular box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
}

impl GridSpec {
    /// `cells_k >= 4` so that every axis has at least two interior layers.
    pub fn new(lower: &[f64], upper: &[f64], cells: &[usize]) -> Result<Self> {
        let dim = cells.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Config(format!(
                "grid dimension must be 1..={MAX_DIM}, got {dim}"
            )));
        }
        if lower.len() != dim || upper.len() != dim {
            return Err(Error::Config("bounds/cells length mismatch".into()));
        }
        for k in 0..dim {
            if !(upper[k] > lower[k]) || !lower[k].is_finite() || !upper[k].is_finite() {
                return Err(Error::Config(format!(
                    "invalid bounds on axis {k}: [{}, {}]",
                    lower[k], upper[k]
                )));
            }
            if cells[k] < 4 {
                return Err(Error::Config(format!(
                    "axis {k} needs at least 4 cells, got {}",
                    cells[k]
                )));
            }
        }
        Ok(GridSpec {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            cells: cells.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self, axis: usize) -> usize {
        self.cells[axis]
    }

    pub fn shape(&self) -> &[usize] {
        &self.cells
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.lower[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.upper[axis]
    }

    /// Cell size along `axis`.
    pub fn h(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.cells[axis] as f64
    }

    /// Volume of one cell.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.h(k)).product()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn n_interior(&self) -> usize {
        self.cells.iter().map(|&n| n - 2).product()
    }

    /// Center coordinate of cell index `i` on `axis`.
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + (i as f64 + 0.5) * self.h(axis)
    }

    /// Row-major index of a multi-index (axis 0 slowest).
    pub fn row_major(&self, idx: &[usize]) -> usize {
        let mut r = 0;
        for k in 0..self.dim() {
            r = r * self.cells[k] + idx[k];
        }
        r
    }

    /// Multi-index of a row-major index.
    pub fn multi_index(&self, mut rm: usize) -> Vec<usize> {
        let d = self.dim();
        let mut idx = vec![0; d];
        for k in (0..d).rev() {
            idx[k] = rm % self.cells[k];
            rm /= self.cells[k];
        }
        idx
    }

    pub fn is_boundary(&self, idx: &[usize]) -> bool {
        idx.iter()
            .zip(&self.cells)
            .any(|(&i, &n)| i == 0 || i == n - 1)
    }

    /// Row-major cell index containing `x`, or `None` if outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut rm = 0;
        for k in 0..self.dim() {
            if x[k] < self.lower[k] || x[k] >= self.upper[k] {
                return None;
            }
            let i = (((x[k] - self.lower[k]) / self.h(k)) as usize).min(self.cells[k] - 1);
            rm = rm * self.cells[k] + i;
        }
        Some(rm)
    }

    /// Interior-first ordering of this grid's cells.
    pub fn ordering(&self) -> GridOrdering {
        let n = self.n_cells();
        let n_int = self.n_interior();
        let mut storage_of_rm = vec![0usize; n];
        let mut rm_of_storage = vec![0usize; n];
        let mut next_int = 0;
        let mut next_bnd = n_int;
        for rm in 0..n {
            let idx = self.multi_index(rm);
            let s = if self.is_boundary(&idx) {
                let s = next_bnd;
                next_bnd += 1;
                s
            } else {
                let s = next_int;
                next_int += 1;
                s
            };
            storage_of_rm[rm] = s;
            rm_of_storage[s] = rm;
        }
        GridOrdering {
            storage_of_rm,
            rm_of_storage,
            n_interior: n_int,
        }
    }
}

/// Permutation between row-major cell indices and interior-first storage.
#[derive(Debug, Clone)]
pub struct GridOrdering {
    storage_of_rm: Vec<usize>,
    rm_of_storage: Vec<usize>,
    n_interior: usize,
}

impl GridOrdering {
    pub fn storage_index(&self, row_major: usize) -> usize {
        self.storage_of_rm[row_major]
    }

    pub fn row_major_index(&self, storage: usize) -> usize {
        self.rm_of_storage[storage]
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn len(&self) -> usize {
        self.storage_of_rm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage_of_rm.is_empty()
    }
}

/// A nonnegative density sampled at cell centers, interior-first storage,
/// normalized so that `sum(values) * cell_volume = 1`.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    grid: GridSpec,
    values: Vec<f64>,
}

impl DensityGrid {
    /// Wraps interior-first values, clipping negatives to zero and
    /// renormalizing to unit mass.
    pub fn from_interior_first(grid: GridSpec, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        for v in &mut values {
            if !v.is_finite() {
                return Err(Error::Config("non-finite density value".into()));
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut g = DensityGrid { grid, values };
        g.renormalize()?;
        Ok(g)
    }

    /// Same as [`from_interior_first`](Self::from_interior_first) but for
    /// values listed in row-major cell order.
    pub fn from_row_major(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        let ord = grid.ordering();
        let mut reordered = vec![0.0; values.len()];
        for (rm, v) in values.into_iter().enumerate() {
            reordered[ord.storage_index(rm)] = v;
        }
        Self::from_interior_first(grid, reordered)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Interior-first values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values permuted back to row-major cell order.
    pub fn to_row_major(&self) -> Vec<f64> {
        let ord = self.grid.ordering();
        let mut out = vec![0.0; self.values.len()];
        for (s, &v) in self.values.iter().enumerate() {
            out[ord.row_major_index(s)] = v;
        }
        out
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    fn renormalize(&mut self) -> Result<()> {
        let mass = self.integral();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Config(format!("density has mass {mass}")));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(())
    }

    /// `integral |a - b|` over the box.
    pub fn l1_distance(&self, other: &DensityGrid) -> Result<f64> {
        self.check_same_grid(other)?;
        let vol = self.grid.cell_volume();
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * vol)
    }

    pub fn check_same_grid(&self, other: &DensityGrid) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                "densities live on different grids".into(),
            ));
        }
        Ok(())
    }
}
