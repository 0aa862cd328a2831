//! Partitioning an interval state space into cells, per-cell transition-mass
//! matrices, per-cell deviation bounds, and the lift of a finite-mode model
//! onto an interval.
//!
//! The reduction from an interval-valued chain to a finite analysis works
//! cell by cell: pick a representative sample point in each cell, bound how
//! far the model data can drift from the sample within the cell, and carry
//! those bounds as explicit slack terms. All cells are half-open `[h_i,
//! h_{i+1})` except the last, which is closed.

use crate::error::Error;
use crate::markov::{cell_index, subinterval_masses, ChainModel, FiniteChain, InitialDensity, KernelChain, KernelKind};
use crate::matfun::spectral_norm;
use crate::mjls::{MatrixField, MjlsModel};
use nalgebra::{DMatrix, DVector};

/// Smallest admissible deviation bound. Bounds are floored here so that the
/// slack variables they multiply stay well-scaled even when the model is
/// exactly constant on a cell (any strictly positive bound is admissible).
pub const SIGMA_FLOOR: f64 = 1e-12;

/// How the representative sample point of each cell is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleRule {
    /// Cell midpoint.
    Midpoint,
    /// Left endpoint.
    Left,
    /// Explicit sample points, one per cell, each inside its cell.
    Custom(Vec<f64>),
}

/// A cell partition of `[a, b]` with one representative sample per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    samples: Vec<f64>,
}

impl Grid {
    /// Uniform partition of `[a, b]` into `n` cells.
    pub fn uniform(a: f64, b: f64, n: usize, rule: SampleRule) -> Result<Self, Error> {
        if !(a.is_finite() && b.is_finite()) || a >= b {
            return Err(Error::invalid(format!(
                "grid interval must be finite with a < b, got [{a}, {b}]"
            )));
        }
        if n == 0 {
            return Err(Error::invalid("grid needs at least one cell"));
        }
        let points: Vec<f64> = (0..=n)
            .map(|i| a + (b - a) * i as f64 / n as f64)
            .collect();
        Self::from_points(points, rule)
    }

    /// Partition with explicit (strictly increasing) break points.
    pub fn from_points(points: Vec<f64>, rule: SampleRule) -> Result<Self, Error> {
        if points.len() < 2 {
            return Err(Error::invalid("grid needs at least 2 break points"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("grid break points must be finite"));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid break points must be strictly increasing"));
        }
        let n = points.len() - 1;
        let samples = match rule {
            SampleRule::Midpoint => points.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
            SampleRule::Left => points[..n].to_vec(),
            SampleRule::Custom(s) => {
                if s.len() != n {
                    return Err(Error::invalid(format!(
                        "{} custom samples for {n} cells",
                        s.len()
                    )));
                }
                for (i, &x) in s.iter().enumerate() {
                    let hi_ok = if i + 1 == n { x <= points[i + 1] } else { x < points[i + 1] };
                    if !(x >= points[i] && hi_ok) {
                        return Err(Error::invalid(format!(
                            "sample {x} not inside cell {i} = [{}, {})",
                            points[i],
                            points[i + 1]
                        )));
                    }
                }
                s
            }
        };
        Ok(Grid { points, samples })
    }

    pub fn n_cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn widths(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the cell containing `x` (half-open cells, last closed).
    pub fn cell_of(&self, x: f64) -> Result<usize, Error> {
        let (a, b) = (self.points[0], self.points[self.points.len() - 1]);
        if !(a..=b).contains(&x) {
            return Err(Error::invalid(format!("{x} outside grid interval [{a}, {b}]")));
        }
        Ok(cell_index(&self.points, x))
    }
}

/// Per-cell deviation bounds of the model data from its cell-sample values,
/// measured in spectral norm, with the safety factor already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBounds {
    pub sig_a: Vec<f64>,
    pub sig_b: Vec<f64>,
    pub sig_c: Vec<f64>,
    /// Deviation of the square-root cell-mass row (equivalently of the
    /// stacked block matrix it generates).
    pub sig_q: Vec<f64>,
    /// Sample points per cell used for the estimate.
    pub mesh_per_cell: usize,
    /// Multiplicative safety factor (at least 1).
    pub safety: f64,
}

/// Square-root cell masses `sqrt(q_i(ell))` out of state `ell`, floored at 0.
pub fn sqrt_masses(chain: &KernelChain, grid: &Grid, ell: f64) -> Result<DVector<f64>, Error> {
    let q = subinterval_masses(chain, grid, ell)?;
    Ok(q.map(|v| v.max(0.0).sqrt()))
}

/// The block row `[sqrt(q_1(ell)) I, ..., sqrt(q_N(ell)) I]` with
/// `ndim`-dimensional identity blocks (an `ndim x ndim*N` matrix). Its outer
/// product with `diag(P_1, ..., P_N)` realizes the one-step conditional
/// expectation of a per-cell matrix family.
pub fn build_q(
    chain: &KernelChain,
    grid: &Grid,
    ell: f64,
    ndim: usize,
) -> Result<DMatrix<f64>, Error> {
    let sq = sqrt_masses(chain, grid, ell)?;
    Ok(q_row_from_sqrt(&sq, ndim))
}

/// Same block row built from an already-computed square-root mass vector.
pub fn q_row_from_sqrt(sqrt_q: &DVector<f64>, ndim: usize) -> DMatrix<f64> {
    let n_cells = sqrt_q.len();
    let mut out = DMatrix::zeros(ndim, ndim * n_cells);
    for j in 0..n_cells {
        for d in 0..ndim {
            out[(d, j * ndim + d)] = sqrt_q[j];
        }
    }
    out
}

/// The finite-chain analogue: `[sqrt(p_i1) I, ..., sqrt(p_iN) I]` from row
/// `i` of the transition matrix.
pub fn build_q_finite(chain: &FiniteChain, mode: usize, ndim: usize) -> Result<DMatrix<f64>, Error> {
    if mode >= chain.mode_count() {
        return Err(Error::invalid(format!("mode {mode} out of range")));
    }
    let row = chain.transition().row(mode);
    let sq = DVector::from_iterator(row.len(), row.iter().map(|p| p.max(0.0).sqrt()));
    Ok(q_row_from_sqrt(&sq, ndim))
}

/// Estimates per-cell deviation bounds by sampling each cell on a uniform
/// mesh (`mesh_per_cell >= 8` points; the right endpoint is evaluated just
/// inside the half-open cell) and taking the largest spectral-norm deviation
/// from the cell-sample value, scaled by `safety >= 1` and floored at
/// [`SIGMA_FLOOR`].
///
/// Mesh maxima under-estimate suprema; the safety factor and the floor keep
/// the result usable as a deviation bound for the built-in model families,
/// but the estimate is only as trustworthy as the mesh is fine.
pub fn estimate_sigmas(
    model: &MjlsModel,
    grid: &Grid,
    mesh_per_cell: usize,
    safety: f64,
) -> Result<SigmaBounds, Error> {
    let ChainModel::Kernel(chain) = model.chain() else {
        return Err(Error::invalid(
            "deviation bounds apply to interval-valued chains",
        ));
    };
    if mesh_per_cell < 8 {
        return Err(Error::invalid("deviation estimation needs at least 8 mesh points per cell"));
    }
    if !(safety >= 1.0) {
        return Err(Error::invalid("safety factor must be at least 1"));
    }
    let n_cells = grid.n_cells();
    let mut sig_a = Vec::with_capacity(n_cells);
    let mut sig_b = Vec::with_capacity(n_cells);
    let mut sig_c = Vec::with_capacity(n_cells);
    let mut sig_q = Vec::with_capacity(n_cells);
    for i in 0..n_cells {
        let (lo, hi) = (grid.points()[i], grid.points()[i + 1]);
        let h_bar = grid.samples()[i];
        let a_ref = model.a().eval_point(h_bar)?;
        let b_ref = model.b().eval_point(h_bar)?;
        let c_ref = model.c().eval_point(h_bar)?;
        let q_ref = sqrt_masses(chain, grid, h_bar)?;
        let (mut da, mut db, mut dc, mut dq) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for k in 0..mesh_per_cell {
            // The right endpoint is sampled just inside the cell: the bound
            // only needs to hold almost everywhere on the half-open cell,
            // and cell-aligned piecewise-constant families must not measure
            // their neighbor's jump.
            let ell = if k + 1 == mesh_per_cell {
                hi.next_down().max(lo)
            } else {
                lo + (hi - lo) * k as f64 / (mesh_per_cell - 1) as f64
            };
            da = da.max(spectral_norm(&(model.a().eval_point(ell)? - &a_ref)));
            db = db.max(spectral_norm(&(model.b().eval_point(ell)? - &b_ref)));
            dc = dc.max(spectral_norm(&(model.c().eval_point(ell)? - &c_ref)));
            dq = dq.max((sqrt_masses(chain, grid, ell)? - &q_ref).norm());
        }
        sig_a.push((da * safety).max(SIGMA_FLOOR));
        sig_b.push((db * safety).max(SIGMA_FLOOR));
        sig_c.push((dc * safety).max(SIGMA_FLOOR));
        sig_q.push((dq * safety).max(SIGMA_FLOOR));
    }
    Ok(SigmaBounds {
        sig_a,
        sig_b,
        sig_c,
        sig_q,
        mesh_per_cell,
        safety,
    })
}

/// Embeds a finite-mode model into an equivalent interval-valued model on
/// `[0, N]`: mode `i` becomes the unit cell `[i, i+1)`, the transition
/// density is constant on each cell pair with value `p_ij`, and the system
/// matrices are constant on each cell. Returns the lifted model together
/// with the unit-cell grid (midpoint samples) on which the lift is exact.
///
/// On that grid every per-cell deviation is zero, so any positive deviation
/// bound is admissible for the lifted model.
pub fn lift_finite(model: &MjlsModel) -> Result<(MjlsModel, Grid), Error> {
    let ChainModel::Finite(chain) = model.chain() else {
        return Err(Error::invalid("only finite-mode models can be lifted"));
    };
    let n_modes = chain.mode_count();
    let breaks: Vec<f64> = (0..=n_modes).map(|i| i as f64).collect();
    let kernel = KernelKind::CellConstant {
        breaks: breaks.clone(),
        values: chain.transition().clone(),
    };
    let nu0 = InitialDensity::PiecewiseConst {
        breaks: breaks.clone(),
        values: chain.initial().iter().copied().collect(),
    };
    let lifted_chain = KernelChain::new(
        0.0,
        n_modes as f64,
        nu0,
        kernel,
        crate::markov::DEFAULT_MESH_N.max(10 * n_modes),
    )?;
    let lift_field = |f: &MatrixField| -> Result<MatrixField, Error> {
        match f {
            MatrixField::PerMode(mats) => Ok(MatrixField::PiecewiseCells {
                breaks: breaks.clone(),
                pieces: mats.clone(),
            }),
            MatrixField::Zero { rows, cols } => Ok(MatrixField::Zero {
                rows: *rows,
                cols: *cols,
            }),
            _ => Err(Error::invalid("finite-mode model expected per-mode matrices")),
        }
    };
    let lifted = MjlsModel::new(
        ChainModel::Kernel(lifted_chain),
        lift_field(model.a())?,
        lift_field(model.b())?,
        lift_field(model.c())?,
        lift_field(model.d())?,
    )?;
    let grid = Grid::uniform(0.0, n_modes as f64, n_modes, SampleRule::Midpoint)?;
    Ok((lifted, grid))
}
