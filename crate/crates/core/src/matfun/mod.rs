//! Dense symmetric-matrix numerics: positivity tests, Schur complements,
//! block family containers, matrix exponentials and exponential integrals.
//!
//! Strict matrix inequalities ("uniformly positive definite") are realized
//! numerically as eigenvalue margins: `M >> 0` means `min_eig(M) >= xi` for a
//! caller-supplied margin `xi` (default [`DEFAULT_MARGIN`]).

mod expm;

pub use expm::{exp_integral, expm};

use crate::error::Error;
use nalgebra::{DMatrix, DVector};

/// Default eigenvalue margin realizing strict positive definiteness.
pub const DEFAULT_MARGIN: f64 = 1e-8;

/// Relative asymmetry above which [`SymMatrix::new`] logs a warning before
/// symmetrizing.
const ASYMMETRY_WARN: f64 = 1e-9;

/// A real symmetric matrix. Construction symmetrizes `(M + M^T)/2` so the
/// invariant holds exactly; inputs with relative asymmetry above 1e-9 are
/// accepted with a logged warning, non-finite entries are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    entries: DMatrix<f64>,
}

impl SymMatrix {
    /// Ingests a square matrix, enforcing symmetry.
    pub fn new(m: DMatrix<f64>) -> Result<Self, Error> {
        if !m.is_square() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("symmetric matrix has non-finite entries"));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > ASYMMETRY_WARN * scale {
            log::warn!(
                "symmetrizing input with relative asymmetry {:.3e}",
                asym / scale
            );
        }
        let entries = (&m + m.transpose()) * 0.5;
        Ok(SymMatrix { entries })
    }

    /// Dimension n of the n-by-n matrix.
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Borrows the underlying dense matrix.
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Consumes self, returning the dense matrix.
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(m: SymMatrix) -> Self {
        m.entries
    }
}

/// Smallest eigenvalue of a symmetric matrix.
///
/// Accepts any square matrix, validating finiteness and symmetrizing exactly
/// as [`SymMatrix::new`] does, so callers with freshly assembled symmetric
/// blocks can use it directly.
pub fn min_eig(m: &DMatrix<f64>) -> Result<f64, Error> {
    let sym = SymMatrix::new(m.clone())?;
    Ok(min_eig_sym(&sym))
}

/// Smallest eigenvalue of an already-validated symmetric matrix.
pub fn min_eig_sym(m: &SymMatrix) -> f64 {
    if m.dim() == 0 {
        // Vacuous: the empty matrix satisfies every positivity margin.
        return f64::INFINITY;
    }
    let eig = m.entries.clone().symmetric_eigen();
    eig.eigenvalues.min()
}

/// How a family of matrices is indexed: by a finite set of modes or by the
/// cells of an interval partition.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    /// Finite mode set `{1, ..., N}`.
    Modes(usize),
    /// Interval partition points `h_0 < h_1 < ... < h_N`; piece `i` lives on
    /// cell `[h_{i-1}, h_i)` (the last cell closed).
    Cells(Vec<f64>),
}

impl Support {
    /// Number of pieces the support indexes.
    pub fn piece_count(&self) -> usize {
        match self {
            Support::Modes(n) => *n,
            Support::Cells(points) => points.len().saturating_sub(1),
        }
    }
}

/// An ordered family of equally-shaped real matrices, one per mode or per
/// partition cell — the piecewise-constant surrogate for a bounded
/// matrix-valued function on the chain's state space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeFamily {
    pieces: Vec<DMatrix<f64>>,
    rows: usize,
    cols: usize,
    support: Support,
}

impl ModeFamily {
    /// Builds a family, validating shape agreement, finiteness, and that the
    /// piece count matches the support.
    pub fn new(pieces: Vec<DMatrix<f64>>, support: Support) -> Result<Self, Error> {
        if pieces.is_empty() {
            return Err(Error::invalid("family must have at least one piece"));
        }
        if pieces.len() != support.piece_count() {
            return Err(Error::invalid(format!(
                "family has {} pieces but support indexes {}",
                pieces.len(),
                support.piece_count()
            )));
        }
        let rows = pieces[0].nrows();
        let cols = pieces[0].ncols();
        for (k, p) in pieces.iter().enumerate() {
            if p.nrows() != rows || p.ncols() != cols {
                return Err(Error::invalid(format!(
                    "piece {k} has shape {}x{}, expected {rows}x{cols}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("piece {k} has non-finite entries")));
            }
        }
        Ok(ModeFamily {
            pieces,
            rows,
            cols,
            support,
        })
    }

    /// Convenience constructor for a family over `Modes(pieces.len())`.
    pub fn per_mode(pieces: Vec<DMatrix<f64>>) -> Result<Self, Error> {
        let n = pieces.len();
        ModeFamily::new(pieces, Support::Modes(n))
    }

    pub fn pieces(&self) -> &[DMatrix<f64>] {
        &self.pieces
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    /// Maximum spectral norm over the pieces — the norm surrogate for
    /// piecewise-constant functions.
    pub fn sup_norm(&self) -> f64 {
        self.pieces
            .iter()
            .map(|p| spectral_norm(p))
            .fold(0.0, f64::max)
    }
}

/// Spectral norm (largest singular value) of a dense matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    // Largest eigenvalue of the symmetric Gram matrix; more robust than a
    // full SVD for our small dense blocks.
    let (gram, dim) = if m.nrows() <= m.ncols() {
        (m * m.transpose(), m.nrows())
    } else {
        (m.transpose() * m, m.ncols())
    };
    let _ = dim;
    let sym = (&gram + gram.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.max().max(0.0).sqrt()
}

/// True iff every (square, symmetric) piece of the family has smallest
/// eigenvalue at least `xi` — the uniform positivity test.
pub fn is_uniformly_positive(family: &ModeFamily, xi: f64) -> Result<bool, Error> {
    let (r, c) = family.shape();
    if r != c {
        return Err(Error::invalid(format!(
            "uniform positivity needs square pieces, got {r}x{c}"
        )));
    }
    for p in family.pieces() {
        if min_eig(p)? < xi {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Which corner block of `[[P1, P2], [P2^T, P3]]` the Schur reduction pivots
/// on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchurDirection {
    /// Pivot on `P3`: returns `P1 - P2 P3^{-1} P2^T`.
    Lower,
    /// Pivot on `P1`: returns `P3 - P2^T P1^{-1} P2`.
    Upper,
}

/// Schur complement of the 2x2 symmetric block matrix `[[P1, P2], [P2^T, P3]]`
/// with respect to the chosen pivot block. The pivot must be positive
/// definite.
pub fn schur_reduce(
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    p3: &DMatrix<f64>,
    direction: SchurDirection,
) -> Result<DMatrix<f64>, Error> {
    let n = p1.nrows();
    let m = p3.nrows();
    if !p1.is_square() || !p3.is_square() || p2.nrows() != n || p2.ncols() != m {
        return Err(Error::invalid(format!(
            "non-conformable Schur blocks: P1 {}x{}, P2 {}x{}, P3 {}x{}",
            p1.nrows(),
            p1.ncols(),
            p2.nrows(),
            p2.ncols(),
            p3.nrows(),
            p3.ncols()
        )));
    }
    let (pivot, label) = match direction {
        SchurDirection::Lower => (p3, "P3"),
        SchurDirection::Upper => (p1, "P1"),
    };
    let pivot_sym = SymMatrix::new(pivot.clone())?;
    let chol = nalgebra::linalg::Cholesky::new(pivot_sym.as_matrix().clone()).ok_or_else(|| {
        Error::PivotNotPositive(format!("{label} is not positive definite"))
    })?;
    let reduced = match direction {
        SchurDirection::Lower => {
            // P1 - P2 P3^{-1} P2^T
            let x = chol.solve(&p2.transpose());
            p1 - p2 * x
        }
        SchurDirection::Upper => {
            // P3 - P2^T P1^{-1} P2
            let x = chol.solve(p2);
            p3 - p2.transpose() * x
        }
    };
    Ok((&reduced + reduced.transpose()) * 0.5)
}

/// Outcome of evaluating the three equivalent strict-positivity conditions of
/// the generalized Schur complement on a family triple, at a shared margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchurReport {
    /// The assembled block family `[[P1, P2], [P2^T, P3]]` is uniformly
    /// positive.
    pub i_holds: bool,
    /// `P1` uniformly positive and `P3 - P2^T P1^{-1} P2` uniformly positive.
    pub ii_holds: bool,
    /// `P3` uniformly positive and `P1 - P2 P3^{-1} P2^T` uniformly positive.
    pub iii_holds: bool,
}

/// Evaluates the three-way Schur equivalence piecewise over conformable
/// families with a shared strictness margin `xi`.
pub fn check_schur_equivalence(
    p1s: &ModeFamily,
    p2s: &ModeFamily,
    p3s: &ModeFamily,
    xi: f64,
) -> Result<SchurReport, Error> {
    let count = p1s.pieces().len();
    if p2s.pieces().len() != count || p3s.pieces().len() != count {
        return Err(Error::invalid(
            "Schur equivalence needs families over the same support",
        ));
    }
    let (n, n2) = p1s.shape();
    let (m, m2) = p3s.shape();
    let (pr, pc) = p2s.shape();
    if n != n2 || m != m2 || pr != n || pc != m {
        return Err(Error::invalid(format!(
            "non-conformable family shapes: P1 {n}x{n2}, P2 {pr}x{pc}, P3 {m}x{m2}"
        )));
    }

    let mut report = SchurReport {
        i_holds: true,
        ii_holds: true,
        iii_holds: true,
    };
    for k in 0..count {
        let p1 = &p1s.pieces()[k];
        let p2 = &p2s.pieces()[k];
        let p3 = &p3s.pieces()[k];

        let block = assemble_block2(p1, p2, p3);
        if min_eig(&block)? < xi {
            report.i_holds = false;
        }

        let p1_pos = min_eig(p1)? >= xi;
        report.ii_holds &= p1_pos
            && match schur_reduce(p1, p2, p3, SchurDirection::Upper) {
                Ok(red) => min_eig(&red)? >= xi,
                Err(Error::PivotNotPositive(_)) => false,
                Err(e) => return Err(e),
            };

        let p3_pos = min_eig(p3)? >= xi;
        report.iii_holds &= p3_pos
            && match schur_reduce(p1, p2, p3, SchurDirection::Lower) {
                Ok(red) => min_eig(&red)? >= xi,
                Err(Error::PivotNotPositive(_)) => false,
                Err(e) => return Err(e),
            };
    }
    Ok(report)
}

/// Assembles the symmetric 2x2 block matrix `[[P1, P2], [P2^T, P3]]`.
pub fn assemble_block2(
    p1: &DMatrix<f64>,
    p2: &DMatrix<f64>,
    p3: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = p1.nrows();
    let m = p3.nrows();
    let mut block = DMatrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(p1);
    block.view_mut((0, n), (n, m)).copy_from(p2);
    block.view_mut((n, 0), (m, n)).copy_from(&p2.transpose());
    block.view_mut((n, n), (m, m)).copy_from(p3);
    block
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>, Error> {
    let sym = SymMatrix::new(m.clone())?;
    let eig = sym.as_matrix().clone().symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(DVector::from_vec(vals))
}
