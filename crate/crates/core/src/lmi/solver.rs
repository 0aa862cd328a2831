//! Semidefinite feasibility backend.
//!
//! Feasibility of `block_k(x) ≻ 0` for all blocks is decided by maximizing
//! the uniform margin `t` subject to `block_k(x) ⪰ t I`; the system is
//! accepted when the attained `t*` clears the caller's threshold. The
//! margin problem is always feasible (take `t` very negative), so solver
//! infeasibility reports are exceptional; unboundedness (dual
//! infeasibility) arises exactly when the margin can grow without limit,
//! which the trace normalization on symmetric variables prevents for
//! well-posed systems.

use super::{LmiSystem, VarValues};
use crate::error::Error;
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

/// Trace-cap scale: symmetric variables are normalized by
/// `sum_i trace(P_i) <= TRACE_CAP_SCALE * sum_i dim(P_i)`.
pub const TRACE_CAP_SCALE: f64 = 1e4;

/// Summary of one interior-point solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverDiag {
    pub status: String,
    pub iterations: u32,
    pub solve_time_s: f64,
    pub objective: f64,
}

/// Outcome of margin maximization.
#[derive(Debug, Clone)]
pub enum Feasibility {
    /// The attained margin clears the acceptance threshold.
    Feasible {
        values: VarValues,
        /// The maximized uniform margin `t*`.
        margin: f64,
        /// Margin recomputed from the returned values by evaluating every
        /// block (independent of the conic encoding).
        replayed_margin: f64,
        diag: SolverDiag,
    },
    /// The margin cannot reach the threshold (best attained value given).
    Infeasible { best_margin: f64, diag: SolverDiag },
}

/// Scaled upper-triangle length of a `d x d` symmetric matrix.
fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Maximizes the uniform margin `t` with every block `⪰ t I` and the trace
/// normalization over symmetric variables, then classifies the result
/// against `min_margin`.
///
/// Errors: `DegenerateSystem` when the margin is unbounded (no symmetric
/// variables anchor the objective), `SolverFailure` on numerical
/// breakdown or iteration limits.
pub fn solve_feasibility(sys: &LmiSystem, min_margin: f64) -> Result<Feasibility, Error> {
    if sys.blocks().is_empty() {
        return Err(Error::invalid("system has no constraint blocks"));
    }
    let ns = sys.total_scalars();
    let nvar = ns + 1; // decision scalars plus the margin t
    let t_col = ns;

    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nvar];
    let mut b: Vec<f64> = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut row_off = 0usize;

    for (bi, block) in sys.blocks().iter().enumerate() {
        let d = block.dim();
        let cst = block.constant();
        // Constant side, scaled-triangle order (column-major upper).
        for j in 0..d {
            for i in 0..=j {
                let v = cst[(i, j)];
                b.push(if i == j { v } else { v * SQRT_2 });
            }
        }
        // One conic column per scalar unknown: A[:, k] = -svec(C_k).
        for (&k, trips) in block.terms() {
            let mut ck = nalgebra::DMatrix::<f64>::zeros(d, d);
            for &(r, c, v) in trips {
                ck[(r, c)] += v;
            }
            let asym = (&ck - ck.transpose()).amax();
            if asym > 1e-9 * (1.0 + ck.amax()) {
                return Err(Error::invalid(format!(
                    "block {bi}: coefficient of scalar {k} is not symmetric (defect {asym:.3e})"
                )));
            }
            for j in 0..d {
                for i in 0..=j {
                    let v = if i == j {
                        ck[(i, i)]
                    } else {
                        0.5 * (ck[(i, j)] + ck[(j, i)]) * SQRT_2
                    };
                    if v != 0.0 {
                        cols[k].push((row_off + tri_len(j) + i, -v));
                    }
                }
            }
        }
        // Margin column: block(x) - t I in the cone.
        for j in 0..d {
            cols[t_col].push((row_off + tri_len(j) + j, 1.0));
        }
        cones.push(SupportedConeT::PSDTriangleConeT(d));
        row_off += tri_len(d);
    }

    // Trace normalization over symmetric variables, as a one-row
    // nonnegative cone: cap - sum(diagonal scalars) >= 0.
    let sym_diag = sys.sym_diagonal_scalars();
    if !sym_diag.is_empty() {
        let cap = TRACE_CAP_SCALE * sys.sym_total_dim() as f64;
        for k in &sym_diag {
            cols[*k].push((row_off, 1.0));
        }
        b.push(cap);
        cones.push(SupportedConeT::NonnegativeConeT(1));
        row_off += 1;
    }

    let nrows = row_off;
    let mut colptr: Vec<usize> = Vec::with_capacity(nvar + 1);
    let mut rowval: Vec<usize> = Vec::new();
    let mut nzval: Vec<f64> = Vec::new();
    colptr.push(0);
    for col in &cols {
        debug_assert!(col.windows(2).all(|w| w[0].0 < w[1].0), "rows sorted");
        for &(r, v) in col {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    let a_mat = CscMatrix::new(nrows, nvar, colptr, rowval, nzval);
    let p_mat = CscMatrix::zeros((nvar, nvar));
    let mut q = vec![0.0; nvar];
    q[t_col] = -1.0; // maximize t

    let settings = DefaultSettings {
        verbose: false,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings)
        .map_err(|e| Error::SolverFailure(format!("solver setup: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let status = sol.status;
    let diag = SolverDiag {
        status: format!("{status:?}"),
        iterations: solver.info.iterations,
        solve_time_s: solver.info.solve_time,
        objective: sol.obj_val,
    };
    match status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let margin = sol.x[t_col];
            let values = VarValues {
                x: sol.x[..ns].to_vec(),
            };
            if margin >= min_margin {
                let replayed_margin = sys
                    .margin_at(&values)
                    .map_err(|e| Error::SolverFailure(format!("margin replay: {e}")))?;
                Ok(Feasibility::Feasible {
                    values,
                    margin,
                    replayed_margin,
                    diag,
                })
            } else {
                Ok(Feasibility::Infeasible {
                    best_margin: margin,
                    diag,
                })
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            Ok(Feasibility::Infeasible {
                best_margin: f64::NEG_INFINITY,
                diag,
            })
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            Err(Error::DegenerateSystem(format!(
                "margin maximization is unbounded ({}): the system lacks \
                 normalization (no symmetric variables to cap)",
                diag.status
            )))
        }
        other => Err(Error::SolverFailure(format!(
            "interior-point solve ended with {other:?} after {} iterations",
            diag.iterations
        ))),
    }
}
