//! Finite and kernel-on-interval Markov chain models: density evolution,
//! positivity validation, transition sampling, and subinterval-mass
//! integration.
//!
//! Interval chains carry a transition *density* kernel `g(t, s)` (current
//! state `t`, next state `s`) with respect to the Lebesgue measure on
//! `[a, b]`. Densities evolved through the chain are represented on a uniform
//! node mesh and propagated with the trapezoid rule; every built-in kernel is
//! piecewise linear in `s` with creases only on the diagonal, so trapezoid
//! propagation preserves total mass to machine precision. Positivity is only
//! ever *mesh-certified*: checks evaluate on interior points (a.e.-positive
//! kernels may legitimately vanish at the interval endpoints).
//!
//! Piecewise-constant kernels (from lifting a finite chain onto an interval)
//! use an exact per-cell-mass representation instead of a node mesh.

pub mod quad;
pub mod rng;

use crate::error::Error;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use quad::adaptive_simpson;

/// Probability-vector / transition-row normalization tolerance.
const PROB_TOL: f64 = 1e-12;
/// Quadrature-based normalization tolerance for kernels and densities.
const KERNEL_NORM_TOL: f64 = 1e-8;

/// A time-homogeneous Markov chain on the finite mode set `{0, ..., N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    pi: DVector<f64>,
    p: DMatrix<f64>,
}

impl FiniteChain {
    /// Validates and builds a finite chain from an initial distribution and a
    /// row-stochastic transition matrix.
    pub fn new(pi: DVector<f64>, p: DMatrix<f64>) -> Result<Self, Error> {
        let n = pi.len();
        if n == 0 {
            return Err(Error::invalid("finite chain needs at least one mode"));
        }
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::invalid(format!(
                "transition matrix is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if pi.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("initial distribution must be nonnegative"));
        }
        if (pi.sum() - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!(
                "initial distribution sums to {}, expected 1",
                pi.sum()
            )));
        }
        for i in 0..n {
            let row = p.row(i);
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!("transition row {i} has negative or non-finite entries")));
            }
            if (row.sum() - 1.0).abs() > PROB_TOL {
                return Err(Error::invalid(format!(
                    "transition row {i} sums to {}, expected 1",
                    row.sum()
                )));
            }
        }
        Ok(FiniteChain { pi, p })
    }

    pub fn mode_count(&self) -> usize {
        self.pi.len()
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.p
    }
}

/// Built-in transition-density kernels on `[a, b] x [a, b]`, plus tabulated
/// and piecewise-constant representations.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    /// `g(t, s) = 1 / (b - a)`: next state uniform, independent of current.
    Uniform,
    /// Triangular kernel peaking on the diagonal: `g(t, s)` rises linearly
    /// from 0 at `s = a` to `2/(b-a)` at `s = t`, then falls linearly to 0 at
    /// `s = b`. Each slice integrates to exactly 1.
    Tent,
    /// Two linear-rational branches,
    /// `g(t, s) = (below[0] + below[1]*s) / (below[2] + below[3]*t)` for
    /// `s < t` and the `above` coefficients for `s >= t`. Linear in `s`, so
    /// trapezoid propagation stays exact; the constructor validates
    /// normalization and nonnegativity on a sample mesh.
    LinearRational { below: [f64; 4], above: [f64; 4] },
    /// Values on a shared strictly-increasing mesh covering `[a, b]`,
    /// bilinearly interpolated (row index = current state `t`).
    Tabulated { mesh: Vec<f64>, values: DMatrix<f64> },
    /// Piecewise-constant density on a cell grid: `g(t, s) =
    /// values[(i, j)]` for `t` in cell `i`, `s` in cell `j`. This is the lift
    /// of a finite chain onto an interval; each row of `values` times the
    /// cell widths must sum to 1.
    CellConstant { breaks: Vec<f64>, values: DMatrix<f64> },
}

/// Initial density on `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDensity {
    /// Constant `1 / (b - a)`.
    Uniform,
    /// Piecewise-linear interpolation of values on a strictly-increasing mesh
    /// covering `[a, b]`.
    Tabulated { mesh: Vec<f64>, values: Vec<f64> },
    /// Piecewise-constant on cells.
    PiecewiseConst { breaks: Vec<f64>, values: Vec<f64> },
}

/// Index of the cell of `breaks` containing `x` (cells half-open, the last
/// closed).
pub(crate) fn cell_index(breaks: &[f64], x: f64) -> usize {
    let n_cells = breaks.len() - 1;
    let count = breaks.partition_point(|h| *h <= x);
    count.saturating_sub(1).min(n_cells - 1)
}

fn check_mesh(mesh: &[f64], a: f64, b: f64, what: &str) -> Result<(), Error> {
    if mesh.len() < 2 {
        return Err(Error::invalid(format!("{what}: mesh needs at least 2 points")));
    }
    if mesh.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("{what}: mesh must be strictly increasing")));
    }
    if (mesh[0] - a).abs() > 1e-12 || (mesh[mesh.len() - 1] - b).abs() > 1e-12 {
        return Err(Error::invalid(format!("{what}: mesh must cover [{a}, {b}]")));
    }
    Ok(())
}

fn interp_linear(mesh: &[f64], values: &[f64], x: f64) -> f64 {
    let i = cell_index(mesh, x);
    let (x0, x1) = (mesh[i], mesh[i + 1]);
    let w = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
    values[i] * (1.0 - w) + values[i + 1] * w
}

impl InitialDensity {
    fn validate(&self, a: f64, b: f64) -> Result<(), Error> {
        match self {
            InitialDensity::Uniform => Ok(()),
            InitialDensity::Tabulated { mesh, values } => {
                check_mesh(mesh, a, b, "initial density")?;
                if values.len() != mesh.len() {
                    return Err(Error::invalid("initial density: one value per mesh point"));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid("initial density must be nonnegative"));
                }
                Ok(())
            }
            InitialDensity::PiecewiseConst { breaks, values } => {
                check_mesh(breaks, a, b, "initial density")?;
                if values.len() + 1 != breaks.len() {
                    return Err(Error::invalid("initial density: one value per cell"));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid("initial density must be nonnegative"));
                }
                Ok(())
            }
        }
    }

    /// Density value at `x`.
    pub fn eval(&self, a: f64, b: f64, x: f64) -> f64 {
        match self {
            InitialDensity::Uniform => 1.0 / (b - a),
            InitialDensity::Tabulated { mesh, values } => interp_linear(mesh, values, x),
            InitialDensity::PiecewiseConst { breaks, values } => values[cell_index(breaks, x)],
        }
    }

    /// Points where the density may kink or jump.
    fn split_points(&self) -> Vec<f64> {
        match self {
            InitialDensity::Uniform => Vec::new(),
            InitialDensity::Tabulated { mesh, .. } => mesh.clone(),
            InitialDensity::PiecewiseConst { breaks, .. } => breaks.clone(),
        }
    }
}

/// A time-homogeneous Markov chain on the interval `[a, b]` with a transition
/// density kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelChain {
    a: f64,
    b: f64,
    nu0: InitialDensity,
    kernel: KernelKind,
    mesh_n: usize,
}

/// Default number of mesh cells for density representation and positivity
/// certification.
pub const DEFAULT_MESH_N: usize = 1000;

impl KernelChain {
    /// Validates and builds an interval chain. Checks: interval sanity, mesh
    /// coverage for tabulated data, nonnegativity on a sample mesh, kernel
    /// slice normalization `int g(t, .) = 1` (within 1e-8) for sampled `t`,
    /// and initial-density normalization.
    pub fn new(
        a: f64,
        b: f64,
        nu0: InitialDensity,
        kernel: KernelKind,
        mesh_n: usize,
    ) -> Result<Self, Error> {
        if !(a.is_finite() && b.is_finite()) || a >= b {
            return Err(Error::invalid(format!(
                "interval endpoints must be finite with a < b, got [{a}, {b}]"
            )));
        }
        if mesh_n < 10 {
            return Err(Error::invalid("density mesh needs at least 10 cells"));
        }
        nu0.validate(a, b)?;
        match &kernel {
            KernelKind::Uniform | KernelKind::Tent => {}
            KernelKind::LinearRational { .. } => {}
            KernelKind::Tabulated { mesh, values } => {
                check_mesh(mesh, a, b, "kernel")?;
                if values.nrows() != mesh.len() || values.ncols() != mesh.len() {
                    return Err(Error::invalid(
                        "tabulated kernel: values must be square on the mesh",
                    ));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid("tabulated kernel must be nonnegative"));
                }
            }
            KernelKind::CellConstant { breaks, values } => {
                check_mesh(breaks, a, b, "kernel")?;
                let n = breaks.len() - 1;
                if values.nrows() != n || values.ncols() != n {
                    return Err(Error::invalid(
                        "piecewise-constant kernel: one value per cell pair",
                    ));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid("kernel must be nonnegative"));
                }
                for i in 0..n {
                    let mass: f64 = (0..n)
                        .map(|j| values[(i, j)] * (breaks[j + 1] - breaks[j]))
                        .sum();
                    if (mass - 1.0).abs() > KERNEL_NORM_TOL {
                        return Err(Error::invalid(format!(
                            "kernel row {i} integrates to {mass}, expected 1"
                        )));
                    }
                }
            }
        }
        let chain = KernelChain {
            a,
            b,
            nu0,
            kernel,
            mesh_n,
        };
        chain.validate_normalization()?;
        Ok(chain)
    }

    fn validate_normalization(&self) -> Result<(), Error> {
        // Initial density integrates to 1.
        let splits = self.nu0.split_points();
        let total = adaptive_simpson(
            |x| self.nu0.eval(self.a, self.b, x),
            self.a,
            self.b,
            quad::DEFAULT_TOL,
            &splits,
        );
        if (total - 1.0).abs() > KERNEL_NORM_TOL {
            return Err(Error::invalid(format!(
                "initial density integrates to {total}, expected 1"
            )));
        }
        // Kernel slices integrate to 1 for sampled current states, and the
        // kernel is nonnegative on a sample mesh.
        if !matches!(self.kernel, KernelKind::CellConstant { .. }) {
            let samples = 16;
            for k in 0..=samples {
                let t = self.a + (self.b - self.a) * k as f64 / samples as f64;
                let mass = self.slice_mass(t);
                if (mass - 1.0).abs() > KERNEL_NORM_TOL {
                    return Err(Error::invalid(format!(
                        "kernel slice at t={t} integrates to {mass}, expected 1"
                    )));
                }
                for j in 0..=samples {
                    let s = self.a + (self.b - self.a) * j as f64 / samples as f64;
                    if self.kernel_eval(t, s) < -1e-12 {
                        return Err(Error::invalid(format!(
                            "kernel is negative at (t={t}, s={s})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn initial_density(&self) -> &InitialDensity {
        &self.nu0
    }

    pub fn kernel(&self) -> &KernelKind {
        &self.kernel
    }

    pub fn mesh_cells(&self) -> usize {
        self.mesh_n
    }

    /// Uniform node mesh (mesh_n + 1 points including both endpoints) used
    /// for density representation.
    pub fn mesh_nodes(&self) -> Vec<f64> {
        let n = self.mesh_n;
        (0..=n)
            .map(|i| self.a + (self.b - self.a) * i as f64 / n as f64)
            .collect()
    }

    /// Transition density `g(t, s)`: current state `t`, next state `s`.
    pub fn kernel_eval(&self, t: f64, s: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        match &self.kernel {
            KernelKind::Uniform => 1.0 / (b - a),
            KernelKind::Tent => {
                let peak = 2.0 / (b - a);
                if s < t {
                    if t > a {
                        peak * (s - a) / (t - a)
                    } else {
                        0.0
                    }
                } else if s > t {
                    if t < b {
                        peak * (b - s) / (b - t)
                    } else {
                        0.0
                    }
                } else {
                    peak
                }
            }
            KernelKind::LinearRational { below, above } => {
                let br = if s < t { below } else { above };
                let denom = br[2] + br[3] * t;
                if denom == 0.0 {
                    0.0
                } else {
                    ((br[0] + br[1] * s) / denom).max(0.0)
                }
            }
            KernelKind::Tabulated { mesh, values } => {
                let i = cell_index(mesh, t);
                let j = cell_index(mesh, s);
                let wt = (t - mesh[i]) / (mesh[i + 1] - mesh[i]);
                let ws = (s - mesh[j]) / (mesh[j + 1] - mesh[j]);
                values[(i, j)] * (1.0 - wt) * (1.0 - ws)
                    + values[(i, j + 1)] * (1.0 - wt) * ws
                    + values[(i + 1, j)] * wt * (1.0 - ws)
                    + values[(i + 1, j + 1)] * wt * ws
            }
            KernelKind::CellConstant { breaks, values } => {
                values[(cell_index(breaks, t), cell_index(breaks, s))]
            }
        }
    }

    /// Points in `s` where `g(t, .)` may kink or jump.
    pub fn split_points_next(&self, t: f64) -> Vec<f64> {
        match &self.kernel {
            KernelKind::Uniform => Vec::new(),
            KernelKind::Tent | KernelKind::LinearRational { .. } => vec![t],
            KernelKind::Tabulated { mesh, .. } => mesh.clone(),
            KernelKind::CellConstant { breaks, .. } => breaks.clone(),
        }
    }

    /// Points in `t` where `g(., s)` may kink or jump.
    pub fn split_points_current(&self, s: f64) -> Vec<f64> {
        match &self.kernel {
            KernelKind::Uniform => Vec::new(),
            KernelKind::Tent | KernelKind::LinearRational { .. } => vec![s],
            KernelKind::Tabulated { mesh, .. } => mesh.clone(),
            KernelKind::CellConstant { breaks, .. } => breaks.clone(),
        }
    }

    /// `int_a^b g(t, s) ds` by adaptive quadrature.
    pub fn slice_mass(&self, t: f64) -> f64 {
        let splits = self.split_points_next(t);
        adaptive_simpson(
            |s| self.kernel_eval(t, s),
            self.a,
            self.b,
            quad::DEFAULT_TOL,
            &splits,
        )
    }

    /// Marginal `int_a^b g(t, s) dt` (integrating the *current* state) at
    /// next-state `s`.
    pub fn marginal_at(&self, s: f64) -> f64 {
        let splits = self.split_points_current(s);
        adaptive_simpson(
            |t| self.kernel_eval(t, s),
            self.a,
            self.b,
            quad::DEFAULT_TOL,
            &splits,
        )
    }
}

/// A chain model: finite modes or an interval with a density kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum ChainModel {
    Finite(FiniteChain),
    Kernel(KernelChain),
}

impl ChainModel {
    pub fn is_finite(&self) -> bool {
        matches!(self, ChainModel::Finite(_))
    }

    pub fn as_finite(&self) -> Option<&FiniteChain> {
        match self {
            ChainModel::Finite(c) => Some(c),
            ChainModel::Kernel(_) => None,
        }
    }

    pub fn as_kernel(&self) -> Option<&KernelChain> {
        match self {
            ChainModel::Kernel(c) => Some(c),
            ChainModel::Finite(_) => None,
        }
    }
}

/// A point of the chain's state space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChainState {
    Mode(usize),
    Point(f64),
}

/// Distribution of the chain at a step: probability vector (finite), density
/// values on the node mesh (interval), or exact per-cell masses
/// (piecewise-constant kernels).
#[derive(Debug, Clone, PartialEq)]
pub enum DensityState {
    Finite {
        probs: DVector<f64>,
        step: usize,
    },
    Mesh {
        nodes: Vec<f64>,
        values: DVector<f64>,
        step: usize,
    },
    CellMasses {
        breaks: Vec<f64>,
        masses: DVector<f64>,
        step: usize,
    },
}

impl DensityState {
    /// The chain's initial distribution in the representation matching the
    /// chain kind.
    pub fn initial(chain: &ChainModel) -> Self {
        match chain {
            ChainModel::Finite(c) => DensityState::Finite {
                probs: c.initial().clone(),
                step: 0,
            },
            ChainModel::Kernel(k) => match k.kernel() {
                KernelKind::CellConstant { breaks, .. } => {
                    let (a, b) = k.interval();
                    let nu0 = k.initial_density();
                    let splits = nu0.split_points();
                    let masses: Vec<f64> = breaks
                        .windows(2)
                        .map(|w| {
                            adaptive_simpson(
                                |x| nu0.eval(a, b, x),
                                w[0],
                                w[1],
                                quad::DEFAULT_TOL,
                                &splits,
                            )
                            .max(0.0)
                        })
                        .collect();
                    DensityState::CellMasses {
                        breaks: breaks.clone(),
                        masses: DVector::from_vec(masses),
                        step: 0,
                    }
                }
                _ => {
                    let (a, b) = k.interval();
                    let nodes = k.mesh_nodes();
                    let values =
                        DVector::from_iterator(nodes.len(), nodes.iter().map(|&x| nu0_eval(k, a, b, x)));
                    DensityState::Mesh {
                        nodes,
                        values,
                        step: 0,
                    }
                }
            },
        }
    }

    pub fn step(&self) -> usize {
        match self {
            DensityState::Finite { step, .. }
            | DensityState::Mesh { step, .. }
            | DensityState::CellMasses { step, .. } => *step,
        }
    }

    /// Total probability mass (sum or trapezoid integral).
    pub fn mass(&self) -> f64 {
        match self {
            DensityState::Finite { probs, .. } => probs.sum(),
            DensityState::CellMasses { masses, .. } => masses.sum(),
            DensityState::Mesh { nodes, values, .. } => trapezoid_mass(nodes, values),
        }
    }

    /// Smallest value on the check set: all probabilities (finite), all cell
    /// masses, or the *interior* mesh nodes (densities may legitimately
    /// vanish at the interval endpoints).
    pub fn min_on_check_set(&self) -> f64 {
        match self {
            DensityState::Finite { probs, .. } => probs.min(),
            DensityState::CellMasses { masses, .. } => masses.min(),
            DensityState::Mesh { values, .. } => {
                let n = values.len();
                (1..n - 1).map(|i| values[i]).fold(f64::INFINITY, f64::min)
            }
        }
    }
}

fn nu0_eval(k: &KernelChain, a: f64, b: f64, x: f64) -> f64 {
    k.initial_density().eval(a, b, x)
}

fn trapezoid_mass(nodes: &[f64], values: &DVector<f64>) -> f64 {
    nodes
        .windows(2)
        .enumerate()
        .map(|(i, w)| 0.5 * (w[1] - w[0]) * (values[i] + values[i + 1]))
        .sum()
}

/// One-step density propagation `nu_{k+1}(s) = int nu_k(t) g(t, s) dt`.
///
/// Finite chains: the exact row-vector product `nu . P`. Interval chains:
/// trapezoid propagation on the node mesh (exact in mass for the built-in
/// kernels). Piecewise-constant kernels: exact cell-mass propagation.
pub fn evolve_density(chain: &ChainModel, nu: &DensityState) -> Result<DensityState, Error> {
    match (chain, nu) {
        (ChainModel::Finite(c), DensityState::Finite { probs, step }) => {
            if probs.len() != c.mode_count() {
                return Err(Error::invalid("density length does not match mode count"));
            }
            Ok(DensityState::Finite {
                probs: c.transition().transpose() * probs,
                step: step + 1,
            })
        }
        (ChainModel::Kernel(k), DensityState::Mesh {
            nodes,
            values,
            step,
        }) => {
            let expected = k.mesh_nodes();
            if nodes.len() != expected.len()
                || nodes
                    .iter()
                    .zip(&expected)
                    .any(|(x, y)| (x - y).abs() > 1e-12)
            {
                return Err(Error::invalid("density mesh does not match chain mesh"));
            }
            let m = nodes.len();
            let h = (k.b - k.a) / k.mesh_n as f64;
            // Trapezoid weights over the current-state integral.
            let mut out = DVector::zeros(m);
            for (i, &ell) in nodes.iter().enumerate() {
                let mut acc = 0.0;
                for (j, &t) in nodes.iter().enumerate() {
                    let w = if j == 0 || j == m - 1 { 0.5 * h } else { h };
                    acc += w * values[j] * k.kernel_eval(t, ell);
                }
                out[i] = acc;
            }
            Ok(DensityState::Mesh {
                nodes: nodes.clone(),
                values: out,
                step: step + 1,
            })
        }
        (ChainModel::Kernel(k), DensityState::CellMasses {
            breaks,
            masses,
            step,
        }) => {
            let KernelKind::CellConstant {
                breaks: kb,
                values,
            } = k.kernel()
            else {
                return Err(Error::invalid(
                    "cell-mass densities only propagate through piecewise-constant kernels",
                ));
            };
            if breaks.len() != kb.len()
                || breaks.iter().zip(kb).any(|(x, y)| (x - y).abs() > 1e-12)
            {
                return Err(Error::invalid("density cells do not match kernel cells"));
            }
            let n = masses.len();
            let mut out = DVector::zeros(n);
            for j in 0..n {
                let width = kb[j + 1] - kb[j];
                out[j] = (0..n).map(|i| masses[i] * values[(i, j)] * width).sum();
            }
            Ok(DensityState::CellMasses {
                breaks: breaks.clone(),
                masses: out,
                step: step + 1,
            })
        }
        _ => Err(Error::invalid(
            "density representation does not match chain kind",
        )),
    }
}

/// Positivity report. For interval chains the verdict is **mesh-certified**:
/// it asserts positivity on the evaluation mesh (interior midpoints), never a
/// proof of a.e.-positivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositivityReport {
    /// Initial distribution strictly positive (finite: every mode; kernel:
    /// every interior midpoint of the evaluation mesh).
    pub nu0_positive: bool,
    /// Transition law reaches every state: finite — every column of the
    /// transition matrix has a positive entry; kernel — the marginal
    /// `int g(t, s) dt` is strictly positive at every evaluation midpoint `s`.
    pub kernel_marginal_positive: bool,
    /// True when the verdicts were sampled on a mesh rather than exhaustive.
    pub mesh_certified: bool,
}

/// Checks the chain-positivity assumptions that make densities of the chain
/// stay positive for all time.
pub fn check_positivity(chain: &ChainModel) -> PositivityReport {
    match chain {
        ChainModel::Finite(c) => {
            let nu0_positive = c.initial().iter().all(|&v| v > 0.0);
            let p = c.transition();
            let kernel_marginal_positive =
                (0..p.ncols()).all(|j| (0..p.nrows()).any(|i| p[(i, j)] > 0.0));
            PositivityReport {
                nu0_positive,
                kernel_marginal_positive,
                mesh_certified: false,
            }
        }
        ChainModel::Kernel(k) => {
            let (a, b) = k.interval();
            let cells = k.mesh_cells();
            let mut nu0_positive = true;
            let mut marginal_positive = true;
            for i in 0..cells {
                let mid = a + (b - a) * (i as f64 + 0.5) / cells as f64;
                if k.initial_density().eval(a, b, mid) <= 0.0 {
                    nu0_positive = false;
                }
                if marginal_positive && k.marginal_at(mid) <= 0.0 {
                    marginal_positive = false;
                }
            }
            PositivityReport {
                nu0_positive,
                kernel_marginal_positive: marginal_positive,
                mesh_certified: true,
            }
        }
    }
}

/// Draws the next chain state from the transition law at `current`.
///
/// Finite chains sample the categorical row. Interval chains invert the slice
/// CDF by bisection with incremental adaptive quadrature (CDF error at most
/// 1e-8); piecewise-constant kernels sample the cell categorically and then
/// uniformly within the cell (exact).
pub fn sample_next<R: Rng + ?Sized>(
    chain: &ChainModel,
    current: ChainState,
    rng: &mut R,
) -> Result<ChainState, Error> {
    match (chain, current) {
        (ChainModel::Finite(c), ChainState::Mode(i)) => {
            if i >= c.mode_count() {
                return Err(Error::invalid(format!("mode {i} out of range")));
            }
            let row = c.transition().row(i);
            let j = sample_categorical(row.iter().copied(), rng)?;
            Ok(ChainState::Mode(j))
        }
        (ChainModel::Kernel(k), ChainState::Point(t)) => {
            let (a, b) = k.interval();
            if !(a..=b).contains(&t) {
                return Err(Error::invalid(format!("state {t} outside [{a}, {b}]")));
            }
            if let KernelKind::CellConstant { breaks, values } = k.kernel() {
                let i = cell_index(breaks, t);
                let masses =
                    (0..values.ncols()).map(|j| values[(i, j)] * (breaks[j + 1] - breaks[j]));
                let j = sample_categorical(masses, rng)?;
                let u: f64 = rng.gen();
                return Ok(ChainState::Point(
                    breaks[j] + u * (breaks[j + 1] - breaks[j]),
                ));
            }
            let splits = k.split_points_next(t);
            let x = sample_density_inverse_cdf(|s| k.kernel_eval(t, s), a, b, &splits, rng)?;
            Ok(ChainState::Point(x))
        }
        _ => Err(Error::invalid("state kind does not match chain kind")),
    }
}

/// Draws an initial chain state from the initial distribution.
pub fn sample_initial<R: Rng + ?Sized>(
    chain: &ChainModel,
    rng: &mut R,
) -> Result<ChainState, Error> {
    match chain {
        ChainModel::Finite(c) => {
            let i = sample_categorical(c.initial().iter().copied(), rng)?;
            Ok(ChainState::Mode(i))
        }
        ChainModel::Kernel(k) => {
            let (a, b) = k.interval();
            let splits = k.initial_density().split_points();
            let x = sample_density_inverse_cdf(
                |s| k.initial_density().eval(a, b, s),
                a,
                b,
                &splits,
                rng,
            )?;
            Ok(ChainState::Point(x))
        }
    }
}

fn sample_categorical<R: Rng + ?Sized>(
    weights: impl Iterator<Item = f64>,
    rng: &mut R,
) -> Result<usize, Error> {
    let w: Vec<f64> = weights.collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::SamplingError(format!(
            "degenerate categorical with total weight {total}"
        )));
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(w.len() - 1)
}

/// Inverse-CDF sampling of a density on `[a, b]` by bisection. The bracket's
/// CDF value is maintained incrementally, so each step integrates only the
/// half-interval it crosses.
fn sample_density_inverse_cdf<R: Rng + ?Sized>(
    density: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    splits: &[f64],
    rng: &mut R,
) -> Result<f64, Error> {
    let total = adaptive_simpson(&density, a, b, quad::DEFAULT_TOL, splits);
    if !(total > 1e-12) {
        return Err(Error::SamplingError(format!(
            "degenerate density slice with total mass {total}"
        )));
    }
    let target = rng.gen::<f64>() * total;
    let mut lo = a;
    let mut hi = b;
    let mut cdf_lo = 0.0;
    let width_tol = (b - a) * 1e-10;
    for _ in 0..64 {
        if hi - lo <= width_tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let part = adaptive_simpson(&density, lo, mid, quad::DEFAULT_TOL, splits);
        if cdf_lo + part < target {
            cdf_lo += part;
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-cell masses `q_i(ell) = int_{cell i} g(ell, t) dt` of the transition
/// law out of state `ell`, over the cells of `grid`.
pub fn subinterval_masses(
    chain: &KernelChain,
    grid: &crate::gridding::Grid,
    ell: f64,
) -> Result<DVector<f64>, Error> {
    let (a, b) = chain.interval();
    if !(a..=b).contains(&ell) {
        return Err(Error::invalid(format!(
            "state {ell} outside the chain interval [{a}, {b}]"
        )));
    }
    let pts = grid.points();
    if (pts[0] - a).abs() > 1e-12 || (pts[pts.len() - 1] - b).abs() > 1e-12 {
        return Err(Error::invalid("grid does not cover the chain interval"));
    }
    // Exact fast path for piecewise-constant kernels on their own cells.
    if let KernelKind::CellConstant { breaks, values } = chain.kernel() {
        if breaks.len() == pts.len()
            && breaks.iter().zip(pts).all(|(x, y)| (x - y).abs() < 1e-12)
        {
            let i = cell_index(breaks, ell);
            let q: Vec<f64> = (0..values.ncols())
                .map(|j| values[(i, j)] * (breaks[j + 1] - breaks[j]))
                .collect();
            return Ok(DVector::from_vec(q));
        }
    }
    let splits = chain.split_points_next(ell);
    let q: Vec<f64> = pts
        .windows(2)
        .map(|w| {
            adaptive_simpson(
                |s| chain.kernel_eval(ell, s),
                w[0],
                w[1],
                quad::DEFAULT_TOL,
                &splits,
            )
            .max(0.0)
        })
        .collect();
    Ok(DVector::from_vec(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_mode_chain() -> FiniteChain {
        FiniteChain::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]),
        )
        .unwrap()
    }

    fn tent_chain() -> KernelChain {
        KernelChain::new(0.0, 0.4, InitialDensity::Uniform, KernelKind::Tent, 200).unwrap()
    }

    #[test]
    fn finite_chain_validation() {
        assert!(FiniteChain::new(
            DVector::from_vec(vec![0.6, 0.5]),
            DMatrix::identity(2, 2)
        )
        .is_err());
        assert!(FiniteChain::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.5, 0.5])
        )
        .is_err());
    }

    #[test]
    fn stationary_density_is_fixed() {
        let chain = ChainModel::Finite(two_mode_chain());
        let nu = DensityState::initial(&chain);
        let nu1 = evolve_density(&chain, &nu).unwrap();
        match nu1 {
            DensityState::Finite { probs, step } => {
                assert_eq!(step, 1);
                assert!((probs[0] - 0.5).abs() < 1e-15 && (probs[1] - 0.5).abs() < 1e-15);
            }
            _ => panic!("wrong representation"),
        }
    }

    #[test]
    fn finite_evolution_matches_matrix_power() {
        let c = FiniteChain::new(
            DVector::from_vec(vec![0.3, 0.7]),
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.4, 0.6]),
        )
        .unwrap();
        let chain = ChainModel::Finite(c.clone());
        let mut nu = DensityState::initial(&chain);
        for _ in 0..5 {
            nu = evolve_density(&chain, &nu).unwrap();
        }
        let p5 = c.transition().pow(5);
        let expected = p5.transpose() * c.initial();
        match nu {
            DensityState::Finite { probs, .. } => {
                assert!((probs - expected).amax() < 1e-12);
            }
            _ => panic!("wrong representation"),
        }
    }

    #[test]
    fn tent_kernel_slices_normalize() {
        let k = tent_chain();
        for &t in &[0.0, 0.05, 0.2, 0.33, 0.4] {
            assert!((k.slice_mass(t) - 1.0).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn tent_mass_preserved_under_propagation() {
        let chain = ChainModel::Kernel(tent_chain());
        let mut nu = DensityState::initial(&chain);
        assert!((nu.mass() - 1.0).abs() < 1e-12);
        for _ in 0..5 {
            nu = evolve_density(&chain, &nu).unwrap();
        }
        assert!((nu.mass() - 1.0).abs() < 1e-12);
        assert!(nu.min_on_check_set() > 0.0);
    }

    #[test]
    fn positivity_checks() {
        let rep = check_positivity(&ChainModel::Finite(two_mode_chain()));
        assert!(rep.nu0_positive && rep.kernel_marginal_positive && !rep.mesh_certified);

        let dead = FiniteChain::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        let rep = check_positivity(&ChainModel::Finite(dead));
        assert!(!rep.nu0_positive && !rep.kernel_marginal_positive);

        let rep = check_positivity(&ChainModel::Kernel(tent_chain()));
        assert!(rep.nu0_positive && rep.kernel_marginal_positive && rep.mesh_certified);
    }

    #[test]
    fn absorbing_mode_always_returns_itself() {
        let c = FiniteChain::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let chain = ChainModel::Finite(c);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = sample_next(&chain, ChainState::Mode(0), &mut rng).unwrap();
            assert_eq!(s, ChainState::Mode(0));
        }
    }

    #[test]
    fn kernel_sampling_stays_in_interval() {
        let chain = ChainModel::Kernel(tent_chain());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut state = ChainState::Point(0.2);
        for _ in 0..20 {
            state = sample_next(&chain, state, &mut rng).unwrap();
            let ChainState::Point(x) = state else {
                panic!("wrong state kind")
            };
            assert!((0.0..=0.4).contains(&x));
        }
    }
}
