//! Markov jump linear system models and their analysis primitives: the
//! one-step conditional-expectation operator, the Riccati-style operator
//! suite behind the disturbance-attenuation bound, Monte Carlo simulation,
//! mean-square stability estimation, the second-moment lift for exact
//! spectral radii (finite chains), and loop interconnections.
//!
//! A model is
//!
//! ```text
//! x(k+1) = A(theta(k)) x(k) + B(theta(k)) w(k)
//! z(k)   = C(theta(k)) x(k) + D(theta(k)) w(k)
//! ```
//!
//! where `theta` is a Markov chain on finitely many modes or on a real
//! interval.

use crate::error::Error;
use crate::gridding::Grid;
use crate::markov::{
    cell_index, sample_initial, sample_next, subinterval_masses, ChainModel, ChainState,
    FiniteChain, KernelChain,
};
use crate::matfun::{min_eig_sym, SymMatrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::fmt;
use std::sync::Arc;

/// State-norm threshold beyond which a trajectory is declared divergent.
pub const DIVERGENCE_CAP: f64 = 1e150;

/// A state-dependent matrix coefficient: one matrix per mode (finite
/// chains), one matrix per cell or a smooth function of the state (interval
/// chains), or identically zero.
#[derive(Clone)]
pub enum MatrixField {
    /// One matrix per mode of a finite chain.
    PerMode(Vec<DMatrix<f64>>),
    /// Constant on each cell `[breaks[i], breaks[i+1])` (last cell closed).
    PiecewiseCells {
        breaks: Vec<f64>,
        pieces: Vec<DMatrix<f64>>,
    },
    /// Arbitrary (shape-stable) function of the chain state.
    Smooth(SmoothField),
    /// The zero matrix of a fixed shape.
    Zero { rows: usize, cols: usize },
}

/// A matrix-valued function of the interval state with a declared shape.
#[derive(Clone)]
pub struct SmoothField {
    f: Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>,
    rows: usize,
    cols: usize,
}

impl SmoothField {
    pub fn new(
        rows: usize,
        cols: usize,
        f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        SmoothField {
            f: Arc::new(f),
            rows,
            cols,
        }
    }
}

impl fmt::Debug for SmoothField {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(fm, "SmoothField({}x{})", self.rows, self.cols)
    }
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixField::PerMode(m) => write!(fm, "PerMode({} pieces)", m.len()),
            MatrixField::PiecewiseCells { pieces, .. } => {
                write!(fm, "PiecewiseCells({} cells)", pieces.len())
            }
            MatrixField::Smooth(s) => s.fmt(fm),
            MatrixField::Zero { rows, cols } => write!(fm, "Zero({rows}x{cols})"),
        }
    }
}

fn uniform_shape(pieces: &[DMatrix<f64>], what: &str) -> Result<(usize, usize), Error> {
    let Some(first) = pieces.first() else {
        return Err(Error::invalid(format!("{what}: needs at least one matrix")));
    };
    let shape = first.shape();
    for (k, m) in pieces.iter().enumerate() {
        if m.shape() != shape {
            return Err(Error::invalid(format!(
                "{what}: piece {k} is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                shape.0,
                shape.1
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{what}: piece {k} has non-finite entries")));
        }
    }
    Ok(shape)
}

impl MatrixField {
    /// The (rows, cols) shape every evaluation of this field has.
    pub fn shape(&self) -> Result<(usize, usize), Error> {
        match self {
            MatrixField::PerMode(p) => uniform_shape(p, "per-mode field"),
            MatrixField::PiecewiseCells { breaks, pieces } => {
                if breaks.len() != pieces.len() + 1 {
                    return Err(Error::invalid("piecewise field: one matrix per cell"));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid("piecewise field: breaks must increase"));
                }
                uniform_shape(pieces, "piecewise field")
            }
            MatrixField::Smooth(s) => Ok((s.rows, s.cols)),
            MatrixField::Zero { rows, cols } => Ok((*rows, *cols)),
        }
    }

    pub fn is_zero_variant(&self) -> bool {
        matches!(self, MatrixField::Zero { .. })
    }

    /// Value in mode `i` of a finite chain.
    pub fn eval_mode(&self, i: usize) -> Result<DMatrix<f64>, Error> {
        match self {
            MatrixField::PerMode(p) => p
                .get(i)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("mode {i} out of range"))),
            MatrixField::Zero { rows, cols } => Ok(DMatrix::zeros(*rows, *cols)),
            _ => Err(Error::invalid(
                "state-indexed field evaluated with a mode index",
            )),
        }
    }

    /// Value at interval state `ell`.
    pub fn eval_point(&self, ell: f64) -> Result<DMatrix<f64>, Error> {
        match self {
            MatrixField::PiecewiseCells { breaks, pieces } => {
                if !(breaks[0]..=breaks[breaks.len() - 1]).contains(&ell) {
                    return Err(Error::invalid(format!("state {ell} outside field domain")));
                }
                Ok(pieces[cell_index(breaks, ell)].clone())
            }
            MatrixField::Smooth(s) => {
                let m = (s.f)(ell);
                if m.shape() != (s.rows, s.cols) {
                    return Err(Error::invalid(format!(
                        "smooth field returned {}x{}, declared {}x{}",
                        m.nrows(),
                        m.ncols(),
                        s.rows,
                        s.cols
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "smooth field returned non-finite entries at {ell}"
                    )));
                }
                Ok(m)
            }
            MatrixField::Zero { rows, cols } => Ok(DMatrix::zeros(*rows, *cols)),
            _ => Err(Error::invalid(
                "mode-indexed field evaluated at an interval state",
            )),
        }
    }

    /// Value at a chain state of either kind.
    pub fn eval_state(&self, s: ChainState) -> Result<DMatrix<f64>, Error> {
        match s {
            ChainState::Mode(i) => self.eval_mode(i),
            ChainState::Point(x) => self.eval_point(x),
        }
    }
}

/// A Markov jump linear system.
#[derive(Debug, Clone)]
pub struct MjlsModel {
    chain: ChainModel,
    a: MatrixField,
    b: MatrixField,
    c: MatrixField,
    d: MatrixField,
    n: usize,
    r_in: usize,
    r_out: usize,
}

impl MjlsModel {
    /// Validates shapes, support agreement between the chain and the fields,
    /// and the feedthrough-orthogonality condition `C^T D = 0` the
    /// disturbance-attenuation machinery assumes (checked per mode, or on a
    /// 256-point sample mesh for interval chains).
    pub fn new(
        chain: ChainModel,
        a: MatrixField,
        b: MatrixField,
        c: MatrixField,
        d: MatrixField,
    ) -> Result<Self, Error> {
        let (an, an2) = a.shape()?;
        if an != an2 {
            return Err(Error::invalid("state matrix must be square"));
        }
        let (bn, r_in) = b.shape()?;
        let (r_out, cn) = c.shape()?;
        let (dn, dm) = d.shape()?;
        if bn != an || cn != an {
            return Err(Error::invalid(format!(
                "field shapes disagree on the state dimension: A is {an}x{an}, B has {bn} rows, C has {cn} columns"
            )));
        }
        if dn != r_out || dm != r_in {
            return Err(Error::invalid(format!(
                "feedthrough must be {r_out}x{r_in}, got {dn}x{dm}"
            )));
        }
        let fields = [&a, &b, &c, &d];
        match &chain {
            ChainModel::Finite(fc) => {
                for f in fields {
                    match f {
                        MatrixField::PerMode(p) if p.len() == fc.mode_count() => {}
                        MatrixField::Zero { .. } => {}
                        MatrixField::PerMode(p) => {
                            return Err(Error::invalid(format!(
                                "{} matrices for a {}-mode chain",
                                p.len(),
                                fc.mode_count()
                            )));
                        }
                        _ => {
                            return Err(Error::invalid(
                                "finite-mode chains need per-mode (or zero) matrices",
                            ));
                        }
                    }
                }
            }
            ChainModel::Kernel(kc) => {
                let (ka, kb) = kc.interval();
                for f in fields {
                    match f {
                        MatrixField::PerMode(_) => {
                            return Err(Error::invalid(
                                "interval chains need piecewise, smooth, or zero fields",
                            ));
                        }
                        MatrixField::PiecewiseCells { breaks, .. } => {
                            if (breaks[0] - ka).abs() > 1e-12
                                || (breaks[breaks.len() - 1] - kb).abs() > 1e-12
                            {
                                return Err(Error::invalid(
                                    "piecewise field does not cover the chain interval",
                                ));
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        let model = MjlsModel {
            chain,
            a,
            b,
            c,
            d,
            n: an,
            r_in,
            r_out,
        };
        model.check_feedthrough_orthogonality()?;
        Ok(model)
    }

    fn check_feedthrough_orthogonality(&self) -> Result<(), Error> {
        if self.d.is_zero_variant() || self.c.is_zero_variant() {
            return Ok(());
        }
        let check = |c: &DMatrix<f64>, d: &DMatrix<f64>, at: &str| -> Result<(), Error> {
            let cross = c.transpose() * d;
            let scale = 1.0 + c.amax() * d.amax();
            if cross.amax() > 1e-10 * scale {
                return Err(Error::invalid(format!(
                    "output and feedthrough must be orthogonal (C^T D = 0); violated at {at}"
                )));
            }
            Ok(())
        };
        match &self.chain {
            ChainModel::Finite(fc) => {
                for i in 0..fc.mode_count() {
                    check(&self.c.eval_mode(i)?, &self.d.eval_mode(i)?, &format!("mode {i}"))?;
                }
            }
            ChainModel::Kernel(kc) => {
                let (a, b) = kc.interval();
                for k in 0..256 {
                    let ell = a + (b - a) * (k as f64 + 0.5) / 256.0;
                    check(
                        &self.c.eval_point(ell)?,
                        &self.d.eval_point(ell)?,
                        &format!("state {ell}"),
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn chain(&self) -> &ChainModel {
        &self.chain
    }

    pub fn a(&self) -> &MatrixField {
        &self.a
    }

    pub fn b(&self) -> &MatrixField {
        &self.b
    }

    pub fn c(&self) -> &MatrixField {
        &self.c
    }

    pub fn d(&self) -> &MatrixField {
        &self.d
    }

    /// State dimension.
    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Disturbance-input dimension.
    pub fn input_dim(&self) -> usize {
        self.r_in
    }

    /// Performance-output dimension.
    pub fn output_dim(&self) -> usize {
        self.r_out
    }

    /// All four coefficient matrices at a chain state.
    pub fn matrices_at(
        &self,
        s: ChainState,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), Error> {
        Ok((
            self.a.eval_state(s)?,
            self.b.eval_state(s)?,
            self.c.eval_state(s)?,
            self.d.eval_state(s)?,
        ))
    }
}

fn validate_family(p: &[DMatrix<f64>], count: usize, dim: usize) -> Result<(), Error> {
    if p.len() != count {
        return Err(Error::invalid(format!(
            "{} matrices supplied, {count} expected",
            p.len()
        )));
    }
    for (k, m) in p.iter().enumerate() {
        if m.shape() != (dim, dim) {
            return Err(Error::invalid(format!(
                "matrix {k} is {}x{}, expected {dim}x{dim}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(())
}

/// One-step conditional expectation for a finite chain:
/// `E(P)(i) = sum_j p_ij P_j`.
pub fn apply_e_finite(
    chain: &FiniteChain,
    p_family: &[DMatrix<f64>],
    mode: usize,
) -> Result<DMatrix<f64>, Error> {
    let n_modes = chain.mode_count();
    if mode >= n_modes {
        return Err(Error::invalid(format!("mode {mode} out of range")));
    }
    let dim = p_family
        .first()
        .map(|m| m.nrows())
        .ok_or_else(|| Error::invalid("empty matrix family"))?;
    validate_family(p_family, n_modes, dim)?;
    let mut out = DMatrix::zeros(dim, dim);
    for (j, pj) in p_family.iter().enumerate() {
        let w = chain.transition()[(mode, j)];
        if w != 0.0 {
            out += pj * w;
        }
    }
    Ok(out)
}

/// One-step conditional expectation for an interval chain against a per-cell
/// matrix family: `E(P)(ell) = sum_j q_j(ell) P_j`, with the cell masses
/// `q_j(ell)` integrated exactly from the kernel.
pub fn apply_e_cells_at(
    chain: &KernelChain,
    grid: &Grid,
    p_family: &[DMatrix<f64>],
    ell: f64,
) -> Result<DMatrix<f64>, Error> {
    let dim = p_family
        .first()
        .map(|m| m.nrows())
        .ok_or_else(|| Error::invalid("empty matrix family"))?;
    validate_family(p_family, grid.n_cells(), dim)?;
    let q = subinterval_masses(chain, grid, ell)?;
    let mut out = DMatrix::zeros(dim, dim);
    for (j, pj) in p_family.iter().enumerate() {
        if q[j] != 0.0 {
            out += pj * q[j];
        }
    }
    Ok(out)
}

/// The operator suite at one chain state for a candidate matrix family `P`
/// and attenuation level `gamma`.
#[derive(Debug, Clone)]
pub struct OperatorSuite {
    /// `A^T E(P) A`.
    pub t_a: DMatrix<f64>,
    /// `B^T E(P) B`.
    pub t_b: DMatrix<f64>,
    /// `A^T E(P) A + C^T C`.
    pub psi1: DMatrix<f64>,
    /// `A^T E(P) B`.
    pub psi2: DMatrix<f64>,
    /// `gamma I - B^T E(P) B - D^T D`, the pivot block.
    pub psi3: DMatrix<f64>,
    /// Worst-case disturbance gain `-psi3^{-1} psi2^T`.
    pub f_gamma: DMatrix<f64>,
}

/// Evaluates the operator suite at a chain state. `p_family` is indexed by
/// mode (finite chains) or by the cells of `grid` (interval chains; `grid`
/// is required there). Fails with [`Error::GainUndefined`] when the pivot
/// `gamma I - B^T E(P) B - D^T D` is not positive definite.
pub fn operator_suite(
    model: &MjlsModel,
    grid: Option<&Grid>,
    p_family: &[DMatrix<f64>],
    at: ChainState,
    gamma: f64,
) -> Result<OperatorSuite, Error> {
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    let ep = match (&model.chain, at) {
        (ChainModel::Finite(fc), ChainState::Mode(i)) => apply_e_finite(fc, p_family, i)?,
        (ChainModel::Kernel(kc), ChainState::Point(ell)) => {
            let grid = grid.ok_or_else(|| {
                Error::invalid("interval chains need a cell grid for the matrix family")
            })?;
            apply_e_cells_at(kc, grid, p_family, ell)?
        }
        _ => return Err(Error::invalid("state kind does not match chain kind")),
    };
    let (a, b, c, d) = model.matrices_at(at)?;
    let t_a = a.transpose() * &ep * &a;
    let t_b = b.transpose() * &ep * &b;
    let psi1 = &t_a + c.transpose() * &c;
    let psi2 = a.transpose() * &ep * &b;
    let psi3 = DMatrix::identity(model.r_in, model.r_in) * gamma - &t_b - d.transpose() * &d;
    let psi3_sym = SymMatrix::new(psi3.clone())?;
    if min_eig_sym(&psi3_sym) <= 0.0 {
        return Err(Error::GainUndefined(format!(
            "pivot gamma I - B^T E(P) B - D^T D is not positive definite at gamma = {gamma}"
        )));
    }
    let chol = psi3_sym
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::GainUndefined("pivot factorization failed".into()))?;
    let f_gamma = -chol.solve(&psi2.transpose());
    Ok(OperatorSuite {
        t_a,
        t_b,
        psi1,
        psi2,
        psi3,
        f_gamma,
    })
}

/// A simulated sample path.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Chain states `theta(0..=K)`.
    pub states: Vec<ChainState>,
    /// System states `x(0..=K)`.
    pub x: Vec<DVector<f64>>,
    /// Disturbance inputs `w(0..K)`.
    pub w: Vec<DVector<f64>>,
    /// Performance outputs `z(0..K)`.
    pub z: Vec<DVector<f64>>,
    /// True when the state norm crossed [`DIVERGENCE_CAP`] (or became
    /// non-finite) and the run stopped early.
    pub diverged: bool,
}

/// Simulates one sample path over `horizon` steps from `x0`, drawing the
/// chain path from `rng`. `disturbance` supplies `w(k)` (zero when absent).
/// Divergent runs stop early with the `diverged` flag set.
pub fn simulate<R: Rng + ?Sized>(
    model: &MjlsModel,
    x0: &DVector<f64>,
    horizon: usize,
    mut disturbance: Option<&mut dyn FnMut(usize) -> DVector<f64>>,
    rng: &mut R,
) -> Result<Trajectory, Error> {
    if x0.len() != model.n {
        return Err(Error::invalid(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            model.n
        )));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut xs = Vec::with_capacity(horizon + 1);
    let mut ws = Vec::with_capacity(horizon);
    let mut zs = Vec::with_capacity(horizon);
    let mut theta = sample_initial(&model.chain, rng)?;
    let mut x = x0.clone();
    states.push(theta);
    xs.push(x.clone());
    let mut diverged = false;
    for k in 0..horizon {
        let (a, b, c, d) = model.matrices_at(theta)?;
        let w = match disturbance.as_mut() {
            Some(f) => {
                let wk = f(k);
                if wk.len() != model.r_in {
                    return Err(Error::invalid(format!(
                        "disturbance at step {k} has length {}, expected {}",
                        wk.len(),
                        model.r_in
                    )));
                }
                wk
            }
            None => DVector::zeros(model.r_in),
        };
        let z = &c * &x + &d * &w;
        x = &a * &x + &b * &w;
        theta = sample_next(&model.chain, theta, rng)?;
        ws.push(w);
        zs.push(z);
        states.push(theta);
        xs.push(x.clone());
        if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_CAP {
            diverged = true;
            break;
        }
    }
    Ok(Trajectory {
        states,
        x: xs,
        w: ws,
        z: zs,
        diverged,
    })
}

/// Verdict of a Monte Carlo mean-square stability estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmssVerdict {
    /// The 95% bootstrap interval for the decay slope lies below zero.
    Stable,
    /// The interval lies above zero.
    Unstable,
    /// The interval straddles zero.
    Inconclusive,
    /// The sampled second moment reached exactly zero.
    TriviallyStable,
}

/// Monte Carlo estimate of the exponential decay rate of `E ||x(k)||^2`.
#[derive(Debug, Clone)]
pub struct EmssEstimate {
    /// Least-squares slope of `log E ||x(k)||^2` against `k`.
    pub slope: f64,
    /// 95% bootstrap percentile interval for the slope.
    pub ci_low: f64,
    pub ci_high: f64,
    pub verdict: EmssVerdict,
    pub trials: usize,
    pub horizon: usize,
}

fn fit_slope(mean_sq: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = mean_sq
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(k, &m)| (k as f64, m.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NEG_INFINITY;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Estimates mean-square stability by simulating `trials` autonomous runs of
/// `horizon` steps from `x0` (all-ones by default), fitting the slope of
/// `log E ||x(k)||^2`, and bootstrapping a 95% percentile interval over
/// trial resamples (200 resamples). Deterministic in `seed`.
pub fn estimate_emss(
    model: &MjlsModel,
    x0: Option<&DVector<f64>>,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<EmssEstimate, Error> {
    if trials < 2 || horizon < 2 {
        return Err(Error::invalid("need at least 2 trials and 2 steps"));
    }
    let default_x0 = DVector::from_element(model.n, 1.0);
    let x0 = x0.unwrap_or(&default_x0);
    // Per-trial squared-norm curves; divergent runs are padded at the cap.
    let mut curves: Vec<Vec<f64>> = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = crate::markov::rng::stream(seed, crate::markov::rng::StreamId::Custom(t as u64));
        let traj = simulate(model, x0, horizon, None, &mut rng)?;
        let mut curve: Vec<f64> = traj
            .x
            .iter()
            .map(|x| x.norm_squared().min(1e300))
            .collect();
        curve.resize(horizon + 1, 1e300);
        curves.push(curve);
    }
    let mean_curve: Vec<f64> = (0..=horizon)
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / trials as f64)
        .collect();
    // All mass gone over the last half of the horizon: the system died out.
    if mean_curve[horizon / 2..].iter().all(|&m| m == 0.0) {
        return Ok(EmssEstimate {
            slope: f64::NEG_INFINITY,
            ci_low: f64::NEG_INFINITY,
            ci_high: f64::NEG_INFINITY,
            verdict: EmssVerdict::TriviallyStable,
            trials,
            horizon,
        });
    }
    let slope = fit_slope(&mean_curve);
    const B: usize = 200;
    let mut boot = crate::markov::rng::stream(seed, crate::markov::rng::StreamId::Bootstrap);
    let mut slopes = Vec::with_capacity(B);
    for _ in 0..B {
        let idx: Vec<usize> = (0..trials).map(|_| boot.gen_range(0..trials)).collect();
        let mc: Vec<f64> = (0..=horizon)
            .map(|k| idx.iter().map(|&i| curves[i][k]).sum::<f64>() / trials as f64)
            .collect();
        slopes.push(fit_slope(&mc));
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = slopes[((B as f64 - 1.0) * 0.025).round() as usize];
    let hi = slopes[((B as f64 - 1.0) * 0.975).round() as usize];
    let verdict = if hi < 0.0 {
        EmssVerdict::Stable
    } else if lo > 0.0 {
        EmssVerdict::Unstable
    } else {
        EmssVerdict::Inconclusive
    };
    Ok(EmssEstimate {
        slope,
        ci_low: lo,
        ci_high: hi,
        verdict,
        trials,
        horizon,
    })
}

/// The matrix of the second-moment evolution operator of an autonomous
/// finite-chain model, acting on stacked vectorized per-mode second moments:
/// block `(j, i)` is `p_ij * kron(A_i, A_i)`. Its spectral radius decides
/// mean-square stability (strictly less than one iff stable).
pub fn second_moment_lift(model: &MjlsModel) -> Result<DMatrix<f64>, Error> {
    let ChainModel::Finite(chain) = &model.chain else {
        return Err(Error::invalid(
            "the exact second-moment lift applies to finite-mode chains",
        ));
    };
    let n = model.n;
    let nn = n * n;
    let modes = chain.mode_count();
    let mut m = DMatrix::zeros(modes * nn, modes * nn);
    for i in 0..modes {
        let ai = model.a.eval_mode(i)?;
        let kron = ai.kronecker(&ai);
        for j in 0..modes {
            let pij = chain.transition()[(i, j)];
            if pij != 0.0 {
                m.view_mut((j * nn, i * nn), (nn, nn)).copy_from(&(&kron * pij));
            }
        }
    }
    Ok(m)
}

/// Result of a spectral-radius computation.
#[derive(Debug, Clone)]
pub struct SpectralRadius {
    pub rho: f64,
    pub iterations: usize,
    /// `"power"` when power iteration converged, `"dense"` when a dense
    /// eigenvalue fallback decided it.
    pub method: &'static str,
}

/// Spectral radius of the second-moment evolution operator (finite chains).
///
/// Power iteration from the all-ones vector (at most 10^4 iterations,
/// residual tolerance 1e-10); if it stalls — e.g. a complex dominant pair —
/// falls back to dense eigenvalues for operators of dimension at most 400.
pub fn spectral_radius_second_moment(model: &MjlsModel) -> Result<SpectralRadius, Error> {
    let m = second_moment_lift(model)?;
    let dim = m.nrows();
    let mut v = DVector::from_element(dim, 1.0).normalize();
    let mut lambda = 0.0f64;
    for it in 0..10_000 {
        let w = &m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(SpectralRadius {
                rho: 0.0,
                iterations: it + 1,
                method: "power",
            });
        }
        lambda = norm;
        let v_next = w / norm;
        let residual = (&m * &v_next - &v_next * lambda).norm();
        v = v_next;
        if residual <= 1e-10 * lambda.max(1e-300) {
            return Ok(SpectralRadius {
                rho: lambda,
                iterations: it + 1,
                method: "power",
            });
        }
    }
    if dim <= 400 {
        let eig = m.complex_eigenvalues();
        let rho = eig.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        return Ok(SpectralRadius {
            rho,
            iterations: 10_000,
            method: "dense",
        });
    }
    Err(Error::SolverFailure(format!(
        "power iteration stalled at estimate {lambda} and the operator dimension {dim} exceeds the dense fallback limit"
    )))
}

/// Feedback interconnection of two jump systems driven by the *same* chain:
/// `u1 = y2`, `u2 = y1`. The first system must have zero feedthrough, which
/// makes the loop well posed. Returns the autonomous closed-loop system with
/// the first system's output retained:
///
/// ```text
/// A_cl = [ A1 + B1 D2 C1   B1 C2 ]      C_cl = [ C1  0 ]
///        [ B2 C1           A2    ]
/// ```
pub fn build_interconnection(sys1: &MjlsModel, sys2: &MjlsModel) -> Result<MjlsModel, Error> {
    if sys1.chain != sys2.chain {
        return Err(Error::invalid(
            "interconnected systems must share one chain",
        ));
    }
    if !sys1.d.is_zero_variant() {
        let zero = match &sys1.chain {
            ChainModel::Finite(fc) => (0..fc.mode_count())
                .map(|i| sys1.d.eval_mode(i).map(|m| m.amax() == 0.0))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .all(|z| z),
            ChainModel::Kernel(_) => false,
        };
        if !zero {
            return Err(Error::invalid(
                "the first system must have zero feedthrough for a well-posed loop",
            ));
        }
    }
    if sys1.r_in != sys2.r_out || sys2.r_in != sys1.r_out {
        return Err(Error::invalid(format!(
            "loop dimensions disagree: u1 is {}, y2 is {}; u2 is {}, y1 is {}",
            sys1.r_in, sys2.r_out, sys2.r_in, sys1.r_out
        )));
    }
    let (n1, n2) = (sys1.n, sys2.n);
    let n_cl = n1 + n2;
    let assemble = |a1: &DMatrix<f64>,
                    b1: &DMatrix<f64>,
                    c1: &DMatrix<f64>,
                    a2: &DMatrix<f64>,
                    b2: &DMatrix<f64>,
                    c2: &DMatrix<f64>,
                    d2: &DMatrix<f64>|
     -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a_cl = DMatrix::zeros(n_cl, n_cl);
        a_cl.view_mut((0, 0), (n1, n1))
            .copy_from(&(a1 + b1 * d2 * c1));
        a_cl.view_mut((0, n1), (n1, n2)).copy_from(&(b1 * c2));
        a_cl.view_mut((n1, 0), (n2, n1)).copy_from(&(b2 * c1));
        a_cl.view_mut((n1, n1), (n2, n2)).copy_from(a2);
        let mut c_cl = DMatrix::zeros(c1.nrows(), n_cl);
        c_cl.view_mut((0, 0), (c1.nrows(), n1)).copy_from(c1);
        (a_cl, c_cl)
    };
    let (a_field, c_field) = match &sys1.chain {
        ChainModel::Finite(fc) => {
            let mut a_pieces = Vec::with_capacity(fc.mode_count());
            let mut c_pieces = Vec::with_capacity(fc.mode_count());
            for i in 0..fc.mode_count() {
                let (a_cl, c_cl) = assemble(
                    &sys1.a.eval_mode(i)?,
                    &sys1.b.eval_mode(i)?,
                    &sys1.c.eval_mode(i)?,
                    &sys2.a.eval_mode(i)?,
                    &sys2.b.eval_mode(i)?,
                    &sys2.c.eval_mode(i)?,
                    &sys2.d.eval_mode(i)?,
                );
                a_pieces.push(a_cl);
                c_pieces.push(c_cl);
            }
            (MatrixField::PerMode(a_pieces), MatrixField::PerMode(c_pieces))
        }
        ChainModel::Kernel(_) => {
            let s1 = sys1.clone();
            let s2 = sys2.clone();
            let r_out = sys1.r_out;
            let a_closure = move |ell: f64| -> DMatrix<f64> {
                let a1 = s1.a.eval_point(ell).expect("field evaluation");
                let b1 = s1.b.eval_point(ell).expect("field evaluation");
                let c1 = s1.c.eval_point(ell).expect("field evaluation");
                let a2 = s2.a.eval_point(ell).expect("field evaluation");
                let b2 = s2.b.eval_point(ell).expect("field evaluation");
                let c2 = s2.c.eval_point(ell).expect("field evaluation");
                let d2 = s2.d.eval_point(ell).expect("field evaluation");
                let mut a_cl = DMatrix::zeros(n_cl, n_cl);
                a_cl.view_mut((0, 0), (n1, n1))
                    .copy_from(&(&a1 + &b1 * &d2 * &c1));
                a_cl.view_mut((0, n1), (n1, n2)).copy_from(&(&b1 * &c2));
                a_cl.view_mut((n1, 0), (n2, n1)).copy_from(&(&b2 * &c1));
                a_cl.view_mut((n1, n1), (n2, n2)).copy_from(&a2);
                a_cl
            };
            let s1c = sys1.clone();
            let c_closure = move |ell: f64| -> DMatrix<f64> {
                let c1 = s1c.c.eval_point(ell).expect("field evaluation");
                let mut c_cl = DMatrix::zeros(c1.nrows(), n_cl);
                c_cl.view_mut((0, 0), (c1.nrows(), n1)).copy_from(&c1);
                c_cl
            };
            (
                MatrixField::Smooth(SmoothField::new(n_cl, n_cl, a_closure)),
                MatrixField::Smooth(SmoothField::new(r_out, n_cl, c_closure)),
            )
        }
    };
    MjlsModel::new(
        sys1.chain.clone(),
        a_field,
        MatrixField::Zero {
            rows: n_cl,
            cols: 0,
        },
        c_field,
        MatrixField::Zero {
            rows: sys1.r_out,
            cols: 0,
        },
    )
}

/// Closes the uncertainty loop `w = Delta z` around a model with a constant
/// gain: the closed-loop state matrix is `A + B Delta C` pointwise. The
/// result is autonomous (zero-width input) with the original output kept.
pub fn close_uncertain_loop(model: &MjlsModel, delta: &DMatrix<f64>) -> Result<MjlsModel, Error> {
    if delta.shape() != (model.r_in, model.r_out) {
        return Err(Error::invalid(format!(
            "uncertainty gain must be {}x{}, got {}x{}",
            model.r_in,
            model.r_out,
            delta.nrows(),
            delta.ncols()
        )));
    }
    if !model.d.is_zero_variant() {
        return Err(Error::invalid(
            "closing the uncertainty loop requires zero feedthrough",
        ));
    }
    let a_field = match (&model.chain, &model.a, &model.b, &model.c) {
        (ChainModel::Finite(fc), _, _, _) => {
            let pieces = (0..fc.mode_count())
                .map(|i| {
                    Ok(model.a.eval_mode(i)?
                        + model.b.eval_mode(i)? * delta * model.c.eval_mode(i)?)
                })
                .collect::<Result<Vec<_>, Error>>()?;
            MatrixField::PerMode(pieces)
        }
        (
            ChainModel::Kernel(_),
            MatrixField::PiecewiseCells { breaks, pieces },
            MatrixField::PiecewiseCells {
                breaks: bb,
                pieces: bp,
            },
            MatrixField::PiecewiseCells {
                breaks: cb,
                pieces: cp,
            },
        ) if breaks == bb && breaks == cb => MatrixField::PiecewiseCells {
            breaks: breaks.clone(),
            pieces: pieces
                .iter()
                .zip(bp)
                .zip(cp)
                .map(|((a, b), c)| a + b * delta * c)
                .collect(),
        },
        (ChainModel::Kernel(_), _, _, _) => {
            let m = model.clone();
            let d = delta.clone();
            let n = model.n;
            MatrixField::Smooth(SmoothField::new(n, n, move |ell| {
                let a = m.a.eval_point(ell).expect("field evaluation");
                let b = m.b.eval_point(ell).expect("field evaluation");
                let c = m.c.eval_point(ell).expect("field evaluation");
                a + b * &d * c
            }))
        }
    };
    MjlsModel::new(
        model.chain.clone(),
        a_field,
        MatrixField::Zero {
            rows: model.n,
            cols: 0,
        },
        model.c.clone(),
        MatrixField::Zero {
            rows: model.r_out,
            cols: 0,
        },
    )
}

/// The empirical performance functional `mean over runs of
/// (sum_k ||z(k)||^2 - gamma sum_k ||w(k)||^2)`. Negative values are
/// consistent with a disturbance-attenuation level `gamma`.
pub fn eval_performance(trajectories: &[Trajectory], gamma: f64) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    let total: f64 = trajectories
        .iter()
        .map(|t| {
            let sz: f64 = t.z.iter().map(|z| z.norm_squared()).sum();
            let sw: f64 = t.w.iter().map(|w| w.norm_squared()).sum();
            sz - gamma * sw
        })
        .sum();
    total / trajectories.len() as f64
}
