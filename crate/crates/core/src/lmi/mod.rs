//! Linear-matrix-inequality systems: named decision variables, affine
//! constraint blocks, a semidefinite feasibility backend with margin
//! maximization, attenuation-level bisection, robust-stability
//! certification, and independent certificate verification.
//!
//! Strict inequalities are handled by maximizing the uniform margin `t` with
//! all blocks `⪰ t·I`; a system is accepted as feasible when the attained
//! margin clears `min_margin` (default 1e-6). Certificates carry the solved
//! variables at full precision so that replaying the affine maps reproduces
//! the attained margin.

mod solver;

pub use solver::{solve_feasibility, Feasibility, SolverDiag};

use crate::error::Error;
use crate::gridding::{sqrt_masses, Grid, SigmaBounds};
use crate::markov::{subinterval_masses, ChainModel, InitialDensity, KernelKind};
use crate::matfun::min_eig;
use crate::mjls::{apply_e_cells_at, apply_e_finite, spectral_radius_second_moment, MjlsModel};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Default feasibility-acceptance threshold on the attained margin.
pub const DEFAULT_MIN_MARGIN: f64 = 1e-6;

/// Default width tolerance for attenuation-level bisection.
pub const DEFAULT_BISECT_TOL: f64 = 1e-3;

/// Bisection bracket limits for the attenuation level.
pub const GAMMA_BRACKET: (f64, f64) = (1e-6, 1e6);

/// Kind of a decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Symmetric `n x n`; stored as the packed lower triangle.
    Sym(usize),
    /// General `n x n`; stored row-major.
    Full(usize),
    /// A single scalar.
    Scalar,
}

impl VarKind {
    fn scalar_count(self) -> usize {
        match self {
            VarKind::Sym(n) => n * (n + 1) / 2,
            VarKind::Full(n) => n * n,
            VarKind::Scalar => 1,
        }
    }

    fn dim(self) -> usize {
        match self {
            VarKind::Sym(n) | VarKind::Full(n) => n,
            VarKind::Scalar => 1,
        }
    }
}

/// Handle to a declared variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
struct VarDecl {
    name: String,
    kind: VarKind,
}

/// One affine constraint block: `constant + sum_k x_k C_k`, required
/// positive definite (with margin). Coefficients are stored as sparse
/// triplets per scalar unknown; the assembled coefficient of every scalar
/// must be symmetric.
#[derive(Debug, Clone)]
pub struct AffineBlock {
    dim: usize,
    constant: DMatrix<f64>,
    terms: BTreeMap<usize, Vec<(usize, usize, f64)>>,
}

impl AffineBlock {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub(crate) fn constant(&self) -> &DMatrix<f64> {
        &self.constant
    }

    pub(crate) fn terms(&self) -> &BTreeMap<usize, Vec<(usize, usize, f64)>> {
        &self.terms
    }

    /// The block value at a scalar assignment.
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (&k, trips) in &self.terms {
            let xv = x[k];
            if xv != 0.0 {
                for &(r, c, v) in trips {
                    m[(r, c)] += v * xv;
                }
            }
        }
        m
    }
}

/// A set of affine PSD constraint blocks over named variables.
#[derive(Debug, Clone)]
pub struct LmiSystem {
    vars: Vec<VarDecl>,
    offsets: Vec<usize>,
    total_scalars: usize,
    blocks: Vec<AffineBlock>,
    source: String,
}

impl LmiSystem {
    pub fn new(source: impl Into<String>) -> Self {
        LmiSystem {
            vars: Vec::new(),
            offsets: Vec::new(),
            total_scalars: 0,
            blocks: Vec::new(),
            source: source.into(),
        }
    }

    /// What this system encodes (e.g. `"finite-brl"`, `"gridded"`).
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind) -> Result<VarId, Error> {
        let name = name.into();
        if self.vars.iter().any(|v| v.name == name) {
            return Err(Error::invalid(format!("duplicate variable name {name}")));
        }
        self.vars.push(VarDecl { name, kind });
        self.offsets.push(self.total_scalars);
        self.total_scalars += kind.scalar_count();
        Ok(VarId(self.vars.len() - 1))
    }

    pub fn var_count(&self) -> usize {
        self.vars.len()
    }

    pub fn var_name(&self, id: VarId) -> &str {
        &self.vars[id.0].name
    }

    pub fn var_kind(&self, id: VarId) -> VarKind {
        self.vars[id.0].kind
    }

    pub fn var_by_name(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name).map(VarId)
    }

    pub fn total_scalars(&self) -> usize {
        self.total_scalars
    }

    pub fn blocks(&self) -> &[AffineBlock] {
        &self.blocks
    }

    /// Starts building a constraint block of the given dimension.
    pub fn build_block(&self, dim: usize) -> BlockBuilder<'_> {
        BlockBuilder {
            sys: self,
            dim,
            constant: DMatrix::zeros(dim, dim),
            terms: BTreeMap::new(),
        }
    }

    pub fn push_block(&mut self, block: AffineBlock) {
        self.blocks.push(block);
    }

    /// Global scalar indices of the diagonal entries of all symmetric
    /// variables (the trace-normalization set).
    pub(crate) fn sym_diagonal_scalars(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (v, decl) in self.vars.iter().enumerate() {
            if let VarKind::Sym(n) = decl.kind {
                for a in 0..n {
                    out.push(self.offsets[v] + a * (a + 1) / 2 + a);
                }
            }
        }
        out
    }

    /// Total dimension of symmetric variables (used to scale the trace cap).
    pub(crate) fn sym_total_dim(&self) -> usize {
        self.vars
            .iter()
            .filter_map(|v| match v.kind {
                VarKind::Sym(n) => Some(n),
                _ => None,
            })
            .sum()
    }

    fn scalar_index(&self, id: VarId, p: usize, q: usize, transpose: bool) -> usize {
        let (p, q) = if transpose { (q, p) } else { (p, q) };
        let off = self.offsets[id.0];
        match self.vars[id.0].kind {
            VarKind::Sym(_) => {
                let (hi, lo) = if p >= q { (p, q) } else { (q, p) };
                off + hi * (hi + 1) / 2 + lo
            }
            VarKind::Full(n) => off + p * n + q,
            VarKind::Scalar => off,
        }
    }

    /// The matrix value of a variable under a scalar assignment.
    pub fn unpack(&self, values: &VarValues, id: VarId) -> DMatrix<f64> {
        let off = self.offsets[id.0];
        match self.vars[id.0].kind {
            VarKind::Sym(n) => {
                let mut m = DMatrix::zeros(n, n);
                for a in 0..n {
                    for b in 0..=a {
                        let v = values.x[off + a * (a + 1) / 2 + b];
                        m[(a, b)] = v;
                        m[(b, a)] = v;
                    }
                }
                m
            }
            VarKind::Full(n) => {
                DMatrix::from_row_slice(n, n, &values.x[off..off + n * n])
            }
            VarKind::Scalar => DMatrix::from_element(1, 1, values.x[off]),
        }
    }

    /// Packs one matrix per declared variable (in declaration order) into a
    /// scalar assignment. Symmetric variables read the lower triangle.
    pub fn pack_values(&self, mats: &[DMatrix<f64>]) -> Result<VarValues, Error> {
        if mats.len() != self.vars.len() {
            return Err(Error::invalid(format!(
                "{} matrices for {} variables",
                mats.len(),
                self.vars.len()
            )));
        }
        let mut x = vec![0.0; self.total_scalars];
        for (v, decl) in self.vars.iter().enumerate() {
            let m = &mats[v];
            let n = decl.kind.dim();
            if m.shape() != (n, n) {
                return Err(Error::invalid(format!(
                    "variable {} expects {n}x{n}, got {}x{}",
                    decl.name,
                    m.nrows(),
                    m.ncols()
                )));
            }
            let off = self.offsets[v];
            match decl.kind {
                VarKind::Sym(n) => {
                    for a in 0..n {
                        for b in 0..=a {
                            x[off + a * (a + 1) / 2 + b] = m[(a, b)];
                        }
                    }
                }
                VarKind::Full(n) => {
                    for p in 0..n {
                        for q in 0..n {
                            x[off + p * n + q] = m[(p, q)];
                        }
                    }
                }
                VarKind::Scalar => x[off] = m[(0, 0)],
            }
        }
        Ok(VarValues { x })
    }

    /// The values of all variables as named row-major matrices, in
    /// declaration order.
    pub fn named_values(&self, values: &VarValues) -> Vec<NamedMatrix> {
        self.vars
            .iter()
            .enumerate()
            .map(|(v, decl)| {
                let m = self.unpack(values, VarId(v));
                NamedMatrix {
                    name: decl.name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: m.transpose().as_slice().to_vec(),
                }
            })
            .collect()
    }

    /// Rebuilds a scalar assignment from named matrices (the certificate
    /// form). Every declared variable must be present with its exact shape.
    pub fn values_from_named(&self, named: &[NamedMatrix]) -> Result<VarValues, Error> {
        let mats = self
            .vars
            .iter()
            .map(|decl| {
                let nm = named
                    .iter()
                    .find(|m| m.name == decl.name)
                    .ok_or_else(|| Error::invalid(format!("missing variable {}", decl.name)))?;
                nm.to_matrix()
            })
            .collect::<Result<Vec<_>, Error>>()?;
        self.pack_values(&mats)
    }

    /// Smallest eigenvalue over all blocks at a scalar assignment — the
    /// replayed feasibility margin. Fails only on non-finite values.
    pub fn margin_at(&self, values: &VarValues) -> Result<f64, Error> {
        let mut margin = f64::INFINITY;
        for b in &self.blocks {
            margin = margin.min(min_eig(&b.eval(&values.x))?);
        }
        Ok(margin)
    }
}

/// A flat scalar assignment to all variables of one [`LmiSystem`].
#[derive(Debug, Clone, PartialEq)]
pub struct VarValues {
    pub(crate) x: Vec<f64>,
}

impl VarValues {
    pub fn as_slice(&self) -> &[f64] {
        &self.x
    }
}

/// Incremental builder for one affine block. All placement helpers keep the
/// block symmetric: off-diagonal placements mirror their transpose
/// automatically.
pub struct BlockBuilder<'a> {
    sys: &'a LmiSystem,
    dim: usize,
    constant: DMatrix<f64>,
    terms: BTreeMap<usize, Vec<(usize, usize, f64)>>,
}

impl BlockBuilder<'_> {
    fn bounds(&self, r0: usize, c0: usize, rows: usize, cols: usize) {
        assert!(
            r0 + rows <= self.dim && c0 + cols <= self.dim,
            "placement ({r0}+{rows}, {c0}+{cols}) exceeds block dimension {}",
            self.dim
        );
    }

    /// Adds a constant matrix at `(r0, c0)`; when off-diagonal, also adds
    /// its transpose at `(c0, r0)`. Diagonal placements must be symmetric.
    pub fn constant(&mut self, r0: usize, c0: usize, m: &DMatrix<f64>) {
        self.bounds(r0, c0, m.nrows(), m.ncols());
        if r0 == c0 {
            let asym = (m - m.transpose()).amax();
            assert!(
                asym <= 1e-12 * (1.0 + m.amax()),
                "diagonal constant placement must be symmetric"
            );
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    self.constant[(r0 + r, c0 + c)] += m[(r, c)];
                }
            }
        } else {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    self.constant[(r0 + r, c0 + c)] += m[(r, c)];
                    self.constant[(c0 + c, r0 + r)] += m[(r, c)];
                }
            }
        }
    }

    /// Adds `scale * I_d` at the diagonal position `(r0, r0)`.
    pub fn constant_identity(&mut self, r0: usize, d: usize, scale: f64) {
        self.bounds(r0, r0, d, d);
        for i in 0..d {
            self.constant[(r0 + i, r0 + i)] += scale;
        }
    }

    fn add_term(&mut self, scalar: usize, r: usize, c: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.entry(scalar).or_default().push((r, c, coeff));
        }
    }

    fn place_one(
        &mut self,
        var: VarId,
        transpose: bool,
        left: Option<&DMatrix<f64>>,
        right: Option<&DMatrix<f64>>,
        scale: f64,
        r0: usize,
        c0: usize,
    ) {
        let n = self.sys.var_kind(var).dim();
        let rows = left.map_or(n, |l| l.nrows());
        let cols = right.map_or(n, |r| r.ncols());
        if let Some(l) = left {
            assert_eq!(l.ncols(), n, "left factor width must match the variable");
        }
        if let Some(r) = right {
            assert_eq!(r.nrows(), n, "right factor height must match the variable");
        }
        self.bounds(r0, c0, rows, cols);
        if scale == 0.0 {
            return;
        }
        // Coefficient of op(V)[p, q] in (L op(V) R)[u, v] is L[u,p] R[q,v].
        for p in 0..n {
            for q in 0..n {
                let k = self.sys.scalar_index(var, p, q, transpose);
                match (left, right) {
                    (None, None) => self.add_term(k, r0 + p, c0 + q, scale),
                    (None, Some(r)) => {
                        for v in 0..cols {
                            self.add_term(k, r0 + p, c0 + v, scale * r[(q, v)]);
                        }
                    }
                    (Some(l), None) => {
                        for u in 0..rows {
                            self.add_term(k, r0 + u, c0 + q, scale * l[(u, p)]);
                        }
                    }
                    (Some(l), Some(r)) => {
                        for u in 0..rows {
                            for v in 0..cols {
                                self.add_term(k, r0 + u, c0 + v, scale * l[(u, p)] * r[(q, v)]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds `scale * L op(V) R` at `(r0, c0)`; with `mirror`, also adds the
    /// transposed term at `(c0, r0)` (required for every off-diagonal
    /// placement). `None` factors mean identity.
    pub fn matrix_var(
        &mut self,
        var: VarId,
        transpose: bool,
        left: Option<&DMatrix<f64>>,
        right: Option<&DMatrix<f64>>,
        scale: f64,
        r0: usize,
        c0: usize,
        mirror: bool,
    ) {
        self.place_one(var, transpose, left, right, scale, r0, c0);
        if mirror {
            assert_ne!(r0, c0, "mirrored placement must be off-diagonal");
            let lt = left.map(|m| m.transpose());
            let rt = right.map(|m| m.transpose());
            self.place_one(var, !transpose, rt.as_ref(), lt.as_ref(), scale, c0, r0);
        }
    }

    /// Adds `scale * v * I_d` for a scalar variable at `(r0, c0)`; with
    /// `mirror`, also at `(c0, r0)`.
    pub fn scalar_var_identity(
        &mut self,
        var: VarId,
        r0: usize,
        c0: usize,
        d: usize,
        scale: f64,
        mirror: bool,
    ) {
        assert!(matches!(self.sys.var_kind(var), VarKind::Scalar));
        self.bounds(r0, c0, d, d);
        let k = self.sys.scalar_index(var, 0, 0, false);
        for i in 0..d {
            self.add_term(k, r0 + i, c0 + i, scale);
        }
        if mirror {
            assert_ne!(r0, c0, "mirrored placement must be off-diagonal");
            for i in 0..d {
                self.add_term(k, c0 + i, r0 + i, scale);
            }
        }
    }

    pub fn finish(self) -> AffineBlock {
        let asym = (&self.constant - self.constant.transpose()).amax();
        assert!(
            asym <= 1e-9 * (1.0 + self.constant.amax()),
            "assembled constant part is not symmetric"
        );
        AffineBlock {
            dim: self.dim,
            constant: self.constant,
            terms: self.terms,
        }
    }
}

/// A named matrix in row-major order (certificate serialization form).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedMatrix {
    pub fn from_matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        NamedMatrix {
            name: name.into(),
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>, Error> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::invalid(format!(
                "matrix {} has {} entries for shape {}x{}",
                self.name,
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// A solved, independently re-verifiable witness of LMI feasibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    /// `"finite-brl"` or `"gridded"`.
    pub kind: String,
    /// Attenuation level the system was assembled at.
    pub gamma: f64,
    /// Certified uncertainty bound `1/sqrt(gamma)`.
    pub bound: f64,
    /// Margin reported by the solver (the maximized `t`).
    pub margin: f64,
    /// Margin recomputed from the stored variables (replay invariant:
    /// within 1e-7 of `margin`).
    pub replayed_margin: f64,
    /// Hash of the model the system was assembled from.
    pub model_hash: String,
    /// Cell break points (gridded certificates).
    pub grid_points: Option<Vec<f64>>,
    /// Cell sample points (gridded certificates).
    pub grid_samples: Option<Vec<f64>>,
    /// Deviation bounds used in assembly (gridded certificates).
    pub sigmas: Option<SigmaRecord>,
    /// Solved variables, full precision, row-major.
    pub variables: Vec<NamedMatrix>,
    /// `min_eig(X_i + X_i^T)` per cell — strictly positive values certify
    /// the well-posedness (nonsingularity) of the slack transformations.
    pub x_wellposed_margins: Option<Vec<f64>>,
    pub solver: SolverDiag,
}

/// Serializable copy of the deviation bounds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SigmaRecord {
    pub sig_a: Vec<f64>,
    pub sig_b: Vec<f64>,
    pub sig_c: Vec<f64>,
    pub sig_q: Vec<f64>,
    pub mesh_per_cell: usize,
    pub safety: f64,
}

impl From<&SigmaBounds> for SigmaRecord {
    fn from(s: &SigmaBounds) -> Self {
        SigmaRecord {
            sig_a: s.sig_a.clone(),
            sig_b: s.sig_b.clone(),
            sig_c: s.sig_c.clone(),
            sig_q: s.sig_q.clone(),
            mesh_per_cell: s.mesh_per_cell,
            safety: s.safety,
        }
    }
}

impl Certificate {
    /// The per-cell (or per-mode) symmetric matrices `P_0, P_1, ...` stored
    /// in the certificate.
    pub fn p_matrices(&self) -> Result<Vec<DMatrix<f64>>, Error> {
        let mut out = Vec::new();
        loop {
            let name = format!("P{}", out.len());
            match self.variables.iter().find(|m| m.name == name) {
                Some(nm) => out.push(nm.to_matrix()?),
                None => break,
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("certificate holds no P matrices"));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String, Error> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("certificate serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("certificate parse: {e}")))
    }
}

fn hash_f64s(h: &mut Sha256, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        h.update(x.to_le_bytes());
    }
}

/// A content hash of the model: chain parameters plus the coefficient
/// fields (sampled on a fixed mesh for non-tabulated interval fields).
pub fn model_fingerprint(model: &MjlsModel) -> String {
    let mut h = Sha256::new();
    match model.chain() {
        ChainModel::Finite(c) => {
            h.update(b"finite");
            h.update(c.mode_count().to_le_bytes());
            hash_f64s(&mut h, c.initial().iter().copied());
            hash_f64s(&mut h, c.transition().iter().copied());
            for i in 0..c.mode_count() {
                for f in [model.a(), model.b(), model.c(), model.d()] {
                    if let Ok(m) = f.eval_mode(i) {
                        hash_f64s(&mut h, m.iter().copied());
                    }
                }
            }
        }
        ChainModel::Kernel(k) => {
            h.update(b"kernel");
            let (a, b) = k.interval();
            hash_f64s(&mut h, [a, b]);
            match k.kernel() {
                KernelKind::Uniform => h.update(b"uniform"),
                KernelKind::Tent => h.update(b"tent"),
                KernelKind::LinearRational { below, above } => {
                    h.update(b"linear-rational");
                    hash_f64s(&mut h, below.iter().chain(above).copied());
                }
                KernelKind::Tabulated { mesh, values } => {
                    h.update(b"tabulated");
                    hash_f64s(&mut h, mesh.iter().copied());
                    hash_f64s(&mut h, values.iter().copied());
                }
                KernelKind::CellConstant { breaks, values } => {
                    h.update(b"cell-constant");
                    hash_f64s(&mut h, breaks.iter().copied());
                    hash_f64s(&mut h, values.iter().copied());
                }
            }
            match k.initial_density() {
                InitialDensity::Uniform => h.update(b"nu-uniform"),
                InitialDensity::Tabulated { mesh, values } => {
                    h.update(b"nu-tabulated");
                    hash_f64s(&mut h, mesh.iter().copied());
                    hash_f64s(&mut h, values.iter().copied());
                }
                InitialDensity::PiecewiseConst { breaks, values } => {
                    h.update(b"nu-cells");
                    hash_f64s(&mut h, breaks.iter().copied());
                    hash_f64s(&mut h, values.iter().copied());
                }
            }
            for s in 0..64 {
                let ell = a + (b - a) * (s as f64 + 0.5) / 64.0;
                for f in [model.a(), model.b(), model.c(), model.d()] {
                    if let Ok(m) = f.eval_point(ell) {
                        hash_f64s(&mut h, m.iter().copied());
                    }
                }
            }
        }
    }
    format!("{:x}", h.finalize())
}

/// Assembles the finite-chain disturbance-attenuation blocks at level
/// `gamma`: one block per mode `i`,
///
/// ```text
/// [ S_i       0    S_i A_i   S_i B_i ]
/// [ 0         I    C_i       0       ]        S_i = sum_j p_ij P_j
/// [ A_i^T S_i C_i^T  P_i     0       ]
/// [ B_i^T S_i 0     0        gamma I ]
/// ```
///
/// over symmetric variables `P_0..P_{N-1}`. Any feedthrough is ignored:
/// the program addresses the zero-feedthrough channel.
pub fn assemble_finite_brl(model: &MjlsModel, gamma: f64) -> Result<LmiSystem, Error> {
    let ChainModel::Finite(chain) = model.chain() else {
        return Err(Error::invalid("finite-chain assembly needs a finite chain"));
    };
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma must be positive and finite"));
    }
    let n = model.state_dim();
    let rz = model.output_dim();
    let rw = model.input_dim();
    let n_modes = chain.mode_count();
    let mut sys = LmiSystem::new("finite-brl");
    let p_vars: Vec<VarId> = (0..n_modes)
        .map(|j| sys.add_var(format!("P{j}"), VarKind::Sym(n)))
        .collect::<Result<_, _>>()?;
    let (s0, s1, s2, s3) = (0, n, n + rz, 2 * n + rz);
    let dim = 2 * n + rz + rw;
    for i in 0..n_modes {
        let a_i = model.a().eval_mode(i)?;
        let b_i = model.b().eval_mode(i)?;
        let c_i = model.c().eval_mode(i)?;
        let mut bb = sys.build_block(dim);
        for j in 0..n_modes {
            let pij = chain.transition()[(i, j)];
            if pij == 0.0 {
                continue;
            }
            bb.matrix_var(p_vars[j], false, None, None, pij, s0, s0, false);
            bb.matrix_var(p_vars[j], false, None, Some(&a_i), pij, s0, s2, true);
            bb.matrix_var(p_vars[j], false, None, Some(&b_i), pij, s0, s3, true);
        }
        bb.constant_identity(s1, rz, 1.0);
        bb.constant(s1, s2, &c_i);
        bb.matrix_var(p_vars[i], false, None, None, 1.0, s2, s2, false);
        bb.constant_identity(s3, rw, gamma);
        let block = bb.finish();
        sys.push_block(block);
    }
    Ok(sys)
}

/// Row offsets of the full per-cell block (shared between the assembler and
/// the reduced evaluator). Dims in order:
/// `[n, rz, n, rw, nN, rz, n, n, n, rw, rw, nN, n, rz]`.
fn cell_block_offsets(n: usize, rz: usize, rw: usize, nn_total: usize) -> ([usize; 14], usize) {
    let dims = [n, rz, n, rw, nn_total, rz, n, n, n, rw, rw, nn_total, n, rz];
    let mut off = [0usize; 14];
    let mut acc = 0;
    for (k, d) in dims.iter().enumerate() {
        off[k] = acc;
        acc += d;
    }
    (off, acc)
}

/// Assembles the per-cell feasibility blocks of the gridded reduction at
/// level `gamma`: one block per cell with variables `P_j` (symmetric, shared
/// across cells), `X_i` (general), and positive scalars `alpha_i`, `beta_i`,
/// `rho_i`. The per-cell deviation bounds `sigmas` enter as fixed
/// coefficients; the model data is sampled at the cell sample points.
pub fn assemble_gridding(
    model: &MjlsModel,
    grid: &Grid,
    sigmas: &SigmaBounds,
    gamma: f64,
) -> Result<LmiSystem, Error> {
    let ChainModel::Kernel(chain) = model.chain() else {
        return Err(Error::invalid("gridded assembly needs an interval chain"));
    };
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma must be positive and finite"));
    }
    let n_cells = grid.n_cells();
    for (name, v) in [
        ("sig_a", &sigmas.sig_a),
        ("sig_b", &sigmas.sig_b),
        ("sig_c", &sigmas.sig_c),
        ("sig_q", &sigmas.sig_q),
    ] {
        if v.len() != n_cells {
            return Err(Error::invalid(format!(
                "{name} has {} entries for {n_cells} cells",
                v.len()
            )));
        }
        if v.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid(format!("{name} must be strictly positive")));
        }
    }
    let n = model.state_dim();
    let rz = model.output_dim();
    let rw = model.input_dim();
    let nn_total = n * n_cells;
    let mut sys = LmiSystem::new("gridded");
    let p_vars: Vec<VarId> = (0..n_cells)
        .map(|j| sys.add_var(format!("P{j}"), VarKind::Sym(n)))
        .collect::<Result<_, _>>()?;
    let x_vars: Vec<VarId> = (0..n_cells)
        .map(|i| sys.add_var(format!("X{i}"), VarKind::Full(n)))
        .collect::<Result<_, _>>()?;
    let al_vars: Vec<VarId> = (0..n_cells)
        .map(|i| sys.add_var(format!("alpha{i}"), VarKind::Scalar))
        .collect::<Result<_, _>>()?;
    let be_vars: Vec<VarId> = (0..n_cells)
        .map(|i| sys.add_var(format!("beta{i}"), VarKind::Scalar))
        .collect::<Result<_, _>>()?;
    let rh_vars: Vec<VarId> = (0..n_cells)
        .map(|i| sys.add_var(format!("rho{i}"), VarKind::Scalar))
        .collect::<Result<_, _>>()?;
    let (r, dim) = cell_block_offsets(n, rz, rw, nn_total);
    for i in 0..n_cells {
        let h_bar = grid.samples()[i];
        let a_i = model.a().eval_point(h_bar)?;
        let b_i = model.b().eval_point(h_bar)?;
        let c_i = model.c().eval_point(h_bar)?;
        let sq = sqrt_masses(chain, grid, h_bar)?;
        let (sa, sb, sc, sq_dev) = (
            sigmas.sig_a[i],
            sigmas.sig_b[i],
            sigmas.sig_c[i],
            sigmas.sig_q[i],
        );
        let (x_i, al_i, be_i, rh_i) = (x_vars[i], al_vars[i], be_vars[i], rh_vars[i]);
        let mut bb = sys.build_block(dim);
        // Row 1: state row.
        bb.matrix_var(x_i, false, None, None, 1.0, r[0], r[0], false);
        bb.matrix_var(x_i, true, None, None, 1.0, r[0], r[0], false);
        bb.matrix_var(x_i, false, None, Some(&a_i), 1.0, r[0], r[2], true);
        bb.matrix_var(x_i, false, None, Some(&b_i), 1.0, r[0], r[3], true);
        for j in 0..n_cells {
            bb.matrix_var(p_vars[j], false, None, None, sq[j], r[0], r[4] + j * n, true);
        }
        bb.matrix_var(x_i, false, None, None, 2.0 * sa, r[0], r[6], true);
        bb.matrix_var(x_i, false, None, None, sb, r[0], r[8], true);
        bb.scalar_var_identity(rh_i, r[0], r[12], n, 1.0, true);
        // Row 2: output row.
        bb.constant_identity(r[1], rz, 1.0);
        bb.constant(r[1], r[2], &c_i);
        bb.constant(r[1], r[5], &(DMatrix::identity(rz, rz) * (2.0 * sc)));
        bb.scalar_var_identity(rh_i, r[1], r[13], rz, 1.0, true);
        // Row 3: cost-to-go row.
        bb.matrix_var(p_vars[i], false, None, None, 1.0, r[2], r[2], false);
        bb.scalar_var_identity(al_i, r[2], r[7], n, 1.0, true);
        // Row 4: disturbance row.
        bb.constant_identity(r[3], rw, gamma);
        bb.scalar_var_identity(be_i, r[3], r[10], rw, 1.0, true);
        // Row 5: expectation row (block diagonal of all P_j).
        for j in 0..n_cells {
            bb.matrix_var(p_vars[j], false, None, None, 1.0, r[4] + j * n, r[4] + j * n, false);
            bb.matrix_var(p_vars[j], false, None, None, sq_dev, r[4] + j * n, r[11] + j * n, true);
        }
        // Rows 6-14: slack diagonals.
        bb.scalar_var_identity(al_i, r[5], r[5], rz, 2.0, false);
        bb.scalar_var_identity(al_i, r[6], r[6], n, 2.0, false);
        bb.scalar_var_identity(al_i, r[7], r[7], n, 1.0, false);
        bb.scalar_var_identity(be_i, r[8], r[8], n, 1.0, false);
        bb.scalar_var_identity(be_i, r[9], r[9], rw, 1.0, false);
        bb.scalar_var_identity(be_i, r[10], r[10], rw, 1.0, false);
        bb.scalar_var_identity(rh_i, r[11], r[11], nn_total, 1.0, false);
        bb.scalar_var_identity(rh_i, r[12], r[12], n, 1.0, false);
        bb.scalar_var_identity(rh_i, r[13], r[13], rz, 1.0, false);
        let block = bb.finish();
        sys.push_block(block);
    }
    Ok(sys)
}

/// Evaluator for the Schur-reduced per-cell condition. The reduced form is
/// nonlinear in the scalars and `X_i`, so it cannot be solved as an LMI; it
/// serves as an independent cross-check of solved certificates.
pub struct ReducedEvaluator<'a> {
    model: &'a MjlsModel,
    grid: &'a Grid,
    sigmas: &'a SigmaBounds,
    gamma: f64,
}

/// Builds the reduced-form evaluator (see [`ReducedEvaluator::eval`]).
pub fn assemble_gridding_reduced<'a>(
    model: &'a MjlsModel,
    grid: &'a Grid,
    sigmas: &'a SigmaBounds,
    gamma: f64,
) -> ReducedEvaluator<'a> {
    ReducedEvaluator {
        model,
        grid,
        sigmas,
        gamma,
    }
}

impl ReducedEvaluator<'_> {
    /// Evaluates the reduced per-cell matrices at a certificate's variable
    /// values and returns them (one per cell); each must be positive
    /// definite exactly when the full per-cell block is. Fails when any
    /// stored `alpha_i`, `beta_i`, `rho_i` is not strictly positive.
    pub fn eval(&self, cert: &Certificate) -> Result<Vec<DMatrix<f64>>, Error> {
        let ChainModel::Kernel(chain) = self.model.chain() else {
            return Err(Error::invalid("reduced evaluator needs an interval chain"));
        };
        let n = self.model.state_dim();
        let rz = self.model.output_dim();
        let rw = self.model.input_dim();
        let n_cells = self.grid.n_cells();
        let p = cert.p_matrices()?;
        if p.len() != n_cells {
            return Err(Error::invalid(format!(
                "certificate has {} P matrices for {n_cells} cells",
                p.len()
            )));
        }
        let get = |name: String| -> Result<DMatrix<f64>, Error> {
            cert.variables
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| Error::invalid(format!("certificate missing {name}")))?
                .to_matrix()
        };
        let scalar = |name: String| -> Result<f64, Error> {
            let m = get(name.clone())?;
            let v = m[(0, 0)];
            if !(v > 0.0) {
                return Err(Error::invalid(format!(
                    "{name} = {v} must be strictly positive for the reduction"
                )));
            }
            Ok(v)
        };
        let nn_total = n * n_cells;
        let dim = 2 * n + rz + rw + nn_total;
        let (o0, o1, o2, o3, o4) = (0, n, n + rz, 2 * n + rz, 2 * n + rz + rw);
        let mut out = Vec::with_capacity(n_cells);
        for i in 0..n_cells {
            let h_bar = self.grid.samples()[i];
            let a_i = self.model.a().eval_point(h_bar)?;
            let b_i = self.model.b().eval_point(h_bar)?;
            let c_i = self.model.c().eval_point(h_bar)?;
            let sq = sqrt_masses(chain, self.grid, h_bar)?;
            let x = get(format!("X{i}"))?;
            let alpha = scalar(format!("alpha{i}"))?;
            let beta = scalar(format!("beta{i}"))?;
            let rho = scalar(format!("rho{i}"))?;
            let (sa, sb, sc, sq_dev) = (
                self.sigmas.sig_a[i],
                self.sigmas.sig_b[i],
                self.sigmas.sig_c[i],
                self.sigmas.sig_q[i],
            );
            let mut m = DMatrix::zeros(dim, dim);
            // Leading structure.
            let xxt = &x + x.transpose();
            m.view_mut((o0, o0), (n, n)).copy_from(&xxt);
            let xa = &x * &a_i;
            m.view_mut((o0, o2), (n, n)).copy_from(&xa);
            m.view_mut((o2, o0), (n, n)).copy_from(&xa.transpose());
            let xb = &x * &b_i;
            m.view_mut((o0, o3), (n, rw)).copy_from(&xb);
            m.view_mut((o3, o0), (rw, n)).copy_from(&xb.transpose());
            for j in 0..n_cells {
                let qp = &p[j] * sq[j];
                m.view_mut((o0, o4 + j * n), (n, n)).copy_from(&qp);
                m.view_mut((o4 + j * n, o0), (n, n))
                    .copy_from(&qp.transpose());
                m.view_mut((o4 + j * n, o4 + j * n), (n, n)).copy_from(&p[j]);
            }
            m.view_mut((o1, o1), (rz, rz))
                .copy_from(&DMatrix::identity(rz, rz));
            m.view_mut((o1, o2), (rz, n)).copy_from(&c_i);
            m.view_mut((o2, o1), (n, rz)).copy_from(&c_i.transpose());
            m.view_mut((o2, o2), (n, n)).copy_from(&p[i]);
            m.view_mut((o3, o3), (rw, rw))
                .copy_from(&(DMatrix::identity(rw, rw) * self.gamma));
            // Subtract the slack aggregate.
            let coef = 2.0 * sa * sa / alpha + sb * sb / beta;
            let xxt_outer = &x * x.transpose();
            for a in 0..n {
                for b in 0..n {
                    m[(o0 + a, o0 + b)] -= coef * xxt_outer[(a, b)];
                }
                m[(o0 + a, o0 + a)] -= rho;
            }
            for a in 0..rz {
                m[(o1 + a, o1 + a)] -= 2.0 * sc * sc / alpha + rho;
            }
            for a in 0..n {
                m[(o2 + a, o2 + a)] -= alpha;
            }
            for a in 0..rw {
                m[(o3 + a, o3 + a)] -= beta;
            }
            let qcoef = sq_dev * sq_dev / rho;
            for j in 0..n_cells {
                let p2 = &p[j] * &p[j];
                for a in 0..n {
                    for b in 0..n {
                        m[(o4 + j * n + a, o4 + j * n + b)] -= qcoef * p2[(a, b)];
                    }
                }
            }
            out.push(m);
        }
        Ok(out)
    }
}

/// Outcome of a certification attempt.
#[derive(Debug, Clone)]
pub enum CertifyOutcome {
    Certified(Box<Certificate>),
    /// Feasibility was not established at this level. Explicitly *not* a
    /// disproof: the conditions are sufficient only.
    NoCertificate {
        best_margin: f64,
        diagnostics: String,
    },
}

/// Certification method.
#[derive(Debug, Clone, Copy)]
pub enum CertifyMethod<'a> {
    /// Exact finite-chain blocks.
    Finite,
    /// Gridded reduction of an interval chain.
    Gridded {
        grid: &'a Grid,
        sigmas: &'a SigmaBounds,
    },
}

/// Attempts to certify robust stability against all uncertainty gains with
/// piecewise spectral norm at most `1/sqrt(gamma)` by solving the level-
/// `gamma` feasibility system.
pub fn certify_robust_stability(
    model: &MjlsModel,
    gamma: f64,
    method: CertifyMethod<'_>,
    min_margin: f64,
) -> Result<CertifyOutcome, Error> {
    let sys = match method {
        CertifyMethod::Finite => assemble_finite_brl(model, gamma)?,
        CertifyMethod::Gridded { grid, sigmas } => {
            assemble_gridding(model, grid, sigmas, gamma)?
        }
    };
    match solve_feasibility(&sys, min_margin)? {
        Feasibility::Feasible {
            values,
            margin,
            replayed_margin,
            diag,
        } => {
            let (grid_points, grid_samples, sigmas, x_margins) = match method {
                CertifyMethod::Finite => (None, None, None, None),
                CertifyMethod::Gridded { grid, sigmas } => {
                    let xm = (0..grid.n_cells())
                        .map(|i| {
                            let id = sys.var_by_name(&format!("X{i}")).expect("declared");
                            let x = sys.unpack(&values, id);
                            min_eig(&(&x + x.transpose()))
                        })
                        .collect::<Result<Vec<_>, Error>>()?;
                    (
                        Some(grid.points().to_vec()),
                        Some(grid.samples().to_vec()),
                        Some(SigmaRecord::from(sigmas)),
                        Some(xm),
                    )
                }
            };
            Ok(CertifyOutcome::Certified(Box::new(Certificate {
                kind: sys.source().to_string(),
                gamma,
                bound: 1.0 / gamma.sqrt(),
                margin,
                replayed_margin,
                model_hash: model_fingerprint(model),
                grid_points,
                grid_samples,
                sigmas,
                variables: sys.named_values(&values),
                x_wellposed_margins: x_margins,
                solver: diag,
            })))
        }
        Feasibility::Infeasible { best_margin, diag } => Ok(CertifyOutcome::NoCertificate {
            best_margin,
            diagnostics: format!(
                "margin maximization reached {best_margin:.3e} (status {}, {} iterations)",
                diag.status, diag.iterations
            ),
        }),
    }
}

/// Result of attenuation-level bisection.
#[derive(Debug, Clone)]
pub struct HinfResult {
    /// Smallest feasible level found (the feasible bracket endpoint).
    pub gamma_star: f64,
    /// `sqrt(gamma_star)` — the induced-norm estimate.
    pub norm: f64,
    /// `1/sqrt(gamma_star)` — the certified uncertainty bound.
    pub bound: f64,
    /// Final bracket `(infeasible, feasible)`.
    pub bracket: (f64, f64),
    /// Number of feasibility solves spent.
    pub solves: usize,
    /// Certificate at the feasible endpoint.
    pub certificate: Option<Box<Certificate>>,
}

/// Computes the zero-feedthrough disturbance-attenuation norm of a finite
/// model by bisecting the level `gamma` over feasibility of the finite
/// blocks, to absolute bracket width `tol`. Requires mean-square stability
/// (second-moment spectral radius strictly below one).
pub fn hinf_norm_finite(model: &MjlsModel, tol: f64) -> Result<HinfResult, Error> {
    if !matches!(model.chain(), ChainModel::Finite(_)) {
        return Err(Error::invalid("attenuation bisection needs a finite chain"));
    }
    let sr = spectral_radius_second_moment(model)?;
    if !(sr.rho < 1.0) {
        return Err(Error::invalid(format!(
            "model is not mean-square stable (second-moment spectral radius {:.6})",
            sr.rho
        )));
    }
    let tol = if tol > 0.0 { tol } else { DEFAULT_BISECT_TOL };
    let mut solves = 0usize;
    let mut last_cert: Option<Box<Certificate>> = None;
    let mut feasible = |g: f64, keep: &mut Option<Box<Certificate>>| -> Result<bool, Error> {
        solves += 1;
        match certify_robust_stability(model, g, CertifyMethod::Finite, DEFAULT_MIN_MARGIN)? {
            CertifyOutcome::Certified(c) => {
                *keep = Some(c);
                Ok(true)
            }
            CertifyOutcome::NoCertificate { .. } => Ok(false),
        }
    };
    let (floor, ceil) = GAMMA_BRACKET;
    let (mut lo, mut hi);
    if feasible(1.0, &mut last_cert)? {
        hi = 1.0;
        lo = 0.1;
        loop {
            if lo < floor {
                lo = floor;
            }
            if !feasible(lo, &mut last_cert)? {
                break;
            }
            hi = lo;
            if lo <= floor {
                // Feasible all the way to the bracket floor: the norm is
                // numerically indistinguishable from zero at this scale.
                return Ok(HinfResult {
                    gamma_star: floor,
                    norm: floor.sqrt(),
                    bound: 1.0 / floor.sqrt(),
                    bracket: (0.0, floor),
                    solves,
                    certificate: last_cert,
                });
            }
            lo /= 10.0;
        }
    } else {
        lo = 1.0;
        hi = 10.0;
        while !feasible(hi, &mut last_cert)? {
            lo = hi;
            hi *= 10.0;
            if hi > ceil {
                return Err(Error::SolverFailure(format!(
                    "no feasible attenuation level up to {ceil:.0e}"
                )));
            }
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid, &mut last_cert)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(HinfResult {
        gamma_star: hi,
        norm: hi.sqrt(),
        bound: 1.0 / hi.sqrt(),
        bracket: (lo, hi),
        solves,
        certificate: last_cert,
    })
}

/// Report of an independent certificate verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    /// All sampled matrices positive definite.
    pub ok: bool,
    /// Number of sampled states.
    pub checked_points: usize,
    /// Smallest eigenvalue seen over all sampled matrices.
    pub min_margin: f64,
    /// Margin recomputed by replaying the certificate variables through the
    /// assembled system (`None` when replay is not applicable).
    pub replayed_margin: Option<f64>,
    pub failure: Option<String>,
}

fn xi_block(
    ep: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p_here: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>, Error> {
    let n = a.nrows();
    let rz = c.nrows();
    let rw = b.ncols();
    let chol = ep.clone().cholesky().ok_or_else(|| {
        Error::VerificationFailure(
            "conditional expectation of the certificate family is not positive definite".into(),
        )
    })?;
    let ep_inv = chol.inverse();
    let dim = 2 * n + rz + rw;
    let (o0, o1, o2, o3) = (0, n, n + rz, 2 * n + rz);
    let mut m = DMatrix::zeros(dim, dim);
    m.view_mut((o0, o0), (n, n)).copy_from(&ep_inv);
    m.view_mut((o0, o2), (n, n)).copy_from(a);
    m.view_mut((o2, o0), (n, n)).copy_from(&a.transpose());
    m.view_mut((o0, o3), (n, rw)).copy_from(b);
    m.view_mut((o3, o0), (rw, n)).copy_from(&b.transpose());
    m.view_mut((o1, o1), (rz, rz))
        .copy_from(&DMatrix::identity(rz, rz));
    m.view_mut((o1, o2), (rz, n)).copy_from(c);
    m.view_mut((o2, o1), (n, rz)).copy_from(&c.transpose());
    m.view_mut((o2, o2), (n, n)).copy_from(p_here);
    m.view_mut((o3, o3), (rw, rw))
        .copy_from(&(DMatrix::identity(rw, rw) * gamma));
    Ok(m)
}

/// Independently verifies a certificate against the model by sampling the
/// inverse-expectation block form (which is *not* how the solver saw the
/// problem): at each sampled state, builds
///
/// ```text
/// [ E(P)^{-1}  0     A   B       ]
/// [ 0          I     C   0       ]
/// [ A^T        C^T   P   0       ]
/// [ B^T        0     0   gamma I ]
/// ```
///
/// and requires positive definiteness. Interval chains are sampled at
/// `samples_per_cell` interior points per certificate cell with the
/// conditional expectation integrated exactly; finite chains check every
/// mode. Also replays the assembled system at the stored variables when the
/// certificate kind matches the model.
pub fn verify_certificate(
    model: &MjlsModel,
    cert: &Certificate,
    samples_per_cell: usize,
) -> Result<VerifyReport, Error> {
    let p = cert.p_matrices()?;
    let gamma = cert.gamma;
    let mut min_margin = f64::INFINITY;
    let mut checked = 0usize;
    let mut failure = None;
    match model.chain() {
        ChainModel::Finite(chain) => {
            if p.len() != chain.mode_count() {
                return Err(Error::invalid(format!(
                    "certificate has {} P matrices for {} modes",
                    p.len(),
                    chain.mode_count()
                )));
            }
            for i in 0..chain.mode_count() {
                let ep = apply_e_finite(chain, &p, i)?;
                let xi = xi_block(
                    &ep,
                    &model.a().eval_mode(i)?,
                    &model.b().eval_mode(i)?,
                    &model.c().eval_mode(i)?,
                    &p[i],
                    gamma,
                )?;
                let me = min_eig(&xi)?;
                checked += 1;
                if me < min_margin {
                    min_margin = me;
                }
                if me <= 0.0 && failure.is_none() {
                    failure = Some(format!("mode {i}: min_eig = {me:.3e}"));
                }
            }
        }
        ChainModel::Kernel(chain) => {
            let points = cert
                .grid_points
                .clone()
                .ok_or_else(|| Error::invalid("gridded certificate lacks its cell grid"))?;
            let grid = Grid::from_points(points, crate::gridding::SampleRule::Midpoint)?;
            if p.len() != grid.n_cells() {
                return Err(Error::invalid(format!(
                    "certificate has {} P matrices for {} cells",
                    p.len(),
                    grid.n_cells()
                )));
            }
            let samples = samples_per_cell.max(1);
            for i in 0..grid.n_cells() {
                let (lo, hi) = (grid.points()[i], grid.points()[i + 1]);
                for s in 0..samples {
                    let ell = lo + (hi - lo) * (s as f64 + 1.0) / (samples as f64 + 1.0);
                    let ep = apply_e_cells_at(chain, &grid, &p, ell)?;
                    let xi = xi_block(
                        &ep,
                        &model.a().eval_point(ell)?,
                        &model.b().eval_point(ell)?,
                        &model.c().eval_point(ell)?,
                        &p[i],
                        gamma,
                    )?;
                    let me = min_eig(&xi)?;
                    checked += 1;
                    if me < min_margin {
                        min_margin = me;
                    }
                    if me <= 0.0 && failure.is_none() {
                        failure = Some(format!("cell {i}, state {ell}: min_eig = {me:.3e}"));
                    }
                }
            }
        }
    }
    // Replay the solver-side system when reconstructible.
    let replayed = match (cert.kind.as_str(), model.chain()) {
        ("finite-brl", ChainModel::Finite(_)) => {
            let sys = assemble_finite_brl(model, gamma)?;
            let values = sys.values_from_named(&cert.variables)?;
            Some(sys.margin_at(&values)?)
        }
        ("gridded", ChainModel::Kernel(_)) => {
            match (&cert.grid_points, &cert.grid_samples, &cert.sigmas) {
                (Some(pts), Some(smp), Some(sg)) => {
                    let grid = Grid::from_points(
                        pts.clone(),
                        crate::gridding::SampleRule::Custom(smp.clone()),
                    )?;
                    let sigmas = SigmaBounds {
                        sig_a: sg.sig_a.clone(),
                        sig_b: sg.sig_b.clone(),
                        sig_c: sg.sig_c.clone(),
                        sig_q: sg.sig_q.clone(),
                        mesh_per_cell: sg.mesh_per_cell,
                        safety: sg.safety,
                    };
                    let sys = assemble_gridding(model, &grid, &sigmas, gamma)?;
                    let values = sys.values_from_named(&cert.variables)?;
                    Some(sys.margin_at(&values)?)
                }
                _ => None,
            }
        }
        _ => None,
    };
    Ok(VerifyReport {
        ok: failure.is_none(),
        checked_points: checked,
        min_margin,
        replayed_margin: replayed,
        failure,
    })
}

/// Result of substituting a lifted-model certificate back into the original
/// finite-chain blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossCheckReport {
    pub ok: bool,
    /// Smallest eigenvalue over all finite blocks at the certificate's `P`s.
    pub min_margin: f64,
}

/// Cross-checks a certificate obtained on the *lifted* copy of a finite
/// model: its `P_i` must also satisfy the original finite-chain blocks at
/// the same level. This ties the gridded reduction back to the exact finite
/// analysis.
pub fn cross_check_lifted_certificate(
    cert: &Certificate,
    finite_model: &MjlsModel,
    gamma: f64,
) -> Result<CrossCheckReport, Error> {
    let sys = assemble_finite_brl(finite_model, gamma)?;
    let p = cert.p_matrices()?;
    if p.len() != sys.var_count() {
        return Err(Error::invalid(format!(
            "certificate has {} P matrices for {} modes",
            p.len(),
            sys.var_count()
        )));
    }
    let values = sys.pack_values(&p)?;
    let min_margin = sys.margin_at(&values)?;
    Ok(CrossCheckReport {
        ok: min_margin > 0.0,
        min_margin,
    })
}

/// Exact conditional expectation of a certificate family at an interval
/// state, for diagnostics: `sum_j q_j(ell) P_j`.
pub fn expectation_at(
    model: &MjlsModel,
    cert: &Certificate,
    ell: f64,
) -> Result<DMatrix<f64>, Error> {
    let ChainModel::Kernel(chain) = model.chain() else {
        return Err(Error::invalid("state-indexed expectation needs an interval chain"));
    };
    let points = cert
        .grid_points
        .clone()
        .ok_or_else(|| Error::invalid("certificate lacks its cell grid"))?;
    let grid = Grid::from_points(points, crate::gridding::SampleRule::Midpoint)?;
    let p = cert.p_matrices()?;
    let q = subinterval_masses(chain, &grid, ell)?;
    let n = p[0].nrows();
    let mut out = DMatrix::zeros(n, n);
    for (j, pj) in p.iter().enumerate() {
        out += pj * q[j];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::FiniteChain;
    use crate::mjls::MatrixField;
    use nalgebra::{dmatrix, DVector};

    fn single_mode_model(a: f64, b: f64, c: f64) -> MjlsModel {
        let chain = ChainModel::Finite(
            FiniteChain::new(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap(),
        );
        MjlsModel::new(
            chain,
            MatrixField::PerMode(vec![dmatrix![a]]),
            MatrixField::PerMode(vec![dmatrix![b]]),
            MatrixField::PerMode(vec![dmatrix![c]]),
            MatrixField::Zero { rows: 1, cols: 1 },
        )
        .unwrap()
    }

    #[test]
    fn block_builder_eval_roundtrip() {
        let mut sys = LmiSystem::new("test");
        let p = sys.add_var("P0", VarKind::Sym(2)).unwrap();
        let x = sys.add_var("X0", VarKind::Full(2)).unwrap();
        let mut bb = sys.build_block(4);
        bb.matrix_var(p, false, None, None, 1.0, 0, 0, false);
        bb.matrix_var(x, false, None, None, 1.0, 0, 2, true);
        bb.matrix_var(x, true, None, None, 1.0, 2, 2, false);
        bb.matrix_var(x, false, None, None, 1.0, 2, 2, false);
        bb.constant_identity(2, 2, 0.5);
        let block = bb.finish();
        sys.push_block(block);
        let pm = dmatrix![2.0, 0.5; 0.5, 3.0];
        let xm = dmatrix![1.0, -1.0; 4.0, 2.0];
        let vals = sys.pack_values(&[pm.clone(), xm.clone()]).unwrap();
        let m = sys.blocks()[0].eval(vals.as_slice());
        // Top-left = P, top-right = X, bottom-right = X + X^T + I/2.
        assert!((m.view((0, 0), (2, 2)).clone_owned() - &pm).amax() < 1e-14);
        assert!((m.view((0, 2), (2, 2)).clone_owned() - &xm).amax() < 1e-14);
        assert!((m.view((2, 0), (2, 2)).clone_owned() - xm.transpose()).amax() < 1e-14);
        let br = m.view((2, 2), (2, 2)).clone_owned();
        let expected = &xm + xm.transpose() + DMatrix::identity(2, 2) * 0.5;
        assert!((br - expected).amax() < 1e-14);
        assert!((&m - m.transpose()).amax() < 1e-14, "assembled block symmetric");
    }

    #[test]
    fn finite_assembly_trivial_mode() {
        // 1 mode, A=B=C=0: block is diag(p, 1, p, gamma).
        let model = single_mode_model(0.0, 0.0, 0.0);
        let sys = assemble_finite_brl(&model, 2.0).unwrap();
        assert_eq!(sys.blocks().len(), 1);
        assert_eq!(sys.blocks()[0].dim(), 4);
        let vals = sys.pack_values(&[dmatrix![3.0]]).unwrap();
        let m = sys.blocks()[0].eval(vals.as_slice());
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 3.0, 2.0]));
        assert!((m - expected).amax() < 1e-14);
    }

    #[test]
    fn finite_assembly_couples_modes() {
        let chain = ChainModel::Finite(
            FiniteChain::new(
                DVector::from_vec(vec![0.5, 0.5]),
                DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.5, 0.5]),
            )
            .unwrap(),
        );
        let model = MjlsModel::new(
            chain,
            MatrixField::PerMode(vec![dmatrix![1.0], dmatrix![2.0]]),
            MatrixField::PerMode(vec![dmatrix![1.0], dmatrix![1.0]]),
            MatrixField::PerMode(vec![dmatrix![1.0], dmatrix![1.0]]),
            MatrixField::Zero { rows: 1, cols: 1 },
        )
        .unwrap();
        let sys = assemble_finite_brl(&model, 1.5).unwrap();
        let vals = sys.pack_values(&[dmatrix![2.0], dmatrix![4.0]]).unwrap();
        let m0 = sys.blocks()[0].eval(vals.as_slice());
        // S_0 = 0.25*2 + 0.75*4 = 3.5; A_0 = 1 -> (0,2) = 3.5.
        assert!((m0[(0, 0)] - 3.5).abs() < 1e-14);
        assert!((m0[(0, 2)] - 3.5).abs() < 1e-14);
        assert!((m0[(2, 2)] - 2.0).abs() < 1e-14);
        assert!((m0[(3, 3)] - 1.5).abs() < 1e-14);
        assert!((&m0 - m0.transpose()).amax() < 1e-14);
    }

    #[test]
    fn named_matrix_roundtrip_is_exact() {
        let m = dmatrix![1.0 / 3.0, 2.0f64.sqrt(); std::f64::consts::PI, 1e-300];
        let nm = NamedMatrix::from_matrix("M", &m);
        let back = nm.to_matrix().unwrap();
        assert_eq!(m, back);
        // Through JSON too.
        let json = serde_json::to_string(&nm).unwrap();
        let nm2: NamedMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(nm, nm2);
    }

    #[test]
    fn fingerprint_distinguishes_models() {
        let m1 = single_mode_model(0.5, 1.0, 1.0);
        let m2 = single_mode_model(0.6, 1.0, 1.0);
        assert_ne!(model_fingerprint(&m1), model_fingerprint(&m2));
        assert_eq!(model_fingerprint(&m1), model_fingerprint(&m1));
    }
}
