//! The model configuration document: a JSON description of the jump chain,
//! the system families, and analysis parameters. Loading a configuration
//! constructs the real domain objects, so every invariant they enforce is
//! re-checked on the way in.

use mjrobust_core::markov::{ChainModel, FiniteChain, InitialDensity, KernelChain, KernelKind};
use mjrobust_core::mjls::{MatrixField, MjlsModel};
use mjrobust_core::ncs::{discretize, DelayModel, PlantSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Row-major matrix literal.
pub type Matrix = Vec<Vec<f64>>;

pub fn to_dmatrix(name: &str, m: &Matrix) -> Result<DMatrix<f64>, String> {
    if m.is_empty() || m[0].is_empty() {
        return Err(format!("{name}: matrix must have at least one row and one column"));
    }
    let cols = m[0].len();
    if let Some(bad) = m.iter().position(|r| r.len() != cols) {
        return Err(format!(
            "{name}: row {bad} has {} entries, expected {cols}",
            m[bad].len()
        ));
    }
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(m.len(), cols, &flat))
}

pub fn matrix_json(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Top-level configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub chain: ChainConfig,
    pub system: SystemConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
}

/// The jump chain: finitely many modes or a density kernel on an interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChainConfig {
    Finite {
        initial: Vec<f64>,
        transition: Matrix,
    },
    Kernel {
        interval: [f64; 2],
        #[serde(default)]
        initial_density: DensityConfig,
        kernel: KernelConfig,
        #[serde(default = "default_mesh_n")]
        mesh_n: usize,
    },
}

fn default_mesh_n() -> usize {
    400
}

/// Initial density: a builtin by name or an explicit table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DensityConfig {
    Name(String),
    Detail(DensityDetail),
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig::Name("uniform".into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DensityDetail {
    Tabulated { mesh: Vec<f64>, values: Vec<f64> },
    PiecewiseConst { breaks: Vec<f64>, values: Vec<f64> },
}

/// Transition kernel: a builtin by name or an explicit form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelConfig {
    Name(String),
    Detail(KernelDetail),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelDetail {
    LinearRational { below: [f64; 4], above: [f64; 4] },
    Tabulated { mesh: Vec<f64>, values: Matrix },
    CellConstant { breaks: Vec<f64>, values: Matrix },
}

/// The system families attached to the chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SystemConfig {
    /// One matrix per mode (finite chains).
    Explicit {
        a: Vec<Matrix>,
        b: Vec<Matrix>,
        c: Vec<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<Vec<Matrix>>,
    },
    /// Piecewise-constant families on explicit cells (interval chains).
    Piecewise {
        breaks: Vec<f64>,
        a: Vec<Matrix>,
        b: Vec<Matrix>,
        c: Vec<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d: Option<Vec<Matrix>>,
    },
    /// A sampled continuous-time plant closed over a delay-prone network;
    /// the jump model is derived by exact discretization. `delays` gives the
    /// per-mode delay values for finite chains and must be absent for
    /// interval chains (the chain state *is* the delay).
    Ncs {
        a_c: Matrix,
        b_c: Matrix,
        k: Matrix,
        period: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delays: Option<Vec<f64>>,
    },
}

/// Analysis parameters. Command-line flags override these; commands fill in
/// defaults for whatever remains unset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub bisect: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<SigmaPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_cell: Option<usize>,
}

/// How per-cell deviation bounds are estimated for gridded certification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SigmaPolicy {
    pub mesh_per_cell: usize,
    pub safety: f64,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy {
            mesh_per_cell: 65,
            safety: 1.0,
        }
    }
}

/// Monte Carlo simulation batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub x0: Vec<f64>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Direction matrix the scalar `deltas` scale. Defaults to `[[1]]` for
    /// scalar uncertainty shapes; required otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_direction: Option<Matrix>,
}

fn default_runs() -> usize {
    100
}
fn default_steps() -> usize {
    40
}
fn default_deltas() -> Vec<f64> {
    vec![0.0]
}

/// The constructed model, keeping the plant and delay law when the system
/// came from a networked-loop description (simulation needs them).
pub enum BuiltSystem {
    Plain(MjlsModel),
    Networked {
        model: MjlsModel,
        plant: PlantSpec,
        delays: DelayModel,
    },
}

impl BuiltSystem {
    pub fn model(&self) -> &MjlsModel {
        match self {
            BuiltSystem::Plain(m) => m,
            BuiltSystem::Networked { model, .. } => model,
        }
    }
}

pub fn build_chain(cfg: &ChainConfig) -> Result<ChainModel, String> {
    match cfg {
        ChainConfig::Finite {
            initial,
            transition,
        } => {
            let pi = DVector::from_vec(initial.clone());
            let p = to_dmatrix("chain.transition", transition)?;
            FiniteChain::new(pi, p)
                .map(ChainModel::Finite)
                .map_err(|e| e.to_string())
        }
        ChainConfig::Kernel {
            interval,
            initial_density,
            kernel,
            mesh_n,
        } => {
            let nu0 = match initial_density {
                DensityConfig::Name(n) if n == "uniform" => InitialDensity::Uniform,
                DensityConfig::Name(n) => {
                    return Err(format!(
                        "unknown initial density '{n}' (builtin: \"uniform\"; or give a tabulated / piecewise_const object)"
                    ))
                }
                DensityConfig::Detail(DensityDetail::Tabulated { mesh, values }) => {
                    InitialDensity::Tabulated {
                        mesh: mesh.clone(),
                        values: values.clone(),
                    }
                }
                DensityConfig::Detail(DensityDetail::PiecewiseConst { breaks, values }) => {
                    InitialDensity::PiecewiseConst {
                        breaks: breaks.clone(),
                        values: values.clone(),
                    }
                }
            };
            let kind = match kernel {
                KernelConfig::Name(n) if n == "uniform" => KernelKind::Uniform,
                KernelConfig::Name(n) if n == "tent" => KernelKind::Tent,
                KernelConfig::Name(n) => {
                    return Err(format!(
                        "unknown kernel '{n}' (builtins: \"uniform\", \"tent\"; or give a linear_rational / tabulated / cell_constant object)"
                    ))
                }
                KernelConfig::Detail(KernelDetail::LinearRational { below, above }) => {
                    KernelKind::LinearRational {
                        below: *below,
                        above: *above,
                    }
                }
                KernelConfig::Detail(KernelDetail::Tabulated { mesh, values }) => {
                    KernelKind::Tabulated {
                        mesh: mesh.clone(),
                        values: to_dmatrix("chain.kernel.values", values)?,
                    }
                }
                KernelConfig::Detail(KernelDetail::CellConstant { breaks, values }) => {
                    KernelKind::CellConstant {
                        breaks: breaks.clone(),
                        values: to_dmatrix("chain.kernel.values", values)?,
                    }
                }
            };
            KernelChain::new(interval[0], interval[1], nu0, kind, *mesh_n)
                .map(ChainModel::Kernel)
                .map_err(|e| e.to_string())
        }
    }
}

fn per_mode_field(name: &str, mats: &[Matrix]) -> Result<Vec<DMatrix<f64>>, String> {
    mats.iter()
        .enumerate()
        .map(|(i, m)| to_dmatrix(&format!("system.{name}[{i}]"), m))
        .collect()
}

pub fn build_system(cfg: &SystemConfig, chain: ChainModel) -> Result<BuiltSystem, String> {
    match cfg {
        SystemConfig::Explicit { a, b, c, d } => {
            if !chain.is_finite() {
                return Err(
                    "explicit per-mode matrices need a finite chain; use a `piecewise` system for interval chains"
                        .into(),
                );
            }
            let a = per_mode_field("a", a)?;
            let b = per_mode_field("b", b)?;
            let c = per_mode_field("c", c)?;
            let d_field = match d {
                Some(d) => MatrixField::PerMode(per_mode_field("d", d)?),
                None => MatrixField::Zero {
                    rows: c.first().map_or(0, |m| m.nrows()),
                    cols: b.first().map_or(0, |m| m.ncols()),
                },
            };
            MjlsModel::new(
                chain,
                MatrixField::PerMode(a),
                MatrixField::PerMode(b),
                MatrixField::PerMode(c),
                d_field,
            )
            .map(BuiltSystem::Plain)
            .map_err(|e| e.to_string())
        }
        SystemConfig::Piecewise { breaks, a, b, c, d } => {
            if chain.is_finite() {
                return Err(
                    "piecewise-cell families need an interval chain; use an `explicit` system for finite chains"
                        .into(),
                );
            }
            let a = per_mode_field("a", a)?;
            let b = per_mode_field("b", b)?;
            let c = per_mode_field("c", c)?;
            let d_field = match d {
                Some(d) => MatrixField::PiecewiseCells {
                    breaks: breaks.clone(),
                    pieces: per_mode_field("d", d)?,
                },
                None => MatrixField::Zero {
                    rows: c.first().map_or(0, |m| m.nrows()),
                    cols: b.first().map_or(0, |m| m.ncols()),
                },
            };
            let cells = |pieces: Vec<DMatrix<f64>>| MatrixField::PiecewiseCells {
                breaks: breaks.clone(),
                pieces,
            };
            MjlsModel::new(chain, cells(a), cells(b), cells(c), d_field)
                .map(BuiltSystem::Plain)
                .map_err(|e| e.to_string())
        }
        SystemConfig::Ncs {
            a_c,
            b_c,
            k,
            period,
            delays,
        } => {
            let plant = PlantSpec::new(
                to_dmatrix("system.a_c", a_c)?,
                to_dmatrix("system.b_c", b_c)?,
                to_dmatrix("system.k", k)?,
                *period,
            )
            .map_err(|e| e.to_string())?;
            let delay_model = match (chain, delays) {
                (ChainModel::Finite(fc), Some(taus)) => {
                    DelayModel::finite(fc, taus.clone()).map_err(|e| e.to_string())?
                }
                (ChainModel::Finite(_), None) => {
                    return Err(
                        "a finite chain over delays needs `system.delays` (one value per mode)"
                            .into(),
                    )
                }
                (ChainModel::Kernel(kc), None) => DelayModel::interval(kc),
                (ChainModel::Kernel(_), Some(_)) => {
                    return Err(
                        "`system.delays` applies to finite chains only; an interval chain's state is the delay itself"
                            .into(),
                    )
                }
            };
            let model = discretize(&plant, &delay_model).map_err(|e| e.to_string())?;
            Ok(BuiltSystem::Networked {
                model,
                plant,
                delays: delay_model,
            })
        }
    }
}

/// Builds the full system from a parsed configuration.
pub fn build_full(cfg: &ModelConfig) -> Result<BuiltSystem, String> {
    let chain = build_chain(&cfg.chain)?;
    build_system(&cfg.system, chain)
}
