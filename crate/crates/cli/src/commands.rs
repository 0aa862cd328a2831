//! The analysis commands. Each reads a configuration, runs one workflow
//! from the core library, writes `report.json` (plus certificates and CSVs
//! where applicable) into the output directory, and returns the process
//! exit code: 0 ok/certified, 2 no-certificate (not a disproof),
//! 3 validation failure, 4 solver failure.

use crate::config::{
    build_chain, build_full, build_system, matrix_json, to_dmatrix, AnalysisConfig, BuiltSystem,
    ChainConfig, DensityConfig, DensityDetail, KernelConfig, KernelDetail, Matrix, ModelConfig,
    SigmaPolicy, SimulationConfig, SystemConfig,
};
use crate::report::{say, sha256_hex, solver_trace_json, Report};
use mjrobust_core::gridding::{estimate_sigmas, lift_finite, Grid, SampleRule, SigmaBounds};
use mjrobust_core::lmi::{
    certify_robust_stability, cross_check_lifted_certificate, hinf_norm_finite,
    verify_certificate, Certificate, CertifyMethod, CertifyOutcome, DEFAULT_MIN_MARGIN,
};
use mjrobust_core::markov::rng::{stream, StreamId};
use mjrobust_core::markov::{check_positivity, evolve_density, ChainModel, DensityState};
use mjrobust_core::mjls::{
    close_uncertain_loop, simulate, spectral_radius_second_moment, MatrixField, MjlsModel,
};
use mjrobust_core::ncs::simulate_closed_loop;
use mjrobust_core::Error as CoreError;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use std::fs;
use std::path::Path;

/// A command failure carrying its process exit code.
pub struct Fail {
    pub code: i32,
    pub message: String,
}

impl Fail {
    pub fn validation(message: impl Into<String>) -> Self {
        Fail {
            code: 3,
            message: message.into(),
        }
    }

    fn solver(message: impl Into<String>) -> Self {
        Fail {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<CoreError> for Fail {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::SolverFailure(_)
            | CoreError::DegenerateSystem(_)
            | CoreError::VerificationFailure(_) => 4,
            _ => 3,
        };
        Fail {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail {
            code: 3,
            message: format!("i/o: {e}"),
        }
    }
}

/// Command-line overrides shared by the analysis commands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct AnalysisFlags {
    /// Attenuation level gamma to test (overrides the config).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Bisect for the smallest certifiable level instead of testing one.
    #[arg(long)]
    pub bisect: bool,
    /// Number of grid cells for interval chains (overrides the config).
    #[arg(long = "grid-n")]
    pub grid_n: Option<usize>,
    /// RNG seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bisection tolerance on the attenuation level (overrides the config).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Verification samples per certificate cell (overrides the config).
    #[arg(long = "samples-per-cell")]
    pub samples_per_cell: Option<usize>,
}

/// Effective parameters after flag > config > default resolution.
struct Effective {
    gamma: Option<f64>,
    bisect: bool,
    grid_n: usize,
    sigma: SigmaPolicy,
    tol: f64,
    seed: u64,
    samples_per_cell: usize,
}

impl Effective {
    fn resolve(cfg: &AnalysisConfig, flags: &AnalysisFlags, default_tol: f64) -> Self {
        Effective {
            gamma: flags.gamma.or(cfg.gamma),
            bisect: flags.bisect || cfg.bisect,
            grid_n: flags.grid_n.or(cfg.grid_n).unwrap_or(20),
            sigma: cfg.sigma.unwrap_or_default(),
            tol: flags.tol.or(cfg.tol).unwrap_or(default_tol),
            seed: flags.seed.or(cfg.seed).unwrap_or(1),
            samples_per_cell: flags.samples_per_cell.or(cfg.samples_per_cell).unwrap_or(3),
        }
    }

    fn to_json(&self) -> Value {
        json!({
            "gamma": self.gamma,
            "bisect": self.bisect,
            "grid_n": self.grid_n,
            "sigma": {"mesh_per_cell": self.sigma.mesh_per_cell, "safety": self.sigma.safety},
            "tol": self.tol,
            "seed": self.seed,
            "samples_per_cell": self.samples_per_cell,
        })
    }
}

fn read_config(path: &Path) -> Result<(String, ModelConfig), Fail> {
    let raw = fs::read(path)?;
    let sha = sha256_hex(&raw);
    let cfg: ModelConfig = serde_json::from_slice(&raw)
        .map_err(|e| Fail::validation(format!("config schema: {e}")))?;
    Ok((sha, cfg))
}

fn write_certificate(out: &Path, cert: &Certificate) -> Result<String, Fail> {
    fs::create_dir_all(out)?;
    let path = out.join("certificate.json");
    let mut body = cert.to_json().map_err(Fail::from)?;
    body.push('\n');
    fs::write(&path, body)?;
    Ok("certificate.json".into())
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn check_item(checks: &mut Vec<Value>, all_ok: &mut bool, name: &str, ok: bool, detail: String) {
    say(&format!(
        "check {name}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    ));
    checks.push(json!({"check": name, "passed": ok, "detail": detail}));
    *all_ok &= ok;
}

fn finish_check(
    out: &Path,
    sha: String,
    name: Option<String>,
    checks: Vec<Value>,
    all_ok: bool,
) -> Result<i32, Fail> {
    let mut report = Report::new("check", sha, name, 0);
    report.parameters = json!({});
    report.verdict = if all_ok { "ok" } else { "fail" }.into();
    report.results = json!({ "checks": checks });
    report.summary = if all_ok {
        "all validation checks passed".into()
    } else {
        "validation failed; see the checks list".into()
    };
    report.finish(out)?;
    Ok(if all_ok { 0 } else { 3 })
}

pub fn cmd_check(config_path: &Path, out: &Path) -> Result<i32, Fail> {
    let raw = fs::read(config_path)?;
    let sha = sha256_hex(&raw);
    let mut checks: Vec<Value> = Vec::new();
    let mut all_ok = true;

    let cfg: ModelConfig = match serde_json::from_slice(&raw) {
        Ok(c) => {
            check_item(
                &mut checks,
                &mut all_ok,
                "config_schema",
                true,
                "document parsed against the schema".into(),
            );
            c
        }
        Err(e) => {
            check_item(&mut checks, &mut all_ok, "config_schema", false, e.to_string());
            return finish_check(out, sha, None, checks, all_ok);
        }
    };

    let chain = match build_chain(&cfg.chain) {
        Ok(chain) => {
            let detail = match &chain {
                ChainModel::Finite(c) => format!("finite chain with {} modes", c.mode_count()),
                ChainModel::Kernel(k) => {
                    let (a, b) = k.interval();
                    format!(
                        "interval chain on [{a}, {b}] with a {}-cell evaluation mesh",
                        k.mesh_cells()
                    )
                }
            };
            check_item(&mut checks, &mut all_ok, "chain_invariants", true, detail);
            chain
        }
        Err(e) => {
            check_item(&mut checks, &mut all_ok, "chain_invariants", false, e);
            return finish_check(out, sha, cfg.name, checks, all_ok);
        }
    };

    let pos = check_positivity(&chain);
    let mesh_note = if pos.mesh_certified {
        " (mesh-certified: sampled at the evaluation-mesh midpoints, not an almost-everywhere proof)"
    } else {
        ""
    };
    check_item(
        &mut checks,
        &mut all_ok,
        "initial_distribution_positive",
        pos.nu0_positive,
        format!("initial law strictly positive{mesh_note}"),
    );
    check_item(
        &mut checks,
        &mut all_ok,
        "transition_reaches_every_state",
        pos.kernel_marginal_positive,
        format!("transition law has positive marginal mass at every state{mesh_note}"),
    );

    if matches!(&chain, ChainModel::Kernel(_)) {
        let mut nu = DensityState::initial(&chain);
        let mut worst: f64 = 0.0;
        let mut err: Option<String> = None;
        for _ in 0..3 {
            match evolve_density(&chain, &nu) {
                Ok(next) => {
                    nu = next;
                    worst = worst.max((nu.mass() - 1.0).abs());
                }
                Err(e) => {
                    err = Some(e.to_string());
                    break;
                }
            }
        }
        match err {
            None => check_item(
                &mut checks,
                &mut all_ok,
                "density_evolution_preserves_mass",
                worst <= 1e-6,
                format!("largest mass defect over 3 steps: {worst:.3e}"),
            ),
            Some(e) => check_item(
                &mut checks,
                &mut all_ok,
                "density_evolution_preserves_mass",
                false,
                e,
            ),
        }
    }

    match build_system(&cfg.system, chain) {
        Ok(built) => {
            let m = built.model();
            check_item(
                &mut checks,
                &mut all_ok,
                "system_invariants",
                true,
                format!(
                    "model constructed: state {}, uncertainty input {}, uncertainty output {} (includes the orthogonal output/feedthrough requirement)",
                    m.state_dim(),
                    m.input_dim(),
                    m.output_dim()
                ),
            );
        }
        Err(e) => check_item(&mut checks, &mut all_ok, "system_invariants", false, e),
    }

    finish_check(out, sha, cfg.name, checks, all_ok)
}

// ---------------------------------------------------------------------------
// hinf / radius
// ---------------------------------------------------------------------------

pub fn cmd_hinf(
    config_path: &Path,
    out: &Path,
    flags: &AnalysisFlags,
    as_radius: bool,
) -> Result<i32, Fail> {
    let (sha, cfg) = read_config(config_path)?;
    let eff = Effective::resolve(&cfg.analysis, flags, 1e-3);
    let built = build_full(&cfg).map_err(Fail::validation)?;
    let model = built.model();
    if !model.chain().is_finite() {
        return Err(Fail::validation(
            "the attenuation norm is computed for finite-chain models; certify interval chains with `grid-cert`",
        ));
    }
    let rho = spectral_radius_second_moment(model)?;
    let res = hinf_norm_finite(model, eff.tol)?;
    let cert_file = match &res.certificate {
        Some(c) => Some(write_certificate(out, c)?),
        None => None,
    };

    let command = if as_radius { "radius" } else { "hinf" };
    let mut report = Report::new(command, sha, cfg.name.clone(), eff.seed);
    report.parameters = eff.to_json();
    report.verdict = "certified".into();
    report.results = json!({
        "second_moment_spectral_radius": rho.rho,
        "gamma_star": res.gamma_star,
        "norm": res.norm,
        "bound": res.bound,
        "stability_radius_lower_bound": res.bound,
        "bracket": [res.bracket.0, res.bracket.1],
        "solves": res.solves,
        "certificate_file": cert_file,
    });
    report.summary = if as_radius {
        format!(
            "stability radius >= {:.4}: every uncertainty gain of norm at most {:.4} keeps the loop exponentially mean-square stable (attenuation level {:.4}, {} solves)",
            res.bound, res.bound, res.gamma_star, res.solves
        )
    } else {
        format!(
            "attenuation norm {:.4} (smallest feasible level gamma = {:.4}, robustness bound 1/sqrt(gamma) = {:.4}, {} solves)",
            res.norm, res.gamma_star, res.bound, res.solves
        )
    };
    report.solver_trace = res
        .certificate
        .as_ref()
        .map(|c| solver_trace_json(&c.solver));
    report.finish(out)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// grid-cert
// ---------------------------------------------------------------------------

enum Certified {
    Yes { cert: Box<Certificate>, solves: usize },
    No {
        gamma: f64,
        best_margin: f64,
        diagnostics: String,
    },
}

fn certify_gridded(
    model: &MjlsModel,
    grid: &Grid,
    sigmas: &SigmaBounds,
    eff: &Effective,
) -> Result<Certified, Fail> {
    let method = CertifyMethod::Gridded { grid, sigmas };
    if !eff.bisect {
        let gamma = eff.gamma.ok_or_else(|| {
            Fail::validation("grid-cert needs --gamma, --bisect, or `analysis.gamma` in the config")
        })?;
        return match certify_robust_stability(model, gamma, method, DEFAULT_MIN_MARGIN)? {
            CertifyOutcome::Certified(cert) => Ok(Certified::Yes { cert, solves: 1 }),
            CertifyOutcome::NoCertificate {
                best_margin,
                diagnostics,
            } => Ok(Certified::No {
                gamma,
                best_margin,
                diagnostics,
            }),
        };
    }

    // Bisection: find a feasible upper level and an infeasible lower one,
    // then narrow the bracket to `tol`.
    let mut solves = 0usize;
    let mut best: Option<Box<Certificate>> = None;
    let mut feasible = |g: f64, best: &mut Option<Box<Certificate>>| -> Result<bool, Fail> {
        solves += 1;
        match certify_robust_stability(model, g, method, DEFAULT_MIN_MARGIN)? {
            CertifyOutcome::Certified(c) => {
                *best = Some(c);
                Ok(true)
            }
            CertifyOutcome::NoCertificate { .. } => Ok(false),
        }
    };
    let mut hi = eff.gamma.unwrap_or(1.5).max(1.5);
    while !feasible(hi, &mut best)? {
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(Certified::No {
                gamma: hi,
                best_margin: f64::NEG_INFINITY,
                diagnostics: "no certifiable level up to 1e6 on this grid".into(),
            });
        }
    }
    let mut lo = hi / 2.0;
    while lo > 1e-6 && feasible(lo, &mut best)? {
        hi = lo;
        lo /= 2.0;
    }
    while hi - lo > eff.tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid, &mut best)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // The certificate in `best` is the one solved at the final feasible
    // level: every later bisection step that found a lower feasible level
    // replaced it, and infeasible probes never did.
    Ok(Certified::Yes {
        cert: best.expect("bisection ends on a feasible level"),
        solves,
    })
}

pub fn cmd_grid_cert(config_path: &Path, out: &Path, flags: &AnalysisFlags) -> Result<i32, Fail> {
    let (sha, cfg) = read_config(config_path)?;
    let eff = Effective::resolve(&cfg.analysis, flags, 1e-2);
    let built = build_full(&cfg).map_err(Fail::validation)?;
    let model = built.model();

    // Interval chains certify directly; finite chains are lifted onto an
    // interval first and the resulting certificate is cross-checked against
    // the exact finite-chain conditions.
    let (lifted_model, grid) = match model.chain() {
        ChainModel::Kernel(k) => {
            let (a, b) = k.interval();
            (None, Grid::uniform(a, b, eff.grid_n, SampleRule::Midpoint)?)
        }
        ChainModel::Finite(_) => {
            let (lifted, grid) = lift_finite(model)?;
            (Some(lifted), grid)
        }
    };
    let lifted = lifted_model.is_some();
    let target: &MjlsModel = lifted_model.as_ref().unwrap_or(model);
    let sigmas = estimate_sigmas(target, &grid, eff.sigma.mesh_per_cell, eff.sigma.safety)?;

    let mut report = Report::new("grid-cert", sha, cfg.name.clone(), eff.seed);
    report.parameters = eff.to_json();

    match certify_gridded(target, &grid, &sigmas, &eff)? {
        Certified::Yes { cert, solves } => {
            let verify = verify_certificate(target, &cert, eff.samples_per_cell)?;
            if !verify.ok {
                return Err(Fail::solver(format!(
                    "solved certificate failed independent verification: {}",
                    verify.failure.unwrap_or_default()
                )));
            }
            let cross = if lifted {
                let cc = cross_check_lifted_certificate(&cert, model, cert.gamma)?;
                if !cc.ok {
                    return Err(Fail::solver(format!(
                        "lifted certificate failed the exact finite-chain cross-check (min_eig {:.3e})",
                        cc.min_margin
                    )));
                }
                Some(json!({"ok": cc.ok, "min_margin": cc.min_margin}))
            } else {
                None
            };
            let cert_file = write_certificate(out, &cert)?;
            report.verdict = "certified".into();
            report.results = json!({
                "lifted": lifted,
                "grid_n": grid.n_cells(),
                "interval": [grid.points()[0], *grid.points().last().unwrap()],
                "gamma": cert.gamma,
                "bound": cert.bound,
                "margin": cert.margin,
                "replayed_margin": cert.replayed_margin,
                "solves": solves,
                "sigma_max": {
                    "a": max_of(&sigmas.sig_a),
                    "b": max_of(&sigmas.sig_b),
                    "c": max_of(&sigmas.sig_c),
                    "q": max_of(&sigmas.sig_q),
                },
                "x_wellposed_min": cert.x_wellposed_margins.as_ref().map(|m| min_of(m)),
                "verify": {
                    "ok": verify.ok,
                    "checked_points": verify.checked_points,
                    "min_margin": verify.min_margin,
                    "replayed_margin": verify.replayed_margin,
                    "samples_per_cell": eff.samples_per_cell,
                },
                "cross_check": cross,
                "certificate_file": cert_file,
            });
            report.summary = format!(
                "certified at gamma = {:.6}: every uncertainty gain of norm at most {:.4} keeps the loop exponentially mean-square stable ({} cells, solver margin {:.3e}, verification min_eig {:.3e} over {} sampled states{})",
                cert.gamma,
                cert.bound,
                grid.n_cells(),
                cert.margin,
                verify.min_margin,
                verify.checked_points,
                if lifted { ", finite cross-check passed" } else { "" }
            );
            report.solver_trace = Some(solver_trace_json(&cert.solver));
            report.finish(out)?;
            Ok(0)
        }
        Certified::No {
            gamma,
            best_margin,
            diagnostics,
        } => {
            report.verdict = "no-certificate".into();
            report.results = json!({
                "lifted": lifted,
                "grid_n": grid.n_cells(),
                "gamma": gamma,
                "best_margin": best_margin,
                "diagnostics": diagnostics,
            });
            report.summary = format!(
                "no certificate at gamma = {gamma} with {} cells (best margin {best_margin:.3e}). The gridded conditions are sufficient only, so this is not a disproof of robustness; try a finer grid or a larger gamma.",
                grid.n_cells()
            );
            report.finish(out)?;
            Ok(2)
        }
    }
}

// ---------------------------------------------------------------------------
// lift
// ---------------------------------------------------------------------------

pub fn cmd_lift(config_path: &Path, out: &Path) -> Result<i32, Fail> {
    let (sha, cfg) = read_config(config_path)?;
    let built = build_full(&cfg).map_err(Fail::validation)?;
    let model = built.model();
    let ChainModel::Finite(chain) = model.chain() else {
        return Err(Fail::validation("only finite-chain models can be lifted"));
    };
    let n_modes = chain.mode_count();
    let (lifted_model, grid) = lift_finite(model)?;
    let lifted_chain = lifted_model
        .chain()
        .as_kernel()
        .expect("the lift produces an interval chain");

    let breaks = grid.points().to_vec();
    let per_mode = |field: &MatrixField| -> Result<Vec<Matrix>, Fail> {
        (0..n_modes)
            .map(|i| Ok(matrix_json(&field.eval_mode(i)?)))
            .collect()
    };
    let d = if model.d().is_zero_variant() {
        None
    } else {
        Some(per_mode(model.d())?)
    };
    let lifted_cfg = ModelConfig {
        name: Some(format!(
            "{} (lifted onto [0, {n_modes}])",
            cfg.name.clone().unwrap_or_else(|| "finite model".into())
        )),
        chain: ChainConfig::Kernel {
            interval: [breaks[0], *breaks.last().unwrap()],
            initial_density: DensityConfig::Detail(DensityDetail::PiecewiseConst {
                breaks: breaks.clone(),
                values: chain.initial().iter().copied().collect(),
            }),
            kernel: KernelConfig::Detail(KernelDetail::CellConstant {
                breaks: breaks.clone(),
                values: matrix_json(chain.transition()),
            }),
            mesh_n: lifted_chain.mesh_cells(),
        },
        system: SystemConfig::Piecewise {
            breaks,
            a: per_mode(model.a())?,
            b: per_mode(model.b())?,
            c: per_mode(model.c())?,
            d,
        },
        analysis: AnalysisConfig {
            grid_n: Some(n_modes),
            ..cfg.analysis.clone()
        },
        simulation: None,
    };

    fs::create_dir_all(out)?;
    let path = out.join("lifted-config.json");
    let mut body = serde_json::to_string_pretty(&lifted_cfg).expect("config serialization");
    body.push('\n');
    fs::write(&path, body)?;

    let mut report = Report::new("lift", sha, cfg.name.clone(), 0);
    report.parameters = json!({});
    report.verdict = "ok".into();
    report.results = json!({
        "modes": n_modes,
        "interval": [0.0, n_modes as f64],
        "mesh_n": lifted_chain.mesh_cells(),
        "lifted_config": "lifted-config.json",
    });
    report.summary = format!(
        "lifted the {n_modes}-mode finite chain onto the interval [0, {n_modes}] with a cell-constant kernel and cell-constant families; wrote lifted-config.json",
    );
    report.finish(out)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn delta_tag(delta: f64) -> String {
    format!("delta_{delta:+.4}")
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), Fail> {
    let mut body = String::with_capacity(rows.len() * 24 + header.len() + 1);
    body.push_str(header);
    body.push('\n');
    for row in rows {
        body.push_str(&row.join(","));
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Ordinary least-squares slope of `ln y(k)` over the steps where `y > 0`.
fn log_slope(ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = ys
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.0)
        .map(|(k, &y)| (k as f64, y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

fn direction_matrix(
    sim: &SimulationConfig,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, Fail> {
    match &sim.delta_direction {
        Some(m) => {
            let d = to_dmatrix("simulation.delta_direction", m).map_err(Fail::validation)?;
            if d.shape() != (rows, cols) {
                return Err(Fail::validation(format!(
                    "simulation.delta_direction must be {rows}x{cols}, got {}x{}",
                    d.nrows(),
                    d.ncols()
                )));
            }
            Ok(d)
        }
        None if rows == 1 && cols == 1 => Ok(DMatrix::from_element(1, 1, 1.0)),
        None => Err(Fail::validation(format!(
            "simulation.delta_direction ({rows}x{cols}) is required for non-scalar uncertainty shapes"
        ))),
    }
}

pub fn cmd_simulate(config_path: &Path, out: &Path, flags: &AnalysisFlags) -> Result<i32, Fail> {
    let (sha, cfg) = read_config(config_path)?;
    let eff = Effective::resolve(&cfg.analysis, flags, 1e-3);
    let sim = cfg.simulation.clone().ok_or_else(|| {
        Fail::validation("simulate needs a `simulation` section (runs, steps, x0, deltas)")
    })?;
    if sim.runs == 0 || sim.steps == 0 {
        return Err(Fail::validation(
            "simulation.runs and simulation.steps must be positive",
        ));
    }
    let built = build_full(&cfg).map_err(Fail::validation)?;
    fs::create_dir_all(out)?;

    // Emitted state dimension and a closure producing one sample path. For
    // networked systems the emitted series is the sampled plant state; for
    // plain models it is the jump-model state itself.
    let seed = eff.seed;
    let state_dim: usize;
    let run_one: Box<dyn Fn(&DMatrix<f64>, u64) -> Result<(Vec<DVector<f64>>, bool), CoreError> + '_>;
    match &built {
        BuiltSystem::Networked { plant, delays, .. } => {
            let n_c = plant.n_states();
            if sim.x0.len() != n_c {
                return Err(Fail::validation(format!(
                    "simulation.x0 has {} entries; the plant has {n_c} states",
                    sim.x0.len()
                )));
            }
            state_dim = n_c;
            let x0 = DVector::from_vec(sim.x0.clone());
            let steps = sim.steps;
            run_one = Box::new(move |delta, sid| {
                let mut rng = stream(seed, StreamId::Custom(sid));
                let run = simulate_closed_loop(plant, delta, delays, &x0, steps, &mut rng)?;
                Ok((run.x_c, run.diverged))
            });
        }
        BuiltSystem::Plain(model) => {
            if sim.x0.len() != model.state_dim() {
                return Err(Fail::validation(format!(
                    "simulation.x0 has {} entries; the model state has {}",
                    sim.x0.len(),
                    model.state_dim()
                )));
            }
            state_dim = model.state_dim();
            let x0 = DVector::from_vec(sim.x0.clone());
            let steps = sim.steps;
            run_one = Box::new(move |delta, sid| {
                let mut rng = stream(seed, StreamId::Custom(sid));
                if delta.amax() == 0.0 {
                    let t = simulate(model, &x0, steps, None, &mut rng)?;
                    Ok((t.x, t.diverged))
                } else {
                    let closed = close_uncertain_loop(model, delta)?;
                    let t = simulate(&closed, &x0, steps, None, &mut rng)?;
                    Ok((t.x, t.diverged))
                }
            });
        }
    }

    let (dir_rows, dir_cols) = match &built {
        BuiltSystem::Networked { plant, .. } => (plant.n_inputs(), plant.n_states()),
        BuiltSystem::Plain(model) => (model.input_dim(), model.output_dim()),
    };
    let direction = direction_matrix(&sim, dir_rows, dir_cols)?;

    let header = {
        let comps: Vec<String> = (0..state_dim).map(|i| format!("x{i}")).collect();
        format!("run,k,{}", comps.join(","))
    };
    let mean_header = {
        let comps: Vec<String> = (0..state_dim).map(|i| format!("x{i}")).collect();
        format!("k,{},normsq", comps.join(","))
    };

    let mut delta_reports = Vec::new();
    for (di, &delta) in sim.deltas.iter().enumerate() {
        let gain = &direction * delta;
        let mut series: Vec<(Vec<DVector<f64>>, bool)> = Vec::with_capacity(sim.runs);
        for run in 0..sim.runs {
            let sid = ((di as u64) << 32) | run as u64;
            let path = run_one(&gain, sid).map_err(Fail::from)?;
            series.push(path);
        }

        // Raw trajectories (divergent runs appear truncated).
        let tag = delta_tag(delta);
        let traj_name = format!("trajectories_{tag}.csv");
        let mut rows = Vec::new();
        for (run, (xs, _)) in series.iter().enumerate() {
            for (k, x) in xs.iter().enumerate() {
                let mut row = vec![run.to_string(), k.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                rows.push(row);
            }
        }
        write_csv(&out.join(&traj_name), &header, &rows)?;

        // Mean trajectory over the runs that completed the horizon.
        let full_len = sim.steps + 1;
        let complete: Vec<&Vec<DVector<f64>>> = series
            .iter()
            .filter(|(xs, diverged)| !diverged && xs.len() == full_len)
            .map(|(xs, _)| xs)
            .collect();
        let diverged = series.len() - complete.len();
        let mean_name = format!("mean_{tag}.csv");
        let mut mean_rows = Vec::new();
        let mut normsq_series = Vec::new();
        for k in 0..full_len {
            if complete.is_empty() {
                break;
            }
            let mut acc = DVector::zeros(state_dim);
            let mut normsq = 0.0;
            for xs in &complete {
                acc += &xs[k];
                normsq += xs[k].norm_squared();
            }
            acc /= complete.len() as f64;
            normsq /= complete.len() as f64;
            normsq_series.push(normsq);
            let mut row = vec![k.to_string()];
            row.extend(acc.iter().map(|v| v.to_string()));
            row.push(normsq.to_string());
            mean_rows.push(row);
        }
        write_csv(&out.join(&mean_name), &mean_header, &mean_rows)?;

        let slope = log_slope(&normsq_series);
        delta_reports.push(json!({
            "delta": delta,
            "runs": sim.runs,
            "diverged": diverged,
            "trajectories_csv": traj_name,
            "mean_csv": mean_name,
            "log_mean_normsq_slope": slope,
            "final_mean_normsq": normsq_series.last(),
        }));
        let slope_text = match slope {
            Some(s) => format!("slope of ln E||x||^2 = {s:.4}"),
            None => "state reached zero (no decay slope to fit)".into(),
        };
        say(&format!(
            "delta {delta:+.4}: {} runs, {diverged} diverged, {slope_text}",
            sim.runs
        ));
    }

    let mut report = Report::new("simulate", sha, cfg.name.clone(), eff.seed);
    report.parameters = json!({
        "seed": eff.seed,
        "runs": sim.runs,
        "steps": sim.steps,
        "x0": sim.x0,
        "deltas": sim.deltas,
    });
    report.verdict = "ok".into();
    report.results = json!({ "deltas": delta_reports });
    report.summary = format!(
        "simulated {} uncertainty gain(s) x {} runs x {} steps; per-run and mean trajectory CSVs written beside the report",
        sim.deltas.len(),
        sim.runs,
        sim.steps,
    );
    report.finish(out)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// ncs-build
// ---------------------------------------------------------------------------

pub fn cmd_ncs_build(config_path: &Path, out: &Path) -> Result<i32, Fail> {
    let (sha, cfg) = read_config(config_path)?;
    if !matches!(cfg.system, SystemConfig::Ncs { .. }) {
        return Err(Fail::validation("ncs-build needs a `system` of type \"ncs\""));
    }
    let built = build_full(&cfg).map_err(Fail::validation)?;
    let model = built.model();
    let ChainModel::Finite(chain) = model.chain() else {
        return Err(Fail::validation(
            "ncs-build tabulates per-mode matrices, which needs a finite delay chain; interval-delay loops keep their delay dependence as smooth families — certify them directly with `grid-cert`",
        ));
    };
    let n_modes = chain.mode_count();
    let per_mode = |field: &MatrixField| -> Result<Vec<Matrix>, Fail> {
        (0..n_modes)
            .map(|i| Ok(matrix_json(&field.eval_mode(i)?)))
            .collect()
    };
    let explicit = ModelConfig {
        name: Some(format!(
            "{} (discretized jump model)",
            cfg.name.clone().unwrap_or_else(|| "networked loop".into())
        )),
        chain: cfg.chain.clone(),
        system: SystemConfig::Explicit {
            a: per_mode(model.a())?,
            b: per_mode(model.b())?,
            c: per_mode(model.c())?,
            d: None,
        },
        analysis: cfg.analysis.clone(),
        simulation: None,
    };
    let rho = spectral_radius_second_moment(model)?;

    fs::create_dir_all(out)?;
    let path = out.join("ncs-model.json");
    let mut body = serde_json::to_string_pretty(&explicit).expect("config serialization");
    body.push('\n');
    fs::write(&path, body)?;

    let mut report = Report::new("ncs-build", sha, cfg.name.clone(), 0);
    report.parameters = json!({});
    report.verdict = "ok".into();
    report.results = json!({
        "modes": n_modes,
        "state_dim": model.state_dim(),
        "input_dim": model.input_dim(),
        "output_dim": model.output_dim(),
        "second_moment_spectral_radius": rho.rho,
        "model_config": "ncs-model.json",
    });
    report.summary = format!(
        "discretized the sampled loop into a {n_modes}-mode jump model (state {}, second-moment spectral radius {:.4}); wrote ncs-model.json (the stacked state is [previous sample; current sample], so the original `simulation` section does not carry over)",
        model.state_dim(),
        rho.rho,
    );
    report.finish(out)?;
    Ok(0)
}
