//! Feasibility and attenuation-norm checks against values frozen from an
//! independent convex-optimization stack (Python/cvxpy with SCS), plus
//! certificate replay, verification, and cross-check behavior.

mod common;

use common::*;
use mjrobust_core::gridding::lift_finite;
use mjrobust_core::lmi::{
    assemble_finite_brl, assemble_gridding, assemble_gridding_reduced,
    certify_robust_stability, cross_check_lifted_certificate, hinf_norm_finite,
    solve_feasibility, verify_certificate, Certificate, CertifyMethod, CertifyOutcome,
    Feasibility, DEFAULT_MIN_MARGIN,
};
use mjrobust_core::markov::{ChainModel, FiniteChain, InitialDensity, KernelChain, KernelKind};
use mjrobust_core::matfun::min_eig;
use mjrobust_core::mjls::{MatrixField, MjlsModel};
use nalgebra::{dmatrix, DMatrix, DVector};

/// Attenuation level of the two-delay loop, frozen from the independent
/// solver (bisection to 1e-10).
const TWO_DELAY_GAMMA_STAR: f64 = 2.1578521865611613;

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

fn certify(model: &MjlsModel, gamma: f64) -> CertifyOutcome {
    certify_robust_stability(model, gamma, CertifyMethod::Finite, DEFAULT_MIN_MARGIN).unwrap()
}

#[test]
fn static_gain_norm_is_the_gain() {
    // x+ = 0, z = 1.7 w: the operator norm is exactly 1.7.
    let model = single_mode_model(0.0, 1.0, 1.7);
    let res = hinf_norm_finite(&model, 1e-4).unwrap();
    assert!(
        (res.gamma_star - 1.7f64 * 1.7).abs() < 5e-4,
        "gamma* = {}",
        res.gamma_star
    );
    assert!((res.norm - 1.7).abs() < 2e-4, "norm = {}", res.norm);
}

#[test]
fn zero_output_norm_collapses() {
    // The true norm is zero; the level collapses until the acceptance
    // margin (1e-6 on every block) caps how small gamma can get.
    let model = single_mode_model(0.5, 1.0, 0.0);
    let res = hinf_norm_finite(&model, 1e-3).unwrap();
    assert!(res.gamma_star < 1e-3, "gamma* = {}", res.gamma_star);
    assert!(res.norm < 0.04, "norm = {}", res.norm);
    assert!(res.bound > 30.0, "bound = {}", res.bound);
}

#[test]
fn two_delay_norm_matches_independent_solver() {
    let model = two_delay_model();
    let res = hinf_norm_finite(&model, 1e-3).unwrap();
    // Bisection returns the feasible endpoint of a bracket of width <= tol.
    assert!(
        (res.gamma_star - TWO_DELAY_GAMMA_STAR).abs() < 2e-3,
        "gamma* = {} vs frozen {}",
        res.gamma_star,
        TWO_DELAY_GAMMA_STAR
    );
    let bound = 1.0 / TWO_DELAY_GAMMA_STAR.sqrt();
    assert!((res.bound - bound).abs() < 1e-3, "bound = {}", res.bound);
    let cert = res.certificate.expect("feasible endpoint keeps its witness");
    assert!((cert.margin - cert.replayed_margin).abs() <= 1e-7);
    let report = verify_certificate(&model, &cert, 1).unwrap();
    assert!(report.ok, "verification failed: {:?}", report.failure);
    assert!(report.min_margin > 0.0);
}

#[test]
fn two_delay_level_bracketing_matches_independent_solver() {
    let model = two_delay_model();
    // Frozen margins: gamma = 2.2 -> +5.6e-3 (feasible), 2.0 -> -2.1e-2.
    match certify(&model, 2.2) {
        CertifyOutcome::Certified(cert) => {
            assert!(cert.margin > 1e-4, "margin {}", cert.margin);
            assert!(cert.margin < 1.0, "margin {}", cert.margin);
        }
        CertifyOutcome::NoCertificate { best_margin, .. } => {
            panic!("gamma = 2.2 must be feasible, best margin {best_margin}")
        }
    }
    match certify(&model, 2.0) {
        CertifyOutcome::NoCertificate { best_margin, .. } => {
            assert!(best_margin < 0.0, "best margin {best_margin}");
        }
        CertifyOutcome::Certified(_) => panic!("gamma = 2.0 must be infeasible"),
    }
    // Feasibility is monotone in the level.
    assert!(matches!(certify(&model, 3.0), CertifyOutcome::Certified(_)));
    assert!(matches!(certify(&model, 10.0), CertifyOutcome::Certified(_)));
    assert!(matches!(
        certify(&model, 0.5),
        CertifyOutcome::NoCertificate { .. }
    ));
}

#[test]
fn certificate_replays_bit_exactly_through_json() {
    let model = two_delay_model();
    let CertifyOutcome::Certified(cert) = certify(&model, 2.2) else {
        panic!("gamma = 2.2 must be feasible")
    };
    let json = cert.to_json().unwrap();
    let back = Certificate::from_json(&json).unwrap();
    assert_eq!(cert.variables, back.variables, "values survive JSON exactly");
    let sys = assemble_finite_brl(&model, 2.2).unwrap();
    let v1 = sys.values_from_named(&cert.variables).unwrap();
    let v2 = sys.values_from_named(&back.variables).unwrap();
    let m1 = sys.margin_at(&v1).unwrap();
    let m2 = sys.margin_at(&v2).unwrap();
    assert_eq!(m1, m2, "replayed margins identical after round-trip");
    assert!((m1 - cert.margin).abs() <= 1e-7, "replay {m1} vs {}", cert.margin);
}

#[test]
fn corrupted_certificate_fails_verification() {
    let model = two_delay_model();
    let CertifyOutcome::Certified(mut cert) = certify(&model, 2.2) else {
        panic!("gamma = 2.2 must be feasible")
    };
    for nm in cert.variables.iter_mut() {
        for v in nm.data.iter_mut() {
            *v *= 1e3;
        }
    }
    let report = verify_certificate(&model, &cert, 1).unwrap();
    assert!(!report.ok, "scaled-up witness must fail");
    assert!(report.min_margin < 0.0);
}

#[test]
fn lifted_two_delay_certificate_cross_checks_against_finite_blocks() {
    let finite = two_delay_model();
    let (lifted, grid) = lift_finite(&finite).unwrap();
    let sigmas = floor_sigmas(grid.n_cells());
    let gamma = 3.0;
    let outcome = certify_robust_stability(
        &lifted,
        gamma,
        CertifyMethod::Gridded {
            grid: &grid,
            sigmas: &sigmas,
        },
        DEFAULT_MIN_MARGIN,
    )
    .unwrap();
    let CertifyOutcome::Certified(cert) = outcome else {
        panic!("lifted system must be feasible at gamma = 3.0")
    };
    // The witness family also satisfies the original finite-chain blocks.
    let cross = cross_check_lifted_certificate(&cert, &finite, gamma).unwrap();
    assert!(cross.ok, "cross-check margin {}", cross.min_margin);
    assert!(cross.min_margin > 0.0);
    // Sampled inverse-expectation verification on the lifted model.
    let report = verify_certificate(&lifted, &cert, 3).unwrap();
    assert!(report.ok, "verification failed: {:?}", report.failure);
    // The reduced (Schur-complemented) per-cell matrices agree in sign.
    let reduced = assemble_gridding_reduced(&lifted, &grid, &sigmas, gamma);
    let mats = reduced.eval(&cert).unwrap();
    for (i, m) in mats.iter().enumerate() {
        let me = min_eig(m).unwrap();
        assert!(me > 0.0, "reduced cell {i} has min_eig {me}");
    }
    // Well-posedness margins of the slack transformations are recorded.
    let xm = cert.x_wellposed_margins.as_ref().unwrap();
    assert_eq!(xm.len(), grid.n_cells());
    assert!(xm.iter().all(|v| *v > 0.0));
}

#[test]
fn reduced_form_rejects_nonpositive_scalars() {
    let finite = two_delay_model();
    let (lifted, grid) = lift_finite(&finite).unwrap();
    let sigmas = floor_sigmas(grid.n_cells());
    let CertifyOutcome::Certified(mut cert) = certify_robust_stability(
        &lifted,
        3.0,
        CertifyMethod::Gridded {
            grid: &grid,
            sigmas: &sigmas,
        },
        DEFAULT_MIN_MARGIN,
    )
    .unwrap() else {
        panic!("lifted system must be feasible at gamma = 3.0")
    };
    let alpha0 = cert
        .variables
        .iter_mut()
        .find(|m| m.name == "alpha0")
        .unwrap();
    alpha0.data[0] = -1.0;
    let reduced = assemble_gridding_reduced(&lifted, &grid, &sigmas, 3.0);
    assert!(reduced.eval(&cert).is_err(), "negative scalar must be rejected");
}

#[test]
fn all_zero_families_are_feasible_with_floor_sigmas() {
    let chain = ChainModel::Kernel(
        KernelChain::new(0.0, 0.4, InitialDensity::Uniform, KernelKind::Tent, 200).unwrap(),
    );
    let model = MjlsModel::new(
        chain,
        MatrixField::Zero { rows: 1, cols: 1 },
        MatrixField::Zero { rows: 1, cols: 1 },
        MatrixField::Zero { rows: 1, cols: 1 },
        MatrixField::Zero { rows: 1, cols: 1 },
    )
    .unwrap();
    let grid = mjrobust_core::gridding::Grid::uniform(
        0.0,
        0.4,
        4,
        mjrobust_core::gridding::SampleRule::Midpoint,
    )
    .unwrap();
    let sigmas = floor_sigmas(4);
    let sys = assemble_gridding(&model, &grid, &sigmas, 1.0).unwrap();
    match solve_feasibility(&sys, DEFAULT_MIN_MARGIN).unwrap() {
        Feasibility::Feasible { margin, .. } => assert!(margin > 1e-3, "margin {margin}"),
        other => panic!("expected feasible, got {other:?}"),
    }
}

#[test]
fn gridded_assembly_has_expected_block_dimensions() {
    let model = interval_delay_model(200);
    let grid =
        mjrobust_core::gridding::Grid::uniform(0.0, 0.4, 5, mjrobust_core::gridding::SampleRule::Midpoint)
            .unwrap();
    let sigmas = mjrobust_core::gridding::estimate_sigmas(&model, &grid, 8, 1.05).unwrap();
    let sys = assemble_gridding(&model, &grid, &sigmas, 3.1).unwrap();
    assert_eq!(sys.blocks().len(), 5);
    // n = 2, rz = rw = 2, N = 5: 6n + 3rz + 3rw + 2nN = 12 + 6 + 6 + 20.
    assert_eq!(sys.blocks()[0].dim(), 44);
    // P0..P4 symmetric + X0..X4 + 3*5 scalars.
    assert_eq!(sys.var_count(), 5 + 5 + 15);
}
