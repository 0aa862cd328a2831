//! Oracle-backed tests for the symmetric-matrix utilities.
//!
//! Independent oracles used here:
//! - a hand-rolled cyclic Jacobi-rotation eigensolver (no shared code with
//!   the library's eigenvalue path) for `min_eig` / `spectral_norm`;
//! - composite Simpson quadrature over matrix-exponential samples for
//!   `exp_integral`;
//! - scalar closed forms and the semigroup law for `expm`;
//! - direct assembly + eigenvalue checks for the block-reduction
//!   equivalences.

mod common;

use common::{floor_sigmas, interval_delay_model};
use mjrobust_core::gridding::{Grid, SampleRule};
use mjrobust_core::lmi::{certify_robust_stability, CertifyMethod, CertifyOutcome, DEFAULT_MIN_MARGIN};
use mjrobust_core::matfun::{
    assemble_block2, check_schur_equivalence, exp_integral, expm, is_uniformly_positive, min_eig,
    schur_reduce, spectral_norm, ModeFamily, SchurDirection, Support,
};
use nalgebra::{dmatrix, DMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi eigensolver: rotates away off-diagonal mass until
/// convergence and returns the diagonal. Deliberately independent of the
/// library's symmetric-eigenvalue routine.
fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _ in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() < 1e-15 * (1.0 + a.norm()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

fn random_symmetric(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
    (&raw + raw.transpose()) * 0.5
}

fn random_pd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let w = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &w * w.transpose() + DMatrix::identity(n, n) * 0.1
}

#[test]
fn min_eig_identity_and_diagonal() {
    assert!((min_eig(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-12);
    assert!((min_eig(&dmatrix![2.0, 0.0; 0.0, -1.0]).unwrap() + 1.0).abs() < 1e-12);
}

#[test]
fn min_eig_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let m = random_symmetric(&mut rng, 5);
        let ours = min_eig(&m).unwrap();
        let oracle = jacobi_eigenvalues(&m)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(
            (ours - oracle).abs() < 1e-9,
            "min_eig {ours} vs Jacobi {oracle}"
        );
    }
}

#[test]
fn spectral_norm_matches_jacobi_on_gram_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let m = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-2.0..2.0));
        let ours = spectral_norm(&m);
        let gram = m.transpose() * &m;
        let oracle = jacobi_eigenvalues(&gram)
            .into_iter()
            .fold(0.0f64, f64::max)
            .max(0.0)
            .sqrt();
        assert!(
            (ours - oracle).abs() < 1e-9,
            "spectral_norm {ours} vs Jacobi {oracle}"
        );
    }
}

#[test]
fn uniform_positivity_trivial_families() {
    let fam = ModeFamily::per_mode(vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0])
        .unwrap();
    assert!(is_uniformly_positive(&fam, 0.5).unwrap());
    let fam = ModeFamily::per_mode(vec![DMatrix::identity(2, 2), dmatrix![1.0, 0.0; 0.0, 0.0]])
        .unwrap();
    assert!(!is_uniformly_positive(&fam, 0.1).unwrap());
}

/// The solved interval-delay certificate's `P` family is uniformly positive
/// at the solver's own margin: each `P_i` sits on the diagonal of a
/// constraint block, so the block margin lower-bounds every `P_i` eigenvalue.
#[test]
fn certified_p_family_is_uniformly_positive_at_the_margin() {
    let model = interval_delay_model(400);
    let grid = Grid::uniform(0.0, 0.4, 20, SampleRule::Midpoint).unwrap();
    let sigmas = mjrobust_core::gridding::estimate_sigmas(&model, &grid, 65, 1.0).unwrap();
    let outcome = certify_robust_stability(
        &model,
        3.1,
        CertifyMethod::Gridded {
            grid: &grid,
            sigmas: &sigmas,
        },
        DEFAULT_MIN_MARGIN,
    )
    .unwrap();
    let CertifyOutcome::Certified(cert) = outcome else {
        panic!("expected a certificate at gamma = 3.1");
    };
    let family = ModeFamily::new(
        cert.p_matrices().unwrap(),
        Support::Cells(grid.points().to_vec()),
    )
    .unwrap();
    assert!(is_uniformly_positive(&family, cert.margin).unwrap());
    // Keep the floor-sigma helper exercised from this test crate too.
    let _ = floor_sigmas(20);
}

#[test]
fn schur_reduce_hand_cases() {
    let i2 = DMatrix::identity(2, 2);
    let red = schur_reduce(
        &i2,
        &DMatrix::zeros(2, 2),
        &DMatrix::identity(2, 2),
        SchurDirection::Lower,
    )
    .unwrap();
    assert!((red - &i2).amax() < 1e-14);

    // [[2,0],[0,2]] - [1,0]^T [1]^{-1} [1,0] = [[1,0],[0,2]].
    let red = schur_reduce(
        &dmatrix![2.0, 0.0; 0.0, 2.0],
        &dmatrix![1.0; 0.0],
        &dmatrix![1.0],
        SchurDirection::Lower,
    )
    .unwrap();
    assert!((red - dmatrix![1.0, 0.0; 0.0, 2.0]).amax() < 1e-14);
}

/// For positive definite pivots the reduction carries definiteness both
/// ways: the assembled block matrix is positive definite iff the pivot and
/// the reduced complement both are.
#[test]
fn schur_reduction_tracks_block_definiteness() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..60 {
        let n = 2 + (trial % 3);
        let m = 1 + (trial % 2);
        let p1 = random_pd(&mut rng, n);
        let p3 = random_pd(&mut rng, m);
        let p2 = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.5..1.5));
        let block = assemble_block2(&p1, &p2, &p3);
        let block_pd = min_eig(&block).unwrap() > 0.0;
        let red = schur_reduce(&p1, &p2, &p3, SchurDirection::Lower).unwrap();
        let red_pd = min_eig(&red).unwrap() > 0.0;
        assert_eq!(block_pd, red_pd, "trial {trial}");
    }
}

#[test]
fn schur_equivalence_trivial_and_singular() {
    let two = DMatrix::identity(2, 2) * 2.0;
    let one = DMatrix::identity(2, 2);
    let p1 = ModeFamily::per_mode(vec![two.clone()]).unwrap();
    let p2 = ModeFamily::per_mode(vec![one.clone()]).unwrap();
    let p3 = ModeFamily::per_mode(vec![two.clone()]).unwrap();
    // Block [[2I, I], [I, 2I]] has eigenvalues 1 and 3.
    let report = check_schur_equivalence(&p1, &p2, &p3, 1e-9).unwrap();
    assert!(report.i_holds && report.ii_holds && report.iii_holds);

    // A singular pivot fails all three equivalent conditions.
    let p1 = ModeFamily::per_mode(vec![DMatrix::identity(2, 2)]).unwrap();
    let p2 = ModeFamily::per_mode(vec![DMatrix::zeros(2, 1)]).unwrap();
    let p3 = ModeFamily::per_mode(vec![dmatrix![0.0]]).unwrap();
    let report = check_schur_equivalence(&p1, &p2, &p3, 1e-9).unwrap();
    assert!(!report.i_holds && !report.ii_holds && !report.iii_holds);
}

#[test]
fn exp_integral_scalar_closed_forms() {
    // A = 0: the integrand is the identity, so the integral is T * B.
    let w = exp_integral(&dmatrix![0.0], &dmatrix![1.0], 2.0).unwrap();
    assert!((w[(0, 0)] - 2.0).abs() < 1e-12);

    // Scalar antiderivative: int_0^T e^{a s} ds * b = b (e^{aT} - 1) / a.
    let w = exp_integral(&dmatrix![0.2], &dmatrix![0.8], 1.0).unwrap();
    let oracle = 0.8 * ((0.2f64).exp() - 1.0) / 0.2;
    assert!((w[(0, 0)] - oracle).abs() < 1e-12);
}

#[test]
fn exp_integral_matches_composite_simpson() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..6 {
        // Random Hurwitz-leaning 3x3 (diagonal pulled negative).
        let mut a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..3 {
            a[(i, i)] -= 1.5;
        }
        let b = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let t_end = rng.gen_range(0.3..1.2);
        let ours = exp_integral(&a, &b, t_end).unwrap();

        // Composite Simpson over matrix-exponential samples.
        let panels = 400; // even number of sub-intervals
        let h = t_end / panels as f64;
        let mut acc = DMatrix::zeros(3, 3);
        for k in 0..=panels {
            let w = if k == 0 || k == panels {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += expm(&(&a * (h * k as f64))).unwrap() * w;
        }
        let oracle = acc * (h / 3.0) * &b;
        assert!(
            (&ours - &oracle).amax() < 1e-8,
            "exp_integral deviates from Simpson by {}",
            (&ours - &oracle).amax()
        );
    }
}

#[test]
fn expm_semigroup_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    assert!((expm(&DMatrix::zeros(3, 3)).unwrap() - DMatrix::identity(3, 3)).amax() < 1e-15);
    for _ in 0..10 {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let s = rng.gen_range(0.1..0.8);
        let t = rng.gen_range(0.1..0.8);
        let whole = expm(&(&a * (s + t))).unwrap();
        let split = expm(&(&a * s)).unwrap() * expm(&(&a * t)).unwrap();
        assert!(
            (&whole - &split).amax() < 1e-12 * (1.0 + whole.amax()),
            "semigroup violation {}",
            (&whole - &split).amax()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Uniform positivity of a family is exactly "every piece clears the
    /// margin eigenvalue-wise".
    #[test]
    fn uniform_positivity_matches_piecewise_eigenvalues(
        seed in 0u64..1u64 << 48,
        xi in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pieces: Vec<DMatrix<f64>> =
            (0..3).map(|_| random_symmetric(&mut rng, 3)).collect();
        let fam = ModeFamily::per_mode(pieces.clone()).unwrap();
        let expected = pieces
            .iter()
            .all(|p| min_eig(p).unwrap() >= xi);
        prop_assert_eq!(is_uniformly_positive(&fam, xi).unwrap(), expected);
    }

    /// The three block-positivity conditions agree on random families.
    #[test]
    fn schur_conditions_agree(seed in 0u64..1u64 << 48) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |rng: &mut ChaCha8Rng, pd: bool, n: usize| -> DMatrix<f64> {
            if pd { random_pd(rng, n) } else { random_symmetric(rng, n) }
        };
        let pd = rng.gen_bool(0.5);
        let p1s: Vec<_> = (0..2).map(|_| make(&mut rng, pd, 3)).collect();
        let p3s: Vec<_> = (0..2).map(|_| make(&mut rng, pd, 2)).collect();
        let p2s: Vec<_> = (0..2)
            .map(|_| DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-0.4..0.4)))
            .collect();
        let report = check_schur_equivalence(
            &ModeFamily::per_mode(p1s).unwrap(),
            &ModeFamily::per_mode(p2s).unwrap(),
            &ModeFamily::per_mode(p3s).unwrap(),
            1e-9,
        )
        .unwrap();
        prop_assert_eq!(report.i_holds, report.ii_holds);
        prop_assert_eq!(report.ii_holds, report.iii_holds);
    }
}
