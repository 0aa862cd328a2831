//! Matrix exponential by scaling-and-squaring with Pade approximants, and the
//! exponential integral `int_0^T exp(A s) ds * B` via the augmented-block
//! construction (so no quadrature error enters discretization matrices).

use crate::error::Error;
use nalgebra::DMatrix;

/// Degree-13 Pade numerator coefficients (Higham's method).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];

/// 1-norm thresholds below which each Pade degree meets double precision.
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.539398330063230e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068;
const THETA13: f64 = 5.371920351148152;

fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0_f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Evaluates the (p,p) Pade approximant given precomputed even powers of `a`.
/// Returns (U, V) with `exp(a) ~ (V - U)^{-1} (V + U)`.
fn pade_uv(
    a: &DMatrix<f64>,
    coeffs: &[f64],
    powers: &[&DMatrix<f64>],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    // Odd-index coefficients multiply odd powers (collected into U = A * ...),
    // even-index coefficients build V.
    let mut u_inner = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for (k, &c) in coeffs.iter().enumerate() {
        let half = k / 2;
        let term: DMatrix<f64> = if half == 0 {
            &id * c
        } else {
            powers[half - 1] * c
        };
        if k % 2 == 1 {
            u_inner += term;
        } else {
            v += term;
        }
    }
    (a * u_inner, v)
}

/// Matrix exponential `exp(A)` by scaling-and-squaring with Pade
/// approximation, accurate to double-precision rounding for finite inputs.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, Error> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix exponential of non-finite matrix"));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let norm = one_norm(a);
    let a2 = a * a;
    if norm <= THETA9 {
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let a8 = &a6 * &a2;
        let (coeffs, powers): (&[f64], Vec<&DMatrix<f64>>) = if norm <= THETA3 {
            (&PADE3, vec![&a2])
        } else if norm <= THETA5 {
            (&PADE5, vec![&a2, &a4])
        } else if norm <= THETA7 {
            (&PADE7, vec![&a2, &a4, &a6])
        } else {
            (&PADE9, vec![&a2, &a4, &a6, &a8])
        };
        let (u, v) = pade_uv(a, coeffs, &powers);
        return pade_solve(u, v);
    }

    // Scale A by 2^{-s} so the scaled norm fits the degree-13 threshold.
    let s = ((norm / THETA13).log2().ceil()).max(0.0) as u32;
    let scaled = a / 2f64.powi(s as i32);
    let b2 = &scaled * &scaled;
    let b4 = &b2 * &b2;
    let b6 = &b4 * &b2;

    // Degree 13 uses the factored form U = A[A6(b13 A6 + b11 A4 + b9 A2) +
    // b7 A6 + b5 A4 + b3 A2 + b1 I], V analogous with even coefficients.
    let n_id = DMatrix::<f64>::identity(n, n);
    let w1 = &b6 * PADE13[13] + &b4 * PADE13[11] + &b2 * PADE13[9];
    let w2 = &b6 * PADE13[7] + &b4 * PADE13[5] + &b2 * PADE13[3] + &n_id * PADE13[1];
    let u = &scaled * (&b6 * w1 + w2);
    let z1 = &b6 * PADE13[12] + &b4 * PADE13[10] + &b2 * PADE13[8];
    let v = &b6 * z1 + &b6 * PADE13[6] + &b4 * PADE13[4] + &b2 * PADE13[2] + &n_id * PADE13[0];

    let mut result = pade_solve(u, v)?;
    for _ in 0..s {
        result = &result * &result;
    }
    Ok(result)
}

fn pade_solve(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<DMatrix<f64>, Error> {
    let denom = &v - &u;
    let numer = &v + &u;
    denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::invalid("Pade denominator is singular"))
}

/// Exponential integral `int_0^T exp(Ac s) ds * Bc`.
///
/// Computed exactly (to rounding) from the upper-right block of the
/// exponential of the augmented matrix `[[Ac, Bc], [0, 0]] * T`.
pub fn exp_integral(
    ac: &DMatrix<f64>,
    bc: &DMatrix<f64>,
    t: f64,
) -> Result<DMatrix<f64>, Error> {
    if !ac.is_square() {
        return Err(Error::invalid("exp_integral: Ac must be square"));
    }
    let n = ac.nrows();
    let m = bc.ncols();
    if bc.nrows() != n {
        return Err(Error::invalid(format!(
            "exp_integral: Bc has {} rows, expected {n}",
            bc.nrows()
        )));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid(format!(
            "exp_integral: T must be finite and nonnegative, got {t}"
        )));
    }
    if t == 0.0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(ac * t));
    aug.view_mut((0, n), (n, m)).copy_from(&(bc * t));
    let e = expm(&aug)?;
    Ok(e.view((0, n), (n, m)).into_owned())
}
