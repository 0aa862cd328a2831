//! Adaptive Simpson quadrature with explicit split points, so piecewise-smooth
//! integrands (kernel densities with a diagonal crease or cell jumps) are
//! integrated branch by branch.

/// Default absolute tolerance for kernel integrals.
pub const DEFAULT_TOL: f64 = 1e-10;

const MAX_DEPTH: u32 = 60;

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`, first splitting
/// the interval at every interior point of `splits` (where the integrand may
/// kink or jump) and then adapting within each smooth segment.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64, splits: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    debug_assert!(a < b, "adaptive_simpson: a < b required");
    let mut cuts: Vec<f64> = splits
        .iter()
        .copied()
        .filter(|&x| x > a && x < b)
        .collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();

    let mut boundaries = Vec::with_capacity(cuts.len() + 2);
    boundaries.push(a);
    boundaries.extend(cuts);
    boundaries.push(b);

    let total_len = b - a;
    let mut sum = 0.0;
    for w in boundaries.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let seg_tol = (tol * (hi - lo) / total_len).max(f64::MIN_POSITIVE);
        let flo = f(lo);
        let fhi = f(hi);
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        let whole = simpson(lo, hi, flo, fmid, fhi);
        sum += adapt(&f, lo, hi, flo, fmid, fhi, whole, seg_tol, MAX_DEPTH);
    }
    sum
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adapt<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let refined = left + right;
    if depth == 0 || (refined - whole).abs() <= 15.0 * tol {
        return refined + (refined - whole) / 15.0;
    }
    adapt(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adapt(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
