//! Sampled-data control over a network with random input delays.
//!
//! A continuous-time plant `x'_c = A_c x_c + B_c u` is sampled every `L`
//! time units. The control computed at sampling instant `kL` reaches the
//! actuator after a random delay `tau_k in [0, L)`, so over one period the
//! input is the *previous* control until `kL + tau_k` and the new one
//! afterwards. Stacking `x_d(k) = [x_c((k-1)L); x_c(kL)]` yields a jump
//! linear system whose jump variable is the delay, with state matrix
//!
//! ```text
//! A_d(tau) = [ 0          I                 ]
//!            [ W_1(tau) K  e^{A_c L} + W_2(tau) K ]
//! ```
//!
//! and disturbance-gain structure `B_d(tau) = [[0, 0], [W_1, W_2]]`,
//! `C_d = I`, zero feedthrough, where an uncertain controller `K + Delta`
//! closes the loop through the repeated gain `diag(Delta, Delta)`.

use crate::error::Error;
use crate::markov::{ChainModel, ChainState, FiniteChain, KernelChain};
use crate::matfun::{exp_integral, expm};
use crate::mjls::{close_uncertain_loop, simulate, MatrixField, MjlsModel, SmoothField};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// A continuous-time plant with a sampled state-feedback gain.
#[derive(Debug, Clone)]
pub struct PlantSpec {
    a_c: DMatrix<f64>,
    b_c: DMatrix<f64>,
    k_gain: DMatrix<f64>,
    period: f64,
}

impl PlantSpec {
    /// `a_c`: `n_c x n_c` drift, `b_c`: `n_c x m` input map, `k_gain`:
    /// `m x n_c` feedback gain applied to sampled states, `period`: the
    /// sampling interval `L > 0`.
    pub fn new(
        a_c: DMatrix<f64>,
        b_c: DMatrix<f64>,
        k_gain: DMatrix<f64>,
        period: f64,
    ) -> Result<Self, Error> {
        if !a_c.is_square() {
            return Err(Error::invalid("plant drift matrix must be square"));
        }
        let n_c = a_c.nrows();
        if b_c.nrows() != n_c {
            return Err(Error::invalid(format!(
                "input map has {} rows for a {n_c}-state plant",
                b_c.nrows()
            )));
        }
        let m = b_c.ncols();
        if k_gain.shape() != (m, n_c) {
            return Err(Error::invalid(format!(
                "feedback gain must be {m}x{n_c}, got {}x{}",
                k_gain.nrows(),
                k_gain.ncols()
            )));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::invalid("sampling period must be positive and finite"));
        }
        if a_c.iter().chain(b_c.iter()).chain(k_gain.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("plant matrices must be finite"));
        }
        Ok(PlantSpec {
            a_c,
            b_c,
            k_gain,
            period,
        })
    }

    pub fn n_states(&self) -> usize {
        self.a_c.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_c.ncols()
    }

    pub fn a_c(&self) -> &DMatrix<f64> {
        &self.a_c
    }

    pub fn b_c(&self) -> &DMatrix<f64> {
        &self.b_c
    }

    pub fn k_gain(&self) -> &DMatrix<f64> {
        &self.k_gain
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// The open-loop one-period transition `e^{A_c L}`.
    pub fn state_transition(&self) -> Result<DMatrix<f64>, Error> {
        expm(&(&self.a_c * self.period))
    }
}

/// Random delay model: a chain over delay values with support in `[0, L)`.
#[derive(Debug, Clone)]
pub enum DelayModel {
    /// Finitely many delay values; the chain jumps between them.
    Finite {
        chain: FiniteChain,
        delays: Vec<f64>,
    },
    /// Delays on a real interval with a transition density.
    Interval(KernelChain),
}

impl DelayModel {
    pub fn finite(chain: FiniteChain, delays: Vec<f64>) -> Result<Self, Error> {
        if delays.len() != chain.mode_count() {
            return Err(Error::invalid(format!(
                "{} delay values for {} chain modes",
                delays.len(),
                chain.mode_count()
            )));
        }
        if delays.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("delay values must be finite"));
        }
        Ok(DelayModel::Finite { chain, delays })
    }

    pub fn interval(chain: KernelChain) -> Self {
        DelayModel::Interval(chain)
    }

    fn check_support(&self, period: f64) -> Result<(), Error> {
        match self {
            DelayModel::Finite { delays, .. } => {
                for &t in delays {
                    if !(0.0..period).contains(&t) {
                        return Err(Error::invalid(format!(
                            "delay {t} outside [0, {period})"
                        )));
                    }
                }
            }
            DelayModel::Interval(chain) => {
                let (a, b) = chain.interval();
                if a < 0.0 || b >= period {
                    return Err(Error::invalid(format!(
                        "delay interval [{a}, {b}] not contained in [0, {period})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The within-period input-splitting matrices at delay `tau`:
///
/// * `W_1(tau) = e^{A_c (L - tau)} * int_0^tau e^{A_c s} ds * B_c` — the
///   reach of the *old* control held on `[kL, kL + tau)`;
/// * `W_2(tau) = int_0^{L - tau} e^{A_c s} ds * B_c` — the reach of the
///   *new* control on `[kL + tau, (k+1)L)`.
pub fn w_matrices(plant: &PlantSpec, tau: f64) -> Result<(DMatrix<f64>, DMatrix<f64>), Error> {
    let l = plant.period;
    if !tau.is_finite() || !(0.0..l).contains(&tau) {
        return Err(Error::invalid(format!("delay {tau} outside [0, {l})")));
    }
    let carry = expm(&(&plant.a_c * (l - tau)))?;
    let w1 = carry * exp_integral(&plant.a_c, &plant.b_c, tau)?;
    let w2 = exp_integral(&plant.a_c, &plant.b_c, l - tau)?;
    Ok((w1, w2))
}

fn stack_a(plant: &PlantSpec, tau: f64) -> Result<DMatrix<f64>, Error> {
    let n_c = plant.n_states();
    let (w1, w2) = w_matrices(plant, tau)?;
    let e_al = plant.state_transition()?;
    let mut a = DMatrix::zeros(2 * n_c, 2 * n_c);
    a.view_mut((0, n_c), (n_c, n_c))
        .copy_from(&DMatrix::identity(n_c, n_c));
    a.view_mut((n_c, 0), (n_c, n_c))
        .copy_from(&(&w1 * &plant.k_gain));
    a.view_mut((n_c, n_c), (n_c, n_c))
        .copy_from(&(e_al + &w2 * &plant.k_gain));
    Ok(a)
}

fn stack_b(plant: &PlantSpec, tau: f64) -> Result<DMatrix<f64>, Error> {
    let n_c = plant.n_states();
    let m = plant.n_inputs();
    let (w1, w2) = w_matrices(plant, tau)?;
    let mut b = DMatrix::zeros(2 * n_c, 2 * m);
    b.view_mut((n_c, 0), (n_c, m)).copy_from(&w1);
    b.view_mut((n_c, m), (n_c, m)).copy_from(&w2);
    Ok(b)
}

/// Discretizes the networked loop into a jump linear model over the delay
/// chain: state `[x_c((k-1)L); x_c(kL)]`, uncertainty input entering
/// through `[[0,0],[W_1,W_2]]`, full-state uncertainty output (`C = I`,
/// no feedthrough). Gain perturbations `Delta` on the controller act
/// through the repeated structure `diag(Delta, Delta)`.
pub fn discretize(plant: &PlantSpec, delays: &DelayModel) -> Result<MjlsModel, Error> {
    delays.check_support(plant.period)?;
    let n_c = plant.n_states();
    let m = plant.n_inputs();
    let n = 2 * n_c;
    match delays {
        DelayModel::Finite { chain, delays } => {
            let a = delays
                .iter()
                .map(|&t| stack_a(plant, t))
                .collect::<Result<Vec<_>, _>>()?;
            let b = delays
                .iter()
                .map(|&t| stack_b(plant, t))
                .collect::<Result<Vec<_>, _>>()?;
            MjlsModel::new(
                ChainModel::Finite(chain.clone()),
                MatrixField::PerMode(a),
                MatrixField::PerMode(b),
                MatrixField::PerMode(vec![DMatrix::identity(n, n); delays.len()]),
                MatrixField::Zero {
                    rows: n,
                    cols: 2 * m,
                },
            )
        }
        DelayModel::Interval(chain) => {
            let (lo, hi) = chain.interval();
            let pa = plant.clone();
            let pb = plant.clone();
            MjlsModel::new(
                ChainModel::Kernel(chain.clone()),
                MatrixField::Smooth(SmoothField::new(n, n, move |tau| {
                    stack_a(&pa, tau).expect("delay within the sampling period")
                })),
                MatrixField::Smooth(SmoothField::new(n, 2 * m, move |tau| {
                    stack_b(&pb, tau).expect("delay within the sampling period")
                })),
                MatrixField::PiecewiseCells {
                    breaks: vec![lo, hi],
                    pieces: vec![DMatrix::identity(n, n)],
                },
                MatrixField::Zero {
                    rows: n,
                    cols: 2 * m,
                },
            )
        }
    }
}

/// One closed-loop sample path.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    /// Sampled plant states `x_c(0), x_c(L), ..., x_c(KL)` (shorter if the
    /// run diverged).
    pub x_c: Vec<DVector<f64>>,
    /// Stacked jump states `x_d(1), ..., x_d(K)`.
    pub x_d: Vec<DVector<f64>>,
    /// Delay states driving each transition.
    pub states: Vec<ChainState>,
    pub diverged: bool,
}

/// Simulates the sampled closed loop under the perturbed controller
/// `K + delta` for `steps` sampling periods from plant state `x0`.
///
/// The first period has no control history, so it is propagated open-loop
/// outside the jump recursion: `x_d(1) = [x0; e^{A_c L} x0]`. Subsequent
/// periods follow the jump model with the uncertainty loop closed through
/// `diag(delta, delta)`.
pub fn simulate_closed_loop<R: Rng + ?Sized>(
    plant: &PlantSpec,
    delta: &DMatrix<f64>,
    delays: &DelayModel,
    x0: &DVector<f64>,
    steps: usize,
    rng: &mut R,
) -> Result<ClosedLoopRun, Error> {
    let n_c = plant.n_states();
    let m = plant.n_inputs();
    if delta.shape() != (m, n_c) {
        return Err(Error::invalid(format!(
            "controller perturbation must be {m}x{n_c}, got {}x{}",
            delta.nrows(),
            delta.ncols()
        )));
    }
    if x0.len() != n_c {
        return Err(Error::invalid(format!(
            "initial plant state has length {}, expected {n_c}",
            x0.len()
        )));
    }
    if steps == 0 {
        return Err(Error::invalid("need at least one sampling period"));
    }
    let open = discretize(plant, delays)?;
    let mut stacked = DMatrix::zeros(2 * m, 2 * n_c);
    stacked.view_mut((0, 0), (m, n_c)).copy_from(delta);
    stacked.view_mut((m, n_c), (m, n_c)).copy_from(delta);
    let closed = close_uncertain_loop(&open, &stacked)?;
    let e_al = plant.state_transition()?;
    let mut xd1 = DVector::zeros(2 * n_c);
    xd1.rows_mut(0, n_c).copy_from(x0);
    xd1.rows_mut(n_c, n_c).copy_from(&(&e_al * x0));
    let traj = simulate(&closed, &xd1, steps - 1, None, rng)?;
    let mut x_c = Vec::with_capacity(traj.x.len() + 1);
    x_c.push(x0.clone());
    for xd in &traj.x {
        x_c.push(xd.rows(n_c, n_c).clone_owned());
    }
    Ok(ClosedLoopRun {
        x_c,
        x_d: traj.x,
        states: traj.states,
        diverged: traj.diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::rng::{stream, StreamId};
    use nalgebra::dmatrix;

    fn scalar_plant() -> PlantSpec {
        PlantSpec::new(dmatrix![0.2], dmatrix![0.8], dmatrix![-1.2], 1.0).unwrap()
    }

    fn two_delay_model() -> DelayModel {
        let chain = FiniteChain::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]),
        )
        .unwrap();
        DelayModel::finite(chain, vec![0.1, 0.3]).unwrap()
    }

    #[test]
    fn zero_delay_kills_the_carry_term() {
        let plant = scalar_plant();
        let (w1, w2) = w_matrices(&plant, 0.0).unwrap();
        assert!(w1.amax() < 1e-14);
        // W_2(0) = int_0^1 e^{0.2 s} ds * 0.8 = 0.8 (e^0.2 - 1) / 0.2.
        let expected = 0.8 * (0.2f64.exp() - 1.0) / 0.2;
        assert!((w2[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn scalar_carry_matches_closed_form() {
        let plant = scalar_plant();
        let (w1, _) = w_matrices(&plant, 0.1).unwrap();
        // e^{0.2*0.9} * (e^{0.2*0.1} - 1)/0.2 * 0.8 = 4 (e^0.2 - e^0.18).
        let expected = 4.0 * (0.2f64.exp() - 0.18f64.exp());
        assert!((w1[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn delay_outside_period_is_rejected() {
        let plant = scalar_plant();
        assert!(w_matrices(&plant, 1.0).is_err());
        assert!(w_matrices(&plant, -0.1).is_err());
        assert!(w_matrices(&plant, 0.999999).is_ok());
    }

    #[test]
    fn open_loop_discretization_is_block_triangular() {
        let plant = PlantSpec::new(dmatrix![0.2], dmatrix![0.8], dmatrix![0.0], 1.0).unwrap();
        let model = discretize(&plant, &two_delay_model()).unwrap();
        for i in 0..2 {
            let a = model.a().eval_mode(i).unwrap();
            assert!((a[(0, 0)]).abs() < 1e-14);
            assert!((a[(0, 1)] - 1.0).abs() < 1e-14);
            assert!((a[(1, 0)]).abs() < 1e-14, "no feedback when K = 0");
            assert!((a[(1, 1)] - 0.2f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn discretized_dimensions_and_structure() {
        let plant = scalar_plant();
        let model = discretize(&plant, &two_delay_model()).unwrap();
        assert_eq!(model.state_dim(), 2);
        assert_eq!(model.input_dim(), 2);
        assert_eq!(model.output_dim(), 2);
        for i in 0..2 {
            let b = model.b().eval_mode(i).unwrap();
            assert!(b.view((0, 0), (1, 2)).amax() < 1e-14, "top row of B is zero");
            let c = model.c().eval_mode(i).unwrap();
            assert!((c - DMatrix::identity(2, 2)).amax() < 1e-14);
        }
    }

    #[test]
    fn closed_loop_first_step_is_open_loop() {
        let plant = scalar_plant();
        let delays = two_delay_model();
        let mut rng = stream(7, StreamId::ChainPath);
        let x0 = DVector::from_vec(vec![-2.0]);
        let run =
            simulate_closed_loop(&plant, &dmatrix![0.0], &delays, &x0, 3, &mut rng).unwrap();
        assert_eq!(run.x_c.len(), 4);
        assert!((run.x_c[0][0] + 2.0).abs() < 1e-14);
        // x_c(L) is open-loop: e^{0.2} * (-2).
        assert!((run.x_c[1][0] + 2.0 * 0.2f64.exp()).abs() < 1e-12);
        assert_eq!(run.x_d.len(), 3);
        assert!(!run.diverged);
    }

    #[test]
    fn interval_delays_discretize_smoothly() {
        let plant = scalar_plant();
        let chain = KernelChain::new(
            0.0,
            0.4,
            crate::markov::InitialDensity::Uniform,
            crate::markov::KernelKind::Tent,
            200,
        )
        .unwrap();
        let model = discretize(&plant, &DelayModel::interval(chain)).unwrap();
        let a_mid = model.a().eval_point(0.2).unwrap();
        let (w1, w2) = w_matrices(&plant, 0.2).unwrap();
        assert!((a_mid[(1, 0)] - w1[(0, 0)] * -1.2).abs() < 1e-12);
        assert!(
            (a_mid[(1, 1)] - (0.2f64.exp() + w2[(0, 0)] * -1.2)).abs() < 1e-12
        );
    }
}
