//! Shared fixtures: the scalar networked plant with two delay values and
//! its interval-delay variant.
#![allow(dead_code)]

use mjrobust_core::gridding::{SigmaBounds, SIGMA_FLOOR};
use mjrobust_core::markov::{FiniteChain, InitialDensity, KernelChain, KernelKind};
use mjrobust_core::mjls::MjlsModel;
use mjrobust_core::ncs::{discretize, DelayModel, PlantSpec};
use nalgebra::{dmatrix, DMatrix, DVector};

/// Scalar plant `x' = 0.2 x + 0.8 u`, sampled feedback gain `-1.2`,
/// sampling period 1.
pub fn two_delay_plant() -> PlantSpec {
    PlantSpec::new(dmatrix![0.2], dmatrix![0.8], dmatrix![-1.2], 1.0).unwrap()
}

/// Two-state delay chain: stay with probability 2/3, switch with 1/3;
/// uniform start.
pub fn two_delay_chain() -> FiniteChain {
    FiniteChain::new(
        DVector::from_vec(vec![0.5, 0.5]),
        DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]),
    )
    .unwrap()
}

pub fn two_delay_delays() -> DelayModel {
    DelayModel::finite(two_delay_chain(), vec![0.1, 0.3]).unwrap()
}

/// The discretized two-delay networked loop (jump state dimension 2).
pub fn two_delay_model() -> MjlsModel {
    discretize(&two_delay_plant(), &two_delay_delays()).unwrap()
}

/// Interval delay chain on [0, 0.4]: uniform start, tent transition
/// density.
pub fn interval_delay_chain(mesh: usize) -> KernelChain {
    KernelChain::new(0.0, 0.4, InitialDensity::Uniform, KernelKind::Tent, mesh).unwrap()
}

/// The discretized interval-delay networked loop.
pub fn interval_delay_model(mesh: usize) -> MjlsModel {
    discretize(
        &two_delay_plant(),
        &DelayModel::interval(interval_delay_chain(mesh)),
    )
    .unwrap()
}

/// Floor-valued deviation bounds (exact for piecewise-constant data such as
/// lifted finite models).
pub fn floor_sigmas(n_cells: usize) -> SigmaBounds {
    SigmaBounds {
        sig_a: vec![SIGMA_FLOOR; n_cells],
        sig_b: vec![SIGMA_FLOOR; n_cells],
        sig_c: vec![SIGMA_FLOOR; n_cells],
        sig_q: vec![SIGMA_FLOOR; n_cells],
        mesh_per_cell: 1,
        safety: 1.0,
    }
}
