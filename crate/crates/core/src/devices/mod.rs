//! Dynamic device models. Each device exposes an injection evaluation used by
//! the algebraic network solution and a step function that advances its own
//! states with the terminal voltage held fixed.

pub mod ibr;
pub mod load;
pub mod machine;

pub use ibr::{IbrState, dist_pv_step, ibr_step};
pub use load::{LoadAnchor, MotorMode, MotorState, composite_load_step};
pub use machine::{MachineState, machine_step};

use num_complex::Complex64;

/// Every continuous and discrete device state plus the bus voltage phasors at
/// one time point. Vectors are parallel to the case's device lists;
/// out-of-service devices carry no state.
#[derive(Debug, Clone)]
pub struct DynamicState {
    pub machines: Vec<Option<MachineState>>,
    pub plants: Vec<Option<IbrState>>,
    pub motors: Vec<MotorState>,
    pub load_anchors: Vec<LoadAnchor>,
    /// Bus voltages at the snapshot, case bus order.
    pub bus_voltage: Vec<Complex64>,
}
