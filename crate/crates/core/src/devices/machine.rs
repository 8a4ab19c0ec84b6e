//! Two-axis synchronous machine with a first-order exciter and a droop
//! governor with servo lag.
//!
//! All machine quantities are per-unit on the machine MVA base. The stator is
//! resistanceless; with the rotor at angle `delta` the d-q frame maps through
//! `e^{j(delta - pi/2)}` and the algebraic stator equations are
//!
//! ```text
//! vd = Ed' + xq'*iq          id = (Eq' - vq) / xd'
//! vq = Eq' - xd'*id          iq = (vd - Ed') / xq'
//! ```
//!
//! The network solver carries each machine as a Norton admittance
//! `1/(j xd')` stamped into the bus matrix; [`norton_injection`] returns the
//! matching compensated current so the exact (salient) stator solution is
//! recovered at the fixed point.

use num_complex::Complex64;

use crate::case::SyncMachine;
use crate::{PowerFlowError, SimError};

/// Speed-deviation guard; beyond this the simulation is declared diverged.
pub const OMEGA_GUARD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineState {
    /// Rotor angle, rad (network reference frame).
    pub delta: f64,
    /// Speed deviation, pu of synchronous speed.
    pub omega: f64,
    /// q-axis transient voltage, pu.
    pub eq_p: f64,
    /// d-axis transient voltage, pu.
    pub ed_p: f64,
    /// Field voltage, pu.
    pub efd: f64,
    /// Mechanical power, pu on machine base.
    pub pm: f64,
    /// Governor power reference, pu.
    pub pref: f64,
    /// Exciter voltage reference, pu.
    pub vref: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MachineDeriv {
    pub delta: f64,
    pub omega: f64,
    pub eq_p: f64,
    pub ed_p: f64,
    pub efd: f64,
    pub pm: f64,
}

impl MachineDeriv {
    pub fn max_abs(&self) -> f64 {
        [self.delta, self.omega, self.eq_p, self.ed_p, self.efd, self.pm]
            .into_iter()
            .fold(0.0_f64, |m, d| m.max(d.abs()))
    }
}

fn rotation(delta: f64) -> Complex64 {
    Complex64::from_polar(1.0, delta - std::f64::consts::FRAC_PI_2)
}

/// Terminal voltage and currents resolved onto the rotor d-q frame.
fn stator_algebra(m: &SyncMachine, state: &MachineState, v_term: Complex64) -> (f64, f64, f64, f64) {
    let rot = rotation(state.delta);
    let v_dq = v_term * rot.conj();
    let (vd, vq) = (v_dq.re, v_dq.im);
    let id = (state.eq_p - vq) / m.xd_p;
    let iq = (vd - state.ed_p) / m.xq_p;
    (vd, vq, id, iq)
}

/// Stator current injected into the network, machine-base pu, network frame.
pub fn terminal_current(m: &SyncMachine, state: &MachineState, v_term: Complex64) -> Complex64 {
    let (_, _, id, iq) = stator_algebra(m, state, v_term);
    Complex64::new(id, iq) * rotation(state.delta)
}

/// Air-gap electrical power, machine-base pu.
pub fn electrical_power(m: &SyncMachine, state: &MachineState, v_term: Complex64) -> f64 {
    let (vd, vq, id, iq) = stator_algebra(m, state, v_term);
    vd * id + vq * iq
}

/// Norton admittance carried in the network matrix for this machine: the
/// mean of the two transient-axis admittances. Any value is exact at the
/// fixed point (the paired injection compensates); the mean minimizes the
/// leftover saliency sensitivity that sets the network-iteration contraction.
pub fn norton_admittance(m: &SyncMachine) -> Complex64 {
    Complex64::new(0.0, -0.5 * (1.0 / m.xd_p + 1.0 / m.xq_p))
}

/// Current source paired with [`norton_admittance`]: the exact stator current
/// plus the admittance compensation, so that
/// `terminal_current = norton_injection - Y_norton * V`.
pub fn norton_injection(m: &SyncMachine, state: &MachineState, v_term: Complex64) -> Complex64 {
    terminal_current(m, state, v_term) + norton_admittance(m) * v_term
}

/// Time derivatives of the continuous states at the given terminal voltage.
pub fn machine_rhs(m: &SyncMachine, state: &MachineState, v_term: Complex64, omega_s: f64) -> MachineDeriv {
    let (_, _, id, iq) = stator_algebra(m, state, v_term);
    let pe = electrical_power(m, state, v_term);
    let gov = m.governor.clone();
    let exc = m.exciter.clone();
    let pm_target = (state.pref - state.omega / gov.r).clamp(0.0, gov.p_max);
    let efd_target = (exc.ka * (state.vref - v_term.norm())).clamp(exc.efd_min, exc.efd_max);
    MachineDeriv {
        delta: omega_s * state.omega,
        omega: (state.pm - pe - m.d * state.omega) / (2.0 * m.h),
        eq_p: (-state.eq_p - (m.xd - m.xd_p) * id + state.efd) / m.td0_p,
        ed_p: (-state.ed_p + (m.xq - m.xq_p) * iq) / m.tq0_p,
        efd: (efd_target - state.efd) / exc.ta,
        pm: (pm_target - state.pm) / gov.tg,
    }
}

fn add_scaled(state: &MachineState, d: &MachineDeriv, h: f64) -> MachineState {
    MachineState {
        delta: state.delta + h * d.delta,
        omega: state.omega + h * d.omega,
        eq_p: state.eq_p + h * d.eq_p,
        ed_p: state.ed_p + h * d.ed_p,
        efd: state.efd + h * d.efd,
        pm: state.pm + h * d.pm,
        pref: state.pref,
        vref: state.vref,
    }
}

/// Advance one step (RK2 midpoint) holding the terminal voltage fixed.
/// Returns the new state and the stator current at the new state.
pub fn machine_step(
    m: &SyncMachine,
    state: &MachineState,
    v_term: Complex64,
    dt: f64,
    omega_s: f64,
) -> Result<(MachineState, Complex64), SimError> {
    let k1 = machine_rhs(m, state, v_term, omega_s);
    let mid = add_scaled(state, &k1, 0.5 * dt);
    let k2 = machine_rhs(m, &mid, v_term, omega_s);
    let mut next = add_scaled(state, &k2, dt);
    next.efd = next.efd.clamp(m.exciter.efd_min, m.exciter.efd_max);
    next.pm = next.pm.clamp(0.0, m.governor.p_max);
    if !next.omega.is_finite() || next.omega.abs() >= OMEGA_GUARD {
        return Err(SimError::DeviceDiverged {
            device: m.id.clone(),
            t: f64::NAN, // caller stamps the time
            reason: format!("speed deviation {:.4} pu beyond guard", next.omega),
        });
    }
    let i = terminal_current(m, &next, v_term);
    Ok((next, i))
}

/// Back-solve the unique equilibrium consistent with the terminal voltage and
/// complex power output (machine-base pu, generation positive).
pub fn init_machine(
    m: &SyncMachine,
    v_term: Complex64,
    s_out: Complex64,
) -> Result<MachineState, PowerFlowError> {
    let vmag = v_term.norm();
    if vmag < 1e-6 {
        return Err(PowerFlowError::InfeasibleEquilibrium {
            device: m.id.clone(),
            reason: "terminal voltage is zero".into(),
        });
    }
    let i_term = (s_out / v_term).conj();
    // The rotor q-axis lies along V + j xq I.
    let delta = (v_term + Complex64::new(0.0, m.xq) * i_term).arg();
    let rot = rotation(delta);
    let v_dq = v_term * rot.conj();
    let i_dq = i_term * rot.conj();
    let (vd, vq) = (v_dq.re, v_dq.im);
    let (id, iq) = (i_dq.re, i_dq.im);
    let eq_p = vq + m.xd_p * id;
    let ed_p = vd - m.xq_p * iq;
    let efd = eq_p + (m.xd - m.xd_p) * id;
    if efd > m.exciter.efd_max || efd < m.exciter.efd_min {
        return Err(PowerFlowError::InfeasibleEquilibrium {
            device: m.id.clone(),
            reason: format!(
                "required Efd {:.3} outside [{}, {}]",
                efd, m.exciter.efd_min, m.exciter.efd_max
            ),
        });
    }
    let pm = vd * id + vq * iq;
    if pm < -1e-9 || pm > m.governor.p_max + 1e-9 {
        return Err(PowerFlowError::InfeasibleEquilibrium {
            device: m.id.clone(),
            reason: format!("required Pm {:.3} outside [0, {}]", pm, m.governor.p_max),
        });
    }
    Ok(MachineState {
        delta,
        omega: 0.0,
        eq_p,
        ed_p,
        efd,
        pm,
        pref: pm,
        vref: vmag + efd / m.exciter.ka,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{Exciter, Fuel, Governor};

    fn test_machine() -> SyncMachine {
        SyncMachine {
            id: "g1".into(),
            bus: "b1".into(),
            mva_base: 900.0,
            fuel: Fuel::Hydro,
            p_out: 500.0,
            q_out: 100.0,
            h: 6.5,
            d: 0.1,
            xd_p: 0.3,
            xq_p: 0.55,
            xd: 1.8,
            xq: 1.7,
            td0_p: 8.0,
            tq0_p: 0.4,
            governor: Governor::default(),
            exciter: Exciter::default(),
            in_service: true,
        }
    }

    #[test]
    fn no_load_equilibrium_aligns_with_terminal() {
        let m = test_machine();
        let v = Complex64::from_polar(1.0, 0.3);
        let st = init_machine(&m, v, Complex64::new(0.0, 0.0)).unwrap();
        assert!((st.delta - 0.3).abs() < 1e-12);
        assert!(st.pm.abs() < 1e-12);
        assert!((st.eq_p - 1.0).abs() < 1e-12);
        assert!(st.ed_p.abs() < 1e-12);
    }

    #[test]
    fn equilibrium_is_fixed_point_of_rhs_and_step() {
        let m = test_machine();
        let v = Complex64::from_polar(1.02, -0.1);
        let s = Complex64::new(0.7, 0.2);
        let st = init_machine(&m, v, s).unwrap();
        let omega_s = 2.0 * std::f64::consts::PI * 60.0;
        let d = machine_rhs(&m, &st, v, omega_s);
        assert!(d.max_abs() < 1e-9, "residual derivative {:?}", d);
        let (next, _) = machine_step(&m, &st, v, 1.0 / 240.0, omega_s).unwrap();
        assert!((next.delta - st.delta).abs() < 1e-9);
        assert!((next.omega - st.omega).abs() < 1e-9);
        assert!((next.eq_p - st.eq_p).abs() < 1e-9);
        assert!((next.ed_p - st.ed_p).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_current_matches_dispatch() {
        let m = test_machine();
        let v = Complex64::from_polar(1.02, -0.1);
        let s = Complex64::new(0.7, 0.2);
        let st = init_machine(&m, v, s).unwrap();
        let i = terminal_current(&m, &st, v);
        let s_back = v * i.conj();
        assert!((s_back - s).norm() < 1e-12);
        // Norton split reproduces the same current.
        let i_split = norton_injection(&m, &st, v) - norton_admittance(&m) * v;
        assert!((i_split - i).norm() < 1e-12);
    }

    #[test]
    fn pm_step_gives_swing_acceleration() {
        // dω/dt = ΔPm / (2H) at the first instant after a mechanical step.
        let m = test_machine();
        let v = Complex64::new(1.0, 0.0);
        let mut st = init_machine(&m, v, Complex64::new(0.5, 0.0)).unwrap();
        st.pm += 0.1;
        let d = machine_rhs(&m, &st, v, 2.0 * std::f64::consts::PI * 60.0);
        assert!((d.omega - 0.1 / (2.0 * m.h)).abs() < 1e-12);
    }

    #[test]
    fn omega_guard_reports_divergence() {
        let m = test_machine();
        let v = Complex64::new(1.0, 0.0);
        let mut st = init_machine(&m, v, Complex64::new(0.5, 0.0)).unwrap();
        st.omega = 0.199;
        st.pm = m.governor.p_max;
        // Huge imbalance: electrical power at a collapsed voltage is ~0.
        let err = machine_step(&m, &st, Complex64::new(0.01, 0.0), 0.5, 377.0);
        assert!(err.is_err());
    }

    #[test]
    fn infeasible_field_voltage_is_reported() {
        let mut m = test_machine();
        m.exciter.efd_max = 1.0;
        let v = Complex64::new(1.0, 0.0);
        let err = init_machine(&m, v, Complex64::new(0.9, 0.5)).unwrap_err();
        match err {
            PowerFlowError::InfeasibleEquilibrium { device, .. } => assert_eq!(device, "g1"),
            other => panic!("unexpected error {other}"),
        }
    }
}
