//! Inverter-based resource converter with low-voltage power logic (LVPL),
//! momentary cessation, and the partial-trip automaton used for
//! distribution-connected plants.
//!
//! Quantities are per-unit on the plant MVA base. The LVPL caps active
//! current as a function of terminal voltage: no cap at or above
//! `lvpl_brkpt`, a linear ramp `lvpl_gain * (|v| - zerox)` between, and zero
//! at or below `zerox`. The zero region is momentary cessation; the flag is
//! re-entrant and tracks the voltage every step, so cessation occurs as many
//! times as the voltage dips below the threshold.

use num_complex::Complex64;

use crate::case::{Connection, IbrPlant};
use crate::sim::SensitivityFlags;

/// Below this terminal voltage, injected current scales linearly to zero so
/// a bolted fault cannot produce a division blow-up.
pub const LOW_VOLTAGE_CUTOFF: f64 = 0.05;

/// `zerox` used when the momentary-cessation sensitivity is off: low enough
/// that cessation practically never triggers.
pub const ZEROX_DISABLED: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbrState {
    /// Active/reactive current commands, pu on plant base.
    pub ip_cmd: f64,
    pub iq_cmd: f64,
    /// Filtered current outputs actually injected.
    pub ip_out: f64,
    pub iq_out: f64,
    /// Momentary cessation indicator: |v| at or below the active zerox.
    pub mc_active: bool,
    /// Connected fraction of a distribution plant (1.0 for transmission).
    pub online_fraction: f64,
    /// Share of the plant that tripped and will not reconnect.
    pub tripped_fraction_permanent: f64,
}

/// Effective zerox under the momentary-cessation sensitivity.
pub fn effective_zerox(plant: &IbrPlant, flags: &SensitivityFlags) -> f64 {
    if flags.momentary_cessation {
        plant.zerox
    } else {
        ZEROX_DISABLED
    }
}

/// Whether the plant runs the distribution behavior set: plants tagged
/// distribution always do; the sensitivity flag additionally moves
/// transmission-connected plants onto it.
pub fn is_distribution(plant: &IbrPlant, flags: &SensitivityFlags) -> bool {
    plant.connection == Connection::Distribution || flags.distribution_pv
}

/// LVPL active-current cap at the given voltage magnitude.
pub fn lvpl_cap(plant: &IbrPlant, vmag: f64, zerox: f64) -> f64 {
    if vmag >= plant.lvpl_brkpt {
        f64::INFINITY
    } else if vmag <= zerox {
        0.0
    } else {
        (plant.lvpl_gain * (vmag - zerox)).max(0.0)
    }
}

/// Partial-trip target for distribution plants: fully connected at or above
/// `v_trip_start`, linear down to zero at `v_trip_full`.
pub fn trip_target(plant: &IbrPlant, vmag: f64) -> f64 {
    if vmag >= plant.v_trip_start {
        1.0
    } else if vmag <= plant.v_trip_full {
        0.0
    } else {
        (vmag - plant.v_trip_full) / (plant.v_trip_start - plant.v_trip_full)
    }
}

/// Current injected into the network, plant-base pu in the network frame:
/// `(ip - j iq)` rotated to the terminal-voltage phase, scaled by the online
/// fraction, and linearized to zero below [`LOW_VOLTAGE_CUTOFF`].
pub fn injection(state: &IbrState, v_term: Complex64) -> Complex64 {
    let vmag = v_term.norm();
    let phase = if vmag > 1e-12 {
        v_term / vmag
    } else {
        Complex64::new(1.0, 0.0)
    };
    let scale = (vmag / LOW_VOLTAGE_CUTOFF).min(1.0);
    Complex64::new(state.ip_out, -state.iq_out) * phase * state.online_fraction * scale
}

/// Initialize at dispatch: current commands meet the power order at the
/// initial voltage and the filters are settled.
pub fn init_ibr(_plant: &IbrPlant, v_term: Complex64, s_out: Complex64) -> IbrState {
    let vmag = v_term.norm().max(1e-6);
    IbrState {
        ip_cmd: s_out.re / vmag,
        iq_cmd: s_out.im / vmag,
        ip_out: s_out.re / vmag,
        iq_out: s_out.im / vmag,
        mc_active: false,
        online_fraction: 1.0,
        tripped_fraction_permanent: 0.0,
    }
}

fn ip_rate(plant: &IbrPlant, ip: f64, target: f64) -> f64 {
    ((target - ip) / plant.tfilter).min(plant.rrpwr)
}

/// Advance the converter one step (RK2 midpoint on the current filters, then
/// the discrete automata) holding the terminal voltage fixed.
///
/// Transmission plants keep `online_fraction` = 1 less any permanent trip;
/// distribution behavior adds voltage partial tripping with partial recovery
/// and an underfrequency full trip.
pub fn ibr_step(
    plant: &IbrPlant,
    state: &IbrState,
    v_term: Complex64,
    freq_bus: f64,
    dt: f64,
    flags: &SensitivityFlags,
) -> (IbrState, Complex64) {
    let vmag = v_term.norm();
    let zerox = effective_zerox(plant, flags);
    let cap = lvpl_cap(plant, vmag, zerox);
    let ip_target = state.ip_cmd.min(cap);

    let mut next = *state;
    // RK2 midpoint on the rate-limited filter.
    let k1 = ip_rate(plant, state.ip_out, ip_target);
    let k2 = ip_rate(plant, state.ip_out + 0.5 * dt * k1, ip_target);
    next.ip_out = (state.ip_out + dt * k2).max(0.0);
    let q1 = (state.iq_cmd - state.iq_out) / plant.tfilter;
    let q2 = (state.iq_cmd - (state.iq_out + 0.5 * dt * q1)) / plant.tfilter;
    next.iq_out = state.iq_out + dt * q2;

    next.mc_active = vmag <= zerox;

    if is_distribution(plant, flags) {
        if freq_bus < plant.f_trip {
            next.tripped_fraction_permanent = 1.0;
            next.online_fraction = 0.0;
        } else {
            let target = trip_target(plant, vmag);
            if target < next.online_fraction {
                let shed = next.online_fraction - target;
                next.tripped_fraction_permanent = (next.tripped_fraction_permanent
                    + shed * (1.0 - plant.recoverable_fraction))
                    .min(1.0);
                next.online_fraction = target;
            } else {
                // online <= 1 - permanent always holds, so the ceiling never
                // undercuts the current fraction.
                let ceiling = target.min(1.0 - next.tripped_fraction_permanent);
                next.online_fraction = (next.online_fraction + plant.rrpwr * dt).min(ceiling);
            }
        }
    }

    let i = injection(&next, v_term);
    (next, i)
}

/// Distribution-connected step; same converter core with the partial-trip
/// automaton always active.
pub fn dist_pv_step(
    plant: &IbrPlant,
    state: &IbrState,
    v_term: Complex64,
    freq_bus: f64,
    dt: f64,
    flags: &SensitivityFlags,
) -> (IbrState, Complex64) {
    let forced = SensitivityFlags {
        distribution_pv: true,
        ..*flags
    };
    ibr_step(plant, state, v_term, freq_bus, dt, &forced)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_plant() -> IbrPlant {
        IbrPlant {
            id: "pv1".into(),
            bus: "b1".into(),
            mva_base: 100.0,
            p_out: 80.0,
            q_out: 0.0,
            connection: Connection::Transmission,
            tfilter: 0.02,
            rrpwr: 10.0,
            lvpl_brkpt: 0.9,
            zerox: 0.4,
            lvpl_gain: 2.0,
            v_trip_full: 0.45,
            v_trip_start: 0.6,
            f_trip: 59.3,
            recoverable_fraction: 0.5,
            in_service: true,
        }
    }

    fn mc_flags() -> SensitivityFlags {
        SensitivityFlags {
            momentary_cessation: true,
            ..SensitivityFlags::default()
        }
    }

    #[test]
    fn nominal_voltage_keeps_command() {
        let p = test_plant();
        let v = Complex64::new(1.0, 0.0);
        let st = init_ibr(&p, v, Complex64::new(1.0, 0.0));
        assert!((st.ip_cmd - 1.0).abs() < 1e-12);
        let (next, i) = ibr_step(&p, &st, v, 60.0, 1.0 / 240.0, &mc_flags());
        assert!((next.ip_out - 1.0).abs() < 1e-9);
        assert!(!next.mc_active);
        assert!((i - Complex64::new(1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn cessation_caps_current_at_zero_and_decays() {
        let p = test_plant();
        let flags = mc_flags();
        let v = Complex64::new(0.35, 0.0);
        let mut st = init_ibr(&p, Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
        assert_eq!(lvpl_cap(&p, 0.35, effective_zerox(&p, &flags)), 0.0);
        let dt = 1.0 / 240.0;
        let mut t = 0.0;
        while t < p.tfilter {
            let (next, _) = ibr_step(&p, &st, v, 60.0, dt, &flags);
            assert!(next.mc_active);
            st = next;
            t += dt;
        }
        // One filter time constant: decayed to ~e^-1 of the command.
        assert!(st.ip_out < 0.45, "ip_out {}", st.ip_out);
        assert!(st.ip_out > 0.2);
    }

    #[test]
    fn cessation_flag_is_reentrant() {
        let p = test_plant();
        let flags = mc_flags();
        let mut st = init_ibr(&p, Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
        let dt = 1.0 / 240.0;
        let trace = [1.0, 0.35, 0.35, 0.8, 0.8, 0.3, 0.3, 1.0];
        let mut observed = Vec::new();
        for vm in trace {
            let (next, _) = ibr_step(&p, &st, Complex64::new(vm, 0.0), 60.0, dt, &flags);
            observed.push(next.mc_active);
            st = next;
        }
        assert_eq!(
            observed,
            vec![false, true, true, false, false, true, true, false]
        );
    }

    #[test]
    fn mc_off_forces_low_zerox() {
        let p = test_plant();
        let flags = SensitivityFlags::default();
        assert_eq!(effective_zerox(&p, &flags), ZEROX_DISABLED);
        // At 0.35 pu the cap is linear, not zero.
        let cap = lvpl_cap(&p, 0.35, effective_zerox(&p, &flags));
        assert!((cap - 2.0 * (0.35 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn recovery_is_rate_limited() {
        let p = test_plant();
        let flags = mc_flags();
        let mut st = init_ibr(&p, Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0));
        st.ip_out = 0.0;
        let dt = 1.0 / 240.0;
        let v = Complex64::new(1.0, 0.0);
        let mut t = 0.0;
        while st.ip_out < 1.0 - 1e-9 {
            let (next, _) = ibr_step(&p, &st, v, 60.0, dt, &flags);
            st = next;
            t += dt;
            assert!(t < 1.0, "ramp never completed");
        }
        // rrpwr = 10 pu/s from 0 to 1.0 cannot complete before 0.1 s.
        assert!(t >= 0.1 - 1e-9, "recovered in {t} s");
    }

    #[test]
    fn lvpl_cap_is_monotone_in_voltage() {
        let p = test_plant();
        let mut prev = -1.0;
        for k in 0..=1000 {
            let v = k as f64 / 1000.0 * 1.2;
            let cap = lvpl_cap(&p, v, p.zerox);
            assert!(cap >= prev);
            prev = cap;
            if v <= p.zerox {
                assert_eq!(cap, 0.0);
            }
            if v >= p.lvpl_brkpt {
                assert!(cap.is_infinite());
            }
        }
    }

    #[test]
    fn dist_midpoint_voltage_gives_half_target() {
        let p = test_plant();
        let mid = 0.5 * (p.v_trip_full + p.v_trip_start);
        assert!((trip_target(&p, mid) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dist_trip_and_partial_recovery() {
        let p = test_plant();
        let flags = SensitivityFlags::default();
        let mut st = init_ibr(&p, Complex64::new(1.0, 0.0), Complex64::new(0.8, 0.0));
        let dt = 1.0 / 240.0;
        // Dip to full-trip voltage.
        for _ in 0..24 {
            let (next, _) = dist_pv_step(&p, &st, Complex64::new(0.40, 0.0), 60.0, dt, &flags);
            st = next;
        }
        assert_eq!(st.online_fraction, 0.0);
        assert!((st.tripped_fraction_permanent - 0.5).abs() < 1e-9);
        // Recovery: the recoverable half ramps back.
        for _ in 0..2400 {
            let (next, _) = dist_pv_step(&p, &st, Complex64::new(1.0, 0.0), 60.0, dt, &flags);
            st = next;
        }
        assert!((st.online_fraction - 0.5).abs() < 1e-9);
    }

    #[test]
    fn dist_behaves_as_transmission_when_voltage_stays_up() {
        let p = test_plant();
        let flags = SensitivityFlags::default();
        let st0 = init_ibr(&p, Complex64::new(1.0, 0.0), Complex64::new(0.8, 0.1));
        let v = Complex64::new(0.95, 0.1);
        let (a, ia) = ibr_step(&p, &st0, v, 60.0, 1.0 / 240.0, &flags);
        let (b, ib) = dist_pv_step(&p, &st0, v, 60.0, 1.0 / 240.0, &flags);
        assert_eq!(a, b);
        assert_eq!(ia, ib);
    }

    #[test]
    fn underfrequency_fully_trips_distribution_plant() {
        let p = test_plant();
        let flags = SensitivityFlags::default();
        let st = init_ibr(&p, Complex64::new(1.0, 0.0), Complex64::new(0.8, 0.0));
        let (next, i) = dist_pv_step(&p, &st, Complex64::new(1.0, 0.0), 59.2, 1.0 / 240.0, &flags);
        assert_eq!(next.online_fraction, 0.0);
        assert_eq!(next.tripped_fraction_permanent, 1.0);
        assert_eq!(i, Complex64::new(0.0, 0.0));
    }
}
