//! Composite load: a static ZIP part plus an aggregate induction motor that
//! can stall under sustained low voltage and thermally trip afterwards.
//!
//! The ZIP part is anchored at the initialization voltage so the load absorbs
//! exactly its dispatch at t = 0. The motor runs as a constant admittance
//! sized at initialization; a stall swaps it to the locked-rotor impedance
//! `r_stall + j x_stall` on the motor base (the motor's MW dispatch). Stalls
//! latch: there is no spontaneous restart, only the thermal trip ramp.

use num_complex::Complex64;

use crate::case::CompositeLoad;
use crate::sim::SensitivityFlags;

/// Constant-power load parts convert to constant impedance below this
/// voltage so fault-on network solutions stay bounded and contractive.
pub const ZIP_PQ_BREAK: f64 = 0.7;

/// Half-width of the smooth blend around [`ZIP_PQ_BREAK`]. A hard switch
/// leaves a kink the network fixed point can chatter across.
const ZIP_BLEND: f64 = 0.05;

/// Constant-power scaling factor: 1 above the break band, impedance-like
/// `(v/vb)^2` below it, smoothstep-blended in between.
fn const_p_factor(vmag: f64) -> f64 {
    let vb = ZIP_PQ_BREAK;
    let z_like = (vmag / vb) * (vmag / vb);
    let lo = vb - ZIP_BLEND;
    let hi = vb + ZIP_BLEND;
    if vmag >= hi {
        1.0
    } else if vmag <= lo {
        z_like
    } else {
        let s = (vmag - lo) / (hi - lo);
        let w = s * s * (3.0 - 2.0 * s);
        w + (1.0 - w) * z_like
    }
}

/// Guard for float accumulation right at the stall-delay boundary.
const TIMER_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotorMode {
    Run,
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorState {
    pub mode: MotorMode,
    /// Contiguous time spent below Vstall, s.
    pub undervoltage_timer: f64,
    /// Time spent stalled, s.
    pub stall_elapsed: f64,
    /// Thermally tripped share of the motor, 0..=thermal_trip_fraction.
    pub tripped_share: f64,
}

impl MotorState {
    pub fn run() -> Self {
        MotorState {
            mode: MotorMode::Run,
            undervoltage_timer: 0.0,
            stall_elapsed: 0.0,
            tripped_share: 0.0,
        }
    }
}

/// Per-load constants fixed at initialization.
#[derive(Debug, Clone, Copy)]
pub struct LoadAnchor {
    /// Voltage magnitude the ZIP part is anchored to.
    pub v0: f64,
    /// Static (non-motor) complex dispatch, system-base pu.
    pub s_static: Complex64,
    /// Motor complex dispatch, system-base pu.
    pub s_motor: Complex64,
    /// Run-mode motor admittance, system-base pu.
    pub y_run: Complex64,
    /// Locked-rotor admittance, system-base pu.
    pub y_stall: Complex64,
}

/// Build the anchor from the dispatch and the initial bus voltage.
/// The motor takes `motor_fraction` of both P and Q; its base is its MW size.
pub fn init_load(load: &CompositeLoad, v_term: Complex64, s_base_mva: f64) -> (LoadAnchor, MotorState) {
    let v0 = v_term.norm().max(1e-6);
    let s_total = Complex64::new(load.p, load.q) / s_base_mva;
    let s_motor = s_total * load.motor_fraction;
    let s_static = s_total - s_motor;
    let y_run = s_motor.conj() / (v0 * v0);
    let motor_base_mva = (load.motor_fraction * load.p).max(1e-12);
    let z_stall = Complex64::new(load.r_stall, load.x_stall);
    let y_stall = if z_stall.norm() > 0.0 {
        z_stall.inv() * (motor_base_mva / s_base_mva)
    } else {
        Complex64::new(0.0, 0.0)
    };
    (
        LoadAnchor {
            v0,
            s_static,
            s_motor,
            y_run,
            y_stall,
        },
        MotorState::run(),
    )
}

/// ZIP current injected into the network (negative of the draw),
/// system-base pu.
pub fn zip_injection(load: &CompositeLoad, anchor: &LoadAnchor, v_term: Complex64) -> Complex64 {
    let vmag = v_term.norm();
    if vmag < 1e-9 {
        return Complex64::new(0.0, 0.0);
    }
    let r = vmag / anchor.v0;
    // Constant-power parts turn into impedance below the break voltage.
    let p_eff = const_p_factor(vmag);
    let z = &load.zip;
    let p = anchor.s_static.re * (z.pz * r * r + z.pi * r + z.pp * p_eff);
    let q = anchor.s_static.im * (z.qz * r * r + z.qi * r + z.qp * p_eff);
    let s_draw = Complex64::new(p, q);
    -(s_draw / v_term).conj()
}

/// Motor admittance for the current motor state (drawn as a shunt),
/// system-base pu.
pub fn motor_admittance(anchor: &LoadAnchor, state: &MotorState) -> Complex64 {
    match state.mode {
        MotorMode::Run => anchor.y_run,
        MotorMode::Stalled => anchor.y_stall * (1.0 - state.tripped_share),
    }
}

/// Advance the stall/thermal automaton over one step at the given voltage.
/// Stall detection requires both the per-load enable and the sensitivity flag.
pub fn motor_advance(
    load: &CompositeLoad,
    state: &MotorState,
    v_term: Complex64,
    dt: f64,
    flags: &SensitivityFlags,
) -> MotorState {
    let mut next = *state;
    let vmag = v_term.norm();
    let stall_armed = load.stall_enabled && flags.motor_stall && load.motor_fraction > 0.0;
    if stall_armed && next.mode == MotorMode::Run {
        if vmag < load.vstall {
            next.undervoltage_timer += dt;
        } else {
            next.undervoltage_timer = 0.0;
        }
        if next.undervoltage_timer >= load.tstall - TIMER_EPS {
            next.mode = MotorMode::Stalled;
        }
    }
    if next.mode == MotorMode::Stalled {
        next.stall_elapsed += dt;
        let ttt = load.thermal_trip_time;
        if next.stall_elapsed >= ttt {
            let ramp = ((next.stall_elapsed - ttt) / ttt).min(1.0);
            next.tripped_share = load.thermal_trip_fraction * ramp;
        }
    }
    next
}

/// One combined step: inject at the current state, then advance the automaton.
/// Returns the new state, the ZIP injection current, and the motor shunt
/// admittance contribution active during this step.
pub fn composite_load_step(
    load: &CompositeLoad,
    state: &MotorState,
    anchor: &LoadAnchor,
    v_term: Complex64,
    dt: f64,
    flags: &SensitivityFlags,
) -> (MotorState, Complex64, Complex64) {
    let i_zip = zip_injection(load, anchor, v_term);
    let y_motor = motor_admittance(anchor, state);
    let next = motor_advance(load, state, v_term, dt, flags);
    (next, i_zip, y_motor)
}

/// Total complex power drawn at the given voltage and state, system-base pu.
pub fn total_draw(
    load: &CompositeLoad,
    anchor: &LoadAnchor,
    state: &MotorState,
    v_term: Complex64,
) -> Complex64 {
    let i_zip = zip_injection(load, anchor, v_term);
    let y = motor_admittance(anchor, state);
    let i_motor_draw = y * v_term;
    v_term * (i_motor_draw - i_zip).conj()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::ZipFractions;

    fn test_load(motor_fraction: f64) -> CompositeLoad {
        CompositeLoad {
            id: "ld1".into(),
            bus: "b1".into(),
            p: 1000.0,
            q: 250.0,
            zip: ZipFractions::default(),
            motor_fraction,
            vstall: 0.42,
            tstall: 0.033,
            r_stall: 0.1,
            x_stall: 0.1,
            thermal_trip_time: 0.9,
            thermal_trip_fraction: 0.75,
            stall_enabled: true,
        }
    }

    fn stall_flags() -> SensitivityFlags {
        SensitivityFlags {
            motor_stall: true,
            ..SensitivityFlags::default()
        }
    }

    #[test]
    fn zip_consistency_at_anchor_voltage() {
        let load = test_load(0.3);
        let v0 = Complex64::from_polar(0.98, -0.2);
        let (anchor, state) = init_load(&load, v0, 100.0);
        let s = total_draw(&load, &anchor, &state, v0);
        assert!((s.re - 10.0).abs() < 1e-9, "P draw {}", s.re);
        assert!((s.im - 2.5).abs() < 1e-9, "Q draw {}", s.im);
    }

    #[test]
    fn sustained_undervoltage_stalls_motor() {
        let load = test_load(0.3);
        let flags = stall_flags();
        let (_, mut st) = init_load(&load, Complex64::new(1.0, 0.0), 100.0);
        let dt = 0.0165; // two steps sum to exactly Tstall
        let v = Complex64::new(0.40, 0.0);
        st = motor_advance(&load, &st, v, dt, &flags);
        assert_eq!(st.mode, MotorMode::Run);
        st = motor_advance(&load, &st, v, dt, &flags);
        assert_eq!(st.mode, MotorMode::Stalled);
    }

    #[test]
    fn short_dip_resets_timer() {
        let load = test_load(0.3);
        let flags = stall_flags();
        let (_, mut st) = init_load(&load, Complex64::new(1.0, 0.0), 100.0);
        let dt = 0.0165;
        st = motor_advance(&load, &st, Complex64::new(0.40, 0.0), dt, &flags);
        st = motor_advance(&load, &st, Complex64::new(0.95, 0.0), dt, &flags);
        assert_eq!(st.mode, MotorMode::Run);
        assert_eq!(st.undervoltage_timer, 0.0);
        // Another half-delay dip still does not stall.
        st = motor_advance(&load, &st, Complex64::new(0.40, 0.0), dt, &flags);
        assert_eq!(st.mode, MotorMode::Run);
    }

    #[test]
    fn stall_apparent_power_matches_locked_rotor_impedance() {
        let load = test_load(0.3);
        let (anchor, _) = init_load(&load, Complex64::new(1.0, 0.0), 100.0);
        let st = MotorState {
            mode: MotorMode::Stalled,
            undervoltage_timer: 0.033,
            stall_elapsed: 0.0,
            tripped_share: 0.0,
        };
        let v = Complex64::new(0.9, 0.0);
        let y = motor_admittance(&anchor, &st);
        let s = v * (y * v).conj();
        // |S| = |v|^2 / |z| on the motor base (300 MW -> 3 pu system).
        let z = Complex64::new(0.1, 0.1);
        let expected_mag = 0.81 / z.norm() * 3.0;
        assert!((s.norm() - expected_mag).abs() < 1e-9);
        // Reactive share is x/|z| of the apparent power.
        assert!((s.im / s.norm() - 0.1 / z.norm()).abs() < 1e-9);
    }

    #[test]
    fn stall_flag_off_keeps_run_trajectory() {
        let load = test_load(0.3);
        let flags = SensitivityFlags::default();
        let (_, mut st) = init_load(&load, Complex64::new(1.0, 0.0), 100.0);
        for _ in 0..100 {
            st = motor_advance(&load, &st, Complex64::new(0.2, 0.0), 0.01, &flags);
        }
        assert_eq!(st.mode, MotorMode::Run);
        assert_eq!(st.undervoltage_timer, 0.0);
    }

    #[test]
    fn stall_latches_and_thermal_trip_ramps() {
        let load = test_load(0.3);
        let flags = stall_flags();
        let (_, mut st) = init_load(&load, Complex64::new(1.0, 0.0), 100.0);
        let dt = 0.011;
        for _ in 0..4 {
            st = motor_advance(&load, &st, Complex64::new(0.3, 0.0), dt, &flags);
        }
        assert_eq!(st.mode, MotorMode::Stalled);
        // Voltage recovery does not restart the motor.
        for _ in 0..200 {
            st = motor_advance(&load, &st, Complex64::new(1.0, 0.0), dt, &flags);
        }
        assert_eq!(st.mode, MotorMode::Stalled);
        assert!(st.stall_elapsed > 2.0);
        assert!((st.tripped_share - load.thermal_trip_fraction).abs() < 1e-9);
    }

    #[test]
    fn stalled_reactive_draw_exceeds_run_mode() {
        let load = test_load(0.3);
        let (anchor, _) = init_load(&load, Complex64::new(1.0, 0.0), 100.0);
        let run = MotorState::run();
        let stalled = MotorState {
            mode: MotorMode::Stalled,
            undervoltage_timer: 0.0,
            stall_elapsed: 0.0,
            tripped_share: 0.0,
        };
        for k in 0..=70 {
            let vm = 0.3 + 0.01 * k as f64;
            let v = Complex64::new(vm, 0.0);
            let q_run = (v * (motor_admittance(&anchor, &run) * v).conj()).im;
            let q_stall = (v * (motor_admittance(&anchor, &stalled) * v).conj()).im;
            assert!(q_stall > q_run, "at |v|={vm}: {q_stall} <= {q_run}");
        }
    }
}
