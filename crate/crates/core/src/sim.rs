//! Fixed-step time-domain engine.
//!
//! Each step alternates: (1) apply any contingency events falling in the step
//! window, (2) solve the network algebraics by fixed-point iteration over the
//! device injections, (3) advance device ODEs one step by the RK2 midpoint
//! rule holding network voltages, (4) update discrete automata, (5) record.
//! Event times snap to the next grid point, a documented bias of at most dt.
//!
//! Bus frequency is nominal plus the filtered derivative of the bus voltage
//! angle, so load buses without machines report a frequency too.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Dyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case::{Contingency, EventKind, Interface, MeteredEnd, SystemCase};
use crate::devices::{self, DynamicState};
use crate::powerflow::{branch_stamp, BranchStamp};
use crate::SimError;

/// The three study sensitivities. Independent booleans; all off reproduces
/// the plain behavior set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SensitivityFlags {
    #[serde(default)]
    pub momentary_cessation: bool,
    #[serde(default)]
    pub distribution_pv: bool,
    #[serde(default)]
    pub motor_stall: bool,
}

impl SensitivityFlags {
    pub fn label(&self) -> String {
        match (
            self.momentary_cessation,
            self.distribution_pv,
            self.motor_stall,
        ) {
            (false, false, false) => "none".to_string(),
            (true, false, false) => "momentary_cessation".to_string(),
            (false, true, false) => "distribution_pv".to_string(),
            (false, false, true) => "motor_stall".to_string(),
            _ => format!(
                "mc={},dist_pv={},motor_stall={}",
                self.momentary_cessation, self.distribution_pv, self.motor_stall
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Integration step, s (default one quarter cycle at 60 Hz).
    pub dt: f64,
    /// Simulation horizon, s.
    pub t_stop: f64,
    /// Max-norm tolerance of the per-step network fixed point, pu.
    pub network_tol: f64,
    pub network_max_iter: usize,
    /// First-order filter time constant for bus frequency, s.
    pub freq_filter_t: f64,
    /// Extra device channels to record, e.g. `dev.g1.omega`.
    #[serde(default)]
    pub record: Vec<String>,
    #[serde(default)]
    pub flags: SensitivityFlags,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 240.0,
            t_stop: 20.0,
            network_tol: 1e-6,
            network_max_iter: 50,
            freq_filter_t: 0.05,
            record: Vec::new(),
            flags: SensitivityFlags::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TerminationStatus {
    Completed,
    Diverged { t: f64, device: String },
}

impl TerminationStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, TerminationStatus::Diverged { .. })
    }
}

/// Recorded series on a shared time grid. Bus and interface channels are
/// always recorded; device channels on request.
#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub time: Vec<f64>,
    pub bus_ids: Vec<String>,
    /// Per bus, per sample voltage magnitude, pu.
    pub vm: Vec<Vec<f64>>,
    /// Per bus, per sample frequency, Hz.
    pub freq: Vec<Vec<f64>>,
    pub iface_ids: Vec<String>,
    pub iface_mw: Vec<Vec<f64>>,
    pub iface_mva: Vec<Vec<f64>>,
    pub dev_channels: BTreeMap<String, Vec<f64>>,
    pub status: TerminationStatus,
    pub warnings: Vec<String>,
}

impl SimulationResult {
    /// Channel names in the canonical output order.
    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in &self.bus_ids {
            names.push(format!("bus.{b}.vm"));
        }
        for b in &self.bus_ids {
            names.push(format!("bus.{b}.freq"));
        }
        for i in &self.iface_ids {
            names.push(format!("iface.{i}.mw"));
        }
        for i in &self.iface_ids {
            names.push(format!("iface.{i}.mva"));
        }
        names.extend(self.dev_channels.keys().cloned());
        names
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        let mut parts = name.splitn(3, '.');
        let kind = parts.next()?;
        let id = parts.next()?;
        let field = parts.next()?;
        match kind {
            "bus" => {
                let i = self.bus_ids.iter().position(|b| b == id)?;
                match field {
                    "vm" => Some(&self.vm[i]),
                    "freq" => Some(&self.freq[i]),
                    _ => None,
                }
            }
            "iface" => {
                let i = self.iface_ids.iter().position(|b| b == id)?;
                match field {
                    "mw" => Some(&self.iface_mw[i]),
                    "mva" => Some(&self.iface_mva[i]),
                    _ => None,
                }
            }
            "dev" => self.dev_channels.get(name).map(|v| v.as_slice()),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Network state and events
// ---------------------------------------------------------------------------

/// Live network topology during a simulation: base branch stamps plus fault
/// admittances, outages, and the Norton admittances of online machines.
pub struct NetworkState {
    pub n: usize,
    bus_index: BTreeMap<String, usize>,
    branch_ids: Vec<String>,
    stamps: Vec<BranchStamp>,
    branch_in_service: Vec<bool>,
    branch_out: BTreeSet<usize>,
    faults: BTreeMap<usize, Complex64>,
    machine_ids: Vec<String>,
    machine_bus: Vec<usize>,
    machine_norton_sys: Vec<Complex64>,
    pub machine_online: Vec<bool>,
    plant_ids: Vec<String>,
    pub plant_online: Vec<bool>,
    /// Per-bus compensation shunts (stamped load admittances); the matching
    /// injections keep the fixed point exact while these stiffen the
    /// diagonal for fast contraction.
    pub extra_shunts: Vec<Complex64>,
}

impl NetworkState {
    pub fn from_case(case: &SystemCase) -> Self {
        let bus_index: BTreeMap<String, usize> = case
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), i))
            .collect();
        let s_base = case.system.system_mva_base;
        let stamps = case
            .branches
            .iter()
            .map(|br| {
                branch_stamp(
                    bus_index[&br.from_bus],
                    bus_index[&br.to_bus],
                    br.r,
                    br.x,
                    br.b_shunt,
                    br.tap,
                )
            })
            .collect();
        NetworkState {
            n: case.buses.len(),
            branch_ids: case.branches.iter().map(|b| b.id.clone()).collect(),
            stamps,
            branch_in_service: case.branches.iter().map(|b| b.in_service).collect(),
            branch_out: BTreeSet::new(),
            faults: BTreeMap::new(),
            machine_ids: case.machines.iter().map(|m| m.id.clone()).collect(),
            machine_bus: case
                .machines
                .iter()
                .map(|m| bus_index[&m.bus])
                .collect(),
            machine_norton_sys: case
                .machines
                .iter()
                .map(|m| devices::machine::norton_admittance(m) * (m.mva_base / s_base))
                .collect(),
            machine_online: case.machines.iter().map(|m| m.in_service).collect(),
            plant_ids: case.ibr_plants.iter().map(|p| p.id.clone()).collect(),
            plant_online: case.ibr_plants.iter().map(|p| p.in_service).collect(),
            extra_shunts: vec![Complex64::new(0.0, 0.0); case.buses.len()],
            bus_index,
        }
    }

    pub fn branch_active(&self, idx: usize) -> bool {
        self.branch_in_service[idx] && !self.branch_out.contains(&idx)
    }

    /// Assemble the dynamic Y-bus: in-service branches, fault admittances,
    /// and the Norton admittances of online machines. Stamping order is
    /// fixed, so identical topology states produce bit-identical matrices.
    pub fn rebuild_y(&self) -> DMatrix<Complex64> {
        let mut y = DMatrix::zeros(self.n, self.n);
        for (k, s) in self.stamps.iter().enumerate() {
            if !self.branch_active(k) {
                continue;
            }
            y[(s.from, s.from)] += s.yff;
            y[(s.from, s.to)] += s.yft;
            y[(s.to, s.from)] += s.ytf;
            y[(s.to, s.to)] += s.ytt;
        }
        for (&bus, &yf) in &self.faults {
            y[(bus, bus)] += yf;
        }
        for (k, &bus) in self.machine_bus.iter().enumerate() {
            if self.machine_online[k] {
                y[(bus, bus)] += self.machine_norton_sys[k];
            }
        }
        for (bus, ys) in self.extra_shunts.iter().enumerate() {
            if ys.re != 0.0 || ys.im != 0.0 {
                y[(bus, bus)] += ys;
            }
        }
        y
    }

    /// Apply one contingency event. Returns a warning string for benign
    /// no-ops (re-tripping a tripped element); unknown targets are errors.
    pub fn apply_event(&mut self, kind: &EventKind) -> Result<Option<String>, SimError> {
        let unknown = |target: &str| SimError::UnknownEventTarget {
            target: target.to_string(),
        };
        match kind {
            EventKind::BusFaultApply { bus, admittance } => {
                let i = *self.bus_index.get(bus).ok_or_else(|| unknown(bus))?;
                self.faults.insert(i, *admittance);
                Ok(None)
            }
            EventKind::BusFaultClear { bus } => {
                let i = *self.bus_index.get(bus).ok_or_else(|| unknown(bus))?;
                if self.faults.remove(&i).is_none() {
                    return Ok(Some(format!("fault_clear at '{bus}' with no active fault")));
                }
                Ok(None)
            }
            EventKind::BranchTrip { branch } => {
                let i = self
                    .branch_ids
                    .iter()
                    .position(|b| b == branch)
                    .ok_or_else(|| unknown(branch))?;
                if !self.branch_active(i) {
                    return Ok(Some(format!("branch '{branch}' already out of service")));
                }
                self.branch_out.insert(i);
                Ok(None)
            }
            EventKind::MachineTrip { machine } => {
                let i = self
                    .machine_ids
                    .iter()
                    .position(|m| m == machine)
                    .ok_or_else(|| unknown(machine))?;
                if !self.machine_online[i] {
                    return Ok(Some(format!("machine '{machine}' already tripped")));
                }
                self.machine_online[i] = false;
                Ok(None)
            }
            EventKind::IbrTrip { plant } => {
                let i = self
                    .plant_ids
                    .iter()
                    .position(|p| p == plant)
                    .ok_or_else(|| unknown(plant))?;
                if !self.plant_online[i] {
                    return Ok(Some(format!("plant '{plant}' already tripped")));
                }
                self.plant_online[i] = false;
                Ok(None)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Network algebraic solution
// ---------------------------------------------------------------------------

type LuC = nalgebra::linalg::LU<Complex64, Dyn, Dyn>;

/// Assembled network matrix with its factorization.
struct NetSolver {
    y: DMatrix<Complex64>,
    lu: LuC,
}

impl NetSolver {
    fn new(y: DMatrix<Complex64>) -> Self {
        let lu = y.clone().lu();
        NetSolver { y, lu }
    }
}

fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

fn solve_lu(lu: &LuC, rhs: &[Complex64]) -> Option<Vec<Complex64>> {
    let v = lu.solve(&DVector::from_column_slice(rhs))?;
    if v.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return None;
    }
    Some(v.iter().copied().collect())
}

fn solve_network_inner<F>(
    solver: &NetSolver,
    inject: F,
    v_guess: &[Complex64],
    tol: f64,
    max_iter: usize,
    t: f64,
) -> Result<(Vec<Complex64>, usize), SimError>
where
    F: Fn(&[Complex64]) -> Vec<Complex64>,
{
    let mut v = v_guess.to_vec();
    let mut i_prev: Option<Vec<Complex64>> = None;
    // Anderson(1) memory: previous map output and residual.
    let mut g_prev: Option<Vec<Complex64>> = None;
    let mut r_prev: Option<Vec<Complex64>> = None;
    let mut best = (f64::INFINITY, v.clone());
    for k in 0..max_iter {
        let i = inject(&v);
        if let Some(prev) = &i_prev {
            if max_abs_diff(&i, prev) <= tol {
                // Injections stopped moving: v solves Y v = I(v) exactly.
                return Ok((v, k));
            }
        }
        let g = solve_lu(&solver.lu, &i)
            .ok_or(SimError::NetworkDiverged { t, residual: f64::NAN })?;
        let r: Vec<Complex64> = g.iter().zip(&v).map(|(a, b)| a - b).collect();
        let residual = r.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if residual <= tol {
            return Ok((g, k + 1));
        }
        if residual < best.0 {
            best = (residual, g.clone());
        }
        // Secant mixing along the last residual difference removes the
        // dominant linear mode of the Picard map; theta is clamped so a
        // nonlinear kink cannot fling the iterate.
        let mut v_next = g.clone();
        if let (Some(gp), Some(rp)) = (&g_prev, &r_prev) {
            let mut num = Complex64::new(0.0, 0.0);
            let mut den = 0.0;
            for (rk, rkp) in r.iter().zip(rp) {
                let dr = rk - rkp;
                num += dr.conj() * rk;
                den += dr.norm_sqr();
            }
            if den > 1e-30 {
                let mut theta = num / den;
                if theta.norm() > 5.0 {
                    theta *= 5.0 / theta.norm();
                }
                for ((vn, gk), gp_k) in v_next.iter_mut().zip(&g).zip(gp) {
                    *vn = gk - theta * (gk - gp_k);
                }
            }
        }
        i_prev = Some(i);
        g_prev = Some(g);
        r_prev = Some(r);
        v = v_next;
    }
    // Repulsive operating points (deep depressions near the nose) defeat the
    // Picard map; fall back to damped Newton on the KCL residual from the
    // best iterate seen. Failure here is a genuine divergence.
    newton_network(solver, &inject, &best.1, tol, 25, t)
}

/// Damped Newton on r(V) = Y V - I(V) with a finite-difference injection
/// Jacobian, in real coordinates.
fn newton_network<F>(
    solver: &NetSolver,
    inject: &F,
    v_start: &[Complex64],
    tol: f64,
    max_iter: usize,
    t: f64,
) -> Result<(Vec<Complex64>, usize), SimError>
where
    F: Fn(&[Complex64]) -> Vec<Complex64>,
{
    let n = v_start.len();
    let resid = |v: &[Complex64]| -> Vec<Complex64> {
        let i = inject(v);
        (0..n)
            .map(|r| {
                let mut acc = -i[r];
                for c in 0..n {
                    acc += solver.y[(r, c)] * v[c];
                }
                acc
            })
            .collect()
    };
    let norm_inf = |r: &[Complex64]| r.iter().map(|c| c.norm()).fold(0.0, f64::max);

    let mut v = v_start.to_vec();
    let mut r = resid(&v);
    let mut r_norm = norm_inf(&r);
    let fd = 1e-7;
    for k in 0..max_iter {
        // Real-coordinates Jacobian: Y blocks minus dI/dV by differences.
        let mut jac = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for c in 0..n {
            for re_part in [true, false] {
                let mut vp = v.clone();
                if re_part {
                    vp[c] += Complex64::new(fd, 0.0);
                } else {
                    vp[c] += Complex64::new(0.0, fd);
                }
                let ip = inject(&vp);
                let i0 = inject(&v);
                let col = if re_part { c } else { n + c };
                for row in 0..n {
                    let di = (ip[row] - i0[row]) / fd;
                    jac[(row, col)] -= di.re;
                    jac[(n + row, col)] -= di.im;
                }
            }
        }
        for row in 0..n {
            for c in 0..n {
                let yy = solver.y[(row, c)];
                jac[(row, c)] += yy.re;
                jac[(row, n + c)] -= yy.im;
                jac[(n + row, c)] += yy.im;
                jac[(n + row, n + c)] += yy.re;
            }
        }
        let mut rhs = DVector::zeros(2 * n);
        for row in 0..n {
            rhs[row] = -r[row].re;
            rhs[n + row] = -r[row].im;
        }
        let dx = jac
            .lu()
            .solve(&rhs)
            .ok_or(SimError::NetworkDiverged { t, residual: r_norm })?;
        if dx.iter().any(|x| !x.is_finite()) {
            return Err(SimError::NetworkDiverged { t, residual: r_norm });
        }

        // Backtracking on the residual norm.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..6 {
            let v_try: Vec<Complex64> = (0..n)
                .map(|i| v[i] + Complex64::new(dx[i], dx[n + i]) * lambda)
                .collect();
            let r_try = resid(&v_try);
            let rn_try = norm_inf(&r_try);
            if rn_try < r_norm || rn_try <= tol {
                let step = dx.iter().map(|x| x.abs()).fold(0.0, f64::max) * lambda;
                v = v_try;
                r = r_try;
                r_norm = rn_try;
                accepted = true;
                if step <= tol || r_norm <= tol {
                    return Ok((v, k + 1));
                }
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(SimError::NetworkDiverged { t, residual: r_norm });
        }
    }
    if r_norm <= tol * 10.0 {
        // Close enough that device integration error dominates.
        return Ok((v, max_iter));
    }
    Err(SimError::NetworkDiverged { t, residual: r_norm })
}

/// Fixed point of `V = Y^-1 I(V)` to `tol` in max-norm. Returns the voltages
/// and the iteration count; constant injections converge in one iteration.
pub fn solve_network<F>(
    y: &DMatrix<Complex64>,
    inject: F,
    v_guess: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<Complex64>, usize), SimError>
where
    F: Fn(&[Complex64]) -> Vec<Complex64>,
{
    // A singular Y has an (effectively) zero pivot; nalgebra's solve then
    // produces non-finite entries which solve_lu rejects.
    solve_network_inner(&NetSolver::new(y.clone()), inject, v_guess, tol, max_iter, 0.0)
}

// ---------------------------------------------------------------------------
// Interface flows
// ---------------------------------------------------------------------------

struct IfaceMember {
    stamp_idx: usize,
    metered_from: bool,
    sign: f64,
}

struct IfaceCalc {
    members: Vec<IfaceMember>,
}

fn build_iface_calc(case: &SystemCase, net: &NetworkState) -> Vec<IfaceCalc> {
    case.interfaces
        .iter()
        .map(|iface: &Interface| IfaceCalc {
            members: iface
                .members
                .iter()
                .map(|m| IfaceMember {
                    stamp_idx: net
                        .branch_ids
                        .iter()
                        .position(|b| *b == m.branch_id)
                        .expect("validated member branch"),
                    metered_from: m.metered_end == MeteredEnd::From,
                    sign: m.sign as f64,
                })
                .collect(),
        })
        .collect()
}

fn iface_flow(
    calc: &IfaceCalc,
    net: &NetworkState,
    v: &[Complex64],
    s_base: f64,
) -> (f64, f64) {
    let mut s_sum = Complex64::new(0.0, 0.0);
    for m in &calc.members {
        if !net.branch_active(m.stamp_idx) {
            continue;
        }
        let s = &net.stamps[m.stamp_idx];
        let s_flow = if m.metered_from {
            let i = s.yff * v[s.from] + s.yft * v[s.to];
            v[s.from] * i.conj()
        } else {
            let i = s.ytf * v[s.from] + s.ytt * v[s.to];
            v[s.to] * i.conj()
        };
        s_sum += s_flow * m.sign;
    }
    s_sum *= s_base;
    (s_sum.re, s_sum.norm())
}

// ---------------------------------------------------------------------------
// Device channel recording
// ---------------------------------------------------------------------------

enum ChannelSource {
    Machine(usize, fn(&devices::MachineState) -> f64),
    Plant(usize, fn(&devices::IbrState) -> f64),
    Motor(usize, fn(&devices::MotorState) -> f64),
}

fn resolve_channel(case: &SystemCase, name: &str) -> Result<ChannelSource, SimError> {
    let bad = || SimError::InvalidConfig(format!("unknown record channel '{name}'"));
    let mut parts = name.splitn(3, '.');
    if parts.next() != Some("dev") {
        return Err(bad());
    }
    let id = parts.next().ok_or_else(bad)?;
    let field = parts.next().ok_or_else(bad)?;
    if let Some(i) = case.machines.iter().position(|m| m.id == id) {
        let f: fn(&devices::MachineState) -> f64 = match field {
            "delta" => |s| s.delta,
            "omega" => |s| s.omega,
            "eq_p" => |s| s.eq_p,
            "ed_p" => |s| s.ed_p,
            "efd" => |s| s.efd,
            "pm" => |s| s.pm,
            _ => return Err(bad()),
        };
        return Ok(ChannelSource::Machine(i, f));
    }
    if let Some(i) = case.ibr_plants.iter().position(|p| p.id == id) {
        let f: fn(&devices::IbrState) -> f64 = match field {
            "ip_out" => |s| s.ip_out,
            "iq_out" => |s| s.iq_out,
            "ip_cmd" => |s| s.ip_cmd,
            "mc_active" => |s| {
                if s.mc_active {
                    1.0
                } else {
                    0.0
                }
            },
            "online_fraction" => |s| s.online_fraction,
            "tripped_fraction_permanent" => |s| s.tripped_fraction_permanent,
            _ => return Err(bad()),
        };
        return Ok(ChannelSource::Plant(i, f));
    }
    if let Some(i) = case.loads.iter().position(|l| l.id == id) {
        let f: fn(&devices::MotorState) -> f64 = match field {
            "mode" => |s| match s.mode {
                devices::MotorMode::Run => 0.0,
                devices::MotorMode::Stalled => 1.0,
            },
            "undervoltage_timer" => |s| s.undervoltage_timer,
            "stall_elapsed" => |s| s.stall_elapsed,
            "tripped_share" => |s| s.tripped_share,
            _ => return Err(bad()),
        };
        return Ok(ChannelSource::Motor(i, f));
    }
    Err(bad())
}

// ---------------------------------------------------------------------------
// Main loop
// ---------------------------------------------------------------------------

fn wrap_angle(d: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (d + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

/// Run one contingency from the initialized equilibrium.
///
/// Divergence (network or device) terminates the run early with a
/// `Diverged` status rather than an error; hard errors are reserved for
/// invalid configs and unknown event targets.
pub fn run_simulation(
    case: &SystemCase,
    init: &DynamicState,
    contingency: &Contingency,
    config: &SimulationConfig,
) -> Result<SimulationResult, SimError> {
    if !(config.dt > 0.0 && config.dt <= 0.01) {
        return Err(SimError::InvalidConfig(format!(
            "dt = {} outside (0, 0.01]",
            config.dt
        )));
    }
    if config.t_stop < contingency.max_event_time() {
        return Err(SimError::InvalidConfig(format!(
            "t_stop {} is before the last event at {}",
            config.t_stop,
            contingency.max_event_time()
        )));
    }

    let mut net = NetworkState::from_case(case);
    // Resolve every event target up front.
    {
        let mut probe = NetworkState::from_case(case);
        for ev in &contingency.events {
            probe.apply_event(&ev.kind)?;
        }
    }

    let s_base = case.system.system_mva_base;
    let f_nom = case.system.nominal_frequency;
    let omega_s = 2.0 * std::f64::consts::PI * f_nom;
    let n = case.buses.len();
    let bus_index = case.bus_index();
    let flags = config.flags;

    let machine_bus: Vec<usize> = case.machines.iter().map(|m| bus_index[m.bus.as_str()]).collect();
    let machine_ratio: Vec<f64> = case.machines.iter().map(|m| m.mva_base / s_base).collect();
    let plant_bus: Vec<usize> = case.ibr_plants.iter().map(|p| bus_index[p.bus.as_str()]).collect();
    let plant_ratio: Vec<f64> = case.ibr_plants.iter().map(|p| p.mva_base / s_base).collect();
    let load_bus: Vec<usize> = case.loads.iter().map(|l| bus_index[l.bus.as_str()]).collect();

    let channels: Vec<(String, ChannelSource)> = {
        let mut v = Vec::new();
        for name in &config.record {
            v.push((name.clone(), resolve_channel(case, name)?));
        }
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    };

    let iface_calc = build_iface_calc(case, &net);
    let n_steps = (config.t_stop / config.dt).round() as usize;
    let n_samples = n_steps + 1;

    let mut machines = init.machines.clone();
    let mut plants = init.plants.clone();
    let mut motors = init.motors.clone();
    let anchors = &init.load_anchors;

    // Static-load anchor admittances are stamped once; motor admittances are
    // stamped at their current state and restamped when a state change moves
    // them. The paired injections keep the solution exact.
    let comp_static: Vec<Complex64> = anchors
        .iter()
        .map(|a| a.s_static.conj() / (a.v0 * a.v0))
        .collect();
    let mut motor_y: Vec<Complex64> = motors
        .iter()
        .zip(anchors)
        .map(|(st, a)| devices::load::motor_admittance(a, st))
        .collect();
    let refresh_shunts =
        |net: &mut NetworkState, motor_y: &[Complex64]| {
            for s in net.extra_shunts.iter_mut() {
                *s = Complex64::new(0.0, 0.0);
            }
            for (i, _) in case.loads.iter().enumerate() {
                net.extra_shunts[load_bus[i]] += comp_static[i] + motor_y[i];
            }
        };
    refresh_shunts(&mut net, &motor_y);

    let mut result = SimulationResult {
        time: Vec::with_capacity(n_samples),
        bus_ids: case.buses.iter().map(|b| b.id.clone()).collect(),
        vm: vec![Vec::with_capacity(n_samples); n],
        freq: vec![Vec::with_capacity(n_samples); n],
        iface_ids: case.interfaces.iter().map(|i| i.id.clone()).collect(),
        iface_mw: vec![Vec::with_capacity(n_samples); case.interfaces.len()],
        iface_mva: vec![Vec::with_capacity(n_samples); case.interfaces.len()],
        dev_channels: channels
            .iter()
            .map(|(name, _)| (name.clone(), Vec::with_capacity(n_samples)))
            .collect(),
        status: TerminationStatus::Completed,
        warnings: Vec::new(),
    };

    let mut v_now: Vec<Complex64> = init.bus_voltage.clone();
    let mut freq_dev = vec![0.0_f64; n];
    let alpha = 1.0 - (-config.dt / config.freq_filter_t).exp();

    let record =
        |result: &mut SimulationResult,
         t: f64,
         v: &[Complex64],
         freq_dev: &[f64],
         net: &NetworkState,
         machines: &[Option<devices::MachineState>],
         plants: &[Option<devices::IbrState>],
         motors: &[devices::MotorState]| {
            result.time.push(t);
            for i in 0..n {
                result.vm[i].push(v[i].norm());
                result.freq[i].push(f_nom + freq_dev[i]);
            }
            for (k, c) in iface_calc.iter().enumerate() {
                let (mw, mva) = iface_flow(c, net, v, s_base);
                result.iface_mw[k].push(mw);
                result.iface_mva[k].push(mva);
            }
            for (name, src) in &channels {
                let val = match src {
                    ChannelSource::Machine(i, f) => machines[*i].as_ref().map(|s| f(s)).unwrap_or(0.0),
                    ChannelSource::Plant(i, f) => plants[*i].as_ref().map(|s| f(s)).unwrap_or(0.0),
                    ChannelSource::Motor(i, f) => f(&motors[*i]),
                };
                result.dev_channels.get_mut(name).unwrap().push(val);
            }
        };

    record(&mut result, 0.0, &v_now, &freq_dev, &net, &machines, &plants, &motors);

    let mut lu = net.rebuild_y().lu();
    let mut next_event = 0usize;

    for k in 1..=n_steps {
        let t = k as f64 * config.dt;

        // 1. events in (t - dt, t]
        let mut y_dirty = false;
        while next_event < contingency.events.len()
            && contingency.events[next_event].t <= t + 1e-12
        {
            match net.apply_event(&contingency.events[next_event].kind) {
                Ok(Some(w)) => result.warnings.push(format!("t={t:.4}: {w}")),
                Ok(None) => {}
                Err(e) => return Err(e),
            }
            y_dirty = true;
            next_event += 1;
        }
        if y_dirty {
            lu = net.rebuild_y().lu();
        }

        // 2. network algebraics at frozen device states
        let inject = |v: &[Complex64]| -> Vec<Complex64> {
            let mut inj = vec![Complex64::new(0.0, 0.0); n];
            for (i, m) in case.machines.iter().enumerate() {
                if net.machine_online[i] {
                    if let Some(st) = &machines[i] {
                        inj[machine_bus[i]] +=
                            devices::machine::norton_injection(m, st, v[machine_bus[i]])
                                * machine_ratio[i];
                    }
                }
            }
            for (i, _p) in case.ibr_plants.iter().enumerate() {
                if net.plant_online[i] {
                    if let Some(st) = &plants[i] {
                        inj[plant_bus[i]] +=
                            devices::ibr::injection(st, v[plant_bus[i]]) * plant_ratio[i];
                    }
                }
            }
            for (i, l) in case.loads.iter().enumerate() {
                let vb = v[load_bus[i]];
                // Motor draw is fully stamped; compensate the static stamp.
                inj[load_bus[i]] +=
                    devices::load::zip_injection(l, &anchors[i], vb) + comp_static[i] * vb;
            }
            inj
        };

        let v_t = match solve_network_lu(
            &lu,
            inject,
            &v_now,
            config.network_tol,
            config.network_max_iter,
            t,
        ) {
            Ok((v, _)) => v,
            Err(_) => {
                result.status = TerminationStatus::Diverged {
                    t,
                    device: "network".to_string(),
                };
                break;
            }
        };

        // 3. bus frequency from the filtered angle derivative
        for i in 0..n {
            let dth = wrap_angle(v_t[i].arg() - v_now[i].arg());
            let raw = dth / (2.0 * std::f64::consts::PI * config.dt);
            freq_dev[i] += alpha * (raw - freq_dev[i]);
        }

        // 4. advance devices holding the network voltages
        let mut diverged: Option<String> = None;
        for (i, m) in case.machines.iter().enumerate() {
            if !net.machine_online[i] {
                continue;
            }
            if let Some(st) = machines[i].clone() {
                match devices::machine::machine_step(m, &st, v_t[machine_bus[i]], config.dt, omega_s)
                {
                    Ok((next, _)) => machines[i] = Some(next),
                    Err(_) => {
                        diverged = Some(m.id.clone());
                        break;
                    }
                }
            }
        }
        if let Some(device) = diverged {
            result.status = TerminationStatus::Diverged { t, device };
            break;
        }
        for (i, p) in case.ibr_plants.iter().enumerate() {
            if !net.plant_online[i] {
                continue;
            }
            if let Some(st) = plants[i].clone() {
                let f_bus = f_nom + freq_dev[plant_bus[i]];
                let (next, _) =
                    devices::ibr::ibr_step(p, &st, v_t[plant_bus[i]], f_bus, config.dt, &flags);
                plants[i] = Some(next);
            }
        }
        let mut motors_moved = false;
        for (i, l) in case.loads.iter().enumerate() {
            motors[i] = devices::load::motor_advance(l, &motors[i], v_t[load_bus[i]], config.dt, &flags);
            let y_new = devices::load::motor_admittance(&anchors[i], &motors[i]);
            if y_new != motor_y[i] {
                motor_y[i] = y_new;
                motors_moved = true;
            }
        }
        if motors_moved {
            refresh_shunts(&mut net, &motor_y);
            lu = net.rebuild_y().lu();
        }

        v_now = v_t;

        // 5. record
        record(&mut result, t, &v_now, &freq_dev, &net, &machines, &plants, &motors);
    }

    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{parse_case, parse_contingency_set};

    fn small_case() -> SystemCase {
        parse_case(
            r#"{
            "system": {"system_mva_base": 100.0, "nominal_frequency": 60.0},
            "buses": [
                {"id": "b1", "base_kv": 230.0, "type": "slack", "v_setpoint": 1.0, "area_id": "a1"},
                {"id": "b2", "base_kv": 230.0, "type": "PQ", "area_id": "a1"},
                {"id": "b3", "base_kv": 230.0, "type": "PQ", "area_id": "a1"}
            ],
            "branches": [
                {"id": "ln12", "from_bus": "b1", "to_bus": "b2", "r": 0.01, "x": 0.1, "rating": 250.0},
                {"id": "ln23a", "from_bus": "b2", "to_bus": "b3", "r": 0.01, "x": 0.2, "rating": 250.0},
                {"id": "ln23b", "from_bus": "b2", "to_bus": "b3", "r": 0.01, "x": 0.2, "rating": 250.0}
            ],
            "loads": [{"id": "ld1", "bus": "b3", "p": 50.0, "q": 10.0}],
            "areas": [{"id": "a1", "name": "only", "study_area": true}]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn constant_injection_converges_in_one_iteration() {
        let case = small_case();
        let net = NetworkState::from_case(&case);
        let y = net.rebuild_y();
        let i_const = vec![
            Complex64::new(0.5, -0.1),
            Complex64::new(0.0, 0.0),
            Complex64::new(-0.5, 0.1),
        ];
        let guess = vec![Complex64::new(1.0, 0.0); 3];
        let (v, iters) = solve_network(&y, |_| i_const.clone(), &guess, 1e-9, 20).unwrap();
        assert_eq!(iters, 1);
        // Agrees with the direct linear solve.
        let direct = solve_lu(&y.clone().lu(), &i_const).unwrap();
        assert!(max_abs_diff(&v, &direct) < 1e-12);
    }

    #[test]
    fn singular_matrix_is_an_error() {
        let y: DMatrix<Complex64> = DMatrix::zeros(2, 2);
        let guess = vec![Complex64::new(1.0, 0.0); 2];
        let r = solve_network(&y, |_| vec![Complex64::new(1.0, 0.0); 2], &guess, 1e-9, 5);
        assert!(r.is_err());
    }

    #[test]
    fn fault_apply_then_clear_restores_ybus_bit_identical() {
        let case = small_case();
        let mut net = NetworkState::from_case(&case);
        let y0 = net.rebuild_y();
        net.apply_event(&EventKind::BusFaultApply {
            bus: "b2".into(),
            admittance: Complex64::new(1e6, -1e6),
        })
        .unwrap();
        let y_fault = net.rebuild_y();
        assert!((y_fault[(1, 1)] - y0[(1, 1)] - Complex64::new(1e6, -1e6)).norm() < 1e-9);
        net.apply_event(&EventKind::BusFaultClear { bus: "b2".into() })
            .unwrap();
        let y1 = net.rebuild_y();
        assert_eq!(y0.as_slice().len(), y1.as_slice().len());
        for (a, b) in y0.as_slice().iter().zip(y1.as_slice()) {
            assert!(a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits());
        }
    }

    #[test]
    fn parallel_line_trip_halves_coupling() {
        let case = small_case();
        let mut net = NetworkState::from_case(&case);
        let y0 = net.rebuild_y();
        net.apply_event(&EventKind::BranchTrip {
            branch: "ln23b".into(),
        })
        .unwrap();
        let y1 = net.rebuild_y();
        // Off-diagonal b2-b3 is the sum of two identical stamps; one remains.
        assert!((y1[(1, 2)] - y0[(1, 2)] * 0.5).norm() < 1e-12);
    }

    #[test]
    fn double_trip_is_warned_not_fatal() {
        let case = small_case();
        let mut net = NetworkState::from_case(&case);
        assert!(net
            .apply_event(&EventKind::BranchTrip { branch: "ln23b".into() })
            .unwrap()
            .is_none());
        let w = net
            .apply_event(&EventKind::BranchTrip { branch: "ln23b".into() })
            .unwrap();
        assert!(w.is_some());
    }

    #[test]
    fn unknown_target_is_error() {
        let case = small_case();
        let mut net = NetworkState::from_case(&case);
        let err = net
            .apply_event(&EventKind::BranchTrip { branch: "nope".into() })
            .unwrap_err();
        assert!(matches!(err, SimError::UnknownEventTarget { .. }));
    }

    #[test]
    fn event_past_t_stop_rejected() {
        let case = small_case();
        let pf = crate::powerflow::solve_powerflow(&case).unwrap();
        let init = crate::powerflow::initialize_dynamic_states(&case, &pf).unwrap();
        let set = parse_contingency_set(
            r#"[{"id":"c1","label":"late","events":[{"t":25.0,"kind":"branch_trip","target":"ln23b"}]}]"#,
        )
        .unwrap();
        let cfg = SimulationConfig {
            t_stop: 20.0,
            ..SimulationConfig::default()
        };
        let err = run_simulation(&case, &init, &set[0], &cfg).unwrap_err();
        assert!(matches!(err, SimError::InvalidConfig(_)));
    }
}
