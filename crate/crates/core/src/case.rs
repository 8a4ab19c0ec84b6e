//! Network case model: buses, branches, machines, IBR plants, composite loads,
//! areas, interfaces, and contingency scripts, plus JSON parsing and validation.
//!
//! Case files are versioned JSON documents. All electrical quantities are per-unit
//! on `system_mva_base` except machine and motor internals, which are per-unit on
//! their own device base and converted where used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::CaseError;

/// Schema version accepted by this build.
pub const CASE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_mva_base")]
    pub system_mva_base: f64,
    #[serde(default = "default_frequency")]
    pub nominal_frequency: f64,
}

fn default_version() -> u32 {
    CASE_SCHEMA_VERSION
}
fn default_mva_base() -> f64 {
    100.0
}
fn default_frequency() -> f64 {
    60.0
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            version: CASE_SCHEMA_VERSION,
            system_mva_base: 100.0,
            nominal_frequency: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    #[serde(rename = "slack")]
    Slack,
    #[serde(rename = "PV")]
    Pv,
    #[serde(rename = "PQ")]
    Pq,
}

impl fmt::Display for BusType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BusType::Slack => write!(f, "slack"),
            BusType::Pv => write!(f, "PV"),
            BusType::Pq => write!(f, "PQ"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: String,
    pub base_kv: f64,
    #[serde(rename = "type")]
    pub bus_type: BusType,
    /// Voltage setpoint, required for PV and slack buses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_setpoint: Option<f64>,
    pub area_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub id: String,
    pub from_bus: String,
    pub to_bus: String,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance (half stamped at each end).
    #[serde(default)]
    pub b_shunt: f64,
    #[serde(default = "default_tap")]
    pub tap: f64,
    pub rating: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

fn default_tap() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fuel {
    Coal,
    Gas,
    Hydro,
    Nuclear,
    Other,
}

impl Fuel {
    /// Coal and gas units are the ones eligible for retirement.
    pub fn is_fossil(self) -> bool {
        matches!(self, Fuel::Coal | Fuel::Gas)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Governor {
    /// Speed droop, pu on machine base.
    #[serde(rename = "R", default = "default_droop")]
    pub r: f64,
    /// Servo lag time constant, s.
    #[serde(rename = "Tg", default = "default_tg")]
    pub tg: f64,
    /// Mechanical power ceiling, pu on machine base.
    #[serde(default = "default_p_max")]
    pub p_max: f64,
}

fn default_droop() -> f64 {
    0.05
}
fn default_tg() -> f64 {
    0.5
}
fn default_p_max() -> f64 {
    1.1
}

impl Default for Governor {
    fn default() -> Self {
        Self {
            r: default_droop(),
            tg: default_tg(),
            p_max: default_p_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exciter {
    #[serde(rename = "Ka", default = "default_ka")]
    pub ka: f64,
    #[serde(rename = "Ta", default = "default_ta")]
    pub ta: f64,
    #[serde(rename = "Efd_max", default = "default_efd_max")]
    pub efd_max: f64,
    #[serde(rename = "Efd_min", default = "default_efd_min")]
    pub efd_min: f64,
}

fn default_ka() -> f64 {
    50.0
}
fn default_ta() -> f64 {
    0.05
}
fn default_efd_max() -> f64 {
    5.0
}
fn default_efd_min() -> f64 {
    -5.0
}

impl Default for Exciter {
    fn default() -> Self {
        Self {
            ka: default_ka(),
            ta: default_ta(),
            efd_max: default_efd_max(),
            efd_min: default_efd_min(),
        }
    }
}

/// Synchronous machine: two-axis transient model parameters plus a droop
/// governor and a first-order exciter. Reactances and time constants are
/// per-unit on `mva_base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncMachine {
    pub id: String,
    pub bus: String,
    pub mva_base: f64,
    pub fuel: Fuel,
    pub p_out: f64,
    #[serde(default)]
    pub q_out: f64,
    /// Inertia constant, s on machine base.
    #[serde(rename = "H")]
    pub h: f64,
    /// Damping coefficient, pu on machine base.
    #[serde(rename = "D", default)]
    pub d: f64,
    pub xd_p: f64,
    pub xq_p: f64,
    pub xd: f64,
    pub xq: f64,
    #[serde(rename = "Td0_p")]
    pub td0_p: f64,
    #[serde(rename = "Tq0_p")]
    pub tq0_p: f64,
    #[serde(default)]
    pub governor: Governor,
    #[serde(default)]
    pub exciter: Exciter,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    Transmission,
    Distribution,
}

/// Inverter-based resource plant. Converter parameters are per-unit on
/// `mva_base`; the low-voltage power logic caps active current between
/// `zerox` (cap = 0, momentary cessation) and `lvpl_brkpt` (cap removed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbrPlant {
    pub id: String,
    pub bus: String,
    pub mva_base: f64,
    pub p_out: f64,
    #[serde(default)]
    pub q_out: f64,
    pub connection: Connection,
    #[serde(rename = "Tfilter", default = "default_tfilter")]
    pub tfilter: f64,
    /// Active-current recovery ramp, pu/s.
    #[serde(default = "default_rrpwr")]
    pub rrpwr: f64,
    #[serde(default = "default_lvpl_brkpt")]
    pub lvpl_brkpt: f64,
    #[serde(default = "default_zerox")]
    pub zerox: f64,
    /// LVPL slope, pu current per pu voltage above `zerox`.
    #[serde(default = "default_lvpl_gain")]
    pub lvpl_gain: f64,
    /// Voltage at which a distribution plant is fully tripped.
    #[serde(default = "default_v_trip_full")]
    pub v_trip_full: f64,
    /// Voltage below which a distribution plant starts partial tripping.
    #[serde(default = "default_v_trip_start")]
    pub v_trip_start: f64,
    /// Underfrequency full-trip threshold, Hz.
    #[serde(default = "default_f_trip")]
    pub f_trip: f64,
    /// Share of a tripped fraction that reconnects after voltage recovery.
    #[serde(default = "default_recoverable")]
    pub recoverable_fraction: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

fn default_tfilter() -> f64 {
    0.02
}
fn default_rrpwr() -> f64 {
    10.0
}
fn default_lvpl_brkpt() -> f64 {
    0.9
}
fn default_zerox() -> f64 {
    0.4
}
fn default_lvpl_gain() -> f64 {
    16.0
}
fn default_v_trip_full() -> f64 {
    0.45
}
fn default_v_trip_start() -> f64 {
    0.60
}
fn default_f_trip() -> f64 {
    59.3
}
fn default_recoverable() -> f64 {
    0.5
}

/// ZIP coefficients for the static part of a composite load.
/// Each axis (P, Q) must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipFractions {
    #[serde(default)]
    pub pz: f64,
    #[serde(default)]
    pub pi: f64,
    #[serde(default = "default_one")]
    pub pp: f64,
    #[serde(default = "default_one")]
    pub qz: f64,
    #[serde(default)]
    pub qi: f64,
    #[serde(default)]
    pub qp: f64,
}

fn default_one() -> f64 {
    1.0
}

impl Default for ZipFractions {
    fn default() -> Self {
        Self {
            pz: 0.0,
            pi: 0.0,
            pp: 1.0,
            qz: 1.0,
            qi: 0.0,
            qp: 0.0,
        }
    }
}

/// Aggregate load: static ZIP part plus an induction-motor part that can
/// stall under sustained low voltage. Motor impedances are per-unit on the
/// motor base (the motor's MW dispatch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeLoad {
    pub id: String,
    pub bus: String,
    pub p: f64,
    pub q: f64,
    #[serde(default)]
    pub zip: ZipFractions,
    #[serde(default)]
    pub motor_fraction: f64,
    #[serde(rename = "Vstall", default = "default_vstall")]
    pub vstall: f64,
    #[serde(rename = "Tstall", default = "default_tstall")]
    pub tstall: f64,
    #[serde(default = "default_r_stall")]
    pub r_stall: f64,
    #[serde(default = "default_x_stall")]
    pub x_stall: f64,
    #[serde(default = "default_thermal_trip_time")]
    pub thermal_trip_time: f64,
    #[serde(default = "default_thermal_trip_fraction")]
    pub thermal_trip_fraction: f64,
    #[serde(default = "default_true")]
    pub stall_enabled: bool,
}

fn default_vstall() -> f64 {
    0.42
}
fn default_tstall() -> f64 {
    0.033
}
fn default_r_stall() -> f64 {
    0.13
}
fn default_x_stall() -> f64 {
    0.14
}
fn default_thermal_trip_time() -> f64 {
    0.9
}
fn default_thermal_trip_fraction() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Area {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub study_area: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeteredEnd {
    From,
    To,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceMember {
    pub branch_id: String,
    pub metered_end: MeteredEnd,
    /// +1 or -1; orients the member into the interface sum.
    pub sign: i8,
}

/// A monitored set of tie branches with an aggregate MVA limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interface {
    pub id: String,
    pub name: String,
    pub members: Vec<InterfaceMember>,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemCase {
    pub system: SystemParams,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub machines: Vec<SyncMachine>,
    #[serde(default)]
    pub ibr_plants: Vec<IbrPlant>,
    #[serde(default)]
    pub loads: Vec<CompositeLoad>,
    pub areas: Vec<Area>,
    #[serde(default)]
    pub interfaces: Vec<Interface>,
}

impl SystemCase {
    pub fn bus_index(&self) -> BTreeMap<&str, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect()
    }

    pub fn find_bus(&self, id: &str) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn find_branch(&self, id: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn find_machine(&self, id: &str) -> Option<&SyncMachine> {
        self.machines.iter().find(|m| m.id == id)
    }

    pub fn find_plant(&self, id: &str) -> Option<&IbrPlant> {
        self.ibr_plants.iter().find(|p| p.id == id)
    }

    pub fn slack_bus(&self) -> Option<&Bus> {
        self.buses.iter().find(|b| b.bus_type == BusType::Slack)
    }

    pub fn study_area(&self) -> Option<&Area> {
        self.areas.iter().find(|a| a.study_area)
    }

    /// Serialize back to the on-disk JSON form.
    pub fn emit(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialization cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Contingencies
// ---------------------------------------------------------------------------

/// Default shunt admittance for a bolted three-phase fault. Large but finite
/// so the network matrix stays nonsingular.
pub const BOLTED_FAULT_ADMITTANCE: Complex64 = Complex64::new(1.0e6, -1.0e6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultAdmittance {
    pub g: f64,
    pub b: f64,
}

impl From<FaultAdmittance> for Complex64 {
    fn from(y: FaultAdmittance) -> Self {
        Complex64::new(y.g, y.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    BusFaultApply { bus: String, admittance: Complex64 },
    BusFaultClear { bus: String },
    BranchTrip { branch: String },
    MachineTrip { machine: String },
    IbrTrip { plant: String },
}

impl EventKind {
    pub fn target(&self) -> &str {
        match self {
            EventKind::BusFaultApply { bus, .. } => bus,
            EventKind::BusFaultClear { bus } => bus,
            EventKind::BranchTrip { branch } => branch,
            EventKind::MachineTrip { machine } => machine,
            EventKind::IbrTrip { plant } => plant,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EventKind::BusFaultApply { .. } => "bus_fault_apply",
            EventKind::BusFaultClear { .. } => "bus_fault_clear",
            EventKind::BranchTrip { .. } => "branch_trip",
            EventKind::MachineTrip { .. } => "machine_trip",
            EventKind::IbrTrip { .. } => "ibr_trip",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contingency {
    pub id: String,
    pub label: String,
    /// Time-sorted; every fault_apply has a later matching fault_clear.
    pub events: Vec<Event>,
}

impl Contingency {
    /// Measurement start for the dip/recovery criteria: the last fault-clear
    /// time, or the first event time for contingencies with no fault.
    pub fn measurement_start(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::BusFaultClear { .. }))
            .map(|e| e.t)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
            .or_else(|| self.events.first().map(|e| e.t))
            .unwrap_or(0.0)
    }

    pub fn max_event_time(&self) -> f64 {
        self.events.iter().map(|e| e.t).fold(0.0, f64::max)
    }
}

// Flat on-disk form; `kind` is validated by hand so unknown fields can still
// be rejected (serde's deny_unknown_fields does not compose with flatten).
#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct EventJson {
    t: f64,
    kind: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fault_admittance: Option<FaultAdmittance>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ContingencyJson {
    id: String,
    label: String,
    events: Vec<EventJson>,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn map_json_err(err: &serde_json::Error) -> CaseError {
    if err.is_syntax() || err.is_eof() {
        CaseError::Syntax {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    } else {
        CaseError::Schema {
            message: err.to_string(),
        }
    }
}

/// Parse a case file. Syntax and schema errors are reported with position or
/// field path; dangling references are rejected here, while numeric invariants
/// are the business of [`validate_case`].
pub fn parse_case(text: &str) -> Result<SystemCase, CaseError> {
    let case: SystemCase = serde_json::from_str(text).map_err(|e| map_json_err(&e))?;
    if case.system.version != CASE_SCHEMA_VERSION {
        return Err(CaseError::Schema {
            message: format!(
                "system.version: unsupported schema version {} (expected {})",
                case.system.version, CASE_SCHEMA_VERSION
            ),
        });
    }
    check_references(&case)?;
    Ok(case)
}

fn check_references(case: &SystemCase) -> Result<(), CaseError> {
    let buses: BTreeSet<&str> = case.buses.iter().map(|b| b.id.as_str()).collect();
    let areas: BTreeSet<&str> = case.areas.iter().map(|a| a.id.as_str()).collect();
    let branches: BTreeSet<&str> = case.branches.iter().map(|b| b.id.as_str()).collect();

    let missing_bus = |path: String, bus: &str| -> CaseError {
        CaseError::Reference {
            path,
            message: format!("unknown bus '{bus}'"),
        }
    };

    for (i, b) in case.buses.iter().enumerate() {
        if !areas.contains(b.area_id.as_str()) {
            return Err(CaseError::Reference {
                path: format!("buses[{i}].area_id"),
                message: format!("unknown area '{}'", b.area_id),
            });
        }
    }
    for (i, br) in case.branches.iter().enumerate() {
        if !buses.contains(br.from_bus.as_str()) {
            return Err(missing_bus(format!("branches[{i}].from_bus"), &br.from_bus));
        }
        if !buses.contains(br.to_bus.as_str()) {
            return Err(missing_bus(format!("branches[{i}].to_bus"), &br.to_bus));
        }
    }
    for (i, m) in case.machines.iter().enumerate() {
        if !buses.contains(m.bus.as_str()) {
            return Err(missing_bus(format!("machines[{i}].bus"), &m.bus));
        }
    }
    for (i, p) in case.ibr_plants.iter().enumerate() {
        if !buses.contains(p.bus.as_str()) {
            return Err(missing_bus(format!("ibr_plants[{i}].bus"), &p.bus));
        }
    }
    for (i, l) in case.loads.iter().enumerate() {
        if !buses.contains(l.bus.as_str()) {
            return Err(missing_bus(format!("loads[{i}].bus"), &l.bus));
        }
    }
    for (i, iface) in case.interfaces.iter().enumerate() {
        for (j, m) in iface.members.iter().enumerate() {
            if !branches.contains(m.branch_id.as_str()) {
                return Err(CaseError::Reference {
                    path: format!("interfaces[{i}].members[{j}].branch_id"),
                    message: format!("unknown branch '{}'", m.branch_id),
                });
            }
        }
    }
    Ok(())
}

/// Parse a contingency file: a JSON list of `{id, label, events}` objects.
/// Events come back time-sorted; fault apply/clear pairing is enforced.
pub fn parse_contingency_set(text: &str) -> Result<Vec<Contingency>, CaseError> {
    let raw: Vec<ContingencyJson> = serde_json::from_str(text).map_err(|e| map_json_err(&e))?;
    let mut out = Vec::with_capacity(raw.len());
    let mut seen = BTreeSet::new();
    for cj in raw {
        if !seen.insert(cj.id.clone()) {
            return Err(CaseError::Schema {
                message: format!("duplicate contingency id '{}'", cj.id),
            });
        }
        let mut events = Vec::with_capacity(cj.events.len());
        for ej in &cj.events {
            if ej.t < 0.0 || !ej.t.is_finite() {
                return Err(CaseError::Schema {
                    message: format!("contingency '{}': event time {} out of range", cj.id, ej.t),
                });
            }
            let kind = match ej.kind.as_str() {
                "bus_fault_apply" => EventKind::BusFaultApply {
                    bus: ej.target.clone(),
                    admittance: ej
                        .fault_admittance
                        .map(Complex64::from)
                        .unwrap_or(BOLTED_FAULT_ADMITTANCE),
                },
                "bus_fault_clear" => EventKind::BusFaultClear {
                    bus: ej.target.clone(),
                },
                "branch_trip" => EventKind::BranchTrip {
                    branch: ej.target.clone(),
                },
                "machine_trip" => EventKind::MachineTrip {
                    machine: ej.target.clone(),
                },
                "ibr_trip" => EventKind::IbrTrip {
                    plant: ej.target.clone(),
                },
                other => {
                    return Err(CaseError::Schema {
                        message: format!("contingency '{}': unknown event kind '{other}'", cj.id),
                    })
                }
            };
            if ej.fault_admittance.is_some() && !matches!(kind, EventKind::BusFaultApply { .. }) {
                return Err(CaseError::Schema {
                    message: format!(
                        "contingency '{}': fault_admittance only applies to bus_fault_apply",
                        cj.id
                    ),
                });
            }
            events.push(Event { t: ej.t, kind });
        }
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        check_fault_pairing(&cj.id, &events)?;
        out.push(Contingency {
            id: cj.id,
            label: cj.label,
            events,
        });
    }
    Ok(out)
}

fn check_fault_pairing(cid: &str, events: &[Event]) -> Result<(), CaseError> {
    // Every apply must be followed by a clear on the same bus.
    let mut open: BTreeMap<&str, f64> = BTreeMap::new();
    for e in events {
        match &e.kind {
            EventKind::BusFaultApply { bus, .. } => {
                if open.contains_key(bus.as_str()) {
                    return Err(CaseError::Schema {
                        message: format!(
                            "contingency '{cid}': fault re-applied at bus '{bus}' before clearing"
                        ),
                    });
                }
                open.insert(bus, e.t);
            }
            EventKind::BusFaultClear { bus } => {
                if open.remove(bus.as_str()).is_none() {
                    return Err(CaseError::Schema {
                        message: format!(
                            "contingency '{cid}': fault_clear at bus '{bus}' without a fault"
                        ),
                    });
                }
            }
            _ => {}
        }
    }
    if let Some((bus, t)) = open.into_iter().next() {
        return Err(CaseError::Schema {
            message: format!(
                "contingency '{cid}': fault applied at bus '{bus}' (t={t}) is never cleared"
            ),
        });
    }
    Ok(())
}

/// Serialize a contingency set back to the on-disk form.
pub fn emit_contingency_set(set: &[Contingency]) -> String {
    let raw: Vec<ContingencyJson> = set
        .iter()
        .map(|c| ContingencyJson {
            id: c.id.clone(),
            label: c.label.clone(),
            events: c
                .events
                .iter()
                .map(|e| {
                    let (kind, target, adm) = match &e.kind {
                        EventKind::BusFaultApply { bus, admittance } => (
                            "bus_fault_apply",
                            bus.clone(),
                            Some(FaultAdmittance {
                                g: admittance.re,
                                b: admittance.im,
                            }),
                        ),
                        EventKind::BusFaultClear { bus } => ("bus_fault_clear", bus.clone(), None),
                        EventKind::BranchTrip { branch } => ("branch_trip", branch.clone(), None),
                        EventKind::MachineTrip { machine } => {
                            ("machine_trip", machine.clone(), None)
                        }
                        EventKind::IbrTrip { plant } => ("ibr_trip", plant.clone(), None),
                    };
                    EventJson {
                        t: e.t,
                        kind: kind.to_string(),
                        target,
                        fault_admittance: adm,
                    }
                })
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("contingency serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationEntry {
    pub severity: Severity,
    /// Id of the offending element (or a comma list for multi-element breaches).
    pub element: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationEntry> {
        self.entries
            .iter()
            .filter(|e| e.severity == Severity::Error)
    }

    fn error(&mut self, element: impl Into<String>, message: impl Into<String>) {
        self.entries.push(ValidationEntry {
            severity: Severity::Error,
            element: element.into(),
            message: message.into(),
        });
    }
}

fn check_unique<'a, I: Iterator<Item = &'a str>>(kind: &str, ids: I, report: &mut ValidationReport) {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            report.error(id, format!("duplicate {kind} id"));
        }
    }
}

/// Check every structural and numeric invariant of the case. The report is
/// empty exactly when all invariants hold; reference failures are repeated
/// here so programmatically built cases get the same coverage as parsed ones.
pub fn validate_case(case: &SystemCase) -> ValidationReport {
    let mut rep = ValidationReport::default();

    check_unique("bus", case.buses.iter().map(|b| b.id.as_str()), &mut rep);
    check_unique("branch", case.branches.iter().map(|b| b.id.as_str()), &mut rep);
    check_unique("machine", case.machines.iter().map(|m| m.id.as_str()), &mut rep);
    check_unique("ibr plant", case.ibr_plants.iter().map(|p| p.id.as_str()), &mut rep);
    check_unique("load", case.loads.iter().map(|l| l.id.as_str()), &mut rep);
    check_unique("area", case.areas.iter().map(|a| a.id.as_str()), &mut rep);
    check_unique("interface", case.interfaces.iter().map(|i| i.id.as_str()), &mut rep);

    if case.system.system_mva_base <= 0.0 {
        rep.error("system", "system_mva_base must be positive");
    }
    if case.system.nominal_frequency <= 0.0 {
        rep.error("system", "nominal_frequency must be positive");
    }

    let buses: BTreeSet<&str> = case.buses.iter().map(|b| b.id.as_str()).collect();
    let areas: BTreeSet<&str> = case.areas.iter().map(|a| a.id.as_str()).collect();
    let branch_ids: BTreeSet<&str> = case.branches.iter().map(|b| b.id.as_str()).collect();

    let slack: Vec<&str> = case
        .buses
        .iter()
        .filter(|b| b.bus_type == BusType::Slack)
        .map(|b| b.id.as_str())
        .collect();
    match slack.len() {
        0 => rep.error("system", "no slack bus defined"),
        1 => {}
        _ => rep.error(
            slack.join(","),
            format!("{} slack buses defined, expected exactly one", slack.len()),
        ),
    }

    let study: Vec<&str> = case
        .areas
        .iter()
        .filter(|a| a.study_area)
        .map(|a| a.id.as_str())
        .collect();
    match study.len() {
        0 => rep.error("system", "no study area flagged"),
        1 => {}
        _ => rep.error(study.join(","), "more than one study area flagged"),
    }

    for b in &case.buses {
        if b.base_kv <= 0.0 {
            rep.error(&b.id, "base_kv must be positive");
        }
        if !areas.contains(b.area_id.as_str()) {
            rep.error(&b.id, format!("references unknown area '{}'", b.area_id));
        }
        match (b.bus_type, b.v_setpoint) {
            (BusType::Pv | BusType::Slack, None) => {
                rep.error(&b.id, format!("{} bus requires v_setpoint", b.bus_type));
            }
            (_, Some(v)) if !(0.8 < v && v < 1.2) => {
                rep.error(&b.id, format!("v_setpoint {v} outside (0.8, 1.2)"));
            }
            _ => {}
        }
    }

    for br in &case.branches {
        if br.x == 0.0 {
            rep.error(&br.id, "branch reactance x must be nonzero");
        }
        if br.rating <= 0.0 {
            rep.error(&br.id, "branch rating must be positive");
        }
        if br.tap <= 0.0 {
            rep.error(&br.id, "tap ratio must be positive");
        }
        for (end, bus) in [("from_bus", &br.from_bus), ("to_bus", &br.to_bus)] {
            if !buses.contains(bus.as_str()) {
                rep.error(&br.id, format!("{end} references unknown bus '{bus}'"));
            }
        }
    }

    for m in &case.machines {
        if !buses.contains(m.bus.as_str()) {
            rep.error(&m.id, format!("references unknown bus '{}'", m.bus));
        }
        if m.mva_base <= 0.0 {
            rep.error(&m.id, "mva_base must be positive");
        }
        if m.h <= 0.0 {
            rep.error(&m.id, "inertia constant H must be positive");
        }
        if !(m.governor.r > 0.0 && m.governor.r <= 0.1) {
            rep.error(&m.id, format!("governor droop R={} outside (0, 0.1]", m.governor.r));
        }
        if !(m.xd >= m.xd_p && m.xd_p > 0.0) {
            rep.error(&m.id, format!("reactances must satisfy xd >= xd_p > 0 (xd={}, xd_p={})", m.xd, m.xd_p));
        }
        if m.td0_p <= 0.0 || m.tq0_p <= 0.0 {
            rep.error(&m.id, "transient time constants must be positive");
        }
    }

    for p in &case.ibr_plants {
        if !buses.contains(p.bus.as_str()) {
            rep.error(&p.id, format!("references unknown bus '{}'", p.bus));
        }
        if p.mva_base <= 0.0 {
            rep.error(&p.id, "mva_base must be positive");
        }
        if !(0.0 <= p.zerox && p.zerox < p.lvpl_brkpt && p.lvpl_brkpt <= 1.0) {
            rep.error(
                &p.id,
                format!(
                    "LVPL thresholds must satisfy 0 <= zerox < lvpl_brkpt <= 1 (zerox={}, lvpl_brkpt={})",
                    p.zerox, p.lvpl_brkpt
                ),
            );
        }
        if !(0.0..=1.0).contains(&p.recoverable_fraction) {
            rep.error(&p.id, format!("recoverable_fraction {} outside [0, 1]", p.recoverable_fraction));
        }
        if p.v_trip_full >= p.v_trip_start {
            rep.error(
                &p.id,
                format!("v_trip_full {} must be below v_trip_start {}", p.v_trip_full, p.v_trip_start),
            );
        }
        if p.tfilter <= 0.0 || p.rrpwr <= 0.0 {
            rep.error(&p.id, "Tfilter and rrpwr must be positive");
        }
    }

    for l in &case.loads {
        if !buses.contains(l.bus.as_str()) {
            rep.error(&l.id, format!("references unknown bus '{}'", l.bus));
        }
        let z = &l.zip;
        for (axis, f) in [
            ("P", [z.pz, z.pi, z.pp]),
            ("Q", [z.qz, z.qi, z.qp]),
        ] {
            if f.iter().any(|&v| v < 0.0) {
                rep.error(&l.id, format!("ZIP {axis} fractions must be nonnegative"));
            }
            let sum: f64 = f.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                rep.error(&l.id, format!("ZIP {axis} fractions sum to {sum}, expected 1"));
            }
        }
        if !(0.0..=1.0).contains(&l.motor_fraction) {
            rep.error(&l.id, format!("motor_fraction {} outside [0, 1]", l.motor_fraction));
        }
        if l.motor_fraction > 0.0 {
            if l.vstall <= 0.0 || l.tstall <= 0.0 {
                rep.error(&l.id, "Vstall and Tstall must be positive");
            }
            if l.r_stall == 0.0 && l.x_stall == 0.0 {
                rep.error(&l.id, "stall impedance must be nonzero");
            }
            if !(0.0..=1.0).contains(&l.thermal_trip_fraction) {
                rep.error(&l.id, format!("thermal_trip_fraction {} outside [0, 1]", l.thermal_trip_fraction));
            }
        }
    }

    for iface in &case.interfaces {
        if iface.members.is_empty() {
            rep.error(&iface.id, "interface has no members");
        }
        if iface.limit <= 0.0 {
            rep.error(&iface.id, "interface limit must be positive");
        }
        for m in &iface.members {
            if !branch_ids.contains(m.branch_id.as_str()) {
                rep.error(&iface.id, format!("member references unknown branch '{}'", m.branch_id));
            }
            if m.sign != 1 && m.sign != -1 {
                rep.error(&iface.id, format!("member sign {} must be +1 or -1", m.sign));
            }
        }
    }

    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_case_text() -> &'static str {
        r#"{
            "system": {"system_mva_base": 100.0, "nominal_frequency": 60.0},
            "buses": [
                {"id": "b1", "base_kv": 230.0, "type": "slack", "v_setpoint": 1.0, "area_id": "a1"},
                {"id": "b2", "base_kv": 230.0, "type": "PQ", "area_id": "a1"}
            ],
            "branches": [
                {"id": "ln1", "from_bus": "b1", "to_bus": "b2", "r": 0.0, "x": 0.1, "rating": 250.0}
            ],
            "loads": [
                {"id": "ld1", "bus": "b2", "p": 100.0, "q": 0.0}
            ],
            "areas": [{"id": "a1", "name": "only", "study_area": true}]
        }"#
    }

    #[test]
    fn parses_minimal_two_bus_case() {
        let case = parse_case(minimal_case_text()).unwrap();
        assert_eq!(case.buses.len(), 2);
        assert_eq!(case.branches.len(), 1);
        assert_eq!(case.branches[0].tap, 1.0);
        assert!(case.branches[0].in_service);
        assert!(validate_case(&case).is_empty());
    }

    #[test]
    fn unknown_field_rejected() {
        let text = minimal_case_text().replacen("\"base_kv\"", "\"base_kV_typo\"", 1);
        let err = parse_case(&text).unwrap_err();
        assert!(matches!(err, CaseError::Schema { .. }), "{err}");
    }

    #[test]
    fn branch_to_missing_bus_is_reference_error() {
        let text = minimal_case_text().replace("\"to_bus\": \"b2\"", "\"to_bus\": \"b9\"");
        let err = parse_case(&text).unwrap_err();
        match err {
            CaseError::Reference { path, message } => {
                assert!(path.contains("to_bus"), "{path}");
                assert!(message.contains("b9"), "{message}");
            }
            other => panic!("expected reference error, got {other}"),
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_case("{\"system\": ").unwrap_err();
        assert!(matches!(err, CaseError::Syntax { .. }), "{err}");
    }

    #[test]
    fn two_slack_buses_flagged_naming_both() {
        let mut case = parse_case(minimal_case_text()).unwrap();
        case.buses[1].bus_type = BusType::Slack;
        case.buses[1].v_setpoint = Some(1.0);
        let rep = validate_case(&case);
        let entry = rep
            .entries
            .iter()
            .find(|e| e.message.contains("slack"))
            .expect("slack entry");
        assert!(entry.element.contains("b1") && entry.element.contains("b2"));
    }

    #[test]
    fn zerox_above_brkpt_flagged_on_plant() {
        let mut case = parse_case(minimal_case_text()).unwrap();
        case.ibr_plants.push(IbrPlant {
            id: "pv1".into(),
            bus: "b2".into(),
            mva_base: 100.0,
            p_out: 50.0,
            q_out: 0.0,
            connection: Connection::Transmission,
            tfilter: 0.02,
            rrpwr: 10.0,
            lvpl_brkpt: 0.9,
            zerox: 0.95,
            lvpl_gain: 2.0,
            v_trip_full: 0.45,
            v_trip_start: 0.6,
            f_trip: 59.3,
            recoverable_fraction: 0.5,
            in_service: true,
        });
        let rep = validate_case(&case);
        assert!(rep.entries.iter().any(|e| e.element == "pv1" && e.message.contains("zerox")));
    }

    #[test]
    fn contingency_three_event_fault() {
        let text = r#"[{
            "id": "c1", "label": "3-cycle fault with trip",
            "events": [
                {"t": 1.05, "kind": "bus_fault_clear", "target": "b2"},
                {"t": 1.0, "kind": "bus_fault_apply", "target": "b2"},
                {"t": 1.05, "kind": "branch_trip", "target": "ln1"}
            ]
        }]"#;
        let set = parse_contingency_set(text).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].events.len(), 3);
        // sorted by time
        assert_eq!(set[0].events[0].t, 1.0);
        assert!(matches!(set[0].events[0].kind, EventKind::BusFaultApply { .. }));
        // default bolted admittance applied
        if let EventKind::BusFaultApply { admittance, .. } = &set[0].events[0].kind {
            assert_eq!(*admittance, BOLTED_FAULT_ADMITTANCE);
        }
        assert!((set[0].measurement_start() - 1.05).abs() < 1e-12);
    }

    #[test]
    fn machine_trip_only_contingency() {
        let text = r#"[{"id": "c2", "label": "unit trip",
            "events": [{"t": 1.0, "kind": "machine_trip", "target": "g1"}]}]"#;
        let set = parse_contingency_set(text).unwrap();
        assert_eq!(set[0].events.len(), 1);
        assert!((set[0].measurement_start() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unmatched_fault_apply_rejected() {
        let text = r#"[{"id": "c3", "label": "no clear",
            "events": [{"t": 1.0, "kind": "bus_fault_apply", "target": "b2"}]}]"#;
        let err = parse_contingency_set(text).unwrap_err();
        assert!(err.to_string().contains("never cleared"), "{err}");
    }

    #[test]
    fn case_roundtrip_identity() {
        let case = parse_case(minimal_case_text()).unwrap();
        let reparsed = parse_case(&case.emit()).unwrap();
        assert_eq!(case, reparsed);
    }
}
