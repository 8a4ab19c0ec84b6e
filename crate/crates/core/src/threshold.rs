//! Penetration measurement, fossil-unit retirement with IBR additions, the
//! contingency scan, and the bisection to the largest acceptable penetration.
//!
//! Penetration is the fraction of study-area MW output supplied by IBR
//! plants. Raising it retires fossil units whole, in plan order, as long as
//! the retired capacity fits inside the required IBR increase; the additions
//! carry the increase and the slack machine's schedule is trimmed by the
//! remainder so total study-area generation is preserved exactly. The
//! bisection maintains an [acceptable, unacceptable] bracket and never assumes
//! acceptability is monotone: the final level is re-verified by a fresh
//! evaluation and the probe log exposes every observation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{BusType, Connection, Contingency, IbrPlant, SystemCase};
use crate::criteria::{
    build_profile, evaluate_result, outcome_from_status, profile_acceptable, Breach,
    ContingencyOutcome, CriteriaConfig, ViolationProfile, Violation,
};
use crate::powerflow::{initialize_dynamic_states, solve_powerflow};
use crate::sim::{run_simulation, SensitivityFlags, SimulationConfig};
use crate::ThresholdError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanAddition {
    pub bus: String,
    pub max_mw: f64,
    pub connection: Connection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispatchRule {
    /// Spread the required IBR output across additions by max-MW share.
    Proportional,
    /// Fill additions to their max in list order.
    Priority,
}

/// Ordered retirement/addition schedule mapping a target penetration to a
/// concrete modified case.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenetrationPlan {
    pub retirement_order: Vec<String>,
    pub additions: Vec<PlanAddition>,
    pub dispatch_rule: DispatchRule,
}

impl PenetrationPlan {
    pub fn parse(text: &str) -> Result<Self, crate::CaseError> {
        serde_json::from_str(text).map_err(|e| crate::CaseError::Schema {
            message: e.to_string(),
        })
    }
}

fn study_bus_set(case: &SystemCase) -> Result<std::collections::BTreeSet<&str>, ThresholdError> {
    let study = case
        .study_area()
        .ok_or_else(|| ThresholdError::Unreachable {
            target: f64::NAN,
            reason: "case has no study area".into(),
        })?;
    Ok(case
        .buses
        .iter()
        .filter(|b| b.area_id == study.id)
        .map(|b| b.id.as_str())
        .collect())
}

/// IBR share of in-service MW generation in the study area.
pub fn measure_penetration(case: &SystemCase) -> Result<f64, ThresholdError> {
    let study = study_bus_set(case)?;
    let sync: f64 = case
        .machines
        .iter()
        .filter(|m| m.in_service && study.contains(m.bus.as_str()))
        .map(|m| m.p_out)
        .sum();
    let ibr: f64 = case
        .ibr_plants
        .iter()
        .filter(|p| p.in_service && study.contains(p.bus.as_str()))
        .map(|p| p.p_out)
        .sum();
    let total = sync + ibr;
    if total <= 0.0 {
        return Err(ThresholdError::ZeroGeneration);
    }
    Ok(ibr / total)
}

/// Build the case at penetration `p`: whole-unit retirements in plan order,
/// additions sized to carry the IBR increase, slack schedule trimmed by the
/// remainder, and the power flow re-solved to confirm the case is operable.
pub fn apply_penetration(
    case: &SystemCase,
    p: f64,
    plan: &PenetrationPlan,
) -> Result<SystemCase, ThresholdError> {
    let study = study_bus_set(case)?;
    let unreachable = |reason: String| ThresholdError::Unreachable { target: p, reason };

    // Plan sanity against this case.
    for mid in &plan.retirement_order {
        let m = case
            .find_machine(mid)
            .ok_or_else(|| unreachable(format!("retirement lists unknown machine '{mid}'")))?;
        if !m.fuel.is_fossil() {
            return Err(unreachable(format!(
                "machine '{mid}' has fuel {:?}, only coal/gas retire",
                m.fuel
            )));
        }
        if !study.contains(m.bus.as_str()) {
            return Err(unreachable(format!("machine '{mid}' is outside the study area")));
        }
    }
    for a in &plan.additions {
        if case.find_bus(&a.bus).is_none() {
            return Err(unreachable(format!("addition bus '{}' does not exist", a.bus)));
        }
    }

    let sync0: f64 = case
        .machines
        .iter()
        .filter(|m| m.in_service && study.contains(m.bus.as_str()))
        .map(|m| m.p_out)
        .sum();
    let ibr0: f64 = case
        .ibr_plants
        .iter()
        .filter(|pl| pl.in_service && study.contains(pl.bus.as_str()))
        .map(|pl| pl.p_out)
        .sum();
    let g_total = sync0 + ibr0;
    if g_total <= 0.0 {
        return Err(ThresholdError::ZeroGeneration);
    }

    let delta_ibr = p * g_total - ibr0;
    if delta_ibr < -1e-6 {
        return Err(unreachable(format!(
            "target below the current penetration {:.4}",
            ibr0 / g_total
        )));
    }
    let add_capacity: f64 = plan.additions.iter().map(|a| a.max_mw).sum();
    if delta_ibr > add_capacity + 1e-9 {
        return Err(unreachable(format!(
            "needs {delta_ibr:.1} MW of additions, plan capacity is {add_capacity:.1} MW"
        )));
    }

    let mut modified = case.clone();

    // Whole-unit retirements while they fit inside the IBR increase.
    let mut retired_mw = 0.0;
    for mid in &plan.retirement_order {
        let m = modified
            .machines
            .iter_mut()
            .find(|m| &m.id == mid)
            .expect("checked above");
        if !m.in_service {
            continue;
        }
        if retired_mw + m.p_out <= delta_ibr + 1e-9 {
            retired_mw += m.p_out;
            m.in_service = false;
        } else {
            break;
        }
    }

    // A PV bus whose machines are all retired loses voltage control.
    for i in 0..modified.buses.len() {
        if modified.buses[i].bus_type == BusType::Pv {
            let has_machine = modified
                .machines
                .iter()
                .any(|m| m.in_service && m.bus == modified.buses[i].id);
            if !has_machine {
                modified.buses[i].bus_type = BusType::Pq;
            }
        }
    }

    // Additions carry the full increase.
    if delta_ibr > 1e-9 {
        let outputs: Vec<f64> = match plan.dispatch_rule {
            DispatchRule::Proportional => plan
                .additions
                .iter()
                .map(|a| delta_ibr * a.max_mw / add_capacity)
                .collect(),
            DispatchRule::Priority => {
                let mut remaining = delta_ibr;
                plan.additions
                    .iter()
                    .map(|a| {
                        let out = remaining.min(a.max_mw);
                        remaining -= out;
                        out
                    })
                    .collect()
            }
        };
        for (k, (a, out)) in plan.additions.iter().zip(outputs).enumerate() {
            if out <= 1e-9 {
                continue;
            }
            modified.ibr_plants.push(IbrPlant {
                id: format!("padd{}_{}", k + 1, a.bus),
                bus: a.bus.clone(),
                mva_base: a.max_mw * 1.1,
                p_out: out,
                q_out: 0.0,
                connection: a.connection,
                tfilter: 0.02,
                rrpwr: 10.0,
                lvpl_brkpt: 0.9,
                zerox: 0.4,
                lvpl_gain: 16.0,
                v_trip_full: 0.45,
                v_trip_start: 0.60,
                f_trip: 59.3,
                recoverable_fraction: 0.5,
                in_service: true,
            });
        }
    }

    // Trim the slack schedule by the unretired remainder so study-area MW
    // is conserved exactly and the measured penetration lands on p.
    let trim = delta_ibr - retired_mw;
    if trim > 1e-9 {
        let slack_bus = modified
            .slack_bus()
            .ok_or_else(|| unreachable("case has no slack bus".into()))?
            .id
            .clone();
        let slack_machines: Vec<usize> = modified
            .machines
            .iter()
            .enumerate()
            .filter(|(_, m)| m.in_service && m.bus == slack_bus)
            .map(|(i, _)| i)
            .collect();
        if slack_machines.is_empty() {
            return Err(unreachable("no in-service machine at the slack bus".into()));
        }
        let slack_total: f64 = slack_machines.iter().map(|&i| modified.machines[i].p_out).sum();
        if trim > slack_total + 1e-9 {
            return Err(unreachable(format!(
                "slack schedule {slack_total:.1} MW cannot absorb a {trim:.1} MW trim"
            )));
        }
        for &i in &slack_machines {
            let share = modified.machines[i].p_out / slack_total;
            modified.machines[i].p_out -= trim * share;
        }
    }

    // The modified case must still solve.
    solve_powerflow(&modified)?;
    Ok(modified)
}

// ---------------------------------------------------------------------------
// Contingency scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub profile: ViolationProfile,
    /// Every violation, ordered by contingency id then category.
    pub violations: Vec<Violation>,
}

/// Run every contingency (in parallel) and grade the results. Output order is
/// contingency-id order, independent of worker scheduling.
pub fn run_scan(
    case: &SystemCase,
    contingencies: &[Contingency],
    sim_cfg: &SimulationConfig,
    criteria: &CriteriaConfig,
) -> Result<ScanOutput, ThresholdError> {
    let pf = solve_powerflow(case)?;
    let init = initialize_dynamic_states(case, &pf)?;
    let limits: Vec<f64> = case.interfaces.iter().map(|i| i.limit).collect();

    let mut ordered: Vec<&Contingency> = contingencies.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let outcomes: Result<Vec<ContingencyOutcome>, ThresholdError> = ordered
        .par_iter()
        .map(|ctg| {
            let result = run_simulation(case, &init, ctg, sim_cfg).map_err(|e| {
                ThresholdError::Unreachable {
                    target: f64::NAN,
                    reason: format!("contingency '{}': {e}", ctg.id),
                }
            })?;
            let mut cfg = criteria.clone();
            cfg.measurement_start = ctg.measurement_start();
            let violations = evaluate_result(&ctg.id, &result, &limits, &cfg);
            Ok(ContingencyOutcome {
                id: ctg.id.clone(),
                diverged: outcome_from_status(&ctg.id, &result.status),
                violations,
            })
        })
        .collect();
    let outcomes = outcomes?;

    let mut violations: Vec<Violation> = outcomes.iter().flat_map(|o| o.violations.clone()).collect();
    violations.sort_by(|a, b| {
        a.contingency
            .cmp(&b.contingency)
            .then(a.category.cmp(&b.category))
            .then(a.element.cmp(&b.element))
            .then(a.onset_s.total_cmp(&b.onset_s))
    });
    Ok(ScanOutput {
        profile: build_profile(&outcomes, sim_cfg.flags),
        violations,
    })
}

// ---------------------------------------------------------------------------
// Threshold search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub p_lo: f64,
    pub p_hi: f64,
    /// Bracket-width stop, penetration fraction.
    pub tol: f64,
    /// Overflow slack of the acceptance rule, MVA.
    pub overflow_tol: f64,
    pub criteria: CriteriaConfig,
    pub sim: SimulationConfig,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            p_lo: 0.0,
            p_hi: 1.0,
            tol: 0.01,
            overflow_tol: 0.5,
            criteria: CriteriaConfig::default(),
            sim: SimulationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePhase {
    BracketLow,
    BracketHigh,
    Probe,
    FinalVerify,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub phase: ProbePhase,
    pub p: f64,
    pub acceptable: bool,
    pub diff_summary: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RejectedProbe {
    pub p: f64,
    pub diff: Vec<Breach>,
    pub profile: ViolationProfile,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdResult {
    pub p_star: f64,
    pub flags: SensitivityFlags,
    pub profile_at_p_star: ViolationProfile,
    /// The unacceptable bracket end, at most tol above p_star (absent when
    /// the whole bracket was acceptable).
    pub rejected: Option<RejectedProbe>,
    pub iterations: Vec<ProbeRecord>,
}

impl ThresholdResult {
    /// Bisection probes only (bracket checks and the final verification are
    /// logged under their own phases).
    pub fn probe_evaluations(&self) -> usize {
        self.iterations
            .iter()
            .filter(|r| r.phase == ProbePhase::Probe)
            .count()
    }
}

/// Evaluate one penetration level against the base profile.
pub fn evaluate_penetration(
    case_at_p: &SystemCase,
    contingencies: &[Contingency],
    base_profile: &ViolationProfile,
    cfg: &ThresholdConfig,
) -> Result<(bool, ViolationProfile, Vec<Breach>), ThresholdError> {
    let scan = run_scan(case_at_p, contingencies, &cfg.sim, &cfg.criteria)?;
    let (ok, diff) = profile_acceptable(&scan.profile, base_profile, cfg.overflow_tol)?;
    Ok((ok, scan.profile, diff))
}

/// Generic bisection over any (deterministic) evaluator. Exposed so the
/// search arithmetic can be exercised against stub evaluators.
pub fn bisect_threshold<E>(
    mut evaluate: E,
    cfg: &ThresholdConfig,
    flags: SensitivityFlags,
) -> Result<ThresholdResult, ThresholdError>
where
    E: FnMut(f64) -> Result<(bool, ViolationProfile, Vec<Breach>), ThresholdError>,
{
    let mut log = Vec::new();
    let mut run = |phase: ProbePhase,
                   p: f64,
                   log: &mut Vec<ProbeRecord>|
     -> Result<(bool, ViolationProfile, Vec<Breach>), ThresholdError> {
        let (ok, profile, diff) = evaluate(p)?;
        log.push(ProbeRecord {
            phase,
            p,
            acceptable: ok,
            diff_summary: diff.iter().map(|b| b.summary()).collect(),
        });
        Ok((ok, profile, diff))
    };

    let (lo_ok, lo_profile, lo_diff) = run(ProbePhase::BracketLow, cfg.p_lo, &mut log)?;
    if !lo_ok {
        return Err(ThresholdError::BaseLevelFails(
            lo_diff
                .first()
                .map(|b| b.summary())
                .unwrap_or_else(|| "unacceptable at p_lo".into()),
        ));
    }
    let (hi_ok, hi_profile, hi_diff) = run(ProbePhase::BracketHigh, cfg.p_hi, &mut log)?;
    if hi_ok {
        return Ok(ThresholdResult {
            p_star: cfg.p_hi,
            flags,
            profile_at_p_star: hi_profile,
            rejected: None,
            iterations: log,
        });
    }

    let mut a = cfg.p_lo;
    let mut b = cfg.p_hi;
    let mut a_profile = lo_profile;
    let mut rejected = RejectedProbe {
        p: cfg.p_hi,
        diff: hi_diff,
        profile: hi_profile,
    };
    while b - a > cfg.tol {
        let mid = 0.5 * (a + b);
        let (ok, profile, diff) = run(ProbePhase::Probe, mid, &mut log)?;
        if ok {
            a = mid;
            a_profile = profile;
        } else {
            b = mid;
            rejected = RejectedProbe {
                p: mid,
                diff,
                profile,
            };
        }
    }

    // Fresh evaluation at the answer; a deterministic pipeline must agree.
    let (ok, profile, _) = run(ProbePhase::FinalVerify, a, &mut log)?;
    if !ok {
        return Err(ThresholdError::NotReproducible { p: a });
    }
    let _ = a_profile;
    Ok(ThresholdResult {
        p_star: a,
        flags,
        profile_at_p_star: profile,
        rejected: Some(rejected),
        iterations: log,
    })
}

/// Full-pipeline threshold search against a precomputed base profile.
pub fn find_threshold_with_base(
    case: &SystemCase,
    plan: &PenetrationPlan,
    contingencies: &[Contingency],
    base_profile: &ViolationProfile,
    cfg: &ThresholdConfig,
) -> Result<ThresholdResult, ThresholdError> {
    bisect_threshold(
        |p| {
            let case_p = apply_penetration(case, p, plan)?;
            evaluate_penetration(&case_p, contingencies, base_profile, cfg)
        },
        cfg,
        cfg.sim.flags,
    )
}

/// Profile the base case under the configured flags, then search.
pub fn find_threshold(
    case: &SystemCase,
    plan: &PenetrationPlan,
    contingencies: &[Contingency],
    cfg: &ThresholdConfig,
) -> Result<ThresholdResult, ThresholdError> {
    let base = run_scan(case, contingencies, &cfg.sim, &cfg.criteria)?.profile;
    find_threshold_with_base(case, plan, contingencies, &base, cfg)
}

/// The four-entry sensitivity sweep: none, momentary cessation, distribution
/// PV, motor stall. The base case is re-profiled under each flag set before
/// its search, so candidate and yardstick always share flags.
pub fn run_sensitivity_suite(
    case: &SystemCase,
    plan: &PenetrationPlan,
    contingencies: &[Contingency],
    cfg: &ThresholdConfig,
) -> Result<BTreeMap<String, ThresholdResult>, ThresholdError> {
    let mut out = BTreeMap::new();
    for flags in [
        SensitivityFlags::default(),
        SensitivityFlags {
            momentary_cessation: true,
            ..SensitivityFlags::default()
        },
        SensitivityFlags {
            distribution_pv: true,
            ..SensitivityFlags::default()
        },
        SensitivityFlags {
            motor_stall: true,
            ..SensitivityFlags::default()
        },
    ] {
        let mut fcfg = cfg.clone();
        fcfg.sim.flags = flags;
        let result = find_threshold(case, plan, contingencies, &fcfg)?;
        out.insert(flags.label(), result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_profile(flags: SensitivityFlags) -> ViolationProfile {
        ViolationProfile {
            flags,
            contingencies: vec!["c1".into()],
            counts: BTreeMap::new(),
            overflow: BTreeMap::new(),
            divergences: Vec::new(),
        }
    }

    fn stub(boundary: f64) -> impl FnMut(f64) -> Result<(bool, ViolationProfile, Vec<Breach>), ThresholdError>
    {
        move |p: f64| {
            let ok = p <= boundary;
            let diff = if ok {
                Vec::new()
            } else {
                vec![Breach {
                    contingency: "c1".into(),
                    kind: "count.v_dip70".into(),
                    element: String::new(),
                    candidate: 1.0,
                    base: 0.0,
                }]
            };
            Ok((ok, empty_profile(SensitivityFlags::default()), diff))
        }
    }

    fn cfg(lo: f64, hi: f64, tol: f64) -> ThresholdConfig {
        ThresholdConfig {
            p_lo: lo,
            p_hi: hi,
            tol,
            ..ThresholdConfig::default()
        }
    }

    #[test]
    fn stub_boundary_028_lands_in_band() {
        let r = bisect_threshold(stub(0.28), &cfg(0.11, 0.41, 0.01), SensitivityFlags::default())
            .unwrap();
        assert!(r.p_star >= 0.27 && r.p_star <= 0.28, "p_star {}", r.p_star);
        assert!(r.probe_evaluations() <= 5, "{} probes", r.probe_evaluations());
        let rej = r.rejected.unwrap();
        assert!(rej.p <= r.p_star + 0.01 + 1e-12);
    }

    #[test]
    fn stub_boundary_015_lands_lower() {
        let r = bisect_threshold(stub(0.15), &cfg(0.11, 0.41, 0.01), SensitivityFlags::default())
            .unwrap();
        assert!(r.p_star >= 0.14 && r.p_star <= 0.15, "p_star {}", r.p_star);
        assert!(r.probe_evaluations() <= 5);
    }

    #[test]
    fn always_acceptable_returns_p_hi_without_probes() {
        let r = bisect_threshold(stub(2.0), &cfg(0.11, 0.41, 0.01), SensitivityFlags::default())
            .unwrap();
        assert_eq!(r.p_star, 0.41);
        assert_eq!(r.probe_evaluations(), 0);
        assert!(r.rejected.is_none());
    }

    #[test]
    fn failing_base_level_is_an_error() {
        let err = bisect_threshold(stub(0.05), &cfg(0.11, 0.41, 0.01), SensitivityFlags::default())
            .unwrap_err();
        assert!(matches!(err, ThresholdError::BaseLevelFails(_)), "{err}");
    }

    #[test]
    fn probe_count_matches_bracket_arithmetic() {
        // ceil(log2((hi - lo) / tol)) probes for a monotone evaluator.
        let lo = 0.11;
        let hi = 0.41;
        let tol = 0.01;
        let expected = ((hi - lo) / tol as f64).log2().ceil() as usize;
        let r = bisect_threshold(stub(0.28), &cfg(lo, hi, tol), SensitivityFlags::default())
            .unwrap();
        assert_eq!(r.probe_evaluations(), expected);
    }

    #[test]
    fn bisection_respects_tolerance_band_for_many_boundaries() {
        for k in 0..40 {
            let beta = 0.12 + 0.007 * k as f64;
            let r = bisect_threshold(stub(beta), &cfg(0.11, 0.41, 0.01), SensitivityFlags::default())
                .unwrap();
            assert!(
                r.p_star <= beta + 1e-12 && r.p_star >= beta - 0.01 - 1e-12,
                "beta {beta}: p_star {}",
                r.p_star
            );
        }
    }
}
