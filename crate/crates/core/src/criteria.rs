//! Dynamic-performance criteria and the base-case comparison rule.
//!
//! Four checks per contingency: bus frequency held below the floor for longer
//! than the allowed duration, voltage recovery to a fraction of the initial
//! voltage within a deadline, and two voltage-dip duration limits — plus tie
//! interface MVA limits. Sub-threshold durations are contiguous intervals, not
//! cumulative sums; boundary comparisons are strict ("more than"), and all
//! voltage checks are measured from fault clearing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::sim::{SensitivityFlags, SimulationResult, TerminationStatus};
use crate::ThresholdError;

/// Slack added to strict duration comparisons so a dip lasting exactly the
/// limit never trips on float representation of the sample grid.
pub const DURATION_EPS: f64 = 1e-9;

/// Slack on interface overflow detection, MVA.
pub const OVERFLOW_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriteriaConfig {
    /// Frequency floor, Hz.
    pub freq_floor: f64,
    /// Longest tolerated contiguous time below the floor, s (6 cycles).
    pub freq_max_duration: f64,
    /// Voltage must recover to this fraction of initial.
    pub recovery_fraction: f64,
    /// ... within this many seconds after clearing.
    pub recovery_deadline: f64,
    pub dip70_fraction: f64,
    /// Longest tolerated contiguous dip below 70%, s (30 cycles).
    pub dip70_max: f64,
    pub dip80_fraction: f64,
    /// Longest tolerated contiguous dip below 80%, s.
    pub dip80_max: f64,
    /// Checks are measured from this time (fault-clear per contingency).
    pub measurement_start: f64,
}

impl Default for CriteriaConfig {
    fn default() -> Self {
        Self {
            freq_floor: 59.6,
            freq_max_duration: 0.1,
            recovery_fraction: 0.8,
            recovery_deadline: 20.0,
            dip70_fraction: 0.7,
            dip70_max: 0.5,
            dip80_fraction: 0.8,
            dip80_max: 2.0,
            measurement_start: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "freq")]
    Freq,
    #[serde(rename = "v_recovery")]
    VRecovery,
    #[serde(rename = "v_dip70")]
    VDip70,
    #[serde(rename = "v_dip80")]
    VDip80,
    #[serde(rename = "tie_line")]
    TieLine,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Freq => "freq",
            Category::VRecovery => "v_recovery",
            Category::VDip70 => "v_dip70",
            Category::VDip80 => "v_dip80",
            Category::TieLine => "tie_line",
        }
    }

    pub fn all() -> [Category; 5] {
        [
            Category::Freq,
            Category::VRecovery,
            Category::VDip70,
            Category::VDip80,
            Category::TieLine,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub contingency: String,
    pub category: Category,
    /// Bus or interface id.
    pub element: String,
    /// Interval length in seconds, or MVA overflow for tie_line.
    pub worst: f64,
    pub onset_s: f64,
}

/// Maximal contiguous runs of `below`-predicate samples starting at or after
/// `start`; returns (onset time, run length in samples, duration).
fn sub_threshold_runs(
    time: &[f64],
    series: &[f64],
    start: f64,
    below: impl Fn(f64) -> bool,
) -> Vec<(f64, usize, f64)> {
    let dt = if time.len() >= 2 { time[1] - time[0] } else { 0.0 };
    let mut runs = Vec::new();
    let mut run_start: Option<(f64, usize)> = None;
    for (k, (&t, &x)) in time.iter().zip(series).enumerate() {
        if t < start - DURATION_EPS {
            continue;
        }
        if below(x) {
            match &mut run_start {
                Some((_, count)) => *count += 1,
                None => run_start = Some((t, 1)),
            }
        } else if let Some((t0, count)) = run_start.take() {
            runs.push((t0, count, count as f64 * dt));
        }
        let _ = k;
    }
    if let Some((t0, count)) = run_start {
        runs.push((t0, count, count as f64 * dt));
    }
    runs
}

/// One violation per maximal contiguous interval with `f < freq_floor` longer
/// than the allowed duration, per bus. Measured from `cfg.measurement_start`.
pub fn check_frequency(
    cid: &str,
    bus_ids: &[String],
    time: &[f64],
    freq: &[Vec<f64>],
    cfg: &CriteriaConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, bus) in bus_ids.iter().enumerate() {
        for (onset, _count, dur) in
            sub_threshold_runs(time, &freq[i], cfg.measurement_start, |f| f < cfg.freq_floor)
        {
            if dur > cfg.freq_max_duration + DURATION_EPS {
                out.push(Violation {
                    contingency: cid.to_string(),
                    category: Category::Freq,
                    element: bus.clone(),
                    worst: dur,
                    onset_s: onset,
                });
            }
        }
    }
    out
}

/// Voltage recovery and the two dip-duration checks, all measured from the
/// clearing time in `cfg.measurement_start` against the pre-disturbance
/// voltage `v_init` (sample 0).
pub fn check_voltage(
    cid: &str,
    bus_ids: &[String],
    time: &[f64],
    vm: &[Vec<f64>],
    v_init: &[f64],
    cfg: &CriteriaConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let t_end = time.last().copied().unwrap_or(0.0);
    let clear = cfg.measurement_start;
    let deadline = (clear + cfg.recovery_deadline).min(t_end);
    for (i, bus) in bus_ids.iter().enumerate() {
        let v0 = v_init[i];

        // (a) recovery
        let threshold = cfg.recovery_fraction * v0;
        let recovered = time
            .iter()
            .zip(&vm[i])
            .any(|(&t, &v)| t >= clear - DURATION_EPS && t <= deadline + DURATION_EPS && v >= threshold);
        if !recovered {
            out.push(Violation {
                contingency: cid.to_string(),
                category: Category::VRecovery,
                element: bus.clone(),
                worst: deadline - clear,
                onset_s: clear,
            });
        }

        // (b) and (c): contiguous dips
        for (cat, frac, max_dur) in [
            (Category::VDip70, cfg.dip70_fraction, cfg.dip70_max),
            (Category::VDip80, cfg.dip80_fraction, cfg.dip80_max),
        ] {
            let lim = frac * v0;
            for (onset, _count, dur) in sub_threshold_runs(time, &vm[i], clear, |v| v < lim) {
                if dur > max_dur + DURATION_EPS {
                    out.push(Violation {
                        contingency: cid.to_string(),
                        category: cat,
                        element: bus.clone(),
                        worst: dur,
                        onset_s: onset,
                    });
                }
            }
        }
    }
    out
}

/// One violation per interface whose MVA flow ever exceeds its limit; worst
/// value is the peak overflow.
pub fn check_interfaces(
    cid: &str,
    iface_ids: &[String],
    time: &[f64],
    mva: &[Vec<f64>],
    limits: &[f64],
    _cfg: &CriteriaConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, iface) in iface_ids.iter().enumerate() {
        let mut peak = f64::NEG_INFINITY;
        let mut peak_t = 0.0;
        for (&t, &s) in time.iter().zip(&mva[i]) {
            if s > peak {
                peak = s;
                peak_t = t;
            }
        }
        if peak > limits[i] + OVERFLOW_EPS {
            out.push(Violation {
                contingency: cid.to_string(),
                category: Category::TieLine,
                element: iface.clone(),
                worst: peak - limits[i],
                onset_s: peak_t,
            });
        }
    }
    out
}

/// Evaluate every criterion for one simulation result.
pub fn evaluate_result(
    cid: &str,
    result: &SimulationResult,
    iface_limits: &[f64],
    cfg: &CriteriaConfig,
) -> Vec<Violation> {
    let v_init: Vec<f64> = result.vm.iter().map(|s| s[0]).collect();
    let mut v = check_frequency(cid, &result.bus_ids, &result.time, &result.freq, cfg);
    v.extend(check_voltage(
        cid,
        &result.bus_ids,
        &result.time,
        &result.vm,
        &v_init,
        cfg,
    ));
    v.extend(check_interfaces(
        cid,
        &result.iface_ids,
        &result.time,
        &result.iface_mva,
        iface_limits,
        cfg,
    ));
    v
}

// ---------------------------------------------------------------------------
// Profiles and the acceptance rule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Divergence {
    pub contingency: String,
    pub t: f64,
    pub device: String,
}

/// Per-contingency outcome fed into the profile.
#[derive(Debug, Clone)]
pub struct ContingencyOutcome {
    pub id: String,
    pub violations: Vec<Violation>,
    pub diverged: Option<Divergence>,
}

/// The comparison unit of the whole method: per-contingency, per-category
/// violation counts plus per-interface peak overflows, tagged with the
/// sensitivity flags the scan ran under. Absent keys mean zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViolationProfile {
    pub flags: SensitivityFlags,
    pub contingencies: Vec<String>,
    /// contingency -> category name -> count
    pub counts: BTreeMap<String, BTreeMap<String, u32>>,
    /// contingency -> interface -> peak overflow MVA
    pub overflow: BTreeMap<String, BTreeMap<String, f64>>,
    pub divergences: Vec<Divergence>,
}

impl ViolationProfile {
    pub fn count(&self, cid: &str, cat: Category) -> u32 {
        self.counts
            .get(cid)
            .and_then(|m| m.get(cat.as_str()))
            .copied()
            .unwrap_or(0)
    }

    pub fn overflow_of(&self, cid: &str, iface: &str) -> f64 {
        self.overflow
            .get(cid)
            .and_then(|m| m.get(iface))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn total_violations(&self) -> u32 {
        self.counts.values().flat_map(|m| m.values()).sum()
    }
}

/// Aggregate per-contingency outcomes into a profile.
pub fn build_profile(outcomes: &[ContingencyOutcome], flags: SensitivityFlags) -> ViolationProfile {
    let mut counts: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    let mut overflow: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut divergences = Vec::new();
    let mut contingencies = Vec::new();
    for oc in outcomes {
        contingencies.push(oc.id.clone());
        for v in &oc.violations {
            *counts
                .entry(oc.id.clone())
                .or_default()
                .entry(v.category.as_str().to_string())
                .or_insert(0) += 1;
            if v.category == Category::TieLine {
                let slot = overflow
                    .entry(oc.id.clone())
                    .or_default()
                    .entry(v.element.clone())
                    .or_insert(0.0);
                if v.worst > *slot {
                    *slot = v.worst;
                }
            }
        }
        if let Some(d) = &oc.diverged {
            divergences.push(d.clone());
        }
    }
    ViolationProfile {
        flags,
        contingencies,
        counts,
        overflow,
        divergences,
    }
}

pub fn outcome_from_status(cid: &str, status: &TerminationStatus) -> Option<Divergence> {
    match status {
        TerminationStatus::Completed => None,
        TerminationStatus::Diverged { t, device } => Some(Divergence {
            contingency: cid.to_string(),
            t: *t,
            device: device.clone(),
        }),
    }
}

/// One acceptance-rule breach.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Breach {
    pub contingency: String,
    pub kind: String,
    pub element: String,
    pub candidate: f64,
    pub base: f64,
}

impl Breach {
    pub fn summary(&self) -> String {
        format!(
            "{}: {} {} {} vs base {}",
            self.contingency, self.kind, self.element, self.candidate, self.base
        )
    }
}

/// The base-case comparison rule: the candidate is acceptable iff it creates
/// no additional violations — per (contingency, category) its count is at most
/// the base count, per (contingency, interface) its overflow is at most the
/// base overflow plus `overflow_tol`, and it has no divergence absent from the
/// base. The goal is not to improve on the base case, only not to be worse.
pub fn profile_acceptable(
    candidate: &ViolationProfile,
    base: &ViolationProfile,
    overflow_tol: f64,
) -> Result<(bool, Vec<Breach>), ThresholdError> {
    if candidate.flags != base.flags {
        return Err(ThresholdError::FlagMismatch {
            candidate: candidate.flags.label(),
            base: base.flags.label(),
        });
    }
    let cset: BTreeSet<&String> = candidate.contingencies.iter().collect();
    let bset: BTreeSet<&String> = base.contingencies.iter().collect();
    if cset != bset {
        return Err(ThresholdError::ContingencySetMismatch);
    }

    let mut breaches = Vec::new();
    for cid in &candidate.contingencies {
        for cat in Category::all() {
            let c = candidate.count(cid, cat);
            let b = base.count(cid, cat);
            if c > b {
                breaches.push(Breach {
                    contingency: cid.clone(),
                    kind: format!("count.{}", cat.as_str()),
                    element: String::new(),
                    candidate: c as f64,
                    base: b as f64,
                });
            }
        }
        // Every interface that overflows anywhere in either profile.
        let mut ifaces: BTreeSet<&String> = BTreeSet::new();
        if let Some(m) = candidate.overflow.get(cid) {
            ifaces.extend(m.keys());
        }
        if let Some(m) = base.overflow.get(cid) {
            ifaces.extend(m.keys());
        }
        for iface in ifaces {
            let c = candidate.overflow_of(cid, iface);
            let b = base.overflow_of(cid, iface);
            if c > b + overflow_tol + OVERFLOW_EPS {
                breaches.push(Breach {
                    contingency: cid.clone(),
                    kind: "overflow".to_string(),
                    element: iface.clone(),
                    candidate: c,
                    base: b,
                });
            }
        }
    }
    let base_div: BTreeSet<&String> = base.divergences.iter().map(|d| &d.contingency).collect();
    for d in &candidate.divergences {
        if !base_div.contains(&d.contingency) {
            breaches.push(Breach {
                contingency: d.contingency.clone(),
                kind: "divergence".to_string(),
                element: d.device.clone(),
                candidate: d.t,
                base: f64::NAN,
            });
        }
    }
    Ok((breaches.is_empty(), breaches))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn freq_dip_over_limit_is_one_violation() {
        let cfg = CriteriaConfig::default();
        let dt = 0.05;
        let time = grid(100, dt);
        // 59.5 Hz over samples 10..13 (3 samples = 0.15 s), 60 elsewhere.
        let f: Vec<f64> = (0..100)
            .map(|k| if (10..13).contains(&k) { 59.5 } else { 60.0 })
            .collect();
        let v = check_frequency("c", &["b1".into()], &time, &[f], &cfg);
        assert_eq!(v.len(), 1);
        assert!((v[0].worst - 0.15).abs() < 1e-12);
        assert_eq!(v[0].category, Category::Freq);
    }

    #[test]
    fn constant_nominal_frequency_clean() {
        let cfg = CriteriaConfig::default();
        let time = grid(50, 0.05);
        let f = vec![60.0; 50];
        assert!(check_frequency("c", &["b1".into()], &time, &[f], &cfg).is_empty());
    }

    #[test]
    fn dip_of_exactly_the_limit_is_not_a_violation() {
        let cfg = CriteriaConfig::default();
        let dt = 0.05;
        let time = grid(100, dt);
        // Exactly 0.1 s = 2 samples below the floor: strictly "more than".
        let f: Vec<f64> = (0..100)
            .map(|k| if (10..12).contains(&k) { 59.5 } else { 60.0 })
            .collect();
        assert!(check_frequency("c", &["b1".into()], &time, &[f], &cfg).is_empty());
        // One more sample crosses the strict boundary.
        let f3: Vec<f64> = (0..100)
            .map(|k| if (10..13).contains(&k) { 59.5 } else { 60.0 })
            .collect();
        assert_eq!(check_frequency("c", &["b1".into()], &time, &[f3], &cfg).len(), 1);
    }

    #[test]
    fn voltage_dip70_but_not_dip80() {
        let mut cfg = CriteriaConfig::default();
        cfg.measurement_start = 1.0;
        let dt = 0.05;
        let time = grid(500, dt);
        // After clearing: 0.65 pu for 0.6 s then full recovery.
        let vm: Vec<f64> = time
            .iter()
            .map(|&t| {
                if (1.0..1.6).contains(&t) {
                    0.65
                } else {
                    1.0
                }
            })
            .collect();
        let vs = check_voltage("c", &["b1".into()], &time, &[vm], &[1.0], &cfg);
        let dips70: Vec<_> = vs.iter().filter(|v| v.category == Category::VDip70).collect();
        let dips80: Vec<_> = vs.iter().filter(|v| v.category == Category::VDip80).collect();
        assert_eq!(dips70.len(), 1);
        assert!((dips70[0].worst - 0.6).abs() < 1e-9);
        assert!(dips80.is_empty());
        assert!(vs.iter().all(|v| v.category != Category::VRecovery));
    }

    #[test]
    fn healthy_voltage_no_violations() {
        let cfg = CriteriaConfig::default();
        let time = grid(100, 0.05);
        let vm = vec![0.95; 100];
        assert!(check_voltage("c", &["b1".into()], &time, &[vm], &[1.0], &cfg).is_empty());
    }

    #[test]
    fn stuck_voltage_recovery_and_dip80_only() {
        let mut cfg = CriteriaConfig::default();
        cfg.measurement_start = 1.0;
        let dt = 0.05;
        let time = grid(401, dt); // 20 s
        let vm: Vec<f64> = time.iter().map(|&t| if t >= 1.0 { 0.75 } else { 1.0 }).collect();
        let vs = check_voltage("c", &["b1".into()], &time, &[vm], &[1.0], &cfg);
        let cats: Vec<Category> = vs.iter().map(|v| v.category).collect();
        assert!(cats.contains(&Category::VRecovery));
        assert!(cats.contains(&Category::VDip80));
        assert!(!cats.contains(&Category::VDip70));
    }

    #[test]
    fn interface_overflow_magnitude() {
        let cfg = CriteriaConfig::default();
        let time = grid(10, 0.1);
        let mut mva = vec![400.0; 10];
        mva[4] = 510.0;
        let v = check_interfaces("c", &["tie".into()], &time, &[mva], &[450.0], &cfg);
        assert_eq!(v.len(), 1);
        assert!((v[0].worst - 60.0).abs() < 1e-9);
        let under = vec![430.0; 10];
        assert!(check_interfaces("c", &["tie".into()], &time, &[under], &[450.0], &cfg).is_empty());
    }

    fn profile_with(cid: &str, cat: Category, count: u32) -> ViolationProfile {
        let mut p = ViolationProfile {
            flags: SensitivityFlags::default(),
            contingencies: vec![cid.to_string()],
            counts: BTreeMap::new(),
            overflow: BTreeMap::new(),
            divergences: Vec::new(),
        };
        if count > 0 {
            p.counts
                .entry(cid.to_string())
                .or_default()
                .insert(cat.as_str().to_string(), count);
        }
        p
    }

    #[test]
    fn acceptability_is_reflexive() {
        let p = profile_with("c1", Category::VDip70, 2);
        let (ok, breaches) = profile_acceptable(&p, &p, 0.5).unwrap();
        assert!(ok);
        assert!(breaches.is_empty());
    }

    #[test]
    fn extra_violation_is_named() {
        let base = profile_with("c1", Category::VDip70, 1);
        let cand = profile_with("c1", Category::VDip70, 2);
        let (ok, breaches) = profile_acceptable(&cand, &base, 0.5).unwrap();
        assert!(!ok);
        assert_eq!(breaches.len(), 1);
        assert_eq!(breaches[0].contingency, "c1");
        assert!(breaches[0].kind.contains("v_dip70"));
    }

    #[test]
    fn overflow_within_tolerance_is_acceptable() {
        let mut base = profile_with("c1", Category::TieLine, 1);
        base.overflow
            .entry("c1".into())
            .or_default()
            .insert("tie".into(), 60.0);
        let mut cand = base.clone();
        cand.overflow.get_mut("c1").unwrap().insert("tie".into(), 60.4);
        let (ok, _) = profile_acceptable(&cand, &base, 0.5).unwrap();
        assert!(ok);
        cand.overflow.get_mut("c1").unwrap().insert("tie".into(), 60.6);
        let (ok, breaches) = profile_acceptable(&cand, &base, 0.5).unwrap();
        assert!(!ok);
        assert_eq!(breaches[0].kind, "overflow");
    }

    #[test]
    fn new_divergence_is_unacceptable() {
        let base = profile_with("c1", Category::Freq, 0);
        let mut cand = base.clone();
        cand.divergences.push(Divergence {
            contingency: "c1".into(),
            t: 3.0,
            device: "network".into(),
        });
        let (ok, breaches) = profile_acceptable(&cand, &base, 0.5).unwrap();
        assert!(!ok);
        assert_eq!(breaches[0].kind, "divergence");
    }

    #[test]
    fn mismatched_contingency_sets_error() {
        let base = profile_with("c1", Category::Freq, 0);
        let cand = profile_with("c2", Category::Freq, 0);
        assert!(matches!(
            profile_acceptable(&cand, &base, 0.5),
            Err(ThresholdError::ContingencySetMismatch)
        ));
    }

    #[test]
    fn mismatched_flags_error() {
        let base = profile_with("c1", Category::Freq, 0);
        let mut cand = base.clone();
        cand.flags.motor_stall = true;
        assert!(matches!(
            profile_acceptable(&cand, &base, 0.5),
            Err(ThresholdError::FlagMismatch { .. })
        ));
    }
}
