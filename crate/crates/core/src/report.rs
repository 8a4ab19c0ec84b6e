//! On-disk report schemas (versioned JSON), CSV dumps, and the run manifest.
//! All writers are pure functions of their inputs; map keys are ordered so
//! reruns are byte-identical.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::criteria::{Breach, ViolationProfile, Violation};
use crate::powerflow::PowerFlowSolution;
use crate::sim::SimulationResult;
use crate::threshold::ThresholdResult;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct ViolationReport<'a> {
    pub version: u32,
    pub entries: &'a [Violation],
}

pub fn violation_report_json(violations: &[Violation]) -> String {
    let mut s = serde_json::to_string_pretty(&ViolationReport {
        version: REPORT_SCHEMA_VERSION,
        entries: violations,
    })
    .expect("report serialization cannot fail");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
pub struct ProfileReport<'a> {
    pub version: u32,
    pub profile: &'a ViolationProfile,
}

pub fn profile_json(profile: &ViolationProfile) -> String {
    let mut s = serde_json::to_string_pretty(&ProfileReport {
        version: REPORT_SCHEMA_VERSION,
        profile,
    })
    .expect("profile serialization cannot fail");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
pub struct DiffReport<'a> {
    pub version: u32,
    pub acceptable: bool,
    pub breaches: &'a [Breach],
}

pub fn diff_json(acceptable: bool, breaches: &[Breach]) -> String {
    let mut s = serde_json::to_string_pretty(&DiffReport {
        version: REPORT_SCHEMA_VERSION,
        acceptable,
        breaches,
    })
    .expect("diff serialization cannot fail");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
pub struct ThresholdReport<'a> {
    pub version: u32,
    pub results: &'a BTreeMap<String, ThresholdResult>,
}

pub fn threshold_report_json(results: &BTreeMap<String, ThresholdResult>) -> String {
    let mut s = serde_json::to_string_pretty(&ThresholdReport {
        version: REPORT_SCHEMA_VERSION,
        results,
    })
    .expect("threshold serialization cannot fail");
    s.push('\n');
    s
}

/// Bus solution dump: `bus,vm,va,p_inj,q_inj` with angles in degrees and
/// injections in system-base pu.
pub fn powerflow_csv(bus_ids: &[String], sol: &PowerFlowSolution) -> String {
    let mut out = String::from("bus,vm,va,p_inj,q_inj\n");
    for (i, id) in bus_ids.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            id,
            sol.vm[i],
            sol.va[i].to_degrees(),
            sol.bus_p[i],
            sol.bus_q[i]
        ));
    }
    out
}

/// Time-series dump: first column `time_s`, one column per recorded channel.
pub fn timeseries_csv(result: &SimulationResult) -> String {
    let names = result.channel_names();
    let mut out = String::from("time_s");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    let columns: Vec<&[f64]> = names
        .iter()
        .map(|n| result.channel(n).expect("listed channel exists"))
        .collect();
    for (k, t) in result.time.iter().enumerate() {
        out.push_str(&format!("{t}"));
        for col in &columns {
            out.push_str(&format!(",{}", col[k]));
        }
        out.push('\n');
    }
    out
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Written before any long run starts (empty inventory) and finalized after,
/// so interrupted runs stay diagnosable. Input hashes pin what was run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub case_path: String,
    pub case_sha256: String,
    pub contingency_path: Option<String>,
    pub contingency_sha256: Option<String>,
    pub config: serde_json::Value,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialization cannot fail");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn powerflow_csv_shape() {
        let sol = PowerFlowSolution {
            vm: vec![1.0, 0.99],
            va: vec![0.0, -0.1],
            bus_p: vec![1.0, -1.0],
            bus_q: vec![0.2, -0.1],
            device_p: BTreeMap::new(),
            device_q: BTreeMap::new(),
            slack_absorption_mw: 0.0,
            iterations: 3,
            max_mismatch: 1e-9,
        };
        let csv = powerflow_csv(&["b1".into(), "b2".into()], &sol);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "bus,vm,va,p_inj,q_inj");
        assert!(lines[1].starts_with("b1,1,0,"));
    }
}
