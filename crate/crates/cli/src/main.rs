//! Command-line front end: power flow, single simulations, contingency scans,
//! and penetration threshold searches.
//!
//! Exit codes: 0 success, 1 violations with divergence, 2 input error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ibrlim_core::case::{parse_case, parse_contingency_set, validate_case, Contingency, SystemCase};
use ibrlim_core::criteria::CriteriaConfig;
use ibrlim_core::powerflow::{initialize_dynamic_states, solve_powerflow};
use ibrlim_core::report::{
    powerflow_csv, profile_json, sha256_hex, threshold_report_json, timeseries_csv,
    violation_report_json, RunManifest,
};
use ibrlim_core::sim::{run_simulation, SensitivityFlags, SimulationConfig};
use ibrlim_core::svg::{emit_svg_scan_chart, emit_svg_timeseries, SeriesStyle};
use ibrlim_core::threshold::{
    apply_penetration, find_threshold, run_scan, run_sensitivity_suite, PenetrationPlan,
    ThresholdConfig, ThresholdResult,
};
use ibrlim_core::{CaseError, PowerFlowError, SimError, ThresholdError};

const EXIT_OK: i32 = 0;
const EXIT_DIVERGENCE: i32 = 1;
const EXIT_INPUT: i32 = 2;
const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser)]
#[command(name = "ibrlim", version, about = "Transient-stability scans and IBR penetration limits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Args, Clone)]
struct SharedSimArgs {
    /// Integration step, s.
    #[arg(long, default_value_t = 1.0 / 240.0)]
    dt: f64,
    /// Simulation horizon, s.
    #[arg(long, default_value_t = 20.0)]
    tstop: f64,
    /// Momentary cessation sensitivity.
    #[arg(long, value_enum, default_value = "off")]
    mc: OnOff,
    /// Treat solar as distribution-connected.
    #[arg(long = "dist-pv", value_enum, default_value = "off")]
    dist_pv: OnOff,
    /// Induction-motor stalling sensitivity.
    #[arg(long = "motor-stall", value_enum, default_value = "off")]
    motor_stall: OnOff,
    /// Worker threads for the contingency scan (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl SharedSimArgs {
    fn flags(&self) -> SensitivityFlags {
        SensitivityFlags {
            momentary_cessation: self.mc.as_bool(),
            distribution_pv: self.dist_pv.as_bool(),
            motor_stall: self.motor_stall.as_bool(),
        }
    }

    fn sim_config(&self) -> SimulationConfig {
        SimulationConfig {
            dt: self.dt,
            t_stop: self.tstop,
            flags: self.flags(),
            ..SimulationConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the AC power flow and dump the bus solution as CSV.
    Powerflow {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one contingency and dump the recorded time series as CSV.
    Simulate {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        contingencies: PathBuf,
        /// Contingency id to run; omit for a no-event run.
        #[arg(long)]
        id: Option<String>,
        /// Extra device channels to record (repeatable), e.g. dev.g1.omega.
        #[arg(long)]
        record: Vec<String>,
        /// Also emit voltage/frequency trace SVGs.
        #[arg(long, default_value_t = false)]
        svg: bool,
        #[command(flatten)]
        shared: SharedSimArgs,
    },
    /// Run the whole contingency set and grade it against the criteria.
    Scan {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        contingencies: PathBuf,
        #[command(flatten)]
        shared: SharedSimArgs,
    },
    /// Bisect the IBR penetration to the acceptability boundary.
    Threshold {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        contingencies: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Penetration bracket, e.g. 0.08:0.72.
        #[arg(long)]
        bracket: String,
        #[arg(long, default_value_t = 0.01)]
        tol: f64,
        /// Which sensitivity to search under; `all` runs the full suite.
        #[arg(long, default_value = "none")]
        sensitivity: String,
        #[command(flatten)]
        shared: SharedSimArgs,
    },
}

fn main() {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            classify_error(&e)
        }
    };
    std::process::exit(code);
}

/// Input-shaped failures exit 2; numerical failures exit 3.
fn classify_error(e: &anyhow::Error) -> i32 {
    if let Some(pf) = e.downcast_ref::<PowerFlowError>() {
        return match pf {
            PowerFlowError::NotConverged { .. }
            | PowerFlowError::SingularJacobian { .. }
            | PowerFlowError::InfeasibleEquilibrium { .. } => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
    }
    if let Some(te) = e.downcast_ref::<ThresholdError>() {
        return match te {
            ThresholdError::PowerFlow(pf) => match pf {
                PowerFlowError::NotConverged { .. }
                | PowerFlowError::SingularJacobian { .. }
                | PowerFlowError::InfeasibleEquilibrium { .. } => EXIT_NUMERICAL,
                _ => EXIT_INPUT,
            },
            ThresholdError::NotReproducible { .. } => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
    }
    if let Some(se) = e.downcast_ref::<SimError>() {
        return match se {
            SimError::NetworkDiverged { .. } | SimError::DeviceDiverged { .. } => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
    }
    if e.downcast_ref::<CaseError>().is_some() {
        return EXIT_INPUT;
    }
    EXIT_INPUT
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_case(path: &Path) -> anyhow::Result<(SystemCase, String)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading case file {}", path.display()))?;
    let case = parse_case(&text)?;
    let report = validate_case(&case);
    if !report.is_empty() {
        for e in &report.entries {
            eprintln!("validation: [{}] {}", e.element, e.message);
        }
        return Err(anyhow!(CaseError::Schema {
            message: format!("case failed validation with {} finding(s)", report.entries.len()),
        }));
    }
    Ok((case, text))
}

fn load_contingencies(path: &Path) -> anyhow::Result<(Vec<Contingency>, String)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading contingency file {}", path.display()))?;
    let set = parse_contingency_set(&text)?;
    Ok((set, text))
}

fn write_out(dir: &Path, name: &str, content: &str) -> anyhow::Result<String> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(name.to_string())
}

struct ManifestPen {
    dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestPen {
    fn start(
        dir: &Path,
        command: &str,
        case_path: &Path,
        case_text: &str,
        ctg: Option<(&Path, &str)>,
        config: serde_json::Value,
    ) -> anyhow::Result<Self> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            case_path: case_path.display().to_string(),
            case_sha256: sha256_hex(case_text.as_bytes()),
            contingency_path: ctg.map(|(p, _)| p.display().to_string()),
            contingency_sha256: ctg.map(|(_, t)| sha256_hex(t.as_bytes())),
            config,
            started_unix_s: unix_now(),
            finished_unix_s: None,
            outputs: Vec::new(),
        };
        let pen = ManifestPen {
            dir: dir.to_path_buf(),
            manifest,
        };
        write_out(&pen.dir, "run_manifest.json", &pen.manifest.to_json())?;
        Ok(pen)
    }

    fn finish(mut self, outputs: Vec<String>) -> anyhow::Result<()> {
        self.manifest.outputs = outputs;
        self.manifest.finished_unix_s = Some(unix_now());
        write_out(&self.dir, "run_manifest.json", &self.manifest.to_json())?;
        Ok(())
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    if jobs == 0 {
        Ok(f())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .context("building worker pool")?;
        Ok(pool.install(f))
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Powerflow { case, out } => cmd_powerflow(&case, &out),
        Command::Simulate {
            case,
            contingencies,
            id,
            record,
            svg,
            shared,
        } => cmd_simulate(&case, &contingencies, id.as_deref(), &record, svg, &shared),
        Command::Scan {
            case,
            contingencies,
            shared,
        } => cmd_scan(&case, &contingencies, &shared),
        Command::Threshold {
            case,
            contingencies,
            plan,
            bracket,
            tol,
            sensitivity,
            shared,
        } => cmd_threshold(&case, &contingencies, &plan, &bracket, tol, &sensitivity, &shared),
    }
}

fn cmd_powerflow(case_path: &Path, out: &Path) -> anyhow::Result<i32> {
    let (case, _) = load_case(case_path)?;
    let sol = solve_powerflow(&case)?;
    let bus_ids: Vec<String> = case.buses.iter().map(|b| b.id.clone()).collect();
    write_out(out, "powerflow.csv", &powerflow_csv(&bus_ids, &sol))?;
    println!(
        "converged in {} iterations, max mismatch {:.3e} pu, slack absorption {:.2} MW",
        sol.iterations, sol.max_mismatch, sol.slack_absorption_mw
    );
    Ok(EXIT_OK)
}

fn trace_svgs(
    result: &ibrlim_core::sim::SimulationResult,
    tag: &str,
    out: &Path,
) -> anyhow::Result<Vec<String>> {
    let mut outputs = Vec::new();
    // Voltages normalized per bus so the 0.7/0.8-of-initial criteria lines are exact.
    let norm: Vec<Vec<f64>> = result
        .vm
        .iter()
        .map(|s| {
            let v0 = s[0].max(1e-9);
            s.iter().map(|v| v / v0).collect()
        })
        .collect();
    let v_series: Vec<(String, &[f64], &[f64])> = result
        .bus_ids
        .iter()
        .zip(&norm)
        .map(|(id, s)| (id.clone(), result.time.as_slice(), s.as_slice()))
        .collect();
    let v_style = SeriesStyle {
        title: format!("Voltage response, {tag}"),
        y_label: "|V| / initial".to_string(),
        ref_lines: vec![(0.8, "80% of initial".into()), (0.7, "70% of initial".into())],
        ..SeriesStyle::default()
    };
    outputs.push(write_out(
        out,
        &format!("voltage_{tag}.svg"),
        &emit_svg_timeseries(&v_series, &v_style),
    )?);
    let f_series: Vec<(String, &[f64], &[f64])> = result
        .bus_ids
        .iter()
        .zip(&result.freq)
        .map(|(id, s)| (id.clone(), result.time.as_slice(), s.as_slice()))
        .collect();
    let f_style = SeriesStyle {
        title: format!("Frequency response, {tag}"),
        y_label: "Hz".to_string(),
        ref_lines: vec![(59.6, "59.6 Hz".into())],
        ..SeriesStyle::default()
    };
    outputs.push(write_out(
        out,
        &format!("frequency_{tag}.svg"),
        &emit_svg_timeseries(&f_series, &f_style),
    )?);
    Ok(outputs)
}

fn cmd_simulate(
    case_path: &Path,
    ctg_path: &Path,
    id: Option<&str>,
    record: &[String],
    svg: bool,
    shared: &SharedSimArgs,
) -> anyhow::Result<i32> {
    let (case, case_text) = load_case(case_path)?;
    let (set, ctg_text) = load_contingencies(ctg_path)?;
    let contingency = match id {
        Some(id) => set
            .iter()
            .find(|c| c.id == id)
            .cloned()
            .ok_or_else(|| anyhow!(CaseError::Schema {
                message: format!("contingency '{id}' not in {}", ctg_path.display()),
            }))?,
        None => Contingency {
            id: "no-event".to_string(),
            label: "no-event equilibrium run".to_string(),
            events: Vec::new(),
        },
    };
    let mut cfg = shared.sim_config();
    cfg.record = record.to_vec();

    let pen = ManifestPen::start(
        &shared.out,
        "simulate",
        case_path,
        &case_text,
        Some((ctg_path, &ctg_text)),
        serde_json::json!({ "config": cfg, "contingency": contingency.id }),
    )?;

    let pf = solve_powerflow(&case)?;
    let init = initialize_dynamic_states(&case, &pf)?;
    let result = run_simulation(&case, &init, &contingency, &cfg)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let mut outputs = vec![write_out(
        &shared.out,
        &format!("sim_{}.csv", contingency.id),
        &timeseries_csv(&result),
    )?];
    if svg {
        outputs.extend(trace_svgs(&result, &contingency.id, &shared.out)?);
    }
    pen.finish(outputs)?;
    match &result.status {
        ibrlim_core::sim::TerminationStatus::Completed => {
            println!("completed {} steps", result.time.len() - 1);
            Ok(EXIT_OK)
        }
        ibrlim_core::sim::TerminationStatus::Diverged { t, device } => {
            println!("diverged at t={t:.4} s ({device})");
            Ok(EXIT_DIVERGENCE)
        }
    }
}

fn cmd_scan(case_path: &Path, ctg_path: &Path, shared: &SharedSimArgs) -> anyhow::Result<i32> {
    let (case, case_text) = load_case(case_path)?;
    let (set, ctg_text) = load_contingencies(ctg_path)?;
    let cfg = shared.sim_config();
    let criteria = CriteriaConfig::default();

    let pen = ManifestPen::start(
        &shared.out,
        "scan",
        case_path,
        &case_text,
        Some((ctg_path, &ctg_text)),
        serde_json::json!({ "config": cfg, "criteria": criteria, "jobs": shared.jobs }),
    )?;

    let scan = with_pool(shared.jobs, || run_scan(&case, &set, &cfg, &criteria))??;
    let outputs = vec![
        write_out(&shared.out, "profile.json", &profile_json(&scan.profile))?,
        write_out(&shared.out, "violations.json", &violation_report_json(&scan.violations))?,
        write_out(&shared.out, "scan.svg", &emit_svg_scan_chart(&scan.profile))?,
    ];
    pen.finish(outputs)?;

    println!(
        "{} contingencies, {} violations, {} divergence(s)",
        scan.profile.contingencies.len(),
        scan.profile.total_violations(),
        scan.profile.divergences.len()
    );
    if scan.profile.divergences.is_empty() {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_DIVERGENCE)
    }
}

fn parse_bracket(s: &str) -> anyhow::Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(anyhow!(CaseError::Schema {
            message: format!("bracket '{s}' must be LO:HI"),
        }));
    }
    let lo: f64 = parts[0].parse().context("bracket low")?;
    let hi: f64 = parts[1].parse().context("bracket high")?;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(anyhow!(CaseError::Schema {
            message: format!("bracket {lo}:{hi} must satisfy 0 <= lo < hi <= 1"),
        }));
    }
    Ok((lo, hi))
}

fn cmd_threshold(
    case_path: &Path,
    ctg_path: &Path,
    plan_path: &Path,
    bracket: &str,
    tol: f64,
    sensitivity: &str,
    shared: &SharedSimArgs,
) -> anyhow::Result<i32> {
    let (case, case_text) = load_case(case_path)?;
    let (set, ctg_text) = load_contingencies(ctg_path)?;
    let plan_text = std::fs::read_to_string(plan_path)
        .with_context(|| format!("reading plan file {}", plan_path.display()))?;
    let plan = PenetrationPlan::parse(&plan_text)?;
    let (p_lo, p_hi) = parse_bracket(bracket)?;
    if p_hi - p_lo <= tol {
        eprintln!("warning: tol {tol} covers the whole bracket [{p_lo}, {p_hi}]; returning p_lo");
    }

    let base_cfg = ThresholdConfig {
        p_lo,
        p_hi,
        tol,
        overflow_tol: 0.5,
        criteria: CriteriaConfig::default(),
        sim: shared.sim_config(),
    };

    let pen = ManifestPen::start(
        &shared.out,
        "threshold",
        case_path,
        &case_text,
        Some((ctg_path, &ctg_text)),
        serde_json::json!({
            "config": base_cfg,
            "plan_sha256": sha256_hex(plan_text.as_bytes()),
            "sensitivity": sensitivity,
            "jobs": shared.jobs,
        }),
    )?;

    let results: BTreeMap<String, ThresholdResult> = with_pool(shared.jobs, || {
        match sensitivity {
            "all" => run_sensitivity_suite(&case, &plan, &set, &base_cfg),
            name => {
                let flags = match name {
                    "none" => SensitivityFlags::default(),
                    "mc" | "momentary_cessation" => SensitivityFlags {
                        momentary_cessation: true,
                        ..SensitivityFlags::default()
                    },
                    "dist-pv" | "distribution_pv" => SensitivityFlags {
                        distribution_pv: true,
                        ..SensitivityFlags::default()
                    },
                    "motor-stall" | "motor_stall" => SensitivityFlags {
                        motor_stall: true,
                        ..SensitivityFlags::default()
                    },
                    other => {
                        return Err(ThresholdError::Unreachable {
                            target: f64::NAN,
                            reason: format!("unknown sensitivity '{other}'"),
                        })
                    }
                };
                let mut cfg = base_cfg.clone();
                cfg.sim.flags = flags;
                find_threshold(&case, &plan, &set, &cfg).map(|r| {
                    let mut m = BTreeMap::new();
                    m.insert(flags.label(), r);
                    m
                })
            }
        }
    })??;

    let mut outputs = vec![write_out(
        &shared.out,
        "threshold.json",
        &threshold_report_json(&results),
    )?];

    // Boundary-case traces: worst contingency at the first (alphabetical)
    // sensitivity's p_star.
    if let Some((label, result)) = results.iter().next() {
        let worst = worst_contingency(&result.profile_at_p_star);
        if let Some(cid) = worst {
            let case_star = apply_penetration(&case, result.p_star, &plan)?;
            let pf = solve_powerflow(&case_star)?;
            let init = initialize_dynamic_states(&case_star, &pf)?;
            let ctg = set.iter().find(|c| c.id == cid).expect("scanned contingency");
            let mut cfg = shared.sim_config();
            cfg.flags = result.flags;
            let sim = run_simulation(&case_star, &init, ctg, &cfg)?;
            outputs.extend(trace_svgs(&sim, &format!("{label}_{cid}"), &shared.out)?);
        }
    }
    pen.finish(outputs)?;

    for (label, r) in &results {
        println!(
            "{label}: p_star = {:.4} ({} probes, {} evaluations logged)",
            r.p_star,
            r.probe_evaluations(),
            r.iterations.len()
        );
    }
    Ok(EXIT_OK)
}

/// The contingency with the most violations (ties broken by id), falling back
/// to the largest overflow, then the first id.
fn worst_contingency(profile: &ibrlim_core::criteria::ViolationProfile) -> Option<String> {
    let by_count = profile
        .contingencies
        .iter()
        .map(|c| {
            let n: u32 = profile
                .counts
                .get(c)
                .map(|m| m.values().sum())
                .unwrap_or(0);
            (c.clone(), n)
        })
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
    match by_count {
        Some((c, n)) if n > 0 => Some(c),
        _ => {
            let by_overflow = profile
                .contingencies
                .iter()
                .map(|c| {
                    let of = profile
                        .overflow
                        .get(c)
                        .map(|m| m.values().cloned().fold(0.0, f64::max))
                        .unwrap_or(0.0);
                    (c.clone(), of)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match by_overflow {
                Some((c, of)) if of > 0.0 => Some(c),
                _ => profile.contingencies.first().cloned(),
            }
        }
    }
}
