use ibrlim_core::case::{parse_case, parse_contingency_set};
use ibrlim_core::powerflow::{initialize_dynamic_states, solve_powerflow};
use ibrlim_core::sim::{run_simulation, SimulationConfig, TerminationStatus};
use ibrlim_core::threshold::{apply_penetration, PenetrationPlan};

fn main() {
    let case = parse_case(&std::fs::read_to_string("cases/twoarea.json").unwrap()).unwrap();
    let set =
        parse_contingency_set(&std::fs::read_to_string("cases/twoarea_contingencies.json").unwrap())
            .unwrap();
    let plan = PenetrationPlan::parse(&std::fs::read_to_string("cases/twoarea_plan.json").unwrap())
        .unwrap();
    let trip = set.iter().find(|c| c.id == "trip-g4").unwrap();
    let cfg = SimulationConfig::default();

    for p in [0.15, 0.45, 0.65] {
        let cp = apply_penetration(&case, p, &plan).unwrap();
        let online: Vec<&str> = cp
            .machines
            .iter()
            .filter(|m| m.in_service)
            .map(|m| m.id.as_str())
            .collect();
        let h_sys: f64 = cp
            .machines
            .iter()
            .filter(|m| m.in_service)
            .map(|m| m.h * m.mva_base / 100.0)
            .sum();
        let pf = solve_powerflow(&cp).unwrap();
        let init = initialize_dynamic_states(&cp, &pf).unwrap();
        let r = run_simulation(&cp, &init, trip, &cfg).unwrap();
        let status = match &r.status {
            TerminationStatus::Completed => "ok".to_string(),
            TerminationStatus::Diverged { t, device } => format!("DIVERGED {t:.3} {device}"),
        };
        let nadir = r
            .freq
            .iter()
            .flat_map(|s| s.iter().cloned())
            .fold(f64::INFINITY, f64::min);
        println!("p {p:.2}: machines {online:?} H_sys {h_sys:.1} nadir {nadir:.4} [{status}]");
    }
}
