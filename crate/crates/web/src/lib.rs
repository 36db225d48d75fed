//! Browser bindings for simulated campaigns. Every export returns JSON.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use trendfuzz::scheduler::aimd_update;
use trendfuzz::{
    Campaign, CampaignResult, MemStore, Policy, RoundRecord, Scenario, ScheduleConfig, SharedStore,
};
use wasm_bindgen::prelude::*;

/// Upper bound on budgets accepted from the page, so a typo cannot hang the tab.
const MAX_BUDGET: f64 = 48.0 * 3600.0;

#[derive(Serialize)]
struct RunView {
    scenario: String,
    policy: String,
    fuzzers: Vec<String>,
    rounds: Vec<RoundRecord>,
    /// cpu_seconds followed by one count per fuzzer and the union.
    series: Vec<Vec<f64>>,
    final_counts: BTreeMap<String, u64>,
    union_count: u64,
    final_density: f64,
    focus_cpu: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ComparisonView {
    scenario: String,
    budget: f64,
    seeds: u32,
    autofz: Vec<f64>,
    roundrobin: Vec<f64>,
    autofz_wins: u32,
}

fn simulate(
    scenario: &str,
    policy: Policy,
    budget: f64,
    cores: u32,
    seed: u64,
) -> Result<(Scenario, CampaignResult), String> {
    let s = Scenario::builtin(scenario).ok_or_else(|| format!("unknown scenario `{scenario}`"))?;
    if !(budget > 0.0 && budget <= MAX_BUDGET) {
        return Err(format!("budget must be in (0, {MAX_BUDGET}]"));
    }
    let config = ScheduleConfig {
        total_budget: budget,
        cores: cores.max(1),
        policy,
        ..ScheduleConfig::default()
    };
    let store: SharedStore = Arc::new(MemStore::new());
    let mut c = Campaign::simulated(&s, config, seed, store, Path::new("/c"), 65536)
        .map_err(|e| e.to_string())?;
    let r = c.run(&mut ()).map_err(|e| e.to_string())?;
    Ok((s, r))
}

fn series(fuzzers: &[String], r: &CampaignResult) -> Vec<Vec<f64>> {
    let mut rows: BTreeMap<u64, BTreeMap<&str, u64>> = BTreeMap::new();
    for s in &r.samples {
        rows.entry(s.cpu_seconds.to_bits())
            .or_default()
            .insert(s.fuzzer.as_str(), s.count);
    }
    rows.into_iter()
        .map(|(t, counts)| {
            let mut row = vec![f64::from_bits(t)];
            for f in fuzzers.iter().map(String::as_str).chain(["union"]) {
                row.push(counts.get(f).copied().unwrap_or(0) as f64);
            }
            row
        })
        .collect()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("views serialize")
}

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

fn run_view(
    scenario: &str,
    policy: &str,
    budget: f64,
    cores: u32,
    seed: u64,
) -> Result<String, String> {
    let policy: Policy = policy.parse()?;
    let (s, r) = simulate(scenario, policy, budget, cores, seed)?;
    let fuzzers: Vec<String> = s.fuzzers.iter().map(|f| f.name.clone()).collect();
    Ok(json(&RunView {
        scenario: s.name.clone(),
        policy: policy.to_string(),
        series: series(&fuzzers, &r),
        fuzzers,
        rounds: r.rounds,
        final_counts: r.final_counts,
        union_count: r.union_count,
        final_density: r.final_density,
        focus_cpu: r.focus_cpu,
    }))
}

/// Runs one simulated campaign and returns its rounds and coverage series.
#[wasm_bindgen]
pub fn run_scenario(
    scenario: &str,
    policy: &str,
    budget: f64,
    cores: u32,
    seed: u32,
) -> Result<String, JsError> {
    run_view(scenario, policy, budget, cores, seed.into()).map_err(js_err)
}

fn trace(exits: &str, theta_init: f64) -> Result<Vec<f64>, String> {
    if !(theta_init.is_finite() && theta_init > 0.0) {
        return Err("theta_init must be positive".into());
    }
    let mut theta = theta_init;
    let mut out = vec![theta];
    for c in exits.chars().filter(|c| !c.is_whitespace()) {
        let early = match c {
            '1' | 'e' | 'E' => true,
            '0' | '.' | '-' => false,
            other => {
                return Err(format!(
                    "unexpected `{other}`: use 1 for an early exit, 0 otherwise"
                ))
            }
        };
        theta = aimd_update(theta, early, theta_init);
        out.push(theta);
    }
    Ok(out)
}

/// Threshold before each round given a string of round outcomes
/// (`1` early exit, `0` full preparation).
#[wasm_bindgen]
pub fn aimd_trace(exits: &str, theta_init: f64) -> Result<String, JsError> {
    trace(exits, theta_init).map(|t| json(&t)).map_err(js_err)
}

fn comparison(scenario: &str, budget: f64, seeds: u32) -> Result<String, String> {
    let seeds = seeds.clamp(1, 20);
    let mut view = ComparisonView {
        scenario: scenario.to_string(),
        budget,
        seeds,
        autofz: Vec::new(),
        roundrobin: Vec::new(),
        autofz_wins: 0,
    };
    for seed in 0..seeds as u64 {
        let (_, a) = simulate(scenario, Policy::Adaptive, budget, 1, seed)?;
        let (_, b) = simulate(scenario, Policy::RoundRobin, budget, 1, seed)?;
        if a.final_density > b.final_density {
            view.autofz_wins += 1;
        }
        view.autofz.push(a.final_density);
        view.roundrobin.push(b.final_density);
    }
    Ok(json(&view))
}

/// Final union density of both policies over seeds `0..seeds`.
#[wasm_bindgen]
pub fn compare_policies(scenario: &str, budget: f64, seeds: u32) -> Result<String, JsError> {
    comparison(scenario, budget, seeds).map_err(js_err)
}
