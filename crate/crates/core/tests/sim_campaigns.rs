//! Simulated campaigns checked against the harness's own ground truth.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use trendfuzz::adapter::ClockWindow;
use trendfuzz::sim::{BranchUniverse, SimActor, SimOracle, SimProfile, SimSeed};
use trendfuzz::{
    Campaign, CampaignResult, CoverageBitmap, MemStore, Policy, Scenario, ScheduleConfig,
    SharedStore,
};

fn campaign(s: &Scenario, config: ScheduleConfig, seed: u64) -> Campaign {
    let store: SharedStore = Arc::new(MemStore::new());
    Campaign::simulated(s, config, seed, store, Path::new("/c"), 65536).unwrap()
}

fn budget(secs: f64) -> ScheduleConfig {
    ScheduleConfig {
        total_budget: secs,
        ..ScheduleConfig::default()
    }
}

fn run(s: &Scenario, config: ScheduleConfig, seed: u64) -> (CampaignResult, Campaign) {
    let mut c = campaign(s, config, seed);
    let r = c.run(&mut ()).unwrap();
    (r, c)
}

#[test]
fn poisson_coverage_matches_closed_form() {
    // 100 independent branches at 0.01 discoveries per second for 100 s:
    // each is found with p = 1 - e^-1.
    let p = 1.0 - (-1.0f64).exp();
    let sigma = (100.0 * p * (1.0 - p)).sqrt();
    let u = Arc::new(BranchUniverse::independent(100));
    let runs = 400;
    let counts: Vec<f64> = (0..runs)
        .map(|seed| {
            let mut a = SimActor::new(u.clone(), SimProfile::uniform("p", 0.01, 1), seed);
            a.step(
                100.0,
                ClockWindow {
                    start: 0.0,
                    end: 100.0,
                },
            )
            .len() as f64
        })
        .collect();
    // A single run lands within three sigma about 99.7% of the time.
    let outside = counts
        .iter()
        .filter(|&&n| (n - 100.0 * p).abs() > 3.0 * sigma)
        .count();
    assert!(outside <= 5, "{outside} of {runs} runs outside 3 sigma");
    assert!(
        (counts[0] - 100.0 * p).abs() <= 3.0 * sigma,
        "{}",
        counts[0]
    );
    let mean = counts.iter().sum::<f64>() / runs as f64;
    let var = counts.iter().map(|n| (n - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    let se = sigma / (runs as f64).sqrt();
    assert!((mean - 100.0 * p).abs() < 4.0 * se, "mean {mean}");
    // Binomial variance, checked loosely.
    assert!((var / sigma.powi(2) - 1.0).abs() < 0.25, "variance {var}");
}

#[test]
fn step_output_reexecutes_to_sampled_branches() {
    let mut u = BranchUniverse::independent(64);
    u.add_edge(3, 7).unwrap();
    let u = Arc::new(u);
    let oracle = SimOracle::new(u.clone(), 64);
    let mut a = SimActor::new(u, SimProfile::uniform("r", 0.2, 5), 9);
    let seeds = a.step(
        50.0,
        ClockWindow {
            start: 0.0,
            end: 50.0,
        },
    );
    assert!(!seeds.is_empty());
    let mut from_seeds = BTreeSet::new();
    for s in &seeds {
        let raw = oracle.execute(&s.encode()).unwrap();
        let hit: BTreeSet<u32> = (0..64u32)
            .filter(|&b| raw.as_slice()[b as usize] != 0)
            .collect();
        assert_eq!(hit, s.branches().iter().copied().collect());
        from_seeds.extend(hit);
    }
    let discovered: BTreeSet<u32> = a.discovered().collect();
    assert_eq!(from_seeds, discovered);
    // A seed for 7 always carries its parent.
    if discovered.contains(&7) {
        assert!(seeds.iter().any(|s| s.branches() == [3, 7]));
    }
}

#[test]
fn union_bitmap_equals_discovered_branches() {
    for s in [Scenario::complementary(), Scenario::dominant()] {
        let (_, c) = run(&s, budget(7200.0), 3);
        let union = c.union_bitmap();
        let set: BTreeSet<u32> = (0..union.map_size() as u32)
            .filter(|&b| union.get(b as usize) != 0)
            .collect();
        let mut truth = BTreeSet::new();
        for h in c.handles() {
            truth.extend(h.fuzzer().discovered().unwrap());
        }
        assert!(!truth.is_empty());
        assert_eq!(set, truth, "{}", s.name);
    }
}

#[test]
fn each_monitor_bitmap_is_what_its_fuzzer_can_see() {
    let (_, c) = run(&Scenario::complementary(), budget(3600.0), 1);
    for h in c.handles() {
        let b = h.bitmap();
        // Bucket of a single hit everywhere: the sim executes each branch once.
        assert!(b.as_bytes().iter().all(|&e| e == 0 || e == 1));
        assert!(b.count() > 0);
    }
}

#[test]
fn dominant_gets_strictly_largest_focus() {
    let (r, _) = run(&Scenario::dominant(), budget(14400.0), 2);
    let first = &r.rounds[0];
    assert!(first.early_exit());
    assert_eq!(first.winner, "alpha");
    let alpha = r.focus_cpu["alpha"];
    assert!(r.focus_cpu.iter().all(|(k, &v)| k == "alpha" || v < alpha));
}

#[test]
fn uniform_round_one_is_symmetric() {
    // Identical fuzzers share one random stream, so after the first sweep
    // every fuzzer has the same coverage. Later rounds drift because sync
    // lets later runners import earlier runners' finds ahead of time.
    let s = Scenario::uniform();
    let mut spread = Vec::new();
    for seed in 0..5 {
        let (r, _) = run(&s, budget(3600.0), seed);
        let first = &r.rounds[0];
        assert_eq!(first.diff_peak, 0, "seed {seed}");
        assert!(!first.early_exit());
        assert_eq!(first.t_prep_actual, 300.0);
        spread.push(r.rounds.iter().map(|x| x.diff_peak).max().unwrap());
    }
    let (d, _) = run(&Scenario::dominant(), budget(3600.0), 0);
    let dominant = d.rounds.iter().map(|x| x.diff_peak).max().unwrap();
    assert!(
        spread.iter().all(|&x| x * 2 < dominant),
        "{spread:?} vs {dominant}"
    );
}

#[test]
fn complementary_proportional_rounds_feed_both_strong_fuzzers() {
    let s = Scenario::complementary();
    let mut checked = 0;
    for seed in 0..10 {
        let (r, _) = run(&s, budget(14400.0), seed);
        for round in r.rounds.iter().filter(|x| !x.early_exit()) {
            assert!(
                round.allocation["alpha"] >= 0.3,
                "seed {seed} round {}",
                round.round
            );
            assert!(
                round.allocation["beta"] >= 0.3,
                "seed {seed} round {}",
                round.round
            );
            checked += 1;
        }
    }
    assert!(checked >= 10);
}

#[test]
fn disabling_sync_loses_coverage() {
    let s = Scenario::complementary();
    let (with, _) = run(&s, budget(14400.0), 4);
    let cfg = ScheduleConfig {
        seed_sync: false,
        ..budget(14400.0)
    };
    let (without, _) = run(&s, cfg, 4);
    let lost: Vec<&String> = with
        .final_counts
        .keys()
        .filter(|f| without.final_counts[*f] < with.final_counts[*f])
        .collect();
    assert!(
        !lost.is_empty(),
        "{:?} vs {:?}",
        with.final_counts,
        without.final_counts
    );
}

#[test]
fn deadweight_is_starved() {
    let (r, c) = run(&Scenario::deadweight(), budget(14400.0), 0);
    let delta = c.handles().iter().find(|h| h.name() == "delta").unwrap();
    assert_eq!(delta.fuzzer().discovered(), Some(Vec::new()));
    // Everything delta holds came in through sync.
    assert!(r.final_counts["delta"] <= r.final_counts["alpha"]);
    assert!(r.focus_share("delta") < 0.1, "{:?}", r.focus_cpu);
}

#[test]
fn budget_of_one_round_gives_one_record() {
    let (r, _) = run(&Scenario::dominant(), budget(600.0), 0);
    assert_eq!(r.rounds.len(), 1);
    assert!((r.elapsed_cpu - 600.0).abs() < 1e-6);
}

#[test]
fn single_fuzzer_always_gets_everything() {
    let mut s = Scenario::dominant();
    s.fuzzers.truncate(1);
    let (r, _) = run(&s, budget(3000.0), 0);
    assert_eq!(r.rounds.len(), 5);
    for round in &r.rounds {
        assert_eq!(round.allocation.len(), 1);
        assert_eq!(round.allocation["alpha"], 1.0);
    }
}

#[test]
fn single_core_rounds_conserve_time() {
    let (r, _) = run(&Scenario::inversion(7200.0), budget(14400.0), 5);
    let last = r.rounds.len() - 1;
    for (i, round) in r.rounds.iter().enumerate() {
        let total = round.t_prep_actual + round.t_focus_assigned;
        if i < last {
            assert!(
                (total - 600.0).abs() < 1e-9,
                "round {}: {total}",
                round.round
            );
        }
        let sum: f64 = round.allocation.values().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let focus: f64 = round.focus_cpu.values().sum();
        assert!(focus <= 3.0 * round.t_focus_assigned + 1e-6);
    }
}

#[test]
fn round_robin_splits_evenly_without_prep() {
    let cfg = ScheduleConfig {
        policy: Policy::RoundRobin,
        ..budget(3600.0)
    };
    let (r, _) = run(&Scenario::dominant(), cfg, 0);
    assert_eq!(r.rounds.len(), 2);
    for round in &r.rounds {
        assert_eq!(round.t_prep_actual, 0.0);
        assert_eq!(round.t_focus_assigned, 600.0);
        assert_eq!(round.winner, "None");
        for (f, &frac) in &round.allocation {
            assert!((frac - 1.0 / 3.0).abs() < 1e-12);
            assert!(
                (round.focus_cpu[f] - 600.0).abs() < 1e-6,
                "{f}: {}",
                round.focus_cpu[f]
            );
        }
    }
}

#[test]
fn multi_core_campaign_accounts_cores() {
    let cfg = ScheduleConfig {
        cores: 4,
        ..budget(4.0 * 3600.0)
    };
    let (r, c) = run(&Scenario::dominant(), cfg, 1);
    assert!((r.elapsed_cpu - 4.0 * 3600.0).abs() < 1e-6);
    assert!(r.rounds[0].early_exit());
    assert_eq!(r.rounds[0].winner, "alpha");
    // Winner-takes-all on four cores: the others get no CPU in that round.
    assert_eq!(
        r.rounds[0].focus_cpu.get("beta").copied().unwrap_or(0.0),
        0.0
    );
    assert!(r.focus_share("alpha") > 0.5);
    // The state holds the number of the next round to run.
    assert_eq!(c.state().round as usize, r.rounds.len() + 1);
}

#[test]
fn sim_campaign_is_a_pure_function_of_seed() {
    let s = Scenario::complementary();
    let (a, _) = run(&s, budget(7200.0), 11);
    let (b, _) = run(&s, budget(7200.0), 11);
    let (c, _) = run(&s, budget(7200.0), 12);
    let json = |r: &CampaignResult| serde_json::to_string(&r.rounds).unwrap();
    assert_eq!(json(&a), json(&b));
    assert_ne!(json(&a), json(&c));
}

#[test]
fn seeds_with_equal_branch_sets_are_equal_bytes() {
    let a = SimSeed::new([9, 2, 5]).encode();
    let b = SimSeed::new([5, 9, 2, 2]).encode();
    assert_eq!(a, b);
    let mut m = CoverageBitmap::empty(16);
    SimOracle::new(Arc::new(BranchUniverse::independent(16)), 16)
        .fold_into(&a, &mut m)
        .unwrap();
    assert_eq!(m.count(), 3);
}
