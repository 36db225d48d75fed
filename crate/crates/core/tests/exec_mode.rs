//! Real child processes: shell-script fuzzers and an instrumented target
//! that writes its hit map to the file named by `COVERAGE_MAP_FILE`.
#![cfg(unix)]

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::sleep;
use std::time::Duration;

use trendfuzz::adapter::process::ProcessFuzzer;
use trendfuzz::adapter::{
    AdapterError, Assignment, CgroupLimiter, ClockWindow, CorpusMonitor, ExecutionOracle, Fuzzer,
    FuzzerHandle, FuzzerLayout, FuzzerSpec, FuzzerState, InputMode, InstrumentedTarget,
    OracleError, ResourceLimiter, TimeSlicing,
};
use trendfuzz::store::{CorpusStore, FsStore, SharedStore};
use trendfuzz::telemetry::RunWriter;
use trendfuzz::CampaignConfig;

const MAP: usize = 64;

/// Writes one hit at `(number in the input) % 64`. Inputs starting with
/// "crash" kill the target, "hang" sleeps past any timeout, "nomap" exits
/// without writing a map.
const TARGET: &str = r#"#!/bin/sh
if [ -n "$1" ]; then n=$(cat "$1"); else n=$(cat); fi
case "$n" in
  crash*) kill -9 $$ ;;
  hang*) sleep 5 ;;
  nomap*) exit 0 ;;
esac
m="$COVERAGE_MAP_FILE"
head -c 64 /dev/zero > "$m.tmp"
printf '\003' | dd of="$m.tmp" bs=1 seek=$((n % 64)) conv=notrunc 2>/dev/null
mv "$m.tmp" "$m"
"#;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

fn target(dir: &Path, timeout: f64, input: InputMode) -> InstrumentedTarget {
    let scratch = dir.join("scratch");
    std::fs::create_dir_all(&scratch).unwrap();
    let argv = match input {
        InputMode::File => vec!["{target}".into(), "{input}".into()],
        InputMode::Stdin => vec!["{target}".into()],
    };
    InstrumentedTarget {
        argv,
        target: script(dir, "target.sh", TARGET),
        input_mode: input,
        timeout: Duration::from_secs_f64(timeout),
        map_env: "COVERAGE_MAP_FILE".into(),
        map_size: MAP,
        scratch_dir: scratch,
    }
}

/// A fuzzer that drops numbered inputs into its queue every 20 ms.
fn writer_spec(name: &str, step: u32) -> FuzzerSpec {
    let mut spec = FuzzerSpec::named(name);
    let body = format!(
        "i=0; while :; do i=$((i+{step})); echo $i > queue/.t; mv queue/.t queue/id_$i; sleep 0.02; done"
    );
    spec.start = vec!["sh".into(), "-c".into(), body];
    spec
}

fn process(out: &Path, spec: FuzzerSpec) -> ProcessFuzzer {
    let layout = FuzzerLayout::new(out, &spec);
    ProcessFuzzer::new(spec, layout, "/bin/true", "/seeds").with_grace(Duration::from_millis(200))
}

fn queue_len(out: &Path, name: &str) -> usize {
    std::fs::read_dir(out.join(name).join("queue")).map_or(0, |d| d.count())
}

/// Live (non-zombie) members of a process group, from /proc. Zombies are
/// skipped because an init that does not reap leaves them around.
fn group_members(pgid: u32) -> Vec<u32> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else {
            continue;
        };
        let Ok(stat) = std::fs::read_to_string(entry.path().join("stat")) else {
            continue;
        };
        // Fields after the parenthesised command name: state ppid pgrp ...
        let Some(rest) = stat.rsplit_once(')').map(|(_, r)| r) else {
            continue;
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() > 2 && fields[2] == pgid.to_string() && fields[0] != "Z" && fields[0] != "X"
        {
            out.push(pid);
        }
    }
    out
}

fn group_alive(pgid: u32) -> bool {
    // SIGKILL delivery is asynchronous; give the kernel a moment.
    for _ in 0..50 {
        if group_members(pgid).is_empty() {
            return false;
        }
        sleep(Duration::from_millis(20));
    }
    true
}

#[test]
fn lifecycle_pause_resume_stop() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = process(dir.path(), writer_spec("w", 1));
    f.start().unwrap();
    assert_eq!(f.state(), FuzzerState::Running);
    assert!(matches!(f.start(), Err(AdapterError::InvalidState { .. })));
    sleep(Duration::from_millis(200));
    f.pause().unwrap();
    sleep(Duration::from_millis(50));
    let frozen = queue_len(dir.path(), "w");
    assert!(frozen > 0);
    sleep(Duration::from_millis(200));
    assert_eq!(queue_len(dir.path(), "w"), frozen, "output while paused");
    f.resume().unwrap();
    sleep(Duration::from_millis(200));
    assert!(queue_len(dir.path(), "w") > frozen);

    let pids = f.pids();
    assert_eq!(pids.len(), 1);
    f.stop().unwrap();
    f.stop().unwrap();
    assert_eq!(f.state(), FuzzerState::Stopped);
    assert_eq!(f.instances(), 0);
    assert!(!group_alive(pids[0]), "process group survived stop");
}

#[test]
fn stop_kills_a_paused_fuzzer_that_ignores_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = FuzzerSpec::named("stubborn");
    spec.start = vec![
        "sh".into(),
        "-c".into(),
        "trap '' TERM; while :; do sleep 0.05; done".into(),
    ];
    let mut f = process(dir.path(), spec);
    f.start().unwrap();
    let pgid = f.pids()[0];
    f.pause().unwrap();
    f.stop().unwrap();
    assert!(!group_alive(pgid));
}

#[test]
fn argv_substitution() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = FuzzerSpec::named("t");
    spec.start = ["fuzz", "-i", "{in}", "-o", "{out}", "{target}"]
        .map(String::from)
        .to_vec();
    let f = process(dir.path(), spec);
    let out = dir.path().join("t").display().to_string();
    assert_eq!(
        f.argv(0).unwrap(),
        vec!["fuzz", "-i", "/seeds", "-o", &out, "/bin/true"]
    );

    let mut bad = FuzzerSpec::named("b");
    bad.start = vec!["fuzz".into(), "{nope}".into()];
    assert!(matches!(
        process(dir.path(), bad).argv(0),
        Err(AdapterError::UnknownPlaceholder(_))
    ));
}

#[test]
fn missing_binary_is_a_spawn_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = FuzzerSpec::named("ghost");
    spec.start = vec!["/nonexistent/fuzzer".into()];
    let mut f = process(dir.path(), spec);
    assert!(matches!(f.start(), Err(AdapterError::Spawn { .. })));
    assert_eq!(f.state(), FuzzerState::Stopped);
}

#[test]
fn scaling_spawns_and_reaps_instances() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = writer_spec("s", 1);
    spec.scale = Some(vec!["sh".into(), "-c".into(), "sleep 30 # {id}".into()]);
    let mut f = process(dir.path(), spec);
    f.start().unwrap();
    f.scale_to(1).unwrap();
    assert_eq!(f.instances(), 1);
    f.scale_to(3).unwrap();
    assert_eq!(f.pids().len(), 3);
    let extra = f.pids()[2];
    f.scale_to(2).unwrap();
    assert_eq!(f.instances(), 2);
    assert!(!group_alive(extra));
    f.scale_to(0).unwrap();
    assert_eq!(f.state(), FuzzerState::Stopped);

    let mut plain = process(dir.path(), writer_spec("p", 1));
    plain.start().unwrap();
    assert!(matches!(
        plain.scale_to(2),
        Err(AdapterError::UnsupportedScaling(_))
    ));
    assert_eq!(plain.instances(), 1);
    plain.stop().unwrap();
}

#[test]
fn instrumented_target_contract() {
    let dir = tempfile::tempdir().unwrap();
    let input = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        (p, body.as_bytes().to_vec())
    };
    let t = target(dir.path(), 1.0, InputMode::File);
    let (p, d) = input("in5", "5");
    let raw = t.execute(&p, &d).unwrap();
    assert_eq!(raw.len(), MAP);
    assert_eq!(raw.as_slice()[5], 3);
    assert_eq!(raw.as_slice().iter().filter(|&&c| c != 0).count(), 1);

    let (p, d) = input("crash", "crash");
    assert!(matches!(t.execute(&p, &d), Err(OracleError::Crash(_))));
    let (p, d) = input("nomap", "nomap");
    assert!(matches!(t.execute(&p, &d), Err(OracleError::NoMap(_))));

    let quick = target(dir.path(), 0.2, InputMode::File);
    let (p, d) = input("hang", "hang");
    assert!(matches!(
        quick.execute(&p, &d),
        Err(OracleError::Timeout(_))
    ));

    let stdin = target(dir.path(), 1.0, InputMode::Stdin);
    let raw = stdin.execute(Path::new("unused"), b"70").unwrap();
    assert_eq!(raw.as_slice()[70 % 64], 3);

    let wrong = InstrumentedTarget {
        map_size: 128,
        ..target(dir.path(), 1.0, InputMode::File)
    };
    let (p, d) = input("in1", "1");
    assert!(matches!(
        wrong.execute(&p, &d),
        Err(OracleError::BadMap {
            expected: 128,
            found: 64
        })
    ));
}

#[test]
fn monitor_executes_each_input_once_and_survives_bad_ones() {
    let dir = tempfile::tempdir().unwrap();
    let oracle = ExecutionOracle::Instrumented(target(dir.path(), 1.0, InputMode::File));
    let queue = dir.path().join("f/queue");
    let crashes = dir.path().join("f/crashes");
    let store = FsStore;
    store.create_dir_all(&queue).unwrap();
    store.create_dir_all(&crashes).unwrap();
    store.write(&queue.join("a"), b"3").unwrap();
    store.write(&queue.join("b"), b"3").unwrap();
    store.write(&crashes.join("c"), b"crash").unwrap();
    let mut m = CorpusMonitor::new("f", vec![queue.clone(), crashes], MAP);
    let u = m.poll(&store, &oracle).unwrap();
    assert_eq!(u.new_files, 3);
    assert_eq!(u.executed, 2, "duplicate content runs once");
    assert_eq!(u.failed, 1);
    assert_eq!(m.bitmap().count(), 1);
    // Bucket of count 3.
    assert_eq!(m.bitmap().get(3), 4);

    let again = m.poll(&store, &oracle).unwrap();
    assert_eq!(again.executed, 0);
    store.write(&queue.join("d"), b"9").unwrap();
    let more = m.poll(&store, &oracle).unwrap();
    assert_eq!((more.executed, more.new_entries), (1, 1));
    assert_eq!(m.executions(), 3);
}

#[test]
fn cgroup_limiter_writes_quota_and_members() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("cg");
    let mut spec = FuzzerSpec::named("c");
    spec.start = vec!["sh".into(), "-c".into(), "sleep 30".into()];
    let mut handle = FuzzerHandle::new(Box::new(process(dir.path(), spec)), MAP);
    handle.fuzzer_mut().start().unwrap();
    let limiter = CgroupLimiter::new(&root);
    limiter.apply(&handle, 0.6).unwrap();
    let group = root.join("c");
    assert_eq!(
        std::fs::read_to_string(group.join("cpu.max")).unwrap(),
        "60000 100000"
    );
    let pid = handle.fuzzer().pids()[0];
    assert_eq!(
        std::fs::read_to_string(group.join("cgroup.procs")).unwrap(),
        pid.to_string()
    );
    handle.fuzzer_mut().stop().unwrap();
}

#[test]
fn time_slicing_charges_quota_and_leaves_fuzzers_paused() {
    let dir = tempfile::tempdir().unwrap();
    let mut handles = vec![
        FuzzerHandle::new(Box::new(process(dir.path(), writer_spec("x", 1))), MAP),
        FuzzerHandle::new(Box::new(process(dir.path(), writer_spec("y", 1))), MAP),
    ];
    for h in &mut handles {
        h.fuzzer_mut().start().unwrap();
        h.fuzzer_mut().pause().unwrap();
    }
    sleep(Duration::from_millis(50));
    let idle = queue_len(dir.path(), "y");
    let idle_x = queue_len(dir.path(), "x");
    let mut limiter = TimeSlicing {
        period: Duration::from_millis(100),
    };
    let active = [Assignment {
        index: 0,
        cores: 0.5,
    }];
    limiter
        .run(
            &mut handles,
            &active,
            0.4,
            ClockWindow {
                start: 0.0,
                end: 0.2,
            },
        )
        .unwrap();
    assert!((handles[0].cpu_time() - 0.2).abs() < 1e-12);
    assert_eq!(handles[1].cpu_time(), 0.0);
    assert_eq!(handles[0].state(), FuzzerState::Paused);
    assert!(queue_len(dir.path(), "x") > idle_x);
    assert_eq!(queue_len(dir.path(), "y"), idle, "inactive fuzzer ran");
    for h in &mut handles {
        h.fuzzer_mut().stop().unwrap();
    }
}

#[test]
fn exec_campaign_survives_a_broken_fuzzer() {
    let dir = tempfile::tempdir().unwrap();
    let tgt = script(dir.path(), "target.sh", TARGET);
    let out = dir.path().join("out");
    let config = format!(
        r#"mode = "exec"
output_dir = "{out}"
map_size = 64
grace_period = 0.2
monitor_interval = 0.05

[target]
path = "{tgt}"

[schedule]
t_prep = 2
t_focus = 2
slice = 1
theta_init = 1000
total_budget = 8

[limiter]
period = 0.1

[[fuzzer]]
name = "even"
start = ["sh", "-c", "i=0; while :; do i=$((i+2)); echo $i > queue/.t; mv queue/.t queue/id_$i; sleep 0.05; done"]

[[fuzzer]]
name = "ghost"
start = ["/nonexistent/fuzzer"]
"#,
        out = out.display(),
        tgt = tgt.display()
    );
    let cfg = CampaignConfig::parse_with_env(&config, "exec.toml", std::iter::empty()).unwrap();
    let store: SharedStore = Arc::new(FsStore);
    let mut writer = RunWriter::open(&out, false).unwrap();
    let (mut campaign, _monitors) = cfg.build(store).unwrap();
    let result = campaign.run(&mut writer).unwrap();
    assert!(!result.aborted);
    assert!(!result.rounds.is_empty());
    for r in &result.rounds {
        assert_eq!(r.allocation["ghost"], 0.0);
        assert_eq!(r.focus_cpu["ghost"], 0.0);
        assert_eq!(r.allocation["even"], 1.0);
    }
    assert!(result.final_counts["even"] > 0);
    assert_eq!(result.final_counts["ghost"], 0);
    let ghost = campaign
        .handles()
        .iter()
        .find(|h| h.name() == "ghost")
        .unwrap();
    assert!(ghost.is_failed());
    assert!(
        std::fs::read_to_string(out.join("rounds.jsonl"))
            .unwrap()
            .lines()
            .count()
            >= 1
    );
}
