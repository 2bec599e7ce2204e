use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use diffserve_server::admission::Admission;
use diffserve_server::cluster::{
    desired_workers, dispatch, reconcile, Autoscaler, ClusterConfig, CooldownState, ScaleActions, ScaleDirection,
    ScalingPolicy, Spawner, WorkerRecord, WorkerStatus, WorkerTable, FAILURE_THRESHOLD,
};

fn worker(id: usize, in_flight: usize, status: WorkerStatus) -> WorkerRecord {
    WorkerRecord {
        in_flight,
        ..WorkerRecord::new(id, &format!("127.0.0.1:{}", 9000 + id), status)
    }
}

fn healthy(loads: &[usize]) -> Vec<WorkerRecord> {
    loads
        .iter()
        .enumerate()
        .map(|(i, &l)| worker(i, l, WorkerStatus::Healthy))
        .collect()
}

fn policy(target: usize, min: usize, max: usize) -> ScalingPolicy {
    ScalingPolicy {
        target_per_worker: target,
        min_workers: min,
        max_workers: max,
        cooldown_s: 10.0,
    }
}

#[test]
fn dispatch_picks_least_loaded() {
    assert_eq!(dispatch(&healthy(&[2, 0, 1])), Some(1));
    assert_eq!(dispatch(&healthy(&[1, 1, 1])), Some(0));
    assert_eq!(dispatch(&healthy(&[3, 1, 1])), Some(1));
    assert_eq!(dispatch(&[]), None);
}

#[test]
fn dispatch_skips_unhealthy_and_draining() {
    let ws = vec![
        worker(0, 0, WorkerStatus::Unhealthy),
        worker(1, 0, WorkerStatus::Draining),
        worker(2, 5, WorkerStatus::Healthy),
    ];
    assert_eq!(dispatch(&ws), Some(2));
    assert_eq!(dispatch(&ws[..2]), None);
}

fn status_strategy() -> impl Strategy<Value = WorkerStatus> {
    prop_oneof![
        Just(WorkerStatus::Healthy),
        Just(WorkerStatus::Unhealthy),
        Just(WorkerStatus::Draining)
    ]
}

proptest! {
    #[test]
    fn dispatch_is_minimal_among_healthy(ws in prop::collection::vec((0usize..8, status_strategy()), 0..12)) {
        let records: Vec<_> = ws.iter().enumerate().map(|(i, &(l, s))| worker(i, l, s)).collect();
        match dispatch(&records) {
            None => prop_assert!(records.iter().all(|w| w.status != WorkerStatus::Healthy)),
            Some(id) => {
                let chosen = &records[id];
                prop_assert_eq!(chosen.status, WorkerStatus::Healthy);
                for w in records.iter().filter(|w| w.status == WorkerStatus::Healthy) {
                    prop_assert!((chosen.in_flight, chosen.worker_id) <= (w.in_flight, w.worker_id));
                }
            }
        }
    }

    #[test]
    fn desired_is_clamped_and_monotone(q in 0usize..200, f in 0usize..200, extra in 0usize..50,
                                       target in 1usize..8, min in 1usize..5, span in 0usize..10) {
        let p = policy(target, min, min + span);
        let d = desired_workers(q, f, &p);
        prop_assert!(d >= p.min_workers && d <= p.max_workers);
        prop_assert!(desired_workers(q + extra, f, &p) >= d);
        prop_assert!(desired_workers(q, f + extra, &p) >= d);
        let exact = (q + f).div_ceil(target);
        if exact >= p.min_workers && exact <= p.max_workers {
            prop_assert_eq!(d, exact);
        }
    }

    #[test]
    fn reconcile_reaches_desired_without_cooldown(n in 0usize..10, desired in 0usize..10) {
        let ws = healthy(&vec![0; n]);
        let a = reconcile(&ws, desired, &CooldownState::default(), 0.0, 10.0);
        prop_assert_eq!(n + a.spawn - a.drain.len(), desired);
        prop_assert!(a.spawn == 0 || a.drain.is_empty());
    }
}

#[test]
fn desired_worker_examples() {
    let p = policy(2, 1, 8);
    assert_eq!(desired_workers(0, 0, &p), 1);
    assert_eq!(desired_workers(7, 1, &p), 4);
    assert_eq!(desired_workers(7, 0, &p), 4);
    assert_eq!(desired_workers(100, 0, &p), 8);
    assert_eq!(desired_workers(3, 0, &policy(4, 2, 8)), 2);
}

#[test]
fn reconcile_actions() {
    let none = CooldownState::default();
    assert!(reconcile(&healthy(&[0, 0]), 2, &none, 0.0, 10.0).is_empty());
    assert_eq!(
        reconcile(&healthy(&[0]), 3, &none, 0.0, 10.0),
        ScaleActions { spawn: 2, drain: vec![] }
    );
    // Least loaded first, newest first among equals.
    let ws = healthy(&[3, 0, 1, 0]);
    assert_eq!(reconcile(&ws, 2, &none, 0.0, 10.0).drain, vec![3, 1]);
    assert_eq!(reconcile(&ws, 1, &none, 0.0, 10.0).drain, vec![3, 1, 2]);
}

#[test]
fn reconcile_ignores_draining_workers() {
    let mut ws = healthy(&[0, 0]);
    ws.push(worker(2, 1, WorkerStatus::Draining));
    assert!(reconcile(&ws, 2, &CooldownState::default(), 0.0, 10.0).is_empty());
    assert_eq!(reconcile(&ws, 3, &CooldownState::default(), 0.0, 10.0).spawn, 1);
}

#[test]
fn cooldown_blocks_reversal_only() {
    let mut cd = CooldownState::default();
    cd.record(100.0, ScaleDirection::Up);
    let ws = healthy(&[0, 0, 0]);
    assert!(reconcile(&ws, 1, &cd, 105.0, 10.0).is_empty(), "down within cooldown of an up");
    assert_eq!(reconcile(&ws, 5, &cd, 105.0, 10.0).spawn, 2, "same direction is allowed");
    assert_eq!(reconcile(&ws, 1, &cd, 110.0, 10.0).drain.len(), 2, "cooldown elapsed");
}

#[test]
fn table_spreads_load_evenly() {
    let t = WorkerTable::new();
    for i in 0..4 {
        t.add(&format!("w{i}"), WorkerStatus::Healthy);
    }
    let mut counts = [0usize; 4];
    for _ in 0..100 {
        let held: Vec<usize> = (0..4).map(|_| t.acquire(&[]).unwrap().0).collect();
        for id in held {
            counts[id] += 1;
            t.release(id, true);
        }
    }
    assert_eq!(counts, [100; 4]);

    let mut single = [0usize; 4];
    for _ in 0..100 {
        let (id, _) = t.acquire(&[]).unwrap();
        single[id] += 1;
        t.release(id, true);
    }
    // Release between requests leaves every worker idle, so the tie-break
    // always lands on the lowest id; with overlapping requests load spreads.
    assert_eq!(single, [100, 0, 0, 0]);

    let mut overlapped = [0usize; 4];
    let mut held = Vec::new();
    for _ in 0..100 {
        let (id, _) = t.acquire(&[]).unwrap();
        overlapped[id] += 1;
        held.push(id);
    }
    assert_eq!(overlapped, [25; 4]);
    for id in held {
        t.release(id, true);
    }
    assert_eq!(t.in_flight_total(), 0);
    assert!(t.snapshot().iter().all(|w| w.total_completed == 100 + 100 * (w.worker_id == 0) as u64 + 25));
}

#[test]
fn acquire_respects_exclusions() {
    let t = WorkerTable::new();
    let a = t.add("a", WorkerStatus::Healthy);
    let b = t.add("b", WorkerStatus::Healthy);
    assert_eq!(t.acquire(&[a]).unwrap().0, b);
    assert!(t.acquire(&[a, b]).is_none());
}

#[test]
fn failures_mark_unhealthy_and_one_success_recovers() {
    let t = WorkerTable::new();
    let id = t.add("a", WorkerStatus::Healthy);
    for _ in 0..FAILURE_THRESHOLD - 1 {
        t.record_failure(id);
        assert_eq!(t.get(id).unwrap().status, WorkerStatus::Healthy);
    }
    t.record_failure(id);
    assert_eq!(t.get(id).unwrap().status, WorkerStatus::Unhealthy);
    assert!(t.acquire(&[]).is_none());

    t.record_success(id, 3);
    let w = t.get(id).unwrap();
    assert_eq!((w.status, w.in_flight, w.consecutive_failures), (WorkerStatus::Healthy, 3, 0));
    assert!(w.last_heartbeat.is_some());
}

#[test]
fn draining_is_not_revived_by_probes() {
    let t = WorkerTable::new();
    let id = t.add("a", WorkerStatus::Healthy);
    t.set_draining(id);
    t.record_success(id, 0);
    assert_eq!(t.get(id).unwrap().status, WorkerStatus::Draining);
}

#[derive(Default)]
struct FakeSpawner {
    next: Mutex<usize>,
    terminated: Mutex<Vec<String>>,
}

impl Spawner for FakeSpawner {
    fn spawn(&self) -> std::io::Result<String> {
        let mut n = self.next.lock().unwrap();
        *n += 1;
        Ok(format!("fake:{n}"))
    }

    fn terminate(&self, address: &str) {
        self.terminated.lock().unwrap().push(address.to_string());
    }
}

#[test]
fn autoscaler_follows_demand() {
    let table = Arc::new(WorkerTable::new());
    let spawner = Arc::new(FakeSpawner::default());
    let admission = Admission::new(64, 64);
    let p = ScalingPolicy {
        cooldown_s: 0.0,
        ..policy(2, 1, 4)
    };
    let mut scaler = Autoscaler::new(table.clone(), spawner.clone(), p, admission.clone());

    scaler.tick();
    assert_eq!(table.snapshot().len(), 1, "min_workers on an idle system");

    // Seven queued requests want four workers.
    let tickets: Vec<_> = (0..7).map(|_| admission.try_admit().unwrap()).collect();
    scaler.tick();
    let ws = table.snapshot();
    assert_eq!(ws.len(), 4);
    assert!(ws.iter().all(|w| w.status == WorkerStatus::Unhealthy), "spawned workers wait for a probe");

    drop(tickets);
    for w in &ws {
        table.record_success(w.worker_id, 0);
    }
    table.record_success(ws[0].worker_id, 1);
    scaler.tick();
    let draining: Vec<_> = table
        .snapshot()
        .into_iter()
        .filter(|w| w.status == WorkerStatus::Draining)
        .map(|w| w.worker_id)
        .collect();
    assert_eq!(draining.len(), 3);
    assert!(!draining.contains(&ws[0].worker_id), "the busy worker stays");

    scaler.tick();
    assert_eq!(table.snapshot().len(), 1, "idle draining workers are stopped");
    assert_eq!(spawner.terminated.lock().unwrap().len(), 3);
}

#[test]
fn cluster_config_parses_and_validates() {
    let c: ClusterConfig = toml::from_str(
        r#"
        workers = ["127.0.0.1:9001"]
        health_interval_s = 0.2
        [policy]
        min_workers = 1
        max_workers = 3
        "#,
    )
    .unwrap();
    c.validate().unwrap();
    assert_eq!(c.policy.target_per_worker, 2);
    assert_eq!(c.worker_port_start, 9100);

    assert!(toml::from_str::<ClusterConfig>("wrokers = []").is_err());
    assert!(ClusterConfig::default().validate().is_err(), "nothing to route to");
    let auto = ClusterConfig {
        autoscale: true,
        ..ClusterConfig::default()
    };
    auto.validate().unwrap();
    let bad = ClusterConfig {
        policy: policy(2, 5, 3),
        ..auto.clone()
    };
    assert!(bad.validate().is_err());
    let bad = ClusterConfig {
        health_interval_s: 0.0,
        ..auto
    };
    assert!(bad.validate().is_err());
}
