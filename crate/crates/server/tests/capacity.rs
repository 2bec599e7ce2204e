mod support;

use std::sync::atomic::Ordering;
use std::time::Duration;

use serde_json::Value;

use support::*;

async fn wait_for_load(c: &reqwest::Client, url: &str, in_flight: u64, queued: u64) {
    for _ in 0..500 {
        let (_, h) = get(c, url).await;
        if h["in_flight"] == in_flight && h["queue_depth"] == queued {
            return;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("server never reached in_flight={in_flight} queue_depth={queued}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn submission_past_bound_gets_503() {
    let (c_run, b_wait) = (2usize, 3usize);
    let (s, stats) = stub_server(Duration::from_millis(800), config(c_run, b_wait)).await;
    let c = client();
    let mut pending = Vec::new();
    for i in 0..c_run + b_wait {
        let (c, url) = (c.clone(), s.url("/generate"));
        pending.push(tokio::spawn(async move { post(&c, &url, &quick_request(&format!("r{i}"))).await }));
    }
    wait_for_load(&c, &s.url("/health"), c_run as u64, b_wait as u64).await;

    let (code, r) = post(&c, &s.url("/generate"), &quick_request("overflow")).await;
    assert_eq!(code, 503, "{r}");
    assert_eq!(r["task_id"], "overflow");
    let (code, _) = post(&c, &s.url("/tasks"), &quick_request("overflow-task")).await;
    assert_eq!(code, 503);

    for p in pending {
        let (code, r) = p.await.unwrap();
        assert_eq!(code, 200, "{r}");
    }
    assert_eq!(stats.max_running.load(Ordering::Acquire), c_run);
    assert_eq!(stats.completed.load(Ordering::Acquire), c_run + b_wait);

    let (code, _) = post(&c, &s.url("/generate"), &quick_request("after")).await;
    assert_eq!(code, 200, "capacity is released");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn tasks_run_in_submission_order() {
    let (s, _) = stub_server(Duration::from_millis(60), config(1, 8)).await;
    let c = client();
    let mut ids = Vec::new();
    for i in 0..5 {
        let (code, acc) = post(&c, &s.url("/tasks"), &quick_request(&format!("fifo{i}"))).await;
        assert_eq!(code, 202);
        ids.push(acc["id"].as_str().unwrap().to_string());
    }
    let mut seen_running = false;
    let mut records: Vec<Value> = Vec::new();
    for id in &ids {
        loop {
            let (_, rec) = get(&c, &s.url(&format!("/tasks/{id}"))).await;
            seen_running |= rec["status"] == "running";
            if rec["status"] == "done" {
                records.push(rec);
                break;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
    assert!(seen_running, "a running state was observable");
    let finished: Vec<u64> = records.iter().map(|r| r["finished_at"].as_u64().unwrap()).collect();
    assert!(finished.windows(2).all(|w| w[0] <= w[1]), "{finished:?}");
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["result"]["task_id"], format!("fifo{i}"));
        assert_eq!(r["result"]["images"][0], format!("stub:inproc:fifo{i}:0"));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_reports_live_load() {
    let (s, _) = stub_server(Duration::from_millis(400), config(1, 4)).await;
    let c = client();
    let mut pending = Vec::new();
    for i in 0..3 {
        let (c, url) = (c.clone(), s.url("/generate"));
        pending.push(tokio::spawn(async move { post(&c, &url, &quick_request(&format!("h{i}"))).await }));
    }
    wait_for_load(&c, &s.url("/health"), 1, 2).await;
    for p in pending {
        p.await.unwrap();
    }
    wait_for_load(&c, &s.url("/health"), 0, 0).await;
}
