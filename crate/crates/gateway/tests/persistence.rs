mod support;

use std::time::Duration;

use anonymizer_core::synthetic;
use anonymizer_gateway::config::ServiceConfig;
use anonymizer_gateway::jobs::{Job, JobState};
use anonymizer_gateway::store::Store;
use serde_json::json;
use support::*;

fn choices(summary: &serde_json::Value) -> serde_json::Value {
    let ids: Vec<&str> = summary["bodies"].as_array().unwrap().iter().map(|b| b["body_id"].as_str().unwrap()).collect();
    json!([
        {"body_id": ids[0], "option": "mask_based_removal"},
        {"body_id": ids[1], "option": "adversarial_removal"},
    ])
}

#[test]
fn restart_keeps_jobs_and_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let png = synthetic::two_body_scene().to_png().unwrap();

    let gw = Gateway::start(ServiceConfig::mock(3, dir.path()));
    let summary = upload(&gw, &png);
    let (job, first) = anonymize(&gw, summary["image_id"].as_str().unwrap(), 99, choices(&summary));
    let first = first.expect("job done");
    let job_id = job["job_id"].as_str().unwrap().to_string();
    gw.stop();

    // a new process over the same directory
    let gw = Gateway::start(ServiceConfig::mock(3, dir.path()));
    let r = get(&gw.url(&format!("/v1/jobs/{job_id}")));
    assert_eq!(r.status, 200);
    assert_eq!(r.json(), job);
    assert_eq!(get(&gw.url(&format!("/v1/results/{job_id}"))).body, first);
    // the image is known without re-uploading
    let (replayed, second) = anonymize(&gw, summary["image_id"].as_str().unwrap(), 99, choices(&summary));
    assert_eq!(second.unwrap(), first);
    assert_eq!(replayed["request_digest"], job["request_digest"]);
    assert_eq!(replayed["result_id"], job["result_id"]);

    let again = gw.service.replay(&job_id).unwrap();
    let replayed = wait_job(&gw, &again, Duration::from_secs(30));
    assert_eq!(replayed["result_id"], job["result_id"]);
}

#[test]
fn digest_ignores_choice_order() {
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::start(ServiceConfig::mock(3, dir.path()));
    let summary = upload(&gw, &synthetic::two_body_scene().to_png().unwrap());
    let image_id = summary["image_id"].as_str().unwrap();
    let forward = choices(&summary);
    let mut reversed = forward.as_array().unwrap().clone();
    reversed.reverse();
    let (a, pa) = anonymize(&gw, image_id, 5, forward);
    let (b, pb) = anonymize(&gw, image_id, 5, json!(reversed));
    assert_eq!(a["request_digest"], b["request_digest"]);
    assert_eq!(pa, pb);
    let (c, _) = anonymize(&gw, image_id, 6, choices(&summary));
    assert_ne!(a["request_digest"], c["request_digest"]);
}

#[test]
fn restart_requeues_queued_and_fails_interrupted_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::start(ServiceConfig::mock(3, dir.path()));
    let summary = upload(&gw, &synthetic::two_body_scene().to_png().unwrap());
    let (done, _) = anonymize(&gw, summary["image_id"].as_str().unwrap(), 1, choices(&summary));
    gw.stop();

    // simulate a crash with one job waiting and one mid-run
    let store = Store::open(dir.path()).unwrap();
    let mut index = store.load_index().unwrap();
    let template: Job = serde_json::from_value(done.clone()).unwrap();
    let queued = Job::new(
        "queued-job".into(),
        template.request_digest.clone(),
        template.image_id.clone(),
        template.seed,
        template.choices.clone(),
    );
    let mut running = queued.clone();
    running.job_id = "running-job".into();
    running.advance(JobState::Running).unwrap();
    for job in [queued, running] {
        index.job_order.push(job.job_id.clone());
        index.jobs.insert(job.job_id.clone(), job);
    }
    store.save_index(&index).unwrap();

    let gw = Gateway::start(ServiceConfig::mock(3, dir.path()));
    let requeued = wait_job(&gw, "queued-job", Duration::from_secs(30));
    assert_eq!(requeued["state"], "done");
    assert_eq!(requeued["history"], json!(["queued", "running", "done"]));
    assert_eq!(requeued["result_id"], done["result_id"]);
    let interrupted = get(&gw.url("/v1/jobs/running-job")).json();
    assert_eq!(interrupted["state"], "failed");
    assert_eq!(interrupted["history"], json!(["queued", "running", "failed"]));
    assert!(interrupted["error"].as_str().unwrap().contains("restart"));
}

#[test]
fn store_is_a_flat_directory() {
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::start(ServiceConfig::mock(3, dir.path()));
    let png = synthetic::two_body_scene().to_png().unwrap();
    let summary = upload(&gw, &png);
    let (job, _) = anonymize(&gw, summary["image_id"].as_str().unwrap(), 1, choices(&summary));
    gw.stop();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            assert!(e.file_type().unwrap().is_file());
            e.file_name().into_string().unwrap()
        })
        .collect();
    names.sort();
    let mut expected = vec![
        "index.json".to_string(),
        summary["image_id"].as_str().unwrap().to_string(),
        job["result_id"].as_str().unwrap().to_string(),
    ];
    expected.sort();
    assert_eq!(names, expected);
    assert_eq!(std::fs::read(dir.path().join(summary["image_id"].as_str().unwrap())).unwrap(), png);
}
