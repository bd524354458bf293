mod support;

use std::time::Duration;

use anonymizer_core::{synthetic, BoundingBox, Image, Pipeline};
use anonymizer_gateway::config::ServiceConfig;
use anonymizer_gateway::service::build_pipeline;
use anonymizer_gateway::Service;
use serde_json::json;
use support::*;

fn mock_gateway(dir: &tempfile::TempDir) -> Gateway {
    Gateway::start(ServiceConfig::mock(7, dir.path()))
}

fn scene_png() -> Vec<u8> {
    synthetic::two_body_scene().to_png().unwrap()
}

fn bboxes(summary: &serde_json::Value) -> Vec<BoundingBox> {
    summary["bodies"].as_array().unwrap().iter().map(|b| serde_json::from_value(b["bbox"].clone()).unwrap()).collect()
}

fn body_ids(summary: &serde_json::Value) -> Vec<String> {
    summary["bodies"].as_array().unwrap().iter().map(|b| b["body_id"].as_str().unwrap().to_string()).collect()
}

#[test]
fn upload_finds_the_two_painted_figures() {
    let dir = tempfile::tempdir().unwrap();
    let gw = mock_gateway(&dir);
    let summary = upload(&gw, &scene_png());
    // the figures are the two saturated rectangles painted by two_body_scene
    assert_eq!(bboxes(&summary), vec![BoundingBox::new(12, 10, 20, 46), BoundingBox::new(58, 12, 22, 44)]);
    assert_eq!(summary["width"], 96);
    assert_eq!(summary["height"], 64);
    let again = upload(&gw, &scene_png());
    assert_eq!(again, summary);

    let (ct, body) = multipart("image", "scene.png", &scene_png());
    let r = post(&gw.url("/v1/images"), &ct, &body);
    assert_eq!(r.status, 201);
    assert_eq!(body_ids(&r.json()), body_ids(&summary));

    let r = get(&gw.url(&format!("/v1/images/{}", summary["image_id"].as_str().unwrap())));
    assert_eq!(r.status, 200);
    assert_eq!(r.json(), summary);
}

#[test]
fn upload_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig { max_upload_bytes: 2000, ..ServiceConfig::mock(7, dir.path()) };
    let gw = Gateway::start(config);
    let r = post(&gw.url("/v1/images"), "application/octet-stream", b"definitely not an image");
    assert_eq!(r.status, 400);
    assert!(r.json()["message"].as_str().unwrap().contains("decode"));
    let r = post(&gw.url("/v1/images"), "application/octet-stream", b"");
    assert_eq!(r.status, 400);
    let big = Image::filled(64, 64, [1, 2, 3]).unwrap();
    let mut png = big.to_png().unwrap();
    png.resize(3000, 0);
    let r = post(&gw.url("/v1/images"), "application/octet-stream", &png);
    assert_eq!(r.status, 413);
    assert_eq!(r.json()["error"], "payload_too_large");
    // beyond the transport limit the server answers before the body ends
    let head = raw_exchange(&gw, 1 << 20, 128 * 1024);
    assert!(head.starts_with("HTTP/1.1 413"), "{head}");
    assert!(head.contains("x-correlation-id"), "{head}");
}

/// Announces `declared` body bytes, sends `sent` of them, reads the reply.
fn raw_exchange(gw: &Gateway, declared: usize, sent: usize) -> String {
    use std::io::{Read, Write};
    let mut stream = std::net::TcpStream::connect(gw.base.trim_start_matches("http://")).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let head = format!(
        "POST /v1/images HTTP/1.1\r\nhost: x\r\ncontent-type: application/octet-stream\r\ncontent-length: {declared}\r\n\r\n"
    );
    stream.write_all(head.as_bytes()).unwrap();
    // the server may stop reading once the limit is hit
    let _ = stream.write_all(&vec![0u8; sent]);
    let mut buf = vec![0u8; 4096];
    let n = stream.read(&mut buf).unwrap();
    String::from_utf8_lossy(&buf[..n]).to_lowercase().replacen("http/1.1", "HTTP/1.1", 1)
}

#[test]
fn job_runs_queued_running_done() {
    let dir = tempfile::tempdir().unwrap();
    let gw = mock_gateway(&dir);
    let summary = upload(&gw, &scene_png());
    let ids = body_ids(&summary);
    let (job, png) = anonymize(
        &gw,
        summary["image_id"].as_str().unwrap(),
        3,
        json!([{"body_id": ids[0], "option": "physical_removal"}]),
    );
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["history"], json!(["queued", "running", "done"]));
    assert_eq!(job["error"], serde_json::Value::Null);
    assert_eq!(job["request_digest"].as_str().unwrap().len(), 64);
    let result = Image::decode(&png.unwrap()).unwrap();
    assert_eq!(result.dims(), (96, 64));
    assert_ne!(result, synthetic::two_body_scene());
}

#[test]
fn gateway_output_equals_direct_pipeline_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig::mock(7, dir.path());
    let pipeline: Pipeline = build_pipeline(&config).unwrap();
    let gw = Gateway::start(config.clone());
    let summary = upload(&gw, &scene_png());
    let ids = body_ids(&summary);
    let choices = json!([
        {"body_id": ids[0], "option": "mask_based_removal"},
        {"body_id": ids[1], "option": "identity_removal"},
    ]);
    let (_, png) = anonymize(&gw, summary["image_id"].as_str().unwrap(), 11, choices.clone());
    let direct = pipeline
        .anonymize(&anonymizer_core::AnonymizationRequest {
            image: synthetic::two_body_scene(),
            choices: serde_json::from_value(choices).unwrap(),
            seed: 11,
            config: config.pipeline.clone(),
        })
        .unwrap();
    assert_eq!(Image::decode(&png.unwrap()).unwrap(), direct.image);
}

#[test]
fn all_no_action_returns_the_same_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let gw = mock_gateway(&dir);
    let summary = upload(&gw, &scene_png());
    let choices: Vec<_> = body_ids(&summary).iter().map(|id| json!({"body_id": id, "option": "no_action"})).collect();
    let (_, png) = anonymize(&gw, summary["image_id"].as_str().unwrap(), 0, json!(choices));
    assert_eq!(Image::decode(&png.unwrap()).unwrap(), synthetic::two_body_scene());
    let (_, png) = anonymize(&gw, summary["image_id"].as_str().unwrap(), 0, json!([]));
    assert_eq!(Image::decode(&png.unwrap()).unwrap(), synthetic::two_body_scene());
}

#[test]
fn submit_validation() {
    let dir = tempfile::tempdir().unwrap();
    let gw = mock_gateway(&dir);
    let summary = upload(&gw, &scene_png());
    let image_id = summary["image_id"].as_str().unwrap();
    let ids = body_ids(&summary);
    let url = gw.url("/v1/anonymize");

    let r = post_json(&url, &json!({"image_id": image_id, "seed": 1, "choices": [{"body_id": ids[0], "option": "blur"}]}));
    assert_eq!(r.status, 400);
    let msg = r.json()["message"].as_str().unwrap().to_string();
    for option in ["physical_removal", "adversarial_removal", "mask_based_removal", "identity_removal", "no_action"] {
        assert!(msg.contains(option), "{msg}");
    }
    assert!(msg.contains("blur"));

    let r = post_json(&url, &json!({"image_id": "0".repeat(64), "choices": []}));
    assert_eq!(r.status, 404);
    let r = post_json(&url, &json!({"image_id": image_id, "choices": [{"body_id": "nobody", "option": "no_action"}]}));
    assert_eq!(r.status, 404);
    assert!(r.json()["message"].as_str().unwrap().contains("nobody"));
    let r = post_json(
        &url,
        &json!({"image_id": image_id, "choices": [
            {"body_id": ids[0], "option": "no_action"},
            {"body_id": ids[0], "option": "physical_removal"},
        ]}),
    );
    assert_eq!(r.status, 400);
    assert!(r.json()["message"].as_str().unwrap().contains("conflicting"));
    let r = post(&url, "application/json", b"{not json");
    assert_eq!(r.status, 400);
    let r = post_json(&url, &json!({"choices": []}));
    assert_eq!(r.status, 400);
    assert!(r.json()["message"].as_str().unwrap().contains("image_id"));

    assert_eq!(get(&gw.url("/v1/jobs/does-not-exist")).status, 404);
    assert_eq!(get(&gw.url("/v1/results/does-not-exist")).status, 404);
    assert_eq!(get(&gw.url("/v1/images/unknown")).status, 404);
}

#[test]
fn disabled_option_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        enabled_options: vec![anonymizer_core::AnonymizationChoice::NoAction],
        ..ServiceConfig::mock(7, dir.path())
    };
    let gw = Gateway::start(config);
    let summary = upload(&gw, &scene_png());
    let ids = body_ids(&summary);
    let r = post_json(
        &gw.url("/v1/anonymize"),
        &json!({"image_id": summary["image_id"], "choices": [{"body_id": ids[0], "option": "physical_removal"}]}),
    );
    assert_eq!(r.status, 400);
    assert!(r.json()["message"].as_str().unwrap().contains("not enabled"));
}

#[test]
fn failed_job_reports_error_and_has_no_result() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig::mock(7, dir.path());
    // no manifolds loaded, so mask-based removal fails inside the worker
    let pipeline = Pipeline::new(anonymizer_core::Backends::mock(7, 64));
    let gw = Gateway::with_service(Service::with_pipeline(config, pipeline).unwrap());
    let summary = upload(&gw, &scene_png());
    let ids = body_ids(&summary);
    let r = post_json(
        &gw.url("/v1/anonymize"),
        &json!({"image_id": summary["image_id"], "choices": [{"body_id": ids[0], "option": "mask_based_removal"}]}),
    );
    let job_id = r.json()["job_id"].as_str().unwrap().to_string();
    let job = wait_job(&gw, &job_id, Duration::from_secs(10));
    assert_eq!(job["state"], "failed");
    assert_eq!(job["history"], json!(["queued", "running", "failed"]));
    assert!(job["error"].as_str().unwrap().contains("manifold"));
    let r = get(&gw.url(&format!("/v1/results/{job_id}")));
    assert_eq!(r.status, 409);
}

#[test]
fn every_response_carries_the_correlation_id() {
    let dir = tempfile::tempdir().unwrap();
    let gw = mock_gateway(&dir);
    for path in ["/v1/health", "/v1/jobs/missing", "/v1/no-such-route"] {
        let r = get_with(&gw.url(path), "req-42");
        assert_eq!(r.correlation.as_deref(), Some("req-42"), "{path}");
        let r = get(&gw.url(path));
        let generated = r.correlation.expect("generated id");
        assert!(uuid::Uuid::parse_str(&generated).is_ok(), "{generated}");
    }
    let r = post(&gw.url("/v1/images"), "application/octet-stream", b"junk");
    assert!(r.correlation.is_some());
    let r = get(&gw.url("/v1/health"));
    assert_eq!(r.status, 200);
    assert_eq!(r.json()["status"], "ok");
}

#[test]
fn concurrent_jobs_all_finish() {
    let dir = tempfile::tempdir().unwrap();
    let gw = mock_gateway(&dir);
    let (img, _) = synthetic::multi_body_scene(5, 3);
    let summary = upload(&gw, &img.to_png().unwrap());
    let image_id = summary["image_id"].as_str().unwrap().to_string();
    let ids = body_ids(&summary);
    let job_ids: Vec<String> = (0..8u64)
        .map(|seed| {
            let choices: Vec<_> =
                ids.iter().map(|id| json!({"body_id": id, "option": "physical_removal"})).collect();
            let r = post_json(&gw.url("/v1/anonymize"), &json!({"image_id": image_id, "seed": seed, "choices": choices}));
            assert_eq!(r.status, 202);
            r.json()["job_id"].as_str().unwrap().to_string()
        })
        .collect();
    for id in &job_ids {
        let job = wait_job(&gw, id, Duration::from_secs(60));
        assert_eq!(job["state"], "done");
        assert_eq!(job["history"], json!(["queued", "running", "done"]));
    }
    let counts = get(&gw.url("/v1/health")).json()["jobs"].clone();
    assert_eq!(counts["done"], 8);
    assert_eq!(counts["running"], 0);
}
