mod support;

use anonymizer_core::backends::wire::{BackendResponse, Route};
use anonymizer_core::backends::{BackendError, BackendRole};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::payloads;

#[test]
fn every_schema_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for (schema, result) in payloads::roundtrip_all(&mut rng, 200) {
        assert!(result.is_ok(), "{schema}: {}", result.unwrap_err());
    }
}

#[test]
fn missing_field_is_a_protocol_error_naming_it() {
    let body = br#"{"embedding":[1.0,0.0]}"#;
    match BackendResponse::from_json(Route::Role(BackendRole::Embed), body) {
        Err(BackendError::Protocol { role, detail }) => {
            assert_eq!(role, "embed");
            assert!(detail.contains("activity"), "{detail}");
        }
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn segment_bbox_serializes_as_array() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let resp = payloads::response(&mut rng, Route::Role(BackendRole::Detect));
    let v: serde_json::Value = serde_json::from_slice(&resp.to_json().unwrap()).unwrap();
    for d in v["detections"].as_array().unwrap() {
        assert_eq!(d["bbox"].as_array().unwrap().len(), 4);
    }
}
