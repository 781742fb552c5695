mod common;

use axum::http::StatusCode;
use common::*;
use promptseg_cli::engine::{unb64, SaliencyResponse, SegmentResponse};
use promptseg_core::imaging::{decode_mask, mask_to_png};
use promptseg_core::metrics::{evaluate_scores, iou_dsc, SegRecord};
use serde_json::{json, Value};

fn segment_body(fx: &Fixture, prompt: &str) -> Value {
    json!({"image": file_b64(&fx.image), "prompt": prompt, "gt": file_b64(&fx.gt)})
}

#[tokio::test]
async fn health_and_backends() {
    let (status, body) = call(engine(), "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["backends"], json!(["synthetic", "synthetic-box"]));

    let (status, body) = call(engine(), "GET", "/api/backends", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["encoders"][0]["name"], "synthetic");
    assert_eq!(v["encoders"][0]["input_size"], json!([96, 96]));
    assert_eq!(v["segmenters"][0]["accepts_boxes"], true);
}

#[tokio::test]
async fn segment_response_is_valid_and_accurate() {
    let fx = fixture();
    let (status, headers, body) = call_full(engine(), "POST", "/api/segment", Some(segment_body(&fx, "brain tumor"))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: SegmentResponse = serde_json::from_slice(&body).unwrap();
    resp.check_invariants().unwrap();
    assert!(resp.timings.is_none());
    assert!(headers["server-timing"].to_str().unwrap().starts_with("saliency;dur="));

    let mask = decode_mask(&unb64(&resp.mask_png).unwrap()).unwrap();
    let (iou, dsc) = iou_dsc(&mask, &fx.gt_mask).unwrap();
    assert!(iou >= 0.7, "IoU {iou}");
    let metrics = resp.metrics.unwrap();
    assert_eq!((metrics.iou, metrics.dsc), (iou, dsc));
    assert!(metrics.auc.unwrap() > 0.9);
    assert_eq!(resp.provenance.prompt, "brain tumor");
    assert_eq!(resp.provenance.options.saliency.top_k, 60);
    assert_eq!(resp.saliency.values.decode().unwrap().dim(), (SIZE, SIZE));
    assert_eq!(resp.boxes.len(), 1);
}

#[tokio::test]
async fn requested_timings_are_non_negative() {
    let fx = fixture();
    let mut body = segment_body(&fx, "tumor");
    body["params"] = json!({"timings": true, "method": "gradcam"});
    let (status, body) = call(engine(), "POST", "/api/segment", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: SegmentResponse = serde_json::from_slice(&body).unwrap();
    resp.check_invariants().unwrap();
    let t = resp.timings.unwrap();
    assert!(t.saliency_ms >= 0.0 && t.crf_ms >= 0.0 && t.boxes_ms >= 0.0 && t.segment_ms >= 0.0);
    assert_eq!(resp.provenance.method.as_str(), "gradcam");
}

#[tokio::test]
async fn service_is_stateless() {
    let fx = fixture();
    let e = engine();
    let a = segment_body(&fx, "tumor");
    let b = segment_body(&fx, "bone");
    let (_, a1) = call(e.clone(), "POST", "/api/segment", Some(a.clone())).await;
    let (_, b1) = call(e.clone(), "POST", "/api/segment", Some(b.clone())).await;
    let (_, b2) = call(e.clone(), "POST", "/api/segment", Some(b)).await;
    let (_, a2) = call(engine(), "POST", "/api/segment", Some(a)).await;
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_ne!(a1, b1);
}

#[tokio::test]
async fn empty_prompt_is_a_400() {
    let fx = fixture();
    for prompt in ["", "   "] {
        let (status, body) = call(engine(), "POST", "/api/segment", Some(segment_body(&fx, prompt))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["error"]["code"], "EmptyPrompt");
    }
    let body = json!({"image": file_b64(&fx.image), "prompt": ""});
    let (status, _) = call(engine(), "POST", "/api/saliency", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let (status, body) = call(engine(), "POST", "/api/segment", Some(json!({"image": "@@@", "prompt": "tumor"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"]["code"], "DecodeError");

    let (status, body) = call(engine(), "POST", "/api/segment", Some(json!({"prompt": "tumor"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"]["code"], "BadRequest");

    let fx = fixture();
    let mut body = segment_body(&fx, "tumor");
    body["params"] = json!({"top_k": 0});
    let (status, body) = call(engine(), "POST", "/api/segment", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["error"]["code"], "InvalidConfig");
}

#[tokio::test]
async fn absent_concept_reports_empty_segmentation_with_saliency() {
    let fx = fixture();
    let (status, body) = call(engine(), "POST", "/api/segment", Some(segment_body(&fx, "cyst"))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"]["code"], "EmptySegmentation");
    assert_eq!(v["error"]["saliency"]["values"]["height"], SIZE);
}

#[tokio::test]
async fn saliency_endpoint_matches_the_engine() {
    let fx = fixture();
    let body = json!({"image": file_b64(&fx.image), "prompt": "tumor", "params": {"top_k": 8}});
    let (status, bytes) = call(engine(), "POST", "/api/saliency", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: SaliencyResponse = serde_json::from_slice(&bytes).unwrap();
    let image = promptseg_core::imaging::Image::decode(&std::fs::read(&fx.image).unwrap()).unwrap();
    let params = promptseg_cli::engine::SegmentParams {
        top_k: Some(8),
        ..Default::default()
    };
    let direct = engine().saliency(&image, "tumor", &params).unwrap();
    assert_eq!(resp.saliency.top_k, Some(8));
    assert_eq!(resp.saliency.values.decode().unwrap(), direct.values.mapv(|v| v as f32));
}

#[tokio::test]
async fn metrics_endpoint_scores_masks_and_maps() {
    let gt = ndarray::Array2::from_shape_fn((8, 8), |(y, _)| y < 4);
    let pred = ndarray::Array2::from_shape_fn((8, 8), |(y, _)| y < 2);
    let body = json!({"prediction": promptseg_cli::engine::b64(&mask_to_png(&pred)), "gt": promptseg_cli::engine::b64(&mask_to_png(&gt)), "id": "a"});
    let (status, bytes) = call(engine(), "POST", "/api/metrics", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let rec: SegRecord = serde_json::from_slice(&bytes).unwrap();
    assert_eq!((rec.id.as_str(), rec.iou, rec.dsc), ("a", 0.5, 2.0 / 3.0));

    let scores = ndarray::Array2::from_shape_fn((8, 8), |(y, x)| if y < 4 { 0.6 + 0.01 * x as f64 } else { 0.3 });
    let rows: Vec<Vec<f64>> = scores.rows().into_iter().map(|r| r.to_vec()).collect();
    let body = json!({"scores": rows, "gt": promptseg_cli::engine::b64(&mask_to_png(&gt))});
    let (status, bytes) = call(engine(), "POST", "/api/metrics", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let rec: SegRecord = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(rec, evaluate_scores("prediction", scores.view(), &gt).unwrap());
    assert_eq!(rec.auc, Some(1.0));

    let body = json!({"gt": promptseg_cli::engine::b64(&mask_to_png(&gt))});
    let (status, _) = call(engine(), "POST", "/api/metrics", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
