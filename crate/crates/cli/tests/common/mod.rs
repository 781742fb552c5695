#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use promptseg_cli::api::router;
use promptseg_cli::config::AppConfig;
use promptseg_cli::engine::{b64, Engine};
use promptseg_core::encoder::{RegionShape, SyntheticScene};
use promptseg_core::imaging::{mask_to_png, Mask};
use tower::ServiceExt;

pub const SIZE: usize = 96;

pub const CONFIG: &str = r#"
[backend]
name = "synthetic"
input_size = [96, 96]

[pipeline.saliency]
method = "gscorecam"
top_k = 60
"#;

pub fn config() -> AppConfig {
    AppConfig::from_toml(CONFIG).unwrap()
}

pub fn engine() -> Arc<Engine> {
    Arc::new(Engine::from_config(&config()).unwrap())
}

/// A tumor disk and a bone rectangle on textured background.
pub fn scene() -> SyntheticScene {
    SyntheticScene::new(SIZE, SIZE)
        .with_region(0, RegionShape::Disk { cy: 40.0, cx: 36.0, radius: 16.0 })
        .with_region(6, RegionShape::Rect { top: 66, left: 60, bottom: 88, right: 90 })
        .with_noise(0.02, 5)
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub image: PathBuf,
    pub gt: PathBuf,
    pub config: PathBuf,
    pub gt_mask: Mask,
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene();
    let image = dir.path().join("scan.png");
    scene.render().save_png(&image).unwrap();
    let gt_mask = scene.concept_mask(0);
    let gt = dir.path().join("scan_gt.png");
    std::fs::write(&gt, mask_to_png(&gt_mask)).unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, CONFIG).unwrap();
    Fixture {
        dir,
        image,
        gt,
        config,
        gt_mask,
    }
}

pub fn file_b64(path: &Path) -> String {
    b64(&std::fs::read(path).unwrap())
}

pub async fn call(engine: Arc<Engine>, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let (status, _, bytes) = call_full(engine, method, uri, body).await;
    (status, bytes)
}

pub async fn call_full(
    engine: Arc<Engine>,
    method: &str,
    uri: &str,
    body: Option<serde_json::Value>,
) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let request = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(b) => request
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => request.body(Body::empty()),
    }
    .unwrap();
    let response = router(engine, 32 << 20).oneshot(request).await.unwrap();
    let status = response.status();
    let headers = response.headers().clone();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

pub fn promptseg(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .env_remove("PROMPTSEG_WEIGHTS_PATH")
        .output()
        .unwrap()
}

pub fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON in stderr: {text}"));
    serde_json::from_str(line).unwrap()
}
