#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::RgbImage;
use ndarray::Array2;
use plotnpolish_core::backend::{
    BackendDescriptor, BackendError, DenoiseCondition, DiffusionBackend, ImagePromptHandle, LatentTensor,
    MockBackend, NoiseSchedule, PersonalizationSource,
};
use plotnpolish_core::perception::Perception;
use plotnpolish_core::pipeline::{Pipeline, ProjectConfig};
use plotnpolish_server::{router, AppState, ServerConfig};
use serde_json::Value;
use tower::ServiceExt;

pub const LISTING: &str = include_str!("../fixtures/listing1.json");
pub const MISSING_IMAGE_PROMPT: &str = include_str!("../fixtures/missing_image_prompt.json");

pub fn listing_value() -> Value {
    let plan = plotnpolish_core::schema::parse_plan(LISTING, plotnpolish_core::schema::ParseMode::Lenient).unwrap();
    plotnpolish_core::schema::plan_to_value(&plan)
}

pub fn small_config(res: u32, steps: usize) -> ProjectConfig {
    ProjectConfig {
        steps,
        working_resolution: (res, res),
        ..ProjectConfig::default()
    }
}

pub struct TestApp {
    pub state: AppState,
    pub router: Router,
    pub dir: tempfile::TempDir,
}

pub fn app_with(pipeline: Pipeline, sync_jobs: bool) -> TestApp {
    let dir = tempfile::tempdir().unwrap();
    open_at(dir, pipeline, sync_jobs)
}

pub fn open_at(dir: tempfile::TempDir, pipeline: Pipeline, sync_jobs: bool) -> TestApp {
    let mut config = ServerConfig::new(dir.path());
    config.sync_jobs = sync_jobs;
    let state = AppState::open(config, pipeline, None).unwrap();
    TestApp {
        router: router(state.clone()),
        state,
        dir,
    }
}

pub fn mock_app(res: u32) -> TestApp {
    app_with(Pipeline::mock(res, res), true)
}

impl TestApp {
    pub async fn send(&self, request: Request<Body>) -> (StatusCode, Vec<u8>) {
        let response = self.router.clone().oneshot(request).await.unwrap();
        let status = response.status();
        let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    pub async fn json(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let builder = Request::builder().method(method).uri(uri);
        let request = match body {
            Some(v) => builder
                .header("content-type", "application/json")
                .body(Body::from(serde_json::to_vec(&v).unwrap())),
            None => builder.body(Body::empty()),
        }
        .unwrap();
        let (status, bytes) = self.send(request).await;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.json(Method::GET, uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.json(Method::POST, uri, Some(body)).await
    }

    pub async fn post_bytes(&self, uri: &str, content_type: &str, body: Vec<u8>) -> (StatusCode, Value) {
        let request = Request::builder()
            .method(Method::POST)
            .uri(uri)
            .header("content-type", content_type)
            .body(Body::from(body))
            .unwrap();
        let (status, bytes) = self.send(request).await;
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    /// Creates a project from the six-page listing.
    pub async fn create_listing_project(&self, config: &ProjectConfig, seed: u64) -> String {
        let (status, body) = self
            .post(
                "/projects",
                serde_json::json!({ "plan": listing_value(), "config": config, "seed": seed }),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["id"].as_str().unwrap().to_string()
    }

    /// Polls until the job reaches a terminal state.
    pub async fn wait_job(&self, job_id: &str) -> Value {
        for _ in 0..6000 {
            let (status, job) = self.get(&format!("/jobs/{job_id}")).await;
            assert_eq!(status, StatusCode::OK);
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {job_id} did not finish");
    }

    pub async fn frame_png(&self, hash: &str) -> RgbImage {
        let request = Request::builder().uri(format!("/frames/{hash}")).body(Body::empty()).unwrap();
        let (status, bytes) = self.send(request).await;
        assert_eq!(status, StatusCode::OK);
        image::load_from_memory(&bytes).unwrap().to_rgb8()
    }
}

pub fn frame_hashes(project: &Value) -> Vec<String> {
    project["frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["hash"].as_str().unwrap().to_string())
        .collect()
}

pub fn multipart(files: &[(&str, Vec<u8>)]) -> (String, Vec<u8>) {
    let boundary = "plotnpolish-test-boundary";
    let mut body = Vec::new();
    for (name, bytes) in files {
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"frames\"; filename=\"{name}\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

/// Blocks `predict_noise` until opened, so a job can be held mid-flight.
#[derive(Default)]
pub struct Gate {
    open: Mutex<bool>,
    cv: Condvar,
    pub entered: AtomicUsize,
}

impl Gate {
    pub fn open(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }

    fn pass(&self) {
        self.entered.fetch_add(1, Ordering::SeqCst);
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
    }

    pub async fn wait_entered(&self) {
        for _ in 0..2000 {
            if self.entered.load(Ordering::SeqCst) > 0 {
                return;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("no job reached the backend");
    }
}

pub struct GatedBackend {
    inner: MockBackend,
    gate: Arc<Gate>,
}

impl GatedBackend {
    pub fn pipeline(res: u32) -> (Pipeline, Arc<Gate>) {
        let gate = Arc::new(Gate::default());
        let backend = GatedBackend {
            inner: MockBackend::with_resolution(res, res),
            gate: gate.clone(),
        };
        (Pipeline::new(Arc::new(backend), Perception::oracle()), gate)
    }
}

impl DiffusionBackend for GatedBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn scale_factor(&self) -> usize {
        self.inner.scale_factor()
    }

    fn native_resolution(&self) -> (u32, u32) {
        self.inner.native_resolution()
    }

    fn encode(&self, image: &RgbImage) -> Result<LatentTensor, BackendError> {
        self.inner.encode(image)
    }

    fn decode(&self, latent: &LatentTensor) -> Result<RgbImage, BackendError> {
        self.inner.decode(latent)
    }

    fn predict_noise(
        &self,
        latent: &LatentTensor,
        cond: &DenoiseCondition,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<LatentTensor, BackendError> {
        self.gate.pass();
        self.inner.predict_noise(latent, cond, t, schedule)
    }

    fn sample_template(&self, prompt: &str, seed: u64) -> Result<RgbImage, BackendError> {
        self.inner.sample_template(prompt, seed)
    }

    fn load_personalization(&self, source: &PersonalizationSource) -> Result<ImagePromptHandle, BackendError> {
        self.inner.load_personalization(source)
    }

    fn cross_attention(&self, image: &RgbImage, concept: &str) -> Result<Array2<f64>, BackendError> {
        self.inner.cross_attention(image, concept)
    }
}
