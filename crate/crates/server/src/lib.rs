//! HTTP API over the editing pipeline.
//!
//! Denoising operations run as jobs: the request returns `202` with a job
//! record that clients poll at `GET /jobs/{id}`. Each project admits one
//! mutating operation at a time; a second one gets `409`. Projects are
//! persisted as pipeline project directories under `<root>/projects`, and
//! job records under `<root>/jobs`.

pub mod error;
pub mod jobs;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use plotnpolish_core::imaging;
use plotnpolish_core::pipeline::{
    load_project, save_project, EditRequest, FrameRef, MaskSource, Pipeline, Project, ProjectConfig,
};
use plotnpolish_core::planner::{generate_plan, refine_plan, Conversation, LlmClient, PlannerConfig};
use plotnpolish_core::schema::{plan_from_value, plan_to_value, StoryIdea};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard, Semaphore};

pub use error::{ApiError, ErrorBody};
pub use jobs::{JobKind, JobState, JobStatus, JobStore, Progress};

const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub root: PathBuf,
    /// Concurrent denoising jobs across all projects.
    pub workers: usize,
    /// Run jobs to completion before answering. Meant for tests and the
    /// mock backend.
    pub sync_jobs: bool,
    pub planner: PlannerConfig,
    /// Used for projects created without an explicit config.
    pub project_defaults: ProjectConfig,
}

impl ServerConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ServerConfig {
            root: root.into(),
            workers: 1,
            sync_jobs: false,
            planner: PlannerConfig::default(),
            project_defaults: ProjectConfig::default(),
        }
    }
}

struct ProjectSlot {
    project: RwLock<Project>,
    writer: Arc<AsyncMutex<()>>,
    dir: PathBuf,
}

struct Inner {
    config: ServerConfig,
    pipeline: Arc<Pipeline>,
    llm: Option<Arc<dyn LlmClient>>,
    projects: RwLock<HashMap<String, Arc<ProjectSlot>>>,
    jobs: Arc<JobStore>,
    workers: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Opens (or creates) the data root and reloads persisted projects and
    /// jobs.
    pub fn open(
        config: ServerConfig,
        pipeline: Pipeline,
        llm: Option<Arc<dyn LlmClient>>,
    ) -> std::io::Result<Self> {
        let projects_dir = config.root.join("projects");
        std::fs::create_dir_all(&projects_dir)?;
        let jobs = Arc::new(JobStore::open(&config.root.join("jobs"))?);
        let mut projects = HashMap::new();
        for entry in std::fs::read_dir(&projects_dir)? {
            let dir = entry?.path();
            let Some(id) = dir.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
                continue;
            };
            match load_project(&dir) {
                Ok(project) => {
                    projects.insert(id, Arc::new(ProjectSlot::new(project, dir)));
                }
                Err(e) => tracing::warn!(project = %id, error = %e, "skipping project"),
            }
        }
        tracing::info!(projects = projects.len(), root = %config.root.display(), "service state loaded");
        Ok(AppState(Arc::new(Inner {
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            config,
            pipeline: Arc::new(pipeline),
            llm,
            projects: RwLock::new(projects),
            jobs,
        })))
    }

    pub fn jobs(&self) -> &JobStore {
        &self.0.jobs
    }

    fn slot(&self, id: &str) -> Result<Arc<ProjectSlot>, ApiError> {
        self.0
            .projects
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("project", id))
    }

    fn llm(&self) -> Result<Arc<dyn LlmClient>, ApiError> {
        self.0.llm.clone().ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "llm_unavailable",
                "no LLM client is configured",
            )
        })
    }
}

impl ProjectSlot {
    fn new(project: Project, dir: PathBuf) -> Self {
        ProjectSlot {
            project: RwLock::new(project),
            writer: Arc::new(AsyncMutex::new(())),
            dir,
        }
    }

    fn snapshot(&self) -> Project {
        self.project.read().unwrap().clone()
    }

    fn lock_writer(&self, id: &str) -> Result<OwnedMutexGuard<()>, ApiError> {
        self.writer.clone().try_lock_owned().map_err(|_| ApiError::busy(id))
    }

    /// Persists, then swaps in the successor; a failed save leaves the
    /// in-memory project untouched.
    fn commit(&self, project: Project) -> Result<(), ApiError> {
        save_project(&project, &self.dir)?;
        *self.project.write().unwrap() = project;
        Ok(())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/plan/refine", post(refine))
        .route("/projects/{id}/visualize", post(visualize))
        .route("/projects/{id}/edits", post(edit))
        .route("/projects/{id}/frames", get(list_frames))
        .route("/projects/{id}/import", post(import))
        .route("/projects/{id}/undo", post(undo))
        .route("/projects/{id}/redo", post(redo))
        .route("/projects/{id}/replay", post(replay))
        .route("/projects/{id}/masks", post(preview_masks))
        .route("/projects/{id}/masks/upload", post(upload_mask))
        .route("/projects/{id}/references", post(upload_reference))
        .route("/jobs/{id}", get(get_job))
        .route("/frames/{hash}", get(get_frame))
        .route("/masks/{hash}", get(get_mask))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let body: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "schema_error", e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

#[derive(Debug, Serialize)]
struct FrameView {
    page: usize,
    hash: String,
    url: String,
    #[serde(flatten)]
    provenance: Value,
}

#[derive(Debug, Serialize)]
struct TurnView {
    index: usize,
    active: bool,
    request: EditRequest,
    seed: u64,
    strength: f64,
    changed_pages: Vec<usize>,
    warnings: Vec<String>,
    timestamp: chrono::DateTime<chrono::Utc>,
}

#[derive(Debug, Serialize)]
struct ProjectView {
    id: String,
    seed: u64,
    config: ProjectConfig,
    plan: Option<Value>,
    conversation: Option<Conversation>,
    frames: Vec<FrameView>,
    turns: Vec<TurnView>,
    head: usize,
    can_undo: bool,
    can_redo: bool,
}

fn frame_views(frames: &[FrameRef]) -> Vec<FrameView> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| FrameView {
            page: i + 1,
            hash: f.hash.clone(),
            url: format!("/frames/{}", f.hash),
            provenance: json!({ "provenance": f.provenance }),
        })
        .collect()
}

fn project_view(id: &str, p: &Project) -> ProjectView {
    ProjectView {
        id: id.to_string(),
        seed: p.seed,
        config: p.config.clone(),
        plan: p.plan.as_ref().map(plan_to_value),
        conversation: p.conversation.clone(),
        frames: frame_views(&p.frames().frames),
        turns: p
            .turns
            .iter()
            .map(|t| TurnView {
                index: t.index,
                active: t.index <= p.head,
                request: t.request.clone(),
                seed: t.seed,
                strength: t.strength,
                changed_pages: t.changed_pages.clone(),
                warnings: t.warnings.clone(),
                timestamp: t.timestamp,
            })
            .collect(),
        head: p.head,
        can_undo: p.head > 0,
        can_redo: p.head < p.turns.len(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdeaBody {
    text: String,
    pages: usize,
    story_style: String,
    visual_style: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    plan: Option<Value>,
    idea: Option<IdeaBody>,
    config: Option<ProjectConfig>,
    seed: Option<u64>,
}

async fn create_project(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let body: CreateBody = parse_json(&body)?;
    let config = body.config.unwrap_or_else(|| state.0.config.project_defaults.clone());
    config.validate()?;
    let mut project = Project::new(None, config, body.seed.unwrap_or(0));
    match (body.plan, body.idea) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give either a plan or an idea, not both")),
        (Some(plan), None) => project.plan = Some(plan_from_value(plan)?),
        (None, Some(idea)) => {
            let idea = StoryIdea::new(idea.text, idea.pages, idea.story_style, idea.visual_style)?;
            let llm = state.llm()?;
            let planner = state.0.config.planner.clone();
            let outcome = blocking(move || Ok(generate_plan(llm.as_ref(), &idea, &planner)?)).await?;
            project.plan = Some(outcome.plan);
            project.conversation = Some(outcome.conversation);
        }
        (None, None) => {}
    }

    let id = uuid::Uuid::new_v4().to_string();
    let slot = Arc::new(ProjectSlot::new(project.clone(), state.0.config.root.join("projects").join(&id)));
    save_project(&project, &slot.dir)?;
    state.0.projects.write().unwrap().insert(id.clone(), slot);
    tracing::info!(project = %id, "created project");
    Ok((StatusCode::CREATED, Json(project_view(&id, &project))).into_response())
}

async fn get_project(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ProjectView>, ApiError> {
    let slot = state.slot(&id)?;
    let view = project_view(&id, &slot.project.read().unwrap());
    Ok(Json(view))
}

#[derive(Debug, Deserialize)]
struct RefineBody {
    feedback: String,
}

async fn refine(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let body: RefineBody = parse_json(&body)?;
    let slot = state.slot(&id)?;
    let _guard = slot.lock_writer(&id)?;
    let mut project = slot.snapshot();
    let conversation = project
        .conversation
        .clone()
        .ok_or_else(|| ApiError::bad_request("this project's plan was not produced by the planner"))?;
    let llm = state.llm()?;
    let planner = state.0.config.planner.clone();
    let outcome = blocking(move || Ok(refine_plan(llm.as_ref(), &conversation, &body.feedback, &planner)?)).await?;
    project.plan = Some(outcome.plan.clone());
    project.conversation = Some(outcome.conversation);
    let slot2 = slot.clone();
    blocking(move || slot2.commit(project)).await?;
    Ok(Json(json!({ "plan": plan_to_value(&outcome.plan), "retries": outcome.retries })))
}

type JobWork = Box<dyn FnOnce(&mut dyn FnMut(usize, usize)) -> Result<(Project, Value), ApiError> + Send>;

/// Queues `work` as a job holding the project's writer lock until it ends.
async fn start_job(
    state: &AppState,
    id: &str,
    slot: Arc<ProjectSlot>,
    guard: OwnedMutexGuard<()>,
    kind: JobKind,
    work: JobWork,
) -> Response {
    let job = state.0.jobs.create(id, kind);
    let jobs = state.0.jobs.clone();
    let workers = state.0.workers.clone();
    let job_id = job.id.clone();
    let task = async move {
        let _permit = workers.acquire_owned().await.expect("semaphore is never closed");
        jobs.transition(&job_id, JobState::Running, None, None);
        let (jobs2, id2) = (jobs.clone(), job_id.clone());
        let outcome = blocking(move || {
            let mut report = |done: usize, total: usize| jobs2.progress(&id2, done, total);
            let (project, result) = work(&mut report)?;
            slot.commit(project)?;
            Ok(result)
        })
        .await;
        match outcome {
            Ok(result) => jobs.transition(&job_id, JobState::Done, Some(result), None),
            Err(e) => {
                tracing::warn!(job = %job_id, error = %e.body.message, "job failed");
                jobs.transition(&job_id, JobState::Failed, None, Some(e.body));
            }
        }
        drop(guard);
    };
    if state.0.config.sync_jobs {
        task.await;
    } else {
        tokio::spawn(task);
    }
    let status = state.0.jobs.get(&job.id).unwrap_or(job);
    (StatusCode::ACCEPTED, Json(status)).into_response()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisualizeBody {
    seed: Option<u64>,
    #[serde(default)]
    consistency_pass: bool,
}

async fn visualize(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let body: VisualizeBody = parse_json(&body)?;
    let slot = state.slot(&id)?;
    let guard = slot.lock_writer(&id)?;
    let current = slot.snapshot();
    let plan = current
        .plan
        .clone()
        .ok_or_else(|| ApiError::bad_request("project has no story plan"))?;
    let seed = body.seed.unwrap_or(current.seed);
    let pipeline = state.0.pipeline.clone();
    let work: JobWork = Box::new(move |progress| {
        let mut project = pipeline.visualize(&plan, current.config.clone(), seed)?;
        project.conversation = current.conversation.clone();
        project.masks = current.masks.clone();
        let mut warnings = Vec::new();
        if body.consistency_pass {
            let total = plan.characters.len() * project.config.steps;
            let steps = project.config.steps;
            for (i, character) in plan.characters.iter().enumerate() {
                let request = EditRequest::consistency(character.category.clone(), character.description.clone());
                let out = pipeline.apply(&project, &request, seed.wrapping_add(i as u64), &mut |done, _| {
                    progress(i * steps + done, total)
                })?;
                warnings.extend(out.warnings);
                project = out.project;
            }
        }
        let result = json!({ "frames": project.frames().hashes(), "warnings": warnings });
        Ok((project, result))
    });
    Ok(start_job(&state, &id, slot, guard, JobKind::Visualize, work).await)
}

#[derive(Debug, Default, Deserialize)]
struct SeedQuery {
    seed: Option<u64>,
}

async fn edit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<SeedQuery>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let request: EditRequest = parse_json(&body)?;
    let slot = state.slot(&id)?;
    let guard = slot.lock_writer(&id)?;
    let project = slot.snapshot();
    if project.frames().is_empty() {
        return Err(plotnpolish_core::pipeline::PipelineError::NoFrames.into());
    }
    request.validate(project.frames().len())?;
    let seed = query
        .seed
        .unwrap_or_else(|| project.seed.wrapping_add(project.head as u64 + 1));
    let pipeline = state.0.pipeline.clone();
    let work: JobWork = Box::new(move |progress| {
        let out = pipeline.apply(&project, &request, seed, progress)?;
        let result = json!({
            "frames": out.project.frames().hashes(),
            "changed_pages": out.changed_pages,
            "warnings": out.warnings,
            "mask_reads": out.mask_reads,
            "turn": out.project.head,
        });
        Ok((out.project, result))
    });
    Ok(start_job(&state, &id, slot, guard, JobKind::Edit, work).await)
}

async fn list_frames(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let slot = state.slot(&id)?;
    let project = slot.project.read().unwrap();
    let captions: Vec<Option<String>> = match &project.plan {
        Some(plan) => plan.pages.iter().map(|p| Some(p.plot_text.clone())).collect(),
        None => Vec::new(),
    };
    let frames: Vec<Value> = frame_views(&project.frames().frames)
        .into_iter()
        .map(|f| {
            let mut v = serde_json::to_value(&f).expect("frame view serializes");
            v["caption"] = json!(captions.get(f.page - 1).cloned().flatten());
            v
        })
        .collect();
    Ok(Json(json!({ "frames": frames, "head": project.head })))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_frame(State(state): State<AppState>, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let slots: Vec<_> = state.0.projects.read().unwrap().values().cloned().collect();
    for slot in slots {
        let image = slot.project.read().unwrap().store.get(&hash).cloned();
        if let Some(image) = image {
            return Ok(png_response(imaging::encode_png(&image)));
        }
    }
    Err(ApiError::not_found("frame", &hash))
}

async fn get_mask(State(state): State<AppState>, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let slots: Vec<_> = state.0.projects.read().unwrap().values().cloned().collect();
    for slot in slots {
        let mask = slot.project.read().unwrap().masks.get(&hash).cloned();
        if let Some(mask) = mask {
            return Ok(png_response(imaging::encode_mask_png(&mask)));
        }
    }
    Err(ApiError::not_found("mask", &hash))
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>, ApiError> {
    state.0.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

async fn import(
    State(state): State<AppState>,
    Path(id): Path<String>,
    mut multipart: Multipart,
) -> Result<Json<ProjectView>, ApiError> {
    let slot = state.slot(&id)?;
    let _guard = slot.lock_writer(&id)?;
    let mut images = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let label = field
            .file_name()
            .or(field.name())
            .unwrap_or("upload")
            .to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        images.push((label, bytes.to_vec()));
    }
    let current = slot.snapshot();
    let pipeline = state.0.pipeline.clone();
    let slot2 = slot.clone();
    let project = blocking(move || {
        let mut project = pipeline.import_frames(&images, current.plan.clone(), current.config.clone(), current.seed)?;
        project.conversation = current.conversation;
        project.masks = current.masks;
        slot2.commit(project.clone())?;
        Ok(project)
    })
    .await?;
    Ok(Json(project_view(&id, &project)))
}

async fn history_move(state: AppState, id: String, forward: bool) -> Result<Json<ProjectView>, ApiError> {
    let slot = state.slot(&id)?;
    let _guard = slot.lock_writer(&id)?;
    let current = slot.snapshot();
    let next = if forward { current.redo()? } else { current.undo()? };
    let slot2 = slot.clone();
    let view = project_view(&id, &next);
    blocking(move || slot2.commit(next)).await?;
    Ok(Json(view))
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ProjectView>, ApiError> {
    history_move(state, id, false).await
}

async fn redo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ProjectView>, ApiError> {
    history_move(state, id, true).await
}

async fn replay(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let slot = state.slot(&id)?;
    let _guard = slot.lock_writer(&id)?;
    let project = slot.snapshot();
    let pipeline = state.0.pipeline.clone();
    let frames = blocking(move || Ok(pipeline.replay(&project)?)).await?;
    Ok(Json(json!({ "frames": frames.hashes(), "consistent": true })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskPreviewBody {
    concept: String,
    #[serde(default)]
    mask_source: MaskSource,
    pages: Option<Vec<usize>>,
}

async fn preview_masks(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let body: MaskPreviewBody = parse_json(&body)?;
    let slot = state.slot(&id)?;
    let _guard = slot.lock_writer(&id)?;
    let mut project = slot.snapshot();
    let pipeline = state.0.pipeline.clone();
    let slot2 = slot.clone();
    let pages = blocking(move || {
        let previews = pipeline.preview_masks(&project, &body.concept, body.mask_source, body.pages.as_deref())?;
        let mut pages = Vec::new();
        for (page, selection) in previews {
            let mut candidates = Vec::new();
            for c in selection.candidates {
                let hash = project.add_mask(c.mask);
                candidates.push(json!({
                    "instance_id": c.instance_id,
                    "confidence": c.confidence,
                    "mask_hash": hash,
                    "url": format!("/masks/{hash}"),
                }));
            }
            pages.push(json!({
                "page": page,
                "selected_instance": (!selection.selected.is_empty()).then_some(selection.selected.instance_id),
                "candidates": candidates,
                "warning": selection.warning,
            }));
        }
        slot2.commit(project)?;
        Ok(pages)
    })
    .await?;
    Ok(Json(json!({ "pages": pages })))
}

async fn upload_mask(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let slot = state.slot(&id)?;
    let _guard = slot.lock_writer(&id)?;
    let mask = imaging::decode_mask_png(&body, "mask upload")
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unreadable_image", e.to_string()))?;
    let mut project = slot.snapshot();
    if let Some(frame) = project.current_images()?.first() {
        let (w, h) = frame.dimensions();
        if mask.dim() != (h as usize, w as usize) {
            return Err(ApiError::bad_request(format!(
                "mask is {}x{}, frames are {w}x{h}",
                mask.ncols(),
                mask.nrows()
            )));
        }
    }
    let hash = project.add_mask(mask);
    let slot2 = slot.clone();
    blocking(move || slot2.commit(project)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "hash": hash, "url": format!("/masks/{hash}") }))).into_response())
}

async fn upload_reference(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let slot = state.slot(&id)?;
    let _guard = slot.lock_writer(&id)?;
    let image = imaging::decode_image(&body, "reference upload")
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "unreadable_image", e.to_string()))?;
    let mut project = slot.snapshot();
    let hash = project.add_reference_image(image);
    let slot2 = slot.clone();
    blocking(move || slot2.commit(project)).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "hash": hash, "reference": { "kind": "image", "hash": hash } })),
    )
        .into_response())
}
