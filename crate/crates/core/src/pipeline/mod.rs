//! Story visualization and multi-frame editing.
//!
//! A [`Project`] is an immutable value: every operation on a [`Pipeline`]
//! returns a successor project and leaves its input untouched. Frames are
//! stored once by content hash and shared between successors.

mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendDescriptor, BackendError, DdimSampler, DiffusionBackend, ImagePromptHandle, MockBackend,
    NoiseSchedule, PersonalizationSource, DEFAULT_MIN_ALPHA, DEFAULT_STEPS,
};
use crate::grid::{
    self, DenoiseOptions, EditConditioning, GridError, GridLayout, GridState, MaskDownsample, MaskGrid,
    NoiseMode,
};
use crate::imaging::{self, ImageIoError};
use crate::perception::{
    self, MaskSelection, Perception, PerceptionError, DEFAULT_ATTENTION_THRESHOLD, DEFAULT_DILATION_RADIUS,
};
use crate::planner::Conversation;
use crate::schema::{compose_prompt, SchemaError, StoryPlan};

pub use store::{load_project, save_project, PROJECT_FILE_VERSION};

/// Set to `1` to dump every intermediate grid as PNG.
pub const DEBUG_GRIDS_ENV: &str = "PLOTNPOLISH_DEBUG_GRIDS";
pub const EDIT_REQUEST_VERSION: &str = "1";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("project has no frames; visualize or import first")]
    NoFrames,
    #[error("no images supplied")]
    EmptyInput,
    #[error("nothing to {0}")]
    NothingTo(&'static str),
    #[error("replay diverged at turn {turn}, page {page}: expected {expected}, got {actual}")]
    ReplayDivergence {
        turn: usize,
        page: usize,
        expected: String,
        actual: String,
    },
    #[error("unknown {kind} {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("corrupt project: {0}")]
    Corrupt(String),
}

impl PipelineError {
    fn invalid(msg: impl Into<String>) -> Self {
        PipelineError::InvalidRequest(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub layout: GridLayout,
    pub local_strength: f64,
    pub global_strength: f64,
    pub steps: usize,
    pub min_alpha: f64,
    /// DDIM eta; 0 is deterministic.
    pub eta: f64,
    pub noise_mode: NoiseMode,
    pub mask_downsample: MaskDownsample,
    pub dilation_radius: usize,
    pub attention_threshold: f64,
    /// Imported frames are center-cropped and resized to this.
    pub working_resolution: (u32, u32),
    pub backend: BackendDescriptor,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            layout: GridLayout::default(),
            local_strength: 0.4,
            global_strength: 1.0,
            steps: DEFAULT_STEPS,
            min_alpha: DEFAULT_MIN_ALPHA,
            eta: 0.0,
            noise_mode: NoiseMode::PerStep,
            mask_downsample: MaskDownsample::OrPool,
            dilation_radius: DEFAULT_DILATION_RADIUS,
            attention_threshold: DEFAULT_ATTENTION_THRESHOLD,
            working_resolution: (512, 512),
            backend: BackendDescriptor::mock(),
        }
    }
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(PipelineError::invalid(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit("local_strength", self.local_strength)?;
        unit("global_strength", self.global_strength)?;
        unit("attention_threshold", self.attention_threshold)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(PipelineError::invalid(format!("eta {} must be >= 0", self.eta)));
        }
        if self.working_resolution.0 == 0 || self.working_resolution.1 == 0 {
            return Err(PipelineError::invalid("working_resolution must be non-zero"));
        }
        if let MaskDownsample::MeanThreshold { threshold } = self.mask_downsample {
            unit("mask_downsample.threshold", threshold)?;
        }
        self.backend.validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        Ok(NoiseSchedule::linear(self.steps, self.min_alpha)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Template { prompt: String, seed: u64 },
    /// Produced by the given 1-based edit turn.
    Edited { turn: usize },
    Imported { source: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub hash: String,
    pub provenance: Provenance,
}

/// Ordered frames, one per page.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameSet {
    pub frames: Vec<FrameRef>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn hashes(&self) -> Vec<String> {
        self.frames.iter().map(|f| f.hash.clone()).collect()
    }
}

/// Content-addressed images shared between project versions.
#[derive(Debug, Clone, Default)]
pub struct FrameStore {
    images: BTreeMap<String, Arc<RgbImage>>,
}

impl FrameStore {
    pub fn insert(&mut self, image: Arc<RgbImage>) -> String {
        let hash = imaging::image_hash(&image);
        self.images.entry(hash.clone()).or_insert(image);
        hash
    }

    /// Inserts under a caller-supplied key without rehashing. Used when
    /// loading from disk so that corrupted files surface during replay.
    pub(crate) fn insert_unchecked(&mut self, hash: String, image: Arc<RgbImage>) {
        self.images.insert(hash, image);
    }

    pub fn get(&self, hash: &str) -> Option<&Arc<RgbImage>> {
        self.images.get(hash)
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.images.contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<RgbImage>)> {
        self.images.iter()
    }
}

/// Binary masks by content hash: user-supplied masks and mask previews.
#[derive(Debug, Clone, Default)]
pub struct MaskStore {
    masks: BTreeMap<String, Arc<Array2<bool>>>,
}

impl MaskStore {
    pub fn insert(&mut self, mask: Array2<bool>) -> String {
        let hash = imaging::mask_hash(&mask);
        self.masks.entry(hash.clone()).or_insert_with(|| Arc::new(mask));
        hash
    }

    pub fn get(&self, hash: &str) -> Option<&Arc<Array2<bool>>> {
        self.masks.get(hash)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Array2<bool>>)> {
        self.masks.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    /// Masked edit of one concept; pixels outside the mask are preserved.
    Local,
    /// Whole-frame style change; no masks, no blending.
    GlobalStyle,
    /// Local edit conditioned on a reference image or weights.
    Personalized,
    /// Local edit that re-renders one character from its plan description.
    ConsistencyPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Segmentation,
    Attention,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// A reference image held in the project's frame store.
    Image { hash: String },
    Weights { path: PathBuf, sha256: String },
}

fn default_request_version() -> String {
    EDIT_REQUEST_VERSION.to_string()
}

/// A single edit, as sent over the wire and recorded in the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    #[serde(default = "default_request_version")]
    pub schema_version: String,
    pub kind: EditKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    pub edit_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength_override: Option<f64>,
    #[serde(default)]
    pub mask_source: MaskSource,
    /// 1-based pages to edit; all pages when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<usize>>,
    /// Page → instance id, overriding the automatic choice.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub instance_overrides: BTreeMap<usize, usize>,
    /// Page → mask hash, for [`MaskSource::UserSupplied`].
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub user_masks: BTreeMap<usize, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
}

impl EditRequest {
    fn base(kind: EditKind, concept: Option<String>, edit_prompt: String) -> Self {
        EditRequest {
            schema_version: default_request_version(),
            kind,
            concept,
            edit_prompt,
            strength_override: None,
            mask_source: MaskSource::default(),
            frames: None,
            instance_overrides: BTreeMap::new(),
            user_masks: BTreeMap::new(),
            reference: None,
        }
    }

    pub fn local(concept: impl Into<String>, edit_prompt: impl Into<String>) -> Self {
        Self::base(EditKind::Local, Some(concept.into()), edit_prompt.into())
    }

    pub fn style(edit_prompt: impl Into<String>) -> Self {
        Self::base(EditKind::GlobalStyle, None, edit_prompt.into())
    }

    pub fn personalized(concept: impl Into<String>, edit_prompt: impl Into<String>) -> Self {
        Self::base(EditKind::Personalized, Some(concept.into()), edit_prompt.into())
    }

    pub fn consistency(category: impl Into<String>, description: impl Into<String>) -> Self {
        Self::base(EditKind::ConsistencyPass, Some(category.into()), description.into())
    }

    pub fn with_frames(mut self, pages: Vec<usize>) -> Self {
        self.frames = Some(pages);
        self
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength_override = Some(strength);
        self
    }

    pub fn with_mask_source(mut self, source: MaskSource) -> Self {
        self.mask_source = source;
        self
    }

    pub fn uses_blending(&self) -> bool {
        self.kind != EditKind::GlobalStyle
    }

    pub fn strength(&self, config: &ProjectConfig) -> f64 {
        self.strength_override.unwrap_or(match self.kind {
            EditKind::GlobalStyle => config.global_strength,
            _ => config.local_strength,
        })
    }

    pub fn validate(&self, page_count: usize) -> Result<(), PipelineError> {
        if self.schema_version != EDIT_REQUEST_VERSION {
            return Err(PipelineError::invalid(format!(
                "unsupported edit request version {:?}",
                self.schema_version
            )));
        }
        if self.edit_prompt.trim().is_empty() {
            return Err(PipelineError::invalid("edit_prompt is empty"));
        }
        let has_concept = self.concept.as_deref().is_some_and(|c| !c.trim().is_empty());
        match self.kind {
            EditKind::GlobalStyle if self.concept.is_some() => {
                return Err(PipelineError::invalid("global_style edits take no concept"))
            }
            EditKind::GlobalStyle => {}
            _ if !has_concept => {
                return Err(PipelineError::invalid(format!(
                    "{:?} edit requires a concept",
                    self.kind
                )))
            }
            _ => {}
        }
        if let Some(s) = self.strength_override {
            if !(0.0..=1.0).contains(&s) {
                return Err(PipelineError::invalid(format!("strength {s} outside [0, 1]")));
            }
        }
        let check_page = |p: usize| {
            if (1..=page_count).contains(&p) {
                Ok(())
            } else {
                Err(PipelineError::invalid(format!(
                    "page {p} outside 1..={page_count}"
                )))
            }
        };
        if let Some(pages) = &self.frames {
            if pages.is_empty() {
                return Err(PipelineError::invalid("frames subset is empty"));
            }
            let mut seen = BTreeSet::new();
            for &p in pages {
                check_page(p)?;
                if !seen.insert(p) {
                    return Err(PipelineError::invalid(format!("page {p} listed twice")));
                }
            }
        }
        for &p in self.instance_overrides.keys().chain(self.user_masks.keys()) {
            check_page(p)?;
        }
        if self.mask_source == MaskSource::UserSupplied && self.user_masks.is_empty() {
            return Err(PipelineError::invalid("user_supplied masks requested but none given"));
        }
        if self.kind == EditKind::Personalized && self.reference.is_none() {
            return Err(PipelineError::invalid("personalized edit has no reference"));
        }
        Ok(())
    }

    /// 0-based selection flags for `page_count` frames.
    fn selected(&self, page_count: usize) -> Vec<bool> {
        match &self.frames {
            None => vec![true; page_count],
            Some(pages) => (1..=page_count).map(|p| pages.contains(&p)).collect(),
        }
    }
}

/// One applied edit, with everything needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTurn {
    /// 1-based position in the history.
    pub index: usize,
    pub request: EditRequest,
    pub seed: u64,
    pub strength: f64,
    pub before: Vec<String>,
    pub after: FrameSet,
    /// 1-based pages whose bytes changed.
    pub changed_pages: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub mask_reads: usize,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct Project {
    pub plan: Option<StoryPlan>,
    pub conversation: Option<Conversation>,
    pub config: ProjectConfig,
    pub seed: u64,
    /// Frames before any edit.
    pub baseline: FrameSet,
    pub turns: Vec<EditTurn>,
    /// Number of active turns; turns past it are the redo branch.
    pub head: usize,
    pub store: FrameStore,
    pub masks: MaskStore,
}

impl Project {
    pub fn new(plan: Option<StoryPlan>, config: ProjectConfig, seed: u64) -> Self {
        Project {
            plan,
            conversation: None,
            config,
            seed,
            baseline: FrameSet::default(),
            turns: Vec::new(),
            head: 0,
            store: FrameStore::default(),
            masks: MaskStore::default(),
        }
    }

    pub fn frames(&self) -> &FrameSet {
        match self.head {
            0 => &self.baseline,
            h => &self.turns[h - 1].after,
        }
    }

    pub fn active_turns(&self) -> &[EditTurn] {
        &self.turns[..self.head]
    }

    pub fn image(&self, hash: &str) -> Result<&Arc<RgbImage>, PipelineError> {
        self.store.get(hash).ok_or_else(|| PipelineError::NotFound {
            kind: "frame",
            id: hash.to_string(),
        })
    }

    pub fn current_images(&self) -> Result<Vec<Arc<RgbImage>>, PipelineError> {
        self.frames()
            .frames
            .iter()
            .map(|f| self.image(&f.hash).cloned())
            .collect()
    }

    pub fn add_mask(&mut self, mask: Array2<bool>) -> String {
        self.masks.insert(mask)
    }

    pub fn add_reference_image(&mut self, image: RgbImage) -> String {
        self.store.insert(Arc::new(image))
    }

    pub fn undo(&self) -> Result<Project, PipelineError> {
        if self.head == 0 {
            return Err(PipelineError::NothingTo("undo"));
        }
        Ok(Project {
            head: self.head - 1,
            ..self.clone()
        })
    }

    pub fn redo(&self) -> Result<Project, PipelineError> {
        if self.head == self.turns.len() {
            return Err(PipelineError::NothingTo("redo"));
        }
        Ok(Project {
            head: self.head + 1,
            ..self.clone()
        })
    }

    fn with_turn(&self, turn: EditTurn, images: &[Arc<RgbImage>]) -> Project {
        let mut next = self.clone();
        next.turns.truncate(self.head);
        for image in images {
            next.store.insert(image.clone());
        }
        next.turns.push(turn);
        next.head = next.turns.len();
        next
    }
}

/// Result of an edit operation.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub project: Project,
    pub warnings: Vec<String>,
    /// Mask lookups made by the denoiser; zero for style edits.
    pub mask_reads: usize,
    pub changed_pages: Vec<usize>,
}

struct TurnResult {
    images: Vec<Arc<RgbImage>>,
    warnings: Vec<String>,
    mask_reads: usize,
}

pub struct Pipeline {
    backend: Arc<dyn DiffusionBackend>,
    perception: Perception,
    debug_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("backend", self.backend.descriptor())
            .field("debug_dir", &self.debug_dir)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(backend: Arc<dyn DiffusionBackend>, perception: Perception) -> Self {
        Pipeline {
            backend,
            perception,
            debug_dir: None,
        }
    }

    /// Mock backend and oracle perception at the given resolution.
    pub fn mock(width: u32, height: u32) -> Self {
        Pipeline::new(
            Arc::new(MockBackend::with_resolution(width, height)),
            Perception::oracle(),
        )
    }

    pub fn with_debug_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.debug_dir = Some(dir.into());
        self
    }

    /// Enables grid dumps under `dir` when `PLOTNPOLISH_DEBUG_GRIDS=1`.
    pub fn with_debug_dir_from_env(self, dir: impl Into<PathBuf>) -> Self {
        match std::env::var(DEBUG_GRIDS_ENV).as_deref() {
            Ok("1") => self.with_debug_dir(dir),
            _ => self,
        }
    }

    pub fn backend(&self) -> &Arc<dyn DiffusionBackend> {
        &self.backend
    }

    pub fn perception(&self) -> &Perception {
        &self.perception
    }

    /// Renders one template frame per page, seeded by `seed + page`.
    pub fn visualize(&self, plan: &StoryPlan, config: ProjectConfig, seed: u64) -> Result<Project, PipelineError> {
        plan.validate()?;
        config.validate()?;
        let mut project = Project::new(Some(plan.clone()), config, seed);
        for page in &plan.pages {
            let prompt = compose_prompt(page);
            let frame_seed = seed.wrapping_add(page.page as u64);
            let image = self.backend.sample_template(&prompt, frame_seed)?;
            let hash = project.store.insert(Arc::new(image));
            project.baseline.frames.push(FrameRef {
                hash,
                provenance: Provenance::Template {
                    prompt,
                    seed: frame_seed,
                },
            });
        }
        tracing::info!(pages = plan.pages.len(), seed, "visualized plan");
        Ok(project)
    }

    /// Decodes, center-crops and resizes images into a new project.
    pub fn import_frames(
        &self,
        images: &[(String, Vec<u8>)],
        plan: Option<StoryPlan>,
        config: ProjectConfig,
        seed: u64,
    ) -> Result<Project, PipelineError> {
        if images.is_empty() {
            return Err(PipelineError::EmptyInput);
        }
        config.validate()?;
        if let Some(plan) = &plan {
            plan.validate()?;
            if plan.page_count() != images.len() {
                return Err(PipelineError::invalid(format!(
                    "plan has {} pages but {} images were supplied",
                    plan.page_count(),
                    images.len()
                )));
            }
        }
        let (w, h) = config.working_resolution;
        let s = self.backend.scale_factor() as u32;
        if w % s != 0 || h % s != 0 {
            return Err(PipelineError::invalid(format!(
                "working resolution {w}x{h} is not a multiple of {s}"
            )));
        }
        let mut project = Project::new(plan, config, seed);
        for (label, bytes) in images {
            let image = imaging::decode_image(bytes, label)?;
            let image = imaging::center_crop_resize(&image, w, h);
            let hash = project.store.insert(Arc::new(image));
            project.baseline.frames.push(FrameRef {
                hash,
                provenance: Provenance::Imported {
                    source: label.clone(),
                },
            });
        }
        Ok(project)
    }

    pub fn import_paths(
        &self,
        paths: &[PathBuf],
        plan: Option<StoryPlan>,
        config: ProjectConfig,
        seed: u64,
    ) -> Result<Project, PipelineError> {
        let images = paths
            .iter()
            .map(|p| {
                std::fs::read(p)
                    .map(|bytes| (p.display().to_string(), bytes))
                    .map_err(|e| {
                        PipelineError::Image(ImageIoError::Unreadable {
                            path: p.display().to_string(),
                            reason: e.to_string(),
                        })
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.import_frames(&images, plan, config, seed)
    }

    /// Local masked edit.
    pub fn edit(&self, project: &Project, request: &EditRequest, seed: u64) -> Result<EditOutcome, PipelineError> {
        if !matches!(request.kind, EditKind::Local | EditKind::ConsistencyPass) {
            return Err(PipelineError::invalid(format!(
                "edit expects a local request, got {:?}",
                request.kind
            )));
        }
        self.apply(project, request, seed, &mut |_, _| {})
    }

    /// Global style edit.
    pub fn style(&self, project: &Project, request: &EditRequest, seed: u64) -> Result<EditOutcome, PipelineError> {
        if request.kind != EditKind::GlobalStyle {
            return Err(PipelineError::invalid(format!(
                "style expects a global_style request, got {:?}",
                request.kind
            )));
        }
        self.apply(project, request, seed, &mut |_, _| {})
    }

    /// Registers the reference with the project and applies a personalized
    /// local edit conditioned on it.
    pub fn personalize(
        &self,
        project: &Project,
        request: &EditRequest,
        source: &PersonalizationSource,
        seed: u64,
    ) -> Result<EditOutcome, PipelineError> {
        let mut next = project.clone();
        let reference = match source {
            PersonalizationSource::ReferenceImage(image) => ReferenceSpec::Image {
                hash: next.add_reference_image(image.clone()),
            },
            PersonalizationSource::ReferenceImagePath(path) => {
                if !path.exists() {
                    return Err(BackendError::WeightsNotFound(path.clone()).into());
                }
                ReferenceSpec::Image {
                    hash: next.add_reference_image(imaging::load_rgb(path)?),
                }
            }
            PersonalizationSource::Weights(path) => {
                let bytes = std::fs::read(path).map_err(|_| BackendError::WeightsNotFound(path.clone()))?;
                ReferenceSpec::Weights {
                    path: path.clone(),
                    sha256: imaging::hash_bytes(&bytes),
                }
            }
        };
        let request = EditRequest {
            kind: EditKind::Personalized,
            reference: Some(reference),
            ..request.clone()
        };
        self.apply(&next, &request, seed, &mut |_, _| {})
    }

    /// One consistency pass per character, in declaration order. Each pass
    /// is its own turn, seeded `seed + i`.
    pub fn consistency_pass(&self, project: &Project, seed: u64) -> Result<EditOutcome, PipelineError> {
        let plan = project
            .plan
            .as_ref()
            .ok_or_else(|| PipelineError::invalid("consistency pass needs a story plan"))?;
        let mut outcome = EditOutcome {
            project: project.clone(),
            warnings: Vec::new(),
            mask_reads: 0,
            changed_pages: Vec::new(),
        };
        let mut changed = BTreeSet::new();
        for (i, character) in plan.characters.iter().enumerate() {
            let request = EditRequest::consistency(character.category.clone(), character.description.clone());
            let step = self.apply(&outcome.project, &request, seed.wrapping_add(i as u64), &mut |_, _| {})?;
            changed.extend(step.changed_pages.iter().copied());
            outcome.warnings.extend(step.warnings.iter().map(|w| format!("{}: {w}", character.name)));
            outcome.mask_reads += step.mask_reads;
            outcome.project = step.project;
        }
        outcome.changed_pages = changed.into_iter().collect();
        Ok(outcome)
    }

    /// Applies any request as a new turn. `progress` receives
    /// `(completed, total)` denoising steps.
    pub fn apply(
        &self,
        project: &Project,
        request: &EditRequest,
        seed: u64,
        progress: &mut dyn FnMut(usize, usize),
    ) -> Result<EditOutcome, PipelineError> {
        let before = project.frames().clone();
        if before.is_empty() {
            return Err(PipelineError::NoFrames);
        }
        request.validate(before.len())?;
        let images = project.current_images()?;
        let image_prompt = self.resolve_reference(project, request, None)?;
        let index = project.head + 1;
        let result = self.run_turn(project, &images, request, seed, image_prompt, index, progress)?;

        let mut changed_pages = Vec::new();
        let mut after = FrameSet::default();
        for (i, (old, new)) in before.frames.iter().zip(&result.images).enumerate() {
            let hash = imaging::image_hash(new);
            if hash == old.hash {
                after.frames.push(old.clone());
            } else {
                changed_pages.push(i + 1);
                after.frames.push(FrameRef {
                    hash,
                    provenance: Provenance::Edited { turn: index },
                });
            }
        }
        for w in &result.warnings {
            tracing::warn!(turn = index, "{w}");
        }
        let turn = EditTurn {
            index,
            request: request.clone(),
            seed,
            strength: request.strength(&project.config),
            before: before.hashes(),
            after,
            changed_pages: changed_pages.clone(),
            warnings: result.warnings.clone(),
            mask_reads: result.mask_reads,
            timestamp: Utc::now(),
        };
        Ok(EditOutcome {
            project: project.with_turn(turn, &result.images),
            warnings: result.warnings,
            mask_reads: result.mask_reads,
            changed_pages,
        })
    }

    /// Mask candidates per selected page, without editing.
    pub fn preview_masks(
        &self,
        project: &Project,
        concept: &str,
        source: MaskSource,
        pages: Option<&[usize]>,
    ) -> Result<Vec<(usize, MaskSelection)>, PipelineError> {
        let images = project.current_images()?;
        if images.is_empty() {
            return Err(PipelineError::NoFrames);
        }
        let pages: Vec<usize> = match pages {
            Some(p) => p.to_vec(),
            None => (1..=images.len()).collect(),
        };
        if let Some(&bad) = pages.iter().find(|&&p| p == 0 || p > images.len()) {
            return Err(PipelineError::invalid(format!("page {bad} outside 1..={}", images.len())));
        }
        let chosen: Vec<RgbImage> = pages.iter().map(|&p| (*images[p - 1]).clone()).collect();
        let selections = match source {
            MaskSource::Segmentation => self.perception.extract_masks(&chosen, concept)?,
            MaskSource::Attention => perception::attention_masks(
                &chosen,
                concept,
                self.backend.as_ref(),
                project.config.attention_threshold,
            )?
            .into_iter()
            .map(|m| MaskSelection {
                frame_index: m.frame_index,
                warning: m.is_empty().then(|| format!("no attention response for {concept:?}")),
                candidates: vec![m.clone()],
                selected: m,
            })
            .collect(),
            MaskSource::UserSupplied => {
                return Err(PipelineError::invalid("user-supplied masks have no preview"))
            }
        };
        Ok(pages.into_iter().zip(selections).collect())
    }

    /// Re-executes the active history from the baseline and checks every
    /// frame hash along the way.
    pub fn replay(&self, project: &Project) -> Result<FrameSet, PipelineError> {
        let fetch = |turn: usize, page: usize, hash: &str| -> Result<Arc<RgbImage>, PipelineError> {
            let image = project.store.get(hash).ok_or_else(|| PipelineError::ReplayDivergence {
                turn,
                page,
                expected: hash.to_string(),
                actual: "<missing>".into(),
            })?;
            let actual = imaging::image_hash(image);
            if actual != hash {
                return Err(PipelineError::ReplayDivergence {
                    turn,
                    page,
                    expected: hash.to_string(),
                    actual,
                });
            }
            Ok(image.clone())
        };
        let mut current = project.baseline.clone();
        let mut images = current
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| fetch(0, i + 1, &f.hash))
            .collect::<Result<Vec<_>, _>>()?;

        for turn in project.active_turns() {
            let hashes = current.hashes();
            if let Some(i) = (0..hashes.len().max(turn.before.len()))
                .find(|&i| hashes.get(i) != turn.before.get(i))
            {
                return Err(PipelineError::ReplayDivergence {
                    turn: turn.index,
                    page: i + 1,
                    expected: turn.before.get(i).cloned().unwrap_or_default(),
                    actual: hashes.get(i).cloned().unwrap_or_default(),
                });
            }
            let image_prompt = self.resolve_reference(project, &turn.request, Some(turn.index))?;
            let result = self.run_turn(
                project,
                &images,
                &turn.request,
                turn.seed,
                image_prompt,
                turn.index,
                &mut |_, _| {},
            )?;
            for (i, (image, expected)) in result.images.iter().zip(&turn.after.frames).enumerate() {
                let actual = imaging::image_hash(image);
                if actual != expected.hash {
                    return Err(PipelineError::ReplayDivergence {
                        turn: turn.index,
                        page: i + 1,
                        expected: expected.hash.clone(),
                        actual,
                    });
                }
                // The stored copy must match what was recomputed.
                fetch(turn.index, i + 1, &expected.hash)?;
            }
            images = result.images;
            current = turn.after.clone();
        }
        Ok(current)
    }

    /// Turns the request's reference into an image-prompt handle. During
    /// replay (`replay_turn` set) a changed weights file is a divergence.
    fn resolve_reference(
        &self,
        project: &Project,
        request: &EditRequest,
        replay_turn: Option<usize>,
    ) -> Result<Option<ImagePromptHandle>, PipelineError> {
        let Some(reference) = &request.reference else {
            return Ok(None);
        };
        let descriptor = self.backend.descriptor();
        let handle = match reference {
            ReferenceSpec::Image { hash } => {
                if !descriptor.supports_image_prompt {
                    return Err(BackendError::UnsupportedByBackend("reference-image prompts".into()).into());
                }
                let image = project.image(hash)?;
                self.backend
                    .load_personalization(&PersonalizationSource::ReferenceImage((**image).clone()))?
            }
            ReferenceSpec::Weights { path, sha256 } => {
                if !descriptor.supports_personalization_weights {
                    return Err(BackendError::UnsupportedByBackend("personalization weights".into()).into());
                }
                let handle = self
                    .backend
                    .load_personalization(&PersonalizationSource::Weights(path.clone()))?;
                if &handle.source_hash != sha256 {
                    return Err(match replay_turn {
                        Some(turn) => PipelineError::ReplayDivergence {
                            turn,
                            page: 0,
                            expected: sha256.clone(),
                            actual: handle.source_hash,
                        },
                        None => PipelineError::invalid(format!(
                            "weights at {} do not match sha256 {sha256}",
                            path.display()
                        )),
                    });
                }
                handle
            }
        };
        Ok(Some(handle))
    }

    /// Per-frame pixel masks for the selected frames; unselected frames get
    /// an empty mask.
    fn pixel_masks(
        &self,
        project: &Project,
        images: &[Arc<RgbImage>],
        request: &EditRequest,
        selected: &[bool],
        warnings: &mut Vec<String>,
    ) -> Result<Vec<Array2<bool>>, PipelineError> {
        let concept = request.concept.as_deref().unwrap_or_default();
        let (h, w) = (images[0].height() as usize, images[0].width() as usize);
        let mut masks = vec![Array2::from_elem((h, w), false); images.len()];
        let pages: Vec<usize> = (0..images.len()).filter(|&i| selected[i]).collect();
        let chosen: Vec<RgbImage> = pages.iter().map(|&i| (*images[i]).clone()).collect();

        match request.mask_source {
            MaskSource::Segmentation => {
                let selections = self.perception.extract_masks(&chosen, concept)?;
                for (&i, selection) in pages.iter().zip(selections) {
                    let selection = match request.instance_overrides.get(&(i + 1)) {
                        Some(&id) => selection.with_instance(id).map_err(|e| match e {
                            PerceptionError::UnknownInstance { instance_id, .. } => PerceptionError::UnknownInstance {
                                frame_index: i,
                                instance_id,
                            },
                            other => other,
                        })?,
                        None => selection,
                    };
                    if selection.selected.is_empty() {
                        warnings.push(format!("page {}: no {concept:?} found", i + 1));
                    }
                    masks[i] = selection.selected.mask;
                }
            }
            MaskSource::Attention => {
                let found = perception::attention_masks(
                    &chosen,
                    concept,
                    self.backend.as_ref(),
                    project.config.attention_threshold,
                )?;
                for (&i, m) in pages.iter().zip(found) {
                    if m.is_empty() {
                        warnings.push(format!("page {}: no attention response for {concept:?}", i + 1));
                    }
                    masks[i] = m.mask;
                }
            }
            MaskSource::UserSupplied => {
                for &i in &pages {
                    let Some(hash) = request.user_masks.get(&(i + 1)) else {
                        warnings.push(format!("page {}: no mask supplied", i + 1));
                        continue;
                    };
                    let mask = project.masks.get(hash).ok_or_else(|| PipelineError::NotFound {
                        kind: "mask",
                        id: hash.clone(),
                    })?;
                    if mask.dim() != (h, w) {
                        return Err(PipelineError::invalid(format!(
                            "mask {hash} is {:?}, frames are {h}x{w}",
                            mask.dim()
                        )));
                    }
                    masks[i] = (**mask).clone();
                }
            }
        }
        Ok(masks)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_turn(
        &self,
        project: &Project,
        images: &[Arc<RgbImage>],
        request: &EditRequest,
        seed: u64,
        image_prompt: Option<ImagePromptHandle>,
        turn_index: usize,
        progress: &mut dyn FnMut(usize, usize),
    ) -> Result<TurnResult, PipelineError> {
        let config = &project.config;
        let n = images.len();
        let dims = images[0].dimensions();
        let scale = self.backend.scale_factor() as u32;
        if images.iter().any(|im| im.dimensions() != dims) || !dims.0.is_multiple_of(scale) || !dims.1.is_multiple_of(scale) {
            return Err(PipelineError::invalid(format!(
                "frames must share one size that is a multiple of {scale}"
            )));
        }
        let selected = request.selected(n);
        let blending = request.uses_blending();
        let schedule = config.schedule()?;
        let mut warnings = Vec::new();

        let mut latent_masks = Vec::new();
        if blending {
            for mask in self.pixel_masks(project, images, request, &selected, &mut warnings)? {
                let dilated = perception::dilate(&mask, config.dilation_radius);
                latent_masks.push(grid::resize_mask_to_latent(
                    &dilated,
                    scale as usize,
                    config.mask_downsample,
                )?);
            }
            if latent_masks.iter().all(|m| m.iter().all(|&v| v == 0.0)) {
                warnings.push("no mask in any selected frame; frames left unchanged".into());
                return Ok(TurnResult {
                    images: images.to_vec(),
                    warnings,
                    mask_reads: 0,
                });
            }
        }

        let plain: Vec<RgbImage> = images.iter().map(|im| (**im).clone()).collect();
        let depth = self
            .perception
            .extract_depth(&plain)?
            .into_iter()
            .map(|d| grid::pool_to_latent(&d.depth, scale as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let latents = plain
            .iter()
            .map(|im| self.backend.encode(im))
            .collect::<Result<Vec<_>, _>>()?;

        let opts = DenoiseOptions {
            layout: config.layout,
            blending,
            seed,
            noise_mode: config.noise_mode,
            sampler: DdimSampler { eta: config.eta },
            debug_dir: self
                .debug_dir
                .as_ref()
                .map(|d| d.join(format!("turn_{turn_index:03}"))),
        };
        let cond = EditConditioning {
            prompt: request.edit_prompt.clone(),
            strength: request.strength(config),
            image_prompt,
        };
        let has_mask: Vec<bool> = latent_masks.iter().map(|m| m.iter().any(|&v| v > 0.0)).collect();
        let state = GridState::new(latents, MaskGrid::new(latent_masks), depth, &schedule, &opts)?;
        let out = grid::denoise_grid(state, &cond, self.backend.as_ref(), &schedule, &opts, progress)?;

        let images = out
            .frames
            .into_iter()
            .enumerate()
            .map(|(i, edited)| {
                // Frames outside the subset, or with nothing to edit, keep
                // their exact bytes.
                if selected[i] && (!blending || has_mask[i]) {
                    Arc::new(edited)
                } else {
                    images[i].clone()
                }
            })
            .collect();
        Ok(TurnResult {
            images,
            warnings,
            mask_reads: out.mask_reads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{CharacterSpec, StoryPage};

    fn small_plan(pages: usize) -> StoryPlan {
        let pages = (1..=pages)
            .map(|p| StoryPage {
                page: p,
                plot_text: format!("page {p}"),
                context_prompt: format!("Tom on page {p}"),
                background_prompt: "a park".into(),
                style_prompt: String::new(),
                extra: Default::default(),
            })
            .collect();
        StoryPlan::new(
            None,
            vec![CharacterSpec::new("Tom", "a boy in a red cap", "boy")],
            pages,
        )
        .unwrap()
    }

    fn fast_config() -> ProjectConfig {
        ProjectConfig {
            steps: 6,
            working_resolution: (64, 64),
            ..ProjectConfig::default()
        }
    }

    #[test]
    fn request_validation() {
        assert!(EditRequest::local("boy", "blue cap").validate(3).is_ok());
        assert!(EditRequest::local(" ", "blue cap").validate(3).is_err());
        assert!(EditRequest::local("boy", "").validate(3).is_err());
        assert!(EditRequest::local("boy", "x").with_frames(vec![4]).validate(3).is_err());
        assert!(EditRequest::local("boy", "x").with_frames(vec![2, 2]).validate(3).is_err());
        assert!(EditRequest::local("boy", "x").with_strength(1.5).validate(3).is_err());
        assert!(EditRequest::style("oil").validate(3).is_ok());
        let mut style = EditRequest::style("oil");
        style.concept = Some("boy".into());
        assert!(style.validate(3).is_err());
        assert!(EditRequest::personalized("boy", "x").validate(3).is_err());
        assert!(EditRequest::local("boy", "x")
            .with_mask_source(MaskSource::UserSupplied)
            .validate(3)
            .is_err());
    }

    #[test]
    fn request_json_defaults() {
        let req: EditRequest =
            serde_json::from_str(r#"{"kind":"local","concept":"boy","edit_prompt":"blue cap","frames":[2]}"#).unwrap();
        assert_eq!(req.schema_version, "1");
        assert_eq!(req.mask_source, MaskSource::Segmentation);
        assert_eq!(req.frames, Some(vec![2]));
        let back: EditRequest = serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn default_strengths() {
        let cfg = ProjectConfig::default();
        assert_eq!(EditRequest::local("a", "b").strength(&cfg), 0.4);
        assert_eq!(EditRequest::style("b").strength(&cfg), 1.0);
        assert_eq!(EditRequest::style("b").with_strength(0.2).strength(&cfg), 0.2);
    }

    #[test]
    fn undo_redo_moves_head_only() {
        let pipe = Pipeline::mock(64, 64);
        let project = pipe.visualize(&small_plan(2), fast_config(), 1).unwrap();
        assert!(matches!(project.undo(), Err(PipelineError::NothingTo("undo"))));
        let edited = pipe.edit(&project, &EditRequest::local("boy", "blue cap"), 5).unwrap().project;
        let undone = edited.undo().unwrap();
        assert_eq!(undone.frames(), project.frames());
        assert_eq!(undone.redo().unwrap().frames(), edited.frames());
        // A new edit after undo drops the redo branch.
        let branched = pipe.style(&undone, &EditRequest::style("ink"), 2).unwrap().project;
        assert_eq!(branched.turns.len(), 1);
        assert!(branched.redo().is_err());
    }

    #[test]
    fn operations_do_not_touch_their_input() {
        let pipe = Pipeline::mock(64, 64);
        let project = pipe.visualize(&small_plan(2), fast_config(), 1).unwrap();
        let frames = project.frames().clone();
        let _ = pipe.edit(&project, &EditRequest::local("boy", "blue cap"), 5).unwrap();
        assert_eq!(project.frames(), &frames);
        assert!(project.turns.is_empty());
    }

    #[test]
    fn edits_need_frames() {
        let pipe = Pipeline::mock(64, 64);
        let empty = Project::new(None, fast_config(), 0);
        assert!(matches!(
            pipe.edit(&empty, &EditRequest::local("boy", "x"), 0),
            Err(PipelineError::NoFrames)
        ));
        assert!(matches!(
            pipe.import_frames(&[], None, fast_config(), 0),
            Err(PipelineError::EmptyInput)
        ));
    }

    #[test]
    fn missing_weights_fail_before_denoising() {
        let pipe = Pipeline::mock(64, 64);
        let project = pipe.visualize(&small_plan(1), fast_config(), 1).unwrap();
        let err = pipe
            .personalize(
                &project,
                &EditRequest::personalized("boy", "x"),
                &PersonalizationSource::Weights("/nonexistent/w.bin".into()),
                0,
            )
            .unwrap_err();
        assert!(matches!(err, PipelineError::Backend(BackendError::WeightsNotFound(_))));
    }
}
