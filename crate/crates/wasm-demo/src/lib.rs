//! In-browser demo of grid-prior editing on the mock backend.
//!
//! [`Session`] holds the logic and runs natively; [`Demo`] is its
//! wasm-bindgen face. Three operations are exposed: a character edit on
//! chosen pages, a whole-frame style edit, and a view of how frames are
//! regrouped into grids at a given denoising step.

use plotnpolish_core::grid::{regroup, GridLayout};
use plotnpolish_core::pipeline::{EditOutcome, EditRequest, Pipeline, Project, ProjectConfig};
use plotnpolish_core::schema::{parse_plan, ParseMode, StoryPlan};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DEMO_PLAN: &str = include_str!("../assets/demo_plan.json");

pub fn demo_plan() -> StoryPlan {
    parse_plan(DEMO_PLAN, ParseMode::Strict).expect("bundled plan is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditSummary {
    pub turn: usize,
    pub changed_pages: Vec<usize>,
    pub warnings: Vec<String>,
    pub mask_reads: usize,
}

pub struct Session {
    pipeline: Pipeline,
    project: Project,
}

impl Session {
    /// Renders the bundled nine-page story at `resolution` pixels square,
    /// editing through `rows` x `cols` grids.
    pub fn new(resolution: u32, steps: usize, seed: u64, rows: usize, cols: usize) -> Result<Session, String> {
        if resolution == 0 || !resolution.is_multiple_of(8) {
            return Err(format!("resolution {resolution} must be a positive multiple of 8"));
        }
        let config = ProjectConfig {
            layout: GridLayout::new(rows, cols).map_err(|e| e.to_string())?,
            steps,
            working_resolution: (resolution, resolution),
            ..ProjectConfig::default()
        };
        let pipeline = Pipeline::mock(resolution, resolution);
        let project = pipeline.visualize(&demo_plan(), config, seed).map_err(|e| e.to_string())?;
        Ok(Session { pipeline, project })
    }

    pub fn project(&self) -> &Project {
        &self.project
    }

    pub fn frame_count(&self) -> usize {
        self.project.frames().len()
    }

    pub fn resolution(&self) -> (u32, u32) {
        self.project.config.working_resolution
    }

    /// RGBA bytes of a 1-based page, ready for `ImageData`.
    pub fn frame_rgba(&self, page: usize) -> Result<Vec<u8>, String> {
        let frame = page
            .checked_sub(1)
            .and_then(|i| self.project.frames().frames.get(i))
            .ok_or_else(|| format!("no page {page}"))?;
        let image = self.project.image(&frame.hash).map_err(|e| e.to_string())?;
        Ok(image.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect())
    }

    pub fn captions(&self) -> Vec<String> {
        self.project
            .plan
            .as_ref()
            .map(|p| p.pages.iter().map(|page| page.plot_text.clone()).collect())
            .unwrap_or_default()
    }

    fn next_seed(&self) -> u64 {
        self.project.seed.wrapping_add(self.project.head as u64 + 1)
    }

    fn commit(&mut self, out: EditOutcome) -> EditSummary {
        self.project = out.project;
        EditSummary {
            turn: self.project.head,
            changed_pages: out.changed_pages,
            warnings: out.warnings,
            mask_reads: out.mask_reads,
        }
    }

    /// Edits `concept` on the given pages, or on all pages when empty.
    pub fn local_edit(&mut self, concept: &str, prompt: &str, pages: &[usize]) -> Result<EditSummary, String> {
        let mut request = EditRequest::local(concept, prompt);
        if !pages.is_empty() {
            request = request.with_frames(pages.to_vec());
        }
        let out = self
            .pipeline
            .edit(&self.project, &request, self.next_seed())
            .map_err(|e| e.to_string())?;
        Ok(self.commit(out))
    }

    pub fn style_edit(&mut self, prompt: &str) -> Result<EditSummary, String> {
        let out = self
            .pipeline
            .style(&self.project, &EditRequest::style(prompt), self.next_seed())
            .map_err(|e| e.to_string())?;
        Ok(self.commit(out))
    }

    pub fn undo(&mut self) -> Result<(), String> {
        self.project = self.project.undo().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// 1-based pages sharing each grid at denoising step `t`.
    pub fn groups_at(&self, t: usize) -> Vec<Vec<usize>> {
        regroup(self.frame_count(), self.project.config.layout, t, self.next_seed())
            .groups
            .into_iter()
            .map(|g| g.into_iter().map(|i| i + 1).collect())
            .collect()
    }
}

fn js_err(message: String) -> JsError {
    JsError::new(&message)
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(resolution: u32, steps: usize, seed: u32, rows: usize, cols: usize) -> Result<Demo, JsError> {
        Session::new(resolution, steps, seed.into(), rows, cols).map(|session| Demo { session }).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn pages(&self) -> usize {
        self.session.frame_count()
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> u32 {
        self.session.resolution().0
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.session.project.config.steps
    }

    #[wasm_bindgen(getter)]
    pub fn head(&self) -> usize {
        self.session.project.head
    }

    pub fn frame(&self, page: usize) -> Result<Vec<u8>, JsError> {
        self.session.frame_rgba(page).map_err(js_err)
    }

    pub fn caption(&self, page: usize) -> String {
        self.session.captions().get(page.wrapping_sub(1)).cloned().unwrap_or_default()
    }

    /// Returns the edit summary as JSON.
    #[wasm_bindgen(js_name = editCharacter)]
    pub fn edit_character(&mut self, concept: &str, prompt: &str, pages: Vec<usize>) -> Result<String, JsError> {
        let summary = self.session.local_edit(concept, prompt, &pages).map_err(js_err)?;
        Ok(serde_json::to_string(&summary).expect("summary serializes"))
    }

    #[wasm_bindgen(js_name = editStyle)]
    pub fn edit_style(&mut self, prompt: &str) -> Result<String, JsError> {
        let summary = self.session.style_edit(prompt).map_err(js_err)?;
        Ok(serde_json::to_string(&summary).expect("summary serializes"))
    }

    pub fn undo(&mut self) -> Result<(), JsError> {
        self.session.undo().map_err(js_err)
    }

    /// Grid membership at step `t`, as JSON `[[page, ...], ...]`.
    #[wasm_bindgen(js_name = groupsAt)]
    pub fn groups_at(&self, t: usize) -> String {
        serde_json::to_string(&self.session.groups_at(t)).expect("groups serialize")
    }
}
