//! Training-free story visualization and consistent multi-frame editing.
//!
//! A story plan (from an LLM or by hand) is rendered into template frames,
//! then refined by grid-prior latent denoising: frames are tiled into grids
//! that are regrouped every timestep, and local edits are confined to their
//! masks by blending with re-noised originals after each step.

pub mod backend;
pub mod grid;
pub mod imaging;
pub mod perception;
pub mod pipeline;
pub mod planner;
pub mod schema;

pub use backend::{DiffusionBackend, MockBackend, NoiseSchedule};
pub use grid::GridLayout;
pub use pipeline::{EditKind, EditRequest, Project, ProjectConfig};
pub use schema::{compose_prompt, parse_plan, serialize_plan, ParseMode, StoryPlan};
