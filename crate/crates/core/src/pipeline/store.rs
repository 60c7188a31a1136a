//! On-disk project layout:
//!
//! ```text
//! project.json        seed, config, baseline frames, history head
//! plan.json           story plan, if any
//! conversation.json   planner conversation, if any
//! turns.jsonl         one EditTurn per line
//! frames/<hash>.png   every stored frame and reference image
//! masks/<hash>.png    1-bit masks
//! ```

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EditTurn, FrameSet, PipelineError, Project, ProjectConfig};
use crate::imaging;
use crate::schema::{self, ParseMode};

pub const PROJECT_FILE_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct ProjectFile {
    version: String,
    seed: u64,
    config: ProjectConfig,
    baseline: FrameSet,
    head: usize,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Writes to a sibling temp file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn save_project(project: &Project, dir: &Path) -> Result<(), PipelineError> {
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    for d in [dir, &frames_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }

    for (hash, image) in project.store.iter() {
        let path = frames_dir.join(format!("{hash}.png"));
        if !path.exists() {
            write_atomic(&path, &imaging::encode_png(image))?;
        }
    }
    for (hash, mask) in project.masks.iter() {
        let path = masks_dir.join(format!("{hash}.png"));
        if !path.exists() {
            write_atomic(&path, &imaging::encode_mask_png(mask))?;
        }
    }

    let plan_path = dir.join("plan.json");
    match &project.plan {
        Some(plan) => write_atomic(&plan_path, schema::serialize_plan(plan).as_bytes())?,
        None if plan_path.exists() => std::fs::remove_file(&plan_path).map_err(|e| io_err(&plan_path, e))?,
        None => {}
    }
    if let Some(conversation) = &project.conversation {
        let json = serde_json::to_vec_pretty(conversation).expect("conversation serializes");
        write_atomic(&dir.join("conversation.json"), &json)?;
    }

    let mut turns = Vec::new();
    for turn in &project.turns {
        serde_json::to_writer(&mut turns, turn).expect("turn serializes");
        turns.push(b'\n');
    }
    write_atomic(&dir.join("turns.jsonl"), &turns)?;

    let file = ProjectFile {
        version: PROJECT_FILE_VERSION.into(),
        seed: project.seed,
        config: project.config.clone(),
        baseline: project.baseline.clone(),
        head: project.head,
    };
    let json = serde_json::to_vec_pretty(&file).expect("project file serializes");
    write_atomic(&dir.join("project.json"), &json)
}

fn read(path: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

pub fn load_project(dir: &Path) -> Result<Project, PipelineError> {
    let path = dir.join("project.json");
    let file: ProjectFile =
        serde_json::from_slice(&read(&path)?).map_err(|e| PipelineError::Corrupt(format!("{}: {e}", path.display())))?;
    if file.version != PROJECT_FILE_VERSION {
        return Err(PipelineError::Corrupt(format!(
            "unsupported project version {:?}",
            file.version
        )));
    }

    let mut project = Project::new(None, file.config, file.seed);
    project.baseline = file.baseline;

    let plan_path = dir.join("plan.json");
    if plan_path.exists() {
        let text = String::from_utf8(read(&plan_path)?).map_err(|e| io_err(&plan_path, e))?;
        project.plan = Some(schema::parse_plan(&text, ParseMode::Strict)?);
    }
    let conv_path = dir.join("conversation.json");
    if conv_path.exists() {
        project.conversation = Some(
            serde_json::from_slice(&read(&conv_path)?)
                .map_err(|e| PipelineError::Corrupt(format!("{}: {e}", conv_path.display())))?,
        );
    }

    let turns_path = dir.join("turns.jsonl");
    if turns_path.exists() {
        let text = String::from_utf8(read(&turns_path)?).map_err(|e| io_err(&turns_path, e))?;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let turn: EditTurn = serde_json::from_str(line)
                .map_err(|e| PipelineError::Corrupt(format!("turns.jsonl line {}: {e}", n + 1)))?;
            project.turns.push(turn);
        }
    }
    if file.head > project.turns.len() {
        return Err(PipelineError::Corrupt(format!(
            "head {} beyond {} turns",
            file.head,
            project.turns.len()
        )));
    }
    project.head = file.head;

    // Frames are keyed by file name, not re-hashed, so a tampered file is
    // reported by replay rather than silently renamed.
    let frames_dir = dir.join("frames");
    if frames_dir.exists() {
        for entry in std::fs::read_dir(&frames_dir).map_err(|e| io_err(&frames_dir, e))? {
            let path = entry.map_err(|e| io_err(&frames_dir, e))?.path();
            let Some(hash) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".png"))
            else {
                continue;
            };
            let image = imaging::decode_image(&read(&path)?, &path.display().to_string())?;
            project.store.insert_unchecked(hash.to_string(), Arc::new(image));
        }
    }
    let masks_dir = dir.join("masks");
    if masks_dir.exists() {
        for entry in std::fs::read_dir(&masks_dir).map_err(|e| io_err(&masks_dir, e))? {
            let path = entry.map_err(|e| io_err(&masks_dir, e))?.path();
            if path.extension().is_some_and(|e| e == "png") {
                let mask = imaging::decode_mask_png(&read(&path)?, &path.display().to_string())?;
                project.masks.insert(mask);
            }
        }
    }

    let referenced = project
        .baseline
        .frames
        .iter()
        .chain(project.turns.iter().flat_map(|t| t.after.frames.iter()));
    for frame in referenced {
        if !project.store.contains(&frame.hash) {
            return Err(PipelineError::Corrupt(format!("frame {} is missing", frame.hash)));
        }
    }
    Ok(project)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{EditRequest, Pipeline};
    use crate::schema::{CharacterSpec, StoryPage, StoryPlan};

    #[test]
    fn save_load_round_trip() {
        let pipe = Pipeline::mock(64, 64);
        let plan = StoryPlan::new(
            None,
            vec![CharacterSpec::new("Tom", "boy", "boy")],
            vec![StoryPage {
                page: 1,
                context_prompt: "Tom".into(),
                ..StoryPage::default()
            }],
        )
        .unwrap();
        let config = ProjectConfig {
            steps: 4,
            ..ProjectConfig::default()
        };
        let mut project = pipe.visualize(&plan, config, 3).unwrap();
        project.add_mask(ndarray::Array2::from_elem((64, 64), true));
        let project = pipe
            .edit(&project, &EditRequest::local("boy", "green cap"), 9)
            .unwrap()
            .project;

        let dir = tempfile::tempdir().unwrap();
        save_project(&project, dir.path()).unwrap();
        let loaded = load_project(dir.path()).unwrap();
        assert_eq!(loaded.plan, project.plan);
        assert_eq!(loaded.turns, project.turns);
        assert_eq!(loaded.head, project.head);
        assert_eq!(loaded.frames(), project.frames());
        assert_eq!(loaded.config, project.config);
        assert_eq!(loaded.masks.iter().count(), 1);
        assert_eq!(pipe.replay(&loaded).unwrap(), *project.frames());
    }
}
