use std::sync::Arc;

use image::{Rgb, RgbImage};
use plotnpolish_core::backend::{BackendError, MockBackend, PersonalizationSource};
use plotnpolish_core::imaging;
use plotnpolish_core::perception::{ColorKey, ColorMatch, OracleEstimator, Perception};
use plotnpolish_core::pipeline::{
    load_project, save_project, EditKind, EditRequest, MaskSource, Pipeline, PipelineError, Project,
    ProjectConfig, Provenance, ReferenceSpec,
};
use plotnpolish_core::schema::{parse_plan, ParseMode, StoryPlan};

const RES: u32 = 128;
const LISTING: &str = include_str!("fixtures/listing1.json");

fn listing() -> StoryPlan {
    parse_plan(LISTING, ParseMode::Lenient).unwrap()
}

fn config() -> ProjectConfig {
    ProjectConfig {
        steps: 10,
        working_resolution: (RES, RES),
        ..ProjectConfig::default()
    }
}

fn pipeline() -> Pipeline {
    Pipeline::mock(RES, RES)
}

fn images(project: &Project) -> Vec<Arc<RgbImage>> {
    project.current_images().unwrap()
}

/// True when the 8x8 cell containing `(x, y)` touches the subject box grown
/// by `r` pixels.
fn cell_touches_grown_box(bbox: (u32, u32, u32, u32), r: u32, x: u32, y: u32) -> bool {
    let (x0, y0, x1, y1) = bbox;
    let (cx, cy) = (x / 8 * 8, y / 8 * 8);
    let (gx0, gy0) = (x0.saturating_sub(r), y0.saturating_sub(r));
    let (gx1, gy1) = (x1 + r, y1 + r);
    cx <= gx1 && cx + 7 >= gx0 && cy <= gy1 && cy + 7 >= gy0
}

fn assert_local(before: &RgbImage, after: &RgbImage) {
    let bbox = MockBackend::subject_bbox(before).expect("template has a subject");
    let mut changed_inside = 0;
    for (x, y, p) in after.enumerate_pixels() {
        if cell_touches_grown_box(bbox, 3, x, y) {
            changed_inside += usize::from(p != before.get_pixel(x, y));
        } else {
            assert_eq!(p, before.get_pixel(x, y), "pixel ({x}, {y}) outside the mask changed");
        }
    }
    assert!(changed_inside > 0, "masked region did not change");
}

#[test]
fn listing_visualizes_to_six_deterministic_frames() {
    let pipe = pipeline();
    let a = pipe.visualize(&listing(), config(), 7).unwrap();
    let b = pipe.visualize(&listing(), config(), 7).unwrap();
    assert_eq!(a.frames().len(), 6);
    assert_eq!(a.frames(), b.frames());
    let hashes: std::collections::BTreeSet<_> = a.frames().hashes().into_iter().collect();
    assert_eq!(hashes.len(), 6);
    match &a.frames().frames[2].provenance {
        Provenance::Template { seed, .. } => assert_eq!(*seed, 10),
        other => panic!("unexpected provenance {other:?}"),
    }
    let c = pipe.visualize(&listing(), config(), 8).unwrap();
    assert_ne!(a.frames(), c.frames());
}

#[test]
fn single_page_plan_gives_one_frame() {
    let mut plan = listing();
    plan.pages.truncate(1);
    let project = pipeline().visualize(&plan, config(), 1).unwrap();
    assert_eq!(project.frames().len(), 1);
    let edited = pipeline()
        .edit(&project, &EditRequest::local("woman", "a green lab coat"), 3)
        .unwrap();
    assert_local(&images(&project)[0], &images(&edited.project)[0]);
}

#[test]
fn local_edit_changes_only_masked_cells() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 1).unwrap();
    let out = pipe
        .edit(&project, &EditRequest::local("woman", "red t-shirt"), 42)
        .unwrap();
    assert_eq!(out.changed_pages, vec![1, 2, 3, 4, 5, 6]);
    for (before, after) in images(&project).iter().zip(images(&out.project)) {
        assert_local(before, &after);
    }
    let turn = &out.project.turns[0];
    assert_eq!(turn.strength, 0.4);
    assert_eq!(turn.before, project.frames().hashes());
    assert!(out.mask_reads > 0);
}

#[test]
fn frame_subset_leaves_other_frames_byte_identical() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 1).unwrap();
    let out = pipe
        .edit(
            &project,
            &EditRequest::local("woman", "green hat").with_frames(vec![2, 4]),
            5,
        )
        .unwrap();
    assert_eq!(out.changed_pages, vec![2, 4]);
    let (before, after) = (images(&project), images(&out.project));
    for page in [1, 3, 5, 6] {
        assert_eq!(imaging::encode_png(&before[page - 1]), imaging::encode_png(&after[page - 1]));
    }
}

#[test]
fn repeated_edit_with_same_seed_is_identical() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 1).unwrap();
    let req = EditRequest::local("woman", "short hair");
    let a = pipe.edit(&project, &req, 9).unwrap();
    let b = pipe.edit(&project, &req, 9).unwrap();
    assert_eq!(a.project.frames(), b.project.frames());
}

#[test]
fn style_reads_no_masks_and_records_full_strength() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 1).unwrap();
    let out = pipe.style(&project, &EditRequest::style("Van Gogh"), 3).unwrap();
    assert_eq!(out.mask_reads, 0);
    let turn = out.project.turns.last().unwrap();
    assert_eq!(turn.strength, 1.0);
    assert_eq!(turn.mask_reads, 0);
    assert_eq!(out.changed_pages.len(), 6);
    let again = pipe.style(&project, &EditRequest::style("Van Gogh"), 3).unwrap();
    assert_eq!(again.project.frames(), out.project.frames());
}

#[test]
fn consistency_pass_runs_characters_in_declaration_order() {
    let pipe = pipeline();
    let plan = listing();
    let project = pipe.visualize(&plan, config(), 2).unwrap();
    let out = pipe.consistency_pass(&project, 100).unwrap();
    assert_eq!(out.project.turns.len(), 2);
    assert_eq!(out.project.turns[0].request.concept.as_deref(), Some("woman"));
    assert_eq!(out.project.turns[1].request.concept.as_deref(), Some("sparrow"));
    assert_eq!(out.project.turns[1].request.edit_prompt, plan.characters[1].description);

    // Oracle: the two passes applied by hand, in order.
    let first = EditRequest::consistency("woman", plan.characters[0].description.clone());
    let second = EditRequest::consistency("sparrow", plan.characters[1].description.clone());
    let manual = pipe.edit(&project, &first, 100).unwrap().project;
    let manual = pipe.edit(&manual, &second, 101).unwrap().project;
    assert_eq!(manual.frames().hashes(), out.project.frames().hashes());

    let swapped = pipe.edit(&project, &second, 100).unwrap().project;
    let swapped = pipe.edit(&swapped, &first, 101).unwrap().project;
    assert_ne!(swapped.frames().hashes(), out.project.frames().hashes());

    for (before, after) in images(&project).iter().zip(images(&out.project)) {
        assert_local(before, &after);
    }
}

#[test]
fn absent_character_leaves_frames_and_warns() {
    let only_woman = OracleEstimator::new(vec![ColorKey {
        concept: Some("woman".into()),
        color: ColorMatch::MockSubject,
        confidence: 0.9,
    }]);
    let pipe = Pipeline::new(
        Arc::new(MockBackend::with_resolution(RES, RES)),
        Perception::from_oracle(only_woman),
    );
    let project = pipe.visualize(&listing(), config(), 2).unwrap();
    let out = pipe
        .edit(&project, &EditRequest::consistency("sparrow", "a small sparrow"), 1)
        .unwrap();
    assert_eq!(out.project.frames(), project.frames());
    assert!(out.changed_pages.is_empty());
    let per_page = out.warnings.iter().filter(|w| w.starts_with("page ")).count();
    assert_eq!(per_page, 6);
    assert_eq!(out.project.turns.len(), 1);
}

#[test]
fn personalized_edit_differs_only_inside_the_mask() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 4).unwrap();
    let reference = RgbImage::from_pixel(32, 32, Rgb([20, 200, 40]));
    let req = EditRequest::personalized("woman", "a woman in a coat");
    let personal = pipe
        .personalize(&project, &req, &PersonalizationSource::ReferenceImage(reference.clone()), 6)
        .unwrap();
    let plain = pipe
        .edit(&project, &EditRequest::local("woman", "a woman in a coat"), 6)
        .unwrap();

    let turn = personal.project.turns.last().unwrap();
    assert_eq!(turn.request.kind, EditKind::Personalized);
    assert_eq!(
        turn.request.reference,
        Some(ReferenceSpec::Image {
            hash: imaging::image_hash(&reference)
        })
    );
    let originals = images(&project);
    let mut any_diff = false;
    for ((orig, a), b) in originals.iter().zip(images(&personal.project)).zip(images(&plain.project)) {
        assert_local(orig, &a);
        any_diff |= a != b;
    }
    assert!(any_diff, "reference had no effect");
}

#[test]
fn personalization_from_weights_file_is_replayable() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("style.safetensors");
    std::fs::write(&weights, b"not really weights").unwrap();
    let out = pipe
        .personalize(
            &project,
            &EditRequest::personalized("sparrow", "a robin"),
            &PersonalizationSource::Weights(weights.clone()),
            1,
        )
        .unwrap();
    assert_eq!(pipe.replay(&out.project).unwrap(), *out.project.frames());

    std::fs::write(&weights, b"different weights").unwrap();
    assert!(matches!(
        pipe.replay(&out.project),
        Err(PipelineError::ReplayDivergence { turn: 1, .. })
    ));
    std::fs::remove_file(&weights).unwrap();
    assert!(matches!(
        pipe.replay(&out.project),
        Err(PipelineError::Backend(BackendError::WeightsNotFound(_)))
    ));
}

#[test]
fn three_turn_history_replays_bit_exactly() {
    let pipe = pipeline();
    let p0 = pipe.visualize(&listing(), config(), 3).unwrap();
    assert_eq!(pipe.replay(&p0).unwrap(), *p0.frames());
    let p1 = pipe.edit(&p0, &EditRequest::local("woman", "red scarf"), 1).unwrap().project;
    let p2 = pipe.style(&p1, &EditRequest::style("Day of the Dead"), 2).unwrap().project;
    let p3 = pipe
        .edit(
            &p2,
            &EditRequest::local("sparrow", "blue feathers")
                .with_frames(vec![1, 3])
                .with_mask_source(MaskSource::Attention),
            3,
        )
        .unwrap()
        .project;
    assert_eq!(p3.turns.len(), 3);
    assert_eq!(pipe.replay(&p3).unwrap(), *p3.frames());

    let dir = tempfile::tempdir().unwrap();
    save_project(&p3, dir.path()).unwrap();
    let loaded = load_project(dir.path()).unwrap();
    assert_eq!(pipe.replay(&loaded).unwrap(), *p3.frames());
}

#[test]
fn corrupted_frame_is_a_replay_divergence() {
    let pipe = pipeline();
    let p0 = pipe.visualize(&listing(), config(), 3).unwrap();
    let p1 = pipe.edit(&p0, &EditRequest::local("woman", "red scarf"), 1).unwrap().project;
    let dir = tempfile::tempdir().unwrap();
    save_project(&p1, dir.path()).unwrap();

    let victim = &p1.frames().frames[0].hash;
    let path = dir.path().join("frames").join(format!("{victim}.png"));
    let mut image = imaging::load_rgb(&path).unwrap();
    image.put_pixel(0, 0, Rgb([1, 2, 3]));
    imaging::save_png(&image, &path).unwrap();

    let loaded = load_project(dir.path()).unwrap();
    assert!(matches!(
        pipe.replay(&loaded),
        Err(PipelineError::ReplayDivergence { turn: 1, page: 1, .. })
    ));
}

#[test]
fn user_supplied_masks_are_used_verbatim() {
    let pipe = pipeline();
    let mut project = pipe.visualize(&listing(), config(), 3).unwrap();
    let mask = ndarray::Array2::from_shape_fn((RES as usize, RES as usize), |(y, x)| x < 16 && y < 16);
    let hash = project.add_mask(mask);
    let mut req = EditRequest::local("woman", "a hat").with_mask_source(MaskSource::UserSupplied);
    req.user_masks.insert(2, hash);
    let out = pipe.edit(&project, &req, 1).unwrap();
    assert_eq!(out.changed_pages, vec![2]);
    let (before, after) = (&images(&project)[1], &images(&out.project)[1]);
    for (x, y, p) in after.enumerate_pixels() {
        // Dilation by 3 reaches into the cell at 16..24.
        if x >= 24 || y >= 24 {
            assert_eq!(p, before.get_pixel(x, y));
        }
    }
}

#[test]
fn instance_override_must_exist() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 3).unwrap();
    let mut req = EditRequest::local("woman", "a hat");
    req.instance_overrides.insert(1, 5);
    assert!(matches!(
        pipe.edit(&project, &req, 1),
        Err(PipelineError::Perception(_))
    ));
}

#[test]
fn mask_preview_lists_candidates() {
    let pipe = pipeline();
    let project = pipe.visualize(&listing(), config(), 3).unwrap();
    let previews = pipe
        .preview_masks(&project, "woman", MaskSource::Segmentation, Some(&[2, 5]))
        .unwrap();
    assert_eq!(previews.iter().map(|(p, _)| *p).collect::<Vec<_>>(), vec![2, 5]);
    assert!(previews.iter().all(|(_, s)| s.candidates.len() == 1 && !s.selected.is_empty()));
}

fn png(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
    imaging::encode_png(&RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))))
}

#[test]
fn import_resizes_mixed_sizes_with_center_crop() {
    let green = [0, 255, 0];
    let inputs = vec![
        // Wide: red and blue side bands are cropped away.
        ("wide.png".to_string(), png(256, 128, |x, _| match x {
            0..64 => [255, 0, 0],
            192.. => [0, 0, 255],
            _ => green,
        })),
        // Tall: top and bottom bands are cropped away.
        ("tall.png".to_string(), png(96, 192, |_, y| match y {
            0..48 => [255, 0, 0],
            144.. => [0, 0, 255],
            _ => green,
        })),
        ("square.png".to_string(), png(64, 64, |_, _| green)),
        ("exact.png".to_string(), png(RES, RES, |_, _| green)),
    ];
    let pipe = pipeline();
    let project = pipe.import_frames(&inputs, None, config(), 0).unwrap();
    assert_eq!(project.frames().len(), 4);
    for (image, frame) in images(&project).iter().zip(&project.frames().frames) {
        assert_eq!(image.dimensions(), (RES, RES));
        assert!(image.pixels().all(|p| p.0 == green), "{:?}", frame.provenance);
        assert!(matches!(frame.provenance, Provenance::Imported { .. }));
    }

    // Imported frames support every edit kind.
    let styled = pipe.style(&project, &EditRequest::style("ink wash"), 1).unwrap();
    assert_eq!(styled.changed_pages.len(), 4);
    let local = pipe.edit(&project, &EditRequest::local("boy", "a hat"), 1).unwrap();
    assert!(local.changed_pages.is_empty());
    assert!(!local.warnings.is_empty());
}

#[test]
fn import_rejects_bad_input() {
    let pipe = pipeline();
    assert!(matches!(
        pipe.import_frames(&[], None, config(), 0),
        Err(PipelineError::EmptyInput)
    ));
    let junk = vec![("junk.png".to_string(), b"not an image".to_vec())];
    assert!(matches!(
        pipe.import_frames(&junk, None, config(), 0),
        Err(PipelineError::Image(_))
    ));
    let one = vec![("a.png".to_string(), png(8, 8, |_, _| [0, 0, 0]))];
    assert!(matches!(
        pipe.import_frames(&one, Some(listing()), config(), 0),
        Err(PipelineError::InvalidRequest(_))
    ));
}

#[test]
fn debug_grids_are_written_per_turn() {
    let dir = tempfile::tempdir().unwrap();
    let pipe = pipeline().with_debug_dir(dir.path());
    let cfg = ProjectConfig {
        steps: 2,
        ..config()
    };
    let project = pipe.visualize(&listing(), cfg, 3).unwrap();
    pipe.style(&project, &EditRequest::style("ink"), 1).unwrap();
    let turn_dir = dir.path().join("turn_001");
    assert_eq!(std::fs::read_dir(turn_dir).unwrap().count(), 2);
}
