use std::collections::BTreeSet;

use plotnpolish_wasm_demo::{demo_plan, Session};

const RES: u32 = 64;

fn session() -> Session {
    Session::new(RES, 6, 3, 3, 3).unwrap()
}

fn frames(s: &Session) -> Vec<Vec<u8>> {
    (1..=s.frame_count()).map(|p| s.frame_rgba(p).unwrap()).collect()
}

#[test]
fn bundled_plan_fills_one_grid() {
    let plan = demo_plan();
    assert_eq!(plan.pages.len(), 9);
    let s = session();
    assert_eq!(s.frame_count(), 9);
    assert_eq!(s.captions().len(), 9);
    // Nine pages fill exactly one 3x3 grid at every step.
    let groups = s.groups_at(0);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].len(), 9);

    // 2x2 grids split them three ways, differently from step to step.
    let small = Session::new(RES, 6, 3, 2, 2).unwrap();
    let sizes: Vec<usize> = small.groups_at(0).iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![3, 3, 3]);
    assert!((1..6).any(|t| small.groups_at(t) != small.groups_at(0)));
}

#[test]
fn frames_are_rgba_of_the_working_size() {
    let s = session();
    let rgba = s.frame_rgba(1).unwrap();
    assert_eq!(rgba.len(), (RES * RES * 4) as usize);
    assert!(rgba.chunks(4).all(|px| px[3] == 255));
    assert!(s.frame_rgba(0).is_err());
    assert!(s.frame_rgba(10).is_err());
}

#[test]
fn character_edit_keeps_other_pages() {
    let mut s = session();
    let before = frames(&s);
    let summary = s.local_edit("fox", "blue scarf", &[2, 5]).unwrap();
    assert_eq!(summary.turn, 1);
    assert_eq!(summary.changed_pages, vec![2, 5]);
    assert!(summary.mask_reads > 0);
    let after = frames(&s);
    for page in 1..=9 {
        assert_eq!(after[page - 1] == before[page - 1], ![2, 5].contains(&page), "page {page}");
    }
}

#[test]
fn style_edit_reads_no_masks_and_undo_restores() {
    let mut s = session();
    let before = frames(&s);
    let summary = s.style_edit("charcoal sketch").unwrap();
    assert_eq!(summary.mask_reads, 0);
    assert_eq!(summary.changed_pages.len(), 9);
    s.undo().unwrap();
    assert_eq!(frames(&s), before);
    assert!(s.undo().is_err());
}

#[test]
fn groups_cover_every_page_once() {
    let s = session();
    for t in 0..6 {
        let groups = s.groups_at(t);
        let pages: BTreeSet<usize> = groups.concat().into_iter().collect();
        assert_eq!(pages, (1..=9).collect());
        assert_eq!(groups.concat().len(), 9);
    }
}

#[test]
fn bad_resolution_is_rejected() {
    assert!(Session::new(60, 4, 1, 3, 3).is_err());
    assert!(Session::new(0, 4, 1, 3, 3).is_err());
    assert!(Session::new(64, 4, 1, 0, 3).is_err());
}
