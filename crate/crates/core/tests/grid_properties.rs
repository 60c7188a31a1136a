use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use plotnpolish_core::backend::NoiseSchedule;
use plotnpolish_core::grid::{
    assemble, blend, noised_original, noised_original_with_alpha, regroup, resize_mask_to_latent, shuffle_key,
    split, GridLayout, MaskDownsample,
};
use proptest::prelude::*;

/// Naive placement: item `k` goes to row `k / cols`, column `k % cols`.
fn index_loop_assemble(items: &[Array3<f64>], layout: GridLayout) -> Array3<f64> {
    let (c, h, w) = items[0].dim();
    let mut grid = Array3::zeros((c, layout.rows() * h, layout.cols() * w));
    for slot in 0..layout.group_size() {
        let item = &items[slot.min(items.len() - 1)];
        let (r, q) = (slot / layout.cols(), slot % layout.cols());
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    grid[[ch, r * h + y, q * w + x]] = item[[ch, y, x]];
                }
            }
        }
    }
    grid
}

fn case() -> impl Strategy<Value = (GridLayout, Vec<Array3<f64>>)> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(rows, cols, c, h, w)| {
        let layout = GridLayout::new(rows, cols).unwrap();
        let item = prop::collection::vec(-10.0f64..10.0, c * h * w)
            .prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap());
        (Just(layout), prop::collection::vec(item, 1..=rows * cols))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn split_inverts_assemble((layout, items) in case()) {
        let views: Vec<_> = items.iter().map(|a| a.view()).collect();
        let ids: Vec<usize> = (0..items.len()).map(|i| i * 7 + 3).collect();
        let (grid, map) = assemble(&views, &ids, layout).unwrap();
        prop_assert_eq!(&grid, &index_loop_assemble(&items, layout));
        let back = split(&grid, &map).unwrap();
        prop_assert_eq!(back.len(), items.len());
        for (a, b) in back.iter().zip(&items) {
            prop_assert_eq!(a, b);
        }
        prop_assert_eq!(map.cells.iter().map(|c| c.frame_index).collect::<Vec<_>>(), ids);
    }

    #[test]
    fn regroup_covers_every_frame_once(
        n in 1usize..=64,
        rows in 1usize..4,
        cols in 1usize..4,
        t in 0usize..60,
        seed in any::<u64>(),
    ) {
        let layout = GridLayout::new(rows, cols).unwrap();
        let a = regroup(n, layout, t, seed);
        prop_assert_eq!(&a, &regroup(n, layout, t, seed));
        prop_assert_eq!(a.groups.len(), n.div_ceil(layout.group_size()));
        let mut seen = BTreeSet::new();
        for g in &a.groups {
            prop_assert!(!g.is_empty() && g.len() <= layout.group_size());
            for &i in g {
                prop_assert!(seen.insert(i), "frame {} twice", i);
            }
        }
        prop_assert_eq!(seen, (0..n).collect::<BTreeSet<_>>());

        // Independent oracle: sort by key, then deal balanced chunks.
        let mut keyed: Vec<(u64, usize)> = (0..n).map(|i| (shuffle_key(seed, t, i), i)).collect();
        keyed.sort();
        let flat: Vec<usize> = a.groups.concat();
        prop_assert_eq!(flat, keyed.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
        let sizes: BTreeSet<usize> = a.groups.iter().map(Vec::len).collect();
        prop_assert!(sizes.len() <= 2);
    }

    #[test]
    fn blend_matches_elementwise_loop(
        (z, zp, m) in (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            let arr = move |lo: f64, hi: f64| prop::collection::vec(lo..hi, c * h * w)
                .prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap());
            (arr(-3.0, 3.0), arr(-3.0, 3.0), arr(0.0, 1.0))
        })
    ) {
        let out = blend(&z, &zp, &m).unwrap();
        for ((idx, &o), ((&a, &b), &k)) in out.indexed_iter().zip(z.iter().zip(zp.iter()).zip(m.iter())) {
            let expected = a * k + b * (1.0 - k);
            prop_assert_eq!(o.to_bits(), expected.to_bits(), "at {:?}", idx);
        }
        let ones = Array3::ones(z.raw_dim());
        let zeros = Array3::zeros(z.raw_dim());
        prop_assert_eq!(blend(&z, &zp, &ones).unwrap(), z.clone());
        prop_assert_eq!(blend(&z, &zp, &zeros).unwrap(), zp.clone());
    }

    #[test]
    fn one_lit_pixel_lights_its_cell(h in 1usize..5, w in 1usize..5, s in 1usize..5, y in 0usize..20, x in 0usize..20) {
        let (y, x) = (y % (h * s), x % (w * s));
        let mut mask = Array2::from_elem((h * s, w * s), false);
        mask[[y, x]] = true;
        let m = resize_mask_to_latent(&mask, s, MaskDownsample::OrPool).unwrap();
        for ((i, j), &v) in m.indexed_iter() {
            prop_assert_eq!(v, if (i, j) == (y / s, x / s) { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn noised_original_analytic_cases() {
    let orig = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * 3 + x) as f64 * 0.1 - 0.4);
    let eps = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| ((c * 7 + y * 5 + x) % 4) as f64 - 1.5);
    assert_eq!(noised_original_with_alpha(&orig, 1.0, &eps).unwrap(), orig);
    assert_eq!(noised_original_with_alpha(&orig, 0.0, &eps).unwrap(), eps);

    let ones = Array3::ones((2, 3, 3));
    let expected = 0.25f64.sqrt() + 0.75f64.sqrt();
    for v in noised_original_with_alpha(&ones, 0.25, &ones).unwrap() {
        assert!((v - expected).abs() < 1e-12);
    }
    assert!((expected - 1.3660254).abs() < 1e-7);

    // Timestep 0 of any schedule has unit signal.
    let schedule = NoiseSchedule::default();
    assert_eq!(noised_original(&orig, 0, &schedule, &eps).unwrap(), orig);
}

#[test]
fn eighteen_frames_make_two_full_groups() {
    let a = regroup(18, GridLayout::default(), 7, 99);
    assert_eq!(a.groups.len(), 2);
    assert!(a.groups.iter().all(|g| g.len() == 9));
    let b = regroup(18, GridLayout::default(), 8, 99);
    assert_ne!(a.groups, b.groups);
}

#[test]
fn padded_grid_drops_padding_on_split() {
    let layout = GridLayout::new(2, 2).unwrap();
    let items: Vec<Array3<f64>> = (0..3).map(|i| Array3::from_elem((1, 2, 2), i as f64)).collect();
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    let (grid, map) = assemble(&views, &[0, 1, 2], layout).unwrap();
    // The bottom-right cell repeats the last item.
    assert_eq!(grid[[0, 3, 3]], 2.0);
    assert_eq!(split(&grid, &map).unwrap(), items);
}
