//! Multi-frame grid denoising.
//!
//! Frames are tiled into `rows x cols` grids so the denoiser sees several
//! frames at once. Grouping is reshuffled every timestep so that, over the
//! run, every frame shares a grid with every other. For local edits each
//! step is followed by a masked blend with the re-noised originals, which
//! pins unmasked latents to the source frames.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;
use ndarray::{s, Array2, Array3, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, DdimSampler, DenoiseCondition, DiffusionBackend, ImagePromptHandle,
    LatentTensor, NoiseSchedule,
};
use crate::imaging;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "GridLayoutRepr", into = "GridLayoutRepr")]
pub struct GridLayout {
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct GridLayoutRepr {
    rows: usize,
    cols: usize,
}

impl TryFrom<GridLayoutRepr> for GridLayout {
    type Error = GridError;

    fn try_from(r: GridLayoutRepr) -> Result<Self, Self::Error> {
        GridLayout::new(r.rows, r.cols)
    }
}

impl From<GridLayout> for GridLayoutRepr {
    fn from(l: GridLayout) -> Self {
        GridLayoutRepr {
            rows: l.rows,
            cols: l.cols,
        }
    }
}

impl GridLayout {
    pub fn new(rows: usize, cols: usize) -> Result<Self, GridError> {
        if rows == 0 || cols == 0 {
            return Err(GridError::InvalidArgument(format!(
                "grid {rows}x{cols} must have at least one row and column"
            )));
        }
        Ok(GridLayout { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Frames per grid.
    pub fn group_size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_of(&self, slot: usize) -> (usize, usize) {
        (slot / self.cols, slot % self.cols)
    }
}

impl Default for GridLayout {
    fn default() -> Self {
        GridLayout { rows: 3, cols: 3 }
    }
}

impl fmt::Display for GridLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridLayout {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GridError::InvalidArgument(format!("expected ROWSxCOLS, got {s:?}"));
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        GridLayout::new(
            r.trim().parse().map_err(|_| bad())?,
            c.trim().parse().map_err(|_| bad())?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub frame_index: usize,
    pub row: usize,
    pub col: usize,
}

/// Where each frame sits in an assembled grid. Cells not listed are padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMap {
    pub layout: GridLayout,
    /// `(channels, height, width)` of one cell.
    pub cell_shape: (usize, usize, usize),
    pub cells: Vec<Cell>,
}

/// Tiles `items` row-major into one grid. Short groups are padded by
/// repeating the last item; the padding is not recorded in the cell map.
pub fn assemble<T: Clone>(
    items: &[ArrayView3<'_, T>],
    frame_indices: &[usize],
    layout: GridLayout,
) -> Result<(Array3<T>, CellMap), GridError> {
    let Some(first) = items.first() else {
        return Err(GridError::ShapeMismatch("cannot assemble an empty group".into()));
    };
    if items.len() != frame_indices.len() {
        return Err(GridError::InvalidArgument(format!(
            "{} items but {} frame indices",
            items.len(),
            frame_indices.len()
        )));
    }
    if items.len() > layout.group_size() {
        return Err(GridError::ShapeMismatch(format!(
            "{} items exceed a {layout} grid",
            items.len()
        )));
    }
    let (c, h, w) = first.dim();
    if let Some(bad) = items.iter().find(|a| a.dim() != (c, h, w)) {
        return Err(GridError::ShapeMismatch(format!(
            "item shape {:?} differs from {:?}",
            bad.dim(),
            (c, h, w)
        )));
    }

    let Some(fill) = first.first().cloned() else {
        return Err(GridError::ShapeMismatch("items have a zero-sized dimension".into()));
    };
    let mut grid = Array3::from_elem((c, layout.rows * h, layout.cols * w), fill);
    let mut cells = Vec::with_capacity(items.len());
    for slot in 0..layout.group_size() {
        let (row, col) = layout.cell_of(slot);
        let item = &items[slot.min(items.len() - 1)];
        grid.slice_mut(s![.., row * h..(row + 1) * h, col * w..(col + 1) * w])
            .assign(item);
        if slot < items.len() {
            cells.push(Cell {
                frame_index: frame_indices[slot],
                row,
                col,
            });
        }
    }
    Ok((
        grid,
        CellMap {
            layout,
            cell_shape: (c, h, w),
            cells,
        },
    ))
}

/// Inverse of [`assemble`]: one array per cell-map entry, in cell-map order.
pub fn split<T: Clone>(grid: &Array3<T>, map: &CellMap) -> Result<Vec<Array3<T>>, GridError> {
    if map.cells.is_empty() {
        return Ok(Vec::new());
    }
    let (c, h, w) = map.cell_shape;
    let expected = (c, map.layout.rows * h, map.layout.cols * w);
    if grid.dim() != expected {
        return Err(GridError::ShapeMismatch(format!(
            "grid {:?} does not match cell map {:?}",
            grid.dim(),
            expected
        )));
    }
    map.cells
        .iter()
        .map(|cell| {
            if cell.row >= map.layout.rows || cell.col >= map.layout.cols {
                return Err(GridError::ShapeMismatch(format!(
                    "cell ({}, {}) outside {}",
                    cell.row, cell.col, map.layout
                )));
            }
            Ok(grid
                .slice(s![
                    ..,
                    cell.row * h..(cell.row + 1) * h,
                    cell.col * w..(cell.col + 1) * w
                ])
                .to_owned())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub timestep: usize,
    /// 0-based frame indices.
    pub groups: Vec<Vec<usize>>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Order key of frame `index` at timestep `t`.
pub fn shuffle_key(seed: u64, t: usize, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ t as u64) ^ index as u64)
}

/// Seeded permutation of `0..n` split into `ceil(n / group_size)` groups
/// whose sizes differ by at most one.
pub fn regroup(n: usize, layout: GridLayout, t: usize, seed: u64) -> GroupAssignment {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (shuffle_key(seed, t, i), i));
    let group_count = n.div_ceil(layout.group_size());
    let mut groups = Vec::with_capacity(group_count);
    let mut start = 0;
    for g in 0..group_count {
        let len = n / group_count + usize::from(g < n % group_count);
        groups.push(order[start..start + len].to_vec());
        start += len;
    }
    GroupAssignment {
        timestep: t,
        groups,
    }
}

/// `sqrt(alpha) * original + sqrt(1 - alpha) * eps`.
pub fn noised_original_with_alpha(
    original: &Array3<f64>,
    alpha: f64,
    eps: &Array3<f64>,
) -> Result<Array3<f64>, GridError> {
    if original.dim() != eps.dim() {
        return Err(GridError::ShapeMismatch(format!(
            "noise {:?} vs latent {:?}",
            eps.dim(),
            original.dim()
        )));
    }
    let (sa, sn) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let mut out = Array3::zeros(original.raw_dim());
    Zip::from(&mut out)
        .and(original)
        .and(eps)
        .for_each(|o, &x, &e| *o = sa * x + sn * e);
    Ok(out)
}

/// The original latents re-noised to the level of timestep `t`.
pub fn noised_original(
    original: &Array3<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Array3<f64>,
) -> Result<Array3<f64>, GridError> {
    if t > schedule.steps() {
        return Err(GridError::InvalidArgument(format!(
            "timestep {t} beyond schedule of {} steps",
            schedule.steps()
        )));
    }
    noised_original_with_alpha(original, schedule.alpha(t), eps)
}

/// `edited * mask + original * (1 - mask)`, elementwise.
pub fn blend(
    edited: &Array3<f64>,
    original: &Array3<f64>,
    mask: &Array3<f64>,
) -> Result<Array3<f64>, GridError> {
    if edited.dim() != original.dim() || edited.dim() != mask.dim() {
        return Err(GridError::ShapeMismatch(format!(
            "blend inputs {:?}, {:?}, {:?}",
            edited.dim(),
            original.dim(),
            mask.dim()
        )));
    }
    let mut out = Array3::zeros(edited.raw_dim());
    Zip::from(&mut out)
        .and(edited)
        .and(original)
        .and(mask)
        .for_each(|o, &z, &zp, &m| *o = z * m + zp * (1.0 - m));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskDownsample {
    /// A latent cell is on if any covered pixel is on.
    #[default]
    OrPool,
    /// A latent cell is on if at least `threshold` of its pixels are.
    MeanThreshold { threshold: f64 },
}

/// Pixel mask to a `{0, 1}` mask at latent resolution.
pub fn resize_mask_to_latent(
    mask: &Array2<bool>,
    scale_factor: usize,
    mode: MaskDownsample,
) -> Result<Array2<f64>, GridError> {
    let (h, w) = mask.dim();
    if scale_factor == 0 || h % scale_factor != 0 || w % scale_factor != 0 {
        return Err(GridError::ShapeMismatch(format!(
            "mask {h}x{w} not divisible by {scale_factor}"
        )));
    }
    let s = scale_factor;
    Ok(Array2::from_shape_fn((h / s, w / s), |(i, j)| {
        let block = mask.slice(s![i * s..(i + 1) * s, j * s..(j + 1) * s]);
        let on = match mode {
            MaskDownsample::OrPool => block.iter().any(|&b| b),
            MaskDownsample::MeanThreshold { threshold } => {
                block.iter().filter(|&&b| b).count() as f64 / (s * s) as f64 >= threshold
            }
        };
        if on {
            1.0
        } else {
            0.0
        }
    }))
}

/// Mean-pools a pixel-resolution map down to latent resolution.
pub fn pool_to_latent(map: &Array2<f64>, scale_factor: usize) -> Result<Array2<f64>, GridError> {
    let (h, w) = map.dim();
    if scale_factor == 0 || h % scale_factor != 0 || w % scale_factor != 0 {
        return Err(GridError::ShapeMismatch(format!(
            "map {h}x{w} not divisible by {scale_factor}"
        )));
    }
    let s = scale_factor;
    Ok(Array2::from_shape_fn((h / s, w / s), |(i, j)| {
        map.slice(s![i * s..(i + 1) * s, j * s..(j + 1) * s])
            .mean()
            .expect("non-empty block")
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Fresh noise for the re-noised originals at every timestep.
    #[default]
    PerStep,
    /// One noise sample per frame reused at every timestep.
    Fixed,
}

/// Latent-resolution masks with a read counter, so callers can verify that
/// unblended runs never consult them.
#[derive(Debug, Default)]
pub struct MaskGrid {
    masks: Vec<Array2<f64>>,
    reads: AtomicUsize,
}

impl MaskGrid {
    pub fn new(masks: Vec<Array2<f64>>) -> Self {
        MaskGrid {
            masks,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn get(&self, frame: usize) -> &Array2<f64> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.masks[frame]
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    fn dim(&self, frame: usize) -> (usize, usize) {
        self.masks[frame].dim()
    }
}

/// Per-frame state of a grid edit at one timestep.
#[derive(Debug)]
pub struct GridState {
    /// Current noisy latents `z_t`, one per frame.
    pub latents: Vec<Array3<f64>>,
    /// Encoded source frames.
    pub originals: Vec<Array3<f64>>,
    pub masks: MaskGrid,
    /// Depth at latent resolution.
    pub depth: Vec<Array2<f64>>,
    pub timestep: usize,
    pub scale_factor: usize,
}

/// Seeded standard-normal noise for one frame. `stream` separates the
/// re-noising stream from the sampler's own.
fn frame_noise(seed: u64, stream: u64, t: usize, frame: usize, dim: (usize, usize, usize)) -> Array3<f64> {
    let key = splitmix64(shuffle_key(seed ^ stream.rotate_left(32), t, frame));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Array3::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
}

const RENOISE_STREAM: u64 = 0x5EED_0001;
const SAMPLER_STREAM: u64 = 0x5EED_0002;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOptions {
    pub layout: GridLayout,
    /// Off for global edits.
    pub blending: bool,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    pub sampler: DdimSampler,
    /// Per-timestep grid snapshots are written here when set.
    pub debug_dir: Option<PathBuf>,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        DenoiseOptions {
            layout: GridLayout::default(),
            blending: true,
            seed: 0,
            noise_mode: NoiseMode::PerStep,
            sampler: DdimSampler::default(),
            debug_dir: None,
        }
    }
}

impl DenoiseOptions {
    fn renoise(&self, t: usize, frame: usize, dim: (usize, usize, usize)) -> Array3<f64> {
        let t = match self.noise_mode {
            NoiseMode::PerStep => t,
            NoiseMode::Fixed => 0,
        };
        frame_noise(self.seed, RENOISE_STREAM, t, frame, dim)
    }
}

/// Text and image prompts shared by every group.
#[derive(Debug, Clone, PartialEq)]
pub struct EditConditioning {
    pub prompt: String,
    pub strength: f64,
    pub image_prompt: Option<ImagePromptHandle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub frames: Vec<RgbImage>,
    pub latents: Vec<LatentTensor>,
    pub mask_reads: usize,
}

impl GridState {
    /// Starts from the originals re-noised to `schedule.steps()`.
    pub fn new(
        originals: Vec<LatentTensor>,
        masks: MaskGrid,
        depth: Vec<Array2<f64>>,
        schedule: &NoiseSchedule,
        opts: &DenoiseOptions,
    ) -> Result<Self, GridError> {
        let Some(first) = originals.first() else {
            return Err(GridError::InvalidArgument("no frames".into()));
        };
        let dim = first.data.dim();
        let scale_factor = first.scale_factor;
        if let Some(bad) = originals.iter().find(|l| l.data.dim() != dim) {
            return Err(GridError::ShapeMismatch(format!(
                "latent {:?} differs from {:?}",
                bad.data.dim(),
                dim
            )));
        }
        if depth.len() != originals.len() || depth.iter().any(|d| d.dim() != (dim.1, dim.2)) {
            return Err(GridError::ShapeMismatch(
                "depth maps must match the latent grid, one per frame".into(),
            ));
        }
        if !masks.is_empty()
            && (masks.len() != originals.len()
                || (0..masks.len()).any(|i| masks.dim(i) != (dim.1, dim.2)))
        {
            return Err(GridError::ShapeMismatch(
                "masks must match the latent grid, one per frame".into(),
            ));
        }
        let t = schedule.steps();
        let originals: Vec<_> = originals.into_iter().map(|l| l.data).collect();
        let latents = originals
            .iter()
            .enumerate()
            .map(|(i, x)| noised_original(x, t, schedule, &opts.renoise(t, i, dim)))
            .collect::<Result<_, _>>()?;
        Ok(GridState {
            latents,
            originals,
            masks,
            depth,
            timestep: t,
            scale_factor,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.latents.len()
    }
}

fn views<'a>(arrays: &'a [Array3<f64>], members: &[usize]) -> Vec<ArrayView3<'a, f64>> {
    members.iter().map(|&i| arrays[i].view()).collect()
}

/// Tiles per-member arrays that are already in member order.
fn tile(items: &[Array3<f64>], members: &[usize], layout: GridLayout) -> Result<Array3<f64>, GridError> {
    let v: Vec<_> = items.iter().map(|a| a.view()).collect();
    Ok(assemble(&v, members, layout)?.0)
}

/// Runs timesteps `T..=1` over regrouped grids and decodes the result.
///
/// `progress` receives `(completed, total)` after each timestep.
pub fn denoise_grid(
    mut state: GridState,
    cond: &EditConditioning,
    backend: &dyn DiffusionBackend,
    schedule: &NoiseSchedule,
    opts: &DenoiseOptions,
    progress: &mut dyn FnMut(usize, usize),
) -> Result<DenoiseOutput, GridError> {
    if opts.blending && state.masks.is_empty() {
        return Err(GridError::InvalidArgument("blending requires masks".into()));
    }
    if state.timestep != schedule.steps() {
        return Err(GridError::InvalidArgument(format!(
            "state at t = {} but schedule has {} steps",
            state.timestep,
            schedule.steps()
        )));
    }
    let n = state.frame_count();
    let total = schedule.steps();
    let dim = state.latents[0].dim();

    for t in (1..=total).rev() {
        let assignment = regroup(n, opts.layout, t, opts.seed);
        for (g, members) in assignment.groups.iter().enumerate() {
            let (z_grid, map) = assemble(&views(&state.latents, members), members, opts.layout)?;
            let depth_items: Vec<Array3<f64>> = members
                .iter()
                .map(|&i| state.depth[i].clone().insert_axis(Axis(0)))
                .collect();
            let d_grid = tile(&depth_items, members, opts.layout)?;
            let condition = DenoiseCondition {
                depth_map: d_grid.index_axis(Axis(0), 0).to_owned(),
                conditioning_strength: cond.strength,
                text_prompt: cond.prompt.clone(),
                image_prompt: cond.image_prompt.clone(),
            };
            let eps = backend.predict_noise(
                &LatentTensor::new(z_grid.clone(), state.scale_factor),
                &condition,
                t,
                schedule,
            )?;
            if eps.data.dim() != z_grid.dim() {
                return Err(GridError::ShapeMismatch(format!(
                    "backend returned {:?} for a {:?} grid",
                    eps.data.dim(),
                    z_grid.dim()
                )));
            }
            let sampler_noise = if opts.sampler.is_stochastic() {
                let noise: Vec<_> = members
                    .iter()
                    .map(|&i| frame_noise(opts.seed, SAMPLER_STREAM, t, i, dim))
                    .collect();
                Some(tile(&noise, members, opts.layout)?)
            } else {
                None
            };
            let mut z_prev = opts
                .sampler
                .step(&z_grid, &eps.data, t, schedule, sampler_noise.as_ref());

            if opts.blending {
                let (orig_grid, _) = assemble(&views(&state.originals, members), members, opts.layout)?;
                let noise: Vec<_> = members.iter().map(|&i| opts.renoise(t - 1, i, dim)).collect();
                let noise_grid = tile(&noise, members, opts.layout)?;
                let z_orig = noised_original(&orig_grid, t - 1, schedule, &noise_grid)?;
                let mask_items: Vec<Array3<f64>> = members
                    .iter()
                    .map(|&i| {
                        let m = state.masks.get(i);
                        Array3::from_shape_fn(dim, |(_, y, x)| m[[y, x]])
                    })
                    .collect();
                let m_grid = tile(&mask_items, members, opts.layout)?;
                z_prev = blend(&z_prev, &z_orig, &m_grid)?;
            }

            if let Some(dir) = &opts.debug_dir {
                dump_grid(backend, dir, t, g, &z_prev, state.scale_factor)?;
            }
            for (cell, latent) in map.cells.iter().zip(split(&z_prev, &map)?) {
                state.latents[cell.frame_index] = latent;
            }
        }
        state.timestep = t - 1;
        progress(total - t + 1, total);
    }

    let latents: Vec<LatentTensor> = state
        .latents
        .into_iter()
        .map(|z| LatentTensor::new(z, state.scale_factor))
        .collect();
    let frames = latents
        .iter()
        .map(|z| backend.decode(z))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DenoiseOutput {
        frames,
        latents,
        mask_reads: state.masks.reads(),
    })
}

fn dump_grid(
    backend: &dyn DiffusionBackend,
    dir: &std::path::Path,
    t: usize,
    group: usize,
    grid: &Array3<f64>,
    scale_factor: usize,
) -> Result<(), GridError> {
    let image = backend.decode(&LatentTensor::new(grid.clone(), scale_factor))?;
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(format!("t{t:04}_g{group:02}.png")), imaging::encode_png(&image)))
        .map_err(|e| GridError::InvalidArgument(format!("debug dump to {}: {e}", dir.display())))
}
