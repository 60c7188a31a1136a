//! Analytic stand-in for a latent-diffusion stack.
//!
//! * `encode`: 8x8 average pooling of RGB, rounded to the 8-bit lattice and
//!   mapped to `[-1, 1]` (`q / 127.5 - 1`).
//! * `decode`: nearest-neighbour upsampling of the inverse map, clamped.
//! * `predict_noise`: the noise that would carry the current latent to a
//!   prompt-coloured, depth-shaded target, plus hash-seeded jitter. It is a
//!   pure function of its inputs.
//! * `sample_template`: a block-aligned test card with one subject rectangle
//!   painted in the magenta family (`R = B = 255`), which the oracle
//!   estimator in [`crate::perception`] recognises.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{
    BackendDescriptor, BackendError, DenoiseCondition, DiffusionBackend, ImagePromptHandle,
    LatentTensor, NoiseSchedule, PersonalizationSource,
};
use crate::imaging;

pub const MOCK_SCALE_FACTOR: usize = 8;
pub const MOCK_CHANNELS: usize = 3;
const JITTER: f64 = 0.05;

/// Subject pixels painted by [`MockBackend::sample_template`].
pub fn is_subject_pixel(p: &Rgb<u8>) -> bool {
    p[0] == 255 && p[2] == 255
}

/// Pixel byte to latent value.
pub fn pixel_to_latent(q: f64) -> f64 {
    q / 127.5 - 1.0
}

pub fn latent_to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    descriptor: BackendDescriptor,
    resolution: (u32, u32),
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::with_resolution(512, 512)
    }
}

fn seed_from(h: Sha256) -> [u8; 32] {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&h.finalize());
    seed
}

/// Per-channel colour in `[-0.9, 0.9]` derived from the prompt text.
fn prompt_color(prompt: &str) -> [f64; MOCK_CHANNELS] {
    let d = Sha256::digest(prompt.as_bytes());
    std::array::from_fn(|c| d[c] as f64 / 255.0 * 1.8 - 0.9)
}

impl MockBackend {
    /// `width` and `height` must be positive multiples of 8.
    pub fn with_resolution(width: u32, height: u32) -> Self {
        assert!(
            width > 0
                && height > 0
                && (width as usize).is_multiple_of(MOCK_SCALE_FACTOR)
                && (height as usize).is_multiple_of(MOCK_SCALE_FACTOR),
            "mock resolution must be a positive multiple of {MOCK_SCALE_FACTOR}"
        );
        MockBackend {
            descriptor: BackendDescriptor::mock(),
            resolution: (width, height),
        }
    }

    /// Bounding box `(x0, y0, x1, y1)` (inclusive) of subject pixels.
    pub fn subject_bbox(image: &RgbImage) -> Option<(u32, u32, u32, u32)> {
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for (x, y, p) in image.enumerate_pixels() {
            if is_subject_pixel(p) {
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        bbox
    }

    /// Target the mock denoiser steers towards.
    pub fn target_latent(cond: &DenoiseCondition, channels: usize) -> Array3<f64> {
        let mut color = prompt_color(&cond.text_prompt);
        if let Some(handle) = &cond.image_prompt {
            if !handle.embedding.is_empty() {
                for (c, v) in color.iter_mut().enumerate() {
                    *v = 0.5 * *v + 0.5 * handle.embedding[c % handle.embedding.len()];
                }
            }
        }
        let s = cond.conditioning_strength;
        let (h, w) = cond.depth_map.dim();
        Array3::from_shape_fn((channels, h, w), |(c, i, j)| {
            (1.0 - 0.5 * s) * color[c % MOCK_CHANNELS] + 0.5 * s * (2.0 * cond.depth_map[[i, j]] - 1.0)
        })
    }

    fn check_dims(&self, image: &RgbImage) -> Result<(), BackendError> {
        let (w, h) = image.dimensions();
        if w == 0
            || h == 0
            || !(w as usize).is_multiple_of(MOCK_SCALE_FACTOR)
            || !(h as usize).is_multiple_of(MOCK_SCALE_FACTOR)
        {
            return Err(BackendError::Shape(format!(
                "image {w}x{h} is not a positive multiple of {MOCK_SCALE_FACTOR}"
            )));
        }
        Ok(())
    }
}

impl DiffusionBackend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn scale_factor(&self) -> usize {
        MOCK_SCALE_FACTOR
    }

    fn native_resolution(&self) -> (u32, u32) {
        self.resolution
    }

    fn encode(&self, image: &RgbImage) -> Result<LatentTensor, BackendError> {
        self.check_dims(image)?;
        let s = MOCK_SCALE_FACTOR;
        let (w, h) = (image.width() as usize / s, image.height() as usize / s);
        let data = Array3::from_shape_fn((MOCK_CHANNELS, h, w), |(c, i, j)| {
            let mut sum = 0.0;
            for y in i * s..(i + 1) * s {
                for x in j * s..(j + 1) * s {
                    sum += image.get_pixel(x as u32, y as u32)[c] as f64;
                }
            }
            pixel_to_latent((sum / (s * s) as f64).round())
        });
        Ok(LatentTensor::new(data, s))
    }

    fn decode(&self, latent: &LatentTensor) -> Result<RgbImage, BackendError> {
        if latent.channels() != MOCK_CHANNELS || latent.height() == 0 || latent.width() == 0 {
            return Err(BackendError::Shape(format!(
                "mock decodes ({MOCK_CHANNELS}, h, w) latents, got {:?}",
                latent.data.dim()
            )));
        }
        if !latent.is_finite() {
            return Err(BackendError::InvalidArgument("latent has non-finite values".into()));
        }
        let s = MOCK_SCALE_FACTOR;
        let (w, h) = (latent.width() * s, latent.height() * s);
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (i, j) = (y as usize / s, x as usize / s);
            Rgb(std::array::from_fn(|c| latent_to_pixel(latent.data[[c, i, j]])))
        }))
    }

    fn predict_noise(
        &self,
        latent: &LatentTensor,
        cond: &DenoiseCondition,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<LatentTensor, BackendError> {
        if t == 0 || t > schedule.steps() {
            return Err(BackendError::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                schedule.steps()
            )));
        }
        let (c, h, w) = latent.data.dim();
        if cond.depth_map.dim() != (h, w) {
            return Err(BackendError::Shape(format!(
                "depth {:?} does not match latent {:?}",
                cond.depth_map.dim(),
                (h, w)
            )));
        }

        let mut hasher = Sha256::new();
        hasher.update(b"mock-eps");
        for d in [c, h, w, t] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in latent.data.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update((cond.text_prompt.len() as u64).to_le_bytes());
        hasher.update(cond.text_prompt.as_bytes());
        hasher.update(cond.conditioning_strength.to_le_bytes());
        for v in cond.depth_map.iter() {
            hasher.update(v.to_le_bytes());
        }
        match &cond.image_prompt {
            Some(handle) => {
                hasher.update(b"ip");
                for v in &handle.embedding {
                    hasher.update(v.to_le_bytes());
                }
            }
            None => hasher.update(b"no-ip"),
        }
        let mut rng = ChaCha8Rng::from_seed(seed_from(hasher));

        let target = Self::target_latent(cond, c);
        let (sa, sn) = (schedule.signal_coeff(t), schedule.noise_coeff(t));
        let mut eps = Array3::zeros((c, h, w));
        ndarray::Zip::from(&mut eps)
            .and(&latent.data)
            .and(&target)
            .for_each(|e, &z, &x0| {
                let jitter: f64 = rng.sample(StandardNormal);
                *e = (z - sa * x0) / sn + JITTER * jitter;
            });
        Ok(LatentTensor::new(eps, latent.scale_factor))
    }

    fn sample_template(&self, prompt: &str, seed: u64) -> Result<RgbImage, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::InvalidArgument("empty prompt".into()));
        }
        let mut hasher = Sha256::new();
        hasher.update(b"mock-template");
        hasher.update(prompt.as_bytes());
        hasher.update(seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(seed_from(hasher));

        let s = MOCK_SCALE_FACTOR as u32;
        let (w, h) = self.resolution;
        let (bw, bh) = (w / s, h / s);
        let base: [i32; 3] = std::array::from_fn(|_| rng.random_range(70..=170));
        let mut blocks = vec![[0u8; 3]; (bw * bh) as usize];
        for by in 0..bh {
            let shade = (by as i32 * 50) / bh as i32 - 25;
            for bx in 0..bw {
                let jitter = rng.random_range(-8..=8);
                blocks[(by * bw + bx) as usize] =
                    std::array::from_fn(|c| (base[c] + shade + jitter).clamp(40, 200) as u8);
            }
        }

        let rw = rng.random_range((bw / 4).max(1)..=(bw / 2).max(1));
        let rh = rng.random_range((bh / 4).max(1)..=(bh / 2).max(1));
        let rx = rng.random_range(0..=bw - rw);
        let ry = rng.random_range(0..=bh - rh);
        let subject = [255u8, rng.random_range(0..=200), 255u8];

        Ok(RgbImage::from_fn(w, h, |x, y| {
            let (bx, by) = (x / s, y / s);
            if (rx..rx + rw).contains(&bx) && (ry..ry + rh).contains(&by) {
                Rgb(subject)
            } else {
                Rgb(blocks[(by * bw + bx) as usize])
            }
        }))
    }

    fn load_personalization(
        &self,
        source: &PersonalizationSource,
    ) -> Result<ImagePromptHandle, BackendError> {
        let from_image = |image: &RgbImage| {
            let n = (image.width() as f64) * (image.height() as f64);
            let mut sums = [0.0f64; 3];
            for p in image.pixels() {
                for (c, s) in sums.iter_mut().enumerate() {
                    *s += p[c] as f64;
                }
            }
            ImagePromptHandle {
                source_hash: imaging::image_hash(image),
                embedding: sums.iter().map(|s| pixel_to_latent(s / n)).collect(),
            }
        };
        match source {
            PersonalizationSource::ReferenceImage(image) => Ok(from_image(image)),
            PersonalizationSource::ReferenceImagePath(path) => {
                if !path.exists() {
                    return Err(BackendError::WeightsNotFound(path.clone()));
                }
                let image = imaging::load_rgb(path)
                    .map_err(|e| BackendError::InvalidArgument(e.to_string()))?;
                Ok(from_image(&image))
            }
            PersonalizationSource::Weights(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|_| BackendError::WeightsNotFound(path.clone()))?;
                let digest = Sha256::digest(&bytes);
                Ok(ImagePromptHandle {
                    source_hash: hex::encode(digest),
                    embedding: digest[..3]
                        .iter()
                        .map(|&b| b as f64 / 255.0 * 1.8 - 0.9)
                        .collect(),
                })
            }
        }
    }

    /// Inverse-distance field around the subject rectangle: 1 inside,
    /// `1 / (1 + d / 2)` at latent-cell distance `d`, zero without a subject.
    fn cross_attention(&self, image: &RgbImage, _concept: &str) -> Result<Array2<f64>, BackendError> {
        self.check_dims(image)?;
        let s = MOCK_SCALE_FACTOR as u32;
        let (h, w) = ((image.height() / s) as usize, (image.width() / s) as usize);
        let Some((x0, y0, x1, y1)) = Self::subject_bbox(image) else {
            return Ok(Array2::zeros((h, w)));
        };
        let (cx0, cy0, cx1, cy1) = (
            (x0 / s) as f64,
            (y0 / s) as f64,
            (x1 / s) as f64,
            (y1 / s) as f64,
        );
        Ok(Array2::from_shape_fn((h, w), |(i, j)| {
            let (i, j) = (i as f64, j as f64);
            let dx = (cx0 - j).max(j - cx1).max(0.0);
            let dy = (cy0 - i).max(i - cy1).max(0.0);
            1.0 / (1.0 + (dx * dx + dy * dy).sqrt() / 2.0)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_cond(h: usize, w: usize, prompt: &str, strength: f64) -> DenoiseCondition {
        DenoiseCondition {
            depth_map: Array2::from_elem((h, w), 0.5),
            conditioning_strength: strength,
            text_prompt: prompt.into(),
            image_prompt: None,
        }
    }

    #[test]
    fn encode_shapes_and_errors() {
        let mock = MockBackend::default();
        let img = RgbImage::new(512, 512);
        let z = mock.encode(&img).unwrap();
        assert_eq!(z.data.dim(), (3, 64, 64));
        assert_eq!(mock.decode(&z).unwrap().dimensions(), (512, 512));
        assert!(matches!(
            mock.encode(&RgbImage::new(20, 16)),
            Err(BackendError::Shape(_))
        ));
    }

    #[test]
    fn decode_of_zero_is_mid_gray() {
        let img = MockBackend::default()
            .decode(&LatentTensor::zeros(3, 2, 2, 8))
            .unwrap();
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn encode_is_rounded_block_mean() {
        // One block whose red channel averages 10.5 -> rounds to 11.
        let img = RgbImage::from_fn(8, 8, |x, _| Rgb([if x < 4 { 10 } else { 11 }, 0, 255]));
        let z = MockBackend::default().encode(&img).unwrap();
        assert_eq!(z.data[[0, 0, 0]], 11.0 / 127.5 - 1.0);
        assert_eq!(z.data[[1, 0, 0]], -1.0);
        assert_eq!(z.data[[2, 0, 0]], 1.0);
    }

    #[test]
    fn template_is_block_aligned_with_one_subject() {
        let mock = MockBackend::with_resolution(128, 96);
        let img = mock.sample_template("a cat", 3).unwrap();
        assert_eq!(img.dimensions(), (128, 96));
        let (x0, y0, x1, y1) = MockBackend::subject_bbox(&img).unwrap();
        assert_eq!((x0 % 8, y0 % 8, (x1 + 1) % 8, (y1 + 1) % 8), (0, 0, 0, 0));
        for (x, y, p) in img.enumerate_pixels() {
            let inside = (x0..=x1).contains(&x) && (y0..=y1).contains(&y);
            assert_eq!(is_subject_pixel(p), inside);
        }
        // Exactly reconstructable through the latent space.
        let back = mock.decode(&mock.encode(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn template_rejects_empty_prompt() {
        assert!(MockBackend::default().sample_template("  ", 1).is_err());
    }

    #[test]
    fn predict_noise_checks_timestep_and_shape() {
        let mock = MockBackend::default();
        let s = NoiseSchedule::linear(10, 0.1).unwrap();
        let z = LatentTensor::zeros(3, 4, 4, 8);
        assert!(mock.predict_noise(&z, &flat_cond(4, 4, "p", 0.4), 0, &s).is_err());
        assert!(mock.predict_noise(&z, &flat_cond(4, 4, "p", 0.4), 11, &s).is_err());
        assert!(mock.predict_noise(&z, &flat_cond(3, 4, "p", 0.4), 5, &s).is_err());
        assert!(mock.predict_noise(&z, &flat_cond(4, 4, "p", 0.4), 10, &s).is_ok());
    }

    #[test]
    fn cross_attention_is_one_on_subject() {
        let mock = MockBackend::with_resolution(64, 64);
        let img = mock.sample_template("x", 9).unwrap();
        let att = mock.cross_attention(&img, "x").unwrap();
        let (x0, y0, x1, y1) = MockBackend::subject_bbox(&img).unwrap();
        for i in (y0 / 8)..=(y1 / 8) {
            for j in (x0 / 8)..=(x1 / 8) {
                assert_eq!(att[[i as usize, j as usize]], 1.0);
            }
        }
        let blank = RgbImage::from_pixel(64, 64, Rgb([10, 10, 10]));
        assert!(mock.cross_attention(&blank, "x").unwrap().iter().all(|&v| v == 0.0));
    }
}
