//! Latent-diffusion backend abstraction.
//!
//! A backend provides the encoder/decoder pair, the structure-conditioned
//! noise predictor, template sampling and image-prompt personalization.
//! [`mock::MockBackend`] implements all of it analytically so whole pipelines
//! run deterministically without model weights.

pub mod mock;

use std::path::PathBuf;

use image::RgbImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use mock::MockBackend;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("unsupported by backend: {0}")]
    UnsupportedByBackend(String),
    #[error("personalization weights not found: {0}")]
    WeightsNotFound(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Latent array of shape `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Array3<f64>,
    /// Pixels per latent cell along each axis.
    pub scale_factor: usize,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>, scale_factor: usize) -> Self {
        LatentTensor { data, scale_factor }
    }

    pub fn zeros(channels: usize, height: usize, width: usize, scale_factor: usize) -> Self {
        LatentTensor::new(Array3::zeros((channels, height, width)), scale_factor)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Cumulative signal levels `alpha[t]` for `t = 0..=steps`.
///
/// `alpha[0]` is exactly 1 so the last denoising step lands on clean latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumulative: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_MIN_ALPHA: f64 = 0.01;

impl NoiseSchedule {
    /// Signal level falls linearly from 1 at `t = 0` to `min_alpha` at
    /// `t = steps`.
    pub fn linear(steps: usize, min_alpha: f64) -> Result<Self, BackendError> {
        if !(min_alpha > 0.0 && min_alpha <= 1.0) {
            return Err(BackendError::InvalidArgument(format!(
                "min_alpha must lie in (0, 1], got {min_alpha}"
            )));
        }
        let alphas = (0..=steps)
            .map(|t| {
                if t == 0 {
                    1.0
                } else {
                    1.0 - (1.0 - min_alpha) * t as f64 / steps as f64
                }
            })
            .collect();
        Ok(NoiseSchedule {
            alphas_cumulative: alphas,
        })
    }

    /// Accepts an explicit table; entry 0 must be 1 and values must be
    /// non-increasing within (0, 1].
    pub fn from_alphas(alphas_cumulative: Vec<f64>) -> Result<Self, BackendError> {
        if alphas_cumulative.first() != Some(&1.0) {
            return Err(BackendError::InvalidArgument(
                "alpha at t = 0 must be exactly 1".into(),
            ));
        }
        for w in alphas_cumulative.windows(2) {
            if !(w[1] > 0.0 && w[1] <= w[0]) {
                return Err(BackendError::InvalidArgument(
                    "alphas must be non-increasing within (0, 1]".into(),
                ));
            }
        }
        Ok(NoiseSchedule { alphas_cumulative })
    }

    pub fn steps(&self) -> usize {
        self.alphas_cumulative.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas_cumulative[t]
    }

    pub fn signal_coeff(&self, t: usize) -> f64 {
        self.alpha(t).sqrt()
    }

    pub fn noise_coeff(&self, t: usize) -> f64 {
        (1.0 - self.alpha(t)).sqrt()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_MIN_ALPHA).expect("default schedule is valid")
    }
}

/// DDIM update. `eta = 0` is fully deterministic; `eta > 0` injects the
/// supplied noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdimSampler {
    pub eta: f64,
}

impl Default for DdimSampler {
    fn default() -> Self {
        DdimSampler { eta: 0.0 }
    }
}

impl DdimSampler {
    pub fn is_stochastic(&self) -> bool {
        self.eta > 0.0
    }

    /// Maps `z_t` and the predicted noise to `z_{t-1}`. `t` must be at least 1.
    pub fn step(
        &self,
        z_t: &Array3<f64>,
        eps: &Array3<f64>,
        t: usize,
        schedule: &NoiseSchedule,
        noise: Option<&Array3<f64>>,
    ) -> Array3<f64> {
        let alpha_t = schedule.alpha(t);
        let alpha_prev = schedule.alpha(t - 1);
        let sigma = if self.is_stochastic() {
            self.eta
                * ((1.0 - alpha_prev) / (1.0 - alpha_t)).sqrt()
                * (1.0 - alpha_t / alpha_prev).sqrt()
        } else {
            0.0
        };
        let dir_coeff = (1.0 - alpha_prev - sigma * sigma).max(0.0).sqrt();
        let (sa_t, sn_t) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
        let sa_prev = alpha_prev.sqrt();

        let mut out = Array3::zeros(z_t.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(z_t)
            .and(eps)
            .for_each(|o, &z, &e| {
                let x0 = ((z - sn_t * e) / sa_t).clamp(-1.0, 1.0);
                *o = sa_prev * x0 + dir_coeff * e;
            });
        if sigma > 0.0 {
            if let Some(noise) = noise {
                out.scaled_add(sigma, noise);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    LatentDiffusionV1,
    LatentDiffusionXl,
    FlowTransformer,
}

impl std::str::FromStr for BackendKind {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "latent-diffusion-v1" => Ok(BackendKind::LatentDiffusionV1),
            "latent-diffusion-xl" => Ok(BackendKind::LatentDiffusionXl),
            "flow-transformer" => Ok(BackendKind::FlowTransformer),
            other => Err(BackendError::InvalidArgument(format!("unknown backend kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub checkpoint_ref: Option<String>,
    pub supports_image_prompt: bool,
    pub supports_personalization_weights: bool,
}

impl BackendDescriptor {
    pub fn mock() -> Self {
        BackendDescriptor {
            kind: BackendKind::Mock,
            checkpoint_ref: None,
            supports_image_prompt: true,
            supports_personalization_weights: true,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match (self.kind, &self.checkpoint_ref) {
            (BackendKind::Mock, Some(_)) => Err(BackendError::InvalidArgument(
                "the mock backend takes no checkpoint".into(),
            )),
            (BackendKind::Mock, None) => Ok(()),
            (_, None) => Err(BackendError::InvalidArgument(format!(
                "{:?} requires a checkpoint reference",
                self.kind
            ))),
            _ => Ok(()),
        }
    }
}

/// Reference embedding produced by [`DiffusionBackend::load_personalization`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePromptHandle {
    /// Content hash of the reference image or weights file.
    pub source_hash: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum PersonalizationSource {
    ReferenceImage(RgbImage),
    ReferenceImagePath(PathBuf),
    Weights(PathBuf),
}

/// Everything the noise predictor sees besides the noisy latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseCondition {
    /// Depth at latent resolution, values in [0, 1].
    pub depth_map: Array2<f64>,
    /// Multiplier on the structure branch.
    pub conditioning_strength: f64,
    pub text_prompt: String,
    pub image_prompt: Option<ImagePromptHandle>,
}

pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn scale_factor(&self) -> usize;

    /// Width and height of frames produced by [`Self::sample_template`].
    fn native_resolution(&self) -> (u32, u32);

    fn encode(&self, image: &RgbImage) -> Result<LatentTensor, BackendError>;

    fn decode(&self, latent: &LatentTensor) -> Result<RgbImage, BackendError>;

    fn predict_noise(
        &self,
        latent: &LatentTensor,
        cond: &DenoiseCondition,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<LatentTensor, BackendError>;

    fn sample_template(&self, prompt: &str, seed: u64) -> Result<RgbImage, BackendError>;

    fn load_personalization(
        &self,
        source: &PersonalizationSource,
    ) -> Result<ImagePromptHandle, BackendError>;

    /// Cross-attention response for `concept` at latent resolution.
    fn cross_attention(&self, _image: &RgbImage, concept: &str) -> Result<Array2<f64>, BackendError> {
        Err(BackendError::UnsupportedByBackend(format!(
            "cross-attention maps for {concept:?}"
        )))
    }
}

/// Instantiates the backend named by `descriptor`. Only the mock ships in
/// this crate; real model adapters implement [`DiffusionBackend`] elsewhere.
pub fn open_backend(
    descriptor: &BackendDescriptor,
) -> Result<std::sync::Arc<dyn DiffusionBackend>, BackendError> {
    descriptor.validate()?;
    match descriptor.kind {
        BackendKind::Mock => Ok(std::sync::Arc::new(MockBackend::default())),
        other => Err(BackendError::Unavailable(format!(
            "no adapter for {other:?} is linked into this build"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_coefficients_are_unit_norm() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.alpha(0), 1.0);
        for t in 0..=s.steps() {
            let a = s.alpha(t);
            assert!(a > 0.0 && a <= 1.0);
            if t > 0 {
                assert!(a <= s.alpha(t - 1));
            }
            let sum = s.signal_coeff(t).powi(2) + s.noise_coeff(t).powi(2);
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_rejects_bad_tables() {
        assert!(NoiseSchedule::from_alphas(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.7]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.0]).is_err());
        assert!(NoiseSchedule::linear(10, 0.0).is_err());
        assert_eq!(NoiseSchedule::linear(0, 0.1).unwrap().steps(), 0);
    }

    #[test]
    fn ddim_recovers_clean_latent_with_exact_noise() {
        let s = NoiseSchedule::linear(10, 0.05).unwrap();
        let x0 = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| 0.1 * (i as f64) - 0.2 * (j as f64));
        let eps = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i + 2 * j) as f64 - 1.5);
        let t = 7;
        let z_t = &x0 * s.signal_coeff(t) + &eps * s.noise_coeff(t);
        let z_prev = DdimSampler::default().step(&z_t, &eps, t, &s, None);
        let expected = &x0 * s.signal_coeff(t - 1) + &eps * s.noise_coeff(t - 1);
        for (a, b) in z_prev.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let z0 = DdimSampler::default().step(
            &(&x0 * s.signal_coeff(1) + &eps * s.noise_coeff(1)),
            &eps,
            1,
            &s,
            None,
        );
        for (a, b) in z0.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stochastic_step_uses_noise() {
        let s = NoiseSchedule::linear(10, 0.05).unwrap();
        let z = Array3::from_elem((1, 2, 2), 0.3);
        let eps = Array3::from_elem((1, 2, 2), 0.1);
        let noise = Array3::from_elem((1, 2, 2), 1.0);
        let sampler = DdimSampler { eta: 1.0 };
        let a = sampler.step(&z, &eps, 5, &s, None);
        let b = sampler.step(&z, &eps, 5, &s, Some(&noise));
        assert_ne!(a, b);
    }

    #[test]
    fn descriptor_rules() {
        assert!(BackendDescriptor::mock().validate().is_ok());
        let mut d = BackendDescriptor::mock();
        d.checkpoint_ref = Some("x".into());
        assert!(d.validate().is_err());
        let sd = BackendDescriptor {
            kind: BackendKind::LatentDiffusionV1,
            checkpoint_ref: Some("sd15".into()),
            supports_image_prompt: true,
            supports_personalization_weights: true,
        };
        assert!(matches!(open_backend(&sd), Err(BackendError::Unavailable(_))));
    }
}
