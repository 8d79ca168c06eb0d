//! Patch-size curriculum plans and positive-biased patch sampling over
//! labelled volumes.
//!
//! Training runs in stages of growing patch size: small positive patches
//! first, the whole image last. The plan generator emits the stage table as
//! a configuration artifact; running the optimization itself is out of
//! scope here.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    PositiveBiased,
    WholeImage,
}

impl Sampling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sampling::PositiveBiased => "positive_biased",
            Sampling::WholeImage => "whole_image",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumStage {
    pub patch_size: (usize, usize, usize),
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    pub stages: Vec<CurriculumStage>,
    /// Set when a stage was clamped to the whole image because the volume
    /// is smaller than the stage's nominal patch.
    pub clamped: bool,
    /// Whether optimizer state resets between stages. Configurable; the
    /// default starts each stage fresh.
    pub reset_optimizer: bool,
}

impl CurriculumPlan {
    /// Patch sizes never shrink from one stage to the next.
    pub fn is_monotonic(&self) -> bool {
        self.stages.windows(2).all(|w| {
            let a = w[0].patch_size;
            let b = w[1].patch_size;
            a.0 <= b.0 && a.1 <= b.1 && a.2 <= b.2
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CurriculumError {
    #[error("sampler needs a 3-d volume, got rank {rank}")]
    NotVolumetric { rank: usize },
    #[error("labels shape differs from volume shape")]
    LabelShapeMismatch,
    #[error("patch {patch:?} does not fit inside volume {volume:?}")]
    PatchTooLarge { patch: (usize, usize, usize), volume: (usize, usize, usize) },
    #[error("need at least one sample")]
    NoSamples,
}

/// The three-stage default: 64-cubed patches (batch 16, 4800 epochs), then
/// 128-cubed (batch 4, 1200 epochs), then the whole image (batch 1, 300
/// epochs), all at learning rate 1e-3 under rmsprop. Stages whose nominal
/// patch does not fit are clamped to the whole image and merged.
pub fn default_plan(whole_image: (usize, usize, usize)) -> CurriculumPlan {
    const LR: f64 = 1e-3;
    type StageTemplate = ((usize, usize, usize), usize, usize, Sampling);
    let nominal: [StageTemplate; 3] = [
        ((64, 64, 64), 16, 4800, Sampling::PositiveBiased),
        ((128, 128, 128), 4, 1200, Sampling::PositiveBiased),
        (whole_image, 1, 300, Sampling::WholeImage),
    ];

    let mut clamped = false;
    let mut stages: Vec<CurriculumStage> = Vec::new();
    for (patch, batch, epochs, sampling) in nominal {
        let fitted = (
            patch.0.min(whole_image.0),
            patch.1.min(whole_image.1),
            patch.2.min(whole_image.2),
        );
        if fitted != patch {
            clamped = true;
        }
        let stage = CurriculumStage {
            patch_size: fitted,
            batch_size: batch,
            epochs,
            learning_rate: LR,
            optimizer: "rmsprop".into(),
            sampling,
        };
        // A clamped stage that reaches the same patch as the next one is
        // subsumed by it: keep the later (larger-input) schedule.
        if let Some(prev) = stages.last() {
            if prev.patch_size == stage.patch_size {
                stages.pop();
            }
        }
        stages.push(stage);
    }
    CurriculumPlan { stages, clamped, reset_optimizer: true }
}

/// A sampled patch with its labels, origin, and whether it contains any
/// foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch: Tensor,
    pub labels: Tensor,
    pub origin: (usize, usize, usize),
    pub positive: bool,
}

struct ForegroundIndex {
    dims: (usize, usize, usize),
    // inclusive-exclusive 3-d prefix sums of foreground counts
    prefix: Vec<u64>,
}

impl ForegroundIndex {
    fn new(labels: &Tensor) -> ForegroundIndex {
        let (nx, ny, nz) = (labels.shape[0], labels.shape[1], labels.shape[2]);
        let idx = |x: usize, y: usize, z: usize| (x * (ny + 1) + y) * (nz + 1) + z;
        let mut prefix = vec![0u64; (nx + 1) * (ny + 1) * (nz + 1)];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let fg = (labels.data[(x * ny + y) * nz + z] > 0.0) as u64;
                    prefix[idx(x + 1, y + 1, z + 1)] = fg + prefix[idx(x, y + 1, z + 1)]
                        + prefix[idx(x + 1, y, z + 1)]
                        + prefix[idx(x + 1, y + 1, z)]
                        - prefix[idx(x, y, z + 1)]
                        - prefix[idx(x, y + 1, z)]
                        - prefix[idx(x + 1, y, z)]
                        + prefix[idx(x, y, z)];
                }
            }
        }
        ForegroundIndex { dims: (nx, ny, nz), prefix }
    }

    fn window_count(&self, origin: (usize, usize, usize), size: (usize, usize, usize)) -> u64 {
        let (ny, nz) = (self.dims.1, self.dims.2);
        let idx = |x: usize, y: usize, z: usize| (x * (ny + 1) + y) * (nz + 1) + z;
        let (x0, y0, z0) = origin;
        let (x1, y1, z1) = (x0 + size.0, y0 + size.1, z0 + size.2);
        self.prefix[idx(x1, y1, z1)]
            .wrapping_sub(self.prefix[idx(x0, y1, z1)])
            .wrapping_sub(self.prefix[idx(x1, y0, z1)])
            .wrapping_sub(self.prefix[idx(x1, y1, z0)])
            .wrapping_add(self.prefix[idx(x0, y0, z1)])
            .wrapping_add(self.prefix[idx(x0, y1, z0)])
            .wrapping_add(self.prefix[idx(x1, y0, z0)])
            .wrapping_sub(self.prefix[idx(x0, y0, z0)])
    }
}

fn check_sampler_inputs(
    volume: &Tensor,
    labels: &Tensor,
    size: (usize, usize, usize),
) -> Result<(), CurriculumError> {
    if volume.shape.len() != 3 {
        return Err(CurriculumError::NotVolumetric { rank: volume.shape.len() });
    }
    if labels.shape != volume.shape {
        return Err(CurriculumError::LabelShapeMismatch);
    }
    let vol = (volume.shape[0], volume.shape[1], volume.shape[2]);
    if size.0 == 0 || size.1 == 0 || size.2 == 0 || size.0 > vol.0 || size.1 > vol.1 || size.2 > vol.2 {
        return Err(CurriculumError::PatchTooLarge { patch: size, volume: vol });
    }
    Ok(())
}

/// Every origin whose patch would contain at least one foreground voxel,
/// in lexicographic order. Empty iff the labels are all background.
pub fn qualifying_origins(
    labels: &Tensor,
    size: (usize, usize, usize),
) -> Vec<(usize, usize, usize)> {
    let index = ForegroundIndex::new(labels);
    let (nx, ny, nz) = index.dims;
    let mut out = Vec::new();
    for x in 0..=nx - size.0 {
        for y in 0..=ny - size.1 {
            for z in 0..=nz - size.2 {
                if index.window_count((x, y, z), size) > 0 {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

fn extract(volume: &Tensor, origin: (usize, usize, usize), size: (usize, usize, usize)) -> Tensor {
    let (ny, nz) = (volume.shape[1], volume.shape[2]);
    let mut data = Vec::with_capacity(size.0 * size.1 * size.2);
    for x in origin.0..origin.0 + size.0 {
        for y in origin.1..origin.1 + size.1 {
            let row = (x * ny + y) * nz + origin.2;
            data.extend_from_slice(&volume.data[row..row + size.2]);
        }
    }
    Tensor::from_vec(vec![size.0, size.1, size.2], data)
}

/// Draws a patch guaranteed to intersect foreground when any exists; with
/// all-background labels the origin is uniform over the volume and the
/// sample is flagged negative. Deterministic in the seed.
pub fn sample_positive_patch(
    volume: &Tensor,
    labels: &Tensor,
    size: (usize, usize, usize),
    seed: u64,
) -> Result<PatchSample, CurriculumError> {
    check_sampler_inputs(volume, labels, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(volume, labels, size, &mut rng)
}

fn sample_with_rng(
    volume: &Tensor,
    labels: &Tensor,
    size: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<PatchSample, CurriculumError> {
    let qualifying = qualifying_origins(labels, size);
    let (origin, positive) = if qualifying.is_empty() {
        let (nx, ny, nz) = (labels.shape[0], labels.shape[1], labels.shape[2]);
        let o = (
            rng.random_range(0..=nx - size.0),
            rng.random_range(0..=ny - size.1),
            rng.random_range(0..=nz - size.2),
        );
        (o, false)
    } else {
        (qualifying[rng.random_range(0..qualifying.len())], true)
    };
    Ok(PatchSample {
        patch: extract(volume, origin, size),
        labels: extract(labels, origin, size),
        origin,
        positive,
    })
}

/// Monte-Carlo mean foreground fraction of positive-biased patches at the
/// given size. Quantifies how shrinking patches trade imbalance for
/// context.
pub fn imbalance_ratio(
    labels: &Tensor,
    patch_size: (usize, usize, usize),
    n_samples: usize,
    seed: u64,
) -> Result<f64, CurriculumError> {
    if n_samples == 0 {
        return Err(CurriculumError::NoSamples);
    }
    check_sampler_inputs(labels, labels, patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = (patch_size.0 * patch_size.1 * patch_size.2) as f64;
    let mut total = 0.0;
    for _ in 0..n_samples {
        let sample = sample_with_rng(labels, labels, patch_size, &mut rng)?;
        let fg = sample.labels.data.iter().filter(|&&v| v > 0.0).count() as f64;
        total += fg / voxels;
    }
    Ok(total / n_samples as f64)
}

/// Exact expected foreground fraction under the sampler's distribution
/// (uniform over qualifying origins). Used as the exhaustive oracle for
/// the Monte-Carlo estimate.
pub fn exact_expected_fraction(
    labels: &Tensor,
    patch_size: (usize, usize, usize),
) -> Result<f64, CurriculumError> {
    check_sampler_inputs(labels, labels, patch_size)?;
    let index = ForegroundIndex::new(labels);
    let origins = qualifying_origins(labels, patch_size);
    let voxels = (patch_size.0 * patch_size.1 * patch_size.2) as f64;
    if origins.is_empty() {
        return Ok(0.0);
    }
    let total: f64 =
        origins.iter().map(|&o| index.window_count(o, patch_size) as f64 / voxels).sum();
    Ok(total / origins.len() as f64)
}
