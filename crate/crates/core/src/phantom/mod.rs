//! Synthetic 2D abdomen phantoms split into single-organ training sets.
//!
//! Each scene holds `K` disjoint blob-shaped organs with organ-specific mean
//! intensities and size scales (the last organ is roughly a tenth of the first
//! one's area), a smooth background ramp and Gaussian noise. Scenes are drawn in
//! pseudo-HU, windowed to `[0, 1]` and center-cropped to the target size.
//!
//! Every training partition `k` comes from its own acquisition "site" with a
//! constant intensity offset; validation and test scenes cycle through all
//! sites. Only organ `k` is kept in the masks of training partition `k`.

pub(crate) mod format;
mod preprocess;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use format::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC};
pub use preprocess::{center_crop, crop_offset, window_intensity};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Lower/upper bounds of the intensity window, in pseudo-HU.
pub const WINDOW_HU: (f64, f64) = (-125.0, 275.0);
/// Range the raw pseudo-HU values are synthesized in.
pub const RAW_RANGE_HU: (f64, f64) = (-200.0, 400.0);

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Per-pixel class ids, row-major. 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "label map {height}×{width} cannot hold {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&v| v == class).count()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// 1 where the pixel is `class`, 0 elsewhere.
    pub fn binary(&self, class: u8) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&v| u8::from(v == class)).collect(),
        }
    }

    /// Keeps `class` and sets every other pixel to background.
    pub fn project(&self, class: u8) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self
                .labels
                .iter()
                .map(|&v| if v == class { class } else { 0 })
                .collect(),
        }
    }
}

/// One image, its class-id mask and the id of the organ whose labels are trusted
/// (0 = fully annotated).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H×W` intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMap,
    pub annotated_organ: u8,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Image as a `1×H×W` network input.
    pub fn input(&self) -> Tensor<f32> {
        self.image
            .clone()
            .reshape(&[1, self.height(), self.width()])
            .expect("image extents match the mask")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub organs: usize,
    /// `train[k - 1]` holds the samples annotated only for organ `k`.
    pub train: Vec<Vec<Sample>>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    /// Checks the partial-annotation invariants of a freshly generated split.
    pub fn validate(&self) -> Result<()> {
        if self.train.len() != self.organs {
            return Err(Error::Data(format!(
                "{} training partitions for {} organs",
                self.train.len(),
                self.organs
            )));
        }
        for (i, part) in self.train.iter().enumerate() {
            let k = (i + 1) as u8;
            for (j, s) in part.iter().enumerate() {
                if s.annotated_organ != k || s.mask.labels().iter().any(|&v| v != 0 && v != k) {
                    return Err(Error::Data(format!(
                        "training sample {j} of organ {k} carries labels outside {{0, {k}}}"
                    )));
                }
            }
        }
        for (name, part) in [("validation", &self.validation), ("test", &self.test)] {
            if let Some(j) = part.iter().position(|s| s.annotated_organ != 0) {
                return Err(Error::Data(format!(
                    "{name} sample {j} is not fully annotated"
                )));
            }
        }
        Ok(())
    }

    pub fn all_train(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub organs: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_organ: usize,
    pub validation: usize,
    pub test: usize,
    /// Noise standard deviation in windowed `[0, 1]` units.
    pub noise_sigma: f64,
    /// Largest per-site intensity offset, in pseudo-HU.
    pub site_offset_hu: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            organs: 3,
            height: 64,
            width: 64,
            train_per_organ: 200,
            validation: 100,
            test: 100,
            noise_sigma: 0.05,
            site_offset_hu: 10.0,
        }
    }
}

impl PhantomConfig {
    pub fn check(&self) -> Result<()> {
        if !(2..=8).contains(&self.organs) {
            return Err(Error::Config(format!(
                "organ count must be in [2, 8], got {}",
                self.organs
            )));
        }
        if self.height < 16 || self.width < 16 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {}×{} must be at least 16 and divisible by 4",
                self.height, self.width
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Config("image size exceeds the file format".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.site_offset_hu >= 0.0) {
            return Err(Error::Config(
                "noise and site offset must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Which partition a scene belongs to; part of its random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train(u8),
    Validation,
    Test,
}

impl Partition {
    fn stream_id(self) -> u64 {
        match self {
            Partition::Train(k) => 0x100 + k as u64,
            Partition::Validation => 1,
            Partition::Test => 2,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn generate_split(seed: u64, config: &PhantomConfig) -> Result<DatasetSplit> {
    config.check()?;
    let k = config.organs;
    let mut train = Vec::with_capacity(k);
    for organ in 1..=k as u8 {
        let part = (0..config.train_per_organ)
            .map(|i| {
                let scene = generate_scene(seed, Partition::Train(organ), i, config)?;
                Ok(Sample {
                    image: scene.image,
                    mask: scene.mask.project(organ),
                    annotated_organ: organ,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        train.push(part);
    }
    let full = |partition, n| {
        (0..n)
            .map(|i| generate_scene(seed, partition, i, config))
            .collect::<Result<Vec<_>>>()
    };
    Ok(DatasetSplit {
        organs: k,
        train,
        validation: full(Partition::Validation, config.validation)?,
        test: full(Partition::Test, config.test)?,
    })
}

/// Acquisition site of a scene: training partition `k` is site `k − 1`; held-out
/// scenes rotate through all sites.
pub fn site_of(partition: Partition, index: usize, organs: usize) -> usize {
    match partition {
        Partition::Train(k) => k as usize - 1,
        Partition::Validation | Partition::Test => index % organs,
    }
}

fn site_offset(site: usize, config: &PhantomConfig) -> f64 {
    let half = (config.organs - 1) as f64 / 2.0;
    if half == 0.0 {
        return 0.0;
    }
    config.site_offset_hu * (site as f64 - half) / half
}

/// Mean pseudo-HU intensity of organ `j` (0-based).
fn organ_mean_hu(j: usize, organs: usize) -> f64 {
    let spacing = (200.0 / (organs - 1) as f64).min(75.0);
    70.0 + spacing * j as f64
}

/// Smallest blob radius in pixels; only binds on canvases below 32 px.
const MIN_RADIUS: f64 = 1.5;

/// Linear size scale: 1.0 for the first organ down to 0.33 for the last, so the
/// smallest organ has about a ninth of the largest one's area.
fn organ_scale(j: usize, organs: usize) -> f64 {
    1.0 - 0.67 * j as f64 / (organs - 1) as f64
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let [(a3, p3), (a5, p5)] = self.harmonics;
        r <= 1.0 + a3 * (3.0 * phi + p3).sin() + a5 * (5.0 * phi + p5).sin()
    }
}

/// Generates one fully annotated scene; reproducible from `(seed, partition, index)` alone.
pub fn generate_scene(
    seed: u64,
    partition: Partition,
    index: usize,
    config: &PhantomConfig,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, partition.stream_id(), index as u64]));
    let k = config.organs;
    // Draw on a slightly larger canvas, then crop like a scanner field of view.
    let (ch, cw) = (config.height + 8, config.width + 8);
    let (top, left) = (
        crop_offset(ch, config.height),
        crop_offset(cw, config.width),
    );
    let mut labels = vec![0u8; ch * cw];
    // crowded scenes shrink every organ so placement stays feasible
    let base = 0.2 * config.height.min(config.width) as f64 * (3.0 / k as f64).min(1.0).sqrt();
    for j in 0..k {
        let scale = organ_scale(j, k);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let ry = (base * scale * rng.random_range(0.7..0.9)).max(MIN_RADIUS);
            let rx = (base * scale * rng.random_range(0.95..1.2)).max(MIN_RADIUS);
            let reach = ry.max(rx) * 1.2 + 1.0;
            let lo_y = top as f64 + reach;
            let hi_y = (top + config.height) as f64 - reach;
            let lo_x = left as f64 + reach;
            let hi_x = (left + config.width) as f64 - reach;
            if lo_y >= hi_y || lo_x >= hi_x {
                continue;
            }
            let blob = Blob {
                cy: rng.random_range(lo_y..hi_y),
                cx: rng.random_range(lo_x..hi_x),
                ry,
                rx,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                harmonics: [
                    (rng.random_range(0.0..0.12), rng.random_range(0.0..6.3)),
                    (rng.random_range(0.0..0.06), rng.random_range(0.0..6.3)),
                ],
            };
            let y0 = (blob.cy - reach).floor().max(0.0) as usize;
            let y1 = ((blob.cy + reach).ceil() as usize).min(ch - 1);
            let x0 = (blob.cx - reach).floor().max(0.0) as usize;
            let x1 = ((blob.cx + reach).ceil() as usize).min(cw - 1);
            let mut cells = Vec::new();
            let mut clash = false;
            'scan: for y in y0..=y1 {
                for x in x0..=x1 {
                    if blob.contains(y as f64, x as f64) {
                        // one-pixel moat keeps organs from touching
                        for (ny, nx) in neighbourhood(y, x, ch, cw) {
                            let l = labels[ny * cw + nx];
                            if l != 0 {
                                clash = true;
                                break 'scan;
                            }
                        }
                        cells.push(y * cw + x);
                    }
                }
            }
            if clash || cells.len() < 4 {
                continue;
            }
            for c in cells {
                labels[c] = (j + 1) as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place organ {} without overlap in scene {index} of {partition:?} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                j + 1
            )));
        }
    }

    let offset = site_offset(site_of(partition, index, k), config);
    let bg_level = -10.0 + rng.random_range(-10.0..10.0);
    let (gy, gx) = (rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
    let organ_hu: Vec<f64> = (0..k)
        .map(|j| organ_mean_hu(j, k) + rng.random_range(-8.0..8.0))
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma * (WINDOW_HU.1 - WINDOW_HU.0))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut raw = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        for x in 0..cw {
            let l = labels[y * cw + x];
            let mean = if l == 0 {
                bg_level + gy * (y as f64 / ch as f64 - 0.5) + gx * (x as f64 / cw as f64 - 0.5)
            } else {
                organ_hu[l as usize - 1]
            };
            let v = mean + offset + noise.sample(&mut rng);
            raw.push(v.clamp(RAW_RANGE_HU.0, RAW_RANGE_HU.1));
        }
    }
    let raw = Tensor::new(&[ch, cw], raw)?;
    let image = center_crop(
        &window_intensity(&raw, WINDOW_HU.0, WINDOW_HU.1)?,
        config.height,
        config.width,
    )?;
    let labels = preprocess::crop_plane_stack(&labels, ch, cw, config.height, config.width);
    Ok(Sample {
        image: image.cast(),
        mask: LabelMap::new(config.height, config.width, labels)?,
        annotated_organ: 0,
    })
}

fn neighbourhood(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
    ys.flat_map(move |ny| (x.saturating_sub(1)..=(x + 1).min(w - 1)).map(move |nx| (ny, nx)))
}
