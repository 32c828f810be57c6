//! Labeled image corpora: disk loading, synthetic generation, train/test
//! splitting, and class-balanced P x K batch sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{pad_to_square, ImageError, LabeledImage, PixelGrid};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset root {0} is not a directory")]
    MissingRoot(String),
    #[error("no classes found under {0}")]
    NoClasses(String),
    #[error("class {0} has zero images")]
    EmptyClass(String),
    #[error("failed to read image {path}: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error("duplicate source id {0}")]
    DuplicateSourceId(String),
    #[error("synthetic generator requires classes >= 2 and per_class >= 2 (got {classes}, {per_class})")]
    SynthTooSmall { classes: usize, per_class: usize },
    #[error("batch needs P >= 2 and K >= 2 (got P={p}, K={k})")]
    BatchTooSmall { p: usize, k: usize },
    #[error("dataset has {available} classes, fewer than P={requested}")]
    NotEnoughClasses { available: usize, requested: usize },
    #[error("split asks for {requested} {unit} but only {available} available")]
    SplitExceedsData {
        requested: usize,
        available: usize,
        unit: &'static str,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// An ordered collection of labeled images with per-class counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<LabeledImage>,
    classes: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Result<Self, DataError> {
        let mut classes = BTreeMap::new();
        let mut seen = HashSet::new();
        for img in &images {
            if !seen.insert(img.source_id().to_string()) {
                return Err(DataError::DuplicateSourceId(img.source_id().to_string()));
            }
            *classes.entry(img.class_id().to_string()).or_insert(0) += 1;
        }
        Ok(Self { images, classes })
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Class ids with image counts, in sorted id order.
    pub fn classes(&self) -> &BTreeMap<String, usize> {
        &self.classes
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Indices of every image of `class_id`, in dataset order.
    fn class_members(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, img) in self.images.iter().enumerate() {
            members.entry(img.class_id()).or_default().push(i);
        }
        members
    }
}

/// Stable class-id -> head-index mapping (sorted id order).
#[derive(Debug, Clone)]
pub struct LabelVocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let ids = dataset.class_ids();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.index.get(class_id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// A list of images serving as one training step's input.
///
/// Batches built by [`sample_batch`] carry exactly P distinct classes with K
/// images each; pre-training chunks are unconstrained.
#[derive(Debug, Clone)]
pub struct Batch {
    images: Vec<LabeledImage>,
}

impl Batch {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        Self { images }
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.images.iter().map(|i| i.class_id()).collect()
    }

    /// Replaces image contents in place (training-time augmentation).
    pub fn map_images(self, f: impl Fn(&LabeledImage) -> LabeledImage) -> Self {
        Self {
            images: self.images.iter().map(f).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Disk loading
// ---------------------------------------------------------------------------

/// Loads `<root>/<class_id>/<image>.png|.pgm` into a square dataset at
/// `resolution`. Images are converted to single-channel intensities in [0,1],
/// zero-padded to square, then resized to `resolution` if needed.
pub fn load_dataset(root: &Path, resolution: usize) -> Result<Dataset, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.display().to_string()));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| DataError::Io {
            path: root.display().to_string(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.display().to_string()));
    }

    let mut images = Vec::new();
    for dir in class_dirs {
        let class_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| DataError::Io {
                path: dir.display().to_string(),
                source: e,
            })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("pgm")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(DataError::EmptyClass(class_id));
        }
        for file in files {
            let grid = read_intensity_grid(&file)?;
            let square = pad_to_square(&grid);
            let resized = square.resize_bilinear(resolution)?;
            let stem = file
                .file_stem()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            let source_id = format!("{class_id}/{stem}");
            images.push(LabeledImage::new(resized, class_id.clone(), source_id)?);
        }
    }
    Dataset::new(images)
}

fn read_intensity_grid(path: &Path) -> Result<PixelGrid, DataError> {
    let img = image::open(path).map_err(|e| DataError::UnreadableImage {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let data: Vec<f64> = luma.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    PixelGrid::new(h as usize, w as usize, data).map_err(DataError::Image)
}

/// Writes the dataset as 8-bit grayscale PNGs in the canonical
/// `<root>/<class_id>/<source>.png` layout.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<(), DataError> {
    for img in dataset.images() {
        let class_dir = root.join(img.class_id());
        std::fs::create_dir_all(&class_dir).map_err(|e| DataError::Io {
            path: class_dir.display().to_string(),
            source: e,
        })?;
        let name = img
            .source_id()
            .rsplit('/')
            .next()
            .unwrap_or(img.source_id());
        let path = class_dir.join(format!("{name}.png"));
        let g = img.pixels();
        let bytes: Vec<u8> = g
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::save_buffer(
            &path,
            &bytes,
            g.width() as u32,
            g.height() as u32,
            image::ColorType::L8,
        )
        .map_err(|e| DataError::UnreadableImage {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Knobs for the procedural annular-texture generator.
#[derive(Debug, Clone)]
pub struct SynthParams {
    /// Outer ring radius as a fraction of the resolution.
    pub outer_radius_frac: f64,
    /// Inner (pupil) radius as a fraction of the resolution.
    pub inner_radius_frac: f64,
    /// Per-sample rotation jitter, degrees, uniform in +-this.
    pub rotation_jitter_deg: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise_amp: f64,
    /// Per-sample multiplicative brightness jitter, uniform in +-this.
    pub brightness_jitter: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            outer_radius_frac: 0.45,
            inner_radius_frac: 0.16,
            rotation_jitter_deg: 6.0,
            noise_amp: 0.04,
            brightness_jitter: 0.08,
        }
    }
}

impl SynthParams {
    /// Variant with a small ring and a large identical black border, the
    /// regime where an un-pretrained triplet network collapses.
    pub fn black_border() -> Self {
        Self {
            outer_radius_frac: 0.18,
            inner_radius_frac: 0.08,
            ..Self::default()
        }
    }
}

/// Class texture: a band-limited function over the annulus, parameterized by
/// frequencies and phases drawn once per class.
struct ClassTexture {
    ang_freq1: f64,
    ang_freq2: f64,
    rad_freq1: f64,
    rad_freq2: f64,
    phase1: f64,
    phase2: f64,
    phase3: f64,
    twist: f64,
}

impl ClassTexture {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            ang_freq1: rng.gen_range(2..=6) as f64,
            ang_freq2: rng.gen_range(3..=8) as f64,
            rad_freq1: rng.gen_range(1..=4) as f64,
            rad_freq2: rng.gen_range(1..=3) as f64,
            phase1: rng.gen_range(0.0..2.0 * PI),
            phase2: rng.gen_range(0.0..2.0 * PI),
            phase3: rng.gen_range(0.0..2.0 * PI),
            twist: rng.gen_range(-2.0..2.0),
        }
    }

    /// Intensity at angle `theta`, normalized radius `rho` in [0,1].
    fn eval(&self, theta: f64, rho: f64) -> f64 {
        0.55 + 0.18 * (self.ang_freq1 * theta + self.phase1 + self.twist * rho).sin()
            + 0.14 * (self.ang_freq2 * theta + self.phase2).sin() * (self.rad_freq1 * PI * rho).cos()
            + 0.10 * (self.rad_freq2 * PI * rho + self.phase3).cos()
    }
}

/// Desk-scale stand-in for a segmented iris corpus: each class is a distinct
/// annular texture, samples differ by small rotation, noise, and brightness
/// jitter. Pure function of its arguments.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    generate_synthetic_with(&SynthParams::default(), classes, per_class, resolution, seed)
}

pub fn generate_synthetic_with(
    params: &SynthParams,
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 || per_class < 2 {
        return Err(DataError::SynthTooSmall { classes, per_class });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = (resolution as f64 - 1.0) / 2.0;
    let r_out = params.outer_radius_frac * resolution as f64;
    let r_in = params.inner_radius_frac * resolution as f64;
    let width = classes.to_string().len().max(2);

    let mut images = Vec::with_capacity(classes * per_class);
    for class_idx in 0..classes {
        let class_id = format!("c{class_idx:0width$}");
        let texture = ClassTexture::draw(&mut rng);
        for sample_idx in 0..per_class {
            let rot = rng
                .gen_range(-params.rotation_jitter_deg..=params.rotation_jitter_deg)
                .to_radians();
            let brightness = 1.0 + rng.gen_range(-params.brightness_jitter..=params.brightness_jitter);
            let mut data = Vec::with_capacity(resolution * resolution);
            for row in 0..resolution {
                for col in 0..resolution {
                    let dy = row as f64 - center;
                    let dx = col as f64 - center;
                    let r = (dx * dx + dy * dy).sqrt();
                    if r < r_in || r > r_out {
                        data.push(0.0);
                        continue;
                    }
                    let rho = (r - r_in) / (r_out - r_in);
                    let theta = dy.atan2(dx) + rot;
                    let noise = rng.gen_range(-params.noise_amp..=params.noise_amp);
                    let value = brightness * texture.eval(theta, rho) + noise;
                    data.push(value.clamp(0.0, 1.0));
                }
            }
            let grid = PixelGrid::new(resolution, resolution, data)?;
            let source_id = format!("{class_id}/s{sample_idx:03}");
            images.push(LabeledImage::new(grid, class_id.clone(), source_id)?);
        }
    }
    Dataset::new(images)
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// Draws P distinct classes uniformly without replacement, then K images per
/// class (without replacement when the class has >= K images, otherwise with
/// replacement). Output is class-major: P groups of K.
pub fn sample_batch<R: Rng>(
    dataset: &Dataset,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Batch, DataError> {
    if p < 2 || k < 2 {
        return Err(DataError::BatchTooSmall { p, k });
    }
    let members = dataset.class_members();
    if members.len() < p {
        return Err(DataError::NotEnoughClasses {
            available: members.len(),
            requested: p,
        });
    }
    let class_lists: Vec<&Vec<usize>> = members.values().collect();
    let chosen = rand::seq::index::sample(rng, class_lists.len(), p);
    let mut images = Vec::with_capacity(p * k);
    for class_pos in chosen.iter() {
        let indices = class_lists[class_pos];
        if indices.len() >= k {
            for pick in rand::seq::index::sample(rng, indices.len(), k).iter() {
                images.push(dataset.images()[indices[pick]].clone());
            }
        } else {
            for _ in 0..k {
                let pick = rng.gen_range(0..indices.len());
                images.push(dataset.images()[indices[pick]].clone());
            }
        }
    }
    Ok(Batch::new(images))
}

// ---------------------------------------------------------------------------
// Train/test splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// Train on `train_classes` whole classes, test on the rest; no class
    /// appears on both sides.
    DisjointClasses { train_classes: usize },
    /// Per class: the first `train_per_class` images (dataset order) go to
    /// train, the rest to test.
    PerClassFirstN { train_per_class: usize },
    /// Per class: `train_per_class` randomly chosen images go to train, the
    /// rest to test.
    PerClassRandom { train_per_class: usize },
}

pub fn split_train_test<R: Rng>(
    dataset: &Dataset,
    policy: &SplitPolicy,
    rng: &mut R,
) -> Result<(Dataset, Dataset), DataError> {
    match *policy {
        SplitPolicy::DisjointClasses { train_classes } => {
            let mut ids = dataset.class_ids();
            if train_classes > ids.len() {
                return Err(DataError::SplitExceedsData {
                    requested: train_classes,
                    available: ids.len(),
                    unit: "classes",
                });
            }
            ids.shuffle(rng);
            let train_set: HashSet<String> = ids[..train_classes].iter().cloned().collect();
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for img in dataset.images() {
                if train_set.contains(img.class_id()) {
                    train.push(img.clone());
                } else {
                    test.push(img.clone());
                }
            }
            Ok((Dataset::new(train)?, Dataset::new(test)?))
        }
        SplitPolicy::PerClassFirstN { train_per_class } => {
            split_per_class(dataset, train_per_class, false, rng)
        }
        SplitPolicy::PerClassRandom { train_per_class } => {
            split_per_class(dataset, train_per_class, true, rng)
        }
    }
}

fn split_per_class<R: Rng>(
    dataset: &Dataset,
    train_per_class: usize,
    randomize: bool,
    rng: &mut R,
) -> Result<(Dataset, Dataset), DataError> {
    for &count in dataset.classes().values() {
        if train_per_class > count {
            return Err(DataError::SplitExceedsData {
                requested: train_per_class,
                available: count,
                unit: "images per class",
            });
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in dataset.class_members().values() {
        let mut order = members.clone();
        if randomize {
            order.shuffle(rng);
        }
        for (pos, &idx) in order.iter().enumerate() {
            let img = dataset.images()[idx].clone();
            if pos < train_per_class {
                train.push(img);
            } else {
                test.push(img);
            }
        }
    }
    Ok((Dataset::new(train)?, Dataset::new(test)?))
}
