//! Dataset ingestion from the labeled folder layout, /255 normalization,
//! label-preserving geometric augmentation, batching, and stratified k-fold
//! splitting.
//!
//! The on-disk layout is `<root>/damage/*` and `<root>/no_damage/*` with
//! JPEG, PNG, or PPM images. Class index 0 is "damage" (the positive class).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::optim::Rng;
use crate::tensor::{Shape, Tensor};

/// Index-to-name map for the two classes. Index 0 is the positive class.
pub const CLASS_NAMES: [&str; 2] = ["damage", "no_damage"];

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "ppm"];

/// One labeled image, pixels in [0,1], channels-last.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub path: PathBuf,
}

/// Ordered list of samples behind shared pointers, so subsetting for k-fold
/// never copies pixel data.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Arc<Sample>>,
    split: String,
}

impl Dataset {
    pub fn new(samples: Vec<Arc<Sample>>, split: &str) -> Self {
        Dataset { samples, split: split.to_string() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Arc<Sample>] {
        &self.samples
    }

    pub fn split_tag(&self) -> &str {
        &self.split
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// New dataset sharing the selected samples.
    pub fn subset(&self, indices: &[usize], split: &str) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| Arc::clone(&self.samples[i])).collect(),
            split: split.to_string(),
        }
    }
}

/// Result of loading a folder tree: the dataset plus anything skipped.
#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
    pub skipped: usize,
}

/// An image without a label, for prediction runs.
#[derive(Clone, Debug)]
pub struct UnlabeledImage {
    pub path: PathBuf,
    pub image: Tensor<f32>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// A decode attempt either yields pixels or names why the file was skipped;
/// hard contract violations (wrong size without resize) stay in `Err`.
enum Decoded {
    Image(Tensor<f32>),
    Undecodable(String),
}

/// Decode one image to a [H,W,3] tensor with exact byte/255 values. Images
/// that are not `expected_hw` are an error unless `resize` enables bilinear
/// resampling to that size.
fn decode_image(path: &Path, expected_hw: (usize, usize), resize: bool) -> Result<Decoded> {
    let img = match image::open(path) {
        Ok(img) => img,
        Err(e) => return Ok(Decoded::Undecodable(format!("{}: {e}", path.display()))),
    };
    let mut rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if (h, w) != expected_hw {
        if !resize {
            return Err(Error::Input(format!(
                "{}: image is {h}x{w}, expected {}x{} (pass the resize flag to resample)",
                path.display(),
                expected_hw.0,
                expected_hw.1
            )));
        }
        rgb = image::imageops::resize(
            &rgb,
            expected_hw.1 as u32,
            expected_hw.0 as u32,
            image::imageops::FilterType::Triangle,
        );
    }
    let (h, w) = expected_hw;
    let mut t = Tensor::zeros(Shape::new(&[h, w, 3])?);
    for (i, &b) in rgb.as_raw().iter().enumerate() {
        t.data_mut()[i] = b as f32 / 255.0;
    }
    Ok(Decoded::Image(t))
}

/// Load `<root>/damage/` and `<root>/no_damage/` into one dataset, ordered
/// lexicographically by path. Undecodable files are skipped with a warning;
/// a missing class folder is an error; an empty one only warns.
pub fn load_dataset(
    root: &Path,
    split: &str,
    expected_hw: (usize, usize),
    resize: bool,
) -> Result<LoadOutcome> {
    let mut listed: Vec<(PathBuf, usize)> = Vec::new();
    let mut warnings = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::Layout(format!(
                "{}: missing class folder '{class}'",
                root.display()
            )));
        }
        let files = list_images(&dir)?;
        if files.is_empty() {
            warnings.push(format!("{}: no images found", dir.display()));
        }
        listed.extend(files.into_iter().map(|p| (p, label)));
    }
    listed.sort();

    let mut samples = Vec::with_capacity(listed.len());
    let mut skipped = 0;
    for (path, label) in listed {
        match decode_image(&path, expected_hw, resize)? {
            Decoded::Image(image) => samples.push(Arc::new(Sample { image, label, path })),
            Decoded::Undecodable(msg) => {
                warnings.push(format!("skipping undecodable image: {msg}"));
                skipped += 1;
            }
        }
    }
    Ok(LoadOutcome { dataset: Dataset::new(samples, split), warnings, skipped })
}

/// Load every image directly inside `dir`, without labels, ordered by path.
pub fn load_unlabeled(
    dir: &Path,
    expected_hw: (usize, usize),
    resize: bool,
) -> Result<(Vec<UnlabeledImage>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::Layout(format!("{}: not a directory", dir.display())));
    }
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for path in list_images(dir)? {
        match decode_image(&path, expected_hw, resize)? {
            Decoded::Image(image) => images.push(UnlabeledImage { path, image }),
            Decoded::Undecodable(msg) => warnings.push(format!("skipping undecodable image: {msg}")),
        }
    }
    Ok((images, warnings))
}

/// Which geometric transforms augmentation may apply, each drawn
/// independently with `probability`. Translations shift by up to
/// `shift_max` pixels per axis and zero-pad the vacated border.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    pub translate: bool,
    pub probability: f64,
    pub shift_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip: true,
            vflip: true,
            rotate: true,
            translate: true,
            probability: 0.5,
            shift_max: 8,
        }
    }
}

fn hwc(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let d = image.dims();
    if d.len() != 3 {
        return Err(Error::shape(format!("augment: rank-3 [H,W,C] image required, got {}", image.shape())));
    }
    Ok((d[0], d[1], d[2]))
}

/// Mirror left-right.
pub fn hflip(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = hwc(image)?;
    let mut out = Tensor::zeros(image.shape().clone());
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&image.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// Mirror top-bottom.
pub fn vflip(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = hwc(image)?;
    let mut out = Tensor::zeros(image.shape().clone());
    for y in 0..h {
        let src = y * w * c;
        let dst = (h - 1 - y) * w * c;
        out.data_mut()[dst..dst + w * c].copy_from_slice(&image.data()[src..src + w * c]);
    }
    Ok(out)
}

/// Quarter turn counterclockwise. Square images only, so shape is unchanged
/// and four applications compose to the identity.
pub fn rotate90(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = hwc(image)?;
    if h != w {
        return Err(Error::shape(format!("rotate90: square image required, got {h}x{w}")));
    }
    let n = h;
    let mut out = Tensor::zeros(image.shape().clone());
    for y in 0..n {
        for x in 0..n {
            // (y, x) moves to (n-1-x, y).
            let src = (y * n + x) * c;
            let dst = ((n - 1 - x) * n + y) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&image.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// Shift by (dy, dx) pixels, zero-padding the vacated region.
pub fn translate(image: &Tensor<f32>, dy: isize, dx: isize) -> Result<Tensor<f32>> {
    let (h, w, c) = hwc(image)?;
    let mut out = Tensor::zeros(image.shape().clone());
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = ((sy as usize) * w + sx as usize) * c;
            let dst = (y * w + x) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&image.data()[src..src + c]);
        }
    }
    Ok(out)
}

/// Apply the enabled transforms in a fixed order (hflip, vflip, rotate,
/// translate), each triggered independently with `cfg.probability`. The
/// label is untouched by construction; shape and value range are preserved.
pub fn augment(image: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    let mut img = image.clone();
    if cfg.hflip && rng.next_f64() < cfg.probability {
        img = hflip(&img)?;
    }
    if cfg.vflip && rng.next_f64() < cfg.probability {
        img = vflip(&img)?;
    }
    if cfg.rotate && rng.next_f64() < cfg.probability {
        let quarter_turns = 1 + rng.below(3);
        for _ in 0..quarter_turns {
            img = rotate90(&img)?;
        }
    }
    if cfg.translate && rng.next_f64() < cfg.probability {
        let span = 2 * cfg.shift_max + 1;
        let dy = rng.below(span) as isize - cfg.shift_max as isize;
        let dx = rng.below(span) as isize - cfg.shift_max as isize;
        img = translate(&img, dy, dx)?;
    }
    Ok(img)
}

/// Per-sample augmentation stream: a fixed function of (seed, epoch, sample
/// index), so epochs see fresh variants while runs stay reproducible and
/// independent of batch composition.
pub fn augment_rng(seed: u64, epoch: u64, sample_index: usize) -> Rng {
    Rng::new(seed).fork(epoch, sample_index as u64)
}

/// A seeded permutation of 0..n split into `batch_size` chunks (final chunk
/// may be smaller); `shuffle=false` keeps dataset order.
pub fn batch_plan(n: usize, batch_size: usize, shuffle: bool, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One training batch: stacked images [B,H,W,C] and one-hot labels [B,2].
#[derive(Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub indices: Vec<usize>,
}

/// Stack the selected samples. `augmented` optionally maps (dataset index,
/// image) to the image actually used.
pub fn assemble_batch(
    ds: &Dataset,
    indices: &[usize],
    augmented: Option<&dyn Fn(usize, &Tensor<f32>) -> Result<Tensor<f32>>>,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::config("assemble_batch: empty index list"));
    }
    let first = ds.get(indices[0]);
    let dims = first.image.dims();
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    let b = indices.len();
    let mut images = Tensor::zeros(Shape::new(&[b, h, w, c])?);
    let mut labels = Tensor::zeros(Shape::new(&[b, 2])?);
    let per = h * w * c;
    for (row, &i) in indices.iter().enumerate() {
        let s = ds.get(i);
        let img = match augmented {
            Some(f) => f(i, &s.image)?,
            None => s.image.clone(),
        };
        if img.dims() != dims {
            return Err(Error::shape(format!(
                "batch images disagree in shape: {} vs {}",
                img.shape(),
                first.image.shape()
            )));
        }
        images.data_mut()[row * per..(row + 1) * per].copy_from_slice(img.data());
        if s.label >= 2 {
            return Err(Error::Input(format!("sample {} has label {}, expected 0 or 1", i, s.label)));
        }
        labels.data_mut()[row * 2 + s.label] = 1.0;
    }
    Ok(Batch { images, labels, indices: indices.to_vec() })
}

/// Every sample exactly once, in seeded-permutation order when shuffled.
pub fn make_batches(ds: &Dataset, batch_size: usize, shuffle: bool, rng: &mut Rng) -> Result<Vec<Batch>> {
    let plan = batch_plan(ds.len(), batch_size, shuffle, rng)?;
    plan.iter().map(|idx| assemble_batch(ds, idx, None)).collect()
}

/// Stratified k-fold split: returns k (train, validation) pairs where the
/// validation folds partition the dataset, overall fold sizes differ by at
/// most one, and each class is spread across folds within one sample of its
/// ideal share (remainders rotate across folds).
pub fn kfold_split(ds: &Dataset, k: usize, rng: &mut Rng) -> Result<Vec<(Dataset, Dataset)>> {
    if k < 2 {
        return Err(Error::config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > ds.len() {
        return Err(Error::config(format!("k = {k} exceeds dataset size {}", ds.len())));
    }

    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in ds.samples().iter().enumerate() {
        by_class[s.label].push(i);
    }

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next_extra = 0usize;
    for class_indices in by_class.iter_mut() {
        rng.shuffle(class_indices);
        let base = class_indices.len() / k;
        let rem = class_indices.len() % k;
        let mut cursor = 0;
        for f in 0..k {
            let extra = usize::from((f + k - next_extra) % k < rem);
            let take = base + extra;
            folds[f].extend_from_slice(&class_indices[cursor..cursor + take]);
            cursor += take;
        }
        next_extra = (next_extra + rem) % k;
    }

    let mut pairs = Vec::with_capacity(k);
    for f in 0..k {
        let val = &folds[f];
        let mut train: Vec<usize> = Vec::with_capacity(ds.len() - val.len());
        for (g, fold) in folds.iter().enumerate() {
            if g != f {
                train.extend_from_slice(fold);
            }
        }
        pairs.push((
            ds.subset(&train, &format!("fold{f}-train")),
            ds.subset(val, &format!("fold{f}-val")),
        ));
    }
    Ok(pairs)
}

/// Generated two-class dataset for end-to-end tests: class 0 brightens left
/// to right, class 1 top to bottom, plus uniform noise. Trivially separable
/// by a small convolutional net yet non-degenerate.
pub fn synthetic_dataset(per_class: usize, hw: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut samples = Vec::with_capacity(per_class * 2);
    for label in 0..2 {
        for i in 0..per_class {
            let mut img = Tensor::zeros(Shape::new(&[hw, hw, 3]).expect("positive dims"));
            for y in 0..hw {
                for x in 0..hw {
                    let ramp = if label == 0 {
                        x as f64 / (hw - 1) as f64
                    } else {
                        y as f64 / (hw - 1) as f64
                    };
                    let base = 0.2 + 0.6 * ramp;
                    for ch in 0..3 {
                        let noise = rng.uniform(-0.15, 0.15);
                        let v = (base + noise).clamp(0.0, 1.0);
                        img.data_mut()[(y * hw + x) * 3 + ch] = v as f32;
                    }
                }
            }
            samples.push(Arc::new(Sample {
                image: img,
                label,
                path: PathBuf::from(format!("synthetic/{}/{i:05}", CLASS_NAMES[label])),
            }));
        }
    }
    Dataset::new(samples, "synthetic")
}
