//! Datasets: raw-idx files, class-per-directory images, synthetic generation,
//! and stratified splitting.
//!
//! A raw-idx dataset is a directory holding
//!
//! * `images.idx`: bytes `00 00 08 04`, then count, H, W, 3 as big-endian
//!   `u32`, then `count*H*W*3` pixel bytes (row-major, RGB last);
//! * `labels.idx`: bytes `00 00 08 01`, then count as big-endian `u32`, then
//!   one label byte per item;
//! * `classes.txt`: one class name per line, in label order.
//!
//! Pixels are stored as bytes and exposed as `byte / 255` in `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: [u8; 4] = [0, 0, 8, 4];
const LABELS_MAGIC: [u8; 4] = [0, 0, 8, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    RawIdx,
    ImageDir,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-idx" => Ok(DataFormat::RawIdx),
            "image-dir" => Ok(DataFormat::ImageDir),
            _ => Err(Error::Usage(format!("unknown data format '{s}' (raw-idx | image-dir)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub size: usize,
    pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetBundle {
    pub fn new(size: usize, pixels: Vec<u8>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if size == 0 || pixels.len() != labels.len() * size * size * 3 {
            return Err(Error::Dataset(format!(
                "{} pixel bytes do not match {} images of {size}x{size}x3",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Label { label: bad, num_classes: class_names.len() });
        }
        let all = (0..labels.len()).collect();
        Ok(DatasetBundle { size, pixels, labels, class_names, train: all, test: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Images `[n, H, W, 3]` scaled to `[0, 1]`.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let per = self.size * self.size * 3;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| p as f64 / 255.0));
        }
        Tensor::new(&[indices.len(), self.size, self.size, 3], data).expect("non-empty index list")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn save_raw_idx(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut img = Vec::with_capacity(20 + self.pixels.len());
        img.extend(IMAGES_MAGIC);
        for d in [self.len(), self.size, self.size, 3] {
            img.extend((d as u32).to_be_bytes());
        }
        img.extend(&self.pixels);
        fs::write(dir.join("images.idx"), img)?;
        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend(LABELS_MAGIC);
        lab.extend((self.len() as u32).to_be_bytes());
        for &l in &self.labels {
            let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte")))?;
            lab.push(b);
        }
        fs::write(dir.join("labels.idx"), lab)?;
        fs::write(dir.join("classes.txt"), self.class_names.join("\n") + "\n")?;
        Ok(())
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<usize> {
    let b = bytes.get(at..at + 4).ok_or_else(|| Error::Format(format!("{what}: truncated header")))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

pub fn load_raw_idx(dir: &Path) -> Result<DatasetBundle> {
    let img = fs::read(dir.join("images.idx"))?;
    if img.len() < 4 || img[..4] != IMAGES_MAGIC {
        return Err(Error::Format("images.idx: bad magic".into()));
    }
    let (count, h, w, c) = (
        be_u32(&img, 4, "images.idx")?,
        be_u32(&img, 8, "images.idx")?,
        be_u32(&img, 12, "images.idx")?,
        be_u32(&img, 16, "images.idx")?,
    );
    if h != w || c != 3 {
        return Err(Error::Format(format!("images.idx: expected square RGB images, got {h}x{w}x{c}")));
    }
    let body = &img[20..];
    if body.len() != count * h * w * 3 {
        return Err(Error::Format(format!(
            "images.idx: expected {} pixel bytes, found {}",
            count * h * w * 3,
            body.len()
        )));
    }
    let lab = fs::read(dir.join("labels.idx"))?;
    if lab.len() < 4 || lab[..4] != LABELS_MAGIC {
        return Err(Error::Format("labels.idx: bad magic".into()));
    }
    let n = be_u32(&lab, 4, "labels.idx")?;
    if n != count || lab.len() != 8 + n {
        return Err(Error::Format(format!(
            "labels.idx: expected {count} labels, header says {n}, file has {}",
            lab.len().saturating_sub(8)
        )));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let class_names: Vec<String> =
        fs::read_to_string(dir.join("classes.txt"))?.lines().filter(|l| !l.is_empty()).map(String::from).collect();
    DatasetBundle::new(h, body.to_vec(), labels, class_names)
}

/// One subdirectory per class, classes in alphabetical order. Every image is
/// converted to RGB and resized to `size x size`.
pub fn load_image_dir(dir: &Path, size: usize) -> Result<DatasetBundle> {
    let mut classes: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", dir.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory '{class}' is empty")));
        }
        for f in files {
            let img = image::open(&f)?.to_rgb8();
            let img = if img.width() as usize == size && img.height() as usize == size {
                img
            } else {
                image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
            };
            pixels.extend(img.into_raw());
            labels.push(label);
        }
    }
    DatasetBundle::new(size, pixels, labels, classes)
}

pub fn load_dataset(path: &Path, format: DataFormat, size: usize) -> Result<DatasetBundle> {
    match format {
        DataFormat::RawIdx => load_raw_idx(path),
        DataFormat::ImageDir => load_image_dir(path, size),
    }
}

/// Deterministic class-conditional images: a bar whose orientation encodes
/// the class, at a jittered position and colour, over uniform noise.
/// Items cycle through the classes so labels are balanced.
pub fn generate_synthetic(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<DatasetBundle> {
    if size != 32 && size != 64 {
        return Err(Error::Contract(format!("synthetic size must be 32 or 64, got {size}")));
    }
    if num_classes == 0 || num_classes > 256 || per_class == 0 {
        return Err(Error::Contract("need 1..=256 classes and at least one item per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * per_class;
    let s = size as f64;
    let half_width = s / 20.0 + 0.75;
    let mut pixels = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    for item in 0..n {
        let class = item % num_classes;
        let spread = std::f64::consts::PI / num_classes as f64;
        let theta = spread * class as f64 + rng.gen_range(-0.15..0.15) * spread;
        let (dx, dy) = (theta.cos(), theta.sin());
        let cx = s / 2.0 + rng.gen_range(-s / 6.0..s / 6.0);
        let cy = s / 2.0 + rng.gen_range(-s / 6.0..s / 6.0);
        let length = rng.gen_range(0.3 * s..0.45 * s);
        let colour: [f64; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = px * dx + py * dy;
                let across = (-px * dy + py * dx).abs();
                let inside = along.abs() <= length && across <= half_width;
                for &c in &colour {
                    let noise: f64 = rng.gen_range(0.0..0.25);
                    let v = if inside { c * 0.85 + noise * 0.6 } else { noise };
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(class);
    }
    let names = (0..num_classes).map(|c| format!("class{c}")).collect();
    DatasetBundle::new(size, pixels, labels, names)
}

/// Stratified split. Each class is shuffled, cut to `subsample_fraction` of
/// its items, then divided `ratio : 1 - ratio` between train and test.
pub fn split(bundle: &DatasetBundle, ratio: f64, subsample_fraction: f64, seed: u64) -> Result<DatasetBundle> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Contract(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if !(subsample_fraction > 0.0 && subsample_fraction <= 1.0) {
        return Err(Error::Contract(format!("subsample fraction must be in (0, 1], got {subsample_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..bundle.num_classes() {
        let mut members: Vec<usize> = (0..bundle.len()).filter(|&i| bundle.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let keep = (members.len() as f64 * subsample_fraction).round() as usize;
        if keep < 2 {
            return Err(Error::Split(format!(
                "class '{}' has {keep} item(s) after subsampling; need at least 2",
                bundle.class_names[class]
            )));
        }
        let n_train = ((keep as f64 * ratio).round() as usize).clamp(1, keep - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..keep]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetBundle { train, test, ..bundle.clone() })
}
