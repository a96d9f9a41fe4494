//! IDX image ingestion, task subset construction, and downsampling.
//!
//! The IDX container is the big-endian binary format used by the MNIST
//! family: a magic word (0x00000803 for u8 image cubes, 0x00000801 for u8
//! label vectors), big-endian u32 dimensions, then raw bytes. Pixels are
//! normalized to [0, 1] by dividing by 255.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{got:08x} at offset 0, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },
    #[error("{path}: truncated at byte {got}, need {expected} bytes")]
    Truncated {
        path: PathBuf,
        expected: u64,
        got: u64,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("set is empty")]
    EmptySet,
    #[error("image buffer holds {got} values, dimensions need {expected}")]
    BadImageBuffer { expected: usize, got: usize },
    #[error("label {label} outside class count {class_count}")]
    LabelOutOfRange { label: u8, class_count: usize },
    #[error("pixel value {0} outside [0, 1]")]
    PixelOutOfRange(f64),
    #[error("class {class} has {available} samples, task needs {requested}")]
    NotEnoughSamples {
        class: u8,
        available: usize,
        requested: usize,
    },
    #[error("binary task classes must differ, both are {0}")]
    SameClass(u8),
    #[error("{what} count {n} does not split evenly over {parts} classes")]
    UnevenSplit {
        what: &'static str,
        n: usize,
        parts: usize,
    },
    #[error("downsample factor {0} unsupported (use 2 or 4)")]
    BadFactor(usize),
    #[error("image size {height}x{width} not divisible by factor {factor}")]
    NotDivisibleByFactor {
        height: usize,
        width: usize,
        factor: usize,
    },
}

/// An immutable stack of same-sized grayscale images with integer labels.
/// Pixels live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    class_count: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn new(
        pixels: Vec<f64>,
        labels: Vec<u8>,
        height: usize,
        width: usize,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::EmptySet);
        }
        let expected = labels.len() * height * width;
        if pixels.len() != expected {
            return Err(DataError::BadImageBuffer {
                expected,
                got: pixels.len(),
            });
        }
        if let Some(&v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelOutOfRange(v));
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(DataError::LabelOutOfRange { label, class_count });
        }
        Ok(LabeledImageSet {
            class_count,
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    /// Row-major pixels of one image.
    pub fn image(&self, index: usize) -> &[f64] {
        let size = self.height * self.width;
        &self.pixels[index * size..(index + 1) * size]
    }

    /// New set holding the given samples in the given order, keeping labels
    /// and class count.
    pub fn subset(&self, indices: &[usize]) -> Self {
        self.select(indices, None, self.class_count)
    }

    /// New set holding the given samples in the given order.
    fn select(&self, indices: &[usize], relabel: Option<&[u8]>, class_count: usize) -> Self {
        let size = self.height * self.width;
        let mut pixels = Vec::with_capacity(indices.len() * size);
        let mut labels = Vec::with_capacity(indices.len());
        for (pos, &i) in indices.iter().enumerate() {
            pixels.extend_from_slice(self.image(i));
            labels.push(match relabel {
                Some(new) => new[pos],
                None => self.labels[i],
            });
        }
        LabeledImageSet {
            class_count,
            height: self.height,
            width: self.width,
            pixels,
            labels,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn need(bytes: &[u8], expected: usize, path: &Path) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            got: bytes.len() as u64,
        });
    }
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    need(bytes, offset + 4, path)?;
    Ok(u32::from_be_bytes(
        bytes[offset..offset + 4].try_into().unwrap(),
    ))
}

/// Loads an images/labels IDX pair. Trailing bytes after the declared
/// payload are ignored.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet, DataError> {
    let img_bytes = read_file(images_path)?;
    let magic = read_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_u32(&img_bytes, 4, images_path)? as usize;
    let height = read_u32(&img_bytes, 8, images_path)? as usize;
    let width = read_u32(&img_bytes, 12, images_path)? as usize;
    let payload = count * height * width;
    need(&img_bytes, 16 + payload, images_path)?;

    let lbl_bytes = read_file(labels_path)?;
    let magic = read_u32(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let label_count = read_u32(&lbl_bytes, 4, labels_path)? as usize;
    need(&lbl_bytes, 8 + label_count, labels_path)?;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let pixels: Vec<f64> = img_bytes[16..16 + payload]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<u8> = lbl_bytes[8..8 + label_count].to_vec();
    let class_count = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    LabeledImageSet::new(pixels, labels, height, width, class_count)
}

/// Writes the set as an IDX pair. Pixels are scaled back to bytes by
/// round(v * 255), so a set loaded from IDX writes back identical bytes.
pub fn save_idx(
    set: &LabeledImageSet,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let mut img = Vec::with_capacity(16 + set.pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&(set.height as u32).to_be_bytes());
    img.extend_from_slice(&(set.width as u32).to_be_bytes());
    img.extend(
        set.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lbl = Vec::with_capacity(8 + set.labels.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lbl.extend_from_slice(&set.labels);
    std::fs::write(images_path, img).map_err(|source| DataError::Io {
        path: images_path.to_path_buf(),
        source,
    })?;
    std::fs::write(labels_path, lbl).map_err(|source| DataError::Io {
        path: labels_path.to_path_buf(),
        source,
    })
}

fn shuffled_class_indices(set: &LabeledImageSet, class: u8, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
    indices.shuffle(rng);
    indices
}

fn take_split(
    pool: &[usize],
    class: u8,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if pool.len() < n_train + n_test {
        return Err(DataError::NotEnoughSamples {
            class,
            available: pool.len(),
            requested: n_train + n_test,
        });
    }
    Ok((
        pool[..n_train].to_vec(),
        pool[n_train..n_train + n_test].to_vec(),
    ))
}

/// Balanced two-class subset with labels remapped to 0 (`class_a`) and 1
/// (`class_b`). Train and test draws are disjoint and deterministic per seed.
pub fn make_binary_task(
    set: &LabeledImageSet,
    class_a: u8,
    class_b: u8,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet), DataError> {
    if class_a == class_b {
        return Err(DataError::SameClass(class_a));
    }
    for (what, n) in [("train", n_train), ("test", n_test)] {
        if n == 0 || n % 2 != 0 {
            return Err(DataError::UnevenSplit { what, n, parts: 2 });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_labels = Vec::new();
    for (new_label, class) in [(0u8, class_a), (1u8, class_b)] {
        let pool = shuffled_class_indices(set, class, &mut rng);
        let (tr, te) = take_split(&pool, class, n_train / 2, n_test / 2)?;
        train_labels.extend(std::iter::repeat_n(new_label, tr.len()));
        test_labels.extend(std::iter::repeat_n(new_label, te.len()));
        train.extend(tr);
        test.extend(te);
    }
    Ok((
        set.select(&train, Some(&train_labels), 2),
        set.select(&test, Some(&test_labels), 2),
    ))
}

/// Stratified subset over every class of the set, keeping original labels.
/// `n_train` and `n_test` must split evenly over the class count.
pub fn make_multiclass_task(
    set: &LabeledImageSet,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet), DataError> {
    let classes = set.class_count;
    for (what, n) in [("train", n_train), ("test", n_test)] {
        if n == 0 || n % classes != 0 {
            return Err(DataError::UnevenSplit {
                what,
                n,
                parts: classes,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..classes as u8 {
        let pool = shuffled_class_indices(set, class, &mut rng);
        let (tr, te) = take_split(&pool, class, n_train / classes, n_test / classes)?;
        train.extend(tr);
        test.extend(te);
    }
    Ok((
        set.select(&train, None, classes),
        set.select(&test, None, classes),
    ))
}

/// Non-overlapping mean pooling by `factor` (2 or 4) along both axes.
pub fn downsample(set: &LabeledImageSet, factor: usize) -> Result<LabeledImageSet, DataError> {
    if factor != 2 && factor != 4 {
        return Err(DataError::BadFactor(factor));
    }
    if !set.height.is_multiple_of(factor) || !set.width.is_multiple_of(factor) {
        return Err(DataError::NotDivisibleByFactor {
            height: set.height,
            width: set.width,
            factor,
        });
    }
    let out_h = set.height / factor;
    let out_w = set.width / factor;
    let norm = (factor * factor) as f64;
    let mut pixels = Vec::with_capacity(set.len() * out_h * out_w);
    for i in 0..set.len() {
        let img = set.image(i);
        for r in 0..out_h {
            for c in 0..out_w {
                let mut sum = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        sum += img[(r * factor + dr) * set.width + (c * factor + dc)];
                    }
                }
                pixels.push(sum / norm);
            }
        }
    }
    Ok(LabeledImageSet {
        class_count: set.class_count,
        height: out_h,
        width: out_w,
        pixels,
        labels: set.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(images: &[u8], labels: &[u8], count: u32, h: u32, w: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&count.to_be_bytes());
        img.extend_from_slice(&h.to_be_bytes());
        img.extend_from_slice(&w.to_be_bytes());
        img.extend_from_slice(images);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&count.to_be_bytes());
        lbl.extend_from_slice(labels);
        (img, lbl)
    }

    fn write_pair(dir: &std::path::Path, img: &[u8], lbl: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("img-idx3-ubyte");
        let lp = dir.join("lbl-idx1-ubyte");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn loads_hand_built_pair_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = idx_pair(&[255, 0, 128, 51, 10, 20, 30, 40], &[7, 2], 2, 2, 2);
        let (ip, lp) = write_pair(dir.path(), &img, &lbl);
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!((set.height(), set.width()), (2, 2));
        assert_eq!(set.class_count(), 8);
        assert_eq!(set.labels(), &[7, 2]);
        assert_eq!(set.image(0), &[1.0, 0.0, 128.0 / 255.0, 51.0 / 255.0]);
        assert_eq!(set.image(1), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0, 40.0 / 255.0]);
    }

    #[test]
    fn wrong_magic_is_flagged_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lbl) = idx_pair(&[0; 4], &[0], 1, 2, 2);
        img[..4].copy_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        let (ip, lp) = write_pair(dir.path(), &img, &lbl);
        match load_idx(&ip, &lp) {
            Err(DataError::BadMagic { expected, got, path }) => {
                assert_eq!(expected, IDX_IMAGES_MAGIC);
                assert_eq!(got, IDX_LABELS_MAGIC);
                assert_eq!(path, ip);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "message missing offset: {err}");
    }

    #[test]
    fn truncated_pixels_report_byte_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = idx_pair(&[1, 2, 3, 4], &[0], 1, 2, 2);
        let (ip, lp) = write_pair(dir.path(), &img[..17], &lbl);
        match load_idx(&ip, &lp) {
            Err(DataError::Truncated { expected, got, .. }) => {
                assert_eq!(expected, 20);
                assert_eq!(got, 17);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn image_label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = idx_pair(&[0; 8], &[0, 1, 1], 2, 2, 2);
        let mut lbl = lbl;
        lbl[4..8].copy_from_slice(&3u32.to_be_bytes());
        let (ip, lp) = write_pair(dir.path(), &img, &lbl);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn idx_round_trip_reproduces_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..=255).collect();
        let labels: Vec<u8> = (0..4).collect();
        let (img, lbl) = idx_pair(&pixels, &labels, 4, 8, 8);
        let (ip, lp) = write_pair(dir.path(), &img, &lbl);
        let set = load_idx(&ip, &lp).unwrap();
        let ip2 = dir.path().join("img2");
        let lp2 = dir.path().join("lbl2");
        save_idx(&set, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip2).unwrap(), img);
        assert_eq!(std::fs::read(&lp2).unwrap(), lbl);
        assert_eq!(load_idx(&ip2, &lp2).unwrap(), set);
    }

    /// 40 images, 4 classes, each image filled with its own index / 100.
    fn tagged_set() -> LabeledImageSet {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            pixels.extend(std::iter::repeat_n(i as f64 / 100.0, 4));
            labels.push((i % 4) as u8);
        }
        LabeledImageSet::new(pixels, labels, 2, 2, 4).unwrap()
    }

    #[test]
    fn binary_task_is_balanced_remapped_and_disjoint() {
        let set = tagged_set();
        let (train, test) = make_binary_task(&set, 1, 3, 8, 4, 5).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 4);
        assert_eq!(train.class_count(), 2);
        for s in [&train, &test] {
            let ones = s.labels().iter().filter(|&&l| l == 1).count();
            assert_eq!(ones * 2, s.len());
        }
        // The pixel tag identifies the source image: no overlap, and the
        // original labels match the requested classes.
        let tag = |s: &LabeledImageSet, i: usize| (s.image(i)[0] * 100.0).round() as usize;
        let mut seen = std::collections::HashSet::new();
        for s in [&train, &test] {
            for i in 0..s.len() {
                let src = tag(s, i);
                assert!(seen.insert(src), "sample {src} drawn twice");
                let original = (src % 4) as u8;
                assert_eq!(original, if s.label(i) == 0 { 1 } else { 3 });
            }
        }
    }

    #[test]
    fn binary_task_is_deterministic_per_seed() {
        let set = tagged_set();
        let a = make_binary_task(&set, 0, 2, 8, 4, 9).unwrap();
        let b = make_binary_task(&set, 0, 2, 8, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = make_binary_task(&set, 0, 2, 8, 4, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn binary_task_rejects_bad_requests() {
        let set = tagged_set();
        assert!(matches!(
            make_binary_task(&set, 1, 1, 4, 2, 0),
            Err(DataError::SameClass(1))
        ));
        assert!(matches!(
            make_binary_task(&set, 0, 1, 5, 2, 0),
            Err(DataError::UnevenSplit { .. })
        ));
        // 10 samples per class; 8 + 4 needs 6 per class, 16 + 8 needs 12.
        assert!(matches!(
            make_binary_task(&set, 0, 1, 16, 8, 0),
            Err(DataError::NotEnoughSamples {
                class: 0,
                available: 10,
                requested: 12,
            })
        ));
    }

    #[test]
    fn multiclass_task_is_stratified() {
        let set = tagged_set();
        let (train, test) = make_multiclass_task(&set, 16, 8, 3).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(test.len(), 8);
        for class in 0..4u8 {
            assert_eq!(train.labels().iter().filter(|&&l| l == class).count(), 4);
            assert_eq!(test.labels().iter().filter(|&&l| l == class).count(), 2);
        }
        assert!(matches!(
            make_multiclass_task(&set, 15, 8, 3),
            Err(DataError::UnevenSplit { .. })
        ));
    }

    #[test]
    fn downsample_means_blocks() {
        let constant = LabeledImageSet::new(vec![0.25; 16], vec![0], 4, 4, 1).unwrap();
        let down = downsample(&constant, 2).unwrap();
        assert_eq!((down.height(), down.width()), (2, 2));
        assert_eq!(down.image(0), &[0.25; 4]);

        let mut checker = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                checker.push(((r + c) % 2) as f64);
            }
        }
        let board = LabeledImageSet::new(checker, vec![0], 4, 4, 1).unwrap();
        let down = downsample(&board, 2).unwrap();
        assert_eq!(down.image(0), &[0.5; 4]);
        let down4 = downsample(&board, 4).unwrap();
        assert_eq!((down4.height(), down4.width()), (1, 1));
        assert_eq!(down4.image(0), &[0.5]);

        assert!(matches!(downsample(&board, 3), Err(DataError::BadFactor(3))));
        let odd = LabeledImageSet::new(vec![0.0; 6], vec![0], 2, 3, 1).unwrap();
        assert!(matches!(
            downsample(&odd, 2),
            Err(DataError::NotDivisibleByFactor { .. })
        ));
    }

    #[test]
    fn construction_invariants_are_enforced() {
        assert!(matches!(
            LabeledImageSet::new(vec![], vec![], 2, 2, 1),
            Err(DataError::EmptySet)
        ));
        assert!(matches!(
            LabeledImageSet::new(vec![0.0; 3], vec![0], 2, 2, 1),
            Err(DataError::BadImageBuffer { expected: 4, got: 3 })
        ));
        assert!(matches!(
            LabeledImageSet::new(vec![0.0, 1.5, 0.0, 0.0], vec![0], 2, 2, 1),
            Err(DataError::PixelOutOfRange(_))
        ));
        assert!(matches!(
            LabeledImageSet::new(vec![0.0; 4], vec![3], 2, 2, 3),
            Err(DataError::LabelOutOfRange { label: 3, class_count: 3 })
        ));
    }
}
