//! Procedural image corpus and optional IDX-format ingestion.

use crate::array::DiffArray;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use std::path::Path;

/// Grayscale image classification data with disjoint train/test splits.
///
/// Images are flattened row-major, pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train_images: DiffArray,
    pub train_labels: Vec<usize>,
    pub test_images: DiffArray,
    pub test_labels: Vec<usize>,
    pub side: usize,
    pub num_classes: usize,
}

impl ToyCorpus {
    pub fn image_dim(&self) -> usize {
        self.side * self.side
    }

    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    /// Train-split indices belonging to one class.
    pub fn train_class_indices(&self, class: usize) -> Vec<usize> {
        self.train_labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn min_train_per_class(&self) -> usize {
        (0..self.num_classes)
            .map(|c| self.train_class_indices(c).len())
            .min()
            .unwrap_or(0)
    }

    /// Gather a batch of train images by index.
    pub fn train_batch(&self, indices: &[usize]) -> (DiffArray, Vec<usize>) {
        let d = self.image_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.train_images.row(i));
            labels.push(self.train_labels[i]);
        }
        (
            DiffArray::new(vec![indices.len(), d], data).expect("batch shape"),
            labels,
        )
    }
}

const MAX_CLASSES: usize = 16;

/// Pattern contrast around mid-gray. Deliberately low: the inter-class
/// distance is then comparable to the noise norm of a single noisy exemplar
/// (noise_level * side), so one random real image per class is a mediocre
/// classifier while the full corpus stays easily separable.
const PATTERN_AMP: f64 = 0.06;

/// Base pattern intensity for pixel (r, c) of class `k` on a `side x side`
/// grid. Classes come in confusable pairs (phase-shifted stripes, offset
/// grids).
fn pattern_pixel(k: usize, r: usize, c: usize, side: usize) -> f64 {
    let s = side as f64;
    let (rf, cf) = (r as f64, c as f64);
    let bit = |on: bool| if on { 0.5 + PATTERN_AMP } else { 0.5 - PATTERN_AMP };
    let center = (s - 1.0) / 2.0;
    let dr = rf - center;
    let dc = cf - center;
    let radius = (dr * dr + dc * dc).sqrt();
    match k {
        0 => bit((r / 2).is_multiple_of(2)),                    // horizontal stripes
        1 => bit(!(r / 2).is_multiple_of(2)),                    // ... phase-shifted
        2 => bit((c / 2).is_multiple_of(2)),                    // vertical stripes
        3 => bit(!(c / 2).is_multiple_of(2)),                    // ... phase-shifted
        4 => bit((r / 2 + c / 2).is_multiple_of(2)),            // checkerboard
        5 => bit(((r + c) / 2).is_multiple_of(2)),              // diagonal stripes
        6 => bit(radius >= s * 0.22 && radius <= s * 0.40), // ring
        7 => bit(radius <= s * 0.33),                  // disc
        8 => bit(dr.abs() <= s * 0.12 || dc.abs() <= s * 0.12), // plus cross
        9 => bit((rf - cf).abs() <= s * 0.12 || (rf + cf - (s - 1.0)).abs() <= s * 0.12), // X
        10 => bit(r < 2 || c < 2 || r >= side - 2 || c >= side - 2), // frame
        11 => bit(c < side / 2),                       // left half
        12 => bit(r < side / 2),                       // top half
        13 => bit(r % 4 < 2 && c % 4 < 2),             // dot grid
        14 => bit(r % 4 >= 2 && c % 4 >= 2),           // ... offset
        15 => 0.5 + PATTERN_AMP * ((rf + cf) / (s - 1.0) - 1.0), // diagonal ramp
        _ => unreachable!("class id bounded by MAX_CLASSES"),
    }
}

fn render_split(
    num_classes: usize,
    per_class: usize,
    side: usize,
    noise_level: f64,
    rng: &mut RngStream,
) -> (DiffArray, Vec<usize>) {
    let d = side * side;
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        for _ in 0..per_class {
            for r in 0..side {
                for c in 0..side {
                    let base = pattern_pixel(class, r, c, side);
                    let v = base + noise_level * rng.normal_scalar();
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    (
        DiffArray::new(vec![n, d], data).expect("corpus shape"),
        labels,
    )
}

/// Procedurally generate a class-distinct toy corpus, deterministic per seed.
pub fn generate_toy_corpus(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    side: usize,
    noise_level: f64,
    seed: u64,
) -> Result<ToyCorpus> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::Config(format!(
            "num_classes must be in [2, {MAX_CLASSES}], got {num_classes}"
        )));
    }
    if !(8..=16).contains(&side) {
        return Err(Error::Config(format!("side must be in [8, 16], got {side}")));
    }
    if noise_level < 0.0 {
        return Err(Error::Config("noise_level must be nonnegative".into()));
    }
    let root = RngStream::from_seed(seed);
    let mut train_rng = root.substream(0x7261_494e); // train noise
    let mut test_rng = root.substream(0x7445_5354); // test noise
    let (train_images, train_labels) =
        render_split(num_classes, per_class_train, side, noise_level, &mut train_rng);
    let (test_images, test_labels) =
        render_split(num_classes, per_class_test, side, noise_level, &mut test_rng);
    Ok(ToyCorpus {
        train_images,
        train_labels,
        test_images,
        test_labels,
        side,
        num_classes,
    })
}

// ----- IDX ingestion -----

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Corrupt("IDX header truncated".into()))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parse an IDX image file: big-endian header, unsigned-byte pixels.
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if read_be_u32(&bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Corrupt(format!(
            "{} is not an IDX image file",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::Corrupt("IDX image payload size mismatch".into()));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

/// Parse an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if read_be_u32(&bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Corrupt(format!(
            "{} is not an IDX label file",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Corrupt("IDX label payload size mismatch".into()));
    }
    Ok(payload.to_vec())
}

/// Box-filter downsample of one `rows x cols` u8 image to `side x side`.
fn downsample(pixels: &[u8], rows: usize, cols: usize, side: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for tr in 0..side {
        let r0 = tr * rows / side;
        let r1 = ((tr + 1) * rows / side).max(r0 + 1);
        for tc in 0..side {
            let c0 = tc * cols / side;
            let c1 = ((tc + 1) * cols / side).max(c0 + 1);
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += pixels[r * cols + c] as f64;
                }
            }
            out.push(acc / (255.0 * ((r1 - r0) * (c1 - c0)) as f64));
        }
    }
    out
}

fn idx_split(
    images_path: &Path,
    labels_path: &Path,
    side: usize,
    num_classes: usize,
    per_class_cap: usize,
) -> Result<(DiffArray, Vec<usize>)> {
    let (n, rows, cols, pixels) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Corrupt("IDX image/label count mismatch".into()));
    }
    let d = side * side;
    let mut data = Vec::new();
    let mut kept = Vec::new();
    let mut counts = vec![0usize; num_classes];
    for i in 0..n {
        let y = labels[i] as usize;
        if y >= num_classes || counts[y] >= per_class_cap {
            continue;
        }
        counts[y] += 1;
        data.extend(downsample(&pixels[i * rows * cols..(i + 1) * rows * cols], rows, cols, side));
        kept.push(y);
    }
    Ok((DiffArray::new(vec![kept.len(), d], data)?, kept))
}

/// Build a corpus from IDX train/test files, downsampled to `side x side`
/// and restricted to labels below `num_classes`.
#[allow(clippy::too_many_arguments)]
pub fn corpus_from_idx(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
    side: usize,
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
) -> Result<ToyCorpus> {
    let (train_images, train_labels) =
        idx_split(train_images, train_labels, side, num_classes, per_class_train)?;
    let (test_images, test_labels) =
        idx_split(test_images, test_labels, side, num_classes, per_class_test)?;
    Ok(ToyCorpus {
        train_images,
        train_labels,
        test_images,
        test_labels,
        side,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_identical_class_images() {
        let c = generate_toy_corpus(4, 5, 2, 12, 0.0, 9).unwrap();
        for class in 0..4 {
            let idx = c.train_class_indices(class);
            let first = c.train_images.row(idx[0]).to_vec();
            for &i in &idx[1..] {
                assert_eq!(c.train_images.row(i), &first[..]);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_toy_corpus(4, 8, 4, 12, 0.15, 77).unwrap();
        let b = generate_toy_corpus(4, 8, 4, 12, 0.15, 77).unwrap();
        assert_eq!(a.train_images, b.train_images);
        assert_eq!(a.test_images, b.test_images);
        assert_eq!(a.train_labels, b.train_labels);
    }

    #[test]
    fn splits_differ() {
        let c = generate_toy_corpus(4, 4, 4, 12, 0.15, 77).unwrap();
        assert_ne!(c.train_images.row(0), c.test_images.row(0));
    }

    #[test]
    fn pixels_in_range() {
        let c = generate_toy_corpus(16, 3, 1, 16, 0.5, 3).unwrap();
        assert!(c.train_images.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn unsupported_class_count_rejected() {
        assert!(generate_toy_corpus(1, 4, 4, 12, 0.1, 0).is_err());
        assert!(generate_toy_corpus(17, 4, 4, 12, 0.1, 0).is_err());
        assert!(generate_toy_corpus(4, 4, 4, 7, 0.1, 0).is_err());
    }

    #[test]
    fn idx_roundtrip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");

        // Two 4x4 images, labels 0 and 1.
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        img.extend((0..32).map(|i| (i * 8) as u8));
        std::fs::write(&img_path, &img).unwrap();

        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[0u8, 1u8]);
        std::fs::write(&lbl_path, &lbl).unwrap();

        let (n, r, c, _) = load_idx_images(&img_path).unwrap();
        assert_eq!((n, r, c), (2, 4, 4));
        assert_eq!(load_idx_labels(&lbl_path).unwrap(), vec![0, 1]);

        // Wrong magic is corrupt.
        std::fs::write(&img_path, &lbl).unwrap();
        assert!(matches!(
            load_idx_images(&img_path),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn downsample_preserves_mean_intensity() {
        let pixels: Vec<u8> = vec![100; 64];
        let out = downsample(&pixels, 8, 8, 8);
        assert!(out.iter().all(|&x| (x - 100.0 / 255.0).abs() < 1e-12));
        let smaller = downsample(&pixels, 8, 8, 4);
        assert_eq!(smaller.len(), 16);
        assert!(smaller.iter().all(|&x| (x - 100.0 / 255.0).abs() < 1e-12));
    }
}
