//! Datasets: synthetic generation, IDX container ingestion, minimal
//! augmentation, and the duplicate-after-augment batching the co-training
//! step consumes.
//!
//! Duplication always happens AFTER augmentation, so the two copies of a
//! sample are elementwise identical (rows `2i` and `2i+1` of a duplicated
//! batch).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::EngineRng;
use crate::tensor::Tensor;

/// Labeled dataset: `samples` is `(N, dims)` for vector data or
/// `(N, H, W)` for images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    /// Which split this is ("train", "test", "all").
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flat length of one sample row.
    pub fn row_len(&self) -> usize {
        self.samples.numel() / self.len().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::invalid("dataset", "empty dataset"));
        }
        if self.samples.shape()[0] != self.labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} sample rows vs {} labels", self.samples.shape()[0], self.labels.len()),
            ));
        }
        for &l in &self.labels {
            if l as usize >= self.num_classes {
                return Err(Error::IndexOutOfRange {
                    op: "dataset",
                    index: l as usize,
                    size: self.num_classes,
                });
            }
        }
        Ok(())
    }

    /// Split off the first `n_head` samples (the remainder becomes the
    /// second dataset). Labels are assigned round-robin by the generators,
    /// so both sides stay class-balanced within one sample.
    pub fn split_at(self, n_head: usize, head_name: &str, tail_name: &str) -> Result<(Dataset, Dataset)> {
        if n_head == 0 || n_head >= self.len() {
            return Err(Error::invalid("split_at", format!("bad split point {n_head}")));
        }
        let row = self.row_len();
        let mut head_shape = self.samples.shape().to_vec();
        head_shape[0] = n_head;
        let mut tail_shape = self.samples.shape().to_vec();
        tail_shape[0] = self.len() - n_head;
        let head = Dataset {
            samples: Tensor::new(head_shape, self.samples.data()[..n_head * row].to_vec())?,
            labels: self.labels[..n_head].to_vec(),
            num_classes: self.num_classes,
            split: head_name.to_string(),
        };
        let tail = Dataset {
            samples: Tensor::new(tail_shape, self.samples.data()[n_head * row..].to_vec())?,
            labels: self.labels[n_head..].to_vec(),
            num_classes: self.num_classes,
            split: tail_name.to_string(),
        };
        Ok((head, tail))
    }
}

/// Synthetic dataset family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    GaussianMixture,
    Spirals,
}

/// Reproducible synthetic dataset.
///
/// Gaussian mixture: one standard-normal centroid per class (drawn from the
/// seed's stream 0), samples are `centroid + noise * normal` (stream 1).
/// Spirals: interleaved Archimedean arms in the first two dims, remaining
/// dims pure noise. Labels are assigned round-robin, so the class histogram
/// is uniform within one sample.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n: usize,
    dims: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("gen_synthetic", "need at least 2 classes"));
    }
    if n == 0 || dims == 0 {
        return Err(Error::invalid("gen_synthetic", "empty dataset requested"));
    }
    if kind == SyntheticKind::Spirals && dims < 2 {
        return Err(Error::invalid("gen_synthetic", "spirals need at least 2 dims"));
    }
    let mut structure_rng = EngineRng::derive(seed, 0);
    let mut sample_rng = EngineRng::derive(seed, 1);

    let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    let mut data = vec![0.0f32; n * dims];
    match kind {
        SyntheticKind::GaussianMixture => {
            let centroids: Vec<f64> =
                (0..classes * dims).map(|_| structure_rng.normal()).collect();
            for (i, &label) in labels.iter().enumerate() {
                let c = &centroids[label as usize * dims..(label as usize + 1) * dims];
                for d in 0..dims {
                    data[i * dims + d] = (c[d] + noise * sample_rng.normal()) as f32;
                }
            }
        }
        SyntheticKind::Spirals => {
            for (i, &label) in labels.iter().enumerate() {
                let t = sample_rng.uniform(); // position along the arm
                let r = 0.3 + 2.0 * t;
                let theta = 3.0 * std::f64::consts::PI * t
                    + std::f64::consts::TAU * label as f64 / classes as f64;
                data[i * dims] = (r * theta.cos() + noise * sample_rng.normal()) as f32;
                data[i * dims + 1] = (r * theta.sin() + noise * sample_rng.normal()) as f32;
                for d in 2..dims {
                    data[i * dims + d] = (noise * sample_rng.normal()) as f32;
                }
            }
        }
    }
    Ok(Dataset {
        samples: Tensor::new(vec![n, dims], data)?,
        labels,
        num_classes: classes,
        split: "all".to_string(),
    })
}

// ---- IDX container ----------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { path: path.to_string(), msg: "truncated header".into() })
}

/// Parse a big-endian IDX image/label pair into a dataset with pixels scaled
/// to `[0, 1]` (shape `(N, rows, cols)`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)
        .map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let labels = std::fs::read(labels_path)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let magic = read_be_u32(&images, 0, &ipath)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: ipath,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&images, 4, &ipath)? as usize;
    let rows = read_be_u32(&images, 8, &ipath)? as usize;
    let cols = read_be_u32(&images, 12, &ipath)? as usize;
    let expected = 16 + n * rows * cols;
    if images.len() != expected {
        return Err(Error::Format {
            path: ipath,
            msg: format!("payload {} bytes, header implies {expected}", images.len()),
        });
    }

    let lmagic = read_be_u32(&labels, 0, &lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: lpath,
            msg: format!("bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = read_be_u32(&labels, 4, &lpath)? as usize;
    if labels.len() != 8 + ln {
        return Err(Error::Format {
            path: lpath,
            msg: format!("payload {} bytes, header implies {}", labels.len(), 8 + ln),
        });
    }
    if ln != n {
        return Err(Error::Format {
            path: lpath,
            msg: format!("{ln} labels for {n} images"),
        });
    }

    let data: Vec<f32> = images[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let label_vec: Vec<u32> = labels[8..].iter().map(|&b| b as u32).collect();
    let num_classes = label_vec.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(Dataset {
        samples: Tensor::new(vec![n, rows, cols], data)?,
        labels: label_vec,
        num_classes,
        split: "all".to_string(),
    })
}

/// Write raw u8 images in IDX format (big-endian header, magic 0x00000803).
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::invalid("write_idx_images", "pixel count mismatch"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    header.extend_from_slice(&(n as u32).to_be_bytes());
    header.extend_from_slice(&(rows as u32).to_be_bytes());
    header.extend_from_slice(&(cols as u32).to_be_bytes());
    f.write_all(&header).and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write u8 labels in IDX format (magic 0x00000801).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = Vec::with_capacity(8);
    header.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    header.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    f.write_all(&header).and_then(|_| f.write_all(labels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Re-encode a `[0, 1]`-scaled image dataset back to IDX bytes (inverse of
/// [`load_idx`] up to the u8 quantization, which round-trips exactly).
pub fn dataset_to_idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = ds.samples.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("dataset_to_idx_bytes", "not an image dataset"));
    }
    let mut images = Vec::with_capacity(16 + ds.samples.numel());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(shape[0] as u32).to_be_bytes());
    images.extend_from_slice(&(shape[1] as u32).to_be_bytes());
    images.extend_from_slice(&(shape[2] as u32).to_be_bytes());
    images.extend(ds.samples.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.labels.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.labels.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

// ---- augmentation --------------------------------------------------------------

/// Per-sample augmentation policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentPolicy {
    None,
    /// Mirror (probability 0.5 per sample): images flip their column axis,
    /// vectors reverse their feature order.
    Flip,
    /// Flip plus additive Gaussian noise of the given deviation.
    FlipNoise(f64),
}

/// Mirror one sample in place: columns for images, feature order for
/// vectors. Applying it twice is the identity.
fn mirror_row(row: &mut [f32], cols: usize) {
    for r in row.chunks_mut(cols) {
        r.reverse();
    }
}

/// Apply the policy to a batch (labels are untouched). Transforms are drawn
/// independently per sample.
pub fn augment(batch: &mut Tensor<f32>, policy: AugmentPolicy, rng: &mut EngineRng) {
    let shape = batch.shape().to_vec();
    let n = shape[0];
    if n == 0 {
        return;
    }
    let row_len: usize = shape[1..].iter().product();
    let cols = *shape.last().unwrap();
    let (flip, noise) = match policy {
        AugmentPolicy::None => return,
        AugmentPolicy::Flip => (true, 0.0),
        AugmentPolicy::FlipNoise(sigma) => (true, sigma),
    };
    let data = batch.data_mut();
    for i in 0..n {
        let row = &mut data[i * row_len..(i + 1) * row_len];
        if flip && rng.coin(0.5) {
            mirror_row(row, cols);
        }
        if noise > 0.0 {
            for v in row.iter_mut() {
                *v += (noise * rng.normal()) as f32;
            }
        }
    }
}

// ---- batching ----------------------------------------------------------------

/// One training batch. When `duplicated`, rows `2i` and `2i+1` are identical
/// copies of the same augmented sample (copy ids 0 and 1).
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<u32>,
    pub duplicated: bool,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

/// Batches for one epoch: shuffle, chunk (dropping the last partial batch so
/// the effective drop rate stays constant across steps), augment, then
/// optionally duplicate each augmented sample into two adjacent rows.
pub fn epoch_batches(
    ds: &Dataset,
    batch_size: usize,
    duplicate: bool,
    policy: AugmentPolicy,
    rng: &mut EngineRng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::invalid(
            "epoch_batches",
            format!("batch size {batch_size} for {} samples", ds.len()),
        ));
    }
    let row_len = ds.row_len();
    let order = rng.permutation(ds.len());
    let mut out = Vec::with_capacity(ds.len() / batch_size);
    for chunk in order.chunks_exact(batch_size) {
        let mut shape = ds.samples.shape().to_vec();
        shape[0] = batch_size;
        let mut data = Vec::with_capacity(batch_size * row_len);
        let mut labels = Vec::with_capacity(batch_size);
        for &idx in chunk {
            data.extend_from_slice(&ds.samples.data()[idx * row_len..(idx + 1) * row_len]);
            labels.push(ds.labels[idx]);
        }
        let mut x = Tensor::new(shape, data)?;
        augment(&mut x, policy, rng);
        if duplicate {
            let mut dshape = x.shape().to_vec();
            dshape[0] = 2 * batch_size;
            let mut ddata = Vec::with_capacity(2 * batch_size * row_len);
            let mut dlabels = Vec::with_capacity(2 * batch_size);
            for i in 0..batch_size {
                let row = &x.data()[i * row_len..(i + 1) * row_len];
                ddata.extend_from_slice(row);
                ddata.extend_from_slice(row);
                dlabels.push(labels[i]);
                dlabels.push(labels[i]);
            }
            out.push(Batch { x: Tensor::new(dshape, ddata)?, labels: dlabels, duplicated: true });
        } else {
            out.push(Batch { x, labels, duplicated: false });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_mixture_is_nearest_centroid_separable() {
        let ds = gen_synthetic(SyntheticKind::GaussianMixture, 60, 5, 3, 0.0, 7).unwrap();
        ds.validate().unwrap();
        // noise = 0 puts every sample exactly on its class centroid; nearest
        // class-mean classification is perfect.
        let dims = 5;
        let mut centroids = vec![vec![0.0f64; dims]; 3];
        let mut counts = [0usize; 3];
        for (i, &l) in ds.labels.iter().enumerate() {
            counts[l as usize] += 1;
            for d in 0..dims {
                centroids[l as usize][d] += ds.samples.data()[i * dims + d] as f64;
            }
        }
        for (c, count) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= count as f64;
            }
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let row = &ds.samples.data()[i * dims..(i + 1) * dims];
            let best = (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = row
                        .iter()
                        .zip(&centroids[a])
                        .map(|(&x, &c)| (x as f64 - c).powi(2))
                        .sum();
                    let db: f64 = row
                        .iter()
                        .zip(&centroids[b])
                        .map(|(&x, &c)| (x as f64 - c).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.labels[i] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn same_seed_identical_data() {
        let a = gen_synthetic(SyntheticKind::GaussianMixture, 50, 8, 4, 0.3, 9).unwrap();
        let b = gen_synthetic(SyntheticKind::GaussianMixture, 50, 8, 4, 0.3, 9).unwrap();
        assert_eq!(a.samples.data(), b.samples.data());
        assert_eq!(a.labels, b.labels);
        let c = gen_synthetic(SyntheticKind::GaussianMixture, 50, 8, 4, 0.3, 10).unwrap();
        assert_ne!(a.samples.data(), c.samples.data());
    }

    #[test]
    fn class_histogram_uniform_within_one() {
        for kind in [SyntheticKind::GaussianMixture, SyntheticKind::Spirals] {
            let ds = gen_synthetic(kind, 47, 4, 5, 0.1, 1).unwrap();
            let mut hist = [0usize; 5];
            for &l in &ds.labels {
                hist[l as usize] += 1;
            }
            let (min, max) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert!(max - min <= 1, "{hist:?}");
        }
    }

    #[test]
    fn idx_golden_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("cosub-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");

        // Hand-crafted fixture: 2 images of 3x3 with known bytes.
        let pixels: Vec<u8> = (0..18).map(|i| (i * 13) as u8).collect();
        write_idx_images(&img_path, &pixels, 2, 3, 3).unwrap();
        write_idx_labels(&lbl_path, &[3, 7]).unwrap();

        let ds = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(ds.samples.shape(), &[2, 3, 3]);
        assert_eq!(ds.labels, vec![3, 7]);
        for (i, &p) in pixels.iter().enumerate() {
            assert_eq!(ds.samples.data()[i], p as f32 / 255.0);
        }

        // Bit-exact re-encoding.
        let (ibytes, lbytes) = dataset_to_idx_bytes(&ds).unwrap();
        assert_eq!(ibytes, std::fs::read(&img_path).unwrap());
        assert_eq!(lbytes, std::fs::read(&lbl_path).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_rejects_bad_magic_truncation_and_count_mismatch() {
        let dir = std::env::temp_dir().join(format!("cosub-idx-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("images.idx");
        let lbl_path = dir.join("labels.idx");
        write_idx_images(&img_path, &[0u8; 8], 2, 2, 2).unwrap();
        write_idx_labels(&lbl_path, &[0, 1]).unwrap();

        // Wrong magic.
        let mut bad = std::fs::read(&img_path).unwrap();
        bad[3] = 0x99;
        let bad_path = dir.join("bad.idx");
        std::fs::write(&bad_path, &bad).unwrap();
        let err = load_idx(&bad_path, &lbl_path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        // Truncated payload.
        let full = std::fs::read(&img_path).unwrap();
        std::fs::write(&bad_path, &full[..full.len() - 3]).unwrap();
        let err = load_idx(&bad_path, &lbl_path).unwrap_err().to_string();
        assert!(err.contains("header implies"), "{err}");

        // Image/label count mismatch.
        write_idx_labels(&lbl_path, &[0, 1, 2]).unwrap();
        let err = load_idx(&img_path, &lbl_path).unwrap_err().to_string();
        assert!(err.contains("labels for"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn augment_none_is_identity() {
        let mut rng = EngineRng::seed_from_u64(3);
        let mut x = Tensor::new(vec![4, 6], (0..24).map(|v| v as f32).collect()).unwrap();
        let before = x.clone();
        augment(&mut x, AugmentPolicy::None, &mut rng);
        assert_eq!(x.data(), before.data());
    }

    #[test]
    fn mirror_twice_is_identity() {
        let mut row: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let orig = row.clone();
        mirror_row(&mut row, 4); // treat as a 3x4 image
        assert_ne!(row, orig);
        mirror_row(&mut row, 4);
        assert_eq!(row, orig);
    }

    #[test]
    fn noise_perturbation_matches_half_normal_mean() {
        // E|noise| = sigma * sqrt(2/pi).
        let mut rng = EngineRng::seed_from_u64(4);
        let n = 40_000;
        let sigma = 0.1;
        let mut x = Tensor::zeros(&[n, 1]);
        augment(&mut x, AugmentPolicy::FlipNoise(sigma), &mut rng);
        let mean_abs: f64 =
            x.data().iter().map(|v| v.abs() as f64).sum::<f64>() / n as f64;
        let expect = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_abs - expect).abs() < 0.002, "{mean_abs} vs {expect}");
    }

    #[test]
    fn duplicated_batches_have_identical_adjacent_rows() {
        let ds = gen_synthetic(SyntheticKind::GaussianMixture, 32, 6, 4, 0.5, 5).unwrap();
        let mut rng = EngineRng::seed_from_u64(6);
        let batches =
            epoch_batches(&ds, 8, true, AugmentPolicy::FlipNoise(0.1), &mut rng).unwrap();
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert!(b.duplicated);
            assert_eq!(b.rows(), 16);
            for i in 0..8 {
                let r0 = &b.x.data()[(2 * i) * 6..(2 * i + 1) * 6];
                let r1 = &b.x.data()[(2 * i + 1) * 6..(2 * i + 2) * 6];
                assert_eq!(r0, r1);
                assert_eq!(b.labels[2 * i], b.labels[2 * i + 1]);
            }
        }
    }

    #[test]
    fn epoch_covers_every_sample_once() {
        // With batch_size dividing N, the epoch is a partition of the
        // dataset (drop-last never fires).
        let ds = gen_synthetic(SyntheticKind::GaussianMixture, 24, 3, 3, 0.2, 8).unwrap();
        let mut rng = EngineRng::seed_from_u64(9);
        let batches = epoch_batches(&ds, 6, false, AugmentPolicy::None, &mut rng).unwrap();
        let mut seen: Vec<Vec<f32>> = Vec::new();
        for b in &batches {
            for i in 0..b.rows() {
                seen.push(b.x.data()[i * 3..(i + 1) * 3].to_vec());
            }
        }
        assert_eq!(seen.len(), 24);
        let mut all: Vec<Vec<f32>> =
            (0..24).map(|i| ds.samples.data()[i * 3..(i + 1) * 3].to_vec()).collect();
        let key = |v: &Vec<f32>| v.iter().map(|f| f.to_bits()).collect::<Vec<u32>>();
        seen.sort_by_key(key);
        all.sort_by_key(key);
        assert_eq!(seen, all);
    }

    #[test]
    fn batches_deterministic_given_seed() {
        let ds = gen_synthetic(SyntheticKind::Spirals, 30, 4, 3, 0.05, 2).unwrap();
        let run = || {
            let mut rng = EngineRng::seed_from_u64(11);
            let batches =
                epoch_batches(&ds, 10, true, AugmentPolicy::FlipNoise(0.02), &mut rng).unwrap();
            batches.iter().flat_map(|b| b.x.data().to_vec()).collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn split_preserves_balance() {
        let ds = gen_synthetic(SyntheticKind::GaussianMixture, 100, 4, 10, 0.2, 3).unwrap();
        let (train, test) = ds.split_at(70, "train", "test").unwrap();
        assert_eq!(train.len(), 70);
        assert_eq!(test.len(), 30);
        assert_eq!(train.split, "train");
        let mut hist = [0usize; 10];
        for &l in &train.labels {
            hist[l as usize] += 1;
        }
        let (min, max) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(max - min <= 1);
    }
}
