//! Image classification datasets: in-memory tensors, a binary on-disk layout
//! and a synthetic generator.
//!
//! On-disk layout of one split directory (all integers u32 little-endian):
//!
//! ```text
//! images.bin  "FSNI" version=1 n c h w   then n*c*h*w f32 LE values (NCHW)
//! labels.bin  "FSNL" version=1 n classes then n u32 labels
//! ```
//!
//! A dataset root holds `train/` and `test/` split directories.

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::seed;
use crate::space::SearchSpace;

const IMAGES_MAGIC: &[u8; 4] = b"FSNI";
const LABELS_MAGIC: &[u8; 4] = b"FSNL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Validation(format!("images must be NCHW, got shape {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.gather_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            images: self.images.slice_rows(start, end),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// First half for training, second half for validation.
    pub fn split_half(&self) -> (Dataset, Dataset) {
        let mid = self.len().div_ceil(2);
        (self.slice(0, mid), self.slice(mid, self.len()))
    }

    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if self.sample_shape() != space.input_shape {
            return Err(Error::Config(format!(
                "dataset samples are {:?}, space expects {:?}",
                self.sample_shape(),
                space.input_shape
            )));
        }
        if self.num_classes > space.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, space classifier has {}",
                self.num_classes, space.num_classes
            )));
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("images.bin");
        let mut w = BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        let s = self.images.shape();
        let mut head = IMAGES_MAGIC.to_vec();
        for v in [FORMAT_VERSION, s[0] as u32, s[1] as u32, s[2] as u32, s[3] as u32] {
            head.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&head).map_err(|e| Error::io(&path, e))?;
        for v in self.images.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("labels.bin");
        let mut w = BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
        let mut head = LABELS_MAGIC.to_vec();
        for v in [FORMAT_VERSION, self.len() as u32, self.num_classes as u32] {
            head.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&head).map_err(|e| Error::io(&path, e))?;
        for &l in &self.labels {
            w.write_all(&(l as u32).to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("images.bin");
        let mut r = open(&path)?;
        let [n, c, h, w] = read_header(&mut r, &path, IMAGES_MAGIC)?;
        let count = n * c * h * w;
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::io(&path, e))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let images = Tensor::new(vec![n, c, h, w], data)?;

        let path = dir.join("labels.bin");
        let mut r = open(&path)?;
        let [m, classes] = read_header(&mut r, &path, LABELS_MAGIC)?;
        let mut bytes = vec![0u8; m * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::io(&path, e))?;
        let labels = bytes.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize).collect();
        Dataset::new(images, labels, classes)
    }
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    Ok(BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

fn read_header<const N: usize>(r: &mut impl Read, path: &Path, magic: &[u8; 4]) -> Result<[usize; N]> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| Error::io(path, e))?;
    if &m != magic {
        return Err(Error::Validation(format!("{}: bad magic {:?}", path.display(), m)));
    }
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != FORMAT_VERSION {
        return Err(Error::Validation(format!("{}: unsupported version {version}", path.display())));
    }
    let mut out = [0usize; N];
    for v in &mut out {
        *v = word()? as usize;
    }
    Ok(out)
}

/// Load `<root>/train` and `<root>/test`.
pub fn load_split(root: &Path) -> Result<(Dataset, Dataset)> {
    Ok((Dataset::load_dir(&root.join("train"))?, Dataset::load_dir(&root.join("test"))?))
}

pub fn save_split(root: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    train.save_dir(&root.join("train"))?;
    test.save_dir(&root.join("test"))
}

/// Synthetic image classification task.
///
/// Each class owns a per-channel planar grating (integer frequencies,
/// random orientation) and a small per-channel mean offset. Samples are
/// randomly translated, amplitude-jittered copies of their class pattern plus
/// Gaussian pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// (channels, height, width)
    pub shape: [usize; 3],
    pub noise: f64,
    pub offset_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn for_space(space: &SearchSpace, seed: u64) -> Self {
        SyntheticSpec {
            num_classes: space.num_classes,
            train_per_class: 256,
            test_per_class: 128,
            shape: space.input_shape,
            noise: 2.0,
            offset_scale: 0.15,
            seed,
        }
    }
}

struct ClassPattern {
    freqs: Vec<(i32, i32)>,
    phase: Vec<f64>,
    offset: Vec<f64>,
}

fn draw_patterns(spec: &SyntheticSpec, rng: &mut seed::Rng) -> Vec<ClassPattern> {
    let [c, _, _] = spec.shape;
    let offset = Normal::new(0.0, spec.offset_scale.max(0.0)).expect("finite std");
    let mut used = Vec::new();
    let mut out = Vec::new();
    for _ in 0..spec.num_classes {
        let mut freqs;
        let mut tries = 0;
        loop {
            freqs = (0..c)
                .map(|_| loop {
                    let f = (rng.random_range(-2..=2), rng.random_range(0..=2));
                    if f != (0, 0) {
                        break f;
                    }
                })
                .collect::<Vec<_>>();
            tries += 1;
            if !used.contains(&freqs) || tries > 100 {
                break;
            }
        }
        used.push(freqs.clone());
        out.push(ClassPattern {
            freqs,
            phase: (0..c).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
            offset: (0..c).map(|_| offset.sample(rng)).collect(),
        });
    }
    out
}

fn render(
    p: &ClassPattern,
    spec: &SyntheticSpec,
    rng: &mut seed::Rng,
    noise: &Normal<f64>,
    out: &mut Vec<f32>,
) {
    let [c, h, w] = spec.shape;
    let dx = rng.random_range(0..w.max(1)) as f64;
    let dy = rng.random_range(0..h.max(1)) as f64;
    let amp = rng.random_range(0.6..1.4);
    for ch in 0..c {
        let (fx, fy) = p.freqs[ch];
        for y in 0..h {
            for x in 0..w {
                let arg = 2.0 * PI * (fx as f64 * (x as f64 + dx) / w as f64 + fy as f64 * (y as f64 + dy) / h as f64);
                let v = amp * (arg + p.phase[ch]).cos() + p.offset[ch] + noise.sample(rng);
                out.push(v as f32);
            }
        }
    }
}

/// Generate (train, test) splits. Samples are shuffled, so any contiguous
/// slice is roughly class balanced.
pub fn synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let [c, h, w] = spec.shape;
    if spec.num_classes < 2 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Validation(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Validation(format!("noise must be a finite non-negative number, got {}", spec.noise)));
    }
    let mut rng = seed::rng(seed::derive(spec.seed, "synthetic-patterns"));
    let patterns = draw_patterns(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise).expect("checked std");
    let make = |per_class: usize, stream: &str| -> Result<Dataset> {
        let mut rng = seed::rng(seed::derive(spec.seed, stream));
        let mut labels: Vec<usize> = (0..spec.num_classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(labels.len() * c * h * w);
        for &l in &labels {
            render(&patterns[l], spec, &mut rng, &noise, &mut data);
        }
        Dataset::new(Tensor::new(vec![labels.len(), c, h, w], data)?, labels, spec.num_classes)
    };
    Ok((make(spec.train_per_class, "synthetic-train")?, make(spec.test_per_class, "synthetic-test")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            train_per_class: 10,
            test_per_class: 4,
            shape: [2, 5, 6],
            noise: 0.5,
            offset_scale: 0.1,
            seed: 9,
        }
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let (tr, te) = synthetic(&small()).unwrap();
        assert_eq!(tr.images().shape(), &[30, 2, 5, 6]);
        assert_eq!(te.len(), 12);
        for k in 0..3 {
            assert_eq!(tr.labels().iter().filter(|&&l| l == k).count(), 10);
        }
        let (tr2, _) = synthetic(&small()).unwrap();
        assert_eq!(tr, tr2);
        let (tr3, _) = synthetic(&SyntheticSpec { seed: 10, ..small() }).unwrap();
        assert_ne!(tr, tr3);
    }

    #[test]
    fn binary_round_trip() {
        let (tr, te) = synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_split(dir.path(), &tr, &te).unwrap();
        let (a, b) = load_split(dir.path()).unwrap();
        assert_eq!((a, b), (tr, te));
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("images.bin"), b"XXXX").unwrap();
        assert!(matches!(Dataset::load_dir(dir.path()), Err(Error::Validation(_))));
        assert!(Dataset::load_dir(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn split_half_sizes() {
        let (tr, _) = synthetic(&small()).unwrap();
        let (a, b) = tr.split_half();
        assert_eq!((a.len(), b.len()), (15, 15));
        assert_eq!(a.labels(), &tr.labels()[..15]);
    }

    #[test]
    fn label_validation() {
        let img = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(Dataset::new(img.clone(), vec![0, 3], 3).is_err());
        assert!(Dataset::new(img, vec![0], 3).is_err());
    }
}
