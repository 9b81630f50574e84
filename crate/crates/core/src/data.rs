//! Datasets: IDX files and seeded class-conditional synthetic images.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
/// Images with a trailing channel dimension.
pub const IDX_MAGIC_IMAGES_HWC: u32 = 0x0000_0804;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, H, W, C]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be [n, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Precondition(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Precondition(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Precondition(format!(
                    "example {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), h, w, c], data)?, labels))
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Decodes an IDX image file into `[n, H, W, C]` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "images")?;
    let ndims = match magic {
        IDX_MAGIC_IMAGES => 3,
        IDX_MAGIC_IMAGES_HWC => 4,
        other => {
            return Err(Error::Format(format!(
                "images: bad magic 0x{other:08x}, expected 0x{IDX_MAGIC_IMAGES:08x}"
            )))
        }
    };
    let mut dims = (0..ndims)
        .map(|d| be_u32(bytes, 4 + 4 * d, "images").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    if ndims == 3 {
        dims.push(1);
    }
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    if expected == 0 {
        return Err(Error::Format(format!("images: empty dimensions {dims:?}")));
    }
    let body = &bytes[header..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "images: header {dims:?} needs {expected} pixel bytes, file has {}",
            body.len()
        )));
    }
    Tensor::new(dims, body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::Format(format!(
            "labels: bad magic 0x{magic:08x}, expected 0x{IDX_MAGIC_LABELS:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "labels: header says {n} labels, file has {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(images, labels, num_classes)
}

/// Encodes images as IDX, quantizing each pixel to `round(255 · v)`.
/// Single-channel data uses the three-dimension layout.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    if images.rank() != 4 {
        return Err(Error::Shape(format!(
            "expected [n, H, W, C], got {:?}",
            images.shape()
        )));
    }
    let s = images.shape();
    let dims: &[usize] = if s[3] == 1 { &s[..3] } else { s };
    let magic = if s[3] == 1 {
        IDX_MAGIC_IMAGES
    } else {
        IDX_MAGIC_IMAGES_HWC
    };
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + images.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::Precondition(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    Ok(out)
}

/// Writes `dataset` as an IDX image/label pair.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let write = |p: &Path, bytes: Vec<u8>| std::fs::write(p, bytes).map_err(|e| Error::io(p, e));
    write(images_path.as_ref(), encode_idx_images(&dataset.images)?)?;
    write(labels_path.as_ref(), encode_idx_labels(&dataset.labels)?)
}

/// Class-conditional images: a fixed uniform template per class plus
/// per-example Gaussian noise, clamped to `[0, 1]`.
///
/// Example `i` depends only on `(seed, i)`, so disjoint index ranges give
/// disjoint train and eval sets drawn from the same distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub noise_sigma: f32,
}

impl SyntheticSpec {
    pub const DEFAULT_NOISE_SIGMA: f32 = 0.1;

    pub fn new(num_classes: usize, height: usize, width: usize, channels: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            height,
            width,
            channels,
            seed,
            noise_sigma: Self::DEFAULT_NOISE_SIGMA,
        }
    }

    fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn template(&self, class: usize) -> Vec<f32> {
        let mut r = rng::stream(self.seed, "synthetic/template", class as u64);
        (0..self.pixels()).map(|_| r.gen::<f32>()).collect()
    }

    pub fn generate(&self, range: Range<usize>) -> Result<Dataset> {
        if self.num_classes == 0 || self.pixels() == 0 || range.is_empty() {
            return Err(Error::Precondition(format!(
                "synthetic data needs positive classes, extents and count: {self:?}, {range:?}"
            )));
        }
        let templates: Vec<Vec<f32>> = (0..self.num_classes).map(|k| self.template(k)).collect();
        let n = range.len();
        let mut data = Vec::with_capacity(n * self.pixels());
        let mut labels = Vec::with_capacity(n);
        for i in range {
            let mut r = rng::stream(self.seed, "synthetic/example", i as u64);
            let label = r.gen_range(0..self.num_classes);
            labels.push(label);
            for &t in &templates[label] {
                let z: f32 = StandardNormal.sample(&mut r);
                data.push((t + self.noise_sigma * z).clamp(0.0, 1.0));
            }
        }
        let images = Tensor::new(vec![n, self.height, self.width, self.channels], data)?;
        Dataset::new(images, labels, self.num_classes)
    }
}

/// `n` synthetic examples, indices `0..n`.
pub fn gen_synthetic(
    num_classes: usize,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<Dataset> {
    SyntheticSpec::new(num_classes, height, width, channels, seed).generate(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend([0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6]);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lbl)
    }

    #[test]
    fn parse_fixture() {
        let (img, lbl) = fixture();
        let x = parse_idx_images(&img).unwrap();
        assert_eq!(x.shape(), &[2, 2, 3, 1]);
        assert_eq!(x.data()[1], 1.0);
        assert_eq!(x.data()[2], 0.2);
        assert_eq!(parse_idx_labels(&lbl).unwrap(), vec![7, 3]);
    }

    #[test]
    fn bad_magic_names_value() {
        let (mut img, _) = fixture();
        img[3] = 0x02;
        let err = parse_idx_images(&img).unwrap_err().to_string();
        assert!(err.contains("0x00000802"), "{err}");
        let (img, _) = fixture();
        assert!(parse_idx_labels(&img).unwrap_err().to_string().contains("0x00000803"));
    }

    #[test]
    fn truncated_files() {
        let (img, lbl) = fixture();
        assert!(parse_idx_images(&img[..img.len() - 1]).is_err());
        assert!(parse_idx_images(&img[..6]).is_err());
        assert!(parse_idx_labels(&lbl[..9]).is_err());
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = fixture();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, encode_idx_labels(&[1, 2, 3]).unwrap()).unwrap();
        assert!(load_idx(&ip, &lp).unwrap_err().to_string().contains("2 images but 3 labels"));
        assert!(matches!(load_idx(dir.path().join("nope"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn byte_round_trip() {
        let (img, lbl) = fixture();
        let x = parse_idx_images(&img).unwrap();
        assert_eq!(encode_idx_images(&x).unwrap(), img);
        assert_eq!(encode_idx_labels(&parse_idx_labels(&lbl).unwrap()).unwrap(), lbl);
        let rgb = Tensor::from_fn(&[2, 2, 2, 3], |i| (i * 10) as f32 / 255.0);
        let bytes = encode_idx_images(&rgb).unwrap();
        assert_eq!(parse_idx_images(&bytes).unwrap(), rgb);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(5, 40, 4, 4, 2, 9).unwrap();
        let b = gen_synthetic(5, 40, 4, 4, 2, 9).unwrap();
        assert!(a.images.bitwise_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = gen_synthetic(5, 40, 4, 4, 2, 10).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn synthetic_single_class() {
        let d = gen_synthetic(1, 20, 3, 3, 1, 0).unwrap();
        assert!(d.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn synthetic_ranges_are_consistent() {
        let spec = SyntheticSpec::new(4, 3, 3, 1, 5);
        let all = spec.generate(0..30).unwrap();
        let tail = spec.generate(10..30).unwrap();
        assert_eq!(&all.labels[10..], &tail.labels[..]);
        assert_eq!(&all.images.data()[90..], tail.images.data());
    }

    #[test]
    fn nearest_template_oracle() {
        let spec = SyntheticSpec::new(10, 16, 16, 1, 3);
        let d = spec.generate(5000..7000).unwrap();
        let templates: Vec<Vec<f32>> = (0..10).map(|k| spec.template(k)).collect();
        let correct = d
            .images
            .data()
            .chunks(256)
            .zip(&d.labels)
            .filter(|(x, &y)| {
                let dist = |t: &Vec<f32>| -> f32 { x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum() };
                let best = (0..10)
                    .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])))
                    .unwrap();
                best == y
            })
            .count();
        assert!(correct as f64 / 2000.0 >= 0.99, "{correct}/2000");
    }

    #[test]
    fn gather_and_validation() {
        let d = gen_synthetic(3, 5, 2, 2, 1, 1).unwrap();
        let (x, y) = d.gather(&[4, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2, 1]);
        assert_eq!(y, vec![d.labels[4], d.labels[0]]);
        assert!(d.gather(&[5]).is_err());
        assert!(Dataset::new(Tensor::zeros(&[1, 1, 1, 1]), vec![3], 3).is_err());
    }
}
