//! Datasets: MNIST IDX ingestion, area-pooling downscale, synthetic blobs
//! and a binary cache format.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcore::DenseTensor;
use crate::rng::{stream_rng, Stream};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const CACHE_MAGIC: &[u8; 4] = b"ORTD";
const CACHE_VERSION: u32 = 1;

/// Environment variable naming the directory with the four MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "MNIST_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            other => Err(Error::Corrupt {
                path: "dataset cache".into(),
                reason: format!("split code {other}"),
            }),
        }
    }
}

/// Labelled inputs in `[0, 1]`, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: DenseTensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Source file hashes or generator seed, followed by each transformation.
    pub provenance: String,
    /// `(height, width)` when rows are images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        inputs: DenseTensor,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        provenance: String,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("inputs must lie in [0, 1]".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        if let Some((h, w)) = image_shape {
            if h * w != inputs.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "{h}×{w} images in {}-dim rows",
                    inputs.cols()
                )));
            }
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            split,
            provenance,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `indices` as a new dataset.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
            image_shape: self.image_shape,
        }
    }

    /// Writes the `ORTD` cache format.
    pub fn write_cache<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&CACHE_VERSION.to_le_bytes())?;
        out.write_all(&[self.split.code()])?;
        let (h, w) = self.image_shape.unwrap_or((0, 0));
        for v in [self.classes, self.len(), self.dim(), h, w, self.provenance.len()] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(self.provenance.as_bytes())?;
        for v in self.inputs.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        for &y in &self.labels {
            let y = u16::try_from(y).map_err(|_| Error::InvalidParameter(format!("label {y} exceeds u16")))?;
            out.write_all(&y.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_cache_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_cache(&mut buf)?;
        Ok(buf)
    }

    /// Parses the `ORTD` cache format.
    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Truncated("dataset cache".into()));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let magic = take(4)?;
        if magic != CACHE_MAGIC {
            return Err(Error::BadMagic {
                what: "dataset cache".into(),
                expected: "ORTD".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported cache version {version}")));
        }
        let split = Split::from_code(take(1)?[0])?;
        let mut fields = [0usize; 6];
        for f in &mut fields {
            *f = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        }
        let [classes, n, d, h, w, plen] = fields;
        let provenance = String::from_utf8(take(plen)?.to_vec()).map_err(|_| Error::Corrupt {
            path: "dataset cache".into(),
            reason: "provenance is not UTF-8".into(),
        })?;
        let total = n
            .checked_mul(d)
            .ok_or_else(|| Error::Truncated("dataset cache".into()))?;
        let raw = take(
            total
                .checked_mul(8)
                .ok_or_else(|| Error::Truncated("dataset cache".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = take(n * 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if pos != bytes.len() {
            return Err(Error::Corrupt {
                path: "dataset cache".into(),
                reason: "trailing bytes".into(),
            });
        }
        let shape = (h > 0 && w > 0).then_some((h, w));
        Dataset::new(
            DenseTensor::new(vec![n, d], data)?,
            labels,
            classes,
            split,
            provenance,
            shape,
        )
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_cache_bytes()?)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        Self::from_cache_bytes(&std::fs::read(path)?)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(what.into()))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic {
            what: what.into(),
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image/label pair. Pixels are divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_idx(&images, &labels, split)
}

/// [`load_idx`] on in-memory file contents.
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    check_magic(images, IMAGES_MAGIC, "image file")?;
    check_magic(labels, LABELS_MAGIC, "label file")?;
    let n = be_u32(images, 4, "image file")? as usize;
    let h = be_u32(images, 8, "image file")? as usize;
    let w = be_u32(images, 12, "image file")? as usize;
    let m = be_u32(labels, 4, "label file")? as usize;
    if n != m {
        return Err(Error::CountMismatch { images: n, labels: m });
    }
    let pixels = &images[16..];
    if pixels.len() < n * h * w {
        return Err(Error::Truncated(format!(
            "image file: {} of {} pixel bytes",
            pixels.len(),
            n * h * w
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n {
        return Err(Error::Truncated(format!(
            "label file: {} of {n} labels",
            label_bytes.len()
        )));
    }
    let data = pixels[..n * h * w].iter().map(|&p| f64::from(p) / 255.0).collect();
    let ys: Vec<usize> = label_bytes[..n].iter().map(|&b| b as usize).collect();
    let provenance = format!("idx:images={},labels={}", sha256_hex(images), sha256_hex(labels));
    Dataset::new(
        DenseTensor::new(vec![n, h * w], data)?,
        ys,
        10,
        split,
        provenance,
        Some((h, w)),
    )
}

/// Directory holding the MNIST IDX files: `$MNIST_DIR`, else `/root/data/mnist`.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"))
}

/// Loads one MNIST split from `dir` using the distribution file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// First `n` samples.
pub fn take_first(ds: &Dataset, n: usize) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::NotEnoughSamples {
            requested: n,
            available: ds.len(),
        });
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut out = ds.select(&idx);
    out.provenance = format!("{}|first:{n}", ds.provenance);
    Ok(out)
}

/// `out × len` matrix whose row `o` averages the fractional bin
/// `[o·len/out, (o+1)·len/out)`.
fn pooling_weights(len: usize, out: usize) -> Vec<f64> {
    let bin = len as f64 / out as f64;
    let mut wts = vec![0.0; out * len];
    for o in 0..out {
        let (lo, hi) = (o as f64 * bin, (o + 1) as f64 * bin);
        for i in (lo.floor() as usize)..(hi.ceil() as usize).min(len) {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            wts[o * len + i] = overlap / bin;
        }
    }
    wts
}

/// Area-weighted average pooling of every image to `side × side`.
pub fn resize_avgpool(ds: &Dataset, side: usize) -> Result<Dataset> {
    let (h, w) = ds
        .image_shape
        .ok_or_else(|| Error::InvalidParameter("resize needs image-shaped rows".into()))?;
    if side == 0 || side > h || side > w {
        return Err(Error::InvalidParameter(format!("cannot pool {h}×{w} to {side}×{side}")));
    }
    let rw = pooling_weights(h, side);
    let cw = pooling_weights(w, side);
    let mut data = Vec::with_capacity(ds.len() * side * side);
    let mut tmp = vec![0.0; side * w];
    for n in 0..ds.len() {
        let img = ds.inputs.row(n);
        let (lo, hi) = img
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        tmp.fill(0.0);
        for o in 0..side {
            for i in 0..h {
                let r = rw[o * h + i];
                if r != 0.0 {
                    for j in 0..w {
                        tmp[o * w + j] += r * img[i * w + j];
                    }
                }
            }
        }
        for o in 0..side {
            for q in 0..side {
                let v: f64 = (0..w).map(|j| cw[q * w + j] * tmp[o * w + j]).sum();
                data.push(v.clamp(lo, hi));
            }
        }
    }
    Dataset::new(
        DenseTensor::new(vec![ds.len(), side * side], data)?,
        ds.labels.clone(),
        ds.classes,
        ds.split,
        format!("{}|avgpool:{side}", ds.provenance),
        Some((side, side)),
    )
}

/// Gaussian blobs around uniform centroids in `[0.2, 0.8]^d`, clipped to
/// `[0, 1]`. Classes are interleaved: sample `i` has label `i mod K`.
pub fn synth_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidParameter(
            "blobs need ≥ 2 classes, a positive dimension and samples".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let centroids: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let mut noise = stream_rng(seed, Stream::Data, 1);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, centroid) in centroids.iter().enumerate() {
            for &m in centroid {
                let z: f64 = StandardNormal.sample(&mut noise);
                data.push((m + spread * z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        DenseTensor::new(vec![labels.len(), dim], data)?,
        labels,
        classes,
        Split::Train,
        format!("blobs:k={classes},d={dim},n={per_class},spread={spread},seed={seed}"),
        None,
    )
}
