//! `.sgd` labelled-sample files and the seeded synthetic blob generator.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! magic        b"SGD1"
//! count        N
//! rank         R
//! dims         R values, the per-sample feature shape
//! num_classes  K
//! features     N * prod(dims) f32 LE, sample-major
//! labels       N u32 LE, each < K
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SGD1";

/// In-memory labelled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_shape: Vec<usize>,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(feature_shape: Vec<usize>, num_classes: usize, features: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let per: usize = feature_shape.iter().product();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::shape(
                "Dataset",
                format!(
                    "{} feature values for {} samples of shape {feature_shape:?}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::index("Dataset", format!("label {l} >= num_classes {num_classes}")));
        }
        Ok(Self {
            feature_shape,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    fn sample_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    /// Stack the selected samples into a `[B, ...feature_shape]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::index("Dataset::batch", format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.features[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * (self.features.len() + self.labels.len()));
        out.extend_from_slice(MAGIC);
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(self.len() as u32);
        put(self.feature_shape.len() as u32);
        for &d in &self.feature_shape {
            put(d as u32);
        }
        put(self.num_classes as u32);
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("dataset", d.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing SGD1 header"));
        }
        let mut at = 4;
        let mut word = || -> Result<u32> {
            let w = bytes.get(at..at + 4).ok_or_else(|| bad("truncated header"))?;
            at += 4;
            Ok(u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
        };
        let count = word()? as usize;
        let rank = word()? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad("feature rank must be 1..=8"));
        }
        let shape = (0..rank).map(|_| word().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let num_classes = word()? as usize;
        let per: usize = shape.iter().product();
        let need = at + 4 * count * per + 4 * count;
        if bytes.len() != need {
            return Err(bad(&format!("expected {need} bytes, found {}", bytes.len())));
        }
        let feat_end = at + 4 * count * per;
        let features = bytes[at..feat_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let labels = bytes[feat_end..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Dataset::new(shape, num_classes, features, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parameters of the synthetic image-blob task.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Gaussian bumps drawn per class prototype.
    pub bumps: usize,
    /// Spatial standard deviation of a bump, in pixels.
    pub bump_sigma: f32,
    /// Per-pixel noise standard deviation.
    pub noise: f32,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 8,
            width: 8,
            num_classes: 2,
            bumps: 2,
            bump_sigma: 1.5,
            noise: 0.8,
        }
    }
}

/// Class prototypes rendered from random Gaussian bumps; samples are a
/// prototype plus i.i.d. Gaussian pixel noise.
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    config: BlobConfig,
    prototypes: Vec<Vec<f32>>,
}

impl BlobGenerator {
    pub fn new(config: BlobConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 1 || config.channels * config.height * config.width == 0 {
            return Err(Error::InvalidArgument("blob task needs >= 1 class and a non-empty image".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = (config.channels, config.height, config.width);
        let prototypes = (0..config.num_classes)
            .map(|_| {
                let mut img = vec![0.0f32; c * h * w];
                for _ in 0..config.bumps {
                    let cy = rng.random_range(0.0..h as f32);
                    let cx = rng.random_range(0.0..w as f32);
                    let amps: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                    for (ch, amp) in amps.iter().enumerate() {
                        for y in 0..h {
                            for x in 0..w {
                                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                                img[(ch * h + y) * w + x] +=
                                    amp * (-d2 / (2.0 * config.bump_sigma * config.bump_sigma)).exp();
                            }
                        }
                    }
                }
                img
            })
            .collect();
        Ok(Self { config, prototypes })
    }

    pub fn config(&self) -> &BlobConfig {
        &self.config
    }

    /// `count` class-balanced samples (label `i % K`) drawn with `seed`.
    pub fn generate(&self, count: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.config.num_classes;
        let per = self.prototypes[0].len();
        let mut features = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % k;
            for &p in &self.prototypes[label] {
                let z: f32 = StandardNormal.sample(&mut rng);
                features.push(p + self.config.noise * z);
            }
            labels.push(label as u32);
        }
        let c = &self.config;
        Dataset::new(vec![c.channels, c.height, c.width], k, features, labels)
    }
}
