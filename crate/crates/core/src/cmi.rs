//! Per-model binary camera-model classifier on RGB blocks.
//!
//! Class 1 is the target model (H1), class 0 any other model (H0). The score
//! `phi` is the softmax probability of class 1.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::camsim::{derive_seed, rng};
use crate::imaging::{write_atomic, BlockRef, RgbImage, DEFAULT_BLOCK_SIZE};
use crate::nnet::{sgd_train_with, LayerSpec, NetModel, Tensor, TrainConfig, TrainingSet};
use crate::{Error, Result};

pub const FULL_TARGET_BLOCKS: usize = 500;
pub const FULL_OTHER_BLOCKS: usize = 50;
pub const DESK_TARGET_BLOCKS: usize = 50;
pub const DESK_OTHER_BLOCKS: usize = 10;

/// Label of blocks from the target camera model.
pub const TARGET: usize = 1;
/// Label of blocks from any other camera model.
pub const OTHER: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingCounts {
    pub block_size: usize,
    pub target_per_image: usize,
    pub other_per_image: usize,
}

impl SamplingCounts {
    pub fn full() -> Self {
        SamplingCounts {
            block_size: DEFAULT_BLOCK_SIZE,
            target_per_image: FULL_TARGET_BLOCKS,
            other_per_image: FULL_OTHER_BLOCKS,
        }
    }

    pub fn desk() -> Self {
        SamplingCounts {
            block_size: DEFAULT_BLOCK_SIZE,
            target_per_image: DESK_TARGET_BLOCKS,
            other_per_image: DESK_OTHER_BLOCKS,
        }
    }
}

/// An image paired with the camera model that produced it.
#[derive(Clone, Copy, Debug)]
pub struct ModelImage<'a> {
    pub image: &'a RgbImage,
    pub model_id: &'a str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledBlock {
    /// `block.image` indexes the image list the dataset was sampled from.
    pub block: BlockRef,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmiDataset {
    pub target_model: String,
    pub counts: SamplingCounts,
    pub entries: Vec<LabeledBlock>,
}

impl CmiDataset {
    pub fn count(&self, label: usize) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

/// Draws uniformly placed blocks: `target_per_image` from each image of the
/// target model, `other_per_image` from every other image.
pub fn sample_blocks(
    images: &[ModelImage<'_>],
    target_model: &str,
    counts: SamplingCounts,
    seed: u64,
) -> Result<CmiDataset> {
    if counts.block_size < crate::imaging::MIN_BLOCK_SIZE {
        return Err(Error::Argument(format!(
            "block size {} is below the minimum {}",
            counts.block_size,
            crate::imaging::MIN_BLOCK_SIZE
        )));
    }
    let size = counts.block_size;
    let mut entries = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let (w, h) = (img.image.width(), img.image.height());
        if w < size || h < size {
            log::warn!("skipping image {k}: {w}x{h} is smaller than the {size}px block");
            continue;
        }
        let (n, label) = if img.model_id == target_model {
            (counts.target_per_image, TARGET)
        } else {
            (counts.other_per_image, OTHER)
        };
        let mut r = rng(derive_seed(seed, "cmi-blocks", k as u64));
        for _ in 0..n {
            let row = aligned_origin(&mut r, h - size);
            let col = aligned_origin(&mut r, w - size);
            entries.push(LabeledBlock {
                block: BlockRef::new(row, col, k, size),
                label,
            });
        }
    }
    Ok(CmiDataset {
        target_model: target_model.to_string(),
        counts,
        entries,
    })
}

/// Scale applied to the high-pass residual before it enters the network.
pub const HIGH_PASS_SCALE: f64 = 4.0;

/// Sampled blocks start on multiples of this many pixels. It covers both the
/// 2x2 CFA period and the 8x8 JPEG grid, and sliding windows on a stride that
/// is a multiple of it see the same phase the classifier was trained on.
pub const BLOCK_ALIGN: usize = 8;

/// Uniform block origin in `0..=limit` on the `BLOCK_ALIGN` lattice.
pub fn aligned_origin<R: Rng + ?Sized>(r: &mut R, limit: usize) -> usize {
    r.gen_range(0..=limit / BLOCK_ALIGN) * BLOCK_ALIGN
}

/// Gradient-norm cap for classifier training. Early batches otherwise take
/// steps large enough to silence every hidden unit.
pub const CLIP_NORM: f64 = 1.0;

/// Converts an RGB block into a `[3, size, size]` network input.
///
/// Each sample is replaced by its difference from the 3x3 box mean of the
/// same channel, divided by [`HIGH_PASS_SCALE`]. The mean is taken over the
/// full image, so pixels on a block edge see their true neighbours; only the
/// image border shrinks the box. Suppressing scene content this way leaves
/// the demosaicing, sharpening and quantization traces the classifier is
/// after, and stops it from memorizing scenes.
pub fn block_tensor(img: &RgbImage, block: &BlockRef) -> Result<Tensor> {
    block.check(img.width(), img.height())?;
    let (w, h) = (img.width(), img.height());
    let s = block.size;
    let src = img.data();
    let mut data = vec![0.0; 3 * s * s];
    for r in 0..s {
        let row = block.row + r;
        let rows = row.saturating_sub(1)..=(row + 1).min(h - 1);
        for c in 0..s {
            let col = block.col + c;
            let cols = col.saturating_sub(1)..=(col + 1).min(w - 1);
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for rr in rows.clone() {
                for cc in cols.clone() {
                    let base = (rr * w + cc) * 3;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += src[base + ch];
                    }
                    n += 1.0;
                }
            }
            let base = (row * w + col) * 3;
            for (ch, a) in acc.iter().enumerate() {
                data[(ch * s + r) * s + c] = (src[base + ch] - a / n) / HIGH_PASS_SCALE;
            }
        }
    }
    Tensor::new(vec![3, s, s], data)
}

/// Default architecture: three conv3x3+ReLU+maxpool2 stages, a hidden dense
/// layer and a two-way softmax.
pub fn default_architecture(block_size: usize) -> Vec<LayerSpec> {
    architecture(block_size, [16, 32, 64], 128)
}

/// Narrower variant of [`default_architecture`] for single-machine runs.
pub fn desk_architecture(block_size: usize) -> Vec<LayerSpec> {
    architecture(block_size, [8, 16, 32], 32)
}

pub fn architecture(block_size: usize, channels: [usize; 3], hidden: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut cin = 3;
    let mut side = block_size;
    for &c in &channels {
        layers.push(LayerSpec::Conv3x3 {
            in_channels: cin,
            out_channels: c,
            stride: 1,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool2);
        cin = c;
        side /= 2;
    }
    layers.push(LayerSpec::Fc {
        inputs: cin * side * side,
        outputs: hidden,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Fc {
        inputs: hidden,
        outputs: 2,
    });
    layers.push(LayerSpec::Softmax);
    layers
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmiModelBundle {
    pub model_id: String,
    pub net: NetModel,
    pub block_size: usize,
    /// Block accuracy on the held-out set, if one was evaluated.
    pub test_accuracy: Option<f64>,
}

struct BlockSet<'a> {
    images: &'a [ModelImage<'a>],
    entries: &'a [LabeledBlock],
}

impl TrainingSet for BlockSet<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn sample(&self, index: usize) -> Result<(Cow<'_, Tensor>, usize)> {
        let e = &self.entries[index];
        let img = self.images.get(e.block.image).ok_or_else(|| {
            Error::Argument(format!("block refers to missing image {}", e.block.image))
        })?;
        Ok((Cow::Owned(block_tensor(img.image, &e.block)?), e.label))
    }
}

/// Trains a target-model classifier on sampled blocks.
pub fn train_cmi(
    images: &[ModelImage<'_>],
    dataset: &CmiDataset,
    arch: Vec<LayerSpec>,
    config: &TrainConfig,
) -> Result<CmiModelBundle> {
    let (pos, neg) = (dataset.count(TARGET), dataset.count(OTHER));
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(format!(
            "training set for {:?} needs both classes ({pos} target, {neg} other blocks)",
            dataset.target_model
        )));
    }
    let size = dataset.counts.block_size;
    let mut net = NetModel::new(
        vec![3, size, size],
        arch,
        derive_seed(config.seed, "cmi-init", 0),
    )?;
    // Max-pooled ReLU features are all positive, so a He-initialized head
    // starts with logit gaps of 10 or more; the first momentum steps then
    // overshoot and kill the hidden units. A zero head starts at even odds.
    if let Some(head) = net
        .params_mut()
        .iter_mut()
        .rev()
        .find(|p| !p.weights.is_empty())
    {
        head.weights.fill(0.0);
        head.biases.fill(0.0);
    }
    let set = BlockSet {
        images,
        entries: &dataset.entries,
    };
    sgd_train_with(&mut net, &set, config, |epoch, loss| {
        log::debug!("cmi {} epoch {epoch} loss {loss:.5}", dataset.target_model);
    })?;
    Ok(CmiModelBundle {
        model_id: dataset.target_model.clone(),
        net,
        block_size: size,
        test_accuracy: None,
    })
}

impl CmiModelBundle {
    /// Probability that the block comes from the target model.
    pub fn phi(&self, block: &Tensor) -> Result<f64> {
        Ok(self.net.forward(block)?.data()[TARGET])
    }

    pub fn phi_block(&self, img: &RgbImage, block: &BlockRef) -> Result<f64> {
        self.phi(&block_tensor(img, block)?)
    }

    /// Scores every entry of a dataset in parallel, preserving order.
    pub fn score(&self, images: &[ModelImage<'_>], entries: &[LabeledBlock]) -> Result<Vec<f64>> {
        entries
            .par_iter()
            .map(|e| {
                let img = images.get(e.block.image).ok_or_else(|| {
                    Error::Argument(format!("block refers to missing image {}", e.block.image))
                })?;
                self.phi_block(img.image, &e.block)
            })
            .collect()
    }

    /// Fraction of blocks classified correctly at `phi >= 0.5`.
    pub fn evaluate(&self, images: &[ModelImage<'_>], dataset: &CmiDataset) -> Result<f64> {
        if dataset.entries.is_empty() {
            return Err(Error::Argument("evaluation set is empty".into()));
        }
        let phis = self.score(images, &dataset.entries)?;
        let correct = phis
            .iter()
            .zip(&dataset.entries)
            .filter(|(p, e)| (**p >= 0.5) == (e.label == TARGET))
            .count();
        Ok(correct as f64 / phis.len() as f64)
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta");
        PathBuf::from(p)
    }

    /// Writes the weights and a `key=value` sidecar next to them.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.net.save(path)?;
        let mut meta = String::new();
        let _ = writeln!(meta, "model_id={}", self.model_id);
        let _ = writeln!(meta, "block_size={}", self.block_size);
        if let Some(a) = self.test_accuracy {
            let _ = writeln!(meta, "accuracy={a}");
        }
        let _ = writeln!(meta, "seed={}", self.net.rng_seed);
        let _ = writeln!(meta, "epochs={}", self.net.epochs);
        let _ = writeln!(meta, "arch={}", self.net.arch_string());
        write_atomic(Self::meta_path(path), meta.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let net = NetModel::load(path)?;
        let meta_path = Self::meta_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = parse_meta(&text)?;
        let model_id = meta
            .get("model_id")
            .ok_or_else(|| Error::Format(format!("{} lacks model_id", meta_path.display())))?
            .clone();
        let test_accuracy = meta
            .get("accuracy")
            .map(|v| v.parse::<f64>())
            .transpose()
            .map_err(|e| Error::Format(format!("bad accuracy: {e}")))?;
        let block_size = match net.input_shape() {
            [3, h, w] if h == w => *h,
            s => {
                return Err(Error::Format(format!(
                    "classifier input {s:?} is not an RGB block"
                )))
            }
        };
        Ok(CmiModelBundle {
            model_id,
            net,
            block_size,
            test_accuracy,
        })
    }
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, offset: f64) -> RgbImage {
        let data = (0..w * h * 3)
            .map(|i| ((i % 251) as f64 + offset).min(255.0))
            .collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn sampling_counts_are_exact_and_in_bounds() {
        let a = ramp(40, 30, 0.0);
        let b = ramp(20, 20, 1.0);
        let small = ramp(10, 30, 0.0);
        let images = [
            ModelImage {
                image: &a,
                model_id: "m1",
            },
            ModelImage {
                image: &b,
                model_id: "m2",
            },
            ModelImage {
                image: &small,
                model_id: "m1",
            },
            ModelImage {
                image: &a,
                model_id: "m3",
            },
        ];
        let counts = SamplingCounts {
            block_size: 16,
            target_per_image: 7,
            other_per_image: 3,
        };
        let ds = sample_blocks(&images, "m1", counts, 4).unwrap();
        assert_eq!(ds.count(TARGET), 7);
        assert_eq!(ds.count(OTHER), 6);
        for e in &ds.entries {
            let img = images[e.block.image].image;
            e.block.check(img.width(), img.height()).unwrap();
            assert_ne!(e.block.image, 2);
        }
        assert_eq!(ds, sample_blocks(&images, "m1", counts, 4).unwrap());
        assert_ne!(ds, sample_blocks(&images, "m1", counts, 5).unwrap());
    }

    #[test]
    fn full_counts_scale_with_image_count() {
        let img = ramp(96, 96, 0.0);
        let images: Vec<_> = (0..4)
            .map(|i| ModelImage {
                image: &img,
                model_id: if i == 0 { "t" } else { "o" },
            })
            .collect();
        let ds = sample_blocks(&images, "t", SamplingCounts::full(), 1).unwrap();
        assert_eq!(ds.count(TARGET), 500);
        assert_eq!(ds.count(OTHER), 150);
    }

    #[test]
    fn single_class_training_is_rejected() {
        let img = ramp(16, 16, 0.0);
        let images = [ModelImage {
            image: &img,
            model_id: "t",
        }];
        let counts = SamplingCounts {
            block_size: 8,
            target_per_image: 4,
            other_per_image: 4,
        };
        let ds = sample_blocks(&images, "t", counts, 1).unwrap();
        let err = train_cmi(
            &images,
            &ds,
            architecture(8, [2, 2, 2], 4),
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let net = NetModel::zeroed(vec![3, 16, 16], architecture(16, [2, 2, 2], 4)).unwrap();
        let bundle = CmiModelBundle {
            model_id: "t".into(),
            net,
            block_size: 16,
            test_accuracy: None,
        };
        let img = ramp(16, 16, 3.0);
        let phi = bundle.phi_block(&img, &BlockRef::new(0, 0, 0, 16)).unwrap();
        assert_eq!(phi, 0.5);
    }

    #[test]
    fn bundle_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let net = NetModel::new(vec![3, 16, 16], architecture(16, [2, 3, 4], 5), 9).unwrap();
        let bundle = CmiModelBundle {
            model_id: "cam-a".into(),
            net,
            block_size: 16,
            test_accuracy: Some(0.875),
        };
        let path = dir.path().join("cam-a.nnet");
        bundle.save(&path).unwrap();
        assert_eq!(CmiModelBundle::load(&path).unwrap(), bundle);
    }

    #[test]
    fn high_pass_input_ignores_flat_content_and_offsets() {
        let flat = RgbImage::filled(20, 20, [90.0, 120.0, 200.0]);
        let block = BlockRef::new(4, 4, 0, 8);
        let t = block_tensor(&flat, &block).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let img = RgbImage::new(
            20,
            20,
            (0..20 * 20 * 3).map(|i| ((i * 37) % 251) as f64).collect(),
        )
        .unwrap();
        let shifted = RgbImage::new(20, 20, img.data().iter().map(|v| v + 3.0).collect()).unwrap();
        let a = block_tensor(&img, &block).unwrap();
        let b = block_tensor(&shifted, &block).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn high_pass_uses_neighbours_outside_the_block() {
        let img = RgbImage::from_clamped(
            12,
            12,
            (0..12 * 12 * 3).map(|i| ((i * 53) % 241) as f64).collect(),
        )
        .unwrap();
        let block = BlockRef::new(3, 5, 0, 4);
        let t = block_tensor(&img, &block).unwrap();
        // Oracle for the top-left red sample: full 3x3 mean around (3, 5).
        let mut acc = 0.0;
        for r in 2..=4 {
            for c in 4..=6 {
                acc += img.pixel(r, c)[0];
            }
        }
        let want = (img.pixel(3, 5)[0] - acc / 9.0) / HIGH_PASS_SCALE;
        assert!((t.data()[0] - want).abs() < 1e-12);
    }
}
