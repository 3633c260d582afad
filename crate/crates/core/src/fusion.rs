//! Fusion of block-level PRNU correlation `rho` and classifier score `phi`
//! into a tamper probability `theta` by a 2-10-10-1 network.
//!
//! `theta` is the probability that a block does NOT come from the target
//! device (H0), so larger values are more suspicious.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::camsim::{derive_seed, rng};
use crate::cmi::{aligned_origin, parse_meta, CmiModelBundle};
use crate::imaging::{write_atomic, BlockRef, GrayImage, RgbImage};
use crate::nnet::{sgd_train_with, LayerSpec, NetModel, Tensor, TrainConfig};
use crate::prnu::{correlate_block, Fingerprint};
use crate::wavelet::{Denoiser, NoiseResidual};
use crate::{Error, Result};

pub const INPUTS: usize = 2;
pub const HIDDEN: [usize; 2] = [10, 10];

/// Block label: the block comes from the target device.
pub const H1: usize = 1;
/// Block label: the block comes from some other device.
pub const H0: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePair {
    pub rho: f64,
    pub phi: f64,
    /// [`H1`] or [`H0`].
    pub label: usize,
    pub block: BlockRef,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FusionStats {
    pub pairs: usize,
    pub epochs: u32,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub model_id: String,
    net: NetModel,
    pub stats: FusionStats,
}

/// `theta` together with whether an input had to be clamped into range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theta {
    pub value: f64,
    pub clamped: bool,
}

fn layers(inputs: usize, hidden: &[usize]) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let mut prev = inputs;
    for &h in hidden {
        out.push(LayerSpec::Fc {
            inputs: prev,
            outputs: h,
        });
        out.push(LayerSpec::Relu);
        prev = h;
    }
    out.push(LayerSpec::Fc {
        inputs: prev,
        outputs: 1,
    });
    out.push(LayerSpec::Sigmoid);
    out
}

impl FusionModel {
    /// Builds an untrained model; anything but 2 inputs and two hidden
    /// layers of 10 units is rejected.
    pub fn new(
        model_id: impl Into<String>,
        inputs: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if inputs != INPUTS || hidden != HIDDEN {
            return Err(Error::Shape {
                layer: 0,
                detail: format!(
                    "fusion network must be {INPUTS}-{}-{}-1, got {inputs}-{hidden:?}-1",
                    HIDDEN[0], HIDDEN[1]
                ),
            });
        }
        Ok(FusionModel {
            model_id: model_id.into(),
            net: NetModel::new(vec![INPUTS], layers(inputs, hidden), seed)?,
            stats: FusionStats::default(),
        })
    }

    /// Wraps an existing network after checking its topology.
    pub fn from_net(model_id: impl Into<String>, net: NetModel) -> Result<Self> {
        if net.input_shape() != [INPUTS] || net.layers() != layers(INPUTS, &HIDDEN).as_slice() {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("not a 2-10-10-1 fusion network: {}", net.arch_string()),
            });
        }
        Ok(FusionModel {
            model_id: model_id.into(),
            net,
            stats: FusionStats::default(),
        })
    }

    pub fn zeroed(model_id: impl Into<String>) -> Self {
        FusionModel {
            model_id: model_id.into(),
            net: NetModel::zeroed(vec![INPUTS], layers(INPUTS, &HIDDEN)).expect("valid topology"),
            stats: FusionStats::default(),
        }
    }

    pub fn net(&self) -> &NetModel {
        &self.net
    }

    /// Tamper probability for one block, clamping `rho` to [-1, 1] and `phi`
    /// to [0, 1].
    pub fn theta_checked(&self, rho: f64, phi: f64) -> Result<Theta> {
        if !rho.is_finite() || !phi.is_finite() {
            return Err(Error::Argument(format!(
                "fusion inputs must be finite, got rho={rho} phi={phi}"
            )));
        }
        let (r, p) = (rho.clamp(-1.0, 1.0), phi.clamp(0.0, 1.0));
        let out = self.net.forward(&Tensor::vector(vec![r, p])?)?;
        Ok(Theta {
            value: out.data()[0],
            clamped: r != rho || p != phi,
        })
    }

    pub fn theta(&self, rho: f64, phi: f64) -> Result<f64> {
        self.theta_checked(rho, phi).map(|t| t.value)
    }

    fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta");
        PathBuf::from(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.net.save(path)?;
        let mut meta = String::new();
        let _ = writeln!(meta, "model_id={}", self.model_id);
        let _ = writeln!(meta, "pairs={}", self.stats.pairs);
        let _ = writeln!(meta, "epochs={}", self.stats.epochs);
        let _ = writeln!(meta, "final_loss={}", self.stats.final_loss);
        let _ = writeln!(meta, "theta=probability of H0 (tampering)");
        write_atomic(Self::meta_path(path), meta.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let net = NetModel::load(path)?;
        let meta_path = Self::meta_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = parse_meta(&text)?;
        let get = |k: &str| meta.get(k).map(String::as_str).unwrap_or("0");
        let bad = |k: &str| Error::Format(format!("{}: bad {k}", meta_path.display()));
        let mut model = FusionModel::from_net(
            meta.get("model_id")
                .cloned()
                .ok_or_else(|| bad("model_id"))?,
            net,
        )?;
        model.stats = FusionStats {
            pairs: get("pairs").parse().map_err(|_| bad("pairs"))?,
            epochs: get("epochs").parse().map_err(|_| bad("epochs"))?,
            final_loss: get("final_loss").parse().map_err(|_| bad("final_loss"))?,
        };
        Ok(model)
    }
}

/// Training schedule for the fusion network.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        learning_rate: 0.05,
        momentum: 0.9,
        batch_size: 0,
        clip_norm: 0.0,
        seed,
    }
}

/// Fits the fusion network with H0 as the positive class.
pub fn train_fusion(
    model_id: &str,
    pairs: &[ScorePair],
    config: &TrainConfig,
) -> Result<FusionModel> {
    let h1 = pairs.iter().filter(|p| p.label == H1).count();
    if h1 == 0 || h1 == pairs.len() {
        return Err(Error::Argument(format!(
            "fusion training needs both H1 and H0 pairs ({h1} H1 of {})",
            pairs.len()
        )));
    }
    let data = pairs
        .iter()
        .map(|p| {
            let x = Tensor::vector(vec![p.rho.clamp(-1.0, 1.0), p.phi.clamp(0.0, 1.0)])?;
            Ok((x, usize::from(p.label == H0)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = FusionModel::new(
        model_id,
        INPUTS,
        &HIDDEN,
        derive_seed(config.seed, "fusion-init", 0),
    )?;
    let report = sgd_train_with(&mut model.net, &data, config, |epoch, loss| {
        log::trace!("fusion {model_id} epoch {epoch} loss {loss:.5}");
    })?;
    model.stats = FusionStats {
        pairs: pairs.len(),
        epochs: config.epochs,
        final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
    };
    Ok(model)
}

/// Luminance and whole-image noise residual, computed once per image so
/// block scores always crop a full-frame residual.
#[derive(Clone, Debug)]
pub struct ImageAnalysis {
    pub gray: GrayImage,
    pub residual: NoiseResidual,
}

impl ImageAnalysis {
    pub fn new(img: &RgbImage, denoiser: &Denoiser) -> Result<Self> {
        let gray = img.to_gray();
        let residual = denoiser.residual(&gray)?;
        Ok(ImageAnalysis { gray, residual })
    }
}

/// `(rho, phi)` for one block of an analyzed image.
pub fn block_scores(
    img: &RgbImage,
    analysis: &ImageAnalysis,
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
    block: &BlockRef,
) -> Result<(f64, f64)> {
    block
        .check(fp.width(), fp.height())
        .map_err(|e| Error::Bounds(format!("block outside fingerprint extent: {e}")))?;
    let rho = correlate_block(&analysis.residual, &analysis.gray, fp, block)?.rho;
    let phi = cmi.phi_block(img, block)?;
    Ok((rho, phi))
}

/// An image contributing fusion pairs, with its hypothesis label.
#[derive(Clone, Copy, Debug)]
pub struct PairSource<'a> {
    pub image: &'a RgbImage,
    pub label: usize,
}

/// Samples `blocks_per_image` uniformly placed blocks per image and scores
/// them against the target fingerprint and classifier.
pub fn build_training_pairs(
    images: &[PairSource<'_>],
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
    blocks_per_image: usize,
    denoiser: &Denoiser,
    seed: u64,
) -> Result<Vec<ScorePair>> {
    let size = cmi.block_size;
    let per_image: Vec<Result<Vec<ScorePair>>> = images
        .par_iter()
        .enumerate()
        .map(|(k, src)| {
            if src.label != H1 && src.label != H0 {
                return Err(Error::Argument(format!(
                    "image {k} has label {}",
                    src.label
                )));
            }
            let (w, h) = (src.image.width(), src.image.height());
            if w < size || h < size {
                return Err(Error::Bounds(format!(
                    "image {k} ({w}x{h}) is smaller than the {size}px block"
                )));
            }
            let analysis = ImageAnalysis::new(src.image, denoiser)?;
            let mut r = rng(derive_seed(seed, "fusion-blocks", k as u64));
            (0..blocks_per_image)
                .map(|_| {
                    let block = BlockRef::new(
                        aligned_origin(&mut r, h - size),
                        aligned_origin(&mut r, w - size),
                        k,
                        size,
                    );
                    let (rho, phi) = block_scores(src.image, &analysis, fp, cmi, &block)?;
                    Ok(ScorePair {
                        rho,
                        phi,
                        label: src.label,
                        block,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for part in per_image {
        out.extend(part?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn topology_is_enforced() {
        assert!(FusionModel::new("m", 2, &[10, 10], 1).is_ok());
        assert!(matches!(
            FusionModel::new("m", 3, &[10, 10], 1),
            Err(Error::Shape { .. })
        ));
        assert!(FusionModel::new("m", 2, &[10], 1).is_err());
        assert!(FusionModel::new("m", 2, &[10, 12], 1).is_err());
        let other = NetModel::zeroed(
            vec![2],
            vec![
                LayerSpec::Fc {
                    inputs: 2,
                    outputs: 1,
                },
                LayerSpec::Sigmoid,
            ],
        )
        .unwrap();
        assert!(FusionModel::from_net("m", other).is_err());
    }

    #[test]
    fn zero_model_is_undecided() {
        let m = FusionModel::zeroed("m");
        assert_eq!(m.theta(0.3, 0.9).unwrap(), 0.5);
    }

    #[test]
    fn inputs_are_validated_and_clamped() {
        let m = FusionModel::new("m", 2, &HIDDEN, 3).unwrap();
        assert!(matches!(m.theta(f64::NAN, 0.5), Err(Error::Argument(_))));
        assert!(m.theta(0.1, f64::INFINITY).is_err());
        let t = m.theta_checked(1.7, -0.2).unwrap();
        assert!(t.clamped);
        assert_eq!(t.value, m.theta(1.0, 0.0).unwrap());
        assert!(!m.theta_checked(0.2, 0.4).unwrap().clamped);
    }

    fn pairs(n: usize, seed: u64, phi_informative: bool) -> Vec<ScorePair> {
        let mut r = rng(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { H1 } else { H0 };
                let shift = if label == H1 { 0.1 } else { 0.0 };
                let phi = if phi_informative {
                    (0.5f64 + if label == H1 { 0.2 } else { -0.2 } + r.gen_range(-0.3..0.3))
                        .clamp(0.0, 1.0)
                } else {
                    0.5
                };
                ScorePair {
                    rho: shift + r.gen_range(-0.08..0.08),
                    phi,
                    label,
                    block: BlockRef::new(0, 0, i, 8),
                }
            })
            .collect()
    }

    #[test]
    fn trained_model_ranks_h0_higher() {
        let train = pairs(400, 1, true);
        let m = train_fusion("m", &train, &default_train_config(2)).unwrap();
        let test = pairs(200, 3, true);
        let (mut h0, mut h1) = (0.0, 0.0);
        for p in &test {
            let t = m.theta(p.rho, p.phi).unwrap();
            if p.label == H0 {
                h0 += t;
            } else {
                h1 += t;
            }
        }
        assert!(h0 > h1);
        assert_eq!(m.stats.pairs, 400);
    }

    #[test]
    fn training_is_deterministic_and_needs_both_labels() {
        let train = pairs(100, 5, false);
        let cfg = default_train_config(7);
        let a = train_fusion("m", &train, &cfg).unwrap();
        let b = train_fusion("m", &train, &cfg).unwrap();
        assert_eq!(a, b);
        let only_h1: Vec<_> = train.iter().filter(|p| p.label == H1).copied().collect();
        assert!(matches!(
            train_fusion("m", &only_h1, &cfg),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = train_fusion("cam", &pairs(50, 9, true), &default_train_config(1)).unwrap();
        let path = dir.path().join("cam.fusion");
        m.save(&path).unwrap();
        let back = FusionModel::load(&path).unwrap();
        assert_eq!(back.net(), m.net());
        assert_eq!(back.stats, m.stats);
        assert_eq!(back.theta(0.05, 0.7).unwrap(), m.theta(0.05, 0.7).unwrap());
    }
}
