//! Synthetic camera pipeline: scene synthesis, sensor model with per-device
//! PRNU, model-specific demosaicing and processing, JPEG-like quantization.

mod demosaic;
pub mod jpeg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::imaging::{BinaryMask, BlockRef, RgbImage};
use crate::{Error, Result};

pub use demosaic::{demosaic, mosaic, Cfa, Demosaic};
pub use jpeg::{recompress, QuantTables};

pub const DEFAULT_RESOLUTION: usize = 256;
pub const DEFAULT_SIGMA_F: f64 = 0.02;
pub const DEFAULT_SENSOR_NOISE: f64 = 2.0;
/// Benchmark forgery sizes at the default resolution.
pub const FORGERY_SIZES: [usize; 3] = [96, 64, 32];

/// Derives an independent stream seed from a parent seed, a label and an index.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One physical sensor: a fixed PRNU pattern plus a temporal noise level.
#[derive(Clone, Debug)]
pub struct DeviceSpec {
    pub device_id: String,
    pub model_id: String,
    pub width: usize,
    pub height: usize,
    pub prnu_pattern: Vec<f64>,
    pub sigma_f: f64,
    pub sensor_noise_std: f64,
    pub seed: u64,
}

impl DeviceSpec {
    /// Draws a zero-mean Gaussian PRNU pattern of standard deviation `sigma_f`.
    pub fn generate(
        device_id: impl Into<String>,
        model_id: impl Into<String>,
        width: usize,
        height: usize,
        sigma_f: f64,
        sensor_noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("device resolution must be nonzero".into()));
        }
        if !(sigma_f >= 0.0 && sigma_f.is_finite()) {
            return Err(Error::Argument(format!(
                "sigma_f must be >= 0, got {sigma_f}"
            )));
        }
        if !(sensor_noise_std >= 0.0 && sensor_noise_std.is_finite()) {
            return Err(Error::Argument(format!(
                "sensor noise std must be >= 0, got {sensor_noise_std}"
            )));
        }
        let mut pattern = vec![0.0; width * height];
        if sigma_f > 0.0 {
            let mut r = rng(derive_seed(seed, "prnu", 0));
            let normal = Normal::new(0.0, sigma_f).expect("positive std");
            for v in pattern.iter_mut() {
                *v = normal.sample(&mut r);
            }
            let mean = pattern.iter().sum::<f64>() / pattern.len() as f64;
            pattern.iter_mut().for_each(|v| *v -= mean);
        }
        Ok(DeviceSpec {
            device_id: device_id.into(),
            model_id: model_id.into(),
            width,
            height,
            prnu_pattern: pattern,
            sigma_f,
            sensor_noise_std,
            seed,
        })
    }
}

/// Processing signature shared by every device of one camera model.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModelSpec {
    pub model_id: String,
    pub cfa: Cfa,
    pub demosaic: Demosaic,
    pub quant_table_scale: f64,
    pub sharpen_amount: f64,
}

impl CameraModelSpec {
    pub fn new(
        model_id: impl Into<String>,
        cfa: Cfa,
        demosaic: Demosaic,
        quant_table_scale: f64,
        sharpen_amount: f64,
    ) -> Result<Self> {
        if !(quant_table_scale >= 1.0 && quant_table_scale.is_finite()) {
            return Err(Error::Argument(format!(
                "quant_table_scale must be >= 1, got {quant_table_scale}"
            )));
        }
        if !(sharpen_amount >= 0.0 && sharpen_amount.is_finite()) {
            return Err(Error::Argument(format!(
                "sharpen_amount must be >= 0, got {sharpen_amount}"
            )));
        }
        Ok(CameraModelSpec {
            model_id: model_id.into(),
            cfa,
            demosaic,
            quant_table_scale,
            sharpen_amount,
        })
    }

    /// True when two models within one experiment cannot be told apart.
    pub fn same_pipeline(&self, other: &CameraModelSpec) -> bool {
        self.cfa == other.cfa
            && self.demosaic == other.demosaic
            && self.quant_table_scale == other.quant_table_scale
            && self.sharpen_amount == other.sharpen_amount
    }
}

/// Rejects rosters where two models share an identical pipeline.
pub fn check_models_distinct(models: &[CameraModelSpec]) -> Result<()> {
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            if a.model_id == b.model_id {
                return Err(Error::Argument(format!(
                    "duplicate model id {:?}",
                    a.model_id
                )));
            }
            if a.same_pipeline(b) {
                return Err(Error::Argument(format!(
                    "models {:?} and {:?} share the same pipeline",
                    a.model_id, b.model_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Flat,
    Natural,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn flat(width: usize, height: usize, seed: u64) -> Self {
        SceneSpec {
            kind: SceneKind::Flat,
            width,
            height,
            seed,
        }
    }

    pub fn natural(width: usize, height: usize, seed: u64) -> Self {
        SceneSpec {
            kind: SceneKind::Natural,
            width,
            height,
            seed,
        }
    }
}

/// Renders the noise-free scene radiance `I0` as interleaved RGB.
pub fn render_scene(scene: &SceneSpec) -> Vec<f64> {
    let mut r = rng(derive_seed(scene.seed, "scene", scene.kind as u64));
    match scene.kind {
        SceneKind::Flat => render_flat(scene.width, scene.height, &mut r),
        SceneKind::Natural => render_natural(scene.width, scene.height, &mut r),
    }
}

fn render_flat(w: usize, h: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| r.gen_range(140.0..200.0));
    // A linear ramp of total range <= 4 keeps the variance under 4/3.
    let ramp: [f64; 2] = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let t = ramp[0] * (y as f64 / h as f64 - 0.5) + ramp[1] * (x as f64 / w as f64 - 0.5);
            out.extend(base.iter().map(|b| b + t));
        }
    }
    out
}

/// Smoothly interpolated lattice noise in roughly [-1, 1].
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, r: &mut ChaCha8Rng) -> Self {
        let n = cells + 2;
        ValueNoise {
            cells,
            lattice: (0..n * n).map(|_| r.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 2;
        let (fu, fv) = (u * self.cells as f64, v * self.cells as f64);
        let (iu, iv) = (fu.floor() as usize, fv.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tu, tv) = (smooth(fu - iu as f64), smooth(fv - iv as f64));
        let l = |a: usize, b: usize| self.lattice[a.min(n - 1) * n + b.min(n - 1)];
        let top = l(iv, iu) * (1.0 - tu) + l(iv, iu + 1) * tu;
        let bottom = l(iv + 1, iu) * (1.0 - tu) + l(iv + 1, iu + 1) * tu;
        top * (1.0 - tv) + bottom * tv
    }
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

struct Patch {
    shape: Shape,
    color: [f64; 3],
    /// Optional stripe texture: (period in pixels, orientation in radians, amplitude).
    stripes: Option<(f64, f64, f64)>,
}

fn render_natural(w: usize, h: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let top: [f64; 3] = std::array::from_fn(|_| r.gen_range(60.0..200.0));
    let bottom: [f64; 3] = std::array::from_fn(|_| r.gen_range(60.0..200.0));
    let coarse = ValueNoise::new(4, r);
    let fine = ValueNoise::new(24, r);
    let tint: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.5..1.0));
    let (coarse_amp, fine_amp) = (r.gen_range(10.0..25.0), r.gen_range(4.0..12.0));

    let mut patches = Vec::new();
    for _ in 0..r.gen_range(5..12) {
        let (hf, wf) = (h as f64, w as f64);
        let shape = if r.gen_bool(0.5) {
            let (y0, x0) = (r.gen_range(-0.1..0.9) * hf, r.gen_range(-0.1..0.9) * wf);
            let (dy, dx) = (r.gen_range(0.08..0.45) * hf, r.gen_range(0.08..0.45) * wf);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + dy,
                x1: x0 + dx,
            }
        } else {
            Shape::Ellipse {
                cy: r.gen_range(0.0..1.0) * hf,
                cx: r.gen_range(0.0..1.0) * wf,
                ry: r.gen_range(0.05..0.3) * hf,
                rx: r.gen_range(0.05..0.3) * wf,
            }
        };
        let color = std::array::from_fn(|_| r.gen_range(30.0..225.0));
        let stripes = r.gen_bool(0.35).then(|| {
            (
                r.gen_range(3.0..14.0),
                r.gen_range(0.0..std::f64::consts::PI),
                r.gen_range(8.0..30.0),
            )
        });
        patches.push(Patch {
            shape,
            color,
            stripes,
        });
    }

    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let v = y as f64 / h as f64;
        for x in 0..w {
            let u = x as f64 / w as f64;
            let texture = coarse_amp * coarse.at(u, v) + fine_amp * fine.at(u, v);
            let mut px: [f64; 3] =
                std::array::from_fn(|c| top[c] * (1.0 - v) + bottom[c] * v + tint[c] * texture);
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            for p in &patches {
                if p.shape.contains(yf, xf) {
                    let s = p.stripes.map_or(0.0, |(period, angle, amp)| {
                        let t = (yf * angle.sin() + xf * angle.cos()) / period;
                        amp * (2.0 * std::f64::consts::PI * t).sin()
                    });
                    px = std::array::from_fn(|c| p.color[c] + s + 0.3 * tint[c] * texture);
                }
            }
            out.extend(px.iter().map(|v| v.clamp(15.0, 240.0)));
        }
    }
    out
}

/// Unsharp mask with a 3x3 binomial blur and replicated borders.
fn sharpen(rgb: &mut [f64], w: usize, h: usize, amount: f64) {
    if amount == 0.0 {
        return;
    }
    let src = rgb.to_vec();
    let k = [1.0, 2.0, 1.0];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut blur = 0.0;
                for (dy, ky) in k.iter().enumerate() {
                    let yy = (y + dy).saturating_sub(1).min(h - 1);
                    for (dx, kx) in k.iter().enumerate() {
                        let xx = (x + dx).saturating_sub(1).min(w - 1);
                        blur += ky * kx * src[(yy * w + xx) * 3 + c];
                    }
                }
                let i = (y * w + x) * 3 + c;
                rgb[i] = src[i] + amount * (src[i] - blur / 16.0);
            }
        }
    }
}

/// Photosite values before demosaicing: `I0 + I0 * F + Gamma` sampled through the CFA.
pub fn expose(scene: &SceneSpec, dev: &DeviceSpec, cfa: Cfa) -> Result<Vec<f64>> {
    if scene.width != dev.width || scene.height != dev.height {
        return Err(Error::Dimension(format!(
            "scene is {}x{} but device {:?} is {}x{}",
            scene.width, scene.height, dev.device_id, dev.width, dev.height
        )));
    }
    let radiance = render_scene(scene);
    let mut raw = mosaic(&radiance, scene.width, scene.height, cfa);
    for (v, f) in raw.iter_mut().zip(&dev.prnu_pattern) {
        *v *= 1.0 + f;
    }
    if dev.sensor_noise_std > 0.0 {
        let mut r = rng(derive_seed(dev.seed, "shot", scene.seed));
        let normal = Normal::new(0.0, dev.sensor_noise_std).expect("positive std");
        for v in raw.iter_mut() {
            *v += normal.sample(&mut r);
        }
    }
    Ok(raw)
}

/// Runs a scene through one device and its model pipeline.
pub fn capture(scene: &SceneSpec, dev: &DeviceSpec, model: &CameraModelSpec) -> Result<RgbImage> {
    let (w, h) = (scene.width, scene.height);
    let raw = expose(scene, dev, model.cfa)?;
    let mut rgb = demosaic(&raw, w, h, model.cfa, model.demosaic);
    sharpen(&mut rgb, w, h, model.sharpen_amount);
    let tables = QuantTables::camera(model.quant_table_scale)?;
    RgbImage::new(w, h, jpeg::roundtrip(&rgb, w, h, &tables))
}

/// Pastes the `size`x`size` donor region at `(row, col)` into the host.
pub fn make_forgery(
    host: &RgbImage,
    donor: &RgbImage,
    size: usize,
    (row, col): (usize, usize),
) -> Result<(RgbImage, BinaryMask)> {
    if host.width() != donor.width() || host.height() != donor.height() {
        return Err(Error::Dimension(format!(
            "host is {}x{} but donor is {}x{}",
            host.width(),
            host.height(),
            donor.width(),
            donor.height()
        )));
    }
    BlockRef::new(row, col, 0, size).check(host.width(), host.height())?;
    let mut out = host.clone();
    let mut mask = BinaryMask::zeros(host.width(), host.height());
    for r in row..row + size {
        for c in col..col + size {
            out.set_pixel(r, c, donor.pixel(r, c));
            mask.set(r, c, true);
        }
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CameraModelSpec {
        CameraModelSpec::new("m", Cfa::Rggb, Demosaic::Bilinear, 1.0, 0.0).unwrap()
    }

    #[test]
    fn derived_seeds_differ_by_every_input() {
        let s = derive_seed(7, "dev", 3);
        assert_eq!(s, derive_seed(7, "dev", 3));
        assert_ne!(s, derive_seed(8, "dev", 3));
        assert_ne!(s, derive_seed(7, "dew", 3));
        assert_ne!(s, derive_seed(7, "dev", 4));
    }

    #[test]
    fn prnu_pattern_is_zero_mean_with_requested_spread() {
        let d = DeviceSpec::generate("d", "m", 64, 64, 0.02, 2.0, 1).unwrap();
        let n = d.prnu_pattern.len() as f64;
        let mean = d.prnu_pattern.iter().sum::<f64>() / n;
        let std = (d.prnu_pattern.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3 * 0.02);
        assert!((std - 0.02).abs() < 0.002, "{std}");
    }

    #[test]
    fn flat_scene_variance_is_small() {
        for seed in 0..10 {
            let s = render_scene(&SceneSpec::flat(64, 48, seed));
            for c in 0..3 {
                let ch: Vec<f64> = s.iter().skip(c).step_by(3).copied().collect();
                let m = ch.iter().sum::<f64>() / ch.len() as f64;
                let var = ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ch.len() as f64;
                assert!(var < 4.0, "{var}");
            }
        }
    }

    #[test]
    fn natural_scene_has_structure() {
        let s = render_scene(&SceneSpec::natural(128, 128, 5));
        let m = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64;
        assert!(var > 100.0);
        assert!(s.iter().all(|v| (15.0..=240.0).contains(v)));
    }

    #[test]
    fn degenerate_pipeline_reproduces_flat_scene() {
        let scene = SceneSpec::flat(64, 64, 9);
        let dev = DeviceSpec::generate("d", "m", 64, 64, 0.0, 0.0, 2).unwrap();
        let out = capture(&scene, &dev, &model()).unwrap();
        let i0 = render_scene(&scene);
        for (a, b) in out.data().iter().zip(&i0) {
            assert!((a - b).abs() < 1.0, "{a} vs {b}");
        }
    }

    #[test]
    fn capture_is_deterministic() {
        let scene = SceneSpec::natural(32, 32, 4);
        let dev = DeviceSpec::generate("d", "m", 32, 32, 0.02, 2.0, 3).unwrap();
        let a = capture(&scene, &dev, &model()).unwrap();
        let b = capture(&scene, &dev, &model()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let dev = DeviceSpec::generate("d", "m", 32, 32, 0.02, 2.0, 3).unwrap();
        let err = capture(&SceneSpec::flat(32, 16, 0), &dev, &model()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn duplicate_pipelines_are_rejected() {
        let a = model();
        let mut b = model();
        b.model_id = "other".into();
        assert!(check_models_distinct(&[a.clone(), b.clone()]).is_err());
        b.sharpen_amount = 0.5;
        assert!(check_models_distinct(&[a, b]).is_ok());
    }

    #[test]
    fn forgery_mask_and_locality() {
        let host = RgbImage::filled(40, 30, [10.0, 20.0, 30.0]);
        let donor = RgbImage::filled(40, 30, [200.0, 100.0, 50.0]);
        let (img, mask) = make_forgery(&host, &donor, 8, (5, 20)).unwrap();
        assert_eq!(mask.count_ones(), 64);
        for r in 0..30 {
            for c in 0..40 {
                let want = if mask.get(r, c) {
                    donor.pixel(r, c)
                } else {
                    host.pixel(r, c)
                };
                assert_eq!(img.pixel(r, c), want);
            }
        }
        assert!(matches!(
            make_forgery(&host, &donor, 8, (25, 0)),
            Err(Error::Bounds(_))
        ));
    }
}
