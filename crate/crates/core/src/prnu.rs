//! PRNU fingerprint estimation and the two similarity detectors: block-level
//! normalized cross-correlation and whole-image peak-to-correlation energy.

use std::path::Path;

use rayon::prelude::*;

use crate::fft;
use crate::imaging::{write_atomic, BlockRef, GrayImage};
use crate::wavelet::{wiener_in_place, NoiseResidual};
use crate::{Error, Result};

/// PCE value below which an image is considered not to match its claimed
/// fingerprint.
pub const PCE_GATE: f64 = 50.0;

/// Side of the square neighborhood around the correlation peak that is left
/// out of the background energy estimate.
pub const PCE_EXCLUSION: usize = 11;

const FINGERPRINT_MAGIC: &[u8; 7] = b"PRNUFP1";

/// Estimated per-pixel PRNU factor of one device.
#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    width: usize,
    height: usize,
    data: Vec<f64>,
    num_images: usize,
    device_id: String,
}

impl Fingerprint {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f64>,
        num_images: usize,
        device_id: impl Into<String>,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "fingerprint {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if num_images == 0 {
            return Err(Error::Argument(
                "fingerprint needs at least one image".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("fingerprint samples must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            data,
            num_images,
            device_id: device_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn crop(&self, block: &BlockRef) -> Result<Fingerprint> {
        block.check(self.width, self.height)?;
        let mut data = Vec::with_capacity(block.size * block.size);
        for r in block.row..block.row + block.size {
            let s = r * self.width + block.col;
            data.extend_from_slice(&self.data[s..s + block.size]);
        }
        Ok(Fingerprint {
            width: block.size,
            height: block.size,
            data,
            num_images: self.num_images,
            device_id: self.device_id.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.device_id.as_bytes();
        let mut out = Vec::with_capacity(7 + 16 + id.len() + self.data.len() * 8);
        out.extend_from_slice(FINGERPRINT_MAGIC);
        for v in [self.width, self.height, self.num_images, id.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(id);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 + 16 || &bytes[..7] != FINGERPRINT_MAGIC {
            return Err(Error::Format("not a PRNUFP1 fingerprint file".into()));
        }
        let word = |i: usize| {
            let o = 7 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (width, height, num_images, id_len) = (word(0), word(1), word(2), word(3));
        let id_start = 7 + 16;
        let data_start = id_start + id_len;
        let expected = data_start + width * height * 8;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                offset: bytes.len(),
                expected,
                found: bytes.len(),
            });
        }
        let device_id = String::from_utf8(bytes[id_start..data_start].to_vec())
            .map_err(|_| Error::Format("device id is not UTF-8".into()))?;
        let data = bytes[data_start..expected]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Fingerprint::new(width, height, data, num_images, device_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Post-processing applied after the maximum-likelihood ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FingerprintOptions {
    /// Subtract row means, then column means.
    pub zero_mean: bool,
    /// Wiener filtering of the magnitude spectrum to suppress periodic
    /// artifacts shared by all cameras of a model.
    pub wiener_dft: bool,
}

impl Default for FingerprintOptions {
    fn default() -> Self {
        Self {
            zero_mean: true,
            wiener_dft: true,
        }
    }
}

impl FingerprintOptions {
    /// The bare ratio `sum N I / sum I^2`.
    pub fn raw() -> Self {
        Self {
            zero_mean: false,
            wiener_dft: false,
        }
    }
}

/// Running sums of the maximum-likelihood estimator. Sums are associative, so
/// partial accumulators over disjoint image subsets can be merged.
#[derive(Clone, Debug)]
pub struct FingerprintAccumulator {
    width: usize,
    height: usize,
    weighted_noise: Vec<f64>,
    intensity_sq: Vec<f64>,
    count: usize,
}

impl FingerprintAccumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            weighted_noise: vec![0.0; width * height],
            intensity_sq: vec![0.0; width * height],
            count: 0,
        }
    }

    pub fn add(&mut self, image: &GrayImage, residual: &NoiseResidual) -> Result<()> {
        for (what, w, h) in [
            ("image", image.width(), image.height()),
            ("residual", residual.width(), residual.height()),
        ] {
            if (w, h) != (self.width, self.height) {
                return Err(Error::Dimension(format!(
                    "{what} is {w}x{h}, fingerprint is {}x{}",
                    self.width, self.height
                )));
            }
        }
        let acc = self
            .weighted_noise
            .iter_mut()
            .zip(self.intensity_sq.iter_mut());
        for ((wn, isq), (&i, &n)) in acc.zip(image.data().iter().zip(residual.data())) {
            *wn += n * i;
            *isq += i * i;
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(mut self, other: &FingerprintAccumulator) -> Result<Self> {
        if (other.width, other.height) != (self.width, self.height) {
            return Err(Error::Dimension(
                "cannot merge accumulators of different size".into(),
            ));
        }
        for (a, b) in self.weighted_noise.iter_mut().zip(&other.weighted_noise) {
            *a += b;
        }
        for (a, b) in self.intensity_sq.iter_mut().zip(&other.intensity_sq) {
            *a += b;
        }
        self.count += other.count;
        Ok(self)
    }

    pub fn finish(&self, device_id: &str, opts: FingerprintOptions) -> Result<Fingerprint> {
        if self.count == 0 {
            return Err(Error::Argument("no images accumulated".into()));
        }
        let mut data: Vec<f64> = self
            .weighted_noise
            .iter()
            .zip(&self.intensity_sq)
            .map(|(&n, &d)| if d > 0.0 { n / d } else { 0.0 })
            .collect();
        if opts.zero_mean {
            zero_mean(&mut data, self.width, self.height);
        }
        if opts.wiener_dft {
            wiener_dft(&mut data, self.width, self.height);
        }
        Fingerprint::new(self.width, self.height, data, self.count, device_id)
    }
}

/// Removes the row means, then the column means.
pub fn zero_mean(data: &mut [f64], width: usize, height: usize) {
    for row in data.chunks_exact_mut(width) {
        let m = row.iter().sum::<f64>() / width as f64;
        row.iter_mut().for_each(|v| *v -= m);
    }
    for c in 0..width {
        let m = (0..height).map(|r| data[r * width + c]).sum::<f64>() / height as f64;
        for r in 0..height {
            data[r * width + c] -= m;
        }
    }
}

/// Attenuates spectral peaks: the normalized magnitude spectrum is split by
/// the local Wiener rule, with the raster's own variance as noise level, and
/// each frequency is rescaled to keep only the noise-like part. Peaks stand
/// far above their neighbourhood and are pulled down to it; the flat part of
/// the spectrum, where a white fingerprint lives, passes almost unchanged.
pub fn wiener_dft(data: &mut [f64], width: usize, height: usize) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return;
    }
    let mut spec = fft::forward(width, height, data);
    let norm = n.sqrt();
    let mag: Vec<f64> = spec.data.iter().map(|c| (c.re / norm).abs()).collect();
    let mut signal = mag.clone();
    wiener_in_place(&mut signal, width, height, var.sqrt());
    let filtered: Vec<f64> = mag.iter().zip(&signal).map(|(m, s)| m - s).collect();
    for ((c, &m), &f) in spec.data.iter_mut().zip(&mag).zip(&filtered) {
        if m == 0.0 {
            *c = rustfft::num_complex::Complex64::new(0.0, 0.0);
        } else {
            *c *= f / m;
        }
    }
    let cleaned = fft::inverse_real(spec);
    data.copy_from_slice(&cleaned);
}

/// Maximum-likelihood fingerprint `F = sum_k N_k I_k / sum_k I_k^2`
/// (elementwise), followed by the requested clean-up.
///
/// Images are accumulated in fixed-size chunks that are merged in order, so
/// the result does not depend on the worker count.
pub fn estimate_fingerprint(
    images: &[GrayImage],
    residuals: &[NoiseResidual],
    device_id: &str,
    opts: FingerprintOptions,
) -> Result<Fingerprint> {
    if images.is_empty() {
        return Err(Error::Argument(
            "fingerprint estimation needs at least one image".into(),
        ));
    }
    if images.len() != residuals.len() {
        return Err(Error::Argument(format!(
            "{} images but {} residuals",
            images.len(),
            residuals.len()
        )));
    }
    let (w, h) = (images[0].width(), images[0].height());
    let partials: Vec<FingerprintAccumulator> = images
        .par_chunks(8)
        .zip(residuals.par_chunks(8))
        .map(|(imgs, ress)| {
            let mut acc = FingerprintAccumulator::new(w, h);
            for (i, r) in imgs.iter().zip(ress) {
                acc.add(i, r)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = FingerprintAccumulator::new(w, h);
    for p in &partials {
        total = total.merge(p)?;
    }
    total.finish(device_id, opts)
}

/// Normalized cross-correlation value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationScore {
    pub rho: f64,
    /// One operand had zero variance; `rho` is reported as 0.
    pub degenerate: bool,
}

/// Pearson correlation of two equally long sequences.
pub fn pearson(a: &[f64], b: &[f64]) -> CorrelationScore {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return CorrelationScore {
            rho: 0.0,
            degenerate: true,
        };
    }
    CorrelationScore {
        rho: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

fn check_same(
    what: &str,
    residual: &NoiseResidual,
    img: &GrayImage,
    fp: &Fingerprint,
) -> Result<()> {
    let dims = [
        (residual.width(), residual.height()),
        (img.width(), img.height()),
        (fp.width(), fp.height()),
    ];
    if dims[0] != dims[1] || dims[0] != dims[2] {
        return Err(Error::Dimension(format!(
            "{what}: residual {:?}, image {:?} and fingerprint {:?} differ",
            dims[0], dims[1], dims[2]
        )));
    }
    Ok(())
}

/// `corr(N, I * F)` over whole, equally sized rasters.
pub fn correlate(
    residual: &NoiseResidual,
    img: &GrayImage,
    fp: &Fingerprint,
) -> Result<CorrelationScore> {
    check_same("correlate", residual, img, fp)?;
    let expected: Vec<f64> = img
        .data()
        .iter()
        .zip(fp.data())
        .map(|(i, f)| i * f)
        .collect();
    Ok(pearson(residual.data(), &expected))
}

/// `corr(N_b, I_b * F_b)` where every operand is cropped from full-size
/// rasters at `block`. The residual must come from the whole image, not from
/// the crop.
pub fn correlate_block(
    residual: &NoiseResidual,
    img: &GrayImage,
    fp: &Fingerprint,
    block: &BlockRef,
) -> Result<CorrelationScore> {
    check_same("correlate_block", residual, img, fp)?;
    block.check(img.width(), img.height())?;
    let n = block.size * block.size;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let w = img.width();
    for r in block.row..block.row + block.size {
        let s = r * w + block.col;
        a.extend_from_slice(&residual.data()[s..s + block.size]);
        b.extend(
            img.data()[s..s + block.size]
                .iter()
                .zip(&fp.data()[s..s + block.size])
                .map(|(i, f)| i * f),
        );
    }
    Ok(pearson(&a, &b))
}

/// Peak-to-correlation energy result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PceScore {
    pub pce: f64,
    /// Circular shift (row, col) of the correlation maximum.
    pub peak: (usize, usize),
    /// Number of shifts left out of the energy estimate.
    pub excluded: usize,
    pub degenerate: bool,
}

/// Signed PCE of the circular cross-correlation between `N` and `I * F`.
pub fn pce(residual: &NoiseResidual, img: &GrayImage, fp: &Fingerprint) -> Result<PceScore> {
    check_same("pce", residual, img, fp)?;
    let (w, h) = (img.width(), img.height());
    if w < PCE_EXCLUSION + 2 || h < PCE_EXCLUSION + 2 {
        return Err(Error::Dimension(format!(
            "PCE needs at least {0}x{0} samples, got {w}x{h}",
            PCE_EXCLUSION + 2
        )));
    }
    let centered = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.into_iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let a = centered(residual.data().to_vec());
    let b = centered(
        img.data()
            .iter()
            .zip(fp.data())
            .map(|(i, f)| i * f)
            .collect(),
    );
    let degenerate = PceScore {
        pce: 0.0,
        peak: (0, 0),
        excluded: 0,
        degenerate: true,
    };
    if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
        return Ok(degenerate);
    }
    let surface = fft::cross_correlate(w, h, &a, &b);
    let (peak_idx, &peak_val) = surface
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty surface");
    let (pr, pc) = (peak_idx / w, peak_idx % w);
    let half = (PCE_EXCLUSION / 2) as isize;
    let mut excluded = vec![false; w * h];
    for dr in -half..=half {
        for dc in -half..=half {
            let r = (pr as isize + dr).rem_euclid(h as isize) as usize;
            let c = (pc as isize + dc).rem_euclid(w as isize) as usize;
            excluded[r * w + c] = true;
        }
    }
    let (mut energy, mut count) = (0.0, 0usize);
    for (v, skip) in surface.iter().zip(&excluded) {
        if !skip {
            energy += v * v;
            count += 1;
        }
    }
    let energy = energy / count as f64;
    if energy <= 0.0 {
        return Ok(degenerate);
    }
    Ok(PceScore {
        pce: peak_val.signum() * peak_val * peak_val / energy,
        peak: (pr, pc),
        excluded: w * h - count,
        degenerate: false,
    })
}

/// Outcome of the PCE quality gate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateReport {
    pub accepted: Vec<usize>,
    /// Rejected image indices with their PCE.
    pub rejected: Vec<(usize, f64)>,
}

/// Splits images by whether their PCE against the claimed fingerprint reaches
/// `threshold`.
pub fn quality_gate(
    images: &[GrayImage],
    residuals: &[NoiseResidual],
    fp: &Fingerprint,
    threshold: f64,
) -> Result<GateReport> {
    if images.len() != residuals.len() {
        return Err(Error::Argument(
            "images and residuals differ in count".into(),
        ));
    }
    let scores: Vec<PceScore> = images
        .par_iter()
        .zip(residuals.par_iter())
        .map(|(i, r)| pce(r, i, fp))
        .collect::<Result<_>>()?;
    let mut report = GateReport::default();
    for (k, s) in scores.into_iter().enumerate() {
        if s.pce < threshold {
            report.rejected.push((k, s.pce));
        } else {
            report.accepted.push(k);
        }
    }
    Ok(report)
}
