//! Wavelet denoiser and noise-residual extraction.
//!
//! The transform is the separable orthonormal 8-tap Daubechies filter bank
//! applied with periodic wrap-around, so the decomposition is an orthogonal
//! map (exact Parseval, perfect reconstruction). Images whose sides are not a
//! multiple of `2^levels` are mirror-padded before the transform and the
//! residual is cropped back afterwards.
//!
//! Detail coefficients are shrunk with a locally adaptive Wiener rule: the
//! signal variance at each coefficient is the minimum over square windows of
//! side 3, 5, 7 and 9 of the mean squared coefficient, minus the noise
//! variance. The residual is the image minus the reconstruction from the
//! shrunk coefficients.

use crate::imaging::GrayImage;
use crate::{Error, Result};

/// Lowpass taps of the orthonormal Daubechies filter with four vanishing
/// moments (eight taps).
pub const DAUBECHIES8_LOWPASS: [f64; 8] = [
    0.230_377_813_308_896_5,
    0.714_846_570_552_915_7,
    0.630_880_767_929_858_9,
    -0.027_983_769_416_859_854,
    -0.187_034_811_719_093_09,
    0.030_841_381_835_560_764,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_032,
];

pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_SIGMA0: f64 = 5.0;

/// Window sides used by the local variance estimate.
pub const WIENER_WINDOWS: [usize; 4] = [3, 5, 7, 9];

fn highpass() -> [f64; 8] {
    let mut g = [0.0; 8];
    for (k, v) in g.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *v = sign * DAUBECHIES8_LOWPASS[7 - k];
    }
    g
}

/// A rectangular array of wavelet coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Band {
    fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Detail subbands of one decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailBands {
    /// Highpass along rows, lowpass along columns.
    pub hl: Band,
    /// Lowpass along rows, highpass along columns.
    pub lh: Band,
    pub hh: Band,
}

impl DetailBands {
    fn iter(&self) -> impl Iterator<Item = &Band> {
        [&self.hl, &self.lh, &self.hh].into_iter()
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut Band> {
        [&mut self.hl, &mut self.lh, &mut self.hh].into_iter()
    }
}

/// Multi-level decomposition; `details[0]` is the finest level.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub width: usize,
    pub height: usize,
    pub details: Vec<DetailBands>,
    pub ll: Band,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn coefficient_count(&self) -> usize {
        self.ll.data.len()
            + self
                .details
                .iter()
                .flat_map(|d| d.iter())
                .map(|b| b.data.len())
                .sum::<usize>()
    }

    pub fn energy(&self) -> f64 {
        self.ll.energy()
            + self
                .details
                .iter()
                .flat_map(|d| d.iter())
                .map(Band::energy)
                .sum::<f64>()
    }
}

/// One periodic analysis step on `x` (length even), writing lowpass then
/// highpass halves into `out`.
fn analyze_1d(x: &[f64], out: &mut [f64], g: &[f64; 8]) {
    let n = x.len();
    let half = n / 2;
    for i in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for k in 0..8 {
            let v = x[(2 * i + k) % n];
            a += DAUBECHIES8_LOWPASS[k] * v;
            d += g[k] * v;
        }
        out[i] = a;
        out[half + i] = d;
    }
}

/// Transpose of [`analyze_1d`].
fn synthesize_1d(coef: &[f64], out: &mut [f64], g: &[f64; 8]) {
    let n = coef.len();
    let half = n / 2;
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..half {
        let a = coef[i];
        let d = coef[half + i];
        for k in 0..8 {
            out[(2 * i + k) % n] += DAUBECHIES8_LOWPASS[k] * a + g[k] * d;
        }
    }
}

/// Applies a 1-D step to the rows then the columns of the top-left
/// `w` x `h` region of `buf` (row stride `stride`).
fn step_2d(buf: &mut [f64], stride: usize, w: usize, h: usize, inverse: bool) {
    let g = highpass();
    let mut line = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    let mut rows = |buf: &mut [f64]| {
        for r in 0..h {
            let row = &mut buf[r * stride..r * stride + w];
            line[..w].copy_from_slice(row);
            if inverse {
                synthesize_1d(&line[..w], &mut out[..w], &g);
            } else {
                analyze_1d(&line[..w], &mut out[..w], &g);
            }
            row.copy_from_slice(&out[..w]);
        }
    };
    let cols = |buf: &mut [f64]| {
        let mut line = vec![0.0; h];
        let mut out = vec![0.0; h];
        for c in 0..w {
            for r in 0..h {
                line[r] = buf[r * stride + c];
            }
            if inverse {
                synthesize_1d(&line, &mut out, &g);
            } else {
                analyze_1d(&line, &mut out, &g);
            }
            for r in 0..h {
                buf[r * stride + c] = out[r];
            }
        }
    };
    if inverse {
        cols(buf);
        rows(buf);
    } else {
        rows(buf);
        cols(buf);
    }
}

fn copy_region(buf: &[f64], stride: usize, r0: usize, c0: usize, w: usize, h: usize) -> Band {
    let mut band = Band::zeros(w, h);
    for r in 0..h {
        let src = (r0 + r) * stride + c0;
        band.data[r * w..(r + 1) * w].copy_from_slice(&buf[src..src + w]);
    }
    band
}

fn paste_region(buf: &mut [f64], stride: usize, r0: usize, c0: usize, band: &Band) {
    for r in 0..band.height {
        let dst = (r0 + r) * stride + c0;
        buf[dst..dst + band.width]
            .copy_from_slice(&band.data[r * band.width..(r + 1) * band.width]);
    }
}

/// Forward transform. Both sides must be multiples of `2^levels`.
pub fn dwt2(img: &GrayImage, levels: usize) -> Result<WaveletPyramid> {
    let (width, height) = (img.width(), img.height());
    let multiple = 1usize << levels;
    if levels == 0 {
        return Err(Error::Argument("at least one decomposition level".into()));
    }
    if width % multiple != 0 || height % multiple != 0 {
        return Err(Error::Dimension(format!(
            "{width}x{height} image: both sides must be a multiple of {multiple} for {levels} levels"
        )));
    }
    let mut buf = img.data().to_vec();
    let mut details = Vec::with_capacity(levels);
    let (mut w, mut h) = (width, height);
    for _ in 0..levels {
        step_2d(&mut buf, width, w, h, false);
        let (hw, hh) = (w / 2, h / 2);
        details.push(DetailBands {
            hl: copy_region(&buf, width, 0, hw, hw, hh),
            lh: copy_region(&buf, width, hh, 0, hw, hh),
            hh: copy_region(&buf, width, hh, hw, hw, hh),
        });
        w = hw;
        h = hh;
    }
    let ll = copy_region(&buf, width, 0, 0, w, h);
    Ok(WaveletPyramid {
        width,
        height,
        details,
        ll,
    })
}

/// Inverse transform; returns the reconstructed samples row-major.
pub fn idwt2(pyr: &WaveletPyramid) -> Vec<f64> {
    let width = pyr.width;
    let mut buf = vec![0.0; width * pyr.height];
    paste_region(&mut buf, width, 0, 0, &pyr.ll);
    for d in pyr.details.iter().rev() {
        let (hw, hh) = (d.hh.width, d.hh.height);
        paste_region(&mut buf, width, 0, hw, &d.hl);
        paste_region(&mut buf, width, hh, 0, &d.lh);
        paste_region(&mut buf, width, hh, hw, &d.hh);
        step_2d(&mut buf, width, 2 * hw, 2 * hh, true);
    }
    buf
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Minimum over [`WIENER_WINDOWS`] of the local mean of squared values, with
/// symmetric boundary extension.
pub fn min_local_variance(data: &[f64], width: usize, height: usize) -> Vec<f64> {
    let pad = WIENER_WINDOWS[WIENER_WINDOWS.len() - 1] / 2;
    let pw = width + 2 * pad;
    let ph = height + 2 * pad;
    let mut sq = vec![0.0; pw * ph];
    for r in 0..ph {
        let sr = reflect(r as isize - pad as isize, height);
        for c in 0..pw {
            let sc = reflect(c as isize - pad as isize, width);
            let v = data[sr * width + sc];
            sq[r * pw + c] = v * v;
        }
    }
    let mut best = vec![f64::INFINITY; width * height];
    let mut horiz = vec![0.0; pw * ph];
    for &win in &WIENER_WINDOWS {
        let rad = win / 2;
        // horizontal box sums for every padded row at the unpadded columns
        for r in 0..ph {
            let row = &sq[r * pw..(r + 1) * pw];
            for c in 0..width {
                let center = c + pad;
                horiz[r * pw + c] = row[center - rad..=center + rad].iter().sum();
            }
        }
        let norm = (win * win) as f64;
        for r in 0..height {
            let center = r + pad;
            for c in 0..width {
                let mut s = 0.0;
                for rr in center - rad..=center + rad {
                    s += horiz[rr * pw + c];
                }
                let v = s / norm;
                let b = &mut best[r * width + c];
                if v < *b {
                    *b = v;
                }
            }
        }
    }
    best
}

/// Wiener gain applied to every coefficient of `data` in place:
/// `c <- c * s / (s + sigma0^2)` with `s = max(0, local_var - sigma0^2)`.
pub fn wiener_in_place(data: &mut [f64], width: usize, height: usize, sigma0: f64) {
    let noise_var = sigma0 * sigma0;
    let local = min_local_variance(data, width, height);
    for (c, v) in data.iter_mut().zip(local) {
        let signal = (v - noise_var).max(0.0);
        let denom = signal + noise_var;
        if denom > 0.0 {
            *c *= signal / denom;
        }
    }
}

/// Shrinks every detail coefficient; the approximation band is untouched.
pub fn wiener_shrink(pyr: &WaveletPyramid, sigma0: f64) -> WaveletPyramid {
    assert!(sigma0 > 0.0, "sigma0 must be positive");
    let mut out = pyr.clone();
    for level in &mut out.details {
        for band in level.iter_mut() {
            let (w, h) = (band.width, band.height);
            wiener_in_place(&mut band.data, w, h, sigma0);
        }
    }
    out
}

/// Zero-centered noise estimate `N = I - denoise(I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseResidual {
    width: usize,
    height: usize,
    data: Vec<f64>,
    low_texture: bool,
}

impl NoiseResidual {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "residual {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("residual samples must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            data,
            low_texture: false,
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

    /// Set when the source image had no variation to denoise.
    pub fn low_texture(&self) -> bool {
        self.low_texture
    }

    pub fn crop(&self, block: &crate::imaging::BlockRef) -> Result<NoiseResidual> {
        block.check(self.width, self.height)?;
        let mut data = Vec::with_capacity(block.size * block.size);
        for r in block.row..block.row + block.size {
            let s = r * self.width + block.col;
            data.extend_from_slice(&self.data[s..s + block.size]);
        }
        Ok(NoiseResidual {
            width: block.size,
            height: block.size,
            data,
            low_texture: self.low_texture,
        })
    }

    pub fn scaled(&self, k: f64) -> NoiseResidual {
        NoiseResidual {
            data: self.data.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

/// Denoiser configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Denoiser {
    pub levels: usize,
    /// Noise standard deviation in gray levels.
    pub sigma0: f64,
}

impl Default for Denoiser {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            sigma0: DEFAULT_SIGMA0,
        }
    }
}

impl Denoiser {
    pub fn new(levels: usize, sigma0: f64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Argument("levels must be at least 1".into()));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Argument(format!(
                "sigma0 must be positive, got {sigma0}"
            )));
        }
        Ok(Self { levels, sigma0 })
    }

    /// Extracts the noise residual of `img`, padding and cropping as needed.
    pub fn residual(&self, img: &GrayImage) -> Result<NoiseResidual> {
        let multiple = 1usize << self.levels;
        let (w, h) = (img.width(), img.height());
        if w < multiple || h < multiple {
            return Err(Error::Dimension(format!(
                "{w}x{h} image is smaller than {multiple} pixels on a side"
            )));
        }
        let first = img.data()[0];
        if img.data().iter().all(|&v| v == first) {
            return Ok(NoiseResidual {
                width: w,
                height: h,
                data: vec![0.0; w * h],
                low_texture: true,
            });
        }
        let pw = w.div_ceil(multiple) * multiple;
        let ph = h.div_ceil(multiple) * multiple;
        let padded = if (pw, ph) == (w, h) {
            img.clone()
        } else {
            GrayImage::from_fn(pw, ph, |r, c| {
                img.get(reflect(r as isize, h), reflect(c as isize, w))
            })
        };
        let pyr = dwt2(&padded, self.levels)?;
        let denoised = idwt2(&wiener_shrink(&pyr, self.sigma0));
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                data.push(padded.get(r, c) - denoised[r * pw + c]);
            }
        }
        Ok(NoiseResidual {
            width: w,
            height: h,
            data,
            low_texture: false,
        })
    }
}

/// Residual with the default 4-level transform.
pub fn extract_residual(img: &GrayImage, sigma0: f64) -> Result<NoiseResidual> {
    Denoiser::new(DEFAULT_LEVELS, sigma0)?.residual(img)
}
