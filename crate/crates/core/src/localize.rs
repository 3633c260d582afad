//! Sliding-window tamper maps, thresholding with morphological opening,
//! F-score accounting, threshold calibration and ROC AUC.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::cmi::CmiModelBundle;
use crate::fusion::{block_scores, FusionModel, ImageAnalysis};
use crate::imaging::{write_atomic, BinaryMask, BlockRef, GrayImage, Image, RgbImage};
use crate::prnu::Fingerprint;
use crate::wavelet::Denoiser;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 96;
pub const DEFAULT_STRIDE: usize = 32;
/// Opening radius at roughly 3000-pixel-wide originals.
pub const FULL_SCALE_OPENING_RADIUS: usize = 20;
pub const FULL_SCALE_WIDTH: usize = 3000;
pub const THRESHOLD_COUNT: usize = 100;

/// Opening radius scaled to an image width, never below one pixel.
pub fn scaled_opening_radius(width: usize) -> usize {
    ((FULL_SCALE_OPENING_RADIUS * width) as f64 / FULL_SCALE_WIDTH as f64)
        .round()
        .max(1.0) as usize
}

/// Thresholds `k / 99` for `k = 0..100`.
pub fn threshold_grid() -> Vec<f64> {
    (0..THRESHOLD_COUNT)
        .map(|k| k as f64 / (THRESHOLD_COUNT - 1) as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Binary decision map; produced by [`binarize`].
pub type BinaryMap = BinaryMask;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    coverage: Vec<u32>,
    pub window: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
}

impl ProbabilityMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Number of windows covering each pixel; zero where the score was
    /// filled from the nearest covered pixel.
    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    pub fn uncovered(&self) -> usize {
        self.coverage.iter().filter(|&&c| c == 0).count()
    }

    /// Scores scaled to 8 bits.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.data.iter().map(|v| (v * 255.0).round()).collect(),
        )
        .expect("scores are finite")
    }

    /// Writes the map as P5 plus a `.txt` sidecar describing how it was made.
    pub fn save(&self, path: impl AsRef<Path>, tau: Option<f64>) -> Result<()> {
        let path = path.as_ref();
        crate::imaging::write_image(path, &Image::Gray(self.to_gray()))?;
        let mut meta = String::new();
        let _ = writeln!(meta, "window={}", self.window);
        let _ = writeln!(meta, "stride={}", self.stride);
        let _ = writeln!(
            meta,
            "aggregation={}",
            match self.aggregation {
                Aggregation::Mean => "mean",
                Aggregation::Max => "max",
            }
        );
        if let Some(t) = tau {
            let _ = writeln!(meta, "tau={t}");
        }
        let _ = writeln!(meta, "uncovered_pixels={}", self.uncovered());
        let _ = writeln!(meta, "coverage_policy=nearest-covered");
        let mut side = path.as_os_str().to_owned();
        side.push(".txt");
        write_atomic(Path::new(&side), meta.as_bytes())
    }
}

/// Top-left offsets of full windows along one axis.
pub fn window_positions(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > len || stride == 0 {
        return Vec::new();
    }
    (0..=len - window).step_by(stride).collect()
}

/// Every full window of an image, row-major.
pub fn window_grid(width: usize, height: usize, window: usize, stride: usize) -> Vec<BlockRef> {
    let cols = window_positions(width, window, stride);
    window_positions(height, window, stride)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| BlockRef::new(r, c, 0, window)))
        .collect()
}

/// Spreads window scores over their pixels. Pixels outside every window take
/// the score of the nearest covered pixel (clamped row and column).
pub fn aggregate(
    width: usize,
    height: usize,
    windows: &[(BlockRef, f64)],
    aggregation: Aggregation,
    stride: usize,
) -> Result<ProbabilityMap> {
    if windows.is_empty() {
        return Err(Error::Argument("no windows to aggregate".into()));
    }
    let window = windows[0].0.size;
    let mut acc = vec![
        match aggregation {
            Aggregation::Mean => 0.0,
            Aggregation::Max => f64::NEG_INFINITY,
        };
        width * height
    ];
    let mut coverage = vec![0u32; width * height];
    for (b, score) in windows {
        b.check(width, height)?;
        if !score.is_finite() {
            return Err(Error::Argument(format!(
                "window score {score} is not finite"
            )));
        }
        for r in b.row..b.row + b.size {
            let base = r * width;
            for i in base + b.col..base + b.col + b.size {
                coverage[i] += 1;
                match aggregation {
                    Aggregation::Mean => acc[i] += score,
                    Aggregation::Max => acc[i] = acc[i].max(*score),
                }
            }
        }
    }
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..height {
        for c in 0..width {
            if coverage[r * width + c] > 0 {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    let mut data: Vec<f64> = acc
        .iter()
        .zip(&coverage)
        .map(|(&a, &n)| match (aggregation, n) {
            (_, 0) => f64::NAN,
            (Aggregation::Mean, n) => a / n as f64,
            (Aggregation::Max, _) => a,
        })
        .collect();
    for r in 0..height {
        for c in 0..width {
            if coverage[r * width + c] == 0 {
                let (rr, cc) = (r.clamp(rmin, rmax), c.clamp(cmin, cmax));
                data[r * width + c] = data[rr * width + cc];
            }
        }
    }
    Ok(ProbabilityMap {
        width,
        height,
        data,
        coverage,
        window,
        stride,
        aggregation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlidingParams {
    pub window: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
}

impl Default for SlidingParams {
    fn default() -> Self {
        SlidingParams {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            aggregation: Aggregation::Mean,
        }
    }
}

/// Per-window evidence: the window, its PRNU correlation and its classifier score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowEvidence {
    pub block: BlockRef,
    pub rho: f64,
    pub phi: f64,
}

/// Scores every window of an image. The residual is extracted once from the
/// whole image and cropped per window.
pub fn window_evidence(
    img: &RgbImage,
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
    params: &SlidingParams,
    denoiser: &Denoiser,
) -> Result<Vec<WindowEvidence>> {
    let (w, h) = (img.width(), img.height());
    if (fp.width(), fp.height()) != (w, h) {
        return Err(Error::Dimension(format!(
            "fingerprint is {}x{} but image is {w}x{h}",
            fp.width(),
            fp.height()
        )));
    }
    if w < params.window || h < params.window {
        return Err(Error::Dimension(format!(
            "{w}x{h} image is smaller than the {}px window",
            params.window
        )));
    }
    if params.window != cmi.block_size {
        return Err(Error::Dimension(format!(
            "window {} differs from classifier block size {}",
            params.window, cmi.block_size
        )));
    }
    let analysis = ImageAnalysis::new(img, denoiser)?;
    window_grid(w, h, params.window, params.stride)
        .par_iter()
        .map(|b| {
            let (rho, phi) = block_scores(img, &analysis, fp, cmi, b)?;
            Ok(WindowEvidence {
                block: *b,
                rho,
                phi,
            })
        })
        .collect()
}

/// Fused tamper map: `theta` per window, spread over pixels.
pub fn fusion_map(
    width: usize,
    height: usize,
    evidence: &[WindowEvidence],
    fusion: &FusionModel,
    params: &SlidingParams,
) -> Result<ProbabilityMap> {
    let scored = evidence
        .iter()
        .map(|e| Ok((e.block, fusion.theta(e.rho, e.phi)?)))
        .collect::<Result<Vec<_>>>()?;
    aggregate(width, height, &scored, params.aggregation, params.stride)
}

/// PRNU-only tamper map from the same windows: `(1 - rho) / 2`.
pub fn prnu_map(
    width: usize,
    height: usize,
    evidence: &[WindowEvidence],
    params: &SlidingParams,
) -> Result<ProbabilityMap> {
    let scored: Vec<_> = evidence
        .iter()
        .map(|e| (e.block, (1.0 - e.rho.clamp(-1.0, 1.0)) / 2.0))
        .collect();
    aggregate(width, height, &scored, params.aggregation, params.stride)
}

/// Fused sliding-window tamper map of one image.
pub fn sliding_map(
    img: &RgbImage,
    fp: &Fingerprint,
    cmi: &CmiModelBundle,
    fusion: &FusionModel,
    params: &SlidingParams,
    denoiser: &Denoiser,
) -> Result<ProbabilityMap> {
    let evidence = window_evidence(img, fp, cmi, params, denoiser)?;
    fusion_map(img.width(), img.height(), &evidence, fusion, params)
}

/// Offsets of a discrete disc of the given radius.
pub fn disc(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn erode(mask: &BinaryMask, se: &[(isize, isize)]) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::zeros(w, h);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let keep = se.iter().all(|&(dy, dx)| {
                let (y, x) = (r as isize + dy, c as isize + dx);
                y >= 0
                    && x >= 0
                    && (y as usize) < h
                    && (x as usize) < w
                    && mask.get(y as usize, x as usize)
            });
            if keep {
                out.set(r, c, true);
            }
        }
    }
    out
}

fn dilate(mask: &BinaryMask, se: &[(isize, isize)]) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::zeros(w, h);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            for &(dy, dx) in se {
                let (y, x) = (r as isize + dy, c as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    out.set(y as usize, x as usize, true);
                }
            }
        }
    }
    out
}

/// Erosion then dilation by a disc; pixels outside the image count as
/// background.
pub fn opening(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let se = disc(radius);
    dilate(&erode(mask, &se), &se)
}

/// Thresholds a map (`score >= tau` is positive) and cleans it with an opening.
pub fn binarize(map: &ProbabilityMap, tau: f64, opening_radius: usize) -> Result<BinaryMap> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Argument(format!(
            "threshold {tau} is outside [0, 1]"
        )));
    }
    Ok(opening(&threshold(map, tau), opening_radius))
}

fn threshold(map: &ProbabilityMap, tau: f64) -> BinaryMask {
    let data = map.data.iter().map(|&v| u8::from(v >= tau)).collect();
    BinaryMask::new(map.width, map.height, data).expect("matching dimensions")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    /// `2 TP / (2 TP + FP + FN)`, defined as 1 when both maps are empty.
    pub fn f_score(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMap, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::Dimension(format!(
            "prediction is {}x{} but truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn f_score(pred: &BinaryMap, truth: &BinaryMask) -> Result<(ConfusionCounts, f64)> {
    let c = confusion(pred, truth)?;
    Ok((c, c.f_score()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdCalibration {
    pub model_id: String,
    pub tau: f64,
    /// `(threshold, mean F-score)` over the threshold grid.
    pub curve: Vec<(f64, f64)>,
}

impl ThresholdCalibration {
    pub fn best_f_score(&self) -> f64 {
        self.curve
            .iter()
            .find(|(t, _)| *t == self.tau)
            .map_or(f64::NAN, |(_, f)| *f)
    }

    /// True when the selected threshold is neither end of the grid.
    pub fn is_interior(&self) -> bool {
        let first = self.curve.first().map(|p| p.0);
        let last = self.curve.last().map(|p| p.0);
        Some(self.tau) != first && Some(self.tau) != last
    }

    /// Plain-text form: `model_id=` and `tau=` lines, then one
    /// `threshold,f_score` line per grid point.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model_id={}", self.model_id);
        let _ = writeln!(s, "tau={}", self.tau);
        for (t, f) in &self.curve {
            let _ = writeln!(s, "{t},{f}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut field = |key: &str| {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("calibration: missing {key}")))
        };
        let model_id = field("model_id")?;
        let tau = field("tau")?
            .parse()
            .map_err(|e| Error::Format(format!("calibration tau: {e}")))?;
        let curve = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (t, f) = l
                    .split_once(',')
                    .ok_or_else(|| Error::Format(format!("calibration line {l:?}")))?;
                let num = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("calibration line {l:?}: {e}")))
                };
                Ok((num(t)?, num(f)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if !curve.iter().any(|p| p.0 == tau) {
            return Err(Error::Format(format!(
                "calibration tau {tau} is not on its curve"
            )));
        }
        Ok(ThresholdCalibration {
            model_id,
            tau,
            curve,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ThresholdCalibration::parse(&text)
    }
}

/// Sweeps the threshold grid and picks the threshold with the highest mean
/// F-score over all forged maps; ties go to the lower threshold.
pub fn calibrate_threshold(
    model_id: &str,
    maps: &[(ProbabilityMap, BinaryMask)],
    opening_radius: usize,
) -> Result<ThresholdCalibration> {
    if maps.is_empty() {
        return Err(Error::Argument(
            "calibration needs at least one forged image".into(),
        ));
    }
    let grid = threshold_grid();
    let curve: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&tau| {
            let mut sum = 0.0;
            for (map, truth) in maps {
                sum += f_score(&binarize(map, tau, opening_radius)?, truth)?.1;
            }
            Ok((tau, sum / maps.len() as f64))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.1 > curve[best].1 {
            best = i;
        }
    }
    Ok(ThresholdCalibration {
        model_id: model_id.to_string(),
        tau: curve[best].0,
        curve,
    })
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties between a
/// positive and a negative count one half.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<f64> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    if let Some((s, _)) = scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::Argument(format!("score {s} is not finite")));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // For each tie group: positives beat every negative below the group and
    // half of the negatives inside it.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let p = sorted[i..j].iter().filter(|s| s.1).count();
        let n = (j - i) - p;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        let mut m = BinaryMask::zeros(w, h);
        for r in 0..h {
            for c in 0..w {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    fn map_from(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> ProbabilityMap {
        let windows: Vec<_> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| (BlockRef::new(r, c, 0, 1), f(r, c)))
            .collect();
        aggregate(w, h, &windows, Aggregation::Mean, 1).unwrap()
    }

    #[test]
    fn f_score_formula() {
        let c = ConfusionCounts {
            tp: 5,
            fp: 5,
            fn_: 5,
            tn: 0,
        };
        assert_eq!(c.f_score(), 0.5);
        let truth = mask_from(8, 8, |r, c| r < 3 && c < 4);
        assert_eq!(f_score(&truth, &truth).unwrap().1, 1.0);
        let empty = BinaryMask::zeros(8, 8);
        assert_eq!(f_score(&empty, &empty).unwrap().1, 1.0);
        assert_eq!(f_score(&empty, &truth).unwrap().1, 0.0);
        assert!(f_score(&BinaryMask::zeros(8, 7), &truth).is_err());
    }

    #[test]
    fn non_overlapping_tiling_is_identity() {
        let windows: Vec<_> = window_grid(8, 8, 4, 4)
            .into_iter()
            .enumerate()
            .map(|(i, b)| (b, i as f64 / 4.0))
            .collect();
        let map = aggregate(8, 8, &windows, Aggregation::Mean, 4).unwrap();
        assert!(map.coverage().iter().all(|&c| c == 1));
        assert_eq!(map.data()[0], 0.0);
        assert_eq!(map.data()[7 * 8 + 7], 0.75);
    }

    #[test]
    fn uncovered_border_copies_nearest_covered_pixel() {
        let windows = vec![
            (BlockRef::new(0, 0, 0, 4), 0.2),
            (BlockRef::new(0, 3, 0, 4), 0.8),
        ];
        let map = aggregate(9, 6, &windows, Aggregation::Mean, 3).unwrap();
        assert_eq!(map.uncovered(), 9 * 6 - 4 * 7);
        assert_eq!(map.data()[5 * 9 + 8], 0.8);
        assert_eq!(map.data()[5 * 9], 0.2);
        assert_eq!(map.data()[3], 0.5);
        let max = aggregate(9, 6, &windows, Aggregation::Max, 3).unwrap();
        assert_eq!(max.data()[3], 0.8);
    }

    #[test]
    fn opening_removes_small_blobs_and_keeps_large_ones() {
        let small = mask_from(30, 30, |r, c| {
            (r as isize - 10).pow(2) + (c as isize - 10).pow(2) <= 1
        });
        assert_eq!(opening(&small, 2).count_ones(), 0);
        let square = mask_from(30, 30, |r, c| (5..20).contains(&r) && (5..20).contains(&c));
        let opened = opening(&square, 2);
        assert!(opened.count_ones() > 15 * 15 - 20);
        assert_eq!(opening(&opened, 2), opened);
    }

    #[test]
    fn saturated_threshold_keeps_everything_but_corners() {
        let map = map_from(12, 10, |_, _| 0.3);
        let bin = binarize(&map, 0.0, 2).unwrap();
        for r in 2..8 {
            for c in 0..12 {
                assert!(bin.get(r, c));
            }
        }
        assert!(!bin.get(0, 0));
        let top = binarize(
            &map_from(6, 6, |r, _| if r < 3 { 1.0 } else { 0.99 }),
            1.0,
            0,
        )
        .unwrap();
        assert_eq!(top.count_ones(), 18);
        assert!(binarize(&map, 1.01, 2).is_err());
    }

    fn brute_auc(scores: &[(f64, bool)]) -> f64 {
        let mut wins = 0.0;
        let mut n = 0.0;
        for a in scores.iter().filter(|s| s.1) {
            for b in scores.iter().filter(|s| !s.1) {
                n += 1.0;
                wins += if a.0 > b.0 {
                    1.0
                } else if a.0 == b.0 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / n
    }

    #[test]
    fn auc_matches_pair_counting() {
        use rand::Rng;
        let mut r = crate::camsim::rng(4);
        for _ in 0..20 {
            let scores: Vec<(f64, bool)> = (0..20)
                .map(|_| ((r.gen_range(0..6) as f64) / 5.0, r.gen_bool(0.4)))
                .collect();
            if scores.iter().all(|s| s.1) || scores.iter().all(|s| !s.1) {
                continue;
            }
            assert!((roc_auc(&scores).unwrap() - brute_auc(&scores)).abs() < 1e-12);
        }
        let sep = [(0.9, true), (0.8, true), (0.1, false)];
        assert_eq!(roc_auc(&sep).unwrap(), 1.0);
        assert!(roc_auc(&[(0.1, true)]).is_err());
    }

    #[test]
    fn calibration_on_constant_map_is_a_step() {
        let truth = mask_from(20, 20, |r, c| r < 10 && c < 10);
        let maps = vec![(map_from(20, 20, |_, _| 0.4), truth)];
        let cal = calibrate_threshold("m", &maps, 1).unwrap();
        assert!(cal.tau <= 0.4);
        assert_eq!(cal.tau, 0.0);
        let below: Vec<f64> = cal
            .curve
            .iter()
            .filter(|p| p.0 <= 0.4)
            .map(|p| p.1)
            .collect();
        assert!(below.windows(2).all(|w| w[0] == w[1]));
        assert!(cal.curve.iter().filter(|p| p.0 > 0.4).all(|p| p.1 == 0.0));
        assert!(calibrate_threshold("m", &[], 1).is_err());
    }

    #[test]
    fn calibration_finds_interior_threshold() {
        let truth = mask_from(24, 24, |r, c| (6..18).contains(&r) && (6..18).contains(&c));
        let map = map_from(24, 24, |r, c| {
            let inside = (6..18).contains(&r) && (6..18).contains(&c);
            if inside {
                0.7
            } else {
                0.3 + 0.01 * ((r * 7 + c * 3) % 5) as f64
            }
        });
        let cal = calibrate_threshold("m", &[(map, truth)], 1).unwrap();
        assert!(cal.is_interior());
        assert!(cal.tau > 0.34 && cal.tau < 0.35, "{}", cal.tau);
        assert!(cal.best_f_score() > 0.98);
    }

    #[test]
    fn calibration_text_roundtrip() {
        let truth = mask_from(16, 16, |r, _| r < 4);
        let cal = calibrate_threshold(
            "m2",
            &[(map_from(16, 16, |r, _| r as f64 / 15.0), truth)],
            1,
        )
        .unwrap();
        assert_eq!(ThresholdCalibration::parse(&cal.to_text()).unwrap(), cal);
        assert!(ThresholdCalibration::parse("model_id=x\ntau=0.5\n0.1,0.2\n").is_err());
    }

    #[test]
    fn opening_radius_scales_with_width() {
        assert_eq!(scaled_opening_radius(256), 2);
        assert_eq!(scaled_opening_radius(3000), 20);
        assert_eq!(scaled_opening_radius(16), 1);
        assert_eq!(threshold_grid().len(), 100);
        assert_eq!(threshold_grid()[99], 1.0);
    }
}
