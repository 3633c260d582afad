//! Image containers, netpbm file I/O, block extraction and luminance
//! conversion.
//!
//! Samples are stored as `f64` on the `[0, 255]` scale. Quantization to 8-bit
//! happens only when a raster is encoded (round-half-up, clamped).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Default side length of an analysis block.
pub const DEFAULT_BLOCK_SIZE: usize = 96;

/// Smallest block the pipeline accepts.
pub const MIN_BLOCK_SIZE: usize = 8;

/// Single-channel raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "gray image {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite sample at index {pos}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Exact sub-raster described by `block`; no resampling.
    pub fn crop(&self, block: &BlockRef) -> Result<GrayImage> {
        block.check(self.width, self.height)?;
        let mut data = Vec::with_capacity(block.size * block.size);
        for r in block.row..block.row + block.size {
            let start = r * self.width + block.col;
            data.extend_from_slice(&self.data[start..start + block.size]);
        }
        Ok(GrayImage {
            width: block.size,
            height: block.size,
            data,
        })
    }
}

/// Three-channel raster, row-major with interleaved R, G, B samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    /// Builds an image, rejecting non-finite or out-of-range samples.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "rgb image {width}x{height} needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(pos) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 255.0)
        {
            return Err(Error::Argument(format!(
                "sample {pos} outside [0, 255]: {}",
                data[pos]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image after clamping every sample into `[0, 255]`.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 255.0) };
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        for (dst, v) in self.data[i..i + 3].iter_mut().zip(rgb) {
            *dst = v.clamp(0.0, 255.0);
        }
    }

    /// One color plane as a gray raster.
    pub fn channel(&self, c: usize) -> GrayImage {
        assert!(c < 3, "channel index {c} out of range");
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    pub fn crop(&self, block: &BlockRef) -> Result<RgbImage> {
        block.check(self.width, self.height)?;
        let mut data = Vec::with_capacity(block.size * block.size * 3);
        for r in block.row..block.row + block.size {
            let start = (r * self.width + block.col) * 3;
            data.extend_from_slice(&self.data[start..start + block.size * 3]);
        }
        Ok(RgbImage {
            width: block.size,
            height: block.size,
            data,
        })
    }

    /// Luminance with BT.601 weights, clamped to `[0, 255]`.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]).clamp(0.0, 255.0))
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// BT.601 luma of one pixel.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Location of a square block inside image `image` of some collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockRef {
    /// Top row.
    pub row: usize,
    /// Left column.
    pub col: usize,
    /// Index of the source image.
    pub image: usize,
    pub size: usize,
}

impl BlockRef {
    pub fn new(row: usize, col: usize, image: usize, size: usize) -> Self {
        Self {
            row,
            col,
            image,
            size,
        }
    }

    /// Verifies the block fits inside a `width` x `height` raster.
    ///
    /// Any nonzero size is accepted here; analysis entry points additionally
    /// require [`MIN_BLOCK_SIZE`] via [`BlockRef::check_analysis`].
    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Bounds("block size is zero".into()));
        }
        if self.row + self.size > height {
            return Err(Error::Bounds(format!(
                "bottom edge: row {} + size {} exceeds height {height}",
                self.row, self.size
            )));
        }
        if self.col + self.size > width {
            return Err(Error::Bounds(format!(
                "right edge: col {} + size {} exceeds width {width}",
                self.col, self.size
            )));
        }
        Ok(())
    }

    /// Like [`BlockRef::check`], also enforcing the analysis minimum size.
    pub fn check_analysis(&self, width: usize, height: usize) -> Result<()> {
        if self.size < MIN_BLOCK_SIZE {
            return Err(Error::Bounds(format!(
                "block size {} below minimum {MIN_BLOCK_SIZE}",
                self.size
            )));
        }
        self.check(width, height)
    }
}

/// Per-pixel {0, 1} annotation, e.g. a ground-truth forgery mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask samples must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Gray raster with 0/255 samples, the on-disk representation.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f64 * 255.0).collect(),
        }
    }
}

/// A decoded netpbm raster.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Image {
    pub fn width(&self) -> usize {
        match self {
            Image::Gray(g) => g.width(),
            Image::Rgb(c) => c.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Image::Gray(g) => g.height(),
            Image::Rgb(c) => c.height(),
        }
    }

    pub fn crop(&self, block: &BlockRef) -> Result<Image> {
        Ok(match self {
            Image::Gray(g) => Image::Gray(g.crop(block)?),
            Image::Rgb(c) => Image::Rgb(c.crop(block)?),
        })
    }

    pub fn into_rgb(self) -> Result<RgbImage> {
        match self {
            Image::Rgb(c) => Ok(c),
            Image::Gray(_) => Err(Error::Format("expected a color (P6) image".into())),
        }
    }

    pub fn into_gray(self) -> Result<GrayImage> {
        match self {
            Image::Gray(g) => Ok(g),
            Image::Rgb(_) => Err(Error::Format("expected a gray (P5) image".into())),
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes a raster as binary netpbm (P5 or P6, maxval 255).
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let (magic, w, h, samples) = match image {
        Image::Gray(g) => ("P5", g.width, g.height, &g.data),
        Image::Rgb(c) => ("P6", c.width, c.height, &c.data),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(samples.iter().map(|&v| quantize(v)));
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!(
                "expected {what} at byte offset {start}"
            )));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("unparsable {what} at byte offset {start}")))
    }
}

/// Decodes a binary P5 or P6 file with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::Format("file too short for a netpbm magic".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported magic {:?}; expected P5 or P6",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.token("width")?;
    let height = cur.token("height")?;
    let maxval = cur.token("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported; need 255"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("degenerate size {width}x{height}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(Error::Format(format!(
                "missing whitespace after maxval at byte offset {}",
                cur.pos
            )))
        }
    }
    let expected = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            offset: bytes.len(),
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = payload[..expected].iter().map(|&b| b as f64).collect();
    Ok(if channels == 1 {
        Image::Gray(GrayImage {
            width,
            height,
            data,
        })
    } else {
        Image::Rgb(RgbImage {
            width,
            height,
            data,
        })
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    write_atomic(path, &encode_pnm(image))
}

/// Reads a P5 mask; any nonzero sample maps to 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let gray = read_image(path)?.into_gray()?;
    let data = gray.data.iter().map(|&v| (v > 0.0) as u8).collect();
    BinaryMask::new(gray.width, gray.height, data)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_image(path, &Image::Gray(mask.to_gray()))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_minimal_gray() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let img = decode_pnm(&bytes).unwrap().into_gray().unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.data(), &[0.0, 255.0, 128.0, 64.0]);
    }

    #[test]
    fn decodes_minimal_color() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([255u8, 0, 0, 0, 255, 0]);
        let img = decode_pnm(&bytes).unwrap().into_rgb().unwrap();
        assert_eq!(img.pixel(0, 0), [255.0, 0.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 255.0, 0.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n1 1\n255\n".to_vec();
        bytes.push(7);
        let img = decode_pnm(&bytes).unwrap().into_gray().unwrap();
        assert_eq!(img.data(), &[7.0]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([1u8, 2, 3]);
        match decode_pnm(&bytes) {
            Err(Error::Truncated {
                offset,
                expected,
                found,
            }) => {
                assert_eq!(offset, bytes.len());
                assert_eq!(expected, 4);
                assert_eq!(found, 3);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_are_format_errors() {
        for bad in [
            &b"P3 1 1 255\n\0"[..],
            b"P5 x 1 255\n\0",
            b"P5 1 1 65535\n\0\0",
            b"P",
        ] {
            assert!(matches!(decode_pnm(bad), Err(Error::Format(_))), "{bad:?}");
        }
    }

    #[test]
    fn gray_weights() {
        let img = RgbImage::new(3, 1, vec![255., 255., 255., 255., 0., 0., 0., 0., 0.]).unwrap();
        let g = img.to_gray();
        assert_eq!(g.get(0, 0), 255.0);
        assert!((g.get(0, 1) - 76.245).abs() < 1e-12);
        assert_eq!(g.get(0, 2), 0.0);
    }

    #[test]
    fn crop_identity_and_ramp() {
        let ramp = GrayImage::from_fn(4, 4, |r, c| (4 * r + c) as f64);
        assert_eq!(ramp.crop(&BlockRef::new(0, 0, 0, 4)).unwrap(), ramp);
        let b = ramp.crop(&BlockRef::new(1, 1, 0, 2)).unwrap();
        assert_eq!(b.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(BlockRef::new(1, 1, 0, 2).check_analysis(4, 4).is_err());
    }

    #[test]
    fn crop_out_of_bounds_names_edge() {
        let img = GrayImage::filled(16, 16, 0.0);
        let err = img.crop(&BlockRef::new(10, 0, 0, 8)).unwrap_err();
        assert!(err.to_string().contains("bottom"), "{err}");
        let err = img.crop(&BlockRef::new(0, 9, 0, 8)).unwrap_err();
        assert!(err.to_string().contains("right"), "{err}");
    }

    #[test]
    fn rgb_rejects_out_of_range() {
        assert!(RgbImage::new(1, 1, vec![0.0, 256.0, 0.0]).is_err());
        assert!(RgbImage::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(RgbImage::new(2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn mask_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut m = BinaryMask::zeros(5, 3);
        m.set(1, 2, true);
        m.set(2, 4, true);
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }
}
