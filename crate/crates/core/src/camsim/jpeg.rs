//! In-memory JPEG-style recompression: YCbCr conversion, 4:2:0 chroma
//! subsampling, 8x8 DCT quantization and reconstruction. No bitstream is
//! produced; only the quantization loss is modeled.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::imaging::RgbImage;
use crate::{Error, Result};

/// Annex K luminance table, row-major.
#[rustfmt::skip]
pub const STD_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, row-major.
#[rustfmt::skip]
pub const STD_CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Luma and chroma quantizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

impl QuantTables {
    /// Standard tables scaled with the conventional quality mapping:
    /// `s = 5000 / q` below 50, `200 - 2q` otherwise, entries
    /// `floor((base * s + 50) / 100)` clamped to `[1, 255]`.
    pub fn for_quality(quality: u8) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(Error::Argument(format!(
                "quality {quality} outside [1, 100]"
            )));
        }
        let q = quality as u32;
        let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
        let scale = |base: &[u16; 64]| {
            let mut t = [0u16; 64];
            for (dst, &b) in t.iter_mut().zip(base) {
                *dst = ((b as u32 * s + 50) / 100).clamp(1, 255) as u16;
            }
            t
        };
        Ok(Self {
            luma: scale(&STD_LUMA_TABLE),
            chroma: scale(&STD_CHROMA_TABLE),
        })
    }

    /// Camera-side tables: the standard tables times `scale / 16`, so that
    /// `scale = 1` quantizes the DC step to 1 and the whole table roughly
    /// matches quality 97.
    pub fn camera(scale: f64) -> Result<Self> {
        if !(scale >= 1.0 && scale.is_finite()) {
            return Err(Error::Argument(format!(
                "quant table scale must be >= 1, got {scale}"
            )));
        }
        let build = |base: &[u16; 64]| {
            let mut t = [0u16; 64];
            for (dst, &b) in t.iter_mut().zip(base) {
                *dst = (b as f64 * scale / 16.0).round().clamp(1.0, 255.0) as u16;
            }
            t
        };
        Ok(Self {
            luma: build(&STD_LUMA_TABLE),
            chroma: build(&STD_CHROMA_TABLE),
        })
    }
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let alpha = if u == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D DCT-II of one 8x8 block (row-major), in place.
pub fn fdct8x8(block: &mut [f64; 64]) {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    for v in 0..8 {
        for u in 0..8 {
            block[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
}

/// Inverse of [`fdct8x8`], in place.
pub fn idct8x8(block: &mut [f64; 64]) {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * block[v * 8 + u]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
}

/// Quantizes every 8x8 block of a plane whose sides are multiples of 8.
fn quantize_plane(plane: &mut [f64], width: usize, height: usize, table: &[u16; 64]) {
    let mut block = [0.0; 64];
    for by in (0..height).step_by(8) {
        for bx in (0..width).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = plane[(by + y) * width + bx + x] - 128.0;
                }
            }
            fdct8x8(&mut block);
            for (c, &q) in block.iter_mut().zip(table) {
                let q = q as f64;
                *c = (*c / q).round() * q;
            }
            idct8x8(&mut block);
            for y in 0..8 {
                for x in 0..8 {
                    plane[(by + y) * width + bx + x] = block[y * 8 + x] + 128.0;
                }
            }
        }
    }
}

/// Runs an RGB raster (interleaved, any real values) through the lossy
/// stage and returns integer-valued samples clamped to `[0, 255]`.
pub fn roundtrip(data: &[f64], width: usize, height: usize, tables: &QuantTables) -> Vec<f64> {
    let pw = width.div_ceil(16) * 16;
    let ph = height.div_ceil(16) * 16;
    let mut y = vec![0.0; pw * ph];
    let mut cb = vec![0.0; pw * ph];
    let mut cr = vec![0.0; pw * ph];
    for r in 0..ph {
        let sr = r.min(height - 1);
        for c in 0..pw {
            let sc = c.min(width - 1);
            let i = (sr * width + sc) * 3;
            let (rv, gv, bv) = (data[i], data[i + 1], data[i + 2]);
            let o = r * pw + c;
            y[o] = 0.299 * rv + 0.587 * gv + 0.114 * bv;
            cb[o] = -0.168_736 * rv - 0.331_264 * gv + 0.5 * bv + 128.0;
            cr[o] = 0.5 * rv - 0.418_688 * gv - 0.081_312 * bv + 128.0;
        }
    }
    let (cw, ch) = (pw / 2, ph / 2);
    let down = |p: &[f64]| {
        let mut out = vec![0.0; cw * ch];
        for r in 0..ch {
            for c in 0..cw {
                let a = p[(2 * r) * pw + 2 * c];
                let b = p[(2 * r) * pw + 2 * c + 1];
                let d = p[(2 * r + 1) * pw + 2 * c];
                let e = p[(2 * r + 1) * pw + 2 * c + 1];
                out[r * cw + c] = 0.25 * (a + b + d + e);
            }
        }
        out
    };
    let mut cb_small = down(&cb);
    let mut cr_small = down(&cr);
    quantize_plane(&mut y, pw, ph, &tables.luma);
    quantize_plane(&mut cb_small, cw, ch, &tables.chroma);
    quantize_plane(&mut cr_small, cw, ch, &tables.chroma);
    let mut out = Vec::with_capacity(width * height * 3);
    for r in 0..height {
        for c in 0..width {
            let yv = y[r * pw + c];
            let cbv = cb_small[(r / 2) * cw + c / 2] - 128.0;
            let crv = cr_small[(r / 2) * cw + c / 2] - 128.0;
            let rgb = [
                yv + 1.402 * crv,
                yv - 0.344_136 * cbv - 0.714_136 * crv,
                yv + 1.772 * cbv,
            ];
            out.extend(rgb.iter().map(|v| v.round().clamp(0.0, 255.0)));
        }
    }
    out
}

/// Recompresses an image at a JPEG quality factor in `[1, 100]`.
pub fn recompress(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let tables = QuantTables::for_quality(quality)?;
    let out = roundtrip(img.data(), img.width(), img.height(), &tables);
    RgbImage::new(img.width(), img.height(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_tables_follow_ijg_mapping() {
        let q50 = QuantTables::for_quality(50).unwrap();
        assert_eq!(q50.luma, STD_LUMA_TABLE);
        assert_eq!(q50.chroma, STD_CHROMA_TABLE);
        let q100 = QuantTables::for_quality(100).unwrap();
        assert!(q100.luma.iter().chain(&q100.chroma).all(|&v| v == 1));
        // s = 5000 / 25 = 200: entries double
        let q25 = QuantTables::for_quality(25).unwrap();
        assert_eq!(q25.luma[0], 32);
        // s = 200 - 180 = 20: 16 * 20 / 100 = 3.2 -> floor(3.7) = 3
        let q90 = QuantTables::for_quality(90).unwrap();
        assert_eq!(q90.luma[0], 3);
        assert!(QuantTables::for_quality(0).is_err());
        assert!(QuantTables::for_quality(101).is_err());
    }

    #[test]
    fn camera_tables_scale_with_dc_step_one() {
        let t = QuantTables::camera(1.0).unwrap();
        assert_eq!(t.luma[0], 1);
        let t3 = QuantTables::camera(3.0).unwrap();
        assert_eq!(t3.luma[0], 3);
        assert!(QuantTables::camera(0.5).is_err());
    }

    #[test]
    fn dct_is_orthonormal() {
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 19) as f64 - 9.0;
        }
        let orig = block;
        let energy: f64 = orig.iter().map(|v| v * v).sum();
        fdct8x8(&mut block);
        let coef_energy: f64 = block.iter().map(|v| v * v).sum();
        assert!((energy - coef_energy).abs() < 1e-9);
        idct8x8(&mut block);
        for (a, b) in orig.iter().zip(&block) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_image_survives_when_dc_is_on_the_grid() {
        // DC = 8 * (120 - 128) = -64, a multiple of the q50 DC step 16.
        let img = RgbImage::filled(24, 20, [120.0, 120.0, 120.0]);
        let out = recompress(&img, 50).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1.0);
        }
    }
}
