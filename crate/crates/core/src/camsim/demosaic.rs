//! Bayer color filter arrays and three demosaicing variants.

use std::fmt;
use std::str::FromStr;

use crate::Error;

/// 2x2 Bayer layout, named by the top-left quad in reading order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cfa {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl Cfa {
    pub const ALL: [Cfa; 4] = [Cfa::Rggb, Cfa::Bggr, Cfa::Grbg, Cfa::Gbrg];

    /// Color channel (0 = R, 1 = G, 2 = B) sampled at `(row, col)`.
    #[inline]
    pub fn channel_at(self, row: usize, col: usize) -> usize {
        let quad = match self {
            Cfa::Rggb => [0, 1, 1, 2],
            Cfa::Bggr => [2, 1, 1, 0],
            Cfa::Grbg => [1, 0, 2, 1],
            Cfa::Gbrg => [1, 2, 0, 1],
        };
        quad[(row % 2) * 2 + col % 2]
    }
}

impl fmt::Display for Cfa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cfa::Rggb => "RGGB",
            Cfa::Bggr => "BGGR",
            Cfa::Grbg => "GRBG",
            Cfa::Gbrg => "GBRG",
        })
    }
}

impl FromStr for Cfa {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Cfa::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown CFA layout {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Demosaic {
    Bilinear,
    /// Bilinear green, then bilinear interpolation of the R/G and B/G ratios.
    SmoothHue,
    /// Malvar-He-Cutler 5x5 gradient-corrected linear filters.
    GradientCorrected,
}

impl Demosaic {
    pub const ALL: [Demosaic; 3] = [
        Demosaic::Bilinear,
        Demosaic::SmoothHue,
        Demosaic::GradientCorrected,
    ];
}

impl fmt::Display for Demosaic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Demosaic::Bilinear => "bilinear",
            Demosaic::SmoothHue => "smooth-hue",
            Demosaic::GradientCorrected => "gradient-corrected",
        })
    }
}

impl FromStr for Demosaic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Demosaic::ALL
            .into_iter()
            .find(|d| d.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown demosaic variant {s:?}")))
    }
}

/// Mosaic raster with CFA-phase-preserving border reflection.
struct Mosaic<'a> {
    raw: &'a [f64],
    width: usize,
    height: usize,
    cfa: Cfa,
}

#[inline]
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

impl Mosaic<'_> {
    #[inline]
    fn at(&self, r: isize, c: isize) -> f64 {
        self.raw[reflect101(r, self.height) * self.width + reflect101(c, self.width)]
    }

    fn cross(&self, r: isize, c: isize) -> f64 {
        0.25 * (self.at(r - 1, c) + self.at(r + 1, c) + self.at(r, c - 1) + self.at(r, c + 1))
    }

    fn diag(&self, r: isize, c: isize) -> f64 {
        0.25 * (self.at(r - 1, c - 1)
            + self.at(r - 1, c + 1)
            + self.at(r + 1, c - 1)
            + self.at(r + 1, c + 1))
    }

    fn horiz(&self, r: isize, c: isize) -> f64 {
        0.5 * (self.at(r, c - 1) + self.at(r, c + 1))
    }

    fn vert(&self, r: isize, c: isize) -> f64 {
        0.5 * (self.at(r - 1, c) + self.at(r + 1, c))
    }

    /// Channel of the horizontal neighbors of a green site.
    fn row_partner(&self, r: usize, c: usize) -> usize {
        self.cfa.channel_at(r, c + 1)
    }

    fn bilinear(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height * 3];
        for r in 0..self.height {
            for c in 0..self.width {
                let (ri, ci) = (r as isize, c as isize);
                let own = self.cfa.channel_at(r, c);
                let v = self.at(ri, ci);
                let px = &mut out[(r * self.width + c) * 3..][..3];
                if own == 1 {
                    px[1] = v;
                    let h = self.row_partner(r, c);
                    px[h] = self.horiz(ri, ci);
                    px[2 - h] = self.vert(ri, ci);
                } else {
                    px[own] = v;
                    px[1] = self.cross(ri, ci);
                    px[2 - own] = self.diag(ri, ci);
                }
            }
        }
        out
    }

    fn smooth_hue(&self) -> Vec<f64> {
        let bil = self.bilinear();
        let green: Vec<f64> = bil.iter().skip(1).step_by(3).map(|g| g.max(1.0)).collect();
        let g_at = |r: isize, c: isize| {
            green[reflect101(r, self.height) * self.width + reflect101(c, self.width)]
        };
        let ratio = |r: isize, c: isize| self.at(r, c) / g_at(r, c);
        let mut out = vec![0.0; self.width * self.height * 3];
        for r in 0..self.height {
            for c in 0..self.width {
                let (ri, ci) = (r as isize, c as isize);
                let own = self.cfa.channel_at(r, c);
                let g = g_at(ri, ci);
                let px = &mut out[(r * self.width + c) * 3..][..3];
                if own == 1 {
                    px[1] = self.at(ri, ci);
                    let h = self.row_partner(r, c);
                    px[h] = g * 0.5 * (ratio(ri, ci - 1) + ratio(ri, ci + 1));
                    px[2 - h] = g * 0.5 * (ratio(ri - 1, ci) + ratio(ri + 1, ci));
                } else {
                    px[own] = self.at(ri, ci);
                    px[1] = g;
                    let d = 0.25
                        * (ratio(ri - 1, ci - 1)
                            + ratio(ri - 1, ci + 1)
                            + ratio(ri + 1, ci - 1)
                            + ratio(ri + 1, ci + 1));
                    px[2 - own] = g * d;
                }
            }
        }
        out
    }

    fn kernel(&self, r: isize, c: isize, taps: &[(isize, isize, f64)]) -> f64 {
        taps.iter()
            .map(|&(dr, dc, w)| w * self.at(r + dr, c + dc))
            .sum::<f64>()
            / 8.0
    }

    fn gradient_corrected(&self) -> Vec<f64> {
        const G_AT_RB: [(isize, isize, f64); 9] = [
            (0, 0, 4.0),
            (-1, 0, 2.0),
            (1, 0, 2.0),
            (0, -1, 2.0),
            (0, 1, 2.0),
            (-2, 0, -1.0),
            (2, 0, -1.0),
            (0, -2, -1.0),
            (0, 2, -1.0),
        ];
        // color at a green site whose horizontal neighbors carry that color
        const ROW_AT_G: [(isize, isize, f64); 11] = [
            (0, 0, 5.0),
            (0, -1, 4.0),
            (0, 1, 4.0),
            (0, -2, -1.0),
            (0, 2, -1.0),
            (-1, -1, -1.0),
            (-1, 1, -1.0),
            (1, -1, -1.0),
            (1, 1, -1.0),
            (-2, 0, 0.5),
            (2, 0, 0.5),
        ];
        const COL_AT_G: [(isize, isize, f64); 11] = [
            (0, 0, 5.0),
            (-1, 0, 4.0),
            (1, 0, 4.0),
            (-2, 0, -1.0),
            (2, 0, -1.0),
            (-1, -1, -1.0),
            (-1, 1, -1.0),
            (1, -1, -1.0),
            (1, 1, -1.0),
            (0, -2, 0.5),
            (0, 2, 0.5),
        ];
        const OPPOSITE: [(isize, isize, f64); 9] = [
            (0, 0, 6.0),
            (-1, -1, 2.0),
            (-1, 1, 2.0),
            (1, -1, 2.0),
            (1, 1, 2.0),
            (-2, 0, -1.5),
            (2, 0, -1.5),
            (0, -2, -1.5),
            (0, 2, -1.5),
        ];
        let mut out = vec![0.0; self.width * self.height * 3];
        for r in 0..self.height {
            for c in 0..self.width {
                let (ri, ci) = (r as isize, c as isize);
                let own = self.cfa.channel_at(r, c);
                let px = &mut out[(r * self.width + c) * 3..][..3];
                px[own] = self.at(ri, ci);
                if own == 1 {
                    let h = self.row_partner(r, c);
                    px[h] = self.kernel(ri, ci, &ROW_AT_G);
                    px[2 - h] = self.kernel(ri, ci, &COL_AT_G);
                } else {
                    px[1] = self.kernel(ri, ci, &G_AT_RB);
                    px[2 - own] = self.kernel(ri, ci, &OPPOSITE);
                }
            }
        }
        out
    }
}

/// Reconstructs an interleaved RGB raster from a single-plane mosaic.
pub fn demosaic(raw: &[f64], width: usize, height: usize, cfa: Cfa, method: Demosaic) -> Vec<f64> {
    assert_eq!(raw.len(), width * height);
    let m = Mosaic {
        raw,
        width,
        height,
        cfa,
    };
    match method {
        Demosaic::Bilinear => m.bilinear(),
        Demosaic::SmoothHue => m.smooth_hue(),
        Demosaic::GradientCorrected => m.gradient_corrected(),
    }
}

/// Samples an interleaved RGB raster through the CFA.
pub fn mosaic(rgb: &[f64], width: usize, height: usize, cfa: Cfa) -> Vec<f64> {
    let mut raw = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            raw.push(rgb[(r * width + c) * 3 + cfa.channel_at(r, c)]);
        }
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_quad_has_one_red_two_green_one_blue() {
        for cfa in Cfa::ALL {
            let mut counts = [0; 3];
            for r in 0..2 {
                for c in 0..2 {
                    counts[cfa.channel_at(r, c)] += 1;
                }
            }
            assert_eq!(counts, [1, 2, 1], "{cfa}");
            assert_eq!(cfa.to_string().parse::<Cfa>().unwrap(), cfa);
        }
    }

    #[test]
    fn flat_color_is_reconstructed_exactly() {
        let (w, h) = (12, 10);
        let rgb: Vec<f64> = (0..w * h).flat_map(|_| [80.0, 150.0, 200.0]).collect();
        for cfa in Cfa::ALL {
            let raw = mosaic(&rgb, w, h, cfa);
            for method in Demosaic::ALL {
                let out = demosaic(&raw, w, h, cfa, method);
                for (a, b) in rgb.iter().zip(&out) {
                    assert!((a - b).abs() < 1e-9, "{cfa} {method}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn sampled_sites_are_kept() {
        let (w, h) = (8, 8);
        let raw: Vec<f64> = (0..w * h).map(|i| (i * 13 % 97) as f64 + 20.0).collect();
        for method in Demosaic::ALL {
            let out = demosaic(&raw, w, h, Cfa::Grbg, method);
            for r in 0..h {
                for c in 0..w {
                    let ch = Cfa::Grbg.channel_at(r, c);
                    assert_eq!(out[(r * w + c) * 3 + ch], raw[r * w + c]);
                }
            }
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!(
            "smooth-hue".parse::<Demosaic>().unwrap(),
            Demosaic::SmoothHue
        );
        assert!("nearest".parse::<Demosaic>().is_err());
        assert!("RGBG".parse::<Cfa>().is_err());
    }
}
