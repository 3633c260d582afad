//! Thin 2-D FFT wrapper over `rustfft`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Row-major complex raster.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Complex64>,
}

fn transform(width: usize, height: usize, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (
            planner.plan_fft_inverse(width),
            planner.plan_fft_inverse(height),
        )
    } else {
        (
            planner.plan_fft_forward(width),
            planner.plan_fft_forward(height),
        )
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for (r, v) in column.iter_mut().enumerate() {
            *v = data[r * width + c];
        }
        col_fft.process(&mut column);
        for (r, v) in column.iter().enumerate() {
            data[r * width + c] = *v;
        }
    }
}

/// Unnormalized forward transform of a real raster.
pub fn forward(width: usize, height: usize, real: &[f64]) -> Spectrum {
    let mut data: Vec<Complex64> = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(width, height, &mut data, false);
    Spectrum {
        width,
        height,
        data,
    }
}

/// Inverse transform scaled by `1 / (width * height)`, keeping the real part.
pub fn inverse_real(mut spec: Spectrum) -> Vec<f64> {
    transform(spec.width, spec.height, &mut spec.data, true);
    let n = (spec.width * spec.height) as f64;
    spec.data.iter().map(|v| v.re / n).collect()
}

/// Circular cross-correlation `C(s) = sum_x a(x + s) * b(x)` over all shifts.
pub fn cross_correlate(width: usize, height: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let fa = forward(width, height, a);
    let mut fb = forward(width, height, b);
    for (x, y) in fb.data.iter_mut().zip(&fa.data) {
        *x = y * x.conj();
    }
    inverse_real(fb)
}
