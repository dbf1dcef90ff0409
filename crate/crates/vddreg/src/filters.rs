//! Shared raster filters: separable Gaussian smoothing and Gaussian
//! derivative kernels with reflected borders. Used by the vesselness filter,
//! the corner detector, and the synthetic generator.

use ndarray::Array2;

/// Samples a normalized 1D Gaussian kernel with radius ceil(3*sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// First derivative of a Gaussian, sampled like [`gaussian_kernel`].
/// Normalized so that convolving a unit ramp yields 1.
pub fn gaussian_deriv1_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let g = gaussian_kernel(sigma);
    let mut k: Vec<f64> = (-radius..=radius)
        .zip(g.iter())
        .map(|(i, &gv)| -(i as f64) / (sigma * sigma) * gv)
        .collect();
    // These kernels are applied by correlation; rescale so that correlating
    // a unit ramp yields exactly 1.
    let scale: f64 = (-radius..=radius)
        .zip(k.iter())
        .map(|(i, &kv)| kv * i as f64)
        .sum();
    if scale.abs() > 1e-12 {
        k.iter_mut().for_each(|v| *v /= scale);
    }
    k
}

/// Second derivative of a Gaussian, zero-sum corrected.
pub fn gaussian_deriv2_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let g = gaussian_kernel(sigma);
    let mut k: Vec<f64> = (-radius..=radius)
        .zip(g.iter())
        .map(|(i, &gv)| {
            let x = i as f64;
            (x * x / (sigma * sigma) - 1.0) / (sigma * sigma) * gv
        })
        .collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    // Normalize so the response to x^2/2 is exactly 1.
    let scale: f64 = (-radius..=radius)
        .zip(k.iter())
        .map(|(i, &kv)| kv * (i * i) as f64 / 2.0)
        .sum();
    if scale.abs() > 1e-12 {
        k.iter_mut().for_each(|v| *v /= scale);
    }
    k
}

fn reflect(idx: i64, len: usize) -> usize {
    // Reflect-101 border: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    let n = len as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut i = idx.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Correlates each row with `kernel` (odd length), reflecting at borders.
pub fn convolve_rows(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let radius = (kernel.len() / 2) as i64;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let xi = reflect(x as i64 + ki as i64 - radius, w);
                acc += kv * img[(y, xi)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Correlates each column with `kernel` (odd length), reflecting at borders.
pub fn convolve_cols(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let radius = (kernel.len() / 2) as i64;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let yi = reflect(y as i64 + ki as i64 - radius, h);
                acc += kv * img[(yi, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    convolve_cols(&convolve_rows(img, &k), &k)
}
