//! Bicubic resampling compatible with MATLAB's `imresize` defaults.
//!
//! Three properties matter and are all tested:
//! * the Keys cubic kernel with a = -0.5,
//! * antialiasing on downscale — the kernel is stretched by the scale
//!   factor so its support covers 4/scale input pixels,
//! * replicate border handling with per-output weight normalization, so
//!   the weights always form a partition of unity.
//!
//! Output sizes round up: an H x W image scaled by 1/s becomes
//! ceil(H/s) x ceil(W/s).

/// A grayscale image in row-major layout, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "image buffer size mismatch");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.width + col]
    }
}

/// Keys bicubic kernel with a = -0.5. Zero at every nonzero integer, one at
/// the origin, supported on (-2, 2).
pub fn cubic_kernel(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Output length when resizing `len` samples by `scale` (> 1 enlarges).
pub fn output_len(len: usize, scale: f64) -> usize {
    (len as f64 * scale).ceil() as usize
}

/// Precomputed contribution of input samples to one output sample.
struct Taps {
    first: usize,
    weights: Vec<f64>,
}

/// Build the 1-d resampling taps for `in_len -> out_len` at `scale`.
///
/// Follows the standard contributions construction: output coordinate u maps
/// to input coordinate u/scale + 0.5*(1 - 1/scale) (both 1-based, here kept
/// 0-based which shifts both by 0.5 and cancels). When scale < 1 the kernel
/// is widened to scale*k(scale*x) for antialiasing. Out-of-range taps are
/// clamped to the border (replicate) by folding their weight onto the
/// nearest valid sample, and each row of weights is normalized to sum to 1.
fn build_taps(in_len: usize, out_len: usize, scale: f64) -> Vec<Taps> {
    let antialias = scale < 1.0;
    let kscale = if antialias { scale } else { 1.0 };
    let support = 4.0 / kscale; // kernel support in input samples
    let half = support / 2.0;
    let mut all = Vec::with_capacity(out_len);
    for u in 0..out_len {
        // center of output sample u in input coordinates (0-based)
        let center = (u as f64 + 0.5) / scale - 0.5;
        let left = (center - half).floor() as isize;
        let right = (center + half).ceil() as isize;
        let mut first = isize::MAX;
        let mut weights: Vec<f64> = Vec::new();
        let mut clamped: Vec<(usize, f64)> = Vec::new();
        for j in left..=right {
            let w = kscale * cubic_kernel(kscale * (center - j as f64));
            if w == 0.0 {
                continue;
            }
            let idx = j.clamp(0, in_len as isize - 1) as usize;
            clamped.push((idx, w));
            first = first.min(idx as isize);
        }
        if clamped.is_empty() {
            // degenerate (cannot happen for support >= 2) — nearest sample
            let idx = (center.round().clamp(0.0, in_len as f64 - 1.0)) as usize;
            clamped.push((idx, 1.0));
            first = idx as isize;
        }
        let first = first as usize;
        let last = clamped.iter().map(|&(i, _)| i).max().unwrap();
        weights.resize(last - first + 1, 0.0);
        let mut total = 0.0;
        for (i, w) in clamped {
            weights[i - first] += w;
            total += w;
        }
        for w in &mut weights {
            *w /= total;
        }
        all.push(Taps { first, weights });
    }
    all
}

fn resample_rows(img: &GrayImage, taps: &[Taps]) -> GrayImage {
    let out_h = taps.len();
    let mut out = GrayImage::zeros(out_h, img.width);
    for (r, t) in taps.iter().enumerate() {
        for c in 0..img.width {
            let mut acc = 0.0;
            for (k, &w) in t.weights.iter().enumerate() {
                acc += w * img.at(t.first + k, c);
            }
            *out.at_mut(r, c) = acc;
        }
    }
    out
}

fn resample_cols(img: &GrayImage, taps: &[Taps]) -> GrayImage {
    let out_w = taps.len();
    let mut out = GrayImage::zeros(img.height, out_w);
    for r in 0..img.height {
        for (c, t) in taps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &w) in t.weights.iter().enumerate() {
                acc += w * img.at(r, t.first + k);
            }
            *out.at_mut(r, c) = acc;
        }
    }
    out
}

/// Resize by a scale factor (`scale > 1` enlarges, `< 1` shrinks); the
/// given scale drives both the output size (ceil) and the antialiasing
/// width, matching the by-scale calling convention of the reference
/// resizer. Values are NOT clamped; callers clamp to [0,1] at the image
/// boundary.
pub fn resize_scale(img: &GrayImage, scale: f64) -> GrayImage {
    assert!(scale > 0.0 && scale.is_finite(), "invalid scale {scale}");
    let out_h = output_len(img.height, scale);
    let out_w = output_len(img.width, scale);
    let row_taps = build_taps(img.height, out_h, scale);
    let col_taps = build_taps(img.width, out_w, scale);
    resample_cols(&resample_rows(img, &row_taps), &col_taps)
}

/// Resize to an explicit size; each axis uses its own out/in ratio as the
/// scale (the by-size calling convention of the reference resizer),
/// separable rows-then-columns. Values are NOT clamped.
pub fn resize_to(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    assert!(out_h > 0 && out_w > 0, "empty output size");
    let row_taps = build_taps(img.height, out_h, out_h as f64 / img.height as f64);
    let col_taps = build_taps(img.width, out_w, out_w as f64 / img.width as f64);
    resample_cols(&resample_rows(img, &row_taps), &col_taps)
}

/// Downscale to ceil-sized LR then upscale back to the original size — the
/// standard low-resolution simulation pipeline.
pub fn down_up(img: &GrayImage, factor: u32) -> GrayImage {
    let oh = (img.height as f64 / factor as f64).ceil() as usize;
    let ow = (img.width as f64 / factor as f64).ceil() as usize;
    let lr = resize_to(img, oh, ow);
    resize_to(&lr, img.height, img.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::psnr;

    /// Independent oracle: direct 2-d summation over the full tensor-product
    /// kernel, no separability, no tap tables. Deliberately written in the
    /// most literal style possible.
    fn oracle_resize(img: &GrayImage, out_h: usize, out_w: usize, scale: f64) -> GrayImage {
        let antialias = scale < 1.0;
        let ks = if antialias { scale } else { 1.0 };
        let half = 2.0 / ks;
        let mut out = GrayImage::zeros(out_h, out_w);
        for u in 0..out_h {
            let cy = (u as f64 + 0.5) / scale - 0.5;
            for v in 0..out_w {
                let cx = (v as f64 + 0.5) / scale - 0.5;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                let y0 = (cy - half).floor() as isize;
                let y1 = (cy + half).ceil() as isize;
                let x0 = (cx - half).floor() as isize;
                let x1 = (cx + half).ceil() as isize;
                for j in y0..=y1 {
                    let wy = ks * cubic_kernel(ks * (cy - j as f64));
                    if wy == 0.0 {
                        continue;
                    }
                    let jj = j.clamp(0, img.height as isize - 1) as usize;
                    for i in x0..=x1 {
                        let wx = ks * cubic_kernel(ks * (cx - i as f64));
                        if wx == 0.0 {
                            continue;
                        }
                        let ii = i.clamp(0, img.width as isize - 1) as usize;
                        acc += wy * wx * img.at(jj, ii);
                        wsum += wy * wx;
                    }
                }
                *out.at_mut(u, v) = acc / wsum;
            }
        }
        out
    }

    fn test_image(h: usize, w: usize) -> GrayImage {
        // smooth + oriented structure, no symmetry
        let data = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let x = c as f64 / w as f64;
                let y = r as f64 / h as f64;
                0.5 + 0.3 * (6.0 * x + 2.0 * y).sin() * (3.5 * y).cos() + 0.1 * x * y
            })
            .collect();
        GrayImage::new(h, w, data)
    }

    #[test]
    fn kernel_is_interpolating() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        for k in 1..4 {
            assert!(cubic_kernel(k as f64).abs() < 1e-15);
        }
        // symmetric
        assert_eq!(cubic_kernel(0.3), cubic_kernel(-0.3));
        assert_eq!(cubic_kernel(1.6), cubic_kernel(-1.6));
    }

    #[test]
    fn kernel_partition_of_unity_at_unit_scale() {
        // sum over integer shifts is exactly 1 for the Keys kernel
        for frac in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-3..=3).map(|j| cubic_kernel(frac - j as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12, "sum {s} at frac {frac}");
        }
    }

    #[test]
    fn output_sizes_round_up() {
        assert_eq!(output_len(100, 1.0 / 8.0), 13);
        assert_eq!(output_len(100, 1.0 / 3.0), 34);
        assert_eq!(output_len(100, 1.0 / 2.0), 50);
        assert_eq!(output_len(100, 1.0 / 4.0), 25);
        assert_eq!(output_len(13, 100.0 / 13.0), 100);
    }

    #[test]
    fn identity_scale_is_exact() {
        let img = test_image(17, 23);
        let out = resize_scale(&img, 1.0);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        // partition of unity + normalization: any scale maps a constant
        // image to the same constant
        let img = GrayImage::new(20, 20, vec![0.731; 400]);
        for scale in [1.0 / 8.0, 1.0 / 3.0, 0.5, 2.0, 3.7] {
            let out = resize_scale(&img, scale);
            for &v in &out.data {
                assert!((v - 0.731).abs() < 1e-12, "scale {scale}: {v}");
            }
        }
    }

    #[test]
    fn matches_direct_summation_oracle_downscale() {
        let img = test_image(40, 40);
        for factor in [2usize, 3, 4, 8] {
            let scale = 1.0 / factor as f64;
            let oh = output_len(40, scale);
            let ow = oh;
            let fast = resize_scale(&img, scale);
            let slow = oracle_resize(&img, oh, ow, scale);
            assert_eq!(fast.height, slow.height);
            assert_eq!(fast.width, slow.width);
            let max = fast
                .data
                .iter()
                .zip(&slow.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-10, "factor {factor}: max abs diff {max}");
        }
    }

    #[test]
    fn matches_direct_summation_oracle_by_size() {
        // by-size convention: the axis ratio drives the kernel width
        let img = test_image(40, 40);
        let fast = resize_to(&img, 13, 13);
        let slow = oracle_resize(&img, 13, 13, 13.0 / 40.0);
        let max = fast
            .data
            .iter()
            .zip(&slow.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-10, "max abs diff {max}");
    }

    #[test]
    fn matches_direct_summation_oracle_upscale() {
        let img = test_image(13, 13);
        let fast = resize_to(&img, 100, 100);
        let slow = oracle_resize(&img, 100, 100, 100.0 / 13.0);
        let max = fast
            .data
            .iter()
            .zip(&slow.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-10, "max abs diff {max}");
    }

    #[test]
    fn down_up_recovers_smooth_image() {
        let img = test_image(100, 100);
        let rec = down_up(&img, 2);
        assert_eq!(rec.height, 100);
        assert_eq!(rec.width, 100);
        let p = psnr(&img.data, &rec.data);
        assert!(p > 30.0, "x2 down-up PSNR too low: {p:.2} dB");
        // heavier degradation must lose more information
        let rec8 = down_up(&img, 8);
        let p8 = psnr(&img.data, &rec8.data);
        assert!(p8 < p, "x8 PSNR {p8:.2} not below x2 PSNR {p:.2}");
    }

    #[test]
    fn antialias_differs_from_naive_kernel_on_downscale() {
        // with antialiasing the kernel support widens; verify the result is
        // not what the unwidened kernel would give
        let img = test_image(32, 32);
        let scale = 0.25;
        let with_aa = resize_scale(&img, scale);
        // oracle without widening
        let oh = output_len(32, scale);
        let mut no_aa = GrayImage::zeros(oh, oh);
        for u in 0..oh {
            let cy = (u as f64 + 0.5) / scale - 0.5;
            for v in 0..oh {
                let cx = (v as f64 + 0.5) / scale - 0.5;
                let (mut acc, mut wsum) = (0.0, 0.0);
                for j in (cy as isize - 2)..=(cy as isize + 3) {
                    let wy = cubic_kernel(cy - j as f64);
                    let jj = j.clamp(0, 31) as usize;
                    for i in (cx as isize - 2)..=(cx as isize + 3) {
                        let wx = cubic_kernel(cx - i as f64);
                        let ii = i.clamp(0, 31) as usize;
                        acc += wy * wx * img.at(jj, ii);
                        wsum += wy * wx;
                    }
                }
                *no_aa.at_mut(u, v) = acc / wsum;
            }
        }
        let diff = with_aa
            .data
            .iter()
            .zip(&no_aa.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3, "antialiasing had no effect (max diff {diff})");
    }

    #[test]
    fn upscale_does_not_antialias() {
        // on upscale the taps reduce to the plain kernel: interpolating
        // property means original samples are reproduced exactly at integer
        // multiples when upscaling by an integer factor
        let img = test_image(10, 10);
        let up = resize_to(&img, 20, 20);
        // output pixel (2i + 0.5/2 - 0.5 aligns exactly only for odd phase);
        // instead check against the oracle which shares the no-AA property
        let slow = oracle_resize(&img, 20, 20, 2.0);
        let max = up
            .data
            .iter()
            .zip(&slow.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-10);
    }

    #[test]
    fn taps_sum_to_one_everywhere() {
        for (in_len, out_len, scale) in [
            (100usize, 13usize, 1.0 / 8.0),
            (100, 34, 1.0 / 3.0),
            (13, 100, 100.0 / 13.0),
            (50, 100, 2.0),
            (7, 5, 5.0 / 7.0),
        ] {
            let taps = build_taps(in_len, out_len, scale);
            assert_eq!(taps.len(), out_len);
            for (u, t) in taps.iter().enumerate() {
                let s: f64 = t.weights.iter().sum();
                assert!(
                    (s - 1.0).abs() < 1e-12,
                    "taps at {u} (in {in_len} out {out_len}) sum to {s}"
                );
                assert!(t.first + t.weights.len() <= in_len);
            }
        }
    }
}
