//! Procedural seven-class expression dataset.
//!
//! Faces are rendered geometrically on a 100x100 canvas. Each class has a
//! distinct configuration of brows, eyes, and mouth, chosen so that the
//! class signal lives at several spatial scales: brow angle and mouth
//! curvature are fine cues that blur away quickly under downscaling, while
//! eye size, mouth openness, face aspect ratio, and mouth placement are
//! coarse cues that partially survive even an 8x round trip. Per-sample
//! jitter keeps the task from being trivially solvable by template match.
//!
//! Rendering is deterministic given the master seed: every sample derives
//! its own RNG stream from (split, class, index).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::data::resample::GrayImage;
use crate::data::{write_png, RgbImage, CLASS_NAMES};
use crate::util::derive_seed;
use crate::Result;

/// Canvas side length; the extractor's canonical input size.
pub const IMAGE_SIZE: usize = 100;

#[derive(Clone, Debug)]
struct FaceParams {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    brow_rise: f64,
    brow_angle: f64,
    brow_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_open: f64,
    mouth_curv: f64,
    nose_len: f64,
    tint: [f64; 3],
    bg: f64,
    bg_slope: f64,
    noise: f64,
}

/// Class prototypes. Columns: eye radius, brow rise above the eyes, brow
/// angle (positive = inner end raised), mouth y, mouth half-width, mouth
/// opening, mouth curvature in pixels (positive = corners raised), face
/// aspect ratio.
fn class_prototype(class: usize) -> FaceParams {
    #[rustfmt::skip]
    let (eye_r, brow_rise, brow_angle, mouth_y, mouth_w, mouth_open, mouth_curv, aspect) =
        match class {
            0 /* anger */     => (4.0, 7.5,  -0.50, 72.0, 10.0, 2.0, -3.5, 1.22),
            1 /* disgust */   => (3.2, 9.0,  -0.25, 67.0, 10.0, 4.5, -1.5, 1.18),
            2 /* fear */      => (6.0, 13.0,  0.30, 74.0,  9.0, 6.5, -0.5, 1.33),
            3 /* happiness */ => (4.6, 10.0,  0.05, 70.0, 13.0, 3.0,  5.0, 1.15),
            4 /* neutral */   => (4.6, 11.0,  0.00, 71.0, 10.0, 1.2,  0.0, 1.25),
            5 /* sadness */   => (4.2, 9.0,   0.45, 73.0,  7.0, 1.8, -4.5, 1.30),
            6 /* surprise */  => (6.8, 15.0,  0.00, 73.0,  8.0, 9.0,  0.0, 1.38),
            _ => panic!("class {class} out of range"),
        };
    let rx = 33.0;
    FaceParams {
        cx: 50.0,
        cy: 52.0,
        rx,
        ry: rx * aspect,
        skin: 0.78,
        eye_dx: 14.0,
        eye_y: 44.0,
        eye_r,
        brow_rise,
        brow_angle,
        brow_len: 14.0,
        mouth_y,
        mouth_w,
        mouth_open,
        mouth_curv,
        nose_len: 8.0,
        tint: [1.0, 0.97, 0.94],
        bg: 0.30,
        bg_slope: 0.0,
        noise: 0.015,
    }
}

fn jitter<R: Rng>(mut p: FaceParams, rng: &mut R) -> FaceParams {
    let n = |rng: &mut R, std: f64| Normal::new(0.0, std).unwrap().sample(rng);
    p.cx += n(rng, 1.5);
    p.cy += n(rng, 1.5);
    p.rx *= 1.0 + n(rng, 0.04);
    p.ry *= 1.0 + n(rng, 0.04);
    p.skin += n(rng, 0.04);
    p.eye_dx += n(rng, 0.7);
    p.eye_y += n(rng, 1.0);
    p.eye_r = (p.eye_r + n(rng, 0.35)).max(1.5);
    p.brow_rise += n(rng, 0.8);
    p.brow_angle += n(rng, 0.06);
    p.brow_len += n(rng, 1.0);
    p.mouth_y += n(rng, 1.0);
    p.mouth_w = (p.mouth_w + n(rng, 1.0)).max(4.0);
    p.mouth_open = (p.mouth_open + n(rng, 0.5)).max(0.6);
    p.mouth_curv += n(rng, 0.8);
    p.nose_len += n(rng, 0.8);
    for t in &mut p.tint {
        *t *= 1.0 + rng.gen_range(-0.06..0.06);
    }
    p.bg += n(rng, 0.05);
    p.bg_slope = rng.gen_range(-0.15..0.15);
    p
}

#[inline]
fn soft_edge(signed_dist: f64, softness: f64) -> f64 {
    // 1 well inside (negative distance), 0 well outside, linear ramp between
    (0.5 - signed_dist / softness).clamp(0.0, 1.0)
}

#[inline]
fn mix(base: f64, color: f64, alpha: f64) -> f64 {
    base + (color - base) * alpha
}

/// Distance from a point to a line segment.
fn segment_dist(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn render_luma(p: &FaceParams) -> GrayImage {
    let soft = 1.3;
    let mut img = GrayImage::zeros(IMAGE_SIZE, IMAGE_SIZE);
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (x, y) = (col as f64, row as f64);
            let mut v = p.bg + p.bg_slope * (x / IMAGE_SIZE as f64 - 0.5);

            // face ellipse (approximate pixel distance to the boundary)
            let nx = (x - p.cx) / p.rx;
            let ny = (y - p.cy) / p.ry;
            let rho = (nx * nx + ny * ny).sqrt();
            let face_d = (rho - 1.0) * p.rx.min(p.ry);
            let face_a = soft_edge(face_d, soft);
            v = mix(v, p.skin, face_a);

            if face_a > 0.0 {
                // eyes
                for side in [-1.0, 1.0] {
                    let ex = p.cx + side * p.eye_dx;
                    let dnx = (x - ex) / p.eye_r;
                    let dny = (y - p.eye_y) / (p.eye_r * 0.75);
                    let d = ((dnx * dnx + dny * dny).sqrt() - 1.0) * (p.eye_r * 0.75);
                    v = mix(v, 0.12, soft_edge(d, soft) * face_a);
                }
                // brows: positive angle raises the inner end (the end toward
                // the face center; y points down so raised = smaller y)
                let s = p.brow_angle.tan();
                let hl = p.brow_len / 2.0;
                let by = p.eye_y - p.brow_rise;
                for side in [-1.0, 1.0] {
                    let ex = p.cx + side * p.eye_dx;
                    let y_at = |xx: f64| by + side * s * (xx - ex);
                    let d = segment_dist(x, y, ex - hl, y_at(ex - hl), ex + hl, y_at(ex + hl))
                        - 1.6;
                    v = mix(v, 0.18, soft_edge(d, soft) * face_a);
                }
                // nose
                let d = segment_dist(x, y, p.cx, p.cy, p.cx, p.cy + p.nose_len) - 1.1;
                v = mix(v, 0.58, soft_edge(d, soft) * face_a * 0.8);
                // mouth
                let t = (x - p.cx) / p.mouth_w;
                if t.abs() <= 1.15 {
                    let tc = t.clamp(-1.0, 1.0);
                    let yc = p.mouth_y + p.mouth_curv * (0.5 - tc * tc);
                    let taper = (1.0 - tc * tc).max(0.0).sqrt();
                    let lip_h = (p.mouth_open / 2.0 + 1.4) * taper + 0.3;
                    let d = (y - yc).abs() - lip_h;
                    v = mix(v, 0.22, soft_edge(d, soft) * face_a);
                    if p.mouth_open > 2.5 {
                        let gap_h = (p.mouth_open / 2.0) * taper * 0.8;
                        let dg = (y - yc).abs() - gap_h;
                        v = mix(v, 0.08, soft_edge(dg, soft) * face_a);
                    }
                }
            }
            *img.at_mut(row, col) = v;
        }
    }
    img
}

/// Render one sample: jittered geometry, per-channel tint, sensor noise.
pub fn render_sample(class: usize, rng: &mut ChaCha12Rng) -> RgbImage {
    let p = jitter(class_prototype(class), rng);
    let luma = render_luma(&p);
    let noise = Normal::new(0.0, p.noise).unwrap();
    let mut planes = Vec::with_capacity(3);
    for c in 0..3 {
        let mut plane = GrayImage::zeros(IMAGE_SIZE, IMAGE_SIZE);
        for i in 0..IMAGE_SIZE * IMAGE_SIZE {
            let v = luma.data[i] * p.tint[c] + noise.sample(rng);
            plane.data[i] = v.clamp(0.0, 1.0);
        }
        planes.push(plane);
    }
    RgbImage::from_planes(planes)
}

/// Noise-free class prototype image (used by tests and demos).
pub fn render_prototype(class: usize) -> RgbImage {
    let p = class_prototype(class);
    let luma = render_luma(&p);
    let planes = (0..3)
        .map(|c| {
            let mut plane = GrayImage::zeros(IMAGE_SIZE, IMAGE_SIZE);
            for i in 0..IMAGE_SIZE * IMAGE_SIZE {
                plane.data[i] = (luma.data[i] * p.tint[c]).clamp(0.0, 1.0);
            }
            plane
        })
        .collect();
    RgbImage::from_planes(planes)
}

/// Generate the dataset under `root`: `train/<class>/` holds `n_per_class`
/// images and `val/<class>/` twice that, as 8-bit PNGs named
/// `<class>_<index>.png`.
pub fn generate_dataset(root: &Path, n_per_class: usize, seed: u64) -> Result<()> {
    if n_per_class == 0 {
        return Err(crate::Error::InvalidArgument(
            "n_per_class must be at least 1".into(),
        ));
    }
    for (split, count) in [("train", n_per_class), ("val", 2 * n_per_class)] {
        for (class, name) in CLASS_NAMES.iter().enumerate() {
            let dir = root.join(split).join(name);
            std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
            for i in 0..count {
                let tag = format!("sample/{split}/{name}/{i}");
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &tag));
                let img = render_sample(class, &mut rng);
                let path = dir.join(format!("{name}_{i:04}.png"));
                write_png(&path, &img)?;
            }
        }
    }
    Ok(())
}
