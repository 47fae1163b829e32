//! Dataset handling: image I/O, the seven-class directory layout, and
//! high-/low-resolution pairing.

pub mod resample;
pub mod synthetic;

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::{Error, Result};
use resample::GrayImage;

/// Expression class names used by the synthetic generator, in label order.
/// Real datasets may use any directory names; labels always follow sorted
/// directory order.
pub const CLASS_NAMES: [&str; 7] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "neutral",
    "sadness",
    "surprise",
];

pub const NUM_CLASSES: usize = 7;

/// Default canonical input side length expected by the feature extractor.
pub const CANONICAL_SIZE: usize = 100;

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

/// A three-plane image, f64 in [0,1], planes ordered R, G, B.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub planes: Vec<GrayImage>,
}

impl RgbImage {
    pub fn from_planes(planes: Vec<GrayImage>) -> Self {
        assert_eq!(planes.len(), 3, "expected three planes");
        assert!(planes
            .iter()
            .all(|p| p.height == planes[0].height && p.width == planes[0].width));
        Self { planes }
    }

    pub fn height(&self) -> usize {
        self.planes[0].height
    }

    pub fn width(&self) -> usize {
        self.planes[0].width
    }

    /// Apply a plane-wise transform (used for resampling).
    pub fn map_planes<F: Fn(&GrayImage) -> GrayImage>(&self, f: F) -> Self {
        Self::from_planes(self.planes.iter().map(f).collect())
    }
}

/// Bicubic resize to an explicit size (per-axis scale ratios, antialiasing
/// on whichever axes shrink), clamped to [0,1].
pub fn bicubic_resample(img: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    let out = img.map_planes(|p| resample::resize_to(p, out_h, out_w));
    out.map_planes(|p| {
        let mut q = p.clone();
        for v in &mut q.data {
            *v = v.clamp(0.0, 1.0);
        }
        q
    })
}

/// Bicubic upsampling of a small image back to the canonical size (no
/// antialiasing on upscale). Used for the bicubic baseline and to feed LR
/// content through the fixed-input-size extractor.
pub fn upsample_to_canonical(lr: &RgbImage, canonical_h: usize, canonical_w: usize) -> RgbImage {
    assert!(
        lr.height() <= canonical_h && lr.width() <= canonical_w,
        "upsample_to_canonical expects an image at or below canonical size"
    );
    bicubic_resample(lr, canonical_h, canonical_w)
}

/// Write an 8-bit RGB PNG (values clamped to [0,1] then quantized).
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            let v = (img.planes[c].data[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.push(v);
        }
    }
    let out = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size computed from image dims");
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::ImageRead {
            path: path.to_path_buf(),
            reason: format!("write failed: {e}"),
        })
}

/// Load a PNG/JPEG as a three-plane f64 image in [0,1] (grayscale inputs
/// are replicated across planes).
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::ImageRead {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = vec![
        GrayImage::zeros(h, w),
        GrayImage::zeros(h, w),
        GrayImage::zeros(h, w),
    ];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planes[c].data[i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(RgbImage::from_planes(planes))
}

/// One labeled example at canonical size.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    /// Stable identifier: `<class_dir>/<file_name>`, plus a `@x<s>` suffix
    /// on derived low-resolution versions.
    pub id: String,
    pub label: usize,
    pub image: RgbImage,
}

/// An in-memory split of the dataset.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: String,
    /// Class directory names in sorted order; index = label id.
    pub class_names: Vec<String>,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Load `root/<split>/<class>/*` with deterministic (lexicographic) file
/// order. The split directory must contain exactly seven class
/// subdirectories; their sorted order defines the label ids. Images are
/// normalized to [0,1] and bicubic-resized to `canonical` if needed; an
/// empty class directory is valid and contributes zero samples.
pub fn load_dataset(root: &Path, split: &str, canonical: usize) -> Result<Dataset> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::MissingPrerequisite {
            what: format!("dataset split directory {}", dir.display()),
            hint: "run `prepare-data` first or point data.root at an existing dataset".into(),
        });
    }
    let mut class_names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| {
            let e = e.ok()?;
            e.file_type()
                .ok()?
                .is_dir()
                .then(|| e.file_name().to_string_lossy().into_owned())
        })
        .collect();
    class_names.sort();
    if class_names.len() != NUM_CLASSES {
        return Err(Error::Dataset(format!(
            "{} must contain exactly {} class directories, found {}: {:?}",
            dir.display(),
            NUM_CLASSES,
            class_names.len(),
            class_names
        )));
    }
    let mut items = Vec::new();
    for (label, name) in class_names.iter().enumerate() {
        let cdir = dir.join(name);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&cdir)
            .map_err(|e| Error::io(&cdir, e))?
            .filter_map(|e| {
                let p = e.ok()?.path();
                let ext = p.extension()?.to_str()?.to_ascii_lowercase();
                matches!(ext.as_str(), "png" | "jpg" | "jpeg").then_some(p)
            })
            .collect();
        files.sort();
        for path in files {
            let mut image = read_image(&path)?;
            if image.height() != canonical || image.width() != canonical {
                image = bicubic_resample(&image, canonical, canonical);
            }
            let file = path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default();
            items.push(LabeledImage {
                id: format!("{name}/{file}"),
                label,
                image,
            });
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        split: split.to_string(),
        class_names,
        items,
    })
}

/// A high-resolution sample with its low-resolution sibling at one scale.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub hr: LabeledImage,
    pub lr: LabeledImage,
    pub scale: u32,
}

/// For every image and every requested scale, emit a pair whose LR side is
/// the bicubic downscale to ceil(H/s) x ceil(W/s).
pub fn make_pairs(items: &[LabeledImage], scales: &[u32]) -> Result<Vec<PairedSample>> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument(
            "make_pairs requires at least one scale".into(),
        ));
    }
    for &s in scales {
        if !(2..=8).contains(&s) {
            return Err(Error::InvalidArgument(format!(
                "scale factor {s} outside the supported range 2..8"
            )));
        }
    }
    let mut out = Vec::with_capacity(items.len() * scales.len());
    for hr in items {
        for &s in scales {
            let oh = (hr.image.height() as f64 / s as f64).ceil() as usize;
            let ow = (hr.image.width() as f64 / s as f64).ceil() as usize;
            let lr_img = bicubic_resample(&hr.image, oh, ow);
            out.push(PairedSample {
                hr: hr.clone(),
                lr: LabeledImage {
                    id: format!("{}@x{s}", hr.id),
                    label: hr.label,
                    image: lr_img,
                },
                scale: s,
            });
        }
    }
    Ok(out)
}

/// Simulate a low-resolution capture at canonical size: bicubic downscale by
/// `factor` (sizes rounded up) followed by bicubic upscale back.
pub fn degrade(img: &RgbImage, factor: u32) -> RgbImage {
    let oh = (img.height() as f64 / factor as f64).ceil() as usize;
    let ow = (img.width() as f64 / factor as f64).ceil() as usize;
    let lr = bicubic_resample(img, oh, ow);
    upsample_to_canonical(&lr, img.height(), img.width())
}

/// Pack images into a `[B, 3, H, W]` tensor.
pub fn to_tensor(images: &[&RgbImage]) -> ArrayD<f64> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), 3, h, w]));
    for (b, img) in images.iter().enumerate() {
        assert_eq!(img.height(), h);
        assert_eq!(img.width(), w);
        for c in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    out[[b, c, r, col]] = img.planes[c].at(r, col);
                }
            }
        }
    }
    out
}
