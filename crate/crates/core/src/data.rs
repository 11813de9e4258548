//! Image/mask datasets, preprocessing and a synthetic shape generator.
//!
//! On disk a dataset is `root/images/<id>.{png,jpg,jpeg}` with
//! `root/masks/<id>.png`. Masks are binarized at 128.

use crate::backbones::SaliencyMap;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Shape, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// An image with its binary mask (pixel values 0 or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub rejects: Vec<Reject>,
}

pub const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Files in `dir` with one of `exts` (case-insensitive), keyed by stem.
/// A missing directory yields an empty map.
pub fn files_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), ext) {
            if exts.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

/// Grayscale PNG as a 0/1 mask.
pub fn load_mask(path: &Path) -> Result<GrayImage> {
    let mut m = open(path)?.to_luma8();
    for p in m.pixels_mut() {
        p.0[0] = u8::from(p.0[0] >= 128);
    }
    Ok(m)
}

/// Pairs images with masks by file stem, sorted by id. Unpaired files are
/// reported, not fatal.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let images = files_by_stem(&root.join("images"), &IMAGE_EXTS)?;
    let masks = files_by_stem(&root.join("masks"), &["png"])?;
    let mut ds = Dataset::default();
    for (id, path) in &images {
        let Some(mask_path) = masks.get(id) else {
            ds.rejects.push(Reject {
                path: path.clone(),
                reason: "no mask with this stem".into(),
            });
            continue;
        };
        let image = load_image(path)?;
        let mask = load_mask(mask_path)?;
        if image.dimensions() != mask.dimensions() {
            ds.rejects.push(Reject {
                path: path.clone(),
                reason: format!("image is {:?} but mask is {:?}", image.dimensions(), mask.dimensions()),
            });
            continue;
        }
        ds.samples.push(Sample {
            id: id.clone(),
            image,
            mask,
        });
    }
    for (id, path) in &masks {
        if !images.contains_key(id) {
            ds.rejects.push(Reject {
                path: path.clone(),
                reason: "no image with this stem".into(),
            });
        }
    }
    if ds.samples.is_empty() {
        log::warn!("no image/mask pairs found under {}", root.display());
    }
    Ok(ds)
}

pub const DEFAULT_MEANS: [f64; 3] = [0.5, 0.5, 0.5];
pub const IMAGENET_MEANS: [f64; 3] = [0.485, 0.456, 0.406];

pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, p) in image.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    t
}

pub fn mask_to_tensor(mask: &GrayImage) -> Tensor {
    let (w, h) = mask.dimensions();
    let data = mask.pixels().map(|p| if p.0[0] > 0 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(Shape::new(1, 1, h as usize, w as usize), data).expect("mask size")
}

/// Resizes to `resolution` square (bilinear for the image, nearest for the
/// mask), scales to `[0, 1]` and subtracts the per-channel means.
pub fn preprocess_with(sample: &Sample, resolution: usize, means: [f64; 3]) -> Result<(Tensor, Tensor)> {
    let image = prepare_image(&sample.image, resolution, means)?;
    let mask = kernels::resize_nearest(&mask_to_tensor(&sample.mask), resolution, resolution);
    Ok((image, mask))
}

/// The image half of [`preprocess_with`].
pub fn prepare_image(image: &RgbImage, resolution: usize, means: [f64; 3]) -> Result<Tensor> {
    if resolution == 0 || !resolution.is_multiple_of(32) {
        return Err(Error::Config(format!("resolution {resolution} is not a positive multiple of 32")));
    }
    let mut t = kernels::resize_bilinear(&image_to_tensor(image), resolution, resolution);
    let plane = resolution * resolution;
    for (c, mean) in means.iter().enumerate() {
        for v in &mut t.data_mut()[c * plane..(c + 1) * plane] {
            *v -= mean;
        }
    }
    Ok(t)
}

pub fn preprocess(sample: &Sample, resolution: usize) -> Result<(Tensor, Tensor)> {
    preprocess_with(sample, resolution, DEFAULT_MEANS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Flat,
    Gradient,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub shapes: Vec<ShapeKind>,
    pub backgrounds: Vec<Background>,
}

impl SyntheticSpec {
    pub fn new(seed: u64, count: usize, resolution: usize) -> Self {
        Self {
            seed,
            count,
            resolution,
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob],
            backgrounds: vec![Background::Flat, Background::Gradient, Background::Noise],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidInput("synthetic count must be at least 1".into()));
        }
        if self.resolution < 16 {
            return Err(Error::InvalidInput(format!("synthetic resolution {} is below 16", self.resolution)));
        }
        if self.shapes.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::InvalidInput("synthetic spec needs at least one shape and background kind".into()));
        }
        Ok(())
    }
}

/// Geometry in pixel units; pixel `(x, y)` is sampled at its centre.
#[derive(Clone, Debug, PartialEq)]
pub enum Figure {
    /// Rotated ellipse: centre, semi-axes, angle in radians.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Union of discs `(cx, cy, r)`.
    Blob { discs: Vec<(f64, f64, f64)> },
}

impl Figure {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Figure::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Figure::Rectangle { x0, y0, x1, y1 } => px >= *x0 && px <= *x1 && py >= *y0 && py <= *y1,
            Figure::Blob { discs } => discs
                .iter()
                .any(|(cx, cy, r)| (px - cx).powi(2) + (py - cy).powi(2) <= r * r),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub background: Background,
    /// Dark shapes on a light background when true, the reverse otherwise.
    pub light_background: bool,
    pub figures: Vec<Figure>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_layout(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Layout {
    let r = spec.resolution as f64;
    let background = spec.backgrounds[rng.random_range(0..spec.backgrounds.len())];
    let light_background = rng.random_bool(0.5);
    let n = rng.random_range(1..=2);
    let figures = (0..n)
        .map(|_| {
            let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
            let cx = rng.random_range(0.3 * r..0.7 * r);
            let cy = rng.random_range(0.3 * r..0.7 * r);
            match kind {
                ShapeKind::Ellipse => Figure::Ellipse {
                    cx,
                    cy,
                    rx: rng.random_range(0.12 * r..0.3 * r),
                    ry: rng.random_range(0.12 * r..0.3 * r),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                },
                ShapeKind::Rectangle => {
                    let hw = rng.random_range(0.1 * r..0.28 * r);
                    let hh = rng.random_range(0.1 * r..0.28 * r);
                    Figure::Rectangle {
                        x0: cx - hw,
                        y0: cy - hh,
                        x1: cx + hw,
                        y1: cy + hh,
                    }
                }
                ShapeKind::Blob => {
                    let k = rng.random_range(3..=5);
                    let discs = (0..k)
                        .map(|_| {
                            (
                                cx + rng.random_range(-0.1 * r..0.1 * r),
                                cy + rng.random_range(-0.1 * r..0.1 * r),
                                rng.random_range(0.07 * r..0.15 * r),
                            )
                        })
                        .collect();
                    Figure::Blob { discs }
                }
            }
        })
        .collect();
    Layout {
        background,
        light_background,
        figures,
    }
}

/// The shapes placed in synthetic sample `index`.
pub fn synthetic_layout(spec: &SyntheticSpec, index: usize) -> Result<Layout> {
    spec.validate()?;
    Ok(draw_layout(spec, &mut sample_rng(spec.seed, index)))
}

fn render(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = sample_rng(spec.seed, index);
    let layout = draw_layout(spec, &mut rng);
    let res = spec.resolution as u32;
    let (lo, hi) = if layout.light_background { (0.6, 0.95) } else { (0.05, 0.4) };
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..hi));
    let other: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..hi));
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (fg_lo, fg_hi) = if layout.light_background { (0.0, 0.25) } else { (0.75, 1.0) };
    let colors: Vec<[f64; 3]> = layout
        .figures
        .iter()
        .map(|_| std::array::from_fn(|_| rng.random_range(fg_lo..fg_hi)))
        .collect();
    let mut image = RgbImage::new(res, res);
    let mut mask = GrayImage::new(res, res);
    let (dx, dy) = (dir.cos(), dir.sin());
    for y in 0..res {
        for x in 0..res {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = match layout.background {
                Background::Flat => base,
                Background::Gradient => {
                    let t = ((px * dx + py * dy) / spec.resolution as f64 * 0.7 + 0.5).clamp(0.0, 1.0);
                    std::array::from_fn(|c| base[c] * (1.0 - t) + other[c] * t)
                }
                Background::Noise => std::array::from_fn(|c| base[c] + rng.random_range(-0.08..0.08)),
            };
            let mut inside = false;
            for (fig, col) in layout.figures.iter().zip(&colors) {
                if fig.contains(px, py) {
                    rgb = *col;
                    inside = true;
                }
            }
            image.put_pixel(x, y, Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)));
            mask.put_pixel(x, y, Luma([u8::from(inside)]));
        }
    }
    Sample {
        id: format!("synthetic_{index:05}"),
        image,
        mask,
    }
}

/// `spec.count` samples, each a pure function of `(seed, index)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| render(spec, i)).collect())
}

/// Writes `images/<id>.png` and `masks/<id>.png` (0/255) under `root`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let ip = root.join("images").join(format!("{}.png", sample.id));
    sample.image.save(&ip).map_err(|source| Error::Image { path: ip.clone(), source })?;
    let mp = root.join("masks").join(format!("{}.png", sample.id));
    let scaled = GrayImage::from_fn(sample.mask.width(), sample.mask.height(), |x, y| {
        Luma([if sample.mask.get_pixel(x, y).0[0] > 0 { 255 } else { 0 }])
    });
    scaled.save(&mp).map_err(|source| Error::Image { path: mp.clone(), source })
}

/// 8-bit grayscale rendering of a single map, `round(255 s)`.
pub fn saliency_to_image(map: &SaliencyMap) -> GrayImage {
    let t = map.tensor();
    let (h, w) = t.shape().spatial();
    let plane = t.plane(0, 0);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(plane[y as usize * w + x as usize] * 255.0).round() as u8])
    })
}

pub fn save_prediction(path: &Path, map: &SaliencyMap) -> Result<()> {
    saliency_to_image(map)
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Grayscale PNG scaled to `[0, 1]`.
pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    SaliencyMap::new(Tensor::from_vec(Shape::new(1, 1, h as usize, w as usize), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(7, 4, 32);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec::new(8, 4, 32);
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        assert!(generate_synthetic(&SyntheticSpec::new(1, 0, 32)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(1, 1, 8)).is_err());
    }

    #[test]
    fn index_is_independent_of_count() {
        let a = generate_synthetic(&SyntheticSpec::new(3, 2, 32)).unwrap();
        let b = generate_synthetic(&SyntheticSpec::new(3, 5, 32)).unwrap();
        assert_eq!(a[1], b[1]);
    }

    #[test]
    fn ellipse_mask_matches_membership_oracle() {
        let spec = SyntheticSpec {
            shapes: vec![ShapeKind::Ellipse],
            ..SyntheticSpec::new(11, 6, 48)
        };
        let samples = generate_synthetic(&spec).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let layout = synthetic_layout(&spec, i).unwrap();
            let mut count = 0;
            for y in 0..48 {
                for x in 0..48 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = layout.figures.iter().any(|f| match *f {
                        Figure::Ellipse { cx, cy, rx, ry, angle } => {
                            // rotate the point into the ellipse frame
                            let (dx, dy) = (px - cx, py - cy);
                            let u = dx * angle.cos() + dy * angle.sin();
                            let v = dy * angle.cos() - dx * angle.sin();
                            u * u / (rx * rx) + v * v / (ry * ry) <= 1.0
                        }
                        _ => unreachable!(),
                    });
                    count += usize::from(inside);
                }
            }
            let fg = s.mask.pixels().filter(|p| p.0[0] == 1).count();
            assert_eq!(fg, count, "sample {i}");
            assert!(fg > 0);
        }
    }

    #[test]
    fn preprocess_contracts() {
        let s = generate_synthetic(&SyntheticSpec::new(1, 1, 64)).unwrap().remove(0);
        let (img, mask) = preprocess(&s, 32).unwrap();
        assert_eq!(img.shape(), Shape::new(1, 3, 32, 32));
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let (_, same) = preprocess(&s, 64).unwrap();
        assert_eq!(same, mask_to_tensor(&s.mask));
        assert!(preprocess(&s, 40).is_err());

        let grey = Sample {
            id: "g".into(),
            image: RgbImage::from_pixel(32, 32, Rgb([128, 128, 128])),
            mask: GrayImage::new(32, 32),
        };
        let (img, _) = preprocess_with(&grey, 32, [128.0 / 255.0; 3]).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_pairs_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&SyntheticSpec::new(2, 3, 32)).unwrap();
        for s in &samples {
            save_sample(dir.path(), s).unwrap();
        }
        RgbImage::new(32, 32).save(dir.path().join("images/orphan.png")).unwrap();
        let mut grey = GrayImage::new(32, 32);
        grey.put_pixel(3, 4, Luma([200]));
        grey.put_pixel(5, 6, Luma([127]));
        grey.save(dir.path().join("masks/synthetic_00000.png")).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 3);
        assert_eq!(ds.rejects.len(), 1);
        assert!(ds.rejects[0].path.ends_with("orphan.png"));
        let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["synthetic_00000", "synthetic_00001", "synthetic_00002"]);
        assert_eq!(ds.samples[0].mask.get_pixel(3, 4).0[0], 1);
        assert_eq!(ds.samples[0].mask.get_pixel(5, 6).0[0], 0);
        assert_eq!(ds.samples[1], samples[1]);

        let empty = tempfile::tempdir().unwrap();
        assert!(load_dataset(empty.path()).unwrap().samples.is_empty());
    }

    #[test]
    fn prediction_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = SaliencyMap::new(
            Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 0.2, 0.5, 1.0]).unwrap(),
        )
        .unwrap();
        let path = dir.path().join("p.png");
        save_prediction(&path, &map).unwrap();
        let back = load_saliency(&path).unwrap();
        let expected = [0.0, 51.0 / 255.0, 128.0 / 255.0, 1.0];
        for (a, b) in back.tensor().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
