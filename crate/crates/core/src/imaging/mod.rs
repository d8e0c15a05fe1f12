//! Grayscale image type and the preprocessing pipeline.
//!
//! Pipeline order is fixed: CLAHE → aspect crop → min-side resize →
//! augmentation (training only) → center mask → final square resize.
//! The mask is applied after augmentation so the occluded square is always
//! exactly centered in the image fed to the classifier.

mod augment;
mod clahe;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub use augment::{apply_augment, augment, draw_augment, AugmentConfig, AugmentParams, FlipAxis};
pub use clahe::clahe;

/// Row-major 8-bit grayscale image.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.height, self.width)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!(
                "degenerate image {height}x{width} (zero dimension)"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Input(format!(
                "pixel buffer has {} entries, expected {}",
                pixels.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Build from a function of (row, col).
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    /// Intensities scaled to [0, 1].
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Convert a decoded raster to grayscale with Rec. 601 luma weights.
    pub fn from_dynamic(img: &image::DynamicImage) -> Result<Self> {
        use image::DynamicImage as D;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = match img {
            D::ImageLuma8(g) => g.as_raw().clone(),
            D::ImageLuma16(g) => g
                .as_raw()
                .iter()
                .map(|&v| ((v as f64) / 257.0).round() as u8)
                .collect(),
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0;
                    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
                        .round()
                        .clamp(0.0, 255.0) as u8
                })
                .collect(),
        };
        Self::new(w, h, pixels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels.clone(),
        )
        .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample at fractional (row, col); coordinates are clamped to the image.
#[inline]
pub(crate) fn sample_bilinear(img: &Image, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let p = |r: usize, c: usize| img.pixels[r * img.width + c] as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize with half-pixel-centered sampling.
pub fn resize_bilinear(img: &Image, new_width: usize, new_height: usize) -> Result<Image> {
    if new_width == 0 || new_height == 0 {
        return Err(Error::Input("resize target has a zero dimension".into()));
    }
    if new_width == img.width && new_height == img.height {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / new_height as f64;
    let sx = img.width as f64 / new_width as f64;
    let xs: Vec<f64> = (0..new_width).map(|x| (x as f64 + 0.5) * sx - 0.5).collect();
    let mut pixels = Vec::with_capacity(new_width * new_height);
    for y in 0..new_height {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for &fx in &xs {
            pixels.push(quantize(sample_bilinear(img, fy, fx)));
        }
    }
    Image::new(new_width, new_height, pixels)
}

/// Scale so the smaller side equals `target`, preserving aspect ratio.
pub fn resize_min_side(img: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::Input("resize target must be >= 1".into()));
    }
    let (w, h) = (img.width as f64, img.height as f64);
    let (nw, nh) = if img.width <= img.height {
        (target, ((h * target as f64 / w).round() as usize).max(1))
    } else {
        (((w * target as f64 / h).round() as usize).max(1), target)
    };
    resize_bilinear(img, nw, nh)
}

/// Half-open (start, end) of a centered span of `size` inside `len`, clipped.
fn centered_span(len: usize, size: usize) -> (usize, usize) {
    let start = (len as i64 - size as i64).div_euclid(2);
    let end = start + size as i64;
    (start.max(0) as usize, end.clamp(0, len as i64) as usize)
}

/// Rows and columns (half-open) blacked out by [`mask_center_square`].
pub fn mask_region(height: usize, width: usize, size: usize) -> ((usize, usize), (usize, usize)) {
    (centered_span(height, size), centered_span(width, size))
}

/// Set the centered `size`×`size` square to 0; everything else is untouched.
pub fn mask_center_square(img: &Image, size: usize) -> Image {
    let mut out = img.clone();
    let ((r0, r1), (c0, c1)) = mask_region(img.height, img.width, size);
    for r in r0..r1 {
        out.pixels[r * img.width + c0..r * img.width + c1].fill(0);
    }
    out
}

/// Trim rows symmetrically so that height/width ≤ `ratio_max`.
///
/// Images already below `ratio_min` are returned unchanged together with a
/// warning; nothing is ever padded.
pub fn aspect_crop(img: &Image, ratio_min: f64, ratio_max: f64) -> (Image, Option<String>) {
    let ratio = img.height as f64 / img.width as f64;
    if ratio > ratio_max {
        let new_h = ((ratio_max * img.width as f64).floor() as usize).max(1);
        let excess = img.height - new_h;
        let top = excess / 2;
        let pixels = img.pixels[top * img.width..(top + new_h) * img.width].to_vec();
        let out = Image::new(img.width, new_h, pixels).expect("non-empty crop");
        (out, None)
    } else if ratio < ratio_min {
        let warn = format!(
            "aspect ratio {ratio:.3} below {ratio_min}; image left unchanged"
        );
        (img.clone(), Some(warn))
    } else {
        (img.clone(), None)
    }
}

/// Per-axis box-filter weights for area downsampling `src` → `dst` cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut w = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < src {
                let cover = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if cover > 0.0 {
                    w.push((k, cover / scale));
                }
                k += 1;
            }
            w
        })
        .collect()
}

/// Flattened `side`×`side` area-averaged feature vector in [0, 1].
pub fn feature_vector(img: &Image, side: usize) -> Vec<f64> {
    let wy = area_weights(img.height, side);
    let wx = area_weights(img.width, side);
    let mut rows = vec![0.0; side * img.width];
    for (i, ws) in wy.iter().enumerate() {
        let dst = &mut rows[i * img.width..(i + 1) * img.width];
        for &(r, w) in ws {
            let src = &img.pixels[r * img.width..(r + 1) * img.width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s as f64;
            }
        }
    }
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let row = &rows[i * img.width..(i + 1) * img.width];
        for ws in &wx {
            let v: f64 = ws.iter().map(|&(c, w)| w * row[c]).sum();
            out.push((v / 255.0).clamp(0.0, 1.0));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub resize_min_side: usize,
    pub mask_size: usize,
    pub final_side: usize,
    pub clahe_enabled: bool,
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f64,
    pub crop_enabled: bool,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub augment: AugmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resize_min_side: 360,
            mask_size: 300,
            final_side: 227,
            clahe_enabled: false,
            clahe_tiles: (8, 8),
            clahe_clip: 0.01,
            crop_enabled: false,
            crop_ratio_min: 0.9,
            crop_ratio_max: 1.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// The preprocessed variant: CLAHE and aspect cropping with a 240 mask.
    pub fn clahe_crop() -> Self {
        Self {
            mask_size: 240,
            clahe_enabled: true,
            crop_enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_min_side == 0 || self.final_side == 0 {
            return Err(Error::Config("resize sizes must be >= 1".into()));
        }
        if !(self.crop_ratio_min <= self.crop_ratio_max && self.crop_ratio_min > 0.0) {
            return Err(Error::Config(format!(
                "invalid crop ratio band [{}, {}]",
                self.crop_ratio_min, self.crop_ratio_max
            )));
        }
        if self.clahe_enabled
            && (self.clahe_tiles.0 == 0
                || self.clahe_tiles.1 == 0
                || !(self.clahe_clip > 0.0 && self.clahe_clip <= 1.0))
        {
            return Err(Error::Config("invalid CLAHE parameters".into()));
        }
        self.augment.validate()
    }
}

pub fn run_pipeline(img: &Image, cfg: &PipelineConfig, rng: &mut Rng, training: bool) -> Result<Image> {
    cfg.validate()?;
    let mut cur = if cfg.clahe_enabled {
        clahe(img, cfg.clahe_tiles, cfg.clahe_clip)?
    } else {
        img.clone()
    };
    if cfg.crop_enabled {
        let (cropped, warning) = aspect_crop(&cur, cfg.crop_ratio_min, cfg.crop_ratio_max);
        if let Some(w) = warning {
            log::debug!("{w}");
        }
        cur = cropped;
    }
    cur = resize_min_side(&cur, cfg.resize_min_side)?;
    if training {
        cur = augment(&cur, &cfg.augment, rng);
    }
    cur = mask_center_square(&cur, cfg.mask_size);
    resize_bilinear(&cur, cfg.final_side, cfg.final_side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn noisy(w: usize, h: usize, s: u64) -> Image {
        use rand::Rng as _;
        let mut r = seed::rng(s);
        let px = (0..w * h).map(|_| r.random::<u8>()).collect();
        Image::new(w, h, px).unwrap()
    }

    #[test]
    fn degenerate_images_are_rejected() {
        assert!(Image::new(0, 5, vec![]).is_err());
        assert!(Image::new(3, 3, vec![0; 8]).is_err());
    }

    #[test]
    fn min_side_resize_dimensions() {
        // (h, w) → (h', w')
        for ((h, w), (eh, ew)) in [((512, 640), (360, 450)), ((360, 360), (360, 360)), ((1080, 720), (540, 360))] {
            let img = Image::filled(w, h, 7).unwrap();
            let out = resize_min_side(&img, 360).unwrap();
            assert_eq!((out.height(), out.width()), (eh, ew));
        }
        let img = noisy(360, 360, 1);
        assert_eq!(resize_min_side(&img, 360).unwrap(), img);
        assert!(resize_min_side(&img, 0).is_err());
    }

    #[test]
    fn mask_geometry() {
        let img = noisy(450, 360, 3);
        let out = mask_center_square(&img, 300);
        assert_eq!(mask_region(360, 450, 300), ((30, 330), (75, 375)));
        for r in 0..360 {
            for c in 0..450 {
                let inside = (30..330).contains(&r) && (75..375).contains(&c);
                if inside {
                    assert_eq!(out.get(r, c), 0);
                } else {
                    assert_eq!(out.get(r, c), img.get(r, c));
                }
            }
        }
        assert_eq!(mask_center_square(&img, 0), img);
        assert_eq!(mask_region(360, 450, 360), ((0, 360), (45, 405)));
        assert_eq!(mask_region(300, 300, 301), ((0, 300), (0, 300)));
    }

    #[test]
    fn crop_cases() {
        let tall = Image::from_fn(400, 500, |r, _| (r % 256) as u8).unwrap();
        let (out, warn) = aspect_crop(&tall, 0.9, 1.0);
        assert_eq!((out.height(), out.width()), (400, 400));
        assert!(warn.is_none());
        assert_eq!(out.get(0, 0), 50);
        assert_eq!(out.get(399, 0), ((449) % 256) as u8);

        let odd = Image::filled(10, 13, 1).unwrap();
        let (out, _) = aspect_crop(&odd, 0.9, 1.0);
        assert_eq!(out.height(), 10);

        let band = Image::filled(400, 380, 1).unwrap();
        let (out, warn) = aspect_crop(&band, 0.9, 1.0);
        assert_eq!(out, band);
        assert!(warn.is_none());

        let wide = Image::filled(400, 300, 1).unwrap();
        let (out, warn) = aspect_crop(&wide, 0.9, 1.0);
        assert_eq!(out, wide);
        assert!(warn.is_some());
    }

    #[test]
    fn odd_crop_excess_goes_to_bottom() {
        let img = Image::from_fn(10, 13, |r, _| r as u8).unwrap();
        let (out, _) = aspect_crop(&img, 0.9, 1.0);
        // excess 3: one row from the top, two from the bottom
        assert_eq!(out.get(0, 0), 1);
        assert_eq!(out.get(9, 0), 10);
    }

    #[test]
    fn feature_vector_averages_blocks() {
        let img = Image::from_fn(4, 4, |r, c| if r < 2 && c < 2 { 255 } else { 0 }).unwrap();
        let f = feature_vector(&img, 2);
        assert_eq!(f, vec![1.0, 0.0, 0.0, 0.0]);
        let g = feature_vector(&noisy(227, 227, 5), 64);
        assert_eq!(g.len(), 4096);
        assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pipeline_square_without_mask_is_plain_downscale() {
        let img = noisy(360, 360, 9);
        let cfg = PipelineConfig {
            mask_size: 0,
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&img, &cfg, &mut seed::rng(0), false).unwrap();
        assert_eq!(out, resize_bilinear(&img, 227, 227).unwrap());
    }

    #[test]
    fn pipeline_mask_survives_final_resize() {
        // square inputs of several sizes: centered ⌊300·227/360⌋ = 189 square
        // is zero apart from a one-pixel interpolation ring.
        for side in [360usize, 512, 400] {
            let img = Image::filled(side, side, 200).unwrap();
            let out = run_pipeline(&img, &PipelineConfig::default(), &mut seed::rng(1), false).unwrap();
            assert_eq!((out.width(), out.height()), (227, 227));
            let s = 300 * 227 / 360;
            let (r0, r1) = centered_span(227, s);
            for r in r0 + 1..r1 - 1 {
                for c in r0 + 1..r1 - 1 {
                    assert_eq!(out.get(r, c), 0, "side {side} at ({r},{c})");
                }
            }
            assert_eq!(out.get(0, 0), 200);
        }
    }

    #[test]
    fn pipeline_is_deterministic_in_training_mode() {
        let img = noisy(300, 420, 4);
        let cfg = PipelineConfig::clahe_crop();
        let a = run_pipeline(&img, &cfg, &mut seed::rng(77), true).unwrap();
        let b = run_pipeline(&img, &cfg, &mut seed::rng(77), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rec601_conversion() {
        let rgb = image::RgbImage::from_pixel(2, 1, image::Rgb([255, 0, 0]));
        let g = Image::from_dynamic(&image::DynamicImage::ImageRgb8(rgb)).unwrap();
        assert_eq!(g.pixels(), &[76, 76]);
    }
}
