use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{quantize, sample_bilinear, Image};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    None,
    /// Upside-down flip (rows reversed).
    Vertical,
    /// Left-right flip (columns reversed).
    Horizontal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_axis: FlipAxis,
    /// Inclusive integer pixel offsets.
    pub translate_range: (i32, i32),
    /// Degrees, drawn continuously.
    pub rotate_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_axis: FlipAxis::Vertical,
            translate_range: (-5, 5),
            rotate_range: (-5.0, 5.0),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_axis: FlipAxis::None,
            translate_range: (0, 0),
            rotate_range: (0.0, 0.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_axis == FlipAxis::None
            && self.translate_range == (0, 0)
            && self.rotate_range == (0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (tl, th) = self.translate_range;
        let (rl, rh) = self.rotate_range;
        if tl > th || !(rl <= rh) || !rl.is_finite() || !rh.is_finite() {
            return Err(Error::Config("augmentation ranges must be ordered and finite".into()));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Row offset (positive moves content down).
    pub dy: i32,
    /// Column offset (positive moves content right).
    pub dx: i32,
    pub angle_deg: f64,
}

/// Draw parameters. Always consumes the same number of values from `rng`
/// (coin, dy, dx, angle) so streams stay aligned across configurations.
pub fn draw_augment(cfg: &AugmentConfig, rng: &mut Rng) -> AugmentParams {
    let coin: bool = rng.random_bool(0.5);
    let (tl, th) = cfg.translate_range;
    let dy = rng.random_range(tl..=th);
    let dx = rng.random_range(tl..=th);
    let u: f64 = rng.random();
    let (rl, rh) = cfg.rotate_range;
    AugmentParams {
        flip: coin && cfg.flip_axis != FlipAxis::None,
        dy,
        dx,
        angle_deg: rl + u * (rh - rl),
    }
}

/// Apply flip, then rotation about the image center, then translation.
/// Pixels with no source are filled with 0.
pub fn apply_augment(img: &Image, axis: FlipAxis, p: &AugmentParams) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut cur = img.clone();
    if p.flip {
        cur = match axis {
            FlipAxis::Vertical => {
                Image::from_fn(w, h, |r, c| img.get(h - 1 - r, c)).expect("same dims")
            }
            FlipAxis::Horizontal => {
                Image::from_fn(w, h, |r, c| img.get(r, w - 1 - c)).expect("same dims")
            }
            FlipAxis::None => cur,
        };
    }
    if p.angle_deg != 0.0 {
        let (s, c) = p.angle_deg.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let src = cur;
        let eps = 1e-9;
        cur = Image::from_fn(w, h, |r, col| {
            let (yr, xr) = (r as f64 - cy, col as f64 - cx);
            // inverse rotation
            let sy = c * yr - s * xr + cy;
            let sx = s * yr + c * xr + cx;
            if sy < -eps || sx < -eps || sy > (h - 1) as f64 + eps || sx > (w - 1) as f64 + eps {
                0
            } else {
                quantize(sample_bilinear(&src, sy, sx))
            }
        })
        .expect("same dims");
    }
    if p.dy != 0 || p.dx != 0 {
        let src = cur;
        cur = Image::from_fn(w, h, |r, c| {
            let sr = r as i64 - p.dy as i64;
            let sc = c as i64 - p.dx as i64;
            if sr < 0 || sc < 0 || sr >= h as i64 || sc >= w as i64 {
                0
            } else {
                src.get(sr as usize, sc as usize)
            }
        })
        .expect("same dims");
    }
    cur
}

pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Image {
    let p = draw_augment(cfg, rng);
    apply_augment(img, cfg.flip_axis, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn noisy(w: usize, h: usize, s: u64) -> Image {
        let mut r = seed::rng(s);
        let px = (0..w * h).map(|_| r.random::<u8>()).collect();
        Image::new(w, h, px).unwrap()
    }

    #[test]
    fn identity_config_leaves_image_unchanged() {
        let img = noisy(40, 30, 1);
        let mut rng = seed::rng(5);
        for _ in 0..20 {
            assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = noisy(41, 30, 2);
        for axis in [FlipAxis::Vertical, FlipAxis::Horizontal] {
            let p = AugmentParams {
                flip: true,
                dy: 0,
                dx: 0,
                angle_deg: 0.0,
            };
            let once = apply_augment(&img, axis, &p);
            assert_ne!(once, img);
            assert_eq!(apply_augment(&once, axis, &p), img);
        }
    }

    #[test]
    fn forced_translation_moves_pixel() {
        let mut img = Image::filled(50, 40, 0).unwrap();
        img.set(10, 20, 255);
        let p = AugmentParams {
            flip: false,
            dy: 3,
            dx: -2,
            angle_deg: 0.0,
        };
        let out = apply_augment(&img, FlipAxis::Vertical, &p);
        assert_eq!(out.get(13, 18), 255);
        assert_eq!(out.pixels().iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn draws_respect_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = seed::rng(3);
        let mut flips = 0;
        for _ in 0..2000 {
            let p = draw_augment(&cfg, &mut rng);
            assert!((-5..=5).contains(&p.dy) && (-5..=5).contains(&p.dx));
            assert!((-5.0..=5.0).contains(&p.angle_deg));
            flips += p.flip as usize;
        }
        assert!((850..1150).contains(&flips), "{flips}");
    }

    #[test]
    fn rotation_keeps_center_and_fills_corners() {
        let img = Image::filled(61, 61, 200).unwrap();
        let p = AugmentParams {
            flip: false,
            dy: 0,
            dx: 0,
            angle_deg: 45.0,
        };
        let out = apply_augment(&img, FlipAxis::None, &p);
        assert_eq!(out.get(30, 30), 200);
        assert_eq!(out.get(0, 0), 0);
    }
}
