//! Contrast-limited adaptive histogram equalization.

use super::{quantize, Image};
use crate::error::{Error, Result};

const BINS: usize = 256;

/// Equalization lookup table of one tile from its (clipped) histogram.
///
/// `lut[v] = (cdf[v] - cdf_min) / (N - cdf_min) · 255`, where `cdf_min` is
/// the first non-zero cumulative count. A flat histogram gives the identity.
fn tile_lut(hist: &[f64; BINS], clip_limit: f64) -> [f64; BINS] {
    let total: f64 = hist.iter().sum();
    let mut lut = [0.0; BINS];
    if hist.iter().filter(|&&h| h > 0.0).count() <= 1 {
        // single-valued tile
        for (v, l) in lut.iter_mut().enumerate() {
            *l = v as f64;
        }
        return lut;
    }
    let mut clipped = *hist;
    let mut excess = 0.0;
    for h in clipped.iter_mut() {
        if *h > clip_limit {
            excess += *h - clip_limit;
            *h = clip_limit;
        }
    }
    let share = excess / BINS as f64;
    for h in clipped.iter_mut() {
        *h += share;
    }

    let mut cdf = 0.0;
    let mut cdf_min = None;
    for (v, &h) in clipped.iter().enumerate() {
        cdf += h;
        if cdf_min.is_none() && h > 0.0 {
            cdf_min = Some(cdf);
        }
        lut[v] = cdf;
    }
    let cdf_min = cdf_min.unwrap_or(0.0);
    let denom = total - cdf_min;
    for l in lut.iter_mut() {
        *l = ((*l - cdf_min) / denom * 255.0).clamp(0.0, 255.0);
    }
    lut
}

fn bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len / n, (i + 1) * len / n)).collect()
}

/// For coordinate `p`, the pair of neighbouring tiles and the weight of the second.
fn blend_index(centers: &[f64], p: f64) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.partition_point(|&c| c <= p) - 1;
    let w = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, w)
}

/// CLAHE with a `tiles = (rows, cols)` grid and a clip limit relative to the
/// tile pixel count. Output pixels blend the four surrounding tile mappings
/// bilinearly; pixels beyond the outer tile centers use the nearest tiles.
pub fn clahe(img: &Image, tiles: (usize, usize), clip: f64) -> Result<Image> {
    let (tr, tc) = tiles;
    if tr == 0 || tc == 0 {
        return Err(Error::Input("CLAHE tile grid must be at least 1x1".into()));
    }
    if !(clip > 0.0 && clip <= 1.0) {
        return Err(Error::Input(format!("CLAHE clip {clip} outside (0, 1]")));
    }
    let (h, w) = (img.height(), img.width());
    if h < tr || w < tc {
        return Err(Error::Input(format!(
            "image {h}x{w} is smaller than the {tr}x{tc} tile grid"
        )));
    }

    let rb = bounds(h, tr);
    let cb = bounds(w, tc);
    let mut luts = Vec::with_capacity(tr * tc);
    for &(r0, r1) in &rb {
        for &(c0, c1) in &cb {
            let mut hist = [0.0; BINS];
            for r in r0..r1 {
                for c in c0..c1 {
                    hist[img.get(r, c) as usize] += 1.0;
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            luts.push(tile_lut(&hist, clip * n));
        }
    }

    let center = |&(a, b): &(usize, usize)| (a + b - 1) as f64 / 2.0;
    let rc: Vec<f64> = rb.iter().map(center).collect();
    let cc: Vec<f64> = cb.iter().map(center).collect();
    let col_idx: Vec<_> = (0..w).map(|x| blend_index(&cc, x as f64)).collect();

    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        let (i0, i1, wy) = blend_index(&rc, y as f64);
        for (x, &(j0, j1, wx)) in col_idx.iter().enumerate() {
            let v = img.get(y, x) as usize;
            let l = |i: usize, j: usize| luts[i * tc + j][v];
            let top = l(i0, j0) * (1.0 - wx) + l(i0, j1) * wx;
            let bot = l(i1, j0) * (1.0 - wx) + l(i1, j1) * wx;
            pixels.push(quantize(top * (1.0 - wy) + bot * wy));
        }
    }
    Image::new(w, h, pixels)
}
