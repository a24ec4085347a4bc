//! Image rasters, resampling and tissue segmentation.

use std::collections::VecDeque;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Default resolution assumed when neither a sidecar nor an override gives one.
pub const DEFAULT_MPP: f64 = 0.25;

/// 8-bit image, row-major, channel-interleaved, with a physical resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    /// Microns per pixel.
    pub mpp: f64,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>, mpp: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Unsupported(format!("{channels} channels")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Decode(format!(
                "pixel buffer has {} samples, expected {}",
                pixels.len(),
                width * height * channels
            )));
        }
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::Config(format!("mpp must be positive, got {mpp}")));
        }
        Ok(Self { width, height, channels, pixels, mpp })
    }

    /// Uniformly filled raster.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8, mpp: f64) -> Self {
        Self { width, height, channels, pixels: vec![value; width * height * channels], mpp }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = self.index(x, y);
        &self.pixels[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.pixels[i..i + c]
    }

    /// Integer-rounded luma (0.299 R + 0.587 G + 0.114 B).
    pub fn to_gray(&self) -> Vec<u8> {
        match self.channels {
            1 => self.pixels.clone(),
            _ => self.pixels.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect(),
        }
    }

    /// Bilinear sample at sub-pixel position (pixel centers on integers).
    /// Neighbours outside the canvas read as `fill`.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: u8, out: &mut [f32]) {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let offs = [(0, 0), (1, 0), (0, 1), (1, 1)];
        for v in out.iter_mut().take(self.channels) {
            *v = 0.0;
        }
        for (k, &(dx, dy)) in offs.iter().enumerate() {
            if w[k] == 0.0 {
                continue;
            }
            let (px, py) = (x0 + dx, y0 + dy);
            if px < 0 || py < 0 || px >= self.width as i64 || py >= self.height as i64 {
                for v in out.iter_mut().take(self.channels) {
                    *v += w[k] * fill as f32;
                }
            } else {
                let p = self.pixel(px as usize, py as usize);
                for (c, v) in out.iter_mut().take(self.channels).enumerate() {
                    *v += w[k] * p[c] as f32;
                }
            }
        }
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        image::save_buffer(path, &self.pixels, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Decode(format!("encode {}: {e}", path.display())))
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    // Integer weights sum to 1000, so a common offset on all channels
    // shifts the result by exactly that offset.
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

#[inline]
pub(crate) fn round_u8(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Deserialize)]
struct Sidecar {
    mpp: f64,
}

/// Sidecar path for an image: same stem with a `.json` extension.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Load a PNG or 8-bit TIFF. Resolution comes from `mpp_override`, then the
/// JSON sidecar, then [`DEFAULT_MPP`].
pub fn load_image(path: &Path, mpp_override: Option<f64>) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    use image::DynamicImage as D;
    let (channels, pixels) = match img {
        D::ImageLuma8(b) => (1, b.into_raw()),
        D::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        D::ImageRgb8(b) => (3, b.into_raw()),
        D::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        other => return Err(Error::Unsupported(format!("bit depth / color type {:?}", other.color()))),
    };
    let mpp = match mpp_override {
        Some(m) => m,
        None => {
            let side = sidecar_path(path);
            if side.exists() {
                let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
                let s: Sidecar = serde_json::from_str(&text)
                    .map_err(|e| Error::Decode(format!("sidecar {}: {e}", side.display())))?;
                s.mpp
            } else {
                DEFAULT_MPP
            }
        }
    };
    Raster::new(w, h, channels, pixels, mpp)
}

/// Write the `{ "mpp": .. }` sidecar next to `image_path`.
pub fn write_sidecar(image_path: &Path, mpp: f64) -> Result<()> {
    let side = sidecar_path(image_path);
    let text = serde_json::json!({ "mpp": mpp }).to_string();
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Resample to `target_mpp`. Downscaling averages source areas, upscaling is
/// bilinear; each axis is handled independently.
pub fn resample(img: &Raster, target_mpp: f64) -> Result<Raster> {
    if !(target_mpp > 0.0 && target_mpp.is_finite()) {
        return Err(Error::Config(format!("target mpp must be positive, got {target_mpp}")));
    }
    if target_mpp == img.mpp {
        return Ok(img.clone());
    }
    let f = img.mpp / target_mpp;
    let ow = ((img.width as f64 * f).round() as usize).max(1);
    let oh = ((img.height as f64 * f).round() as usize).max(1);
    let c = img.channels;
    let src: Vec<f32> = img.pixels.iter().map(|&v| v as f32).collect();
    // rows first, then columns
    let horiz = resample_axis(&src, img.width, img.height, c, ow, true);
    let both = resample_axis(&horiz, ow, img.height, c, oh, false);
    Ok(Raster {
        width: ow,
        height: oh,
        channels: c,
        pixels: both.into_iter().map(round_u8).collect(),
        mpp: target_mpp,
    })
}

/// Per-output-sample list of (source index, weight) along one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f32)>> {
    let mut taps = Vec::with_capacity(n_out);
    if n_out == n_in {
        return (0..n_out).map(|i| vec![(i, 1.0)]).collect();
    }
    let ratio = n_in as f64 / n_out as f64;
    if n_out < n_in {
        for o in 0..n_out {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let mut t = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    t.push((i, (cover / ratio) as f32));
                }
                i += 1;
            }
            taps.push(t);
        }
    } else {
        for o in 0..n_out {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let fr = (s - i0 as f64) as f32;
            if fr == 0.0 || i0 + 1 >= n_in {
                taps.push(vec![(i0, 1.0)]);
            } else {
                taps.push(vec![(i0, 1.0 - fr), (i0 + 1, fr)]);
            }
        }
    }
    taps
}

fn resample_axis(src: &[f32], w: usize, h: usize, c: usize, n_out: usize, horizontal: bool) -> Vec<f32> {
    let (n_in, ow, oh) = if horizontal { (w, n_out, h) } else { (h, w, n_out) };
    let taps = axis_weights(n_in, n_out);
    let mut out = vec![0.0f32; ow * oh * c];
    for y in 0..oh {
        for x in 0..ow {
            let o = (y * ow + x) * c;
            let t = if horizontal { &taps[x] } else { &taps[y] };
            for &(i, wgt) in t {
                let s = if horizontal { (y * w + i) * c } else { (i * w + x) * c };
                for k in 0..c {
                    out[o + k] += wgt * src[s + k];
                }
            }
        }
    }
    out
}

/// 256-bin histogram of grayscale values.
pub fn histogram(gray: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in gray {
        h[v as usize] += 1;
    }
    h
}

/// Between-class variance for splitting the histogram into `<= t` and `> t`.
/// `None` when either class is empty.
#[inline]
pub fn between_class_variance(n0: u64, s0: u64, n: u64, s: u64) -> Option<f64> {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let m0 = s0 as f64 / n0 as f64;
    let m1 = (s - s0) as f64 / n1 as f64;
    Some(n0 as f64 * n1 as f64 * (m0 - m1) * (m0 - m1))
}

/// Otsu threshold of a histogram: the smallest level maximising the
/// between-class variance. A single-valued histogram returns that value.
pub fn otsu_from_histogram(hist: &[u64; 256]) -> u8 {
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    let mut best: Option<(f64, u8)> = None;
    for t in 0..256usize {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        if let Some(v) = between_class_variance(n0, s0, n, s) {
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, t as u8));
            }
        }
    }
    match best {
        Some((_, t)) => t,
        None => hist.iter().position(|&c| c > 0).unwrap_or(0) as u8,
    }
}

pub fn otsu_threshold(img: &Raster) -> u8 {
    otsu_from_histogram(&histogram(&img.to_gray()))
}

/// Boolean per-pixel tissue map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Out-of-canvas reads as background.
    #[inline]
    pub fn get_i(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn centroid(&self) -> Option<[f64; 2]> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [sx / n as f64, sy / n as f64])
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count();
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Connected-component labelling. Label 0 is background; components are
/// numbered from 1 in raster-scan order of their first pixel. Returns the
/// label image and the area of each component (index = label - 1).
pub fn label_components(mask: &Mask, eight: bool) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        let mut area = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in neighbours(eight) {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.bits[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

fn neighbours(eight: bool) -> &'static [(i64, i64)] {
    const N4: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    const N8: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    if eight {
        &N8
    } else {
        &N4
    }
}

/// Drop 8-connected components smaller than `min_area`.
pub fn remove_small_components(mask: &Mask, min_area: usize) -> Mask {
    let (labels, areas) = label_components(mask, true);
    let bits = labels.iter().map(|&l| l != 0 && areas[l as usize - 1] >= min_area).collect();
    Mask { width: mask.width, height: mask.height, bits }
}

/// Keep only the largest 8-connected component (first in scan order on ties).
pub fn largest_component(mask: &Mask) -> Mask {
    let (labels, areas) = label_components(mask, true);
    let mut best = 0usize;
    for (i, &a) in areas.iter().enumerate() {
        if best == 0 || a > areas[best - 1] {
            best = i + 1;
        }
    }
    let bits = labels.iter().map(|&l| best != 0 && l as usize == best).collect();
    Mask { width: mask.width, height: mask.height, bits }
}

/// Fill background regions (4-connected) that do not reach the canvas border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !mask.get(x, y) {
                let i = y * w + x;
                if !outside[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for (dx, dy) in neighbours(false) {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !mask.bits[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    Mask { width: w, height: h, bits: outside.into_iter().map(|o| !o).collect() }
}

/// Square-element dilation with radius `r`; out-of-canvas is background.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut tmp = vec![false; w * h];
    for y in 0..h {
        let row = &mask.bits[y * w..(y + 1) * w];
        let mut prefix = vec![0u32; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x] as u32;
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            tmp[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    let mut out = vec![false; w * h];
    let mut prefix = vec![0u32; h + 1];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + tmp[y * w + x] as u32;
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    Mask { width: w, height: h, bits: out }
}

/// Morphological closing with a square element; the canvas is padded so the
/// border does not erode tissue.
pub fn close(mask: &Mask, r: usize) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let mut padded = Mask::new(pw, ph);
    for y in 0..h {
        for x in 0..w {
            padded.set(x + r, y + r, mask.get(x, y));
        }
    }
    let dil = dilate(&padded, r);
    let inv = Mask { width: pw, height: ph, bits: dil.bits.iter().map(|b| !b).collect() };
    let ero = dilate(&inv, r);
    let mut out = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, !ero.get(x + r, y + r));
        }
    }
    out
}

/// Which Otsu class is tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// The class touching fewer border pixels is tissue.
    #[default]
    Auto,
    /// Tissue is darker than background (bright-field slides).
    Dark,
    Bright,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    pub min_component_area: usize,
    pub polarity: Polarity,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { min_component_area: 1024, polarity: Polarity::Auto }
    }
}

/// Otsu foreground segmentation followed by small-component removal and
/// hole filling.
pub fn segment_tissue(img: &Raster, opts: &SegmentOptions) -> Result<Mask> {
    let gray = img.to_gray();
    let t = otsu_from_histogram(&histogram(&gray));
    let (w, h) = (img.width, img.height);
    let dark: Vec<bool> = gray.iter().map(|&v| v <= t).collect();
    let tissue_is_dark = match opts.polarity {
        Polarity::Dark => true,
        Polarity::Bright => false,
        Polarity::Auto => {
            let (mut dark_border, mut total) = (0usize, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                        total += 1;
                        dark_border += dark[y * w + x] as usize;
                    }
                }
            }
            // ties go to dark tissue
            dark_border * 2 <= total
        }
    };
    let raw = Mask { width: w, height: h, bits: dark.iter().map(|&d| d == tissue_is_dark).collect() };
    let cleaned = fill_holes(&remove_small_components(&raw, opts.min_component_area));
    if cleaned.is_empty() {
        return Err(Error::NoTissue);
    }
    Ok(cleaned)
}
