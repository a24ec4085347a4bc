//! Synthetic ground truth and the quantitative experiments built on it.
//!
//! A procedurally textured slide is cut into fragments with known poses;
//! the pipeline runs on the fragments and its output is scored against the
//! recorded cuts.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_patches, splitmix, EncoderSpec, FeatureVector};
use crate::error::{Error, Result};
use crate::geometry::{dist, Point, RigidTransform};
use crate::matching::{build_stacks, match_candidates, write_matches_csv, CandidateMatch};
use crate::mosaic::{
    correspondences, estimate_alignment, prepare_fragment_from_raster, stitch, BoundarySide, Fragment, StitchConfig,
    StitchManifest, StitchOutcome,
};
use crate::parallel::par_map;
use crate::patchex::{extract, Patch, PatchFrame};
use crate::raster::{luma, segment_tissue, Mask, Raster, SegmentOptions};

// ---------------------------------------------------------------------------
// Synthetic slides

/// Appearance of a generated slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideStyle {
    /// Microns per pixel; texture scales are physical, so the same seed at
    /// another resolution shows the same tissue.
    pub mpp: f64,
    /// Accepted tissue fraction of the canvas.
    pub tissue_fraction: (f64, f64),
}

impl Default for SlideStyle {
    fn default() -> Self {
        Self { mpp: 1.0, tissue_fraction: (0.3, 0.8) }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub image: Raster,
    /// Silhouette the generator painted.
    pub mask: Mask,
}

const PINK: [f64; 3] = [220.0, 135.0, 180.0];
const PURPLE: [f64; 3] = [120.0, 60.0, 150.0];
/// Texture octaves in microns, coarse to fine.
const OCTAVES_UM: [f64; 6] = [512.0, 256.0, 128.0, 64.0, 32.0, 16.0];

fn lattice(seed: u64, octave: usize, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((octave as u64) << 48 ^ splitmix(ix as u64 ^ splitmix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise at micron position `(u, v)`, roughly in [0, 1].
pub fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let mut acc = 0.0;
    let mut total = 0.0;
    for (o, &wl) in OCTAVES_UM.iter().enumerate() {
        let amp = wl.powf(0.6);
        let (x, y) = (u / wl, v / wl);
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (smooth(x - fx), smooth(y - fy));
        let (ix, iy) = (fx as i64, fy as i64);
        let a = lattice(seed, o, ix, iy);
        let b = lattice(seed, o, ix + 1, iy);
        let c = lattice(seed, o, ix, iy + 1);
        let d = lattice(seed, o, ix + 1, iy + 1);
        let top = a + (b - a) * tx;
        let bot = c + (d - c) * tx;
        acc += amp * (top + (bot - top) * ty);
        total += amp;
    }
    acc / total
}

/// Textured tissue blob on a white background, deterministic per seed.
pub fn generate_synthetic_slide(seed: u64, size: usize, style: &SlideStyle) -> Result<SyntheticSlide> {
    if size < 64 {
        return Err(Error::Config(format!("synthetic slide must be at least 64 px, got {size}")));
    }
    if !(style.mpp > 0.0) {
        return Err(Error::Config("slide mpp must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (size as f64 - 1.0) / 2.0;
    let n = size * size;
    for _attempt in 0..256 {
        let r0 = rng.random_range(0.40..0.44) * size as f64;
        let harmonics: Vec<(f64, f64)> =
            (2..=5).map(|_| (rng.random_range(-0.03..0.03), rng.random_range(0.0..std::f64::consts::TAU))).collect();
        let mut mask = Mask::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let phi = dy.atan2(dx);
                let r = r0 * (1.0 + harmonics.iter().enumerate().map(|(k, (a, p))| a * ((k as f64 + 2.0) * phi + p).cos()).sum::<f64>());
                if dx.hypot(dy) < r {
                    mask.set(x, y, true);
                }
            }
        }
        let frac = mask.count() as f64 / n as f64;
        if frac < style.tissue_fraction.0 || frac > style.tissue_fraction.1 {
            continue;
        }
        let tex_seed = rng.random::<u64>();
        let mut pixels = vec![255u8; n * 3];
        for y in 0..size {
            for x in 0..size {
                if !mask.get(x, y) {
                    continue;
                }
                let t = value_noise(tex_seed, x as f64 * style.mpp, y as f64 * style.mpp);
                let t = (0.5 + (t - 0.5) * 2.5).clamp(0.0, 1.0);
                let o = (y * size + x) * 3;
                for k in 0..3 {
                    pixels[o + k] = (PINK[k] + (PURPLE[k] - PINK[k]) * t).round() as u8;
                }
            }
        }
        let image = Raster::new(size, size, 3, pixels, style.mpp)?;
        return Ok(SyntheticSlide { image, mask });
    }
    Err(Error::Config("could not meet the tissue-fraction constraint".into()))
}

// ---------------------------------------------------------------------------
// Fragmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One vertical cut.
    Halves,
    /// 2×2.
    Quadrants,
    Grid { rows: usize, cols: usize },
}

impl Layout {
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            Layout::Halves => (1, 2),
            Layout::Quadrants => (2, 2),
            Layout::Grid { rows, cols } => (rows, cols),
        }
    }

    /// Number of fragment pairs sharing a straight cut.
    pub fn seam_count(&self) -> usize {
        let (r, c) = self.shape();
        r * c.saturating_sub(1) + c * r.saturating_sub(1)
    }
}

/// How to cut and disturb a slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FragmentationSpec {
    pub layout: Layout,
    /// Width of the strip removed along every cut, microns.
    pub gap_um: f64,
    /// Range for the fraction of each cut edge cut away.
    pub edge_trim: (f64, f64),
    /// Rotation drawn uniformly from ±this, degrees.
    pub rotation_deg: f64,
    /// Translation per axis drawn uniformly from ±this, pixels.
    pub translation_px: f64,
    /// White border around each fragment canvas.
    pub margin: usize,
    /// The slide must span twice this per axis and every cell once.
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for FragmentationSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Quadrants,
            gap_um: 0.0,
            edge_trim: (0.0, 0.0),
            rotation_deg: 0.0,
            translation_px: 0.0,
            margin: 32,
            patch_size: 224,
            seed: 0,
        }
    }
}

impl FragmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.layout.shape();
        if r == 0 || c == 0 {
            return Err(Error::Config("layout needs at least one row and column".into()));
        }
        if !(self.gap_um >= 0.0) || !self.gap_um.is_finite() {
            return Err(Error::Config("gap must be >= 0".into()));
        }
        let (lo, hi) = self.edge_trim;
        if !(0.0..=0.5).contains(&lo) || !(0.0..=0.5).contains(&hi) || lo > hi {
            return Err(Error::Config("edge trim must be a range inside [0, 0.5]".into()));
        }
        if !(self.rotation_deg >= 0.0) || !(self.translation_px >= 0.0) {
            return Err(Error::Config("perturbation ranges must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutAxis {
    /// A cut along x = const.
    Vertical,
    /// A cut along y = const.
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// Two fragments that share a cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seam {
    pub a: usize,
    pub b: usize,
    pub axis: CutAxis,
    /// Slide coordinate of the cut line.
    pub position: f64,
}

/// Notch cut away at one end of a fragment's cut edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trim {
    pub fragment: usize,
    pub side: Side,
    pub fraction: f64,
    pub length_px: f64,
    /// Notch at the low-coordinate end of the edge.
    pub at_start: bool,
    /// Removed square `[x0, y0, x1, y1)` in slide pixels.
    pub region: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFragment {
    pub id: String,
    pub row: usize,
    pub col: usize,
    /// Fragment canvas → slide pixels.
    pub pose: RigidTransform,
    /// Cell kept from the slide, `[x0, y0, x1, y1)`.
    pub cell: [f64; 4],
    pub width: usize,
    pub height: usize,
}

impl GtFragment {
    pub fn cell_center(&self) -> Point {
        [(self.cell[0] + self.cell[2] - 1.0) / 2.0, (self.cell[1] + self.cell[3] - 1.0) / 2.0]
    }
}

/// Everything needed to score a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub slide_mpp: f64,
    pub slide_width: usize,
    pub slide_height: usize,
    pub gap_px: f64,
    pub spec: FragmentationSpec,
    pub fragments: Vec<GtFragment>,
    pub seams: Vec<Seam>,
    pub trims: Vec<Trim>,
}

impl GroundTruth {
    /// Symmetric adjacency list.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.fragments.len()];
        for s in &self.seams {
            adj[s.a].push(s.b);
            adj[s.b].push(s.a);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Slide position of a point on fragment `i`'s canvas.
    pub fn to_slide(&self, i: usize, p: Point) -> Point {
        self.fragments[i].pose.apply(p)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.fragments.iter().position(|f| f.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Decode(format!("ground truth: {e}")))
    }
}

struct Cell {
    row: usize,
    col: usize,
    bounds: [f64; 4],
    notches: Vec<[f64; 4]>,
}

impl Cell {
    fn keeps(&self, x: i64, y: i64) -> bool {
        let (xf, yf) = (x as f64, y as f64);
        let [x0, y0, x1, y1] = self.bounds;
        xf >= x0
            && xf < x1
            && yf >= y0
            && yf < y1
            && !self.notches.iter().any(|n| xf >= n[0] && xf < n[2] && yf >= n[1] && yf < n[3])
    }
}

/// Cut `slide` along straight lines, drop a gap strip on every cut, notch
/// the cut edges and place each piece on its own perturbed canvas.
pub fn fragment_slide(slide: &Raster, spec: &FragmentationSpec) -> Result<(Vec<Raster>, GroundTruth)> {
    spec.validate()?;
    let (rows, cols) = spec.layout.shape();
    let (w, h) = (slide.width, slide.height);
    if w < spec.patch_size * cols.max(2) || h < spec.patch_size * rows.max(2) {
        return Err(Error::Config(format!(
            "slide {w}x{h} too small for a {rows}x{cols} layout with {}-px patches",
            spec.patch_size
        )));
    }
    let gap = spec.gap_um / slide.mpp;
    let xs: Vec<f64> = (0..=cols).map(|k| (k as f64 * w as f64 / cols as f64).round()).collect();
    let ys: Vec<f64> = (0..=rows).map(|k| (k as f64 * h as f64 / rows as f64).round()).collect();
    let half = gap / 2.0;
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let bounds = [
                xs[c] + if c > 0 { half } else { 0.0 },
                ys[r] + if r > 0 { half } else { 0.0 },
                xs[c + 1] - if c + 1 < cols { half } else { 0.0 },
                ys[r + 1] - if r + 1 < rows { half } else { 0.0 },
            ];
            if bounds[2].ceil() - bounds[0].ceil() < 1.0 || bounds[3].ceil() - bounds[1].ceil() < 1.0 {
                return Err(Error::Config(format!("gap of {gap:.1} px leaves cell ({r}, {c}) empty")));
            }
            cells.push(Cell { row: r, col: c, bounds, notches: Vec::new() });
        }
    }

    let tissue = segment_tissue(slide, &SegmentOptions::default()).unwrap_or_else(|_| Mask::new(w, h));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trims = Vec::new();
    let mut poses = Vec::new();
    for (i, cell) in cells.iter_mut().enumerate() {
        let sides = [
            (Side::Left, cell.col > 0),
            (Side::Right, cell.col + 1 < cols),
            (Side::Top, cell.row > 0),
            (Side::Bottom, cell.row + 1 < rows),
        ];
        for (side, is_cut) in sides {
            if !is_cut {
                continue;
            }
            let (lo, hi) = spec.edge_trim;
            let fraction = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let at_start = rng.random_bool(0.5);
            if let Some(t) = notch(&tissue, cell, side, fraction, at_start, i) {
                cell.notches.push(t.region);
                trims.push(t);
            }
        }
        let theta = if spec.rotation_deg > 0.0 { rng.random_range(-spec.rotation_deg..=spec.rotation_deg) } else { 0.0 };
        let t = spec.translation_px;
        let delta = if t > 0.0 { [rng.random_range(-t..=t), rng.random_range(-t..=t)] } else { [0.0, 0.0] };
        poses.push((theta.to_radians(), delta));
    }

    let mut images = Vec::new();
    let mut gt_frags = Vec::new();
    for (i, (cell, (theta, delta))) in cells.iter().zip(&poses).enumerate() {
        let [x0, y0, x1, y1] = cell.bounds;
        let (px0, py0) = (x0.ceil(), y0.ceil());
        let (px1, py1) = (x1.ceil() - 1.0, y1.ceil() - 1.0);
        let (cw, ch) = ((px1 - px0) as usize + 1, (py1 - py0) as usize + 1);
        let m = spec.margin;
        let (cw_out, ch_out) = if *theta == 0.0 && spec.translation_px == 0.0 {
            (cw + 2 * m, ch + 2 * m)
        } else {
            let d = (cw as f64).hypot(ch as f64).ceil() as usize + 2 * m + 2 * spec.translation_px.ceil() as usize;
            (d, d)
        };
        let cell_center = [(px0 + px1) / 2.0, (py0 + py1) / 2.0];
        let canvas_center = [(cw_out as f64 - 1.0) / 2.0 + delta[0], (ch_out as f64 - 1.0) / 2.0 + delta[1]];
        let pose = RigidTransform::from_translation(cell_center)
            .compose(&RigidTransform::new(*theta, [0.0, 0.0]))
            .compose(&RigidTransform::from_translation([-canvas_center[0], -canvas_center[1]]));
        images.push(warp_cell(slide, cell, &pose, cw_out, ch_out)?);
        gt_frags.push(GtFragment {
            id: format!("frag-{i}"),
            row: cell.row,
            col: cell.col,
            pose,
            cell: cell.bounds,
            width: cw_out,
            height: ch_out,
        });
    }

    let mut seams = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                seams.push(Seam { a: i, b: i + 1, axis: CutAxis::Vertical, position: xs[c + 1] });
            }
            if r + 1 < rows {
                seams.push(Seam { a: i, b: i + cols, axis: CutAxis::Horizontal, position: ys[r + 1] });
            }
        }
    }
    let gt = GroundTruth {
        slide_mpp: slide.mpp,
        slide_width: w,
        slide_height: h,
        gap_px: gap,
        spec: spec.clone(),
        fragments: gt_frags,
        seams,
        trims,
    };
    Ok((images, gt))
}

fn notch(tissue: &Mask, cell: &Cell, side: Side, fraction: f64, at_start: bool, fragment: usize) -> Option<Trim> {
    let [x0, y0, x1, y1] = cell.bounds;
    let (px0, py0, px1, py1) = (x0.ceil() as i64, y0.ceil() as i64, x1.ceil() as i64 - 1, y1.ceil() as i64 - 1);
    // the pixel line along the cut edge
    let (line, along): (Vec<(i64, i64)>, bool) = match side {
        Side::Left => ((py0..=py1).map(|y| (px0, y)).collect(), false),
        Side::Right => ((py0..=py1).map(|y| (px1, y)).collect(), false),
        Side::Top => ((px0..=px1).map(|x| (x, py0)).collect(), true),
        Side::Bottom => ((px0..=px1).map(|x| (x, py1)).collect(), true),
    };
    let hits: Vec<i64> = line.iter().filter(|(x, y)| tissue.get_i(*x, *y)).map(|&(x, y)| if along { x } else { y }).collect();
    let (lo, hi) = (*hits.iter().min()?, *hits.iter().max()?);
    let length = fraction * (hi - lo + 1) as f64;
    if length <= 0.0 {
        return None;
    }
    let (a0, a1) = if at_start { (lo as f64, lo as f64 + length) } else { (hi as f64 + 1.0 - length, hi as f64 + 1.0) };
    let region = match side {
        Side::Left => [px0 as f64, a0, px0 as f64 + length, a1],
        Side::Right => [px1 as f64 + 1.0 - length, a0, px1 as f64 + 1.0, a1],
        Side::Top => [a0, py0 as f64, a1, py0 as f64 + length],
        Side::Bottom => [a0, py1 as f64 + 1.0 - length, a1, py1 as f64 + 1.0],
    };
    Some(Trim { fragment, side, fraction, length_px: length, at_start, region })
}

/// Bilinear resampling restricted to one cell: neighbours outside the cell
/// read as white background.
fn warp_cell(slide: &Raster, cell: &Cell, pose: &RigidTransform, w: usize, h: usize) -> Result<Raster> {
    let ch = slide.channels;
    let mut out = Raster::filled(w, h, ch, 255, slide.mpp);
    let [x0, y0, x1, y1] = cell.bounds;
    for y in 0..h {
        for x in 0..w {
            let s = pose.apply([x as f64, y as f64]);
            if s[0] < x0 - 1.0 || s[0] > x1 || s[1] < y0 - 1.0 || s[1] > y1 {
                continue;
            }
            let (fx, fy) = (s[0].floor(), s[1].floor());
            let (tx, ty) = (s[0] - fx, s[1] - fy);
            let (ix, iy) = (fx as i64, fy as i64);
            let mut acc = [0f64; 3];
            let mut any = false;
            for (dx, dy, wgt) in [(0, 0, (1.0 - tx) * (1.0 - ty)), (1, 0, tx * (1.0 - ty)), (0, 1, (1.0 - tx) * ty), (1, 1, tx * ty)] {
                if wgt == 0.0 {
                    continue;
                }
                let (sx, sy) = (ix + dx, iy + dy);
                let inside = sx >= 0 && sy >= 0 && (sx as usize) < slide.width && (sy as usize) < slide.height && cell.keeps(sx, sy);
                for k in 0..ch {
                    let v = if inside {
                        any = true;
                        slide.pixel(sx as usize, sy as usize)[k] as f64
                    } else {
                        255.0
                    };
                    acc[k] += wgt * v;
                }
            }
            if any {
                let px = out.pixel_mut(x, y);
                for k in 0..ch {
                    px[k] = (acc[k] + 0.5).floor().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scoring

/// Largest pose error for a seam to count as recovered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseTolerance {
    pub degrees: f64,
    pub px: f64,
}

impl Default for PoseTolerance {
    fn default() -> Self {
        Self { degrees: 10.0, px: 448.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamScore {
    pub a: String,
    pub b: String,
    pub merged: bool,
    /// Relative pose error (degrees, px at slide resolution) when merged.
    pub error: Option<(f64, f64)>,
    pub matched: bool,
}

/// Per-seam verdicts: fragments must share a group and their relative pose
/// must agree with the cut geometry. Translation error is measured at the
/// second fragment's cell center.
pub fn score_seams(manifest: &StitchManifest, gt: &GroundTruth, tol: PoseTolerance) -> Vec<SeamScore> {
    let s = manifest.output_mpp / gt.slide_mpp;
    gt.seams
        .iter()
        .map(|seam| {
            let (ga, gb) = (&gt.fragments[seam.a], &gt.fragments[seam.b]);
            let (fa, fb) = (manifest.fragment(&ga.id), manifest.fragment(&gb.id));
            let mut out = SeamScore { a: ga.id.clone(), b: gb.id.clone(), merged: false, error: None, matched: false };
            let (Some(fa), Some(fb)) = (fa, fb) else { return out };
            if fa.group != fb.group {
                return out;
            }
            out.merged = true;
            let pa = fa.pose().rescaled(s);
            let pb = fb.pose().rescaled(s);
            let recovered = pa.inverse().compose(&pb);
            let truth = ga.pose.inverse().compose(&gb.pose);
            let probe = gb.pose.inverse().apply(gb.cell_center());
            let deg = (recovered.theta - truth.theta).sin().atan2((recovered.theta - truth.theta).cos()).abs().to_degrees();
            let px = dist(recovered.apply(probe), truth.apply(probe));
            out.error = Some((deg, px));
            out.matched = deg <= tol.degrees && px <= tol.px;
            out
        })
        .collect()
}

/// Percentage of ground-truth seams recovered, in [0, 100].
pub fn score_boundary_matches(manifest: &StitchManifest, gt: &GroundTruth, tol: PoseTolerance) -> f64 {
    let scores = score_seams(manifest, gt, tol);
    if scores.is_empty() {
        return 100.0;
    }
    100.0 * scores.iter().filter(|s| s.matched).count() as f64 / scores.len() as f64
}

// ---------------------------------------------------------------------------
// Trials

/// Prepare every fragment of a ground-truth set, attaching slide poses so
/// the oracle encoder can see true positions.
pub fn prepare_pool(images: &[Raster], gt: &GroundTruth, cfg: &StitchConfig) -> Result<Vec<Fragment>> {
    let idx: Vec<usize> = (0..images.len()).collect();
    par_map(&idx, |&i| {
        let s = gt.slide_mpp / cfg.processing_mpp;
        let slide_pose = gt.fragments[i].pose.rescaled(s);
        let mut c = cfg.clone();
        c.workdir = cfg.workdir.as_ref().map(|w| w.join(&gt.fragments[i].id));
        if let Some(w) = &c.workdir {
            std::fs::create_dir_all(w).map_err(|e| Error::io(w, e))?;
        }
        prepare_fragment_from_raster(gt.fragments[i].id.clone(), images[i].clone(), Some(slide_pose), &c)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub gt: GroundTruth,
    pub outcome: StitchOutcome,
    /// Boundary-match rate, percent.
    pub rate: f64,
    pub seams: Vec<SeamScore>,
}

/// Cut, prepare, stitch and score one slide.
pub fn run_trial(slide: &Raster, spec: &FragmentationSpec, cfg: &StitchConfig, tol: PoseTolerance) -> Result<Trial> {
    let (images, gt) = fragment_slide(slide, spec)?;
    let pool = prepare_pool(&images, &gt, cfg)?;
    let outcome = stitch(pool, cfg)?;
    let seams = score_seams(&outcome.manifest, &gt, tol);
    let rate = score_boundary_matches(&outcome.manifest, &gt, tol);
    Ok(Trial { gt, outcome, rate, seams })
}

/// Mean absolute luma difference between the composite and the source
/// slide over pixels covered by fragment tissue. The composite must be at
/// slide resolution.
pub fn covered_abs_diff(outcome: &StitchOutcome, gt: &GroundTruth, slide: &Raster) -> Result<f64> {
    let m = &outcome.manifest;
    if (m.output_mpp - slide.mpp).abs() > 1e-12 {
        return Err(Error::Config("composite and slide resolutions differ".into()));
    }
    let first = m.fragments.iter().filter(|f| f.group == 0).min_by_key(|f| f.merge_step.unwrap_or(0)).ok_or(Error::EmptyPool)?;
    let gi = gt.index_of(&first.id).ok_or_else(|| Error::Config(format!("unknown fragment {}", first.id)))?;
    let to_slide = gt.fragments[gi].pose.compose(&first.pose().inverse());
    let img = &outcome.composite;
    let mut buf = [0f32; 3];
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..img.height {
        for x in 0..img.width {
            if !outcome.covered.get(x, y) {
                continue;
            }
            let s = to_slide.apply([x as f64, y as f64]);
            slide.sample_bilinear(s[0], s[1], 255, &mut buf);
            let want = gray_of(&buf[..slide.channels]);
            let p = img.pixel(x, y);
            let got = if p.len() == 3 { luma(p[0], p[1], p[2]) as f64 } else { p[0] as f64 };
            sum += (got - want).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

fn gray_of(v: &[f32]) -> f64 {
    if v.len() == 3 {
        0.299 * v[0] as f64 + 0.587 * v[1] as f64 + 0.114 * v[2] as f64
    } else {
        v[0] as f64
    }
}

// ---------------------------------------------------------------------------
// Reports

/// Column header shared by every report.
pub const REPORT_HEADER: &str = "experiment,variable,value,metric,mean,std,n";

/// One summary statistic at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub variable: String,
    pub value: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two samples.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<ReportRow>,
}

/// Mean and sample standard deviation. The mean of nothing is NaN.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ExperimentReport {
    pub fn new(experiment: impl Into<String>) -> Self {
        Self { experiment: experiment.into(), rows: Vec::new() }
    }

    /// Summarise `samples` into one row.
    pub fn push(&mut self, variable: &str, value: impl ToString, metric: &str, samples: &[f64]) {
        let (mean, std) = mean_std(samples);
        self.rows.push(ReportRow {
            experiment: self.experiment.clone(),
            variable: variable.into(),
            value: value.to_string(),
            metric: metric.into(),
            mean,
            std,
            n: samples.len(),
        });
    }

    /// A ratio already pooled over `n` items.
    pub fn push_pooled(&mut self, variable: &str, value: impl ToString, metric: &str, ratio: f64, n: usize) {
        self.rows.push(ReportRow {
            experiment: self.experiment.clone(),
            variable: variable.into(),
            value: value.to_string(),
            metric: metric.into(),
            mean: ratio,
            std: 0.0,
            n,
        });
    }

    pub fn find(&self, variable: &str, value: &str, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variable == variable && r.value == value && r.metric == metric)
    }

    /// Rows of one metric in sweep order.
    pub fn series(&self, metric: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.metric == metric).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{}\n",
                csv_field(&r.experiment),
                csv_field(&r.variable),
                csv_field(&r.value),
                csv_field(&r.metric),
                r.mean,
                r.std,
                r.n
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Give an oracle encoder a per-trial noise stream; other encoders pass
/// through.
pub fn reseeded(spec: &EncoderSpec, seed: u64) -> EncoderSpec {
    match spec {
        EncoderSpec::Oracle { sigma, seed: s, wavelengths } => {
            EncoderSpec::Oracle { sigma: *sigma, seed: splitmix(*s ^ splitmix(seed)), wavelengths: *wavelengths }
        }
        other => other.clone(),
    }
}

/// Encode frames of a raster whose pixels map to the slide through
/// `slide_pose`.
fn encode_frames(
    spec: &EncoderSpec,
    image: &Raster,
    frames: &[PatchFrame],
    slide_pose: &RigidTransform,
    workdir: Option<&Path>,
) -> Result<Vec<FeatureVector>> {
    let patches: Vec<Patch> = frames
        .iter()
        .map(|f| {
            let mut p = if spec.needs_pixels() {
                extract(image, f)
            } else {
                Patch { frame: *f, channels: image.channels, pixels: Vec::new(), source_center: None }
            };
            p.source_center = Some(slide_pose.apply(f.center));
            p
        })
        .collect();
    encode_patches(spec, &patches, workdir)
}

// ---------------------------------------------------------------------------
// Two-fragment seam matching

/// A slide cut into halves, prepared for boundary matching. The left half
/// moves, the right one is fixed.
#[derive(Debug, Clone)]
pub struct SeamPair {
    pub gt: GroundTruth,
    /// `[moving, fixed]`.
    pub fragments: Vec<Fragment>,
    /// Moving frames on the cut edge that have a counterpart across it.
    /// Lengths below are processing pixels.
    pub seam_frames: Vec<usize>,
    /// Largest distance between a moving anchor, shifted across the gap,
    /// and a fixed anchor for the match to count as correct.
    pub radius: f64,
    /// Width of the removed strip.
    pub gap: f64,
}

/// Frame anchor in slide coordinates at processing resolution.
fn slide_anchor(f: &Fragment, k: usize) -> Point {
    f.slide_pose.expect("ground-truth fragment").apply(f.frames[k].anchor)
}

impl SeamPair {
    /// Cut `slide` in halves with a `gap_um` strip and random rigid
    /// perturbations drawn from `seed`.
    pub fn new(slide: &Raster, gap_um: f64, seed: u64, cfg: &StitchConfig) -> Result<Self> {
        let spec = FragmentationSpec {
            layout: Layout::Halves,
            gap_um,
            rotation_deg: 180.0,
            translation_px: 40.0,
            patch_size: cfg.patch_size,
            seed,
            ..Default::default()
        };
        let (images, gt) = fragment_slide(slide, &spec)?;
        // geometry only; features are recomputed per encoder
        let geo = StitchConfig { encoder: EncoderSpec::oracle(0.0, 0), workdir: None, ..cfg.clone() };
        let fragments = prepare_pool(&images, &gt, &geo)?;
        let k = gt.slide_mpp / cfg.processing_mpp;
        let gap = gt.gap_px * k;
        let edge = (gt.seams[0].position - gt.gap_px / 2.0) * k;
        let mut pair = SeamPair { gt, fragments, seam_frames: Vec::new(), radius: 1.5 * cfg.stride, gap };
        let (mv, fx) = (&pair.fragments[0], &pair.fragments[1]);
        let tol = 0.25 * cfg.stride;
        let on_edge = |a: Point, e: f64| (a[0] - e).abs() <= tol;
        let fixed_edge = edge + gap;
        let fixed_anchors: Vec<Point> =
            (0..fx.frames.len()).map(|j| slide_anchor(fx, j)).filter(|a| on_edge(*a, fixed_edge)).collect();
        pair.seam_frames = (0..mv.frames.len())
            .filter(|&k| {
                let a = slide_anchor(mv, k);
                on_edge(a, edge) && {
                    let c = pair.across(a);
                    fixed_anchors.iter().any(|b| dist(c, *b) <= pair.radius)
                }
            })
            .collect();
        Ok(pair)
    }

    /// A moving-side slide point carried across the removed strip.
    fn across(&self, p: Point) -> Point {
        [p[0] + self.gap, p[1]]
    }

    /// Whether moving frame `k` matched to fixed frame `j` is correct.
    pub fn is_correct(&self, k: usize, j: usize) -> bool {
        let a = self.across(slide_anchor(&self.fragments[0], k));
        dist(a, slide_anchor(&self.fragments[1], j)) <= self.radius
    }

    /// Features of both fragments under `spec`.
    pub fn encode(&self, spec: &EncoderSpec) -> Result<[Vec<FeatureVector>; 2]> {
        let enc = |f: &Fragment| encode_frames(spec, &f.image, &f.frames, &f.slide_pose.expect("slide pose"), None);
        Ok([enc(&self.fragments[0])?, enc(&self.fragments[1])?])
    }

    /// Match the halves with neighbourhood `n` and score the seam frames,
    /// optionally followed by the pipeline's alignment.
    pub fn score(&self, features: &[Vec<FeatureVector>; 2], n: usize, cfg: &StitchConfig, align: bool) -> Result<PairScore> {
        let ms = build_stacks(&features[0], n)?;
        let fs = build_stacks(&features[1], n)?;
        let matches = match_candidates(&ms, &fs)?;
        let correct: Vec<bool> = matches.iter().map(|m| self.is_correct(m.moving_index, m.fixed_index)).collect();
        let mut out = PairScore {
            seam_frames: self.seam_frames.len(),
            correct_before: self.seam_frames.iter().filter(|&&k| correct[k]).count(),
            inliers: 0,
            correct_after: 0,
            matches,
            inlier_mask: Vec::new(),
        };
        if align {
            let (mv, fx) = (&self.fragments[0], &self.fragments[1]);
            let pairs = correspondences(
                BoundarySide { chain: &mv.chain, frames: &mv.frames, stacks: &ms },
                BoundarySide { chain: &fx.chain, frames: &fx.frames, stacks: &fs },
                &out.matches,
            );
            match estimate_alignment(pairs, cfg) {
                Ok(al) => {
                    out.inlier_mask = al.inliers;
                    out.inliers = self.seam_frames.iter().filter(|&&k| out.inlier_mask[k]).count();
                    out.correct_after = self.seam_frames.iter().filter(|&&k| out.inlier_mask[k] && correct[k]).count();
                }
                Err(Error::NoConsensus { .. }) | Err(Error::DegenerateSample) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// Matching outcome on the seam of a [`SeamPair`].
#[derive(Debug, Clone)]
pub struct PairScore {
    pub seam_frames: usize,
    pub correct_before: usize,
    /// Seam frames kept by the alignment.
    pub inliers: usize,
    pub correct_after: usize,
    pub matches: Vec<CandidateMatch>,
    /// Alignment inliers over all matches; empty when none was found.
    pub inlier_mask: Vec<bool>,
}

impl PairScore {
    pub fn before(&self) -> Option<f64> {
        (self.seam_frames > 0).then(|| self.correct_before as f64 / self.seam_frames as f64)
    }

    pub fn after(&self) -> Option<f64> {
        (self.inliers > 0).then(|| self.correct_after as f64 / self.inliers as f64)
    }
}

fn criterion_row(report: &mut ExperimentReport, radius_px: f64) {
    report.push("criterion", "correct_match_radius_px", "threshold", &[radius_px]);
}

/// Fraction of correct seam matches before and after the alignment for
/// every encoder and gap, over `seeds` perturbations of one slide.
pub fn match_accuracy_vs_gap(
    slide: &Raster,
    encoders: &[EncoderSpec],
    gaps_um: &[f64],
    seeds: &[u64],
    cfg: &StitchConfig,
) -> Result<ExperimentReport> {
    let points: Vec<(f64, u64)> = gaps_um.iter().flat_map(|&g| seeds.iter().map(move |&s| (g, s))).collect();
    let scores = par_map(&points, |&(gap, seed)| -> Result<Vec<PairScore>> {
        let pair = SeamPair::new(slide, gap, seed, cfg)?;
        encoders
            .iter()
            .map(|e| {
                let spec = reseeded(e, seed);
                pair.score(&pair.encode(&spec)?, cfg.neighborhood, &StitchConfig { encoder: spec, ..cfg.clone() }, true)
            })
            .collect()
    });
    let scores: Vec<Vec<PairScore>> = scores.into_iter().collect::<Result<_>>()?;
    let mut report = ExperimentReport::new("match-vs-gap");
    criterion_row(&mut report, 1.5 * cfg.stride);
    for (gi, gap) in gaps_um.iter().enumerate() {
        let at_gap = &scores[gi * seeds.len()..(gi + 1) * seeds.len()];
        for (ei, e) in encoders.iter().enumerate() {
            let before: Vec<f64> = at_gap.iter().filter_map(|s| s[ei].before()).collect();
            let after: Vec<f64> = at_gap.iter().filter_map(|s| s[ei].after()).collect();
            let frames: Vec<f64> = at_gap.iter().map(|s| s[ei].seam_frames as f64).collect();
            report.push("gap_um", gap, &format!("{}:correct_before", e.name()), &before);
            report.push("gap_um", gap, &format!("{}:correct_after", e.name()), &after);
            report.push("gap_um", gap, &format!("{}:seam_frames", e.name()), &frames);
            // seam frames and inliers pooled over seeds; `n` is the denominator
            let pooled = |num: usize, den: usize| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
            let sum = |f: fn(&PairScore) -> usize| at_gap.iter().map(|s| f(&s[ei])).sum::<usize>();
            let (cb, sf) = (sum(|s| s.correct_before), sum(|s| s.seam_frames));
            let (ca, inl) = (sum(|s| s.correct_after), sum(|s| s.inliers));
            report.push_pooled("gap_um", gap, &format!("{}:pooled_before", e.name()), pooled(cb, sf), sf);
            report.push_pooled("gap_um", gap, &format!("{}:pooled_after", e.name()), pooled(ca, inl), inl);
        }
    }
    Ok(report)
}

/// Seam-match accuracy (before alignment) for each neighbourhood radius
/// and gap.
pub fn neighborhood_sweep(
    slide: &Raster,
    encoder: &EncoderSpec,
    n_values: &[usize],
    gaps_um: &[f64],
    seeds: &[u64],
    cfg: &StitchConfig,
) -> Result<ExperimentReport> {
    let points: Vec<(f64, u64)> = gaps_um.iter().flat_map(|&g| seeds.iter().map(move |&s| (g, s))).collect();
    let acc = par_map(&points, |&(gap, seed)| -> Result<Vec<Option<f64>>> {
        let pair = SeamPair::new(slide, gap, seed, cfg)?;
        let feats = pair.encode(&reseeded(encoder, seed))?;
        n_values.iter().map(|&n| Ok(pair.score(&feats, n, cfg, false)?.before())).collect()
    });
    let acc: Vec<Vec<Option<f64>>> = acc.into_iter().collect::<Result<_>>()?;
    let mut report = ExperimentReport::new("neighborhood");
    criterion_row(&mut report, 1.5 * cfg.stride);
    for (gi, gap) in gaps_um.iter().enumerate() {
        for (ni, n) in n_values.iter().enumerate() {
            let xs: Vec<f64> = acc[gi * seeds.len()..(gi + 1) * seeds.len()].iter().filter_map(|a| a[ni]).collect();
            report.push("n", n, &format!("{}:accuracy@gap_um={gap}", encoder.name()), &xs);
        }
    }
    Ok(report)
}

/// Noise level for `template` (an oracle spec) at which single-frame
/// (n = 0) seam accuracy at zero gap is about `target`, found by bisection.
/// Returns `(sigma, accuracy)`.
pub fn calibrate_oracle_sigma(
    slide: &Raster,
    template: &EncoderSpec,
    target: f64,
    seeds: &[u64],
    cfg: &StitchConfig,
) -> Result<(f64, f64)> {
    let EncoderSpec::Oracle { seed: base, wavelengths, .. } = *template else {
        return Err(Error::Config("noise calibration needs an oracle encoder".into()));
    };
    let pairs: Vec<SeamPair> = par_map(seeds, |&s| SeamPair::new(slide, 0.0, s, cfg)).into_iter().collect::<Result<_>>()?;
    let accuracy = |sigma: f64| -> Result<f64> {
        let spec = EncoderSpec::Oracle { sigma, seed: base, wavelengths };
        let xs = par_map(&pairs.iter().zip(seeds).collect::<Vec<_>>(), |(p, &s)| -> Result<Option<f64>> {
            Ok(p.score(&p.encode(&reseeded(&spec, s))?, 0, cfg, false)?.before())
        });
        let xs: Vec<f64> = xs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        Ok(mean_std(&xs).0)
    };
    let (mut lo, mut hi) = (0.0, 0.25);
    let mut acc_hi = accuracy(hi)?;
    while acc_hi > target && hi < 64.0 {
        lo = hi;
        hi *= 2.0;
        acc_hi = accuracy(hi)?;
    }
    let (mut best, mut best_acc) = (hi, acc_hi);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let a = accuracy(mid)?;
        if (a - target).abs() < (best_acc - target).abs() {
            (best, best_acc) = (mid, a);
        }
        if (a - target).abs() < 0.005 {
            break;
        }
        if a > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((best, best_acc))
}

// ---------------------------------------------------------------------------
// Patch-level probes on an intact slide

fn frame_at(center: Point, tangent: Point, size: usize) -> PatchFrame {
    PatchFrame { center, tangent, normal: [-tangent[1], tangent[0]], size, boundary_index: 0, anchor: center }
}

/// Patch at `frame` with its slide position attached for the oracle.
fn probe(slide: &Raster, frame: &PatchFrame, spec: &EncoderSpec) -> Patch {
    let mut p = if spec.needs_pixels() {
        extract(slide, frame)
    } else {
        Patch { frame: *frame, channels: slide.channels, pixels: Vec::new(), source_center: None }
    };
    p.source_center = Some(frame.center);
    p
}

fn square_inside(mask: &Mask, f: &PatchFrame) -> bool {
    let h = f.size as f64 / 2.0;
    [[-h, -h], [h, -h], [-h, h], [h, h], [0.0, 0.0]].iter().all(|[u, v]| {
        let p = [f.center[0] + u * f.tangent[0] + v * f.normal[0], f.center[1] + u * f.tangent[1] + v * f.normal[1]];
        mask.get_i(p[0].round() as i64, p[1].round() as i64)
    })
}

/// Cosine between two patches of the same orientation whose centres lie
/// `offset` apart along their shared tangent, as if taken from the two
/// sides of a cut at growing tangential offsets. Offset 0 compares a patch
/// with itself.
pub fn similarity_vs_offset(
    slide: &Raster,
    encoder: &EncoderSpec,
    offsets_um: &[f64],
    pairs: usize,
    seed: u64,
    cfg: &StitchConfig,
) -> Result<ExperimentReport> {
    let mask = segment_tissue(slide, &cfg.segment_options())?;
    let size = cfg.patch_size;
    let idx: Vec<usize> = (0..offsets_um.len()).collect();
    let rows = par_map(&idx, |&i| -> Result<Vec<f64>> {
        let off = offsets_um[i] / slide.mpp;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(i as u64)));
        let mut frames = Vec::new();
        for _ in 0..pairs * 500 {
            if frames.len() == pairs {
                break;
            }
            let c = [rng.random_range(0.0..slide.width as f64), rng.random_range(0.0..slide.height as f64)];
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let t = [phi.cos(), phi.sin()];
            let a = frame_at(c, t, size);
            let b = frame_at([c[0] + off * t[0], c[1] + off * t[1]], t, size);
            if square_inside(&mask, &a) && square_inside(&mask, &b) {
                frames.push((a, b));
            }
        }
        let spec = reseeded(encoder, seed);
        let patches: Vec<Patch> = frames.iter().flat_map(|(a, b)| [probe(slide, a, &spec), probe(slide, b, &spec)]).collect();
        let feats = encode_patches(&spec, &patches, cfg.workdir.as_deref())?;
        Ok(feats.chunks(2).map(|p| p[0].cosine(&p[1])).collect())
    });
    let mut report = ExperimentReport::new("similarity-vs-offset");
    for (off, r) in offsets_um.iter().zip(rows) {
        report.push("offset_um", off, &format!("{}:cosine", encoder.name()), &r?);
    }
    Ok(report)
}

/// `(cos, sin)` of an angle in degrees, exact at quarter turns.
fn turn(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    match d {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let (s, c) = d.to_radians().sin_cos();
            (c, s)
        }
    }
}

/// Interior patches re-encoded under in-plane rotation: cosine of each
/// rotated patch with its unrotated self and with its four one-patch
/// neighbours.
pub fn rotation_invariance_sweep(
    slide: &Raster,
    encoder: &EncoderSpec,
    step_deg: f64,
    patches: usize,
    seed: u64,
    cfg: &StitchConfig,
) -> Result<ExperimentReport> {
    if !(step_deg > 0.0) {
        return Err(Error::Config("rotation step must be > 0".into()));
    }
    let mask = segment_tissue(slide, &cfg.segment_options())?;
    let size = cfg.patch_size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::new();
    for _ in 0..patches * 500 {
        if centers.len() == patches {
            break;
        }
        // half-integer centres put unrotated samples on pixel centres
        let c = [rng.random_range(0..slide.width) as f64 + 0.5, rng.random_range(0..slide.height) as f64 + 0.5];
        let reach = 1.75 * s;
        let ring = (0..32).all(|k| {
            let a = k as f64 * std::f64::consts::TAU / 32.0;
            [reach, 0.5 * reach].iter().all(|r| mask.get_i((c[0] + r * a.cos()) as i64, (c[1] + r * a.sin()) as i64))
        });
        if ring && mask.get_i(c[0] as i64, c[1] as i64) {
            centers.push(c);
        }
    }
    let spec = reseeded(encoder, seed);
    let encode_one = |f: &PatchFrame| encode_patches(&spec, &[probe(slide, f, &spec)], None).map(|mut v| v.remove(0));
    let refs = par_map(&centers, |&c| -> Result<(FeatureVector, Vec<FeatureVector>)> {
        let me = encode_one(&frame_at(c, [1.0, 0.0], size))?;
        let nbrs = [[s, 0.0], [-s, 0.0], [0.0, s], [0.0, -s]]
            .iter()
            .map(|d| encode_one(&frame_at([c[0] + d[0], c[1] + d[1]], [1.0, 0.0], size)))
            .collect::<Result<Vec<_>>>()?;
        Ok((me, nbrs))
    });
    let refs: Vec<_> = refs.into_iter().collect::<Result<_>>()?;
    let steps = (360.0 / step_deg).ceil() as usize;
    let mut report = ExperimentReport::new("rotation");
    for k in 0..steps {
        let theta = k as f64 * step_deg;
        if theta >= 360.0 {
            break;
        }
        let (co, si) = turn(theta);
        let rows = par_map(&centers.iter().zip(&refs).collect::<Vec<_>>(), |(c, (me, nbrs))| -> Result<(f64, Vec<f64>)> {
            let rot = encode_one(&frame_at(**c, [co, si], size))?;
            Ok((rot.cosine(me), nbrs.iter().map(|n| rot.cosine(n)).collect()))
        });
        let rows: Vec<(f64, Vec<f64>)> = rows.into_iter().collect::<Result<_>>()?;
        let own: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let nb: Vec<f64> = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
        report.push("theta_deg", theta, &format!("{}:self", encoder.name()), &own);
        report.push("theta_deg", theta, &format!("{}:neighbor", encoder.name()), &nb);
    }
    Ok(report)
}

/// Cosine between the patch at the tissue centroid and patches on a grid
/// over the tissue: `(x, y, cosine)` in slide pixels.
pub fn similarity_map(slide: &Raster, encoder: &EncoderSpec, step_px: usize, cfg: &StitchConfig) -> Result<Vec<(f64, f64, f64)>> {
    let mask = segment_tissue(slide, &cfg.segment_options())?;
    let c = mask.centroid().ok_or(Error::NoTissue)?;
    let spec = reseeded(encoder, cfg.seed);
    let size = cfg.patch_size;
    let center = encode_patches(&spec, &[probe(slide, &frame_at(c, [1.0, 0.0], size), &spec)], None)?.remove(0);
    let step = step_px.max(1);
    let grid: Vec<Point> = (0..slide.height)
        .step_by(step)
        .flat_map(|y| (0..slide.width).step_by(step).map(move |x| [x as f64, y as f64]))
        .filter(|p| mask.get(p[0] as usize, p[1] as usize))
        .collect();
    let out = par_map(&grid, |p| -> Result<(f64, f64, f64)> {
        let f = encode_patches(&spec, &[probe(slide, &frame_at(*p, [1.0, 0.0], size), &spec)], None)?.remove(0);
        Ok((p[0], p[1], f.cosine(&center)))
    });
    out.into_iter().collect()
}

pub fn write_similarity_map(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut s = String::from("x,y,cosine\n");
    for (x, y, c) in rows {
        s.push_str(&format!("{x},{y},{c:.6}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Candidate matches of a halves split before and after alignment, as
/// `matches.csv` and `inliers.csv` in `dir`. Returns the pair's score.
pub fn dump_pair_matches(slide: &Raster, gap_um: f64, encoder: &EncoderSpec, cfg: &StitchConfig, dir: &Path) -> Result<PairScore> {
    let pair = SeamPair::new(slide, gap_um, cfg.seed, cfg)?;
    let spec = reseeded(encoder, cfg.seed);
    let score = pair.score(&pair.encode(&spec)?, cfg.neighborhood, &StitchConfig { encoder: spec, ..cfg.clone() }, true)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, ms: &[CandidateMatch]| -> Result<()> {
        let path = dir.join(name);
        let mut buf = Vec::new();
        write_matches_csv(&mut buf, ms).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
    };
    write("matches.csv", &score.matches)?;
    let kept: Vec<CandidateMatch> =
        score.matches.iter().zip(&score.inlier_mask).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
    write("inliers.csv", &kept)?;
    Ok(score)
}

// ---------------------------------------------------------------------------
// End-to-end experiments

/// Boundary-match rate of full stitches of synthetic slides, one slide per
/// seed, for each encoder.
pub fn boundary_match_experiment(
    slide_size: usize,
    template: &FragmentationSpec,
    encoders: &[EncoderSpec],
    seeds: &[u64],
    cfg: &StitchConfig,
    tol: PoseTolerance,
) -> Result<ExperimentReport> {
    let rows = par_map(seeds, |&seed| -> Result<Vec<(f64, Option<f64>)>> {
        let slide = generate_synthetic_slide(seed, slide_size, &SlideStyle { mpp: cfg.processing_mpp, ..Default::default() })?;
        let spec = FragmentationSpec { seed, patch_size: cfg.patch_size, ..template.clone() };
        encoders
            .iter()
            .map(|e| {
                let c = StitchConfig { encoder: reseeded(e, seed), seed, ..cfg.clone() };
                let t = run_trial(&slide.image, &spec, &c, tol)?;
                let mad = if spec.gap_um == 0.0 && c.output_mpp == slide.image.mpp {
                    Some(covered_abs_diff(&t.outcome, &t.gt, &slide.image)?)
                } else {
                    None
                };
                Ok((t.rate, mad))
            })
            .collect()
    });
    let rows: Vec<Vec<(f64, Option<f64>)>> = rows.into_iter().collect::<Result<_>>()?;
    let mut report = ExperimentReport::new("boundary-match");
    report.push("criterion", "pose_tolerance_deg", "threshold", &[tol.degrees]);
    report.push("criterion", "pose_tolerance_px", "threshold", &[tol.px]);
    for (ei, e) in encoders.iter().enumerate() {
        let rate: Vec<f64> = rows.iter().map(|r| r[ei].0).collect();
        report.push("encoder", e.name(), "boundary_match_rate", &rate);
        let mad: Vec<f64> = rows.iter().filter_map(|r| r[ei].1).collect();
        if !mad.is_empty() {
            report.push("encoder", e.name(), "covered_abs_diff", &mad);
        }
    }
    Ok(report)
}

/// Boundary-match rate (and optionally wall time) when the same tissue is
/// processed at different resolutions. The slide is regenerated at each
/// resolution so texture scales stay physical; patches stay `patch_size`
/// pixels, so coarser resolutions see more tissue per patch.
#[allow(clippy::too_many_arguments)]
pub fn resolution_sweep(
    extent_um: f64,
    mpps: &[f64],
    template: &FragmentationSpec,
    encoder: &EncoderSpec,
    seeds: &[u64],
    cfg: &StitchConfig,
    tol: PoseTolerance,
    timing: bool,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("resolution");
    for &mpp in mpps {
        if !(mpp > 0.0) {
            return Err(Error::Config("resolutions must be > 0".into()));
        }
        let size = (extent_um / mpp).round() as usize;
        let mut rates = Vec::new();
        let mut secs = Vec::new();
        for &seed in seeds {
            let slide = generate_synthetic_slide(seed, size, &SlideStyle { mpp, ..Default::default() })?;
            let spec = FragmentationSpec { seed, patch_size: cfg.patch_size, ..template.clone() };
            let c = StitchConfig { encoder: reseeded(encoder, seed), seed, processing_mpp: mpp, output_mpp: mpp, ..cfg.clone() };
            let t0 = Instant::now();
            let trial = run_trial(&slide.image, &spec, &c, tol)?;
            secs.push(t0.elapsed().as_secs_f64());
            rates.push(trial.rate);
        }
        report.push("mpp", mpp, &format!("{}:boundary_match_rate", encoder.name()), &rates);
        if timing {
            report.push("mpp", mpp, "wall_seconds", &secs);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::oracle_code;
    use crate::mosaic::{ManifestFragment, StitchManifest};

    fn slide(seed: u64, size: usize) -> SyntheticSlide {
        generate_synthetic_slide(seed, size, &SlideStyle::default()).unwrap()
    }

    #[test]
    fn same_seed_same_slide() {
        let (a, b) = (slide(3, 256), slide(3, 256));
        assert_eq!(a.image.pixels, b.image.pixels);
        assert_ne!(a.image.pixels, slide(4, 256).image.pixels);
    }

    #[test]
    fn tissue_fraction_in_range() {
        for seed in 0..8 {
            let s = slide(seed, 256);
            let f = s.mask.count() as f64 / (256.0 * 256.0);
            assert!((0.3..=0.8).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn otsu_recovers_silhouette() {
        for seed in [1, 2, 9] {
            let s = slide(seed, 512);
            let m = segment_tissue(&s.image, &SegmentOptions::default()).unwrap();
            let iou = m.iou(&s.mask);
            assert!(iou >= 0.95, "seed {seed}: IoU {iou}");
        }
    }

    #[test]
    fn zero_gap_partition_retiles_slide() {
        let s = slide(5, 512);
        let spec = FragmentationSpec { layout: Layout::Grid { rows: 2, cols: 2 }, ..Default::default() };
        let (images, gt) = fragment_slide(&s.image, &spec).unwrap();
        let mut hits = vec![0u8; 512 * 512];
        for (img, f) in images.iter().zip(&gt.fragments) {
            for v in 0..img.height {
                for u in 0..img.width {
                    let p = f.pose.apply([u as f64, v as f64]);
                    let (x, y) = (p[0].round(), p[1].round());
                    assert!((p[0] - x).abs() < 1e-9 && (p[1] - y).abs() < 1e-9);
                    let [x0, y0, x1, y1] = f.cell;
                    if x < x0 || x >= x1 || y < y0 || y >= y1 {
                        assert!(img.pixel(u, v).iter().all(|&c| c == 255), "margin must be blank");
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    assert_eq!(img.pixel(u, v), s.image.pixel(x, y));
                    hits[y * 512 + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn seam_counts() {
        let s = slide(1, 1024);
        for (layout, want) in [
            (Layout::Halves, 1),
            (Layout::Quadrants, 4),
            (Layout::Grid { rows: 2, cols: 3 }, 7),
            (Layout::Grid { rows: 3, cols: 4 }, 17),
        ] {
            let (r, c) = layout.shape();
            assert_eq!(layout.seam_count(), r * (c - 1) + c * (r - 1));
            let spec = FragmentationSpec { layout, patch_size: 64, ..Default::default() };
            let (_, gt) = fragment_slide(&s.image, &spec).unwrap();
            assert_eq!(gt.seams.len(), want, "{layout:?}");
        }
    }

    #[test]
    fn adjacency_is_symmetric() {
        let s = slide(2, 1024);
        let spec = FragmentationSpec { layout: Layout::Grid { rows: 3, cols: 3 }, patch_size: 64, ..Default::default() };
        let (_, gt) = fragment_slide(&s.image, &spec).unwrap();
        let adj = gt.adjacency();
        for (i, ns) in adj.iter().enumerate() {
            for &j in ns {
                assert!(adj[j].contains(&i));
            }
        }
        // centre cell touches its four edge neighbours, not the diagonals
        let mut centre = adj[4].clone();
        centre.sort();
        assert_eq!(centre, vec![1, 3, 5, 7]);
    }

    #[test]
    fn too_small_slide_rejected() {
        let s = slide(1, 256);
        assert!(fragment_slide(&s.image, &FragmentationSpec::default()).is_err());
    }

    #[test]
    fn ground_truth_round_trips() {
        let s = slide(1, 512);
        let spec = FragmentationSpec { gap_um: 10.0, edge_trim: (0.0, 0.2), rotation_deg: 30.0, translation_px: 5.0, patch_size: 64, seed: 3, ..Default::default() };
        let (_, gt) = fragment_slide(&s.image, &spec).unwrap();
        assert_eq!(GroundTruth::from_json(&gt.to_json()).unwrap(), gt);
    }

    fn manifest_from(gt: &GroundTruth, global: RigidTransform, groups: &[usize]) -> StitchManifest {
        let fragments = gt
            .fragments
            .iter()
            .zip(groups)
            .map(|(f, &group)| {
                let p = global.compose(&f.pose);
                ManifestFragment { id: f.id.clone(), theta_deg: p.theta.to_degrees(), tx: p.translation[0], ty: p.translation[1], merge_step: Some(1), group }
            })
            .collect();
        let config = StitchConfig::default();
        StitchManifest {
            fragments,
            seed: 0,
            encoder: config.encoder.clone(),
            config,
            merges: Vec::new(),
            complete: true,
            output_mpp: gt.slide_mpp,
            composite_width: 1,
            composite_height: 1,
        }
    }

    #[test]
    fn perfect_manifest_scores_100_and_split_scores_0() {
        let s = slide(4, 1024);
        let spec = FragmentationSpec { rotation_deg: 180.0, translation_px: 20.0, seed: 8, ..Default::default() };
        let (_, gt) = fragment_slide(&s.image, &spec).unwrap();
        let g = RigidTransform::new(0.7, [100.0, -30.0]);
        let tol = PoseTolerance::default();
        assert_eq!(score_boundary_matches(&manifest_from(&gt, g, &[0, 0, 0, 0]), &gt, tol), 100.0);
        assert_eq!(score_boundary_matches(&manifest_from(&gt, g, &[0, 1, 2, 3]), &gt, tol), 0.0);
        // one fragment placed a full patch off its true pose: its two seams fail
        let mut m = manifest_from(&gt, g, &[0, 0, 0, 0]);
        m.fragments[3].tx += 2.0 * 224.0 + 1.0;
        assert_eq!(score_boundary_matches(&m, &gt, tol), 50.0);
    }

    #[test]
    fn report_csv_layout() {
        let mut r = ExperimentReport::new("demo");
        r.push("gap_um", 0.0, "acc", &[1.0, 0.5]);
        r.push("gap_um", 250, "acc", &[]);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "demo,gap_um,0,acc,0.750000,0.353553,2");
        assert_eq!(lines[2], "demo,gap_um,250,acc,NaN,0.000000,0");
        assert!(r.find("gap_um", "0", "acc").is_some());
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn quarter_turns_are_exact() {
        assert_eq!(turn(0.0), (1.0, 0.0));
        assert_eq!(turn(90.0), (0.0, 1.0));
        assert_eq!(turn(180.0), (-1.0, 0.0));
        assert_eq!(turn(-90.0), (0.0, -1.0));
    }

    #[test]
    fn half_turn_ncc_equals_reversed_patch() {
        let s = slide(6, 512);
        let spec = EncoderSpec::ncc(64);
        let c = [256.5, 256.5];
        let (co, si) = turn(180.0);
        let upright = extract(&s.image, &frame_at(c, [1.0, 0.0], 64));
        let rotated = extract(&s.image, &frame_at(c, [co, si], 64));
        // a half turn about a pixel-grid centre reverses the pixel order
        let ch = upright.channels;
        let mut reversed = upright.clone();
        for (i, px) in upright.pixels.chunks(ch).rev().enumerate() {
            reversed.pixels[i * ch..(i + 1) * ch].copy_from_slice(px);
        }
        assert_eq!(rotated.pixels, reversed.pixels);
        let f = encode_patches(&spec, &[rotated, reversed, upright], None).unwrap();
        assert!((f[0].cosine(&f[1]) - 1.0).abs() < 1e-6);
        assert!(f[0].cosine(&f[2]) < 0.99);
    }

    #[test]
    fn zero_offset_is_self_similar() {
        let s = slide(2, 1024);
        let cfg = StitchConfig::default();
        for enc in [EncoderSpec::Baseline { grid: 8 }, EncoderSpec::ncc(224), EncoderSpec::oracle(0.0, 1)] {
            let r = similarity_vs_offset(&s.image, &enc, &[0.0, 300.0], 10, 1, &cfg).unwrap();
            let rows = r.series(&format!("{}:cosine", enc.name()));
            assert_eq!(rows[0].n, 10);
            assert!((rows[0].mean - 1.0).abs() < 1e-5, "{}: {}", enc.name(), rows[0].mean);
            assert!(rows[1].mean < rows[0].mean);
        }
    }

    #[test]
    fn rotation_sweep_self_similarity_at_zero() {
        let s = slide(2, 1024);
        let cfg = StitchConfig { patch_size: 96, ..Default::default() };
        let r = rotation_invariance_sweep(&s.image, &EncoderSpec::Baseline { grid: 8 }, 90.0, 4, 3, &cfg).unwrap();
        let own = r.series("baseline:self");
        assert_eq!(own.len(), 4);
        assert!((own[0].mean - 1.0).abs() < 1e-5);
        assert_eq!(r.series("baseline:neighbor")[0].n, 16);
    }

    #[test]
    fn oracle_seam_matches_are_correct_at_zero_gap() {
        let s = slide(7, 1024);
        let cfg = StitchConfig::default();
        let pair = SeamPair::new(&s.image, 0.0, 1, &cfg).unwrap();
        assert!(pair.seam_frames.len() >= 5);
        let score = pair.score(&pair.encode(&EncoderSpec::oracle(0.0, 1)).unwrap(), 3, &cfg, true).unwrap();
        assert_eq!(score.correct_before, score.seam_frames);
        assert!(score.inliers > 0 && score.correct_after == score.inliers);
    }

    #[test]
    fn reseeding_changes_only_oracle_noise() {
        let a = reseeded(&EncoderSpec::oracle(0.5, 1), 2);
        let b = reseeded(&EncoderSpec::oracle(0.5, 1), 3);
        assert_ne!(a, b);
        assert_eq!(reseeded(&EncoderSpec::ncc(64), 2), EncoderSpec::ncc(64));
        let EncoderSpec::Oracle { seed, .. } = a else { panic!() };
        assert_ne!(oracle_code([1.0, 2.0], 0.5, seed, [400.0, 1500.0]), oracle_code([1.0, 2.0], 0.5, 1, [400.0, 1500.0]));
    }
}
