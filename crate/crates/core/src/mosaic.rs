//! The stitch loop: pick a moving fragment, pair it, align it, merge it,
//! repeat until one fragment remains; then render the whole-mount image.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{fit_rigid, ransac_rigid, residual, sample_indices, RansacConfig};
use crate::contour::{trace_boundary, BoundaryChain};
use crate::encoder::{encode_patches, EncoderSpec, FeatureVector};
use crate::error::{Error, Result};
use crate::geometry::{add, dist, scale, Point, RigidTransform};
use crate::matching::{build_stacks, locate_match, rank_fixed, CandidateMatch, ContextStack, FragmentStacks, Pairing};
use crate::parallel::par_map;
use crate::patchex::{extract, plan_frames, Patch, PatchFrame};
use crate::raster::{self, close, fill_holes, load_image, resample, round_u8, segment_tissue, Mask, Polarity, Raster, SegmentOptions};

/// Everything that controls a stitch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    /// Resolution for segmentation, matching and alignment.
    pub processing_mpp: f64,
    /// Resolution of the rendered composite.
    pub output_mpp: f64,
    pub patch_size: usize,
    /// Arc length between consecutive patch anchors.
    pub stride: f64,
    /// Context-stack radius.
    pub neighborhood: usize,
    pub encoder: EncoderSpec,
    pub ransac: RansacConfig,
    /// Drives moving-fragment selection.
    pub seed: u64,
    pub min_component_area: usize,
    pub polarity: Polarity,
    /// Shrink the RANSAC inlier threshold after the consensus step.
    pub refine: bool,
    pub refine_threshold: f64,
    /// Closing radius used to weld merged masks.
    pub merge_close_radius: usize,
    pub canvas_margin: usize,
    pub max_canvas_pixels: u64,
    #[serde(skip)]
    pub workdir: Option<PathBuf>,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            processing_mpp: 1.0,
            output_mpp: 0.25,
            patch_size: 224,
            stride: 112.0,
            neighborhood: 3,
            encoder: EncoderSpec::default(),
            ransac: RansacConfig::default(),
            seed: 42,
            min_component_area: 1024,
            polarity: Polarity::Auto,
            refine: true,
            refine_threshold: 28.0,
            merge_close_radius: 8,
            canvas_margin: 16,
            max_canvas_pixels: 2_000_000_000,
            workdir: None,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.processing_mpp, self.output_mpp, self.stride, self.refine_threshold];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.patch_size < 2 {
            return Err(Error::Config("resolutions, patch size, stride and thresholds must be positive".into()));
        }
        self.encoder.validate()?;
        self.ransac.validate()?;
        if let Some(ps) = self.encoder.patch_size() {
            if ps != self.patch_size {
                return Err(Error::Config(format!("encoder expects {ps}-px patches, config has {}", self.patch_size)));
            }
        }
        Ok(())
    }

    pub(crate) fn segment_options(&self) -> SegmentOptions {
        SegmentOptions { min_component_area: self.min_component_area, polarity: self.polarity }
    }
}

/// One input fragment, prepared for matching.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub id: String,
    /// Processing-resolution image.
    pub image: Raster,
    /// Source image used for the final render.
    pub full_res: Raster,
    pub mask: Mask,
    pub chain: BoundaryChain,
    pub frames: Vec<PatchFrame>,
    pub features: Vec<FeatureVector>,
    /// Fragment → mosaic, processing pixels.
    pub pose: RigidTransform,
    /// Fragment → source slide (processing pixels), when known. Only the
    /// oracle encoder reads it.
    pub slide_pose: Option<RigidTransform>,
}

struct Layout {
    mask: Mask,
    chain: BoundaryChain,
    frames: Vec<PatchFrame>,
    features: Vec<FeatureVector>,
}

/// Ground-truth source-slide position of a frame's centre, if known.
type SourceLocator<'a> = dyn Fn(&PatchFrame) -> Option<Point> + 'a;

fn layout(image: &Raster, mask: Mask, source: &SourceLocator, cfg: &StitchConfig) -> Result<Layout> {
    let chain = trace_boundary(&mask)?;
    let frames = plan_frames(&chain, &mask, cfg.patch_size, cfg.stride);
    if frames.is_empty() {
        return Err(Error::FragmentTooSmall);
    }
    let patches: Vec<Patch> = frames
        .iter()
        .map(|f| {
            let mut p = if cfg.encoder.needs_pixels() {
                extract(image, f)
            } else {
                Patch { frame: *f, channels: image.channels, pixels: Vec::new(), source_center: None }
            };
            p.source_center = source(f);
            p
        })
        .collect();
    let features = encode_patches(&cfg.encoder, &patches, cfg.workdir.as_deref())?;
    Ok(Layout { mask, chain, frames, features })
}

/// Load, resample, segment, trace, sample and encode one fragment.
pub fn prepare_fragment(path: &Path, mpp_override: Option<f64>, cfg: &StitchConfig) -> Result<Fragment> {
    let raster = load_image(path, mpp_override)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
    prepare_fragment_from_raster(id, raster, None, cfg)
}

/// Prepare several files in parallel; ids come from the file stems.
pub fn prepare_fragments(paths: &[PathBuf], mpp_override: Option<f64>, cfg: &StitchConfig) -> Result<Vec<Fragment>> {
    par_map(paths, |p| {
        let mut c = cfg.clone();
        if let Some(w) = &cfg.workdir {
            let sub = w.join(p.file_stem().unwrap_or_default());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            c.workdir = Some(sub);
        }
        prepare_fragment(p, mpp_override, &c)
    })
    .into_iter()
    .collect()
}

/// As [`prepare_fragment`] for an in-memory raster. `slide_pose` maps
/// processing-resolution fragment pixels to source-slide pixels.
pub fn prepare_fragment_from_raster(
    id: impl Into<String>,
    raster: Raster,
    slide_pose: Option<RigidTransform>,
    cfg: &StitchConfig,
) -> Result<Fragment> {
    cfg.validate()?;
    let image = resample(&raster, cfg.processing_mpp)?;
    let mask = segment_tissue(&image, &cfg.segment_options())?;
    let l = layout(&image, mask, &|f: &PatchFrame| slide_pose.map(|g| g.apply(f.center)), cfg)?;
    Ok(Fragment {
        id: id.into(),
        image,
        full_res: raster,
        mask: l.mask,
        chain: l.chain,
        frames: l.frames,
        features: l.features,
        pose: RigidTransform::identity(),
        slide_pose,
    })
}

/// Per-fragment entry of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFragment {
    pub id: String,
    /// Pose mapping fragment pixels (at output resolution) into the composite.
    pub theta_deg: f64,
    pub tx: f64,
    pub ty: f64,
    /// Merge (1-based) that first placed this fragment in a composite.
    pub merge_step: Option<usize>,
    /// Connected group in a partial mosaic; 0 is the rendered group.
    pub group: usize,
}

impl ManifestFragment {
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.theta_deg.to_radians(), [self.tx, self.ty])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub step: usize,
    pub moving: Vec<String>,
    pub fixed: Vec<String>,
    pub pair_score: f64,
    pub candidates: usize,
    pub inliers: usize,
    /// Moving → fixed canvas, processing pixels.
    pub theta_deg: f64,
    pub tx: f64,
    pub ty: f64,
    /// Fixed partners tried and rejected before this merge.
    pub rejected: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchManifest {
    pub fragments: Vec<ManifestFragment>,
    pub seed: u64,
    pub encoder: EncoderSpec,
    pub config: StitchConfig,
    pub merges: Vec<MergeRecord>,
    pub complete: bool,
    pub output_mpp: f64,
    pub composite_width: usize,
    pub composite_height: usize,
}

impl StitchManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Decode(format!("manifest: {e}")))
    }

    pub fn fragment(&self, id: &str) -> Option<&ManifestFragment> {
        self.fragments.iter().find(|f| f.id == id)
    }
}

#[derive(Debug, Clone)]
pub struct StitchOutcome {
    pub composite: Raster,
    pub manifest: StitchManifest,
    /// Pose of every input fragment in its group's processing frame.
    pub processing_poses: Vec<RigidTransform>,
    pub groups: Vec<usize>,
    /// Composite pixels showing fragment tissue.
    pub covered: Mask,
}

/// A pool entry: a fragment or a composite of several.
struct Working {
    id: usize,
    image: Raster,
    slide_pose: Option<RigidTransform>,
    layout: Layout,
    stacks: Option<Vec<ContextStack>>,
    /// (input index, input → this canvas), in render precedence order.
    members: Vec<(usize, RigidTransform)>,
}

impl Working {
    fn new(id: usize, image: Raster, slide_pose: Option<RigidTransform>, layout: Layout, members: Vec<(usize, RigidTransform)>, n: usize) -> Self {
        let stacks = build_stacks(&layout.features, n).ok();
        Self { id, image, slide_pose, layout, stacks, members }
    }
}

impl Working {
    fn side<'a>(&'a self, stacks: &'a [ContextStack]) -> BoundarySide<'a> {
        BoundarySide { chain: &self.layout.chain, frames: &self.layout.frames, stacks }
    }
}


/// One side of a pairing: boundary, frames and their stacks.
#[derive(Clone, Copy)]
pub struct BoundarySide<'a> {
    pub chain: &'a BoundaryChain,
    pub frames: &'a [PatchFrame],
    pub stacks: &'a [ContextStack],
}

impl BoundarySide<'_> {
    /// Tissue edge at arc length `along` past frame `k`'s start. Boundary
    /// pixels sit half a pixel inside the edge, so step back along the
    /// inward normal.
    fn edge_point(&self, k: usize, along: f64) -> Point {
        let f = &self.frames[k];
        let p = self.chain.interpolate_at_arclength(f.boundary_index, along);
        [p[0] - 0.5 * f.normal[0], p[1] - 0.5 * f.normal[1]]
    }

    fn arc(&self, a: usize, b: usize) -> f64 {
        self.chain.arc_between(self.frames[a].boundary_index, self.frames[b].boundary_index)
    }
}

/// Point pairs derived from a match set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Correspondences {
    /// Moving boundary points.
    pub src: Vec<Point>,
    /// Fixed boundary points.
    pub dst: Vec<Point>,
    /// Fixed frame each pair was located at.
    pub fixed_frame: Vec<usize>,
    /// Stack similarity of the underlying match.
    pub similarity: Vec<f64>,
}

/// The boundary point at the middle of each moving frame against the fixed
/// boundary point located by the sub-frame similarity peak.
pub fn correspondences(moving: BoundarySide, fixed: BoundarySide, matches: &[CandidateMatch]) -> Correspondences {
    let nf = fixed.frames.len();
    let mut out = Correspondences::default();
    for m in matches {
        let mf = &moving.frames[m.moving_index];
        out.src.push(moving.edge_point(m.moving_index, mf.size as f64 / 2.0));
        let loc = locate_match(&moving.stacks[m.moving_index], fixed.stacks, m);
        let (j, delta) = (loc.fixed_index, loc.offset);
        let half = fixed.frames[j].size as f64 / 2.0;
        out.dst.push(if delta >= 0.0 {
            fixed.edge_point(j, half + delta * fixed.arc(j, (j + 1) % nf))
        } else {
            let i = (j + nf - 1) % nf;
            fixed.edge_point(i, half + (1.0 + delta) * fixed.arc(i, j))
        });
        out.fixed_frame.push(j);
        out.similarity.push(m.similarity);
    }
    out
}

/// Result of aligning one candidate pairing.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// Moving → fixed canvas.
    pub transform: RigidTransform,
    pub inliers: Vec<bool>,
    pub pairs: Correspondences,
}

/// Fewest distinct fixed points that may define the tightened pose.
const TIGHT_MIN_POINTS: usize = 3;
/// Tight consensus thresholds, in multiples of `refine_threshold`.
const TIGHT_LADDER: [f64; 3] = [1.0, 2.0, 4.0];

/// Inliers of `model` within `tau`, best residual first, skipping any
/// whose fixed point lies within `separation` of one already kept, so a
/// fan of matches onto one spot counts once.
fn unique_inliers(model: &RigidTransform, pairs: &Correspondences, tau: f64, separation: f64) -> Vec<bool> {
    let mut cand: Vec<(f64, usize)> = pairs
        .src
        .iter()
        .zip(&pairs.dst)
        .enumerate()
        .map(|(i, (s, d))| (residual(model, *s, *d), i))
        .filter(|(r, _)| *r <= tau)
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mask = vec![false; pairs.src.len()];
    let mut kept: Vec<Point> = Vec::new();
    for (_, i) in cand {
        let d = pairs.dst[i];
        if kept.iter().all(|k| dist(*k, d) >= separation) {
            kept.push(d);
            mask[i] = true;
        }
    }
    mask
}

fn fit_mask(pairs: &Correspondences, mask: &[bool]) -> Result<RigidTransform> {
    let pick = |v: &[Point]| v.iter().zip(mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect::<Vec<_>>();
    fit_rigid(&pick(&pairs.src), &pick(&pairs.dst))
}

/// Similarity-weighted support of a mask.
fn support(pairs: &Correspondences, mask: &[bool]) -> f64 {
    mask.iter().zip(&pairs.similarity).filter(|(m, _)| **m).map(|(_, s)| s.max(0.0)).sum()
}

/// Exhaustive two-point consensus at `tau` restricted to `within`. A loose
/// inlier set often mixes exact seam points with a few that slid along the
/// seam; the exact ones agree with each other far more tightly.
fn polish(pairs: &Correspondences, within: &[bool], tau: f64, sep: f64) -> Option<(RigidTransform, Vec<bool>)> {
    let idx: Vec<usize> = (0..within.len()).filter(|&i| within[i]).collect();
    let restricted = |model: &RigidTransform| {
        let mut m = unique_inliers(model, pairs, tau, sep);
        m.iter_mut().zip(within).for_each(|(a, w)| *a &= *w);
        m
    };
    let mut best: Option<(f64, Vec<bool>)> = None;
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            let Ok(model) = fit_rigid(&[pairs.src[a], pairs.src[b]], &[pairs.dst[a], pairs.dst[b]]) else { continue };
            let mask = restricted(&model);
            if mask.iter().filter(|&&m| m).count() < TIGHT_MIN_POINTS {
                continue;
            }
            let s = support(pairs, &mask);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, mask));
            }
        }
    }
    let (_, mut mask) = best?;
    let mut model = fit_mask(pairs, &mask).ok()?;
    for _ in 0..4 {
        let next = restricted(&model);
        if next == mask || next.iter().filter(|&&m| m).count() < TIGHT_MIN_POINTS {
            break;
        }
        mask = next;
        model = fit_mask(pairs, &mask).ok()?;
    }
    Some((model, mask))
}

/// Two-point consensus at threshold `tau`. Each spot on the fixed boundary
/// backs at most one inlier and a model's support is the summed similarity
/// of its inliers. The winner is polished at the tightest of `tau / 8`,
/// `tau / 4`, `tau / 2` that still leaves enough points.
fn tight_consensus(
    pairs: &Correspondences,
    tau: f64,
    cfg: &StitchConfig,
    accept: impl Fn(&RigidTransform) -> bool,
) -> Option<(RigidTransform, Vec<bool>)> {
    let n = pairs.src.len();
    if n < 2 {
        return None;
    }
    let sep = cfg.refine_threshold;
    let mut best: Option<(f64, RigidTransform)> = None;
    for it in 0..cfg.ransac.max_iterations {
        let idx = sample_indices(cfg.ransac.seed, it, n, 2);
        if dist(pairs.dst[idx[0]], pairs.dst[idx[1]]) < sep {
            continue;
        }
        let s = [pairs.src[idx[0]], pairs.src[idx[1]]];
        let d = [pairs.dst[idx[0]], pairs.dst[idx[1]]];
        let Ok(model) = fit_rigid(&s, &d) else { continue };
        let mask = unique_inliers(&model, pairs, tau, sep);
        if mask.iter().filter(|&&m| m).count() < TIGHT_MIN_POINTS {
            continue;
        }
        let s = support(pairs, &mask);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, model));
        }
    }
    let (_, mut model) = best?;
    let mut mask = unique_inliers(&model, pairs, tau, sep);
    for div in [8.0, 4.0, 2.0] {
        if let Some(found) = polish(pairs, &mask, tau / div, sep).filter(|(m, _)| accept(m)) {
            return Some(found);
        }
    }
    model = fit_mask(pairs, &mask).ok()?;
    let mut t = tau;
    while t > tau / 8.0 {
        t /= 2.0;
        let cand = unique_inliers(&model, pairs, t, sep);
        if cand.iter().filter(|&&m| m).count() < TIGHT_MIN_POINTS {
            break;
        }
        let Ok(m) = fit_mask(pairs, &cand) else { break };
        model = m;
        mask = cand;
    }
    Some((model, mask))
}

/// Consensus on a pairing's correspondences.
///
/// The configured RANSAC runs first and must succeed. With `refine` on, a
/// tighter consensus follows: smooth encoders map off-seam frames
/// many-to-one onto the seam, and at a coarse threshold such fans can
/// outvote the true seam, while a short seam may carry fewer frames than
/// the coarse minimum. The tight search lets each spot on the fixed
/// boundary back a single correspondence and widens its threshold from
/// `refine_threshold` until a model is found that is also an acceptable
/// coarse consensus. If none is, the pairing is rejected.
pub fn estimate_alignment(pairs: Correspondences, cfg: &StitchConfig) -> Result<Alignment> {
    let coarse = ransac_rigid(&pairs.src, &pairs.dst, &cfg.ransac)?;
    if !cfg.refine {
        return Ok(Alignment { transform: coarse.model, inliers: coarse.inliers, pairs });
    }
    let coarse_support = |t: &RigidTransform| {
        pairs.src.iter().zip(&pairs.dst).filter(|(s, d)| residual(t, **s, **d) <= cfg.ransac.inlier_threshold).count()
    };
    for k in TIGHT_LADDER {
        let accept = |t: &RigidTransform| coarse_support(t) >= cfg.ransac.min_inliers;
        if let Some((transform, inliers)) = tight_consensus(&pairs, cfg.refine_threshold * k, cfg, accept) {
            if accept(&transform) {
                return Ok(Alignment { transform, inliers, pairs });
            }
        }
    }
    Err(Error::NoConsensus { best: distinct_points(&pairs, cfg.refine_threshold), required: TIGHT_MIN_POINTS })
}

/// Fixed points at least `separation` apart, counted greedily.
fn distinct_points(pairs: &Correspondences, separation: f64) -> usize {
    let mut kept: Vec<Point> = Vec::new();
    for d in &pairs.dst {
        if kept.iter().all(|k| dist(*k, *d) >= separation) {
            kept.push(*d);
        }
    }
    kept.len()
}

fn align_pair(moving: &Working, fixed: &Working, pairing: &Pairing, cfg: &StitchConfig) -> Result<Alignment> {
    let (Some(ms), Some(fs)) = (&moving.stacks, &fixed.stacks) else {
        return Err(Error::FragmentTooSmall);
    };
    estimate_alignment(correspondences(moving.side(ms), fixed.side(fs), &pairing.matches), cfg)
}

fn corners(w: usize, h: usize) -> [Point; 4] {
    let (w, h) = (w as f64 - 1.0, h as f64 - 1.0);
    [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

fn check_budget(w: usize, h: usize, budget: u64) -> Result<()> {
    if (w as u64).saturating_mul(h as u64) > budget {
        return Err(Error::CanvasTooLarge { width: w, height: h, budget });
    }
    Ok(())
}

/// Composite `moving` onto `fixed`'s canvas (grown as needed). Fixed tissue
/// wins where both cover a pixel.
fn merge(
    fixed: &Working,
    moving: &Working,
    t: &RigidTransform,
    new_id: usize,
    pool: &[Fragment],
    cfg: &StitchConfig,
) -> Result<Working> {
    let (fw, fh) = (fixed.image.width, fixed.image.height);
    let mut lo = [0.0f64, 0.0];
    let mut hi = [fw as f64 - 1.0, fh as f64 - 1.0];
    for c in corners(moving.image.width, moving.image.height) {
        let p = t.apply(c);
        lo = [lo[0].min(p[0]), lo[1].min(p[1])];
        hi = [hi[0].max(p[0]), hi[1].max(p[1])];
    }
    let off = [(-lo[0].floor()) as usize, (-lo[1].floor()) as usize];
    let w = hi[0].ceil() as usize + off[0] + 1;
    let h = hi[1].ceil() as usize + off[1] + 1;
    check_budget(w, h, cfg.max_canvas_pixels)?;

    let ch = fixed.image.channels.max(moving.image.channels);
    let mut image = Raster::filled(w, h, ch, 255, fixed.image.mpp);
    let mut union = Mask::new(w, h);
    for y in 0..fh {
        for x in 0..fw {
            let src = fixed.image.pixel(x, y);
            let dst = image.pixel_mut(x + off[0], y + off[1]);
            copy_channels(src, dst);
            if fixed.layout.mask.get(x, y) {
                union.set(x + off[0], y + off[1], true);
            }
        }
    }
    let to_canvas = RigidTransform::from_translation([off[0] as f64, off[1] as f64]).compose(t);
    let inv = to_canvas.inverse();
    let mut buf = [0f32; 3];
    let mut box_lo = [f64::MAX, f64::MAX];
    let mut box_hi = [f64::MIN, f64::MIN];
    for c in corners(moving.image.width, moving.image.height) {
        let p = to_canvas.apply(c);
        box_lo = [box_lo[0].min(p[0]), box_lo[1].min(p[1])];
        box_hi = [box_hi[0].max(p[0]), box_hi[1].max(p[1])];
    }
    let (x0, y0) = (box_lo[0].floor().max(0.0) as usize, box_lo[1].floor().max(0.0) as usize);
    let (x1, y1) = ((box_hi[0].ceil() as usize + 1).min(w), (box_hi[1].ceil() as usize + 1).min(h));
    for y in y0..y1 {
        for x in x0..x1 {
            if union.get(x, y) {
                continue;
            }
            let p = inv.apply([x as f64, y as f64]);
            if !moving.layout.mask.get_i(p[0].round() as i64, p[1].round() as i64) {
                continue;
            }
            moving.image.sample_bilinear(p[0], p[1], 255, &mut buf);
            let px = image.pixel_mut(x, y);
            write_channels(&buf[..moving.image.channels], px);
            union.set(x, y, true);
        }
    }
    let mask = fill_holes(&close(&union, cfg.merge_close_radius));
    let slide_pose = fixed
        .slide_pose
        .map(|g| g.compose(&RigidTransform::from_translation([-(off[0] as f64), -(off[1] as f64)])));
    let shift = RigidTransform::from_translation([off[0] as f64, off[1] as f64]);
    let members: Vec<(usize, RigidTransform)> = fixed
        .members
        .iter()
        .map(|(i, p)| (*i, shift.compose(p)))
        .chain(moving.members.iter().map(|(i, p)| (*i, to_canvas.compose(p))))
        .collect();
    let l = layout(&image, mask, &|f: &PatchFrame| member_source(f, &members, pool), cfg)?;
    Ok(Working::new(new_id, image, slide_pose, l, members, cfg.neighborhood))
}

/// Source-slide position of a composite frame's centre, taken from the
/// member whose tissue lies under it. Members were placed by estimated
/// poses, so a single canvas-wide pose would be off by whatever gap each
/// merge closed. Centres off every member's tissue fall back to the member
/// owning the nearest tissue along the inward normal, then to the first.
fn member_source(f: &PatchFrame, members: &[(usize, RigidTransform)], pool: &[Fragment]) -> Option<Point> {
    let owner = |c: Point| {
        members.iter().find(|(i, place)| {
            let q = place.inverse().apply(c);
            pool[*i].mask.get_i(q[0].round() as i64, q[1].round() as i64)
        })
    };
    let depth = f.size as f64 / 2.0 + 10.0;
    let (i, place) = owner(f.center).or_else(|| {
        let steps = (depth / 4.0).ceil() as usize;
        (1..=steps).find_map(|k| owner(add(f.anchor, scale(f.normal, (4.0 * k as f64).min(depth)))))
    }).or(members.first())?;
    Some(pool[*i].slide_pose?.apply(place.inverse().apply(f.center)))
}

fn copy_channels(src: &[u8], dst: &mut [u8]) {
    if src.len() == dst.len() {
        dst.copy_from_slice(src);
    } else {
        dst.fill(src[0]);
    }
}

fn write_channels(vals: &[f32], dst: &mut [u8]) {
    if vals.len() == dst.len() {
        for (d, v) in dst.iter_mut().zip(vals) {
            *d = round_u8(*v);
        }
    } else {
        dst.fill(round_u8(vals[0]));
    }
}

/// Run the merge loop over `pool` and render the result.
pub fn stitch(pool: Vec<Fragment>, cfg: &StitchConfig) -> Result<StitchOutcome> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let n_inputs = pool.len();
    let mut working: Vec<Working> = pool
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let l = Layout { mask: f.mask.clone(), chain: f.chain.clone(), frames: f.frames.clone(), features: f.features.clone() };
            Working::new(i, f.image.clone(), f.slide_pose, l, vec![(i, f.pose)], cfg.neighborhood)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next_id = n_inputs;
    let mut merges = Vec::new();
    let mut merge_step: Vec<Option<usize>> = vec![None; n_inputs];
    let mut exhausted: Vec<usize> = Vec::new();
    let label = |w: &Working| -> Vec<String> { w.members.iter().map(|(i, _)| pool[*i].id.clone()).collect() };

    while working.len() > 1 {
        let open: Vec<usize> = (0..working.len()).filter(|i| !exhausted.contains(&working[*i].id)).collect();
        if open.is_empty() {
            break;
        }
        let mi = open[rng.random_range(0..open.len())];
        let moving_id = working[mi].id;
        let stacked: Vec<FragmentStacks> = working
            .iter()
            .filter_map(|w| w.stacks.as_ref().map(|s| FragmentStacks { id: w.id, stacks: s.clone() }))
            .collect();
        let ranked = if working[mi].stacks.is_some() { rank_fixed(moving_id, &stacked).unwrap_or_default() } else { Vec::new() };
        let mut rejected = Vec::new();
        let mut merged = None;
        for pairing in &ranked {
            let fi = working.iter().position(|w| w.id == pairing.fixed_id).expect("fixed fragment in pool");
            match align_pair(&working[mi], &working[fi], pairing, cfg) {
                Ok(al) => {
                    let new = merge(&working[fi], &working[mi], &al.transform, next_id, &pool, cfg);
                    match new {
                        Ok(new) => {
                            merged = Some((fi, pairing.clone(), al, new));
                            break;
                        }
                        Err(Error::CanvasTooLarge { .. }) | Err(Error::FragmentTooSmall) | Err(Error::EmptyMask) => {
                            rejected.push(label(&working[fi]))
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::NoConsensus { .. }) | Err(Error::DegenerateSample) | Err(Error::FragmentTooSmall) => {
                    rejected.push(label(&working[fi]))
                }
                Err(e) => return Err(e),
            }
        }
        let Some((fi, pairing, al, new)) = merged else {
            exhausted.push(moving_id);
            continue;
        };
        let step = merges.len() + 1;
        for (i, _) in working[mi].members.iter().chain(working[fi].members.iter()) {
            merge_step[*i].get_or_insert(step);
        }
        merges.push(MergeRecord {
            step,
            moving: label(&working[mi]),
            fixed: label(&working[fi]),
            pair_score: pairing.score,
            candidates: pairing.matches.len(),
            inliers: al.inliers.iter().filter(|&&b| b).count(),
            theta_deg: al.transform.theta_degrees(),
            tx: al.transform.translation[0],
            ty: al.transform.translation[1],
            rejected,
        });
        next_id += 1;
        let (a, b) = if mi > fi { (mi, fi) } else { (fi, mi) };
        working.remove(a);
        working.remove(b);
        working.push(new);
        exhausted.clear();
    }

    // largest group first; ties by first member
    working.sort_by(|a, b| b.members.len().cmp(&a.members.len()).then(a.members[0].0.cmp(&b.members[0].0)));
    let mut groups = vec![0usize; n_inputs];
    let mut processing_poses = vec![RigidTransform::identity(); n_inputs];
    for (g, w) in working.iter().enumerate() {
        for (i, p) in &w.members {
            groups[*i] = g;
            processing_poses[*i] = *p;
        }
    }
    let complete = working.len() == 1;
    let main = &working[0];

    let (composite, out_poses, covered) = if n_inputs == 1 && pool[0].pose == RigidTransform::identity() {
        let img = resample(&pool[0].full_res, cfg.output_mpp)?;
        let covered = segment_tissue(&img, &cfg.segment_options()).unwrap_or_else(|_| Mask::new(img.width, img.height));
        (img, vec![RigidTransform::identity()], covered)
    } else {
        let items: Vec<RenderItem> = main
            .members
            .iter()
            .map(|(i, p)| RenderItem { image: &pool[*i].full_res, mask: &pool[*i].mask, pose: *p })
            .collect();
        let r = render_composite(&items, cfg)?;
        let mut poses = vec![RigidTransform::identity(); n_inputs];
        for ((i, _), p) in main.members.iter().zip(r.poses) {
            poses[*i] = p;
        }
        // other groups keep poses relative to their own canvas
        let s = cfg.processing_mpp / cfg.output_mpp;
        for (i, g) in groups.iter().enumerate() {
            if *g != 0 {
                poses[i] = processing_poses[i].rescaled(s);
            }
        }
        (r.image, poses, r.covered)
    };

    let fragments = pool
        .iter()
        .enumerate()
        .map(|(i, f)| ManifestFragment {
            id: f.id.clone(),
            theta_deg: out_poses[i].theta_degrees(),
            tx: out_poses[i].translation[0],
            ty: out_poses[i].translation[1],
            merge_step: merge_step[i],
            group: groups[i],
        })
        .collect();
    let manifest = StitchManifest {
        fragments,
        seed: cfg.seed,
        encoder: cfg.encoder.clone(),
        config: cfg.clone(),
        merges,
        complete,
        output_mpp: cfg.output_mpp,
        composite_width: composite.width,
        composite_height: composite.height,
    };
    Ok(StitchOutcome { composite, manifest, processing_poses, groups, covered })
}

/// A fragment placed in the mosaic.
pub struct RenderItem<'a> {
    /// Source pixels at any resolution.
    pub image: &'a Raster,
    /// Tissue mask at processing resolution.
    pub mask: &'a Mask,
    /// Fragment → mosaic in processing pixels.
    pub pose: RigidTransform,
}

pub struct Rendered {
    pub image: Raster,
    /// Fragment (at output resolution) → composite, per item.
    pub poses: Vec<RigidTransform>,
    /// Pixels covered by fragment tissue.
    pub covered: Mask,
}

/// Warp every fragment into one canvas at `cfg.output_mpp`. Tissue of
/// earlier items wins; fragment background only fills pixels no tissue
/// reached.
pub fn render_composite(items: &[RenderItem], cfg: &StitchConfig) -> Result<Rendered> {
    if items.is_empty() {
        return Err(Error::EmptyPool);
    }
    let s = cfg.processing_mpp / cfg.output_mpp;
    let sources: Vec<Raster> = items.iter().map(|it| resample(it.image, cfg.output_mpp)).collect::<Result<_>>()?;
    let base: Vec<RigidTransform> = items.iter().map(|it| it.pose.rescaled(s)).collect();
    let mut lo = [f64::MAX, f64::MAX];
    let mut hi = [f64::MIN, f64::MIN];
    for (src, p) in sources.iter().zip(&base) {
        for c in corners(src.width, src.height) {
            let q = p.apply(c);
            lo = [lo[0].min(q[0]), lo[1].min(q[1])];
            hi = [hi[0].max(q[0]), hi[1].max(q[1])];
        }
    }
    let m = cfg.canvas_margin as f64;
    let shift = [m - lo[0].floor(), m - lo[1].floor()];
    let w = (hi[0].ceil() - lo[0].floor()) as usize + 1 + 2 * cfg.canvas_margin;
    let h = (hi[1].ceil() - lo[1].floor()) as usize + 1 + 2 * cfg.canvas_margin;
    check_budget(w, h, cfg.max_canvas_pixels)?;
    let channels = sources.iter().map(|r| r.channels).max().unwrap_or(3);
    let mut image = Raster::filled(w, h, channels, 255, cfg.output_mpp);
    let mut covered = Mask::new(w, h);
    let mut painted = Mask::new(w, h);
    let poses: Vec<RigidTransform> = base.iter().map(|p| RigidTransform::from_translation(shift).compose(p)).collect();
    let mut buf = [0f32; 3];
    for tissue_pass in [true, false] {
        for ((src, pose), it) in sources.iter().zip(&poses).zip(items) {
            let inv = pose.inverse();
            let mut blo = [f64::MAX, f64::MAX];
            let mut bhi = [f64::MIN, f64::MIN];
            for c in corners(src.width, src.height) {
                let q = pose.apply(c);
                blo = [blo[0].min(q[0]), blo[1].min(q[1])];
                bhi = [bhi[0].max(q[0]), bhi[1].max(q[1])];
            }
            let (x0, y0) = (blo[0].floor().max(0.0) as usize, blo[1].floor().max(0.0) as usize);
            let (x1, y1) = ((bhi[0].ceil() as usize + 1).min(w), (bhi[1].ceil() as usize + 1).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    if painted.get(x, y) {
                        continue;
                    }
                    let p = inv.apply([x as f64, y as f64]);
                    if p[0] < -0.5 || p[1] < -0.5 || p[0] >= src.width as f64 - 0.5 || p[1] >= src.height as f64 - 0.5 {
                        continue;
                    }
                    let mp = [(p[0] + 0.5) / s - 0.5, (p[1] + 0.5) / s - 0.5];
                    let tissue = it.mask.get_i(mp[0].round() as i64, mp[1].round() as i64);
                    if tissue != tissue_pass {
                        continue;
                    }
                    src.sample_bilinear(p[0], p[1], 255, &mut buf);
                    write_channels(&buf[..src.channels], image.pixel_mut(x, y));
                    painted.set(x, y, true);
                    if tissue {
                        covered.set(x, y, true);
                    }
                }
            }
        }
    }
    Ok(Rendered { image, poses, covered })
}

/// Save the composite as PNG, or TIFF when the extension asks for it.
pub fn save_composite(img: &Raster, path: &Path) -> Result<()> {
    img.save(path)?;
    raster::write_sidecar(path, img.mpp)
}
