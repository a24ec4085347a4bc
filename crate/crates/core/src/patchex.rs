//! Oriented patch sampling along a boundary chain.
//!
//! Each frame is built from two boundary points one patch length apart
//! (arc length). The patch x-axis follows the chord, the y-axis points into
//! the tissue, and the square sits fully inside the fragment with its
//! boundary-side edge [`INWARD_SHIFT`] pixels away from the contour.

use crate::contour::BoundaryChain;
use crate::geometry::{add, dist, norm, scale, sub, Point};
use crate::raster::{round_u8, Mask, Raster};

/// Gap between the contour and the nearest patch edge, in pixels.
pub const INWARD_SHIFT: f64 = 10.0;

/// Value written for samples that fall outside the source canvas.
pub const BACKGROUND_FILL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchFrame {
    pub center: Point,
    pub tangent: Point,
    /// Unit normal pointing into the tissue.
    pub normal: Point,
    pub size: usize,
    /// Chain index of the anchor point.
    pub boundary_index: usize,
    /// Midpoint of the chord on the contour.
    pub anchor: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub frame: PatchFrame,
    pub channels: usize,
    /// `size × size × channels`, row-major.
    pub pixels: Vec<u8>,
    /// Patch center in source-slide coordinates, when ground truth is known.
    pub source_center: Option<Point>,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.frame.size
    }

    pub fn gray(&self) -> Vec<f32> {
        match self.channels {
            1 => self.pixels.iter().map(|&v| v as f32).collect(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|p| crate::raster::luma(p[0], p[1], p[2]) as f32)
                .collect(),
        }
    }
}

fn perp_ccw(t: Point) -> Point {
    [-t[1], t[0]]
}

/// Count tissue hits along `origin + d·dir` for d = 1..=5.
fn probe(mask: &Mask, origin: Point, dir: Point) -> usize {
    (1..=5)
        .filter(|&d| {
            let p = add(origin, scale(dir, d as f64));
            mask.get_i(p[0].round() as i64, p[1].round() as i64)
        })
        .count()
}

fn inside(mask: &Mask, p: Point) -> bool {
    mask.get_i(p[0].round() as i64, p[1].round() as i64)
}

/// Fraction of the square of side `size` centred at `center` that lies on
/// the canvas (sampled on an 8×8 grid).
fn on_canvas_fraction(frame: &PatchFrame, width: usize, height: usize) -> f64 {
    let g = 8;
    let half = frame.size as f64 / 2.0;
    let mut hits = 0;
    for iy in 0..g {
        for ix in 0..g {
            let u = -half + (ix as f64 + 0.5) * frame.size as f64 / g as f64;
            let v = -half + (iy as f64 + 0.5) * frame.size as f64 / g as f64;
            let p = add(frame.center, add(scale(frame.tangent, u), scale(frame.normal, v)));
            if p[0] >= -0.5 && p[1] >= -0.5 && p[0] < width as f64 - 0.5 && p[1] < height as f64 - 0.5 {
                hits += 1;
            }
        }
    }
    hits as f64 / (g * g) as f64
}

/// Lay out patch frames around the whole chain, one every `stride` pixels
/// of arc length starting at chain index 0.
pub fn plan_frames(chain: &BoundaryChain, mask: &Mask, patch_size: usize, stride: f64) -> Vec<PatchFrame> {
    assert!(patch_size >= 2, "patch size must be at least 2");
    assert!(stride >= 1.0, "stride must be at least 1");
    let perimeter = chain.perimeter();
    if perimeter < patch_size as f64 {
        return Vec::new();
    }
    let mut frames = Vec::new();
    let mut idx = 0usize;
    let mut travelled = 0.0;
    let eps = 1e-9;
    while travelled + eps < perimeter {
        let a = chain.point(idx);
        let (b, _) = chain.point_at_arclength(idx, patch_size as f64);
        let chord = sub(b, a);
        let len = norm(chord);
        if len > 0.0 {
            let tangent = scale(chord, 1.0 / len);
            let mid = scale(add(a, b), 0.5);
            let cand = perp_ccw(tangent);
            let opp = [-cand[0], -cand[1]];
            let in_pos = inside(mask, add(mid, scale(cand, INWARD_SHIFT)));
            let in_neg = inside(mask, add(mid, scale(opp, INWARD_SHIFT)));
            let normal = match (in_pos, in_neg) {
                (true, false) => cand,
                (false, true) => opp,
                _ => {
                    if probe(mask, mid, opp) > probe(mask, mid, cand) {
                        opp
                    } else {
                        cand
                    }
                }
            };
            let center = add(mid, scale(normal, INWARD_SHIFT + patch_size as f64 / 2.0));
            let frame = PatchFrame { center, tangent, normal, size: patch_size, boundary_index: idx, anchor: mid };
            if on_canvas_fraction(&frame, mask.width, mask.height) >= 0.5 {
                frames.push(frame);
            }
        }
        let (_, next) = chain.point_at_arclength(idx, stride);
        let step = chain.arc_between(idx, next);
        if step == 0.0 {
            break;
        }
        travelled += step;
        idx = next;
    }
    frames
}

/// Source position of patch pixel (u, v).
#[inline]
pub fn patch_to_source(frame: &PatchFrame, u: usize, v: usize) -> Point {
    let half = (frame.size as f64 - 1.0) / 2.0;
    let du = u as f64 - half;
    let dv = v as f64 - half;
    add(frame.center, add(scale(frame.tangent, du), scale(frame.normal, dv)))
}

/// Bilinear extraction of the oriented square described by `frame`.
pub fn extract(img: &Raster, frame: &PatchFrame) -> Patch {
    let s = frame.size;
    let c = img.channels;
    let mut pixels = vec![0u8; s * s * c];
    let mut buf = [0f32; 3];
    for v in 0..s {
        for u in 0..s {
            let p = patch_to_source(frame, u, v);
            img.sample_bilinear(p[0], p[1], BACKGROUND_FILL, &mut buf);
            let o = (v * s + u) * c;
            for k in 0..c {
                pixels[o + k] = round_u8(buf[k]);
            }
        }
    }
    Patch { frame: *frame, channels: c, pixels, source_center: None }
}

/// Distance between consecutive frame anchors measured along the chain.
pub fn anchor_spacing(chain: &BoundaryChain, frames: &[PatchFrame]) -> Vec<f64> {
    frames.windows(2).map(|w| chain.arc_between(w[0].boundary_index, w[1].boundary_index)).collect()
}

/// Straight-line distance between frame anchors.
pub fn anchor_distance(a: &PatchFrame, b: &PatchFrame) -> f64 {
    dist(a.anchor, b.anchor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::trace_boundary;

    fn rect_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn too_short_boundary_gives_no_frames() {
        // perimeter 100 < 224
        let m = rect_mask(60, 60, 10, 10, 36, 36);
        let chain = trace_boundary(&m).unwrap();
        assert!(chain.perimeter() < 224.0);
        assert!(plan_frames(&chain, &m, 224, 112.0).is_empty());
    }

    #[test]
    fn vertical_edge_frames_point_inward() {
        // tissue to the right of x = 50
        let m = rect_mask(900, 700, 50, 10, 850, 650);
        let chain = trace_boundary(&m).unwrap();
        let frames = plan_frames(&chain, &m, 224, 112.0);
        let left: Vec<_> = frames
            .iter()
            .filter(|f| (f.anchor[0] - 50.0).abs() < 1e-9 && f.anchor[1] > 150.0 && f.anchor[1] < 500.0)
            .collect();
        assert!(!left.is_empty());
        for f in left {
            assert!(f.tangent[0].abs() < 1e-12 && (f.tangent[1].abs() - 1.0).abs() < 1e-12);
            assert_eq!(f.normal, [1.0, 0.0]);
            assert!((f.center[0] - (50.0 + 10.0 + 112.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn square_frame_count() {
        let m = rect_mask(1100, 1100, 50, 50, 1050, 1050);
        let chain = trace_boundary(&m).unwrap();
        let frames = plan_frames(&chain, &m, 224, 112.0);
        // oracle: walk the perimeter in 112-px steps
        let expected = (chain.perimeter() / 112.0).floor() as i64;
        assert!((frames.len() as i64 - expected).abs() <= 1, "{} vs {}", frames.len(), expected);
        for s in anchor_spacing(&chain, &frames) {
            assert!((s - 112.0).abs() <= std::f64::consts::SQRT_2);
        }
    }

    #[test]
    fn axis_aligned_extract_is_crop() {
        let img = Raster::new(40, 30, 1, (0..1200).map(|i| (i * 7 % 251) as u8).collect(), 1.0).unwrap();
        let frame = PatchFrame {
            center: [10.0 + 3.5, 5.0 + 3.5],
            tangent: [1.0, 0.0],
            normal: [0.0, 1.0],
            size: 8,
            boundary_index: 0,
            anchor: [0.0, 0.0],
        };
        let p = extract(&img, &frame);
        for v in 0..8 {
            for u in 0..8 {
                assert_eq!(p.pixels[v * 8 + u], img.pixel(10 + u, 5 + v)[0]);
            }
        }
    }

    #[test]
    fn rotated_extract_matches_rotated_crop() {
        let img = Raster::new(40, 30, 1, (0..1200).map(|i| (i * 13 % 253) as u8).collect(), 1.0).unwrap();
        let frame = PatchFrame {
            center: [20.5, 15.5],
            tangent: [0.0, 1.0],
            normal: [-1.0, 0.0],
            size: 8,
            boundary_index: 0,
            anchor: [0.0, 0.0],
        };
        let p = extract(&img, &frame);
        // u runs down the source, v runs leftward
        for v in 0..8 {
            for u in 0..8 {
                let sx = (20.5 - (v as f64 - 3.5)) as usize;
                let sy = (15.5 + (u as f64 - 3.5)) as usize;
                let d = p.pixels[v * 8 + u] as i32 - img.pixel(sx, sy)[0] as i32;
                assert!(d.abs() <= 1);
            }
        }
    }

    #[test]
    fn off_canvas_fill_is_white() {
        let img = Raster::filled(20, 20, 3, 0, 1.0);
        let frame = PatchFrame {
            center: [19.5, 10.0],
            tangent: [1.0, 0.0],
            normal: [0.0, 1.0],
            size: 10,
            boundary_index: 0,
            anchor: [0.0, 0.0],
        };
        let p = extract(&img, &frame);
        for v in 0..10 {
            for u in 0..10 {
                let x = 19.5 + u as f64 - 4.5;
                let px = &p.pixels[(v * 10 + u) * 3..(v * 10 + u) * 3 + 3];
                if x > 19.0 {
                    assert_eq!(px, &[255, 255, 255]);
                } else if x < 19.0 {
                    assert_eq!(px, &[0, 0, 0]);
                }
            }
        }
    }
}
