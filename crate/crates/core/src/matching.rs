//! Context stacks and sliding-window matching between fragment boundaries.

use std::io::Write;

use crate::encoder::{dot, FeatureVector};
use crate::error::{Error, Result};

/// Concatenation of the 2n+1 embeddings centred on one frame, re-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStack {
    pub center_index: usize,
    pub radius: usize,
    /// Per-frame embedding dimension.
    pub dim: usize,
    pub values: Vec<f32>,
}

impl ContextStack {
    pub fn blocks(&self) -> usize {
        2 * self.radius + 1
    }

    fn block(&self, b: usize) -> &[f32] {
        &self.values[b * self.dim..(b + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateMatch {
    pub moving_index: usize,
    pub fixed_index: usize,
    pub similarity: f64,
    /// The fixed stack matched with its constituents in reverse order.
    pub reversed: bool,
}

/// One stack per frame with cyclic neighbours `k-n ..= k+n`.
pub fn build_stacks(features: &[FeatureVector], radius: usize) -> Result<Vec<ContextStack>> {
    let n = features.len();
    let needed = 2 * radius + 1;
    if n < needed {
        return Err(Error::BoundaryTooShort { frames: n, needed });
    }
    let dim = features[0].dim();
    if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: bad.dim() });
    }
    Ok((0..n)
        .map(|k| {
            let mut values = Vec::with_capacity(needed * dim);
            for off in 0..needed {
                let idx = (k + n + off - radius) % n;
                values.extend_from_slice(&features[idx].0);
            }
            let v = FeatureVector::normalized(values).0;
            ContextStack { center_index: k, radius, dim, values: v }
        })
        .collect())
}

/// Cosine between a moving stack and a fixed stack, optionally with the
/// fixed constituents reversed. Stacks are unit-length.
pub fn stack_similarity(moving: &ContextStack, fixed: &ContextStack, reversed: bool) -> f64 {
    let s = if reversed {
        let b = moving.blocks();
        (0..b).map(|i| dot(moving.block(i), fixed.block(b - 1 - i))).sum()
    } else {
        dot(&moving.values, &fixed.values)
    };
    s.clamp(-1.0, 1.0)
}

fn check_compatible(moving: &[ContextStack], fixed: &[ContextStack]) -> Result<()> {
    let Some(m0) = moving.first() else {
        return Err(Error::Config("no moving stacks".into()));
    };
    let Some(f0) = fixed.first() else {
        return Err(Error::Config("no fixed stacks".into()));
    };
    if m0.values.len() != f0.values.len() || m0.dim != f0.dim {
        return Err(Error::DimensionMismatch { expected: m0.values.len(), got: f0.values.len() });
    }
    Ok(())
}

/// Best fixed stack (index and orientation) for every moving stack. Ties go
/// to the smaller fixed index, then forward before reversed.
pub fn match_candidates(moving: &[ContextStack], fixed: &[ContextStack]) -> Result<Vec<CandidateMatch>> {
    check_compatible(moving, fixed)?;
    Ok(moving
        .iter()
        .map(|m| {
            let mut best = CandidateMatch { moving_index: m.center_index, fixed_index: 0, similarity: f64::NEG_INFINITY, reversed: false };
            for (j, f) in fixed.iter().enumerate() {
                for reversed in [false, true] {
                    let s = stack_similarity(m, f, reversed);
                    if s > best.similarity {
                        best = CandidateMatch { moving_index: m.center_index, fixed_index: j, similarity: s, reversed };
                    }
                }
            }
            best
        })
        .collect())
}

/// Where a match lands on the fixed boundary, at sub-frame resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocatedMatch {
    /// Fixed frame nearest the peak.
    pub fixed_index: usize,
    /// Offset from that frame in frames, in [-1, 1]; positive towards the
    /// next frame.
    pub offset: f64,
}

/// Sub-frame position of a stack match along the fixed boundary: a
/// parabola through the similarities of the frames' own embeddings at the
/// matched fixed frame and its two neighbours. Context blocks near a corner
/// skew stack similarities, the centre frames do not.
pub fn locate_match(moving: &ContextStack, fixed: &[ContextStack], m: &CandidateMatch) -> LocatedMatch {
    let n = fixed.len();
    let center = moving.block(moving.radius);
    let s = |idx: usize| {
        let f = &fixed[idx % n];
        crate::encoder::cosine(center, f.block(f.radius))
    };
    let j = m.fixed_index;
    if n < 3 {
        return LocatedMatch { fixed_index: j, offset: 0.0 };
    }
    let (a, b, c) = (s(j + n - 1), s(j), s(j + 1));
    let denom = a - 2.0 * b + c;
    let offset = if denom >= -1e-12 { 0.0 } else { (0.5 * (a - c) / denom).clamp(-1.0, 1.0) };
    LocatedMatch { fixed_index: j, offset }
}

/// Match set of one moving/fixed fragment pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    pub fixed_id: usize,
    /// Sum over moving stacks of the best similarity.
    pub score: f64,
    pub matches: Vec<CandidateMatch>,
}

/// Stacks of one fragment in the pool.
#[derive(Debug, Clone)]
pub struct FragmentStacks {
    pub id: usize,
    pub stacks: Vec<ContextStack>,
}

/// All fixed fragments ranked by pairing score (descending; ties by id).
pub fn rank_fixed(moving_id: usize, pool: &[FragmentStacks]) -> Result<Vec<Pairing>> {
    let moving = pool.iter().find(|f| f.id == moving_id).ok_or(Error::EmptyPool)?;
    let mut out = Vec::new();
    for f in pool.iter().filter(|f| f.id != moving_id) {
        let matches = match_candidates(&moving.stacks, &f.stacks)?;
        let score = matches.iter().map(|m| m.similarity).sum();
        out.push(Pairing { fixed_id: f.id, score, matches });
    }
    if out.is_empty() {
        return Err(Error::EmptyPool);
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.fixed_id.cmp(&b.fixed_id)));
    Ok(out)
}

/// Best fixed fragment for `moving_id` and its candidate matches.
pub fn pair_fragment(moving_id: usize, pool: &[FragmentStacks]) -> Result<Pairing> {
    Ok(rank_fixed(moving_id, pool)?.remove(0))
}

/// `moving_index,fixed_index,similarity,reversed` rows.
pub fn write_matches_csv<W: Write>(mut w: W, matches: &[CandidateMatch]) -> std::io::Result<()> {
    writeln!(w, "moving_index,fixed_index,similarity,reversed")?;
    for m in matches {
        writeln!(w, "{},{},{:.6},{}", m.moving_index, m.fixed_index, m.similarity, m.reversed)?;
    }
    Ok(())
}
