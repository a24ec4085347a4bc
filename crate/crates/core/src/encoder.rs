//! Patch encoders and the file protocol for external embedding models.
//!
//! Built-in encoders run in-process. Foundation-model embeddings are
//! obtained through a bridge executable invoked as
//! `<cmd> <request-path> <response-path>`; see [`write_request`] and
//! [`read_features`] for the two file layouts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchex::Patch;

/// Environment variable that replaces the configured bridge command.
pub const BRIDGE_ENV: &str = "SEMSTITCH_BRIDGE";

pub const PATCH_MAGIC: &[u8; 4] = b"SSPB";
pub const FEATURE_MAGIC: &[u8; 4] = b"SSFV";
pub const PATCH_HEADER_LEN: usize = 20;
pub const FEATURE_HEADER_LEN: usize = 12;

/// Unit-length embedding of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    /// L2-normalise `values`; an all-zero vector becomes e₁.
    pub fn normalized(mut values: Vec<f32>) -> Self {
        let n = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            for v in &mut values {
                *v = (*v as f64 / n) as f32;
            }
            FeatureVector(values)
        } else {
            FeatureVector(unit(values.len()))
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        cosine(&self.0, &other.0)
    }
}

pub(crate) fn unit(k: usize) -> Vec<f32> {
    let mut v = vec![0.0; k];
    if k > 0 {
        v[0] = 1.0;
    }
    v
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity clamped to [-1, 1]; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Which encoder maps patches to feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Grid of per-cell intensity and gradient means on a standardised
    /// grayscale patch. `K = 3·grid²`.
    Baseline { grid: usize },
    /// 4× block-averaged zero-mean pixels; cosine equals normalised
    /// cross-correlation. `K = (patch_size/4)²`.
    Ncc { patch_size: usize },
    /// Positional code of the patch's ground-truth slide position plus
    /// Gaussian noise. Needs `Patch::source_center`.
    Oracle { sigma: f64, seed: u64, wavelengths: [f64; 2] },
    /// Embeddings served by a bridge executable.
    External { command: String, dim: usize, patch_size: usize },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Baseline { grid: 8 }
    }
}

impl EncoderSpec {
    pub fn oracle(sigma: f64, seed: u64) -> Self {
        EncoderSpec::Oracle { sigma, seed, wavelengths: [400.0, 1500.0] }
    }

    pub fn ncc(patch_size: usize) -> Self {
        EncoderSpec::Ncc { patch_size }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderSpec::Baseline { .. } => "baseline",
            EncoderSpec::Ncc { .. } => "ncc",
            EncoderSpec::Oracle { .. } => "oracle",
            EncoderSpec::External { .. } => "external",
        }
    }

    /// Feature dimension K.
    pub fn dim(&self) -> usize {
        match *self {
            EncoderSpec::Baseline { grid } => 3 * grid * grid,
            EncoderSpec::Ncc { patch_size } => (patch_size / 4) * (patch_size / 4),
            EncoderSpec::Oracle { .. } => 8,
            EncoderSpec::External { dim, .. } => dim,
        }
    }

    /// Patch size the encoder insists on, if any.
    pub fn patch_size(&self) -> Option<usize> {
        match *self {
            EncoderSpec::Ncc { patch_size } | EncoderSpec::External { patch_size, .. } => Some(patch_size),
            _ => None,
        }
    }

    /// Whether the encoder reads patch pixels (the oracle does not).
    pub fn needs_pixels(&self) -> bool {
        !matches!(self, EncoderSpec::Oracle { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() < 4 {
            return Err(Error::Config(format!("encoder dimension {} < 4", self.dim())));
        }
        if let EncoderSpec::Oracle { sigma, wavelengths, .. } = self {
            if !(*sigma >= 0.0) || wavelengths.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::Config("oracle sigma must be >= 0 and wavelengths > 0".into()));
            }
        }
        Ok(())
    }
}

/// Encode one patch with an in-process encoder.
pub fn encode(spec: &EncoderSpec, patch: &Patch) -> Result<FeatureVector> {
    if let Some(ps) = spec.patch_size() {
        if ps != patch.size() {
            return Err(Error::DimensionMismatch { expected: ps, got: patch.size() });
        }
    }
    match *spec {
        EncoderSpec::Baseline { grid } => Ok(baseline(patch, grid)),
        EncoderSpec::Ncc { .. } => Ok(ncc(patch)),
        EncoderSpec::Oracle { sigma, seed, wavelengths } => {
            let c = patch
                .source_center
                .ok_or_else(|| Error::Config("oracle encoder needs ground-truth patch positions".into()))?;
            Ok(oracle_code(c, sigma, seed, wavelengths))
        }
        EncoderSpec::External { .. } => {
            Err(Error::Config("external encoders run in batches; use encode_patches".into()))
        }
    }
}

/// Encode a batch, routing external specs through the bridge in `workdir`
/// (a fresh temporary directory when `None`).
pub fn encode_patches(spec: &EncoderSpec, patches: &[Patch], workdir: Option<&Path>) -> Result<Vec<FeatureVector>> {
    match spec {
        EncoderSpec::External { .. } => match workdir {
            Some(dir) => encode_batch_external(spec, patches, dir),
            None => {
                let dir = scratch_dir()?;
                let out = encode_batch_external(spec, patches, &dir);
                let _ = std::fs::remove_dir_all(&dir);
                out
            }
        },
        _ => patches.iter().map(|p| encode(spec, p)).collect(),
    }
}

fn scratch_dir() -> Result<PathBuf> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir().join(format!(
        "semstitch-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn standardized_gray(patch: &Patch) -> Option<Vec<f32>> {
    let g = patch.gray();
    let n = g.len() as f64;
    let mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = g.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-6 {
        return None;
    }
    Some(g.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
}

fn baseline(patch: &Patch, grid: usize) -> FeatureVector {
    let k = 3 * grid * grid;
    let Some(z) = standardized_gray(patch) else {
        return FeatureVector(unit(k));
    };
    let s = patch.size();
    let at = |x: usize, y: usize| z[y * s + x];
    let mut feats = vec![0f64; k];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..s {
        let cy = (y * grid / s).min(grid - 1);
        for x in 0..s {
            let cx = (x * grid / s).min(grid - 1);
            let cell = cy * grid + cx;
            let gx = match x {
                0 => at(1.min(s - 1), y) - at(0, y),
                _ if x == s - 1 => at(x, y) - at(x - 1, y),
                _ => (at(x + 1, y) - at(x - 1, y)) / 2.0,
            };
            let gy = match y {
                0 => at(x, 1.min(s - 1)) - at(x, 0),
                _ if y == s - 1 => at(x, y) - at(x, y - 1),
                _ => (at(x, y + 1) - at(x, y - 1)) / 2.0,
            };
            feats[cell] += at(x, y) as f64;
            feats[grid * grid + cell] += gx as f64;
            feats[2 * grid * grid + cell] += gy as f64;
            counts[cell] += 1;
        }
    }
    let gg = grid * grid;
    let values = feats
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = counts[i % gg];
            if c == 0 {
                0.0
            } else {
                (v / c as f64) as f32
            }
        })
        .collect();
    FeatureVector::normalized(values)
}

/// 4× block-mean downsample of the grayscale patch.
pub fn downsample4(patch: &Patch) -> Vec<f32> {
    let s = patch.size();
    let d = s / 4;
    let g = patch.gray();
    let mut out = vec![0f32; d * d];
    for by in 0..d {
        for bx in 0..d {
            let mut acc = 0f32;
            for y in by * 4..by * 4 + 4 {
                for x in bx * 4..bx * 4 + 4 {
                    acc += g[y * s + x];
                }
            }
            out[by * d + bx] = acc / 16.0;
        }
    }
    out
}

fn ncc(patch: &Patch) -> FeatureVector {
    let mut v = downsample4(patch);
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
    for x in &mut v {
        *x = (*x as f64 - mean) as f32;
    }
    FeatureVector::normalized(v)
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Positional code: sin/cos of both coordinates at two wavelengths.
pub fn oracle_code(center: [f64; 2], sigma: f64, seed: u64, wavelengths: [f64; 2]) -> FeatureVector {
    let mut v = Vec::with_capacity(8);
    for &lam in &wavelengths {
        for &c in &center {
            let (s, co) = (c / lam).sin_cos();
            v.push(co);
            v.push(s);
        }
    }
    if sigma > 0.0 {
        let key = splitmix(seed ^ splitmix(center[0].to_bits() ^ splitmix(center[1].to_bits())));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for x in &mut v {
            *x += normal.sample(&mut rng);
        }
    }
    FeatureVector::normalized(v.into_iter().map(|x| x as f32).collect())
}

/// Per-patch mean of raw bytes, replicated `dim` times. Used by the
/// loopback bridge.
pub fn loopback_features(batch: &PatchBatch, dim: usize) -> FeatureBatch {
    let per = batch.patch_len();
    if dim == 0 {
        return FeatureBatch { count: batch.count, dim, values: Vec::new() };
    }
    let values = (0..batch.count)
        .flat_map(|i| {
            let bytes = &batch.data[i * per..(i + 1) * per];
            let mean = if per == 0 { 0.0 } else { bytes.iter().map(|&b| b as f64).sum::<f64>() / per as f64 };
            std::iter::repeat_n(mean as f32, dim)
        })
        .collect();
    FeatureBatch { count: batch.count, dim, values }
}

/// Decoded `SSPB` request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchBatch {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl PatchBatch {
    pub fn patch_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn from_patches(patches: &[Patch], empty_shape: (usize, usize, usize)) -> Result<Self> {
        let (h, w, c) = match patches.first() {
            Some(p) => (p.size(), p.size(), p.channels),
            None => empty_shape,
        };
        let mut data = Vec::with_capacity(patches.len() * h * w * c);
        for p in patches {
            if p.size() != h || p.channels != c {
                return Err(Error::Protocol("patches in a batch must share size and channels".into()));
            }
            data.extend_from_slice(&p.pixels);
        }
        Ok(Self { count: patches.len(), height: h, width: w, channels: c, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = [self.count, self.height, self.width, self.channels];
        let mut out = Vec::with_capacity(PATCH_HEADER_LEN + self.data.len());
        out.extend_from_slice(PATCH_MAGIC);
        for v in header {
            let v = u32::try_from(v).map_err(|_| Error::Protocol(format!("header field {v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        if self.data.len() != self.count * self.patch_len() {
            return Err(Error::Protocol("payload length does not match header".into()));
        }
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = read_header::<4>(bytes, PATCH_MAGIC)?;
        let payload = (h[0] as u64)
            .checked_mul(h[1] as u64)
            .and_then(|v| v.checked_mul(h[2] as u64))
            .and_then(|v| v.checked_mul(h[3] as u64))
            .ok_or_else(|| Error::Protocol("payload size overflows".into()))?;
        let body = &bytes[PATCH_HEADER_LEN..];
        if body.len() as u64 != payload {
            return Err(Error::Protocol(format!("expected {payload} payload bytes, found {}", body.len())));
        }
        Ok(Self {
            count: h[0] as usize,
            height: h[1] as usize,
            width: h[2] as usize,
            channels: h[3] as usize,
            data: body.to_vec(),
        })
    }
}

/// Decoded `SSFV` response.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub count: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureBatch {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.values.len() != self.count * self.dim {
            return Err(Error::Protocol("feature payload does not match header".into()));
        }
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [self.count, self.dim] {
            let v = u32::try_from(v).map_err(|_| Error::Protocol(format!("header field {v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = read_header::<2>(bytes, FEATURE_MAGIC)?;
        let n = (h[0] as u64)
            .checked_mul(h[1] as u64)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Protocol("payload size overflows".into()))?;
        let body = &bytes[FEATURE_HEADER_LEN..];
        if body.len() as u64 != n {
            return Err(Error::Protocol(format!("expected {n} payload bytes, found {}", body.len())));
        }
        let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("non-finite feature value".into()));
        }
        Ok(Self { count: h[0] as usize, dim: h[1] as usize, values })
    }
}

fn read_header<const N: usize>(bytes: &[u8], magic: &[u8; 4]) -> Result<[u32; N]> {
    let len = 4 + 4 * N;
    if bytes.len() < len {
        return Err(Error::Protocol(format!("header truncated: {} < {len} bytes", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::Protocol(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut out = [0u32; N];
    for (i, v) in out.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *v = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_request(path: &Path, batch: &PatchBatch) -> Result<()> {
    write_file(path, &batch.to_bytes()?)
}

pub fn read_request(path: &Path) -> Result<PatchBatch> {
    PatchBatch::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_features(path: &Path, batch: &FeatureBatch) -> Result<()> {
    write_file(path, &batch.to_bytes()?)
}

pub fn read_features(path: &Path) -> Result<FeatureBatch> {
    FeatureBatch::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Bridge command line: `SEMSTITCH_BRIDGE` if set, else the configured command.
pub fn bridge_command(spec: &EncoderSpec) -> Result<Vec<String>> {
    let configured = match spec {
        EncoderSpec::External { command, .. } => command.clone(),
        _ => return Err(Error::Config("not an external encoder".into())),
    };
    let cmd = std::env::var(BRIDGE_ENV).ok().filter(|s| !s.trim().is_empty()).unwrap_or(configured);
    let parts: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
    if parts.is_empty() {
        return Err(Error::Config("empty bridge command".into()));
    }
    Ok(parts)
}

/// Round-trip a batch through the bridge executable.
pub fn encode_batch_external(spec: &EncoderSpec, patches: &[Patch], workdir: &Path) -> Result<Vec<FeatureVector>> {
    let (dim, patch_size) = match *spec {
        EncoderSpec::External { dim, patch_size, .. } => (dim, patch_size),
        _ => return Err(Error::Config("not an external encoder".into())),
    };
    let request = workdir.join("patches.bin");
    let response = workdir.join("features.bin");
    let batch = PatchBatch::from_patches(patches, (patch_size, patch_size, 3))?;
    write_request(&request, &batch)?;
    let _ = std::fs::remove_file(&response);
    let argv = bridge_command(spec)?;
    let out = Command::new(&argv[0])
        .args(&argv[1..])
        .arg(&request)
        .arg(&response)
        .output()
        .map_err(|e| Error::Bridge(format!("failed to launch {}: {e}", argv[0])))?;
    if !out.status.success() {
        return Err(Error::Bridge(format!(
            "{} exited with {}: {}",
            argv[0],
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let feats = read_features(&response)?;
    if feats.count != patches.len() {
        return Err(Error::Protocol(format!("bridge returned {} vectors for {} patches", feats.count, patches.len())));
    }
    if feats.dim != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: feats.dim });
    }
    Ok((0..feats.count).map(|i| FeatureVector::normalized(feats.row(i).to_vec())).collect())
}
