//! Command implementations behind the `semstitch` binary. Argument parsing
//! lives in the binary; everything here takes resolved settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::RansacConfig;
use crate::encoder::{
    encode, loopback_features, read_request, write_features, EncoderSpec, FeatureBatch, FeatureVector,
};
use crate::error::{Error, Result};
use crate::harness::{
    boundary_match_experiment, calibrate_oracle_sigma, dump_pair_matches, fragment_slide, generate_synthetic_slide,
    match_accuracy_vs_gap, neighborhood_sweep, resolution_sweep, rotation_invariance_sweep, similarity_map,
    similarity_vs_offset, write_similarity_map, ExperimentReport, FragmentationSpec, GroundTruth, Layout,
    PoseTolerance, SlideStyle,
};
use crate::mosaic::{prepare_fragment_from_raster, prepare_fragments, save_composite, stitch, StitchConfig, StitchManifest};
use crate::parallel::par_map;
use crate::patchex::{Patch, PatchFrame};
use crate::raster::{load_image, Raster};

/// Settings shared by every command. Serialised form is the `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub processing_mpp: f64,
    pub output_mpp: f64,
    pub patch_size: usize,
    pub stride: f64,
    pub neighborhood: usize,
    pub encoder: EncoderSpec,
    pub ransac: RansacConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker cap; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = StitchConfig::default();
        Self {
            processing_mpp: s.processing_mpp,
            output_mpp: s.output_mpp,
            patch_size: s.patch_size,
            stride: s.stride,
            neighborhood: s.neighborhood,
            encoder: s.encoder,
            ransac: s.ransac,
            seed: s.seed,
            out_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

/// Encoder selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Baseline,
    Ncc,
    Oracle,
    External,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "ncc" => Ok(Self::Ncc),
            "oracle" => Ok(Self::Oracle),
            "external" => Ok(Self::External),
            other => Err(Error::Config(format!("unknown encoder {other:?} (baseline, ncc, oracle, external)"))),
        }
    }
}

/// Default embedding width assumed for an external bridge.
pub const DEFAULT_BRIDGE_DIM: usize = 1024;
pub const DEFAULT_BASELINE_GRID: usize = 8;

/// Values given explicitly on the command line; `None` defers to the
/// config file, then to [`RunConfig::default`].
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub processing_mpp: Option<f64>,
    pub output_mpp: Option<f64>,
    pub patch_size: Option<usize>,
    pub stride: Option<f64>,
    pub neighborhood: Option<usize>,
    pub encoder: Option<EncoderKind>,
    pub oracle_sigma: Option<f64>,
    pub bridge: Option<String>,
    pub bridge_dim: Option<usize>,
    pub ransac_threshold: Option<f64>,
    pub ransac_iterations: Option<usize>,
    pub ransac_sample: Option<usize>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Flag > file > default.
    pub fn resolve(file: Option<&Path>, o: &RunOverrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        macro_rules! take {
            ($($dst:expr => $src:expr),* $(,)?) => { $(if let Some(v) = $src.clone() { $dst = v; })* };
        }
        take!(
            c.processing_mpp => o.processing_mpp,
            c.output_mpp => o.output_mpp,
            c.patch_size => o.patch_size,
            c.stride => o.stride,
            c.neighborhood => o.neighborhood,
            c.ransac.inlier_threshold => o.ransac_threshold,
            c.ransac.max_iterations => o.ransac_iterations,
            c.ransac.sample_size => o.ransac_sample,
            c.seed => o.seed,
            c.out_dir => o.out_dir,
            c.threads => o.threads,
        );
        if let Some(kind) = o.encoder {
            c.encoder = match kind {
                EncoderKind::Baseline => EncoderSpec::Baseline { grid: DEFAULT_BASELINE_GRID },
                EncoderKind::Ncc => EncoderSpec::ncc(c.patch_size),
                EncoderKind::Oracle => EncoderSpec::oracle(0.0, 0),
                EncoderKind::External => EncoderSpec::External {
                    command: String::new(),
                    dim: DEFAULT_BRIDGE_DIM,
                    patch_size: c.patch_size,
                },
            };
        }
        match &mut c.encoder {
            EncoderSpec::Oracle { sigma, .. } => {
                take!(*sigma => o.oracle_sigma);
            }
            EncoderSpec::External { command, dim, .. } => {
                take!(*command => o.bridge, *dim => o.bridge_dim);
            }
            _ => {}
        }
        c.sync_encoder();
        c.validate()?;
        Ok(c)
    }

    /// Patch-size-bound encoders follow `patch_size`; the oracle and RANSAC
    /// draw from the run seed.
    fn sync_encoder(&mut self) {
        match &mut self.encoder {
            EncoderSpec::Ncc { patch_size } | EncoderSpec::External { patch_size, .. } => *patch_size = self.patch_size,
            EncoderSpec::Oracle { seed, .. } => *seed = self.seed,
            EncoderSpec::Baseline { .. } => {}
        }
        self.ransac.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.stitch_config().validate()
    }

    pub fn stitch_config(&self) -> StitchConfig {
        StitchConfig {
            processing_mpp: self.processing_mpp,
            output_mpp: self.output_mpp,
            patch_size: self.patch_size,
            stride: self.stride,
            neighborhood: self.neighborhood,
            encoder: self.encoder.clone(),
            ransac: self.ransac,
            seed: self.seed,
            ..Default::default()
        }
    }

    fn work_dir(&self) -> Option<PathBuf> {
        matches!(self.encoder, EncoderSpec::External { .. }).then(|| self.out_dir.join("bridge"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// stitch

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageFormat {
    #[default]
    Png,
    Tiff,
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(Self::Png),
            "tif" | "tiff" => Ok(Self::Tiff),
            other => Err(Error::Config(format!("unknown image format {other:?} (png, tif)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StitchSummary {
    pub manifest: StitchManifest,
    pub composite: PathBuf,
    pub manifest_path: PathBuf,
}

impl StitchSummary {
    /// 0 for a full mosaic, 2 for a partial one.
    pub fn exit_code(&self) -> i32 {
        if self.manifest.complete {
            0
        } else {
            2
        }
    }
}

/// Stitch image files into `out_dir/composite.{png,tif}` and
/// `out_dir/manifest.json`. With `ground_truth`, fragments whose file stem
/// names a ground-truth fragment carry its slide pose, which the oracle
/// encoder needs.
pub fn cmd_stitch(
    inputs: &[PathBuf],
    mpp: Option<f64>,
    ground_truth: Option<&Path>,
    format: ImageFormat,
    cfg: &RunConfig,
) -> Result<StitchSummary> {
    if inputs.is_empty() {
        return Err(Error::EmptyPool);
    }
    create_dir(&cfg.out_dir)?;
    let mut sc = cfg.stitch_config();
    sc.workdir = cfg.work_dir();
    let pool = match ground_truth {
        None => prepare_fragments(inputs, mpp, &sc)?,
        Some(gt_path) => {
            let text = std::fs::read_to_string(gt_path).map_err(|e| Error::io(gt_path, e))?;
            let gt = GroundTruth::from_json(&text)?;
            par_map(inputs, |p| {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let raster = load_image(p, mpp)?;
                let slide_pose = gt.index_of(&id).map(|i| gt.fragments[i].pose.rescaled(gt.slide_mpp / sc.processing_mpp));
                let mut c = sc.clone();
                if let Some(w) = &sc.workdir {
                    c.workdir = Some(w.join(&id));
                    create_dir(c.workdir.as_ref().unwrap())?;
                }
                prepare_fragment_from_raster(id, raster, slide_pose, &c)
            })
            .into_iter()
            .collect::<Result<_>>()?
        }
    };
    let outcome = stitch(pool, &sc)?;
    let ext = match format {
        ImageFormat::Png => "png",
        ImageFormat::Tiff => "tif",
    };
    let composite = cfg.out_dir.join(format!("composite.{ext}"));
    save_composite(&outcome.composite, &composite)?;
    let manifest_path = cfg.out_dir.join("manifest.json");
    write_text(&manifest_path, &outcome.manifest.to_json())?;
    Ok(StitchSummary { manifest: outcome.manifest, composite, manifest_path })
}

// ---------------------------------------------------------------------------
// fragment

/// Where a slide comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SlideSource {
    File { path: PathBuf, mpp: Option<f64> },
    /// A generated slide of `size`² pixels at `mpp`.
    Synthetic { seed: u64, size: usize, mpp: f64 },
}

impl SlideSource {
    pub fn load(&self) -> Result<Raster> {
        match self {
            SlideSource::File { path, mpp } => load_image(path, *mpp),
            SlideSource::Synthetic { seed, size, mpp } => {
                Ok(generate_synthetic_slide(*seed, *size, &SlideStyle { mpp: *mpp, ..Default::default() })?.image)
            }
        }
    }
}

/// Cut a slide into `out_dir/<id>.png` fragments plus
/// `out_dir/ground_truth.json`.
pub fn cmd_fragment(source: &SlideSource, spec: &FragmentationSpec, out_dir: &Path) -> Result<GroundTruth> {
    let slide = source.load()?;
    let (images, gt) = fragment_slide(&slide, spec)?;
    create_dir(out_dir)?;
    for (img, f) in images.iter().zip(&gt.fragments) {
        save_composite(img, &out_dir.join(format!("{}.png", f.id)))?;
    }
    write_text(&out_dir.join("ground_truth.json"), &gt.to_json())?;
    Ok(gt)
}

// ---------------------------------------------------------------------------
// evaluate

pub const EXPERIMENT_IDS: [&str; 7] =
    ["boundary-match", "spatial", "match-vs-gap", "similarity-vs-offset", "rotation", "neighborhood", "resolution"];

/// Knobs for `evaluate`. `None` picks the experiment's default.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Slide to evaluate on; a synthetic slide when `None`.
    pub slide: Option<PathBuf>,
    pub slide_mpp: Option<f64>,
    pub slide_size: Option<usize>,
    /// Trials per sweep point.
    pub trials: Option<usize>,
    /// Explicit encoder choice; several experiments otherwise sweep
    /// baseline, NCC and oracle.
    pub encoder: Option<EncoderSpec>,
    /// Gap or offset values in microns.
    pub values_um: Option<Vec<f64>>,
    pub neighborhoods: Option<Vec<usize>>,
    pub mpps: Option<Vec<f64>>,
    pub rotation_step: Option<f64>,
    /// Tune oracle noise so single-frame seam accuracy hits this value
    /// (neighborhood experiment; 0.3 when no encoder is given).
    pub calibrate: Option<f64>,
    /// Include wall-clock rows (non-deterministic).
    pub timing: bool,
}

fn zero_to_900() -> Vec<f64> {
    (0..=9).map(|k| k as f64 * 100.0).collect()
}

/// Run experiment `id` and write its files under `cfg.out_dir`.
pub fn cmd_evaluate(id: &str, opts: &EvalOptions, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if !EXPERIMENT_IDS.contains(&id) {
        return Err(Error::Config(format!("unknown experiment {id:?}; valid: {}", EXPERIMENT_IDS.join(", "))));
    }
    create_dir(&cfg.out_dir)?;
    let sc = cfg.stitch_config();
    let seeds: Vec<u64> = (0..opts.trials.unwrap_or(3) as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let size = opts.slide_size.unwrap_or(2048);
    let slide = || -> Result<Raster> {
        match &opts.slide {
            Some(path) => load_image(path, opts.slide_mpp),
            None => SlideSource::Synthetic { seed: cfg.seed, size, mpp: sc.processing_mpp }.load(),
        }
    };
    let sweep_encoders = || -> Vec<EncoderSpec> {
        match &opts.encoder {
            Some(e) => vec![e.clone()],
            None => vec![EncoderSpec::Baseline { grid: DEFAULT_BASELINE_GRID }, EncoderSpec::ncc(sc.patch_size), EncoderSpec::oracle(0.0, cfg.seed)],
        }
    };
    let one_encoder = || opts.encoder.clone().unwrap_or_else(|| cfg.encoder.clone());
    let csv = |report: &ExperimentReport| -> Result<Vec<PathBuf>> {
        let path = cfg.out_dir.join(format!("{id}.csv"));
        report.write_csv(&path)?;
        Ok(vec![path])
    };
    match id {
        "boundary-match" => {
            if opts.slide.is_some() {
                return Err(Error::Config("boundary-match draws one synthetic slide per trial".into()));
            }
            let template = FragmentationSpec {
                layout: Layout::Quadrants,
                gap_um: 224.0,
                edge_trim: (0.0, 0.2),
                rotation_deg: 180.0,
                translation_px: 40.0,
                patch_size: sc.patch_size,
                ..Default::default()
            };
            let eval = StitchConfig { output_mpp: sc.processing_mpp, ..sc.clone() };
            csv(&boundary_match_experiment(size, &template, &sweep_encoders(), &seeds, &eval, PoseTolerance::default())?)
        }
        "spatial" => {
            let s = slide()?;
            let enc = one_encoder();
            let map = similarity_map(&s, &enc, sc.patch_size / 2, &sc)?;
            let map_path = cfg.out_dir.join("similarity_map.csv");
            write_similarity_map(&map_path, &map)?;
            let gap = opts.values_um.as_ref().and_then(|v| v.first().copied()).unwrap_or(0.0);
            dump_pair_matches(&s, gap, &enc, &sc, &cfg.out_dir)?;
            Ok(vec![map_path, cfg.out_dir.join("matches.csv"), cfg.out_dir.join("inliers.csv")])
        }
        "match-vs-gap" => {
            let gaps = opts.values_um.clone().unwrap_or_else(zero_to_900);
            csv(&match_accuracy_vs_gap(&slide()?, &sweep_encoders(), &gaps, &seeds, &sc)?)
        }
        "similarity-vs-offset" => {
            let offsets = opts.values_um.clone().unwrap_or_else(zero_to_900);
            let s = slide()?;
            let mut report = ExperimentReport::new(id);
            for e in sweep_encoders() {
                report.rows.extend(similarity_vs_offset(&s, &e, &offsets, 100, cfg.seed, &sc)?.rows);
            }
            csv(&report)
        }
        "rotation" => {
            let step = opts.rotation_step.unwrap_or(15.0);
            csv(&rotation_invariance_sweep(&slide()?, &one_encoder(), step, 20, cfg.seed, &sc)?)
        }
        "neighborhood" => {
            let s = slide()?;
            let mut enc = opts.encoder.clone().unwrap_or(EncoderSpec::oracle(0.0, cfg.seed));
            let target = opts.calibrate.or(opts.encoder.is_none().then_some(0.3));
            let mut calibrated = None;
            if let (Some(target), EncoderSpec::Oracle { seed, wavelengths, .. }) = (target, &enc) {
                let (sigma, acc) = calibrate_oracle_sigma(&s, &enc, target, &seeds, &sc)?;
                enc = EncoderSpec::Oracle { sigma, seed: *seed, wavelengths: *wavelengths };
                calibrated = Some((target, sigma, acc));
            }
            let ns = opts.neighborhoods.clone().unwrap_or_else(|| (0..=5).collect());
            let gaps = opts.values_um.clone().unwrap_or_else(|| vec![0.0, 250.0]);
            let mut report = neighborhood_sweep(&s, &enc, &ns, &gaps, &seeds, &sc)?;
            if let Some((target, sigma, acc)) = calibrated {
                report.push("calibration", format!("target_accuracy={target}"), "oracle_sigma", &[sigma]);
                report.push("calibration", format!("target_accuracy={target}"), "n0_accuracy", &[acc]);
            }
            csv(&report)
        }
        "resolution" => {
            let mpps = opts.mpps.clone().unwrap_or_else(|| vec![0.25, 0.5, 1.0, 2.0, 4.0]);
            let extent = opts.slide_size.map(|s| s as f64).unwrap_or(2048.0);
            let template = FragmentationSpec {
                layout: Layout::Quadrants,
                rotation_deg: 180.0,
                translation_px: 40.0,
                patch_size: sc.patch_size,
                ..Default::default()
            };
            let enc = opts.encoder.clone().unwrap_or(EncoderSpec::Baseline { grid: DEFAULT_BASELINE_GRID });
            csv(&resolution_sweep(extent, &mpps, &template, &enc, &seeds, &sc, PoseTolerance::default(), opts.timing)?)
        }
        _ => unreachable!("checked against EXPERIMENT_IDS"),
    }
}

// ---------------------------------------------------------------------------
// encode

/// What `encode` computes for a request.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodeKind {
    /// Each patch's mean byte value, replicated `dim` times.
    Loopback { dim: usize },
    /// A built-in pixel encoder (baseline or NCC).
    Builtin(EncoderSpec),
}

/// Answer one bridge request: read `request`, write `response`. With the
/// loopback kind the binary serves as its own reference bridge.
pub fn cmd_encode(request: &Path, response: &Path, kind: &EncodeKind) -> Result<FeatureBatch> {
    let batch = read_request(request)?;
    let out = match kind {
        EncodeKind::Loopback { dim } => loopback_features(&batch, *dim),
        EncodeKind::Builtin(spec) => {
            if !spec.needs_pixels() || matches!(spec, EncoderSpec::External { .. }) {
                return Err(Error::Config(format!("{} cannot serve bridge requests", spec.name())));
            }
            if batch.height != batch.width {
                return Err(Error::Protocol(format!("patches must be square, got {}x{}", batch.width, batch.height)));
            }
            let spec = match spec {
                EncoderSpec::Ncc { .. } => EncoderSpec::ncc(batch.width),
                other => other.clone(),
            };
            let per = batch.patch_len();
            let frame = PatchFrame {
                center: [0.0, 0.0],
                tangent: [1.0, 0.0],
                normal: [0.0, 1.0],
                size: batch.width,
                boundary_index: 0,
                anchor: [0.0, 0.0],
            };
            let vectors: Vec<FeatureVector> = (0..batch.count)
                .map(|i| {
                    let p = Patch { frame, channels: batch.channels, pixels: batch.data[i * per..(i + 1) * per].to_vec(), source_center: None };
                    encode(&spec, &p)
                })
                .collect::<Result<_>>()?;
            FeatureBatch { count: batch.count, dim: spec.dim(), values: vectors.into_iter().flat_map(|v| v.0).collect() }
        }
    };
    write_features(response, &out)?;
    Ok(out)
}
