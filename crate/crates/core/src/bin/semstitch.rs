use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use semstitch::cli::{
    cmd_encode, cmd_evaluate, cmd_fragment, cmd_stitch, EncodeKind, EncoderKind, EvalOptions, ImageFormat, RunConfig,
    RunOverrides, SlideSource, EXPERIMENT_IDS,
};
use semstitch::encoder::EncoderSpec;
use semstitch::harness::{FragmentationSpec, Layout};

/// Reassemble tissue fragments into a whole-mount image by matching
/// boundary patch embeddings.
#[derive(Parser)]
#[command(name = "semstitch", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Pipeline settings. Precedence: flag, then --config file, then default.
#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (same keys as the defaults below).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice [default: 42].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores [default: 0].
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Resolution for segmentation and matching, µm/px [default: 1.0].
    #[arg(long, global = true)]
    processing_mpp: Option<f64>,
    /// Resolution of the rendered composite, µm/px [default: 0.25].
    #[arg(long, global = true)]
    output_mpp: Option<f64>,
    /// Patch side in pixels [default: 224].
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    /// Arc length between patch anchors, pixels [default: 112].
    #[arg(long, global = true)]
    stride: Option<f64>,
    /// Context-stack radius n [default: 3].
    #[arg(long, global = true)]
    neighborhood: Option<usize>,
    /// Encoder: baseline, ncc, oracle or external [default: baseline].
    #[arg(long, global = true)]
    encoder: Option<EncoderKind>,
    /// Oracle encoder noise [default: 0].
    #[arg(long, global = true)]
    oracle_sigma: Option<f64>,
    /// External bridge command; SEMSTITCH_BRIDGE overrides it [default: none].
    #[arg(long, global = true)]
    bridge: Option<String>,
    /// External embedding width [default: 1024].
    #[arg(long, global = true)]
    bridge_dim: Option<usize>,
    /// RANSAC inlier threshold, pixels [default: 500].
    #[arg(long, global = true)]
    ransac_threshold: Option<f64>,
    /// RANSAC iterations [default: 1000].
    #[arg(long, global = true)]
    ransac_iterations: Option<usize>,
    /// Correspondences per RANSAC hypothesis [default: 6].
    #[arg(long, global = true)]
    ransac_sample: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let o = RunOverrides {
            processing_mpp: self.processing_mpp,
            output_mpp: self.output_mpp,
            patch_size: self.patch_size,
            stride: self.stride,
            neighborhood: self.neighborhood,
            encoder: self.encoder,
            oracle_sigma: self.oracle_sigma,
            bridge: self.bridge.clone(),
            bridge_dim: self.bridge_dim,
            ransac_threshold: self.ransac_threshold,
            ransac_iterations: self.ransac_iterations,
            ransac_sample: self.ransac_sample,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            threads: self.threads,
        };
        let cfg = RunConfig::resolve(self.config.as_deref(), &o)?;
        semstitch::parallel::set_threads(cfg.threads);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stitch fragment images; writes composite and manifest.json. Exit 0
    /// on a full mosaic, 2 on a partial one, 1 on error.
    Stitch {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Input resolution, µm/px, when files carry none [default: sidecar, else 0.25].
        #[arg(long)]
        mpp: Option<f64>,
        /// ground_truth.json giving slide poses (needed by the oracle encoder).
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Composite format: png or tif.
        #[arg(long, default_value = "png")]
        format: ImageFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Cut a slide into fragments with known poses; writes PNGs and
    /// ground_truth.json.
    Fragment {
        /// Slide image; omit to generate a synthetic slide.
        slide: Option<PathBuf>,
        /// Slide resolution, µm/px [default: sidecar, else 0.25; synthetic 1.0].
        #[arg(long)]
        mpp: Option<f64>,
        /// Side of the synthetic slide in pixels (at 1 µm/px).
        #[arg(long, default_value_t = 2048)]
        synthetic_size: usize,
        /// halves, quadrants or RxC.
        #[arg(long, default_value = "quadrants")]
        layout: String,
        /// Strip removed along every cut, µm.
        #[arg(long, default_value_t = 0.0)]
        gap_um: f64,
        /// Edge-trim fraction range, "lo,hi".
        #[arg(long, default_value = "0,0")]
        edge_trim: String,
        /// Rotation drawn from ±this, degrees.
        #[arg(long, default_value_t = 0.0)]
        rotation_deg: f64,
        /// Translation per axis drawn from ±this, pixels.
        #[arg(long, default_value_t = 0.0)]
        translation_px: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Run a harness experiment and write CSV reports.
    Evaluate {
        /// boundary-match, spatial, match-vs-gap, similarity-vs-offset,
        /// rotation, neighborhood or resolution.
        experiment: String,
        /// Slide image; omit for a synthetic slide.
        #[arg(long)]
        slide: Option<PathBuf>,
        /// Slide resolution, µm/px [default: sidecar, else 0.25].
        #[arg(long)]
        slide_mpp: Option<f64>,
        /// Synthetic slide side in pixels, or extent in µm for resolution [default: 2048].
        #[arg(long)]
        slide_size: Option<usize>,
        /// Trials (seeds) per sweep point [default: 3].
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated gaps or offsets, µm [default: 0,100,...,900; neighborhood 0,250; spatial 0].
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Comma-separated neighbourhood radii [default: 0,1,2,3,4,5].
        #[arg(long, value_delimiter = ',')]
        neighborhoods: Option<Vec<usize>>,
        /// Comma-separated resolutions, µm/px [default: 0.25,0.5,1,2,4].
        #[arg(long, value_delimiter = ',')]
        mpps: Option<Vec<f64>>,
        /// Rotation step, degrees [default: 15].
        #[arg(long)]
        rotation_step: Option<f64>,
        /// Single-frame accuracy the oracle noise is tuned to [default: 0.3 without --encoder].
        #[arg(long)]
        calibrate: Option<f64>,
        /// Add wall-clock rows (not reproducible) [default: off].
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Answer one encoder-bridge request: read REQUEST, write RESPONSE.
    Encode {
        request: PathBuf,
        response: PathBuf,
        /// loopback, baseline or ncc.
        #[arg(long, default_value = "loopback")]
        kind: String,
        /// Loopback embedding width.
        #[arg(long, default_value_t = 8)]
        dim: usize,
    },
}

fn parse_layout(s: &str) -> Result<Layout> {
    Ok(match s {
        "halves" => Layout::Halves,
        "quadrants" => Layout::Quadrants,
        grid => {
            let (r, c) = grid.split_once('x').with_context(|| format!("layout {grid:?}: expected halves, quadrants or RxC"))?;
            Layout::Grid { rows: r.parse()?, cols: c.parse()? }
        }
    })
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(',').with_context(|| format!("range {s:?}: expected lo,hi"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Stitch { inputs, mpp, ground_truth, format, common } => {
            let cfg = common.resolve()?;
            let s = cmd_stitch(&inputs, mpp, ground_truth.as_deref(), format, &cfg)?;
            let m = &s.manifest;
            eprintln!("{} merges; wrote {} and {}", m.merges.len(), s.composite.display(), s.manifest_path.display());
            if !m.complete {
                eprintln!("partial mosaic: {} fragments left unmerged", m.fragments.iter().filter(|f| f.group != 0).count());
            }
            Ok(s.exit_code())
        }
        Command::Fragment {
            slide,
            mpp,
            synthetic_size,
            layout,
            gap_um,
            edge_trim,
            rotation_deg,
            translation_px,
            common,
        } => {
            let cfg = common.resolve()?;
            let source = match slide {
                Some(path) => SlideSource::File { path, mpp },
                None => SlideSource::Synthetic { seed: cfg.seed, size: synthetic_size, mpp: mpp.unwrap_or(1.0) },
            };
            let spec = FragmentationSpec {
                layout: parse_layout(&layout)?,
                gap_um,
                edge_trim: parse_range(&edge_trim)?,
                rotation_deg,
                translation_px,
                patch_size: cfg.patch_size,
                seed: cfg.seed,
                ..Default::default()
            };
            let gt = cmd_fragment(&source, &spec, &cfg.out_dir)?;
            eprintln!("{} fragments, {} seams in {}", gt.fragments.len(), gt.seams.len(), cfg.out_dir.display());
            Ok(0)
        }
        Command::Evaluate {
            experiment,
            slide,
            slide_mpp,
            slide_size,
            trials,
            values,
            neighborhoods,
            mpps,
            rotation_step,
            calibrate,
            timing,
            common,
        } => {
            if !EXPERIMENT_IDS.contains(&experiment.as_str()) {
                anyhow::bail!("unknown experiment {experiment:?}; valid ids: {}", EXPERIMENT_IDS.join(", "));
            }
            let cfg = common.resolve()?;
            let opts = EvalOptions {
                slide,
                slide_mpp,
                slide_size,
                trials,
                encoder: common.encoder.is_some().then(|| cfg.encoder.clone()),
                values_um: values,
                neighborhoods,
                mpps,
                rotation_step,
                calibrate,
                timing,
            };
            for p in cmd_evaluate(&experiment, &opts, &cfg)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Encode { request, response, kind, dim } => {
            let kind = match kind.as_str() {
                "loopback" => EncodeKind::Loopback { dim },
                "baseline" => EncodeKind::Builtin(EncoderSpec::Baseline { grid: 8 }),
                "ncc" => EncodeKind::Builtin(EncoderSpec::ncc(0)),
                other => anyhow::bail!("unknown encode kind {other:?} (loopback, baseline, ncc)"),
            };
            cmd_encode(&request, &response, &kind)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
