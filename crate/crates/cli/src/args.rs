use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use xcorr::dataset::Split;
use xcorr::geometry::ProjectionMode;
use xcorr::matcher::{BiasSource, Fusion};

/// Parses a value through its serde representation, so the CLI accepts the
/// same spellings as the JSON files.
fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "xcorr", about = "Synthetic X-ray views, correspondence ground truth, and a small matcher")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object whose keys override the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output; repeat for trace.
    #[arg(long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize a phantom spec (or a random limb) to a volume.
    Phantom(PhantomArgs),
    /// Render a DRR of a volume.
    Render(RenderArgs),
    /// Correspondence matrix between two views of a volume.
    Corrgen(CorrgenArgs),
    /// Generate a randomized view-pair dataset.
    Dataset(DatasetArgs),
    /// Train the matcher on correspondence prediction.
    Train(TrainArgs),
    /// Continue correspondence training from a checkpoint.
    Finetune(FinetuneArgs),
    /// Correspondence metrics of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate a view-pair classifier.
    Classify(ClassifyArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomArgs {
    /// Phantom spec JSON.
    #[arg(long, conflicts_with = "limb_seed", required_unless_present = "limb_seed")]
    pub spec: Option<PathBuf>,
    /// Generate a random limb phantom with this seed instead of reading a spec.
    #[arg(long)]
    pub limb_seed: Option<u64>,
    /// Edge length in voxels of the random limb.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output volume; the header is written next to it with a `.json` suffix.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the phantom spec used.
    #[arg(long)]
    pub save_spec: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderArgs {
    /// Volume payload (header at `<path>.json`) or a header-first JSON file.
    #[arg(long)]
    pub volume: PathBuf,
    /// Geometry JSON; the inline flags below override its fields.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long, value_parser = serde_value::<ProjectionMode>)]
    pub mode: Option<ProjectionMode>,
    /// Yaw,pitch,roll in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub rotation_deg: Option<Vec<f64>>,
    #[arg(long)]
    pub source_distance_mm: Option<f64>,
    /// nu,nv,du_mm,dv_mm,distance_mm.
    #[arg(long, value_delimiter = ',')]
    pub detector: Option<Vec<f64>>,
    /// 16-bit PGM output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional raw f32 output.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Also render with the ray-marching oracle and print the relative L2 difference.
    #[arg(long)]
    pub oracle: bool,
    /// Oracle step as a fraction of the smallest voxel spacing.
    #[arg(long, default_value_t = 0.125)]
    pub oracle_step: f64,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrgenArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub geometry1: PathBuf,
    #[arg(long)]
    pub geometry2: PathBuf,
    /// Downsampling factor for the volume and detectors.
    #[arg(long, default_value_t = xcorr::correspondence::DEFAULT_K)]
    pub k: usize,
    /// Output directory for corr.bin, corr.pgm, view1.pgm, view2.pgm.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Store the matrix scaled to a maximum of 1.
    #[arg(long)]
    pub normalize: bool,
    /// Also write corr.csv.
    #[arg(long)]
    pub csv: bool,
    /// Compare against the brute-force oracle and print the largest difference.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetArgs {
    /// Variation JSON with angle ranges in degrees (`view1_angles_deg`, `view2_angles_deg`).
    #[arg(long)]
    pub variations: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Downsampling factor; must equal the matcher patch size for training.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Directory of volumes (every file with a `.json` header beside it).
    #[arg(long, group = "source")]
    pub volumes: Option<PathBuf>,
    /// Directory of phantom spec JSON files.
    #[arg(long, group = "source")]
    pub specs: Option<PathBuf>,
    /// Procedural phantoms: `limb` or `anomaly`.
    #[arg(long, group = "source")]
    pub synthetic: Option<String>,
    /// Number of procedural phantoms.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Edge length in voxels of procedural phantoms.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Seed of the first procedural phantom; later ones count up.
    #[arg(long, default_value_t = 0)]
    pub phantom_seed: u64,
    /// Anomaly strength (1/mm) for `--synthetic anomaly`.
    #[arg(long, default_value_t = 0.06)]
    pub delta: f64,
    /// Re-derive 10% of the samples and check them.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Matcher config JSON; defaults apply when absent.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Output checkpoint; the history is written to `<out>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate (default: the config's `lr_pretrain`).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate (default: the config's `lr_finetune`).
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate; all samples when absent.
    #[arg(long, value_parser = serde_value::<Split>)]
    pub split: Option<Split>,
    #[arg(long, default_value_t = xcorr::correspondence::DEFAULT_GT_THRESHOLD)]
    pub tau_gt: f64,
    #[arg(long, default_value_t = xcorr::metrics::DEFAULT_PRED_THRESHOLD)]
    pub tau_pred: f64,
    /// CSV to append the aggregate row to.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV with one row per sample.
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Correspondence checkpoint for `--pretrained` and `--bias predicted`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "early", value_parser = serde_value::<Fusion>)]
    pub fusion: Fusion,
    /// none, gt, or predicted.
    #[arg(long, default_value = "none", value_parser = serde_value::<BiasSource>)]
    pub bias: BiasSource,
    /// Initialize from the checkpoint instead of at random.
    #[arg(long)]
    pub pretrained: bool,
    /// Matcher config JSON for a randomly initialized model.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial learning rate (default: `lr_finetune` when pretrained, else `lr_pretrain`).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save the trained classifier.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV to append the test metrics to.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Number of random models, seeded 0, 1, ...
    #[arg(long, default_value_t = 1)]
    pub models: u64,
    /// Token grid per view as rows,cols.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub grid: Vec<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}
