use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ovdet3d::mask_graph::MergeConfig;
use ovdet3d::ov_labeler::{LabelConfig, ProviderSpec};
use ovdet3d::scene_io::DEFAULT_POINT_CAP;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "ovdet3d", version, about = "Open-vocabulary 3D object detection from posed RGB-D frames")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class-agnostic 3D boxes for one scene.
    Detect {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        load: LoadArgs,
        #[command(flatten)]
        merge: MergeArgs,
    },
    /// Labels an existing boxes file.
    Label {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary file; defaults to the scene's vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        load: LoadArgs,
        #[command(flatten)]
        label: LabelArgs,
    },
    /// Detect followed by label.
    Pipeline {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        load: LoadArgs,
        #[command(flatten)]
        merge: MergeArgs,
        #[command(flatten)]
        label: LabelArgs,
    },
    /// Scores predictions against ground truth.
    Eval {
        /// Detections file, or a directory of `<scene_id>.json` files.
        #[arg(long)]
        preds: PathBuf,
        /// Ground-truth file, or a directory of `<scene_id>.json` files.
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Map)]
        protocol: Protocol,
        /// IoU thresholds (comma separated; one value for `binary`).
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5")]
        iou: Vec<f64>,
        /// Confidence threshold, required by `binary`.
        #[arg(long)]
        conf: Option<f64>,
        /// Report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes class-agnostic pseudo-label files, one per scene.
    ExportPseudo {
        /// A manifest, a scene directory, or a directory of scene directories.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        load: LoadArgs,
        #[command(flatten)]
        merge: MergeArgs,
    },
    /// Writes the analytic three-cuboid test scene.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serves the fake provider over stdin/stdout.
    ServeFake {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Enables label-map embeddings with this scene's vocabulary.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Map,
    Binary,
}

#[derive(Clone, Debug, Args)]
pub struct LoadArgs {
    #[arg(long, default_value_t = DEFAULT_POINT_CAP)]
    pub point_cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames kept per scene, sampled with a uniform stride (0 = all).
    #[arg(long, default_value_t = 45)]
    pub max_frames: usize,
    /// Occlusion threshold, meters; used by detection and labeling.
    #[arg(long, default_value_t = 0.1)]
    pub tau_occ: f64,
}

#[derive(Clone, Debug, Args)]
pub struct MergeArgs {
    #[arg(long, default_value_t = 0.9)]
    pub tau_rate: f64,
    /// Minimum observer counts, one merge round each.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub merge_schedule: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub min_points: usize,
    #[arg(long, default_value_t = 0.8)]
    pub tau_contain: f64,
    #[arg(long, default_value_t = 0.04)]
    pub contain_radius: f64,
    #[arg(long, default_value_t = 100)]
    pub min_mask_pixels: usize,
    #[arg(long, default_value_t = 25)]
    pub min_visible_points: usize,
}

#[derive(Clone, Debug, Args)]
pub struct LabelArgs {
    #[arg(long, default_value_t = 5)]
    pub k_views: usize,
    #[arg(long, value_delimiter = ',', default_value = "1.0,1.5,2.0")]
    pub scales: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms_iou: f64,
    /// `cmd:<argv>`, `tcp:<host>:<port>` or `fake[:seed]`.
    #[arg(long, default_value = "fake")]
    pub provider: String,
}

/// Everything that determines a run's output, echoed into run metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub point_cap: usize,
    pub seed: u64,
    pub max_frames: usize,
    pub tau_occ: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelEcho>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MergeEcho {
    pub tau_rate: f64,
    pub observer_schedule: Vec<usize>,
    pub tau_contain: f64,
    pub contain_radius: f64,
    pub min_points: usize,
    pub min_mask_pixels: usize,
    pub min_visible_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelEcho {
    pub k_views: usize,
    pub scales: Vec<f64>,
    pub temperature: f64,
    pub nms_iou: f64,
    pub provider: String,
}

impl MergeArgs {
    pub fn to_config(&self, tau_occ: f64) -> Result<MergeConfig, CliError> {
        let c = MergeConfig {
            tau_rate: self.tau_rate,
            observer_schedule: self.merge_schedule.clone(),
            tau_contain: self.tau_contain,
            contain_radius: self.contain_radius,
            min_points: self.min_points,
            min_mask_pixels: self.min_mask_pixels,
            min_visible_points: self.min_visible_points,
            tau_occ,
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn echo(&self) -> MergeEcho {
        MergeEcho {
            tau_rate: self.tau_rate,
            observer_schedule: self.merge_schedule.clone(),
            tau_contain: self.tau_contain,
            contain_radius: self.contain_radius,
            min_points: self.min_points,
            min_mask_pixels: self.min_mask_pixels,
            min_visible_points: self.min_visible_points,
        }
    }
}

impl LabelArgs {
    pub fn to_config(&self, tau_occ: f64) -> Result<(LabelConfig, ProviderSpec), CliError> {
        let c = LabelConfig {
            k_views: self.k_views,
            scales: self.scales.clone(),
            temperature: self.temperature,
            nms_iou: self.nms_iou,
            tau_occ,
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let spec: ProviderSpec = self.provider.parse().map_err(CliError::Config)?;
        Ok((c, spec))
    }

    pub fn echo(&self) -> LabelEcho {
        LabelEcho {
            k_views: self.k_views,
            scales: self.scales.clone(),
            temperature: self.temperature,
            nms_iou: self.nms_iou,
            provider: self.provider.clone(),
        }
    }
}

impl RunConfig {
    pub fn new(load: &LoadArgs, merge: Option<&MergeArgs>, label: Option<&LabelArgs>) -> Self {
        Self {
            point_cap: load.point_cap,
            seed: load.seed,
            max_frames: load.max_frames,
            tau_occ: load.tau_occ,
            merge: merge.map(MergeArgs::echo),
            label: label.map(LabelArgs::echo),
        }
    }
}
