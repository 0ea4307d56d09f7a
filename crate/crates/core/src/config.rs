//! Experiment configuration: one JSON document with sections for data,
//! model, training, evaluation, splits, shots and baselines. Every field has
//! a default; unknown keys are rejected at parse time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// One conv layer of a backbone description: output channels and stride.
pub type LayerSpec = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HookChoice {
    Early,
    Mid,
    Late,
    LateHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookSites {
    pub early: usize,
    pub mid: usize,
    pub late: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub backbone: Vec<LayerSpec>,
    /// Hidden layers of the reweighting network; a final linear conv down to
    /// the modulated channel count plus global max pooling is appended.
    pub reweighter_hidden: Vec<LayerSpec>,
    pub hook_sites: HookSites,
    pub hook: HookChoice,
    /// Anchor priors in grid-cell units; `None` derives them by k-means over
    /// the training boxes (falling back to a fixed list).
    pub anchors: Option<Vec<(f64, f64)>>,
    pub anchor_count: usize,
    pub leaky_slope: f64,
    /// Per-channel spatial normalization inside backbone convolutions
    /// (single-image statistics, deterministic).
    pub normalize: bool,
    /// Normalization inside the reweighting network's hidden layers. Off by
    /// default: the embedding's global max pool needs absolute activation
    /// magnitudes to stay class-discriminative.
    pub reweighter_normalize: bool,
    /// Restrict the embedding max pool to cells covered by the support mask,
    /// tying the vector to the indicated object rather than the whole frame.
    pub masked_pool: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale backbone: stride 16 at 128x128 input, 64-channel hooks.
        ModelConfig {
            input_resolution: 128,
            backbone: vec![
                (12, 2),
                (16, 2),
                (24, 1),
                (32, 2),
                (48, 1),
                (64, 2),
                (64, 1),
                (64, 1),
            ],
            reweighter_hidden: vec![(12, 2), (16, 2), (24, 2), (32, 2)],
            hook_sites: HookSites { early: 4, mid: 6, late: 7 },
            hook: HookChoice::Late,
            anchors: None,
            anchor_count: 4,
            leaky_slope: 0.1,
            normalize: true,
            reweighter_normalize: false,
            masked_pool: true,
            seed: 11,
        }
    }
}

impl ModelConfig {
    /// A larger configuration mirroring full-scale training (416 input,
    /// stride 32). Provided for completeness; untrained presets only.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_resolution: 416,
            backbone: vec![
                (32, 2),
                (64, 2),
                (128, 1),
                (128, 2),
                (256, 1),
                (256, 2),
                (512, 1),
                (512, 2),
                (1024, 1),
                (1024, 1),
            ],
            reweighter_hidden: vec![(32, 2), (64, 2), (128, 2), (256, 2), (512, 2)],
            hook_sites: HookSites { early: 6, mid: 8, late: 9 },
            hook: HookChoice::Late,
            anchors: None,
            anchor_count: 5,
            leaky_slope: 0.1,
            normalize: true,
            reweighter_normalize: false,
            masked_pool: true,
            seed: 11,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.backbone.iter().map(|l| l.1).product()
    }

    /// Output grid side length.
    pub fn grid_size(&self) -> usize {
        self.input_resolution / self.total_stride()
    }

    pub fn hook_index(&self) -> usize {
        match self.hook {
            HookChoice::Early => self.hook_sites.early,
            HookChoice::Mid => self.hook_sites.mid,
            HookChoice::Late | HookChoice::LateHalf => self.hook_sites.late,
        }
    }

    pub fn hook_index_by_name(&self, name: &str) -> Result<usize, ConfigError> {
        match name {
            "early" => Ok(self.hook_sites.early),
            "mid" => Ok(self.hook_sites.mid),
            "late" | "late-half" => Ok(self.hook_sites.late),
            other => Err(invalid(format!(
                "unknown hook site '{other}' (expected early, mid, late or late-half)"
            ))),
        }
    }

    /// Channel count at the configured hook site.
    pub fn hook_channels(&self) -> usize {
        self.backbone[self.hook_index()].0
    }

    /// Number of channels the reweighting vector modulates.
    pub fn modulated_channels(&self) -> usize {
        match self.hook {
            HookChoice::LateHalf => self.hook_channels() / 2,
            _ => self.hook_channels(),
        }
    }

    /// Spatial side length of the hook site's feature map.
    pub fn hook_spatial(&self) -> usize {
        let stride: usize = self.backbone[..=self.hook_index()].iter().map(|l| l.1).product();
        self.input_resolution / stride
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.backbone.is_empty() {
            return Err(invalid("backbone must have at least one layer"));
        }
        let stride = self.total_stride();
        if self.input_resolution % stride != 0 {
            return Err(invalid(format!(
                "input resolution {} not divisible by total backbone stride {}",
                self.input_resolution, stride
            )));
        }
        for (name, idx) in [
            ("early", self.hook_sites.early),
            ("mid", self.hook_sites.mid),
            ("late", self.hook_sites.late),
        ] {
            if idx >= self.backbone.len() {
                return Err(invalid(format!(
                    "hook site '{name}' index {idx} out of range for a {}-layer backbone",
                    self.backbone.len()
                )));
            }
        }
        if self.hook == HookChoice::LateHalf && self.hook_channels() % 2 != 0 {
            return Err(invalid("late-half requires an even channel count at the late site"));
        }
        let rw_stride: usize = self.reweighter_hidden.iter().map(|l| l.1).product();
        let needed = self.input_resolution / self.hook_spatial();
        if rw_stride != needed {
            return Err(invalid(format!(
                "reweighter downsampling x{} must reach the hook site scale (x{} needed)",
                rw_stride, needed
            )));
        }
        if self.anchor_count == 0 {
            return Err(invalid("anchor_count must be >= 1"));
        }
        if let Some(anchors) = &self.anchors {
            if anchors.is_empty() {
                return Err(invalid("explicit anchor list must be nonempty"));
            }
            if anchors.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
                return Err(invalid("anchor dimensions must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Softmax,
    SingleBinary,
    MultiBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectnessTarget {
    /// Regress positives toward 1.
    One,
    /// Regress positives toward the predicted box's IoU with its ground
    /// truth (treated as a constant at each step).
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Weight of the classification term. The box and objectness terms are
    /// sum-reduced while classification is mean-reduced, so parity between
    /// them at desk scale needs a far larger multiplier than 1.
    pub lambda_cls: f64,
    pub lambda_coord: f64,
    pub lambda_obj: f64,
    pub lambda_noobj: f64,
    pub ignore_threshold: f64,
    pub objectness_target: ObjectnessTarget,
    /// When set, keep only this fraction of negative anchors per episode
    /// (drawn deterministically from the episode RNG).
    pub negative_subsample: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::Softmax,
            lambda_cls: 20.0,
            lambda_coord: 5.0,
            lambda_obj: 1.0,
            lambda_noobj: 0.5,
            ignore_threshold: 0.6,
            objectness_target: ObjectnessTarget::One,
            negative_subsample: Some(0.15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Piecewise-constant schedule: (start iteration, learning rate), with
    /// start iterations strictly increasing from 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Evaluation cadence in iterations; `None` means max(50, iterations/40).
    pub eval_every: Option<usize>,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            iterations: 1500,
            batch_size: 6,
            lr_schedule: vec![(0, 1e-4), (30, 1e-3), (1280, 1e-4)],
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: Some(50.0),
            eval_every: None,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return Err(invalid("lr_schedule must start at iteration 0"));
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(invalid("lr_schedule start iterations must be strictly increasing"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn eval_cadence(&self) -> usize {
        self.eval_every.unwrap_or_else(|| (self.iterations / 40).max(50))
    }
}

/// The full-scale base schedule: 1e-4 warmup, 1e-3 until 50%, then 1e-4 and
/// 1e-5 steps (breaks at 500 / 40000 / 60000 of 80000 iterations), rescaled
/// proportionally to the requested iteration count.
pub fn scaled_schedule(iterations: usize) -> Vec<(usize, f64)> {
    let f = iterations as f64 / 80_000.0;
    let at = |full: usize| ((full as f64 * f).round() as usize).max(1);
    vec![
        (0, 1e-4),
        (at(500), 1e-3),
        (at(40_000), 1e-4),
        (at(60_000), 1e-5),
    ]
}

/// Learning rate at an iteration under a piecewise-constant schedule.
pub fn lr_at(schedule: &[(usize, f64)], iteration: usize) -> f64 {
    let mut lr = schedule.first().map(|&(_, lr)| lr).unwrap_or(0.0);
    for &(start, value) in schedule {
        if iteration >= start {
            lr = value;
        }
    }
    lr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base: PhaseConfig,
    pub finetune: PhaseConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Random per-iteration input resolutions (multi-scale training); `None`
    /// trains at the model's fixed resolution.
    pub multiscale: Option<Vec<usize>>,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base: PhaseConfig::default(),
            finetune: PhaseConfig {
                iterations: 240,
                batch_size: 6,
                lr_schedule: vec![(0, 1e-3)],
                momentum: 0.9,
                weight_decay: 5e-4,
                grad_clip: Some(50.0),
                eval_every: None,
            },
            loss: LossConfig::default(),
            seed: 13,
            multiscale: None,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings mirroring the published recipe: 80k base
    /// iterations at batch 64, 1500 fine-tune iterations at a constant 1e-3.
    pub fn full_scale() -> Self {
        TrainConfig {
            base: PhaseConfig {
                iterations: 80_000,
                batch_size: 64,
                lr_schedule: vec![(0, 1e-4), (500, 1e-3), (40_000, 1e-4), (60_000, 1e-5)],
                momentum: 0.9,
                weight_decay: 5e-4,
                grad_clip: Some(50.0),
                eval_every: None,
            },
            finetune: PhaseConfig {
                iterations: 1500,
                batch_size: 64,
                lr_schedule: vec![(0, 1e-3)],
                momentum: 0.9,
                weight_decay: 5e-4,
                grad_clip: Some(50.0),
                eval_every: None,
            },
            loss: LossConfig::default(),
            seed: 13,
            multiscale: Some(vec![320, 352, 384, 416, 448]),
            flip_augment: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.base.validate()?;
        self.finetune.validate()?;
        if let Some(scales) = &self.multiscale {
            if scales.is_empty() {
                return Err(invalid("multiscale list must be nonempty when set"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// VOC2007 11-point interpolation.
    #[serde(rename = "11point")]
    ElevenPoint,
    /// Area under the interpolated precision envelope.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Cap on evaluation images during periodic training snapshots.
    pub snapshot_images: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            ap_mode: ApMode::ElevenPoint,
            score_threshold: 0.005,
            nms_threshold: 0.45,
            snapshot_images: Some(120),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0 < self.nms_threshold && self.nms_threshold < 1.0) {
            return Err(invalid("nms_threshold must lie in (0, 1)"));
        }
        if !(0.0 < self.iou_threshold && self.iou_threshold < 1.0) {
            return Err(invalid("iou_threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub n_novel: usize,
    /// One of the named preset splits (1..=3) of the synthetic benchmark;
    /// `None` draws a split from `seed`.
    pub preset: Option<usize>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n_novel: 4, preset: Some(1), seed: 23 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotsConfig {
    pub k: usize,
    pub k_list: Vec<usize>,
    pub seed: u64,
}

impl Default for ShotsConfig {
    fn default() -> Self {
        ShotsConfig { k: 10, k_list: vec![1, 2, 3, 5, 10], seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesConfig {
    /// Iteration cap for the run-to-convergence fine-tune baseline.
    pub ft_full_cap: usize,
    /// Plateau rule: stop once novel mAP improves by less than this (0-1
    /// scale) over the trailing evaluation window.
    pub plateau_delta: f64,
    pub plateau_window: usize,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        BaselinesConfig { ft_full_cap: 1200, plateau_delta: 0.005, plateau_window: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: crate::data::SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    pub shots: ShotsConfig,
    pub baselines: BaselinesConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate().map_err(|e| invalid(format!("data: {e}")))?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.split.n_novel == 0 || self.split.n_novel >= self.data.n_classes() {
            return Err(invalid(format!(
                "n_novel must lie in 1..{} (got {})",
                self.data.n_classes(),
                self.split.n_novel
            )));
        }
        if let Some(p) = self.split.preset {
            if !(1..=3).contains(&p) {
                return Err(invalid("split preset must be 1, 2 or 3"));
            }
        }
        if self.shots.k == 0 || self.shots.k_list.iter().any(|&k| k == 0) {
            return Err(invalid("shot counts must be >= 1"));
        }
        Ok(())
    }
}
