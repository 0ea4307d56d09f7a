//! Two-phase learning scheme: episodic base training over the base classes,
//! then few-shot fine-tuning on an exact-k set over base plus novel classes.
//! Also trains the plain-detector baselines (joint, fine-tune, fine-tune to
//! convergence) against the same data and schedules.

use crate::config::{lr_at, BaselinesConfig, ExperimentConfig, LossConfig, LossVariant, PhaseConfig};
use crate::data::{derive_rng, prepare_input, Dataset};
use crate::episodes::{
    build_finetune_set, materialize_support, sample_base_episode, sample_episode,
    sample_finetune_episode, ClassSplit, EpisodeError, FewShotTask, FinetuneSet,
};
use crate::eval::{evaluate, EvalReport};
use crate::geometry::{
    encode_targets_with_ignore, AnchorFlag, Anchor, BBox, Detection, GridSpec, TargetTensor,
};
use crate::loss::{total_loss, BranchGeometry, LossBreakdown, LossError};
use crate::model::{
    ClassCodebook, FewShotDetector, ModelError, ModelGrad, PlainDetector, PlainGrad,
    SupportExample,
};
use crate::nn::{ConvGrad, Sgd};
use ndarray::{Array3, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

const STREAM_SB_CLASS: u64 = 0x5342434c; // "SBCL"
const STREAM_NEG: u64 = 0x4e454753; // "NEGS"
const STREAM_SNAP: u64 = 0x534e4150; // "SNAP"
const STREAM_SCALE: u64 = 0x4d534346; // multi-scale choice

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: total loss = {total}")]
    Diverged { iteration: usize, total: f64 },
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Everything a training phase needs to see.
pub struct TrainContext<'a> {
    pub exp: &'a ExperimentConfig,
    pub train: &'a Dataset,
    pub eval: Option<&'a Dataset>,
    pub split: &'a ClassSplit,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalSnapshot {
    pub iteration: usize,
    pub base_map: Option<f64>,
    pub novel_map: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterEntry {
    pub iteration: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_bbx: f64,
    pub l_obj: f64,
    pub total: f64,
}

/// Per-iteration loss log plus periodic evaluation snapshots.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub entries: Vec<IterEntry>,
    pub snapshots: Vec<EvalSnapshot>,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    /// CSV export: iteration, lr, loss components, and mAP columns filled on
    /// snapshot iterations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,lr,l_cls,l_bbx,l_obj,total,base_mAP,novel_mAP\n");
        for e in &self.entries {
            let snap = self.snapshots.iter().find(|s| s.iteration == e.iteration);
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.9},{:.9},{:.9},{:.9},{},{}",
                e.iteration,
                e.lr,
                e.l_cls,
                e.l_bbx,
                e.l_obj,
                e.total,
                fmt(snap.and_then(|s| s.base_map)),
                fmt(snap.and_then(|s| s.novel_map)),
            );
        }
        out
    }

    /// (iteration, novel mAP) curve from the snapshots.
    pub fn novel_curve(&self) -> Vec<(usize, f64)> {
        self.snapshots
            .iter()
            .filter_map(|s| s.novel_map.map(|m| (s.iteration, m)))
            .collect()
    }

    pub fn final_base_map(&self) -> Option<f64> {
        self.snapshots.iter().rev().find_map(|s| s.base_map)
    }

    pub fn final_novel_map(&self) -> Option<f64> {
        self.snapshots.iter().rev().find_map(|s| s.novel_map)
    }

    /// Deterministic summary (no timing) for manifests.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "iterations": self.entries.len(),
            "final_total_loss": self.entries.last().map(|e| e.total),
            "final_base_map": self.final_base_map(),
            "final_novel_map": self.final_novel_map(),
            "snapshots": self.snapshots,
        })
    }
}

/// Anchor priors from the config, or k-means over the training boxes.
pub fn resolve_anchors(exp: &ExperimentConfig, train: &Dataset) -> Vec<Anchor> {
    if let Some(list) = &exp.model.anchors {
        return list.iter().map(|&(pw, ph)| Anchor { pw, ph }).collect();
    }
    let s = exp.model.grid_size() as f64;
    let dims: Vec<(f64, f64)> = train
        .index
        .records
        .iter()
        .flat_map(|r| r.objects.iter())
        .map(|o| (o.bbox.w * s, o.bbox.h * s))
        .collect();
    crate::geometry::anchors_from_boxes(&dims, exp.model.anchor_count, 30)
}

fn query_input(ds: &Dataset, q: &crate::episodes::QueryRef, res: u32, stride: usize) -> Result<Array3<f64>, TrainError> {
    let (mut arr, _) = prepare_input(&ds.images[q.record_idx], res, stride)?;
    if q.flip {
        arr.invert_axis(Axis(2));
    }
    Ok(arr)
}

/// Build the target tensor for one query: boxes relabeled to active-class
/// indices, distractor regions ignore-flagged, optional negative
/// subsampling applied from a per-query stream.
fn query_targets(
    q: &crate::episodes::QueryRef,
    active: &[usize],
    grid: &GridSpec,
    loss_cfg: &LossConfig,
    seed: u64,
    query_tag: u64,
) -> Result<TargetTensor, TrainError> {
    let relabeled: Vec<BBox> = q
        .boxes
        .iter()
        .map(|b| {
            let idx = active
                .iter()
                .position(|&c| c == b.class_id)
                .expect("sampler restricts boxes to active classes");
            BBox { class_id: idx, ..*b }
        })
        .collect();
    let mut targets =
        encode_targets_with_ignore(&relabeled, &q.ignore, grid, loss_cfg.ignore_threshold)?;
    if let Some(keep) = loss_cfg.negative_subsample {
        let mut rng = derive_rng(seed, STREAM_NEG, query_tag);
        for flag in targets.flags.iter_mut() {
            if *flag == AnchorFlag::Negative && !rng.gen_bool(keep.clamp(0.0, 1.0)) {
                *flag = AnchorFlag::Ignore;
            }
        }
    }
    Ok(targets)
}

fn branch_map_for(task: &FewShotTask) -> Vec<Option<usize>> {
    task.active_classes
        .iter()
        .map(|c| task.support.iter().position(|s| s.class_id == *c))
        .collect()
}

/// One optimizer-step worth of forward/backward for the few-shot model.
/// Per-image work runs in parallel; gradients reduce in a fixed order so
/// results are independent of thread count.
#[allow(clippy::too_many_arguments)]
fn fewshot_step(
    model: &FewShotDetector,
    ds: &Dataset,
    task: &FewShotTask,
    loss_cfg: &LossConfig,
    res: u32,
    seed: u64,
    episode_idx: u64,
) -> Result<(LossBreakdown, ModelGrad), TrainError> {
    let stride = model.cfg.total_stride();
    let grid = GridSpec::new(res as usize / stride, model.anchors.clone(), task.active_classes.len())?;
    let branch_map = branch_map_for(task);

    let embedded: Vec<Result<(ndarray::Array1<f64>, crate::model::SupportCache), TrainError>> = task
        .support
        .par_iter()
        .map(|sup| {
            let ex = materialize_support(ds, sup, res, stride)?;
            Ok(model.embed_support_train(&ex)?)
        })
        .collect();
    let mut ws = Vec::with_capacity(task.support.len());
    let mut sup_caches = Vec::with_capacity(task.support.len());
    for r in embedded {
        let (w, cache) = r?;
        ws.push(w);
        sup_caches.push(cache);
    }

    let inv_batch = 1.0 / task.query.len() as f64;
    type QueryOut = (LossBreakdown, ModelGrad, Vec<ndarray::Array1<f64>>);
    let per_query: Vec<Result<QueryOut, TrainError>> = task
        .query
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let input = query_input(ds, q, res, stride)?;
            let fwd = model.forward_query_train(&input, &ws)?;
            let targets = query_targets(
                q,
                &task.active_classes,
                &grid,
                loss_cfg,
                seed,
                episode_idx * 1024 + qi as u64,
            )?;
            let (mut bd, mut draw) = total_loss(
                &fwd.branches,
                &targets,
                &branch_map,
                &grid,
                loss_cfg,
                BranchGeometry::PerClass,
            )?;
            bd.scale(inv_batch);
            for g in draw.iter_mut() {
                *g *= inv_batch;
            }
            let mut grads = model.zero_grad();
            let dws = model.backward_query(&fwd, &draw, &mut grads);
            Ok((bd, grads, dws))
        })
        .collect();

    let mut breakdown = LossBreakdown::zero();
    let mut grads = model.zero_grad();
    let mut dws_total: Vec<ndarray::Array1<f64>> =
        ws.iter().map(|w| ndarray::Array1::zeros(w.len())).collect();
    for r in per_query {
        let (bd, g, dws) = r?;
        breakdown.add(&bd);
        grads.accumulate(&g);
        for (acc, d) in dws_total.iter_mut().zip(dws) {
            *acc += &d;
        }
    }

    let sup_grads: Vec<ModelGrad> = sup_caches
        .par_iter()
        .zip(dws_total.par_iter())
        .map(|(cache, dw)| {
            let mut g = model.zero_grad();
            model.backward_support(cache, dw, &mut g);
            g
        })
        .collect();
    for g in &sup_grads {
        grads.accumulate(g);
    }
    Ok((breakdown, grads))
}

/// One optimizer-step worth of forward/backward for the plain detector.
fn plain_step(
    model: &PlainDetector,
    ds: &Dataset,
    task: &FewShotTask,
    loss_cfg: &LossConfig,
    res: u32,
    seed: u64,
    episode_idx: u64,
) -> Result<(LossBreakdown, PlainGrad), TrainError> {
    let stride = model.cfg.total_stride();
    let grid = GridSpec::new(res as usize / stride, model.anchors.clone(), task.active_classes.len())?;
    // the plain head always carries every class; branch i = global class i
    let branch_map: Vec<Option<usize>> = task.active_classes.iter().map(|&c| Some(c)).collect();
    let plain_loss = LossConfig { variant: LossVariant::Softmax, ..loss_cfg.clone() };

    let inv_batch = 1.0 / task.query.len() as f64;
    let per_query: Vec<Result<(LossBreakdown, PlainGrad), TrainError>> = task
        .query
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let input = query_input(ds, q, res, stride)?;
            let fwd = model.forward_train(&input);
            let branches = model.to_branches(&fwd.raw);
            let targets = query_targets(
                q,
                &task.active_classes,
                &grid,
                &plain_loss,
                seed,
                episode_idx * 1024 + qi as u64,
            )?;
            let (mut bd, dbranches) = total_loss(
                &branches,
                &targets,
                &branch_map,
                &grid,
                &plain_loss,
                BranchGeometry::Shared,
            )?;
            bd.scale(inv_batch);
            let mut draw = model.branch_grads_to_raw(&dbranches, grid.s);
            draw *= inv_batch;
            let mut grads = model.zero_grad();
            model.backward(&fwd, &draw, &mut grads);
            Ok((bd, grads))
        })
        .collect();

    let mut breakdown = LossBreakdown::zero();
    let mut grads = model.zero_grad();
    for r in per_query {
        let (bd, g) = r?;
        breakdown.add(&bd);
        grads.accumulate(&g);
    }
    Ok((breakdown, grads))
}

fn resolution_for_iter(exp: &ExperimentConfig, iteration: u64) -> u32 {
    match &exp.train.multiscale {
        None => exp.model.input_resolution as u32,
        Some(scales) => {
            let mut rng = derive_rng(exp.train.seed, STREAM_SCALE, iteration);
            scales[rng.gen_range(0..scales.len())] as u32
        }
    }
}

type Sampler<'s> = dyn Fn(u64) -> Result<FewShotTask, TrainError> + Sync + 's;
type SnapshotFn<'s, M> = dyn Fn(&M, usize) -> Result<EvalSnapshot, TrainError> + 's;

#[allow(clippy::too_many_arguments)]
fn run_fewshot_phase(
    model: &mut FewShotDetector,
    ctx: &TrainContext,
    phase: &PhaseConfig,
    sampler: &Sampler,
    snapshot: Option<&SnapshotFn<FewShotDetector>>,
    stop: Option<&dyn Fn(&[EvalSnapshot]) -> bool>,
) -> Result<RunRecord, TrainError> {
    let start = Instant::now();
    let mut sgd = Sgd::new(&model.layers(), phase.momentum, phase.weight_decay, phase.grad_clip);
    let cadence = phase.eval_cadence();
    let mut entries = Vec::with_capacity(phase.iterations);
    let mut snapshots = Vec::new();
    for i in 0..phase.iterations {
        let res = resolution_for_iter(ctx.exp, i as u64);
        let task = sampler(i as u64)?;
        let (bd, grads) = fewshot_step(
            model,
            ctx.train,
            &task,
            &ctx.exp.train.loss,
            res,
            ctx.exp.train.seed,
            i as u64,
        )?;
        if !bd.total.is_finite() {
            return Err(TrainError::Diverged { iteration: i, total: bd.total });
        }
        let lr = lr_at(&phase.lr_schedule, i);
        let mut flat: Vec<ConvGrad> = grads.into_flat();
        sgd.step(model.layers_mut(), &mut flat, lr);
        entries.push(IterEntry {
            iteration: i + 1,
            lr,
            l_cls: bd.l_cls,
            l_bbx: bd.l_bbx,
            l_obj: bd.l_obj,
            total: bd.total,
        });

        let due = (i + 1) % cadence == 0 || i + 1 == phase.iterations;
        if due {
            if let Some(f) = snapshot {
                snapshots.push(f(model, i + 1)?);
                if let Some(stop) = stop {
                    if stop(&snapshots) {
                        break;
                    }
                }
            }
        }
    }
    Ok(RunRecord { entries, snapshots, wall_clock_seconds: start.elapsed().as_secs_f64() })
}

#[allow(clippy::too_many_arguments)]
fn run_plain_phase(
    model: &mut PlainDetector,
    ctx: &TrainContext,
    phase: &PhaseConfig,
    iterations: usize,
    sampler: &Sampler,
    snapshot: Option<&SnapshotFn<PlainDetector>>,
    stop: Option<&dyn Fn(&[EvalSnapshot]) -> bool>,
) -> Result<RunRecord, TrainError> {
    let start = Instant::now();
    let mut sgd = Sgd::new(&model.layers(), phase.momentum, phase.weight_decay, phase.grad_clip);
    let cadence = phase.eval_cadence();
    let mut entries = Vec::with_capacity(iterations);
    let mut snapshots = Vec::new();
    for i in 0..iterations {
        let res = resolution_for_iter(ctx.exp, i as u64);
        let task = sampler(i as u64)?;
        let (bd, grads) =
            plain_step(model, ctx.train, &task, &ctx.exp.train.loss, res, ctx.exp.train.seed, i as u64)?;
        if !bd.total.is_finite() {
            return Err(TrainError::Diverged { iteration: i, total: bd.total });
        }
        let lr = lr_at(&phase.lr_schedule, i);
        let mut flat: Vec<ConvGrad> = grads.into_flat();
        sgd.step(model.layers_mut(), &mut flat, lr);
        entries.push(IterEntry {
            iteration: i + 1,
            lr,
            l_cls: bd.l_cls,
            l_bbx: bd.l_bbx,
            l_obj: bd.l_obj,
            total: bd.total,
        });
        let due = (i + 1) % cadence == 0 || i + 1 == iterations;
        if due {
            if let Some(f) = snapshot {
                snapshots.push(f(model, i + 1)?);
                if let Some(stop) = stop {
                    if stop(&snapshots) {
                        break;
                    }
                }
            }
        }
    }
    Ok(RunRecord { entries, snapshots, wall_clock_seconds: start.elapsed().as_secs_f64() })
}

/// Deterministic support shots for mid-training evaluation of the few-shot
/// model: up to `k` instances per class, fixed by the seed so consecutive
/// snapshots differ only through the model.
pub fn snapshot_codebook(
    model: &FewShotDetector,
    ds: &Dataset,
    classes: &[usize],
    seed: u64,
    k: usize,
) -> Result<ClassCodebook, TrainError> {
    let stride = model.cfg.total_stride();
    let res = model.cfg.input_resolution as u32;
    let mut shots: Vec<SupportExample> = Vec::new();
    for &class_id in classes {
        let instances = ds.index.class_instances(class_id);
        if instances.is_empty() {
            return Err(TrainError::Episode(EpisodeError::ClassWithoutAnnotations { class_id }));
        }
        let mut rng = derive_rng(seed, STREAM_SNAP, class_id as u64);
        for _ in 0..k.min(instances.len()) {
            let (record_idx, object_idx) = instances[rng.gen_range(0..instances.len())];
            let sup = crate::episodes::SupportRef { class_id, record_idx, object_idx };
            shots.push(materialize_support(ds, &sup, res, stride)?);
        }
    }
    // uneven instance counts can break the equal-k rule; fall back to k=1
    let min_per_class = classes
        .iter()
        .map(|&c| shots.iter().filter(|s| s.class_id == c).count())
        .min()
        .unwrap_or(0);
    let trimmed: Vec<SupportExample> = classes
        .iter()
        .flat_map(|&c| {
            shots
                .iter()
                .filter(|s| s.class_id == c)
                .take(min_per_class.max(1))
                .cloned()
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(model.build_codebook(&trimmed)?)
}

/// Run detection over a dataset with a frozen codebook, mapping boxes back
/// into original image coordinates.
pub fn detect_dataset_fewshot(
    model: &FewShotDetector,
    codebook: &ClassCodebook,
    ds: &Dataset,
    score_threshold: f64,
    nms_threshold: f64,
    limit: Option<usize>,
) -> Result<Vec<Vec<Detection>>, TrainError> {
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let res = model.cfg.input_resolution as u32;
    let stride = model.cfg.total_stride();
    let out: Vec<Result<Vec<Detection>, TrainError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (arr, t) = prepare_input(&ds.images[i], res, stride)?;
            let dets = model.detect(&arr, codebook, score_threshold, nms_threshold)?;
            Ok(dets
                .into_iter()
                .map(|d| Detection { bbox: t.invert_box(&d.bbox), ..d })
                .collect())
        })
        .collect();
    out.into_iter().collect()
}

/// Plain-detector counterpart of [`detect_dataset_fewshot`].
pub fn detect_dataset_plain(
    model: &PlainDetector,
    class_ids: &[usize],
    ds: &Dataset,
    score_threshold: f64,
    nms_threshold: f64,
    limit: Option<usize>,
) -> Result<Vec<Vec<Detection>>, TrainError> {
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let res = model.cfg.input_resolution as u32;
    let stride = model.cfg.total_stride();
    let out: Vec<Result<Vec<Detection>, TrainError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (arr, t) = prepare_input(&ds.images[i], res, stride)?;
            let dets = model.detect(&arr, class_ids, score_threshold, nms_threshold)?;
            Ok(dets
                .into_iter()
                .map(|d| Detection { bbox: t.invert_box(&d.bbox), ..d })
                .collect())
        })
        .collect();
    out.into_iter().collect()
}

/// mAP of pre-computed detections against a dataset's annotations.
pub fn report_for(
    dets: &[Vec<Detection>],
    ds: &Dataset,
    subset: &[usize],
    label: &str,
    exp: &ExperimentConfig,
) -> EvalReport {
    let gts: Vec<_> = ds.index.records[..dets.len()]
        .iter()
        .map(|r| r.objects.clone())
        .collect();
    evaluate(
        dets,
        &gts,
        subset,
        &ds.index.class_names,
        exp.eval.iou_threshold,
        exp.eval.ap_mode,
        label,
    )
}

fn fewshot_snapshot<'a>(
    ctx: &'a TrainContext<'a>,
    codebook_classes: SnapshotClasses,
) -> impl Fn(&FewShotDetector, usize) -> Result<EvalSnapshot, TrainError> + 'a {
    move |model, iteration| {
        let Some(eval_ds) = ctx.eval else {
            return Ok(EvalSnapshot { iteration, base_map: None, novel_map: None });
        };
        let limit = ctx.exp.eval.snapshot_images;
        let codebook = match &codebook_classes {
            SnapshotClasses::BaseOnly => snapshot_codebook(
                model,
                ctx.train,
                &ctx.split.base_ids,
                ctx.exp.train.seed,
                3,
            )?,
            SnapshotClasses::Finetune(set) => finetune_codebook(model, ctx.train, set)?,
        };
        let dets = detect_dataset_fewshot(
            model,
            &codebook,
            eval_ds,
            ctx.exp.eval.score_threshold,
            ctx.exp.eval.nms_threshold,
            limit,
        )?;
        let base = report_for(&dets, eval_ds, &ctx.split.base_ids, "base", ctx.exp).map;
        let novel = match &codebook_classes {
            SnapshotClasses::BaseOnly => None,
            SnapshotClasses::Finetune(_) => {
                Some(report_for(&dets, eval_ds, &ctx.split.novel_ids, "novel", ctx.exp).map)
            }
        };
        Ok(EvalSnapshot { iteration, base_map: Some(base), novel_map: novel })
    }
}

enum SnapshotClasses {
    BaseOnly,
    Finetune(FinetuneSet),
}

fn plain_snapshot<'a>(
    ctx: &'a TrainContext<'a>,
    include_novel: bool,
) -> impl Fn(&PlainDetector, usize) -> Result<EvalSnapshot, TrainError> + 'a {
    move |model, iteration| {
        let Some(eval_ds) = ctx.eval else {
            return Ok(EvalSnapshot { iteration, base_map: None, novel_map: None });
        };
        let all = ctx.split.all_ids();
        let dets = detect_dataset_plain(
            model,
            &all,
            eval_ds,
            ctx.exp.eval.score_threshold,
            ctx.exp.eval.nms_threshold,
            ctx.exp.eval.snapshot_images,
        )?;
        let base = report_for(&dets, eval_ds, &ctx.split.base_ids, "base", ctx.exp).map;
        let novel = include_novel
            .then(|| report_for(&dets, eval_ds, &ctx.split.novel_ids, "novel", ctx.exp).map);
        Ok(EvalSnapshot { iteration, base_map: Some(base), novel_map: novel })
    }
}

/// Average the embeddings of every selected shot per class.
pub fn finetune_codebook(
    model: &FewShotDetector,
    ds: &Dataset,
    set: &FinetuneSet,
) -> Result<ClassCodebook, TrainError> {
    let res = model.cfg.input_resolution as u32;
    let stride = model.cfg.total_stride();
    let mut shots = Vec::with_capacity(set.total_boxes());
    for (&class_id, refs) in set.shots.iter() {
        for &(record_idx, object_idx) in refs {
            let sup = crate::episodes::SupportRef { class_id, record_idx, object_idx };
            shots.push(materialize_support(ds, &sup, res, stride)?);
        }
    }
    Ok(model.build_codebook(&shots)?)
}

fn single_binary_support_class(split_classes: &[usize], seed: u64, episode: u64) -> usize {
    let mut rng = derive_rng(seed, STREAM_SB_CLASS, episode);
    split_classes[rng.gen_range(0..split_classes.len())]
}

/// Base training: jointly optimizes the feature extractor, reweighting
/// network and head over episodes of base-class tasks.
pub fn base_train(ctx: &TrainContext) -> Result<(FewShotDetector, RunRecord), TrainError> {
    let anchors = resolve_anchors(ctx.exp, ctx.train);
    let mut model = FewShotDetector::new(ctx.exp.model.clone(), anchors)?;
    let exp = ctx.exp;
    let variant = exp.train.loss.variant;
    let sampler = move |i: u64| -> Result<FewShotTask, TrainError> {
        let task = if variant == LossVariant::SingleBinary {
            let class = single_binary_support_class(&ctx.split.base_ids, exp.train.seed, i);
            sample_episode(
                &ctx.train.index,
                &ctx.split.base_ids,
                &[class],
                &ctx.split.novel_ids,
                exp.train.seed,
                i,
                exp.train.base.batch_size,
                exp.train.flip_augment,
            )?
        } else {
            sample_base_episode(
                &ctx.train.index,
                ctx.split,
                exp.train.seed,
                i,
                exp.train.base.batch_size,
                exp.train.flip_augment,
            )?
        };
        Ok(task)
    };
    let snap = fewshot_snapshot(ctx, SnapshotClasses::BaseOnly);
    let record = run_fewshot_phase(&mut model, ctx, &exp.train.base, &sampler, Some(&snap), None)?;
    Ok((model, record))
}

/// Few-shot fine-tuning on the exact-k set over base plus novel classes,
/// ending with the averaged class codebook.
pub fn finetune(
    ctx: &TrainContext,
    model: &mut FewShotDetector,
    k: usize,
) -> Result<(ClassCodebook, FinetuneSet, RunRecord), TrainError> {
    let set = build_finetune_set(&ctx.train.index, ctx.split, k, ctx.exp.shots.seed)?;
    let exp = ctx.exp;
    let variant = exp.train.loss.variant;
    let classes = set.classes();
    let set_for_sampler = set.clone();
    let ft_seed = exp.train.seed ^ 0xF17E;
    let sampler = move |i: u64| -> Result<FewShotTask, TrainError> {
        let support: Vec<usize> = if variant == LossVariant::SingleBinary {
            vec![single_binary_support_class(&classes, ft_seed, i)]
        } else {
            classes.clone()
        };
        Ok(sample_finetune_episode(
            &ctx.train.index,
            &set_for_sampler,
            &support,
            ft_seed,
            i,
            exp.train.finetune.batch_size,
            exp.train.flip_augment,
        )?)
    };
    let snap = fewshot_snapshot(ctx, SnapshotClasses::Finetune(set.clone()));
    let record =
        run_fewshot_phase(model, ctx, &exp.train.finetune, &sampler, Some(&snap), None)?;
    let codebook = finetune_codebook(model, ctx.train, &set)?;
    Ok((codebook, set, record))
}

/// Plain-detector base training (the first phase shared by the fine-tune
/// baselines): novel-class objects are ignore regions.
pub fn plain_base_train(ctx: &TrainContext) -> Result<(PlainDetector, RunRecord), TrainError> {
    let anchors = resolve_anchors(ctx.exp, ctx.train);
    let n_classes = ctx.train.index.n_classes();
    let mut model = PlainDetector::new(ctx.exp.model.clone(), anchors, n_classes)?;
    let exp = ctx.exp;
    let sampler = move |i: u64| -> Result<FewShotTask, TrainError> {
        Ok(sample_episode(
            &ctx.train.index,
            &ctx.split.base_ids,
            &[],
            &ctx.split.novel_ids,
            exp.train.seed,
            i,
            exp.train.base.batch_size,
            exp.train.flip_augment,
        )?)
    };
    let snap = plain_snapshot(ctx, false);
    let record =
        run_plain_phase(&mut model, ctx, &exp.train.base, exp.train.base.iterations, &sampler, Some(&snap), None)?;
    Ok((model, record))
}

/// How long to fine-tune a plain baseline.
pub enum PlainFtMode<'a> {
    /// Same iteration budget as the few-shot model's fine-tuning phase.
    Fixed(usize),
    /// Until the novel mAP plateaus (or the configured cap).
    UntilPlateau(&'a BaselinesConfig),
}

/// Fine-tune a plain detector on the exact-k set.
pub fn plain_finetune(
    ctx: &TrainContext,
    model: &mut PlainDetector,
    k: usize,
    mode: PlainFtMode,
) -> Result<(FinetuneSet, RunRecord), TrainError> {
    let set = build_finetune_set(&ctx.train.index, ctx.split, k, ctx.exp.shots.seed)?;
    let exp = ctx.exp;
    let set_for_sampler = set.clone();
    let ft_seed = exp.train.seed ^ 0xF17E;
    let sampler = move |i: u64| -> Result<FewShotTask, TrainError> {
        Ok(sample_finetune_episode(
            &ctx.train.index,
            &set_for_sampler,
            &[],
            ft_seed,
            i,
            exp.train.finetune.batch_size,
            exp.train.flip_augment,
        )?)
    };
    let snap = plain_snapshot(ctx, true);
    let (iterations, stop): (usize, Option<Box<dyn Fn(&[EvalSnapshot]) -> bool>>) = match mode {
        PlainFtMode::Fixed(n) => (n, None),
        PlainFtMode::UntilPlateau(cfg) => {
            let window = cfg.plateau_window;
            let delta = cfg.plateau_delta;
            let stop = move |snaps: &[EvalSnapshot]| -> bool {
                if snaps.len() <= window {
                    return false;
                }
                let now = snaps.last().and_then(|s| s.novel_map).unwrap_or(0.0);
                let then = snaps[snaps.len() - 1 - window].novel_map.unwrap_or(0.0);
                now - then < delta
            };
            (cfg.ft_full_cap, Some(Box::new(stop)))
        }
    };
    let record = run_plain_phase(
        model,
        ctx,
        &exp.train.finetune,
        iterations,
        &sampler,
        Some(&snap),
        stop.as_deref(),
    )?;
    Ok((set, record))
}

/// Single-phase joint training: full base-class supervision plus exactly k
/// boxes per novel class, for as many total iterations as the two-phase
/// scheme uses, under the base-phase schedule.
pub fn joint_train(ctx: &TrainContext, k: usize) -> Result<(PlainDetector, RunRecord), TrainError> {
    let anchors = resolve_anchors(ctx.exp, ctx.train);
    let n_classes = ctx.train.index.n_classes();
    let mut model = PlainDetector::new(ctx.exp.model.clone(), anchors, n_classes)?;
    let exp = ctx.exp;

    // k-shot selection over the novel classes only
    let novel_split = ClassSplit {
        base_ids: vec![],
        novel_ids: ctx.split.novel_ids.clone(),
        seed: ctx.split.seed,
    };
    let novel_set = build_finetune_set(&ctx.train.index, &novel_split, k, exp.shots.seed)?;
    let base_ids = ctx.split.base_ids.clone();
    let all_active = ctx.split.all_ids();

    let sampler = move |i: u64| -> Result<FewShotTask, TrainError> {
        // base annotations in full; novel annotations only where selected,
        // the rest of the novel objects become ignore regions
        let mut task = sample_episode(
            &ctx.train.index,
            &all_active,
            &[],
            &[],
            exp.train.seed,
            i,
            exp.train.base.batch_size,
            exp.train.flip_augment,
        )?;
        for q in task.query.iter_mut() {
            let rec = &ctx.train.index.records[q.record_idx];
            let mut boxes = Vec::new();
            let mut ignore = Vec::new();
            for (oi, obj) in rec.objects.iter().enumerate() {
                let mut b = obj.bbox;
                if q.flip {
                    b.cx = 1.0 - b.cx;
                }
                if base_ids.contains(&b.class_id) || novel_set.is_selected(q.record_idx, oi) {
                    boxes.push(b);
                } else {
                    ignore.push(b);
                }
            }
            q.boxes = boxes;
            q.ignore = ignore;
        }
        Ok(task)
    };
    let snap = plain_snapshot(ctx, true);
    let total = exp.train.base.iterations + exp.train.finetune.iterations;
    let record =
        run_plain_phase(&mut model, ctx, &exp.train.base, total, &sampler, Some(&snap), None)?;
    Ok((model, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Joint,
    Ft,
    FtFull,
}

impl BaselineKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "joint" => Some(BaselineKind::Joint),
            "ft" => Some(BaselineKind::Ft),
            "ft-full" => Some(BaselineKind::FtFull),
            _ => None,
        }
    }
}

/// Train one baseline end to end. `base` reuses an already-trained plain
/// base checkpoint for the fine-tune baselines instead of retraining.
pub fn run_baseline(
    ctx: &TrainContext,
    kind: BaselineKind,
    k: usize,
    base: Option<&PlainDetector>,
) -> Result<(PlainDetector, RunRecord), TrainError> {
    match kind {
        BaselineKind::Joint => joint_train(ctx, k),
        BaselineKind::Ft | BaselineKind::FtFull => {
            let mut model = match base {
                Some(m) => clone_plain(m),
                None => plain_base_train(ctx)?.0,
            };
            let mode = match kind {
                BaselineKind::Ft => PlainFtMode::Fixed(ctx.exp.train.finetune.iterations),
                _ => PlainFtMode::UntilPlateau(&ctx.exp.baselines),
            };
            let (_, record) = plain_finetune(ctx, &mut model, k, mode)?;
            Ok((model, record))
        }
    }
}

/// Deep-copy a plain detector (layers hold owned arrays).
pub fn clone_plain(m: &PlainDetector) -> PlainDetector {
    PlainDetector {
        backbone: m.backbone.clone(),
        head: m.head.clone(),
        cfg: m.cfg.clone(),
        anchors: m.anchors.clone(),
        n_classes: m.n_classes,
    }
}

/// Deep-copy a few-shot detector.
pub fn clone_fewshot(m: &FewShotDetector) -> FewShotDetector {
    let mut copy = FewShotDetector::new(m.cfg.clone(), m.anchors.clone()).expect("same config");
    for (dst, src) in copy.layers_mut().into_iter().zip(m.layers()) {
        dst.weight.assign(&src.weight);
        dst.bias.assign(&src.bias);
    }
    copy
}
