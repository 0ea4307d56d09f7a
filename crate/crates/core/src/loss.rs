//! Detection loss: softmax-calibrated classification plus box regression and
//! objectness terms, with single-binary and multi-binary classification
//! variants. All entry points also return analytic gradients with respect to
//! the raw branch outputs.

use crate::config::{LossConfig, LossVariant, ObjectnessTarget};
use crate::geometry::{branch_channel, iou, AnchorFlag, BBox, GridSpec, TargetTensor};
use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target class {class} outside the {n} available branches")]
    TargetOutOfRange { class: usize, n: usize },
    #[error("loss variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("positive anchor of class {class} has no branch under this episode")]
    MissingBranch { class: usize },
}

/// Component losses and the anchor counts that produced them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_bbx: f64,
    pub l_obj: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_ignore: usize,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown { l_cls: 0.0, l_bbx: 0.0, l_obj: 0.0, total: 0.0, n_pos: 0, n_neg: 0, n_ignore: 0 }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.l_cls += other.l_cls;
        self.l_bbx += other.l_bbx;
        self.l_obj += other.l_obj;
        self.total += other.total;
        self.n_pos += other.n_pos;
        self.n_neg += other.n_neg;
        self.n_ignore += other.n_ignore;
    }

    pub fn scale(&mut self, f: f64) {
        self.l_cls *= f;
        self.l_bbx *= f;
        self.l_obj *= f;
        self.total *= f;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn bce_with_logit_grad(logit: f64, target: f64) -> f64 {
    sigmoid(logit) - target
}

/// Mean cross-entropy over positive anchors given already-calibrated rows.
pub fn classification_loss_softmax(rows: &[(Vec<f64>, usize)]) -> Result<f64, LossError> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (probs, target) in rows {
        if *target >= probs.len() {
            return Err(LossError::TargetOutOfRange { class: *target, n: probs.len() });
        }
        sum += -probs[*target].max(f64::MIN_POSITIVE).ln();
    }
    Ok(sum / rows.len() as f64)
}

/// Binary cross-entropy of one branch score against {0, 1}.
pub fn classification_loss_single_binary(score: f64, is_target: bool) -> f64 {
    bce_with_logit(score, if is_target { 1.0 } else { 0.0 })
}

/// Sum of per-branch binary cross-entropies; the target branch regresses 1,
/// every other branch 0. Reduces exactly to the single-binary loss at N = 1.
pub fn classification_loss_multi_binary(scores: &[f64], target: usize) -> f64 {
    scores
        .iter()
        .enumerate()
        .map(|(i, &c)| bce_with_logit(c, if i == target { 1.0 } else { 0.0 }))
        .sum()
}

/// How the geometry channels relate across branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchGeometry {
    /// Each branch predicts its own boxes and objectness (episodic model):
    /// negatives are penalized on every branch.
    PerClass,
    /// All branches are copies of one shared output (plain detector):
    /// negatives are penalized once.
    Shared,
}

/// Detection loss over per-class branch outputs.
///
/// `branch_of_class[c]` maps an active-class index (as used in the target
/// tensor) to its branch index, or `None` when the episode carries no branch
/// for that class (single-binary episodes). Box and positive-objectness
/// terms apply only on the ground-truth class's branch; the classification
/// term depends on the configured variant. Returns the breakdown and the
/// gradient w.r.t. every branch entry.
pub fn total_loss(
    branches: &[Array3<f64>],
    targets: &TargetTensor,
    branch_of_class: &[Option<usize>],
    grid: &GridSpec,
    cfg: &LossConfig,
    geometry: BranchGeometry,
) -> Result<(LossBreakdown, Vec<Array3<f64>>), LossError> {
    let n_branches = branches.len();
    let s = targets.s;
    let n_anchors = targets.n_anchors;
    let mut grads: Vec<Array3<f64>> = branches.iter().map(|b| Array3::zeros(b.dim())).collect();

    if cfg.variant == LossVariant::SingleBinary && n_branches != 1 {
        return Err(LossError::VariantMismatch(format!(
            "single_binary expects one branch per episode, got {n_branches}"
        )));
    }

    let (n_pos, n_neg, n_ignore) = targets.counts();
    let mut l_cls = 0.0;
    let mut l_bbx = 0.0;
    let mut l_obj = 0.0;
    let inv_pos = if n_pos > 0 { cfg.lambda_cls / n_pos as f64 } else { 0.0 };

    for p in &targets.positives {
        let (a, cy, cx) = (p.anchor, p.cy, p.cx);
        let branch = branch_of_class
            .get(p.class)
            .copied()
            .ok_or(LossError::TargetOutOfRange { class: p.class, n: branch_of_class.len() })?;

        // classification
        match cfg.variant {
            LossVariant::Softmax => {
                let b = branch.ok_or(LossError::MissingBranch { class: p.class })?;
                let scores: Vec<f64> =
                    branches.iter().map(|br| br[(branch_channel(a, 5), cy, cx)]).collect();
                let probs = crate::model::calibrate_scores(&scores);
                l_cls += -probs[b].max(f64::MIN_POSITIVE).ln() * inv_pos;
                for (j, g) in grads.iter_mut().enumerate() {
                    let delta = if j == b { 1.0 } else { 0.0 };
                    g[(branch_channel(a, 5), cy, cx)] += (probs[j] - delta) * inv_pos;
                }
            }
            LossVariant::SingleBinary => {
                let is_target = branch == Some(0);
                let c = branches[0][(branch_channel(a, 5), cy, cx)];
                let t = if is_target { 1.0 } else { 0.0 };
                l_cls += bce_with_logit(c, t) * inv_pos;
                grads[0][(branch_channel(a, 5), cy, cx)] += bce_with_logit_grad(c, t) * inv_pos;
            }
            LossVariant::MultiBinary => {
                let b = branch.ok_or(LossError::MissingBranch { class: p.class })?;
                for (j, g) in grads.iter_mut().enumerate() {
                    let c = branches[j][(branch_channel(a, 5), cy, cx)];
                    let t = if j == b { 1.0 } else { 0.0 };
                    l_cls += bce_with_logit(c, t) * inv_pos;
                    g[(branch_channel(a, 5), cy, cx)] += bce_with_logit_grad(c, t) * inv_pos;
                }
            }
        }

        // geometry and positive objectness only on the true class's branch
        let Some(b) = branch else { continue };
        let br = &branches[b];
        let g = &mut grads[b];

        let tx = br[(branch_channel(a, 0), cy, cx)];
        let ty = br[(branch_channel(a, 1), cy, cx)];
        let tw = br[(branch_channel(a, 2), cy, cx)];
        let th = br[(branch_channel(a, 3), cy, cx)];
        let (hx, hy) = (sigmoid(p.tx), sigmoid(p.ty));
        let (sx, sy) = (sigmoid(tx), sigmoid(ty));
        l_bbx += cfg.lambda_coord
            * ((sx - hx).powi(2) + (sy - hy).powi(2) + (tw - p.tw).powi(2) + (th - p.th).powi(2));
        g[(branch_channel(a, 0), cy, cx)] += cfg.lambda_coord * 2.0 * (sx - hx) * sx * (1.0 - sx);
        g[(branch_channel(a, 1), cy, cx)] += cfg.lambda_coord * 2.0 * (sy - hy) * sy * (1.0 - sy);
        g[(branch_channel(a, 2), cy, cx)] += cfg.lambda_coord * 2.0 * (tw - p.tw);
        g[(branch_channel(a, 3), cy, cx)] += cfg.lambda_coord * 2.0 * (th - p.th);

        let to = br[(branch_channel(a, 4), cy, cx)];
        let so = sigmoid(to);
        let target = match cfg.objectness_target {
            ObjectnessTarget::One => 1.0,
            ObjectnessTarget::Iou => {
                // IoU of the currently predicted box with the ground truth,
                // treated as a constant target at this step.
                let anchor = &grid.anchors[a];
                let pred = BBox::new(
                    (cx as f64 + sx) / s as f64,
                    (cy as f64 + sy) / s as f64,
                    (anchor.pw * tw.exp() / s as f64).min(1.0),
                    (anchor.ph * th.exp() / s as f64).min(1.0),
                    0,
                );
                iou(&pred, &p.gt)
            }
        };
        l_obj += cfg.lambda_obj * (so - target).powi(2);
        g[(branch_channel(a, 4), cy, cx)] += cfg.lambda_obj * 2.0 * (so - target) * so * (1.0 - so);
    }

    // negatives: every branch for the episodic model, once for shared geometry
    let negative_branches: Vec<usize> = match geometry {
        BranchGeometry::PerClass => (0..n_branches).collect(),
        BranchGeometry::Shared => vec![0],
    };
    for cy in 0..s {
        for cx in 0..s {
            for a in 0..n_anchors {
                if targets.flags[(cy, cx, a)] != AnchorFlag::Negative {
                    continue;
                }
                for &j in &negative_branches {
                    let to = branches[j][(branch_channel(a, 4), cy, cx)];
                    let so = sigmoid(to);
                    l_obj += cfg.lambda_noobj * so * so;
                    grads[j][(branch_channel(a, 4), cy, cx)] +=
                        cfg.lambda_noobj * 2.0 * so * so * (1.0 - so);
                }
            }
        }
    }

    let breakdown = LossBreakdown {
        l_cls,
        l_bbx,
        l_obj,
        total: l_cls + l_bbx + l_obj,
        n_pos,
        n_neg,
        n_ignore,
    };
    Ok((breakdown, grads))
}
