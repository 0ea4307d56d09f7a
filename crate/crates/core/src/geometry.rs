//! Box geometry, anchor-grid target assignment, decoding and NMS for a
//! one-stage detector operating on normalized image coordinates.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default IoU threshold above which a non-positive anchor is excluded from
/// the objectness loss.
pub const DEFAULT_IGNORE_THRESHOLD: f64 = 0.6;

/// Offsets are clamped into (EPS, 1-EPS) before the logit so encoded targets
/// stay finite at cell boundaries.
const OFFSET_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h}): {reason}")]
    InvalidBox {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        reason: String,
    },
    #[error("box of size {w}x{h} is too small to encode against anchor ({pw}, {ph}) on an s={s} grid")]
    BoxTooSmall {
        w: f64,
        h: f64,
        pw: f64,
        ph: f64,
        s: usize,
    },
    #[error("grid must have at least one anchor")]
    EmptyAnchorList,
    #[error("prediction shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("class id {class_id} out of range for {n_classes} classes")]
    ClassOutOfRange { class_id: usize, n_classes: usize },
}

/// Axis-aligned box in normalized center form. `w` and `h` must be positive;
/// the corner form is clamped to the unit square when computing IoU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Self {
        Self { cx, cy, w, h, class_id }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox {
                cx: self.cx,
                cy: self.cy,
                w: self.w,
                h: self.h,
                reason: "center must lie in [0,1] and sides in (0,1]".into(),
            })
        }
    }

    /// Corner form (x_min, y_min, x_max, y_max) clamped to the unit square.
    pub fn corners_clamped(&self) -> (f64, f64, f64, f64) {
        (
            (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        )
    }

    pub fn area_clamped(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners_clamped();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }
}

/// Anchor prior dimensions in grid-cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub pw: f64,
    pub ph: f64,
}

/// Output-grid description: side length `s`, anchor priors and the number of
/// class branches the prediction carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub s: usize,
    pub anchors: Vec<Anchor>,
    pub n_classes: usize,
}

impl GridSpec {
    pub fn new(s: usize, anchors: Vec<Anchor>, n_classes: usize) -> Result<Self, GeometryError> {
        if anchors.is_empty() {
            return Err(GeometryError::EmptyAnchorList);
        }
        Ok(Self { s, anchors, n_classes })
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// The anchor instantiated as a normalized box centered on cell (cy, cx).
    pub fn anchor_box_at_cell(&self, cy: usize, cx: usize, a: usize) -> BBox {
        let s = self.s as f64;
        BBox::new(
            (cx as f64 + 0.5) / s,
            (cy as f64 + 0.5) / s,
            (self.anchors[a].pw / s).min(1.0),
            (self.anchors[a].ph / s).min(1.0),
            0,
        )
    }
}

/// Per-(cell, anchor) assignment state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorFlag {
    Negative,
    Ignore,
    /// Index into [`TargetTensor::positives`].
    Positive(u32),
}

/// Regression and classification targets for one positively assigned anchor.
/// `tx`/`ty` are pre-sigmoid offsets, `tw`/`th` log-scale ratios.
#[derive(Debug, Clone, Copy)]
pub struct PositiveTarget {
    pub cy: usize,
    pub cx: usize,
    pub anchor: usize,
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    /// Class index in the caller's active-class indexing.
    pub class: usize,
    /// The originating ground-truth box, kept for IoU-based objectness targets.
    pub gt: BBox,
}

/// Dense assignment of every (cell, anchor) slot plus the list of positives.
#[derive(Debug, Clone)]
pub struct TargetTensor {
    pub s: usize,
    pub n_anchors: usize,
    /// Shape (s, s, n_anchors), indexed (cy, cx, a).
    pub flags: Array3<AnchorFlag>,
    pub positives: Vec<PositiveTarget>,
}

impl TargetTensor {
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut neg = 0;
        let mut ign = 0;
        for f in self.flags.iter() {
            match f {
                AnchorFlag::Negative => neg += 1,
                AnchorFlag::Ignore => ign += 1,
                AnchorFlag::Positive(_) => {}
            }
        }
        (self.positives.len(), neg, ign)
    }
}

/// A scored, class-labeled detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Intersection-over-union of two boxes, corner-clamped to the unit square.
/// Degenerate pairs (zero union) yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners_clamped();
    let (bx0, by0, bx1, by1) = b.corners_clamped();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two box shapes sharing a common center, used for anchor matching.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    let union = w1 * h1 + w2 * h2 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The cell index holding a normalized coordinate. A center sitting exactly
/// on a boundary belongs to the lower-index cell.
fn cell_index(coord_cells: f64, s: usize) -> usize {
    let c = coord_cells.ceil() as isize - 1;
    c.clamp(0, s as isize - 1) as usize
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    (p / (1.0 - p)).ln()
}

/// YOLOv2-style target assignment: each ground-truth box claims the
/// best-shape-IoU anchor in the cell containing its center. Non-positive
/// anchors whose instantiated box overlaps any ground truth above
/// `ignore_threshold` are excluded from the objectness loss.
pub fn encode_targets(
    gt: &[BBox],
    grid: &GridSpec,
    ignore_threshold: f64,
) -> Result<TargetTensor, GeometryError> {
    encode_targets_with_ignore(gt, &[], grid, ignore_threshold)
}

/// Like [`encode_targets`], with additional regions whose anchors are
/// ignore-flagged outright (used for distracting objects of inactive classes:
/// any anchor whose cell center falls inside such a region contributes no
/// negative loss).
pub fn encode_targets_with_ignore(
    gt: &[BBox],
    ignore_regions: &[BBox],
    grid: &GridSpec,
    ignore_threshold: f64,
) -> Result<TargetTensor, GeometryError> {
    let s = grid.s;
    let n_anchors = grid.n_anchors();
    let mut flags = Array3::from_elem((s, s, n_anchors), AnchorFlag::Negative);
    let mut positives: Vec<PositiveTarget> = Vec::with_capacity(gt.len());

    for b in gt {
        b.validate()?;
        if b.class_id >= grid.n_classes {
            return Err(GeometryError::ClassOutOfRange {
                class_id: b.class_id,
                n_classes: grid.n_classes,
            });
        }
        let (gw, gh) = (b.w * s as f64, b.h * s as f64);
        // Anchor preference by descending shape IoU, ties toward lower index.
        let mut order: Vec<usize> = (0..n_anchors).collect();
        let ious: Vec<f64> = grid
            .anchors
            .iter()
            .map(|a| shape_iou(gw, gh, a.pw, a.ph))
            .collect();
        order.sort_by(|&i, &j| ious[j].partial_cmp(&ious[i]).unwrap().then(i.cmp(&j)));

        let cx_cell = cell_index(b.cx * s as f64, s);
        let cy_cell = cell_index(b.cy * s as f64, s);

        let Some(&a) = order
            .iter()
            .find(|&&a| !matches!(flags[(cy_cell, cx_cell, a)], AnchorFlag::Positive(_)))
        else {
            log::warn!(
                "dropping ground-truth box at ({:.3}, {:.3}): all {} anchors of cell ({}, {}) already claimed",
                b.cx, b.cy, n_anchors, cy_cell, cx_cell
            );
            continue;
        };

        let anchor = &grid.anchors[a];
        let rw = gw / anchor.pw;
        let rh = gh / anchor.ph;
        if !rw.is_normal() || !rh.is_normal() {
            return Err(GeometryError::BoxTooSmall {
                w: b.w,
                h: b.h,
                pw: anchor.pw,
                ph: anchor.ph,
                s,
            });
        }

        let tx = logit(b.cx * s as f64 - cx_cell as f64);
        let ty = logit(b.cy * s as f64 - cy_cell as f64);
        flags[(cy_cell, cx_cell, a)] = AnchorFlag::Positive(positives.len() as u32);
        positives.push(PositiveTarget {
            cy: cy_cell,
            cx: cx_cell,
            anchor: a,
            tx,
            ty,
            tw: rw.ln(),
            th: rh.ln(),
            class: b.class_id,
            gt: *b,
        });
    }

    for cy in 0..s {
        for cx in 0..s {
            let cell_center_x = (cx as f64 + 0.5) / s as f64;
            let cell_center_y = (cy as f64 + 0.5) / s as f64;
            let in_ignore_region = ignore_regions.iter().any(|r| {
                let (x0, y0, x1, y1) = r.corners_clamped();
                cell_center_x >= x0 && cell_center_x <= x1 && cell_center_y >= y0 && cell_center_y <= y1
            });
            for a in 0..n_anchors {
                if matches!(flags[(cy, cx, a)], AnchorFlag::Positive(_)) {
                    continue;
                }
                if in_ignore_region {
                    flags[(cy, cx, a)] = AnchorFlag::Ignore;
                    continue;
                }
                let anchor_box = grid.anchor_box_at_cell(cy, cx, a);
                let best = gt
                    .iter()
                    .map(|g| iou(&anchor_box, g))
                    .fold(0.0_f64, f64::max);
                if best > ignore_threshold {
                    flags[(cy, cx, a)] = AnchorFlag::Ignore;
                }
            }
        }
    }

    Ok(TargetTensor { s, n_anchors, flags, positives })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel index of field `j` (0..6: tx, ty, tw, th, to, c) for anchor `a`
/// within a per-branch prediction array of shape (A*6, s, s).
#[inline]
pub fn branch_channel(a: usize, j: usize) -> usize {
    a * 6 + j
}

/// Decode per-class branch predictions into scored detections. The class
/// channel is taken as-is (callers calibrate scores first); the detection
/// score is `sigmoid(objectness) * class_score`.
pub fn decode_branches(
    branches: &[Array3<f64>],
    class_ids: &[usize],
    grid: &GridSpec,
    score_threshold: f64,
) -> Result<Vec<Detection>, GeometryError> {
    let s = grid.s;
    let n_anchors = grid.n_anchors();
    if branches.len() != class_ids.len() {
        return Err(GeometryError::ShapeMismatch {
            expected: format!("{} class ids", branches.len()),
            got: format!("{}", class_ids.len()),
        });
    }
    for b in branches {
        if b.dim() != (n_anchors * 6, s, s) {
            return Err(GeometryError::ShapeMismatch {
                expected: format!("({}, {}, {})", n_anchors * 6, s, s),
                got: format!("{:?}", b.dim()),
            });
        }
    }

    let mut out = Vec::new();
    for (branch, &class_id) in branches.iter().zip(class_ids) {
        for cy in 0..s {
            for cx in 0..s {
                for a in 0..n_anchors {
                    let to = branch[(branch_channel(a, 4), cy, cx)];
                    let c = branch[(branch_channel(a, 5), cy, cx)];
                    let score = sigmoid(to) * c;
                    if score < score_threshold {
                        continue;
                    }
                    let tx = branch[(branch_channel(a, 0), cy, cx)];
                    let ty = branch[(branch_channel(a, 1), cy, cx)];
                    let tw = branch[(branch_channel(a, 2), cy, cx)];
                    let th = branch[(branch_channel(a, 3), cy, cx)];
                    let anchor = &grid.anchors[a];
                    let bbox = BBox::new(
                        (cx as f64 + sigmoid(tx)) / s as f64,
                        (cy as f64 + sigmoid(ty)) / s as f64,
                        (anchor.pw * tw.exp() / s as f64).min(1.0),
                        (anchor.ph * th.exp() / s as f64).min(1.0),
                        class_id,
                    );
                    out.push(Detection { bbox, class_id, score });
                }
            }
        }
    }
    Ok(out)
}

/// Greedy per-class non-maximum suppression. Detections are ranked by
/// descending score (score ties keep input order); a detection is suppressed
/// when its IoU with an already-kept detection of the same class exceeds
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    debug_assert!(iou_threshold > 0.0 && iou_threshold < 1.0);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Fixed fallback anchor priors (grid-cell units) for when no training boxes
/// are available to cluster.
pub fn fallback_anchors(k: usize) -> Vec<Anchor> {
    let presets = [
        Anchor { pw: 1.4, ph: 1.4 },
        Anchor { pw: 2.0, ph: 2.0 },
        Anchor { pw: 2.8, ph: 2.8 },
        Anchor { pw: 3.6, ph: 3.6 },
        Anchor { pw: 4.4, ph: 4.4 },
        Anchor { pw: 5.2, ph: 5.2 },
    ];
    presets.iter().copied().cycle().take(k).collect()
}

/// K-means over box dimensions (grid-cell units) with 1-IoU distance,
/// deterministically initialized from area quantiles. Falls back to
/// [`fallback_anchors`] when there are fewer boxes than clusters.
pub fn anchors_from_boxes(dims: &[(f64, f64)], k: usize, iterations: usize) -> Vec<Anchor> {
    if dims.len() < k || k == 0 {
        return fallback_anchors(k);
    }
    let mut sorted: Vec<(f64, f64)> = dims.to_vec();
    sorted.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    let mut centroids: Vec<(f64, f64)> = (0..k)
        .map(|i| sorted[(i * (sorted.len() - 1)) / (k - 1).max(1)])
        .collect();

    let mut assignment = vec![0usize; dims.len()];
    for _ in 0..iterations {
        for (bi, &(w, h)) in dims.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, &(cw, ch)) in centroids.iter().enumerate() {
                let d = 1.0 - shape_iou(w, h, cw, ch);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assignment[bi] = best;
        }
        for ci in 0..k {
            let members: Vec<&(f64, f64)> =
                dims.iter().zip(&assignment).filter(|(_, &a)| a == ci).map(|(d, _)| d).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                centroids[ci] = (
                    members.iter().map(|m| m.0).sum::<f64>() / n,
                    members.iter().map(|m| m.1).sum::<f64>() / n,
                );
            }
        }
    }
    centroids.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    centroids.into_iter().map(|(pw, ph)| Anchor { pw, ph }).collect()
}

/// Build raw branch arrays that reproduce a target tensor exactly: positives
/// carry their encoded regression values with saturated-positive objectness,
/// everything else gets saturated-negative objectness. Used by round-trip
/// tests and diagnostics.
pub fn targets_to_raw(targets: &TargetTensor, grid: &GridSpec, n_branches: usize) -> Vec<Array3<f64>> {
    let s = grid.s;
    let a_n = grid.n_anchors();
    let mut branches = vec![Array3::<f64>::zeros((a_n * 6, s, s)); n_branches];
    for b in branches.iter_mut() {
        for a in 0..a_n {
            b.slice_mut(ndarray::s![branch_channel(a, 4), .., ..]).fill(-1000.0);
        }
    }
    for p in &targets.positives {
        let br = &mut branches[p.class];
        br[(branch_channel(p.anchor, 0), p.cy, p.cx)] = p.tx;
        br[(branch_channel(p.anchor, 1), p.cy, p.cx)] = p.ty;
        br[(branch_channel(p.anchor, 2), p.cy, p.cx)] = p.tw;
        br[(branch_channel(p.anchor, 3), p.cy, p.cx)] = p.th;
        br[(branch_channel(p.anchor, 4), p.cy, p.cx)] = 1000.0;
        br[(branch_channel(p.anchor, 5), p.cy, p.cx)] = 1.0;
    }
    branches
}

/// Raw prediction layout helper for a single shared-geometry (plain detector)
/// output of shape (A*(5+N), s, s): fields 0..5 are tx..to, then N scores.
pub fn plain_channel(a: usize, n_classes: usize, j: usize) -> usize {
    a * (5 + n_classes) + j
}

#[allow(dead_code)]
fn unused_array4_guard(_: &Array4<f64>) {}
