//! VOC-style average precision and mAP, plus analysis of learned
//! reweighting vectors (per-feature variance ranking and pairwise cosine
//! distances).

use crate::config::ApMode;
use crate::data::Annotation;
use crate::geometry::{iou, Detection};
use crate::model::{ClassCodebook, ReweightVector};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("vector analysis needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Per-class AP plus their mean over a declared class subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: String,
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

impl EvalReport {
    /// Plain-text table: class, AP, ground-truth and detection counts.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>8} {:>6} {:>6}", "class", "AP", "#gt", "#det");
        for row in &self.per_class {
            let _ = writeln!(
                out,
                "{:<20} {:>8.4} {:>6} {:>6}",
                row.name, row.ap, row.n_gt, row.n_det
            );
        }
        let _ = writeln!(out, "{:<20} {:>8.4}", format!("mAP ({})", self.subset), self.map);
        out
    }
}

/// VOC average precision from (recall, precision) pairs with nondecreasing
/// recalls. 11-point mode averages the interpolated precision at recall
/// thresholds 0.0, 0.1, ..., 1.0; area mode integrates the monotone
/// precision envelope. Empty input yields 0.
pub fn voc_ap(pairs: &[(f64, f64)], mode: ApMode) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    match mode {
        ApMode::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let thresh = t as f64 / 10.0;
                let best = pairs
                    .iter()
                    .filter(|(r, _)| *r >= thresh - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0_f64, f64::max);
                sum += best;
            }
            sum / 11.0
        }
        ApMode::Area => {
            // envelope: precision at recall r is the max precision at any
            // recall >= r
            let mut rs = vec![0.0];
            let mut ps = vec![0.0];
            for &(r, p) in pairs {
                rs.push(r);
                ps.push(p);
            }
            for i in (0..ps.len() - 1).rev() {
                ps[i] = ps[i].max(ps[i + 1]);
            }
            let mut area = 0.0;
            for i in 1..rs.len() {
                area += (rs[i] - rs[i - 1]).max(0.0) * ps[i];
            }
            area
        }
    }
}

/// Greedy per-class matching over the whole dataset: detections sorted by
/// descending score (input order on ties) match the highest-IoU unmatched
/// ground truth of their image at or above `iou_threshold`. Matches onto
/// difficult ground truths are discarded without penalty; difficult ground
/// truths never count toward recall.
pub fn evaluate(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<Annotation>],
    class_subset: &[usize],
    class_names: &[String],
    iou_threshold: f64,
    ap_mode: ApMode,
    subset_label: &str,
) -> EvalReport {
    assert_eq!(dets_per_image.len(), gts_per_image.len());
    let mut per_class = Vec::with_capacity(class_subset.len());
    for &class_id in class_subset {
        let name = class_names
            .get(class_id)
            .cloned()
            .unwrap_or_else(|| format!("class-{class_id}"));
        let (ap, n_gt, n_det) =
            class_ap(dets_per_image, gts_per_image, class_id, iou_threshold, ap_mode);
        per_class.push(ClassAp { class_id, name, ap, n_gt, n_det });
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    EvalReport {
        subset: subset_label.into(),
        iou_threshold,
        ap_mode,
        per_class,
        map,
    }
}

fn class_ap(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<Annotation>],
    class_id: usize,
    iou_threshold: f64,
    ap_mode: ApMode,
) -> (f64, usize, usize) {
    let mut dets: Vec<(usize, &Detection)> = Vec::new();
    for (img, ds) in dets_per_image.iter().enumerate() {
        for d in ds.iter().filter(|d| d.class_id == class_id) {
            dets.push((img, d));
        }
    }
    dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let n_det = dets.len();

    let n_pos: usize = gts_per_image
        .iter()
        .map(|gts| gts.iter().filter(|g| g.bbox.class_id == class_id && !g.difficult).count())
        .sum();

    let mut matched: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pairs = Vec::with_capacity(dets.len());
    for (img, det) in dets {
        let gts = &gts_per_image[img];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.bbox.class_id != class_id {
                continue;
            }
            let ov = iou(&det.bbox, &gt.bbox);
            if ov >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, b)) => ov > b,
                };
                if better {
                    best = Some((gi, ov));
                }
            }
        }
        match best {
            Some((gi, _)) if gts[gi].difficult => continue, // no penalty, no credit
            Some((gi, _)) if !matched[img][gi] => {
                matched[img][gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        if n_pos > 0 {
            pairs.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    (voc_ap(&pairs, ap_mode), n_pos, n_det)
}

/// Variance ranking and pairwise-distance artifacts of a set of reweighting
/// vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorAnalysis {
    /// (feature index, variance across class means), descending variance,
    /// ties by feature index.
    pub variances: Vec<(usize, f64)>,
    /// Row labels of the distance matrix: per-shot vectors then class means.
    pub labels: Vec<String>,
    /// Symmetric cosine-distance matrix with a zero diagonal.
    pub distances: Vec<Vec<f64>>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        0.0
    } else if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Rank features by variance across class-mean vectors and compute the
/// cosine-distance matrix over all per-shot vectors plus the class means.
pub fn analyze_vectors(
    per_shot: &[ReweightVector],
    codebook: &ClassCodebook,
) -> Result<VectorAnalysis, EvalError> {
    if codebook.entries.len() < 2 {
        return Err(EvalError::TooFewClasses(codebook.entries.len()));
    }
    let m = codebook.entries[0].1.len();
    let n_classes = codebook.entries.len() as f64;

    let mut variances: Vec<(usize, f64)> = (0..m)
        .map(|f| {
            let mean: f64 = codebook.entries.iter().map(|(_, v)| v[f]).sum::<f64>() / n_classes;
            let var: f64 = codebook
                .entries
                .iter()
                .map(|(_, v)| (v[f] - mean).powi(2))
                .sum::<f64>()
                / n_classes;
            (f, var)
        })
        .collect();
    variances.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut shot_counter: std::collections::BTreeMap<usize, usize> = Default::default();
    for v in per_shot {
        let n = shot_counter.entry(v.class_id).or_insert(0);
        labels.push(format!("class{}-shot{}", v.class_id, n));
        *n += 1;
        rows.push(v.values.to_vec());
    }
    for (class_id, v) in &codebook.entries {
        labels.push(format!("class{class_id}-mean"));
        rows.push(v.to_vec());
    }

    let n = rows.len();
    let mut distances = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&rows[i], &rows[j]);
            distances[i][j] = d;
            distances[j][i] = d;
        }
    }

    Ok(VectorAnalysis { variances, labels, distances })
}

impl VectorAnalysis {
    pub fn variance_csv(&self) -> String {
        let mut out = String::from("rank,feature,variance\n");
        for (rank, (f, v)) in self.variances.iter().enumerate() {
            let _ = writeln!(out, "{rank},{f},{v}");
        }
        out
    }

    pub fn distance_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{l}");
            for v in &self.distances[i] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use ndarray::Array1;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64) -> Detection {
        Detection { bbox: BBox::new(cx, cy, w, h, class_id), class_id, score }
    }

    fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Annotation {
        Annotation { bbox: BBox::new(cx, cy, w, h, class_id), difficult: false }
    }

    #[test]
    fn voc_ap_perfect_and_empty() {
        let perfect = vec![(0.5, 1.0), (1.0, 1.0)];
        assert_eq!(voc_ap(&perfect, ApMode::ElevenPoint), 1.0);
        assert!((voc_ap(&perfect, ApMode::Area) - 1.0).abs() < 1e-12);
        assert_eq!(voc_ap(&[], ApMode::ElevenPoint), 0.0);
    }

    #[test]
    fn voc_ap_top_false_positive_hand_case() {
        // 2 predictions / 1 gt, top-scored is FP, second is TP:
        // PR points (0, 0) then (1, 0.5); every 11-point threshold sees max
        // precision 0.5 at recall 1.
        let pairs = vec![(0.0, 0.0), (1.0, 0.5)];
        assert!((voc_ap(&pairs, ApMode::ElevenPoint) - 0.5).abs() < 1e-12);
        assert!((voc_ap(&pairs, ApMode::Area) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_single_match_at_iou_above_threshold() {
        let gts = vec![vec![gt(0.5, 0.5, 0.4, 0.4, 0)]];
        // shifted box with IoU ~0.6 against the gt
        let dets = vec![vec![det(0.54, 0.5, 0.4, 0.4, 0, 0.9)]];
        let names = vec!["a".to_string()];
        let rep = evaluate(&dets, &gts, &[0], &names, 0.5, ApMode::ElevenPoint, "all");
        assert!(iou(&dets[0][0].bbox, &gts[0][0].bbox) > 0.5);
        assert_eq!(rep.per_class[0].ap, 1.0);
        assert_eq!(rep.map, 1.0);
    }

    #[test]
    fn evaluate_duplicate_detection_is_fp_after_full_recall() {
        let gts = vec![vec![gt(0.5, 0.5, 0.4, 0.4, 0)]];
        let dets = vec![vec![
            det(0.5, 0.5, 0.4, 0.4, 0, 0.9),
            det(0.5, 0.5, 0.4, 0.4, 0, 0.8),
        ]];
        let names = vec!["a".to_string()];
        let rep = evaluate(&dets, &gts, &[0], &names, 0.5, ApMode::ElevenPoint, "all");
        // hand PR table: (1, 1) then (1, 0.5); 11-point sees precision 1 at
        // every threshold
        assert_eq!(rep.per_class[0].ap, 1.0);
        assert_eq!(rep.per_class[0].n_det, 2);
    }

    #[test]
    fn difficult_ground_truth_neither_counts_nor_penalizes() {
        let gts = vec![vec![
            Annotation { bbox: BBox::new(0.5, 0.5, 0.4, 0.4, 0), difficult: true },
            gt(0.2, 0.2, 0.2, 0.2, 0),
        ]];
        let dets = vec![vec![
            det(0.5, 0.5, 0.4, 0.4, 0, 0.9), // overlaps only the difficult gt
            det(0.2, 0.2, 0.2, 0.2, 0, 0.8),
        ]];
        let names = vec!["a".to_string()];
        let rep = evaluate(&dets, &gts, &[0], &names, 0.5, ApMode::ElevenPoint, "all");
        assert_eq!(rep.per_class[0].n_gt, 1);
        assert_eq!(rep.per_class[0].ap, 1.0);
    }

    /// Straight-line reference: recompute matching per class with explicit
    /// nested scans, then AP from the same PR definition.
    fn evaluate_oracle(
        dets_per_image: &[Vec<Detection>],
        gts_per_image: &[Vec<Annotation>],
        class_id: usize,
        thr: f64,
    ) -> f64 {
        let mut flat: Vec<(usize, Detection)> = Vec::new();
        for (i, ds) in dets_per_image.iter().enumerate() {
            for d in ds {
                if d.class_id == class_id {
                    flat.push((i, *d));
                }
            }
        }
        // selection sort by descending score, stable on input order
        let mut ordered: Vec<(usize, Detection)> = Vec::new();
        let mut used = vec![false; flat.len()];
        for _ in 0..flat.len() {
            let mut best: Option<usize> = None;
            for (i, cand) in flat.iter().enumerate() {
                if used[i] {
                    continue;
                }
                if best.is_none() || cand.1.score > flat[best.unwrap()].1.score {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            used[b] = true;
            ordered.push(flat[b]);
        }
        let npos: usize = gts_per_image
            .iter()
            .flat_map(|g| g.iter())
            .filter(|g| g.bbox.class_id == class_id && !g.difficult)
            .count();
        let mut taken: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut pairs = Vec::new();
        for (img, d) in ordered {
            let mut best_iou = 0.0;
            let mut best_gi = None;
            for (gi, g) in gts_per_image[img].iter().enumerate() {
                if g.bbox.class_id != class_id {
                    continue;
                }
                let ov = iou(&d.bbox, &g.bbox);
                if ov >= thr && ov > best_iou {
                    best_iou = ov;
                    best_gi = Some(gi);
                }
            }
            match best_gi {
                Some(gi) if gts_per_image[img][gi].difficult => continue,
                Some(gi) if !taken[img][gi] => {
                    taken[img][gi] = true;
                    tp += 1.0;
                }
                _ => fp += 1.0,
            }
            if npos > 0 {
                pairs.push((tp / npos as f64, tp / (tp + fp)));
            }
        }
        voc_ap(&pairs, ApMode::ElevenPoint)
    }

    fn random_instance(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_images = rng.gen_range(1..4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..n_images {
            let g: Vec<Annotation> = (0..rng.gen_range(0..5))
                .map(|_| Annotation {
                    bbox: BBox::new(
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.1..0.4),
                        rng.gen_range(0.1..0.4),
                        rng.gen_range(0..3),
                    ),
                    difficult: rng.gen_bool(0.2),
                })
                .collect();
            let d: Vec<Detection> = (0..rng.gen_range(0..10))
                .map(|i| {
                    let class_id = rng.gen_range(0..3);
                    Detection {
                        bbox: BBox::new(
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.1..0.4),
                            rng.gen_range(0.1..0.4),
                            class_id,
                        ),
                        class_id,
                        score: 0.9999 - (i as f64) * 0.0037 - rng.gen_range(0.0..0.4),
                    }
                })
                .collect();
            gts.push(g);
            dets.push(d);
        }
        (dets, gts)
    }

    #[test]
    fn evaluate_matches_bruteforce_oracle() {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        for seed in 0..250 {
            let (dets, gts) = random_instance(seed);
            let rep = evaluate(&dets, &gts, &[0, 1, 2], &names, 0.5, ApMode::ElevenPoint, "all");
            for row in &rep.per_class {
                let want = evaluate_oracle(&dets, &gts, row.class_id, 0.5);
                assert!(
                    (row.ap - want).abs() < 1e-12,
                    "seed {seed} class {}: {} vs oracle {}",
                    row.class_id,
                    row.ap,
                    want
                );
            }
        }
    }

    #[test]
    fn adding_top_true_positive_never_decreases_ap() {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        for seed in 100..160 {
            let (mut dets, mut gts) = random_instance(seed);
            let before = evaluate(&dets, &gts, &[0], &names, 0.5, ApMode::ElevenPoint, "all").map;
            // add a fresh gt and a perfectly matching top-scored detection
            let b = BBox::new(0.9, 0.9, 0.15, 0.15, 0);
            gts[0].push(Annotation { bbox: b, difficult: false });
            dets[0].push(Detection { bbox: b, class_id: 0, score: 2.0 });
            let after = evaluate(&dets, &gts, &[0], &names, 0.5, ApMode::ElevenPoint, "all").map;
            assert!(after >= before - 1e-12, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn evaluate_is_permutation_and_scale_invariant() {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let (dets, gts) = random_instance(7);
        let rep = evaluate(&dets, &gts, &[0, 1, 2], &names, 0.5, ApMode::ElevenPoint, "all");

        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.reverse();
        let dets_p: Vec<_> = order.iter().map(|&i| dets[i].clone()).collect();
        let gts_p: Vec<_> = order.iter().map(|&i| gts[i].clone()).collect();
        let rep_p = evaluate(&dets_p, &gts_p, &[0, 1, 2], &names, 0.5, ApMode::ElevenPoint, "all");
        assert!((rep.map - rep_p.map).abs() < 1e-12);

        let dets_s: Vec<Vec<Detection>> = dets
            .iter()
            .map(|v| {
                v.iter()
                    .map(|d| Detection { score: d.score * 3.7, ..*d })
                    .collect()
            })
            .collect();
        let rep_s = evaluate(&dets_s, &gts, &[0, 1, 2], &names, 0.5, ApMode::ElevenPoint, "all");
        assert!((rep.map - rep_s.map).abs() < 1e-12);
    }

    #[test]
    fn map_is_mean_of_class_aps() {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let (dets, gts) = random_instance(42);
        let rep = evaluate(&dets, &gts, &[0, 1, 2], &names, 0.5, ApMode::ElevenPoint, "all");
        let mean = rep.per_class.iter().map(|c| c.ap).sum::<f64>() / 3.0;
        assert!((rep.map - mean).abs() < 1e-9);
    }

    fn vec_of(vals: &[f64], class_id: usize) -> ReweightVector {
        ReweightVector { values: Array1::from_vec(vals.to_vec()), class_id }
    }

    #[test]
    fn identical_vectors_give_zero_variance_and_distance() {
        let cb = ClassCodebook {
            entries: vec![
                (0, Array1::from_vec(vec![1.0, 2.0])),
                (1, Array1::from_vec(vec![1.0, 2.0])),
            ],
            k: 1,
        };
        let shots = vec![vec_of(&[1.0, 2.0], 0), vec_of(&[1.0, 2.0], 1)];
        let a = analyze_vectors(&shots, &cb).unwrap();
        assert!(a.variances.iter().all(|(_, v)| *v == 0.0));
        assert!(a.distances.iter().flatten().all(|&d| d.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_unit_vectors_have_distance_one() {
        let cb = ClassCodebook {
            entries: vec![
                (0, Array1::from_vec(vec![1.0, 0.0])),
                (1, Array1::from_vec(vec![0.0, 1.0])),
            ],
            k: 1,
        };
        let a = analyze_vectors(&[], &cb).unwrap();
        assert!((a.distances[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(a.distances[0][0], 0.0);
        assert_eq!(a.distances[1][0], a.distances[0][1]);
    }

    #[test]
    fn variances_match_two_pass_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 6;
        let entries: Vec<(usize, Array1<f64>)> = (0..3)
            .map(|c| (c, Array1::from_shape_fn(m, |_| rng.gen_range(-2.0..2.0))))
            .collect();
        let shots: Vec<ReweightVector> = (0..3)
            .flat_map(|c| {
                (0..5).map(move |_| c).collect::<Vec<_>>()
            })
            .map(|c| {
                vec_of(
                    &(0..m).map(|_| 0.5).collect::<Vec<f64>>(),
                    c,
                )
            })
            .collect();
        let cb = ClassCodebook { entries: entries.clone(), k: 5 };
        let a = analyze_vectors(&shots, &cb).unwrap();
        for &(f, var) in &a.variances {
            let vals: Vec<f64> = entries.iter().map(|(_, v)| v[f]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let want = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((var - want).abs() < 1e-12);
        }
        // sorted descending
        for w in a.variances.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        assert!(analyze_vectors(&[], &ClassCodebook { entries: entries[..1].to_vec(), k: 1 }).is_err());
    }
}
