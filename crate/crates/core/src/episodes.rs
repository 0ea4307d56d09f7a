//! Base/novel class splits, episodic task sampling for base training, and
//! exact-k-shot set construction for fine-tuning. All sampling derives from
//! (seed, index) so episode sequences are reproducible bit for bit.

use crate::data::{derive_rng, Dataset, DatasetIndex};
use crate::geometry::BBox;
use crate::model::SupportExample;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const STREAM_SPLIT: u64 = 0x53504c54; // "SPLT"
const STREAM_EPISODE: u64 = 0x45505344; // "EPSD"
const STREAM_SHOTS: u64 = 0x53484f54; // "SHOT"

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("class {class_id} has no annotated objects in this dataset")]
    ClassWithoutAnnotations { class_id: usize },
    #[error("not enough annotations for k={k}: {details}")]
    InsufficientAnnotations { k: usize, details: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Disjoint base/novel class partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_ids: Vec<usize>,
    pub novel_ids: Vec<usize>,
    pub seed: u64,
}

impl ClassSplit {
    pub fn all_ids(&self) -> Vec<usize> {
        let mut all = self.base_ids.clone();
        all.extend(&self.novel_ids);
        all.sort_unstable();
        all
    }
}

/// Draw a random base/novel partition with `n_novel` novel classes.
pub fn make_split(n_classes: usize, n_novel: usize, seed: u64) -> Result<ClassSplit, EpisodeError> {
    if n_novel == 0 || n_novel >= n_classes {
        return Err(EpisodeError::InvalidSplit(format!(
            "n_novel must lie in 1..{n_classes}, got {n_novel}"
        )));
    }
    let mut rng = derive_rng(seed, STREAM_SPLIT, 0);
    let mut ids: Vec<usize> = (0..n_classes).collect();
    ids.shuffle(&mut rng);
    let mut novel_ids: Vec<usize> = ids[..n_novel].to_vec();
    let mut base_ids: Vec<usize> = ids[n_novel..].to_vec();
    novel_ids.sort_unstable();
    base_ids.sort_unstable();
    Ok(ClassSplit { base_ids, novel_ids, seed })
}

/// The three named splits of the 12-class synthetic benchmark. Each novel
/// set mixes shapes and colors so every shape and color keeps base-class
/// representatives. Other class counts fall back to fixed per-preset seeds.
pub fn preset_split(preset: usize, n_classes: usize, n_novel: usize) -> Result<ClassSplit, EpisodeError> {
    if !(1..=3).contains(&preset) {
        return Err(EpisodeError::InvalidSplit(format!("preset must be 1..=3, got {preset}")));
    }
    if n_classes == 12 && n_novel == 4 {
        let novel: Vec<usize> = match preset {
            1 => vec![1, 4, 10, 11],
            2 => vec![0, 3, 6, 9],
            _ => vec![2, 5, 7, 8],
        };
        let base: Vec<usize> = (0..12).filter(|c| !novel.contains(c)).collect();
        return Ok(ClassSplit { base_ids: base, novel_ids: novel, seed: preset as u64 });
    }
    make_split(n_classes, n_novel, 0xBA5E + preset as u64)
}

/// A support slot: which annotated object seeds the (image, mask) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub class_id: usize,
    pub record_idx: usize,
    pub object_idx: usize,
}

/// One query image with its supervised boxes (global class ids) and the
/// regions to exclude from negative objectness loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRef {
    pub record_idx: usize,
    pub boxes: Vec<BBox>,
    pub ignore: Vec<BBox>,
    pub flip: bool,
}

/// Support set plus query batch: the unit of episodic training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub support: Vec<SupportRef>,
    pub query: Vec<QueryRef>,
    /// Classes whose annotations are supervised in the queries.
    pub active_classes: Vec<usize>,
}

/// Sample one episode: a support per `support_classes` entry and a query
/// batch whose annotations are restricted to `active_classes`; objects of
/// `ignored_classes` become ignore regions (no loss of any kind inside).
#[allow(clippy::too_many_arguments)]
pub fn sample_episode(
    index: &DatasetIndex,
    active_classes: &[usize],
    support_classes: &[usize],
    ignored_classes: &[usize],
    master_seed: u64,
    episode_idx: u64,
    query_batch: usize,
    flip_augment: bool,
) -> Result<FewShotTask, EpisodeError> {
    if index.records.is_empty() {
        return Err(EpisodeError::EmptyDataset);
    }
    let mut rng = derive_rng(master_seed, STREAM_EPISODE, episode_idx);

    let mut support = Vec::with_capacity(support_classes.len());
    for &class_id in support_classes {
        let instances = index.class_instances(class_id);
        if instances.is_empty() {
            return Err(EpisodeError::ClassWithoutAnnotations { class_id });
        }
        let (record_idx, object_idx) = instances[rng.gen_range(0..instances.len())];
        support.push(SupportRef { class_id, record_idx, object_idx });
    }

    let mut query = Vec::with_capacity(query_batch);
    for _ in 0..query_batch {
        let record_idx = rng.gen_range(0..index.records.len());
        let flip = flip_augment && rng.gen_bool(0.5);
        let rec = &index.records[record_idx];
        let mut boxes = Vec::new();
        let mut ignore = Vec::new();
        for obj in &rec.objects {
            let mut b = obj.bbox;
            if flip {
                b.cx = 1.0 - b.cx;
            }
            if active_classes.contains(&b.class_id) {
                boxes.push(b);
            } else if ignored_classes.contains(&b.class_id) {
                ignore.push(b);
            }
        }
        query.push(QueryRef { record_idx, boxes, ignore, flip });
    }

    Ok(FewShotTask {
        support,
        query,
        active_classes: active_classes.to_vec(),
    })
}

/// Standard base-training episode: supports for every base class, queries
/// supervised on base classes, novel objects treated as ignore regions.
pub fn sample_base_episode(
    index: &DatasetIndex,
    split: &ClassSplit,
    master_seed: u64,
    episode_idx: u64,
    query_batch: usize,
    flip_augment: bool,
) -> Result<FewShotTask, EpisodeError> {
    sample_episode(
        index,
        &split.base_ids,
        &split.base_ids,
        &split.novel_ids,
        master_seed,
        episode_idx,
        query_batch,
        flip_augment,
    )
}

/// Exactly k annotated boxes per class across base and novel classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSet {
    pub k: usize,
    /// Per class (sorted): the selected (record, object) pairs.
    pub shots: BTreeMap<usize, Vec<(usize, usize)>>,
    /// Distinct record indices contributing at least one selected box.
    pub records: Vec<usize>,
}

impl FinetuneSet {
    pub fn classes(&self) -> Vec<usize> {
        self.shots.keys().copied().collect()
    }

    pub fn is_selected(&self, record_idx: usize, object_idx: usize) -> bool {
        self.shots
            .values()
            .any(|v| v.contains(&(record_idx, object_idx)))
    }

    pub fn total_boxes(&self) -> usize {
        self.shots.values().map(Vec::len).sum()
    }
}

/// Select exactly k boxes per class, deterministically from `seed`. An image
/// may contribute boxes to several classes. Fails listing every class with
/// fewer than k annotations.
pub fn build_finetune_set(
    index: &DatasetIndex,
    split: &ClassSplit,
    k: usize,
    seed: u64,
) -> Result<FinetuneSet, EpisodeError> {
    let classes = split.all_ids();
    let mut deficient = Vec::new();
    let mut shots = BTreeMap::new();
    for &class_id in &classes {
        let mut instances = index.class_instances(class_id);
        if instances.len() < k {
            deficient.push(format!("class {class_id} has {}", instances.len()));
            continue;
        }
        let mut rng = derive_rng(seed, STREAM_SHOTS, class_id as u64);
        instances.shuffle(&mut rng);
        let mut chosen = instances[..k].to_vec();
        chosen.sort_unstable();
        shots.insert(class_id, chosen);
    }
    if !deficient.is_empty() {
        return Err(EpisodeError::InsufficientAnnotations { k, details: deficient.join(", ") });
    }
    let mut records: Vec<usize> = shots.values().flatten().map(|&(r, _)| r).collect();
    records.sort_unstable();
    records.dedup();
    Ok(FinetuneSet { k, shots, records })
}

/// Sample a fine-tuning episode from the k-shot pool: supports drawn from
/// the selected shots, queries drawn from the contributing images with only
/// selected boxes supervised (unselected objects become ignore regions).
pub fn sample_finetune_episode(
    index: &DatasetIndex,
    set: &FinetuneSet,
    support_classes: &[usize],
    master_seed: u64,
    episode_idx: u64,
    query_batch: usize,
    flip_augment: bool,
) -> Result<FewShotTask, EpisodeError> {
    let mut rng = derive_rng(master_seed, STREAM_EPISODE, episode_idx);
    let mut support = Vec::with_capacity(support_classes.len());
    for &class_id in support_classes {
        let pool = set
            .shots
            .get(&class_id)
            .ok_or(EpisodeError::ClassWithoutAnnotations { class_id })?;
        let (record_idx, object_idx) = pool[rng.gen_range(0..pool.len())];
        support.push(SupportRef { class_id, record_idx, object_idx });
    }

    let mut query = Vec::with_capacity(query_batch);
    for _ in 0..query_batch {
        let record_idx = set.records[rng.gen_range(0..set.records.len())];
        let flip = flip_augment && rng.gen_bool(0.5);
        let rec = &index.records[record_idx];
        let mut boxes = Vec::new();
        let mut ignore = Vec::new();
        for (oi, obj) in rec.objects.iter().enumerate() {
            let mut b = obj.bbox;
            if flip {
                b.cx = 1.0 - b.cx;
            }
            if set.is_selected(record_idx, oi) {
                boxes.push(b);
            } else {
                ignore.push(b);
            }
        }
        query.push(QueryRef { record_idx, boxes, ignore, flip });
    }

    Ok(FewShotTask {
        support,
        query,
        active_classes: set.classes(),
    })
}

/// Binary mask over a (height, width) canvas: 1 inside the box, 0 outside.
/// Pixel spans are anchored at the rounded minimum corner with rounded
/// lengths, so an interior box of normalized size (w, h) covers exactly
/// round(w*W) * round(h*H) pixels.
pub fn make_support_mask(width: usize, height: usize, bbox: &BBox) -> Array2<f64> {
    let mut mask = Array2::<f64>::zeros((height, width));
    let x0 = ((bbox.cx - bbox.w / 2.0) * width as f64).round().max(0.0) as usize;
    let y0 = ((bbox.cy - bbox.h / 2.0) * height as f64).round().max(0.0) as usize;
    let x1 = (x0 + (bbox.w * width as f64).round() as usize).min(width);
    let y1 = (y0 + (bbox.h * height as f64).round() as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            mask[(y, x)] = 1.0;
        }
    }
    mask
}

/// Materialize a support reference into a model-input example: letterbox the
/// source image to `resolution` and rasterize the mask from the transformed
/// box. When the image holds several objects of the class, the largest-area
/// box wins (ties by annotation order).
pub fn materialize_support(
    dataset: &Dataset,
    sup: &SupportRef,
    resolution: u32,
    stride: usize,
) -> Result<SupportExample, EpisodeError> {
    let rec = &dataset.index.records[sup.record_idx];
    let img = &dataset.images[sup.record_idx];
    let (arr, t) = crate::data::prepare_input(img, resolution, stride)?;
    let mut best: Option<&BBox> = None;
    for obj in &rec.objects {
        if obj.bbox.class_id != sup.class_id {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => obj.bbox.w * obj.bbox.h > b.w * b.h,
        };
        if better {
            best = Some(&obj.bbox);
        }
    }
    let chosen = best.ok_or(EpisodeError::ClassWithoutAnnotations { class_id: sup.class_id })?;
    let boxed = t.apply_box(chosen);
    let mask = make_support_mask(resolution as usize, resolution as usize, &boxed);
    let ex = SupportExample { image: arr, mask, class_id: sup.class_id };
    ex.validate()?;
    Ok(ex)
}

/// JSON manifest of an episode for external reproduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub episode: u64,
    pub support: Vec<(usize, String, usize)>,
    pub query: Vec<(String, usize, usize)>,
}

impl FewShotTask {
    pub fn manifest(&self, index: &DatasetIndex, episode: u64) -> EpisodeManifest {
        EpisodeManifest {
            episode,
            support: self
                .support
                .iter()
                .map(|s| (s.class_id, index.records[s.record_idx].id.clone(), s.object_idx))
                .collect(),
            query: self
                .query
                .iter()
                .map(|q| (index.records[q.record_idx].id.clone(), q.boxes.len(), q.ignore.len()))
                .collect(),
        }
    }
}

/// JSON manifest of a fine-tuning selection: per-class shot lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub k: usize,
    pub per_class: Vec<(usize, Vec<(String, usize)>)>,
}

impl FinetuneSet {
    pub fn manifest(&self, index: &DatasetIndex) -> FinetuneManifest {
        FinetuneManifest {
            k: self.k,
            per_class: self
                .shots
                .iter()
                .map(|(&class_id, shots)| {
                    let entries = shots
                        .iter()
                        .map(|&(r, o)| (index.records[r].id.clone(), o))
                        .collect();
                    (class_id, entries)
                })
                .collect(),
        }
    }
}
