//! Synthetic shapes benchmark: filled anti-aliased shapes on noisy
//! backgrounds, classes formed as shape x color products so that visually
//! similar classes exist. Generation is deterministic per (seed, index).

use super::{Annotation, DataError, Dataset, DatasetIndex, ImageRecord, INDEX_FORMAT};
use crate::geometry::{iou, BBox};
use image::{Rgb, RgbImage};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorDef {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: u32,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorDef>,
    pub objects_per_image: (usize, usize),
    /// Object width as a fraction of the image side.
    pub size_range: (f64, f64),
    /// Maximum pairwise IoU between ground-truth boxes of one image.
    pub iou_cap: f64,
    /// Per-pixel background noise amplitude in [0, 1].
    pub noise: f64,
    /// Count of small unannotated gray distractor blobs per image.
    pub clutter: usize,
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 128,
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            colors: vec![
                ColorDef { name: "red".into(), rgb: [200, 40, 40] },
                ColorDef { name: "green".into(), rgb: [40, 170, 60] },
                ColorDef { name: "blue".into(), rgb: [50, 80, 210] },
                ColorDef { name: "yellow".into(), rgb: [220, 200, 40] },
            ],
            objects_per_image: (1, 3),
            size_range: (0.2, 0.45),
            iou_cap: 0.1,
            noise: 0.03,
            clutter: 0,
            seed: 7,
            train_images: 2000,
            test_images: 400,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_classes());
        for shape in &self.shapes {
            for color in &self.colors {
                names.push(format!("{}-{}", shape.name(), color.name));
            }
        }
        names
    }

    fn class_parts(&self, class_id: usize) -> (ShapeKind, &ColorDef) {
        let shape = self.shapes[class_id / self.colors.len()];
        let color = &self.colors[class_id % self.colors.len()];
        (shape, color)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_classes() < 6 {
            return Err(DataError::Invalid(format!(
                "shape x color grid yields {} classes; at least 6 are needed for base/novel splits",
                self.n_classes()
            )));
        }
        if self.objects_per_image.0 == 0 || self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(DataError::Invalid("objects_per_image range is empty".into()));
        }
        let (lo, hi) = self.size_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(DataError::Invalid("size_range must satisfy 0 < lo <= hi <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.iou_cap) {
            return Err(DataError::Invalid("iou_cap must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mix a master seed, a stream tag and an index into a ChaCha key so that
/// every record draws from an independent, reproducible stream.
pub fn derive_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..32].copy_from_slice(&(master ^ stream.rotate_left(17) ^ index.rotate_left(43)).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

const STREAM_IMAGE: u64 = 0x494d4147; // "IMAG"
const STREAM_BLOCK: u64 = 0x424c4b; // "BLK"

/// Images per stratification block. Classes are dealt round-robin from a
/// per-block shuffled permutation so frequencies stay uniform; each image
/// reads its slice of the block plan, keeping generation pure per record.
const BLOCK: usize = 12;

struct BlockPlan {
    n_objects: Vec<usize>,
    perm: Vec<usize>,
}

fn block_plan(cfg: &SynthConfig, block_idx: usize) -> BlockPlan {
    let mut rng = derive_rng(cfg.seed, STREAM_BLOCK, block_idx as u64);
    let n_objects = (0..BLOCK)
        .map(|_| rng.gen_range(cfg.objects_per_image.0..=cfg.objects_per_image.1))
        .collect();
    let mut perm: Vec<usize> = (0..cfg.n_classes()).collect();
    perm.shuffle(&mut rng);
    BlockPlan { n_objects, perm }
}

/// The classes assigned to one image's object slots.
fn classes_for_image(cfg: &SynthConfig, index: usize) -> Vec<usize> {
    let plan = block_plan(cfg, index / BLOCK);
    let pos = index % BLOCK;
    let offset: usize = plan.n_objects[..pos].iter().sum();
    let n = plan.n_objects[pos];
    (0..n).map(|j| plan.perm[(offset + j) % cfg.n_classes()]).collect()
}

/// Render `count` images starting at record index `first_index`.
pub fn synth_generate(cfg: &SynthConfig, first_index: usize, count: usize) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let idx = first_index + i;
        let (img, objects) = render_image(cfg, idx as u64);
        records.push(ImageRecord {
            id: format!("synth-{idx:06}"),
            width: cfg.image_size,
            height: cfg.image_size,
            objects,
            file: Some(format!("images/synth-{idx:06}.png")),
        });
        images.push(img);
    }
    let index = DatasetIndex {
        format: INDEX_FORMAT.into(),
        class_names: cfg.class_names(),
        records,
    };
    index.validate()?;
    Ok(Dataset { index, images })
}

fn render_image(cfg: &SynthConfig, index: u64) -> (RgbImage, Vec<Annotation>) {
    let mut rng = derive_rng(cfg.seed, STREAM_IMAGE, index);
    let size = cfg.image_size;
    let mut img = RgbImage::new(size, size);
    let base = 215.0;
    for px in img.pixels_mut() {
        for ch in 0..3 {
            let n = rng.gen_range(-cfg.noise..=cfg.noise) * 255.0;
            px.0[ch] = (base + n).clamp(0.0, 255.0) as u8;
        }
    }

    for _ in 0..cfg.clutter {
        let r = rng.gen_range(2.0..5.0);
        let cx = rng.gen_range(r..size as f64 - r);
        let cy = rng.gen_range(r..size as f64 - r);
        let shade = rng.gen_range(120..180) as u8;
        draw_shape(&mut img, ShapeKind::Circle, cx, cy, 2.0 * r, 2.0 * r, Rgb([shade, shade, shade]));
    }

    let classes = classes_for_image(cfg, index as usize);
    let mut placed: Vec<BBox> = Vec::new();
    let mut annotations = Vec::new();
    for (obj_i, &class_id) in classes.iter().enumerate() {
        let mut ok = false;
        for _attempt in 0..20 {
            let (shape, color) = cfg.class_parts(class_id);
            let w = rng.gen_range(cfg.size_range.0..=cfg.size_range.1);
            let h = match shape {
                ShapeKind::Triangle => w * rng.gen_range(0.85..=1.1),
                _ => w,
            };
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let bbox = BBox::new(cx, cy, w, h, class_id);
            if placed.iter().any(|p| iou(p, &bbox) > cfg.iou_cap) {
                continue;
            }
            draw_shape(
                &mut img,
                shape,
                cx * size as f64,
                cy * size as f64,
                w * size as f64,
                h * size as f64,
                Rgb(color.rgb),
            );
            placed.push(bbox);
            annotations.push(Annotation { bbox, difficult: false });
            ok = true;
            break;
        }
        if !ok {
            log::warn!("image {index}: no non-overlapping placement for object {obj_i}, skipping");
        }
    }
    (img, annotations)
}

/// Coverage of pixel (px, py) by the shape, estimated on a 4x4 subgrid.
fn coverage(shape: ShapeKind, cx: f64, cy: f64, w: f64, h: f64, px: u32, py: u32) -> f64 {
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px as f64 + (sx as f64 + 0.5) / 4.0;
            let y = py as f64 + (sy as f64 + 0.5) / 4.0;
            let dx = x - cx;
            let dy = y - cy;
            let inside = match shape {
                ShapeKind::Circle => {
                    let rx = w / 2.0;
                    let ry = h / 2.0;
                    (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
                }
                ShapeKind::Square => dx.abs() <= w / 2.0 && dy.abs() <= h / 2.0,
                ShapeKind::Triangle => {
                    // apex up: width shrinks linearly from the base to the tip
                    let t = (dy + h / 2.0) / h; // 0 at apex row, 1 at base
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * w / 2.0
                }
            };
            if inside {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn draw_shape(img: &mut RgbImage, shape: ShapeKind, cx: f64, cy: f64, w: f64, h: f64, color: Rgb<u8>) {
    let x0 = ((cx - w / 2.0).floor().max(0.0)) as u32;
    let y0 = ((cy - h / 2.0).floor().max(0.0)) as u32;
    let x1 = ((cx + w / 2.0).ceil() as u32).min(img.width() - 1);
    let y1 = ((cy + h / 2.0).ceil() as u32).min(img.height() - 1);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let cov = coverage(shape, cx, cy, w, h, px, py);
            if cov == 0.0 {
                continue;
            }
            let bg = img.get_pixel(px, py).0;
            let mut blended = [0u8; 3];
            for ch in 0..3 {
                blended[ch] =
                    (bg[ch] as f64 * (1.0 - cov) + color.0[ch] as f64 * cov).round() as u8;
            }
            img.put_pixel(px, py, Rgb(blended));
        }
    }
}

/// Write a dataset as a directory of PNG images plus one JSON index file.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (rec, img) in dataset.index.records.iter().zip(&dataset.images) {
        let file = rec.file.as_deref().unwrap_or("images/unnamed.png");
        img.save(dir.join(file))?;
    }
    let json = serde_json::to_string_pretty(&dataset.index)?;
    std::fs::write(dir.join("index.json"), json)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset, DataError> {
    let json = std::fs::read_to_string(dir.join("index.json"))?;
    let index: DatasetIndex = serde_json::from_str(&json)?;
    if index.format != INDEX_FORMAT {
        return Err(DataError::Invalid(format!(
            "unsupported index format '{}' (expected '{INDEX_FORMAT}')",
            index.format
        )));
    }
    index.validate()?;
    let mut images = Vec::with_capacity(index.records.len());
    for rec in &index.records {
        let file = rec.file.as_deref().ok_or_else(|| {
            DataError::Invalid(format!("record {} has no image file reference", rec.id))
        })?;
        let img = image::open(dir.join(file))?.to_rgb8();
        images.push(img);
    }
    Ok(Dataset { index, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig { image_size: 64, train_images: 8, test_images: 4, ..SynthConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = synth_generate(&cfg, 0, 6).unwrap();
        let b = synth_generate(&cfg, 0, 6).unwrap();
        assert_eq!(
            serde_json::to_string(&a.index).unwrap(),
            serde_json::to_string(&b.index).unwrap()
        );
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.as_raw(), y.as_raw());
        }
    }

    #[test]
    fn single_object_mode_yields_one_box_per_image() {
        let cfg = SynthConfig { objects_per_image: (1, 1), ..small_cfg() };
        let ds = synth_generate(&cfg, 0, 10).unwrap();
        for rec in &ds.index.records {
            assert_eq!(rec.objects.len(), 1);
        }
    }

    #[test]
    fn generated_boxes_satisfy_invariants_and_iou_cap() {
        let cfg = SynthConfig { train_images: 0, test_images: 0, ..SynthConfig::default() };
        let ds = synth_generate(&cfg, 0, 550).unwrap();
        let mut total = 0;
        for rec in &ds.index.records {
            for (i, a) in rec.objects.iter().enumerate() {
                a.bbox.validate().unwrap();
                total += 1;
                for b in &rec.objects[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox) <= cfg.iou_cap + 1e-12);
                }
            }
        }
        assert!(total >= 1000, "need >= 1000 boxes for the validation pass, got {total}");
    }

    #[test]
    fn class_frequencies_roughly_uniform() {
        let cfg = SynthConfig::default();
        let ds = synth_generate(&cfg, 0, 1000).unwrap();
        let mut counts = vec![0usize; cfg.n_classes()];
        for rec in &ds.index.records {
            for obj in &rec.objects {
                counts[obj.bbox.class_id] += 1;
            }
        }
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        for (c, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - mean).abs() / mean;
            assert!(dev < 0.10, "class {c} frequency deviates {:.1}% from uniform", dev * 100.0);
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = small_cfg();
        let ds = synth_generate(&cfg, 0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.index, ds.index);
        assert_eq!(loaded.images[2].as_raw(), ds.images[2].as_raw());
    }
}
