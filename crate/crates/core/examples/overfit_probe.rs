//! Overfit diagnostic: train the few-shot model on a handful of images and
//! evaluate on the very same images. A correct pipeline should memorize and
//! reach high mAP; coordinate or gradient bugs show up as a ceiling near 0.

use fsrw_core::config::{scaled_schedule, ExperimentConfig};
use fsrw_core::data::synth_generate;
use fsrw_core::episodes::preset_split;
use fsrw_core::geometry::AnchorFlag;
use fsrw_core::train::{
    base_train, detect_dataset_fewshot, report_for, snapshot_codebook, TrainContext,
};

fn main() {
    let mut exp = ExperimentConfig::default();
    let n_images: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(24);
    let iters: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    exp.data.train_images = n_images;
    exp.train.base.iterations = iters;
    exp.train.base.lr_schedule = scaled_schedule(iters);
    exp.eval.snapshot_images = None;
    if std::env::var("NOCLIP").is_ok() {
        exp.train.base.grad_clip = None;
    }
    if let Ok(v) = std::env::var("CLIP") {
        exp.train.base.grad_clip = Some(v.parse().unwrap());
    }
    if let Ok(v) = std::env::var("SUBSAMPLE") {
        exp.train.loss.negative_subsample = Some(v.parse().unwrap());
    }
    if let Ok(v) = std::env::var("NOOBJ") {
        exp.train.loss.lambda_noobj = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("LR") {
        let lr: f64 = v.parse().unwrap();
        exp.train.base.lr_schedule = vec![(0, lr)];
    }
    if let Ok(v) = std::env::var("BATCH") {
        exp.train.base.batch_size = v.parse().unwrap();
    }

    let train = synth_generate(&exp.data, 0, n_images).unwrap();
    let split = preset_split(1, 12, 4).unwrap();

    // sanity: targets exist
    let grid = fsrw_core::geometry::GridSpec::new(
        8,
        fsrw_core::train::resolve_anchors(&exp, &train),
        8,
    )
    .unwrap();
    let mut pos = 0;
    let mut ign = 0;
    for rec in &train.index.records {
        let boxes: Vec<_> = rec
            .objects
            .iter()
            .filter(|o| split.base_ids.contains(&o.bbox.class_id))
            .map(|o| {
                let mut b = o.bbox;
                b.class_id = split.base_ids.iter().position(|&c| c == b.class_id).unwrap();
                b
            })
            .collect();
        let t = fsrw_core::geometry::encode_targets(&boxes, &grid, 0.6).unwrap();
        pos += t.positives.len();
        ign += t.flags.iter().filter(|f| **f == AnchorFlag::Ignore).count();
    }
    println!("targets over {} images: {} positives, {} ignored anchors", train.len(), pos, ign);

    let ctx = TrainContext { exp: &exp, train: &train, eval: Some(&train), split: &split };
    let t0 = std::time::Instant::now();
    let (model, record) = base_train(&ctx).unwrap();
    println!("trained {} iters in {:.1}s", iters, t0.elapsed().as_secs_f64());
    for s in record.snapshots.iter().rev().take(3) {
        println!("  iter {:>5} base mAP {:?}", s.iteration, s.base_map);
    }
    let first = &record.entries[..10.min(record.entries.len())];
    let last = &record.entries[record.entries.len().saturating_sub(10)..];
    let mean = |es: &[fsrw_core::train::IterEntry]| {
        let n = es.len() as f64;
        (
            es.iter().map(|e| e.l_cls).sum::<f64>() / n,
            es.iter().map(|e| e.l_bbx).sum::<f64>() / n,
            es.iter().map(|e| e.l_obj).sum::<f64>() / n,
        )
    };
    println!("  loss components first-10 {:?}", mean(first));
    println!("  loss components last-10  {:?}", mean(last));

    // inspect raw detection behavior on one training image
    let codebook = snapshot_codebook(&model, &train, &split.base_ids, 1, 3).unwrap();
    let dets = detect_dataset_fewshot(&model, &codebook, &train, 1e-4, 0.45, Some(4)).unwrap();
    for (i, d) in dets.iter().enumerate() {
        let top: Vec<String> = d
            .iter()
            .take(3)
            .map(|d| {
                format!(
                    "cls{} s={:.3} at ({:.2},{:.2},{:.2},{:.2})",
                    d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
                )
            })
            .collect();
        let gt: Vec<String> = train.index.records[i]
            .objects
            .iter()
            .map(|o| {
                format!(
                    "cls{} at ({:.2},{:.2},{:.2},{:.2})",
                    o.bbox.class_id, o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h
                )
            })
            .collect();
        println!("img {i}: gt [{}] top dets [{}]", gt.join("; "), top.join("; "));
    }
    let rep = report_for(&dets, &train, &split.base_ids, "base", &exp);
    println!("overfit base mAP on first 4 train images: {:.4}", rep.map);
}
