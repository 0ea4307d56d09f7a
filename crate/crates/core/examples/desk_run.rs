//! Quick desk-scale run: generate the synthetic benchmark, base-train the
//! reweighting model on split 1, fine-tune at k=10 and print mAPs.

use fsrw_core::config::ExperimentConfig;
use fsrw_core::data::synth_generate;
use fsrw_core::episodes::preset_split;
use fsrw_core::train::{base_train, finetune, TrainContext};

fn main() {
    let mut exp = ExperimentConfig::default();
    if let Some(iters) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        exp.train.base.iterations = iters;
        exp.train.base.lr_schedule = fsrw_core::config::scaled_schedule(iters);
    }
    if std::env::var("NOCLIP").is_ok() {
        exp.train.base.grad_clip = None;
        exp.train.finetune.grad_clip = None;
    }
    if let Ok(v) = std::env::var("CLIP") {
        let c: f64 = v.parse().unwrap();
        exp.train.base.grad_clip = Some(c);
        exp.train.finetune.grad_clip = Some(c);
    }
    if let Ok(v) = std::env::var("SUBSAMPLE") {
        exp.train.loss.negative_subsample = Some(v.parse().unwrap());
    }
    if let Ok(v) = std::env::var("LR") {
        let lr: f64 = v.parse().unwrap();
        exp.train.base.lr_schedule = vec![(0, lr)];
    }
    if let Ok(v) = std::env::var("BATCH") {
        exp.train.base.batch_size = v.parse().unwrap();
    }

    let t0 = std::time::Instant::now();
    let train = synth_generate(&exp.data, 0, exp.data.train_images).unwrap();
    let test = synth_generate(&exp.data, 1_000_000, exp.data.test_images).unwrap();
    println!("data: {} train / {} test images in {:.1}s", train.len(), test.len(), t0.elapsed().as_secs_f64());

    let split = preset_split(1, 12, 4).unwrap();
    let ctx = TrainContext { exp: &exp, train: &train, eval: Some(&test), split: &split };

    let t1 = std::time::Instant::now();
    let (mut model, record) = base_train(&ctx).unwrap();
    println!("base training: {:.1}s", t1.elapsed().as_secs_f64());
    for s in &record.snapshots {
        println!("  iter {:>5}  base mAP {:?}", s.iteration, s.base_map);
    }
    let first = &record.entries[..20.min(record.entries.len())];
    let last = &record.entries[record.entries.len().saturating_sub(20)..];
    let mean = |es: &[fsrw_core::train::IterEntry]| es.iter().map(|e| e.total).sum::<f64>() / es.len() as f64;
    println!("  loss first-20 mean {:.4}  last-20 mean {:.4}", mean(first), mean(last));

    // diagnosis: where is quality lost?
    {
        use fsrw_core::train::{detect_dataset_fewshot, report_for, snapshot_codebook};
        let cb = snapshot_codebook(&model, &train, &split.base_ids, exp.train.seed, 10).unwrap();
        let dets = detect_dataset_fewshot(&model, &cb, &test, 1e-3, 0.45, Some(150)).unwrap();
        let map05 = report_for(&dets, &test, &split.base_ids, "base", &exp).map;
        let mut exp03 = exp.clone();
        exp03.eval.iou_threshold = 0.3;
        let map03 = report_for(&dets, &test, &split.base_ids, "base", &exp03).map;
        // class-agnostic localization recall and classification accuracy at matched boxes
        let mut total_gt = 0; let mut loc_hit = 0; let mut cls_hit = 0; let mut iou_sum = 0.0;
        for (i, rec) in test.index.records.iter().take(150).enumerate() {
            for obj in &rec.objects {
                if !split.base_ids.contains(&obj.bbox.class_id) { continue; }
                total_gt += 1;
                let mut best_iou = 0.0; let mut best_cls = None;
                for d in &dets[i] {
                    let v = fsrw_core::geometry::iou(&d.bbox, &obj.bbox);
                    if v > best_iou { best_iou = v; best_cls = Some(d.class_id); }
                }
                iou_sum += best_iou;
                if best_iou >= 0.5 { loc_hit += 1; if best_cls == Some(obj.bbox.class_id) { cls_hit += 1; } }
            }
        }
        println!("diag: base mAP@0.5 {:.4}  mAP@0.3 {:.4}", map05, map03);
        println!("diag: gt {}  loc-recall@0.5 {:.3}  cls-acc|loc {:.3}  mean best IoU {:.3}",
            total_gt, loc_hit as f64 / total_gt as f64,
            if loc_hit > 0 { cls_hit as f64 / loc_hit as f64 } else { 0.0 },
            iou_sum / total_gt as f64);
    }
    let t2 = std::time::Instant::now();
    let (_codebook, _set, ft_record) = finetune(&ctx, &mut model, 10).unwrap();
    println!("finetune k=10: {:.1}s", t2.elapsed().as_secs_f64());
    for s in &ft_record.snapshots {
        println!("  iter {:>5}  base {:?}  novel {:?}", s.iteration, s.base_map, s.novel_map);
    }
}
