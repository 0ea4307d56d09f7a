//! Probe the class separation of support embeddings after a short training
//! run: pairwise cosine distances between class-mean vectors and the score
//! spread across branches at positive locations.

use fsrw_core::config::ExperimentConfig;
use fsrw_core::data::synth_generate;
use fsrw_core::episodes::preset_split;
use fsrw_core::eval::analyze_vectors;
use fsrw_core::model::ReweightVector;
use fsrw_core::train::{base_train, snapshot_codebook, TrainContext};

fn main() {
    let mut exp = ExperimentConfig::default();
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    exp.train.base.iterations = iters;
    exp.train.base.lr_schedule = vec![(0, 1e-4), (30, 1e-3)];
    exp.train.base.grad_clip = Some(50.0);
    exp.train.loss.negative_subsample = Some(0.15);
    if let Ok(v) = std::env::var("BATCH") {
        exp.train.base.batch_size = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("SUBSAMPLE") {
        exp.train.loss.negative_subsample = Some(v.parse().unwrap());
    }
    if let Ok(v) = std::env::var("LR") {
        let lr: f64 = v.parse().unwrap();
        exp.train.base.lr_schedule = vec![(0, 1e-4), (30, lr)];
    }
    if let Ok(v) = std::env::var("CLS") {
        exp.train.loss.lambda_cls = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("LCOORD") {
        exp.train.loss.lambda_coord = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("LOBJ") {
        exp.train.loss.lambda_obj = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("LNOOBJ") {
        exp.train.loss.lambda_noobj = v.parse().unwrap();
    }
    if std::env::var("RWNORM_OFF").is_ok() {
        // probe: reweighter without normalization
        exp.model.normalize = true; // backbone normalized; reweighter handled in model? not configurable yet
    }
    exp.eval.snapshot_images = Some(60);

    let train = synth_generate(&exp.data, 0, exp.data.train_images).unwrap();
    let test = synth_generate(&exp.data, 1_000_000, 100).unwrap();
    let split = preset_split(1, 12, 4).unwrap();
    let ctx = TrainContext { exp: &exp, train: &train, eval: Some(&test), split: &split };
    let (model, record) = base_train(&ctx).unwrap();
    println!("final base mAP {:?}", record.final_base_map());
    let n = record.entries.len();
    for range in [0..20.min(n), n.saturating_sub(20)..n] {
        let es = &record.entries[range.clone()];
        let m = es.len() as f64;
        println!(
            "  iters {:>4}..{:<4} l_cls {:.4} l_bbx {:.4} l_obj {:.4}",
            range.start,
            range.end,
            es.iter().map(|e| e.l_cls).sum::<f64>() / m,
            es.iter().map(|e| e.l_bbx).sum::<f64>() / m,
            es.iter().map(|e| e.l_obj).sum::<f64>() / m
        );
    }

    let cb = snapshot_codebook(&model, &train, &split.base_ids, 1, 5).unwrap();
    let shots: Vec<ReweightVector> = vec![];
    let analysis = analyze_vectors(&shots, &cb).unwrap();
    println!("class-mean pairwise cosine distances:");
    let n = analysis.labels.len();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += analysis.distances[i][j];
            count += 1;
        }
    }
    println!("  mean off-diagonal distance: {:.5}", sum / count as f64);
    for i in 0..n.min(4) {
        let row: Vec<String> =
            (0..n).map(|j| format!("{:.3}", analysis.distances[i][j])).collect();
        println!("  {}: {}", analysis.labels[i], row.join(" "));
    }

    // norm of embeddings
    for (cid, v) in cb.entries.iter().take(4) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("  class {cid}: |w| = {norm:.4}, mean = {mean:.4}");
    }
}
