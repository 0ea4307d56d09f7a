//! Command-line entry point: synthetic-data generation, two-phase training,
//! evaluation, reweighting-vector analysis and baseline comparison, all
//! driven by one JSON config with dotted-path overrides.

mod config_io;
mod manifest;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use fsrw_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointModel};
use fsrw_core::config::ExperimentConfig;
use fsrw_core::data::{load_dataset_dir, synth_generate, write_dataset, Dataset};
use fsrw_core::episodes::{make_split, preset_split, ClassSplit};
use fsrw_core::eval::analyze_vectors;
use fsrw_core::geometry::Detection;
use fsrw_core::model::ReweightVector;
use fsrw_core::train::{
    base_train, clone_fewshot, clone_plain, detect_dataset_fewshot, detect_dataset_plain,
    finetune, joint_train, plain_base_train, plain_finetune, report_for, BaselineKind,
    PlainFtMode, RunRecord, TrainContext,
};
use manifest::ManifestBuilder;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fsrw", about = "Few-shot detection via feature reweighting", version)]
struct Cli {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set train.base.iterations=800 (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Output directory (default: $FSRW_RUN_DIR/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory produced by make-data (default: $FSRW_RUN_DIR/dataset).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset (train and test splits).
    MakeData,
    /// Episodic base training of the reweighting model on the base classes.
    BaseTrain,
    /// Few-shot fine-tuning from a base checkpoint; stores the class codebook.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Shot count; defaults to shots.k from the config.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evaluate a checkpoint (or a detections file) on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pre-computed detections JSON instead of running a model.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Class subset: base, novel or all.
        #[arg(long, default_value = "all")]
        subset: String,
    },
    /// Export reweighting-vector analysis CSVs and the convergence curve.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run CSV from a training command (for the convergence curve);
        /// defaults to <checkpoint dir>/finetune.csv.
        #[arg(long)]
        run_csv: Option<PathBuf>,
    },
    /// Methods x shots novel-mAP matrix over {ours, joint, ft, ft-full}.
    Compare {
        /// Comma-separated shot counts; defaults to shots.k_list.
        #[arg(long)]
        k_list: Option<String>,
        /// Comma-separated methods; defaults to ours,joint,ft,ft-full.
        #[arg(long)]
        methods: Option<String>,
    },
}

fn run_root() -> PathBuf {
    std::env::var_os("FSRW_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_split(exp: &ExperimentConfig, n_classes: usize) -> Result<ClassSplit> {
    Ok(match exp.split.preset {
        Some(p) => preset_split(p, n_classes, exp.split.n_novel)?,
        None => make_split(n_classes, exp.split.n_novel, exp.split.seed)?,
    })
}

fn load_data_dir(data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_dir = data_dir.join("train");
    let test_dir = data_dir.join("test");
    for d in [&train_dir, &test_dir] {
        if !d.join("index.json").is_file() {
            bail!(
                "missing dataset artifact {}; run `fsrw make-data` first",
                d.join("index.json").display()
            );
        }
    }
    Ok((load_dataset_dir(&train_dir)?, load_dataset_dir(&test_dir)?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exp = config_io::load_config(cli.config.as_deref(), &cli.overrides)?;
    let data_dir = cli.data.clone().unwrap_or_else(|| run_root().join("dataset"));

    match &cli.command {
        Command::MakeData => {
            let out = cli.out.clone().unwrap_or_else(|| run_root().join("dataset"));
            cmd_make_data(&exp, &out)
        }
        Command::BaseTrain => {
            let out = cli.out.clone().unwrap_or_else(|| run_root().join("base-train"));
            cmd_base_train(&exp, &data_dir, &out)
        }
        Command::Finetune { checkpoint, k } => {
            let out = cli.out.clone().unwrap_or_else(|| run_root().join("finetune"));
            cmd_finetune(&exp, &data_dir, checkpoint, k.unwrap_or(exp.shots.k), &out)
        }
        Command::Evaluate { checkpoint, detections, subset } => {
            let out = cli.out.clone().unwrap_or_else(|| run_root().join("evaluate"));
            cmd_evaluate(&exp, &data_dir, checkpoint.as_deref(), detections.as_deref(), subset, &out)
        }
        Command::Analyze { checkpoint, run_csv } => {
            let out = cli.out.clone().unwrap_or_else(|| run_root().join("analyze"));
            cmd_analyze(&exp, &data_dir, checkpoint, run_csv.as_deref(), &out)
        }
        Command::Compare { k_list, methods } => {
            let out = cli.out.clone().unwrap_or_else(|| run_root().join("compare"));
            cmd_compare(&exp, &data_dir, k_list.as_deref(), methods.as_deref(), &out)
        }
    }
}

fn cmd_make_data(exp: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let train = synth_generate(&exp.data, 0, exp.data.train_images)?;
    let test = synth_generate(&exp.data, 1_000_000, exp.data.test_images)?;
    write_dataset(&train, &out.join("train"))?;
    write_dataset(&test, &out.join("test"))?;

    let mut mb = ManifestBuilder::new("make-data", out, exp);
    mb.record_file("train/index.json")?;
    mb.record_file("test/index.json")?;
    for (sub, ds) in [("train", &train), ("test", &test)] {
        for rec in &ds.index.records {
            if let Some(f) = &rec.file {
                mb.record_file(&format!("{sub}/{f}"))?;
            }
        }
    }
    mb.finish()?;
    println!("dataset: {} train / {} test images at {}", train.len(), test.len(), out.display());
    Ok(())
}

fn write_run_outputs(mb: &mut ManifestBuilder, tag: &str, record: &RunRecord) -> Result<()> {
    mb.write_output(&format!("{tag}.csv"), record.to_csv().as_bytes())?;
    mb.write_output(
        &format!("{tag}_summary.json"),
        serde_json::to_string_pretty(&record.summary())?.as_bytes(),
    )?;
    Ok(())
}

fn cmd_base_train(exp: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (train, test) = load_data_dir(data_dir)?;
    let split = resolve_split(exp, train.index.n_classes())?;
    let ctx = TrainContext { exp, train: &train, eval: Some(&test), split: &split };
    let (model, record) = base_train(&ctx)?;

    let ckpt = out.join("base.fsrw");
    save_checkpoint(
        &ckpt,
        &CheckpointModel::FewShot(model),
        &train.index.class_names,
        None,
        None,
    )?;
    let mut mb = ManifestBuilder::new("base-train", out, exp);
    mb.record_file("base.fsrw")?;
    write_run_outputs(&mut mb, "base_train", &record)?;
    mb.finish()?;
    println!(
        "base training done: final base mAP {:?}; checkpoint at {}",
        record.final_base_map(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_finetune(
    exp: &ExperimentConfig,
    data_dir: &Path,
    checkpoint: &Path,
    k: usize,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (train, test) = load_data_dir(data_dir)?;
    let split = resolve_split(exp, train.index.n_classes())?;
    let bundle = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let CheckpointModel::FewShot(mut model) = bundle.model else {
        bail!(
            "{} holds a plain detector; finetune needs a reweighting-model checkpoint",
            checkpoint.display()
        );
    };

    let ctx = TrainContext { exp, train: &train, eval: Some(&test), split: &split };
    let (codebook, set, record) = finetune(&ctx, &mut model, k)?;

    let ckpt = out.join("finetune.fsrw");
    save_checkpoint(
        &ckpt,
        &CheckpointModel::FewShot(model),
        &train.index.class_names,
        Some(k),
        Some(&codebook),
    )?;
    let mut mb = ManifestBuilder::new("finetune", out, exp);
    mb.record_file("finetune.fsrw")?;
    write_run_outputs(&mut mb, "finetune", &record)?;
    mb.write_output(
        "finetune_set.json",
        serde_json::to_string_pretty(&set.manifest(&train.index))?.as_bytes(),
    )?;
    mb.finish()?;
    println!(
        "finetune k={k} done: novel mAP {:?}; checkpoint at {}",
        record.final_novel_map(),
        ckpt.display()
    );
    Ok(())
}

fn subset_ids(subset: &str, split: &ClassSplit) -> Result<Vec<usize>> {
    Ok(match subset {
        "base" => split.base_ids.clone(),
        "novel" => split.novel_ids.clone(),
        "all" => split.all_ids(),
        other => bail!("unknown subset '{other}' (expected base, novel or all)"),
    })
}

fn cmd_evaluate(
    exp: &ExperimentConfig,
    data_dir: &Path,
    checkpoint: Option<&Path>,
    detections: Option<&Path>,
    subset: &str,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (_, test) = load_data_dir(data_dir)?;
    let split = resolve_split(exp, test.index.n_classes())?;
    let ids = subset_ids(subset, &split)?;

    let dets: Vec<Vec<Detection>> = match (checkpoint, detections) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading detections {}", path.display()))?;
            let by_id: BTreeMap<String, Vec<Detection>> = serde_json::from_str(&text)
                .with_context(|| format!("parsing detections {}", path.display()))?;
            test.index
                .records
                .iter()
                .map(|r| by_id.get(&r.id).cloned().unwrap_or_default())
                .collect()
        }
        (Some(path), None) => {
            let bundle = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            match bundle.model {
                CheckpointModel::FewShot(model) => {
                    let codebook = bundle.codebook.ok_or_else(|| {
                        anyhow!(
                            "{} holds no class codebook; run `fsrw finetune` first",
                            path.display()
                        )
                    })?;
                    detect_dataset_fewshot(
                        &model,
                        &codebook,
                        &test,
                        exp.eval.score_threshold,
                        exp.eval.nms_threshold,
                        None,
                    )?
                }
                CheckpointModel::Plain(model) => detect_dataset_plain(
                    &model,
                    &split.all_ids(),
                    &test,
                    exp.eval.score_threshold,
                    exp.eval.nms_threshold,
                    None,
                )?,
            }
        }
        (None, None) => bail!("evaluate needs --checkpoint or --detections"),
    };

    let report = report_for(&dets, &test, &ids, subset, exp);
    let mut mb = ManifestBuilder::new("evaluate", out, exp);
    mb.write_output("report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    mb.write_output("report.txt", report.render_table().as_bytes())?;
    mb.finish()?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_analyze(
    exp: &ExperimentConfig,
    data_dir: &Path,
    checkpoint: &Path,
    run_csv: Option<&Path>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (train, _) = load_data_dir(data_dir)?;
    let bundle = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let CheckpointModel::FewShot(model) = bundle.model else {
        bail!(
            "{} holds a plain detector; analyze needs the reweighting model",
            checkpoint.display()
        );
    };
    let codebook = bundle.codebook.ok_or_else(|| {
        anyhow!("{} holds no class codebook; run `fsrw finetune` first", checkpoint.display())
    })?;
    let k = bundle.shot_count.unwrap_or(exp.shots.k);

    // re-embed the k-shot set for the per-shot vectors
    let split = resolve_split(exp, train.index.n_classes())?;
    let set = fsrw_core::episodes::build_finetune_set(&train.index, &split, k, exp.shots.seed)?;
    let res = model.cfg.input_resolution as u32;
    let stride = model.cfg.total_stride();
    let mut per_shot: Vec<ReweightVector> = Vec::new();
    for (&class_id, refs) in set.shots.iter() {
        for &(record_idx, object_idx) in refs {
            let sup = fsrw_core::episodes::SupportRef { class_id, record_idx, object_idx };
            let ex = fsrw_core::episodes::materialize_support(&train, &sup, res, stride)?;
            per_shot.push(model.embed_support(&ex)?);
        }
    }
    let analysis = analyze_vectors(&per_shot, &codebook)?;

    let run_csv_path = run_csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("finetune.csv"));
    let curve = convergence_curve_from_csv(&run_csv_path)?;

    let mut mb = ManifestBuilder::new("analyze", out, exp);
    mb.write_output("variance.csv", analysis.variance_csv().as_bytes())?;
    mb.write_output("distances.csv", analysis.distance_csv().as_bytes())?;
    mb.write_output("convergence.csv", curve.as_bytes())?;
    mb.finish()?;
    println!(
        "analysis written to {} (top variance feature: {})",
        out.display(),
        analysis.variances.first().map(|(f, _)| *f).unwrap_or(0)
    );
    Ok(())
}

/// Extract the (iteration, novel mAP) curve from a training-run CSV.
fn convergence_curve_from_csv(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| {
        format!("missing run CSV {}; train first or pass --run-csv", path.display())
    })?;
    let mut out = String::from("iteration,novel_mAP\n");
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() >= 8 && !cols[7].is_empty() {
            let _ = writeln!(out, "{},{}", cols[0], cols[7]);
        }
    }
    Ok(out)
}

fn cmd_compare(
    exp: &ExperimentConfig,
    data_dir: &Path,
    k_list: Option<&str>,
    methods: Option<&str>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (train, test) = load_data_dir(data_dir)?;
    let split = resolve_split(exp, train.index.n_classes())?;
    let ctx = TrainContext { exp, train: &train, eval: Some(&test), split: &split };

    let ks: Vec<usize> = match k_list {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| anyhow!("bad shot count '{s}'")))
            .collect::<Result<_>>()?,
        None => exp.shots.k_list.clone(),
    };
    let method_names: Vec<String> = match methods {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => vec!["ours".into(), "joint".into(), "ft".into(), "ft-full".into()],
    };
    for m in &method_names {
        if m != "ours" && BaselineKind::parse(m).is_none() {
            bail!("unknown method '{m}' (expected ours, joint, ft or ft-full)");
        }
    }

    // first-phase checkpoints shared across shot counts
    let ours_base = method_names
        .iter()
        .any(|m| m == "ours")
        .then(|| base_train(&ctx).map(|(m, _)| m))
        .transpose()?;
    let plain_base = method_names
        .iter()
        .any(|m| m == "ft" || m == "ft-full")
        .then(|| plain_base_train(&ctx).map(|(m, _)| m))
        .transpose()?;

    let novel_map_of =
        |dets: &[Vec<Detection>]| report_for(dets, &test, &split.novel_ids, "novel", exp).map;

    let mut matrix: Vec<(String, Vec<f64>)> = Vec::new();
    for method in &method_names {
        let mut row = Vec::with_capacity(ks.len());
        for &k in &ks {
            let map = match method.as_str() {
                "ours" => {
                    let mut model = clone_fewshot(ours_base.as_ref().expect("trained above"));
                    let (codebook, _, _) = finetune(&ctx, &mut model, k)?;
                    let dets = detect_dataset_fewshot(
                        &model,
                        &codebook,
                        &test,
                        exp.eval.score_threshold,
                        exp.eval.nms_threshold,
                        None,
                    )?;
                    novel_map_of(&dets)
                }
                "joint" => {
                    let (model, _) = joint_train(&ctx, k)?;
                    let dets = detect_dataset_plain(
                        &model,
                        &split.all_ids(),
                        &test,
                        exp.eval.score_threshold,
                        exp.eval.nms_threshold,
                        None,
                    )?;
                    novel_map_of(&dets)
                }
                name => {
                    let kind = BaselineKind::parse(name).expect("validated above");
                    let mut model = clone_plain(plain_base.as_ref().expect("trained above"));
                    let mode = match kind {
                        BaselineKind::Ft => PlainFtMode::Fixed(exp.train.finetune.iterations),
                        _ => PlainFtMode::UntilPlateau(&exp.baselines),
                    };
                    plain_finetune(&ctx, &mut model, k, mode)?;
                    let dets = detect_dataset_plain(
                        &model,
                        &split.all_ids(),
                        &test,
                        exp.eval.score_threshold,
                        exp.eval.nms_threshold,
                        None,
                    )?;
                    novel_map_of(&dets)
                }
            };
            log::info!("compare: {method} k={k} novel mAP {map:.4}");
            row.push(map);
        }
        matrix.push((method.clone(), row));
    }

    let mut csv = String::from("method");
    for k in &ks {
        let _ = write!(csv, ",k={k}");
    }
    csv.push('\n');
    for (name, row) in &matrix {
        let _ = write!(csv, "{name}");
        for v in row {
            let _ = write!(csv, ",{v:.6}");
        }
        csv.push('\n');
    }
    let mut table = format!(
        "Novel-set mAP on the synthetic benchmark (split preset {:?})\n",
        exp.split.preset
    );
    let _ = writeln!(
        table,
        "{:<10} {}",
        "method",
        ks.iter().map(|k| format!("{:>8}", format!("k={k}"))).collect::<Vec<_>>().join(" ")
    );
    for (name, row) in &matrix {
        let _ = writeln!(
            table,
            "{:<10} {}",
            name,
            row.iter().map(|v| format!("{v:>8.4}")).collect::<Vec<_>>().join(" ")
        );
    }

    let mut mb = ManifestBuilder::new("compare", out, exp);
    mb.write_output("compare.csv", csv.as_bytes())?;
    mb.write_output("compare.txt", table.as_bytes())?;
    mb.finish()?;
    print!("{table}");
    Ok(())
}
