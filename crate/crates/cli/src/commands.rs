use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use homey_core::data::{generate_synthetic, load_dir, write_dataset, ClassTable, Dataset, Image, SynthConfig};
use homey_core::detector::{Checkpoint, Model};
use homey_core::exec::{self, Parallelism};
use homey_core::losses::LossConfig;
use homey_core::metrics::{EvalConfig, EvalReport};
use homey_core::postprocess::{above_class_thresholds, detections_jsonl, postprocess};
use homey_core::report::{compare_runs, curves_svg, emit_confusion_heatmap, metrics_csv};
use homey_core::trainer::{evaluate, gradcheck_command, run_completed, TrainLog, Trainer};

use crate::config::RunConfig;
use crate::{DetectArgs, EvalArgs, GradcheckArgs, ReportArgs, SynthArgs, TrainArgs};

/// Applies `HOMEY_THREADS` to the worker pool.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HOMEY_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("HOMEY_THREADS must be a positive integer, got {v:?}"))?;
    if !exec::init_threads(n) {
        log::debug!("worker pool unavailable or already initialised");
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn log_issues(ds: &Dataset) {
    for issue in &ds.issues {
        log::warn!("{}: {issue}", ds.split);
    }
}

fn summary_text(report: &EvalReport) -> String {
    let mut s = String::new();
    for c in &report.classes {
        writeln!(
            s,
            "{:>3} {:<24} n={:<4} P {:.4}  R {:.4}  AP50 {:.4}  AP50-95 {:.4}",
            c.class_id, c.name, c.instances, c.precision, c.recall, c.ap50, c.ap50_95
        )
        .unwrap();
    }
    match report.means {
        Some(m) => writeln!(s, "{}", m.summary_line()).unwrap(),
        None => writeln!(s, "mean  undefined: no ground-truth instances").unwrap(),
    }
    writeln!(
        s,
        "confusion off-diagonal {} (foreground {})",
        report.offdiag, report.foreground_offdiag
    )
    .unwrap();
    s
}

/// metrics.csv, confusion.csv, confusion.ppm and detections.jsonl for `ds`.
fn write_eval_artifacts(dir: &Path, model: &Model<f32>, ds: &Dataset, eval: &EvalConfig) -> Result<EvalReport> {
    let (report, images) = evaluate(model, ds, eval, Parallelism::default())?;
    write(&dir.join("metrics.csv"), metrics_csv(&report))?;
    emit_confusion_heatmap(
        &report.confusion,
        &ds.classes.names(),
        &dir.join("confusion.ppm"),
        &dir.join("confusion.csv"),
    )?;
    let mut jsonl = String::new();
    for img in &images {
        jsonl.push_str(&detections_jsonl(&above_class_thresholds(&img.dets, &ds.classes), &ds.classes));
    }
    write(&dir.join("detections.jsonl"), jsonl)?;
    Ok(report)
}

fn log_text(log: &TrainLog) -> String {
    let mut s = String::new();
    for r in &log.rows {
        write!(
            s,
            "epoch {:>3}  total {:.6}  box {:.6}  cls {:.6}  mask {:.6}  risk {:.6}  lr {:.6e}",
            r.epoch, r.total, r.box_loss, r.cls, r.mask, r.risk, r.lr
        )
        .unwrap();
        if let (Some(a), Some(b)) = (r.val_map50, r.val_map5095) {
            write!(s, "  val mAP50 {a:.4}  mAP50-95 {b:.4}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr0 = lr;
    }
    if let Some(ab) = a.ablate {
        cfg.ablate(ab);
    }
    cfg.validate()?;

    let data = load_dir(&a.data, a.classes.as_deref())
        .with_context(|| format!("loading {}", a.data.display()))?;
    log_issues(&data);
    let (train, val) = match &a.val {
        Some(v) => {
            let default = a.data.join("classes.json");
            let classes = a.classes.as_deref().unwrap_or(&default);
            let val = load_dir(v, Some(classes)).with_context(|| format!("loading {}", v.display()))?;
            log_issues(&val);
            (data, val)
        }
        None => data.split_tail(a.val_fraction, "val"),
    };
    ensure!(!train.is_empty(), "training set is empty");

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let last = a.out.join("last.ckpt");
    let completed = run_completed(&a.out)?;
    if completed && !a.force {
        bail!(
            "{} holds a completed run; pass --force to overwrite it",
            a.out.display()
        );
    }
    cfg.snapshot(&a.out)?;
    let model_cfg = cfg.model_config(&train.classes);
    let trainer = Trainer {
        train: cfg.train.clone(),
        losses: cfg.losses.clone(),
        eval: cfg.eval.clone(),
        parallelism: Parallelism::default(),
        out_dir: Some(a.out.clone()),
        stop_after: a.stop_after,
    };
    log::info!(
        "training on {} images, validating on {} ({} classes)",
        train.len(),
        val.len(),
        train.classes.len()
    );
    let started = Instant::now();
    let outcome = if a.resume && last.exists() && !completed {
        let ck = Checkpoint::load(&last)?;
        ensure!(ck.config == model_cfg, "model configuration differs from the checkpointed run");
        log::info!("resuming from {}", last.display());
        trainer.resume(&ck, &train, Some(&val))?
    } else {
        if a.resume && !last.exists() {
            log::warn!("no checkpoint to resume in {}; starting fresh", a.out.display());
        }
        let best = a.out.join("best.ckpt");
        if best.exists() {
            fs::remove_file(&best).with_context(|| format!("removing stale {}", best.display()))?;
        }
        trainer.fit(Model::init(&model_cfg)?, &train, Some(&val))?
    };
    log::info!("training took {:.1} s", started.elapsed().as_secs_f64());

    write(&a.out.join("curves.csv"), outcome.log.to_csv())?;
    let mut text = log_text(&outcome.log);
    if !outcome.log.rows.is_empty() {
        write(&a.out.join("curves.svg"), curves_svg(&outcome.log)?)?;
    }
    let report = write_eval_artifacts(&a.out, &outcome.model, &val, &cfg.eval)?;
    let summary = summary_text(&report);
    text.push_str(&summary);
    write(&a.out.join("log.txt"), text)?;
    print!("{summary}");
    Ok(())
}

fn eval_config(path: Option<&Path>, a: &EvalArgs) -> Result<EvalConfig> {
    let mut e = RunConfig::load(path)?.eval;
    if let Some(v) = a.conf_floor {
        e.conf_floor = v;
    }
    if let Some(v) = a.iou_floor {
        e.iou_floor = v;
    }
    if let Some(v) = a.nms_iou {
        e.nms_iou = v;
    }
    Ok(e)
}

fn checked_model(ckpt: &Path, classes: &ClassTable) -> Result<Model<f32>> {
    let ck = Checkpoint::load(ckpt)?;
    ensure!(
        ck.config.num_classes == classes.len(),
        "checkpoint has {} classes but the class table has {}",
        ck.config.num_classes,
        classes.len()
    );
    Ok(ck.model()?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let eval = eval_config(a.config.as_deref(), a)?;
    let ds = load_dir(&a.data, a.classes.as_deref()).with_context(|| format!("loading {}", a.data.display()))?;
    log_issues(&ds);
    let model = checked_model(&a.ckpt, &ds.classes)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let snapshot = serde_json::json!({
        "ckpt": a.ckpt,
        "data": a.data,
        "model": model.config(),
        "eval": eval,
    });
    write(&a.out.join("config.json"), serde_json::to_string_pretty(&snapshot)? + "\n")?;
    let report = write_eval_artifacts(&a.out, &model, &ds, &eval)?;
    print!("{}", summary_text(&report));
    Ok(())
}

pub fn detect(a: &DetectArgs) -> Result<()> {
    let classes = ClassTable::load(&a.classes)?;
    let model = checked_model(&a.ckpt, &classes)?;
    log::info!("nms_iou {} with per-class confidence thresholds from {}", a.nms_iou, a.classes.display());
    let n = model.config().input_size;
    let image = Image::read(&a.image)?;
    let tensor = if image.width() == n && image.height() == n {
        image.to_tensor()
    } else {
        image.resize_nearest(n, n).to_tensor()
    };
    let name = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let preds = model.predict(&tensor)?;
    let dets = postprocess(&preds, model.config().grid(), &classes, &name, a.nms_iou)?;
    let out = detections_jsonl(&dets, &classes);
    match &a.out {
        Some(p) => write(p, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: a.seed,
        ..SynthConfig::default()
    };
    if let Some(c) = a.classes {
        cfg.classes = c;
    }
    if let Some(s) = a.skew {
        cfg.skew = s;
    }
    if let Some(s) = a.size {
        cfg.image_size = s;
    }
    let ds = generate_synthetic(&cfg, a.count)?;
    log_issues(&ds);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("synth.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    write_dataset(&a.out, &ds)?;
    let counts: Vec<String> = ds.instance_counts().iter().map(usize::to_string).collect();
    println!("wrote {} images to {} (instances per class: {})", ds.len(), a.out.display(), counts.join(" "));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let started = Instant::now();
    let report = gradcheck_command(a.tol, a.step, &LossConfig::default())?;
    print!("{}", report.table());
    println!(
        "{} parameters, tol {:e}, h {:e}, {:.1} s",
        report.params,
        a.tol,
        a.step,
        started.elapsed().as_secs_f64()
    );
    ensure!(report.passed(), "gradient check failed");
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let [run_a, run_b] = a.compare.as_slice() else {
        bail!("--compare takes exactly two run directories");
    };
    let cmp = compare_runs(run_a, run_b)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let text = cmp.text();
    write(&a.out.join("comparison.txt"), &text)?;
    write(&a.out.join("gain.csv"), cmp.classes_csv())?;
    write(&a.out.join("loss_deltas.csv"), cmp.loss_csv())?;
    print!("{text}");
    Ok(())
}
