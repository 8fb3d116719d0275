use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use drmea::bound::{self, recommend_dprime};
use drmea::data::{self, Dataset, Domain, GenParams};
use drmea::model::ManifoldNetwork;
use drmea::svg::{LineChart, Series};
use drmea::trainer::{self, read_epochs_csv, Ablation, RunConfig};
use drmea::{Error, Result};

use crate::{AnalyzeArgs, EvalArgs, GenDataArgs, ReportArgs, TrainArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::NumericalAbort(_) | Error::NonFinite(_) | Error::DegenerateSpectrum { .. } => 4,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_shift(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("bad shift component {v:?}")))
        })
        .collect()
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let params = GenParams {
        classes: a.classes,
        dim: a.dim,
        n_per_class_source: a.n_source,
        n_per_class_target: a.n_target,
        rotation_degrees: a.rotation,
        shift: parse_shift(&a.shift)?,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let pair = data::gen_rotated_gaussians(&params)?;
    create_dir(&a.out)?;
    data::save_csv(&pair.source, &a.out.join("source.csv"))?;
    data::save_csv(&pair.target, &a.out.join("target.csv"))?;
    data::save_labels(&pair.target_labels, &a.out.join("target_labels.csv"))?;
    write(&a.out.join("metadata.jsonl"), &data::metadata_lines(&pair, &params)?)?;
    println!(
        "wrote {} source and {} target samples ({} classes, dim {}) to {}",
        pair.source.len(),
        pair.target.len(),
        a.classes,
        a.dim,
        a.out.display()
    );
    Ok(())
}

struct TrainData {
    source: Dataset,
    target: Dataset,
    target_labels: Option<Vec<usize>>,
}

fn load_train_data(a: &TrainArgs) -> Result<TrainData> {
    let (source, target, labels): (PathBuf, PathBuf, Option<PathBuf>) = match (&a.data, &a.source, &a.target) {
        (Some(dir), _, _) => {
            let labels = dir.join("target_labels.csv");
            (
                dir.join("source.csv"),
                dir.join("target.csv"),
                labels.exists().then_some(labels),
            )
        }
        (None, Some(s), Some(t)) => (s.clone(), t.clone(), a.target_labels.clone()),
        _ => return Err(Error::Usage("give --data, or both --source and --target".into())),
    };
    let source = data::load_csv(&source, true, Domain::Source)?;
    let mut target = data::load_csv(&target, false, Domain::Target)?;
    target.class_count = source.class_count;
    let target_labels = labels.map(|p| data::load_labels(&p)).transpose()?;
    if let Some(labels) = &target_labels {
        Dataset::new(
            target.features.clone(),
            Some(labels.clone()),
            source.class_count,
            Domain::Target,
        )?;
    }
    Ok(TrainData {
        source,
        target,
        target_labels,
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let ablation: Ablation = a.ablation.parse()?;
    if ablation != Ablation::None {
        cfg.ablation = ablation;
    }
    let d = load_train_data(&a)?;
    let outcome = trainer::train_with(
        &cfg,
        &d.source,
        &d.target,
        d.target_labels.as_deref(),
        Some(&a.out),
        |log| {
            println!(
                "epoch {:>3}  total {:>11.4e}  ce {:.4}  src_acc {:.4}  tgt_acc {:.4}  skips {}",
                log.epoch, log.losses.total, log.losses.ce, log.src_acc, log.tgt_acc, log.align_skips
            )
        },
    )?;
    let last = outcome.logs.last().expect("at least one epoch");
    println!(
        "finished {} epochs ({}); final target accuracy {:.4}; run written to {}",
        outcome.logs.len(),
        outcome.config.ablation,
        last.tgt_acc,
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let net = ManifoldNetwork::load(&a.model)?;
    let mut ds = data::load_csv(&a.features, a.inline_labels, Domain::Target)?;
    if !a.inline_labels {
        ds = ds.with_labels(data::load_labels(&a.labels)?, net.classes())?;
    } else {
        ds.class_count = ds.class_count.max(net.classes());
    }
    let ev = trainer::evaluate(&net, &ds)?;
    println!("samples {}", ds.len());
    println!("accuracy {:.6}", ev.accuracy);
    println!("mean_class_accuracy {:.6}", ev.mean_class_accuracy);
    for (c, acc) in ev.per_class.iter().enumerate() {
        println!("class {c} {acc:.6}");
    }
    Ok(())
}

pub fn analyze_dprime(a: AnalyzeArgs) -> Result<()> {
    let s = data::load_csv(&a.source, a.source_labelled, Domain::Source)?;
    let t = data::load_csv(&a.target, a.target_labelled, Domain::Target)?;
    if s.dim() != t.dim() {
        return Err(Error::Data(format!(
            "source dim {} but target dim {}",
            s.dim(),
            t.dim()
        )));
    }
    let rec = recommend_dprime(&s.features, &t.features, a.batch_size, a.trials, a.seed)?;
    create_dir(&a.out)?;
    write(&a.out.join("dprime_curve.csv"), &rec.to_csv())?;

    let points: Vec<(f64, f64)> = rec
        .curve
        .iter()
        .map(|p| (p.d_prime as f64, p.mean_error_index.log10()))
        .collect();
    let mut chart = LineChart::new("Mean error index over random batches", "d'", "log10 mean e(d')")
        .with_series(Series::new("e(d')", points));
    chart.markers.push(((a.batch_size - 1) as f64, "b_s - 1".into()));
    write(&a.out.join("dprime_curve.svg"), &chart.render())?;

    let b = bound::max_column_norm(&s.features).max(bound::max_column_norm(&t.features));
    let e_delta = bound::e_delta(b, a.batch_size, a.delta)?;
    let best = rec.point(rec.d_prime).expect("recommendation is on the curve");
    let last = rec.point(a.batch_size - 1).expect("curve covers b_s - 1");
    let line = format!(
        "recommended d' = {} (mean e = {}); e(b_s-1 = {}) = {}; bound at recommended d' = {} (B = {}, delta = {})",
        rec.d_prime,
        drmea::fmt_f64(best.mean_error_index),
        a.batch_size - 1,
        if last.mean_error_index.is_finite() {
            drmea::fmt_f64(last.mean_error_index)
        } else {
            "inf".into()
        },
        drmea::fmt_f64(2.0 * 2f64.sqrt() * e_delta * best.mean_error_index),
        drmea::fmt_f64(b),
        a.delta
    );
    write(&a.out.join("recommendation.txt"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn missing_logs(path: &Path, msg: &str) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::InvalidData, msg.to_string()))
}

pub fn report(a: ReportArgs) -> Result<()> {
    let path = a.run.join("epochs.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows = read_epochs_csv(&text, &path).map_err(|e| missing_logs(&path, &e.to_string()))?;
    if rows.is_empty() {
        return Err(missing_logs(&path, "no epochs logged"));
    }
    let cfg = RunConfig::load(&a.run.join("config.resolved")).ok();
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    create_dir(&out)?;

    let column = |i: usize| -> Vec<(f64, f64)> { rows.iter().map(|r| (r[0], r[i])).collect() };
    let mut losses = LineChart::new("Training losses", "epoch", "mean batch value");
    for (i, name) in [(1, "ce"), (5, "ds"), (6, "al"), (7, "total")] {
        losses.series.push(Series::new(name, column(i)));
    }
    let mut acc = LineChart::new("Accuracy", "epoch", "accuracy");
    for (i, name) in [(8, "source"), (9, "target"), (10, "target mean-class")] {
        acc.series.push(Series::new(name, column(i)));
    }
    if let Some(start) = cfg.as_ref().and_then(|c| c.intra_start_epoch.resolve(c.epochs)) {
        if start < rows.len() {
            acc.markers.push(((start + 1) as f64, "intra on".into()));
        }
    }
    write(&out.join("loss_curves.svg"), &losses.render())?;
    write(&out.join("accuracy_curves.svg"), &acc.render())?;

    let last = rows.last().expect("non-empty");
    let best = rows
        .iter()
        .filter(|r| r[9].is_finite())
        .max_by(|a, b| a[9].total_cmp(&b[9]));
    let mut summary = String::new();
    summary.push_str(&format!("run: {}\n", a.run.display()));
    summary.push_str(&format!(
        "ablation: {}\n",
        cfg.as_ref().map_or("unknown".to_string(), |c| c.ablation.to_string())
    ));
    summary.push_str(&format!("epochs: {}\n", rows.len()));
    summary.push_str(&format!("final source accuracy: {:.4}\n", last[8]));
    summary.push_str(&format!("final target accuracy: {:.4}\n", last[9]));
    summary.push_str(&format!("final target mean-class accuracy: {:.4}\n", last[10]));
    if let Some(b) = best {
        summary.push_str(&format!("best target accuracy: {:.4} (epoch {})\n", b[9], b[0]));
    }
    summary.push_str(&format!(
        "alignment skips: {}\n",
        rows.iter().map(|r| r[11]).sum::<f64>()
    ));
    write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
