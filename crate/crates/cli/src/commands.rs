use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use hydravit::ablation::run_ablation;
use hydravit::checkpoint::{config_hash, load_checkpoint, load_checkpoint_for};
use hydravit::data::{load_raw_image, preprocess_image, synth_generate, CoocSpec};
use hydravit::evaluation::{gradcam_saliency, macro_report, roc_points, score_dataset, write_roc_csv, TieMode};
use hydravit::experiment::{prepare_data, DataConfig};
use hydravit::output::{rank_scores, write_predictions, PredictionRow};
use hydravit::train::{train, EpochMetrics, TrainArtifacts, TrainState};
use hydravit::Error;
use serde_json::json;

use crate::plot::{render, Series};
use crate::{CliError, CliResult, Command, RunConfig};

pub fn run(rc: &RunConfig) -> CliResult<()> {
    match &rc.command {
        Command::Train { resume } => run_train(rc, resume.as_deref()),
        Command::Eval {
            pred: Some(pred),
            labels: Some(labels),
            tie_mode,
            ..
        } => run_eval_files(rc, pred, labels, *tie_mode),
        Command::Eval {
            checkpoint: Some(ckpt),
            tie_mode,
            ..
        } => run_eval_checkpoint(rc, ckpt, *tie_mode),
        Command::Eval { .. } => Err(CliError::Usage(
            "eval needs --pred with --labels, or --checkpoint".into(),
        )),
        Command::Predict {
            checkpoint,
            images,
            top_k,
            threshold,
            saliency,
        } => run_predict(rc, checkpoint, images, *top_k, *threshold, *saliency),
        Command::Synth {
            classes,
            samples,
            prevalence,
            extent,
            boost,
        } => {
            let mut spec = CoocSpec::independent(*classes, *prevalence, *extent, rc.seed.unwrap_or(0));
            if let Some((a, b, f)) = boost {
                spec = spec.with_boost(*a, *b, *f);
            }
            std::fs::create_dir_all(&rc.output_dir)?;
            let set = synth_generate(&spec, *samples)?;
            let manifest = set.export(&rc.output_dir)?;
            std::fs::write(rc.output_dir.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
            log::info!("wrote {} samples to {}", samples, manifest.display());
            Ok(())
        }
        Command::Ablate { variants } => {
            let config = rc.effective_config()?;
            let out = rc.prepare_output()?;
            std::fs::write(out.join("config.json"), config.to_json()?)?;
            let runs = run_ablation(&config, variants, out)?;
            for run in runs {
                for (subset, report) in &run.subsets {
                    match report {
                        Some(r) => log::info!(
                            "{} {}: {:.4} ± {:.4}",
                            run.variant,
                            subset.name(),
                            r.macro_mean,
                            r.macro_std
                        ),
                        None => log::info!("{} {}: no usable class", run.variant, subset.name()),
                    }
                }
            }
            Ok(())
        }
    }
}

fn run_train(rc: &RunConfig, resume: Option<&Path>) -> CliResult<()> {
    let config = rc.effective_config()?;
    let out = rc.prepare_output()?;
    std::fs::write(out.join("config.json"), config.to_json()?)?;
    let data = prepare_data(&config.data)?;
    let (split_bytes, split_hash) = data.split_file()?;
    std::fs::write(out.join("split.csv"), &split_bytes)?;
    let run_info = json!({
        "command": "train",
        "split_hash": split_hash,
        "config_hash": config_hash(&config.model, &config.train)?,
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&run_info)?)?;

    let mut state = match resume {
        Some(path) => {
            let mut state = load_checkpoint_for(path, &config.model)?;
            let mut wanted = config.train.clone();
            wanted.epochs = state.config.epochs;
            if wanted != state.config {
                return Err(Error::Config(format!(
                    "{} was written with different training settings",
                    path.display()
                ))
                .into());
            }
            state.config.epochs = config.train.epochs;
            state
        }
        None => TrainState::initialize(&config.model, config.train.clone(), &data.train)?,
    };
    let artifacts = TrainArtifacts {
        checkpoint_dir: Some(out.join("checkpoints")),
        metrics_csv: Some(out.join("metrics").join("train.csv")),
    };
    train(&mut state, &data.train, None, &artifacts)?;
    plot_history(&out.join("plots").join("loss.png"), &state.history)?;
    let scores = score_dataset(&state.model, &data.test)?;
    let labels = data.test.label_columns();
    write_evaluation(
        out,
        &data.test.class_names,
        &columns(&scores, data.test.classes()),
        &labels,
        TieMode::Literal,
    )
}

fn plot_history(path: &Path, history: &[EpochMetrics]) -> CliResult<()> {
    if history.len() < 2 {
        return Ok(());
    }
    let total = Series {
        points: history.iter().map(|m| (m.epoch as f64, m.total)).collect(),
    };
    render(path, &[total], false)?;
    Ok(())
}

fn columns(rows: &[Vec<f64>], classes: usize) -> Vec<Vec<f64>> {
    (0..classes).map(|c| rows.iter().map(|r| r[c]).collect()).collect()
}

/// Writes `reports/auc.csv`, per-class ROC series and the ROC plot.
fn write_evaluation(
    out: &Path,
    class_names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    mode: TieMode,
) -> CliResult<()> {
    for sub in ["reports", "plots"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let report = macro_report(class_names, scores, labels, mode)?;
    report.write_csv(File::create(out.join("reports").join("auc.csv"))?)?;
    let mut series = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        // classes without both label values were already reported as excluded
        let Ok(roc) = roc_points(&scores[c], &labels[c]) else {
            continue;
        };
        write_roc_csv(
            File::create(out.join("plots").join(format!("roc_{}.csv", file_stem(name))))?,
            &roc,
        )?;
        series.push(Series { points: roc.points });
    }
    render(&out.join("plots").join("roc.png"), &series, true)?;
    log::info!(
        "macro AUC {:.4} ± {:.4} over {} classes",
        report.macro_mean,
        report.macro_std,
        report.per_class.len()
    );
    println!("macro_auc={:.6} std={:.6}", report.macro_mean, report.macro_std);
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Class names, sample ids in file order, and values by sample id.
type WideTable = (Vec<String>, Vec<String>, HashMap<String, Vec<f64>>);

/// Reads a `sample_id,<class>...` table.
fn read_wide(path: &Path) -> CliResult<WideTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 2 || &header[0] != "sample_id" {
        return Err(Error::Parse {
            row: 0,
            message: format!("{}: header must be sample_id followed by class names", path.display()),
        }
        .into());
    }
    let classes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut order = Vec::new();
    let mut rows = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                row: i + 1,
                message: format!("{}: {e}", path.display()),
            })?;
        if values.len() != classes.len() {
            return Err(Error::Parse {
                row: i + 1,
                message: format!("{}: expected {} values", path.display(), classes.len()),
            }
            .into());
        }
        let id = record[0].to_string();
        if rows.insert(id.clone(), values).is_some() {
            return Err(Error::Parse {
                row: i + 1,
                message: format!("{}: duplicate sample `{id}`", path.display()),
            }
            .into());
        }
        order.push(id);
    }
    Ok((classes, order, rows))
}

fn run_eval_files(rc: &RunConfig, pred: &Path, labels: &Path, mode: TieMode) -> CliResult<()> {
    let (classes, order, scores) = read_wide(pred)?;
    let (label_classes, _, truth) = read_wide(labels)?;
    let index: Vec<usize> = classes
        .iter()
        .map(|c| {
            label_classes
                .iter()
                .position(|l| l == c)
                .ok_or_else(|| Error::Argument(format!("class `{c}` missing from {}", labels.display())))
        })
        .collect::<Result<_, _>>()?;
    let mut score_cols = vec![Vec::with_capacity(order.len()); classes.len()];
    let mut label_cols = vec![Vec::with_capacity(order.len()); classes.len()];
    for id in &order {
        let y = truth
            .get(id)
            .ok_or_else(|| Error::Argument(format!("sample `{id}` has no labels in {}", labels.display())))?;
        for (c, &j) in index.iter().enumerate() {
            score_cols[c].push(scores[id][c]);
            label_cols[c].push(match y[j] {
                0.0 => 0,
                1.0 => 1,
                v => return Err(Error::Argument(format!("label {v} for `{id}` is not 0 or 1")).into()),
            });
        }
    }
    write_evaluation(&rc.output_dir, &classes, &score_cols, &label_cols, mode)
}

fn run_eval_checkpoint(rc: &RunConfig, ckpt: &Path, mode: TieMode) -> CliResult<()> {
    let config = rc.effective_config()?;
    let state = load_checkpoint_for(ckpt, &config.model)?;
    let data = prepare_data(&config.data)?;
    let scores = score_dataset(&state.model, &data.test)?;
    write_evaluation(
        &rc.output_dir,
        &data.test.class_names,
        &columns(&scores, data.test.classes()),
        &data.test.label_columns(),
        mode,
    )
}

fn class_names(rc: &RunConfig, classes: usize) -> Vec<String> {
    let configured = rc.effective_config().ok().map(|c| match c.data {
        DataConfig::Manifest { class_names, .. } => class_names,
        DataConfig::Synthetic { spec, .. } => spec.class_names(),
    });
    match configured {
        Some(names) if names.len() == classes => names,
        _ => (0..classes).map(|c| format!("class_{c}")).collect(),
    }
}

fn run_predict(
    rc: &RunConfig,
    ckpt: &Path,
    images: &[PathBuf],
    top_k: usize,
    threshold: f64,
    saliency: bool,
) -> CliResult<()> {
    let state = load_checkpoint(ckpt)?;
    let model = &state.model;
    let names = class_names(rc, model.config.classes);
    let out = rc.prepare_output()?;
    let mut rows = Vec::new();
    let mut wide = csv::Writer::from_path(out.join("reports").join("scores.csv"))?;
    wide.write_record(std::iter::once("sample_id".to_string()).chain(names.iter().cloned()))?;
    for path in images {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = preprocess_image(&load_raw_image(path)?, model.config.spatial.input_extent)?;
        let pass = model.forward(&image)?;
        let scores = pass.outputs.scores(&model.weights);
        let prediction = rank_scores(&scores, top_k, threshold);
        for (c, name) in names.iter().enumerate() {
            rows.push(PredictionRow {
                sample_id: id.clone(),
                class_name: name.clone(),
                raw_probability: pass.outputs.raw()[c],
                weighted_score: scores[c],
                decision: prediction.decisions[c] as u8,
            });
        }
        wide.write_record(std::iter::once(id.clone()).chain(scores.iter().map(f64::to_string)))?;
        let top: Vec<String> = prediction
            .ranking
            .iter()
            .map(|(c, s)| format!("{}={s:.4}", names[*c]))
            .collect();
        println!("{id}: {}", top.join(" "));
        if saliency {
            if let Some(&(c, _)) = prediction.ranking.first() {
                gradcam_saliency(model, &image, c)?.export(
                    &out.join("saliency"),
                    &format!("{id}_{}", file_stem(&names[c])),
                    &id,
                    &names[c],
                )?;
            }
        }
    }
    wide.flush()?;
    write_predictions(File::create(out.join("reports").join("predictions.csv"))?, &rows)?;
    Ok(())
}
