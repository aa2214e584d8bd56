//! Ablation grid: each variant is trained and evaluated on one shared split,
//! and reported per label-count subset of the test set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::data::{Dataset, LabelVector, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{score_dataset, subset_report, AucReport, TieMode};
use crate::experiment::{prepare_data, ExperimentConfig, PreparedData};
use crate::model::{BranchInit, HeadInput, HeadKind, ModelConfig};
use crate::train::{train, TrainArtifacts, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Single softmax head in place of the multi-branch output.
    NoMbo,
    /// Heads read the spatial feature map directly.
    NoCe,
    /// Individual branches only.
    NoAggregate,
    /// Zeroed heads and unit branch weights.
    NoInit,
    AggregatedOnly,
    /// One single-output model per label.
    EnsemblePerLabel,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoMbo,
        Variant::NoCe,
        Variant::NoAggregate,
        Variant::NoInit,
        Variant::AggregatedOnly,
        Variant::EnsemblePerLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMbo => "no_mbo",
            Variant::NoCe => "no_ce",
            Variant::NoAggregate => "no_aggregate",
            Variant::NoInit => "no_init",
            Variant::AggregatedOnly => "aggregated_only",
            Variant::EnsemblePerLabel => "ensemble_per_label",
        }
    }

    /// Model configuration of this variant derived from the full model.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoMbo => c.head = HeadKind::Softmax,
            Variant::NoCe => c.head_input = HeadInput::FeatureMap,
            Variant::NoAggregate => c.head = HeadKind::IndividualOnly,
            Variant::NoInit => c.branch_init = BranchInit::Neutral,
            Variant::AggregatedOnly => c.head = HeadKind::AggregateOnly,
            Variant::EnsemblePerLabel => {
                c.head = HeadKind::IndividualOnly;
                c.classes = 1;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown ablation variant `{s}` (known: {})", known.join(", ")))
        })
    }
}

/// Parses variant names, rejecting unknown names and duplicates.
pub fn parse_grid(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut out: Vec<Variant> = Vec::new();
    for n in names {
        let v: Variant = n.trim().parse()?;
        if out.contains(&v) {
            return Err(Error::Config(format!("duplicate ablation variant `{v}`")));
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Single,
    Multiple,
    All,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Single, Subset::Multiple, Subset::All];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Single => "single",
            Subset::Multiple => "multiple",
            Subset::All => "all",
        }
    }

    pub fn keeps(self, labels: &LabelVector) -> bool {
        match self {
            Subset::Single => labels.count_ones() == 1,
            Subset::Multiple => labels.count_ones() >= 2,
            Subset::All => true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub split_hash: String,
    /// `None` when a subset has no class with both labels present.
    pub subsets: Vec<(Subset, Option<AucReport>)>,
}

#[derive(Serialize)]
struct TableRow<'a> {
    variant: &'a str,
    subset: &'a str,
    macro_mean: Option<f64>,
    macro_std: Option<f64>,
    classes: usize,
    tie_mode: String,
    split_hash: &'a str,
}

/// Scores of the test set, `[sample][class]`.
fn variant_scores(
    variant: Variant,
    config: &ExperimentConfig,
    data: &PreparedData,
    out_dir: &Path,
) -> Result<Vec<Vec<f64>>> {
    let model_config = variant.apply(&config.model);
    let artifacts = |tag: &str| TrainArtifacts {
        checkpoint_dir: Some(out_dir.join("checkpoints").join(tag)),
        metrics_csv: Some(out_dir.join("metrics").join(format!("{tag}.csv"))),
    };
    if variant != Variant::EnsemblePerLabel {
        let mut state = TrainState::initialize(&model_config, config.train.clone(), &data.train)?;
        train(&mut state, &data.train, None, &artifacts(variant.name()))?;
        return score_dataset(&state.model, &data.test);
    }
    let mut columns = Vec::new();
    for (c, name) in data.train.class_names.iter().enumerate() {
        let train_c = single_label(&data.train, c);
        let mut state = TrainState::initialize(&model_config, config.train.clone(), &train_c)?;
        train(
            &mut state,
            &train_c,
            None,
            &artifacts(&format!("{}_{name}", variant.name())),
        )?;
        let scores = score_dataset(&state.model, &single_label(&data.test, c))?;
        columns.push(scores.into_iter().map(|s| s[0]).collect::<Vec<f64>>());
    }
    Ok((0..data.test.len())
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect())
}

fn single_label(ds: &Dataset, class: usize) -> Dataset {
    Dataset {
        class_names: vec![ds.class_names[class].clone()],
        samples: ds
            .samples
            .iter()
            .map(|s| Sample {
                labels: LabelVector::from_indices(1, if s.labels.bits()[class] == 1 { &[0] } else { &[] }),
                ..s.clone()
            })
            .collect(),
    }
}

/// Trains and evaluates every variant in `names` on one split and writes
/// under `out_dir`:
///
/// - `split.csv`, `configs/<variant>.json` (effective config + split hash)
/// - `metrics/<variant>.csv`, `checkpoints/<variant>/`
/// - `reports/table.csv` and `reports/<variant>_<subset>_auc.csv`
pub fn run_ablation(config: &ExperimentConfig, names: &[String], out_dir: &Path) -> Result<Vec<VariantRun>> {
    let grid = parse_grid(names)?;
    config.validate()?;
    let data = prepare_data(&config.data)?;
    let (split_bytes, split_hash) = data.split_file()?;
    std::fs::create_dir_all(out_dir.join("reports"))?;
    std::fs::create_dir_all(out_dir.join("configs"))?;
    std::fs::write(out_dir.join("split.csv"), &split_bytes)?;
    let mut runs = Vec::new();
    for variant in grid {
        log::info!("ablation variant {variant}");
        // Every variant re-reads the shared split file.
        let recorded = crate::data::content_hash(&std::fs::read(out_dir.join("split.csv"))?);
        if recorded != split_hash {
            return Err(Error::Integrity(format!("split file changed before variant {variant}")));
        }
        let snapshot = serde_json::json!({
            "variant": variant.name(),
            "split_hash": recorded,
            "model": variant.apply(&config.model),
            "train": config.train,
            "data": config.data,
        });
        std::fs::write(
            out_dir.join("configs").join(format!("{variant}.json")),
            serde_json::to_string_pretty(&snapshot)?,
        )?;
        let scores = variant_scores(variant, config, &data, out_dir)?;
        let labels: Vec<LabelVector> = data.test.samples.iter().map(|s| s.labels.clone()).collect();
        let mut subsets = Vec::new();
        for subset in Subset::ALL {
            let report = match subset_report(
                &data.test.class_names,
                &scores,
                &labels,
                |l| subset.keeps(l),
                TieMode::Literal,
            ) {
                Ok(r) => {
                    let path = out_dir
                        .join("reports")
                        .join(format!("{variant}_{}_auc.csv", subset.name()));
                    r.write_csv(std::fs::File::create(path)?)?;
                    Some(r)
                }
                Err(Error::Report(msg)) => {
                    log::warn!("variant {variant}, subset {}: {msg}", subset.name());
                    None
                }
                Err(e) => return Err(e),
            };
            subsets.push((subset, report));
        }
        runs.push(VariantRun {
            variant,
            split_hash: recorded,
            subsets,
        });
    }
    write_table(&out_dir.join("reports").join("table.csv"), &runs)?;
    Ok(runs)
}

pub fn write_table(path: &Path, runs: &[VariantRun]) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    for run in runs {
        for (subset, report) in &run.subsets {
            w.serialize(TableRow {
                variant: run.variant.name(),
                subset: subset.name(),
                macro_mean: report.as_ref().map(|r| r.macro_mean),
                macro_std: report.as_ref().map(|r| r.macro_std),
                classes: report.as_ref().map_or(0, |r| r.per_class.len()),
                tie_mode: TieMode::Literal.to_string(),
                split_hash: &run.split_hash,
            })?;
        }
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(
            parse_grid(&names(&["full", "no_mbo"])).unwrap(),
            vec![Variant::Full, Variant::NoMbo]
        );
        let err = parse_grid(&names(&["full", "full"])).unwrap_err();
        assert!(err.to_string().contains("duplicate ablation variant `full`"));
        let err = parse_grid(&names(&["wat"])).unwrap_err();
        assert!(err.to_string().contains("`wat`"));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
