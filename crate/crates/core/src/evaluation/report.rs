use std::io::Write;

use serde::Serialize;

use super::auc::{auc_pairwise, TieMode};
use crate::data::LabelVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAuc {
    pub class: String,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Per-class AUC plus the mean and population standard deviation across
/// the usable classes.
#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub per_class: Vec<ClassAuc>,
    /// Classes lacking either positives or negatives.
    pub excluded: Vec<String>,
    pub macro_mean: f64,
    pub macro_std: f64,
    pub tie_mode: TieMode,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    class: &'a str,
    auc: f64,
    std: Option<f64>,
    n_pos: usize,
    n_neg: usize,
    tie_mode: String,
}

impl AucReport {
    pub fn auc_of(&self, class: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).map(|c| c.auc)
    }

    /// One row per class, then a `macro` row carrying the mean in `auc` and
    /// the cross-class deviation in `std`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for c in &self.per_class {
            w.serialize(CsvRow {
                class: &c.class,
                auc: c.auc,
                std: None,
                n_pos: c.n_pos,
                n_neg: c.n_neg,
                tie_mode: self.tie_mode.to_string(),
            })?;
        }
        w.serialize(CsvRow {
            class: "macro",
            auc: self.macro_mean,
            std: Some(self.macro_std),
            n_pos: self.per_class.iter().map(|c| c.n_pos).sum(),
            n_neg: self.per_class.iter().map(|c| c.n_neg).sum(),
            tie_mode: self.tie_mode.to_string(),
        })?;
        w.flush()?;
        Ok(())
    }
}

/// `scores[c]` and `labels[c]` are the per-sample columns of class `c`.
pub fn macro_report(
    class_names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    mode: TieMode,
) -> Result<AucReport> {
    if scores.len() != class_names.len() || labels.len() != class_names.len() {
        return Err(Error::Dimension(format!(
            "{} class names, {} score columns, {} label columns",
            class_names.len(),
            scores.len(),
            labels.len()
        )));
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for ((name, s), l) in class_names.iter().zip(scores).zip(labels) {
        match auc_pairwise(s, l, mode) {
            Ok(auc) => {
                let n_pos = l.iter().filter(|&&v| v == 1).count();
                per_class.push(ClassAuc {
                    class: name.clone(),
                    auc,
                    n_pos,
                    n_neg: l.len() - n_pos,
                });
            }
            Err(Error::UndefinedAuc { .. }) => excluded.push(name.clone()),
            Err(e) => return Err(e),
        }
    }
    if per_class.is_empty() {
        return Err(Error::Report(format!(
            "no class has both positive and negative samples (excluded: {})",
            excluded.join(", ")
        )));
    }
    let n = per_class.len() as f64;
    let mean = per_class.iter().map(|c| c.auc).sum::<f64>() / n;
    let var = per_class.iter().map(|c| (c.auc - mean).powi(2)).sum::<f64>() / n;
    Ok(AucReport {
        per_class,
        excluded,
        macro_mean: mean,
        macro_std: var.sqrt(),
        tie_mode: mode,
    })
}

/// Macro report restricted to samples whose label vector satisfies `keep`.
/// `scores[i][c]` is the score of sample `i` for class `c`.
pub fn subset_report(
    class_names: &[String],
    scores: &[Vec<f64>],
    labels: &[LabelVector],
    keep: impl Fn(&LabelVector) -> bool,
    mode: TieMode,
) -> Result<AucReport> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| keep(&labels[i])).collect();
    let score_cols = (0..class_names.len())
        .map(|c| rows.iter().map(|&i| scores[i][c]).collect())
        .collect::<Vec<Vec<f64>>>();
    let label_cols = (0..class_names.len())
        .map(|c| rows.iter().map(|&i| labels[i].bits()[c]).collect())
        .collect::<Vec<Vec<u8>>>();
    macro_report(class_names, &score_cols, &label_cols, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn one_usable_class_has_zero_std() {
        let r = macro_report(
            &names(2),
            &[vec![0.1, 0.9], vec![0.3, 0.4]],
            &[vec![0, 1], vec![1, 1]],
            TieMode::Literal,
        )
        .unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.excluded, vec!["c1".to_string()]);
        assert_eq!(r.macro_std, 0.0);
    }

    #[test]
    fn mean_and_population_std() {
        // class 0: 6 of 8 pairs correctly ordered
        let s0 = vec![0.1, 0.5, 0.3, 0.4, 0.6, 0.7];
        let l0 = vec![0, 0, 1, 1, 1, 1];
        let s1 = vec![0.2, 0.3, 0.25, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1];
        let l1 = vec![0, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1];
        let r = macro_report(&names(2), &[s0, s1], &[l0, l1], TieMode::Literal).unwrap();
        let a0 = r.per_class[0].auc;
        let a1 = r.per_class[1].auc;
        assert!((a0 - 0.75).abs() < 1e-12);
        let mean = (a0 + a1) / 2.0;
        assert!((r.macro_mean - mean).abs() < 1e-12);
        assert!((r.macro_std - (a0 - a1).abs() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn partially_misordered_pairs() {
        let s0 = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let l0 = vec![0, 1, 1, 1, 1, 1];
        let s1 = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let l1 = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let mut l0 = l0;
        l0[1] = 0;
        l0[0] = 1;
        // class 0: positive at 0.0 loses to negative 1.0 -> 4/5 of pairs
        let mut l1 = l1;
        l1[10] = 0;
        l1[8] = 1;
        // class 1: positive at 8.0 beats 9 negatives except 9.0 and 10.0 -> 8/10
        let r = macro_report(&names(2), &[s0, s1], &[l0, l1], TieMode::Literal).unwrap();
        assert!((r.per_class[0].auc - 0.8).abs() < 1e-15);
        assert!((r.per_class[1].auc - 0.8).abs() < 1e-15);
        assert_eq!(r.macro_std, 0.0);
    }

    #[test]
    fn no_usable_class_is_an_error() {
        let r = macro_report(&names(1), &[vec![0.1, 0.2]], &[vec![0, 0]], TieMode::Literal);
        assert!(matches!(r, Err(Error::Report(_))));
    }

    #[test]
    fn csv_has_summary_row() {
        let r = macro_report(&names(1), &[vec![0.1, 0.9]], &[vec![0, 1]], TieMode::Conventional).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,auc,std,n_pos,n_neg,tie_mode\n"));
        assert!(text.contains("macro,1.0,0.0,1,1,conventional"));
    }
}
