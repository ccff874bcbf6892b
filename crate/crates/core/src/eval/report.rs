use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricSet;
use crate::error::{Error, Result};
use crate::ingest::SkipReason;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub label: u8,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub nodule: MetricSet,
    /// Stack-level metrics, for rows that score individual stacks.
    pub frame: Option<MetricSet>,
    pub final_train_loss: Option<f64>,
    pub predictions: Vec<Prediction>,
}

/// Mean and population standard deviation over the folds where a metric
/// was defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

pub const METRIC_NAMES: [&str; 8] = [
    "accuracy",
    "precision",
    "recall",
    "f1",
    "auroc",
    "weighted_precision",
    "weighted_recall",
    "weighted_f1",
];

pub fn metric_value(m: &MetricSet, name: &str) -> Option<f64> {
    match name {
        "accuracy" => Some(m.accuracy),
        "precision" => Some(m.precision),
        "recall" => Some(m.recall),
        "f1" => Some(m.f1),
        "auroc" => m.auroc,
        "weighted_precision" => Some(m.weighted_precision),
        "weighted_recall" => Some(m.weighted_recall),
        "weighted_f1" => Some(m.weighted_f1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub metric: String,
    pub summary: Option<Summary>,
}

/// One decoder variant or encoder backbone across all folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub folds: Vec<FoldResult>,
    pub nodule: Vec<LevelSummary>,
    pub frame: Vec<LevelSummary>,
}

fn summarize<'a>(sets: impl Iterator<Item = &'a MetricSet> + Clone) -> Vec<LevelSummary> {
    METRIC_NAMES
        .iter()
        .map(|&metric| {
            let values: Vec<f64> = sets.clone().filter_map(|m| metric_value(m, metric)).collect();
            LevelSummary {
                metric: metric.to_string(),
                summary: Summary::of(&values),
            }
        })
        .collect()
}

impl ReportRow {
    pub fn new(name: impl Into<String>, folds: Vec<FoldResult>) -> Self {
        let nodule = summarize(folds.iter().map(|f| &f.nodule));
        let frame = if folds.iter().any(|f| f.frame.is_some()) {
            summarize(folds.iter().filter_map(|f| f.frame.as_ref()))
        } else {
            Vec::new()
        };
        Self {
            name: name.into(),
            folds,
            nodule,
            frame,
        }
    }

    pub fn nodule_summary(&self, metric: &str) -> Option<Summary> {
        self.nodule.iter().find(|s| s.metric == metric).and_then(|s| s.summary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub k: usize,
    pub threshold: f64,
    pub split_hash: String,
    /// Clip ids of each test fold.
    pub folds: Vec<Vec<String>>,
    pub skipped: Vec<SkipReason>,
    pub train_config: TrainConfig,
    pub variants: Vec<ReportRow>,
    pub backbones: Vec<ReportRow>,
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    row: &'a str,
    fold: String,
    level: &'a str,
    n: Option<usize>,
    accuracy: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    auroc: Option<f64>,
    weighted_precision: Option<f64>,
    weighted_recall: Option<f64>,
    weighted_f1: Option<f64>,
}

impl<'a> CsvRecord<'a> {
    fn from_values(row: &'a str, fold: String, level: &'a str, n: Option<usize>, v: impl Fn(&str) -> Option<f64>) -> Self {
        Self {
            row,
            fold,
            level,
            n,
            accuracy: v("accuracy"),
            precision: v("precision"),
            recall: v("recall"),
            f1: v("f1"),
            auroc: v("auroc"),
            weighted_precision: v("weighted_precision"),
            weighted_recall: v("weighted_recall"),
            weighted_f1: v("weighted_f1"),
        }
    }
}

impl MetricsReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.variants.iter().chain(&self.backbones).find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One line per row × fold × level, followed by `mean` and `std` lines.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.variants.iter().chain(&self.backbones) {
            let levels: [(&str, &Vec<LevelSummary>); 2] = [("nodule", &row.nodule), ("frame", &row.frame)];
            for f in &row.folds {
                let sets = [("nodule", Some(&f.nodule)), ("frame", f.frame.as_ref())];
                for (level, m) in sets {
                    if let Some(m) = m {
                        let rec = CsvRecord::from_values(&row.name, f.fold.to_string(), level, Some(m.n), |k| {
                            metric_value(m, k)
                        });
                        w.serialize(rec).expect("csv record");
                    }
                }
            }
            for (level, sums) in levels {
                if sums.is_empty() {
                    continue;
                }
                let get = |k: &str| sums.iter().find(|s| s.metric == k).and_then(|s| s.summary);
                w.serialize(CsvRecord::from_values(&row.name, "mean".into(), level, None, |k| get(k).map(|s| s.mean)))
                    .expect("csv record");
                w.serialize(CsvRecord::from_values(&row.name, "std".into(), level, None, |k| get(k).map(|s| s.std)))
                    .expect("csv record");
            }
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
