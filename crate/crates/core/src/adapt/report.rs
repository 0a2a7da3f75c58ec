use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalResult;

/// Pseudo-label statistics accumulated over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub images: usize,
    pub labels: usize,
    pub consensus: usize,
    pub score_sum: f64,
    /// Images whose pseudo-label set came out empty.
    pub empty_images: usize,
}

impl PseudoStats {
    pub fn per_image(&self) -> f64 {
        self.labels as f64 / self.images.max(1) as f64
    }

    pub fn consensus_fraction(&self) -> f64 {
        self.consensus as f64 / self.labels.max(1) as f64
    }

    pub fn mean_score(&self) -> f64 {
        self.score_sum / self.labels.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over the epoch's iterations of each loss term, plus `total`.
    pub losses: BTreeMap<String, f64>,
    pub pseudo: Option<PseudoStats>,
    pub eval: Option<EvalResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `train-source` or `adapt`.
    pub kind: String,
    pub config_hash: String,
    /// Evaluation of the starting model, when an evaluator was supplied.
    pub initial_eval: Option<EvalResult>,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunReport {
    /// mAP@0.5 of the last evaluated epoch, else of the starting model.
    pub fn final_map50(&self) -> Option<f64> {
        self.epochs
            .iter()
            .rev()
            .find_map(|e| e.eval.as_ref().map(|r| r.map50))
            .or_else(|| self.initial_eval.as_ref().map(|r| r.map50))
    }

    /// `(epoch, term, value)` rows: every loss term, `map50`, per-category
    /// `ap/<name>`, learning rate and pseudo-label statistics.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,term,value\n");
        let mut row = |epoch: usize, term: &str, value: f64| out.push_str(&format!("{epoch},{term},{value}\n"));
        if let Some(e) = &self.initial_eval {
            row(0, "map50", e.map50);
        }
        for rec in &self.epochs {
            row(rec.epoch, "learning_rate", rec.learning_rate);
            for (k, v) in &rec.losses {
                row(rec.epoch, &format!("loss/{k}"), *v);
            }
            if let Some(p) = &rec.pseudo {
                row(rec.epoch, "pseudo/per_image", p.per_image());
                row(rec.epoch, "pseudo/consensus_fraction", p.consensus_fraction());
                row(rec.epoch, "pseudo/mean_score", p.mean_score());
            }
            if let Some(e) = &rec.eval {
                row(rec.epoch, "map50", e.map50);
                for c in &e.per_category {
                    if let Some(ap) = c.ap {
                        row(rec.epoch, &format!("ap/{}", c.name), ap);
                    }
                }
            }
        }
        out
    }

    /// Write `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let path = dir.join("metrics.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("metrics.csv");
        fs::write(&path, self.csv()).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("metrics.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
    }
}

/// Running per-term means.
#[derive(Default)]
pub(crate) struct LossMeans {
    sums: BTreeMap<String, f64>,
    n: usize,
}

impl LossMeans {
    pub fn add(&mut self, terms: &[(&str, f64)]) {
        for (k, v) in terms {
            *self.sums.entry(k.to_string()).or_default() += v;
        }
        self.n += 1;
    }

    pub fn means(&self) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .map(|(k, v)| (k.clone(), v / self.n.max(1) as f64))
            .collect()
    }
}
