//! Component ablation: one adaptation run per row, scored on labeled target data.

use serde::{Deserialize, Serialize};

use super::{adapt, AdaptConfig, Evaluator, SelectionMode, UnlabeledImages};
use crate::detector::{Checkpoint, Detector};
use crate::error::Result;

/// One configuration of the component grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationRow {
    /// No adaptation at all; the other switches are ignored.
    pub source_only: bool,
    pub selection: SelectionMode,
    pub use_kl: bool,
    pub use_auxiliary: bool,
}

impl AblationRow {
    fn adapted(selection: SelectionMode, use_kl: bool, use_auxiliary: bool) -> Self {
        AblationRow {
            source_only: false,
            selection,
            use_kl,
            use_auxiliary,
        }
    }

    pub fn label(&self) -> String {
        if self.source_only {
            return "source only".into();
        }
        let mut s = match self.selection {
            SelectionMode::Hard => "hard".to_string(),
            SelectionMode::Consensus => "dynamic".to_string(),
        };
        if self.use_kl {
            s.push_str(" + KL");
        }
        if self.use_auxiliary {
            s.push_str(" + aux");
        }
        s
    }

    fn apply(&self, base: &AdaptConfig, seed: u64) -> AdaptConfig {
        AdaptConfig {
            seed,
            selection_mode: self.selection,
            use_kl: self.use_kl,
            use_auxiliary: self.use_auxiliary,
            ..base.clone()
        }
    }

    /// Rows that differ only in ignored switches compare equal here.
    fn key(&self) -> AblationRow {
        if self.source_only {
            AblationRow {
                source_only: true,
                selection: SelectionMode::Hard,
                use_kl: false,
                use_auxiliary: false,
            }
        } else {
            *self
        }
    }
}

/// The six-row component table: source only, hard selection with and
/// without KL, dynamic (consensus) selection alone, with KL, and with KL
/// plus the auxiliary terms.
pub fn table5_grid() -> Vec<AblationRow> {
    use SelectionMode::*;
    vec![
        AblationRow {
            source_only: true,
            ..AblationRow::adapted(Hard, false, false)
        },
        AblationRow::adapted(Hard, false, false),
        AblationRow::adapted(Hard, true, false),
        AblationRow::adapted(Consensus, false, false),
        AblationRow::adapted(Consensus, true, false),
        AblationRow::adapted(Consensus, true, true),
    ]
}

/// Drop repeated rows (keeping the first), warning about each.
pub fn dedup_grid(grid: &[AblationRow]) -> Vec<AblationRow> {
    let mut out: Vec<AblationRow> = Vec::new();
    for row in grid {
        if out.iter().any(|r| r.key() == row.key()) {
            log::warn!("ablation row {:?} repeated; running it once", row.label());
        } else {
            out.push(*row);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seeds: Vec<u64>,
    /// mAP@0.5 per seed, parallel to `seeds`.
    pub map50: Vec<f64>,
}

impl AblationResult {
    pub fn median(&self) -> f64 {
        median(&self.map50)
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Run every (deduplicated) row of `grid` for each seed. Evaluation runs
/// only on the final model of each run.
pub fn ablate(
    source: &Checkpoint,
    target: &UnlabeledImages,
    base: &AdaptConfig,
    grid: &[AblationRow],
    seeds: &[u64],
    evaluator: &Evaluator,
) -> Result<Vec<AblationResult>> {
    let det = Detector::new(source.detector.clone())?;
    let mut source_map = None;
    let mut results = Vec::new();
    for row in dedup_grid(grid) {
        let scores = if row.source_only {
            let m = match source_map {
                Some(m) => m,
                None => *source_map.insert(evaluator.evaluate(&det, &source.params)?.map50),
            };
            vec![m; seeds.len()]
        } else {
            let mut scores = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let cfg = AdaptConfig {
                    eval_every: 0,
                    ..row.apply(base, seed)
                };
                let (ckpt, _) = adapt(source, target, &cfg, None)?;
                let m = evaluator.evaluate(&det, &ckpt.params)?.map50;
                log::info!("ablation {:<20} seed {seed}: mAP@0.5 {m:.4}", row.label());
                scores.push(m);
            }
            scores
        };
        results.push(AblationResult {
            row,
            seeds: seeds.to_vec(),
            map50: scores,
        });
    }
    Ok(results)
}

/// Component table with check marks and the median mAP@0.5 in percent.
pub fn render_table(results: &[AblationResult]) -> String {
    let mark = |b: bool| if b { "✓" } else { " " };
    let mut out = String::from(
        "| Source Only | Hard Selection | Dynamic Selection | Soft Label KL | Auxiliary | mAP50 |\n\
         |:-:|:-:|:-:|:-:|:-:|--:|\n",
    );
    for r in results {
        let row = &r.row;
        let adapted = !row.source_only;
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.2} |\n",
            mark(row.source_only),
            mark(adapted && row.selection == SelectionMode::Hard),
            mark(adapted && row.selection == SelectionMode::Consensus),
            mark(adapted && row.use_kl),
            mark(adapted && row.use_auxiliary),
            100.0 * r.median()
        ));
    }
    out
}

pub fn render_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row,source_only,selection,use_kl,use_auxiliary,seed,map50\n");
    for r in results {
        for (seed, m) in r.seeds.iter().zip(&r.map50) {
            out.push_str(&format!(
                "{},{},{:?},{},{},{seed},{m}\n",
                r.row.label(),
                r.row.source_only,
                r.row.selection,
                r.row.use_kl,
                r.row.use_auxiliary
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let g = table5_grid();
        assert_eq!(g.len(), 6);
        assert_eq!(dedup_grid(&g).len(), 6);
        let mut doubled = g.clone();
        doubled.extend(g.iter().copied());
        assert_eq!(dedup_grid(&doubled), g);
        assert!(dedup_grid(&[]).is_empty());
    }

    #[test]
    fn table_has_one_line_per_row() {
        let results: Vec<_> = table5_grid()
            .into_iter()
            .map(|row| AblationResult {
                row,
                seeds: vec![0],
                map50: vec![0.5],
            })
            .collect();
        let t = render_table(&results);
        assert_eq!(t.lines().count(), 8);
        assert!(t.lines().nth(2).unwrap().starts_with("| ✓ |"));
        assert_eq!(render_table(&[]).lines().count(), 2);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
