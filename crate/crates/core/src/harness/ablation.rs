use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{discover_cases, TargetCache};
use super::folds::split_folds;
use super::train::{train_prepared, validate_cases, Checkpoint, NativeCase, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{write_file, MetricsReport, METRIC_NAMES, WHOLE_HEART};
use crate::network::Variant;

/// Validation results of one variant pooled over all folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per-structure mean of each metric, [`METRIC_NAMES`] order.
    pub means: Vec<(String, [Option<f64>; 6])>,
    /// WH DSC of the freshly initialised weights on the same folds.
    pub untrained_wh_dsc: Option<f64>,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn mean(&self, structure: &str, metric: &str) -> Option<f64> {
        let k = METRIC_NAMES.iter().position(|m| *m == metric)?;
        self.means.iter().find(|(s, _)| s == structure).and_then(|(_, v)| v[k])
    }

    pub fn wh_dsc(&self) -> Option<f64> {
        self.mean(WHOLE_HEART, "dsc")
    }
}

/// Rows are variants, columns `<structure>_<metric>` means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub structures: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec!["variant".to_string()];
        for s in &self.structures {
            cols.extend(METRIC_NAMES.iter().map(|m| format!("{s}_{m}")));
        }
        cols.push("untrained_WH_dsc".into());
        cols
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns())?;
        for r in &self.rows {
            let mut rec = vec![r.variant.name().to_string()];
            for s in &self.structures {
                rec.extend(METRIC_NAMES.iter().map(|m| fmt(r.mean(s, m))));
            }
            rec.push(fmt(r.untrained_wh_dsc));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// `ablation.csv` and `ablation.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("ablation.csv"), self.to_csv_string()?.as_bytes())?;
        write_file(&dir.join("ablation.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Parse variant names, rejecting unknown ones.
pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names.iter().map(|n| n.parse()).collect()
}

/// Cross-validate every variant on the same folds and seed. Each fold
/// trains to `training.epochs` and contributes the validation metrics of
/// its best checkpoint.
pub fn run_ablation(base_cfg: &ExperimentConfig, variants: &[Variant]) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one variant".into()));
    }
    base_cfg.validate()?;
    let label_map = base_cfg.resolve_label_map()?;
    let ids = discover_cases(&base_cfg.data_root)?;
    let folds = split_folds(&ids, base_cfg.training.n_folds, base_cfg.training.seed)?;
    let cache = TargetCache::for_config(base_cfg, &label_map);
    let prepared = ids
        .iter()
        .map(|id| cache.get_or_prepare(&base_cfg.data_root, id))
        .collect::<Result<Vec<_>>>()?;
    let native = ids
        .iter()
        .map(|id| NativeCase::load(&base_cfg.data_root, id, &label_map))
        .collect::<Result<Vec<_>>>()?;
    let pick = |set: &[String]| -> (Vec<_>, Vec<_>) {
        let p = prepared.iter().filter(|c| set.contains(&c.id)).cloned().collect();
        let n = native.iter().filter(|c| set.contains(&c.id)).cloned().collect();
        (p, n)
    };

    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut report = MetricsReport::default();
        let mut untrained = MetricsReport::default();
        for (k, fold) in folds.iter().enumerate() {
            let mut cfg = base_cfg.with_variant(variant);
            cfg.output_root = base_cfg
                .output_root
                .join("ablation")
                .join(variant_dir(variant))
                .join(format!("fold{k}"));
            let (train_cases, _) = pick(&fold.train);
            let (_, val_cases) = pick(&fold.val);
            log::info!("ablation: {variant} fold {}/{}", k + 1, folds.len());
            let init = Trainer::new(&cfg, &label_map)?;
            untrained.extend(validate_cases(init.net(), &cfg, &label_map, &val_cases)?);
            let outcome = train_prepared(&cfg, &label_map, &train_cases, &val_cases, None)?;
            let best = Checkpoint::load(&outcome.best_checkpoint)?;
            report.extend(validate_cases(&best.network()?, &cfg, &label_map, &val_cases)?);
        }
        let means = report
            .summarize()
            .into_iter()
            .map(|s| {
                let m = [s.dsc, s.ji, s.hd95, s.assd, s.sensitivity, s.precision].map(|a| a.mean);
                (s.structure, m)
            })
            .collect();
        log::info!("ablation: {variant} WH DSC {:?}", report.mean_wh_dsc());
        rows.push(AblationRow {
            variant,
            means,
            untrained_wh_dsc: untrained.mean_wh_dsc(),
            report,
        });
    }
    let table = AblationTable {
        structures: rows[0].means.iter().map(|(s, _)| s.clone()).collect(),
        rows,
    };
    table.write(&base_cfg.output_root)?;
    Ok(table)
}

fn variant_dir(v: Variant) -> String {
    v.name().replace('+', "_")
}
