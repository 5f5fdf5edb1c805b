//! Branch-count ablation: every variant sees the same data, seed and
//! schedule, and only the set of encoder branches changes.

use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{DbSwin, ModelConfig};
use crate::training::{evaluate, EpochLog, Trainer};

/// Single, dual and triple branch patch sizes.
pub const VARIANTS: [&[usize]; 3] = [&[4], &[4, 8], &[4, 8, 12]];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub architecture: String,
    pub patch_sizes: Vec<usize>,
    pub val: MetricReport,
    pub test: MetricReport,
    pub param_count: usize,
    /// Hash of every shuffle order used, equal across variants when the
    /// runs saw the data in the same order.
    pub order_hash: u64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "architecture,patch_sizes,precision,recall,f1,iou,param_count,order_hash";

    /// Test-set metrics; patch sizes are joined with `-` to stay one field.
    pub fn csv_row(&self) -> String {
        let patches: Vec<String> = self.patch_sizes.iter().map(ToString::to_string).collect();
        format!(
            "{},{},{},{},{:016x}",
            self.architecture,
            patches.join("-"),
            self.test.csv_row(),
            self.param_count,
            self.order_hash
        )
    }
}

pub fn architecture_name(branches: usize) -> String {
    match branches {
        1 => "single-branch".into(),
        2 => "dual-branch".into(),
        3 => "triple-branch".into(),
        n => format!("{n}-branch"),
    }
}

/// `base` with its branches replaced by copies of the anchor at each patch
/// size.
pub fn with_patch_sizes(base: &ModelConfig, patch_sizes: &[usize]) -> Result<ModelConfig> {
    let anchor = base
        .branches
        .first()
        .ok_or_else(|| Error::Config("model has no branches".into()))?;
    let mut cfg = base.clone();
    cfg.branches = patch_sizes
        .iter()
        .map(|&s| {
            let mut b = anchor.clone();
            b.patch_size = s;
            b
        })
        .collect();
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one model per variant and scores it on `test`. `progress` sees
/// every epoch log, tagged with the architecture name.
pub fn run_ablation(
    run: &RunConfig,
    variants: &[&[usize]],
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    mut progress: impl FnMut(&str, &EpochLog),
) -> Result<Vec<AblationRow>> {
    if test.is_empty() {
        return Err(Error::Data("ablation needs a test set".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for patches in variants {
        let cfg = with_patch_sizes(&run.model, patches)?;
        let name = architecture_name(patches.len());
        let model = DbSwin::new(cfg, run.train.seed)?;
        let param_count = model.params().numel();
        let mut trainer = Trainer::new(model, run.train.clone())?;
        trainer.fit(train, val, |_, log| {
            progress(&name, log);
            Ok(())
        })?;
        let val = if val.is_empty() {
            MetricReport {
                precision: f64::NAN,
                recall: f64::NAN,
                f1: f64::NAN,
                iou: f64::NAN,
            }
        } else {
            evaluate(&trainer.model, val)?.report()
        };
        rows.push(AblationRow {
            architecture: name,
            patch_sizes: patches.to_vec(),
            val,
            test: evaluate(&trainer.model, test)?.report(),
            param_count,
            order_hash: trainer.order_hash(),
        });
    }
    Ok(rows)
}
