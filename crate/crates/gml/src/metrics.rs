//! Evaluation: DSC, weighted aggregation, bagging ensembles, and reports.
//!
//! The headline number of every run is a weighted mean of per-site DSC
//! values. Weights default to local-test case counts; an explicit weight
//! vector can be configured instead. Reports serialize to CSV and JSON.

use serde::{Deserialize, Serialize};

use crate::error::{GmlError, Result};
use crate::grid::{Grid, MaskGrid, ProbabilityGrid};
use crate::model::{forward, ModelWeights};
use crate::synth::Case;

/// Dice similarity coefficient between two binary masks.
///
/// `2 |a ∩ b| / (|a| + |b|)`; two empty masks score 1.0 (agreement on
/// absence), one empty mask against a non-empty one scores 0.0.
pub fn dsc(pred: &MaskGrid, truth: &MaskGrid) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(GmlError::ShapeMismatch(format!(
            "dsc: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if !pred.is_binary() {
        return Err(GmlError::NotBinary("dsc prediction".into()));
    }
    if !truth.is_binary() {
        return Err(GmlError::NotBinary("dsc truth".into()));
    }
    let inter: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| a * b).sum();
    let total = pred.sum() + truth.sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

/// Thresholds probabilities into a mask; the boundary is inclusive
/// (`p >= threshold` becomes 1), so an all-0.5 prediction binarizes to ones.
pub fn binarize(p: &ProbabilityGrid, threshold: f64) -> MaskGrid {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must lie in (0, 1)"
    );
    p.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Weighted mean of per-site DSC values: `sum w_i d_i / sum w_i`.
pub fn aggregate_dsc(site_dscs: &[f64], weights: &[f64]) -> Result<f64> {
    if site_dscs.len() != weights.len() {
        return Err(GmlError::ShapeMismatch(format!(
            "aggregate_dsc: {} values vs {} weights",
            site_dscs.len(),
            weights.len()
        )));
    }
    if site_dscs.is_empty() {
        return Err(GmlError::NoData);
    }
    if weights.iter().any(|&w| w <= 0.0) {
        return Err(GmlError::InvalidShape(
            "aggregation weights must be positive".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    Ok(site_dscs
        .iter()
        .zip(weights)
        .map(|(d, w)| d * w)
        .sum::<f64>()
        / total)
}

/// Bagging ensemble: elementwise mean of every model's probability output.
pub fn ensemble_predict(models: &[ModelWeights], image: &Grid) -> Result<ProbabilityGrid> {
    let first = models.first().ok_or(GmlError::NoSites(0))?;
    if let Some(m) = models.iter().find(|m| m.arch != first.arch) {
        return Err(GmlError::IncompatibleModels(format!(
            "ensemble architectures differ: {:?} vs {:?}",
            first.arch, m.arch
        )));
    }
    let mut acc = forward(first, image)?;
    for m in &models[1..] {
        let p = forward(m, image)?;
        acc = Grid::map2(&acc, &p, |a, b| a + b)?;
    }
    let n = models.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Mean DSC of one model over a set of cases.
pub fn mean_dsc_model(model: &ModelWeights, cases: &[Case], threshold: f64) -> Result<f64> {
    if cases.is_empty() {
        return Err(GmlError::NoData);
    }
    let mut sum = 0.0;
    for c in cases {
        let p = forward(model, &c.image)?;
        sum += dsc(&binarize(&p, threshold), &c.mask)?;
    }
    Ok(sum / cases.len() as f64)
}

/// Mean DSC of a bagging ensemble over a set of cases.
pub fn mean_dsc_ensemble(
    models: &[ModelWeights],
    cases: &[Case],
    threshold: f64,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(GmlError::NoData);
    }
    let mut sum = 0.0;
    for c in cases {
        let p = ensemble_predict(models, &c.image)?;
        sum += dsc(&binarize(&p, threshold), &c.mask)?;
    }
    Ok(sum / cases.len() as f64)
}

/// Which data a report row was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    LocalTest,
    OutOfSample,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::LocalTest => "local_test",
            Split::OutOfSample => "out_of_sample",
        }
    }
}

/// One (site, split) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub site_id: String,
    pub split: Split,
    pub n_cases: usize,
    pub mean_dsc: f64,
}

/// Full evaluation of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
    /// Weighted mean over the local-test rows.
    pub aggregated_dsc: f64,
    /// Weighted mean over the out-of-sample rows, when any exist.
    pub aggregated_out_of_sample: Option<f64>,
}

impl EvalReport {
    /// Builds a report and its aggregates.
    ///
    /// `local_weights` must align with the local-test rows in order; the
    /// out-of-sample aggregate uses `oos_weights` when given (site-model
    /// reports reuse the local weights there) and falls back to row case
    /// counts otherwise.
    pub fn new(
        method: &str,
        rows: Vec<EvalRow>,
        local_weights: &[f64],
        oos_weights: Option<&[f64]>,
    ) -> Result<EvalReport> {
        let local: Vec<f64> = rows
            .iter()
            .filter(|r| r.split == Split::LocalTest)
            .map(|r| r.mean_dsc)
            .collect();
        let aggregated_dsc = aggregate_dsc(&local, local_weights)?;
        let oos_rows: Vec<&EvalRow> = rows.iter().filter(|r| r.split == Split::OutOfSample).collect();
        let aggregated_out_of_sample = if oos_rows.is_empty() {
            None
        } else {
            let vals: Vec<f64> = oos_rows.iter().map(|r| r.mean_dsc).collect();
            let counts: Vec<f64>;
            let w: &[f64] = match oos_weights {
                Some(w) => w,
                None => {
                    counts = oos_rows.iter().map(|r| r.n_cases as f64).collect();
                    &counts
                }
            };
            Some(aggregate_dsc(&vals, w)?)
        };
        Ok(EvalReport {
            method: method.to_string(),
            rows,
            aggregated_dsc,
            aggregated_out_of_sample,
        })
    }

    /// CSV with columns `method,site,split,n_cases,mean_dsc`; aggregate lines
    /// use the pseudo-site `aggregate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,site,split,n_cases,mean_dsc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                self.method,
                r.site_id,
                r.split.as_str(),
                r.n_cases,
                r.mean_dsc
            ));
        }
        let n_local: usize = self
            .rows
            .iter()
            .filter(|r| r.split == Split::LocalTest)
            .map(|r| r.n_cases)
            .sum();
        out.push_str(&format!(
            "{},aggregate,local_test,{},{:.6}\n",
            self.method, n_local, self.aggregated_dsc
        ));
        if let Some(oos) = self.aggregated_out_of_sample {
            let n_oos: usize = self
                .rows
                .iter()
                .filter(|r| r.split == Split::OutOfSample)
                .map(|r| r.n_cases)
                .sum();
            out.push_str(&format!(
                "{},aggregate,out_of_sample,{},{:.6}\n",
                self.method, n_oos, oos
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| GmlError::CorruptDataset(format!("report serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        serde_json::from_str(s)
            .map_err(|e| GmlError::CorruptDataset(format!("report parse: {e}")))
    }
}
