//! Per-site error reports and figure-data series.

use serde::{Deserialize, Serialize};

pub use crate::bias::BiasPrecision;
use crate::bias::OutputErrorRecord;
use crate::model::{QuantMode, QuantizedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    /// Errors on the batch the biases were fitted to.
    Calibration,
    /// Errors on a held-out batch with frozen biases.
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteError {
    pub site_index: usize,
    pub site_name: String,
    pub base_error: f64,
    pub compensated_error: f64,
    /// Calibration: `b * ||B*||^2`. Evaluation: `base_error - compensated_error`,
    /// which may be negative on held-out data.
    pub reduction_term: f64,
    pub b: usize,
}

impl From<OutputErrorRecord> for SiteError {
    fn from(r: OutputErrorRecord) -> Self {
        Self {
            site_index: r.site_index,
            site_name: r.site_id,
            base_error: r.base_error,
            compensated_error: r.compensated_error,
            reduction_term: r.reduction_term,
            b: r.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalOutputError {
    /// `||Y_float - Y_quant||^2` with no biases attached anywhere.
    pub uncompensated: f64,
    /// Same, with the model's biases applied.
    pub compensated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total_base_error: f64,
    pub total_compensated_error: f64,
    /// Mean over sites with non-zero base error of `(base - compensated) / base`.
    pub mean_reduction_ratio: f64,
    pub sites_reduced: usize,
    pub sites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: ReportKind,
    pub mode: QuantMode,
    pub bits: u8,
    pub weight_quantizer: String,
    pub batch_size: usize,
    pub bias_attached: bool,
    pub bias_precision: BiasPrecision,
    pub sites: Vec<SiteError>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_output_error: Option<FinalOutputError>,
    pub summary: Summary,
}

impl ErrorReport {
    pub fn new(kind: ReportKind, model: &QuantizedModel, batch_size: usize, sites: Vec<SiteError>) -> Self {
        let summary = summarize(&sites);
        let settings = model.settings();
        Self {
            kind,
            mode: settings.mode,
            bits: settings.weight.bits,
            weight_quantizer: settings.weight.to_string(),
            batch_size,
            bias_attached: model.has_biases(),
            bias_precision: model.bias_precision(),
            sites,
            final_output_error: None,
            summary,
        }
    }

    pub fn from_calibration(model: &QuantizedModel, records: Vec<OutputErrorRecord>) -> Self {
        let b = records.first().map_or(0, |r| r.b);
        Self::new(
            ReportKind::Calibration,
            model,
            b,
            records.into_iter().map(SiteError::from).collect(),
        )
    }

    /// Sites where compensation made things worse beyond `rel_tol`.
    pub fn regressions(&self, rel_tol: f64) -> Vec<&SiteError> {
        self.sites
            .iter()
            .filter(|s| s.compensated_error > s.base_error * (1.0 + rel_tol))
            .collect()
    }
}

fn summarize(sites: &[SiteError]) -> Summary {
    let ratios: Vec<f64> = sites
        .iter()
        .filter(|s| s.base_error > 0.0)
        .map(|s| (s.base_error - s.compensated_error) / s.base_error)
        .collect();
    Summary {
        total_base_error: sites.iter().map(|s| s.base_error).sum(),
        total_compensated_error: sites.iter().map(|s| s.compensated_error).sum(),
        mean_reduction_ratio: if ratios.is_empty() {
            0.0
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        },
        sites_reduced: sites
            .iter()
            .filter(|s| s.compensated_error < s.base_error)
            .count(),
        sites: sites.len(),
    }
}

/// Distribution summary of one site's bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasStats {
    pub site_index: usize,
    pub site_name: String,
    pub len: usize,
    pub mean: f64,
    pub abs_mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

pub fn bias_stats(model: &QuantizedModel) -> Vec<BiasStats> {
    model
        .biases()
        .map(|(info, bias)| {
            let v = bias.values();
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            BiasStats {
                site_index: info.index,
                site_name: info.name.clone(),
                len: v.len(),
                mean,
                abs_mean: v.iter().map(|x| x.abs()).sum::<f64>() / n,
                variance: v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}
