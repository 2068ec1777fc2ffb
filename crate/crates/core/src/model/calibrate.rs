use crate::bias::{compensated_error, guarantee_decomposition, optimal_bias, output_diff, BiasVector, OutputErrorRecord};
use crate::error::{Error, Result};
use crate::report::{ErrorReport, FinalOutputError, ReportKind, SiteError};
use crate::tensor::Tensor;

use super::exec::{at_site, forward_float, forward_quantized, quant_bmm, quant_linear, run_graph, SiteExec};
use super::{CalibrationBatch, ModelSpec, QuantizedModel, SiteInfo};

/// Quantized pass that fits and attaches each site's bias before moving on,
/// so every bias sees the already-compensated upstream outputs.
struct CalibrateExec<'r> {
    model: QuantizedModel,
    reference: &'r [Tensor],
    records: Vec<OutputErrorRecord>,
}

impl SiteExec for CalibrateExec<'_> {
    fn linear(&mut self, site: &SiteInfo, x: &Tensor, _: &Tensor) -> Result<Tensor> {
        quant_linear(&self.model, site, x)
    }

    fn bmm(&mut self, site: &SiteInfo, a: &Tensor, c: &Tensor) -> Result<Tensor> {
        quant_bmm(&self.model, site, a, c)
    }

    fn finish(&mut self, site: &SiteInfo, out: Tensor) -> Result<Tensor> {
        if !out.is_finite() {
            return Err(Error::Numeric {
                site: site.name.clone(),
            });
        }
        let reference = &self.reference[site.index];
        let n = output_diff(reference, &out).map_err(|e| at_site(site, e))?;
        let bias = optimal_bias(&n, &site.name)?;
        self.records
            .push(guarantee_decomposition(&n, site.index, &site.name)?);
        let comp = crate::bias::apply_bias(&out, &bias)?;
        self.model.attach_bias(site.index, bias)?;
        Ok(comp)
    }
}

/// Fits one bias per site from a float and a quantized pass over `batch`.
///
/// References come from an end-to-end float pass; the quantized pass runs in
/// graph order and consumes compensated upstream outputs.
pub fn calibrate(model: QuantizedModel, batch: &CalibrationBatch) -> Result<(QuantizedModel, Vec<OutputErrorRecord>)> {
    if model.has_biases() {
        return Err(Error::Argument("model already has biases attached".into()));
    }
    let float = forward_float(model.spec(), batch, true)?;
    if let Some((i, _)) = float.sites.iter().enumerate().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numeric {
            site: model.sites()[i].info.name.clone(),
        });
    }
    let spec = model.spec().clone();
    let mut exec = CalibrateExec {
        model,
        reference: &float.sites,
        records: Vec::new(),
    };
    run_graph(&spec, batch.inputs(), &mut exec)?;
    Ok((exec.model, exec.records))
}

/// Per-site and final-output errors of `model` on `batch` against the float `reference`.
///
/// Biases stay frozen. On the calibration batch itself compensated errors never
/// exceed base errors; on held-out data they usually do not, but may.
pub fn evaluate(model: &QuantizedModel, batch: &CalibrationBatch, reference: &ModelSpec) -> Result<ErrorReport> {
    if reference.sites() != model.spec().sites() {
        return Err(Error::Graph {
            site: "<model>".into(),
            reason: "reference graph does not match the quantized model".into(),
        });
    }
    let float = forward_float(reference, batch, true)?;
    let quant = forward_quantized(model, batch, true)?;
    let mut sites = Vec::with_capacity(quant.raw.len());
    for (state, (reference, raw)) in model.sites().iter().zip(float.sites.iter().zip(&quant.raw)) {
        let info = &state.info;
        let n = output_diff(reference, raw).map_err(|e| at_site(info, e))?;
        let base = n.frobenius_sq();
        let zero;
        let bias = match &state.bias {
            Some(b) => b,
            None => {
                zero = BiasVector::zeros(n.shape()[1], &info.name);
                &zero
            }
        };
        let comp = compensated_error(&n, bias).map_err(|e| at_site(info, e))?;
        sites.push(SiteError {
            site_index: info.index,
            site_name: info.name.clone(),
            base_error: base,
            compensated_error: comp,
            reduction_term: base - comp,
            b: batch.b(),
        });
    }
    let compensated = float.output.sub(&quant.output)?.frobenius_sq();
    let uncompensated = if model.has_biases() {
        let plain = forward_quantized(&model.without_biases(), batch, false)?;
        float.output.sub(&plain.output)?.frobenius_sq()
    } else {
        compensated
    };
    let mut report = ErrorReport::new(ReportKind::Evaluation, model, batch.b(), sites);
    report.final_output_error = Some(FinalOutputError {
        uncompensated,
        compensated,
    });
    Ok(report)
}
