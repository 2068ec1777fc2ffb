//! Post-training quantization with closed-form output bias compensation.
//!
//! Round-to-nearest quantizers ([`quant`]) replace each matmul in a model
//! with its quantized counterpart. The output residual at each such site is
//! then corrected by one bias vector per site ([`bias`]), computed from a
//! float and a quantized forward pass over a calibration batch
//! ([`model::calibrate`]). No weights or quantizer parameters change.

pub mod bias;
pub mod error;
pub mod io;
pub mod model;
pub mod quant;
pub mod report;
pub mod tensor;

pub use bias::{BiasVector, OutputErrorRecord};
pub use error::{Error, Result};
pub use model::{CalibrationBatch, ModelSpec, QuantMode, QuantizedModel};
pub use quant::{Granularity, QuantConfig, QuantizedTensor, Scheme};
pub use report::ErrorReport;
pub use tensor::{RngStream, Tensor};
