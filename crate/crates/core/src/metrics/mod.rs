//! Saliency evaluation: MAE, S-measure, E-measure and weighted F-measure.
//!
//! All metrics take a prediction `S` with values in `[0, 1]` and a binary
//! ground truth `G` (values `0.0`/`1.0`) of the same shape.

mod dataset;
mod e_measure;
mod s_measure;
mod weighted_f;

use ndarray::ArrayView2;

use crate::error::{ensure, Result};

pub use dataset::{evaluate_dataset, EvalReject, ImageMetrics, MetricMeans, MetricReport, CSV_HEADER};
pub use e_measure::{e_measure, e_measure_adaptive, e_measure_at, e_measure_curve, threshold, THRESHOLDS};
pub use s_measure::{s_measure, DEFAULT_ALPHA};
pub use weighted_f::{weighted_f, DEFAULT_BETA2};

pub(crate) fn check_pair(s: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<()> {
    ensure!(
        s.dim() == g.dim(),
        "prediction {:?} and ground truth {:?} differ in shape",
        s.dim(),
        g.dim()
    );
    ensure!(!s.is_empty(), "empty prediction");
    Ok(())
}

/// Mean absolute error.
pub fn mae(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&s, &g)?;
    Ok(s.iter().zip(g.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64)
}

/// All four metrics for one image.
pub fn evaluate_pair(s: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        image_id: String::new(),
        mae: mae(s, g)?,
        s: s_measure(s, g, DEFAULT_ALPHA)?,
        e_mean: e_measure(s, g)?,
        e_adaptive: e_measure_adaptive(s, g)?,
        fw: weighted_f(s, g, DEFAULT_BETA2)?,
        empty_gt: !g.iter().any(|&v| v > 0.5),
    })
}
