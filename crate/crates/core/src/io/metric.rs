//! Style distance over the frozen extractor's statistics.

use crate::conditioning::{StyleExtractor, StyleFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `Σ_levels ‖μ_A − μ_B‖² + ‖σ²_A − σ²_B‖²`, i.e. the squared L2 distance
/// between the two feature vectors.
pub fn feature_distance(a: &StyleFeatures, b: &StyleFeatures) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "feature lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Style distance between two equally sized images.
pub fn style_stat_distance(extractor: &StyleExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "style_stat_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    feature_distance(&extractor.extract(a)?, &extractor.extract(b)?)
}
