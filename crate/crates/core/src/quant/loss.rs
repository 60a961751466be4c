use crate::error::{Error, Result};

/// Euclidean distance, accumulated in f64.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    libm::sqrt(sum)
}

/// Mean over rows of the l2 norm of the row difference. Both inputs are
/// row-major with `dim` columns.
pub fn mean_l2_loss(original: &[f32], reconstructed: &[f32], dim: usize) -> Result<f64> {
    if original.len() != reconstructed.len() {
        return Err(Error::Shape { expected: original.len(), found: reconstructed.len() });
    }
    if dim == 0 || !original.len().is_multiple_of(dim) {
        return Err(Error::Shape { expected: dim, found: original.len() });
    }
    let rows = original.len() / dim;
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 =
        original.chunks_exact(dim).zip(reconstructed.chunks_exact(dim)).map(|(a, b)| l2_distance(a, b)).sum();
    Ok(total / rows as f64)
}
