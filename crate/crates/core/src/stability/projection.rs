use nalgebra::DMatrix;

use super::StabilityError;
use crate::llm::EmbeddingVector;

/// Coordinates of each vector on the top two principal components of the
/// mean-centered data. Each component's sign is fixed so that its largest
/// loading is positive.
pub fn project_2d(vectors: &[EmbeddingVector]) -> Result<Vec<(f64, f64)>, StabilityError> {
    if vectors.len() < 2 {
        return Err(StabilityError::InsufficientData(vectors.len()));
    }
    let dim = vectors[0].dimension();
    if vectors.iter().any(|v| v.dimension() != dim) {
        return Err(StabilityError::DimensionMismatch);
    }
    let n = vectors.len();
    let mut x = DMatrix::from_fn(n, dim, |i, j| vectors[i].values()[j]);
    for j in 0..dim {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.ok_or(StabilityError::NonFinite)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut coords = vec![(0.0, 0.0); n];
    for (slot, &component) in order.iter().take(2).enumerate() {
        let mut axis: Vec<f64> = v_t.row(component).iter().copied().collect();
        let pivot = axis.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        for (i, c) in coords.iter_mut().enumerate() {
            let proj: f64 = x.row(i).iter().zip(&axis).map(|(a, b)| a * b).sum();
            if slot == 0 {
                c.0 = proj;
            } else {
                c.1 = proj;
            }
        }
    }
    if coords.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(StabilityError::NonFinite);
    }
    Ok(coords)
}
