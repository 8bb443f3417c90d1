//! Gaussian localisation targets.

use super::DataError;

pub const DEFAULT_SIGMA: f64 = 3.0;

/// Isotropic Gaussian bump centered on pixel `center`, normalised to sum to
/// one over the `h x w` map. Row-major.
pub fn gaussian_target(center: (usize, usize), h: usize, w: usize, sigma: f64) -> Result<Vec<f32>, DataError> {
    let (cr, cc) = center;
    if cr >= h || cc >= w {
        return Err(DataError::InvalidArgument(format!(
            "center ({cr},{cc}) outside {h}x{w} map"
        )));
    }
    if !(sigma > 0.0) {
        return Err(DataError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let row: Vec<f64> = (0..h).map(|y| (-((y as f64 - cr as f64).powi(2)) * inv).exp()).collect();
    let col: Vec<f64> = (0..w).map(|x| (-((x as f64 - cc as f64).powi(2)) * inv).exp()).collect();
    let total = row.iter().sum::<f64>() * col.iter().sum::<f64>();
    let mut out = Vec::with_capacity(h * w);
    for &ry in &row {
        out.extend(col.iter().map(|&cx| (ry * cx / total) as f32));
    }
    Ok(out)
}
