use crate::error::{check_len, Result};

/// Filled disc of `radius_cells` around the grid centre (1 inside, 0 outside).
pub fn circle_mask(nx: usize, ny: usize, radius_cells: f64) -> Vec<f64> {
    let cx = (nx - 1) as f64 / 2.0;
    let cy = (ny - 1) as f64 / 2.0;
    let r2 = radius_cells * radius_cells;
    let mut m = vec![0.0; nx * ny];
    for ix in 0..nx {
        for iy in 0..ny {
            let d2 = (ix as f64 - cx).powi(2) + (iy as f64 - cy).powi(2);
            if d2 <= r2 {
                m[ix * ny + iy] = 1.0;
            }
        }
    }
    m
}

pub fn apply_gradient_mask(gradient: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    check_len("gradient mask", gradient.len(), mask.len())?;
    Ok(gradient.iter().zip(mask).map(|(g, m)| g * m).collect())
}
