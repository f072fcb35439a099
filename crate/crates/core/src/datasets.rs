//! Built-in targets and CSV point-cloud loading.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;

use crate::error::{FormatError, OracleError};
use crate::oracle::GaussianMixture;

/// Component variance used to turn a finite point set into a smooth density.
pub const POINT_CLOUD_VARIANCE: f64 = 1e-6;

/// Eight equal-weight modes on a circle of radius 2, component variance 0.05.
pub fn eight_mode_gmm() -> GaussianMixture {
    let means = (0..8)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / 8.0;
            vec![2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect();
    GaussianMixture::new(vec![0.125; 8], means, vec![0.05; 8]).expect("valid mixture")
}

/// A 100-point 2D figure (a face: outline, two eyes and a mouth).
pub fn face_points() -> Array2<f64> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(100);
    for i in 0..50 {
        let a = 2.0 * PI * i as f64 / 50.0;
        pts.push([2.0 * a.cos(), 2.0 * a.sin()]);
    }
    for cx in [-0.7, 0.7] {
        for i in 0..8 {
            let a = 2.0 * PI * i as f64 / 8.0;
            pts.push([cx + 0.25 * a.cos(), 0.6 + 0.25 * a.sin()]);
        }
    }
    for i in 0..34 {
        let a = (200.0 + 140.0 * i as f64 / 33.0) * PI / 180.0;
        pts.push([1.1 * a.cos(), -0.1 + 1.1 * a.sin()]);
    }
    let flat: Vec<f64> = pts.into_iter().flatten().collect();
    Array2::from_shape_vec((100, 2), flat).expect("shape")
}

pub fn face_point_cloud() -> GaussianMixture {
    GaussianMixture::point_cloud(&face_points(), POINT_CLOUD_VARIANCE).expect("valid cloud")
}

/// Reads rows of `d` numeric columns. A first row that does not parse as
/// numbers is treated as a header.
pub fn read_points_csv(path: &Path) -> Result<Array2<f64>, FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FormatError::Malformed(e.to_string()))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(FormatError::Malformed(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    let d = rows.first().map(Vec::len).ok_or_else(|| {
        FormatError::Malformed(format!("{}: no data rows", path.display()))
    })?;
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(FormatError::Malformed(format!(
            "row {} has {} columns, expected {d}",
            i + 1,
            r.len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FormatError::Malformed("non-finite value".into()));
    }
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("shape"))
}

pub fn load_point_cloud(path: &Path, variance: f64) -> Result<GaussianMixture, LoadError> {
    let pts = read_points_csv(path)?;
    Ok(GaussianMixture::point_cloud(&pts, variance)?)
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}
