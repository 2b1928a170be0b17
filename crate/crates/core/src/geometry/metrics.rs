use crate::error::{Error, Result};

use super::{Pose, Quat};

/// Median of `values`; for even counts, the mean of the two central order
/// statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn check_pair(pred: &[Pose], gt: &[Pose]) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    Ok(())
}

/// Median Euclidean position error in meters.
pub fn median_position_error(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    check_pair(pred, gt)?;
    let d: Vec<f64> = pred.iter().zip(gt).map(|(a, b)| (a.p - b.p).norm()).collect();
    median(&d)
}

/// Geodesic angle `2·acos(min(1, |<q1, q2>|))` in degrees.
pub fn orientation_error_deg(a: Quat, b: Quat) -> f64 {
    let d = (a.dot(b).abs() / (a.norm() * b.norm())).min(1.0);
    (2.0 * d.acos()).to_degrees()
}

/// Median orientation error in degrees.
pub fn median_orientation_error(pred: &[Pose], gt: &[Pose]) -> Result<f64> {
    check_pair(pred, gt)?;
    let d: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| orientation_error_deg(a.q, b.q))
        .collect();
    median(&d)
}

/// `100 · (base − refined) / base`; positive means `refined` is better.
pub fn improvement_percent(base: f64, refined: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(Error::invalid("baseline error must be positive"));
    }
    Ok(100.0 * (base - refined) / base)
}
