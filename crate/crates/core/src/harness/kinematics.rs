//! Planar two-link arm with its base at the origin.

use crate::error::{Error, Result};

pub const L1: f64 = 1.0;
pub const L2: f64 = 0.8;

pub fn forward(q1: f64, q2: f64) -> (f64, f64) {
    (
        L1 * q1.cos() + L2 * (q1 + q2).cos(),
        L1 * q1.sin() + L2 * (q1 + q2).sin(),
    )
}

/// Elbow-down solution: `q2 = acos(c2) ∈ [0, π]`.
pub fn inverse(x: f64, y: f64) -> Result<(f64, f64)> {
    let r2 = x * x + y * y;
    let (lo, hi) = ((L1 - L2).abs(), L1 + L2);
    let r = r2.sqrt();
    if !(r >= lo - 1e-12 && r <= hi + 1e-12) {
        return Err(Error::Input(format!("target ({x}, {y}) at distance {r} is outside the reachable annulus [{lo}, {hi}]")));
    }
    let c2 = ((r2 - L1 * L1 - L2 * L2) / (2.0 * L1 * L2)).clamp(-1.0, 1.0);
    let q2 = c2.acos();
    let q1 = y.atan2(x) - (L2 * q2.sin()).atan2(L1 + L2 * q2.cos());
    Ok((q1, q2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_extension_has_straight_elbow() {
        let (q1, q2) = inverse(L1 + L2, 0.0).unwrap();
        assert_eq!(q2, 0.0);
        assert!(q1.abs() < 1e-15);
    }

    #[test]
    fn right_angle_elbow() {
        // |p| = sqrt(L1² + L2²) puts the elbow at a right angle.
        let r = (L1 * L1 + L2 * L2).sqrt();
        let (q1, q2) = inverse(0.0, r).unwrap();
        assert!((q2 - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let (x, y) = forward(q1, q2);
        assert!(x.abs() < 1e-12 && (y - r).abs() < 1e-12);
    }

    #[test]
    fn unreachable_targets_are_rejected() {
        assert!(inverse(2.0, 0.0).is_err());
        assert!(inverse(0.1, 0.0).is_err());
    }
}
