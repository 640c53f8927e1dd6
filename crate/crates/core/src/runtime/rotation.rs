use nalgebra::{Matrix3, Vector3};

use crate::linalg::polar_rotation;

/// Gradient blocks below this Frobenius norm carry no orientation.
pub const ZERO_BLOCK: f64 = 1e-300;

/// Orientation-preserving polar factor of `g`, or `None` for a zero block.
pub fn fit_rotation(g: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    if !(g.norm() > ZERO_BLOCK) || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(polar_rotation(g))
}

/// Conformal fit of one cluster: `T = polar(G)` and the scale minimizing
/// `½C·ψ² − ψ·tr(TᵀG)`, clamped to `[1/cap, cap]`.
pub fn fit_conformal(g: &Matrix3<f64>, c: f64, cap: f64) -> Option<(Matrix3<f64>, f64, bool)> {
    let t = fit_rotation(g)?;
    let psi = (t.transpose() * g).trace() / c;
    let clamped = psi.clamp(1.0 / cap, cap);
    Some((t, clamped, clamped != psi))
}

/// `∂/∂ψ` of `½C·ψ² − ψ·tr(TᵀG)`.
pub fn conformal_gradient(g: &Matrix3<f64>, t: &Matrix3<f64>, c: f64, psi: f64) -> f64 {
    c * psi - (t.transpose() * g).trace()
}

/// Rotation `R` minimizing `Σ‖R(vᵢ − v̄) − (pᵢ − p̄)‖²`; `None` when the rest
/// points are fewer than three or collinear.
pub fn procrustes(rest: &[Vector3<f64>], targets: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    if rest.len() < 3 || rest.len() != targets.len() {
        return None;
    }
    let k = rest.len() as f64;
    let vbar = rest.iter().sum::<Vector3<f64>>() / k;
    let pbar = targets.iter().sum::<Vector3<f64>>() / k;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (v, p) in rest.iter().zip(targets) {
        let dv = v - vbar;
        h += (p - pbar) * dv.transpose();
        spread += dv * dv.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let (lo, hi) = (sv.min(), sv.max());
    let mid = sv.sum() - lo - hi;
    if !(hi > 0.0) || mid <= 1e-12 * hi {
        return None;
    }
    fit_rotation(&h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_is_its_own_fit() {
        let r = Rotation3::from_euler_angles(0.4, -1.1, 2.0).into_inner();
        assert!((fit_rotation(&r).unwrap() - r).amax() < 1e-12);
    }

    #[test]
    fn reflection_is_corrected() {
        let g = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, -0.1));
        let s = fit_rotation(&g).unwrap();
        assert!((s.determinant() - 1.0).abs() < 1e-12);
        assert!((s - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn zero_block_has_no_fit() {
        assert!(fit_rotation(&Matrix3::zeros()).is_none());
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Rotation3::from_euler_angles(0.3, 0.9, -0.5).into_inner();
        let rest: Vec<Vector3<f64>> = (0..6).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let t = Vector3::new(1.0, -2.0, 0.5);
        let targets: Vec<_> = rest.iter().map(|v| r * v + t).collect();
        assert!((procrustes(&rest, &targets).unwrap() - r).amax() < 1e-8);
        assert!((procrustes(&rest, &rest).unwrap() - Matrix3::identity()).amax() < 1e-12);
        let line: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(procrustes(&line, &line).is_none());
    }

    #[test]
    fn conformal_scale_is_stationary() {
        let r = Rotation3::from_euler_angles(0.2, 0.1, 0.3).into_inner();
        // A cluster scaled by ψ has G = ψ·R·E with C = tr(E).
        let e = Matrix3::from_diagonal(&Vector3::new(1.0, 0.5, 1.0));
        let c = e.trace();
        let g = r * e * 1.3;
        let (t, psi, clamped) = fit_conformal(&g, c, 2.0).unwrap();
        assert!(!clamped);
        assert!((psi - 1.3).abs() < 1e-12);
        assert!(conformal_gradient(&g, &t, c, psi).abs() < 1e-12);
        let (_, psi, clamped) = fit_conformal(&(r * 10.0), 1.0, 2.0).unwrap();
        assert!(clamped && psi == 2.0);
    }
}
