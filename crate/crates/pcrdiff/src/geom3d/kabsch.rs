//! Weighted least-squares rigid alignment via SVD with determinant
//! correction.

use super::{GeomError, Mat3, Quaternion, RigidTransform, Vec3};
use nalgebra::Vector3;

/// Solves `min_{R,t} Σ w_i ‖R src_i + t − dst_i‖²`.
///
/// `weights = None` means equal weights. The sign of the smallest singular
/// vector is flipped when `det(V Uᵀ) < 0`, so the result is always a proper
/// rotation, never a reflection.
pub fn kabsch(
    src: &[Vec3],
    dst: &[Vec3],
    weights: Option<&[f64]>,
) -> Result<RigidTransform, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::MismatchedLengths { left: src.len(), right: dst.len() });
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(GeomError::MismatchedLengths { left: src.len(), right: w.len() });
        }
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(GeomError::BadRange { what: "negative or non-finite weight".into() });
        }
    }
    if src.len() < 3 {
        return Err(GeomError::DegenerateGeometry {
            reason: format!("{} correspondences, need at least 3", src.len()),
        });
    }

    let n = src.len();
    let w_at = |i: usize| weights.map_or(1.0, |w| w[i]);
    let w_sum: f64 = (0..n).map(w_at).sum();
    if w_sum <= 1e-12 {
        return Err(GeomError::WeightUnderflow { sum: w_sum });
    }

    let mut c_src = Vector3::zeros();
    let mut c_dst = Vector3::zeros();
    for i in 0..n {
        c_src += w_at(i) * src[i].to_na();
        c_dst += w_at(i) * dst[i].to_na();
    }
    c_src /= w_sum;
    c_dst /= w_sum;

    let mut h = Mat3::zeros();
    for i in 0..n {
        let a = src[i].to_na() - c_src;
        let b = dst[i].to_na() - c_dst;
        h += w_at(i) * a * b.transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma = svd.singular_values;
    // Rank < 2 leaves the rotation about the dominant axis unconstrained.
    if sigma[1] <= 1e-12 * sigma[0].max(1.0) {
        return Err(GeomError::DegenerateGeometry {
            reason: format!("cross-covariance is rank-deficient (σ = {:?})", sigma),
        });
    }

    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let mut corr = Mat3::identity();
    corr[(2, 2)] = if d < 0.0 { -1.0 } else { 1.0 };
    let r = v * corr * u.transpose();

    let rotation = Quaternion::from_matrix(&r)?;
    let t = c_dst - r * c_src;
    Ok(RigidTransform { rotation, translation: Vec3::from_na(t) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::{random_transform, rotation_geodesic_rad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn identical_clouds_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 20);
        let g = kabsch(&cloud, &cloud, None).unwrap();
        assert!(rotation_geodesic_rad(&g.rotation, &Quaternion::IDENTITY) < 1e-9);
        assert!(g.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_random_transform_noise_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let src = random_cloud(&mut rng, 12);
            let g_true = random_transform(&mut rng, 179.0, 3.0).unwrap();
            let dst = g_true.apply(&src).unwrap();
            let g = kabsch(&src, &dst, None).unwrap();
            assert!(rotation_geodesic_rad(&g.rotation, &g_true.rotation) < 1e-6);
            assert!(g.translation.sub(&g_true.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn reflection_trap_returns_proper_rotation() {
        // Coplanar source with a mirrored target: the unconstrained least
        // squares optimum is a reflection, which must be rejected in favor
        // of the best det=+1 rotation.
        let src = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
        ];
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(p.x, -p.y, p.z)).collect();
        let g = kabsch(&src, &dst, None).unwrap();
        let det = g.rotation_matrix().determinant();
        assert!((det - 1.0).abs() < 1e-6, "det(R) = {det}");
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_cloud(&mut rng, 10);
        let g_true = random_transform(&mut rng, 45.0, 1.0).unwrap();
        let dst = g_true.apply(&src).unwrap();
        let w: Vec<f64> = (0..10).map(|_| rng.gen_range(0.1..2.0)).collect();
        let w5: Vec<f64> = w.iter().map(|x| 5.0 * x).collect();
        let a = kabsch(&src, &dst, Some(&w)).unwrap();
        let b = kabsch(&src, &dst, Some(&w5)).unwrap();
        assert!(rotation_geodesic_rad(&a.rotation, &b.rotation) < 1e-9);
        assert!(a.translation.sub(&b.translation).norm() < 1e-9);
    }

    #[test]
    fn zero_weights_underflow() {
        let src = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
        let err = kabsch(&src, &src, Some(&[0.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, GeomError::WeightUnderflow { .. }));
    }

    #[test]
    fn collinear_points_rejected() {
        let src: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let err = kabsch(&src, &src, None).unwrap_err();
        assert!(matches!(err, GeomError::DegenerateGeometry { .. }));
    }
}
