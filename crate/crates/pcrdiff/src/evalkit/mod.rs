//! Registration metrics, the ICP baseline, and sampling-time evaluation
//! over a dataset with CSV emission.

mod evaluate;
mod icp;

pub use evaluate::{evaluate, EvalOptions, EvalTable, OracleDenoiser};
pub use icp::{icp, IcpResult};

use crate::geom3d::{GeomError, Mat3, Vec3};
use crate::regnet::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

fn check_rotation(m: &Mat3) -> Result<(), GeomError> {
    let ortho = (m * m.transpose() - Mat3::identity()).abs().max();
    if ortho > 1e-6 || m.determinant() <= 0.0 {
        return Err(GeomError::NotARotation { reason: format!("residual {ortho:e}") });
    }
    Ok(())
}

/// Geodesic rotation distance in degrees:
/// `arccos(clamp((trace(R_gtᵀ R_est) − 1)/2, −1, 1))`.
pub fn mie_rotation(r_gt: &Mat3, r_est: &Mat3) -> Result<f64, EvalError> {
    check_rotation(r_gt)?;
    check_rotation(r_est)?;
    let tr = (r_gt.transpose() * r_est).trace();
    let c = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Euclidean distance between translations.
pub fn mie_translation(t_gt: &Vec3, t_est: &Vec3) -> f64 {
    t_gt.sub(t_est).norm()
}

/// Wraps a degree difference into `[−180, 180]`.
fn wrap_deg(d: f64) -> f64 {
    let mut x = (d + 180.0).rem_euclid(360.0) - 180.0;
    if x == -180.0 {
        x = 180.0;
    }
    x
}

/// Per-axis absolute errors: intrinsic Z-Y-X Euler angles in degrees
/// (wrapped) and translation components.
pub fn per_axis_errors(
    g_gt: &crate::geom3d::RigidTransform,
    g_est: &crate::geom3d::RigidTransform,
) -> ([f64; 3], [f64; 3]) {
    let (y1, p1, r1) = crate::geom3d::euler_zyx_lenient(&g_gt.rotation_matrix());
    let (y2, p2, r2) = crate::geom3d::euler_zyx_lenient(&g_est.rotation_matrix());
    let ang = [
        wrap_deg((y1 - y2).to_degrees()).abs(),
        wrap_deg((p1 - p2).to_degrees()).abs(),
        wrap_deg((r1 - r2).to_degrees()).abs(),
    ];
    let t = [
        (g_gt.translation.x - g_est.translation.x).abs(),
        (g_gt.translation.y - g_est.translation.y).abs(),
        (g_gt.translation.z - g_est.translation.z).abs(),
    ];
    (ang, t)
}

/// One evaluation row; aggregates reuse the same shape.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub pair_id: String,
    pub regime: String,
    pub steps: usize,
    pub mie_r_deg: f64,
    pub mie_t: f64,
    pub mae_r_deg: f64,
    pub mae_t: f64,
    pub rmse_r_deg: f64,
    pub rmse_t: f64,
    pub time_s: Option<f64>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let time = self.time_s.map(|t| format!("{t:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.pair_id,
            self.regime,
            self.steps,
            self.mie_r_deg,
            self.mie_t,
            self.mae_r_deg,
            self.mae_t,
            self.rmse_r_deg,
            self.rmse_t,
            time
        )
    }
}

pub const CSV_HEADER: &str =
    "pair_id,regime,steps,mie_r_deg,mie_t,mae_r_deg,mae_t,rmse_r_deg,rmse_t,time_s";

/// Aggregates per-pair rows: means for MIE and MAE, pooled root mean
/// square over pairs × axes for RMSE.
pub fn aggregate(rows: &[MetricsRecord]) -> Result<MetricsRecord, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let pooled = |f: fn(&MetricsRecord) -> f64| {
        (rows.iter().map(|r| f(r) * f(r)).sum::<f64>() / n).sqrt()
    };
    Ok(MetricsRecord {
        pair_id: "aggregate".into(),
        regime: rows[0].regime.clone(),
        steps: rows[0].steps,
        mie_r_deg: mean(|r| r.mie_r_deg),
        mie_t: mean(|r| r.mie_t),
        mae_r_deg: mean(|r| r.mae_r_deg),
        mae_t: mean(|r| r.mae_t),
        rmse_r_deg: pooled(|r| r.rmse_r_deg),
        rmse_t: pooled(|r| r.rmse_t),
        time_s: if rows.iter().all(|r| r.time_s.is_some()) {
            Some(mean(|r| r.time_s.unwrap_or(0.0)))
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::{Quaternion, RigidTransform};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot_z(deg: f64) -> Mat3 {
        let a = deg.to_radians();
        Mat3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn mie_rotation_examples() {
        let id = Mat3::identity();
        assert_eq!(mie_rotation(&id, &id).unwrap(), 0.0);
        assert_abs_diff_eq!(mie_rotation(&id, &rot_z(90.0)).unwrap(), 90.0, epsilon = 1e-9);
        let x180 = Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        assert_abs_diff_eq!(mie_rotation(&id, &x180).unwrap(), 180.0, epsilon = 1e-9);
        let refl = Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(mie_rotation(&id, &refl).is_err());
    }

    #[test]
    fn mie_rotation_is_a_metric_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..1000 {
            let a = crate::geom3d::random_transform(&mut rng, 179.0, 0.0).unwrap();
            let b = crate::geom3d::random_transform(&mut rng, 179.0, 0.0).unwrap();
            let c = crate::geom3d::random_transform(&mut rng, 179.0, 0.0).unwrap();
            let (ra, rb, rc) =
                (a.rotation_matrix(), b.rotation_matrix(), c.rotation_matrix());
            let dab = mie_rotation(&ra, &rb).unwrap();
            let dba = mie_rotation(&rb, &ra).unwrap();
            assert_abs_diff_eq!(dab, dba, epsilon = 1e-9);
            // acos conditioning near 1 turns 1e-15 trace error into ~1e-6°.
            assert!(mie_rotation(&ra, &ra).unwrap() < 1e-5);
            let dac = mie_rotation(&ra, &rc).unwrap();
            let dcb = mie_rotation(&rc, &rb).unwrap();
            assert!(dab <= dac + dcb + 1e-6, "triangle violated: {dab} > {dac} + {dcb}");
        }
    }

    #[test]
    fn mie_translation_examples() {
        let z = Vec3::ZERO;
        assert_eq!(mie_translation(&z, &z), 0.0);
        assert_eq!(mie_translation(&z, &Vec3::new(3.0, 4.0, 0.0)), 5.0);
        let a = Vec3::new(1.0, -2.0, 0.5);
        assert_eq!(mie_translation(&a, &z), mie_translation(&z, &a));
    }

    #[test]
    fn single_axis_error_aggregates_as_declared() {
        // A single pair with one 10° axis error: MAE(R) = 10/3,
        // RMSE(R) = 10/√3 under the per-angle definitions.
        let gt = RigidTransform::IDENTITY;
        let est = RigidTransform::new(
            Quaternion::new((5f64.to_radians()).cos(), 0.0, 0.0, (5f64.to_radians()).sin()),
            Vec3::ZERO,
        )
        .unwrap(); // 10° about z
        let (ang, t) = per_axis_errors(&gt, &est);
        let mae = ang.iter().sum::<f64>() / 3.0;
        let rmse = (ang.iter().map(|a| a * a).sum::<f64>() / 3.0).sqrt();
        assert_abs_diff_eq!(mae, 10.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rmse, 10.0 / 3f64.sqrt(), epsilon = 1e-9);
        assert!(rmse >= mae);
        assert_eq!(t, [0.0; 3]);
    }

    #[test]
    fn rmse_dominates_mae_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..200 {
            let a = crate::geom3d::random_transform(&mut rng, 60.0, 1.0).unwrap();
            let b = crate::geom3d::random_transform(&mut rng, 60.0, 1.0).unwrap();
            let (ang, tr) = per_axis_errors(&a, &b);
            let mae = ang.iter().sum::<f64>() / 3.0;
            let rmse = (ang.iter().map(|x| x * x).sum::<f64>() / 3.0).sqrt();
            assert!(rmse >= mae - 1e-12);
            let mae_t = tr.iter().sum::<f64>() / 3.0;
            let rmse_t = (tr.iter().map(|x| x * x).sum::<f64>() / 3.0).sqrt();
            assert!(rmse_t >= mae_t - 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_empty_and_orders_invariantly() {
        assert!(matches!(aggregate(&[]), Err(EvalError::EmptySet)));
        let mk = |id: &str, v: f64| MetricsRecord {
            pair_id: id.into(),
            regime: "clean".into(),
            steps: 1,
            mie_r_deg: v,
            mie_t: v / 10.0,
            mae_r_deg: v,
            mae_t: v / 10.0,
            rmse_r_deg: v,
            rmse_t: v / 10.0,
            time_s: None,
        };
        let fwd = aggregate(&[mk("a", 1.0), mk("b", 3.0)]).unwrap();
        let rev = aggregate(&[mk("b", 3.0), mk("a", 1.0)]).unwrap();
        assert_eq!(fwd.mie_r_deg, rev.mie_r_deg);
        assert_eq!(fwd.rmse_r_deg, rev.rmse_r_deg);
        assert_abs_diff_eq!(fwd.mie_r_deg, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fwd.rmse_r_deg, (5.0f64).sqrt(), epsilon = 1e-12);
    }
}
