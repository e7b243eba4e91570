//! Point-to-point ICP with exact nearest-neighbor correspondence and SVD
//! alignment.

use super::EvalError;
use crate::geom3d::{kabsch, RigidTransform, Vec3};
use crate::knn::KdTree;

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Tracked objective after each iteration: mean squared
    /// nearest-neighbor distance from the transformed source into the
    /// template (the quantity ICP monotonically decreases).
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Alternates exact nearest-neighbor correspondence and weighted-free
/// Kabsch alignment; stops at `max_iters` or when the transform parameters
/// move less than `tol`. Returns the best transform under the tracked
/// objective, which is the final one by monotonicity.
pub fn icp(
    p: &[Vec3],
    q: &[Vec3],
    max_iters: usize,
    tol: f64,
) -> Result<IcpResult, EvalError> {
    if p.len() < 3 || q.len() < 3 {
        return Err(EvalError::Geom(crate::geom3d::GeomError::DegenerateGeometry {
            reason: format!("{} x {} points", p.len(), q.len()),
        }));
    }
    let q_arr: Vec<[f64; 3]> = q.iter().map(|v| [v.x, v.y, v.z]).collect();
    let tree = KdTree::build(&q_arr);

    let mut g = RigidTransform::IDENTITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        let moved = g.apply(p)?;
        let matched: Vec<Vec3> = moved
            .iter()
            .map(|m| {
                let (j, _) = tree.nearest(&[m.x, m.y, m.z]);
                q[j]
            })
            .collect();
        let g_new = kabsch(p, &matched, None)?;

        let delta: f64 = g
            .to_vec7()
            .0
            .iter()
            .zip(g_new.to_vec7().0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        g = g_new;
        iterations += 1;

        let moved = g.apply(p)?;
        let obj: f64 = moved
            .iter()
            .map(|m| tree.nearest(&[m.x, m.y, m.z]).1)
            .sum::<f64>()
            / p.len() as f64;
        trace.push(obj);
        if delta < tol {
            break;
        }
    }
    Ok(IcpResult { transform: g, objective_trace: trace, iterations })
}
