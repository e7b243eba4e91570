//! The three training losses, as plain values and as loss-graph builders.

use super::TrainError;
use crate::datasyn::RegPair;
use crate::geom3d::{RigidTransform, Vec3};
use crate::nnkit::{Graph, NnError, Tensor, Var};
use crate::regnet::{cloud_tensor, transform_graph, Repr};

/// `½‖g_pred − g0‖²`.
pub fn loss_diff(pred: &[f64], g0: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != g0.len() {
        return Err(TrainError::Nn(NnError::ShapeMismatch {
            what: format!("loss_diff {} vs {}", pred.len(), g0.len()),
        }));
    }
    Ok(0.5 * pred.iter().zip(g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Symmetric Chamfer distance with the size-gated exact search.
pub fn loss_chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64, TrainError> {
    if a.is_empty() || b.is_empty() {
        return Err(TrainError::Nn(NnError::EmptyCloud));
    }
    let xs: Vec<[f64; 3]> = a.iter().map(|p| [p.x, p.y, p.z]).collect();
    let ts: Vec<[f64; 3]> = b.iter().map(|p| [p.x, p.y, p.z]).collect();
    Ok(crate::nnkit::chamfer_value(&xs, &ts, None))
}

/// Chamfer with the search strategy pinned: `use_kd = false` is the brute
/// force oracle, `true` the kd-tree path. Both must agree exactly.
pub fn loss_chamfer_forced(a: &[Vec3], b: &[Vec3], use_kd: bool) -> Result<f64, TrainError> {
    if a.is_empty() || b.is_empty() {
        return Err(TrainError::Nn(NnError::EmptyCloud));
    }
    let xs: Vec<[f64; 3]> = a.iter().map(|p| [p.x, p.y, p.z]).collect();
    let ts: Vec<[f64; 3]> = b.iter().map(|p| [p.x, p.y, p.z]).collect();
    Ok(crate::nnkit::chamfer_value(&xs, &ts, Some(use_kd)))
}

/// `‖G_pred⁻¹ G_gt − I₄‖_F`.
pub fn loss_transform(pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let rel = pred.inverse().compose(gt);
    let m = rel.to_matrix4();
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let d = v - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s.sqrt()
}

pub struct PairLossVars {
    pub total: Var,
    pub diff: Var,
    pub cf1: Var,
    pub cf2: Var,
}

/// Per-pair loss subgraph on a raw prediction node:
/// `λ_diff·L_diff + λ_cf1·Chamfer(G(pred)·P, Q) + λ_cf2·‖G(pred)⁻¹G_gt − I‖_F`.
/// The predicted transform is applied to P for the Chamfer term only; it is
/// never fed back into the network.
pub fn pair_loss_graph(
    g: &mut Graph,
    pred: Var,
    pair: &RegPair,
    target: &[f64],
    repr: Repr,
    weights: (f64, f64, f64),
) -> Result<PairLossVars, TrainError> {
    let (w_diff, w_cf1, w_cf2) = weights;
    let tv = g.constant(Tensor::from_vec(&[target.len()], target.to_vec()));
    let d = g.sub(pred, tv)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    let diff = g.scale(s, 0.5);

    let (r, t) = transform_graph(g, pred, repr)?;
    let rt = g.transpose(r)?;
    let pc = g.constant(cloud_tensor(&pair.p));
    let moved = g.matmul(pc, rt)?;
    let moved = g.add_row(moved, t)?;
    let cf1 = g.chamfer(moved, &pair.q)?;

    let r_gt = pair.g_gt.rotation_matrix();
    let rg = g.constant(Tensor::from_vec(
        &[3, 3],
        (0..3).flat_map(|i| (0..3).map(move |j| r_gt[(i, j)])).collect(),
    ));
    let rel = g.matmul(rt, rg)?;
    let eye = g.constant(Tensor::from_vec(
        &[3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ));
    let rel = g.sub(rel, eye)?;
    let rel_sq = g.mul(rel, rel)?;
    let s_rot = g.sum(rel_sq);
    let tg = pair.g_gt.translation;
    let tgv = g.constant(Tensor::from_vec(&[3], vec![tg.x, tg.y, tg.z]));
    let dt = g.sub(tgv, t)?;
    let dt_col = g.reshape(dt, &[3, 1])?;
    let rdt = g.matmul(rt, dt_col)?;
    let rdt_sq = g.mul(rdt, rdt)?;
    let s_t = g.sum(rdt_sq);
    let fro2 = g.add(s_rot, s_t)?;
    let cf2 = g.sqrt(fro2);

    let a = g.scale(diff, w_diff);
    let b = g.scale(cf1, w_cf1);
    let c = g.scale(cf2, w_cf2);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(PairLossVars { total, diff, cf1, cf2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_diff_examples() {
        assert_eq!(loss_diff(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // Unit vectors differing in one coordinate by 2: ½·2² = 2.
        assert_eq!(loss_diff(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(loss_diff(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_diff_gradient_is_difference() {
        let pred = vec![0.3, -0.2, 1.1];
        let g0 = vec![0.0, 0.5, 1.0];
        let mut g = Graph::new();
        let pv = g.input(Tensor::from_vec(&[3], pred.clone()));
        let tv = g.constant(Tensor::from_vec(&[3], g0.clone()));
        let d = g.sub(pv, tv).unwrap();
        let sq = g.mul(d, d).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss);
        let grad = grads.dense(&g, pv);
        for i in 0..3 {
            assert!((grad.data()[i] - (pred[i] - g0[i])).abs() < 1e-15);
        }
        // Against central differences.
        for i in 0..3 {
            let h = 1e-6;
            let mut plus = pred.clone();
            plus[i] += h;
            let mut minus = pred.clone();
            minus[i] -= h;
            let fd = (loss_diff(&plus, &g0).unwrap() - loss_diff(&minus, &g0).unwrap()) / (2.0 * h);
            assert!((grad.data()[i] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn chamfer_examples_and_grid_parity() {
        let a = vec![Vec3::new(0.0, 0.0, 0.0)];
        let b = vec![Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(loss_chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_chamfer(&a, &b).unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..100 {
            let n = rng.gen_range(5..120);
            let m = rng.gen_range(5..120);
            let mk = |rng: &mut ChaCha8Rng, k: usize| -> Vec<Vec3> {
                (0..k)
                    .map(|_| {
                        Vec3::new(
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        )
                    })
                    .collect()
            };
            let x = mk(&mut rng, n);
            let y = mk(&mut rng, m);
            let brute = loss_chamfer_forced(&x, &y, false).unwrap();
            let kd = loss_chamfer_forced(&x, &y, true).unwrap();
            assert_eq!(brute, kd, "kd-tree and brute force disagree");
        }
    }

    #[test]
    fn loss_transform_examples() {
        let gt = RigidTransform::IDENTITY;
        assert_eq!(loss_transform(&gt, &gt), 0.0);
        // Identity prediction vs pure translation (1,0,0): a single unit
        // entry in the 4×4 difference.
        let shifted =
            RigidTransform::new(Quaternion::IDENTITY, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((loss_transform(&RigidTransform::IDENTITY, &shifted) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_transform_right_composition_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..50 {
            let a = crate::geom3d::random_transform(&mut rng, 90.0, 1.0).unwrap();
            let b = crate::geom3d::random_transform(&mut rng, 90.0, 1.0).unwrap();
            let c = crate::geom3d::random_transform(&mut rng, 90.0, 1.0).unwrap();
            let lhs = loss_transform(&a, &b);
            let rhs = loss_transform(&c.compose(&a), &c.compose(&b));
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }
}
