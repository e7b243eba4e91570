//! Sinkhorn normalization of a similarity matrix into a soft assignment.

use crate::nnkit::{Graph, NnError, Tensor, Var};

/// Soft assignment from similarities, differentiable.
///
/// Each iteration rebuilds the kernel `exp((sim − max)/temp_i)` at that
/// iteration's temperature, carries the running row/column scaling
/// vectors, then renormalizes rows and columns. With a constant
/// temperature this is exactly the classic exp-then-alternating-normalize
/// scheme; a decreasing schedule anneals the assignment toward a
/// permutation. The global max subtraction guards `exp` against overflow
/// and cancels in the normalization.
pub fn sinkhorn_graph(g: &mut Graph, sim: Var, temps: &[f64]) -> Result<Var, NnError> {
    let shape = g.value(sim).shape().to_vec();
    if shape.len() != 2 {
        return Err(NnError::ShapeMismatch { what: format!("sinkhorn over {shape:?}") });
    }
    let (n, m) = (shape[0], shape[1]);
    if temps.is_empty() || temps.iter().any(|&t| t <= 0.0 || !t.is_finite()) {
        return Err(NnError::ShapeMismatch { what: "temperatures must be positive".into() });
    }
    let max = g.value(sim).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(NnError::NumericalOverflow("non-finite similarities".into()));
    }

    let mut r = g.constant(Tensor::from_vec(&[n], vec![1.0; n]));
    let mut c = g.constant(Tensor::from_vec(&[m], vec![1.0; m]));
    let kernel = |g: &mut Graph, temp: f64| {
        let shifted = g.add_const(sim, -max);
        let scaled = g.scale(shifted, 1.0 / temp);
        g.exp(scaled)
    };
    for &temp in temps {
        let k = kernel(g, temp);
        let kr = g.mul_by_row(k, r)?;
        let a = g.mul_by_col(kr, c)?;
        let rs = g.row_sum(a)?;
        let rs = g.clamp_min(rs, 1e-300);
        r = g.div(r, rs)?;
        let kr = g.mul_by_row(k, r)?;
        let a = g.mul_by_col(kr, c)?;
        let cs = g.col_sum(a)?;
        let cs = g.clamp_min(cs, 1e-300);
        c = g.div(c, cs)?;
    }
    let k = kernel(g, *temps.last().expect("non-empty"));
    let kr = g.mul_by_row(k, r)?;
    let out = g.mul_by_col(kr, c)?;
    if !g.value(out).all_finite() {
        return Err(NnError::NumericalOverflow("sinkhorn produced non-finite values".into()));
    }
    Ok(out)
}

/// Plain-tensor Sinkhorn: `exp(sim/temp)` then `iters` alternating
/// row/column normalizations.
pub fn sinkhorn(sim: &Tensor, iters: usize, temp: f64) -> Result<Tensor, NnError> {
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let temps = vec![temp; iters.max(1)];
    let out = sinkhorn_graph(&mut g, s, &temps)?;
    Ok(g.value(out).clone())
}

/// Geometric temperature ladder from `start` down to `end`, inclusive.
pub fn geometric_temps(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![end];
    }
    (0..n)
        .map(|i| start * (end / start).powf(i as f64 / (n - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_entry_is_one() {
        let out = sinkhorn(&Tensor::from_vec(&[1, 1], vec![3.7]), 5, 0.5).unwrap();
        assert!((out.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_dominant_similarity_sharpens_to_permutation() {
        let n = 4;
        let mut sim = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                sim.data_mut()[i * n + j] = if i == j { 5.0 } else { -5.0 };
            }
        }
        let out = sinkhorn(&sim, 8, 0.1).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (out.data()[i * n + j] - want).abs() < 1e-3,
                    "entry ({i},{j}) = {}",
                    out.data()[i * n + j]
                );
            }
        }
    }

    #[test]
    fn rows_sum_to_one_after_five_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sim = Tensor::uniform(&mut rng, &[6, 6], -1.0, 1.0);
        let out = sinkhorn(&sim, 5, 0.7).unwrap();
        for i in 0..6 {
            let s: f64 = out.data()[i * 6..(i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-3, "row {i} sums to {s}");
        }
    }

    #[test]
    fn marginal_residual_decreases_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sim = Tensor::uniform(&mut rng, &[8, 8], -2.0, 2.0);
        let residual = |t: &Tensor| -> f64 {
            let n = 8;
            let mut res = 0.0;
            for i in 0..n {
                let s: f64 = t.data()[i * n..(i + 1) * n].iter().sum();
                res += (s - 1.0).abs();
            }
            for j in 0..n {
                let s: f64 = (0..n).map(|i| t.data()[i * n + j]).sum();
                res += (s - 1.0).abs();
            }
            res
        };
        let mut prev = f64::INFINITY;
        for iters in 1..=8 {
            let out = sinkhorn(&sim, iters, 0.5).unwrap();
            let r = residual(&out);
            assert!(r <= prev + 1e-12, "residual rose from {prev} to {r} at {iters}");
            prev = r;
        }
    }

    #[test]
    fn overflow_guarded_by_max_subtraction() {
        let sim = Tensor::from_vec(&[2, 2], vec![1e6, 0.0, 0.0, 1e6]);
        let out = sinkhorn(&sim, 5, 1.0).unwrap();
        assert!(out.all_finite());
    }

    #[test]
    fn geometric_ladder_endpoints() {
        let t = geometric_temps(1.0, 0.1, 5);
        assert!((t[0] - 1.0).abs() < 1e-12);
        assert!((t[4] - 0.1).abs() < 1e-12);
        for w in t.windows(2) {
            assert!(w[1] < w[0]);
        }
    }
}
