//! Exact nearest-neighbor search over 3D points: a median-split kd-tree
//! with plane-distance pruning. Results match brute force exactly (up to
//! index choice among equidistant points).

pub struct KdTree {
    nodes: Vec<KdNode>,
    points: Vec<[f64; 3]>,
}

struct KdNode {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

fn build_rec(points: &[[f64; 3]], nodes: &mut Vec<KdNode>, idx: &mut [u32], depth: usize) -> i32 {
    if idx.is_empty() {
        return -1;
    }
    let axis = (depth % 3) as u8;
    idx.sort_unstable_by(|&a, &b| {
        let (pa, pb) = (points[a as usize][axis as usize], points[b as usize][axis as usize]);
        pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
    });
    let mid = idx.len() / 2;
    let point = idx[mid];
    let node_pos = nodes.len() as i32;
    nodes.push(KdNode { point, axis, left: -1, right: -1 });
    let (lo, rest) = idx.split_at_mut(mid);
    let hi = &mut rest[1..];
    let left = build_rec(points, nodes, lo, depth + 1);
    let right = build_rec(points, nodes, hi, depth + 1);
    nodes[node_pos as usize].left = left;
    nodes[node_pos as usize].right = right;
    node_pos
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> KdTree {
        assert!(!points.is_empty(), "kd-tree over empty cloud");
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        build_rec(points, &mut nodes, &mut idx, 0);
        KdTree { nodes, points: points.to_vec() }
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: i32, q: &[f64; 3], best: &mut (usize, f64)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d2 < best.1 {
            *best = (n.point as usize, d2);
        }
        let delta = q[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, q, best);
        if delta * delta < best.1 {
            self.search(far, q, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.gen_range(1..200);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let tree = KdTree::build(&pts);
            for _ in 0..50 {
                let q = [
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                ];
                let (_, d_tree) = tree.nearest(&q);
                let d_brute = pts
                    .iter()
                    .map(|p| {
                        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d_tree, d_brute);
            }
        }
    }
}
