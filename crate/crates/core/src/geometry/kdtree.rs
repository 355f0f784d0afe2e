use nalgebra::Vector3;

use super::Real;

/// Static 3D kd-tree for nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KdTree<T: Real> {
    points: Vec<Vector3<T>>,
    /// Point indices arranged as an implicit balanced tree.
    order: Vec<usize>,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: Vec<Vector3<T>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(&points, &mut order, 0);
        Self { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    /// Index and squared distance of the closest point; the lowest index
    /// wins ties.
    pub fn nearest(&self, q: &Vector3<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::max_value().expect("bounded float"));
        self.search(&self.order, 0, q, &mut best);
        Some(best)
    }

    fn search(&self, slice: &[usize], depth: usize, q: &Vector3<T>, best: &mut (usize, T)) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let idx = slice[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < T::zero() {
            (&slice[..mid], &slice[mid + 1..])
        } else {
            (&slice[mid + 1..], &slice[..mid])
        };
        self.search(near, depth + 1, q, best);
        if diff * diff <= best.1 {
            self.search(far, depth + 1, q, best);
        }
    }
}

fn build<T: Real>(points: &[Vector3<T>], slice: &mut [usize], depth: usize) {
    if slice.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let (left, right) = slice.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn matches_linear_scan(seed in 0u64..300, n in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pt = || Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0));
            let pts: Vec<Vector3<f64>> = (0..n).map(|_| pt()).collect();
            let tree = KdTree::new(pts.clone());
            for _ in 0..20 {
                let q = pt();
                let (i, d2) = tree.nearest(&q).unwrap();
                let brute = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(d2, brute);
                prop_assert_eq!((pts[i] - q).norm_squared(), brute);
            }
        }
    }

    #[test]
    fn empty_tree_has_no_neighbour() {
        assert!(KdTree::<f64>::new(Vec::new()).nearest(&Vector3::zeros()).is_none());
    }
}
