//! Geometric substrate: point clouds, rigid transforms, exact neighbour
//! search and the robust statistics used by the saliency score.

mod kdtree;
mod transform;

pub use kdtree::{Neighbor, NeighborIndex};
pub use transform::{umeyama_fit, RigidTransform};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;
pub type Matrix3 = nalgebra::Matrix3<f64>;

/// Ordered, non-empty set of finite 3D points. Index identity is preserved by
/// every operation that maps a cloud to a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; a cloud holds at least one point.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    /// Adds `offset` to every point.
    pub fn translated(&self, offset: &Vector3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + offset).collect(),
        }
    }

    /// Reorders points so that output point `i` is input point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len(), "permutation length");
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn apply_transform(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
        }
    }

    pub fn median_center(&self) -> Point3 {
        median_center(self)
    }
}

/// Flattened `n × k` table of each point's `k` nearest neighbours (the point
/// itself included), ordered by `(distance, index)`.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || n < k {
        return Err(Error::CloudTooSmall { needed: k.max(1), got: n });
    }
    let index = NeighborIndex::build(cloud);
    let mut table = Vec::with_capacity(n * k);
    for p in cloud.iter() {
        table.extend(index.knn(p, k).into_iter().map(|nb| nb.index));
    }
    Ok(table)
}

/// Median of a non-empty slice; even lengths take the midpoint of the middle pair.
pub(crate) fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median of the cloud.
pub fn median_center(cloud: &PointCloud) -> Point3 {
    let mut buf = Vec::with_capacity(cloud.len());
    let mut out = [0.0; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        buf.clear();
        buf.extend(cloud.iter().map(|p| p[axis]));
        *slot = median_of(&mut buf);
    }
    Point3::new(out[0], out[1], out[2])
}

/// Euclidean distance of each point to `center`.
pub fn radial_distances(cloud: &PointCloud, center: &Point3) -> Vec<f64> {
    cloud.iter().map(|p| (p - center).norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        assert!(matches!(
            PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn median_odd_and_even() {
        let odd = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]]).unwrap();
        assert_eq!(median_center(&odd), Point3::new(2.0, 0.0, 0.0));
        let even = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        assert_eq!(median_center(&even), Point3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let cloud = random_cloud(&mut rng, 101);
        let m = median_center(&cloud);
        for axis in 0..3 {
            let mut v: Vec<f64> = cloud.iter().map(|p| p[axis]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(m[axis], v[50]);
        }
    }

    #[test]
    fn radial_distance_cases() {
        let cloud = PointCloud::from_xyz(&[[1.0, 1.0, 1.0], [3.0, 4.0, 0.0]]).unwrap();
        let r = radial_distances(&cloud, &Point3::new(1.0, 1.0, 1.0));
        assert_eq!(r[0], 0.0);
        let r = radial_distances(&cloud, &Point3::origin());
        assert_eq!(r[1], 5.0);
    }

    #[test]
    fn radial_distance_matches_square_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 50);
        let c = Point3::new(0.5, -1.0, 2.0);
        let r = radial_distances(&cloud, &c);
        for (p, ri) in cloud.iter().zip(&r) {
            let dx = p.x - c.x;
            let dy = p.y - c.y;
            let dz = p.z - c.z;
            assert!((ri - (dx * dx + dy * dy + dz * dz).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn median_follows_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // dyadic coordinates keep the sums exact
        let cloud = PointCloud::new(
            (0..40)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-512..512) as f64 / 64.0,
                        rng.gen_range(-512..512) as f64 / 64.0,
                        rng.gen_range(-512..512) as f64 / 64.0,
                    )
                })
                .collect(),
        )
        .unwrap();
        let t = Vector3::new(3.25, -7.5, 100.125);
        let moved = median_center(&cloud.translated(&t));
        let expected = median_center(&cloud) + t;
        assert!((moved - expected).norm() < 1e-12);
    }
}
