//! Evaluation metrics: masked PSNR and two-way chamfer distance.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{check_same_size, Image, Mask};
use crate::mesh::TriMesh;
use crate::Vec3;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_CHAMFER_SAMPLES: usize = 100_000;
/// Default clipping distance in multiples of the mean ground-truth spacing.
pub const DEFAULT_MAX_DIST_SPACINGS: f64 = 10.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR over the pixels inside `mask`, colours in `[0, 1]`.
pub fn psnr_masked(img: &Image, gt: &Image, mask: &Mask) -> Result<f64> {
    check_same_size(img.width, img.height, gt.width, gt.height)?;
    check_same_size(img.width, img.height, mask.width, mask.height)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((a, b), &m) in img.data.iter().zip(&gt.data).zip(&mask.data) {
        if m {
            sum += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Empty("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(sum / n as f64))
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        // Degenerate triangle: fall back to its edges.
        return [(a, b), (b, c), (c, a)]
            .iter()
            .map(|(u, v)| closest_point_on_segment(p, u, v))
            .min_by(|x, y| (x - p).norm_squared().total_cmp(&(y - p).norm_squared()))
            .unwrap();
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

fn closest_point_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    a + d * ((p - a).dot(&d) / len2).clamp(0.0, 1.0)
}

pub fn point_triangle_distance(p: &Vec3, tri: &[Vec3; 3]) -> f64 {
    (closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]) - p).norm()
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn dist2(&self, p: &Vec3) -> f64 {
        let d = (self.min - p).sup(&Vec3::zeros()).sup(&(p - self.max));
        d.norm_squared()
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: `start..start+count` into `order`; inner: children `left`, `left + 1`.
    start: usize,
    count: usize,
    left: usize,
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over triangles (points are degenerate
/// triangles) answering exact nearest-distance queries.
#[derive(Debug, Clone)]
pub struct Bvh {
    prims: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl Bvh {
    pub fn from_mesh(mesh: &TriMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::Empty("mesh has no triangles".into()));
        }
        Ok(Self::build((0..mesh.triangles.len()).map(|i| mesh.triangle(i)).collect()))
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud is empty".into()));
        }
        Ok(Self::build(points.iter().map(|p| [*p; 3]).collect()))
    }

    fn build(prims: Vec<[Vec3; 3]>) -> Self {
        let centroids: Vec<Vec3> = prims.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut bvh = Bvh {
            order: (0..prims.len()).collect(),
            prims,
            nodes: Vec::new(),
        };
        bvh.nodes.push(Node {
            bounds: Aabb::empty(),
            start: 0,
            count: bvh.prims.len(),
            left: 0,
        });
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let (start, count) = (bvh.nodes[ni].start, bvh.nodes[ni].count);
            let mut bounds = Aabb::empty();
            let mut cb = Aabb::empty();
            for &i in &bvh.order[start..start + count] {
                for v in &bvh.prims[i] {
                    bounds.grow(v);
                }
                cb.grow(&centroids[i]);
            }
            bvh.nodes[ni].bounds = bounds;
            if count <= LEAF_SIZE {
                continue;
            }
            let ext = cb.max - cb.min;
            let axis = ext.imax();
            if ext[axis] <= 0.0 {
                continue;
            }
            let mid = count / 2;
            bvh.order[start..start + count].select_nth_unstable_by(mid, |&a, &b| {
                centroids[a][axis].total_cmp(&centroids[b][axis])
            });
            let left = bvh.nodes.len();
            for (s, c) in [(start, mid), (start + mid, count - mid)] {
                bvh.nodes.push(Node {
                    bounds: Aabb::empty(),
                    start: s,
                    count: c,
                    left: 0,
                });
            }
            let node = &mut bvh.nodes[ni];
            node.left = left;
            node.count = 0;
            stack.push(left);
            stack.push(left + 1);
        }
        bvh
    }

    /// Distance from `p` to the nearest primitive, skipping primitive `skip`.
    pub fn nearest_excluding(&self, p: &Vec3, skip: Option<usize>) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds.dist2(p) >= best * best {
                continue;
            }
            if node.count > 0 {
                for &i in &self.order[node.start..node.start + node.count] {
                    if Some(i) == skip {
                        continue;
                    }
                    best = best.min(point_triangle_distance(p, &self.prims[i]));
                }
            } else {
                let (a, b) = (node.left, node.left + 1);
                let (da, db) = (self.nodes[a].bounds.dist2(p), self.nodes[b].bounds.dist2(p));
                // Visit the nearer child first.
                if da < db {
                    stack.push(b);
                    stack.push(a);
                } else {
                    stack.push(a);
                    stack.push(b);
                }
            }
        }
        best
    }

    pub fn nearest(&self, p: &Vec3) -> f64 {
        self.nearest_excluding(p, None)
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh(mesh: &TriMesh, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    if mesh.is_empty() {
        return Err(Error::Empty("cannot sample an empty mesh".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for i in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(i);
        cdf.push(acc);
    }
    Ok((0..n)
        .map(|_| {
            let x = rng.gen::<f64>() * acc;
            let i = cdf.partition_point(|&c| c < x).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(i);
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect())
}

/// Mean distance from each point to its nearest other point.
pub fn mean_spacing(points: &[Vec3]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Empty("need at least two points".into()));
    }
    let bvh = Bvh::from_points(points)?;
    let sum: f64 = (0..points.len())
        .into_par_iter()
        .map(|i| bvh.nearest_excluding(&points[i], Some(i)))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(sum / points.len() as f64)
}

/// Reference surface for chamfer evaluation.
#[derive(Debug, Clone)]
pub enum Reference<'a> {
    /// Mesh plus points sampled on it.
    Mesh(&'a TriMesh, &'a [Vec3]),
    Points(&'a [Vec3]),
}

/// Chamfer distances, multiplied by 1000.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferReport {
    pub accuracy: f64,
    pub completeness: f64,
    pub mean: f64,
    pub max_dist: f64,
}

/// Mean of the distances up to `max_dist`; `max_dist` itself when every
/// distance is clipped.
fn clipped_mean(distances: &[f64], max_dist: f64) -> f64 {
    let kept: Vec<f64> = distances.iter().copied().filter(|&d| d <= max_dist).collect();
    if kept.is_empty() {
        return max_dist;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn distances(bvh: &Bvh, points: &[Vec3]) -> Vec<f64> {
    points.par_iter().map(|p| bvh.nearest(p)).collect()
}

/// Two-way distance between a predicted mesh (with points sampled on it)
/// and the reference. Accuracy measures predicted points against the
/// reference, completeness the reverse. Points farther than `max_dist` are
/// ignored.
pub fn chamfer(
    pred_mesh: &TriMesh,
    pred_points: &[Vec3],
    reference: &Reference<'_>,
    max_dist: f64,
) -> Result<ChamferReport> {
    if pred_points.is_empty() {
        return Err(Error::Empty("no predicted points".into()));
    }
    let (ref_bvh, ref_points) = match reference {
        Reference::Mesh(m, pts) => (Bvh::from_mesh(m)?, *pts),
        Reference::Points(pts) => (Bvh::from_points(pts)?, *pts),
    };
    if ref_points.is_empty() {
        return Err(Error::Empty("no reference points".into()));
    }
    let pred_bvh = Bvh::from_mesh(pred_mesh)?;
    let accuracy = clipped_mean(&distances(&ref_bvh, pred_points), max_dist);
    let completeness = clipped_mean(&distances(&pred_bvh, ref_points), max_dist);
    Ok(ChamferReport {
        accuracy: 1000.0 * accuracy,
        completeness: 1000.0 * completeness,
        mean: 500.0 * (accuracy + completeness),
        max_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::extract_function;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad(z: f64, size: f64) -> TriMesh {
        TriMesh {
            vertices: vec![
                Vec3::new(-size, -size, z),
                Vec3::new(size, -size, z),
                Vec3::new(size, size, z),
                Vec3::new(-size, size, z),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn psnr_examples() {
        let a = Image::new(4, 4, [0.3; 3]);
        let m = Mask::new(4, 4, true);
        assert_eq!(psnr_masked(&a, &a, &m).unwrap(), PSNR_CAP);
        let zero = Image::new(4, 4, [0.0; 3]);
        let one = Image::new(4, 4, [1.0; 3]);
        assert_eq!(psnr_masked(&zero, &one, &m).unwrap(), 0.0);
        // Checkerboard: half the pixels off by 0.5 in every channel.
        let mut c = zero.clone();
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    c.set(x, y, [0.5; 3]);
                }
            }
        }
        let mse: f64 = 0.5 * 0.25;
        assert!((psnr_masked(&c, &zero, &m).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
        // Restricting the mask to agreeing pixels raises PSNR.
        let mut sub = Mask::new(4, 4, false);
        sub.data[1] = true;
        assert!(psnr_masked(&c, &zero, &sub).unwrap() > psnr_masked(&c, &zero, &m).unwrap());
        assert!(psnr_masked(&c, &zero, &Mask::new(4, 4, false)).is_err());
        assert!(psnr_masked(&c, &Image::new(3, 4, [0.0; 3]), &m).is_err());
    }

    fn brute(p: &Vec3, mesh: &TriMesh) -> f64 {
        (0..mesh.triangles.len())
            .map(|i| point_triangle_distance(p, &mesh.triangle(i)))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mesh = extract_function(
            |p| (p - Vec3::new(0.1, 0.0, 0.0)).norm() - 0.6,
            Vec3::repeat(-1.0),
            Vec3::repeat(1.0),
            17,
        );
        let bvh = Bvh::from_mesh(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            assert!((bvh.nearest(&p) - brute(&p, &mesh)).abs() < 1e-9);
        }
    }

    #[test]
    fn point_triangle_regions() {
        let t = [Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        assert!((point_triangle_distance(&Vec3::new(0.2, 0.2, 0.5), &t) - 0.5).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(-1.0, -1.0, 0.0), &t) - 2f64.sqrt()).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(1.0, 1.0, 0.0), &t) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(0.5, -2.0, 0.0), &t) - 2.0).abs() < 1e-15);
        let p = Vec3::new(0.3, 0.4, 2.0);
        assert!((point_triangle_distance(&p, &[Vec3::zeros(); 3]) - p.norm()).abs() < 1e-15);
    }

    #[test]
    fn parallel_planes() {
        let d = 0.01;
        let a = quad(0.0, 1.0);
        let b = quad(d, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pa = sample_mesh(&a, 2000, &mut rng).unwrap();
        let pb = sample_mesh(&b, 2000, &mut rng).unwrap();
        let r = chamfer(&a, &pa, &Reference::Mesh(&b, &pb), 1.0).unwrap();
        assert!((r.accuracy - 1000.0 * d).abs() < 1e-9);
        assert!((r.completeness - 1000.0 * d).abs() < 1e-9);
        assert!((r.mean - 1000.0 * d).abs() < 1e-9);
        // Clipping drops everything beyond the threshold.
        let far = quad(1.0, 1.0);
        let pf = sample_mesh(&far, 100, &mut rng).unwrap();
        let clipped = chamfer(&a, &pa, &Reference::Mesh(&far, &pf), 0.5).unwrap();
        assert_eq!(clipped.accuracy, 500.0);
    }

    #[test]
    fn self_distance_is_sampling_limited() {
        let mesh = extract_function(|p| p.norm() - 0.5, Vec3::repeat(-1.0), Vec3::repeat(1.0), 33);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_mesh(&mesh, 20_000, &mut rng).unwrap();
        let r = chamfer(&mesh, &pts, &Reference::Mesh(&mesh, &pts), 1.0).unwrap();
        assert!(r.accuracy < 1e-9);
        assert!(r.completeness < 1e-9);
        // Against the bare point cloud, accuracy is bounded by the spacing.
        let spacing = mean_spacing(&pts).unwrap();
        let r = chamfer(&mesh, &pts[..5000], &Reference::Points(&pts[5000..]), 1.0).unwrap();
        assert!(r.accuracy < 1000.0 * spacing * 2.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let a = quad(0.0, 1.0);
        assert!(chamfer(&a, &[], &Reference::Points(&[Vec3::zeros()]), 1.0).is_err());
        assert!(chamfer(&a, &[Vec3::zeros()], &Reference::Points(&[]), 1.0).is_err());
        assert!(Bvh::from_mesh(&TriMesh::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn mean_is_symmetric_and_triangle_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cloud = |n: usize, c: Vec3| -> Vec<Vec3> {
                (0..n).map(|_| c + Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))).collect()
            };
            let a = cloud(300, Vec3::zeros());
            let b = cloud(300, Vec3::new(0.1, 0.0, 0.0));
            let c = cloud(300, Vec3::new(0.2, 0.1, 0.0));
            let pc = |x: &[Vec3], y: &[Vec3]| -> f64 {
                let bx = Bvh::from_points(x).unwrap();
                let by = Bvh::from_points(y).unwrap();
                let acc: f64 = y.iter().map(|p| bx.nearest(p)).sum::<f64>() / y.len() as f64;
                let com: f64 = x.iter().map(|p| by.nearest(p)).sum::<f64>() / x.len() as f64;
                0.5 * (acc + com)
            };
            prop_assert!((pc(&a, &b) - pc(&b, &a)).abs() < 1e-12);
            let sampling = mean_spacing(&b).unwrap();
            prop_assert!(pc(&a, &c) <= pc(&a, &b) + pc(&b, &c) + 2.0 * sampling);
        }
    }
}
