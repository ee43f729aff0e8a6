//! Desk-scale synthetic scenes built from planes, boxes and poles.

use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detector::TrainingPair;
use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    /// The first plane is the ground; the rest are vertical walls.
    pub planes: usize,
    pub boxes: usize,
    pub poles: usize,
    pub points_per_primitive: usize,
    pub noise_sigma: f64,
    /// Yaw of the pair transform is drawn from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Horizontal translation components are drawn from `±max_translation_m`.
    pub max_translation_m: f64,
    /// Side of the square footprint, metres.
    pub extent_m: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            planes: 8,
            boxes: 14,
            poles: 18,
            points_per_primitive: 150,
            noise_sigma: 0.02,
            max_rotation_deg: 10.0,
            max_translation_m: 1.0,
            extent_m: 40.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes + self.boxes + self.poles == 0 {
            return Err(Error::Config("scene needs at least one primitive".into()));
        }
        if self.points_per_primitive == 0 {
            return Err(Error::Config("points_per_primitive must be positive".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_translation_m", self.max_translation_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.extent_m > 0.0 && self.extent_m.is_finite()) {
            return Err(Error::Config("extent_m must be positive".into()));
        }
        Ok(())
    }

    pub fn point_count(&self) -> usize {
        (self.planes + self.boxes + self.poles) * self.points_per_primitive
    }
}

fn yaw(angle: f64) -> (f64, f64) {
    (angle.cos(), angle.sin())
}

fn ground(rng: &mut ChaCha8Rng, n: usize, half: f64, out: &mut Vec<Point3>) {
    for _ in 0..n {
        out.push(Point3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), 0.0));
    }
}

fn wall(rng: &mut ChaCha8Rng, n: usize, half: f64, out: &mut Vec<Point3>) {
    let (cx, cy) = (rng.gen_range(-half..half), rng.gen_range(-half..half));
    let (c, s) = yaw(rng.gen_range(0.0..TAU));
    let width = rng.gen_range(3.0..8.0);
    let height = rng.gen_range(2.0..4.0);
    for _ in 0..n {
        let u = rng.gen_range(-0.5..0.5) * width;
        let z = rng.gen_range(0.0..height);
        out.push(Point3::new(cx + c * u, cy + s * u, z));
    }
}

/// Four sides and the lid of a yawed box resting on the ground, sampled by area.
fn cuboid(rng: &mut ChaCha8Rng, n: usize, half: f64, out: &mut Vec<Point3>) {
    let (cx, cy) = (rng.gen_range(-half..half), rng.gen_range(-half..half));
    let (c, s) = yaw(rng.gen_range(0.0..TAU));
    let (a, b, h) = (rng.gen_range(0.8..2.5), rng.gen_range(0.8..2.5), rng.gen_range(0.8..2.0));
    let faces = [a * h, a * h, b * h, b * h, a * b];
    let total: f64 = faces.iter().sum();
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 0;
        while face < 4 && pick >= faces[face] {
            pick -= faces[face];
            face += 1;
        }
        let (u, v) = (rng.gen_range(-0.5..0.5), rng.gen_range(0.0..1.0));
        let (lx, ly, z) = match face {
            0 => (u * a, -0.5 * b, v * h),
            1 => (u * a, 0.5 * b, v * h),
            2 => (-0.5 * a, u * b, v * h),
            3 => (0.5 * a, u * b, v * h),
            _ => (u * a, (v - 0.5) * b, h),
        };
        out.push(Point3::new(cx + c * lx - s * ly, cy + s * lx + c * ly, z));
    }
}

fn pole(rng: &mut ChaCha8Rng, n: usize, half: f64, out: &mut Vec<Point3>) {
    let (cx, cy) = (rng.gen_range(-half..half), rng.gen_range(-half..half));
    let radius = rng.gen_range(0.1..0.25);
    let height = rng.gen_range(2.0..5.0);
    for _ in 0..n {
        let (c, s) = yaw(rng.gen_range(0.0..TAU));
        out.push(Point3::new(cx + radius * c, cy + radius * s, rng.gen_range(0.0..height)));
    }
}

/// Noise-free scene points, deterministic per seed.
pub fn gen_scene(cfg: &SceneConfig) -> Result<Vec<Point3>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 * cfg.extent_m;
    let n = cfg.points_per_primitive;
    let mut pts = Vec::with_capacity(cfg.point_count());
    for i in 0..cfg.planes {
        if i == 0 {
            ground(&mut rng, n, half, &mut pts);
        } else {
            wall(&mut rng, n, half, &mut pts);
        }
    }
    for _ in 0..cfg.boxes {
        cuboid(&mut rng, n, half, &mut pts);
    }
    for _ in 0..cfg.poles {
        pole(&mut rng, n, half, &mut pts);
    }
    Ok(pts)
}

fn noisy(points: &[Point3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    if sigma == 0.0 {
        return points.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    points
        .iter()
        .map(|p| p + Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
        .collect()
}

/// Two independently noised observations of one scene; the second is moved
/// by a random yaw and horizontal translation, returned as `truth`.
pub fn gen_synthetic_pair(cfg: &SceneConfig) -> Result<TrainingPair> {
    let scene = gen_scene(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let max_rot = cfg.max_rotation_deg.to_radians();
    let angle = if max_rot > 0.0 { rng.gen_range(-max_rot..=max_rot) } else { 0.0 };
    let m = cfg.max_translation_m;
    let mut shift = || if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let translation = Vector3::new(shift(), shift(), 0.0);
    let truth = RigidTransform::from_axis_angle(&Vector3::z(), angle, translation);

    let cloud_k = PointCloud::new(noisy(&scene, cfg.noise_sigma, &mut rng))?;
    let copy = PointCloud::new(noisy(&scene, cfg.noise_sigma, &mut rng))?;
    Ok(TrainingPair {
        cloud_l: copy.apply_transform(&truth),
        cloud_k,
        truth,
    })
}

/// `count` pairs with scene seeds `base.seed, base.seed + 1, …`.
pub fn gen_synthetic_pairs(base: &SceneConfig, count: usize) -> Result<Vec<TrainingPair>> {
    (0..count as u64)
        .map(|i| {
            gen_synthetic_pair(&SceneConfig {
                seed: base.seed.wrapping_add(i),
                ..base.clone()
            })
        })
        .collect()
}
