//! Procedural indoor rooms with per-point semantic and instance labels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Cloud, Vec3};
use crate::error::{Error, Result};
use crate::seed::{self, Rng as SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    /// Horizontal plane at z = 0 spanning the room.
    Floor,
    /// Vertical planes on the room boundary, at most four.
    Wall,
    /// Axis-aligned box standing on the floor, random yaw; size ranges in meters.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Upright cylinder standing on the floor.
    Cylinder { radius: [f64; 2], height: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    /// Mean RGB color in [0,1].
    pub color: [f64; 3],
    /// Per-instance uniform color offset per channel.
    #[serde(default)]
    pub color_spread: f64,
    /// Number of instances; for walls at most 4, for floors at most 1.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room size along x and y and the wall height, meters.
    pub extent: [f64; 3],
    pub classes: Vec<ClassSpec>,
    pub points_per_object: usize,
    /// Sampling density of floor and walls, points per square meter.
    pub surface_density: f64,
    /// Std-dev of Gaussian position noise, meters.
    #[serde(default)]
    pub position_noise: f64,
    /// Std-dev of Gaussian per-point color noise.
    #[serde(default)]
    pub color_noise: f64,
    /// Edge of the square color tiles on floor and walls; 0 disables tiling.
    #[serde(default)]
    pub tile_size: f64,
    /// Color offset applied to every other tile.
    #[serde(default)]
    pub tile_contrast: f64,
    /// Free space kept between objects and to the walls, meters.
    #[serde(default = "default_clearance")]
    pub clearance: f64,
}

fn default_clearance() -> f64 {
    0.15
}

impl SceneSpec {
    /// Six-class room used by the experiments: floor, wall and four kinds of furniture.
    pub fn indoor(objects_per_class: usize) -> Self {
        let class = |name: &str, shape: Shape, color: [f64; 3], spread: f64, count: usize| ClassSpec {
            name: name.into(),
            shape,
            color,
            color_spread: spread,
            count,
        };
        SceneSpec {
            extent: [4.0, 3.5, 1.2],
            classes: vec![
                class("floor", Shape::Floor, [0.55, 0.45, 0.35], 0.05, 1),
                class("wall", Shape::Wall, [0.8, 0.8, 0.75], 0.05, 4),
                class(
                    "table",
                    Shape::Box { min: [0.6, 0.5, 0.65], max: [1.0, 0.8, 0.8] },
                    [0.6, 0.4, 0.25],
                    0.12,
                    objects_per_class,
                ),
                class(
                    "cabinet",
                    Shape::Box { min: [0.4, 0.35, 0.9], max: [0.6, 0.5, 1.1] },
                    [0.5, 0.5, 0.55],
                    0.12,
                    objects_per_class,
                ),
                class(
                    "chair",
                    Shape::Box { min: [0.35, 0.35, 0.4], max: [0.45, 0.45, 0.5] },
                    [0.35, 0.45, 0.6],
                    0.15,
                    objects_per_class,
                ),
                class(
                    "bin",
                    Shape::Cylinder { radius: [0.12, 0.2], height: [0.3, 0.5] },
                    [0.4, 0.55, 0.35],
                    0.15,
                    objects_per_class,
                ),
            ],
            points_per_object: 250,
            surface_density: 190.0,
            position_noise: 0.003,
            color_noise: 0.03,
            tile_size: 0.5,
            tile_contrast: 0.3,
            clearance: 0.15,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidParameter("a scene needs at least 2 classes".into()));
        }
        if self.classes.iter().map(|c| c.count).sum::<usize>() == 0 {
            return Err(Error::InvalidParameter("a scene needs at least 1 object".into()));
        }
        if !self.extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(Error::InvalidParameter("room extent must be positive".into()));
        }
        for c in &self.classes {
            match &c.shape {
                Shape::Floor if c.count > 1 => {
                    return Err(Error::Infeasible(format!("class `{}`: at most one floor", c.name)))
                }
                Shape::Wall if c.count > 4 => {
                    return Err(Error::Infeasible(format!("class `{}`: at most four walls", c.name)))
                }
                Shape::Box { min, max } => {
                    if (0..3).any(|a| !(min[a] > 0.0 && min[a] <= max[a])) {
                        return Err(Error::InvalidParameter(format!("class `{}`: bad box size range", c.name)));
                    }
                    if c.count > 0 && (min[0].max(min[1]) + 2.0 * self.clearance > self.extent[0].min(self.extent[1])) {
                        return Err(Error::Infeasible(format!("class `{}`: object larger than room", c.name)));
                    }
                }
                Shape::Cylinder { radius, height } => {
                    if !(radius[0] > 0.0 && radius[0] <= radius[1] && height[0] > 0.0 && height[0] <= height[1]) {
                        return Err(Error::InvalidParameter(format!("class `{}`: bad cylinder range", c.name)));
                    }
                    if c.count > 0 && 2.0 * radius[0] + 2.0 * self.clearance > self.extent[0].min(self.extent[1]) {
                        return Err(Error::Infeasible(format!("class `{}`: object larger than room", c.name)));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

struct Builder<'a> {
    spec: &'a SceneSpec,
    rng: SeededRng,
    noise: Option<Normal<f64>>,
    color_noise: Option<Normal<f64>>,
    positions: Vec<Vec3>,
    colors: Vec<Vec3>,
    semantic: Vec<u32>,
    instance: Vec<u32>,
    next_instance: u32,
}

impl Builder<'_> {
    fn push(&mut self, p: [f64; 3], color: [f64; 3], class: u32, instance: u32) {
        let mut p = p;
        if let Some(n) = self.noise {
            for v in &mut p {
                *v += n.sample(&mut self.rng);
            }
        }
        let mut c = color;
        if let Some(n) = self.color_noise {
            for v in &mut c {
                *v += n.sample(&mut self.rng);
            }
        }
        self.positions.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        self.colors.push([
            c[0].clamp(0.0, 1.0) as f32,
            c[1].clamp(0.0, 1.0) as f32,
            c[2].clamp(0.0, 1.0) as f32,
        ]);
        self.semantic.push(class);
        self.instance.push(instance);
    }

    fn instance_color(&mut self, class: &ClassSpec) -> [f64; 3] {
        let s = class.color_spread;
        let mut c = class.color;
        if s > 0.0 {
            for v in &mut c {
                *v = (*v + self.rng.random_range(-s..=s)).clamp(0.0, 1.0);
            }
        }
        c
    }

    /// Jittered-grid sample of a planar rectangle `origin + u*a + v*b`, u in [0,ua], v in [0,vb].
    fn rectangle(
        &mut self,
        origin: [f64; 3],
        a: [f64; 3],
        b: [f64; 3],
        lengths: [f64; 2],
        count: usize,
        mut color_at: impl FnMut(f64, f64) -> [f64; 3],
        class: u32,
        instance: u32,
    ) {
        if count == 0 {
            return;
        }
        let area = lengths[0] * lengths[1];
        let step = (area / count as f64).sqrt();
        let nu = ((lengths[0] / step).round() as usize).max(1);
        let nv = ((lengths[1] / step).round() as usize).max(1);
        let (du, dv) = (lengths[0] / nu as f64, lengths[1] / nv as f64);
        for i in 0..nu {
            for j in 0..nv {
                let u = (i as f64 + self.rng.random_range(0.2..0.8)) * du;
                let v = (j as f64 + self.rng.random_range(0.2..0.8)) * dv;
                let p = [
                    origin[0] + u * a[0] + v * b[0],
                    origin[1] + u * a[1] + v * b[1],
                    origin[2] + u * a[2] + v * b[2],
                ];
                let c = color_at(u, v);
                self.push(p, c, class, instance);
            }
        }
    }

    fn tiled(&mut self, base: [f64; 3]) -> impl FnMut(f64, f64) -> [f64; 3] {
        let (tile, contrast) = (self.spec.tile_size, self.spec.tile_contrast);
        move |u: f64, v: f64| {
            if tile <= 0.0 {
                return base;
            }
            let parity = ((u / tile).floor() as i64 + (v / tile).floor() as i64).rem_euclid(2);
            if parity == 0 {
                base
            } else {
                let sign = |x: f64| if x > 0.5 { -1.0 } else { 1.0 };
                [
                    base[0] + sign(base[0]) * contrast,
                    base[1] + sign(base[1]) * contrast,
                    base[2] + sign(base[2]) * contrast,
                ]
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Footprint {
    center: [f64; 2],
    radius: f64,
}

/// Generate a room: floor and walls on the boundary plus boxes and cylinders
/// standing on the floor, each object its own instance. Deterministic in `seed`.
pub fn generate_synthetic_scene(spec: &SceneSpec, scene_id: &str, seed: u64) -> Result<Cloud> {
    spec.validate()?;
    let noise = (spec.position_noise > 0.0)
        .then(|| Normal::new(0.0, spec.position_noise))
        .transpose()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let color_noise = (spec.color_noise > 0.0)
        .then(|| Normal::new(0.0, spec.color_noise))
        .transpose()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut b = Builder {
        spec,
        rng: seed::rng(seed),
        noise,
        color_noise,
        positions: Vec::new(),
        colors: Vec::new(),
        semantic: Vec::new(),
        instance: Vec::new(),
        next_instance: 0,
    };
    let [ex, ey, ez] = spec.extent;
    let surface_count = |area: f64| (area * spec.surface_density).round() as usize;

    // Surfaces first so their instance ids are the lowest.
    for (class_id, class) in spec.classes.iter().enumerate() {
        let class_id = class_id as u32;
        match class.shape {
            Shape::Floor => {
                for _ in 0..class.count {
                    let inst = b.next_instance;
                    b.next_instance += 1;
                    let base = b.instance_color(class);
                    let colors = b.tiled(base);
                    b.rectangle([0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [ex, ey], surface_count(ex * ey), colors, class_id, inst);
                }
            }
            Shape::Wall => {
                let walls: [([f64; 3], [f64; 3], f64); 4] = [
                    ([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], ey),
                    ([ex, 0.0, 0.0], [0.0, 1.0, 0.0], ey),
                    ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], ex),
                    ([0.0, ey, 0.0], [1.0, 0.0, 0.0], ex),
                ];
                for &(origin, dir, len) in walls.iter().take(class.count) {
                    let inst = b.next_instance;
                    b.next_instance += 1;
                    let base = b.instance_color(class);
                    let colors = b.tiled(base);
                    b.rectangle(origin, dir, [0.0, 0.0, 1.0], [len, ez], surface_count(len * ez), colors, class_id, inst);
                }
            }
            _ => {}
        }
    }

    let mut placed: Vec<Footprint> = Vec::new();
    for (class_id, class) in spec.classes.iter().enumerate() {
        let class_id = class_id as u32;
        for _ in 0..class.count {
            let (size, radius, height) = match class.shape {
                Shape::Floor | Shape::Wall => break,
                Shape::Box { min, max } => {
                    let mut s = [0.0; 3];
                    for a in 0..3 {
                        s[a] = if min[a] == max[a] { min[a] } else { b.rng.random_range(min[a]..max[a]) };
                    }
                    (Some(s), 0.5 * (s[0] * s[0] + s[1] * s[1]).sqrt(), s[2])
                }
                Shape::Cylinder { radius, height } => {
                    let r = if radius[0] == radius[1] { radius[0] } else { b.rng.random_range(radius[0]..radius[1]) };
                    let h = if height[0] == height[1] { height[0] } else { b.rng.random_range(height[0]..height[1]) };
                    (None, r, h)
                }
            };
            let margin = radius + spec.clearance;
            if 2.0 * margin > ex.min(ey) {
                return Err(Error::Infeasible(format!("object of class `{}` larger than room", class.name)));
            }
            let mut center = None;
            for _ in 0..2000 {
                let c = [b.rng.random_range(margin..ex - margin), b.rng.random_range(margin..ey - margin)];
                let free = placed.iter().all(|f| {
                    let d = ((f.center[0] - c[0]).powi(2) + (f.center[1] - c[1]).powi(2)).sqrt();
                    d >= f.radius + radius + spec.clearance
                });
                if free {
                    center = Some(c);
                    break;
                }
            }
            let center = center.ok_or_else(|| {
                Error::Infeasible(format!("could not place object of class `{}` in the room", class.name))
            })?;
            placed.push(Footprint { center, radius });

            let inst = b.next_instance;
            b.next_instance += 1;
            let color = b.instance_color(class);
            let total = spec.points_per_object;
            match size {
                Some(s) => {
                    let yaw: f64 = b.rng.random_range(0.0..std::f64::consts::PI);
                    let (sn, cs) = yaw.sin_cos();
                    let ax = [cs, sn, 0.0];
                    let ay = [-sn, cs, 0.0];
                    let corner = |u: f64, v: f64, z: f64| {
                        [center[0] + u * ax[0] + v * ay[0], center[1] + u * ax[1] + v * ay[1], z]
                    };
                    let (hx, hy, h) = (s[0] / 2.0, s[1] / 2.0, s[2]);
                    let top = s[0] * s[1];
                    let sides = 2.0 * (s[0] + s[1]) * h;
                    let per_area = total as f64 / (top + sides);
                    let n = |area: f64| (area * per_area).round() as usize;
                    let flat = |_: f64, _: f64| color;
                    b.rectangle(corner(-hx, -hy, h), ax, ay, [s[0], s[1]], n(top), flat, class_id, inst);
                    let neg = |v: [f64; 3]| [-v[0], -v[1], -v[2]];
                    let up = [0.0, 0.0, 1.0];
                    b.rectangle(corner(-hx, -hy, 0.0), ax, up, [s[0], h], n(s[0] * h), flat, class_id, inst);
                    b.rectangle(corner(hx, hy, 0.0), neg(ax), up, [s[0], h], n(s[0] * h), flat, class_id, inst);
                    b.rectangle(corner(hx, -hy, 0.0), ay, up, [s[1], h], n(s[1] * h), flat, class_id, inst);
                    b.rectangle(corner(-hx, hy, 0.0), neg(ay), up, [s[1], h], n(s[1] * h), flat, class_id, inst);
                }
                None => {
                    let (r, h) = (radius, height);
                    let top = std::f64::consts::PI * r * r;
                    let side = std::f64::consts::TAU * r * h;
                    let n_top = (total as f64 * top / (top + side)).round() as usize;
                    let n_side = total.saturating_sub(n_top);
                    // side: jittered grid in (angle, height)
                    let circ = std::f64::consts::TAU * r;
                    let step = (circ * h / n_side.max(1) as f64).sqrt();
                    let na = ((circ / step).round() as usize).max(3);
                    let nh = ((h / step).round() as usize).max(1);
                    for i in 0..na {
                        for j in 0..nh {
                            let t = (i as f64 + b.rng.random_range(0.2..0.8)) / na as f64 * std::f64::consts::TAU;
                            let z = (j as f64 + b.rng.random_range(0.2..0.8)) / nh as f64 * h;
                            b.push([center[0] + r * t.cos(), center[1] + r * t.sin(), z], color, class_id, inst);
                        }
                    }
                    for _ in 0..n_top {
                        let rr = r * b.rng.random::<f64>().sqrt();
                        let t = b.rng.random_range(0.0..std::f64::consts::TAU);
                        b.push([center[0] + rr * t.cos(), center[1] + rr * t.sin(), h], color, class_id, inst);
                    }
                }
            }
        }
    }

    if b.positions.is_empty() {
        return Err(Error::Infeasible("scene spec produced no points".into()));
    }
    Cloud::new(scene_id, b.positions, b.colors)?
        .with_semantic(b.semantic, Some(spec.class_names()))?
        .with_instances(b.instance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn floor_only_scene_is_all_floor() {
        let mut spec = SceneSpec::indoor(0);
        spec.classes[1].count = 0;
        spec.position_noise = 0.0;
        spec.color_noise = 0.0;
        let c = generate_synthetic_scene(&spec, "f", 1).unwrap();
        assert!(c.gt_semantic().unwrap().iter().all(|&s| s == 0));
        assert!(c.positions().iter().all(|p| p[2] == 0.0));
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SceneSpec::indoor(2);
        let a = generate_synthetic_scene(&spec, "s", 9).unwrap();
        assert_eq!(a, generate_synthetic_scene(&spec, "s", 9).unwrap());
        assert_ne!(a, generate_synthetic_scene(&spec, "s", 10).unwrap());
    }

    #[test]
    fn instance_count_matches_spec() {
        let mut spec = SceneSpec::indoor(0);
        spec.extent = [8.0, 7.0, 1.2];
        // 6 classes, 30 objects spread over the four furniture classes
        for (c, n) in spec.classes.iter_mut().skip(2).zip([8, 7, 8, 7]) {
            c.count = n;
        }
        let cloud = generate_synthetic_scene(&spec, "s", 3).unwrap();
        let ids: BTreeSet<u32> = cloud.gt_instance().unwrap().iter().copied().collect();
        assert_eq!(ids.len(), 30 + 5);
        assert_eq!(cloud.class_names().unwrap().len(), 6);
    }

    #[test]
    fn oversized_object_is_infeasible() {
        let mut spec = SceneSpec::indoor(1);
        spec.classes[2].shape = Shape::Box { min: [5.0, 5.0, 1.0], max: [5.0, 5.0, 1.0] };
        assert!(matches!(generate_synthetic_scene(&spec, "s", 1), Err(Error::Infeasible(_))));
        let mut crowded = SceneSpec::indoor(60);
        crowded.extent = [2.0, 2.0, 1.0];
        assert!(matches!(generate_synthetic_scene(&crowded, "s", 1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn single_class_spec_rejected() {
        let mut spec = SceneSpec::indoor(1);
        spec.classes.truncate(1);
        assert!(generate_synthetic_scene(&spec, "s", 1).is_err());
    }
}
