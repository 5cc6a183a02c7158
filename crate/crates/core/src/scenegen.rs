//! Procedural rooms with textured axis-aligned boxes, and an exact ray
//! caster producing albedo images, camera-frame depth and box annotations.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{backproject_unchecked, CameraView, Intrinsics, Pose, FEATURE_DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Value-noise lattice spacing on every face, in meters.
const TEXTURE_CELL: f64 = 0.1;
/// Gain applied to the noise around mid-gray before clamping.
const TEXTURE_CONTRAST: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(Error::InvalidArgument(format!(
                "degenerate box {min:?} .. {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    pub fn inflated(&self, margin: f64) -> Aabb {
        let m = Vector3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    /// Strict containment of `other` in the interior of `self`.
    pub fn strictly_contains(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.min[a] && other.max[a] < self.max[a])
    }

    /// Euclidean distance from `p` to the box boundary.
    pub fn boundary_distance(&self, p: &Vector3<f64>) -> f64 {
        if self.contains(p) {
            (0..3)
                .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
                .fold(f64::INFINITY, f64::min)
        } else {
            let d = Vector3::from_fn(|a, _| {
                (self.min[a] - p[a]).max(0.0).max(p[a] - self.max[a])
            });
            d.norm()
        }
    }

    /// Entry/exit parameters of a ray against the slabs, with the axis that
    /// produced each.
    fn slab(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, f64, usize)> {
        let (mut t_near, mut near_axis) = (f64::NEG_INFINITY, 0);
        let (mut t_far, mut far_axis) = (f64::INFINITY, 0);
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let t1 = (self.min[a] - o[a]) * inv;
            let t2 = (self.max[a] - o[a]) * inv;
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                near_axis = a;
            }
            if hi < t_far {
                t_far = hi;
                far_axis = a;
            }
        }
        (t_near <= t_far).then_some((t_near, near_axis, t_far, far_axis))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub bounds: Aabb,
    pub texture_seed: u64,
    pub base_color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub room: Aabb,
    /// When false the room bounds only constrain placement; rays that miss
    /// every box return the background.
    pub walls: bool,
    pub wall_texture_seed: u64,
    pub wall_color: [f64; 3],
    pub background: [f64; 3],
    pub boxes: Vec<SceneBox>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            Aabb::new(b.bounds.min, b.bounds.max)?;
            if !self.room.strictly_contains(&b.bounds) {
                return Err(Error::InvalidArgument(format!("box {i} leaves the room")));
            }
        }
        Ok(())
    }

    /// Center of the boxes' centers, or of the room when empty.
    pub fn centroid(&self) -> Vector3<f64> {
        if self.boxes.is_empty() {
            return self.room.center();
        }
        let sum: Vector3<f64> = self.boxes.iter().map(|b| b.bounds.center()).sum();
        sum / self.boxes.len() as f64
    }

    pub fn box_bounds(&self) -> Vec<Aabb> {
        self.boxes.iter().map(|b| b.bounds).collect()
    }

    /// Distance from `p` to the closest surface (box faces and, if present,
    /// walls).
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let walls = if self.walls {
            self.room.boundary_distance(p)
        } else {
            f64::INFINITY
        };
        self.boxes
            .iter()
            .map(|b| b.bounds.boundary_distance(p))
            .fold(walls, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Camera-frame depth, 0 where nothing was hit.
    pub depth: Raster,
    /// Albedo in `[0, 1]`.
    pub image: Raster,
    pub boxes: Vec<Aabb>,
}

impl GroundTruth {
    pub fn mask(&self) -> Vec<bool> {
        self.depth.data().iter().map(|&d| d > 0.0).collect()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, s: f64, t: f64) -> f64 {
    let (fs, ft) = (s.floor(), t.floor());
    let (i, j) = (fs as i64, ft as i64);
    let smooth = |x: f64| x * x * (3.0 - 2.0 * x);
    let (a, b) = (smooth(s - fs), smooth(t - ft));
    let v00 = lattice(seed, i, j);
    let v10 = lattice(seed, i + 1, j);
    let v01 = lattice(seed, i, j + 1);
    let v11 = lattice(seed, i + 1, j + 1);
    let top = v00 + (v10 - v00) * a;
    let bottom = v01 + (v11 - v01) * a;
    top + (bottom - top) * b
}

/// Albedo of the face with normal along `axis` at world point `p`.
fn texture(seed: u64, axis: usize, side: usize, base: &[f64; 3], p: &Vector3<f64>) -> [f64; 3] {
    let face_seed = splitmix(seed ^ (axis as u64 * 2 + side as u64 + 1));
    let (s, t) = match axis {
        0 => (p.y, p.z),
        1 => (p.x, p.z),
        _ => (p.x, p.y),
    };
    let mut out = [0.0; 3];
    for c in 0..3 {
        let seed_c = face_seed ^ (0x51 * (c as u64 + 1));
        let n = value_noise(seed_c, s / TEXTURE_CELL, t / TEXTURE_CELL);
        let n = ((n - 0.5) * TEXTURE_CONTRAST + 0.5).clamp(0.0, 1.0);
        out[c] = (0.4 * base[c] + 0.6 * n).clamp(0.0, 1.0);
    }
    out
}

/// Room used by [`generate_scene`].
pub fn default_room() -> Aabb {
    Aabb {
        min: Vector3::new(-2.5, -2.5, 0.0),
        max: Vector3::new(2.5, 2.5, 2.6),
    }
}

/// Region in which generated boxes are placed.
pub fn object_region() -> Aabb {
    Aabb {
        min: Vector3::new(-1.1, -1.1, 0.3),
        max: Vector3::new(1.1, 1.1, 1.7),
    }
}

/// Deterministic room with `n_boxes` disjoint textured boxes.
pub fn generate_scene(seed: u64, n_boxes: usize) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = object_region();
    let gap = 0.6;
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n_boxes);
    let mut attempts = 0;
    let mut stalled = 0;
    while boxes.len() < n_boxes {
        attempts += 1;
        stalled += 1;
        if attempts > 20_000 {
            return Err(Error::Placement(format!(
                "could not fit {n_boxes} disjoint boxes"
            )));
        }
        let size = Vector3::new(
            rng.gen_range(0.4..0.8),
            rng.gen_range(0.4..0.8),
            rng.gen_range(0.35..0.7),
        );
        let min = Vector3::new(
            rng.gen_range(region.min.x..region.max.x - size.x),
            rng.gen_range(region.min.y..region.max.y - size.y),
            rng.gen_range(region.min.z..region.max.z - size.z),
        );
        let candidate = Aabb {
            min,
            max: min + size,
        };
        if boxes
            .iter()
            .any(|b| b.bounds.inflated(gap).intersects(&candidate))
        {
            // earlier boxes may leave no room; start over
            if stalled > 500 {
                boxes.clear();
                stalled = 0;
            }
            continue;
        }
        stalled = 0;
        boxes.push(SceneBox {
            bounds: candidate,
            texture_seed: rng.gen(),
            base_color: [
                rng.gen_range(0.35..0.95),
                rng.gen_range(0.35..0.95),
                rng.gen_range(0.35..0.95),
            ],
        });
    }
    let wall_texture_seed = rng.gen();
    Ok(SceneSpec {
        room: default_room(),
        walls: true,
        wall_texture_seed,
        wall_color: [0.8, 0.75, 0.7],
        background: [0.0, 0.0, 0.0],
        boxes,
    })
}

struct Hit {
    t: f64,
    color: [f64; 3],
    /// Box index, or `None` for a wall.
    owner: Option<usize>,
}

fn trace(scene: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<(f64, usize, usize, Option<usize>)> = None;
    if scene.walls {
        if let Some((_, _, t_far, axis)) = scene.room.slab(o, d) {
            if t_far > 0.0 && t_far.is_finite() {
                let side = usize::from(d[axis] > 0.0);
                best = Some((t_far, axis, side, None));
            }
        }
    }
    for (i, b) in scene.boxes.iter().enumerate() {
        if let Some((t_near, axis, _, _)) = b.bounds.slab(o, d) {
            if t_near > 0.0 && best.is_none_or(|(t, ..)| t_near < t) {
                let side = usize::from(d[axis] < 0.0);
                best = Some((t_near, axis, side, Some(i)));
            }
        }
    }
    best.map(|(t, axis, side, owner)| {
        let p = o + d * t;
        let color = match owner {
            Some(i) => {
                let b = &scene.boxes[i];
                texture(b.texture_seed, axis, side, &b.base_color, &p)
            }
            None => texture(scene.wall_texture_seed, axis, side, &scene.wall_color, &p),
        };
        Hit { t, color, owner }
    })
}

fn check_camera(scene: &SceneSpec, pose: &Pose) -> Result<()> {
    let c = pose.center();
    if let Some(index) = scene.boxes.iter().position(|b| b.bounds.contains(&c)) {
        return Err(Error::CameraInsideBox {
            index,
            x: c.x,
            y: c.y,
            z: c.z,
        });
    }
    if scene.walls && !scene.room.contains(&c) {
        return Err(Error::InvalidArgument(format!(
            "camera at ({:.3}, {:.3}, {:.3}) is outside the room",
            c.x, c.y, c.z
        )));
    }
    Ok(())
}

fn cast(scene: &SceneSpec, k: &Intrinsics, pose: &Pose, width: usize, height: usize) -> GroundTruth {
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|v| {
            let mut depth = vec![0.0; width];
            let mut color = vec![0.0; width * 3];
            for u in 0..width {
                let ray = backproject_unchecked(u as f64, v as f64, k, pose);
                let rgb = match trace(scene, &ray.origin, &ray.direction) {
                    Some(hit) => {
                        depth[u] = hit.t * ray.axis_cosine;
                        hit.color
                    }
                    None => scene.background,
                };
                color[u * 3..u * 3 + 3].copy_from_slice(&rgb);
            }
            (depth, color)
        })
        .collect();
    let mut depth = Vec::with_capacity(width * height);
    let mut image = Vec::with_capacity(width * height * 3);
    for (d, c) in rows {
        depth.extend(d);
        image.extend(c);
    }
    GroundTruth {
        depth: Raster::from_vec(height, width, 1, depth).expect("sized"),
        image: Raster::from_vec(height, width, 3, image).expect("sized"),
        boxes: scene.box_bounds(),
    }
}

/// Ray casts `view` at full resolution.
pub fn raycast(scene: &SceneSpec, view: &CameraView) -> Result<GroundTruth> {
    raycast_scaled(scene, view, 1)
}

/// Ray casts the pixel centers of `view` downsampled by `scale`, so the
/// result lines up with descriptor grids at that scale.
pub fn raycast_scaled(scene: &SceneSpec, view: &CameraView, scale: usize) -> Result<GroundTruth> {
    if scale == 0 || !view.width.is_multiple_of(scale) || !view.height.is_multiple_of(scale) {
        return Err(Error::InvalidArgument(format!("bad raycast scale {scale}")));
    }
    check_camera(scene, &view.pose)?;
    let (w, h) = view.scaled_dims(scale);
    Ok(cast(scene, &view.scaled_intrinsics(scale), &view.pose, w, h))
}

/// Pixels of `view` at quarter resolution whose first hit lies on each box.
pub fn box_coverage(scene: &SceneSpec, view: &CameraView) -> Vec<usize> {
    let k = view.scaled_intrinsics(FEATURE_DOWNSAMPLE);
    let (w, h) = view.scaled_dims(FEATURE_DOWNSAMPLE);
    let mut counts = vec![0; scene.boxes.len()];
    for v in 0..h {
        for u in 0..w {
            let ray = backproject_unchecked(u as f64, v as f64, &k, &view.pose);
            if let Some(Hit { owner: Some(i), .. }) = trace(scene, &ray.origin, &ray.direction) {
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Image size and focal length of generated trajectories.
#[derive(Debug, Clone, Copy)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            focal: 240.0,
        }
    }
}

impl CameraModel {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0 - 0.5,
            cy: self.height as f64 / 2.0 - 0.5,
        }
    }
}

const ARC_RADIUS: f64 = 2.0;
/// Distance between consecutive cameras when the arc is not crowded.
const MAX_SPACING: f64 = 0.1;
const MAX_SPAN: f64 = 0.95;
const MIN_BASELINE: f64 = 0.05;
/// Valid arc placements compared by box visibility.
const ARC_CANDIDATES: usize = 12;

pub fn make_trajectory(scene: &SceneSpec, n: usize, seed: u64) -> Result<Vec<CameraView>> {
    make_trajectory_with(scene, n, seed, &CameraModel::default())
}

/// `n` cameras on a horizontal arc around the scene centroid, all looking at
/// it. Consecutive cameras are evenly spaced so every pairwise baseline lies
/// in `[0.05, 1]` m.
pub fn make_trajectory_with(
    scene: &SceneSpec,
    n: usize,
    seed: u64,
    model: &CameraModel,
) -> Result<Vec<CameraView>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 views, got {n}")));
    }
    let spacing = MAX_SPACING.min(MAX_SPAN / (n - 1) as f64);
    if spacing < MIN_BASELINE {
        return Err(Error::Placement(format!(
            "{n} views do not fit on the arc with baselines >= {MIN_BASELINE} m"
        )));
    }
    let target = scene.centroid();
    let height = (target.z + 0.7).min(scene.room.max.z - 0.3);
    let step = 2.0 * (spacing / (2.0 * ARC_RADIUS)).asin();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_out = scene.room.inflated(-0.15);
    let mut best: Option<(usize, Vec<CameraView>)> = None;
    let mut found = 0;
    'attempt: for _ in 0..64 {
        let start: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut views = Vec::with_capacity(n);
        for i in 0..n {
            let theta = start + (i as f64 - (n - 1) as f64 / 2.0) * step;
            let eye = Vector3::new(
                target.x + ARC_RADIUS * theta.cos(),
                target.y + ARC_RADIUS * theta.sin(),
                height,
            );
            if !keep_out.contains(&eye)
                || scene.boxes.iter().any(|b| b.bounds.inflated(0.15).contains(&eye))
            {
                continue 'attempt;
            }
            let pose = Pose::look_at(eye, target, Vector3::z())?;
            views.push(CameraView::new(model.intrinsics(), pose, model.width, model.height)?);
        }
        // Prefer arcs from which the least visible box shows the most.
        let seen = box_coverage(scene, &views[n / 2]).into_iter().min().unwrap_or(0);
        if best.as_ref().is_none_or(|(b, _)| seen > *b) {
            best = Some((seen, views));
        }
        found += 1;
        if found == ARC_CANDIDATES || scene.boxes.is_empty() {
            break;
        }
    }
    if let Some((_, views)) = best {
        return Ok(views);
    }
    Err(Error::Placement("room too small for the camera arc".into()))
}
