//! Axis-aligned boxes from thresholded surface scores, and their overlap.

use std::collections::VecDeque;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::sampling::VoxelGrid;
use crate::scenegen::Aabb;

/// Box with center, size `(w, h, l)` along x, y, z, yaw about z and a score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    /// Always 0 for boxes produced here.
    pub yaw: f64,
    pub score: f64,
}

impl Box3D {
    pub fn from_aabb(b: &Aabb, score: f64) -> Self {
        Self {
            center: b.center(),
            size: b.size(),
            yaw: 0.0,
            score,
        }
    }

    pub fn min(&self) -> Vector3<f64> {
        self.center - self.size * 0.5
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.size * 0.5
    }

    pub fn volume(&self) -> f64 {
        self.size.product()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| lo[a] <= p[a] && p[a] <= hi[a])
    }
}

/// A 26-connected set of above-threshold voxels. `seed` is the smallest
/// linear voxel index in the set.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub seed: usize,
    pub voxels: Vec<usize>,
}

/// Labels voxels with `s >= ratio * max(s)` into 26-connected components,
/// ordered by seed. A grid whose scores are all zero has none.
pub fn components(grid: &VoxelGrid, ratio: f64) -> Result<Vec<Component>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold ratio {ratio} must lie in (0, 1]")));
    }
    let cfg = grid.config();
    let peak = grid.scores().iter().fold(0.0f64, |a, &s| a.max(s));
    if peak <= 0.0 {
        return Ok(Vec::new());
    }
    let cut = ratio * peak;
    let on: Vec<bool> = grid.scores().iter().map(|&s| s >= cut).collect();
    let mut seen = vec![false; on.len()];
    let [nx, ny, nz] = cfg.dims;
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..on.len() {
        if !on[seed] || seen[seed] {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let mut voxels = Vec::new();
        while let Some(v) = queue.pop_front() {
            voxels.push(v);
            let [x, y, z] = cfg.coords(v);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                            continue;
                        }
                        let q = cfg.index(qx as usize, qy as usize, qz as usize);
                        if on[q] && !seen[q] {
                            seen[q] = true;
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        out.push(Component { seed, voxels });
    }
    Ok(out)
}

/// Boxes around components of at least `min_voxels` voxels: the bounds of
/// member voxel centers grown by half a pitch, scored by mean `s`. Sorted by
/// descending score, then by component seed.
pub fn extract_boxes(grid: &VoxelGrid, ratio: f64, min_voxels: usize) -> Result<Vec<Box3D>> {
    let cfg = grid.config();
    let mut scored: Vec<(usize, Box3D)> = components(grid, ratio)?
        .into_iter()
        .filter(|c| c.voxels.len() >= min_voxels.max(1))
        .map(|c| {
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            let mut sum = 0.0;
            for &v in &c.voxels {
                let p = cfg.center_of(v);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
                sum += grid.score(v);
            }
            let half = cfg.pitch * 0.5;
            let (lo, hi) = (lo - half, hi + half);
            let b = Box3D {
                center: (lo + hi) * 0.5,
                size: hi - lo,
                yaw: 0.0,
                score: sum / c.voxels.len() as f64,
            };
            (c.seed, b)
        })
        .collect();
    scored.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(_, b)| b).collect())
}

/// Intersection over union of two axis-aligned boxes; yaw is ignored.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let lo = a.min().sup(&b.min());
    let hi = a.max().inf(&b.max());
    let overlap = (hi - lo).map(|e| e.max(0.0)).product();
    let union = a.volume() + b.volume() - overlap;
    if union > 0.0 {
        (overlap / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}
