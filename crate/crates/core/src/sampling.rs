//! Top-k depth proposals and depth-gated, score-weighted voxel feature
//! aggregation.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{nearest_cell, project, CameraView, FEATURE_DOWNSAMPLE};
use crate::costvol::{DepthPlanes, FeatureMap, FeatureView, ProbabilityVolume};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Default number of proposals per pixel.
pub const DEFAULT_TOP_K: usize = 3;

/// Default half-width of the depth gate, in meters.
pub const DEFAULT_DELTA: f64 = 0.2;

/// Slack used for the inclusive gate boundary and for distance ties.
const TIE_EPS: f64 = 1e-9;

/// Below this the weighted-mean denominator is treated as zero.
const MIN_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub depth: f64,
    /// Renormalized score.
    pub score: f64,
    /// Plane the proposal came from; `None` for externally supplied depths.
    pub plane: Option<usize>,
}

/// `k` proposals per quarter-resolution pixel, ordered by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProposalSet {
    rows: usize,
    cols: usize,
    k: usize,
    proposals: Vec<Proposal>,
}

impl DepthProposalSet {
    /// Checks that every pixel holds `k` proposals with non-negative scores
    /// summing to one and distinct planes.
    pub fn new(rows: usize, cols: usize, k: usize, proposals: Vec<Proposal>) -> Result<Self> {
        if k == 0 || proposals.len() != rows * cols * k {
            return Err(Error::ShapeMismatch(format!(
                "{} proposals for {rows}x{cols} pixels with k={k}",
                proposals.len()
            )));
        }
        for (i, px) in proposals.chunks_exact(k).enumerate() {
            let sum: f64 = px.iter().map(|p| p.score).sum();
            if px.iter().any(|p| !(p.score >= 0.0) || p.depth.is_nan())
                || (sum - 1.0).abs() > ProbabilityVolume::SUM_TOLERANCE
            {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i}: scores do not form a distribution (sum {sum})"
                )));
            }
            for (a, pa) in px.iter().enumerate() {
                if pa.plane.is_some() && px[..a].iter().any(|pb| pb.plane == pa.plane) {
                    return Err(Error::InvalidArgument(format!("pixel {i}: repeated plane")));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            k,
            proposals,
        })
    }

    /// One proposal per pixel at the given depth with score 1. Pixels
    /// without a surface (depth 0) get an infinitely far proposal that
    /// never passes the gate.
    pub fn from_depth(depth: &Raster) -> Self {
        let proposals = depth
            .data()
            .iter()
            .map(|&d| Proposal {
                depth: if d > 0.0 { d } else { f64::INFINITY },
                score: 1.0,
                plane: None,
            })
            .collect();
        Self {
            rows: depth.rows(),
            cols: depth.cols(),
            k: 1,
            proposals,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, row: usize, col: usize) -> &[Proposal] {
        let i = (row * self.cols + col) * self.k;
        &self.proposals[i..i + self.k]
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }
}

/// Per-pixel top-`k` planes of `prob`, ties going to the lower plane index,
/// with scores renormalized over the selection.
pub fn sample_topk(prob: &ProbabilityVolume, planes: &DepthPlanes, k: usize) -> Result<DepthProposalSet> {
    let m = prob.planes();
    if m != planes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{m} probabilities for {} planes",
            planes.len()
        )));
    }
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("k={k} must lie in 1..={m}")));
    }
    let mut proposals = Vec::with_capacity(prob.rows() * prob.cols() * k);
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for px in prob.raster().data().chunks_exact(m) {
        order.clear();
        order.extend(0..m);
        order.sort_by(|&a, &b| px[b].total_cmp(&px[a]).then(a.cmp(&b)));
        let sel = &order[..k];
        let total: f64 = sel.iter().map(|&i| px[i]).sum();
        for &i in sel {
            let score = if total > 0.0 { px[i] / total } else { 1.0 / k as f64 };
            proposals.push(Proposal {
                depth: planes.depths()[i],
                score,
                plane: Some(i),
            });
        }
    }
    Ok(DepthProposalSet {
        rows: prob.rows(),
        cols: prob.cols(),
        k,
        proposals,
    })
}

/// Nearest proposal within `delta` of `depth`: its position and score.
/// Equidistant proposals resolve to the higher score, then the lower plane.
pub fn match_proposal(depth: f64, proposals: &[Proposal], delta: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, p) in proposals.iter().enumerate() {
        let dist = (depth - p.depth).abs();
        if !(dist <= delta + TIE_EPS) {
            continue;
        }
        best = match best {
            None => Some((j, dist)),
            Some((b, bd)) => {
                let pb = &proposals[b];
                let better = if (dist - bd).abs() <= TIE_EPS {
                    p.score > pb.score || (p.score == pb.score && p.plane < pb.plane)
                } else {
                    dist < bd
                };
                if better { Some((j, dist)) } else { Some((b, bd)) }
            }
        };
    }
    best.map(|(j, _)| (j, proposals[j].score))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gated {
    /// Matched score times the feature, or zeros.
    pub feature: Vec<f64>,
    /// 1 when a proposal matched, else 0.
    pub gate: f64,
    pub score: f64,
}

/// Depth gate and score weighting of one backprojected feature.
pub fn gate_and_weight(depth: f64, proposals: &[Proposal], feature: &[f64], delta: f64) -> Result<Gated> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} must be positive")));
    }
    Ok(match match_proposal(depth, proposals, delta) {
        Some((_, score)) => Gated {
            feature: feature.iter().map(|f| score * f).collect(),
            gate: 1.0,
            score,
        },
        None => Gated {
            feature: vec![0.0; feature.len()],
            gate: 0.0,
            score: 0.0,
        },
    })
}

/// Placement and resolution of the voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridConfig {
    pub dims: [usize; 3],
    /// World position of the grid's minimum corner.
    pub origin: Vector3<f64>,
    pub pitch: Vector3<f64>,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        Self {
            dims: [40, 40, 16],
            origin: Vector3::new(-3.2, -3.2, 0.0),
            pitch: Vector3::new(0.16, 0.16, 0.2),
        }
    }
}

impl VoxelGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("grid dims {:?} must be positive", self.dims)));
        }
        if self.pitch.iter().any(|&p| !(p > 0.0 && p.is_finite())) || !self.origin.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("grid pitch must be positive and origin finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index, x fastest.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + (x as f64 + 0.5) * self.pitch.x,
            self.origin.y + (y as f64 + 0.5) * self.pitch.y,
            self.origin.z + (z as f64 + 0.5) * self.pitch.z,
        )
    }

    pub fn center_of(&self, index: usize) -> Vector3<f64> {
        let [x, y, z] = self.coords(index);
        self.center(x, y, z)
    }
}

/// Aggregated features `v̂`, surface scores `s` and projection counts.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    config: VoxelGridConfig,
    channels: usize,
    features: Vec<f64>,
    scores: Vec<f64>,
    valid: Vec<u32>,
}

impl VoxelGrid {
    pub fn new(
        config: VoxelGridConfig,
        channels: usize,
        features: Vec<f64>,
        scores: Vec<f64>,
        valid: Vec<u32>,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.len();
        if features.len() != n * channels || scores.len() != n || valid.len() != n {
            return Err(Error::ShapeMismatch("voxel arrays do not match the grid".into()));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument("surface scores must lie in [0, 1]".into()));
        }
        Ok(Self {
            config,
            channels,
            features,
            scores,
            valid,
        })
    }

    pub fn config(&self) -> &VoxelGridConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `v̂` at a voxel.
    pub fn aggregated(&self, index: usize) -> &[f64] {
        &self.features[index * self.channels..(index + 1) * self.channels]
    }

    pub fn score(&self, index: usize) -> f64 {
        self.scores[index]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Number of views in which the voxel center projected inside the image.
    pub fn valid_projections(&self, index: usize) -> u32 {
        self.valid[index]
    }

    pub fn valid_counts(&self) -> &[u32] {
        &self.valid
    }

    /// Final feature `v = s·v̂`.
    pub fn feature(&self, index: usize) -> Vec<f64> {
        let s = self.scores[index];
        self.aggregated(index).iter().map(|f| s * f).collect()
    }
}

/// A descriptor grid with its camera and depth proposals.
#[derive(Debug, Clone, Copy)]
pub struct VolumeView<'a> {
    pub features: &'a FeatureMap,
    pub view: &'a CameraView,
    pub proposals: &'a DepthProposalSet,
}

fn check_view(features: &FeatureMap, view: &CameraView, channels: usize) -> Result<()> {
    if features.channels() != channels {
        return Err(Error::ShapeMismatch("views disagree on feature channels".into()));
    }
    if view.scaled_dims(FEATURE_DOWNSAMPLE) != (features.cols(), features.rows()) {
        return Err(Error::ShapeMismatch("feature map does not match its camera".into()));
    }
    Ok(())
}

/// Per-voxel accumulation shared by both volume builders. `visit` returns
/// `(gate, score)` for a view whose projection landed on `(row, col)` at
/// camera depth `depth`.
fn accumulate<F>(config: &VoxelGridConfig, views: &[(&FeatureMap, &CameraView)], visit: F) -> (Vec<f64>, Vec<f64>, Vec<u32>)
where
    F: Fn(usize, usize, usize, f64) -> (f64, f64) + Sync,
{
    let channels = views[0].0.channels();
    let per_voxel: Vec<(Vec<f64>, f64, u32)> = (0..config.len())
        .into_par_iter()
        .map(|idx| {
            let p = config.center_of(idx);
            let mut num = vec![0.0; channels];
            let (mut gates, mut weight, mut valid) = (0.0, 0.0, 0u32);
            for (i, (features, view)) in views.iter().enumerate() {
                let proj = project(&p, view, FEATURE_DOWNSAMPLE);
                if !proj.valid {
                    continue;
                }
                valid += 1;
                let (col, row) = nearest_cell(proj.u, proj.v);
                let (g, score) = visit(i, row, col, proj.depth);
                if g == 0.0 {
                    continue;
                }
                for (n, f) in num.iter_mut().zip(features.at(row, col)) {
                    *n += score * f;
                }
                gates += g;
                weight += score;
            }
            if weight >= MIN_WEIGHT {
                for n in num.iter_mut() {
                    *n /= weight;
                }
            } else {
                num.fill(0.0);
            }
            let s = if gates > 0.0 { (weight / gates).clamp(0.0, 1.0) } else { 0.0 };
            (num, s, valid)
        })
        .collect();
    let mut features = Vec::with_capacity(config.len() * channels);
    let mut scores = Vec::with_capacity(config.len());
    let mut valid = Vec::with_capacity(config.len());
    for (f, s, v) in per_voxel {
        features.extend(f);
        scores.push(s);
        valid.push(v);
    }
    (features, scores, valid)
}

/// Depth-aware volume: features gated by proposal depth and weighted by
/// proposal score, plus the surface score.
pub fn build_volume(views: &[VolumeView<'_>], config: &VoxelGridConfig, delta: f64) -> Result<VoxelGrid> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("volume needs at least one view".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} must be positive")));
    }
    let channels = views[0].features.channels();
    for v in views {
        check_view(v.features, v.view, channels)?;
        if (v.proposals.rows(), v.proposals.cols()) != (v.features.rows(), v.features.cols()) {
            return Err(Error::ShapeMismatch("proposals do not match the feature map".into()));
        }
    }
    let pairs: Vec<_> = views.iter().map(|v| (v.features, v.view)).collect();
    let (features, scores, valid) = accumulate(config, &pairs, |i, row, col, depth| {
        match match_proposal(depth, views[i].proposals.at(row, col), delta) {
            Some((_, score)) => (1.0, score),
            None => (0.0, 0.0),
        }
    });
    VoxelGrid::new(*config, channels, features, scores, valid)
}

/// Plain average of every valid backprojected feature, with `s = 1`
/// wherever at least one projection is valid.
pub fn build_volume_vanilla(views: &[FeatureView<'_>], config: &VoxelGridConfig) -> Result<VoxelGrid> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("volume needs at least one view".into()));
    }
    let channels = views[0].features.channels();
    for v in views {
        check_view(v.features, v.view, channels)?;
    }
    let pairs: Vec<_> = views.iter().map(|v| (v.features, v.view)).collect();
    let (features, scores, valid) = accumulate(config, &pairs, |_, _, _, _| (1.0, 1.0));
    VoxelGrid::new(*config, channels, features, scores, valid)
}
