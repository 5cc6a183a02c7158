//! Plane-sweep cost volumes over quarter-resolution descriptors, their
//! reduction to per-pixel depth distributions, and depth regression.

use rayon::prelude::*;

use crate::camera::{homography_warp, relative_pose, CameraView, FEATURE_DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Descriptor channels: mean R, G, B, Sobel-x, Sobel-y, local luminance std.
pub const FEATURE_CHANNELS: usize = 6;

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Default cost for (pixel, plane) pairs seen by fewer than two views.
pub const DEFAULT_COST_PENALTY: f64 = 10.0;

/// Quarter-resolution descriptor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Raster);

impl FeatureMap {
    pub fn new(raster: Raster) -> Result<Self> {
        if raster.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self(raster))
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.0.pixel(row, col)
    }

    /// Bilinear sample at pixel-center coordinates; out-of-grid neighbors
    /// clamp to the border cell.
    fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        let (w, h) = (self.cols() as i64, self.rows() as i64);
        // warps landing within SNAP of a cell center read that cell exactly
        const SNAP: f64 = 1e-9;
        let snap = |x: f64| {
            let r = x.round();
            if (x - r).abs() < SNAP { r } else { x }
        };
        let (u, v) = (snap(u), snap(v));
        let (x0, y0) = (u.floor(), v.floor());
        let (ax, ay) = (u - x0, v - y0);
        let clamp = |x: i64, hi: i64| x.clamp(0, hi - 1) as usize;
        let (xa, xb) = (clamp(x0 as i64, w), clamp(x0 as i64 + 1, w));
        let (ya, yb) = (clamp(y0 as i64, h), clamp(y0 as i64 + 1, h));
        let (p00, p10) = (self.at(ya, xa), self.at(ya, xb));
        let (p01, p11) = (self.at(yb, xa), self.at(yb, xb));
        for c in 0..out.len() {
            let top = p00[c] + (p10[c] - p00[c]) * ax;
            let bottom = p01[c] + (p11[c] - p01[c]) * ax;
            out[c] = top + (bottom - top) * ay;
        }
    }
}

fn luminance(rgb: &[f64]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Deterministic 6-channel descriptor at quarter resolution.
pub fn extract_features(image: &Raster) -> Result<FeatureMap> {
    if image.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected an RGB image, got {} channels",
            image.channels()
        )));
    }
    let color = image.downsample_mean(FEATURE_DOWNSAMPLE)?;
    let (rows, cols) = (color.rows(), color.cols());
    let lum: Vec<f64> = color.data().chunks_exact(3).map(luminance).collect();
    let at = |r: i64, c: i64| {
        let r = r.clamp(0, rows as i64 - 1) as usize;
        let c = c.clamp(0, cols as i64 - 1) as usize;
        lum[r * cols + c]
    };
    let mut out = Raster::zeros(rows, cols, FEATURE_CHANNELS);
    for r in 0..rows {
        for c in 0..cols {
            let (ri, ci) = (r as i64, c as i64);
            let right = at(ri - 1, ci + 1) + 2.0 * at(ri, ci + 1) + at(ri + 1, ci + 1);
            let left = at(ri - 1, ci - 1) + 2.0 * at(ri, ci - 1) + at(ri + 1, ci - 1);
            let below = at(ri + 1, ci - 1) + 2.0 * at(ri + 1, ci) + at(ri + 1, ci + 1);
            let above = at(ri - 1, ci - 1) + 2.0 * at(ri - 1, ci) + at(ri - 1, ci + 1);
            let gx = (right - left) / 8.0;
            let gy = (below - above) / 8.0;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let l = at(ri + dr, ci + dc);
                    sum += l;
                    sq += l * l;
                }
            }
            let mean = sum / 9.0;
            let std = (sq / 9.0 - mean * mean).max(0.0).sqrt();
            let px = out.pixel_mut(r, c);
            px[..3].copy_from_slice(color.pixel(r, c));
            px[3] = gx;
            px[4] = gy;
            px[5] = std;
        }
    }
    FeatureMap::new(out)
}

/// Uniformly spaced fronto-parallel plane depths.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPlanes {
    depths: Vec<f64>,
}

impl DepthPlanes {
    pub fn uniform(min: f64, max: f64, count: usize) -> Result<Self> {
        if count < 2 || !(min > 0.0) || !(max > min) {
            return Err(Error::InvalidArgument(format!(
                "need >= 2 planes over a positive range, got {count} over [{min}, {max}]"
            )));
        }
        let step = (max - min) / (count - 1) as f64;
        let depths = (0..count)
            .map(|m| if m + 1 == count { max } else { min + step * m as f64 })
            .collect();
        Ok(Self { depths })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.depths[1] - self.depths[0]
    }

    pub fn min(&self) -> f64 {
        self.depths[0]
    }

    pub fn max(&self) -> f64 {
        self.depths[self.depths.len() - 1]
    }

    /// Index of the plane closest to `depth` (lower index on ties).
    pub fn nearest(&self, depth: f64) -> usize {
        let mut best = 0;
        for (m, d) in self.depths.iter().enumerate() {
            if (d - depth).abs() < (self.depths[best] - depth).abs() {
                best = m;
            }
        }
        best
    }
}

/// Indices of the `n` views whose centers are closest to `target`, skipping
/// `exclude`; ties go to the lower index.
fn nearest_by_center(
    views: &[CameraView],
    target: &nalgebra::Vector3<f64>,
    exclude: Option<usize>,
    n: usize,
) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = views
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, v)| ((v.center() - target).norm(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n).map(|(_, i)| i).collect()
}

pub fn select_source_views(views: &[CameraView], reference: usize, n: usize) -> Result<Vec<usize>> {
    if reference >= views.len() || n >= views.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {n} sources for view {reference} of {}",
            views.len()
        )));
    }
    Ok(nearest_by_center(views, &views[reference].center(), Some(reference), n))
}

/// `n` views nearest to an arbitrary camera (which need not be in `views`).
pub(crate) fn nearest_views(views: &[CameraView], target: &CameraView, n: usize) -> Vec<usize> {
    nearest_by_center(views, &target.center(), None, n)
}

/// A descriptor grid together with the camera that produced it.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a> {
    pub features: &'a FeatureMap,
    pub view: &'a CameraView,
}

/// Per-(pixel, plane, channel) variance costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    rows: usize,
    cols: usize,
    planes: usize,
    channels: usize,
    cost: Vec<f64>,
    valid_views: Vec<u32>,
}

impl CostVolume {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cost(&self, row: usize, col: usize, plane: usize) -> &[f64] {
        let i = ((row * self.cols + col) * self.planes + plane) * self.channels;
        &self.cost[i..i + self.channels]
    }

    pub fn cost_mut(&mut self, row: usize, col: usize, plane: usize) -> &mut [f64] {
        let i = ((row * self.cols + col) * self.planes + plane) * self.channels;
        &mut self.cost[i..i + self.channels]
    }

    /// Number of views (reference included) whose warp was valid.
    pub fn valid_views(&self, row: usize, col: usize, plane: usize) -> u32 {
        self.valid_views[(row * self.cols + col) * self.planes + plane]
    }

    /// Volume with every cost set to `value`, mainly for tests.
    pub fn constant(rows: usize, cols: usize, planes: usize, channels: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            planes,
            channels,
            cost: vec![value; rows * cols * planes * channels],
            valid_views: vec![0; rows * cols * planes],
        }
    }

    /// Channel-mean cost per (pixel, plane) as a `rows x cols x planes` raster.
    pub fn mean_cost(&self) -> Raster {
        let norm = 1.0 / self.channels as f64;
        let data = self
            .cost
            .chunks_exact(self.channels)
            .map(|c| c.iter().sum::<f64>() * norm)
            .collect();
        Raster::from_vec(self.rows, self.cols, self.planes, data).expect("sized")
    }
}

/// Variance cost volume of `reference` against `sources` over `planes`.
pub fn build_cost_volume(
    reference: FeatureView<'_>,
    sources: &[FeatureView<'_>],
    planes: &DepthPlanes,
    penalty: f64,
) -> Result<CostVolume> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("cost volume needs at least one source".into()));
    }
    let (rows, cols, channels) = reference.features.raster().shape();
    let k_ref = reference.view.scaled_intrinsics(FEATURE_DOWNSAMPLE);
    if reference.view.scaled_dims(FEATURE_DOWNSAMPLE) != (cols, rows) {
        return Err(Error::ShapeMismatch("reference features vs camera".into()));
    }
    struct Src<'a> {
        features: &'a FeatureMap,
        k: crate::camera::Intrinsics,
        rel: crate::camera::Pose,
    }
    let mut srcs = Vec::with_capacity(sources.len());
    for s in sources {
        if s.features.channels() != channels
            || s.view.scaled_dims(FEATURE_DOWNSAMPLE) != (s.features.cols(), s.features.rows())
        {
            return Err(Error::ShapeMismatch("source features vs camera".into()));
        }
        srcs.push(Src {
            features: s.features,
            k: s.view.scaled_intrinsics(FEATURE_DOWNSAMPLE),
            rel: relative_pose(&reference.view.pose, &s.view.pose),
        });
    }
    let m_count = planes.len();
    let per_row: Vec<(Vec<f64>, Vec<u32>)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut cost = vec![0.0; cols * m_count * channels];
            let mut valid = vec![0u32; cols * m_count];
            let mut samples = vec![0.0; (1 + srcs.len()) * channels];
            for c in 0..cols {
                let f_ref = reference.features.at(r, c);
                for (m, &d) in planes.depths().iter().enumerate() {
                    samples[..channels].copy_from_slice(f_ref);
                    let mut n = 1;
                    for s in &srcs {
                        let w = homography_warp(
                            (c as f64, r as f64),
                            d,
                            &k_ref,
                            &s.k,
                            &s.rel,
                            (s.features.cols(), s.features.rows()),
                        );
                        if w.valid {
                            s.features.sample_bilinear(
                                w.u,
                                w.v,
                                &mut samples[n * channels..(n + 1) * channels],
                            );
                            n += 1;
                        }
                    }
                    let out = &mut cost[(c * m_count + m) * channels..][..channels];
                    valid[c * m_count + m] = n as u32;
                    if n < 2 {
                        out.fill(penalty);
                        continue;
                    }
                    for ch in 0..channels {
                        let mean = (0..n).map(|i| samples[i * channels + ch]).sum::<f64>() / n as f64;
                        let var = (0..n)
                            .map(|i| {
                                let x = samples[i * channels + ch] - mean;
                                x * x
                            })
                            .sum::<f64>()
                            / n as f64;
                        out[ch] = var;
                    }
                }
            }
            (cost, valid)
        })
        .collect();
    let mut cost = Vec::with_capacity(rows * cols * m_count * channels);
    let mut valid_views = Vec::with_capacity(rows * cols * m_count);
    for (c, v) in per_row {
        cost.extend(c);
        valid_views.extend(v);
    }
    Ok(CostVolume {
        rows,
        cols,
        planes: m_count,
        channels,
        cost,
        valid_views,
    })
}

/// Per-pixel categorical distribution over depth planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume(Raster);

impl ProbabilityVolume {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    /// Wraps a `rows x cols x planes` raster, checking every pixel is a
    /// distribution.
    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels() < 1 {
            return Err(Error::ShapeMismatch("probability volume without planes".into()));
        }
        for (i, px) in raster.data().chunks_exact(raster.channels()).enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self(raster))
    }

    /// Softmax of per-pixel logits.
    pub fn from_logits(logits: &Raster) -> Self {
        let m = logits.channels();
        let mut out = logits.clone();
        for px in out.data_mut().chunks_exact_mut(m) {
            softmax_in_place(px);
        }
        Self(out)
    }

    /// Per-pixel natural-log probabilities, floored at `ln(1e-30)` so
    /// one-hot inputs stay finite.
    pub fn logits(&self) -> Raster {
        let mut out = self.0.clone();
        for p in out.data_mut() {
            *p = p.max(1e-30).ln();
        }
        out
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn planes(&self) -> usize {
        self.0.channels()
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.0.pixel(row, col)
    }

    /// One-hot distribution at each pixel's nearest plane to `depth`.
    pub fn one_hot_at(depth: &Raster, planes: &DepthPlanes) -> Self {
        let mut out = Raster::zeros(depth.rows(), depth.cols(), planes.len());
        for r in 0..depth.rows() {
            for c in 0..depth.cols() {
                let m = planes.nearest(depth.get(r, c, 0));
                out.set(r, c, m, 1.0);
            }
        }
        Self(out)
    }
}

pub(crate) fn softmax_in_place(px: &mut [f64]) {
    let max = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for p in px.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in px.iter_mut() {
        *p /= sum;
    }
}

/// 1-2-1 binomial blur of every channel with mirrored borders.
fn smooth_binomial(src: &Raster) -> Raster {
    let (rows, cols, ch) = src.shape();
    let mirror = |i: i64, n: usize| -> usize {
        if i < 0 {
            (-i - 1).min(n as i64 - 1) as usize
        } else if i >= n as i64 {
            (2 * n as i64 - i - 1).max(0) as usize
        } else {
            i as usize
        }
    };
    const W: [f64; 3] = [0.25, 0.5, 0.25];
    let mut tmp = Raster::zeros(rows, cols, ch);
    for r in 0..rows {
        for c in 0..cols {
            for (k, w) in W.iter().enumerate() {
                let cc = mirror(c as i64 + k as i64 - 1, cols);
                for m in 0..ch {
                    let v = tmp.get(r, c, m) + w * src.get(r, cc, m);
                    tmp.set(r, c, m, v);
                }
            }
        }
    }
    let mut out = Raster::zeros(rows, cols, ch);
    for r in 0..rows {
        for (k, w) in W.iter().enumerate() {
            let rr = mirror(r as i64 + k as i64 - 1, rows);
            for c in 0..cols {
                for m in 0..ch {
                    let v = out.get(r, c, m) + w * tmp.get(rr, c, m);
                    out.set(r, c, m, v);
                }
            }
        }
    }
    out
}

/// Negated channel-mean cost, smoothed per plane, through a temperature
/// softmax.
pub fn cost_to_probability(cost: &CostVolume, temperature: f64) -> Result<ProbabilityVolume> {
    cost_to_probability_with(cost, temperature, true)
}

/// [`cost_to_probability`] with the spatial smoothing optional.
pub fn cost_to_probability_with(
    cost: &CostVolume,
    temperature: f64,
    smooth: bool,
) -> Result<ProbabilityVolume> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let mut score = cost.mean_cost();
    for s in score.data_mut() {
        *s = -*s;
    }
    if smooth {
        score = smooth_binomial(&score);
    }
    for s in score.data_mut() {
        *s /= temperature;
    }
    Ok(ProbabilityVolume::from_logits(&score))
}

/// Expected plane depth per pixel.
pub fn regress_depth(prob: &ProbabilityVolume, planes: &DepthPlanes) -> Result<Raster> {
    if prob.planes() != planes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} planes",
            prob.planes(),
            planes.len()
        )));
    }
    let data = prob
        .raster()
        .data()
        .chunks_exact(planes.len())
        .map(|b| b.iter().zip(planes.depths()).map(|(p, d)| p * d).sum())
        .collect();
    Raster::from_vec(prob.rows(), prob.cols(), 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub abs_rel: f64,
    pub pixels: usize,
}

pub fn eval_depth(pred: &Raster, gt: &Raster, mask: &[bool]) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() || pred.channels() != 1 || mask.len() != gt.data().len() {
        return Err(Error::ShapeMismatch("depth maps and mask must agree".into()));
    }
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask) {
        if m {
            sq += (p - g) * (p - g);
            rel += (p - g).abs() / g;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty evaluation mask".into()));
    }
    Ok(DepthMetrics {
        rmse: (sq / n as f64).sqrt(),
        abs_rel: rel / n as f64,
        pixels: n,
    })
}

/// Mask of pixels whose ground-truth depth lies inside the swept range.
pub fn in_range_mask(gt: &Raster, planes: &DepthPlanes) -> Vec<bool> {
    gt.data()
        .iter()
        .map(|&d| d >= planes.min() && d <= planes.max())
        .collect()
}
