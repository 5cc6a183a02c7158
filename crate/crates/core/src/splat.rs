//! Pixel-aligned Gaussian splats built from depth distributions, a
//! front-to-back alpha-blending rasterizer with an analytic backward pass,
//! and rendering-loss refinement of the distributions.

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{backproject_unchecked, CameraView, Intrinsics, Pose, FEATURE_DOWNSAMPLE, MIN_DEPTH};
use crate::costvol::{nearest_views, DepthPlanes, ProbabilityVolume};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// Default splat footprint factor β.
pub const DEFAULT_FOOTPRINT: f64 = 1.0;
/// Isotropic low-pass added to every projected covariance, in px².
pub const DILATION: f64 = 0.3;
/// Upper clamp of per-pixel opacity.
pub const MAX_ALPHA: f64 = 0.999;
/// Accumulated alpha below which rendered depth is left at 0.
pub const ALPHA_EPS: f64 = 1e-4;
/// Squared Mahalanobis radius of a splat's support (3σ).
const CUTOFF_SQ: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplatSource {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    pub mean: Vector3<f64>,
    pub opacity: f64,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scales: Vector3<f64>,
    pub color: [f64; 3],
    pub source: SplatSource,
}

impl GaussianSplat {
    /// World-frame covariance `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z)).to_rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scales.component_mul(&self.scales));
        r.matrix() * s2 * r.matrix().transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSplatSet {
    splats: Vec<GaussianSplat>,
}

impl GaussianSplatSet {
    pub fn new(splats: Vec<GaussianSplat>) -> Result<Self> {
        for (i, s) in splats.iter().enumerate() {
            let qn = s.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
            if (qn - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("splat {i}: quaternion norm {qn}")));
            }
            if s.scales.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::InvalidArgument(format!("splat {i}: scales must be positive")));
            }
            if !(0.0..=1.0).contains(&s.opacity) {
                return Err(Error::InvalidArgument(format!("splat {i}: opacity {}", s.opacity)));
            }
            if !s.mean.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("splat {i} mean")));
            }
        }
        Ok(Self { splats })
    }

    pub fn splats(&self) -> &[GaussianSplat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Concatenation in argument order.
    pub fn concat(sets: &[GaussianSplatSet]) -> Self {
        Self {
            splats: sets.iter().flat_map(|s| s.splats.iter().copied()).collect(),
        }
    }
}

fn check_shapes(view: &CameraView, prob: &ProbabilityVolume, planes: &DepthPlanes, image: &Raster) -> Result<()> {
    let (w, h) = view.scaled_dims(FEATURE_DOWNSAMPLE);
    if (prob.cols(), prob.rows()) != (w, h) || prob.planes() != planes.len() {
        return Err(Error::ShapeMismatch("probability volume does not match camera or planes".into()));
    }
    if (image.cols(), image.rows(), image.channels()) != (view.width, view.height, 3) {
        return Err(Error::ShapeMismatch("image does not match camera".into()));
    }
    Ok(())
}

/// One isotropic splat per quarter-resolution pixel of `view`: centered at
/// the regressed depth along the pixel ray, opaque as the peak probability,
/// sized `beta·D/f̄` and colored by the 4×4-averaged image.
pub fn build_splats(
    view_index: usize,
    view: &CameraView,
    prob: &ProbabilityVolume,
    planes: &DepthPlanes,
    image: &Raster,
    beta: f64,
) -> Result<GaussianSplatSet> {
    check_shapes(view, prob, planes, image)?;
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("footprint {beta} must be positive")));
    }
    let colors = image.downsample_mean(FEATURE_DOWNSAMPLE)?;
    Ok(splats_from(view_index, view, prob.raster(), planes, &colors, beta))
}

fn splats_from(
    view_index: usize,
    view: &CameraView,
    prob: &Raster,
    planes: &DepthPlanes,
    colors: &Raster,
    beta: f64,
) -> GaussianSplatSet {
    let k = view.scaled_intrinsics(FEATURE_DOWNSAMPLE);
    let f = k.mean_focal();
    let mut splats = Vec::with_capacity(prob.rows() * prob.cols());
    for row in 0..prob.rows() {
        for col in 0..prob.cols() {
            let b = prob.pixel(row, col);
            let depth: f64 = b.iter().zip(planes.depths()).map(|(p, d)| p * d).sum();
            let opacity = b.iter().cloned().fold(0.0, f64::max).min(1.0);
            let ray = backproject_unchecked(col as f64, row as f64, &k, &view.pose);
            let sigma = (beta * depth / f).max(f64::MIN_POSITIVE);
            let c = colors.pixel(row, col);
            splats.push(GaussianSplat {
                mean: ray.at_depth(depth),
                opacity,
                rotation: [1.0, 0.0, 0.0, 0.0],
                scales: Vector3::repeat(sigma),
                color: [c[0], c[1], c[2]],
                source: SplatSource {
                    view: view_index,
                    row,
                    col,
                },
            });
        }
    }
    GaussianSplatSet { splats }
}

/// Quarter-resolution render of color, blended depth and coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub color: Raster,
    pub depth: Raster,
    pub alpha: Raster,
}

/// A splat projected into the target camera.
struct Projected {
    index: usize,
    cam: Vector3<f64>,
    mean: Vector2<f64>,
    /// Inverse of the projected covariance.
    inv: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    cols: (usize, usize),
    rows: (usize, usize),
}

fn project_splat(
    index: usize,
    s: &GaussianSplat,
    k: &Intrinsics,
    pose: &Pose,
    w: usize,
    h: usize,
) -> Option<Projected> {
    let cam = pose.transform(&s.mean);
    if cam.z <= MIN_DEPTH {
        return None;
    }
    let (u, v) = k.to_pixel(&cam);
    let cov = projected_covariance(&cam, &(pose.rotation * s.covariance() * pose.rotation.transpose()), k);
    let inv = cov.try_inverse()?;
    let (rx, ry) = ((CUTOFF_SQ * cov[(0, 0)]).sqrt(), (CUTOFF_SQ * cov[(1, 1)]).sqrt());
    let span = |c: f64, r: f64, n: usize| -> Option<(usize, usize)> {
        let lo = (c - r).ceil().max(0.0);
        let hi = (c + r).floor().min(n as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    Some(Projected {
        index,
        cam,
        mean: Vector2::new(u, v),
        inv,
        opacity: s.opacity,
        color: s.color,
        cols: span(u, rx, w)?,
        rows: span(v, ry, h)?,
    })
}

/// Perspective Jacobian of the pixel mapping at camera point `x`.
fn jacobian(x: &Vector3<f64>, k: &Intrinsics) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * x.y * iz * iz,
    )
}

fn projected_covariance(x: &Vector3<f64>, cam_cov: &Matrix3<f64>, k: &Intrinsics) -> Matrix2<f64> {
    let j = jacobian(x, k);
    j * cam_cov * j.transpose() + Matrix2::identity() * DILATION
}

/// One splat's effect on one pixel.
#[derive(Clone, Copy)]
struct Hit {
    z: f64,
    slot: usize,
    alpha: f64,
    /// `exp(-q/2)`.
    falloff: f64,
    /// `Σ'⁻¹ Δ`.
    pd: Vector2<f64>,
    clamped: bool,
}

/// Per-splat gradient accumulators in the target image plane.
#[derive(Debug, Clone, Copy, Default)]
struct ImageGrad {
    opacity: f64,
    mean: [f64; 2],
    /// Gradient w.r.t. the symmetric projected covariance: `(g00, g01, g11)`.
    cov: [f64; 3],
}

struct RowOut {
    color: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    sq_err: f64,
    /// `(projected slot, gradient)` sorted by slot.
    grads: Vec<(usize, ImageGrad)>,
}

/// Composites every row; with `target`, also returns the summed squared
/// error and per-splat image-plane gradients of the mean-squared loss.
fn composite(
    proj: &[Projected],
    w: usize,
    h: usize,
    target: Option<(&Raster, f64)>,
) -> Vec<RowOut> {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (slot, p) in proj.iter().enumerate() {
        for b in &mut buckets[p.rows.0..=p.rows.1] {
            b.push(slot);
        }
    }
    buckets
        .par_iter()
        .enumerate()
        .map(|(row, bucket)| {
            let mut lists: Vec<Vec<Hit>> = vec![Vec::new(); w];
            for &slot in bucket {
                let p = &proj[slot];
                for col in p.cols.0..=p.cols.1 {
                    let d = Vector2::new(col as f64 - p.mean.x, row as f64 - p.mean.y);
                    let pd = p.inv * d;
                    let q = d.dot(&pd);
                    if !(q <= CUTOFF_SQ) {
                        continue;
                    }
                    let falloff = (-0.5 * q).exp();
                    let raw = p.opacity * falloff;
                    lists[col].push(Hit {
                        z: p.cam.z,
                        slot,
                        alpha: raw.min(MAX_ALPHA),
                        falloff,
                        pd,
                        clamped: raw > MAX_ALPHA,
                    });
                }
            }
            let mut out = RowOut {
                color: vec![0.0; w * 3],
                depth: vec![0.0; w],
                alpha: vec![0.0; w],
                sq_err: 0.0,
                grads: Vec::new(),
            };
            let mut acc: Vec<(usize, ImageGrad)> = Vec::new();
            for (col, hits) in lists.iter_mut().enumerate() {
                hits.sort_by(|a, b| a.z.total_cmp(&b.z).then(proj[a.slot].index.cmp(&proj[b.slot].index)));
                let mut t = 1.0;
                let mut c = [0.0; 3];
                let mut zsum = 0.0;
                let mut trans = Vec::with_capacity(hits.len());
                for hit in hits.iter() {
                    trans.push(t);
                    let wgt = hit.alpha * t;
                    let color = &proj[hit.slot].color;
                    for ch in 0..3 {
                        c[ch] += color[ch] * wgt;
                    }
                    zsum += hit.z * wgt;
                    t *= 1.0 - hit.alpha;
                }
                let cover = 1.0 - t;
                out.color[col * 3..col * 3 + 3].copy_from_slice(&c);
                out.alpha[col] = cover;
                out.depth[col] = if cover > ALPHA_EPS { zsum / cover } else { 0.0 };
                let Some((img, norm)) = target else { continue };
                let goal = img.pixel(row, col);
                let mut g_c = [0.0; 3];
                for ch in 0..3 {
                    let e = c[ch] - goal[ch];
                    out.sq_err += e * e;
                    g_c[ch] = 2.0 * e * norm;
                }
                // suffix sums of c_j a_j T_j behind each hit
                let mut suffix = [0.0; 3];
                for (i, hit) in hits.iter().enumerate().rev() {
                    let p = &proj[hit.slot];
                    let g_a: f64 = (0..3)
                        .map(|ch| g_c[ch] * (p.color[ch] * trans[i] - suffix[ch] / (1.0 - hit.alpha)))
                        .sum();
                    for ch in 0..3 {
                        suffix[ch] += p.color[ch] * hit.alpha * trans[i];
                    }
                    if hit.clamped || g_a == 0.0 {
                        continue;
                    }
                    let g_q = -0.5 * hit.alpha * g_a;
                    let pd = hit.pd;
                    let g = ImageGrad {
                        opacity: g_a * hit.falloff,
                        mean: [-2.0 * g_q * pd.x, -2.0 * g_q * pd.y],
                        cov: [-g_q * pd.x * pd.x, -g_q * pd.x * pd.y, -g_q * pd.y * pd.y],
                    };
                    acc.push((hit.slot, g));
                }
            }
            if target.is_some() {
                acc.sort_by_key(|(slot, _)| *slot);
                let mut merged: Vec<(usize, ImageGrad)> = Vec::new();
                for (slot, g) in acc {
                    match merged.last_mut() {
                        Some((s, m)) if *s == slot => {
                            m.opacity += g.opacity;
                            for i in 0..2 {
                                m.mean[i] += g.mean[i];
                            }
                            for i in 0..3 {
                                m.cov[i] += g.cov[i];
                            }
                        }
                        _ => merged.push((slot, g)),
                    }
                }
                out.grads = merged;
            }
            out
        })
        .collect()
}

fn project_all(splats: &GaussianSplatSet, target: &CameraView) -> (Vec<Projected>, usize, usize) {
    let k = target.scaled_intrinsics(FEATURE_DOWNSAMPLE);
    let (w, h) = target.scaled_dims(FEATURE_DOWNSAMPLE);
    let proj = splats
        .splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(i, s, &k, &target.pose, w, h))
        .collect();
    (proj, w, h)
}

fn assemble(rows: &[RowOut], w: usize, h: usize) -> RenderTarget {
    let mut color = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    for r in rows {
        color.extend_from_slice(&r.color);
        depth.extend_from_slice(&r.depth);
        alpha.extend_from_slice(&r.alpha);
    }
    RenderTarget {
        color: Raster::from_vec(h, w, 3, color).expect("row lengths"),
        depth: Raster::from_vec(h, w, 1, depth).expect("row lengths"),
        alpha: Raster::from_vec(h, w, 1, alpha).expect("row lengths"),
    }
}

/// Renders `splats` into `target` at quarter resolution.
pub fn rasterize(splats: &GaussianSplatSet, target: &CameraView) -> RenderTarget {
    let (proj, w, h) = project_all(splats, target);
    assemble(&composite(&proj, w, h, None), w, h)
}

/// Mean squared color error over pixels and channels.
pub fn rendering_loss(rendered: &RenderTarget, target: &Raster) -> Result<f64> {
    if rendered.color.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "render {:?} vs target {:?}",
            rendered.color.shape(),
            target.shape()
        )));
    }
    let n = target.data().len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let sq: f64 = rendered
        .color
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / n as f64)
}

/// The `n` views closest to `novel` by camera center, ties to the lower
/// index.
pub fn select_novel_sources(views: &[CameraView], novel: &CameraView, n: usize) -> Result<Vec<usize>> {
    if n > views.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} of {} views",
            views.len()
        )));
    }
    Ok(nearest_views(views, novel, n))
}

/// Gradient of the loss w.r.t. each splat's world mean, opacity and scale.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector3<f64>,
    opacity: f64,
    sigma: f64,
}

/// Loss of rendering `splats` into `target` against `image`, and its
/// gradient per splat. Splats must be isotropic.
fn loss_and_splat_grad(splats: &GaussianSplatSet, view: &CameraView, image: &Raster) -> (f64, Vec<SplatGrad>) {
    let (proj, w, h) = project_all(splats, view);
    let norm = 1.0 / (w * h * 3) as f64;
    let rows = composite(&proj, w, h, Some((image, norm)));
    let k = view.scaled_intrinsics(FEATURE_DOWNSAMPLE);
    let rot_t = view.pose.rotation.transpose();
    let mut image_grads = vec![ImageGrad::default(); proj.len()];
    let mut sq = 0.0;
    for r in &rows {
        sq += r.sq_err;
        for (slot, g) in &r.grads {
            let m = &mut image_grads[*slot];
            m.opacity += g.opacity;
            m.mean[0] += g.mean[0];
            m.mean[1] += g.mean[1];
            for i in 0..3 {
                m.cov[i] += g.cov[i];
            }
        }
    }
    let mut grads = vec![SplatGrad::default(); splats.len()];
    for (p, g) in proj.iter().zip(&image_grads) {
        let sigma = splats.splats[p.index].scales.x;
        let (x, y, z) = (p.cam.x, p.cam.y, p.cam.z);
        let (fx, fy) = (k.fx, k.fy);
        let [g00, g01, g11] = g.cov;
        let z2 = z * z;
        let z4 = z2 * z2;
        let z5 = z4 * z;
        // J Jᵀ entries and their partials
        let m00 = fx * fx * (z2 + x * x) / z4;
        let m01 = fx * fy * x * y / z4;
        let m11 = fy * fy * (z2 + y * y) / z4;
        let d_m00 = Vector3::new(2.0 * fx * fx * x / z4, 0.0, -fx * fx * (2.0 * z2 + 4.0 * x * x) / z5);
        let d_m01 = Vector3::new(fx * fy * y / z4, fx * fy * x / z4, -4.0 * fx * fy * x * y / z5);
        let d_m11 = Vector3::new(0.0, 2.0 * fy * fy * y / z4, -fy * fy * (2.0 * z2 + 4.0 * y * y) / z5);
        let s2 = sigma * sigma;
        let mut d_cam = (d_m00 * g00 + d_m01 * (2.0 * g01) + d_m11 * g11) * s2;
        let [gu, gv] = g.mean;
        d_cam += Vector3::new(gu * fx / z, gv * fy / z, -(gu * fx * x + gv * fy * y) / z2);
        grads[p.index] = SplatGrad {
            mean: rot_t * d_cam,
            opacity: g.opacity,
            sigma: 2.0 * sigma * (g00 * m00 + 2.0 * g01 * m01 + g11 * m11),
        };
    }
    (sq * norm, grads)
}

/// A view whose depth distribution is optimized.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub view: &'a CameraView,
    /// Full-resolution RGB image.
    pub image: &'a Raster,
    pub prob: &'a ProbabilityVolume,
}

/// A held-out view whose image supervises the rendering.
#[derive(Debug, Clone, Copy)]
pub struct NovelView<'a> {
    pub view: &'a CameraView,
    /// Full-resolution RGB image.
    pub image: &'a Raster,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub steps: usize,
    /// Largest per-logit change of a full step.
    pub step_size: f64,
    /// Source views rendered into each novel view.
    pub sources_per_novel: usize,
    pub beta: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: 1.0,
            sources_per_novel: 3,
            beta: DEFAULT_FOOTPRINT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub volumes: Vec<ProbabilityVolume>,
    /// Loss before the first step, then after every step.
    pub loss_trace: Vec<f64>,
    /// Steps that found a decreasing update.
    pub accepted: usize,
}

/// Differentiable rendering objective over per-pixel plane logits of a set
/// of source views.
pub struct RenderObjective<'a> {
    sources: Vec<SourceView<'a>>,
    colors: Vec<Raster>,
    novel: Vec<(CameraView, Raster, Vec<usize>)>,
    planes: &'a DepthPlanes,
    beta: f64,
}

impl<'a> RenderObjective<'a> {
    pub fn new(
        sources: &[SourceView<'a>],
        novel: &[NovelView<'_>],
        planes: &'a DepthPlanes,
        sources_per_novel: usize,
        beta: f64,
    ) -> Result<Self> {
        if sources.is_empty() || novel.is_empty() {
            return Err(Error::InvalidArgument("refinement needs source and novel views".into()));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("footprint {beta} must be positive")));
        }
        let mut colors = Vec::with_capacity(sources.len());
        for s in sources {
            check_shapes(s.view, s.prob, planes, s.image)?;
            colors.push(s.image.downsample_mean(FEATURE_DOWNSAMPLE)?);
        }
        let cams: Vec<CameraView> = sources.iter().map(|s| *s.view).collect();
        let n = sources_per_novel.min(cams.len()).max(1);
        let mut targets = Vec::with_capacity(novel.len());
        for nv in novel {
            if (nv.image.cols(), nv.image.rows(), nv.image.channels()) != (nv.view.width, nv.view.height, 3) {
                return Err(Error::ShapeMismatch("novel image does not match camera".into()));
            }
            let picks = select_novel_sources(&cams, nv.view, n)?;
            targets.push((*nv.view, nv.image.downsample_mean(FEATURE_DOWNSAMPLE)?, picks));
        }
        Ok(Self {
            sources: sources.to_vec(),
            colors,
            novel: targets,
            planes,
            beta,
        })
    }

    pub fn initial_logits(&self) -> Vec<Raster> {
        self.sources.iter().map(|s| s.prob.logits()).collect()
    }

    fn probabilities(logits: &[Raster]) -> Vec<Raster> {
        logits.iter().map(|z| ProbabilityVolume::from_logits(z).raster().clone()).collect()
    }

    fn splat_sets(&self, probs: &[Raster]) -> Vec<GaussianSplatSet> {
        self.sources
            .iter()
            .enumerate()
            .map(|(i, s)| splats_from(i, s.view, &probs[i], self.planes, &self.colors[i], self.beta))
            .collect()
    }

    fn check_logits(&self, logits: &[Raster]) -> Result<()> {
        if logits.len() != self.sources.len()
            || logits
                .iter()
                .zip(&self.sources)
                .any(|(z, s)| z.shape() != s.prob.raster().shape())
        {
            return Err(Error::ShapeMismatch("logits do not match the source volumes".into()));
        }
        Ok(())
    }

    /// Summed rendering loss over all novel views.
    pub fn loss(&self, logits: &[Raster]) -> Result<f64> {
        self.check_logits(logits)?;
        let sets = self.splat_sets(&Self::probabilities(logits));
        let per_view: Vec<f64> = self
            .novel
            .par_iter()
            .map(|(view, image, picks)| {
                let subset: Vec<GaussianSplatSet> = picks.iter().map(|&i| sets[i].clone()).collect();
                let render = rasterize(&GaussianSplatSet::concat(&subset), view);
                rendering_loss(&render, image).expect("shapes checked")
            })
            .collect();
        let total: f64 = per_view.iter().sum();
        if !total.is_finite() {
            return Err(Error::NonFinite("rendering loss".into()));
        }
        Ok(total)
    }

    /// Loss and its analytic gradient w.r.t. every logit.
    pub fn loss_and_gradient(&self, logits: &[Raster]) -> Result<(f64, Vec<Raster>)> {
        self.check_logits(logits)?;
        let probs = Self::probabilities(logits);
        let sets = self.splat_sets(&probs);
        let per_view: Vec<(f64, Vec<(usize, Vec<SplatGrad>)>)> = self
            .novel
            .par_iter()
            .map(|(view, image, picks)| {
                let subset: Vec<GaussianSplatSet> = picks.iter().map(|&i| sets[i].clone()).collect();
                let (loss, grads) = loss_and_splat_grad(&GaussianSplatSet::concat(&subset), view, image);
                let mut split = Vec::with_capacity(picks.len());
                let mut offset = 0;
                for &i in picks {
                    let n = sets[i].len();
                    split.push((i, grads[offset..offset + n].to_vec()));
                    offset += n;
                }
                (loss, split)
            })
            .collect();
        let mut total = 0.0;
        let mut splat_grads: Vec<Vec<SplatGrad>> = sets.iter().map(|s| vec![SplatGrad::default(); s.len()]).collect();
        for (loss, split) in per_view {
            total += loss;
            for (i, grads) in split {
                for (acc, g) in splat_grads[i].iter_mut().zip(grads) {
                    acc.mean += g.mean;
                    acc.opacity += g.opacity;
                    acc.sigma += g.sigma;
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("rendering loss".into()));
        }
        let depths = self.planes.depths();
        let m = depths.len();
        let grads = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let k = s.view.scaled_intrinsics(FEATURE_DOWNSAMPLE);
                let f = k.mean_focal();
                let prob = &probs[i];
                let mut out = Raster::zeros(prob.rows(), prob.cols(), m);
                for row in 0..prob.rows() {
                    for col in 0..prob.cols() {
                        let g = &splat_grads[i][row * prob.cols() + col];
                        let b = prob.pixel(row, col);
                        let depth: f64 = b.iter().zip(depths).map(|(p, d)| p * d).sum();
                        let ray = backproject_unchecked(col as f64, row as f64, &k, &s.view.pose);
                        let g_depth = g.mean.dot(&(ray.direction / ray.axis_cosine)) + g.sigma * self.beta / f;
                        let top = (0..m).fold(0, |a, j| if b[j] > b[a] { j } else { a });
                        let gz = out.pixel_mut(row, col);
                        for j in 0..m {
                            let mut v = g_depth * b[j] * (depths[j] - depth) - g.opacity * b[top] * b[j];
                            if j == top {
                                v += g.opacity * b[top];
                            }
                            gz[j] = v;
                        }
                    }
                }
                out
            })
            .collect();
        Ok((total, grads))
    }
}

/// Gradient descent on plane logits of each source view against the
/// rendering loss of the novel views. A step moves logits by at most
/// `step_size`, halving up to 8 times until the loss does not increase;
/// otherwise the logits are kept.
pub fn refine_probability_volume(
    sources: &[SourceView<'_>],
    novel: &[NovelView<'_>],
    planes: &DepthPlanes,
    options: &RefineOptions,
) -> Result<Refinement> {
    if options.steps == 0 {
        return Err(Error::InvalidArgument("refinement needs at least one step".into()));
    }
    if !(options.step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("step size {} must be positive", options.step_size)));
    }
    let objective = RenderObjective::new(sources, novel, planes, options.sources_per_novel, options.beta)?;
    let mut logits = objective.initial_logits();
    let mut loss = objective.loss(&logits)?;
    let mut trace = vec![loss];
    let mut accepted = 0;
    for _ in 0..options.steps {
        let (_, grads) = objective.loss_and_gradient(&logits)?;
        let scale = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .fold(0.0f64, |a, x| a.max(x.abs()));
        if scale > 0.0 {
            let mut eta = options.step_size / scale;
            for _ in 0..=8 {
                let trial: Vec<Raster> = logits
                    .iter()
                    .zip(&grads)
                    .map(|(z, g)| {
                        let mut t = z.clone();
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a -= eta * b;
                        }
                        t
                    })
                    .collect();
                let trial_loss = objective.loss(&trial)?;
                if trial_loss <= loss {
                    logits = trial;
                    loss = trial_loss;
                    accepted += 1;
                    break;
                }
                eta *= 0.5;
            }
        }
        trace.push(loss);
    }
    let volumes = logits.iter().map(ProbabilityVolume::from_logits).collect();
    Ok(Refinement {
        volumes,
        loss_trace: trace,
        accepted,
    })
}
