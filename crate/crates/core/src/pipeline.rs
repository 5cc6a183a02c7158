//! End-to-end driver: scene directories in, depth distributions, voxel
//! volume, boxes and metrics out.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::boxes::{extract_boxes, iou3d, Box3D};
use crate::camera::{CameraView, FEATURE_DOWNSAMPLE};
use crate::config::PipelineConfig;
use crate::costvol::{
    build_cost_volume, cost_to_probability, eval_depth, extract_features, in_range_mask, regress_depth,
    select_source_views, DepthPlanes, FeatureMap, FeatureView, ProbabilityVolume,
};
use crate::error::{Error, Result};
use crate::formats::{self, BoxMatch, Metrics, ViewDepthMetrics};
use crate::raster::Raster;
use crate::sampling::{build_volume, sample_topk, DepthProposalSet, VolumeView, VoxelGrid};
use crate::scenegen::{generate_scene, make_trajectory, raycast, raycast_scaled, SceneSpec};
use crate::splat::{build_splats, refine_probability_volume, GaussianSplatSet, NovelView, Refinement, SourceView};

/// Ground-truth depth of one view at descriptor resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTruth {
    pub depth: Raster,
    pub mask: Vec<bool>,
}

/// Posed images plus whatever ground truth is available.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub views: Vec<CameraView>,
    /// Full-resolution RGB.
    pub images: Vec<Raster>,
    pub truth: Option<Vec<ViewTruth>>,
    pub boxes: Option<Vec<Box3D>>,
}

/// Renders a generated scene into the same values a scene directory
/// stores: 8-bit images and `f32` depths.
pub fn synthesize(seed: u64, n_boxes: usize, n_views: usize) -> Result<(SceneSpec, SceneData)> {
    let scene = generate_scene(seed, n_boxes)?;
    let views = make_trajectory(&scene, n_views, seed)?;
    let rendered: Vec<_> = views
        .par_iter()
        .map(|v| -> Result<_> {
            let full = raycast(&scene, v)?;
            let quarter = raycast_scaled(&scene, v, FEATURE_DOWNSAMPLE)?;
            Ok((full.image, quarter.depth))
        })
        .collect::<Result<_>>()?;
    let mut images = Vec::with_capacity(n_views);
    let mut truth = Vec::with_capacity(n_views);
    for (image, depth) in rendered {
        images.push(formats::quantize_u8(&image));
        let depth = depth.quantized_f32();
        let mask = depth.data().iter().map(|&d| d > 0.0).collect();
        truth.push(ViewTruth { depth, mask });
    }
    let boxes = scene.boxes.iter().map(|b| Box3D::from_aabb(&b.bounds, 1.0)).collect();
    Ok((
        scene,
        SceneData {
            views,
            images,
            truth: Some(truth),
            boxes: Some(boxes),
        },
    ))
}

/// File layout of a scene directory.
pub struct SceneLayout(pub PathBuf);

impl SceneLayout {
    pub fn cameras(&self) -> PathBuf {
        self.0.join("cameras.txt")
    }
    pub fn spec(&self) -> PathBuf {
        self.0.join("scene.txt")
    }
    pub fn image(&self, i: usize) -> PathBuf {
        self.0.join(format!("images/view_{i:03}.ppm"))
    }
    pub fn depth(&self, i: usize) -> PathBuf {
        self.0.join(format!("depth/view_{i:03}.mvsr"))
    }
    pub fn mask(&self, i: usize) -> PathBuf {
        self.0.join(format!("depth/view_{i:03}_mask.mvsr"))
    }
    pub fn boxes(&self) -> PathBuf {
        self.0.join("boxes_gt.txt")
    }
}

pub fn write_scene_dir(dir: &Path, spec: &SceneSpec, data: &SceneData) -> Result<()> {
    let l = SceneLayout(dir.to_path_buf());
    formats::write_scene(&l.spec(), spec)?;
    formats::write_cameras(&l.cameras(), &data.views)?;
    for (i, img) in data.images.iter().enumerate() {
        formats::write_ppm(&l.image(i), img)?;
    }
    if let Some(truth) = &data.truth {
        for (i, t) in truth.iter().enumerate() {
            formats::write_depth(&l.depth(i), &l.mask(i), &t.depth)?;
        }
    }
    if let Some(boxes) = &data.boxes {
        formats::write_boxes(&l.boxes(), boxes)?;
    }
    Ok(())
}

/// Loads cameras and images; depth and boxes are picked up when every
/// view's files are present.
pub fn load_scene_dir(dir: &Path) -> Result<SceneData> {
    let l = SceneLayout(dir.to_path_buf());
    let views = formats::read_cameras(&l.cameras())?;
    if views.is_empty() {
        return Err(Error::format(l.cameras(), "no cameras listed"));
    }
    let mut images = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let img = formats::read_ppm(&l.image(i))?;
        if (img.cols(), img.rows()) != (v.width, v.height) {
            return Err(Error::format(
                l.image(i),
                format!("image is {}x{} but camera {i} is {}x{}", img.cols(), img.rows(), v.width, v.height),
            ));
        }
        images.push(img);
    }
    let truth = if (0..views.len()).all(|i| l.depth(i).exists()) {
        let mut t = Vec::with_capacity(views.len());
        for (i, v) in views.iter().enumerate() {
            let (depth, mask) = formats::read_depth(&l.depth(i), &l.mask(i))?;
            if (depth.cols(), depth.rows()) != v.scaled_dims(FEATURE_DOWNSAMPLE) {
                return Err(Error::format(l.depth(i), "depth is not at quarter resolution"));
            }
            t.push(ViewTruth { depth, mask });
        }
        Some(t)
    } else {
        None
    };
    let boxes = if l.boxes().exists() {
        Some(formats::read_boxes(&l.boxes())?)
    } else {
        None
    };
    Ok(SceneData {
        views,
        images,
        truth,
        boxes,
    })
}

/// Held-out views for refinement, spread over the interior of the
/// trajectory so their neighbours surround them.
pub fn novel_view_indices(n_views: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count >= n_views {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {count} of {n_views} views"
        )));
    }
    let idx: Vec<usize> = (0..count).map(|j| (j + 1) * n_views / (count + 1)).collect();
    debug_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    Ok(idx)
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub features: Vec<FeatureMap>,
    pub probabilities: Vec<ProbabilityVolume>,
    pub depths: Vec<Raster>,
    pub proposals: Vec<DepthProposalSet>,
    pub volume: VoxelGrid,
    pub boxes: Vec<Box3D>,
    pub refinement: Option<Refinement>,
    pub metrics: Metrics,
}

pub fn features_of(images: &[Raster]) -> Result<Vec<FeatureMap>> {
    images.par_iter().map(extract_features).collect()
}

/// Probability volume of every view against its nearest neighbours.
pub fn estimate_probabilities(
    views: &[CameraView],
    features: &[FeatureMap],
    planes: &DepthPlanes,
    cfg: &PipelineConfig,
) -> Result<Vec<ProbabilityVolume>> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument("depth estimation needs at least 2 views".into()));
    }
    let n_src = cfg.source_views.min(views.len() - 1);
    (0..views.len())
        .into_par_iter()
        .map(|i| {
            let sources: Vec<FeatureView> = select_source_views(views, i, n_src)?
                .into_iter()
                .map(|j| FeatureView {
                    features: &features[j],
                    view: &views[j],
                })
                .collect();
            let reference = FeatureView {
                features: &features[i],
                view: &views[i],
            };
            let cost = build_cost_volume(reference, &sources, planes, cfg.cost_penalty)?;
            cost_to_probability(&cost, cfg.temperature)
        })
        .collect()
}

/// Refines the volumes of every view not held out, supervised by the
/// held-out views' images.
pub fn refine_stage(
    data: &SceneData,
    probs: &[ProbabilityVolume],
    planes: &DepthPlanes,
    cfg: &PipelineConfig,
) -> Result<(Vec<ProbabilityVolume>, Refinement)> {
    let novel_idx = novel_view_indices(data.views.len(), cfg.refine_novel_views)?;
    let source_idx: Vec<usize> = (0..data.views.len()).filter(|i| !novel_idx.contains(i)).collect();
    let sources: Vec<SourceView> = source_idx
        .iter()
        .map(|&i| SourceView {
            view: &data.views[i],
            image: &data.images[i],
            prob: &probs[i],
        })
        .collect();
    let novel: Vec<NovelView> = novel_idx
        .iter()
        .map(|&i| NovelView {
            view: &data.views[i],
            image: &data.images[i],
        })
        .collect();
    let refined = refine_probability_volume(&sources, &novel, planes, &cfg.refine_options())?;
    let mut out = probs.to_vec();
    for (&i, p) in source_idx.iter().zip(&refined.volumes) {
        out[i] = p.clone();
    }
    Ok((out, refined))
}

/// Depth metrics per view where truth exists (pixels with a hit inside the
/// swept range) and the best IoU of each ground-truth box.
pub fn evaluate(data: &SceneData, depths: &[Raster], boxes: &[Box3D], planes: &DepthPlanes) -> Result<Metrics> {
    let mut m = Metrics {
        detections: boxes.len(),
        ..Metrics::default()
    };
    if let Some(truth) = &data.truth {
        if truth.len() != depths.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} depth maps for {} ground-truth views",
                depths.len(),
                truth.len()
            )));
        }
        for (view, (d, t)) in depths.iter().zip(truth).enumerate() {
            let mask: Vec<bool> = in_range_mask(&t.depth, planes)
                .into_iter()
                .zip(&t.mask)
                .map(|(a, &b)| a && b)
                .collect();
            if !mask.iter().any(|&x| x) {
                continue;
            }
            let e = eval_depth(d, &t.depth, &mask)?;
            m.depth.push(ViewDepthMetrics {
                view,
                rmse: e.rmse,
                abs_rel: e.abs_rel,
            });
        }
    }
    if let Some(gt) = &data.boxes {
        for (i, g) in gt.iter().enumerate() {
            let best = boxes.iter().map(|b| iou3d(g, b)).fold(0.0, f64::max);
            m.boxes.push(BoxMatch { gt: i, best_iou: best });
        }
    }
    Ok(m)
}

pub fn run_pipeline(data: &SceneData, cfg: &PipelineConfig) -> Result<Artifacts> {
    cfg.validate()?;
    if data.images.len() != data.views.len() {
        return Err(Error::ShapeMismatch("one image per camera is required".into()));
    }
    let planes = cfg.depth_planes()?;
    let features = features_of(&data.images)?;
    let mut probabilities = estimate_probabilities(&data.views, &features, &planes, cfg)?;
    let mut refinement = None;
    if cfg.refine {
        let (p, r) = refine_stage(data, &probabilities, &planes, cfg)?;
        probabilities = p;
        refinement = Some(r);
    }
    let depths: Vec<Raster> = probabilities
        .par_iter()
        .map(|p| regress_depth(p, &planes))
        .collect::<Result<_>>()?;
    let proposals: Vec<DepthProposalSet> = probabilities
        .par_iter()
        .map(|p| sample_topk(p, &planes, cfg.top_k))
        .collect::<Result<_>>()?;
    let vviews: Vec<VolumeView> = (0..data.views.len())
        .map(|i| VolumeView {
            features: &features[i],
            view: &data.views[i],
            proposals: &proposals[i],
        })
        .collect();
    let volume = build_volume(&vviews, &cfg.grid, cfg.window)?;
    let boxes = extract_boxes(&volume, cfg.box_threshold, cfg.box_min_voxels)?;
    let mut metrics = evaluate(data, &depths, &boxes, &planes)?;
    if let Some(r) = &refinement {
        metrics.loss_trace = r.loss_trace.clone();
    }
    Ok(Artifacts {
        features,
        probabilities,
        depths,
        proposals,
        volume,
        boxes,
        refinement,
        metrics,
    })
}

/// Splats of every view built from its final depth distribution.
pub fn splats_of(data: &SceneData, probs: &[ProbabilityVolume], cfg: &PipelineConfig) -> Result<GaussianSplatSet> {
    let planes = cfg.depth_planes()?;
    let sets: Vec<GaussianSplatSet> = (0..data.views.len())
        .into_par_iter()
        .map(|i| build_splats(i, &data.views[i], &probs[i], &planes, &data.images[i], cfg.footprint))
        .collect::<Result<_>>()?;
    Ok(GaussianSplatSet::concat(&sets))
}

/// File layout of a pipeline output directory.
pub struct OutputLayout(pub PathBuf);

impl OutputLayout {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.txt")
    }
    pub fn probability(&self, i: usize) -> PathBuf {
        self.0.join(format!("prob/view_{i:03}.mvsr"))
    }
    pub fn depth(&self, i: usize) -> PathBuf {
        self.0.join(format!("depth/view_{i:03}.mvsr"))
    }
    pub fn volume(&self) -> PathBuf {
        self.0.join("volume.mvsv")
    }
    pub fn boxes(&self) -> PathBuf {
        self.0.join("boxes.txt")
    }
    pub fn splats(&self) -> PathBuf {
        self.0.join("splats.mvsr")
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.txt")
    }
}

pub fn write_artifacts(out: &Path, data: &SceneData, a: &Artifacts, cfg: &PipelineConfig) -> Result<()> {
    let l = OutputLayout(out.to_path_buf());
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(l.config(), cfg.to_text()).map_err(|e| Error::io(l.config(), e))?;
    for (i, (p, d)) in a.probabilities.iter().zip(&a.depths).enumerate() {
        formats::write_raster(&l.probability(i), p.raster())?;
        formats::write_raster(&l.depth(i), d)?;
    }
    formats::write_voxels(&l.volume(), &a.volume)?;
    formats::write_boxes(&l.boxes(), &a.boxes)?;
    formats::write_splats(&l.splats(), &splats_of(data, &a.probabilities, cfg)?)?;
    formats::write_metrics(&l.metrics(), &a.metrics)
}

/// Loads `scene_dir`, runs the pipeline and writes every artifact to `out`.
pub fn run_pipeline_dir(scene_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Artifacts> {
    let data = load_scene_dir(scene_dir)?;
    let a = run_pipeline(&data, cfg)?;
    write_artifacts(out, &data, &a, cfg)?;
    Ok(a)
}

/// Re-evaluates depth maps and boxes from an output directory against the
/// scene's ground truth.
pub fn eval_dir(scene_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Metrics> {
    let data = load_scene_dir(scene_dir)?;
    let l = OutputLayout(out.to_path_buf());
    let depths: Vec<Raster> = (0..data.views.len())
        .map(|i| formats::read_raster(&l.depth(i)))
        .collect::<Result<_>>()?;
    let boxes = formats::read_boxes(&l.boxes())?;
    evaluate(&data, &depths, &boxes, &cfg.depth_planes()?)
}
