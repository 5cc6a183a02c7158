//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed.
//!
//! Scenes come from the seeded generator, so every number printed here is
//! reproducible. Thresholds are pinned below; the ones marked "pinned"
//! were calibrated once on these scenes and carry a margin.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use sweepvox::camera::{homography_warp, project, relative_pose, CameraView, Intrinsics, Pose, FEATURE_DOWNSAMPLE};
use sweepvox::config::PipelineConfig;
use sweepvox::costvol::{
    cost_to_probability, in_range_mask, regress_depth, CostVolume, DepthPlanes, FeatureView, ProbabilityVolume,
};
use sweepvox::formats;
use sweepvox::pipeline::{self, novel_view_indices, run_pipeline, synthesize, SceneData};
use sweepvox::sampling::{build_volume, build_volume_vanilla, sample_topk, DepthProposalSet, VolumeView, VoxelGrid};
use sweepvox::scenegen::SceneSpec;
use sweepvox::splat::{refine_probability_volume, NovelView, RefineOptions, RenderObjective, SourceView};
use sweepvox::Raster;

const SUM_TOL: f64 = 1e-6;
const WARP_TOL_PX: f64 = 1e-5;
const VANILLA_TOL: f64 = 1e-6;
/// Calibrated softmax temperature for [0,1]-range descriptors.
const TEMPERATURE: f64 = 5e-4;
/// Pinned: smallest per-scene surface/free ratio observed on the suite
/// minus margin.
const SURFACE_RATIO_MIN: f64 = 2.2;
const REFINE_REDUCTION: f64 = 0.20;
const REFINE_STEPS: usize = 20;
const REFINE_STEP_SIZE: f64 = 10.0;
const LOGIT_NOISE: f64 = 2.0;
const BOX_IOU: f64 = 0.25;
const GRAD_REL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

const SUITE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let dt = t.elapsed();
    if dt > limit {
        o.pass = false;
    }
    o.detail = format!("{} [{:.2?} of {:?}]", o.detail, dt, limit);
    o
}

fn base_config() -> PipelineConfig {
    PipelineConfig {
        temperature: TEMPERATURE,
        ..PipelineConfig::default()
    }
}

struct SuiteScene {
    spec: SceneSpec,
    data: SceneData,
}

/// Five 2-box scenes of 3 views each.
fn suite() -> Vec<SuiteScene> {
    SUITE_SEEDS
        .iter()
        .map(|&s| {
            let (spec, data) = synthesize(s, 2, 3).unwrap();
            SuiteScene { spec, data }
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Mean `s` over voxels near a true surface divided by mean `s` over
/// observed free space. Surface: within half the largest pitch of a
/// surface. Free: farther than that, inside the room and outside every box.
fn surface_ratio(spec: &SceneSpec, grid: &VoxelGrid) -> f64 {
    let c = grid.config();
    let half = 0.5 * c.pitch.max();
    let (mut ss, mut sn, mut fs, mut fn_) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..grid.len() {
        if grid.valid_projections(i) == 0 {
            continue;
        }
        let p = c.center_of(i);
        if !spec.room.contains(&p) {
            continue;
        }
        if spec.surface_distance(&p) <= half {
            ss += grid.score(i);
            sn += 1;
        } else if !spec.boxes.iter().any(|b| b.bounds.contains(&p)) {
            fs += grid.score(i);
            fn_ += 1;
        }
    }
    assert!(sn > 0 && fn_ > 0, "suite scene lacks surface or free voxels");
    (ss / sn as f64) / (fs / fn_ as f64)
}

fn valid_mask(data: &SceneData, view: usize, planes: &DepthPlanes) -> Vec<bool> {
    let t = &data.truth.as_ref().unwrap()[view];
    in_range_mask(&t.depth, planes)
        .into_iter()
        .zip(&t.mask)
        .map(|(a, &b)| a && b)
        .collect()
}

/// Sum of squared errors and pixel count of `pred` against truth.
fn sq_error(pred: &Raster, data: &SceneData, view: usize, planes: &DepthPlanes) -> (f64, usize) {
    let gt = &data.truth.as_ref().unwrap()[view].depth;
    let mask = valid_mask(data, view, planes);
    let mut sq = 0.0;
    let mut n = 0;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(&mask) {
        if m {
            sq += (p - g) * (p - g);
            n += 1;
        }
    }
    (sq, n)
}

fn volume_with(
    data: &SceneData,
    features: &[sweepvox::costvol::FeatureMap],
    proposals: &[DepthProposalSet],
    cfg: &PipelineConfig,
) -> VoxelGrid {
    let views: Vec<VolumeView> = (0..data.views.len())
        .map(|i| VolumeView {
            features: &features[i],
            view: &data.views[i],
            proposals: &proposals[i],
        })
        .collect();
    build_volume(&views, &cfg.grid, cfg.window).unwrap()
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..1000 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=6);
        let m = rng.gen_range(2..=16);
        let scale = [1e-3, 1.0, 50.0, 1e3][trial % 4];
        let prob = if trial % 2 == 0 {
            let data = (0..rows * cols * m).map(|_| scale * gaussian(&mut rng)).collect();
            ProbabilityVolume::from_logits(&Raster::from_vec(rows, cols, m, data).unwrap())
        } else {
            let ch = rng.gen_range(1..=6);
            let mut cost = CostVolume::constant(rows, cols, m, ch, 0.0);
            for r in 0..rows {
                for c in 0..cols {
                    for p in 0..m {
                        for v in cost.cost_mut(r, c, p) {
                            *v = scale * rng.gen::<f64>();
                        }
                    }
                }
            }
            let tau = 10f64.powf(rng.gen_range(-4.0..1.0));
            cost_to_probability(&cost, tau).unwrap()
        };
        for px in prob.raster().data().chunks_exact(m) {
            worst = worst.max((px.iter().sum::<f64>() - 1.0).abs());
        }
        let planes = DepthPlanes::uniform(0.2, 5.0, m).unwrap();
        let k = rng.gen_range(1..=m);
        let set = sample_topk(&prob, &planes, k).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let s: f64 = set.at(r, c).iter().map(|p| p.score).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        checked += 1;
    }
    Outcome {
        pass: worst <= SUM_TOL,
        detail: format!("{checked} inputs, worst |sum-1| = {worst:.2e} (tol {SUM_TOL:.0e})"),
    }
}

fn random_intrinsics(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Intrinsics {
    let f = rng.gen_range(150.0..500.0);
    Intrinsics::new(
        f * rng.gen_range(0.95..1.05),
        f,
        w as f64 / 2.0 + rng.gen_range(-10.0..10.0),
        h as f64 / 2.0 + rng.gen_range(-10.0..10.0),
    )
    .unwrap()
}

fn random_rotation(rng: &mut ChaCha8Rng, angle: f64) -> nalgebra::Matrix3<f64> {
    let axis = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng));
    *Rotation3::new(axis.normalize() * rng.gen_range(-angle..angle)).matrix()
}

fn random_offset(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r))
}

fn homography() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (w, h) = (320, 240);
    let mut worst: f64 = 0.0;
    let mut triples = 0;
    while triples < 100 {
        let ref_pose = Pose::new(random_rotation(&mut rng, 3.0), random_offset(&mut rng, 2.0)).unwrap();
        let ref_view = CameraView::new(random_intrinsics(&mut rng, w, h), ref_pose, w, h).unwrap();
        // source: turned by up to 0.3 rad, centre within 0.5 m of the reference
        let rot = random_rotation(&mut rng, 0.3) * ref_view.pose.rotation;
        let c = ref_view.center() + random_offset(&mut rng, 0.5);
        let src_pose = Pose::new(rot, -(rot * c)).unwrap();
        let src_view = CameraView::new(random_intrinsics(&mut rng, w, h), src_pose, w, h).unwrap();
        let depth = rng.gen_range(0.5..5.0);
        let q = (rng.gen_range(0.0..w as f64 - 1.0), rng.gen_range(0.0..h as f64 - 1.0));
        // point on the plane, built in world coordinates
        let x_cam = ref_view.intrinsics.unproject_unit(q.0, q.1) * depth;
        let world = ref_view.pose.rotation.transpose() * (x_cam - ref_view.pose.translation);
        let direct = project(&world, &src_view, 1);
        if direct.depth <= 0.1 {
            continue;
        }
        let rel = relative_pose(&ref_view.pose, &src_view.pose);
        let warp = homography_warp(q, depth, &ref_view.intrinsics, &src_view.intrinsics, &rel, (w, h));
        let err = ((warp.u - direct.u).powi(2) + (warp.v - direct.v).powi(2)).sqrt();
        worst = worst.max(if warp.valid == direct.valid { err } else { f64::INFINITY });
        triples += 1;
    }
    Outcome {
        pass: worst <= WARP_TOL_PX,
        detail: format!("{triples} triples, worst error {worst:.2e} px (tol {WARP_TOL_PX:.0e})"),
    }
}

fn topk_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let planes = DepthPlanes::uniform(0.5, 3.0, 6).unwrap();
    let mut mismatches = 0usize;
    let mut pixels = 0usize;
    for _ in 0..50 {
        let mut data = Vec::with_capacity(8 * 8 * 6);
        for _ in 0..64 {
            // quantized levels make ties common
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0..4) as f64 + 0.5).collect();
            let total: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|x| x / total));
        }
        let prob = ProbabilityVolume::new(Raster::from_vec(8, 8, 6, data).unwrap()).unwrap();
        let k = rng.gen_range(1..=6);
        let set = sample_topk(&prob, &planes, k).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let px = prob.at(r, c);
                // among all orderings by descending probability, ties keep
                // the lower plane first: the lexicographically smallest
                let expect: Vec<usize> = permutations(6)
                    .into_iter()
                    .filter(|perm| perm.windows(2).all(|w| px[w[0]] >= px[w[1]]))
                    .min()
                    .unwrap()[..k]
                    .to_vec();
                let total: f64 = expect.iter().map(|&i| px[i]).sum();
                let got = set.at(r, c);
                let same = got.len() == k
                    && got.iter().zip(&expect).all(|(p, &i)| {
                        p.plane == Some(i)
                            && p.depth == planes.depths()[i]
                            && (p.score - px[i] / total).abs() <= 1e-12
                    });
                mismatches += usize::from(!same);
                pixels += 1;
            }
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{pixels} pixels, {mismatches} disagree with the exhaustive oracle"),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![];
    let mut cur: Vec<usize> = (0..n).collect();
    heap_permute(n, &mut cur, &mut out);
    out
}

fn heap_permute(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if k == 1 {
        out.push(a.clone());
        return;
    }
    heap_permute(k - 1, a, out);
    for i in 0..k - 1 {
        if k.is_multiple_of(2) {
            a.swap(i, k - 1);
        } else {
            a.swap(0, k - 1);
        }
        heap_permute(k - 1, a, out);
    }
}

fn degenerate_to_vanilla() -> Outcome {
    let (_, data) = synthesize(5, 2, 3).unwrap();
    let cfg = base_config();
    let planes = cfg.depth_planes().unwrap();
    let m = planes.len();
    let features = pipeline::features_of(&data.images).unwrap();
    let proposals: Vec<DepthProposalSet> = features
        .iter()
        .map(|f| {
            let uniform = ProbabilityVolume::from_logits(&Raster::zeros(f.rows(), f.cols(), m));
            sample_topk(&uniform, &planes, m).unwrap()
        })
        .collect();
    let views: Vec<VolumeView> = (0..3)
        .map(|i| VolumeView {
            features: &features[i],
            view: &data.views[i],
            proposals: &proposals[i],
        })
        .collect();
    let aware = build_volume(&views, &cfg.grid, 5.0).unwrap();
    let fviews: Vec<FeatureView> = (0..3)
        .map(|i| FeatureView {
            features: &features[i],
            view: &data.views[i],
        })
        .collect();
    let vanilla = build_volume_vanilla(&fviews, &cfg.grid).unwrap();
    let (mut worst_f, mut worst_s, mut n) = (0.0f64, 0.0f64, 0usize);
    for i in 0..aware.len() {
        if aware.valid_projections(i) as usize != views.len() {
            continue;
        }
        n += 1;
        for (a, b) in aware.aggregated(i).iter().zip(vanilla.feature(i)) {
            worst_f = worst_f.max((a - b).abs());
        }
        worst_s = worst_s.max((aware.score(i) - 1.0 / m as f64).abs());
    }
    Outcome {
        pass: n > 0 && worst_f <= VANILLA_TOL && worst_s <= VANILLA_TOL,
        detail: format!("{n} voxels in all frustums, worst feature diff {worst_f:.2e}, worst |s-1/M| {worst_s:.2e}"),
    }
}

fn depth_accuracy(scenes: &[SuiteScene]) -> Outcome {
    let cfg = base_config();
    let planes = cfg.depth_planes().unwrap();
    let spacing = planes.spacing();
    let reference = 1;
    let (mut sq, mut sq_q, mut n) = (0.0, 0.0, 0usize);
    let mut per_scene = vec![];
    for s in scenes {
        let a = run_pipeline(&s.data, &cfg).unwrap();
        let (e, k) = sq_error(&a.depths[reference], &s.data, reference, &planes);
        // nearest-plane quantization of the truth itself
        let gt = &s.data.truth.as_ref().unwrap()[reference].depth;
        let mut quant = gt.clone();
        for d in quant.data_mut() {
            *d = planes.depths()[planes.nearest(*d)];
        }
        let (eq, _) = sq_error(&quant, &s.data, reference, &planes);
        per_scene.push(format!("{:.3}", (e / k as f64).sqrt()));
        sq += e;
        sq_q += eq;
        n += k;
    }
    let rmse = (sq / n as f64).sqrt();
    let quant = (sq_q / n as f64).sqrt();
    let a = rmse < spacing;
    let b = rmse < quant;
    Outcome {
        pass: a && b,
        detail: format!(
            "rmse {rmse:.3} m over {n} px (per scene {}); (a) < spacing {spacing:.3}: {}; (b) < quantization baseline {quant:.3}: {}",
            per_scene.join(" "),
            verdict(a),
            verdict(b)
        ),
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "yes"
    } else {
        "no"
    }
}

fn surface_discrimination(scenes: &[SuiteScene]) -> Outcome {
    let cfg = base_config();
    let ratios: Vec<f64> = scenes
        .iter()
        .map(|s| surface_ratio(&s.spec, &run_pipeline(&s.data, &cfg).unwrap().volume))
        .collect();
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Outcome {
        pass: min >= SURFACE_RATIO_MIN,
        detail: format!("ratios {} (min {min:.2}, pinned >= {SURFACE_RATIO_MIN})", fmt_list(&ratios)),
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

/// Logits of a distribution centred on the true depth (one plane wide)
/// plus Gaussian noise; pixels without truth get noise only.
fn perturbed_logits(data: &SceneData, view: usize, planes: &DepthPlanes, rng: &mut ChaCha8Rng) -> Raster {
    let gt = &data.truth.as_ref().unwrap()[view].depth;
    let mask = valid_mask(data, view, planes);
    let m = planes.len();
    let spacing = planes.spacing();
    let mut z = Raster::zeros(gt.rows(), gt.cols(), m);
    for r in 0..gt.rows() {
        for c in 0..gt.cols() {
            let d = gt.get(r, c, 0);
            let valid = mask[r * gt.cols() + c];
            for (j, &dj) in planes.depths().iter().enumerate() {
                let centre = if valid { -0.5 * ((d - dj) / spacing).powi(2) } else { 0.0 };
                z.set(r, c, j, centre + LOGIT_NOISE * gaussian(rng));
            }
        }
    }
    z
}

fn refinement_efficacy() -> Outcome {
    let cfg = base_config();
    let planes = cfg.depth_planes().unwrap();
    let opts = RefineOptions {
        steps: REFINE_STEPS,
        step_size: REFINE_STEP_SIZE,
        ..RefineOptions::default()
    };
    let mut reductions = vec![];
    let mut monotone = true;
    for seed in 0..3u64 {
        let (_, data) = synthesize(seed, 2, 7).unwrap();
        let novel_idx = novel_view_indices(7, 2).unwrap();
        let source_idx: Vec<usize> = (0..7).filter(|i| !novel_idx.contains(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let start: Vec<ProbabilityVolume> = source_idx
            .iter()
            .map(|&i| ProbabilityVolume::from_logits(&perturbed_logits(&data, i, &planes, &mut rng)))
            .collect();
        let sources: Vec<SourceView> = source_idx
            .iter()
            .zip(&start)
            .map(|(&i, p)| SourceView {
                view: &data.views[i],
                image: &data.images[i],
                prob: p,
            })
            .collect();
        let novel: Vec<NovelView> = novel_idx
            .iter()
            .map(|&i| NovelView {
                view: &data.views[i],
                image: &data.images[i],
            })
            .collect();
        let refined = refine_probability_volume(&sources, &novel, &planes, &opts).unwrap();
        monotone &= refined.loss_trace.windows(2).all(|w| w[1] <= w[0]);
        let rmse = |vols: &[ProbabilityVolume]| {
            let (mut sq, mut n) = (0.0, 0usize);
            for (&i, p) in source_idx.iter().zip(vols) {
                let (e, k) = sq_error(&regress_depth(p, &planes).unwrap(), &data, i, &planes);
                sq += e;
                n += k;
            }
            (sq / n as f64).sqrt()
        };
        let before = rmse(&start);
        let after = rmse(&refined.volumes);
        reductions.push(1.0 - after / before);
    }
    let min = reductions.iter().cloned().fold(f64::INFINITY, f64::min);
    Outcome {
        pass: monotone && min >= REFINE_REDUCTION,
        detail: format!(
            "rmse reduction per scene {} (need >= {REFINE_REDUCTION}); loss trace non-increasing: {}",
            fmt_list(&reductions),
            verdict(monotone)
        ),
    }
}

fn topk_ablation(scenes: &[SuiteScene]) -> Outcome {
    let mut rows = vec![];
    for k in [1, 3] {
        let cfg = PipelineConfig {
            top_k: k,
            ..base_config()
        };
        let planes = cfg.depth_planes().unwrap();
        let (mut sq, mut n, mut ratio) = (0.0, 0usize, 0.0);
        for s in scenes {
            let a = run_pipeline(&s.data, &cfg).unwrap();
            for (v, d) in a.depths.iter().enumerate() {
                let (e, c) = sq_error(d, &s.data, v, &planes);
                sq += e;
                n += c;
            }
            ratio += surface_ratio(&s.spec, &a.volume);
        }
        rows.push(((sq / n as f64).sqrt(), ratio / scenes.len() as f64));
    }
    let (k1, k3) = (rows[0], rows[1]);
    let pass = k3.0 <= k1.0 && k3.1 >= k1.1;
    Outcome {
        pass,
        detail: format!(
            "k=1: rmse {:.4} ratio {:.2}; k=3: rmse {:.4} ratio {:.2}",
            k1.0, k1.1, k3.0, k3.1
        ),
    }
}

fn ground_truth_bound(scenes: &[SuiteScene]) -> Outcome {
    let cfg = base_config();
    let mut ok = true;
    let mut pairs = vec![];
    for s in scenes {
        let a = run_pipeline(&s.data, &cfg).unwrap();
        let est = surface_ratio(&s.spec, &a.volume);
        let truth: Vec<DepthProposalSet> = s
            .data
            .truth
            .as_ref()
            .unwrap()
            .iter()
            .map(|t| DepthProposalSet::from_depth(&t.depth))
            .collect();
        let gt = surface_ratio(&s.spec, &volume_with(&s.data, &a.features, &truth, &cfg));
        ok &= gt >= est;
        pairs.push(format!("{gt:.2}/{est:.2}"));
    }
    Outcome {
        pass: ok,
        detail: format!("truth/estimated ratio per scene {}", pairs.join(" ")),
    }
}

fn box_extraction() -> Outcome {
    let cfg = base_config();
    let mut all = vec![];
    let mut detections = vec![];
    for seed in SUITE_SEEDS {
        let (_, data) = synthesize(seed, 2, 10).unwrap();
        let a = run_pipeline(&data, &cfg).unwrap();
        all.extend(a.metrics.boxes.iter().map(|b| b.best_iou));
        detections.push(a.boxes.len());
    }
    let matched = all.iter().filter(|&&x| x >= BOX_IOU).count();
    Outcome {
        pass: matched == all.len(),
        detail: format!(
            "{matched}/{} gt boxes with iou >= {BOX_IOU}; ious {}; detections per scene {:?}",
            all.len(),
            fmt_list(&all),
            detections
        ),
    }
}

fn gradient_check() -> Outcome {
    let (_, data) = synthesize(9, 2, 4).unwrap();
    let cfg = base_config();
    let planes = cfg.depth_planes().unwrap();
    let novel_idx = novel_view_indices(4, 1).unwrap();
    let source_idx: Vec<usize> = (0..4).filter(|i| !novel_idx.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let (cols, rows) = data.views[0].scaled_dims(FEATURE_DOWNSAMPLE);
    let logits: Vec<Raster> = source_idx
        .iter()
        .map(|_| {
            let d = (0..rows * cols * planes.len()).map(|_| gaussian(&mut rng)).collect();
            Raster::from_vec(rows, cols, planes.len(), d).unwrap()
        })
        .collect();
    let start: Vec<ProbabilityVolume> = logits.iter().map(ProbabilityVolume::from_logits).collect();
    let sources: Vec<SourceView> = source_idx
        .iter()
        .zip(&start)
        .map(|(&i, p)| SourceView {
            view: &data.views[i],
            image: &data.images[i],
            prob: p,
        })
        .collect();
    let novel: Vec<NovelView> = novel_idx
        .iter()
        .map(|&i| NovelView {
            view: &data.views[i],
            image: &data.images[i],
        })
        .collect();
    let obj = RenderObjective::new(&sources, &novel, &planes, 3, cfg.footprint).unwrap();
    let (_, grads) = obj.loss_and_gradient(&logits).unwrap();
    let gmax = grads.iter().flat_map(|g| g.data().iter()).fold(0.0f64, |a, x| a.max(x.abs()));
    // entries that actually move the loss
    let live: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(v, g)| {
            g.data()
                .iter()
                .enumerate()
                .filter(move |(_, x)| x.abs() >= 1e-4 * gmax)
                .map(move |(i, _)| (v, i))
        })
        .collect();
    let picks: Vec<(usize, usize)> = (0..50).map(|_| live[rng.gen_range(0..live.len())]).collect();
    let errors: Vec<f64> = picks
        .par_iter()
        .map(|&(v, i)| {
            let eval = |delta: f64| {
                let mut z = logits.clone();
                z[v].data_mut()[i] += delta;
                obj.loss(&z).unwrap()
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = grads[v].data()[i];
            (a - fd).abs() / a.abs().max(fd.abs())
        })
        .collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    Outcome {
        pass: worst <= GRAD_REL_TOL,
        detail: format!(
            "50 logits of {} live, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:.0e})",
            live.len()
        ),
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_round_trip() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (spec, data) = synthesize(12, 2, 5).unwrap();
    let scene = tmp.path().join("scene");
    pipeline::write_scene_dir(&scene, &spec, &data).unwrap();
    let cfg = PipelineConfig {
        refine: true,
        refine_steps: 2,
        ..base_config()
    };
    let mut runs = vec![];
    for (name, threads) in [("a", 1), ("b", 4), ("c", 4)] {
        let out = tmp.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| pipeline::run_pipeline_dir(&scene, &out, &cfg)).unwrap();
        runs.push(dir_bytes(&out));
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let files = runs[0].len();

    let mut failures: Vec<&str> = vec![];
    let mut check = |name: &'static str, ok: bool| {
        if !ok {
            failures.push(name);
        }
    };
    let p = Path::new("mem");
    let loaded = pipeline::load_scene_dir(&scene).unwrap();
    check("scene dir", loaded.images == data.images && loaded.views == data.views);
    check(
        "scene dir truth",
        loaded.truth.as_ref().unwrap().iter().zip(data.truth.as_ref().unwrap()).all(|(a, b)| a.depth == b.depth && a.mask == b.mask),
    );
    let cams = formats::cameras_to_text(&data.views);
    check("cameras", formats::cameras_to_text(&formats::parse_cameras(&cams, p).unwrap()) == cams);
    for img in &data.images {
        let bytes = formats::encode_ppm(img).unwrap();
        let back = formats::decode_ppm(&bytes, p).unwrap();
        check("ppm", &back == img && formats::encode_ppm(&back).unwrap() == bytes);
    }
    for (name, bytes) in &runs[0] {
        let path = Path::new(name);
        let again = match path.extension().and_then(|e| e.to_str()) {
            Some("mvsr") if name.starts_with("splats") => {
                formats::splats_to_raster(&formats::splats_from_raster(&formats::decode_raster(bytes, path).unwrap()).unwrap())
            }
            Some("mvsr") => formats::decode_raster(bytes, path).unwrap(),
            _ => continue,
        };
        check("mvsr", &formats::encode_raster(&again).unwrap() == bytes);
    }
    let out_a = pipeline::OutputLayout(tmp.path().join("a"));
    let vox_bytes = std::fs::read(out_a.volume()).unwrap();
    let stored = formats::decode_voxels(&vox_bytes, p).unwrap();
    let art = pipeline::run_pipeline(&data, &cfg).unwrap();
    check("mvsv", stored == formats::StoredGrid::from_grid(&art.volume) && formats::encode_voxels(&art.volume).unwrap() == vox_bytes);
    let boxes_text = std::fs::read_to_string(out_a.boxes()).unwrap();
    check("boxes", formats::boxes_to_text(&formats::parse_boxes(&boxes_text, p).unwrap()) == boxes_text);
    let metrics_text = std::fs::read_to_string(out_a.metrics()).unwrap();
    check("metrics", formats::metrics_to_text(&formats::parse_metrics(&metrics_text, p).unwrap()) == metrics_text);
    check("metrics values", formats::parse_metrics(&metrics_text, p).unwrap() == art.metrics);
    let scene_text = formats::scene_to_text(&spec);
    check("scene", formats::parse_scene(&scene_text, p).unwrap() == spec);
    let cfg_text = std::fs::read_to_string(out_a.config()).unwrap();
    check("config", PipelineConfig::parse(&cfg_text).unwrap() == cfg);

    Outcome {
        pass: identical && failures.is_empty(),
        detail: format!(
            "{files} output files identical across 3 runs (1 and 4 threads): {}; round-trip failures: {:?}",
            verdict(identical),
            failures
        ),
    }
}

fn main() {
    let scenes = suite();
    let secs = Duration::from_secs;
    let criteria: Vec<(&str, Duration, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("normalization", secs(5), Box::new(normalization)),
        ("homography vs projection", secs(1), Box::new(homography)),
        ("top-k vs exhaustive sort", secs(1), Box::new(topk_oracle)),
        ("degenerate to vanilla", secs(10), Box::new(degenerate_to_vanilla)),
        ("depth accuracy", secs(30), Box::new(|| depth_accuracy(&scenes))),
        ("surface discrimination", secs(30), Box::new(|| surface_discrimination(&scenes))),
        ("refinement efficacy", secs(180), Box::new(refinement_efficacy)),
        ("top-k ablation", secs(60), Box::new(|| topk_ablation(&scenes))),
        ("ground-truth depth bound", secs(30), Box::new(|| ground_truth_bound(&scenes))),
        ("box extraction", secs(30), Box::new(box_extraction)),
        ("gradient check", secs(30), Box::new(gradient_check)),
        ("determinism and round trip", secs(30), Box::new(determinism_and_round_trip)),
    ];
    let mut failed = vec![];
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let o = timed(limit, f);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{:2}] {tag} {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
