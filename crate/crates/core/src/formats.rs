//! On-disk formats: camera listings, P6 images, `MVSR` rasters, `MVSV`
//! voxel grids, and line-oriented text for boxes, metrics and scenes.
//!
//! Text floats use Rust's shortest round-trip formatting, so every text
//! file parses back to the exact values that were written.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::boxes::Box3D;
use crate::camera::{CameraView, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::sampling::{VoxelGrid, VoxelGridConfig};
use crate::scenegen::{Aabb, SceneBox, SceneSpec};
use crate::splat::{GaussianSplat, GaussianSplatSet, SplatSource};

pub const RASTER_MAGIC: &[u8; 4] = b"MVSR";
pub const VOXEL_MAGIC: &[u8; 4] = b"MVSV";
/// Channels of a splat record in a raster file.
pub const SPLAT_CHANNELS: usize = 17;
/// Rotations read from text are snapped to SO(3) if this close.
const POSE_SNAP_TOL: f64 = 1e-6;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated fields of one text record.
struct Fields<'a> {
    path: &'a Path,
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, line: usize, text: &'a str) -> Self {
        Self {
            path,
            line,
            it: text.split_whitespace(),
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::format(self.path, format!("line {}: {msg}", self.line))
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.it.next().ok_or_else(|| self.err(format!("missing {what}")))?;
        tok.parse().map_err(|_| self.err(format!("bad {what} `{tok}`")))
    }

    fn float(&mut self, what: &str) -> Result<f64> {
        let v: f64 = self.next(what)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("{what} is not finite")))
        }
    }

    fn vec3(&mut self, what: &str) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.float(what)?, self.float(what)?, self.float(what)?))
    }

    fn done(mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(t) => Err(self.err(format!("trailing field `{t}`"))),
        }
    }
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

// ---- cameras ----

pub fn cameras_to_text(views: &[CameraView]) -> String {
    let mut s = String::from("# fx fy cx cy width height r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2\n");
    for v in views {
        let k = &v.intrinsics;
        write!(s, "{} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, v.width, v.height).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                write!(s, " {}", v.pose.rotation[(r, c)]).unwrap();
            }
            write!(s, " {}", v.pose.translation[r]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<CameraView>> {
    let mut out = Vec::new();
    for (line, rec) in records(text) {
        let mut f = Fields::new(path, line, rec);
        let (fx, fy, cx, cy) = (f.float("fx")?, f.float("fy")?, f.float("cx")?, f.float("cy")?);
        let (w, h): (usize, usize) = (f.next("width")?, f.next("height")?);
        let mut rot = Matrix3::zeros();
        let mut t = Vector3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rot[(r, c)] = f.float("rotation")?;
            }
            t[r] = f.float("translation")?;
        }
        let k = Intrinsics::new(fx, fy, cx, cy).map_err(|e| f.err(e))?;
        let pose = Pose::new_nearest(rot, t, POSE_SNAP_TOL).map_err(|e| f.err(e))?;
        let view = CameraView::new(k, pose, w, h).map_err(|e| f.err(e))?;
        f.done()?;
        out.push(view);
    }
    Ok(out)
}

pub fn write_cameras(path: &Path, views: &[CameraView]) -> Result<()> {
    write_bytes(path, cameras_to_text(views).as_bytes())
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraView>> {
    parse_cameras(&read_text(path)?, path)
}

// ---- P6 images ----

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds an RGB raster to the 8-bit levels a PPM stores.
pub fn quantize_u8(image: &Raster) -> Raster {
    let data = image.data().iter().map(|&x| to_u8(x) as f64 / 255.0).collect();
    Raster::from_vec(image.rows(), image.cols(), image.channels(), data).expect("same shape")
}

pub fn encode_ppm(image: &Raster) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("PPM needs 3 channels, got {}", image.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.cols(), image.rows()).into_bytes();
    out.extend(image.data().iter().map(|&x| to_u8(x)));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |m: &str| Error::format(path, m.to_string());
    // Header: magic, width, height, maxval, separated by whitespace with
    // optional comments, then exactly one whitespace byte.
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    if tokens[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad("bad PPM dimension"));
    let (w, h, max) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM (maxval 255) is supported"));
    }
    pos += 1;
    let n = w * h * 3;
    if bytes.len() < pos + n {
        return Err(bad("truncated PPM pixel data"));
    }
    if bytes.len() > pos + n {
        return Err(bad("trailing bytes after PPM pixel data"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Raster::from_vec(h, w, 3, data)
}

pub fn write_ppm(path: &Path, image: &Raster) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    decode_ppm(&read_bytes(path)?, path)
}

// ---- MVSR rasters ----

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} does not fit in u32")))
}

/// Little-endian `MVSR` bytes; values are stored as `f32`.
pub fn encode_raster(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * r.data().len());
    out.extend_from_slice(RASTER_MAGIC);
    for (n, what) in [(r.rows(), "rows"), (r.cols(), "cols"), (r.channels(), "channels")] {
        out.extend_from_slice(&dim_u32(n, what)?.to_le_bytes());
    }
    for &x in r.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        if self.take(4)? != want {
            return Err(Error::format(
                self.path,
                format!("expected magic {}", String::from_utf8_lossy(want)),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(RASTER_MAGIC)?;
    let (rows, cols, ch) = (r.u32()?, r.u32()?, r.u32()?);
    let n = rows
        .checked_mul(cols)
        .and_then(|x| x.checked_mul(ch))
        .ok_or_else(|| Error::format(path, "raster size overflow"))?;
    let data = r.floats(n)?;
    r.finish()?;
    Raster::from_vec(rows, cols, ch, data)
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    write_bytes(path, &encode_raster(r)?)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    decode_raster(&read_bytes(path)?, path)
}

/// Ground-truth depth as a one-channel raster plus a 0/1 validity raster.
pub fn write_depth(depth_path: &Path, mask_path: &Path, depth: &Raster) -> Result<()> {
    let mask = depth.data().iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect();
    let mask = Raster::from_vec(depth.rows(), depth.cols(), 1, mask)?;
    write_raster(depth_path, depth)?;
    write_raster(mask_path, &mask)
}

/// Reads depth and mask; depth at masked-out pixels is forced to the 0
/// sentinel.
pub fn read_depth(depth_path: &Path, mask_path: &Path) -> Result<(Raster, Vec<bool>)> {
    let mut depth = read_raster(depth_path)?;
    let mask = read_raster(mask_path)?;
    if depth.channels() != 1 || mask.shape() != depth.shape() {
        return Err(Error::format(mask_path, "depth and mask must be matching one-channel rasters"));
    }
    let valid: Vec<bool> = mask.data().iter().map(|&m| m > 0.5).collect();
    for (d, &v) in depth.data_mut().iter_mut().zip(&valid) {
        if !v {
            *d = 0.0;
        }
    }
    Ok((depth, valid))
}

// ---- splats ----

/// One row per splat: mean (3), opacity, quaternion w x y z (4), scales (3),
/// color (3), source view, row, col.
pub fn splats_to_raster(set: &GaussianSplatSet) -> Raster {
    let mut data = Vec::with_capacity(set.len() * SPLAT_CHANNELS);
    for s in set.splats() {
        data.extend(s.mean.iter());
        data.push(s.opacity);
        data.extend(s.rotation);
        data.extend(s.scales.iter());
        data.extend(s.color);
        data.extend([s.source.view as f64, s.source.row as f64, s.source.col as f64]);
    }
    Raster::from_vec(set.len(), 1, SPLAT_CHANNELS, data).expect("row layout")
}

pub fn splats_from_raster(r: &Raster) -> Result<GaussianSplatSet> {
    if r.channels() != SPLAT_CHANNELS || r.cols() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "splat raster must be N x 1 x {SPLAT_CHANNELS}, got {:?}",
            r.shape()
        )));
    }
    let index = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::InvalidArgument(format!("bad splat source index {x}")))
        }
    };
    let mut splats = Vec::with_capacity(r.rows());
    for p in r.data().chunks_exact(SPLAT_CHANNELS) {
        // f32 storage denormalizes the quaternion slightly
        let q = [p[4], p[5], p[6], p[7]];
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        splats.push(GaussianSplat {
            mean: Vector3::new(p[0], p[1], p[2]),
            opacity: p[3],
            rotation: q.map(|x| x / qn),
            scales: Vector3::new(p[8], p[9], p[10]),
            color: [p[11], p[12], p[13]],
            source: SplatSource {
                view: index(p[14])?,
                row: index(p[15])?,
                col: index(p[16])?,
            },
        });
    }
    GaussianSplatSet::new(splats)
}

pub fn write_splats(path: &Path, set: &GaussianSplatSet) -> Result<()> {
    write_raster(path, &splats_to_raster(set))
}

pub fn read_splats(path: &Path) -> Result<GaussianSplatSet> {
    splats_from_raster(&read_raster(path)?).map_err(|e| Error::format(path, e.to_string()))
}

// ---- MVSV voxel grids ----

/// The contents of a voxel file: grid placement and, per voxel, the
/// aggregated feature `v̂` followed by the surface score `s`, all `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredGrid {
    pub config: VoxelGridConfig,
    pub channels: usize,
    pub features: Vec<f64>,
    pub scores: Vec<f64>,
}

impl StoredGrid {
    /// What [`encode_voxels`] keeps of `grid`.
    pub fn from_grid(grid: &VoxelGrid) -> Self {
        let q = |x: f64| x as f32 as f64;
        let c = grid.config();
        Self {
            config: VoxelGridConfig {
                dims: c.dims,
                origin: c.origin.map(q),
                pitch: c.pitch.map(q),
            },
            channels: grid.channels(),
            features: grid.features().iter().map(|&x| q(x)).collect(),
            scores: grid.scores().iter().map(|&x| q(x)).collect(),
        }
    }

    pub fn feature(&self, index: usize) -> Vec<f64> {
        let s = self.scores[index];
        self.features[index * self.channels..(index + 1) * self.channels]
            .iter()
            .map(|f| s * f)
            .collect()
    }
}

pub fn encode_voxels(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let c = grid.config();
    let ch = grid.channels();
    let mut out = Vec::with_capacity(40 + 4 * grid.len() * (ch + 1));
    out.extend_from_slice(VOXEL_MAGIC);
    for (n, what) in [(c.dims[0], "nx"), (c.dims[1], "ny"), (c.dims[2], "nz"), (ch, "channels")] {
        out.extend_from_slice(&dim_u32(n, what)?.to_le_bytes());
    }
    for x in c.origin.iter().chain(c.pitch.iter()) {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    for v in 0..grid.len() {
        for &f in grid.aggregated(v) {
            out.extend_from_slice(&(f as f32).to_le_bytes());
        }
        out.extend_from_slice(&(grid.score(v) as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_voxels(bytes: &[u8], path: &Path) -> Result<StoredGrid> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(VOXEL_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let channels = r.u32()?;
    let origin = Vector3::new(r.f32()?, r.f32()?, r.f32()?);
    let pitch = Vector3::new(r.f32()?, r.f32()?, r.f32()?);
    let config = VoxelGridConfig { dims, origin, pitch };
    config.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let n = config.len();
    let record = r.floats(n.checked_mul(channels + 1).ok_or_else(|| Error::format(path, "size overflow"))?)?;
    r.finish()?;
    let mut features = Vec::with_capacity(n * channels);
    let mut scores = Vec::with_capacity(n);
    for rec in record.chunks_exact(channels + 1) {
        features.extend_from_slice(&rec[..channels]);
        scores.push(rec[channels]);
    }
    Ok(StoredGrid {
        config,
        channels,
        features,
        scores,
    })
}

pub fn write_voxels(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write_bytes(path, &encode_voxels(grid)?)
}

pub fn read_voxels(path: &Path) -> Result<StoredGrid> {
    decode_voxels(&read_bytes(path)?, path)
}

// ---- boxes ----

pub fn boxes_to_text(boxes: &[Box3D]) -> String {
    let mut s = String::from("# cx cy cz w h l yaw score\n");
    for b in boxes {
        writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.yaw, b.score
        )
        .unwrap();
    }
    s
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (line, rec) in records(text) {
        let mut f = Fields::new(path, line, rec);
        let center = f.vec3("center")?;
        let size = f.vec3("size")?;
        let yaw = f.float("yaw")?;
        let score = f.float("score")?;
        if size.iter().any(|&x| x <= 0.0) {
            return Err(f.err("box sizes must be positive"));
        }
        f.done()?;
        out.push(Box3D { center, size, yaw, score });
    }
    Ok(out)
}

pub fn write_boxes(path: &Path, boxes: &[Box3D]) -> Result<()> {
    write_bytes(path, boxes_to_text(boxes).as_bytes())
}

pub fn read_boxes(path: &Path) -> Result<Vec<Box3D>> {
    parse_boxes(&read_text(path)?, path)
}

// ---- metrics ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewDepthMetrics {
    pub view: usize,
    pub rmse: f64,
    pub abs_rel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxMatch {
    pub gt: usize,
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub depth: Vec<ViewDepthMetrics>,
    pub boxes: Vec<BoxMatch>,
    pub detections: usize,
    /// Rendering loss before and after each refinement step, if refined.
    pub loss_trace: Vec<f64>,
}

impl Metrics {
    pub fn mean_rmse(&self) -> Option<f64> {
        (!self.depth.is_empty()).then(|| self.depth.iter().map(|d| d.rmse).sum::<f64>() / self.depth.len() as f64)
    }
}

/// One record per line, tagged by its first field:
/// `depth <view> <rmse> <abs_rel>`, `box <gt index> <best iou>`,
/// `detections <count>`, `loss <step> <value>`.
pub fn metrics_to_text(m: &Metrics) -> String {
    let mut s = String::new();
    for d in &m.depth {
        writeln!(s, "depth {} {} {}", d.view, d.rmse, d.abs_rel).unwrap();
    }
    for b in &m.boxes {
        writeln!(s, "box {} {}", b.gt, b.best_iou).unwrap();
    }
    writeln!(s, "detections {}", m.detections).unwrap();
    for (i, l) in m.loss_trace.iter().enumerate() {
        writeln!(s, "loss {i} {l}").unwrap();
    }
    s
}

pub fn parse_metrics(text: &str, path: &Path) -> Result<Metrics> {
    let mut m = Metrics::default();
    let mut have_detections = false;
    for (line, rec) in records(text) {
        let mut f = Fields::new(path, line, rec);
        let tag: String = f.next("record tag")?;
        match tag.as_str() {
            "depth" => m.depth.push(ViewDepthMetrics {
                view: f.next("view")?,
                rmse: f.float("rmse")?,
                abs_rel: f.float("abs_rel")?,
            }),
            "box" => m.boxes.push(BoxMatch {
                gt: f.next("gt index")?,
                best_iou: f.float("iou")?,
            }),
            "detections" => {
                m.detections = f.next("count")?;
                have_detections = true;
            }
            "loss" => {
                let step: usize = f.next("step")?;
                if step != m.loss_trace.len() {
                    return Err(f.err(format!("loss step {step} out of order")));
                }
                m.loss_trace.push(f.float("loss")?);
            }
            other => return Err(f.err(format!("unknown record `{other}`"))),
        }
        f.done()?;
    }
    if !have_detections {
        return Err(Error::format(path, "missing `detections` record"));
    }
    Ok(m)
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<()> {
    write_bytes(path, metrics_to_text(m).as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    parse_metrics(&read_text(path)?, path)
}

// ---- scene specs ----

/// `room <min xyz> <max xyz>`, `walls <bool>`, `wall <seed> <rgb>`,
/// `background <rgb>`, then `box <min xyz> <max xyz> <seed> <rgb>` per box.
pub fn scene_to_text(scene: &SceneSpec) -> String {
    let v = |x: &Vector3<f64>| format!("{} {} {}", x.x, x.y, x.z);
    let c = |x: &[f64; 3]| format!("{} {} {}", x[0], x[1], x[2]);
    let mut s = String::new();
    writeln!(s, "room {} {}", v(&scene.room.min), v(&scene.room.max)).unwrap();
    writeln!(s, "walls {}", scene.walls).unwrap();
    writeln!(s, "wall {} {}", scene.wall_texture_seed, c(&scene.wall_color)).unwrap();
    writeln!(s, "background {}", c(&scene.background)).unwrap();
    for b in &scene.boxes {
        writeln!(
            s,
            "box {} {} {} {}",
            v(&b.bounds.min),
            v(&b.bounds.max),
            b.texture_seed,
            c(&b.base_color)
        )
        .unwrap();
    }
    s
}

pub fn parse_scene(text: &str, path: &Path) -> Result<SceneSpec> {
    let mut room = None;
    let mut walls = None;
    let mut wall = None;
    let mut background = None;
    let mut boxes = Vec::new();
    for (line, rec) in records(text) {
        let mut f = Fields::new(path, line, rec);
        let tag: String = f.next("record tag")?;
        let rgb = |f: &mut Fields| -> Result<[f64; 3]> { Ok(f.vec3("color")?.into()) };
        match tag.as_str() {
            "room" => {
                let (lo, hi) = (f.vec3("room min")?, f.vec3("room max")?);
                room = Some(Aabb::new(lo, hi).map_err(|e| f.err(e))?);
            }
            "walls" => walls = Some(f.next::<bool>("walls flag")?),
            "wall" => wall = Some((f.next::<u64>("wall seed")?, rgb(&mut f)?)),
            "background" => background = Some(rgb(&mut f)?),
            "box" => {
                let (lo, hi) = (f.vec3("box min")?, f.vec3("box max")?);
                let bounds = Aabb::new(lo, hi).map_err(|e| f.err(e))?;
                let texture_seed = f.next("texture seed")?;
                let base_color = rgb(&mut f)?;
                boxes.push(SceneBox {
                    bounds,
                    texture_seed,
                    base_color,
                });
            }
            other => return Err(f.err(format!("unknown record `{other}`"))),
        }
        f.done()?;
    }
    let missing = |what: &str| Error::format(path, format!("missing `{what}` record"));
    let (wall_texture_seed, wall_color) = wall.ok_or_else(|| missing("wall"))?;
    let scene = SceneSpec {
        room: room.ok_or_else(|| missing("room"))?,
        walls: walls.ok_or_else(|| missing("walls"))?,
        wall_texture_seed,
        wall_color,
        background: background.ok_or_else(|| missing("background"))?,
        boxes,
    };
    scene.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &SceneSpec) -> Result<()> {
    write_bytes(path, scene_to_text(scene).as_bytes())
}

pub fn read_scene(path: &Path) -> Result<SceneSpec> {
    parse_scene(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, make_trajectory};
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn cameras_round_trip_exactly() {
        let scene = generate_scene(3, 2).unwrap();
        let views = make_trajectory(&scene, 5, 3).unwrap();
        let text = cameras_to_text(&views);
        let back = parse_cameras(&text, p()).unwrap();
        assert_eq!(back, views);
        assert_eq!(cameras_to_text(&back), text);
    }

    #[test]
    fn camera_errors_name_the_line() {
        let e = parse_cameras("# header\n1 1 0 0 8 8 1 0 0 0 0 1 0 0 0 0 1\n", p()).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_cameras("1 1 0 0 8 8 2 0 0 0 0 1 0 0 0 0 1 0\n", p()).unwrap_err();
        assert!(e.to_string().contains("orthonormal"), "{e}");
        assert!(parse_cameras("1 1 0 0 8 8 1 0 0 0 0 1 0 0 0 0 1 0 9\n", p()).is_err());
    }

    #[test]
    fn ppm_layout() {
        let img = Raster::from_vec(1, 2, 3, vec![1.0, 0.0, 0.5, 0.0, 1.0, 2.0]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 128, 0, 255, 255]);
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6 # c\n# more\n1 1\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        let r = decode_ppm(&bytes, p()).unwrap();
        assert_eq!(r.data(), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0]);
        assert!(decode_ppm(b"P3\n1 1\n255\n123", p()).is_err());
        assert!(decode_ppm(b"P6\n2 1\n255\n123", p()).is_err());
    }

    #[test]
    fn raster_layout() {
        let r = Raster::from_vec(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let b = encode_raster(&r).unwrap();
        assert_eq!(&b[..4], b"MVSR");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..], &(-2.5f32).to_le_bytes());
        assert!(decode_raster(&b[..19], p()).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_raster(&extra, p()).is_err());
    }

    #[test]
    fn voxel_layout_and_round_trip() {
        let cfg = VoxelGridConfig {
            dims: [2, 1, 1],
            origin: Vector3::new(-3.2, 0.0, 1.0),
            pitch: Vector3::new(0.16, 0.16, 0.2),
        };
        let g = VoxelGrid::new(cfg, 2, vec![1.0, 2.0, 0.0, 0.0], vec![0.5, 0.0], vec![2, 0]).unwrap();
        let b = encode_voxels(&g).unwrap();
        assert_eq!(&b[..4], b"MVSV");
        assert_eq!(b.len(), 4 + 16 + 24 + 2 * 3 * 4);
        let back = decode_voxels(&b, p()).unwrap();
        assert_eq!(back, StoredGrid::from_grid(&g));
        assert_eq!(back.feature(0), vec![0.5, 1.0]);
        assert_eq!(back.config.origin.x, -3.2f32 as f64);
    }

    #[test]
    fn depth_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Raster::from_vec(1, 3, 1, vec![0.0, 1.5, 2.25]).unwrap();
        let (dp, mp) = (dir.path().join("d.mvsr"), dir.path().join("m.mvsr"));
        write_depth(&dp, &mp, &d).unwrap();
        let (back, mask) = read_depth(&dp, &mp).unwrap();
        assert_eq!(back, d);
        assert_eq!(mask, vec![false, true, true]);
    }

    #[test]
    fn boxes_round_trip() {
        let b = vec![Box3D {
            center: Vector3::new(0.1, -0.2, 1.0 / 3.0),
            size: Vector3::new(0.5, 0.25, 1e-3),
            yaw: 0.0,
            score: 0.731,
        }];
        let text = boxes_to_text(&b);
        assert_eq!(parse_boxes(&text, p()).unwrap(), b);
        assert!(parse_boxes("0 0 0 1 1 0 0 1\n", p()).is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let m = Metrics {
            depth: vec![
                ViewDepthMetrics { view: 0, rmse: 0.31, abs_rel: 0.1 },
                ViewDepthMetrics { view: 1, rmse: 1.0 / 7.0, abs_rel: 0.0 },
            ],
            boxes: vec![BoxMatch { gt: 0, best_iou: 0.42 }],
            detections: 3,
            loss_trace: vec![0.1, 0.09],
        };
        let text = metrics_to_text(&m);
        assert_eq!(parse_metrics(&text, p()).unwrap(), m);
        assert!(parse_metrics("depth 0 1 1\n", p()).is_err());
        assert!(parse_metrics("detections 1\nfoo 2\n", p()).is_err());
    }

    #[test]
    fn scene_round_trip() {
        for n in [0, 2, 3] {
            let s = generate_scene(11, n).unwrap();
            let text = scene_to_text(&s);
            assert_eq!(parse_scene(&text, p()).unwrap(), s);
        }
        assert!(parse_scene("walls true\n", p()).is_err());
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_vec(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let path = dir.path().join("sub/img.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, quantize_u8(&img));
        let r = Raster::from_vec(2, 1, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let path = dir.path().join("r.mvsr");
        write_raster(&path, &r).unwrap();
        assert_eq!(read_raster(&path).unwrap(), r.quantized_f32());
        let e = read_raster(&dir.path().join("missing.mvsr")).unwrap_err();
        assert!(e.to_string().contains("missing.mvsr"));
    }

    fn arb_splat() -> impl Strategy<Value = GaussianSplat> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            0.0f64..=1.0,
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(1e-3f64..0.5),
            prop::array::uniform3(0.0f64..=1.0),
            (0usize..8, 0usize..60, 0usize..80),
        )
            .prop_filter("non-zero quaternion", |t| t.2.iter().map(|x| x * x).sum::<f64>() > 0.01)
            .prop_map(|(m, a, q, s, c, (view, row, col))| {
                let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                GaussianSplat {
                    mean: Vector3::from(m),
                    opacity: a,
                    rotation: q.map(|x| x / n),
                    scales: Vector3::from(s),
                    color: c,
                    source: SplatSource { view, row, col },
                }
            })
    }

    proptest! {
        #[test]
        fn raster_bytes_are_stable(rows in 0usize..5, cols in 0usize..5, ch in 1usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols * ch).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let r = Raster::from_vec(rows, cols, ch, data).unwrap();
            let bytes = encode_raster(&r).unwrap();
            let back = decode_raster(&bytes, p()).unwrap();
            prop_assert_eq!(&back, &r.quantized_f32());
            prop_assert_eq!(encode_raster(&back).unwrap(), bytes);
        }

        #[test]
        fn ppm_bytes_are_stable(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let img = Raster::from_vec(rows, cols, 3, data).unwrap();
            let bytes = encode_ppm(&img).unwrap();
            let back = decode_ppm(&bytes, p()).unwrap();
            prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
            prop_assert_eq!(back, quantize_u8(&img));
        }

        #[test]
        fn splat_records_round_trip(splats in prop::collection::vec(arb_splat(), 0..12)) {
            let set = GaussianSplatSet::new(splats).unwrap();
            let bytes = encode_raster(&splats_to_raster(&set)).unwrap();
            let back = splats_from_raster(&decode_raster(&bytes, p()).unwrap()).unwrap();
            prop_assert_eq!(back.len(), set.len());
            let again = encode_raster(&splats_to_raster(&back)).unwrap();
            // Only the renormalized quaternion may move, by at most an f32 ulp.
            for (i, (a, b)) in again.chunks_exact(4).zip(bytes.chunks_exact(4)).enumerate() {
                let field = i.checked_sub(4).map(|k| k % SPLAT_CHANNELS);
                if matches!(field, Some(4..=7)) {
                    let (x, y) = (f32::from_le_bytes(a.try_into().unwrap()), f32::from_le_bytes(b.try_into().unwrap()));
                    prop_assert!((x - y).abs() <= 2.0 * f32::EPSILON, "{} vs {}", x, y);
                } else {
                    prop_assert_eq!(a, b);
                }
            }
            for (a, b) in back.splats().iter().zip(set.splats()) {
                prop_assert_eq!(a.source, b.source);
                prop_assert!((a.mean - b.mean).amax() < 1e-5);
            }
        }

        #[test]
        fn axis_aligned_splats_round_trip_exactly(splats in prop::collection::vec(arb_splat(), 0..12)) {
            let splats: Vec<GaussianSplat> = splats.into_iter().map(|s| GaussianSplat { rotation: [1.0, 0.0, 0.0, 0.0], ..s }).collect();
            let set = GaussianSplatSet::new(splats).unwrap();
            let stored = splats_to_raster(&set).quantized_f32();
            let bytes = encode_raster(&stored).unwrap();
            let back = splats_from_raster(&decode_raster(&bytes, p()).unwrap()).unwrap();
            prop_assert_eq!(splats_to_raster(&back), stored);
        }

        #[test]
        fn box_text_round_trip(b in prop::collection::vec((prop::array::uniform3(-9.0f64..9.0), prop::array::uniform3(1e-3f64..4.0), 0.0f64..=1.0), 0..6)) {
            let boxes: Vec<Box3D> = b.into_iter().map(|(c, s, score)| Box3D { center: c.into(), size: s.into(), yaw: 0.0, score }).collect();
            prop_assert_eq!(parse_boxes(&boxes_to_text(&boxes), p()).unwrap(), boxes);
        }
    }
}
