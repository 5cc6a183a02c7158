//! Pipeline configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::costvol::{DepthPlanes, DEFAULT_COST_PENALTY, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::sampling::{VoxelGridConfig, DEFAULT_DELTA, DEFAULT_TOP_K};
use crate::splat::{RefineOptions, DEFAULT_FOOTPRINT};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub planes: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub top_k: usize,
    /// Depth gate half-width around each proposal (meters).
    pub window: f64,
    pub temperature: f64,
    pub cost_penalty: f64,
    /// Neighbouring views used to build each reference view's cost volume.
    pub source_views: usize,
    pub grid: VoxelGridConfig,
    /// Splat footprint scale: σ = footprint · depth / focal.
    pub footprint: f64,
    pub refine: bool,
    pub refine_steps: usize,
    pub refine_step_size: f64,
    /// Views held out as rendering targets during refinement.
    pub refine_novel_views: usize,
    pub refine_sources_per_novel: usize,
    pub box_threshold: f64,
    pub box_min_voxels: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let refine = RefineOptions::default();
        Self {
            planes: 12,
            depth_min: 0.2,
            depth_max: 5.0,
            top_k: DEFAULT_TOP_K,
            window: DEFAULT_DELTA,
            temperature: DEFAULT_TEMPERATURE,
            cost_penalty: DEFAULT_COST_PENALTY,
            source_views: 2,
            grid: VoxelGridConfig::default(),
            footprint: DEFAULT_FOOTPRINT,
            refine: false,
            refine_steps: refine.steps,
            refine_step_size: refine.step_size,
            refine_novel_views: 2,
            refine_sources_per_novel: refine.sources_per_novel,
            box_threshold: 0.5,
            box_min_voxels: 4,
        }
    }
}

/// Every key accepted by [`PipelineConfig::parse`], in output order.
pub const KEYS: &[&str] = &[
    "planes",
    "depth_min",
    "depth_max",
    "top_k",
    "window",
    "temperature",
    "cost_penalty",
    "source_views",
    "grid_dims",
    "grid_origin",
    "grid_pitch",
    "footprint",
    "refine",
    "refine_steps",
    "refine_step_size",
    "refine_novel_views",
    "refine_sources_per_novel",
    "box_threshold",
    "box_min_voxels",
];

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} must be positive")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be at least 1")))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes < 2 {
            return Err(Error::InvalidArgument(format!("planes = {} must be at least 2", self.planes)));
        }
        positive("depth_min", self.depth_min)?;
        positive("depth_max", self.depth_max)?;
        if self.depth_min >= self.depth_max {
            return Err(Error::InvalidArgument(format!(
                "depth_min {} must be below depth_max {}",
                self.depth_min, self.depth_max
            )));
        }
        nonzero("top_k", self.top_k)?;
        if self.top_k > self.planes {
            return Err(Error::InvalidArgument(format!(
                "top_k = {} exceeds planes = {}",
                self.top_k, self.planes
            )));
        }
        positive("window", self.window)?;
        positive("temperature", self.temperature)?;
        positive("cost_penalty", self.cost_penalty)?;
        nonzero("source_views", self.source_views)?;
        self.grid.validate()?;
        positive("footprint", self.footprint)?;
        nonzero("refine_steps", self.refine_steps)?;
        positive("refine_step_size", self.refine_step_size)?;
        nonzero("refine_novel_views", self.refine_novel_views)?;
        nonzero("refine_sources_per_novel", self.refine_sources_per_novel)?;
        if !(self.box_threshold > 0.0 && self.box_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "box_threshold = {} must lie in (0, 1]",
                self.box_threshold
            )));
        }
        nonzero("box_min_voxels", self.box_min_voxels)
    }

    pub fn depth_planes(&self) -> Result<DepthPlanes> {
        DepthPlanes::uniform(self.depth_min, self.depth_max, self.planes)
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            steps: self.refine_steps,
            step_size: self.refine_step_size,
            sources_per_novel: self.refine_sources_per_novel,
            beta: self.footprint,
        }
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = vec![false; KEYS.len()];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {lineno}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::InvalidArgument(format!("line {lineno}: unknown key `{key}`")))?;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(Error::InvalidArgument(format!("line {lineno}: duplicate key `{key}`")));
            }
            cfg.set(key, value)
                .map_err(|e| Error::InvalidArgument(format!("line {lineno}: {key}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "planes" => self.planes = int(value)?,
            "depth_min" => self.depth_min = float(value)?,
            "depth_max" => self.depth_max = float(value)?,
            "top_k" => self.top_k = int(value)?,
            "window" => self.window = float(value)?,
            "temperature" => self.temperature = float(value)?,
            "cost_penalty" => self.cost_penalty = float(value)?,
            "source_views" => self.source_views = int(value)?,
            "grid_dims" => {
                let v = triple(value, int)?;
                self.grid.dims = v;
            }
            "grid_origin" => self.grid.origin = Vector3::from(triple(value, float)?),
            "grid_pitch" => self.grid.pitch = Vector3::from(triple(value, float)?),
            "footprint" => self.footprint = float(value)?,
            "refine" => {
                self.refine = value
                    .parse()
                    .map_err(|_| format!("`{value}` is not true or false"))?
            }
            "refine_steps" => self.refine_steps = int(value)?,
            "refine_step_size" => self.refine_step_size = float(value)?,
            "refine_novel_views" => self.refine_novel_views = int(value)?,
            "refine_sources_per_novel" => self.refine_sources_per_novel = int(value)?,
            "box_threshold" => self.box_threshold = float(value)?,
            "box_min_voxels" => self.box_min_voxels = int(value)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Text form accepted by [`parse`](Self::parse); floats are printed in
    /// shortest round-trip form so parsing the output restores `self`.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("planes", self.planes.to_string());
        put("depth_min", self.depth_min.to_string());
        put("depth_max", self.depth_max.to_string());
        put("top_k", self.top_k.to_string());
        put("window", self.window.to_string());
        put("temperature", self.temperature.to_string());
        put("cost_penalty", self.cost_penalty.to_string());
        put("source_views", self.source_views.to_string());
        put("grid_dims", format!("{},{},{}", g.dims[0], g.dims[1], g.dims[2]));
        put("grid_origin", format!("{},{},{}", g.origin.x, g.origin.y, g.origin.z));
        put("grid_pitch", format!("{},{},{}", g.pitch.x, g.pitch.y, g.pitch.z));
        put("footprint", self.footprint.to_string());
        put("refine", self.refine.to_string());
        put("refine_steps", self.refine_steps.to_string());
        put("refine_step_size", self.refine_step_size.to_string());
        put("refine_novel_views", self.refine_novel_views.to_string());
        put("refine_sources_per_novel", self.refine_sources_per_novel.to_string());
        put("box_threshold", self.box_threshold.to_string());
        put("box_min_voxels", self.box_min_voxels.to_string());
        s
    }
}

fn int(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn triple<T: Copy + Default>(
    v: &str,
    parse: fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("`{v}` needs three comma-separated values"));
    }
    let mut out = [T::default(); 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse(p)?;
    }
    Ok(out)
}
