//! Pinhole cameras: projection, pixel rays, intrinsic rescaling, relative
//! poses and the fronto-parallel plane homography used by the sweep.
//!
//! Pixel coordinates follow the pixel-center convention: integer `(u, v)` is
//! the center of that cell, so a grid of width `w` covers `[-0.5, w - 0.5)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Depth at or below which a point counts as behind the image plane.
pub const MIN_DEPTH: f64 = 1e-6;

/// Descriptor grids are this many times smaller than the image.
pub const FEATURE_DOWNSAMPLE: usize = 4;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Maps a camera-frame point to pixel coordinates. The caller checks depth.
    #[inline]
    pub fn to_pixel(&self, x: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        )
    }

    /// Camera-frame point at depth 1 through pixel `(u, v)`.
    #[inline]
    pub fn unproject_unit(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Rescales intrinsics for an image resized by `factor` (0.25 for a 4x
/// downsample), keeping pixel centers aligned.
pub fn scale_intrinsics(k: &Intrinsics, factor: f64) -> Intrinsics {
    debug_assert!(factor > 0.0);
    Intrinsics {
        fx: k.fx * factor,
        fy: k.fy * factor,
        cx: (k.cx + 0.5) * factor - 0.5,
        cy: (k.cy + 0.5) * factor - 0.5,
    }
}

/// World-to-camera rigid transform `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(err <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (|RtR - I| = {err:e}, det = {det})"
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Like [`Pose::new`] but snaps a nearly orthonormal matrix (within
    /// `tol`) onto the closest rotation.
    pub fn new_nearest(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        if let Ok(p) = Self::new(rotation, translation) {
            return Ok(p);
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= tol) || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (|RtR - I| = {err:e})"
            )));
        }
        let svd = rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        Self::new(u * vt, translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with world `up` mapped to image
    /// up (camera +y points down the image).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidArgument("eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidArgument("view direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Ok(Self {
            rotation,
            translation,
        })
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-frame direction of the camera's optical axis.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

/// Pose of camera `j` expressed in the frame of camera `i`.
pub fn relative_pose(pose_i: &Pose, pose_j: &Pose) -> Pose {
    let rotation = pose_j.rotation * pose_i.rotation.transpose();
    let translation = pose_j.translation - rotation * pose_i.translation;
    Pose {
        rotation,
        translation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, width: usize, height: usize) -> Result<Self> {
        if width < 4 || height < 4 {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} is smaller than 4x4"
            )));
        }
        if !width.is_multiple_of(FEATURE_DOWNSAMPLE) || !height.is_multiple_of(FEATURE_DOWNSAMPLE) {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} is not divisible by {FEATURE_DOWNSAMPLE}"
            )));
        }
        Ok(Self {
            intrinsics,
            pose,
            width,
            height,
        })
    }

    pub fn scaled_intrinsics(&self, scale: usize) -> Intrinsics {
        if scale == 1 {
            self.intrinsics
        } else {
            scale_intrinsics(&self.intrinsics, 1.0 / scale as f64)
        }
    }

    /// `(width, height)` of the grid downsampled by `scale`.
    pub fn scaled_dims(&self, scale: usize) -> (usize, usize) {
        (self.width / scale, self.height / scale)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }
}

#[inline]
pub(crate) fn in_bounds(u: f64, v: f64, width: usize, height: usize) -> bool {
    u >= -0.5 && v >= -0.5 && u < width as f64 - 0.5 && v < height as f64 - 0.5
}

/// Integer cell containing a pixel-center coordinate, assuming it is in bounds.
#[inline]
pub(crate) fn nearest_cell(u: f64, v: f64) -> (usize, usize) {
    ((u + 0.5).floor() as usize, (v + 0.5).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z.
    pub depth: f64,
    pub valid: bool,
}

/// Projects a world point into `view` downsampled by `scale`.
pub fn project(p: &Vector3<f64>, view: &CameraView, scale: usize) -> Projection {
    let k = view.scaled_intrinsics(scale.max(1));
    let (w, h) = view.scaled_dims(scale.max(1));
    let x = view.pose.transform(p);
    if x.z <= MIN_DEPTH {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth: x.z,
            valid: false,
        };
    }
    let (u, v) = k.to_pixel(&x);
    Projection {
        u,
        v,
        depth: x.z,
        valid: in_bounds(u, v, w, h),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
    /// Cosine between `direction` and the optical axis.
    pub axis_cosine: f64,
}

impl Ray {
    /// Distance along the ray that reaches camera-frame depth `depth`.
    #[inline]
    pub fn ray_depth(&self, depth: f64) -> f64 {
        depth / self.axis_cosine
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// World point on the ray at camera-frame depth `depth`.
    #[inline]
    pub fn at_depth(&self, depth: f64) -> Vector3<f64> {
        self.at(self.ray_depth(depth))
    }
}

/// Ray through the center of pixel `(u, v)` of `view` downsampled by `scale`.
pub fn backproject_ray(u: f64, v: f64, view: &CameraView, scale: usize) -> Result<Ray> {
    let scale = scale.max(1);
    let (w, h) = view.scaled_dims(scale);
    if !in_bounds(u, v, w, h) {
        return Err(Error::OutOfBounds {
            u,
            v,
            width: w,
            height: h,
        });
    }
    Ok(backproject_unchecked(u, v, &view.scaled_intrinsics(scale), &view.pose))
}

#[inline]
pub(crate) fn backproject_unchecked(u: f64, v: f64, k: &Intrinsics, pose: &Pose) -> Ray {
    let cam = k.unproject_unit(u, v);
    let norm = cam.norm();
    let direction = pose.rotation.transpose() * (cam / norm);
    Ray {
        origin: pose.center(),
        direction,
        axis_cosine: 1.0 / norm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Maps reference pixel `q` on the fronto-parallel plane at depth `depth`
/// into the source grid of size `source_dims` (width, height).
pub fn homography_warp(
    q: (f64, f64),
    depth: f64,
    k_ref: &Intrinsics,
    k_src: &Intrinsics,
    rel: &Pose,
    source_dims: (usize, usize),
) -> Warp {
    let x_ref = k_ref.unproject_unit(q.0, q.1) * depth;
    let x_src = rel.transform(&x_ref);
    if x_src.z <= MIN_DEPTH {
        return Warp {
            u: f64::NAN,
            v: f64::NAN,
            valid: false,
        };
    }
    let (u, v) = k_src.to_pixel(&x_src);
    Warp {
        u,
        v,
        valid: in_bounds(u, v, source_dims.0, source_dims.1),
    }
}
