//! Pinhole cameras, rays and plane-induced homographies.
//!
//! Pixel convention: `(u, v)` = (column, row) with the origin at the center of
//! the top-left pixel. Camera frame: `x` right, `y` down, `z` forward; depth
//! is the camera-frame `z`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Intrinsics `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`, in pixels.
    pub k: Mat3,
    /// World-to-camera rotation.
    pub r: Mat3,
    /// World-to-camera translation.
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn behind_camera(&self) -> bool {
        self.depth <= 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub pixel: (f64, f64),
}

impl Ray {
    /// Point at distance `s` along the ray.
    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.dir * s
    }
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let cam = Self { k, r, t, width, height, near, far };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let rrt = self.r * self.r.transpose();
        if (rrt - Mat3::identity()).abs().max() > 1e-6 || (self.r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera rotation is not orthonormal with det +1"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!(
                "camera depth bounds must satisfy 0 < near < far (near {}, far {})",
                self.near, self.far
            )));
        }
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 || k[(0, 1)] != 0.0 {
            return Err(Error::invalid("intrinsics must be zero-skew [[fx,0,cx],[0,fy,cy],[0,0,1]]"));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be nonzero"));
        }
        Ok(())
    }

    pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat3 {
        Mat3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    /// Camera at `eye` looking at `target`, with `up` as the world up hint.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        k: Mat3,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let fwd = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: eye coincides with target"))?;
        let right = fwd
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: view direction parallel to up"))?;
        let down = fwd.cross(&right);
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        Self::new(k, r, t, width, height, near, far)
    }

    /// Camera center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    /// Optical axis in world coordinates (third row of `R`).
    pub fn principal_axis(&self) -> Vec3 {
        self.r.row(2).transpose()
    }

    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }

    pub fn project(&self, point: &Vec3) -> Projection {
        let pc = self.r * point + self.t;
        let q = self.k * pc;
        Projection {
            u: q.x / q.z,
            v: q.y / q.z,
            depth: pc.z,
        }
    }

    /// World point at camera-frame depth `z` on the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let pc = self.k.try_inverse().expect("valid intrinsics") * Vec3::new(u, v, 1.0) * z;
        self.r.transpose() * (pc - self.t)
    }

    /// Ray direction (world) with unit camera-frame depth, i.e. not normalized.
    pub fn ray_direction_z1(&self, u: f64, v: f64) -> Vec3 {
        self.r.transpose() * (self.k.try_inverse().expect("valid intrinsics") * Vec3::new(u, v, 1.0))
    }

    pub fn ray_for_pixel(&self, u: f64, v: f64) -> Ray {
        Ray {
            origin: self.center(),
            dir: self.ray_direction_z1(u, v).normalize(),
            pixel: (u, v),
        }
    }
}

/// Unnormalized decomposition `H(z) = a + b / z` of the plane-sweep
/// homography mapping target pixels to source pixels.
#[derive(Clone, Copy, Debug)]
pub struct HomographyParts {
    pub a: Mat3,
    pub b: Mat3,
}

impl HomographyParts {
    pub fn new(src: &Camera, tgt: &Camera) -> Self {
        let kt_inv = tgt.k.try_inverse().expect("valid intrinsics");
        let rt_inv = tgt.r.transpose();
        let offset = src.r.transpose() * src.t - rt_inv * tgt.t;
        let axis_row = tgt.principal_axis().transpose();
        let a = src.k * src.r * rt_inv * kt_inv;
        let b = src.k * src.r * (offset * axis_row) * rt_inv * kt_inv;
        Self { a, b }
    }

    pub fn at(&self, z: f64) -> Mat3 {
        self.a + self.b / z
    }
}

/// Homography `H(z)` taking target-view pixels `[u, v, 1]` on the
/// fronto-parallel plane at target depth `z` to source-view pixels, normalized
/// so that `H[2][2] = 1`.
pub fn homography(z: f64, src: &Camera, tgt: &Camera) -> Result<Mat3> {
    if !(z > 0.0) {
        return Err(Error::invalid(format!("homography: plane depth must be positive, got {z}")));
    }
    let h = HomographyParts::new(src, tgt).at(z);
    let s = h[(2, 2)];
    if s.abs() < 1e-300 {
        return Err(Error::invalid("homography: degenerate (H[2][2] = 0)"));
    }
    Ok(h / s)
}

/// Source-view sampling coordinates for every voxel of a plane-sweep grid.
///
/// `planes [d, gh, gw]` holds target-frame depths per grid cell; grid cell
/// `(x, y)` is target pixel `(x / scale, y / scale)`. The returned `[d*gh*gw, 2]`
/// coordinates are in source feature-map pixels (full-resolution pixels times
/// `scale`) and are differentiable with respect to `planes`. The flag is false
/// where the warped point lies behind the source camera.
pub fn plane_warp_coords<T: Scalar>(
    g: &Graph<T>,
    planes: &Tensor<T>,
    src: &Camera,
    tgt: &Camera,
    scale: f64,
) -> Result<(Tensor<T>, Vec<bool>)> {
    planes.expect_rank("plane_warp_coords", 3)?;
    let (d, gh, gw) = (planes.shape()[0], planes.shape()[1], planes.shape()[2]);
    let parts = HomographyParts::new(src, tgt);
    let n = d * gh * gw;
    let mut coords = vec![T::zero(); n * 2];
    let mut front = vec![false; n];
    // d(coord)/dz per voxel, for the backward pass.
    let mut dcdz = vec![(0.0f64, 0.0f64); n];
    let pd = planes.data();
    for k in 0..d {
        for y in 0..gh {
            for x in 0..gw {
                let i = (k * gh + y) * gw + x;
                let z = pd[i].to_f64();
                if !(z > 0.0) {
                    return Err(Error::invalid(format!("plane_warp_coords: non-positive plane depth {z}")));
                }
                let p = Vec3::new(x as f64 / scale, y as f64 / scale, 1.0);
                let ap = parts.a * p;
                let bp = parts.b * p;
                let q = ap + bp / z;
                let dq = -bp / (z * z);
                front[i] = z * q.z > 0.0;
                let (u, v) = (q.x / q.z, q.y / q.z);
                coords[2 * i] = T::lit(scale * u);
                coords[2 * i + 1] = T::lit(scale * v);
                dcdz[i] = (
                    scale * (dq.x * q.z - q.x * dq.z) / (q.z * q.z),
                    scale * (dq.y * q.z - q.y * dq.z) / (q.z * q.z),
                );
            }
        }
    }
    let out = g.record(vec![n, 2], coords, &[planes], move |gr| {
        let gz = dcdz
            .iter()
            .enumerate()
            .map(|(i, &(du, dv))| T::lit(gr[2 * i].to_f64() * du + gr[2 * i + 1].to_f64() * dv))
            .collect();
        vec![Some(gz)]
    });
    Ok((out, front))
}

/// Warps a feature map from `src` into the target view for every depth plane.
///
/// Returns `[d, gh, gw, c]` features and a validity mask (false where the warp
/// leaves the source image or lands behind the source camera).
#[allow(clippy::too_many_arguments)]
pub fn warp_feature_planes<T: Scalar>(
    g: &Graph<T>,
    feat: &Tensor<T>,
    src: &Camera,
    tgt: &Camera,
    planes: &[f64],
    grid: (usize, usize),
    scale: f64,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if planes.is_empty() {
        return Err(Error::invalid("warp_feature_planes: empty plane list"));
    }
    if let Some(z) = planes.iter().find(|&&z| !(z > 0.0)) {
        return Err(Error::invalid(format!("warp_feature_planes: plane at depth {z} is not in front of the camera")));
    }
    feat.expect_rank("warp_feature_planes", 3)?;
    let (gh, gw) = grid;
    let mut pv = Vec::with_capacity(planes.len() * gh * gw);
    for &z in planes {
        pv.extend(std::iter::repeat_n(T::lit(z), gh * gw));
    }
    let planes_t = Tensor::new(&[planes.len(), gh, gw], pv)?;
    let (coords, front) = plane_warp_coords(g, &planes_t, src, tgt, scale)?;
    let (vals, inb) = g.grid_sample_2d(feat, &coords)?;
    let c = feat.shape()[0];
    let vals = g.reshape(&vals, &[planes.len(), gh, gw, c])?;
    let mask = front.iter().zip(&inb).map(|(&a, &b)| a && b).collect();
    Ok((vals, mask))
}

/// Projects world points `[m, 3]` into `cam`. Returns pixel coordinates
/// `[m, 2]` (differentiable in the points) and camera-frame depths.
pub fn project_points<T: Scalar>(g: &Graph<T>, cam: &Camera, points: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
    points.expect_rank("project_points", 2)?;
    if points.shape()[1] != 3 {
        return Err(Error::shape("project_points", "point width", 3, points.shape()[1]));
    }
    let m = points.shape()[0];
    let a = cam.k * cam.r;
    let b = cam.k * cam.t;
    let pd = points.data();
    let mut coords = vec![T::zero(); 2 * m];
    let mut depth = vec![0.0; m];
    let mut jac = vec![[0.0f64; 6]; m];
    for i in 0..m {
        let x = Vec3::new(pd[3 * i].to_f64(), pd[3 * i + 1].to_f64(), pd[3 * i + 2].to_f64());
        let q = a * x + b;
        let (u, v) = (q.x / q.z, q.y / q.z);
        coords[2 * i] = T::lit(u);
        coords[2 * i + 1] = T::lit(v);
        depth[i] = (cam.r * x + cam.t).z;
        for c in 0..3 {
            jac[i][c] = (a[(0, c)] - u * a[(2, c)]) / q.z;
            jac[i][3 + c] = (a[(1, c)] - v * a[(2, c)]) / q.z;
        }
    }
    let out = g.record(vec![m, 2], coords, &[points], move |gr| {
        let mut gp = vec![T::zero(); 3 * m];
        for i in 0..m {
            let (gu, gv) = (gr[2 * i].to_f64(), gr[2 * i + 1].to_f64());
            for c in 0..3 {
                gp[3 * i + c] = T::lit(gu * jac[i][c] + gv * jac[i][3 + c]);
            }
        }
        vec![Some(gp)]
    });
    Ok((out, depth))
}

/// Per point, the difference between the viewing direction from `src_center`
/// and from `tgt_center`, as `[norm, unit direction (3)]` → `[m, 4]`. The
/// direction is zero when the two viewing directions coincide.
pub fn direction_delta<T: Scalar>(g: &Graph<T>, points: &Tensor<T>, tgt_center: &Vec3, src_center: &Vec3) -> Result<Tensor<T>> {
    points.expect_rank("direction_delta", 2)?;
    let m = points.shape()[0];
    let pd = points.data();
    let mut out = vec![T::zero(); 4 * m];
    struct Saved {
        dt: Vec3,
        lt: f64,
        ds: Vec3,
        ls: f64,
        dir: Vec3,
        n: f64,
    }
    let mut saved = Vec::with_capacity(m);
    for i in 0..m {
        let x = Vec3::new(pd[3 * i].to_f64(), pd[3 * i + 1].to_f64(), pd[3 * i + 2].to_f64());
        let (at, asrc) = (x - tgt_center, x - src_center);
        let (lt, ls) = (at.norm(), asrc.norm());
        let (dt, ds) = (at / lt, asrc / ls);
        let diff = ds - dt;
        let n = diff.norm();
        let dir = if n > 0.0 { diff / n } else { Vec3::zeros() };
        out[4 * i] = T::lit(n);
        for c in 0..3 {
            out[4 * i + 1 + c] = T::lit(dir[c]);
        }
        saved.push(Saved { dt, lt, ds, ls, dir, n });
    }
    Ok(g.record(vec![m, 4], out, &[points], move |gr| {
        let mut gp = vec![T::zero(); 3 * m];
        for (i, s) in saved.iter().enumerate() {
            if s.n <= 0.0 {
                continue;
            }
            let gn = gr[4 * i].to_f64();
            let gdir = Vec3::new(gr[4 * i + 1].to_f64(), gr[4 * i + 2].to_f64(), gr[4 * i + 3].to_f64());
            let gdiff = s.dir * gn + (gdir - s.dir * s.dir.dot(&gdir)) / s.n;
            // d(a/|a|)/da = (I - d dᵀ) / |a|
            let gs = (gdiff - s.ds * s.ds.dot(&gdiff)) / s.ls;
            let gt = (gdiff - s.dt * s.dt.dot(&gdiff)) / s.lt;
            let gx = gs - gt;
            for c in 0..3 {
                gp[3 * i + c] = T::lit(gx[c]);
            }
        }
        vec![Some(gp)]
    }))
}
