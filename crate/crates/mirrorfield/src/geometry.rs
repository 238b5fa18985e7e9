//! Cameras, reflections, and the projective link between a point's image
//! and its mirror image's image.
//!
//! Conventions: extrinsics map world to camera (x right, y down, z forward);
//! integer pixel coordinates address pixel centers with the origin at the
//! top-left; depth is the camera-z coordinate.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use thiserror::Error;

pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (max deviation {0})")]
    InvalidRotation(f64),
    #[error("invalid symmetry transform: {0}")]
    InvalidSymmetry(String),
    #[error("degenerate direction")]
    DegenerateDirection,
    #[error("invalid sampling range: near {near}, far {far}")]
    InvalidRange { near: f64, far: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal ({fx}, {fy})")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Homogeneous projection matrix sending camera-space [x, y, z, 1] to
    /// [fx x + cx z, fy y + cy z, z, 1]; divide by z to read (u, v, 1, 1/z).
    pub fn projective_matrix(&self) -> Matrix4<f64> {
        Matrix4::new(
            self.fx, 0.0, self.cx, 0.0,
            0.0, self.fy, self.cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        )
    }

    pub fn projective_matrix_inv(&self) -> Matrix4<f64> {
        Matrix4::new(
            1.0 / self.fx, 0.0, -self.cx / self.fx, 0.0,
            0.0, 1.0 / self.fy, -self.cy / self.fy, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        )
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn orthonormality_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let mut dev = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    dev = dev.max((r.determinant() - 1.0).abs());
    dev
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = orthonormality_deviation(&rotation);
        if dev > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidRotation(dev));
        }
        Ok(CameraExtrinsics { rotation, translation })
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera forward axis expressed in world coordinates.
    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0)
    }

    pub fn rigid_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rigid_matrix_inv(&self) -> Matrix4<f64> {
        let rt = self.rotation.transpose();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(rt * self.translation)));
        m
    }
}

/// Camera placed at `eye` looking toward `target`, `up` fixing the roll.
pub fn look_at_extrinsics(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    up: Vector3<f64>,
) -> Result<CameraExtrinsics, GeometryError> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(GeometryError::DegenerateDirection);
    }
    let f = forward.normalize();
    let r = f.cross(&up);
    if r.norm() < 1e-9 {
        return Err(GeometryError::DegenerateDirection);
    }
    let r = r.normalize();
    let d = f.cross(&r);
    let rotation = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    let translation = -(rotation * eye);
    CameraExtrinsics::new(rotation, translation)
}

/// Rigid reflection of world space across a plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetryTransform {
    m: Matrix4<f64>,
}

impl SymmetryTransform {
    /// Reflection across the plane x = 0, the canonical scene symmetry.
    pub fn canonical() -> Self {
        SymmetryTransform { m: Matrix4::from_diagonal(&Vector4::new(-1.0, 1.0, 1.0, 1.0)) }
    }

    /// Reflection across the plane { p : normal . p = offset }.
    pub fn from_plane(normal: Vector3<f64>, offset: f64) -> Result<Self, GeometryError> {
        if normal.norm() < 1e-12 {
            return Err(GeometryError::InvalidSymmetry("zero plane normal".into()));
        }
        let n = normal.normalize();
        let a = Matrix3::identity() - 2.0 * n * n.transpose();
        let b = 2.0 * offset * n;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&b);
        Ok(SymmetryTransform { m })
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self, GeometryError> {
        let (one, zero) = (1.0, 0.0);
        if (m[(3, 0)] - zero).abs() > ORTHONORMAL_TOL
            || (m[(3, 1)] - zero).abs() > ORTHONORMAL_TOL
            || (m[(3, 2)] - zero).abs() > ORTHONORMAL_TOL
            || (m[(3, 3)] - one).abs() > ORTHONORMAL_TOL
        {
            return Err(GeometryError::InvalidSymmetry("last row must be [0 0 0 1]".into()));
        }
        let a = m.fixed_view::<3, 3>(0, 0).into_owned();
        let gram_dev = (a.transpose() * a - Matrix3::identity())
            .iter()
            .fold(0.0f64, |mx, v| mx.max(v.abs()));
        if gram_dev > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidSymmetry(format!("linear part not orthogonal ({gram_dev})")));
        }
        if (a.determinant() + 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidSymmetry("linear part must reverse orientation".into()));
        }
        let inv_dev = (m * m - Matrix4::identity()).iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
        if inv_dev > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidSymmetry(format!("not an involution ({inv_dev})")));
        }
        Ok(SymmetryTransform { m })
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = self.m * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(q.x, q.y, q.z)
    }
}

pub fn mirror_point(p: &Vector3<f64>, sym: &SymmetryTransform) -> Vector3<f64> {
    sym.apply(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    /// (u, v): u along columns, v along rows.
    pub uv: [f64; 2],
    pub depth: f64,
}

pub fn project(
    point: &Vector3<f64>,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
) -> Result<PixelProjection, GeometryError> {
    let c = extr.to_camera(point);
    if c.z <= 1e-12 {
        return Err(GeometryError::BehindCamera(c.z));
    }
    Ok(PixelProjection {
        uv: [intr.fx * c.x / c.z + intr.cx, intr.fy * c.y / c.z + intr.cy],
        depth: c.z,
    })
}

pub fn backproject(
    uv: [f64; 2],
    depth: f64,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
) -> Vector3<f64> {
    let c = Vector3::new(
        (uv[0] - intr.cx) / intr.fx * depth,
        (uv[1] - intr.cy) / intr.fy * depth,
        depth,
    );
    extr.to_world(&c)
}

/// Image location of the mirror image of the point seen at (uv, depth),
/// computed as a single homogeneous chain without leaving pixel space.
pub fn symmetric_projection(
    uv: [f64; 2],
    depth: f64,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    sym: &SymmetryTransform,
) -> Result<PixelProjection, GeometryError> {
    let chain = intr.projective_matrix()
        * extr.rigid_matrix()
        * sym.matrix()
        * extr.rigid_matrix_inv()
        * intr.projective_matrix_inv();
    let x = Vector4::new(uv[0], uv[1], 1.0, 1.0 / depth);
    // y = [d' u'/d, d' v'/d, d'/d, 1/d]
    let y = chain * x;
    let depth_ratio = y.z;
    if depth_ratio <= 0.0 {
        return Err(GeometryError::BehindCamera(depth_ratio * depth));
    }
    Ok(PixelProjection {
        uv: [y.x / depth_ratio, y.y / depth_ratio],
        depth: depth_ratio * depth,
    })
}

/// Pose looking at the mirrored scene: reflect the camera across the plane,
/// then flip the camera x axis so the frame stays right-handed. For a scene
/// invariant under `sym`, images from this pose are horizontal mirror images
/// of the originals (about the principal column).
pub fn mirrored_extrinsics(extr: &CameraExtrinsics, sym: &SymmetryTransform) -> CameraExtrinsics {
    let a = sym.matrix().fixed_view::<3, 3>(0, 0).into_owned();
    let b = sym.matrix().fixed_view::<3, 1>(0, 3).into_owned();
    let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
    let rotation = flip * extr.rotation * a;
    let translation = flip * (extr.rotation * b + extr.translation);
    CameraExtrinsics { rotation, translation }
}

/// Angle between two cameras' forward axes, in degrees. This is the pose
/// difference used for view splits and evaluation buckets.
pub fn pose_delta_deg(a: &CameraExtrinsics, b: &CameraExtrinsics) -> f64 {
    let cos = a.forward_axis().dot(&b.forward_axis()).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = direction.norm();
        if n < 1e-12 {
            return Err(GeometryError::DegenerateDirection);
        }
        Ok(Ray { origin, direction: direction / n })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Ray through a pixel-space location (u, v).
pub fn camera_ray(uv: [f64; 2], intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Ray {
    let dir_cam = Vector3::new((uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy, 1.0);
    let dir_world = extr.rotation.transpose() * dir_cam;
    Ray { origin: extr.camera_center(), direction: dir_world.normalize() }
}

#[derive(Clone, Copy, Debug)]
pub enum SampleJitter {
    /// Bin midpoints; fully deterministic.
    Midpoint,
    /// Uniform draw inside each bin from a dedicated stream.
    Seeded(u64),
}

#[derive(Clone, Debug)]
pub struct RaySamples {
    pub points: Vec<Vector3<f64>>,
    /// Spacing to the next sample; the last entry closes the interval at far.
    pub deltas: Vec<f64>,
    pub ts: Vec<f64>,
}

/// Partitions [near, far] into `count` equal bins and places one sample per
/// bin, so parameters are strictly increasing for any jitter outcome.
pub fn sample_along_ray(
    ray: &Ray,
    near: f64,
    far: f64,
    count: usize,
    jitter: SampleJitter,
) -> Result<RaySamples, GeometryError> {
    if !(near > 0.0 && far > near) || count == 0 {
        return Err(GeometryError::InvalidRange { near, far });
    }
    let bin = (far - near) / count as f64;
    let mut ts = Vec::with_capacity(count);
    match jitter {
        SampleJitter::Midpoint => {
            for i in 0..count {
                ts.push(near + bin * (i as f64 + 0.5));
            }
        }
        SampleJitter::Seeded(seed) => {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for i in 0..count {
                let u: f64 = rng.gen_range(0.0..1.0);
                ts.push(near + bin * (i as f64 + u));
            }
        }
    }
    let mut deltas = Vec::with_capacity(count);
    for i in 0..count {
        let next = if i + 1 < count { ts[i + 1] } else { far };
        deltas.push(next - ts[i]);
    }
    let points = ts.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySamples { points, deltas, ts })
}
