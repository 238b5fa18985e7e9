//! Analytic reference renderer: exact ray-primitive intersections with
//! headlight Lambertian shading. Ground truth for datasets and for checking
//! the learned pipeline against something that cannot be wrong in the same
//! way twice.

use nalgebra::Vector3;

use super::{Primitive, SceneSpec, Shape};
use crate::geometry::{camera_ray, CameraExtrinsics, CameraIntrinsics, Ray};
use crate::img::Image;

const T_MIN: f64 = 1e-6;
const AMBIENT: f64 = 0.15;

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
}

/// Nearest intersection of `ray` with `p` beyond T_MIN.
pub fn intersect(ray: &Ray, p: &Primitive) -> Option<Hit> {
    match p.shape {
        Shape::Sphere { radius } => intersect_sphere(ray, &p.center, radius),
        Shape::Box3 { half_extents } => intersect_box(ray, &p.center, &half_extents),
        Shape::Capsule { half_length, radius } => intersect_capsule(ray, &p.center, half_length, radius),
    }
}

fn intersect_sphere(ray: &Ray, center: &Vector3<f64>, radius: f64) -> Option<Hit> {
    let oc = ray.origin - center;
    let b = ray.direction.dot(&oc);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = if -b - sq > T_MIN {
        -b - sq
    } else if -b + sq > T_MIN {
        -b + sq
    } else {
        return None;
    };
    let normal = (ray.at(t) - center) / radius;
    Some(Hit { t, normal })
}

fn intersect_box(ray: &Ray, center: &Vector3<f64>, half: &Vector3<f64>) -> Option<Hit> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = 0usize;
    let mut exit_axis = 0usize;
    for axis in 0..3 {
        let o = ray.origin[axis] - center[axis];
        let d = ray.direction[axis];
        let h = half[axis];
        if d.abs() < 1e-15 {
            if o.abs() > h {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((-h - o) / d, (h - o) / d);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            enter_axis = axis;
        }
        if t1 < t_exit {
            t_exit = t1;
            exit_axis = axis;
        }
        if t_enter > t_exit {
            return None;
        }
    }
    let (t, axis, inward) = if t_enter > T_MIN {
        (t_enter, enter_axis, false)
    } else if t_exit > T_MIN {
        (t_exit, exit_axis, true)
    } else {
        return None;
    };
    let mut normal = Vector3::zeros();
    // entry face's outward normal opposes travel; exit face's points along it
    let sign = if inward { 1.0 } else { -1.0 };
    normal[axis] = sign * ray.direction[axis].signum();
    Some(Hit { t, normal })
}

fn intersect_capsule(ray: &Ray, center: &Vector3<f64>, half_length: f64, radius: f64) -> Option<Hit> {
    // axis fixed to +y so mirrored copies stay capsules
    let mut best: Option<Hit> = None;
    let mut consider = |h: Option<Hit>| {
        if let Some(hit) = h {
            if best.map_or(true, |b| hit.t < b.t) {
                best = Some(hit);
            }
        }
    };

    let o = ray.origin - center;
    let d = ray.direction;
    let a = d.x * d.x + d.z * d.z;
    if a > 1e-15 {
        let b = o.x * d.x + o.z * d.z;
        let c = o.x * o.x + o.z * o.z - radius * radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                if t > T_MIN && (o.y + t * d.y).abs() <= half_length {
                    let p = o + t * d;
                    let normal = Vector3::new(p.x, 0.0, p.z) / radius;
                    consider(Some(Hit { t, normal }));
                    break;
                }
            }
        }
    }
    for cap in [-half_length, half_length] {
        let cc = center + Vector3::new(0.0, cap, 0.0);
        if let Some(hit) = intersect_sphere(ray, &cc, radius) {
            let y_local = (ray.at(hit.t) - center).y;
            // only the hemisphere beyond the cylinder section counts
            if (cap > 0.0 && y_local >= half_length) || (cap < 0.0 && y_local <= -half_length) {
                consider(Some(hit));
            }
        }
    }
    best
}

/// Nearest hit across the scene; earlier primitives win exact ties.
pub fn trace(ray: &Ray, scene: &SceneSpec) -> Option<(usize, Hit)> {
    let mut best: Option<(usize, Hit)> = None;
    for (i, prim) in scene.primitives.iter().enumerate() {
        if let Some(hit) = intersect(ray, prim) {
            if best.map_or(true, |(_, b)| hit.t < b.t) {
                best = Some((i, hit));
            }
        }
    }
    best
}

/// Headlight shading: the light rides on the camera, so brightness depends
/// only on the angle between surface normal and viewing direction.
pub fn shade(albedo: [f64; 3], normal: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
    let lambert = (-normal.dot(dir)).max(0.0);
    let s = AMBIENT + (1.0 - AMBIENT) * lambert;
    [albedo[0] * s, albedo[1] * s, albedo[2] * s]
}

pub fn oracle_render(
    scene: &SceneSpec,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    background: [f64; 3],
) -> Image {
    let mut img = Image::new(intr.width, intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = camera_ray([x as f64, y as f64], intr, extr);
            let rgb = match trace(&ray, scene) {
                Some((i, hit)) => shade(scene.primitives[i].albedo, &hit.normal, &ray.direction),
                None => background,
            };
            img.set(x, y, rgb);
        }
    }
    img
}
