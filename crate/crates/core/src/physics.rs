//! Beer–Lambert projection through attenuation volumes and procedural jaw
//! phantoms used as synthetic training data.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{trace_column_ray, Point2, TroughGeometry};
use crate::volume::{Image2D, Volume3D};

/// Source intensity; synthesized images live in `(0, I0]`.
pub const I0: f64 = 255.0;
/// Integration step used for dataset generation, in voxels.
pub const DATASET_STEP: f64 = 0.25;

pub const BONE_ATTENUATION: f64 = 0.05;
pub const TOOTH_ATTENUATION: f64 = 0.15;

/// Straight 3D segment `origin + s·dir`, `s ∈ [0, length]`, in voxel
/// coordinates `(x, y, z)` = (`W` axis, `D` axis, `H` axis).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray3 {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub length: f64,
}

impl Ray3 {
    pub fn new(origin: [f64; 3], dir: [f64; 3], length: f64) -> Result<Self> {
        let n = libm::sqrt(dir.iter().map(|d| d * d).sum());
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument("ray direction must be non-zero".into()));
        }
        Ok(Self {
            origin,
            dir: [dir[0] / n, dir[1] / n, dir[2] / n],
            length,
        })
    }

    pub fn at(&self, s: f64) -> [f64; 3] {
        [
            self.origin[0] + s * self.dir[0],
            self.origin[1] + s * self.dir[1],
            self.origin[2] + s * self.dir[2],
        ]
    }
}

/// Resolves one axis for trilinear sampling: lower index and weight of the
/// upper neighbour, or `None` outside `[−½, n − ½]`.
#[inline]
fn axis_weights(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    let hi_edge = n as f64 - 0.5;
    if !(c >= -0.5 && c <= hi_edge) {
        return None;
    }
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = libm::floor(c) as usize;
    let i1 = (i0 + 1).min(n - 1);
    Some((i0, i1, c - i0 as f64))
}

/// Trilinear interpolation at `(x, y, z)`; zero outside the volume.
pub fn sample_trilinear(v: &Volume3D, p: [f64; 3]) -> f64 {
    let [nh, nw, nd] = v.extents();
    let (Some((x0, x1, fx)), Some((y0, y1, fy)), Some((z0, z1, fz))) =
        (axis_weights(p[0], nw), axis_weights(p[1], nd), axis_weights(p[2], nh))
    else {
        return 0.0;
    };
    let g = |z, x, y| v.get(z, x, y);
    let c00 = g(z0, x0, y0) * (1.0 - fy) + g(z0, x0, y1) * fy;
    let c01 = g(z0, x1, y0) * (1.0 - fy) + g(z0, x1, y1) * fy;
    let c10 = g(z1, x0, y0) * (1.0 - fy) + g(z1, x0, y1) * fy;
    let c11 = g(z1, x1, y0) * (1.0 - fy) + g(z1, x1, y1) * fy;
    let c0 = c00 * (1.0 - fx) + c01 * fx;
    let c1 = c10 * (1.0 - fx) + c11 * fx;
    c0 * (1.0 - fz) + c1 * fz
}

/// Optical path length `∫ μ ds` by the midpoint rule at step `ds`; the last
/// partial segment is weighted by its own length.
pub fn integrate_ray(v: &Volume3D, ray: &Ray3, ds: f64) -> Result<f64> {
    if !(ds > 0.0) {
        return Err(Error::InvalidArgument(format!("integration step must be positive, got {ds}")));
    }
    if !(ray.length >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative ray length {}", ray.length)));
    }
    let full = libm::floor(ray.length / ds) as usize;
    let mut acc = 0.0;
    for n in 0..full {
        acc += sample_trilinear(v, ray.at((n as f64 + 0.5) * ds));
    }
    acc *= ds;
    let rest = ray.length - full as f64 * ds;
    if rest > 0.0 {
        acc += rest * sample_trilinear(v, ray.at(full as f64 * ds + 0.5 * rest));
    }
    Ok(acc)
}

/// Panoramic image `I(j, i) = I0·exp(−∫ μ)` along column `i`'s axial ray
/// held at height `z = j`.
pub fn synthesize_px(v: &Volume3D, geom: &TroughGeometry, i0: f64, ds: f64) -> Result<Image2D> {
    geom.validate()?;
    let [nh, _, _] = v.extents();
    let cols = geom.columns;
    let mut img = Image2D::filled(nh, cols, 0.0);
    for i in 0..cols {
        let ray = trace_column_ray(i, geom)?;
        for j in 0..nh {
            let r = Ray3 {
                origin: [ray.origin.x + ray.t_min * ray.dir.x, ray.origin.y + ray.t_min * ray.dir.y, j as f64],
                dir: [ray.dir.x, ray.dir.y, 0.0],
                length: ray.t_max - ray.t_min,
            };
            img.data_mut()[j * cols + i] = i0 * libm::exp(-integrate_ray(v, &r, ds)?);
        }
    }
    Ok(img)
}

/// One tooth: an ellipsoid oriented along the arch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tooth {
    /// `(x, y, z)` voxel coordinates.
    pub center: [f64; 3],
    /// Unit tangent of the arch at the center, in the axial plane.
    pub tangent: [f64; 2],
    /// Radii along the tangent, the arch normal and the vertical axis.
    pub radii: [f64; 3],
    pub attenuation: f64,
}

impl Tooth {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let (dx, dy, dz) = (x - self.center[0], y - self.center[1], z - self.center[2]);
        let [tx, ty] = self.tangent;
        let u = (dx * tx + dy * ty) / self.radii[0];
        let w = (-dx * ty + dy * tx) / self.radii[1];
        let v = dz / self.radii[2];
        u * u + w * w + v * v <= 1.0
    }
}

/// Anterior bone band between the trough ellipses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shell {
    pub attenuation: f64,
    /// Inclusive vertical range of rows.
    pub rows: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume3D,
    pub teeth: Vec<Tooth>,
    pub shell: Shell,
    pub seed: u64,
}

fn jitter(rng: &mut ChaCha8Rng, rel: f64) -> f64 {
    1.0 + rng.random_range(-rel..=rel)
}

/// Arc length of the mid-trough ellipse over `θ ∈ [0, π]`.
fn half_arc_length(geom: &TroughGeometry) -> f64 {
    let mid = geom.mid();
    let steps = 512;
    let mut prev = mid.point_at(0.0);
    let mut len = 0.0;
    for s in 1..=steps {
        let p = mid.point_at(PI * s as f64 / steps as f64);
        len += libm::hypot(p.x - prev.x, p.y - prev.y);
        prev = p;
    }
    len
}

/// Deterministic jaw phantom: a bone horseshoe spanning the anterior half
/// of the trough plus `teeth` ellipsoids spaced evenly along the mid-trough
/// ellipse.
pub fn make_phantom(seed: u64, extents: [usize; 3], geom: &TroughGeometry, teeth: usize) -> Result<Phantom> {
    geom.validate()?;
    if extents.iter().any(|&e| e == 0) {
        return Err(Error::InvalidArgument(format!("empty phantom extents {extents:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nh, nw, nd] = extents;
    let mid = geom.mid();
    let thickness = (geom.a1 - geom.a2).min(geom.b1 - geom.b2);

    let spacing = if teeth == 0 { f64::INFINITY } else { half_arc_length(geom) / teeth as f64 };
    let tangential = 0.4 * spacing;
    if teeth > 0 && tangential < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "{teeth} teeth do not fit along the arch (spacing {spacing:.2} voxels)"
        )));
    }

    let hf = nh as f64;
    let top = libm::round(hf * rng.random_range(0.10..0.20)) as usize;
    let bottom = (libm::round(hf * rng.random_range(0.80..0.90)) as usize).min(nh - 1);
    let shell = Shell {
        attenuation: BONE_ATTENUATION * jitter(&mut rng, 0.1),
        rows: (top.min(bottom), bottom),
    };

    let mut tooth_list = Vec::with_capacity(teeth);
    for t in 0..teeth {
        let theta = PI * (t as f64 + 0.5) / teeth as f64;
        let c = mid.point_at(theta);
        // derivative of the parametric point gives the tangent
        let (tx, ty) = (mid.b * libm::sin(theta), mid.a * libm::cos(theta));
        let tl = libm::hypot(tx, ty);
        tooth_list.push(Tooth {
            center: [c.x, c.y, hf * rng.random_range(0.40..0.60)],
            tangent: [tx / tl, ty / tl],
            radii: [
                tangential * jitter(&mut rng, 0.1),
                0.3 * thickness * jitter(&mut rng, 0.1),
                hf * 0.25 * jitter(&mut rng, 0.1),
            ],
            attenuation: TOOTH_ATTENUATION * jitter(&mut rng, 0.1),
        });
    }

    let mut volume = Volume3D::zeros(extents);
    for w in 0..nw {
        for d in 0..nd {
            let (x, y) = (w as f64, d as f64);
            if !geom.in_trough(Point2::new(x, y)) {
                continue;
            }
            let anterior = y >= geom.k;
            for z in 0..nh {
                let mut mu = 0.0;
                if anterior && (shell.rows.0..=shell.rows.1).contains(&z) {
                    mu = shell.attenuation;
                }
                for tooth in &tooth_list {
                    if tooth.contains(x, y, z as f64) {
                        mu = f64::max(mu, tooth.attenuation);
                    }
                }
                volume.set(z, w, d, mu);
            }
        }
    }
    Ok(Phantom { volume, teeth: tooth_list, shell, seed })
}
