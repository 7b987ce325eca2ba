//! Focal-trough geometry: the confocal ellipse pair bounding the dental arch,
//! per-column rays, the precomputed warp table, and the scatter/flatten pair
//! that moves depth bins between the image lattice and the volume.
//!
//! Coordinates are in voxel units. The trough lives in the axial plane
//! spanned by the volume's `W` (trough `x`) and `D` (trough `y`) axes; image
//! rows map unchanged onto the vertical `H` axis.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{DepthField, Image2D, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn norm(self) -> f64 {
        libm::hypot(self.x, self.y)
    }
}

/// Axis-aligned ellipse `(x − h)²/b² + (y − k)²/a² ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub h: f64,
    pub k: f64,
    /// Semi-axis along `y`.
    pub a: f64,
    /// Semi-axis along `x`.
    pub b: f64,
}

impl Ellipse {
    pub fn new(h: f64, k: f64, a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::Geometry(format!(
                "ellipse semi-axes must be positive, got a={a}, b={b}"
            )));
        }
        Ok(Self { h, k, a, b })
    }

    /// Left-hand side of the membership inequality.
    pub fn level(&self, p: Point2) -> f64 {
        let dx = (p.x - self.h) / self.b;
        let dy = (p.y - self.k) / self.a;
        dx * dx + dy * dy
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.level(p) <= 1.0
    }

    /// Point at parametric angle `theta`, with `theta = 0` on the `−x`
    /// extreme and `theta = π/2` on the `+y` extreme.
    pub fn point_at(&self, theta: f64) -> Point2 {
        Point2::new(
            self.h - self.b * libm::cos(theta),
            self.k + self.a * libm::sin(theta),
        )
    }

    /// Unit outward normal at a point of the ellipse.
    pub fn outward_normal(&self, p: Point2) -> Point2 {
        let n = Point2::new((p.x - self.h) / (self.b * self.b), (p.y - self.k) / (self.a * self.a));
        let len = n.norm();
        Point2::new(n.x / len, n.y / len)
    }
}

/// Membership test against an ellipse.
pub fn ellipse_contains(p: Point2, ellipse: &Ellipse) -> bool {
    ellipse.contains(p)
}

/// The outer/inner trough ellipses plus image and volume extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TroughGeometry {
    pub h: f64,
    pub k: f64,
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    /// Panoramic image width `W` (one ray per column).
    pub columns: usize,
    /// Depth bins `K` retained per column.
    pub bins: usize,
    /// Ray march step in voxels.
    pub dt: f64,
    /// Volume extents `(H, W, D)`.
    pub extents: [usize; 3],
}

impl TroughGeometry {
    /// Default trough for the `32 × 64 × 64` toy volume.
    pub fn toy() -> Self {
        Self {
            h: 32.0,
            k: 36.0,
            a1: 26.0,
            b1: 22.0,
            a2: 14.0,
            b2: 10.0,
            columns: 64,
            bins: 12,
            dt: 0.5,
            extents: [32, 64, 64],
        }
    }

    /// The toy trough scaled onto a `128 × 256 × 256` volume with 96 bins.
    pub fn paper() -> Self {
        Self {
            h: 128.0,
            k: 144.0,
            a1: 104.0,
            b1: 88.0,
            a2: 56.0,
            b2: 40.0,
            columns: 256,
            bins: 96,
            dt: 0.5,
            extents: [128, 256, 256],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a2 > 0.0 && self.b2 > 0.0 && self.a1 > self.a2 && self.b1 > self.b2) {
            return Err(Error::Geometry(format!(
                "need a1 > a2 > 0 and b1 > b2 > 0, got a=({}, {}), b=({}, {})",
                self.a1, self.a2, self.b1, self.b2
            )));
        }
        if self.columns == 0 || self.bins == 0 {
            return Err(Error::Geometry("image width and bin count must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Geometry(format!("march step must be positive, got {}", self.dt)));
        }
        if self.extents.iter().any(|&e| e == 0) {
            return Err(Error::Geometry(format!("empty volume extents {:?}", self.extents)));
        }
        Ok(())
    }

    pub fn outer(&self) -> Ellipse {
        Ellipse { h: self.h, k: self.k, a: self.a1, b: self.b1 }
    }

    pub fn inner(&self) -> Ellipse {
        Ellipse { h: self.h, k: self.k, a: self.a2, b: self.b2 }
    }

    /// Ellipse with averaged semi-axes, running down the middle of the trough.
    pub fn mid(&self) -> Ellipse {
        Ellipse {
            h: self.h,
            k: self.k,
            a: 0.5 * (self.a1 + self.a2),
            b: 0.5 * (self.b1 + self.b2),
        }
    }

    /// Radius of the circle carrying the ray origins.
    pub fn origin_radius(&self) -> f64 {
        1.25 * self.a1.max(self.b1)
    }

    /// Column bearing `θ_i = π (i + ½) / W`.
    pub fn column_angle(&self, i: usize) -> f64 {
        PI * (i as f64 + 0.5) / self.columns as f64
    }

    pub fn in_trough(&self, p: Point2) -> bool {
        self.outer().contains(p) && !self.inner().contains(p)
    }
}

/// `o + t d` for `t ∈ [t_min, t_max]`, with `d` of unit length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point2,
    pub dir: Point2,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: Point2, dir: Point2, t_min: f64, t_max: f64) -> Result<Self> {
        let len = dir.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::Geometry("ray direction must be non-zero".into()));
        }
        Ok(Self {
            origin,
            dir: Point2::new(dir.x / len, dir.y / len),
            t_min,
            t_max,
        })
    }

    pub fn at(&self, t: f64) -> Point2 {
        Point2::new(self.origin.x + t * self.dir.x, self.origin.y + t * self.dir.y)
    }
}

/// Ray for image column `i`: it crosses the mid-trough ellipse normally at
/// parametric angle `θ_i` and starts where that normal line meets the
/// circumscribing circle of radius `1.25·max(a1, b1)`.
pub fn trace_column_ray(i: usize, geom: &TroughGeometry) -> Result<Ray> {
    if i >= geom.columns {
        return Err(Error::OutOfRange { index: i, len: geom.columns });
    }
    let center = Point2::new(geom.h, geom.k);
    let mid = geom.mid();
    let q = mid.point_at(geom.column_angle(i));
    let n = mid.outward_normal(q);
    let r = geom.origin_radius();
    let qc = q.sub(center);
    // |qc + s n|² = r², positive root
    let b = n.dot(qc);
    let c = qc.dot(qc) - r * r;
    let s = -b + libm::sqrt(b * b - c);
    let origin = Point2::new(q.x + s * n.x, q.y + s * n.y);
    let dir = Point2::new(-n.x, -n.y);
    // second crossing of the circle along the inward direction
    let t_max = -2.0 * dir.dot(origin.sub(center));
    Ray::new(origin, dir, 0.0, t_max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TroughSample {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub valid: bool,
}

impl TroughSample {
    const INVALID: TroughSample = TroughSample { x: 0.0, y: 0.0, t: f64::NAN, valid: false };
}

/// Marches `ray` at step `dt` from `t_min` and keeps the first `k` points
/// inside `outer` and strictly outside `inner`. The result always has `k`
/// entries; missing ones are flagged invalid.
pub fn first_k_trough_samples(
    ray: &Ray,
    outer: &Ellipse,
    inner: &Ellipse,
    k: usize,
    dt: f64,
) -> Vec<TroughSample> {
    let mut out = Vec::with_capacity(k);
    let mut n = 0usize;
    loop {
        let t = ray.t_min + n as f64 * dt;
        if t > ray.t_max || out.len() == k {
            break;
        }
        let p = ray.at(t);
        if outer.contains(p) && !inner.contains(p) {
            out.push(TroughSample { x: p.x, y: p.y, t, valid: true });
        }
        n += 1;
    }
    out.resize(k, TroughSample::INVALID);
    out
}

/// Counts of how table entries share axial voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CollisionCensus {
    pub valid_entries: usize,
    pub distinct_voxels: usize,
    /// Axial voxels written by more than one entry.
    pub colliding_voxels: usize,
    /// Axial voxels written from more than one column.
    pub cross_column_voxels: usize,
}

/// Precomputed per-column trough samples and their voxel targets.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpTable {
    columns: usize,
    bins: usize,
    extents: [usize; 3],
    samples: Vec<TroughSample>,
    /// Flattened axial voxel `w * D + d` per entry.
    voxels: Vec<Option<usize>>,
    /// Number of entries per axial voxel.
    counts: Vec<u32>,
}

/// Round half away from zero, clamped to `[0, n)`.
fn voxel_coord(v: f64, n: usize) -> usize {
    let r = libm::round(v);
    if r <= 0.0 {
        0
    } else {
        (r as usize).min(n - 1)
    }
}

impl WarpTable {
    /// Builds a table from explicit samples laid out column-major
    /// (`samples[i * bins + k]`).
    pub fn from_samples(columns: usize, bins: usize, extents: [usize; 3], samples: Vec<TroughSample>) -> Result<Self> {
        if samples.len() != columns * bins {
            return Err(Error::mismatch("warp table samples", &[columns, bins], &[samples.len()]));
        }
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Geometry(format!("empty volume extents {extents:?}")));
        }
        let [_, nw, nd] = extents;
        let mut counts = vec![0u32; nw * nd];
        let voxels: Vec<Option<usize>> = samples
            .iter()
            .map(|s| {
                s.valid.then(|| {
                    let v = voxel_coord(s.x, nw) * nd + voxel_coord(s.y, nd);
                    counts[v] += 1;
                    v
                })
            })
            .collect();
        Ok(Self { columns, bins, extents, samples, voxels, counts })
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn sample(&self, i: usize, k: usize) -> &TroughSample {
        &self.samples[i * self.bins + k]
    }

    pub fn samples(&self) -> &[TroughSample] {
        &self.samples
    }

    /// Rounded axial voxel `(w, d)` for entry `(i, k)`, if valid.
    pub fn voxel(&self, i: usize, k: usize) -> Option<(usize, usize)> {
        let nd = self.extents[2];
        self.voxels[i * self.bins + k].map(|v| (v / nd, v % nd))
    }

    /// Number of entries mapping onto the axial voxel of entry `(i, k)`.
    pub fn multiplicity(&self, i: usize, k: usize) -> u32 {
        self.voxels[i * self.bins + k].map_or(0, |v| self.counts[v])
    }

    pub fn valid_count(&self) -> usize {
        self.voxels.iter().filter(|v| v.is_some()).count()
    }

    pub fn census(&self) -> CollisionCensus {
        let mut first_col: Vec<Option<usize>> = vec![None; self.counts.len()];
        let mut cross = vec![false; self.counts.len()];
        for (e, v) in self.voxels.iter().enumerate() {
            if let Some(v) = *v {
                let col = e / self.bins;
                match first_col[v] {
                    None => first_col[v] = Some(col),
                    Some(c) if c != col => cross[v] = true,
                    _ => {}
                }
            }
        }
        CollisionCensus {
            valid_entries: self.valid_count(),
            distinct_voxels: self.counts.iter().filter(|&&c| c > 0).count(),
            colliding_voxels: self.counts.iter().filter(|&&c| c > 1).count(),
            cross_column_voxels: cross.iter().filter(|&&c| c).count(),
        }
    }

    fn check_field(&self, rows: usize, bins: usize, cols: usize) -> Result<()> {
        if bins != self.bins || cols != self.columns || rows != self.extents[0] {
            return Err(Error::mismatch(
                "depth field vs warp table",
                &[self.bins, self.extents[0], self.columns],
                &[bins, rows, cols],
            ));
        }
        Ok(())
    }
}

/// Samples every column ray of `geom`.
pub fn build_warp_table(geom: &TroughGeometry) -> Result<WarpTable> {
    geom.validate()?;
    let (outer, inner) = (geom.outer(), geom.inner());
    let mut samples = Vec::with_capacity(geom.columns * geom.bins);
    for i in 0..geom.columns {
        let ray = trace_column_ray(i, geom)?;
        samples.extend(first_k_trough_samples(&ray, &outer, &inner, geom.bins, geom.dt));
    }
    let table = WarpTable::from_samples(geom.columns, geom.bins, geom.extents, samples)?;
    if table.valid_count() == 0 {
        return Err(Error::Geometry("no ray sample falls inside the trough".into()));
    }
    Ok(table)
}

/// Inverse warp: `V(j, x_ik, y_ik) ← F(k, j, i)`, broadcast over rows `j`.
/// Entries sharing a voxel are averaged; untouched voxels are zero.
pub fn scatter(f: &DepthField, table: &WarpTable) -> Result<Volume3D> {
    table.check_field(f.rows(), f.bins(), f.cols())?;
    let [nh, nw, nd] = table.extents;
    let mut v = Volume3D::zeros([nh, nw, nd]);
    let plane = nw * nd;
    for i in 0..table.columns {
        for k in 0..table.bins {
            let Some(vox) = table.voxels[i * table.bins + k] else { continue };
            let inv = 1.0 / table.counts[vox] as f64;
            for j in 0..nh {
                v.data_mut()[j * plane + vox] += f.get(k, j, i) * inv;
            }
        }
    }
    Ok(v)
}

/// Adjoint of [`scatter`]: `dF(k, j, i) = dV(j, x_ik, y_ik) / count`.
pub fn scatter_backward(grad_v: &Volume3D, table: &WarpTable) -> Result<DepthField> {
    if grad_v.extents() != table.extents {
        return Err(Error::mismatch("scatter backward", &table.extents, &grad_v.extents()));
    }
    let [nh, nw, nd] = table.extents;
    let plane = nw * nd;
    let mut f = DepthField::zeros(table.bins, nh, table.columns);
    for i in 0..table.columns {
        for k in 0..table.bins {
            let Some(vox) = table.voxels[i * table.bins + k] else { continue };
            let inv = 1.0 / table.counts[vox] as f64;
            for j in 0..nh {
                let idx = f.index(k, j, i);
                f.data_mut()[idx] = grad_v.data()[j * plane + vox] * inv;
            }
        }
    }
    Ok(f)
}

/// Samples a volume on the table lattice (nearest voxel); invalid entries are zero.
pub fn flatten(v: &Volume3D, table: &WarpTable) -> Result<DepthField> {
    if v.extents() != table.extents {
        return Err(Error::mismatch("flatten", &table.extents, &v.extents()));
    }
    let [nh, nw, nd] = table.extents;
    let plane = nw * nd;
    let mut f = DepthField::zeros(table.bins, nh, table.columns);
    for i in 0..table.columns {
        for k in 0..table.bins {
            let Some(vox) = table.voxels[i * table.bins + k] else { continue };
            for j in 0..nh {
                let idx = f.index(k, j, i);
                f.data_mut()[idx] = v.data()[j * plane + vox];
            }
        }
    }
    Ok(f)
}

/// Binary support of [`scatter`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    extents: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// `M ⊙ V`.
    pub fn apply(&self, v: &Volume3D) -> Result<Volume3D> {
        if v.extents() != self.extents {
            return Err(Error::mismatch("mask", &self.extents, &v.extents()));
        }
        let data = v
            .data()
            .iter()
            .zip(&self.data)
            .map(|(&x, &m)| if m { x } else { 0.0 })
            .collect();
        Volume3D::new(self.extents, data)
    }

    pub fn to_volume(&self) -> Volume3D {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume3D::new(self.extents, data).expect("extents match")
    }
}

pub fn build_mask(table: &WarpTable) -> Mask {
    let [nh, nw, nd] = table.extents;
    let plane = nw * nd;
    let mut data = vec![false; nh * plane];
    for (vox, &c) in table.counts.iter().enumerate() {
        if c > 0 {
            for j in 0..nh {
                data[j * plane + vox] = true;
            }
        }
    }
    Mask { extents: table.extents, data }
}

/// Projection directions for maximum-intensity projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    /// Max over the `D` axis, giving an `H × W` image.
    Axial,
    /// Max over the `W` axis, giving an `H × D` image.
    Sagittal,
    /// Max over the `H` axis, giving a `W × D` image.
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        }
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(View::Axial),
            "sagittal" => Ok(View::Sagittal),
            "coronal" => Ok(View::Coronal),
            other => Err(Error::InvalidArgument(format!("unknown view `{other}`"))),
        }
    }
}

/// Maximum-intensity projection together with the flat volume index of the
/// maximizing voxel per pixel (lowest index on ties).
pub fn mip_with_argmax(v: &Volume3D, view: View) -> (Image2D, Vec<usize>) {
    let [nh, nw, nd] = v.extents();
    let (rows, cols, len) = match view {
        View::Axial => (nh, nw, nd),
        View::Sagittal => (nh, nd, nw),
        View::Coronal => (nw, nd, nh),
    };
    let mut img = vec![0.0; rows * cols];
    let mut arg = vec![0usize; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let idx = |t: usize| match view {
                View::Axial => v.index(r, c, t),
                View::Sagittal => v.index(r, t, c),
                View::Coronal => v.index(t, r, c),
            };
            let mut best = idx(0);
            for t in 1..len {
                let i = idx(t);
                if v.data()[i] > v.data()[best] {
                    best = i;
                }
            }
            img[r * cols + c] = if len == 0 { 0.0 } else { v.data()[best] };
            arg[r * cols + c] = best;
        }
    }
    (Image2D::new(rows, cols, img).expect("sized above"), arg)
}

pub fn mip(v: &Volume3D, view: View) -> Image2D {
    mip_with_argmax(v, view).0
}

/// [`mip`] with the view given by name.
pub fn mip_named(v: &Volume3D, view: &str) -> Result<Image2D> {
    Ok(mip(v, view.parse()?))
}
