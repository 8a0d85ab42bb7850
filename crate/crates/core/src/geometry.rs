//! Parametric basic shapes, area-weighted surface sampling and rigid+scale
//! transforms.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::{self, Rng};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
#[inline]
pub fn mul(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}
#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// An ordered list of 3-D points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len().max(1) as f64;
        let s = self.points.iter().fold([0.0; 3], |acc, &p| add(acc, p));
        mul(s, 1.0 / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|&p| norm(p)).fold(0.0, f64::max)
    }

    /// Recenters on the centroid and scales so the farthest point has norm 1.
    pub fn normalize(&mut self) {
        let c = self.centroid();
        for p in &mut self.points {
            *p = sub(*p, c);
        }
        let r = self.max_norm();
        if r > 0.0 {
            for p in &mut self.points {
                *p = mul(*p, 1.0 / r);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Cone,
    Cylinder,
    Ellipsoid,
    Polyhedron,
    Prism,
    Pyramid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Cone,
        ShapeKind::Cylinder,
        ShapeKind::Ellipsoid,
        ShapeKind::Polyhedron,
        ShapeKind::Prism,
        ShapeKind::Pyramid,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularSolid {
    Tetrahedron,
    Cube,
    Octahedron,
    Dodecahedron,
    Icosahedron,
}

impl RegularSolid {
    pub const ALL: [RegularSolid; 5] = [
        RegularSolid::Tetrahedron,
        RegularSolid::Cube,
        RegularSolid::Octahedron,
        RegularSolid::Dodecahedron,
        RegularSolid::Icosahedron,
    ];
}

/// Shape parameters. Heights are full extents along z, centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeParams {
    /// Lateral surface plus base disk; apex at `+height/2`.
    Cone { radius: f64, height: f64 },
    /// Lateral surface only.
    Cylinder { radius: f64, height: f64 },
    Ellipsoid { a: f64, b: f64, c: f64 },
    /// Regular solid with the given circumradius.
    Polyhedron { solid: RegularSolid, radius: f64 },
    /// Right prism over a regular `sides`-gon of circumradius `radius`.
    Prism { sides: u32, radius: f64, height: f64 },
    /// Right pyramid over a regular `sides`-gon; apex at `+height/2`.
    Pyramid { sides: u32, radius: f64, height: f64 },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        param_err(format!("{name} must be finite and > 0, got {v}"))
    }
}

fn polygon_sides(n: u32) -> Result<()> {
    if (3..=8).contains(&n) {
        Ok(())
    } else {
        param_err(format!("polygon side count must be in [3, 8], got {n}"))
    }
}

impl ShapeParams {
    pub fn kind(&self) -> ShapeKind {
        match self {
            ShapeParams::Cone { .. } => ShapeKind::Cone,
            ShapeParams::Cylinder { .. } => ShapeKind::Cylinder,
            ShapeParams::Ellipsoid { .. } => ShapeKind::Ellipsoid,
            ShapeParams::Polyhedron { .. } => ShapeKind::Polyhedron,
            ShapeParams::Prism { .. } => ShapeKind::Prism,
            ShapeParams::Pyramid { .. } => ShapeKind::Pyramid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ShapeParams::Cone { radius, height } | ShapeParams::Cylinder { radius, height } => {
                positive("radius", radius)?;
                positive("height", height)
            }
            ShapeParams::Ellipsoid { a, b, c } => {
                positive("a", a)?;
                positive("b", b)?;
                positive("c", c)
            }
            ShapeParams::Polyhedron { radius, .. } => positive("radius", radius),
            ShapeParams::Prism { sides, radius, height }
            | ShapeParams::Pyramid { sides, radius, height } => {
                polygon_sides(sides)?;
                positive("radius", radius)?;
                positive("height", height)
            }
        }
    }

    /// Planar faces for the faceted kinds; `None` for smooth kinds.
    pub fn faces(&self) -> Option<Vec<Face>> {
        match *self {
            ShapeParams::Prism { sides, radius, height } => Some(prism_faces(sides, radius, height)),
            ShapeParams::Pyramid { sides, radius, height } => {
                Some(pyramid_faces(sides, radius, height))
            }
            ShapeParams::Polyhedron { solid, radius } => Some(polyhedron_faces(solid, radius)),
            _ => None,
        }
    }

    /// Distance-like residual of `p` from the ideal surface (0 on the surface).
    pub fn residual(&self, p: Vec3) -> f64 {
        match *self {
            ShapeParams::Cylinder { radius, height } => {
                let radial = ((p[0] * p[0] + p[1] * p[1]).sqrt() - radius).abs();
                let over = (p[2].abs() - height / 2.0).max(0.0);
                radial.max(over)
            }
            ShapeParams::Cone { radius, height } => {
                let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let over = (p[2].abs() - height / 2.0).max(0.0);
                let lateral = (rho - radius * (height / 2.0 - p[2]) / height).abs().max(over);
                let base = (p[2] + height / 2.0).abs().max((rho - radius).max(0.0));
                lateral.min(base)
            }
            ShapeParams::Ellipsoid { a, b, c } => {
                (p[0] * p[0] / (a * a) + p[1] * p[1] / (b * b) + p[2] * p[2] / (c * c) - 1.0).abs()
            }
            _ => self
                .faces()
                .unwrap()
                .iter()
                .flat_map(|f| f.triangles())
                .map(|t| point_triangle_distance(p, &t))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// A convex planar polygon with counter-clockwise vertices seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub vertices: Vec<Vec3>,
}

pub type Triangle = [Vec3; 3];

impl Face {
    pub fn triangles(&self) -> Vec<Triangle> {
        let v = &self.vertices;
        (1..v.len() - 1).map(|i| [v[0], v[i], v[i + 1]]).collect()
    }

    pub fn area(&self) -> f64 {
        self.triangles().iter().map(triangle_area).sum()
    }

    pub fn normal(&self) -> Vec3 {
        let v = &self.vertices;
        let n = cross(sub(v[1], v[0]), sub(v[2], v[0]));
        mul(n, 1.0 / norm(n))
    }
}

pub fn triangle_area(t: &Triangle) -> f64 {
    0.5 * norm(cross(sub(t[1], t[0]), sub(t[2], t[0])))
}

/// Exact Euclidean distance from a point to a triangle.
pub fn point_triangle_distance(p: Vec3, t: &Triangle) -> f64 {
    let [a, b, c] = *t;
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return norm(ap);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return norm(bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return norm(sub(p, add(a, mul(ab, v))));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return norm(cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return norm(sub(p, add(a, mul(ac, w))));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return norm(sub(p, add(b, mul(sub(c, b), w))));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    norm(sub(p, add(a, add(mul(ab, v), mul(ac, w)))))
}

fn ngon(sides: u32, radius: f64, z: f64) -> Vec<Vec3> {
    (0..sides)
        .map(|i| {
            let th = TAU * i as f64 / sides as f64;
            [radius * th.cos(), radius * th.sin(), z]
        })
        .collect()
}

fn prism_faces(sides: u32, radius: f64, height: f64) -> Vec<Face> {
    let bot = ngon(sides, radius, -height / 2.0);
    let top = ngon(sides, radius, height / 2.0);
    let n = sides as usize;
    let mut faces = Vec::with_capacity(n + 2);
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push(Face { vertices: vec![bot[i], bot[j], top[j], top[i]] });
    }
    faces.push(Face { vertices: top });
    faces.push(Face { vertices: bot.into_iter().rev().collect() });
    faces
}

fn pyramid_faces(sides: u32, radius: f64, height: f64) -> Vec<Face> {
    let bot = ngon(sides, radius, -height / 2.0);
    let apex = [0.0, 0.0, height / 2.0];
    let n = sides as usize;
    let mut faces = Vec::with_capacity(n + 1);
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push(Face { vertices: vec![bot[i], bot[j], apex] });
    }
    faces.push(Face { vertices: bot.into_iter().rev().collect() });
    faces
}

/// `(0, ±a, ±b)` and its cyclic permutations.
fn cyclic(a: f64, b: f64) -> Vec<Vec3> {
    let mut v = Vec::with_capacity(12);
    for sa in [-a, a] {
        for sb in [-b, b] {
            v.push([0.0, sa, sb]);
            v.push([sb, 0.0, sa]);
            v.push([sa, sb, 0.0]);
        }
    }
    v
}

fn solid_vertices(solid: RegularSolid) -> Vec<Vec3> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v = Vec::new();
    let signs = [-1.0, 1.0];
    match solid {
        RegularSolid::Tetrahedron => {
            v = vec![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        }
        RegularSolid::Cube => {
            for &x in &signs {
                for &y in &signs {
                    for &z in &signs {
                        v.push([x, y, z]);
                    }
                }
            }
        }
        RegularSolid::Octahedron => {
            for &s in &signs {
                v.push([s, 0.0, 0.0]);
                v.push([0.0, s, 0.0]);
                v.push([0.0, 0.0, s]);
            }
        }
        RegularSolid::Dodecahedron => {
            v.extend(solid_vertices(RegularSolid::Cube));
            v.extend(cyclic(1.0 / phi, phi));
        }
        RegularSolid::Icosahedron => v = cyclic(1.0, phi),
    }
    v
}

/// Directions of face centres, and vertices per face.
fn solid_dual(solid: RegularSolid) -> (Vec<Vec3>, usize) {
    match solid {
        RegularSolid::Tetrahedron => (
            solid_vertices(RegularSolid::Tetrahedron).into_iter().map(|p| mul(p, -1.0)).collect(),
            3,
        ),
        RegularSolid::Cube => (solid_vertices(RegularSolid::Octahedron), 4),
        RegularSolid::Octahedron => (solid_vertices(RegularSolid::Cube), 3),
        RegularSolid::Dodecahedron => {
            let phi = (1.0 + 5f64.sqrt()) / 2.0;
            (cyclic(phi, 1.0), 5)
        }
        RegularSolid::Icosahedron => {
            let phi = (1.0 + 5f64.sqrt()) / 2.0;
            let mut d = solid_vertices(RegularSolid::Cube);
            d.extend(cyclic(phi, 1.0 / phi));
            (d, 3)
        }
    }
}

fn polyhedron_faces(solid: RegularSolid, radius: f64) -> Vec<Face> {
    let verts: Vec<Vec3> = solid_vertices(solid)
        .into_iter()
        .map(|p| mul(p, radius / norm(p)))
        .collect();
    let (dirs, per_face) = solid_dual(solid);
    dirs.into_iter()
        .map(|d| {
            let n = mul(d, 1.0 / norm(d));
            // The face's vertices are the ones farthest along its normal.
            let mut order: Vec<usize> = (0..verts.len()).collect();
            order.sort_by(|&i, &j| dot(verts[j], n).total_cmp(&dot(verts[i], n)));
            let mut fv: Vec<Vec3> = order[..per_face].iter().map(|&i| verts[i]).collect();
            let c = mul(fv.iter().fold([0.0; 3], |a, &p| add(a, p)), 1.0 / per_face as f64);
            let u = sub(fv[0], c);
            let u = mul(u, 1.0 / norm(u));
            let w = cross(n, u);
            fv.sort_by(|&p, &q| {
                let ap = dot(sub(p, c), w).atan2(dot(sub(p, c), u));
                let aq = dot(sub(q, c), w).atan2(dot(sub(q, c), u));
                ap.total_cmp(&aq)
            });
            Face { vertices: fv }
        })
        .collect()
}

fn sample_triangle(rng: &mut Rng, t: &Triangle) -> Vec3 {
    let r1 = rng::unit_f64(rng).sqrt();
    let r2 = rng::unit_f64(rng);
    let a = 1.0 - r1;
    let b = r1 * (1.0 - r2);
    let c = r1 * r2;
    add(add(mul(t[0], a), mul(t[1], b)), mul(t[2], c))
}

fn pick_weighted(rng: &mut Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().unwrap();
    let u = rng::unit_f64(rng) * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

fn sample_mesh(faces: &[Face], m: usize, rng: &mut Rng) -> Vec<Vec3> {
    let tris: Vec<Triangle> = faces.iter().flat_map(|f| f.triangles()).collect();
    let mut cum = Vec::with_capacity(tris.len());
    let mut acc = 0.0;
    for t in &tris {
        acc += triangle_area(t);
        cum.push(acc);
    }
    (0..m)
        .map(|_| {
            let i = pick_weighted(rng, &cum);
            sample_triangle(rng, &tris[i])
        })
        .collect()
}

/// Samples `m` points uniformly by area on the surface of `params`.
pub fn sample_shape(params: &ShapeParams, m: usize, seed: u64) -> Result<PointCloud> {
    params.validate()?;
    if m == 0 {
        return param_err("point count must be >= 1");
    }
    let mut rng = rng::rng_from(seed);
    let points = match *params {
        ShapeParams::Cylinder { radius, height } => (0..m)
            .map(|_| {
                let th = TAU * rng::unit_f64(&mut rng);
                let h = rng::uniform_f64(&mut rng, -height / 2.0, height / 2.0);
                [radius * th.cos(), radius * th.sin(), h]
            })
            .collect(),
        ShapeParams::Cone { radius, height } => {
            let slant = (radius * radius + height * height).sqrt();
            let lateral = PI * radius * slant;
            let base = PI * radius * radius;
            (0..m)
                .map(|_| {
                    let th = TAU * rng::unit_f64(&mut rng);
                    let pick = rng::unit_f64(&mut rng) * (lateral + base);
                    let t = rng::unit_f64(&mut rng).sqrt();
                    if pick < lateral {
                        let rho = radius * t;
                        [rho * th.cos(), rho * th.sin(), height / 2.0 - height * t]
                    } else {
                        let rho = radius * t;
                        [rho * th.cos(), rho * th.sin(), -height / 2.0]
                    }
                })
                .collect()
        }
        ShapeParams::Ellipsoid { a, b, c } => {
            let max_el = (b * c).max(a * c).max(a * b);
            let mut pts = Vec::with_capacity(m);
            while pts.len() < m {
                let z = rng::uniform_f64(&mut rng, -1.0, 1.0);
                let th = TAU * rng::unit_f64(&mut rng);
                let s = (1.0 - z * z).max(0.0).sqrt();
                let (x, y) = (s * th.cos(), s * th.sin());
                let el = ((b * c * x).powi(2) + (a * c * y).powi(2) + (a * b * z).powi(2)).sqrt();
                if rng::unit_f64(&mut rng) * max_el <= el {
                    pts.push([a * x, b * y, c * z]);
                }
            }
            pts
        }
        _ => sample_mesh(&params.faces().unwrap(), m, &mut rng),
    };
    Ok(PointCloud::new(points))
}

/// Unit quaternion `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion(pub [f64; 4]);

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion([1.0, 0.0, 0.0, 0.0]);

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = mul(axis, 1.0 / norm(axis));
        let (s, c) = (angle / 2.0).sin_cos();
        Quaternion([c, a[0] * s, a[1] * s, a[2] * s])
    }

    /// Uniformly random rotation (Shoemake's method).
    pub fn random(rng: &mut Rng) -> Self {
        let u1 = rng::unit_f64(rng);
        let u2 = TAU * rng::unit_f64(rng);
        let u3 = TAU * rng::unit_f64(rng);
        let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
        Quaternion([b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin()])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quaternion(self.0.map(|v| v / n))
    }

    pub fn mul(&self, o: &Quaternion) -> Quaternion {
        let [w1, x1, y1, z1] = self.0;
        let [w2, x2, y2, z2] = o.0;
        Quaternion([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    pub fn conjugate(&self) -> Quaternion {
        let [w, x, y, z] = self.0;
        Quaternion([w, -x, -y, -z])
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.0;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn rotate(&self, p: Vec3) -> Vec3 {
        let m = self.to_matrix();
        [dot(m[0], p), dot(m[1], p), dot(m[2], p)]
    }
}

/// `p -> scale * R p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub rotation: Quaternion,
    pub translation: Vec3,
    pub scale: f64,
}

pub const TRANSLATION_BOUND: f64 = 0.5;
pub const SCALE_RANGE: (f64, f64) = (0.3, 1.0);

impl Transform {
    pub const IDENTITY: Transform = Transform {
        rotation: Quaternion::IDENTITY,
        translation: [0.0; 3],
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let q = &self.rotation;
        if !q.0.iter().all(|v| v.is_finite()) || (q.norm() - 1.0).abs() > 1e-9 {
            return param_err(format!("rotation must be a unit quaternion, norm {}", q.norm()));
        }
        if self.translation.iter().any(|t| !t.is_finite() || t.abs() > TRANSLATION_BOUND) {
            return param_err(format!("translation {:?} outside [-0.5, 0.5]^3", self.translation));
        }
        if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale) {
            return param_err(format!("scale {} outside [0.3, 1.0]", self.scale));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        add(mul(self.rotation.rotate(p), self.scale), self.translation)
    }

    pub fn inverse_point(&self, p: Vec3) -> Vec3 {
        self.rotation.conjugate().rotate(mul(sub(p, self.translation), 1.0 / self.scale))
    }
}

pub fn apply_transform(pc: &PointCloud, tf: &Transform) -> Result<PointCloud> {
    tf.validate()?;
    if *tf == Transform::IDENTITY {
        return Ok(pc.clone());
    }
    Ok(PointCloud::new(pc.points.iter().map(|&p| tf.apply_point(p)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRanges {
    pub radius: (f64, f64),
    pub height: (f64, f64),
    pub axis: (f64, f64),
    pub sides: (u32, u32),
}

impl Default for SizeRanges {
    fn default() -> Self {
        Self {
            radius: (0.2, 1.0),
            height: (0.4, 2.0),
            axis: (0.2, 1.0),
            sides: (3, 8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub kinds: Vec<ShapeKind>,
    pub per_kind: usize,
    pub points_per_shape: usize,
    pub ranges: SizeRanges,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            kinds: ShapeKind::ALL.to_vec(),
            per_kind: 8,
            points_per_shape: 1024,
            ranges: SizeRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub params: ShapeParams,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShapePool {
    pub entries: Vec<PoolEntry>,
}

impl ShapePool {
    pub fn of_kind(&self, kind: ShapeKind) -> Vec<&PoolEntry> {
        self.entries.iter().filter(|e| e.params.kind() == kind).collect()
    }
}

fn range_f(rng: &mut Rng, r: (f64, f64), what: &str) -> Result<f64> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 > 0.0 && r.0 <= r.1) {
        return param_err(format!("{what} range {r:?} must satisfy 0 < lo <= hi"));
    }
    Ok(rng::uniform_f64(rng, r.0, r.1))
}

pub fn random_params(kind: ShapeKind, ranges: &SizeRanges, rng: &mut Rng) -> Result<ShapeParams> {
    let (lo, hi) = ranges.sides;
    if lo > hi {
        return param_err(format!("sides range {:?} is empty", ranges.sides));
    }
    let p = match kind {
        ShapeKind::Cone => ShapeParams::Cone {
            radius: range_f(rng, ranges.radius, "radius")?,
            height: range_f(rng, ranges.height, "height")?,
        },
        ShapeKind::Cylinder => ShapeParams::Cylinder {
            radius: range_f(rng, ranges.radius, "radius")?,
            height: range_f(rng, ranges.height, "height")?,
        },
        ShapeKind::Ellipsoid => ShapeParams::Ellipsoid {
            a: range_f(rng, ranges.axis, "axis")?,
            b: range_f(rng, ranges.axis, "axis")?,
            c: range_f(rng, ranges.axis, "axis")?,
        },
        ShapeKind::Polyhedron => ShapeParams::Polyhedron {
            solid: RegularSolid::ALL[rng::uniform_index(rng, 5)],
            radius: range_f(rng, ranges.radius, "radius")?,
        },
        ShapeKind::Prism => ShapeParams::Prism {
            sides: lo + rng::uniform_index(rng, (hi - lo + 1) as usize) as u32,
            radius: range_f(rng, ranges.radius, "radius")?,
            height: range_f(rng, ranges.height, "height")?,
        },
        ShapeKind::Pyramid => ShapeParams::Pyramid {
            sides: lo + rng::uniform_index(rng, (hi - lo + 1) as usize) as u32,
            radius: range_f(rng, ranges.radius, "radius")?,
            height: range_f(rng, ranges.height, "height")?,
        },
    };
    p.validate()?;
    Ok(p)
}

/// Builds `per_kind` shapes of every requested kind, each sampled with
/// `points_per_shape` points.
pub fn build_shape_pool(config: &PoolConfig, seed: u64) -> Result<ShapePool> {
    if config.kinds.is_empty() || config.per_kind == 0 {
        return Err(Error::Config("shape pool needs at least one kind and one entry per kind".into()));
    }
    let mut entries = Vec::with_capacity(config.kinds.len() * config.per_kind);
    for &kind in &config.kinds {
        for i in 0..config.per_kind {
            let mut rng = rng::rng_at(seed, &[kind.index() as u64, i as u64, 0]);
            let params = random_params(kind, &config.ranges, &mut rng)?;
            let s = rng::derive(seed, &[kind.index() as u64, i as u64, 1]);
            let cloud = sample_shape(&params, config.points_per_shape, s)?;
            entries.push(PoolEntry { params, cloud });
        }
    }
    Ok(ShapePool { entries })
}
