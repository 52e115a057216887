//! Analytic test scenes built from boxes, planes and icospheres.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::envlight::EnvironmentMap;
use crate::error::{Error, Result};
use crate::math::{Aabb, UnitVec3, Vec3};
use crate::meshproxy::{MeshHit, MeshTracer, TriangleMesh};

/// Ground-truth albedo as a function of the surface point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Constant([f64; 3]),
    /// Checkerboard in the `xz` plane with squares of side `scale`.
    CheckerXz { a: [f64; 3], b: [f64; 3], scale: f64 },
}

impl Texture {
    pub fn eval(&self, p: Vec3) -> [f64; 3] {
        match *self {
            Texture::Constant(c) => c,
            Texture::CheckerXz { a, b, scale } => {
                let parity = ((p.x / scale).floor() as i64 + (p.z / scale).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub name: String,
    pub mesh: TriangleMesh,
    pub albedo: Texture,
    pub roughness: f64,
}

#[derive(Clone, Debug)]
pub struct SceneDescription {
    pub name: String,
    pub objects: Vec<SceneObject>,
    pub env: EnvironmentMap,
    /// Points of interest for per-region metrics (the cavity of
    /// two-box-cavity).
    pub region: Option<Aabb>,
    /// Where cameras look.
    pub focus: Vec3,
    /// Camera orbit radius.
    pub orbit_radius: f64,
}

pub const SCENE_NAMES: [&str; 3] = ["shadow-box", "sphere-plane", "two-box-cavity"];

impl SceneDescription {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "shadow-box" => shadow_box(),
            "sphere-plane" => sphere_plane(0.5),
            "two-box-cavity" => two_box_cavity(),
            _ => Err(Error::Config(format!("unknown scene `{name}` (expected one of {SCENE_NAMES:?})"))),
        }
    }

    pub fn bounds(&self) -> Aabb {
        self.objects.iter().fold(Aabb::EMPTY, |b, o| b.union(o.mesh.bounds()))
    }

    pub fn extent(&self) -> f64 {
        self.bounds().extent().max_component()
    }

    /// All objects as one mesh, triangles in object order.
    pub fn merged_mesh(&self) -> Result<TriangleMesh> {
        TriangleMesh::merge(&self.objects.iter().map(|o| o.mesh.clone()).collect::<Vec<_>>())
    }
}

/// Traces the merged scene and reports the ground-truth material at hits.
#[derive(Clone, Debug)]
pub struct SceneTracer {
    pub tracer: MeshTracer,
    tri_object: Vec<usize>,
    objects: Vec<(Texture, f64)>,
}

/// Surface attributes at a hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceInfo {
    pub hit: MeshHit,
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub object: usize,
}

impl SceneTracer {
    pub fn new(scene: &SceneDescription) -> Result<Self> {
        let mesh = scene.merged_mesh()?;
        let tri_object: Vec<usize> =
            scene.objects.iter().enumerate().flat_map(|(i, o)| std::iter::repeat(i).take(o.mesh.triangle_count())).collect();
        if tri_object.len() != mesh.triangle_count() {
            return Err(Error::InvalidInput("merging dropped triangles".into()));
        }
        Ok(SceneTracer {
            tracer: MeshTracer::new(mesh),
            tri_object,
            objects: scene.objects.iter().map(|o| (o.albedo, o.roughness)).collect(),
        })
    }

    pub fn surface(&self, hit: MeshHit) -> SurfaceInfo {
        let object = self.tri_object[hit.tri];
        let (tex, roughness) = self.objects[object];
        SurfaceInfo { hit, albedo: tex.eval(hit.point), roughness, object }
    }
}

/// Axis-aligned box with outward faces; `skip` drops faces by index
/// (`0: -x, 1: +x, 2: -y, 3: +y, 4: -z, 5: +z`).
pub fn box_mesh(lo: Vec3, hi: Vec3, skip: &[usize]) -> Result<TriangleMesh> {
    let v: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
        .collect();
    let quads: [[u32; 4]; 6] = [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4], [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]];
    let tris = quads
        .iter()
        .enumerate()
        .filter(|(i, _)| !skip.contains(i))
        .flat_map(|(_, q)| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriangleMesh::new(v, tris)
}

/// Upward-facing square in the plane `y`, split into `n x n` cells.
pub fn floor_mesh(y: f64, half: f64, n: usize) -> Result<TriangleMesh> {
    let mut v = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            let x = -half + 2.0 * half * j as f64 / n as f64;
            let z = -half + 2.0 * half * i as f64 / n as f64;
            v.push(Vec3::new(x, y, z));
        }
    }
    let mut tris = Vec::with_capacity(2 * n * n);
    let idx = |i: usize, j: usize| (i * (n + 1) + j) as u32;
    for i in 0..n {
        for j in 0..n {
            tris.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            tris.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriangleMesh::new(v, tris)
}

/// Subdivided icosahedron with vertices on the sphere.
pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> Result<TriangleMesh> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| {
        let v = Vec3::new(x, y, z);
        v / v.length()
    })
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let m = (verts[a as usize] + verts[b as usize]) * 0.5;
                verts.push(m / m.length());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriangleMesh::new(verts.into_iter().map(|v| center + v * radius).collect(), faces)
}

/// Sun-and-sky light: a dim sky gradient, a dark ground and a broad bright
/// sun lobe at the given elevation and azimuth (radians).
pub fn sun_sky_env(height: usize, elevation: f64, azimuth: f64, sun: f64) -> Result<EnvironmentMap> {
    let sun_dir = Vec3::new(elevation.cos() * azimuth.sin(), elevation.sin(), -elevation.cos() * azimuth.cos());
    let width = 0.35f64;
    EnvironmentMap::from_fn(height, |d| {
        let up = d.y.max(0.0);
        let sky = [0.25 + 0.15 * up, 0.32 + 0.2 * up, 0.45 + 0.3 * up];
        let ground = [0.12, 0.11, 0.1];
        let s = sun * ((d.dot(sun_dir) - 1.0) / (width * width)).exp();
        let base = if d.y >= 0.0 { sky } else { ground };
        [base[0] + s, base[1] + 0.95 * s, base[2] + 0.85 * s]
    })
}

fn default_env() -> Result<EnvironmentMap> {
    sun_sky_env(32, 40f64.to_radians(), 30f64.to_radians(), 6.0)
}

fn floor_checker() -> Texture {
    Texture::CheckerXz { a: [0.75, 0.65, 0.45], b: [0.25, 0.4, 0.55], scale: 0.3 }
}

/// A box open at the top standing on a checkered floor; it casts a hard
/// shadow that moves with the light rotation.
pub fn shadow_box() -> Result<SceneDescription> {
    Ok(SceneDescription {
        name: "shadow-box".into(),
        objects: vec![
            SceneObject { name: "floor".into(), mesh: floor_mesh(0.0, 1.2, 8)?, albedo: floor_checker(), roughness: 0.6 },
            SceneObject {
                name: "box".into(),
                mesh: box_mesh(Vec3::new(-0.3, 0.0, -0.3), Vec3::new(0.3, 0.55, 0.3), &[2, 3])?,
                albedo: Texture::Constant([0.7, 0.3, 0.25]),
                roughness: 0.4,
            },
        ],
        env: default_env()?,
        region: None,
        focus: Vec3::new(0.0, 0.15, 0.0),
        orbit_radius: 3.4,
    })
}

/// A sphere of `radius` resting on a large plane.
pub fn sphere_plane(radius: f64) -> Result<SceneDescription> {
    Ok(SceneDescription {
        name: "sphere-plane".into(),
        objects: vec![
            SceneObject {
                name: "floor".into(),
                mesh: floor_mesh(0.0, 2.0, 8)?,
                albedo: Texture::Constant([0.6, 0.6, 0.6]),
                roughness: 0.8,
            },
            SceneObject {
                name: "sphere".into(),
                mesh: icosphere(Vec3::new(0.0, radius, 0.0), radius, 4)?,
                albedo: Texture::Constant([0.5, 0.6, 0.7]),
                roughness: 0.5,
            },
        ],
        env: default_env()?,
        region: None,
        focus: Vec3::new(0.0, radius * 0.5, 0.0),
        orbit_radius: 4.5,
    })
}

/// Two tall boxes separated by a narrow gap; the gap floor and inner walls
/// form the cavity region.
pub fn two_box_cavity() -> Result<SceneDescription> {
    let gap = 0.12;
    Ok(SceneDescription {
        name: "two-box-cavity".into(),
        objects: vec![
            SceneObject { name: "floor".into(), mesh: floor_mesh(0.0, 1.2, 8)?, albedo: floor_checker(), roughness: 0.6 },
            SceneObject {
                name: "left".into(),
                mesh: box_mesh(Vec3::new(-0.5 - gap, 0.0, -0.35), Vec3::new(-gap, 0.6, 0.35), &[2])?,
                albedo: Texture::Constant([0.8, 0.75, 0.7]),
                roughness: 0.7,
            },
            SceneObject {
                name: "right".into(),
                mesh: box_mesh(Vec3::new(gap, 0.0, -0.35), Vec3::new(0.5 + gap, 0.6, 0.35), &[2])?,
                albedo: Texture::Constant([0.35, 0.6, 0.4]),
                roughness: 0.7,
            },
        ],
        env: default_env()?,
        region: Some(Aabb { min: Vec3::new(-gap - 1e-3, -1e-3, -0.35), max: Vec3::new(gap + 1e-3, 0.6, 0.35) }),
        focus: Vec3::new(0.0, 0.2, 0.0),
        orbit_radius: 3.4,
    })
}

/// Unit normal facing the side `toward` comes from.
pub fn facing(n: UnitVec3, toward: Vec3) -> UnitVec3 {
    if n.get().dot(toward) < 0.0 {
        UnitVec3::new_unchecked(-n.get())
    } else {
        n
    }
}
