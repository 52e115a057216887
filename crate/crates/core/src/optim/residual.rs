//! Radiosity residual: cached radiance against radiance re-rendered through
//! the reflection integral at the same point and direction.

use crate::cache::RadianceCache;
use crate::error::{Error, Result};
use crate::exec;
use crate::math::UnitVec3;
use crate::meshproxy::SurfaceSample;
use crate::rng::{domain, DetRng};
use crate::shading::{shade_backward, shade_recorded, IncidentBackend, LightGrads, Material, MaterialGrad, ShadeOptions, ShadePoint};

const CHUNKS: usize = 8;

/// A surface sample with the light index and the splatted surface
/// attributes it is shaded with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualPoint {
    pub sample: SurfaceSample,
    pub k: usize,
    pub material: Material,
    pub normal: UnitVec3,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualOutput {
    pub value: f64,
    /// Number of samples that entered the mean (backfacing ones are skipped).
    pub count: usize,
    /// Per point, d value / d material (zero when skipped or stop-gradient).
    pub material_grads: Vec<MaterialGrad>,
    pub light: LightGrads,
}

/// Light index per residual sample, uniform over `k_count` angles.
pub fn residual_light_indices(n: usize, k_count: usize, rng: &DetRng, iteration: u64) -> Vec<usize> {
    (0..n).map(|i| rng.below(&[domain::RESIDUAL_LIGHT, iteration, i as u64], k_count)).collect()
}

/// `mean |R_k(p, d) - L_o(p, d)|` over points and channels.
///
/// Gradients always reach the cache through `R_k`. Unless `stop_grad`, they
/// also flow through `L_o` into the material, the environment and the
/// caches queried by incident rays. Sinks left empty in `light_template`
/// are skipped.
#[allow(clippy::too_many_arguments)]
pub fn loss_residual(
    points: &[ResidualPoint],
    caches: &[RadianceCache],
    backend: &IncidentBackend,
    opts: &ShadeOptions,
    rng: &DetRng,
    iteration: u64,
    stop_grad: bool,
    light_template: &LightGrads,
) -> Result<ResidualOutput> {
    if points.is_empty() {
        return Err(Error::InvalidInput("residual needs at least one surface sample".into()));
    }
    let shade_point = |p: &ResidualPoint| ShadePoint {
        x: p.sample.point,
        x_m: p.sample.point,
        n: p.normal,
        wo: p.sample.dir,
        material: p.material,
        k: p.k,
    };
    let valid: Vec<bool> = points.iter().map(|p| p.normal.get().dot(p.sample.dir.get()) > 0.0).collect();
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        log::warn!("residual: every sample faces away from its direction");
        return Ok(ResidualOutput {
            material_grads: vec![MaterialGrad::default(); points.len()],
            light: light_template.clone(),
            ..Default::default()
        });
    }
    let scale = 1.0 / (3.0 * count as f64);
    let key = |i: usize| [crate::rng::domain::SHADE, 0x5e51_d0a1, iteration, i as u64];

    // Forward pass: per point (|R - L| summed over channels, signs).
    let fwd: Vec<Result<Option<(f64, [f64; 3], [f64; 3])>>> = exec::map_indexed(points.len(), |i| {
        if !valid[i] {
            return Ok(None);
        }
        let p = &points[i];
        let cache = caches.get(p.k).ok_or(Error::Index { index: p.k, len: caches.len() })?;
        let r = cache.query(p.sample.point, p.sample.dir.get())?;
        let l = shade_recorded(&shade_point(p), backend, opts, rng, &key(i))?.radiance;
        let diff = [0, 1, 2].map(|c| r[c] - l[c]);
        let sign = diff.map(|d| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 });
        Ok(Some((diff.iter().map(|d| d.abs()).sum(), sign, r)))
    });
    let mut per_point = Vec::with_capacity(points.len());
    let mut value = 0.0;
    for f in fwd {
        let f = f?;
        if let Some((v, _, _)) = f {
            value += v;
        }
        per_point.push(f);
    }
    value *= scale;

    // Backward pass in fixed chunks.
    let chunk = points.len().div_ceil(CHUNKS).max(1);
    let parts = exec::chunked_fold(
        points.len(),
        chunk,
        || (light_template.clone(), Vec::<(usize, MaterialGrad)>::new(), None::<Error>),
        |(light, mats, err), i| {
            if err.is_some() {
                return;
            }
            let Some((_, sign, _)) = per_point[i] else { return };
            let p = &points[i];
            if !light.caches.is_empty() {
                caches[p.k].accumulate_grad(p.sample.point, p.sample.dir.get(), sign.map(|s| s * scale), &mut light.caches[p.k]);
            }
            if stop_grad {
                return;
            }
            let sp = shade_point(p);
            let res = shade_recorded(&sp, backend, opts, rng, &key(i))
                .and_then(|rec| shade_backward(&sp, backend, &rec, sign.map(|s| -s * scale), light));
            match res {
                Ok(g) => mats.push((i, g)),
                Err(e) => *err = Some(e),
            }
        },
    );
    let mut light = light_template.clone();
    let mut material_grads = vec![MaterialGrad::default(); points.len()];
    for (l, mats, err) in parts {
        if let Some(e) = err {
            return Err(e);
        }
        light.add(&l);
        for (i, g) in mats {
            material_grads[i] = g;
        }
    }
    Ok(ResidualOutput { value, count, material_grads, light })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{CacheConfig, HashGridConfig};
    use crate::envlight::{EnvironmentMap, LightAngleTable};
    use crate::math::{inverse_softplus, Aabb, Vec3};
    use crate::meshproxy::{sample_surface, MeshTracer, TriangleMesh};
    use crate::shading::{BrdfKind, IncidentGeometry, Indirect};

    fn cfg() -> CacheConfig {
        CacheConfig {
            grid: HashGridConfig { levels: 2, table_size: 1 << 8, features: 2, base_resolution: 2, growth: 2.0 },
            hidden: 8,
            n_freq: 1,
            ..Default::default()
        }
    }

    fn constant_cache(k: usize, value: f64) -> RadianceCache {
        let bounds = Aabb { min: Vec3::splat(-2.0), max: Vec3::splat(2.0) };
        let mut c = RadianceCache::new(k, cfg(), bounds, &DetRng::new(1)).unwrap();
        let n = c.params.len();
        let b = if value > 0.0 { inverse_softplus(value) } else { -60.0 };
        c.params[n - 3..].fill(b);
        c
    }

    fn closed_box() -> TriangleMesh {
        let (lo, hi) = (Vec3::splat(-1.0), Vec3::splat(1.0));
        let v: Vec<Vec3> = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 == 0 { lo.x } else { hi.x },
                    if i & 2 == 0 { lo.y } else { hi.y },
                    if i & 4 == 0 { lo.z } else { hi.z },
                )
            })
            .collect();
        // Inward-facing faces.
        let quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
        let tris = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        TriangleMesh::new(v, tris).unwrap()
    }

    fn points_from(mesh: &TriangleMesh, n: usize, k: &[usize], material: Material, rng: &DetRng) -> Vec<ResidualPoint> {
        sample_surface(mesh, n, rng, 0, true)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| ResidualPoint { sample: s, k: k[i], material, normal: s.normal })
            .collect()
    }

    #[test]
    fn furnace_with_consistent_cache_is_near_zero() {
        let mesh = closed_box();
        let inward = mesh.face_normals()[0].get().dot(Vec3::new(0.0, 0.0, 1.0));
        assert!(inward > 0.0, "box faces must point inward");
        let tracer = MeshTracer::new(mesh.clone());
        let env = EnvironmentMap::constant(4, [0.0; 3]).unwrap();
        let table = LightAngleTable::single();
        let caches = vec![constant_cache(0, 0.7)];
        let b = IncidentBackend {
            geometry: IncidentGeometry::Mesh(&tracer),
            env: &env,
            table: &table,
            indirect: Indirect::Caches(&caches),
            extent: 2.0,
        };
        let rng = DetRng::new(2);
        let pts = points_from(&mesh, 64, &[0; 64], Material::new([1.0; 3], 1.0).unwrap(), &rng);
        let opts = ShadeOptions { n_samples: 64, brdf: BrdfKind::Lambert };
        let out = loss_residual(&pts, &caches, &b, &opts, &rng, 0, false, &LightGrads::default()).unwrap();
        assert_eq!(out.count, 64);
        assert!(out.value < 0.02 * 0.7, "residual {}", out.value);
    }

    #[test]
    fn zero_cache_gives_mean_rendered_radiance() {
        let floor = TriangleMesh::new(
            vec![Vec3::new(-1.0, 0.0, -1.0), Vec3::new(1.0, 0.0, -1.0), Vec3::new(1.0, 0.0, 1.0), Vec3::new(-1.0, 0.0, 1.0)],
            vec![[0, 2, 1], [0, 3, 2]],
        )
        .unwrap();
        let tracer = MeshTracer::new(floor.clone());
        let env = EnvironmentMap::from_fn(8, |d| [1.0 + 0.5 * d.y, 0.8, 0.6]).unwrap();
        let table = LightAngleTable::from_degrees(&[0.0, 180.0]).unwrap();
        let caches = vec![constant_cache(0, 0.0), constant_cache(1, 0.0)];
        let b = IncidentBackend {
            geometry: IncidentGeometry::Mesh(&tracer),
            env: &env,
            table: &table,
            indirect: Indirect::Caches(&caches),
            extent: 2.0,
        };
        let rng = DetRng::new(3);
        let ks = residual_light_indices(32, 2, &rng, 0);
        assert!(ks.contains(&0) && ks.contains(&1));
        let m = Material::new([0.4, 0.5, 0.6], 0.5).unwrap();
        let pts = points_from(&floor, 32, &ks, m, &rng);
        let opts = ShadeOptions::default();
        let out = loss_residual(&pts, &caches, &b, &opts, &rng, 0, false, &LightGrads::default()).unwrap();
        let mut mean = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let sp = ShadePoint { x: p.sample.point, x_m: p.sample.point, n: p.normal, wo: p.sample.dir, material: m, k: p.k };
            let key = [crate::rng::domain::SHADE, 0x5e51_d0a1, 0, i as u64];
            let l = crate::shading::shade(&sp, &b, &opts, &rng, &key).unwrap();
            mean += l.iter().sum::<f64>();
        }
        mean /= 3.0 * pts.len() as f64;
        assert!((out.value - mean).abs() < 1e-12, "{} vs {mean}", out.value);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let floor = TriangleMesh::new(
            vec![Vec3::new(-1.0, 0.0, -1.0), Vec3::new(1.0, 0.0, -1.0), Vec3::new(1.0, 0.0, 1.0), Vec3::new(-1.0, 0.0, 1.0)],
            vec![[0, 2, 1], [0, 3, 2]],
        )
        .unwrap();
        let roof = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.8, -2.0), Vec3::new(2.0, 0.8, -2.0), Vec3::new(2.0, 0.8, 2.0), Vec3::new(0.0, 0.8, 2.0)],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let scene = TriangleMesh::merge(&[floor.clone(), roof]).unwrap();
        let tracer = MeshTracer::new(scene);
        let env = EnvironmentMap::from_fn(8, |d| [0.9 + 0.5 * d.x, 0.7, 0.5 + 0.2 * d.z]).unwrap();
        let table = LightAngleTable::from_degrees(&[0.0, 120.0]).unwrap();
        let bounds = Aabb { min: Vec3::splat(-2.0), max: Vec3::splat(2.0) };
        let caches: Vec<_> = (0..2)
            .map(|k| {
                let mut c = RadianceCache::new(k, cfg(), bounds, &DetRng::new(40 + k as u64)).unwrap();
                let r = DetRng::new(50 + k as u64);
                for (i, p) in c.params.iter_mut().enumerate() {
                    *p += 0.3 * r.normal(&[i as u64]);
                }
                c
            })
            .collect();
        let rng = DetRng::new(4);
        let ks = residual_light_indices(6, 2, &rng, 3);
        let m0 = Material::new([0.3, 0.5, 0.7], 0.4).unwrap();
        let pts = points_from(&floor, 6, &ks, m0, &rng);
        let opts = ShadeOptions { n_samples: 8, ..Default::default() };
        let eval = |env: &EnvironmentMap, caches: &[RadianceCache], pts: &[ResidualPoint]| {
            let b = IncidentBackend {
                geometry: IncidentGeometry::Mesh(&tracer),
                env,
                table: &table,
                indirect: Indirect::Caches(caches),
                extent: 4.0,
            };
            loss_residual(pts, caches, &b, &opts, &rng, 3, false, &LightGrads::default()).unwrap().value
        };
        let b = IncidentBackend {
            geometry: IncidentGeometry::Mesh(&tracer),
            env: &env,
            table: &table,
            indirect: Indirect::Caches(&caches),
            extent: 4.0,
        };
        let tmpl = LightGrads::zeros(Some(&env), Some(&caches));
        let out = loss_residual(&pts, &caches, &b, &opts, &rng, 3, false, &tmpl).unwrap();
        let h = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-3), "{what}: fd {fd} analytic {an}");
        };
        for i in 0..pts.len() {
            let (mut p, mut q) = (pts.clone(), pts.clone());
            p[i].material.roughness += h;
            q[i].material.roughness -= h;
            check((eval(&env, &caches, &p) - eval(&env, &caches, &q)) / (2.0 * h), out.material_grads[i].roughness, "roughness");
            let (mut p, mut q) = (pts.clone(), pts.clone());
            p[i].material.albedo[1] += h;
            q[i].material.albedo[1] -= h;
            check((eval(&env, &caches, &p) - eval(&env, &caches, &q)) / (2.0 * h), out.material_grads[i].albedo[1], "albedo");
        }
        for i in (0..env.raw.len()).filter(|&i| out.light.env[i] != 0.0).step_by(3) {
            let (mut ep, mut em) = (env.clone(), env.clone());
            ep.raw[i] += h;
            em.raw[i] -= h;
            check((eval(&ep, &caches, &pts) - eval(&em, &caches, &pts)) / (2.0 * h), out.light.env[i], "env");
        }
        for k in 0..2 {
            let mut n = 0;
            for i in (0..caches[k].param_count()).filter(|&i| out.light.caches[k][i] != 0.0).step_by(5) {
                let (mut cp, mut cm) = (caches.clone(), caches.clone());
                cp[k].params[i] += h;
                cm[k].params[i] -= h;
                check((eval(&env, &cp, &pts) - eval(&env, &cm, &pts)) / (2.0 * h), out.light.caches[k][i], "cache");
                n += 1;
            }
            assert!(n > 5);
        }
        // Stop-gradient leaves only the direct cache term.
        let sg = loss_residual(&pts, &caches, &b, &opts, &rng, 3, true, &tmpl).unwrap();
        assert_eq!(sg.value, out.value);
        assert!(sg.light.env.iter().all(|&v| v == 0.0));
        assert!(sg.material_grads.iter().all(|g| *g == MaterialGrad::default()));
    }
}
