use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rotlight::envlight::{EnvironmentMap, LightAngleTable};
use rotlight::exec;
use rotlight::gsplat::{render_maps, seed_on_mesh, GaussianScene};
use rotlight::meshproxy::MeshTracer;
use rotlight::oracle::SceneDescription;
use rotlight::pipeline::{render_pixels, strided_pixels};
use rotlight::shading::{IncidentBackend, IncidentGeometry, Indirect, ShadeOptions};
use rotlight::{Camera, DetRng, Vec3};

fn bench(c: &mut Criterion) {
    let desc = SceneDescription::by_name("sphere-plane").unwrap();
    let mesh = desc.merged_mesh().unwrap();
    let set = seed_on_mesh(&mesh, 1, &Default::default()).unwrap();
    let scene = GaussianScene::new(&set).unwrap();
    let tracer = MeshTracer::new(mesh);
    let env = EnvironmentMap::constant(16, [0.8, 0.8, 0.9]).unwrap();
    let table = LightAngleTable::single();
    let camera = Camera::look_at(Vec3::new(0.0, 1.5, 3.0), Vec3::new(0.0, 0.4, 0.0), Vec3::new(0.0, 1.0, 0.0), 0.7, 64, 64).unwrap();
    let backend = IncidentBackend {
        geometry: IncidentGeometry::Mesh(&tracer),
        env: &env,
        table: &table,
        indirect: Indirect::Zero,
        extent: desc.extent(),
    };
    let opts = ShadeOptions { n_samples: 16, ..Default::default() };
    let pixels = strided_pixels(&camera, 2);
    let rng = DetRng::new(1);

    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for sequential in [false, true] {
        let mode = if sequential { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::new("render_maps", mode), &sequential, |b, &s| {
            exec::set_force_sequential(s);
            b.iter(|| render_maps(&camera, &scene).unwrap());
            exec::set_force_sequential(false);
        });
        group.bench_with_input(BenchmarkId::new("shade_pixels", mode), &sequential, |b, &s| {
            exec::set_force_sequential(s);
            b.iter(|| render_pixels(&scene, &backend, &camera, 0, &opts, &rng, 0, &pixels).unwrap());
            exec::set_force_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
