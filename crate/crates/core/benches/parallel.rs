use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mvs_autograd::{par, Graph, ParamStore, Tensor, Var};
use mvs_core::backbone::{Backbone, BackboneConfig};
use mvs_core::data::synthetic::{generate_scene, SyntheticConfig};
use mvs_core::fusion_eval::{filter_depth_maps, nearest_distances, FusionConfig};
use mvs_core::geometry::Camera;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn both(c: &mut Criterion, name: &str, f: impl Fn() + Send + Sync) {
    let mut g = c.benchmark_group(name);
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(&f));
    g.bench_function("sequential", |b| par::with_single_thread(|| b.iter(&f)));
    g.finish();
}

fn core(c: &mut Criterion) {
    let scene = generate_scene(&SyntheticConfig::default(), 0).unwrap();
    let cams: Vec<Camera> = scene.views.iter().map(|v| v.camera.clone()).collect();

    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    both(c, "backbone_fwd_bwd_64x80_3views", || {
        let g = Graph::new();
        let imgs: Vec<Var> = scene.views[..3].iter().map(|v| g.constant(v.image.clone())).collect();
        let out = backbone.forward(&g, &store, &imgs, &cams[..3]).unwrap();
        black_box(g.backward(out.finest().depth.mean()));
    });

    let conf: Vec<Tensor> = scene.depths.iter().map(|d| Tensor::ones(d.shape())).collect();
    both(c, "filter_depth_maps_5x64x80", || {
        black_box(filter_depth_maps(&scene.depths, &conf, &cams, None, &FusionConfig::default()).unwrap());
    });

    let pts: Vec<[f64; 3]> = (0..20_000).map(|i| [(i % 173) as f64 * 0.01, (i % 97) as f64 * 0.013, (i % 31) as f64 * 0.02]).collect();
    let query: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 0.003, p[1], p[2] - 0.002]).collect();
    both(c, "nearest_distances_20k", || {
        black_box(nearest_distances(&query, &pts));
    });
}

criterion_group!(benches, core);
criterion_main!(benches);
