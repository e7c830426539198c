//! Parallel vs sequential paths of the hot kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use uvhead::autodiff::kernels::{gemm, im2col, ConvGeom, Mat};
use uvhead::data::synthesize_identity;
use uvhead::par;
use uvhead::render::raster::{composite, depth_order, project, render_backward, RasterMode};
use uvhead::render::{gather_cloud, Camera};
use uvhead::rig::{bind_texels, procedural_rig, ExpressionParams};

const PATHS: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn bench_gemm(c: &mut Criterion) {
    let n = 256;
    let a: Vec<f32> = (0..n * n).map(|i| ((i * 7919) % 1000) as f32 * 1e-3).collect();
    let b: Vec<f32> = (0..n * n).map(|i| ((i * 104729) % 1000) as f32 * 1e-3).collect();
    let mut g = c.benchmark_group("gemm_256");
    for (name, on) in PATHS {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            let mut out = vec![0f32; n * n];
            bench.iter(|| gemm(Mat::new(&a, n, n), Mat::new(&b, n, n), 0.0, black_box(&mut out)))
        });
    }
    g.finish();
    par::set_parallel(true);
}

fn bench_im2col(c: &mut Criterion) {
    let geom = ConvGeom { channels: 32, height: 64, width: 64, kh: 3, kw: 3, stride: 1, pad: 1 };
    let x: Vec<f32> = (0..32 * 64 * 64).map(|i| (i % 97) as f32).collect();
    let mut g = c.benchmark_group("im2col_32x64x64_k3");
    for (name, on) in PATHS {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |bench| bench.iter(|| black_box(im2col(&x, geom))));
    }
    g.finish();
    par::set_parallel(true);
}

fn bench_raster(c: &mut Criterion) {
    let rig = procedural_rig(0);
    let binding = bind_texels(&rig, 64, 64).unwrap();
    let ident = synthesize_identity(&rig, &binding, 1).unwrap();
    let cloud = gather_cloud(&ident.maps, &binding, &rig, &ExpressionParams::for_rig(&rig)).unwrap();
    let view = cloud.view().unwrap();
    let cam = Camera::orbit(0.3, 0.1, 0.6, 2.3 * 128.0, 128, 128);
    let bg = [1.0; 3];
    let mode = RasterMode::default();
    let splats = project(&view, &cam);
    let order = depth_order(&splats);
    let grad = vec![1e-3; 4 * 128 * 128];
    let mut g = c.benchmark_group("raster_128px");
    g.sample_size(20);
    for (name, on) in PATHS {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::new("composite", name), |bench| bench.iter(|| black_box(composite(&view, &cam, bg, mode, &splats, &order))));
        g.bench_function(BenchmarkId::new("backward", name), |bench| bench.iter(|| black_box(render_backward(&view, &cam, bg, mode, &grad))));
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, bench_gemm, bench_im2col, bench_raster);
criterion_main!(benches);
