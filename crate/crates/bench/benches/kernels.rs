//! Kernel benchmarks: selective scan and a full block over sequence length,
//! Z-order scanning, nearest-neighbour metrics, and one model forward.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mpcc_core::metrics::{chamfer, chamfer_brute};
use mpcc_core::model::{Model, ModelConfig};
use mpcc_core::params::ParamStore;
use mpcc_core::rng::SplitMix64;
use mpcc_core::ssm::scan::{scan_forward, ScanDims, ScanInputs};
use mpcc_core::ssm::{mamba_block, SsmBlockParams, SsmDims};
use mpcc_core::zorder::cdps;
use mpcc_core::{Graph, PointCloud, Tensor};

const LENGTHS: [usize; 4] = [128, 256, 512, 1024];

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = SplitMix64::new(seed);
    PointCloud::new(
        (0..n)
            .map(|_| [r.normal(), r.normal(), r.normal()])
            .collect(),
    )
    .unwrap()
}

fn uniform(n: usize, lo: f64, hi: f64, r: &mut SplitMix64) -> Vec<f64> {
    (0..n).map(|_| r.uniform(lo, hi)).collect()
}

fn bench_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    let (channels, state) = (64, 16);
    for &len in &LENGTHS {
        let mut r = SplitMix64::new(1);
        let dims = ScanDims {
            batch: 1,
            len,
            channels,
            state,
        };
        let x = uniform(len * channels, -1.0, 1.0, &mut r);
        let delta = uniform(len * channels, 0.01, 1.0, &mut r);
        let a = uniform(channels * state, -2.0, -0.1, &mut r);
        let b = uniform(len * state, -1.0, 1.0, &mut r);
        let cm = uniform(len * state, -1.0, 1.0, &mut r);
        let skip = uniform(channels, -1.0, 1.0, &mut r);
        let mut states = vec![0.0; len * channels * state];
        let mut y = vec![0.0; len * channels];
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |bch, _| {
            bch.iter(|| {
                let inp = ScanInputs {
                    x: &x,
                    delta: &delta,
                    a: &a,
                    b: &b,
                    c: &cm,
                    skip: &skip,
                };
                scan_forward(&dims, inp, &mut states, &mut y);
                black_box(y[len * channels - 1])
            })
        });
    }
    group.finish();
}

fn bench_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("mamba_block_fwd_bwd");
    group.sample_size(20);
    let mut r = SplitMix64::new(2);
    let mut store = ParamStore::new();
    let blk = SsmBlockParams::new(&mut store, "blk", SsmDims::standard(32, 16), &mut r);
    for &len in &LENGTHS {
        let x = Tensor::randn(vec![2, len, 32], &mut r);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |bch, _| {
            bch.iter(|| {
                let mut g = Graph::new();
                let p = store.bind(&mut g, true);
                let xi = g.constant(x.clone());
                let y = mamba_block(&mut g, &p, &blk, xi).unwrap();
                let s = g.sum_all(y).unwrap();
                g.backward(s).unwrap();
                black_box(g.value(s).item().unwrap())
            })
        });
    }
    group.finish();
}

fn bench_zorder(c: &mut Criterion) {
    let mut group = c.benchmark_group("cdps_scan");
    for &n in &[512usize, 2048, 8192] {
        let (a, b) = (cloud(n, 3), cloud(n, 4));
        group.throughput(Throughput::Elements(2 * n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| black_box(cdps(&a, &b, n / 32, 32, 10).unwrap()))
        });
    }
    group.finish();
}

fn bench_chamfer(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    group.sample_size(20);
    for &n in &[256usize, 1024, 2048] {
        let (p, q) = (cloud(n, 5), cloud(n, 6));
        group.bench_with_input(BenchmarkId::new("grid", n), &n, |bch, _| {
            bch.iter(|| black_box(chamfer(&p, &q).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("brute", n), &n, |bch, _| {
            bch.iter(|| black_box(chamfer_brute(&p, &q).unwrap()))
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_forward");
    group.sample_size(10);
    let model = Model::new(ModelConfig::default()).unwrap();
    let input = [cloud(2048, 7)];
    group.bench_function("default_b1_n2048", |bch| {
        bch.iter(|| black_box(model.complete(&input).unwrap()))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_scan,
    bench_block,
    bench_zorder,
    bench_chamfer,
    bench_forward
);
criterion_main!(benches);
