use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use xpdnet_bench::{random_tensor, toy_net};
use xpdnet_core::autograd::{ConvSpec, Graph};
use xpdnet_core::harness::augment::Augmented;
use xpdnet_core::harness::train::batch_gradients;
use xpdnet_core::losses::LossConfig;
use xpdnet_core::metrics::{average_precision, Detection, GtInstance, ImageResult};
use xpdnet_core::net::XpdNet;
use xpdnet_core::raster::{sobel_gradient_mask, windowed_std_map};
use xpdnet_core::scene::{generate_scene, SceneConfig};

fn conv(c: &mut Criterion) {
    let x = random_tensor([2, 16, 48, 64], 1);
    let w = random_tensor([16, 16, 3, 3], 2);
    c.bench_function("conv2d 16->16 3x3 on 2x48x64, forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let y = g.conv2d(xv, wv, None, ConvSpec::same(3, 1)).unwrap();
            let s = g.sum(y);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn raster(c: &mut Criterion) {
    let scene = generate_scene(3, &SceneConfig::default()).unwrap();
    let gm = sobel_gradient_mask(&scene.depth).unwrap();
    c.bench_function("windowed_std_map 192x256", |b| b.iter(|| black_box(windowed_std_map(&gm, 3).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let cfg = SceneConfig {
        height: 64,
        width: 64,
        ..Default::default()
    };
    let items: Vec<Augmented> = (0..2)
        .map(|i| {
            let s = generate_scene(i, &cfg).unwrap();
            Augmented {
                rgb: s.rgb,
                depth: s.depth,
                labels: s.labels,
            }
        })
        .collect();
    let net = XpdNet::new(toy_net(), 0).unwrap();
    let loss = LossConfig::default();
    c.bench_function("training step, batch 2 at 64x64", |b| {
        b.iter(|| black_box(batch_gradients(&net, &items, &loss).unwrap()))
    });
}

fn ap(c: &mut Criterion) {
    let images: Vec<ImageResult> = (0..20)
        .map(|i| {
            let s = generate_scene(100 + i, &SceneConfig::default()).unwrap();
            let gts = GtInstance::from_labels(&s.labels);
            ImageResult {
                detections: gts.iter().map(|g| Detection::from_gt(g, 0.9)).collect(),
                gts,
            }
        })
        .collect();
    c.bench_function("average_precision, 20 images at 192x256", |b| {
        b.iter(|| black_box(average_precision(&images, false)))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, raster, train_step, ap
}
criterion_main!(benches);
