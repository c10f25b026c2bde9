use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use owseg_core::evaluation::{EvalGroundTruth, EvalImage, EvalPrediction};
use owseg_core::geometry::{rle_decode, rle_encode};
use owseg_core::matching::CostMatrix;
use owseg_core::{average_recall, box_iou, generalized_iou, hungarian_assign, mask_iou, BinaryMask, BoxXyxy, EvalConfig, EvalMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BoxXyxy {
    let x1 = rng.random_range(0.0..extent * 0.8);
    let y1 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(1.0..extent * 0.3);
    let h = rng.random_range(1.0..extent * 0.3);
    BoxXyxy::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn blob(h: usize, w: usize, b: &BoxXyxy) -> BinaryMask {
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    BinaryMask::from_fn(h, w, |y, x| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

fn boxes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<(BoxXyxy, BoxXyxy)> = (0..1024).map(|_| (random_box(&mut rng, 100.0), random_box(&mut rng, 100.0))).collect();
    c.bench_function("box_iou x1024", |b| {
        b.iter(|| pairs.iter().map(|(p, q)| box_iou(black_box(p), black_box(q))).sum::<f64>())
    });
    c.bench_function("generalized_iou x1024", |b| {
        b.iter(|| pairs.iter().map(|(p, q)| generalized_iou(black_box(p), black_box(q))).sum::<f64>())
    });
}

fn masks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("mask");
    for size in [64usize, 256] {
        let a = blob(size, size, &random_box(&mut rng, size as f64));
        let m = blob(size, size, &random_box(&mut rng, size as f64));
        let rle = rle_encode(&a);
        group.bench_with_input(BenchmarkId::new("mask_iou", size), &size, |b, _| b.iter(|| mask_iou(black_box(&a), black_box(&m)).unwrap()));
        group.bench_with_input(BenchmarkId::new("rle_encode", size), &size, |b, _| b.iter(|| rle_encode(black_box(&a))));
        group.bench_with_input(BenchmarkId::new("rle_decode", size), &size, |b, _| b.iter(|| rle_decode(black_box(&rle)).unwrap()));
    }
    group.finish();
}

fn hungarian(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("hungarian");
    for (n, m) in [(20usize, 5usize), (100, 20), (300, 50)] {
        let data: Vec<f64> = (0..n * m).map(|_| rng.random_range(0.0..10.0)).collect();
        let cost = CostMatrix::new(n, m, data).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{m}")), &cost, |b, cost| {
            b.iter(|| hungarian_assign(black_box(cost)))
        });
    }
    group.finish();
}

fn recall(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images: Vec<EvalImage> = (0..50)
        .map(|i| {
            let gts = (0..5)
                .map(|_| {
                    let b = random_box(&mut rng, 64.0);
                    let mask = blob(64, 64, &b);
                    EvalGroundTruth { area: mask.area() as f64, bbox: b, mask: Some(mask), is_base: true }
                })
                .collect();
            let preds = (0..100)
                .map(|_| {
                    let b = random_box(&mut rng, 64.0);
                    EvalPrediction { mask: Some(blob(64, 64, &b)), bbox: b, score: Some(rng.random()) }
                })
                .collect();
            EvalImage { image_id: i, gts, preds }
        })
        .collect();
    for mode in [EvalMode::Box, EvalMode::Mask] {
        let cfg = EvalConfig { mode, ..Default::default() };
        c.bench_function(&format!("average_recall {mode} 50 images x 100 preds"), |b| {
            b.iter(|| average_recall(black_box(&images), &cfg).unwrap())
        });
    }
}

criterion_group!(benches, boxes, masks, hungarian, recall);
criterion_main!(benches);
