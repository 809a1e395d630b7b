use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use duet_bench::{mini_backbone, mini_task, prompt_store, train_config};
use duet_core::optim::{adamw_step, AdamWConfig, OptimState};
use duet_core::pool::{extract_prototype, PoolEntry, PromptPool};
use duet_core::prompt::TaskParams;
use duet_core::rng::Rng;
use duet_core::tape::Tape;
use duet_core::tensor::Tensor;
use duet_core::trainer::train::build_task_loss;

fn rand_square(rng: &mut Rng, n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    rng.fill_normal(t.data_mut(), 1.0);
    t
}

fn unit_key(rng: &mut Rng, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![dim]);
    rng.fill_normal(t.data_mut(), 1.0);
    let norm = t.norm();
    for v in t.data_mut() {
        *v /= norm;
    }
    t
}

fn bench_tape_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(10);
    let a = rand_square(&mut rng, 64);
    let b = rand_square(&mut rng, 64);
    c.bench_function("tape_matmul_64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(a.clone());
            let y = tape.constant(b.clone());
            let z = tape.matmul(x, y).unwrap();
            black_box(tape.value(z).data()[0])
        })
    });
}

fn bench_encode(c: &mut Criterion) {
    let backbone = mini_backbone();
    let task = mini_task();
    let name = task.class_names[0].clone();
    let image = task.test[0].image.clone();
    c.bench_function("text_encode_mini", |b| {
        b.iter(|| black_box(backbone.base_text_encode(&name).unwrap()))
    });
    c.bench_function("image_encode_mini", |b| {
        b.iter(|| black_box(backbone.base_image_encode(&image).unwrap()))
    });
}

fn bench_pool_query(c: &mut Criterion) {
    let backbone = mini_backbone();
    let task = mini_task();
    let query = extract_prototype(&backbone, &task.class_names).unwrap();
    let params = TaskParams::init(backbone.cfg(), 4, 2, &mut Rng::new(20)).unwrap();
    let mut rng = Rng::new(21);
    let mut pool = PromptPool::new([0u8; 32]);
    for i in 0..8 {
        pool.add(PoolEntry {
            task_id: format!("t{i}"),
            key: unit_key(&mut rng, query.numel()),
            params: params.clone(),
        })
        .unwrap();
    }
    c.bench_function("pool_query_8_entries", |b| {
        b.iter(|| black_box(pool.query(&query, 0.8).unwrap()))
    });
}

fn bench_loss_and_backward(c: &mut Criterion) {
    let backbone = mini_backbone();
    let task = mini_task();
    let tc = train_config();
    let store = prompt_store(&tc);
    let batch = [0usize, 1, 2, 3];
    c.bench_function("task_loss_forward_batch4", |b| {
        b.iter(|| {
            let (tape, loss) = build_task_loss(&backbone, &task, &store, &batch, &tc, true).unwrap();
            black_box(tape.value(loss).scalar_value().unwrap())
        })
    });
    c.bench_function("task_loss_backward_batch4", |b| {
        b.iter(|| {
            let (tape, loss) = build_task_loss(&backbone, &task, &store, &batch, &tc, true).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let backbone = mini_backbone();
    let task = mini_task();
    let tc = train_config();
    let store = prompt_store(&tc);
    let batch = [0usize, 1, 2, 3];
    let opt = AdamWConfig::new(tc.lr, tc.weight_decay);
    c.bench_function("train_step_batch4", |b| {
        b.iter(|| {
            let mut store = store.clone();
            let mut state = OptimState::new();
            let (tape, loss) = build_task_loss(&backbone, &task, &store, &batch, &tc, true).unwrap();
            let grads = tape.backward(loss).unwrap();
            adamw_step(&opt, &mut store, &grads, &mut state).unwrap();
            black_box(store.names().count())
        })
    });
}

criterion_group! {
    name = light;
    config = Criterion::default();
    targets = bench_tape_matmul, bench_encode, bench_pool_query
}
criterion_group! {
    name = heavy;
    config = Criterion::default().sample_size(10);
    targets = bench_loss_and_backward, bench_train_step
}
criterion_main!(light, heavy);
