use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fairmil::data::{cap_and_pad, generate, stratified_folds, CapMode, GeneratorConfig, Volume};
use fairmil::diff::Tape;
use fairmil::inference::{optimize_thresholds, Grid, OofRow, OofTable, ThresholdSource};
use fairmil::losses::LossConfig;
use fairmil::model::{MilConfig, MilModel, Pooling};
use fairmil::trainer::{run_epoch, schedule, AdamW, TrainConfig};
use fairmil::{Gender, Label};

fn dataset() -> Vec<Volume> {
    generate(&GeneratorConfig::default()).unwrap()
}

fn forward_backward(c: &mut Criterion) {
    let vols = dataset();
    let loss = LossConfig::default();
    let mut group = c.benchmark_group("forward_backward");
    for pooling in [Pooling::Attention, Pooling::Mean, Pooling::Max] {
        let model = MilModel::new(MilConfig { pooling, ..MilConfig::default() }, 0).unwrap();
        let (x, mask) = cap_and_pad(&vols[0], model.config.max_slices, CapMode::Infer, 0);
        group.bench_function(pooling.name(), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let g = model.loss_graph(&mut tape, &x, &mask, 1, 0, &loss).unwrap();
                tape.backward(g.total).unwrap();
                black_box(tape.value(g.total).item())
            })
        });
    }
    group.finish();
}

fn epoch(c: &mut Criterion) {
    let vols = dataset();
    let plan = stratified_folds(&vols, 5, 0).unwrap();
    let train: Vec<&Volume> = plan
        .train_indices(&vols, 0)
        .unwrap()
        .into_iter()
        .map(|i| &vols[i])
        .collect();
    let cfg = TrainConfig::from_scratch();
    let draws: Vec<(usize, u64)> = (0..train.len()).map(|i| (i, i as u64)).collect();
    let (_, lr) = schedule(&cfg, cfg.freeze_epochs);
    let model = MilModel::new(MilConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch_fold0", |b| {
        b.iter_batched(
            || (model.clone(), AdamW::new(&cfg, model.params.len())),
            |(mut m, mut opt)| run_epoch(&mut m, &mut opt, &train, &draws, &cfg, lr).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn thresholds(c: &mut Criterion) {
    let rows = (0..700)
        .map(|i| {
            let raw: [f64; 4] = std::array::from_fn(|c| (((i * 7 + c * 13) % 97) as f64 + 1.0) / 97.0);
            let s: f64 = raw.iter().sum();
            OofRow {
                scan_id: format!("s{i}"),
                p_healthy: raw[0] / s,
                p_covid: raw[1] / s,
                p_a: raw[2] / s,
                p_g: raw[3] / s,
                truth: Label::ALL[i % 4],
                gender: if i % 3 == 0 { Gender::Female } else { Gender::Male },
                fold: i % 5,
            }
        })
        .collect();
    let table = OofTable { rows };
    c.bench_function("optimize_thresholds_700", |b| {
        b.iter(|| optimize_thresholds(black_box(&table), Grid::default(), ThresholdSource::Oof).unwrap())
    });
}

criterion_group!(benches, forward_backward, epoch, thresholds);
criterion_main!(benches);
