use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rscnn::data::{generate_dataset, DatasetSpec, Split};
use rscnn::geometry::RelationKind;
use rscnn::networks::{Hierarchy, NetworkConfig};
use rscnn::tensor::Tape;
use rscnn::train::Trainer;
use rscnn::Exec;

fn training_step(c: &mut Criterion) {
    let spec = DatasetSpec {
        train_per_class: 4,
        ..DatasetSpec::desk(1)
    };
    let clouds = generate_dataset(&spec, Split::Train, Exec::Sequential).unwrap();
    let trainer = Trainer::new(NetworkConfig::desk_classifier(4, RelationKind::Full), 1).unwrap();
    let labels: Vec<usize> = clouds.iter().map(|c| c.shape_label.unwrap()).collect();

    let mut group = c.benchmark_group("batch_of_16");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let name = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("prepare", &name), &exec, |b, &exec| {
            b.iter(|| trainer.network.prepare_batch(&clouds, 3, exec).unwrap())
        });
        let hs = trainer.network.prepare_batch(&clouds, 3, exec).unwrap();
        let refs: Vec<&Hierarchy> = hs.iter().collect();
        group.bench_with_input(BenchmarkId::new("forward_backward", &name), &exec, |b, &exec| {
            b.iter(|| {
                let mut tape = Tape::with_exec(&trainer.store, exec);
                let out = trainer
                    .network
                    .classify(&mut tape, &refs, true, &mut rscnn::rng::stream(0, &[]))
                    .unwrap();
                let loss = tape.softmax_cross_entropy(out, &labels).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
