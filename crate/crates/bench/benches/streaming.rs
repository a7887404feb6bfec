use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use chunkstream::chunking::ChunkLayout;
use chunkstream::model::ChunkGenerator;
use chunkstream::pipeline::{simulate_topology, Case, CostModel, Topology};
use chunkstream::schedule::StudentSchedule;
use chunkstream_bench::{conditioning, model};

fn chunk_step(c: &mut Criterion) {
    let layout = ChunkLayout::default();
    let dit = model(32);
    let cond = conditioning(&dit, 3 * 400);
    c.bench_function("stream_chunk_2_steps", |b| {
        let mut gen = ChunkGenerator::new(&dit, layout, StudentSchedule::default(), 9).unwrap();
        b.iter(|| {
            if gen.next_chunk_index() == 400 {
                gen = ChunkGenerator::new(&dit, layout, StudentSchedule::default(), 9).unwrap();
            }
            black_box(gen.step(&dit, &cond).unwrap())
        })
    });
}

fn simulation(c: &mut Criterion) {
    let topo = Topology::new(Case::Disagg2Plus1, CostModel::default());
    c.bench_function("simulate_topology_1000", |b| {
        b.iter(|| black_box(simulate_topology(&topo, 1000, 2).unwrap().mean_ms))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = chunk_step, simulation
}
criterion_main!(benches);
