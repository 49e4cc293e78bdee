//! Shared fixtures for the criterion benches.

use microedit_core::factworld::{generate_edit_benchmark, generate_world, EditRequest, FactWorld};
use microedit_core::microlm::{ModelConfig, ModelState};
use microedit_core::rng::CounterRng;

pub fn bench_world() -> FactWorld {
    generate_world(40, 4, 80, 7).unwrap()
}

pub fn bench_model(world: &FactWorld) -> ModelState {
    let vocab = world.vocab();
    ModelState::init(
        ModelConfig::desk_default(vocab.len()),
        vocab,
        &mut CounterRng::seed(7),
    )
    .unwrap()
}

pub fn bench_requests(world: &FactWorld, n: usize) -> Vec<EditRequest> {
    generate_edit_benchmark(world, n, 3).unwrap()
}
