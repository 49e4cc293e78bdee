use microedit_core::factworld::generate_world;
use microedit_core::microlm::ModelConfig;
use microedit_core::trainer::{train_base_lm, TrainRun};
use std::time::Instant;

fn main() {
    let world = generate_world(100, 6, 200, 1).unwrap();
    let vocab = world.vocab();
    println!("vocab size: {}", vocab.len());
    let config = ModelConfig::desk_default(vocab.len());
    let mut run = TrainRun::new(300, 32, 3e-3, 0);
    run.eval_every = 100;
    run.record_every = 20;
    let t0 = Instant::now();
    let _model = train_base_lm(&world, &config, &mut run).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("300 steps in {dt:.1}s = {:.3} s/step", dt / 300.0);
    println!("validation: {:?}", run.validation);
    println!("loss curve tail: {:?}", &run.loss_curve[run.loss_curve.len().saturating_sub(5)..]);
}
