use microedit_core::factworld::generate_world;
use microedit_core::microlm::ModelConfig;
use microedit_core::trainer::{train_base_lm, TrainRun};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let world = generate_world(100, 6, 200, 1).unwrap();
    let config = ModelConfig::desk_default(world.vocab().len());
    let mut run = TrainRun::new(steps, 32, lr, 0);
    run.eval_every = 100;
    run.record_every = 50;
    let t0 = std::time::Instant::now();
    match train_base_lm(&world, &config, &mut run) {
        Ok(_) => {
            println!(
                "lr={lr} steps={steps}: {:.0}s, recall: {:?}",
                t0.elapsed().as_secs_f64(),
                run.validation
            );
            println!("  loss: {:?}", run.loss_curve.iter().step_by(2).collect::<Vec<_>>());
        }
        Err(e) => println!("lr={lr}: DIVERGED: {e}"),
    }
}
