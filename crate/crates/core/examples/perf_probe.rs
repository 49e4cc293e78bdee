use microedit_core::factworld::{emit_training_corpus, generate_world};
use microedit_core::microlm::{build_packed_forward, ModelConfig, ModelState, ParamSelection};
use microedit_core::rng::CounterRng;
use microedit_core::tape::Tape;
use microedit_core::tensor::{matmul_nt, Tensor};
use std::time::Instant;

fn main() {
    // Raw matmul throughput
    let mut rng = CounterRng::seed(1);
    let a = Tensor::new(vec![150, 128], (0..150*128).map(|_| rng.normal()).collect()).unwrap();
    let w = Tensor::new(vec![512, 128], (0..512*128).map(|_| rng.normal()).collect()).unwrap();
    let t0 = Instant::now();
    let reps = 200;
    let mut sink = 0.0;
    for _ in 0..reps {
        let c = matmul_nt(&a, &w).unwrap();
        sink += c.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = reps as f64 * 2.0 * 150.0 * 512.0 * 128.0;
    println!("matmul_nt 150x128x512: {:.2} GFLOP/s (sink {sink:.2})", flops / dt / 1e9);

    // One packed training step decomposed
    let world = generate_world(100, 6, 200, 1).unwrap();
    let corpus = emit_training_corpus(&world, 0);
    let vocab = world.vocab();
    let config = ModelConfig::desk_default(vocab.len());
    let model = ModelState::init(config, vocab, &mut CounterRng::seed(0)).unwrap();

    let items: Vec<&[u32]> = corpus[..16].iter().map(|v| v.as_slice()).collect();
    let total_tokens: usize = items.iter().map(|i| i.len()).sum();
    println!("pack of {} items, {} tokens", items.len(), total_tokens);

    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let _ = build_packed_forward(&mut tape, &model, &items, &ParamSelection::None).unwrap();
    }
    println!("forward only (no params): {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let built = build_packed_forward(&mut tape, &model, &items, &ParamSelection::All).unwrap();
        let mut targets = Vec::new();
        let mut off = 0;
        for it in &items { for i in 0..it.len()-1 { targets.push((off+i, it[i+1] as usize)); } off += it.len(); }
        let loss = tape.ce_mean(built.logits, &targets).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    println!("forward+backward (all params): {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
