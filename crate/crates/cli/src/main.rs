//! microedit: generate fact worlds, train the micro-LM, apply knowledge
//! edits, and evaluate them.
//!
//! Every subcommand is a thin shell over the library; exit code 0 on
//! success, 1 on usage errors, 2 on runtime failures, and all errors go to
//! standard error with an `error:<category>:` prefix.

mod repl;

use std::path::PathBuf;

use microedit_core::editors::{apply_to_model, make_editor, rollback, Method};
use microedit_core::error::Error;
use microedit_core::evaluate::{evaluate_edit, DEFAULT_GEN_LEN};
use microedit_core::factworld::{
    benchmark_from_lines, benchmark_to_lines, generate_edit_benchmark, generate_world, EditRequest,
    FactWorld,
};
use microedit_core::harness::{
    default_hparams, load_hparams, render_table, run_regime, write_report_file, HparamSet,
    RegimeKind, RegimeSpec, SEED_ENV_VAR,
};
use microedit_core::microlm::{
    causal_trace, load_checkpoint_file, save_checkpoint_file, BaseResponder, ModelConfig,
    ModelState,
};
use microedit_core::rng::CounterRng;
use microedit_core::trainer::{recall_probes, train_base_lm, validate_step, TrainRun};

const USAGE: &str = "\
usage: microedit <command> [flags]

commands:
  generate   write a fact world and an edit benchmark
  train      pretrain the micro language model on a world
  edit       apply one editing method to one benchmark request
  eval       edit one request and print its metric report
  bench      run a full regime sweep and render the results table
  trace      causal-trace one request and print the effect grid
  repl       interactive edit-and-probe session

flags:
  --world PATH      fact world file (.fw)
  --ckpt PATH       model checkpoint (.melm)
  --bench PATH      benchmark file (.fb); derived from the world if absent
  --method NAME     ft-l | kn | rome | memit | ike | grace | serac-lite
  --regime NAME     single | batch | sequential
  --batch-size N    chunk size for the batch regime
  --hparams PATH    hyperparameter file (flat key = value text)
  --seed N          seed (falls back to MICROEDIT_SEED, then 0)
  --out PATH        output file or directory
  --gen-len N       fluency generation length (default 50)
  --index N         request index for edit/eval/trace (default 0)
  --edits N         benchmark size when deriving (default 50)
  --entities N      world size for generate (default 100)
  --relations N     relation count for generate (default 6)
  --facts N         fact count for generate (default 200)
  --steps N         training step budget (default 30000)
  --lr X            training learning rate (default 0.003)
";

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = Result<(), CliError>;

#[derive(Default)]
struct Args {
    world: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    bench: Option<PathBuf>,
    method: Option<String>,
    regime: Option<String>,
    batch_size: Option<usize>,
    hparams: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    gen_len: Option<usize>,
    index: Option<usize>,
    edits: Option<usize>,
    entities: Option<usize>,
    relations: Option<usize>,
    facts: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
}

impl Args {
    fn parse(argv: &[String]) -> Result<Args, CliError> {
        let mut args = Args::default();
        let mut it = argv.iter();
        while let Some(flag) = it.next() {
            let mut value = |name: &str| -> Result<&String, CliError> {
                it.next()
                    .ok_or_else(|| CliError::Usage(format!("{name} needs a value")))
            };
            match flag.as_str() {
                "--world" => args.world = Some(value("--world")?.into()),
                "--ckpt" => args.ckpt = Some(value("--ckpt")?.into()),
                "--bench" => args.bench = Some(value("--bench")?.into()),
                "--method" => args.method = Some(value("--method")?.clone()),
                "--regime" => args.regime = Some(value("--regime")?.clone()),
                "--batch-size" => args.batch_size = Some(parse_num(value("--batch-size")?)?),
                "--hparams" => args.hparams = Some(value("--hparams")?.into()),
                "--seed" => args.seed = Some(parse_num(value("--seed")?)?),
                "--out" => args.out = Some(value("--out")?.into()),
                "--gen-len" => args.gen_len = Some(parse_num(value("--gen-len")?)?),
                "--index" => args.index = Some(parse_num(value("--index")?)?),
                "--edits" => args.edits = Some(parse_num(value("--edits")?)?),
                "--entities" => args.entities = Some(parse_num(value("--entities")?)?),
                "--relations" => args.relations = Some(parse_num(value("--relations")?)?),
                "--facts" => args.facts = Some(parse_num(value("--facts")?)?),
                "--steps" => args.steps = Some(parse_num(value("--steps")?)?),
                "--lr" => {
                    args.lr = Some(
                        value("--lr")?
                            .parse()
                            .map_err(|_| CliError::Usage("--lr needs a float".into()))?,
                    )
                }
                other => return Err(CliError::Usage(format!("unknown flag `{other}`"))),
            }
        }
        Ok(args)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            std::env::var(SEED_ENV_VAR)
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(0)
        })
    }

    fn require_world(&self) -> Result<FactWorld, CliError> {
        let path = self
            .world
            .as_ref()
            .ok_or_else(|| CliError::Usage("--world is required".into()))?;
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        Ok(FactWorld::from_lines(&text)?)
    }

    fn require_ckpt(&self) -> Result<ModelState, CliError> {
        let path = self
            .ckpt
            .as_ref()
            .ok_or_else(|| CliError::Usage("--ckpt is required".into()))?;
        Ok(load_checkpoint_file(path)?)
    }

    fn require_method(&self) -> Result<Method, CliError> {
        let name = self
            .method
            .as_ref()
            .ok_or_else(|| CliError::Usage("--method is required".into()))?;
        Ok(Method::parse(name)?)
    }

    fn benchmark(&self, world: &FactWorld) -> Result<Vec<EditRequest>, CliError> {
        match &self.bench {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(Error::Io)?;
                Ok(benchmark_from_lines(world, &text)?)
            }
            None => Ok(generate_edit_benchmark(
                world,
                self.edits.unwrap_or(50),
                self.seed(),
            )?),
        }
    }

    fn hparams(&self, method: Method, config: &ModelConfig) -> Result<HparamSet, CliError> {
        match &self.hparams {
            Some(path) => {
                let hp = load_hparams(path, config)?;
                if hp.method() != method {
                    return Err(CliError::Usage(format!(
                        "hparams file is for {}, command uses {}",
                        hp.method(),
                        method
                    )));
                }
                Ok(hp)
            }
            None => Ok(default_hparams(method, config)?),
        }
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, CliError> {
    s.parse()
        .map_err(|_| CliError::Usage(format!("`{s}` is not a valid number")))
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(run(&argv));
}

fn run(argv: &[String]) -> i32 {
    let Some(command) = argv.first() else {
        eprintln!("error:usage: missing command");
        eprintln!("{USAGE}");
        return 1;
    };
    let result = match Args::parse(&argv[1..]) {
        Ok(args) => match command.as_str() {
            "generate" => cmd_generate(&args),
            "train" => cmd_train(&args),
            "edit" => cmd_edit(&args),
            "eval" => cmd_eval(&args),
            "bench" => cmd_bench(&args),
            "trace" => cmd_trace(&args),
            "repl" => repl::cmd_repl(&args),
            other => Err(CliError::Usage(format!("unknown command `{other}`"))),
        },
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error:usage: {msg}");
            eprintln!("{USAGE}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error:{}: {e}", e.category());
            2
        }
    }
}

fn cmd_generate(args: &Args) -> CliResult {
    let seed = args.seed();
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(Error::Io)?;
    let world = generate_world(
        args.entities.unwrap_or(100),
        args.relations.unwrap_or(6),
        args.facts.unwrap_or(200),
        seed,
    )?;
    let bench = generate_edit_benchmark(&world, args.edits.unwrap_or(50), seed)?;
    let world_path = out.join("world.fw");
    let bench_path = out.join("benchmark.fb");
    std::fs::write(&world_path, world.to_lines()).map_err(Error::Io)?;
    std::fs::write(&bench_path, benchmark_to_lines(&world, &bench)).map_err(Error::Io)?;
    println!(
        "world: {} ({} entities, {} relations, {} facts)",
        world_path.display(),
        world.entities.len(),
        world.relations.len(),
        world.facts.len()
    );
    println!("benchmark: {} ({} requests)", bench_path.display(), bench.len());
    Ok(())
}

fn cmd_train(args: &Args) -> CliResult {
    let world = args.require_world()?;
    let out = args
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out checkpoint path is required".into()))?;
    let vocab = world.vocab();
    let config = ModelConfig::desk_default(vocab.len());
    let mut run = TrainRun::default();
    run.seed = args.seed();
    if let Some(steps) = args.steps {
        run.steps = steps;
    }
    if let Some(lr) = args.lr {
        run.learning_rate = lr;
    }
    let model = train_base_lm(&world, &config, &mut run)?;
    save_checkpoint_file(&model, &out)?;
    let loss_path = out.with_extension("loss.csv");
    std::fs::write(&loss_path, run.loss_curve_lines()).map_err(Error::Io)?;
    let recall = validate_step(&model, &recall_probes(&world))?;
    println!("checkpoint: {}", out.display());
    println!("loss curve: {}", loss_path.display());
    println!("fact recall: {recall:.4}");
    Ok(())
}

fn prepared_editor(
    method: Method,
    world: &FactWorld,
    model: &ModelState,
    seed: u64,
) -> Result<Box<dyn microedit_core::editors::Editor>, CliError> {
    let mut editor = make_editor(method, world)?;
    if editor.capabilities().needs_training {
        let mut run = TrainRun::classifier_default(seed);
        editor.prepare(model, world, &mut run)?;
    }
    Ok(editor)
}

fn cmd_edit(args: &Args) -> CliResult {
    let world = args.require_world()?;
    let mut model = args.require_ckpt()?;
    let method = args.require_method()?;
    let hp = args.hparams(method, &model.config)?;
    let mut editor = prepared_editor(method, &world, &model, args.seed())?;
    let bench = args.benchmark(&world)?;
    let index = args.index.unwrap_or(0);
    let request = bench
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("--index {index} outside benchmark")))?;
    let outcome = apply_to_model(
        editor.as_mut(),
        &mut model,
        std::slice::from_ref(request),
        &hp,
        false,
    )?;
    print!("{}", outcome.log_lines());
    println!("elapsed_seconds={:.4}", outcome.elapsed_seconds);
    println!("extra_state_bytes={}", outcome.extra_state_bytes);
    if let Some(out) = &args.out {
        save_checkpoint_file(&model, out)?;
        println!("edited checkpoint: {}", out.display());
    }
    Ok(())
}

fn cmd_eval(args: &Args) -> CliResult {
    let world = args.require_world()?;
    let mut model = args.require_ckpt()?;
    let method = args.require_method()?;
    let hp = args.hparams(method, &model.config)?;
    let gen_len = args.gen_len.unwrap_or(DEFAULT_GEN_LEN);
    let mut editor = prepared_editor(method, &world, &model, args.seed())?;
    let bench = args.benchmark(&world)?;
    let index = args.index.unwrap_or(0);
    let request = bench
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("--index {index} outside benchmark")))?;
    let base = model.clone();
    let mut outcome = apply_to_model(
        editor.as_mut(),
        &mut model,
        std::slice::from_ref(request),
        &hp,
        true,
    )?;
    let report = {
        let pre = BaseResponder(&base);
        let post = editor.responder(&model);
        evaluate_edit(&pre, post.as_ref(), request, &outcome, gen_len)?
    };
    rollback(editor.as_mut(), &mut model, &mut outcome)?;
    println!("{}", report.to_line());
    if let Some(out) = &args.out {
        std::fs::write(out, format!("{}\n", report.to_line())).map_err(Error::Io)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn cmd_bench(args: &Args) -> CliResult {
    let world = args.require_world()?;
    let mut model = args.require_ckpt()?;
    let method = args.require_method()?;
    let regime_name = args
        .regime
        .as_ref()
        .ok_or_else(|| CliError::Usage("--regime is required".into()))?;
    let kind = RegimeKind::parse(regime_name)?;
    let regime = match kind {
        RegimeKind::Batch => RegimeSpec::batch(
            args.batch_size
                .ok_or_else(|| CliError::Usage("batch regime needs --batch-size".into()))?,
        ),
        RegimeKind::Single => RegimeSpec::single(),
        RegimeKind::Sequential => RegimeSpec::sequential(),
    };
    let hp = args.hparams(method, &model.config)?;
    let gen_len = args.gen_len.unwrap_or(DEFAULT_GEN_LEN);
    let mut editor = prepared_editor(method, &world, &model, args.seed())?;
    let bench = args.benchmark(&world)?;
    let report = run_regime(
        &mut model,
        editor.as_mut(),
        &bench,
        &regime,
        &hp,
        world.seed,
        gen_len,
    )?;
    print!("{}", render_table(&[&report]));
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}-{}-report.txt", method.name(), kind.name())));
    write_report_file(&report, &out)?;
    println!("report file: {}", out.display());
    Ok(())
}

fn cmd_trace(args: &Args) -> CliResult {
    let world = args.require_world()?;
    let model = args.require_ckpt()?;
    let bench = args.benchmark(&world)?;
    let index = args.index.unwrap_or(0);
    let request = bench
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("--index {index} outside benchmark")))?;
    let mut rng = CounterRng::seed(args.seed());
    let trace = causal_trace(&model, request, 3.0, 10, &mut rng)?;

    let vocab = world.vocab();
    let words: Vec<&str> = request.edit_prompt.iter().map(|&t| vocab.word(t)).collect();
    println!("prompt: {}", words.join(" "));
    println!(
        "clean p={:.4}  corrupted p={:.4}  subject token at {}",
        trace.clean_prob, trace.corrupted_prob, trace.subject_last
    );
    print!("{}", render_heatmap(&trace.grid, &words));
    match microedit_core::microlm::select_edit_layer(&trace) {
        Ok(layer) => println!("selected edit layer: {layer}"),
        Err(e) => println!("selected edit layer: none ({e})"),
    }
    Ok(())
}

/// Text heat map: one row per layer, one cell per token, darker = stronger.
fn render_heatmap(grid: &microedit_core::tensor::Tensor, words: &[&str]) -> String {
    const SHADES: [char; 8] = [' ', '.', ':', '-', '=', '+', '#', '@'];
    let max = grid.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = String::new();
    for layer in (0..grid.rows()).rev() {
        out.push_str(&format!("layer {layer:>2} |"));
        for t in 0..grid.cols() {
            let v = grid.at(layer, t);
            let idx = if max == 0.0 {
                0
            } else {
                (((v.abs() / max) * (SHADES.len() - 1) as f64).round() as usize)
                    .min(SHADES.len() - 1)
            };
            let c = SHADES[idx];
            out.push_str(&format!(" {}{}", if v < 0.0 { '-' } else { ' ' }, c));
        }
        out.push('\n');
    }
    out.push_str("          ");
    for w in words {
        out.push_str(&format!(" {:>2}", &w[..w.len().min(2)]));
    }
    out.push('\n');
    out
}
